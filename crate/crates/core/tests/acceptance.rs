//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.
//!
//! Criteria 4 and 5 train the full ten-seed ensembles and dominate the
//! runtime (well over an hour on a single core). Set
//! `PDENET_ACCEPTANCE_SKIP_SLOW=1` to report them as SKIP during development.
//! Artifacts are kept under `$CARGO_TARGET_TMPDIR/acceptance`.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use pdenet::evaluate::{kendall_tau, problem_grid};
use pdenet::experiment::{Experiment, ExperimentConfig};
use pdenet::neuralnet::{forward, forward_jet, loss_gradient, NetworkSpec};
use pdenet::objective::{FnObjective, Objective};
use pdenet::optimize::{bfgs_minimize, lagrangian_descent, BfgsConfig, LagrangianConfig, Termination};
use pdenet::problems::{Architecture, CollocationLoss, LossVariant, Problem};
use pdenet::rng::Stream;
use pdenet::sampling::Dataset;

// Tolerances and budgets, pinned.
const JET_GRAD_REL: f64 = 1e-6;
const JET_HESS_REL: f64 = 1e-4;
const LOSS_GRAD_REL: f64 = 1e-5;
const JET_CASES: usize = 100;
/// Absolute floors for entries near zero, where central differences carry
/// only truncation and rounding noise.
const JET_GRAD_FLOOR: f64 = 1e-8;
const JET_HESS_FLOOR: f64 = 1e-7;
const LOSS_GRAD_FLOOR: f64 = 1e-9;
const C1_SECONDS: f64 = 10.0;
const RESIDUAL_ABS: f64 = 1e-10;
const C2_SECONDS: f64 = 5.0;
const POISSON_GRID: usize = 10201;
const KOVASZNAY_GRID: usize = 30351;
const KOVASZNAY_PARAMS: [usize; 4] = [147, 419, 691, 963];
const POISSON_PARAMS: usize = 65;
const POISSON_BEST: f64 = 1e-4;
const POISSON_MEAN: f64 = 5e-4;
const KOVASZNAY_BEST: f64 = 1e-3;
const ENSEMBLE_SEEDS: usize = 10;
const TAU_CASES: usize = 1000;
const ROSENBROCK_TOL: f64 = 1e-6;
const ROSENBROCK_ITERS: usize = 200;
const SPHERE_ITERS: usize = 5;
const LAGRANGIAN_ITERS: usize = 300;
const DETERMINISM_ITERS: usize = 300;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn skip_slow() -> bool {
    std::env::var("PDENET_ACCEPTANCE_SKIP_SLOW").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn shipped_config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.toml"));
    ExperimentConfig::load(&path).unwrap()
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn within(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + floor
}

fn random_spec(s: &mut Stream) -> NetworkSpec {
    let input = 1 + (s.next_u64() % 3) as usize;
    let output = 1 + (s.next_u64() % 3) as usize;
    let layers = 1 + (s.next_u64() % 3) as usize;
    let widths: Vec<usize> = (0..layers).map(|_| 2 + (s.next_u64() % 7) as usize).collect();
    NetworkSpec::new(input, &widths, output)
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    // Steps for the first- and second-difference stencils.
    let (h, h2) = (1e-4, 1e-3);
    let mut s = Stream::new(2024);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for case in 0..JET_CASES {
        let spec = random_spec(&mut s);
        let theta: Vec<f64> = (0..spec.param_count()).map(|_| s.uniform(-1.5, 1.5)).collect();
        let x: Vec<f64> = (0..spec.input_dim).map(|_| s.uniform(-1.0, 1.0)).collect();
        let jet = forward_jet(&spec, &theta, &x).unwrap();
        let f = |y: &[f64]| forward(&spec, &theta, y).unwrap();
        let at = |di: usize, si: f64, dj: usize, sj: f64| {
            let mut y = x.clone();
            y[di] += si;
            y[dj] += sj;
            f(&y)
        };
        let f0 = f(&x);
        let d = spec.input_dim;
        for i in 0..d {
            let (fp, fm) = (at(i, h, i, 0.0), at(i, -h, i, 0.0));
            let (fp2, fm2) = (at(i, h2, i, 0.0), at(i, -h2, i, 0.0));
            for j in 0..d {
                let (pp, pm, mp, mm) = if i == j {
                    (vec![], vec![], vec![], vec![])
                } else {
                    (at(i, h2, j, h2), at(i, h2, j, -h2), at(i, -h2, j, h2), at(i, -h2, j, -h2))
                };
                for k in 0..spec.output_dim {
                    let fd2 = if i == j {
                        (fp2[k] - 2.0 * f0[k] + fm2[k]) / (h2 * h2)
                    } else {
                        (pp[k] - pm[k] - mp[k] + mm[k]) / (4.0 * h2 * h2)
                    };
                    let an = jet.hessian[k][i][j];
                    if within(an, fd2, JET_HESS_REL, JET_HESS_FLOOR) {
                        if an.abs() >= 10.0 * JET_HESS_FLOOR / JET_HESS_REL {
                            worst_h = worst_h.max(rel_err(an, fd2));
                        }
                    } else {
                        failures.push(format!("case {case} hessian[{k}][{i}][{j}] {an} vs {fd2}"));
                    }
                }
            }
            for k in 0..spec.output_dim {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                let an = jet.grad[k][i];
                if within(an, fd, JET_GRAD_REL, JET_GRAD_FLOOR) {
                    if an.abs() >= 10.0 * JET_GRAD_FLOOR / JET_GRAD_REL {
                        worst_g = worst_g.max(rel_err(an, fd));
                    }
                } else {
                    failures.push(format!("case {case} grad[{k}][{i}] {an} vs {fd}"));
                }
            }
        }
    }

    // Loss gradients of every variant on both problems.
    let mut worst_l = 0.0f64;
    let mut loss_checks = 0;
    let setups = [
        (Problem::from_id("poisson-manufactured").unwrap(), Architecture::poisson(2, 5), true),
        (Problem::from_id("kovasznay").unwrap(), Architecture::kovasznay(1, 1, 4), false),
    ];
    for (problem, arch, corners) in &setups {
        let ds = Dataset::generate(problem.domain(), 12, 10, 9, *corners, "acceptance").unwrap();
        let mut variants = vec![
            LossVariant::Plain,
            LossVariant::Sqrt,
            LossVariant::Penalty { lambda: 0.4, sqrt: false },
            LossVariant::Penalty { lambda: 2.5, sqrt: true },
        ];
        if *corners {
            variants.push(LossVariant::SqrtCorner);
            variants.push(LossVariant::SqrtCornerEta { eta: 0.3 });
        }
        for v in variants {
            let loss = CollocationLoss::new(problem, v, &ds, arch).unwrap();
            let theta: Vec<f64> = (0..arch.param_count()).map(|_| s.uniform(-1.0, 1.0)).collect();
            let (_, grad) = loss_gradient(&loss, &theta).unwrap();
            let hp = 1e-6;
            for p in 0..theta.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[p] += hp;
                tm[p] -= hp;
                let fd = (loss.value(&tp) - loss.value(&tm)) / (2.0 * hp);
                loss_checks += 1;
                if within(grad[p], fd, LOSS_GRAD_REL, LOSS_GRAD_FLOOR) {
                    if grad[p].abs() >= 10.0 * LOSS_GRAD_FLOOR / LOSS_GRAD_REL {
                        worst_l = worst_l.max(rel_err(grad[p], fd));
                    }
                } else {
                    failures.push(format!("{} {} param {p}: {} vs {fd}", problem.id(), v.label(), grad[p]));
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let mut detail = format!(
        "{JET_CASES} jets; worst rel error over entries well above the absolute floor: grad {worst_g:.1e} \
         (tol {JET_GRAD_REL:.0e}, floor {JET_GRAD_FLOOR:.0e}), hessian {worst_h:.1e} (tol {JET_HESS_REL:.0e}, \
         floor {JET_HESS_FLOOR:.0e}); {loss_checks} loss-gradient entries, worst rel {worst_l:.1e} \
         (tol {LOSS_GRAD_REL:.0e}, floor {LOSS_GRAD_FLOOR:.0e}); {secs:.2}s (limit {C1_SECONDS}s)"
    );
    if let Some(first) = failures.first() {
        detail.push_str(&format!("; {} mismatches, first: {first}", failures.len()));
    }
    Verdict::new(failures.is_empty() && secs < C1_SECONDS, detail)
}

fn criterion_2() -> Verdict {
    let started = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (id, expected) in [("poisson-manufactured", POISSON_GRID), ("kovasznay", KOVASZNAY_GRID)] {
        let problem = Problem::from_id(id).unwrap();
        let grid = problem_grid(&problem).unwrap();
        let mut worst = 0.0f64;
        for x in &grid {
            let jets = problem.analytic_jets(x);
            for r in problem.residuals(&jets, x) {
                worst = worst.max(r.abs());
            }
        }
        // The closed-form jets themselves against differences of the field.
        let h = 1e-5;
        let mut jet_err = 0.0f64;
        for x in grid.iter().step_by(97) {
            let jets = problem.analytic_jets(x);
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let (ep, em) = (problem.exact(&xp), problem.exact(&xm));
                for k in 0..jets.primary.outputs() {
                    let fd = (ep[k] - em[k]) / (2.0 * h);
                    jet_err = jet_err.max(rel_err(jets.primary.grad[k][j], fd).min((jets.primary.grad[k][j] - fd).abs()));
                }
            }
        }
        let good = grid.len() == expected && worst <= RESIDUAL_ABS && jet_err < 1e-7;
        ok &= good;
        parts.push(format!(
            "{id}: {} points (expected {expected}), max |residual| {worst:.1e}, jet vs differences {jet_err:.1e}",
            grid.len()
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        ok && secs < C2_SECONDS,
        format!("{}; tol {RESIDUAL_ABS:.0e}; {secs:.2}s (limit {C2_SECONDS}s)", parts.join("; ")),
    )
}

fn criterion_3() -> Verdict {
    let got: Vec<usize> = (1..=4)
        .map(|i| Architecture::kovasznay_numbered(i).unwrap().param_count())
        .collect();
    let poisson = Architecture::poisson(1, 16).param_count();
    Verdict::new(
        got == KOVASZNAY_PARAMS && poisson == POISSON_PARAMS,
        format!("Kovasznay architectures {got:?} (expected {KOVASZNAY_PARAMS:?}), Poisson 2-16-1 {poisson} (expected {POISSON_PARAMS})"),
    )
}

fn run_ensemble(config: &str, dir: &Path) -> Result<(pdenet::experiment::EnsembleSummary, Vec<Termination>), String> {
    let exp = Experiment::new(shipped_config(config), Some(dir.to_path_buf())).map_err(|e| e.to_string())?;
    let summary = exp.ensemble(Some(jobs())).map_err(|e| e.to_string())?;
    let mut terms = Vec::new();
    for seed in &summary.seeds {
        let text = std::fs::read_to_string(dir.join(format!("run-seed{seed}.json"))).map_err(|e| e.to_string())?;
        let run: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let t: Termination = serde_json::from_value(run["termination"].clone()).map_err(|e| e.to_string())?;
        terms.push(t);
    }
    Ok((summary, terms))
}

fn termination_counts(terms: &[Termination]) -> String {
    let mut names: Vec<&str> = terms.iter().map(|t| t.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names
        .iter()
        .map(|n| format!("{n} x{}", terms.iter().filter(|t| t.as_str() == *n).count()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_4() -> Verdict {
    let started = Instant::now();
    let dir = workdir("poisson-ensemble");
    let (summary, terms) = match run_ensemble("poisson-ds3-h1-ensemble", &dir) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("ensemble failed: {e}")),
    };
    let r = &summary.report;
    let members = r.member_reports.len();
    let pass = members == ENSEMBLE_SEEDS && r.best <= POISSON_BEST && r.mu <= POISSON_MEAN;
    Verdict::new(
        pass,
        format!(
            "{members}/{ENSEMBLE_SEEDS} members, best {:.2e} (limit {POISSON_BEST:.0e}), mean {:.2e} \
             (limit {POISSON_MEAN:.0e}), sigma {:.2e}, mu_tilde {:.2e}, tau {}; terminations: {}; {:.0}s",
            r.best,
            r.mu,
            r.sigma,
            r.mu_tilde,
            r.tau.map_or("n/a".into(), |t| format!("{t:.3}")),
            termination_counts(&terms),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_5() -> Verdict {
    let started = Instant::now();
    let dir = workdir("kovasznay-ensemble");
    let (summary, terms) = match run_ensemble("kovasznay-ds2-a2-ensemble", &dir) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("ensemble failed: {e}")),
    };
    let r = &summary.report;
    let members = r.member_reports.len();
    let pass = members == ENSEMBLE_SEEDS && r.best <= KOVASZNAY_BEST && r.mu_tilde <= r.mu;
    Verdict::new(
        pass,
        format!(
            "{members}/{ENSEMBLE_SEEDS} members, best {:.2e} (limit {KOVASZNAY_BEST:.0e}), mu {:.2e}, \
             mu_tilde {:.2e} (must not exceed mu), sigma {:.2e}, tau {}; terminations: {}; {:.0}s",
            r.best,
            r.mu,
            r.mu_tilde,
            r.sigma,
            r.tau.map_or("n/a".into(), |t| format!("{t:.3}")),
            termination_counts(&terms),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn brute_tau(p: &[(f64, f64)]) -> f64 {
    let n = p.len();
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (p[i].0 - p[j].0) * (p[i].1 - p[j].1);
            if s > 0.0 {
                score += 1;
            } else if s < 0.0 {
                score -= 1;
            }
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

fn criterion_6() -> Verdict {
    let mut s = Stream::new(77);
    let mut mismatches = 0;
    for _ in 0..TAU_CASES {
        let n = 2 + (s.next_u64() % 80) as usize;
        let range = 1 + s.next_u64() % 20;
        let p: Vec<(f64, f64)> = (0..n)
            .map(|_| ((s.next_u64() % range) as f64, (s.next_u64() % range) as f64))
            .collect();
        if kendall_tau(&p).unwrap() != brute_tau(&p) {
            mismatches += 1;
        }
    }
    let same: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, (i * 3) as f64)).collect();
    let reversed: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, -(i as f64))).collect();
    let (t_same, t_rev) = (kendall_tau(&same).unwrap(), kendall_tau(&reversed).unwrap());
    let single = kendall_tau(&[(3.0, 4.0), (1.0, 0.0)]).unwrap();
    Verdict::new(
        mismatches == 0 && t_same == 1.0 && t_rev == -1.0 && single == 1.0,
        format!(
            "{mismatches} mismatches over {TAU_CASES} random inputs; identical {t_same}, reversed {t_rev}, {{(3,4),(1,0)}} {single}"
        ),
    )
}

fn criterion_7() -> Verdict {
    let cfg = BfgsConfig { max_iterations: ROSENBROCK_ITERS, ..Default::default() };
    let rosen = FnObjective::new(2, |x: &[f64], g: &mut [f64]| {
        let (a, b) = (1.0 - x[0], x[1] - x[0] * x[0]);
        g[0] = -2.0 * a - 400.0 * x[0] * b;
        g[1] = 200.0 * b;
        a * a + 100.0 * b * b
    });
    let r = bfgs_minimize(&rosen, &[-1.2, 1.0], &cfg).unwrap();
    let dist = ((r.theta[0] - 1.0).powi(2) + (r.theta[1] - 1.0).powi(2)).sqrt();
    let sphere = FnObjective::new(5, |x: &[f64], g: &mut [f64]| {
        let mut v = 0.0;
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = 2.0 * xi;
            v += xi * xi;
        }
        v
    });
    let sp = bfgs_minimize(&sphere, &[1.0, -2.0, 3.0, 0.5, -0.25], &cfg).unwrap();
    let sp_norm = sp.theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let decrease = r
        .steps
        .iter()
        .chain(&sp.steps)
        .all(|st| st.satisfies_sufficient_decrease(cfg.wolfe_c1));
    let pass = dist <= ROSENBROCK_TOL
        && r.iterations <= ROSENBROCK_ITERS
        && sp_norm <= 1e-8
        && sp.iterations <= SPHERE_ITERS
        && decrease;
    Verdict::new(
        pass,
        format!(
            "Rosenbrock distance to (1,1) {dist:.1e} (tol {ROSENBROCK_TOL:.0e}) after {} iterations \
             (limit {ROSENBROCK_ITERS}), {}; sphere |x| {sp_norm:.1e} in {} iterations (limit {SPHERE_ITERS}); sufficient decrease on every step: {decrease}",
            r.iterations,
            r.termination.as_str(),
            sp.iterations
        ),
    )
}

fn criterion_8() -> Verdict {
    let problem = Problem::from_id("poisson-manufactured").unwrap();
    let arch = Architecture::poisson(1, 16);
    let ds = Dataset::generate(problem.domain(), 1000, 1000, 42, true, "acceptance").unwrap();
    let loss = CollocationLoss::new(&problem, LossVariant::Plain, &ds, &arch).unwrap();
    let theta0 = arch.init_xavier(42).0;
    let bfgs = BfgsConfig { max_iterations: LAGRANGIAN_ITERS, ..Default::default() };
    let lag = LagrangianConfig { n: 1, lambda0: 1.0, ..Default::default() };
    let plain = bfgs_minimize(&loss, &theta0, &bfgs).unwrap();
    let outer = lagrangian_descent(&loss, &theta0, &lag, &bfgs).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_theta = bits(&plain.theta) == bits(&outer.theta);
    let same_history = outer.inner.len() == 1 && bits(&outer.inner[0].loss_history) == bits(&plain.loss_history);
    let same_outcome = outer.inner.len() == 1 && outer.inner[0] == plain;
    Verdict::new(
        same_theta && same_history && same_outcome && outer.used_sqrt == [false],
        format!(
            "{} BFGS iterations ({}), final loss {:.3e}; identical theta: {same_theta}, loss trajectory: {same_history}, \
             full step records: {same_outcome}; sqrt switch used: {:?}",
            plain.iterations,
            plain.termination.as_str(),
            plain.final_loss(),
            outer.used_sqrt
        ),
    )
}

fn criterion_9(poisson_member: Option<PathBuf>) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    // Kovasznay and Poisson (with corners) on reduced iteration caps, each
    // trained twice in fresh directories.
    for name in ["kovasznay-ds2-a2", "poisson-ds3-h1"] {
        let mut config = shipped_config(name);
        config.bfgs.max_iterations = DETERMINISM_ITERS;
        if name.starts_with("poisson") {
            config.loss = LossVariant::SqrtCornerEta { eta: 0.5 };
        }
        let mut files = Vec::new();
        for rep in 0..2 {
            let dir = workdir(&format!("determinism-{name}-{rep}"));
            let exp = Experiment::new(config.clone(), Some(dir)).unwrap();
            exp.sample(&[42]).unwrap();
            let run = exp.train(42).unwrap();
            files.push((std::fs::read(&run.model_file).unwrap(), std::fs::read(&run.history_file).unwrap()));
        }
        let same = files[0] == files[1];
        ok &= same;
        parts.push(format!("{name} ({DETERMINISM_ITERS} iterations): identical model and history bytes: {same}"));
    }
    // A full-length member of the criterion 4 ensemble, retrained alone.
    match poisson_member {
        Some(member) => {
            let dir = workdir("determinism-poisson-full");
            let exp = Experiment::new(shipped_config("poisson-ds3-h1-ensemble"), Some(dir)).unwrap();
            exp.sample(&[42]).unwrap();
            let run = exp.train(42).unwrap();
            let same = std::fs::read(&run.model_file).unwrap() == std::fs::read(&member).unwrap();
            ok &= same;
            parts.push(format!("poisson-ds3-h1-ensemble seed 42 retrained outside the worker pool: identical: {same}"));
        }
        None => parts.push("full-length retrain skipped (criterion 4 did not run)".into()),
    }
    Verdict::new(ok, parts.join("; "))
}

fn run(n: usize, f: impl FnOnce() -> Verdict) -> bool {
    let started = Instant::now();
    let v = panic::catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
    println!(
        "criterion {n}: {} ({:.1}s) {}",
        if v.pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        v.detail
    );
    v.pass
}

fn main() {
    println!("acceptance suite, {} worker(s)", jobs());
    let mut all = true;
    all &= run(1, criterion_1);
    all &= run(2, criterion_2);
    all &= run(3, criterion_3);
    all &= run(6, criterion_6);
    all &= run(7, criterion_7);
    all &= run(8, criterion_8);
    let slow = skip_slow();
    if slow {
        println!("criterion 4: SKIP (PDENET_ACCEPTANCE_SKIP_SLOW)");
        println!("criterion 5: SKIP (PDENET_ACCEPTANCE_SKIP_SLOW)");
    } else {
        all &= run(4, criterion_4);
        all &= run(5, criterion_5);
    }
    let member = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance/poisson-ensemble/model-seed42.json");
    let member = (!slow && member.exists()).then_some(member);
    all &= run(9, || criterion_9(member));
    if !all {
        println!("acceptance: FAIL");
        std::process::exit(1);
    }
    println!("acceptance: PASS");
}

