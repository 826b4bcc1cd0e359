//! Collocation point sets and measurement grids on axis-aligned boxes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::neuralnet::format_f64;
use crate::rng::Stream;

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("invalid rectangle: {0}")]
    InvalidRectangle(String),
    #[error("sample count must be at least 1")]
    EmptySample,
    #[error("extent {extent} along axis {axis} is not an integer multiple of spacing {spacing}")]
    NonIntegralExtent {
        axis: usize,
        extent: f64,
        spacing: f64,
    },
    #[error("corner points are only defined for two-dimensional domains")]
    NotPlanar,
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Closed axis-aligned box `[lo_0, hi_0] x ... x [lo_{d-1}, hi_{d-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rectangle {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, SamplingError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(SamplingError::InvalidRectangle(
                "bounds must have the same positive dimension".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(SamplingError::InvalidRectangle(format!(
                "need finite lo < hi on every axis, got {lo:?} / {hi:?}"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit_square() -> Self {
        Self::new(vec![0.0, 0.0], vec![1.0, 1.0]).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn contains_strictly(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && (0..self.dim()).all(|i| self.lo[i] < x[i] && x[i] < self.hi[i])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && (0..self.dim()).all(|i| self.lo[i] <= x[i] && x[i] <= self.hi[i])
    }

    /// Point in the closed box with at least one coordinate on a bound.
    pub fn on_boundary(&self, x: &[f64]) -> bool {
        self.contains(x) && (0..self.dim()).any(|i| x[i] == self.lo[i] || x[i] == self.hi[i])
    }

    /// `(d-1)`-dimensional measure of a face orthogonal to `axis`.
    fn face_measure(&self, axis: usize) -> f64 {
        (0..self.dim())
            .filter(|&k| k != axis)
            .map(|k| self.extent(k))
            .product()
    }
}

pub type Point = Vec<f64>;

/// `n` i.i.d. uniform points strictly inside `rect`.
pub fn sample_interior(rect: &Rectangle, n: usize, seed: u64) -> Result<Vec<Point>, SamplingError> {
    if n == 0 {
        return Err(SamplingError::EmptySample);
    }
    let mut stream = Stream::new(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let x: Point = (0..rect.dim())
            .map(|i| rect.lo[i] + rect.extent(i) * stream.unit_open())
            .collect();
        // rounding can land exactly on hi for draws very close to 1
        if rect.contains_strictly(&x) {
            points.push(x);
        }
    }
    Ok(points)
}

/// `n` points uniform with respect to surface measure on the boundary.
///
/// Faces are ordered `(axis 0, lo), (axis 0, hi), (axis 1, lo), ...`; a face
/// is chosen with probability proportional to its measure, then a uniform
/// point on it.
pub fn sample_boundary(rect: &Rectangle, n: usize, seed: u64) -> Result<Vec<Point>, SamplingError> {
    if n == 0 {
        return Err(SamplingError::EmptySample);
    }
    let d = rect.dim();
    let weights: Vec<f64> = (0..2 * d).map(|f| rect.face_measure(f / 2)).collect();
    let total: f64 = weights.iter().sum();
    let mut stream = Stream::new(seed);
    let points = (0..n)
        .map(|_| {
            let target = stream.unit() * total;
            let mut acc = 0.0;
            let mut face = 2 * d - 1;
            for (f, w) in weights.iter().enumerate() {
                acc += w;
                if target < acc {
                    face = f;
                    break;
                }
            }
            let axis = face / 2;
            (0..d)
                .map(|i| {
                    if i == axis {
                        if face.is_multiple_of(2) {
                            rect.lo[i]
                        } else {
                            rect.hi[i]
                        }
                    } else {
                        rect.lo[i] + rect.extent(i) * stream.unit()
                    }
                })
                .collect()
        })
        .collect();
    Ok(points)
}

/// Endpoint-inclusive tensor grid with the given spacing, first coordinate fastest.
pub fn measurement_grid(rect: &Rectangle, spacing: f64) -> Result<Vec<Point>, SamplingError> {
    let counts = grid_counts(rect, spacing)?;
    let total: usize = counts.iter().map(|c| c + 1).product();
    let d = rect.dim();
    let mut points = Vec::with_capacity(total);
    let mut index = vec![0usize; d];
    for _ in 0..total {
        points.push(
            (0..d)
                .map(|i| {
                    if index[i] == counts[i] {
                        rect.hi[i]
                    } else {
                        rect.lo[i] + rect.extent(i) * index[i] as f64 / counts[i] as f64
                    }
                })
                .collect(),
        );
        for i in 0..d {
            index[i] += 1;
            if index[i] <= counts[i] {
                break;
            }
            index[i] = 0;
        }
    }
    Ok(points)
}

/// Number of grid intervals per axis.
pub fn grid_counts(rect: &Rectangle, spacing: f64) -> Result<Vec<usize>, SamplingError> {
    (0..rect.dim())
        .map(|axis| {
            let extent = rect.extent(axis);
            let ratio = extent / spacing;
            let rounded = ratio.round();
            if !(spacing > 0.0) || rounded < 1.0 || (ratio - rounded).abs() > 1e-9 {
                return Err(SamplingError::NonIntegralExtent {
                    axis,
                    extent,
                    spacing,
                });
            }
            Ok(rounded as usize)
        })
        .collect()
}

/// The four vertices of a planar rectangle, first coordinate fastest:
/// `(lo,lo), (hi,lo), (lo,hi), (hi,hi)`.
pub fn corner_points(rect: &Rectangle) -> Result<Vec<Point>, SamplingError> {
    if rect.dim() != 2 {
        return Err(SamplingError::NotPlanar);
    }
    Ok(vec![
        vec![rect.lo[0], rect.lo[1]],
        vec![rect.hi[0], rect.lo[1]],
        vec![rect.lo[0], rect.hi[1]],
        vec![rect.hi[0], rect.hi[1]],
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Interior,
    Boundary,
    Corner,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Interior => "interior",
            Part::Boundary => "boundary",
            Part::Corner => "corner",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interior" => Ok(Part::Interior),
            "boundary" => Ok(Part::Boundary),
            "corner" => Ok(Part::Corner),
            other => Err(SamplingError::Format(format!("unknown part {other:?}"))),
        }
    }
}

/// Interior, boundary and (optionally) corner collocation points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub interior: Vec<Point>,
    pub boundary: Vec<Point>,
    pub corners: Vec<Point>,
    pub seed: u64,
    pub label: String,
}

impl Dataset {
    /// Interior points from stream `seed`, boundary points from an
    /// independent stream derived from `seed`.
    pub fn generate(
        rect: &Rectangle,
        n_interior: usize,
        n_boundary: usize,
        seed: u64,
        with_corners: bool,
        label: impl Into<String>,
    ) -> Result<Self, SamplingError> {
        let interior = sample_interior(rect, n_interior, seed)?;
        let boundary_seed = Stream::derived(seed, 1).next_u64();
        let boundary = sample_boundary(rect, n_boundary, boundary_seed)?;
        let corners = if with_corners {
            corner_points(rect)?
        } else {
            Vec::new()
        };
        Ok(Self {
            interior,
            boundary,
            corners,
            seed,
            label: label.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.interior
            .first()
            .or(self.boundary.first())
            .map_or(0, Vec::len)
    }

    /// CSV with a `# seed=<n> label=<text>` metadata line, a
    /// `part,x1,...,xd` header, and coordinates to 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), SamplingError> {
        writeln!(out, "# seed={} label={}", self.seed, self.label)?;
        let d = self.dim();
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["part".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        writer.write_record(&header)?;
        for (part, points) in [
            (Part::Interior, &self.interior),
            (Part::Boundary, &self.boundary),
            (Part::Corner, &self.corners),
        ] {
            for p in points {
                let mut record = vec![part.as_str().to_string()];
                record.extend(p.iter().map(|&x| format_f64(x)));
                writer.write_record(&record)?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self, SamplingError> {
        let mut meta = String::new();
        input.read_line(&mut meta)?;
        let meta = meta
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| SamplingError::Format("missing metadata line".into()))?;
        let mut seed = None;
        let mut label = String::new();
        let meta = meta.trim();
        if let Some(rest) = meta.strip_prefix("seed=") {
            let (s, tail) = rest.split_once(' ').unwrap_or((rest, ""));
            seed = s.parse::<u64>().ok();
            label = tail.strip_prefix("label=").unwrap_or("").to_string();
        }
        let seed = seed.ok_or_else(|| SamplingError::Format("missing seed".into()))?;

        let mut reader = csv::Reader::from_reader(input);
        let mut ds = Dataset {
            interior: Vec::new(),
            boundary: Vec::new(),
            corners: Vec::new(),
            seed,
            label,
        };
        for record in reader.records() {
            let record = record?;
            let part: Part = record
                .get(0)
                .ok_or_else(|| SamplingError::Format("empty record".into()))?
                .parse()?;
            let point = record
                .iter()
                .skip(1)
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| SamplingError::Format(format!("bad coordinate {s:?}: {e}")))
                })
                .collect::<Result<Point, _>>()?;
            match part {
                Part::Interior => ds.interior.push(point),
                Part::Boundary => ds.boundary.push(point),
                Part::Corner => ds.corners.push(point),
            }
        }
        Ok(ds)
    }
}
