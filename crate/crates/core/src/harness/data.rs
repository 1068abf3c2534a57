//! Toy 2-D datasets.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};

/// Mixture radius and per-mode std of `gauss8`.
pub const GAUSS8_RADIUS: f64 = 2.0;
pub const GAUSS8_STD: f64 = 0.1;
const MOONS_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gauss8,
    Gauss1,
    Moons,
    Checkerboard,
}

impl DatasetKind {
    /// Number of distinct labels the generator emits.
    pub fn n_classes(self) -> usize {
        match self {
            DatasetKind::Gauss8 => 8,
            DatasetKind::Gauss1 => 1,
            DatasetKind::Moons => 2,
            DatasetKind::Checkerboard => 4,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss8" => Ok(DatasetKind::Gauss8),
            "gauss1" => Ok(DatasetKind::Gauss1),
            "moons" => Ok(DatasetKind::Moons),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            other => Err(invalid(format!("unknown dataset {other:?}"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Gauss8 => "gauss8",
            DatasetKind::Gauss1 => "gauss1",
            DatasetKind::Moons => "moons",
            DatasetKind::Checkerboard => "checkerboard",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Tensor<f64>,
    pub labels: Vec<usize>,
}

pub fn gauss8_center(k: usize) -> [f64; 2] {
    let a = k as f64 * std::f64::consts::FRAC_PI_4;
    [GAUSS8_RADIUS * a.cos(), GAUSS8_RADIUS * a.sin()]
}

/// Deterministic per `(kind, n, seed)`.
pub fn gen_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        let (p, l) = match kind {
            DatasetKind::Gauss8 => {
                let k = rng.gen_range(0..8);
                let c = gauss8_center(k);
                ([c[0] + GAUSS8_STD * e0, c[1] + GAUSS8_STD * e1], k)
            }
            DatasetKind::Gauss1 => ([e0, e1], 0),
            DatasetKind::Moons => {
                let upper = rng.gen_bool(0.5);
                let a = rng.gen_range(0.0..std::f64::consts::PI);
                let (x, y) = if upper {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                ([x + MOONS_NOISE * e0, y + MOONS_NOISE * e1], usize::from(!upper))
            }
            DatasetKind::Checkerboard => {
                let x1: f64 = rng.gen_range(-2.0..2.0);
                let x2: f64 = rng.gen_range(0.0..1.0) - 2.0 * f64::from(rng.gen_range(0u8..2));
                let col = x1.floor();
                let y = x2 + col.rem_euclid(2.0);
                ([x1, y], (col + 2.0) as usize)
            }
        };
        pts.extend_from_slice(&p);
        labels.push(l);
    }
    Ok(Dataset {
        points: Tensor::new(vec![n, 2], pts)?,
        labels,
    })
}

/// Writes `x0,x1[,label]` rows with a header.
pub fn write_points_csv<W: Write>(mut w: W, points: &Tensor<f64>, labels: Option<&[usize]>) -> Result<()> {
    let d = points.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..points.rows() {
        let row: Vec<String> = points.row(i).iter().map(|v| v.to_string()).collect();
        match labels {
            Some(l) => writeln!(w, "{},{}", row.join(","), l[i])?,
            None => writeln!(w, "{}", row.join(","))?,
        }
    }
    Ok(())
}

/// Reads the first `dim` columns of a points CSV written by
/// [`write_points_csv`].
pub fn read_points_csv(text: &str) -> Result<Tensor<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| invalid("empty points file"))?;
    let dim = header.split(',').filter(|h| h.starts_with('x')).count();
    if dim == 0 {
        return Err(invalid("points file has no x columns"));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < dim {
            return Err(invalid(format!("line {}: expected {dim} coordinates", i + 2)));
        }
        for f in &fields[..dim] {
            data.push(
                f.parse::<f64>()
                    .map_err(|e| invalid(format!("line {}: {e}", i + 2)))?,
            );
        }
        rows += 1;
    }
    Tensor::new(vec![rows, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss8_centers() {
        let s = std::f64::consts::SQRT_2;
        let c1 = gauss8_center(1);
        assert!((c1[0] - s).abs() < 1e-15 && (c1[1] - s).abs() < 1e-15);
        let c4 = gauss8_center(4);
        assert!((c4[0] + 2.0).abs() < 1e-15 && c4[1].abs() < 1e-15);
        let d = gen_dataset(DatasetKind::Gauss8, 500, 1).unwrap();
        for (i, &l) in d.labels.iter().enumerate() {
            let c = gauss8_center(l);
            let p = d.points.row(i);
            assert!(((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() < 6.0 * GAUSS8_STD);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [DatasetKind::Gauss8, DatasetKind::Gauss1, DatasetKind::Moons, DatasetKind::Checkerboard] {
            let a = gen_dataset(kind, 100, 9).unwrap();
            assert_eq!(a, gen_dataset(kind, 100, 9).unwrap());
            assert_ne!(a, gen_dataset(kind, 100, 10).unwrap());
            assert!(a.labels.iter().all(|&l| l < kind.n_classes()));
        }
    }

    #[test]
    fn mode_histogram_is_uniform() {
        let n = 8000;
        let d = gen_dataset(DatasetKind::Gauss8, n, 3).unwrap();
        let mut counts = [0usize; 8];
        for &l in &d.labels {
            counts[l] += 1;
        }
        let mean = n as f64 / 8.0;
        let sd = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn checkerboard_occupies_alternate_cells() {
        let d = gen_dataset(DatasetKind::Checkerboard, 2000, 4).unwrap();
        for i in 0..d.points.rows() {
            let p = d.points.row(i);
            let parity = (p[0].floor() + p[1].floor()).rem_euclid(2.0);
            assert_eq!(parity, 0.0, "{p:?}");
        }
    }

    #[test]
    fn rejects_empty_and_unknown() {
        assert!(gen_dataset(DatasetKind::Moons, 0, 0).is_err());
        assert!("spirals".parse::<DatasetKind>().is_err());
        assert_eq!("moons".parse::<DatasetKind>().unwrap(), DatasetKind::Moons);
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_dataset(DatasetKind::Moons, 20, 2).unwrap();
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &d.points, Some(&d.labels)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x0,x1,label\n"));
        assert_eq!(read_points_csv(&text).unwrap(), d.points);
    }
}
