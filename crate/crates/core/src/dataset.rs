//! Synthetic class-conditional 2-D datasets.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::ConditionToken;
use crate::error::{Error, Result};
use crate::oracle::GmmCond;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Four classes on a ring of eight isotropic modes; each class owns two
    /// modes a quarter turn apart, interleaved with its neighbour's.
    Gmm4class,
    /// Two classes alternating over a 4x4 board on `[-2, 2]^2`.
    Checkerboard,
    /// Two interleaved spirals.
    TwoSpirals,
    /// Mixture given explicitly in `dataset.mixture`.
    Gmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub preset: Preset,
    pub ring_radius: f64,
    pub ring_std: f64,
    pub mixture: Option<GmmCond>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            preset: Preset::Gmm4class,
            ring_radius: 3.0,
            ring_std: 0.25,
            mixture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Gmm(GmmCond),
    Checkerboard,
    TwoSpirals,
}

const BOARD_CELLS: usize = 4;
const BOARD_EXTENT: f64 = 2.0;
const SPIRAL_TURNS: f64 = 1.5;
const SPIRAL_RADIUS: f64 = 3.0;
const SPIRAL_NOISE: f64 = 0.1;

impl Dataset {
    pub fn from_spec(spec: &DatasetSpec) -> Result<Self> {
        match spec.preset {
            Preset::Gmm4class => {
                if !(spec.ring_radius > 0.0 && spec.ring_std > 0.0) {
                    return Err(Error::config("dataset.ring_radius", "ring radius and std must be positive"));
                }
                Ok(Self::Gmm(GmmCond::interleaved_ring(4, spec.ring_radius, spec.ring_std)?))
            }
            Preset::Checkerboard => Ok(Self::Checkerboard),
            Preset::TwoSpirals => Ok(Self::TwoSpirals),
            Preset::Gmm => {
                let g = spec
                    .mixture
                    .clone()
                    .ok_or_else(|| Error::config("dataset.mixture", "required when preset = \"gmm\""))?;
                g.validate()?;
                if g.n_classes() > u16::MAX as usize / 2 {
                    return Err(Error::config("dataset.mixture", "too many classes"));
                }
                Ok(Self::Gmm(g))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gmm(g) => g.dim(),
            _ => 2,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Self::Gmm(g) => g.n_classes(),
            _ => 2,
        }
    }

    /// Closed-form oracle, when one exists.
    pub fn oracle(&self) -> Option<&GmmCond> {
        match self {
            Self::Gmm(g) => Some(g),
            _ => None,
        }
    }

    fn class_prior(&self) -> Vec<f64> {
        match self {
            Self::Gmm(g) => g.priors.clone(),
            _ => vec![0.5, 0.5],
        }
    }

    /// Exact draws from the class-conditional (or, for `Null`, marginal) distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, cond: ConditionToken) -> Result<Array2<f64>> {
        let class = match cond {
            ConditionToken::Class(c) if (c as usize) < self.n_classes() => Some(c),
            ConditionToken::Null => None,
            other => return Err(Error::Argument(format!("cannot sample data for {other:?}"))),
        };
        if let Self::Gmm(g) = self {
            return g.sample(rng, n, cond);
        }
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let c = class.unwrap_or_else(|| rng.gen_range(0..2));
            let p = match self {
                Self::Checkerboard => board_point(rng, c),
                _ => spiral_point(rng, c),
            };
            row[0] = p[0];
            row[1] = p[1];
        }
        Ok(out)
    }

    /// Labelled draws with classes from the prior.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<(Array2<f64>, Vec<u16>)> {
        let prior = self.class_prior();
        let pick = rand::distributions::WeightedIndex::new(&prior).map_err(|e| Error::Argument(e.to_string()))?;
        let labels: Vec<u16> = (0..n).map(|_| rng.sample(&pick) as u16).collect();
        let mut x = Array2::zeros((n, self.dim()));
        for (r, &c) in labels.iter().enumerate() {
            let row = self.sample(rng, 1, ConditionToken::Class(c))?;
            x.row_mut(r).assign(&row.row(0));
        }
        Ok((x, labels))
    }
}

fn board_point<R: Rng + ?Sized>(rng: &mut R, class: u16) -> [f64; 2] {
    let cell = 2.0 * BOARD_EXTENT / BOARD_CELLS as f64;
    // Cells with (i + j) % 2 == class, eight per class.
    let k = rng.gen_range(0..BOARD_CELLS * BOARD_CELLS / 2);
    let i = k / (BOARD_CELLS / 2);
    let j = 2 * (k % (BOARD_CELLS / 2)) + (i + class as usize) % 2;
    [
        -BOARD_EXTENT + (i as f64 + rng.gen::<f64>()) * cell,
        -BOARD_EXTENT + (j as f64 + rng.gen::<f64>()) * cell,
    ]
}

fn spiral_point<R: Rng + ?Sized>(rng: &mut R, class: u16) -> [f64; 2] {
    let u: f64 = rng.gen();
    let theta = u.sqrt() * SPIRAL_TURNS * std::f64::consts::TAU;
    let r = SPIRAL_RADIUS * theta / (SPIRAL_TURNS * std::f64::consts::TAU);
    let phase = std::f64::consts::PI * class as f64;
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    [
        r * (theta + phase).cos() + SPIRAL_NOISE * nx,
        r * (theta + phase).sin() + SPIRAL_NOISE * ny,
    ]
}
