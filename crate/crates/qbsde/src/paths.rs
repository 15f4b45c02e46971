//! Brownian ensembles on a time grid, discrete stochastic integrals and
//! stochastic-exponential weights.
//!
//! All integrands are evaluated at left endpoints (predictable
//! discretization). Ensembles are immutable after generation and every value
//! is a pure function of the seed, so regeneration is bit-exact.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, standard_normal, Stream};

/// Uniform grid t0 = s_0 < s_1 < ... < s_steps = t1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t0 < t1) || steps == 0 {
            return Err(Error::Config(format!(
                "time grid needs t0 < t1 and steps >= 1, got [{t0}, {t1}] with {steps}"
            )));
        }
        Ok(TimeGrid { t0, t1, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + self.dt() * i as f64
    }
}

const MEMORY_BUDGET_BYTES: u64 = 2 << 30;

/// Brownian increments (units sqrt(time)) plus the cumulative states
/// W_{s_i}. When the grid starts after time zero the start states are drawn
/// as N(0, t0) from a dedicated stream, so windows of a pasted solve carry
/// correctly distributed regression states.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub k: usize,
    pub seed: u64,
    /// [n_paths, steps, k]
    pub increments: Array3<f64>,
    /// [n_paths, steps + 1, k]
    states: Array3<f64>,
}

impl PathEnsemble {
    /// State matrix W_{s_i} for grid index i, shape [n_paths, k].
    #[inline]
    pub fn states_at(&self, i: usize) -> ndarray::ArrayView2<'_, f64> {
        self.states.index_axis(Axis(1), i)
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }
}

/// Generate an ensemble; deterministic in `seed` and the shape arguments.
pub fn generate_ensemble(grid: TimeGrid, n_paths: usize, k: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 || k == 0 {
        return Err(Error::Config("n_paths and k must be >= 1".into()));
    }
    let cells = n_paths as u64 * (2 * grid.steps as u64 + 1) * k as u64;
    let bytes = cells * 8;
    if bytes > MEMORY_BUDGET_BYTES {
        return Err(Error::MemoryBudget {
            bytes,
            budget: MEMORY_BUDGET_BYTES,
        });
    }

    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut increments = Array3::zeros((n_paths, grid.steps, k));
    for p in 0..n_paths {
        for s in 0..grid.steps {
            for c in 0..k {
                increments[[p, s, c]] =
                    sqrt_dt * standard_normal(seed, Stream::Increments, p as u64, s as u64, c as u64);
            }
        }
    }

    let sqrt_t0 = if grid.t0 > 0.0 { grid.t0.sqrt() } else { 0.0 };
    let mut states = Array3::zeros((n_paths, grid.steps + 1, k));
    for p in 0..n_paths {
        for c in 0..k {
            let start = if sqrt_t0 > 0.0 {
                sqrt_t0 * standard_normal(seed, Stream::InitialState, p as u64, 0, c as u64)
            } else {
                0.0
            };
            states[[p, 0, c]] = start;
            let mut acc = start;
            for s in 0..grid.steps {
                acc += increments[[p, s, c]];
                states[[p, s + 1, c]] = acc;
            }
        }
    }

    Ok(PathEnsemble {
        grid,
        n_paths,
        k,
        seed,
        increments,
        states,
    })
}

/// Seed for the sub-ensemble of pasting window `index`.
pub fn window_seed(master: u64, index: u32) -> u64 {
    derive_seed(master, index as u64)
}

pub const LOG_WEIGHT_CLIP: f64 = 30.0;

/// Per-path stochastic-exponential weights for driver values evaluated at
/// left endpoints:
///   weight = exp( -sum_s f_s . dW_s - 1/2 sum_s |f_s|^2 dt ).
/// Log-weights are clipped to +-30; the clip count is returned rather than
/// raised since a heavy-tailed discrete exponential is expected behaviour
/// the caller should surface, not a failure.
pub fn stochastic_exponential_weights(
    ensemble: &PathEnsemble,
    f_values: ArrayView3<'_, f64>,
) -> Result<(Array1<f64>, u64)> {
    let shape = f_values.shape();
    if shape != ensemble.increments.shape() {
        return Err(Error::ShapeMismatch {
            op: "stochastic_exponential_weights",
            expected: format!("{:?}", ensemble.increments.shape()),
            got: format!("{shape:?}"),
        });
    }
    if f_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "stochastic_exponential_weights",
            detail: "driver values".into(),
        });
    }
    let dt = ensemble.dt();
    let mut weights = Array1::zeros(ensemble.n_paths);
    let mut clipped = 0u64;
    for p in 0..ensemble.n_paths {
        let mut log_w = 0.0;
        for s in 0..ensemble.grid.steps {
            let mut dot = 0.0;
            let mut nsq = 0.0;
            for c in 0..ensemble.k {
                let f = f_values[[p, s, c]];
                dot += f * ensemble.increments[[p, s, c]];
                nsq += f * f;
            }
            log_w -= dot + 0.5 * nsq * dt;
        }
        if log_w.abs() > LOG_WEIGHT_CLIP {
            clipped += 1;
            log_w = log_w.clamp(-LOG_WEIGHT_CLIP, LOG_WEIGHT_CLIP);
        }
        weights[p] = log_w.exp();
    }
    Ok((weights, clipped))
}

/// Mean and standard error of a weight vector (for the martingale sanity
/// check E[weight] = 1).
pub fn weight_mean_se(weights: &Array1<f64>) -> (f64, f64) {
    let n = weights.len() as f64;
    let mean = weights.sum() / n;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Discrete Ito sums sum_s z_s dW_s (shape [n_paths, d]) and Lebesgue sums
/// sum_s |z_s|^2 dt (shape [n_paths]) for an integrand of shape
/// [n_paths, steps, d, k] flattened to [n_paths, steps, d*k].
pub fn integrate(
    ensemble: &PathEnsemble,
    integrand: ArrayView3<'_, f64>,
    d: usize,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let shape = integrand.shape();
    let expected = [ensemble.n_paths, ensemble.grid.steps, d * ensemble.k];
    if shape != expected {
        return Err(Error::ShapeMismatch {
            op: "integrate",
            expected: format!("{expected:?}"),
            got: format!("{shape:?}"),
        });
    }
    let dt = ensemble.dt();
    let k = ensemble.k;
    let mut ito = Array2::zeros((ensemble.n_paths, d));
    let mut lebesgue = Array1::zeros(ensemble.n_paths);
    for p in 0..ensemble.n_paths {
        let mut quad = 0.0;
        for s in 0..ensemble.grid.steps {
            for row in 0..d {
                let mut acc = 0.0;
                for c in 0..k {
                    let z = integrand[[p, s, row * k + c]];
                    acc += z * ensemble.increments[[p, s, c]];
                    quad += z * z;
                }
                ito[[p, row]] += acc;
            }
        }
        lebesgue[p] = quad * dt;
    }
    Ok((ito, lebesgue))
}

const DUMP_MAGIC: &[u8; 6] = b"QBSDE1";

/// Dump increments to a flat binary file: magic "QBSDE1", then n_paths,
/// steps, k, seed as little-endian u64, then the increment tensor as
/// little-endian f64 in [path, step, component] order.
pub fn dump_ensemble<W: Write>(ensemble: &PathEnsemble, mut out: W) -> Result<()> {
    out.write_all(DUMP_MAGIC)?;
    for v in [
        ensemble.n_paths as u64,
        ensemble.grid.steps as u64,
        ensemble.k as u64,
        ensemble.seed,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in ensemble.increments.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Rebuild an ensemble from a dump; the grid is external context (the file
/// stores shapes and seed only). States are regenerated from the recorded
/// seed, which reproduces the original tensor bit-exactly.
pub fn load_ensemble<R: Read>(mut input: R, grid: TimeGrid) -> Result<PathEnsemble> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Config("bad ensemble magic".into()));
    }
    let mut word = [0u8; 8];
    let mut header = [0u64; 4];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = u64::from_le_bytes(word);
    }
    let [n_paths, steps, k, seed] = header;
    if steps as usize != grid.steps {
        return Err(Error::Config(format!(
            "dump has {steps} steps, grid has {}",
            grid.steps
        )));
    }
    let ensemble = generate_ensemble(grid, n_paths as usize, k as usize, seed)?;
    for v in ensemble.increments.iter() {
        input.read_exact(&mut word)?;
        if f64::from_le_bytes(word).to_bits() != v.to_bits() {
            return Err(Error::Config(
                "dump does not match regenerated ensemble".into(),
            ));
        }
    }
    Ok(ensemble)
}
