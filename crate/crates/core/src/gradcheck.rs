// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference check of [`SaeParams::backward`].
//!
//! Each seed builds a random SAE and a random input token, then compares the
//! analytic gradient of the reconstruction loss against central differences
//! for every parameter coordinate. The loss is piecewise smooth: it has kinks
//! where a pre-activation crosses zero or where the TopK support changes.
//! Coordinates are therefore skipped when
//!
//! * the token itself sits within `margin` of such a boundary (an active
//!   pre-activation close to zero, or the K-th and (K+1)-th ReLU values
//!   closer than `margin`), or
//! * nudging the coordinate by `±eps` changes the support or the set of
//!   strictly positive active units.
//!
//! The error of one coordinate is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)`; the floor keeps gradients that are zero up to
//! rounding from producing huge ratios.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::sae::{code_from_pre, init_params, ParamGroups, SaeConfig, SaeParams, SparseCode};
use crate::{Error, Result};

/// Settings of a gradient check run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub topk: usize,
    pub seeds: u64,
    /// Central-difference step.
    pub eps: f64,
    /// Distance to a ReLU/TopK boundary below which a token is skipped.
    pub margin: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            latent_dim: 32,
            topk: 4,
            seeds: 100,
            eps: 1e-5,
            margin: 1e-6,
            floor: 1e-6,
        }
    }
}

/// Outcome of a gradient check run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Seed and flat coordinate index of the worst error.
    pub worst: Option<(u64, usize)>,
    pub checked: usize,
    pub skipped: usize,
    /// Seeds whose token sat on a boundary and was skipped entirely.
    pub skipped_tokens: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// A random SAE (untied encoder, nonzero biases) and one input token.
pub fn random_instance(cfg: &GradCheckConfig, seed: u64) -> Result<(SaeParams, Vec<f64>)> {
    let (d, m) = (cfg.input_dim, cfg.latent_dim);
    let sae_cfg = SaeConfig {
        input_dim: d,
        latent_dim: m,
        topk: cfg.topk,
        ..SaeConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let small = Normal::new(0.0, 0.1).expect("valid normal");
    let mean: Vec<f64> = (0..d).map(|_| small.sample(&mut rng)).collect();
    let mut params = init_params(&sae_cfg, &mean, seed)?;
    let scale = 1.0 / (d as f64).sqrt();
    let w_enc: Vec<f64> = (0..m * d).map(|_| scale * unit.sample(&mut rng)).collect();
    params.w_enc = Matrix::from_vec(m, d, w_enc)?;
    params.b_enc = (0..m).map(|_| small.sample(&mut rng)).collect();
    let h = (0..d).map(|_| unit.sample(&mut rng)).collect();
    Ok((params, h))
}

fn active_pattern(code: &SparseCode) -> (Vec<usize>, Vec<usize>) {
    let positive = code
        .support
        .iter()
        .copied()
        .filter(|&i| code.values[i] > 0.0)
        .collect();
    (code.support.clone(), positive)
}

/// Smallest distance from `pre` to a ReLU or TopK boundary.
fn boundary_distance(pre: &[f64], k: usize) -> f64 {
    let mut relu: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
    relu.sort_by(|a, b| b.total_cmp(a));
    let mut dist = f64::INFINITY;
    if k < relu.len() && relu[k - 1] > 0.0 {
        dist = dist.min(relu[k - 1] - relu[k]);
    }
    for &p in pre {
        dist = dist.min(p.abs());
    }
    dist
}

/// Runs the check for one seed, folding results into `report`.
pub fn check_seed(cfg: &GradCheckConfig, seed: u64, report: &mut GradCheckReport) -> Result<()> {
    let (params, h) = random_instance(cfg, seed)?;
    let k = cfg.topk;
    let (pre, _) = params.pre_activations(&h)?;
    if boundary_distance(&pre, k) < cfg.margin {
        report.skipped_tokens += 1;
        return Ok(());
    }
    let base = active_pattern(&code_from_pre(&pre, k)?);
    let analytic = params.backward(&h, k)?.flatten();

    let mut probe = params.clone();
    let mut eval = |flat: usize, delta: f64| -> Result<(f64, bool)> {
        set_flat(&mut probe, flat, delta);
        let f = probe.forward(&h, k);
        set_flat(&mut probe, flat, -delta);
        let f = f?;
        Ok((f.mse, active_pattern(&f.code) == base))
    };
    for (flat, &a) in analytic.iter().enumerate() {
        let (up, same_up) = eval(flat, cfg.eps)?;
        let (down, same_down) = eval(flat, -cfg.eps)?;
        if !(same_up && same_down) {
            report.skipped += 1;
            continue;
        }
        let n = (up - down) / (2.0 * cfg.eps);
        let err = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((seed, flat));
        }
    }
    Ok(())
}

/// Adds `delta` to flat coordinate `flat` (groups in checkpoint order).
fn set_flat(params: &mut SaeParams, mut flat: usize, delta: f64) {
    for group in params.groups_mut() {
        if flat < group.len() {
            group[flat] += delta;
            return;
        }
        flat -= group.len();
    }
    panic!("flat index out of range");
}

/// Checks seeds `0..cfg.seeds`.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let positive = |x: f64| x > 0.0 && x.is_finite();
    if cfg.seeds == 0 || !positive(cfg.eps) || !positive(cfg.floor) || cfg.margin < 0.0 {
        return Err(Error::Param(
            "gradient check needs seeds >= 1, eps > 0, floor > 0 and margin >= 0".into(),
        ));
    }
    let mut report = GradCheckReport::default();
    for seed in 0..cfg.seeds {
        check_seed(cfg, seed, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_is_within_tolerance() {
        let cfg = GradCheckConfig {
            seeds: 10,
            ..GradCheckConfig::default()
        };
        let r = gradient_check(&cfg).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
        assert!(r.checked > r.skipped, "{r:?}");
    }

    #[test]
    fn boundary_distance_sees_ties_and_zero_crossings() {
        assert_eq!(boundary_distance(&[3.0, 2.0, 2.0, -1.0], 2), 0.0);
        assert!((boundary_distance(&[3.0, 2.0, 1.0, -0.5], 2) - 0.5).abs() < 1e-12);
        assert!((boundary_distance(&[3.0, 2.0, 1.0e-7, -1.0], 1) - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_settings() {
        let bad = GradCheckConfig {
            seeds: 0,
            ..GradCheckConfig::default()
        };
        assert!(gradient_check(&bad).is_err());
    }
}
