// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept erasure by decoder-direction subtraction.
//!
//! For every token `h` of the input prompt the SAE code `z` is computed once,
//! the manipulation mask keeps `λ · z_i` for the concept neurons `R_C` and
//! zero elsewhere, and the masked code is pushed through the decoder
//! (without bias) and subtracted:
//!
//! ```text
//! M_i = λ · z_i   if i ∈ R_C, else 0
//! h_m = h - W_dec M
//! ```
//!
//! The subtraction happens in the original embedding space, so whatever the
//! SAE fails to reconstruct passes through untouched. Results are not
//! clamped.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{norm, Matrix};
use crate::sae::{SaeParams, SparseCode};
use crate::{Error, Result};

/// Which neurons to suppress and how hard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSpec {
    pub neurons: Vec<usize>,
    pub lambda: f64,
    pub concept: String,
}

impl ManipulationSpec {
    pub fn new(neurons: Vec<usize>, lambda: f64, concept: impl Into<String>) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Param(format!(
                "manipulation coefficient must be finite and >= 0, got {lambda}"
            )));
        }
        for (i, n) in neurons.iter().enumerate() {
            if neurons[..i].contains(n) {
                return Err(Error::Param(format!("neuron {n} listed twice")));
            }
        }
        Ok(Self {
            neurons,
            lambda,
            concept: concept.into(),
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.neurons.clone(), lambda, self.concept.clone())
    }

    fn check_range(&self, m: usize) -> Result<()> {
        match self.neurons.iter().find(|&&i| i >= m) {
            Some(bad) => Err(Error::Param(format!(
                "neuron {bad} out of range for an SAE with {m} latents"
            ))),
            None => Ok(()),
        }
    }
}

/// Default coefficient per concept: 0.8 for nudity, 1.2 for violence, 1.0
/// otherwise (including adversarial-prompt settings).
pub fn default_lambda(concept: &str) -> f64 {
    match concept.to_ascii_lowercase().as_str() {
        "nudity" => 0.8,
        "violence" => 1.2,
        _ => 1.0,
    }
}

/// `M_i = λ · z_i` on the selected neurons, zero elsewhere.
pub fn build_mask(z: &SparseCode, spec: &ManipulationSpec) -> Result<Vec<f64>> {
    let m = z.values.len();
    spec.check_range(m)?;
    let mut mask = vec![0.0; m];
    for &i in &spec.neurons {
        mask[i] = spec.lambda * z.values[i];
    }
    Ok(mask)
}

/// Where the activations feeding the mask come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum MaskSource {
    /// Each token's own code (the default).
    #[default]
    PerToken,
    /// Experimental: one fixed activation vector (e.g. the concept prompts'
    /// mean code) broadcast to every token.
    Broadcast(Vec<f64>),
}

/// Subtracts the masked decoder directions from every token of `tokens`.
pub fn apply_erasure(
    params: &SaeParams,
    k: usize,
    tokens: &Matrix,
    spec: &ManipulationSpec,
) -> Result<(Matrix, ErasureReport)> {
    apply_erasure_with(params, k, tokens, spec, &MaskSource::PerToken)
}

pub fn apply_erasure_with(
    params: &SaeParams,
    k: usize,
    tokens: &Matrix,
    spec: &ManipulationSpec,
    source: &MaskSource,
) -> Result<(Matrix, ErasureReport)> {
    let out = erase_tokens(params, k, tokens, spec, source)?;
    let report = erasure_report(tokens, &out, params, k, spec)?;
    Ok((out, report))
}

fn erase_tokens(
    params: &SaeParams,
    k: usize,
    tokens: &Matrix,
    spec: &ManipulationSpec,
    source: &MaskSource,
) -> Result<Matrix> {
    let (d, m) = (params.input_dim(), params.latent_dim());
    if tokens.cols() != d {
        return Err(Error::Shape(format!(
            "tokens have {} features, SAE expects {d}",
            tokens.cols()
        )));
    }
    spec.check_range(m)?;
    let broadcast = match source {
        MaskSource::PerToken => None,
        MaskSource::Broadcast(v) if v.len() == m => Some(SparseCode {
            values: v.clone(),
            support: Vec::new(),
        }),
        MaskSource::Broadcast(v) => {
            return Err(Error::Shape(format!(
                "broadcast activations have length {}, SAE has {m} latents",
                v.len()
            )))
        }
    };
    let rows = (0..tokens.rows())
        .into_par_iter()
        .map(|t| {
            let h = tokens.row(t);
            let code = match &broadcast {
                Some(c) => c.clone(),
                None => params.encode(h, k)?,
            };
            let mask = build_mask(&code, spec)?;
            let mut out = h.to_vec();
            for &i in &spec.neurons {
                let c = mask[i];
                if c != 0.0 {
                    for (r, o) in out.iter_mut().enumerate() {
                        *o -= params.w_dec.get(r, i) * c;
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Matrix::from_vec(tokens.rows(), d, data)
}

/// Per-token before/after summary of one erasure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub concept: String,
    pub lambda: f64,
    pub neurons: Vec<usize>,
    /// Sum of target-neuron activations per token, before erasure.
    pub target_before: Vec<f64>,
    /// Same sum after re-encoding the erased tokens.
    pub target_after: Vec<f64>,
    /// `‖h - h_m‖₂` per token.
    pub perturbation: Vec<f64>,
    /// Mean perturbation over tokens where no target neuron was active.
    pub mean_off_target_perturbation: f64,
}

impl ErasureReport {
    pub fn total_before(&self) -> f64 {
        self.target_before.iter().sum()
    }

    pub fn total_after(&self) -> f64 {
        self.target_after.iter().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,target_before,target_after,perturbation\n");
        for t in 0..self.perturbation.len() {
            let _ = writeln!(
                out,
                "{t},{},{},{}",
                self.target_before[t], self.target_after[t], self.perturbation[t]
            );
        }
        out
    }
}

/// Re-encodes `before` and `after` and summarizes what changed.
pub fn erasure_report(
    before: &Matrix,
    after: &Matrix,
    params: &SaeParams,
    k: usize,
    spec: &ManipulationSpec,
) -> Result<ErasureReport> {
    if before.shape() != after.shape() {
        return Err(Error::Shape(format!(
            "before has shape {:?}, after {:?}",
            before.shape(),
            after.shape()
        )));
    }
    spec.check_range(params.latent_dim())?;
    let target = |h: &[f64]| -> Result<f64> {
        let z = params.encode(h, k)?;
        Ok(spec.neurons.iter().map(|&i| z.values[i]).sum())
    };
    let per_token = (0..before.rows())
        .into_par_iter()
        .map(|t| {
            let (b, a) = (before.row(t), after.row(t));
            let diff: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
            Ok((target(b)?, target(a)?, norm(&diff)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ErasureReport {
        concept: spec.concept.clone(),
        lambda: spec.lambda,
        neurons: spec.neurons.clone(),
        target_before: Vec::with_capacity(per_token.len()),
        target_after: Vec::with_capacity(per_token.len()),
        perturbation: Vec::with_capacity(per_token.len()),
        mean_off_target_perturbation: 0.0,
    };
    let (mut off_sum, mut off_n) = (0.0, 0usize);
    for (b, a, p) in per_token {
        if b == 0.0 {
            off_sum += p;
            off_n += 1;
        }
        report.target_before.push(b);
        report.target_after.push(a);
        report.perturbation.push(p);
    }
    if off_n > 0 {
        report.mean_off_target_perturbation = off_sum / off_n as f64;
    }
    Ok(report)
}

/// `start, start + step, …` up to `end`, with `end` included when it lies
/// within 1e-9 of a grid point.
pub fn lambda_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(start.is_finite() && end.is_finite() && step.is_finite()) || step <= 0.0 || end < start {
        return Err(Error::Param(format!(
            "sweep {start}:{end}:{step} needs step > 0 and end >= start"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| start + i as f64 * step).collect();
    // land exactly on `end` instead of 1.2000000000000002
    if let Some(last) = grid.last_mut() {
        if (*last - end).abs() <= 1e-9 {
            *last = end;
        }
    }
    Ok(grid)
}

/// Parses `start:end:step`.
pub fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Param(format!("sweep {s:?} is not start:end:step")));
    }
    let num = |p: &str| {
        p.trim()
            .parse::<f64>()
            .map_err(|_| Error::Param(format!("sweep {s:?}: {p:?} is not a number")))
    };
    lambda_grid(num(parts[0])?, num(parts[1])?, num(parts[2])?)
}

/// Runs [`apply_erasure`] once per coefficient.
pub fn sweep(
    params: &SaeParams,
    k: usize,
    tokens: &Matrix,
    spec: &ManipulationSpec,
    lambdas: &[f64],
) -> Result<Vec<(f64, Matrix, ErasureReport)>> {
    lambdas
        .iter()
        .map(|&l| {
            let s = spec.with_lambda(l)?;
            let (out, report) = apply_erasure(params, k, tokens, &s)?;
            Ok((l, out, report))
        })
        .collect()
}
