// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoder.
//!
//! ```text
//! encode:  Z  = TopK(ReLU(W_enc (h - b_pre) + b_enc))
//! decode:  h' = W_dec Z + b_pre
//! loss:    ‖h' - h‖²
//! ```
//!
//! `W_enc` is `m × d`, `W_dec` is `d × m`. TopK runs after the ReLU, so the
//! support always holds exactly `K` indices even when fewer than `K`
//! pre-activations are positive; the surplus slots carry zeros.
//!
//! Gradients hold the TopK support fixed for the duration of one backward
//! pass and flow only through selected units whose pre-activation is
//! strictly positive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{axpy, dot, matvec, topk_select, Matrix};
use crate::{Error, Result};

/// Shape and sparsity hyperparameters of one SAE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    /// Embedding width `d`.
    pub input_dim: usize,
    /// Number of latent neurons `m`.
    pub latent_dim: usize,
    /// Active latents per token `K`.
    pub topk: usize,
    /// Weight `α` of the auxiliary dead-latent loss.
    pub aux_coeff: f64,
    /// Dead latents used by the auxiliary reconstruction.
    pub aux_k: usize,
    /// Tokens without firing after which a latent counts as dead.
    pub dead_window: u64,
}

impl SaeConfig {
    /// Text-encoder scale: 3072 latents over 768-wide features (expansion
    /// factor 4), `K = 32`, `α = 1/32`.
    pub fn paper() -> Self {
        Self {
            input_dim: 768,
            latent_dim: 3072,
            topk: 32,
            aux_coeff: 1.0 / 32.0,
            aux_k: 64,
            dead_window: 200_000,
        }
    }

    /// Desk-scale benchmark shape (d = 32, m = 128, K = 4).
    pub fn desk() -> Self {
        Self {
            input_dim: 32,
            latent_dim: 128,
            topk: 4,
            aux_coeff: 1.0 / 32.0,
            aux_k: 8,
            dead_window: 200_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Param(msg));
        if self.input_dim == 0 {
            return fail("input_dim must be at least 1".into());
        }
        if self.latent_dim < self.input_dim {
            return fail(format!(
                "latent_dim {} must be >= input_dim {}",
                self.latent_dim, self.input_dim
            ));
        }
        if self.topk == 0 || self.topk > self.latent_dim {
            return fail(format!(
                "topk {} must lie in 1..={}",
                self.topk, self.latent_dim
            ));
        }
        if !(self.aux_coeff >= 0.0 && self.aux_coeff.is_finite()) {
            return fail(format!(
                "aux_coeff {} must be finite and >= 0",
                self.aux_coeff
            ));
        }
        if self.aux_k == 0 {
            return fail("aux_k must be at least 1".into());
        }
        if self.dead_window == 0 {
            return fail("dead_window must be at least 1".into());
        }
        Ok(())
    }
}

/// Learnable parameters of one TopK SAE.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `m × d`
    pub w_enc: Matrix,
    /// length `m`
    pub b_enc: Vec<f64>,
    /// `d × m`; columns are the latent atoms
    pub w_dec: Matrix,
    /// length `d`
    pub b_pre: Vec<f64>,
}

/// Gradient of the loss with respect to every [`SaeParams`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    pub w_dec: Matrix,
    pub b_pre: Vec<f64>,
}

/// TopK code of a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    /// Dense length-`m` activations; zero off `support`.
    pub values: Vec<f64>,
    /// Exactly `K` selected indices, ascending.
    pub support: Vec<usize>,
}

impl SparseCode {
    pub fn zeros(m: usize) -> Self {
        Self {
            values: vec![0.0; m],
            support: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Selected indices with a strictly positive value.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.support
            .iter()
            .copied()
            .filter(|&i| self.values[i] > 0.0)
    }
}

/// Intermediate values of one encode/decode pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `h - b_pre`
    pub centered: Vec<f64>,
    /// `W_enc (h - b_pre) + b_enc`, before ReLU
    pub pre: Vec<f64>,
    pub code: SparseCode,
    /// `h'`
    pub recon: Vec<f64>,
    /// `h - h'`
    pub residual: Vec<f64>,
    /// `‖h' - h‖²`
    pub mse: f64,
}

/// Output of [`SaeParams::reconstruction_loss`].
#[derive(Debug, Clone)]
pub struct Loss {
    pub total: f64,
    pub mse: f64,
    pub code: SparseCode,
    pub residual: Vec<f64>,
}

/// Uniform access to the four parameter groups, in checkpoint order.
pub trait ParamGroups {
    fn groups(&self) -> [&[f64]; 4];
    fn groups_mut(&mut self) -> [&mut [f64]; 4];

    fn is_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    fn num_values(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    /// Copies all groups into one flat vector.
    fn flatten(&self) -> Vec<f64> {
        self.groups().concat()
    }
}

impl ParamGroups for SaeParams {
    fn groups(&self) -> [&[f64]; 4] {
        [
            self.w_enc.data(),
            &self.b_enc,
            self.w_dec.data(),
            &self.b_pre,
        ]
    }

    fn groups_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_enc.data_mut(),
            &mut self.b_enc,
            self.w_dec.data_mut(),
            &mut self.b_pre,
        ]
    }
}

impl ParamGroups for ParamGrads {
    fn groups(&self) -> [&[f64]; 4] {
        [
            self.w_enc.data(),
            &self.b_enc,
            self.w_dec.data(),
            &self.b_pre,
        ]
    }

    fn groups_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_enc.data_mut(),
            &mut self.b_enc,
            self.w_dec.data_mut(),
            &mut self.b_pre,
        ]
    }
}

impl ParamGrads {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(m, d),
            b_enc: vec![0.0; m],
            w_dec: Matrix::zeros(d, m),
            b_pre: vec![0.0; d],
        }
    }

    pub fn zeros_like(params: &SaeParams) -> Self {
        Self::zeros(params.input_dim(), params.latent_dim())
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (dst, src) in self.groups_mut().into_iter().zip(other.groups()) {
            axpy(scale, src, dst);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Seeded initialization: uniform decoder columns normalized to unit L2,
/// encoder tied to the decoder transpose, `b_pre` at the data mean.
pub fn init_params(config: &SaeConfig, data_mean: &[f64], seed: u64) -> Result<SaeParams> {
    config.validate()?;
    let (d, m) = (config.input_dim, config.latent_dim);
    if data_mean.len() != d {
        return Err(Error::Shape(format!(
            "data mean has length {}, expected {d}",
            data_mean.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_dec = Matrix::zeros(d, m);
    for c in 0..m {
        for r in 0..d {
            w_dec.set(r, c, rng.gen_range(-1.0..1.0));
        }
    }
    w_dec.normalize_columns();
    Ok(SaeParams {
        w_enc: w_dec.transpose(),
        b_enc: vec![0.0; m],
        w_dec,
        b_pre: data_mean.to_vec(),
    })
}

impl SaeParams {
    pub fn input_dim(&self) -> usize {
        self.w_dec.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_dec.cols()
    }

    /// Checks that all four tensors agree with `config`.
    pub fn check_shapes(&self, config: &SaeConfig) -> Result<()> {
        let (d, m) = (config.input_dim, config.latent_dim);
        let checks = [
            ("W_enc", self.w_enc.shape(), (m, d)),
            ("b_enc", (self.b_enc.len(), 1), (m, 1)),
            ("W_dec", self.w_dec.shape(), (d, m)),
            ("b_pre", (self.b_pre.len(), 1), (d, 1)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!(
                    "{name} has shape {got:?}, config requires {want:?}"
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "token feature has length {}, SAE expects {}",
                h.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `W_enc (h - b_pre) + b_enc` together with the centered input.
    pub fn pre_activations(&self, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(h)?;
        let centered: Vec<f64> = h.iter().zip(&self.b_pre).map(|(x, b)| x - b).collect();
        let mut pre = matvec(&self.w_enc, &centered)?;
        for (p, b) in pre.iter_mut().zip(&self.b_enc) {
            *p += b;
        }
        Ok((pre, centered))
    }

    pub fn encode(&self, h: &[f64], k: usize) -> Result<SparseCode> {
        let (pre, _) = self.pre_activations(h)?;
        code_from_pre(&pre, k)
    }

    /// `W_dec z + b_pre`, touching only the support columns.
    pub fn decode(&self, code: &SparseCode) -> Result<Vec<f64>> {
        if code.values.len() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "code has length {}, SAE has {} latents",
                code.values.len(),
                self.latent_dim()
            )));
        }
        let mut out = self.b_pre.clone();
        // scan all of `values` so hand-built codes with a sloppy support still decode
        let m = self.latent_dim();
        for (i, &z) in code.values.iter().enumerate() {
            if z != 0.0 {
                for (r, o) in out.iter_mut().enumerate() {
                    *o += self.w_dec.data()[r * m + i] * z;
                }
            }
        }
        Ok(out)
    }

    /// Column `i` of `W_dec`.
    pub fn atom(&self, i: usize) -> Vec<f64> {
        self.w_dec.column(i)
    }

    pub fn forward(&self, h: &[f64], k: usize) -> Result<Forward> {
        let (pre, centered) = self.pre_activations(h)?;
        let code = code_from_pre(&pre, k)?;
        let recon = self.decode(&code)?;
        let residual: Vec<f64> = h.iter().zip(&recon).map(|(x, r)| x - r).collect();
        let mse = dot(&residual, &residual);
        Ok(Forward {
            centered,
            pre,
            code,
            recon,
            residual,
            mse,
        })
    }

    /// Squared reconstruction error of one token. `total` equals `mse`
    /// here; the trainer adds the auxiliary term.
    pub fn reconstruction_loss(&self, h: &[f64], k: usize) -> Result<Loss> {
        let f = self.forward(h, k)?;
        Ok(Loss {
            total: f.mse,
            mse: f.mse,
            code: f.code,
            residual: f.residual,
        })
    }

    /// Exact gradient of `‖h' - h‖²` with the TopK support held fixed.
    pub fn backward(&self, h: &[f64], k: usize) -> Result<ParamGrads> {
        let f = self.forward(h, k)?;
        let mut grads = ParamGrads::zeros_like(self);
        self.accumulate_mse_grad(&f, 1.0, &mut grads);
        Ok(grads)
    }

    /// Adds `scale · ∇‖h' - h‖²` for the pass `f` into `grads`.
    pub fn accumulate_mse_grad(&self, f: &Forward, scale: f64, grads: &mut ParamGrads) {
        // dL/dh' = 2 (h' - h) = -2 · residual
        let g_out: Vec<f64> = f.residual.iter().map(|r| -2.0 * scale * r).collect();
        axpy(1.0, &g_out, &mut grads.b_pre);
        let selected: Vec<(usize, f64)> = f
            .code
            .support
            .iter()
            .map(|&i| (i, f.code.values[i]))
            .collect();
        self.backprop_through_latents(&selected, &f.pre, &f.centered, &g_out, grads);
    }

    /// Backpropagates an output gradient `g_out` (w.r.t. the decoded
    /// vector, excluding `b_pre`) through the listed `(latent, value)`
    /// pairs. Units with non-positive pre-activation pass no gradient to
    /// the encoder.
    pub(crate) fn backprop_through_latents(
        &self,
        latents: &[(usize, f64)],
        pre: &[f64],
        centered: &[f64],
        g_out: &[f64],
        grads: &mut ParamGrads,
    ) {
        let m = self.latent_dim();
        let wd = self.w_dec.data();
        let gwd = grads.w_dec.data_mut();
        for &(i, z) in latents {
            let mut da = 0.0;
            for (r, &g) in g_out.iter().enumerate() {
                gwd[r * m + i] += g * z;
                da += wd[r * m + i] * g;
            }
            if pre[i] > 0.0 {
                axpy(da, centered, grads.w_enc.row_mut(i));
                grads.b_enc[i] += da;
                axpy(-da, self.w_enc.row(i), &mut grads.b_pre);
            }
        }
    }

    /// Renormalizes every decoder column to unit L2 norm.
    pub fn normalize_decoder(&mut self) {
        self.w_dec.normalize_columns();
    }
}

/// ReLU followed by TopK.
pub fn code_from_pre(pre: &[f64], k: usize) -> Result<SparseCode> {
    let relu: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
    let t = topk_select(&relu, k)?;
    Ok(SparseCode {
        values: t.masked,
        support: t.support,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, norm};
    use rand_distr::{Distribution, StandardNormal};

    /// d = 2, m = 3 hand example; W_dec columns (1,0), (0,1), (0.5,0.5).
    fn tiny() -> SaeParams {
        SaeParams {
            w_enc: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap(),
            b_enc: vec![0.0; 3],
            w_dec: Matrix::from_rows(&[[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]]).unwrap(),
            b_pre: vec![0.0; 2],
        }
    }

    fn random_params(d: usize, m: usize, seed: u64) -> SaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss =
            |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        SaeParams {
            w_enc: Matrix::from_vec(m, d, gauss(m * d)).unwrap(),
            b_enc: gauss(m).into_iter().map(|v| 0.1 * v).collect(),
            w_dec: Matrix::from_vec(d, m, gauss(d * m)).unwrap(),
            b_pre: gauss(d).into_iter().map(|v| 0.1 * v).collect(),
        }
    }

    #[test]
    fn encode_hand_examples() {
        let p = tiny();
        let z = p.encode(&[2.0, 1.0], 1).unwrap();
        assert_eq!(z.values, vec![0.0, 0.0, 3.0]);
        assert_eq!(z.support, vec![2]);

        let z = p.encode(&[2.0, 1.0], 2).unwrap();
        assert_eq!(z.values, vec![2.0, 0.0, 3.0]);

        let z = p.encode(&p.b_pre.clone(), 2).unwrap();
        assert_eq!(z.values, vec![0.0; 3]);
        assert_eq!(z.support.len(), 2);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        assert!(matches!(tiny().encode(&[1.0; 3], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_hand_examples() {
        let p = tiny();
        assert_eq!(p.decode(&SparseCode::zeros(3)).unwrap(), p.b_pre);
        let z = SparseCode {
            values: vec![0.0, 0.0, 3.0],
            support: vec![2],
        };
        assert_eq!(p.decode(&z).unwrap(), vec![1.5, 1.5]);
        assert!(matches!(
            p.decode(&SparseCode::zeros(4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decode_is_affine() {
        let mut p = random_params(6, 12, 3);
        p.b_pre = vec![0.3, -0.2, 1.0, 0.0, 2.0, -1.5];
        let z1 = SparseCode {
            values: (0..12)
                .map(|i| if i % 3 == 0 { i as f64 * 0.1 } else { 0.0 })
                .collect(),
            support: vec![0, 3, 6, 9],
        };
        let z2 = SparseCode {
            values: (0..12)
                .map(|i| if i % 4 == 1 { 0.7 } else { 0.0 })
                .collect(),
            support: vec![1, 5, 9],
        };
        let sum = SparseCode {
            values: z1
                .values
                .iter()
                .zip(&z2.values)
                .map(|(a, b)| a + b)
                .collect(),
            support: vec![],
        };
        let lhs = p.decode(&sum).unwrap();
        let d1 = p.decode(&z1).unwrap();
        let d2 = p.decode(&z2).unwrap();
        for r in 0..6 {
            assert!((lhs[r] - (d1[r] + d2[r] - p.b_pre[r])).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_hand_examples() {
        let p = tiny();
        let l = p.reconstruction_loss(&[2.0, 1.0], 1).unwrap();
        assert!((l.mse - 0.5).abs() < 1e-15);
        assert_eq!(l.total, l.mse);
        assert_eq!(l.residual, vec![0.5, -0.5]);

        assert_eq!(p.reconstruction_loss(&[0.0, 0.0], 1).unwrap().mse, 0.0);
        // h on atom 0's ray reconstructs exactly with K = 1
        assert_eq!(p.reconstruction_loss(&[2.0, 0.0], 1).unwrap().mse, 0.0);
    }

    #[test]
    fn zero_loss_means_zero_gradient() {
        let p = tiny();
        let g = p.backward(&[2.0, 0.0], 1).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unselected_rows_get_no_gradient() {
        let p = random_params(8, 32, 11);
        let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = p.forward(&h, 4).unwrap();
        let g = p.backward(&h, 4).unwrap();
        for i in 0..32 {
            if !f.code.support.contains(&i) {
                assert!(g.w_enc.row(i).iter().all(|v| *v == 0.0));
                assert_eq!(g.b_enc[i], 0.0);
                assert!(g.w_dec.column(i).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_normalized() {
        let cfg = SaeConfig {
            input_dim: 5,
            latent_dim: 20,
            topk: 3,
            ..SaeConfig::desk()
        };
        let mean = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let a = init_params(&cfg, &mean, 42).unwrap();
        let b = init_params(&cfg, &mean, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.b_pre, mean);
        assert!(a.b_enc.iter().all(|v| *v == 0.0));
        assert_eq!(a.w_enc, a.w_dec.transpose());
        for n in a.w_dec.column_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_ne!(a, init_params(&cfg, &mean, 43).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(SaeConfig::paper().validate().is_ok());
        assert!(SaeConfig::desk().validate().is_ok());
        let bad = SaeConfig {
            latent_dim: 16,
            ..SaeConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = SaeConfig {
            topk: 0,
            ..SaeConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = SaeConfig {
            aux_coeff: -1.0,
            ..SaeConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn paper_config_values() {
        let c = SaeConfig::paper();
        assert_eq!((c.input_dim, c.latent_dim, c.topk), (768, 3072, 32));
        assert_eq!(c.latent_dim / c.input_dim, 4);
        assert_eq!(c.aux_coeff, 1.0 / 32.0);
        assert_eq!(c.aux_k, 2 * c.topk);
    }

    #[test]
    fn backward_matches_finite_differences_on_one_instance() {
        let p = random_params(8, 32, 5);
        let h: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let analytic = p.backward(&h, 4).unwrap().flatten();
        let base = p.forward(&h, 4).unwrap();
        let unflatten = |x: &[f64]| -> SaeParams {
            let mut q = p.clone();
            let mut off = 0;
            for g in q.groups_mut() {
                let n = g.len();
                g.copy_from_slice(&x[off..off + n]);
                off += n;
            }
            q
        };
        let loss = |x: &[f64]| unflatten(x).forward(&h, 4).unwrap().mse;
        let numeric = finite_diff_grad(loss, &p.flatten(), 1e-5);
        // skip if the instance sits near a selection boundary
        let mut relu: Vec<f64> = base.pre.iter().map(|v| v.max(0.0)).collect();
        relu.sort_by(|a, b| b.total_cmp(a));
        assert!(relu[3] - relu[4] > 1e-3);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {n}");
        }
        assert!(norm(&analytic) > 0.0);
    }

    /// Random orthonormal basis as a tied SAE with m = d. Here each extra
    /// selected atom removes `z_j²` from the error, so mse is monotone in K.
    /// For general (m > d, untied) parameters monotonicity does not hold.
    fn orthonormal_tied(d: usize, seed: u64) -> SaeParams {
        let p = random_params(d, d, seed);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for c in 0..d {
            let mut v = p.w_dec.column(c);
            for q in &cols {
                let proj = dot(&v, q);
                axpy(-proj, q, &mut v);
            }
            let n = norm(&v);
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
        let w_enc = Matrix::from_rows(&cols).unwrap();
        SaeParams {
            w_dec: w_enc.transpose(),
            w_enc,
            b_enc: vec![0.0; d],
            b_pre: p.b_pre,
        }
    }

    #[test]
    fn larger_k_never_increases_mse_for_tied_orthonormal_sae() {
        for seed in 0..50 {
            let p = orthonormal_tied(8, seed);
            let h: Vec<f64> = (0..8)
                .map(|i| ((i as u64 * 7 + seed) as f64 * 0.71).sin())
                .collect();
            let mut prev = f64::INFINITY;
            for k in 1..=8 {
                let mse = p.reconstruction_loss(&h, k).unwrap().mse;
                assert!(mse <= prev + 1e-12, "seed {seed} k {k}: {mse} > {prev}");
                prev = mse;
            }
        }
    }
}
