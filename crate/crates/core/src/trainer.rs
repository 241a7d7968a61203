// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mini-batch Adam training for [`SaeParams`].
//!
//! Per-token loss is `‖h' - h‖² + α · aux`, where `aux` reconstructs the
//! main residual from the top `aux_k` dead latents (AuxK). After every
//! optimizer step the decoder columns are pushed back onto the unit sphere.
//!
//! Batch gradients are summed over a fixed number of contiguous chunks and
//! reduced in chunk order, so the result does not depend on how many
//! worker threads rayon happens to use.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{dot, topk_indices, Matrix};
use crate::sae::{init_params, Forward, ParamGrads, ParamGroups, SaeConfig, SaeParams};
use crate::{Error, Result};

/// Number of partial gradient sums per batch. Fixed so that reduction order
/// is independent of the thread pool.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Emit one report record every this many optimizer steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Adam at 4e-4 with a constant schedule, batches of 4096 tokens.
    pub fn paper() -> Self {
        Self {
            learning_rate: 4e-4,
            batch_size: 4096,
            epochs: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            log_every: 10,
        }
    }

    /// Paper optimizer settings with the batch scaled down to 256.
    pub fn desk() -> Self {
        Self {
            batch_size: 256,
            epochs: 60,
            log_every: 40,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Param("log_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Param("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ParamGrads,
    pub second: ParamGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &SaeParams) -> Self {
        Self {
            first: ParamGrads::zeros_like(params),
            second: ParamGrads::zeros_like(params),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update followed by decoder renormalization.
pub fn adam_step(
    params: &mut SaeParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Training {
            step: state.step,
            message: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let groups = params
        .groups_mut()
        .into_iter()
        .zip(grads.groups())
        .zip(state.first.groups_mut())
        .zip(state.second.groups_mut());
    for (((p, g), m), v) in groups {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    params.normalize_decoder();
    Ok(())
}

/// Tracks when each latent last fired.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadTracker {
    pub last_active: Vec<u64>,
    pub tokens_seen: u64,
}

impl DeadTracker {
    pub fn new(m: usize) -> Self {
        Self {
            last_active: vec![0; m],
            tokens_seen: 0,
        }
    }

    /// Marks `active` as firing at the current position, then advances the
    /// token counter by the batch size.
    pub fn update(&mut self, active: impl IntoIterator<Item = usize>, tokens_in_batch: u64) {
        for i in active {
            self.last_active[i] = self.tokens_seen;
        }
        self.tokens_seen += tokens_in_batch;
    }

    pub fn is_dead(&self, i: usize, window: u64) -> bool {
        self.tokens_seen - self.last_active[i] > window
    }

    pub fn dead_set(&self, window: u64) -> Vec<usize> {
        (0..self.last_active.len())
            .filter(|&i| self.is_dead(i, window))
            .collect()
    }

    pub fn dead_count(&self, window: u64) -> usize {
        (0..self.last_active.len())
            .filter(|&i| self.is_dead(i, window))
            .count()
    }
}

/// AuxK reconstruction of one token's residual.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTerm {
    /// `‖residual - ê‖²`, or 0 when no latent is dead.
    pub value: f64,
    /// Chosen dead latents and their (ReLU'd) activations.
    pub latents: Vec<(usize, f64)>,
    /// `residual - ê`
    pub error: Vec<f64>,
}

/// Picks the top `aux_k` dead latents by ReLU'd pre-activation and measures
/// how well their decoder columns explain the residual of `fwd`.
pub fn aux_term(params: &SaeParams, fwd: &Forward, dead: &[usize], aux_k: usize) -> AuxTerm {
    if dead.is_empty() {
        return AuxTerm {
            value: 0.0,
            latents: Vec::new(),
            error: fwd.residual.clone(),
        };
    }
    let relu: Vec<f64> = dead.iter().map(|&i| fwd.pre[i].max(0.0)).collect();
    let k = aux_k.min(dead.len());
    let picked = topk_indices(&relu, k).expect("1 <= k <= dead.len()");
    let m = params.latent_dim();
    let wd = params.w_dec.data();
    let mut error = fwd.residual.clone();
    let mut latents = Vec::with_capacity(k);
    for j in picked {
        let (i, z) = (dead[j], relu[j]);
        if z != 0.0 {
            for (r, e) in error.iter_mut().enumerate() {
                *e -= wd[r * m + i] * z;
            }
        }
        latents.push((i, z));
    }
    AuxTerm {
        value: dot(&error, &error),
        latents,
        error,
    }
}

/// Value and gradient of the auxiliary loss for one token. The residual is
/// a constant here; gradient reaches only the chosen dead latents.
pub fn aux_loss(
    params: &SaeParams,
    fwd: &Forward,
    dead: &[usize],
    aux_k: usize,
) -> (f64, ParamGrads) {
    let term = aux_term(params, fwd, dead, aux_k);
    let mut grads = ParamGrads::zeros_like(params);
    accumulate_aux_grad(params, fwd, &term, 1.0, &mut grads);
    (term.value, grads)
}

fn accumulate_aux_grad(
    params: &SaeParams,
    fwd: &Forward,
    term: &AuxTerm,
    scale: f64,
    grads: &mut ParamGrads,
) {
    if term.latents.is_empty() {
        return;
    }
    // d/dê ‖r - ê‖² = -2 (r - ê)
    let g_out: Vec<f64> = term.error.iter().map(|e| -2.0 * scale * e).collect();
    params.backprop_through_latents(&term.latents, &fwd.pre, &fwd.centered, &g_out, grads);
}

/// One line of the training log, averaged over the steps since the
/// previous line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub tokens: u64,
    pub mse: f64,
    pub aux: f64,
    pub total: f64,
    pub dead: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn first(&self) -> Option<&TrainRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tokens,mse,aux,total,dead\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.tokens, r.mse, r.aux, r.total, r.dead
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BatchStats {
    mse: f64,
    aux: f64,
}

/// Trains an SAE from scratch on the rows of `corpus`.
pub fn train(
    sae_cfg: &SaeConfig,
    train_cfg: &TrainConfig,
    corpus: &Matrix,
) -> Result<(SaeParams, TrainReport)> {
    sae_cfg.validate()?;
    train_cfg.validate()?;
    if corpus.rows() == 0 {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if corpus.cols() != sae_cfg.input_dim {
        return Err(Error::Shape(format!(
            "corpus has {} features per token, config expects {}",
            corpus.cols(),
            sae_cfg.input_dim
        )));
    }
    let params = init_params(sae_cfg, &column_mean(corpus), train_cfg.seed)?;
    Trainer::new(*sae_cfg, *train_cfg, params).run(corpus)
}

/// Training loop state. Owns the parameters while they are being mutated.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub sae_cfg: SaeConfig,
    pub train_cfg: TrainConfig,
    pub params: SaeParams,
    pub adam: AdamState,
    pub tracker: DeadTracker,
}

impl Trainer {
    pub fn new(sae_cfg: SaeConfig, train_cfg: TrainConfig, params: SaeParams) -> Self {
        let adam = AdamState::new(&params);
        let tracker = DeadTracker::new(params.latent_dim());
        Self {
            sae_cfg,
            train_cfg,
            params,
            adam,
            tracker,
        }
    }

    /// Runs all epochs and returns the final parameters with the log.
    pub fn run(mut self, corpus: &Matrix) -> Result<(SaeParams, TrainReport)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train_cfg.seed.wrapping_add(0x5eed));
        let mut order: Vec<usize> = (0..corpus.rows()).collect();
        let mut report = TrainReport::default();
        let mut window = (BatchStats::default(), 0usize);
        let batches_per_epoch = order.len().div_ceil(self.train_cfg.batch_size);
        let total_steps = batches_per_epoch * self.train_cfg.epochs;
        let mut step = 0usize;

        for _ in 0..self.train_cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(self.train_cfg.batch_size) {
                let stats = self.step(corpus, batch)?;
                window.0.mse += stats.mse;
                window.0.aux += stats.aux;
                window.1 += 1;
                let last = step + 1 == total_steps;
                if step == 0 || (step + 1).is_multiple_of(self.train_cfg.log_every) || last {
                    let n = window.1 as f64;
                    let (mse, aux) = (window.0.mse / n, window.0.aux / n);
                    let record = TrainRecord {
                        tokens: self.tracker.tokens_seen,
                        mse,
                        aux,
                        total: mse + self.sae_cfg.aux_coeff * aux,
                        dead: self.tracker.dead_count(self.sae_cfg.dead_window),
                    };
                    log::debug!(
                        "step {} tokens {} mse {:.6} aux {:.6} dead {}",
                        step + 1,
                        record.tokens,
                        record.mse,
                        record.aux,
                        record.dead
                    );
                    report.records.push(record);
                    window = (BatchStats::default(), 0);
                }
                step += 1;
            }
        }
        Ok((self.params, report))
    }

    /// One optimizer step on the rows `batch` of `corpus`. Returns the mean
    /// per-token mse and aux loss measured before the update.
    fn step(&mut self, corpus: &Matrix, batch: &[usize]) -> Result<BatchStats> {
        let dead = self.tracker.dead_set(self.sae_cfg.dead_window);
        let k = self.sae_cfg.topk;
        let aux_k = self.sae_cfg.aux_k;
        let alpha = self.sae_cfg.aux_coeff;
        let inv_b = 1.0 / batch.len() as f64;
        let params = &self.params;

        let chunk_len = batch.len().div_ceil(GRAD_CHUNKS);
        let partials: Vec<Result<(ParamGrads, BatchStats, Vec<bool>)>> = batch
            .par_chunks(chunk_len)
            .map(|chunk| {
                let mut grads = ParamGrads::zeros_like(params);
                let mut stats = BatchStats::default();
                let mut fired = vec![false; params.latent_dim()];
                for &row in chunk {
                    let fwd = params.forward(corpus.row(row), k)?;
                    params.accumulate_mse_grad(&fwd, inv_b, &mut grads);
                    stats.mse += fwd.mse;
                    for i in fwd.code.active() {
                        fired[i] = true;
                    }
                    if !dead.is_empty() && alpha > 0.0 {
                        let term = aux_term(params, &fwd, &dead, aux_k);
                        accumulate_aux_grad(params, &fwd, &term, alpha * inv_b, &mut grads);
                        stats.aux += term.value;
                    }
                }
                Ok((grads, stats, fired))
            })
            .collect();

        let mut grads = ParamGrads::zeros_like(params);
        let mut stats = BatchStats::default();
        let mut fired = vec![false; params.latent_dim()];
        for part in partials {
            let (g, s, f) = part?;
            grads.add_scaled(&g, 1.0);
            stats.mse += s.mse;
            stats.aux += s.aux;
            fired.iter_mut().zip(f).for_each(|(a, b)| *a |= b);
        }
        stats.mse *= inv_b;
        stats.aux *= inv_b;

        let total = stats.mse + alpha * stats.aux;
        if !total.is_finite() {
            return Err(Error::Training {
                step: self.adam.step,
                message: format!("non-finite loss {total}"),
            });
        }
        adam_step(&mut self.params, &grads, &mut self.adam, &self.train_cfg)?;
        let active = fired.iter().enumerate().filter_map(|(i, f)| f.then_some(i));
        self.tracker.update(active, batch.len() as u64);
        Ok(stats)
    }
}

/// Per-column mean of the rows of `m`.
pub fn column_mean(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = m.rows().max(1) as f64;
    mean.iter_mut().for_each(|a| *a /= n);
    mean
}

/// Mean per-token reconstruction mse of `params` over `tokens`.
pub fn mean_mse(params: &SaeParams, k: usize, tokens: &Matrix) -> Result<f64> {
    let sum: f64 = tokens
        .iter_rows()
        .map(|h| params.forward(h, k).map(|f| f.mse))
        .sum::<Result<f64>>()?;
    Ok(sum / tokens.rows().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, norm};

    fn small_params() -> SaeParams {
        let cfg = SaeConfig {
            input_dim: 3,
            latent_dim: 6,
            topk: 2,
            ..SaeConfig::desk()
        };
        init_params(&cfg, &[0.0; 3], 9).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = small_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zero = ParamGrads::zeros_like(&p);
        adam_step(&mut p, &zero, &mut st, &TrainConfig::paper()).unwrap();
        assert_eq!(st.step, 1);
        for (a, b) in p.flatten().iter().zip(before.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // bias-corrected m̂ = g, v̂ = g², so the step is lr · g / (|g| + ε)
        let mut p = small_params();
        let mut g = ParamGrads::zeros_like(&p);
        g.b_enc[0] = 1.0;
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::paper();
        let before = p.b_enc[0];
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let moved = before - p.b_enc[0];
        assert!((moved - cfg.learning_rate).abs() < 1e-11, "{moved}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = small_params();
        let mut g = ParamGrads::zeros_like(&p);
        g.w_dec.set(0, 0, f64::NAN);
        let mut st = AdamState::new(&p);
        st.step = 7;
        let err = adam_step(&mut p, &g, &mut st, &TrainConfig::paper()).unwrap_err();
        assert!(matches!(err, Error::Training { step: 7, .. }));
    }

    #[test]
    fn adam_keeps_decoder_columns_unit_norm() {
        let mut p = small_params();
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::paper()
        };
        for s in 0..20 {
            let mut g = ParamGrads::zeros_like(&p);
            for (i, v) in g.w_dec.data_mut().iter_mut().enumerate() {
                *v = ((i + s) as f64).sin();
            }
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            for n in p.w_dec.column_norms() {
                assert!((n - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dead_tracker_examples() {
        let mut t = DeadTracker::new(3);
        t.update([], 101);
        assert!(t.is_dead(0, 100));

        let mut t = DeadTracker::new(2);
        for _ in 0..50 {
            t.update([0], 10);
        }
        assert!(!t.is_dead(0, 100));
        assert!(t.is_dead(1, 100));

        let mut t = DeadTracker::new(1);
        t.update([], 50);
        t.update([0], 1);
        t.update([], 89);
        assert_eq!(t.tokens_seen, 140);
        assert!(!t.is_dead(0, 100));
        t.update([], 11);
        assert_eq!(t.tokens_seen, 151);
        assert!(t.is_dead(0, 100));
        assert_eq!(t.dead_set(100), vec![0]);
    }

    fn toy_forward() -> (SaeParams, Forward) {
        let p = SaeParams {
            w_enc: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap(),
            b_enc: vec![0.0; 3],
            w_dec: Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]).unwrap(),
            b_pre: vec![0.0; 2],
        };
        // K = 1 keeps latent 0; the (0, 1) direction is left in the residual
        let f = p.forward(&[2.0, 1.0], 1).unwrap();
        (p, f)
    }

    #[test]
    fn aux_loss_trivial_cases() {
        let (p, f) = toy_forward();
        let (v, g) = aux_loss(&p, &f, &[], 2);
        assert_eq!(v, 0.0);
        assert!(g.flatten().iter().all(|x| *x == 0.0));

        let exact = p.forward(&[2.0, 0.0], 1).unwrap();
        assert_eq!(exact.residual, vec![0.0, 0.0]);
        let mut p0 = p.clone();
        p0.w_enc.row_mut(2).fill(0.0);
        let exact = p0.forward(&[2.0, 0.0], 1).unwrap();
        assert_eq!(aux_loss(&p0, &exact, &[2], 1).0, 0.0);
    }

    #[test]
    fn aux_loss_reduces_residual_with_matching_dead_latent() {
        let (p, f) = toy_forward();
        assert_eq!(f.residual, vec![0.0, 1.0]);
        let r2 = dot(&f.residual, &f.residual);
        let (v, _) = aux_loss(&p, &f, &[2], 1);
        assert!(v < r2);
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn aux_gradient_matches_finite_differences() {
        let cfg = SaeConfig {
            input_dim: 4,
            latent_dim: 10,
            topk: 2,
            ..SaeConfig::desk()
        };
        let mut p = init_params(&cfg, &[0.1, -0.2, 0.0, 0.3], 4).unwrap();
        p.b_enc = (0..10).map(|i| 0.05 * i as f64).collect();
        let h = [0.9, -0.4, 0.7, 1.1];
        let dead = [1, 3, 4, 6, 8, 9];
        let fwd = p.forward(&h, 2).unwrap();
        let (_, analytic) = aux_loss(&p, &fwd, &dead, 3);
        let residual = fwd.residual.clone();
        let support = aux_term(&p, &fwd, &dead, 3).latents;
        let loss = |x: &[f64]| {
            let mut q = p.clone();
            let mut off = 0;
            for g in q.groups_mut() {
                let n = g.len();
                g.copy_from_slice(&x[off..off + n]);
                off += n;
            }
            // same dead selection, residual held fixed
            let (pre, _) = q.pre_activations(&h).unwrap();
            let mut e = residual.clone();
            for &(i, _) in &support {
                let z = pre[i].max(0.0);
                for (r, er) in e.iter_mut().enumerate() {
                    *er -= q.w_dec.get(r, i) * z;
                }
            }
            dot(&e, &e)
        };
        let numeric = finite_diff_grad(loss, &p.flatten(), 1e-6);
        let a = analytic.flatten();
        assert!(norm(&a) > 0.0);
        for (x, y) in a.iter().zip(&numeric) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn train_rejects_bad_corpus() {
        let cfg = SaeConfig {
            input_dim: 3,
            latent_dim: 6,
            topk: 2,
            ..SaeConfig::desk()
        };
        let err = train(&cfg, &TrainConfig::desk(), &Matrix::zeros(0, 3)).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let err = train(&cfg, &TrainConfig::desk(), &Matrix::zeros(5, 4)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn report_csv_header() {
        let r = TrainReport {
            records: vec![TrainRecord {
                tokens: 256,
                mse: 0.5,
                aux: 0.0,
                total: 0.5,
                dead: 3,
            }],
        };
        assert_eq!(r.to_csv(), "tokens,mse,aux,total,dead\n256,0.5,0,0.5,3\n");
    }
}
