// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-dictionary benchmark.
//!
//! Token features are sparse nonnegative combinations of a known set of
//! incoherent unit atoms plus a mean offset and Gaussian noise. Because the
//! ground truth is known, SAE atom recovery, concept-neuron identification
//! and erasure can all be checked directly. The module also carries
//! [`brute_force_identify`], a loop-by-loop reference for
//! [`crate::concept::identify`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::concept::{ConceptPair, ConceptPairSet, NeuronScoreTable};
use crate::numerics::{abs_cosine, norm, Matrix};
use crate::sae::SaeParams;
use crate::{Error, Result};

/// Atoms must stay below this pairwise |cosine|.
pub const MAX_COHERENCE: f64 = 0.5;
const MAX_ATTEMPTS_PER_ATOM: usize = 10_000;

/// Ground-truth dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDictionary {
    /// `d × m_true`, unit columns.
    pub atoms: Matrix,
    pub mean: Vec<f64>,
    pub seed: u64,
}

impl PlantedDictionary {
    pub fn dim(&self) -> usize {
        self.atoms.rows()
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.cols()
    }

    pub fn atom(&self, j: usize) -> Vec<f64> {
        self.atoms.column(j)
    }

    /// `mean + Σ code_j · atom_j`
    pub fn synthesize(&self, code: &[f64]) -> Vec<f64> {
        let mut h = self.mean.clone();
        for (j, &c) in code.iter().enumerate() {
            if c != 0.0 {
                for (r, x) in h.iter_mut().enumerate() {
                    *x += c * self.atoms.get(r, j);
                }
            }
        }
        h
    }

    pub fn max_coherence(&self) -> f64 {
        let cols: Vec<Vec<f64>> = (0..self.num_atoms()).map(|j| self.atom(j)).collect();
        let mut worst = 0.0f64;
        for a in 0..cols.len() {
            for b in a + 1..cols.len() {
                worst = worst.max(abs_cosine(&cols[a], &cols[b]));
            }
        }
        worst
    }
}

/// Rejection-samples `m_true` Gaussian unit atoms in `R^d` with pairwise
/// |cosine| below [`MAX_COHERENCE`]. The mean offset has unit expected norm.
pub fn gen_dictionary(seed: u64, d: usize, m_true: usize) -> Result<PlantedDictionary> {
    if d < 2 || m_true < 2 {
        return Err(Error::Param(format!(
            "dictionary needs d >= 2 and m_true >= 2, got d = {d}, m_true = {m_true}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m_true);
    while cols.len() < m_true {
        let mut accepted = false;
        for _ in 0..MAX_ATTEMPTS_PER_ATOM {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = norm(&v);
            if n == 0.0 {
                continue;
            }
            let v: Vec<f64> = v.into_iter().map(|x| x / n).collect();
            if cols.iter().all(|c| abs_cosine(c, &v) < MAX_COHERENCE) {
                cols.push(v);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Generation(format!(
                "could not place atom {} of {m_true} in dimension {d} below coherence {MAX_COHERENCE}",
                cols.len()
            )));
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mean: Vec<f64> = (0..d)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            scale * g
        })
        .collect();
    let atoms = Matrix::from_rows(&cols)?.transpose();
    Ok(PlantedDictionary { atoms, mean, seed })
}

/// Token features with their ground-truth codes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// `n × d`
    pub features: Matrix,
    /// `n × m_true`
    pub codes: Matrix,
    pub sigma: f64,
}

fn random_code(
    rng: &mut ChaCha8Rng,
    m_true: usize,
    k_true: usize,
    exclude: Option<usize>,
) -> Vec<f64> {
    let pool: Vec<usize> = (0..m_true).filter(|j| Some(*j) != exclude).collect();
    let mut code = vec![0.0; m_true];
    for pick in sample(rng, pool.len(), k_true).iter() {
        code[pool[pick]] = rng.gen_range(0.5..1.5);
    }
    code
}

fn noise(rng: &mut ChaCha8Rng, d: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; d];
    }
    let dist = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    (0..d).map(|_| dist.sample(rng)).collect()
}

/// `n` tokens, each with `k_true` atoms drawn uniformly and coefficients in
/// `[0.5, 1.5)`, plus `N(0, σ²)` noise per coordinate.
pub fn gen_corpus(
    dict: &PlantedDictionary,
    n: usize,
    k_true: usize,
    sigma: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    let (d, m_true) = (dict.dim(), dict.num_atoms());
    if k_true == 0 || k_true > m_true {
        return Err(Error::Param(format!(
            "k_true must lie in 1..={m_true}, got {k_true}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!(
            "noise level must be >= 0, got {sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * d);
    let mut codes = Vec::with_capacity(n * m_true);
    for _ in 0..n {
        let code = random_code(&mut rng, m_true, k_true, None);
        let mut h = dict.synthesize(&code);
        for (x, e) in h.iter_mut().zip(noise(&mut rng, d, sigma)) {
            *x += e;
        }
        features.extend(h);
        codes.extend(code);
    }
    Ok(SyntheticCorpus {
        features: Matrix::from_vec(n, d, features)?,
        codes: Matrix::from_vec(n, m_true, codes)?,
        sigma,
    })
}

/// Layout of synthetic concept/deconcept prompts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairShape {
    /// Tokens per prompt.
    pub tokens: usize,
    /// Context atoms on every token, mention included.
    pub context_atoms: usize,
    pub sigma: f64,
}

impl Default for PairShape {
    /// Four tokens of four context atoms each, matching the desk SAE's
    /// `K = 4` so that no TopK slot is left for noise to claim.
    fn default() -> Self {
        Self {
            tokens: 4,
            context_atoms: 4,
            sigma: 0.01,
        }
    }
}

/// Synthetic pairs plus where the target atom was planted.
#[derive(Debug, Clone)]
pub struct SyntheticPairs {
    pub set: ConceptPairSet,
    pub target_atom: usize,
    /// Token position carrying the target atom in each concept prompt.
    pub mention: Vec<usize>,
    /// Coefficient of the target atom at that position.
    pub coeff: Vec<f64>,
}

/// `n_pairs` prompt pairs that differ only in the target atom.
///
/// Every prompt has `shape.tokens` tokens, each a random combination of
/// `shape.context_atoms` atoms other than `target`. In the concept prompt
/// one token (the "mention") additionally carries `target` with a
/// coefficient in `[0.5, 1.5)`; the deconcept prompt is identical, noise
/// included, without that contribution.
///
/// Set `context_atoms` to at least the SAE's `K`. With fewer, the spare TopK
/// slots of deconcept tokens go to whichever latents have the largest bias,
/// atom latents included, and the strict zero test on the deconcept side
/// rejects them.
pub fn gen_concept_pairs_synthetic(
    dict: &PlantedDictionary,
    target: usize,
    n_pairs: usize,
    shape: PairShape,
    seed: u64,
) -> Result<SyntheticPairs> {
    let (d, m_true) = (dict.dim(), dict.num_atoms());
    if target >= m_true {
        return Err(Error::Param(format!(
            "target atom {target} out of range for {m_true} atoms"
        )));
    }
    if shape.tokens == 0 || shape.context_atoms >= m_true {
        return Err(Error::Param(format!(
            "pair shape needs tokens >= 1 and context_atoms < {m_true}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_atom = dict.atom(target);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut mention = Vec::with_capacity(n_pairs);
    let mut coeffs = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let pos = rng.gen_range(0..shape.tokens);
        let coeff = rng.gen_range(0.5..1.5);
        let mut concept = Vec::with_capacity(shape.tokens * d);
        let mut deconcept = Vec::with_capacity(shape.tokens * d);
        for t in 0..shape.tokens {
            let code = if shape.context_atoms == 0 {
                vec![0.0; m_true]
            } else {
                random_code(&mut rng, m_true, shape.context_atoms, Some(target))
            };
            let mut h = dict.synthesize(&code);
            for (x, e) in h.iter_mut().zip(noise(&mut rng, d, shape.sigma)) {
                *x += e;
            }
            deconcept.extend_from_slice(&h);
            if t == pos {
                for (x, a) in h.iter_mut().zip(&target_atom) {
                    *x += coeff * a;
                }
            }
            concept.extend(h);
        }
        pairs.push(ConceptPair {
            concept: Matrix::from_vec(shape.tokens, d, concept)?,
            deconcept: Matrix::from_vec(shape.tokens, d, deconcept)?,
            concept_text: Some(format!("synthetic concept prompt {p} (atom {target})")),
            deconcept_text: Some(format!("synthetic deconcept prompt {p}")),
        });
        mention.push(pos);
        coeffs.push(coeff);
    }
    Ok(SyntheticPairs {
        set: ConceptPairSet {
            concept: format!("atom{target}"),
            pairs,
        },
        target_atom: target,
        mention,
        coeff: coeffs,
    })
}

/// Best decoder match for one planted atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomMatch {
    pub atom: usize,
    pub latent: usize,
    pub abs_cosine: f64,
}

/// For each planted atom, the decoder column with the highest |cosine|.
pub fn atom_match(w_dec: &Matrix, dict: &PlantedDictionary) -> Result<Vec<AtomMatch>> {
    if w_dec.rows() != dict.dim() {
        return Err(Error::Shape(format!(
            "decoder width {} does not match dictionary width {}",
            w_dec.rows(),
            dict.dim()
        )));
    }
    let latents: Vec<Vec<f64>> = (0..w_dec.cols()).map(|i| w_dec.column(i)).collect();
    Ok((0..dict.num_atoms())
        .map(|j| {
            let a = dict.atom(j);
            let mut best = AtomMatch {
                atom: j,
                latent: 0,
                abs_cosine: -1.0,
            };
            for (i, col) in latents.iter().enumerate() {
                let c = abs_cosine(&a, col);
                if c > best.abs_cosine {
                    best.latent = i;
                    best.abs_cosine = c;
                }
            }
            best
        })
        .collect())
}

/// Fraction of atoms whose best match exceeds `threshold`.
pub fn recovery_rate(matches: &[AtomMatch], threshold: f64) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    matches.iter().filter(|m| m.abs_cosine > threshold).count() as f64 / matches.len() as f64
}

/// Everything [`brute_force_identify`] computes.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceIdentification {
    pub concept_scores: NeuronScoreTable,
    pub deconcept_scores: NeuronScoreTable,
    pub differential: Vec<usize>,
    pub neurons: Vec<usize>,
}

/// Dense, loop-by-loop recomputation of the identification pipeline: encode
/// each token with explicit sums, pick TopK by repeated argmax, build the
/// full `m × N` normalized activation matrix per side, count and score,
/// filter, and sort. Meant for small instances only.
pub fn brute_force_identify(
    params: &SaeParams,
    k: usize,
    pairs: &ConceptPairSet,
    top: usize,
) -> BruteForceIdentification {
    let concept: Vec<&Matrix> = pairs.pairs.iter().map(|p| &p.concept).collect();
    let deconcept: Vec<&Matrix> = pairs.pairs.iter().map(|p| &p.deconcept).collect();
    let sc = naive_scores(params, k, &concept);
    let sd = naive_scores(params, k, &deconcept);
    let m = params.latent_dim();
    let mut differential = Vec::new();
    for i in 0..m {
        if sc.score[i] > 0.0 && sd.score[i] == 0.0 {
            differential.push(i);
        }
    }
    // selection sort: highest score first, lower index on ties
    let mut remaining = differential.clone();
    let mut neurons = Vec::new();
    while neurons.len() < top && !remaining.is_empty() {
        let mut best = 0;
        for c in 1..remaining.len() {
            let (a, b) = (remaining[c], remaining[best]);
            if sc.score[a] > sc.score[b] || (sc.score[a] == sc.score[b] && a < b) {
                best = c;
            }
        }
        neurons.push(remaining.remove(best));
    }
    BruteForceIdentification {
        concept_scores: sc,
        deconcept_scores: sd,
        differential,
        neurons,
    }
}

// index loops on purpose: this is the reference the fast path is checked against
#[allow(clippy::needless_range_loop)]
fn naive_scores(params: &SaeParams, k: usize, prompts: &[&Matrix]) -> NeuronScoreTable {
    let m = params.latent_dim();
    let d = params.input_dim();
    // columns of Z_norm, one per token
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for prompt in prompts {
        for t in 0..prompt.rows() {
            let h = prompt.row(t);
            let mut z = vec![0.0; m];
            for i in 0..m {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += params.w_enc.get(i, c) * (h[c] - params.b_pre[c]);
                }
                acc += params.b_enc[i];
                z[i] = if acc > 0.0 { acc } else { 0.0 };
            }
            let mut taken = vec![false; m];
            for _ in 0..k {
                let mut best = usize::MAX;
                for i in 0..m {
                    if !taken[i] && (best == usize::MAX || z[i] > z[best]) {
                        best = i;
                    }
                }
                taken[best] = true;
            }
            for i in 0..m {
                if !taken[i] {
                    z[i] = 0.0;
                }
            }
            let mut sq = 0.0;
            for i in 0..m {
                sq += z[i] * z[i];
            }
            let len = sq.sqrt();
            if len > 0.0 {
                for v in z.iter_mut() {
                    *v /= len;
                }
            }
            columns.push(z);
        }
    }
    let n = columns.len();
    let mut freq = vec![0usize; m];
    let mut score = vec![0.0; m];
    for i in 0..m {
        let mut sum = 0.0;
        for col in &columns {
            if col[i] > 0.0 {
                freq[i] += 1;
            }
            sum += col[i];
        }
        score[i] = if n == 0 {
            0.0
        } else {
            freq[i] as f64 * (sum / n as f64)
        };
    }
    NeuronScoreTable {
        freq,
        score,
        token_count: n,
    }
}

/// Desk-scale benchmark preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeskPreset {
    pub d: usize,
    pub m_true: usize,
    pub n: usize,
    pub k_true: usize,
    pub sigma: f64,
    pub n_pairs: usize,
}

impl Default for DeskPreset {
    fn default() -> Self {
        Self {
            d: 32,
            m_true: 16,
            n: 10_000,
            k_true: 3,
            sigma: 0.01,
            n_pairs: 100,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_is_deterministic_normalized_and_incoherent() {
        let a = gen_dictionary(7, 32, 16).unwrap();
        let b = gen_dictionary(7, 32, 16).unwrap();
        assert_eq!(a, b);
        for n in a.atoms.column_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(a.max_coherence() < 0.5);
        assert_ne!(a, gen_dictionary(8, 32, 16).unwrap());
    }

    #[test]
    fn dictionary_rejects_degenerate_sizes() {
        assert!(gen_dictionary(0, 1, 4).is_err());
        assert!(gen_dictionary(0, 4, 1).is_err());
        // 40 unit vectors in R^2 cannot all be mutually below |cos| 0.5
        assert!(matches!(
            gen_dictionary(0, 2, 40),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn noiseless_single_atom_tokens_lie_on_atom_rays() {
        let dict = gen_dictionary(1, 8, 5).unwrap();
        let c = gen_corpus(&dict, 50, 1, 0.0, 2).unwrap();
        for t in 0..50 {
            let code = c.codes.row(t);
            let support: Vec<usize> = (0..5).filter(|&j| code[j] > 0.0).collect();
            assert_eq!(support.len(), 1);
            let j = support[0];
            let h = c.features.row(t);
            for r in 0..8 {
                let want = dict.mean[r] + code[j] * dict.atoms.get(r, j);
                assert_eq!(h[r], want);
            }
        }
    }

    #[test]
    fn codes_have_k_true_positive_entries_in_range() {
        let dict = gen_dictionary(3, 32, 16).unwrap();
        let c = gen_corpus(&dict, 200, 3, 0.01, 4).unwrap();
        for t in 0..200 {
            let pos: Vec<f64> = c
                .codes
                .row(t)
                .iter()
                .copied()
                .filter(|v| *v > 0.0)
                .collect();
            assert_eq!(pos.len(), 3);
            assert!(pos.iter().all(|v| (0.5..1.5).contains(v)));
        }
    }

    #[test]
    fn residual_from_true_code_is_the_noise() {
        let dict = gen_dictionary(3, 16, 8).unwrap();
        let sigma = 0.05;
        let c = gen_corpus(&dict, 400, 2, sigma, 5).unwrap();
        let mut sq = 0.0;
        for t in 0..400 {
            let clean = dict.synthesize(c.codes.row(t));
            let r: Vec<f64> = c
                .features
                .row(t)
                .iter()
                .zip(&clean)
                .map(|(a, b)| a - b)
                .collect();
            sq += r.iter().map(|x| x * x).sum::<f64>();
        }
        let per_coord = sq / (400.0 * 16.0);
        assert!((per_coord - sigma * sigma).abs() < 0.1 * sigma * sigma);
    }

    #[test]
    fn corpus_is_deterministic() {
        let dict = gen_dictionary(3, 32, 16).unwrap();
        assert_eq!(
            gen_corpus(&dict, 100, 3, 0.01, 9).unwrap(),
            gen_corpus(&dict, 100, 3, 0.01, 9).unwrap()
        );
    }

    #[test]
    fn pairs_differ_only_by_target_atom() {
        let dict = gen_dictionary(11, 32, 16).unwrap();
        let sp = gen_concept_pairs_synthetic(&dict, 5, 100, PairShape::default(), 12).unwrap();
        assert_eq!(sp.set.pairs.len(), 100);
        let atom = dict.atom(5);
        for (p, pair) in sp.set.pairs.iter().enumerate() {
            for t in 0..pair.concept.rows() {
                let diff: Vec<f64> = pair
                    .concept
                    .row(t)
                    .iter()
                    .zip(pair.deconcept.row(t))
                    .map(|(a, b)| a - b)
                    .collect();
                if t == sp.mention[p] {
                    assert!((abs_cosine(&diff, &atom) - 1.0).abs() < 1e-12);
                    for (x, a) in diff.iter().zip(&atom) {
                        assert!((x - sp.coeff[p] * a).abs() < 1e-12);
                    }
                } else {
                    assert!(diff.iter().all(|x| *x == 0.0));
                }
            }
        }
    }

    #[test]
    fn atom_match_examples() {
        let dict = gen_dictionary(2, 16, 6).unwrap();
        let m = atom_match(&dict.atoms, &dict).unwrap();
        for (j, am) in m.iter().enumerate() {
            assert_eq!(am.latent, j);
            assert!((am.abs_cosine - 1.0).abs() < 1e-12);
        }

        // permute columns and flip signs
        let perm = [3, 0, 5, 1, 4, 2];
        let mut rows = Vec::new();
        for r in 0..16 {
            rows.push(
                perm.iter()
                    .enumerate()
                    .map(|(c, &j)| if c % 2 == 0 { -1.0 } else { 1.0 } * dict.atoms.get(r, j))
                    .collect::<Vec<_>>(),
            );
        }
        let shuffled = Matrix::from_rows(&rows).unwrap();
        for am in atom_match(&shuffled, &dict).unwrap() {
            assert!((am.abs_cosine - 1.0).abs() < 1e-12);
            assert_eq!(perm[am.latent], am.atom);
        }

        assert!(atom_match(&Matrix::zeros(8, 4), &dict).is_err());
    }

    #[test]
    fn random_decoder_matches_stay_below_recovery_threshold() {
        let dict = gen_dictionary(4, 32, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let data: Vec<f64> = (0..32 * 128)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let w = Matrix::from_vec(32, 128, data).unwrap();
        let matches = atom_match(&w, &dict).unwrap();
        assert_eq!(recovery_rate(&matches, 0.9), 0.0);
        let mean: f64 = matches.iter().map(|m| m.abs_cosine).sum::<f64>() / 16.0;
        assert!(mean < 0.8, "{mean}");
    }
}
