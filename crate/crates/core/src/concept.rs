// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-specific neuron identification.
//!
//! Concept prompts and their matched deconcept prompts (the same prompt with
//! the concept mention removed) are encoded token by token. Each token's
//! TopK code is L2-normalized, and per neuron we compute
//!
//! ```text
//! f_i = #{ j : Z_norm[i, j] > 0 }
//! s_i = f_i · (1/N) Σ_j Z_norm[i, j]
//! ```
//!
//! over all `N` tokens pooled from every prompt on one side. Neurons with
//! `s_i^c > 0` and `s_i^d == 0` are the differential set; the `k` with the
//! highest `s_i^c` are the concept's neurons `R_C`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{l2_normalize, Matrix};
use crate::sae::SaeParams;
use crate::{Error, Result};

/// A concept and the mentions that express it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTuple {
    pub name: String,
    pub mentions: Vec<String>,
}

impl ConceptTuple {
    pub fn new(name: impl Into<String>, mentions: Vec<String>) -> Result<Self> {
        if mentions.is_empty() {
            return Err(Error::Input(
                "concept tuple needs at least one mention".into(),
            ));
        }
        for (i, m) in mentions.iter().enumerate() {
            if mentions[..i].contains(m) {
                return Err(Error::Input(format!("duplicate mention {m:?}")));
            }
        }
        Ok(Self {
            name: name.into(),
            mentions,
        })
    }
}

/// Token embeddings of one concept prompt and its deconcept counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPair {
    /// `N_c × d`
    pub concept: Matrix,
    /// `N_d × d`
    pub deconcept: Matrix,
    pub concept_text: Option<String>,
    pub deconcept_text: Option<String>,
}

impl ConceptPair {
    pub fn new(concept: Matrix, deconcept: Matrix) -> Result<Self> {
        if concept.rows() == 0 || deconcept.rows() == 0 {
            return Err(Error::Input(
                "concept pair prompts need at least one token".into(),
            ));
        }
        if concept.cols() != deconcept.cols() {
            return Err(Error::Shape(format!(
                "concept width {} differs from deconcept width {}",
                concept.cols(),
                deconcept.cols()
            )));
        }
        Ok(Self {
            concept,
            deconcept,
            concept_text: None,
            deconcept_text: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPairSet {
    pub concept: String,
    pub pairs: Vec<ConceptPair>,
}

/// Normalized TopK activations, stored sparsely one token column at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    latent_dim: usize,
    /// Per token: `(neuron, value)` for nonzero entries, neuron ascending.
    columns: Vec<Vec<(usize, f64)>>,
}

impl ActivationTensor {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            columns: Vec::new(),
        }
    }

    /// Appends one token column from a dense, already normalized vector.
    pub fn push_dense(&mut self, column: &[f64]) {
        debug_assert_eq!(column.len(), self.latent_dim);
        self.columns.push(
            column
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        );
    }

    /// Appends all token columns of `other`.
    pub fn extend(&mut self, other: ActivationTensor) {
        assert_eq!(self.latent_dim, other.latent_dim);
        self.columns.extend(other.columns);
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn token_count(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.columns[j]
    }

    /// `m × N` dense copy.
    pub fn to_dense(&self) -> Matrix {
        let n = self.columns.len();
        let mut out = Matrix::zeros(self.latent_dim, n);
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                out.set(i, j, v);
            }
        }
        out
    }

    /// Builds from a dense `m × N` matrix (neurons × tokens).
    pub fn from_dense(m: &Matrix) -> Self {
        let mut t = Self::new(m.rows());
        for j in 0..m.cols() {
            t.push_dense(&m.column(j));
        }
        t
    }
}

/// Encodes every token of `tokens` and keeps its L2-normalized TopK code.
pub fn collect_activations(
    params: &SaeParams,
    k: usize,
    tokens: &Matrix,
) -> Result<ActivationTensor> {
    if tokens.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "tokens have {} features, SAE expects {}",
            tokens.cols(),
            params.input_dim()
        )));
    }
    let columns = (0..tokens.rows())
        .into_par_iter()
        .map(|t| {
            let z = params.encode(tokens.row(t), k)?;
            let normed = l2_normalize(&z.values);
            Ok(z.support
                .iter()
                .filter(|&&i| normed[i] != 0.0)
                .map(|&i| (i, normed[i]))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationTensor {
        latent_dim: params.latent_dim(),
        columns,
    })
}

/// `f_i`: number of tokens on which neuron `i` is positive.
pub fn activation_frequency(acts: &ActivationTensor) -> Vec<usize> {
    let mut f = vec![0; acts.latent_dim];
    for col in &acts.columns {
        for &(i, v) in col {
            if v > 0.0 {
                f[i] += 1;
            }
        }
    }
    f
}

/// Frequency and weighted frequency score of every neuron over one pooled
/// prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScoreTable {
    pub freq: Vec<usize>,
    pub score: Vec<f64>,
    pub token_count: usize,
}

impl NeuronScoreTable {
    /// Neurons with `score > min_score`, best first.
    pub fn ranked_above(&self, min_score: f64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.score.len())
            .filter(|&i| self.score[i] > min_score)
            .collect();
        idx.sort_by(|&a, &b| self.score[b].total_cmp(&self.score[a]).then(a.cmp(&b)));
        idx
    }
}

/// `s_i = f_i · mean_j Z_norm[i, j]`.
pub fn weighted_frequency_score(acts: &ActivationTensor) -> Result<NeuronScoreTable> {
    let n = acts.token_count();
    if n == 0 {
        return Err(Error::Input("cannot score an empty token set".into()));
    }
    let freq = activation_frequency(acts);
    let mut sums = vec![0.0; acts.latent_dim];
    for col in &acts.columns {
        for &(i, v) in col {
            sums[i] += v;
        }
    }
    let score = freq
        .iter()
        .zip(&sums)
        .map(|(&f, &s)| f as f64 * (s / n as f64))
        .collect();
    Ok(NeuronScoreTable {
        freq,
        score,
        token_count: n,
    })
}

/// Neurons that score on the concept side and are exactly silent on the
/// deconcept side.
pub fn differential_neurons(s_concept: &[f64], s_deconcept: &[f64]) -> Result<Vec<usize>> {
    if s_concept.len() != s_deconcept.len() {
        return Err(Error::Shape(format!(
            "concept scores have {} neurons, deconcept scores {}",
            s_concept.len(),
            s_deconcept.len()
        )));
    }
    Ok((0..s_concept.len())
        .filter(|&i| s_concept[i] > 0.0 && s_deconcept[i] == 0.0)
        .collect())
}

/// Output of [`rank_top_k`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub neurons: Vec<usize>,
    /// Set when there were no candidates to rank.
    pub empty: bool,
}

/// Sorts `candidates` by `s_concept` descending (lower index first on ties)
/// and keeps the first `k`.
pub fn rank_top_k(candidates: &[usize], s_concept: &[f64], k: usize) -> Result<Ranking> {
    if k == 0 {
        return Err(Error::Param("top-k neuron count must be at least 1".into()));
    }
    if let Some(&bad) = candidates.iter().find(|&&i| i >= s_concept.len()) {
        return Err(Error::Param(format!(
            "candidate neuron {bad} out of range for {} scores",
            s_concept.len()
        )));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|&a, &b| s_concept[b].total_cmp(&s_concept[a]).then(a.cmp(&b)));
    sorted.dedup();
    sorted.truncate(k);
    Ok(Ranking {
        empty: candidates.is_empty(),
        neurons: sorted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `|N_C|`
    pub differential: usize,
    /// Neurons active on the concept side but dropped because they also
    /// fire on deconcept prompts.
    pub filtered: usize,
    pub concept_tokens: usize,
    pub deconcept_tokens: usize,
    /// No differential neuron was found.
    pub warning: bool,
}

/// Result of [`identify`].
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    /// `R_C`, best first.
    pub neurons: Vec<usize>,
    /// `N_C`, ascending.
    pub differential: Vec<usize>,
    pub concept_scores: NeuronScoreTable,
    pub deconcept_scores: NeuronScoreTable,
    pub diagnostics: Diagnostics,
}

/// Pools all concept tokens and all deconcept tokens of `pairs`, scores both
/// sides, and returns the top `k` differential neurons.
pub fn identify(
    params: &SaeParams,
    k_active: usize,
    pairs: &ConceptPairSet,
    k: usize,
) -> Result<Identification> {
    if pairs.pairs.is_empty() {
        return Err(Error::Input(format!(
            "concept {:?} has no prompt pairs",
            pairs.concept
        )));
    }
    let concept: Vec<&Matrix> = pairs.pairs.iter().map(|p| &p.concept).collect();
    let deconcept: Vec<&Matrix> = pairs.pairs.iter().map(|p| &p.deconcept).collect();
    let concept = collect_activations(params, k_active, &Matrix::vstack(&concept)?)?;
    let deconcept = collect_activations(params, k_active, &Matrix::vstack(&deconcept)?)?;
    let sc = weighted_frequency_score(&concept)?;
    let sd = weighted_frequency_score(&deconcept)?;
    let differential = differential_neurons(&sc.score, &sd.score)?;
    let ranking = rank_top_k(&differential, &sc.score, k)?;
    let filtered = (0..sc.score.len())
        .filter(|&i| sc.score[i] > 0.0 && sd.score[i] > 0.0)
        .count();
    if ranking.empty {
        log::warn!(
            "concept {:?}: no neuron fires on concept prompts while staying silent on deconcept prompts",
            pairs.concept
        );
    }
    let diagnostics = Diagnostics {
        differential: differential.len(),
        filtered,
        concept_tokens: sc.token_count,
        deconcept_tokens: sd.token_count,
        warning: ranking.empty,
    };
    Ok(Identification {
        neurons: ranking.neurons,
        differential,
        concept_scores: sc,
        deconcept_scores: sd,
        diagnostics,
    })
}
