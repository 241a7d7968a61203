// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use snce::concept::{ConceptPair, ConceptPairSet};
use snce::gradcheck::{random_instance, GradCheckConfig};
use snce::synth::{
    gen_concept_pairs_synthetic, gen_corpus, gen_dictionary, DeskPreset, PairShape,
    PlantedDictionary, SyntheticPairs,
};
use snce::trainer::{train, TrainConfig, TrainReport};
use snce::{Matrix, SaeConfig, SaeParams};

/// A random SAE with an untied encoder and nonzero biases.
pub fn random_sae(seed: u64, d: usize, m: usize, k: usize) -> SaeParams {
    let cfg = GradCheckConfig {
        input_dim: d,
        latent_dim: m,
        topk: k,
        ..GradCheckConfig::default()
    };
    random_instance(&cfg, seed).expect("valid instance").0
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("consistent shape")
}

/// Random pairs over `params`: each deconcept prompt is its concept prompt
/// with a multiple of one fixed decoder column removed from every token,
/// so some neurons end up differential and others do not.
pub fn random_pairs(
    seed: u64,
    params: &SaeParams,
    n_pairs: usize,
    tokens: usize,
) -> ConceptPairSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.input_dim();
    let atom = params.atom(rng.gen_range(0..params.latent_dim()));
    let strength: f64 = rng.gen_range(0.0..3.0);
    let pairs = (0..n_pairs)
        .map(|_| {
            let t = rng.gen_range(1..=tokens);
            let concept = random_matrix(&mut rng, t, d);
            let mut deconcept = concept.clone();
            for r in 0..t {
                for (x, a) in deconcept.row_mut(r).iter_mut().zip(&atom) {
                    *x -= strength * a;
                }
            }
            ConceptPair::new(concept, deconcept).expect("same width")
        })
        .collect();
    ConceptPairSet {
        concept: format!("random-{seed}"),
        pairs,
    }
}

/// One trained desk-scale benchmark instance.
pub struct DeskRun {
    pub seed: u64,
    pub sae_cfg: SaeConfig,
    pub dict: PlantedDictionary,
    pub params: SaeParams,
    pub report: TrainReport,
    pub target: usize,
    pub pairs: SyntheticPairs,
    pub heldout: SyntheticPairs,
}

/// Generates the desk benchmark for `seed`, trains an SAE on it with the
/// desk optimizer settings, and draws 100 concept pairs plus 50 held-out
/// concept prompts for atom `seed mod 16`.
pub fn desk_run(seed: u64) -> DeskRun {
    let preset = DeskPreset::default();
    let sae_cfg = SaeConfig::desk();
    let train_cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let dict = gen_dictionary(seed, preset.d, preset.m_true).expect("dictionary");
    let corpus =
        gen_corpus(&dict, preset.n, preset.k_true, preset.sigma, seed + 1).expect("corpus");
    let (params, report) = train(&sae_cfg, &train_cfg, &corpus.features).expect("training");
    let target = (seed as usize) % preset.m_true;
    let shape = PairShape {
        context_atoms: sae_cfg.topk,
        sigma: preset.sigma,
        ..PairShape::default()
    };
    let pairs =
        gen_concept_pairs_synthetic(&dict, target, preset.n_pairs, shape, seed + 2).expect("pairs");
    let heldout = gen_concept_pairs_synthetic(&dict, target, 50, shape, seed + 3).expect("heldout");
    DeskRun {
        seed,
        sae_cfg,
        dict,
        params,
        report,
        target,
        pairs,
        heldout,
    }
}

/// Every file under `dir` (recursively) with its bytes, sorted by path.
pub fn snapshot(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("under dir").to_path_buf();
                out.push((rel, std::fs::read(&path).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

/// Runs the CLI pipeline synth → train → identify → erase in `dir`.
pub fn cli_pipeline(dir: &std::path::Path, seed: u64) -> i32 {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "synth".into(),
            "--preset".into(),
            "desk".into(),
            "--out".into(),
            p(""),
            "--seed".into(),
            seed.to_string(),
        ],
        vec![
            "--config".into(),
            p("train.toml"),
            "train".into(),
            "--corpus".into(),
            p("corpus.snce"),
            "--out".into(),
            p("sae.snck"),
        ],
        vec![
            "identify".into(),
            "--sae".into(),
            p("sae.snck"),
            "--pairs".into(),
            p("planted.jsonl"),
            "--topk".into(),
            "1".into(),
            "--out".into(),
            p("rc.json"),
        ],
        vec![
            "erase".into(),
            "--sae".into(),
            p("sae.snck"),
            "--rc".into(),
            p("rc.json"),
            "--in".into(),
            p("heldout.snce"),
            "--out".into(),
            p("heldout_m.snce"),
            "--sweep".into(),
            "0:1.2:0.2".into(),
        ],
    ];
    for step in steps {
        let code = snce::cli::run(std::iter::once("snce".to_string()).chain(step));
        if code != 0 {
            return code;
        }
    }
    0
}
