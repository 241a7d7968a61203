// SPDX-License-Identifier: MIT OR Apache-2.0

//! Full planted-concept pipeline at desk scale: generate a dictionary and a
//! corpus, train an SAE, identify the neuron for one planted atom, and erase
//! it from held-out concept prompts.
//!
//! Usage:
//!   cargo run --release --example planted_pipeline -- [seed] [epochs]

use std::time::Instant;

use snce::concept::identify;
use snce::erasure::{apply_erasure, ManipulationSpec};
use snce::numerics::{abs_cosine, norm};
use snce::synth::{
    atom_match, gen_concept_pairs_synthetic, gen_corpus, gen_dictionary, recovery_rate, DeskPreset,
    PairShape,
};
use snce::trainer::{train, TrainConfig};
use snce::SaeConfig;

fn main() -> snce::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let preset = DeskPreset::default();
    let mut train_cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    if let Some(e) = args.next() {
        train_cfg.epochs = e.parse().expect("epochs");
    }
    let sae_cfg = SaeConfig::desk();

    let dict = gen_dictionary(seed, preset.d, preset.m_true)?;
    let corpus = gen_corpus(&dict, preset.n, preset.k_true, preset.sigma, seed + 1)?;

    let t0 = Instant::now();
    let (params, report) = train(&sae_cfg, &train_cfg, &corpus.features)?;
    let first = report.first().unwrap();
    let last = report.last().unwrap();
    println!(
        "trained {} epochs in {:.1?}: mse {:.4} -> {:.5}, dead {}",
        train_cfg.epochs,
        t0.elapsed(),
        first.mse,
        last.mse,
        last.dead
    );

    let matches = atom_match(&params.w_dec, &dict)?;
    println!(
        "atom recovery (|cos| > 0.9): {:.0}%",
        100.0 * recovery_rate(&matches, 0.9)
    );

    let target = (seed as usize) % preset.m_true;
    let shape = PairShape {
        context_atoms: sae_cfg.topk,
        sigma: preset.sigma,
        ..PairShape::default()
    };
    let pairs = gen_concept_pairs_synthetic(&dict, target, preset.n_pairs, shape, seed + 2)?;
    let id = identify(&params, sae_cfg.topk, &pairs.set, 1)?;
    let Some(&neuron) = id.neurons.first() else {
        println!(
            "no differential neuron for atom {target}: {:?}",
            id.diagnostics
        );
        return Ok(());
    };
    let cos = abs_cosine(&params.atom(neuron), &dict.atom(target));
    println!(
        "atom {target} -> neuron {neuron} (|cos| {cos:.3}); |N_C| = {}, filtered {}",
        id.diagnostics.differential, id.diagnostics.filtered
    );

    let held_out = gen_concept_pairs_synthetic(&dict, target, 50, shape, seed + 3)?;
    for lambda in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2] {
        let spec = ManipulationSpec::new(vec![neuron], lambda, "planted")?;
        let (mut on_before, mut on_after, mut off_ratio, mut off_n) = (0.0, 0.0, 0.0, 0);
        for (p, pair) in held_out.set.pairs.iter().enumerate() {
            let (erased, r) = apply_erasure(&params, sae_cfg.topk, &pair.concept, &spec)?;
            for t in 0..pair.concept.rows() {
                if t == held_out.mention[p] {
                    on_before += r.target_before[t];
                    on_after += r.target_after[t];
                } else {
                    let d = norm(&snce::numerics::sub(pair.concept.row(t), erased.row(t)));
                    off_ratio += d / norm(pair.concept.row(t));
                    off_n += 1;
                }
            }
        }
        println!(
            "λ = {lambda:.1}: target {on_before:.2} -> {on_after:.3} ({:.1}% removed), off-target perturbation {:.3}%",
            100.0 * (1.0 - on_after / on_before),
            100.0 * off_ratio / off_n as f64
        );
    }
    Ok(())
}
