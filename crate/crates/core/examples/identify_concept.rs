// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finds the latent neurons that fire on concept prompts and stay silent on
//! their deconcept twins. The SAE is built by hand so that each latent is
//! one planted atom; no training is involved.
//!
//! Usage:
//!   cargo run --release --example identify_concept -- [target_atom] [topk]

use snce::concept::identify;
use snce::numerics::abs_cosine;
use snce::synth::{gen_concept_pairs_synthetic, gen_dictionary, PairShape};
use snce::SaeParams;

fn main() -> snce::Result<()> {
    let mut args = std::env::args().skip(1);
    let target: usize = args.next().map_or(5, |s| s.parse().expect("target atom"));
    let topk: usize = args.next().map_or(3, |s| s.parse().expect("topk"));

    let dict = gen_dictionary(11, 32, 16)?;
    // an SAE whose decoder is the dictionary and whose encoder is its
    // transpose: latent i responds to atom i
    let params = SaeParams {
        w_enc: dict.atoms.transpose(),
        b_enc: vec![0.0; 16],
        w_dec: dict.atoms.clone(),
        b_pre: dict.mean.clone(),
    };
    let k_active = 4;
    let shape = PairShape {
        context_atoms: k_active,
        ..PairShape::default()
    };
    let pairs = gen_concept_pairs_synthetic(&dict, target, 100, shape, 12)?;

    let id = identify(&params, k_active, &pairs.set, topk)?;
    let d = id.diagnostics;
    println!(
        "{} concept / {} deconcept tokens; |N_C| = {}, {} neurons filtered for firing on both sides",
        d.concept_tokens, d.deconcept_tokens, d.differential, d.filtered
    );
    println!(
        "{:>6} {:>6} {:>10} {:>10} {:>8}",
        "neuron", "f^c", "s^c", "s^d", "|cos|"
    );
    for &i in &id.neurons {
        println!(
            "{i:>6} {:>6} {:>10.4} {:>10.4} {:>8.3}",
            id.concept_scores.freq[i],
            id.concept_scores.score[i],
            id.deconcept_scores.score[i],
            abs_cosine(&params.atom(i), &dict.atom(target))
        );
    }

    // the strongest neurons overall, for contrast
    let busiest: Vec<usize> = id
        .concept_scores
        .ranked_above(0.0)
        .into_iter()
        .take(5)
        .collect();
    println!("top concept-side scores regardless of deconcept activity: {busiest:?}");
    Ok(())
}
