// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains a desk-scale TopK SAE on a planted-dictionary corpus, prints the
//! training curve, and saves the checkpoint plus its CSV report.
//!
//! Usage:
//!   cargo run --release --example train_sae -- [out_dir] [seed]

use std::path::PathBuf;

use snce::io::{load_checkpoint, save_checkpoint};
use snce::synth::{atom_match, gen_corpus, gen_dictionary, recovery_rate, DeskPreset};
use snce::trainer::{mean_mse, train, TrainConfig};
use snce::SaeConfig;

fn main() -> snce::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/train_sae".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    std::fs::create_dir_all(&out).map_err(|e| snce::Error::io(&out, e))?;

    let preset = DeskPreset::default();
    let dict = gen_dictionary(seed, preset.d, preset.m_true)?;
    let corpus = gen_corpus(&dict, preset.n, preset.k_true, preset.sigma, seed + 1)?;

    let sae_cfg = SaeConfig::desk();
    let train_cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let (params, report) = train(&sae_cfg, &train_cfg, &corpus.features)?;

    println!("{:>8} {:>10} {:>10} {:>5}", "tokens", "mse", "aux", "dead");
    for r in report.records.iter().step_by(5) {
        println!(
            "{:>8} {:>10.5} {:>10.5} {:>5}",
            r.tokens, r.mse, r.aux, r.dead
        );
    }
    let matches = atom_match(&params.w_dec, &dict)?;
    println!(
        "recovered {:.0}% of {} planted atoms at |cos| > 0.9",
        100.0 * recovery_rate(&matches, 0.9),
        dict.num_atoms()
    );

    let ckpt = out.join("sae.snck");
    save_checkpoint(&params, &sae_cfg, &ckpt)?;
    report.write_csv(&out.join("sae.csv"))?;
    let (loaded, _) = load_checkpoint(&ckpt)?;
    println!(
        "saved {} (mse after f32 round trip: {:.5})",
        ckpt.display(),
        mean_mse(&loaded, sae_cfg.topk, &corpus.features)?
    );
    Ok(())
}
