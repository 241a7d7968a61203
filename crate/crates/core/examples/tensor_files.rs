// SPDX-License-Identifier: MIT OR Apache-2.0

//! The on-disk formats: tensor files with an optional padding mask, SAE
//! checkpoints, and concept-pair manifests, plus what the reader says about
//! damaged files.
//!
//! Usage:
//!   cargo run --example tensor_files -- [dir]

use std::path::PathBuf;

use snce::io::{
    load_checkpoint, read_concept_manifest, read_tensor, save_checkpoint, write_concept_manifest,
    write_tensor, ManifestRow, Tensor,
};
use snce::sae::init_params;
use snce::{Matrix, SaeConfig};

fn main() -> snce::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/tensor_files".into()),
    );
    std::fs::create_dir_all(&dir).map_err(|e| snce::Error::io(&dir, e))?;

    // a padded three-token prompt: the last row is padding
    let prompt = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25], [0.0, 0.0]])?;
    let path = dir.join("prompt.snce");
    write_tensor(&path, &prompt, Some(&[true, true, false]))?;
    let back = read_tensor(&path)?;
    println!(
        "{}: {} bytes, shape {:?}, {} real tokens",
        path.display(),
        std::fs::metadata(&path)
            .map_err(|e| snce::Error::io(&path, e))?
            .len(),
        back.matrix.shape(),
        back.real_token_count()
    );

    // the same prompt used as a knife/spoon pair
    let spoon = Matrix::from_rows(&[[0.5, -1.0], [1.0, 0.25]])?;
    write_tensor(&dir.join("spoon.snce"), &spoon, None)?;
    let manifest = dir.join("knife.jsonl");
    write_concept_manifest(
        &manifest,
        &[ManifestRow {
            concept: "a man holding a knife".into(),
            deconcept: "a man holding a spoon".into(),
            concept_emb: "prompt.snce".into(),
            deconcept_emb: "spoon.snce".into(),
        }],
    )?;
    for d in read_concept_manifest(&manifest)? {
        println!(
            "line {}: {:?} vs {:?} -> {}",
            d.line,
            d.concept_text,
            d.deconcept_text,
            d.concept_emb.display()
        );
    }

    let cfg = SaeConfig {
        input_dim: 2,
        latent_dim: 8,
        topk: 2,
        ..SaeConfig::desk()
    };
    let params = init_params(&cfg, &[0.0, 0.0], 1)?;
    let ckpt = dir.join("tiny.snck");
    save_checkpoint(&params, &cfg, &ckpt)?;
    let (_, loaded_cfg) = load_checkpoint(&ckpt)?;
    println!("{}: config {loaded_cfg:?}", ckpt.display());

    let good = Tensor::from_matrix(&prompt, None)?.to_bytes();
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"NOPE");
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let mut trailing = good.clone();
    trailing.extend_from_slice(&[0, 0]);
    for (what, bytes) in [
        ("bad magic", &bad_magic[..]),
        ("bad version", &bad_version[..]),
        ("cut short", &good[..good.len() - 3]),
        ("header only", &good[..8]),
        ("trailing bytes", &trailing[..]),
    ] {
        match Tensor::from_bytes(bytes) {
            Ok(_) => println!("{what}: parsed?!"),
            Err(e) => println!("{what}: {e}"),
        }
    }
    Ok(())
}
