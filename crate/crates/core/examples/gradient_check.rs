// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checks the analytic SAE gradient against central finite differences on
//! random SAEs, skipping coordinates that sit on a ReLU/TopK kink.
//!
//! Usage:
//!   cargo run --release --example gradient_check -- [seeds]

use snce::gradcheck::{gradient_check, GradCheckConfig};

fn main() -> snce::Result<()> {
    let seeds = std::env::args()
        .nth(1)
        .map_or(100, |s| s.parse().expect("seed count"));
    for (d, m, k) in [(8, 32, 4), (4, 16, 1), (16, 64, 8)] {
        let cfg = GradCheckConfig {
            input_dim: d,
            latent_dim: m,
            topk: k,
            seeds,
            ..GradCheckConfig::default()
        };
        let r = gradient_check(&cfg)?;
        println!(
            "d={d:>2} m={m:>2} K={k}: max rel err {:.2e} over {} coordinates, {} skipped near a kink -> {}",
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passes(1e-4) { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
