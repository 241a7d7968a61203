// SPDX-License-Identifier: MIT OR Apache-2.0

//! Erases one latent direction from a prompt and sweeps the manipulation
//! coefficient: `h_m = h - W_dec (λ · z masked to R_C)`, with `z` the
//! token's own code.
//!
//! Usage:
//!   cargo run --example erase_concept -- [sweep]      (default 0:1.2:0.2)

use snce::erasure::{apply_erasure, default_lambda, parse_sweep, sweep, ManipulationSpec};
use snce::numerics::Matrix;
use snce::SaeParams;

fn main() -> snce::Result<()> {
    let grid = parse_sweep(
        &std::env::args()
            .nth(1)
            .unwrap_or_else(|| "0:1.2:0.2".into()),
    )?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let params = SaeParams {
        w_enc: Matrix::from_rows(&[
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [s, s, 0.0],
        ])?,
        b_enc: vec![0.0, 0.0, 0.0, -0.2],
        w_dec: Matrix::from_rows(&[[1.0, 0.0, 0.0, s], [0.0, 1.0, 0.0, s], [0.0, 0.0, 1.0, 0.0]])?,
        b_pre: vec![0.0; 3],
    };
    // a three-token prompt; only the middle token carries latent 2
    let prompt = Matrix::from_rows(&[[0.9, 0.1, 0.0], [0.2, 0.0, 1.3], [0.0, 0.7, 0.0]])?;

    let concept = "nudity";
    let spec = ManipulationSpec::new(vec![2], default_lambda(concept), concept)?;
    let (erased, report) = apply_erasure(&params, 2, &prompt, &spec)?;
    println!("default λ for {concept:?}: {}", spec.lambda);
    for t in 0..prompt.rows() {
        println!(
            "token {t}: {:?} -> [{:.3}, {:.3}, {:.3}]  target {:.3} -> {:.3}, moved {:.3}",
            prompt.row(t),
            erased.get(t, 0),
            erased.get(t, 1),
            erased.get(t, 2),
            report.target_before[t],
            report.target_after[t],
            report.perturbation[t]
        );
    }

    println!("\n{:>6} {:>10} {:>10}", "λ", "before", "after");
    for (lambda, _, r) in sweep(&params, 2, &prompt, &spec, &grid)? {
        println!(
            "{lambda:>6.2} {:>10.4} {:>10.4}",
            r.total_before(),
            r.total_after()
        );
    }
    println!("\nper-token report as CSV:\n{}", report.to_csv());
    Ok(())
}
