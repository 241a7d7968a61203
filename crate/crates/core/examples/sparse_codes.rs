// SPDX-License-Identifier: MIT OR Apache-2.0

//! Encoding and decoding with a hand-built TopK SAE: ReLU, then TopK with
//! ties going to the lower index, then the decoder.
//!
//! Usage:
//!   cargo run --example sparse_codes

use snce::numerics::{topk_select, Matrix};
use snce::SaeParams;

fn main() -> snce::Result<()> {
    // two input dimensions, four latents: the axes and the two diagonals
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let params = SaeParams {
        w_enc: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [s, s], [s, -s]])?,
        b_enc: vec![0.0, 0.0, 0.0, -0.5],
        w_dec: Matrix::from_rows(&[[1.0, 0.0, s, s], [0.0, 1.0, s, -s]])?,
        b_pre: vec![0.0, 0.0],
    };

    let raw = [3.0, -1.0, 3.0, 0.5];
    let t = topk_select(&raw, 2)?;
    println!(
        "topk_select({raw:?}, 2) -> support {:?}, masked {:?}",
        t.support, t.masked
    );

    for h in [[1.0, 1.0], [2.0, -0.5], [-1.0, -1.0]] {
        let (pre, _) = params.pre_activations(&h)?;
        for k in 1..=3 {
            let z = params.encode(&h, k)?;
            let recon = params.decode(&z)?;
            let mse = params.reconstruction_loss(&h, k)?.mse;
            println!(
                "h = {h:?}, K = {k}: pre = {:?}, support = {:?}, nnz = {}, h' = [{:.3}, {:.3}], mse = {mse:.4}",
                pre.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                z.support,
                z.nnz(),
                recon[0],
                recon[1]
            );
        }
    }
    Ok(())
}
