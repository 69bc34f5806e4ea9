//! Separate target and source attention products against the single product
//! over the concatenated key axis.
//!
//! cargo run --release --example concat_identity

use can_core::attention::concat_attention_identity;
use can_core::numerics::{matmul, uniform_init};
use can_core::Matrix;

fn main() -> can_core::Result<()> {
    let (t, s, d) = (5, 7, 16);
    let x: Matrix = uniform_init(t, d, 1.0, 1);
    let h = uniform_init(s, d, 1.0, 2);
    let ax = uniform_init(t, t, 1.0, 3);
    let ah = uniform_init(t, s, 1.0, 4);
    let wv1 = uniform_init(d, d, 0.5, 5);
    let wv2 = uniform_init(d, d, 0.5, 6);

    let separate = matmul(&ax, &matmul(&x, &wv1)?)?.add(&matmul(&ah, &matmul(&h, &wv2)?)?)?;
    let joint = concat_attention_identity(&x, &h, &ax, &ah, &wv1, &wv2)?;

    let err = separate.max_abs_diff(&joint);
    println!("t={t} s={s} d={d}: max |Ax X Wv1 + Ah H Wv2 - [Ax Ah][X Wv1; H Wv2]| = {err:.2e}");
    Ok(())
}
