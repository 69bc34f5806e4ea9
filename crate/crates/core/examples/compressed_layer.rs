//! One compressed decoder layer body on random inputs: the joint attention
//! distribution over `[target prefix; source]` and the causality check.
//!
//! cargo run --release --example compressed_layer

use can_core::attention::{compressed_attention, joint_attention_weights, DecoderLayerParams, JointMask};
use can_core::numerics::uniform_init;
use can_core::{DecoderVariant, Matrix, Model, ModelConfig};

fn main() -> can_core::Result<()> {
    let (t, s, d, heads) = (4, 6, 16, 4);
    let model: Model = Model::new(ModelConfig::new(d, heads, 1, 1, 8, DecoderVariant::Compressed).with_seed(3))?;
    let DecoderLayerParams::Compressed(p) = &model.params().decoder[0] else { unreachable!() };
    let x: Matrix = uniform_init(t, d, 1.0, 1);
    let h = uniform_init(s, d, 1.0, 2);
    let mask = JointMask::new(t, s)?;

    let weights = joint_attention_weights(&x, &h, &p.wq, &p.wk1, &p.wk2, heads, &mask)?;
    println!("head 0 weights, columns 0..{t} target, {t}..{} source", t + s);
    for i in 0..t {
        let row: Vec<String> = weights[0].row(i).iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}   sum {:.12}", row.join(" "), weights[0].row(i).iter().sum::<f64>());
    }

    let y = compressed_attention(&x, &h, p, heads, &mask)?;
    let mut x2 = x.clone();
    x2.row_mut(t - 1).fill(5.0);
    let y2 = compressed_attention(&x2, &h, p, heads, &mask)?;
    let unchanged = (0..t - 1).all(|i| y.row(i) == y2.row(i));
    println!("output {}x{}; rows before the perturbed last row unchanged: {unchanged}", y.rows(), y.cols());
    Ok(())
}
