use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed 2-D sine-cosine embedding `[gh·gw, d]`. The first half of each row
/// encodes the grid row, the second half the grid column; each half holds
/// `(sin, cos)` pairs at frequencies `10000^(-k/(d/4))`.
pub fn sincos_pos_embed(gh: usize, gw: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::invalid(
            "sincos_pos_embed",
            format!("dim {d} not divisible by 4"),
        ));
    }
    if gh == 0 || gw == 0 {
        return Err(Error::invalid("sincos_pos_embed", "empty grid"));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 10000f64.powf(-(k as f64) / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            for pos in [r as f64, c as f64] {
                for &w in &omega {
                    let a = pos * w;
                    out.push(a.sin());
                    out.push(a.cos());
                }
            }
        }
    }
    Tensor::new([gh * gw, d], out)
}
