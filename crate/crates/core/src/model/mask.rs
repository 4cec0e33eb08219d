use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-sample masking. Visible tokens are listed in shuffled order, followed
/// by the masked tokens; `restore[j]` is the position of grid token `j` in
/// that concatenated order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub restore: Vec<usize>,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.restore.len()
    }

    /// Builds a plan from an explicit shuffled order and visible count.
    pub fn from_order(order: Vec<usize>, n_visible: usize) -> Result<Self> {
        let n = order.len();
        let mut restore = vec![usize::MAX; n];
        for (pos, &tok) in order.iter().enumerate() {
            if tok >= n || restore[tok] != usize::MAX {
                return Err(Error::invalid("mask_plan", "order is not a permutation"));
            }
            restore[tok] = pos;
        }
        if n_visible == 0 || n_visible >= n {
            return Err(Error::invalid(
                "mask_plan",
                format!("{n_visible} visible of {n} tokens leaves an empty side"),
            ));
        }
        let masked = order[n_visible..].to_vec();
        let mut visible = order;
        visible.truncate(n_visible);
        Ok(Self {
            visible,
            masked,
            restore,
        })
    }
}

/// `ceil((1 - ratio) n)`, tolerant of rounding noise in the product.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    let exact = (1.0 - ratio) * n as f64;
    (exact - 1e-9).ceil().max(0.0) as usize
}

pub fn random_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(
            "random_mask",
            format!("mask ratio {ratio} outside (0, 1)"),
        ));
    }
    let noise: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
    MaskPlan::from_order(order, visible_count(n, ratio))
}
