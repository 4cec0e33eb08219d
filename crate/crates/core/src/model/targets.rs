use rustfft::FftDirection;

use crate::error::{Error, Result};
use crate::fft::{fft2, normalized_radius, C64};
use crate::tensor::Tensor;

/// Variance guard for per-patch target normalisation.
pub const TARGET_EPS: f64 = 1e-6;

/// Per patch (last axis): `(x - mean) / sqrt(var + 1e-6)` with the
/// population variance.
pub fn normalize_targets(patches: &Tensor) -> Tensor {
    let k = *patches.shape().last().unwrap();
    let mut out = patches.clone();
    for row in out.data_mut().chunks_mut(k) {
        let mean = row.iter().sum::<f64>() / k as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let inv = 1.0 / (var + TARGET_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Removes every Fourier component of each `H × W` plane whose normalised
/// radius (Nyquist corner = 1) exceeds `cutoff`.
pub fn lowpass_targets(images: &Tensor, cutoff: f64) -> Result<Tensor> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::invalid(
            "lowpass_targets",
            format!("cutoff {cutoff} outside (0, 1]"),
        ));
    }
    let s = images.shape();
    if s.len() < 2 {
        return Err(Error::invalid(
            "lowpass_targets",
            format!("expected [.., H, W], got {s:?}"),
        ));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let keep: Vec<bool> = (0..h * w)
        .map(|i| normalized_radius(i / w, i % w, h, w) <= cutoff)
        .collect();
    let scale = 1.0 / (h * w) as f64;
    let mut out = images.clone();
    let mut buf = vec![C64::default(); h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for (b, &v) in buf.iter_mut().zip(plane.iter()) {
            *b = C64::new(v, 0.0);
        }
        fft2(&mut buf, h, w, FftDirection::Forward);
        for (b, &k) in buf.iter_mut().zip(&keep) {
            if !k {
                *b = C64::default();
            }
        }
        fft2(&mut buf, h, w, FftDirection::Inverse);
        for (v, b) in plane.iter_mut().zip(&buf) {
            *v = b.re * scale;
        }
    }
    Ok(out)
}
