use rayon::prelude::*;
use rustfft::FftDirection;

use crate::error::{Error, Result};
use crate::fft::{fft2, normalized_radius, C64};
use crate::model::MimModel;
use crate::report::{Provenance, Table};
use crate::tensor::Tensor;

/// Floor inside every logarithm of the amplitude spectrum.
pub const AMP_EPS: f64 = 1e-12;

/// Δ log amplitude against normalized radial frequency. The first point is
/// the DC term at `f = 0`, always exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyCurve {
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
}

/// Bin index of a nonzero normalized radius; bins split `(0, 1]` evenly.
fn bin_of(r: f64, bins: usize) -> usize {
    ((r * bins as f64).ceil() as usize).clamp(1, bins) - 1
}

/// Relative log amplitude of a feature grid `[h,w,D]`.
///
/// The DC term is kept. Each channel's amplitude spectrum is averaged
/// radially into `bins` equal-width bins over `(0, 1]`, where radius 1 is
/// the Nyquist corner, then averaged over channels. Bins that hold no DFT
/// sample at this grid size are left out of the curve.
pub fn relative_log_amplitude(features: &Tensor, bins: usize) -> Result<FrequencyCurve> {
    let s = features.shape();
    if s.len() != 3 || s[0] * s[1] < 4 || s[2] == 0 {
        return Err(Error::invalid(
            "relative_log_amplitude",
            format!("expected a [h,w,D] grid with h·w >= 4, got {s:?}"),
        ));
    }
    if bins == 0 {
        return Err(Error::invalid("relative_log_amplitude", "bin count must be positive"));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite {
            op: "relative_log_amplitude",
        });
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let mut bin = vec![usize::MAX; h * w];
    let mut counts = vec![0usize; bins];
    for ky in 0..h {
        for kx in 0..w {
            if ky == 0 && kx == 0 {
                continue;
            }
            let b = bin_of(normalized_radius(ky, kx, h, w), bins);
            bin[ky * w + kx] = b;
            counts[b] += 1;
        }
    }

    let data = features.data();
    let spectra: Vec<(f64, Vec<f64>)> = (0..d)
        .into_par_iter()
        .map(|c| {
            let mut buf: Vec<C64> = (0..h * w).map(|i| C64::new(data[i * d + c], 0.0)).collect();
            fft2(&mut buf, h, w, FftDirection::Forward);
            let mut sums = vec![0.0; bins];
            for (i, z) in buf.iter().enumerate().skip(1) {
                sums[bin[i]] += z.norm();
            }
            (buf[0].norm(), sums)
        })
        .collect();
    let mut dc = 0.0;
    let mut sums = vec![0.0; bins];
    for (a, s) in &spectra {
        dc += a;
        sums.iter_mut().zip(s).for_each(|(x, y)| *x += y);
    }

    let base = (dc / d as f64 + AMP_EPS).ln();
    let mut curve = FrequencyCurve {
        freqs: vec![0.0],
        values: vec![0.0],
    };
    for (b, (&sum, &n)) in sums.iter().zip(&counts).enumerate() {
        if n == 0 {
            continue;
        }
        let amp = sum / (n * d) as f64;
        curve.freqs.push((b as f64 + 0.5) / bins as f64);
        curve.values.push((amp + AMP_EPS).ln() - base);
    }
    Ok(curve)
}

/// Per-layer frequency curves of one batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyReport {
    pub freqs: Vec<f64>,
    /// One curve per encoder layer, aligned with `freqs`.
    pub layers: Vec<Vec<f64>>,
    pub bins: usize,
    pub images: usize,
}

impl FrequencyReport {
    /// Value of every layer at the highest frequency point.
    pub fn top_bin(&self) -> Vec<f64> {
        self.layers.iter().map(|c| *c.last().unwrap()).collect()
    }

    /// `layer,freq,delta_log_amp`.
    pub fn to_table(&self, provenance: Option<Provenance>) -> Table {
        let header = ["layer", "freq", "delta_log_amp"].map(String::from).to_vec();
        let mut table = Table::new(provenance, header);
        for (l, curve) in self.layers.iter().enumerate() {
            for (&f, &v) in self.freqs.iter().zip(curve) {
                table.push(vec![l as f64, f, v]);
            }
        }
        table
    }
}

/// Runs the encoder unmasked over `images` and analyses every layer's tokens
/// as an `h × w` grid, averaging curves over the batch.
pub fn layer_frequency_report(model: &MimModel, images: &Tensor, bins: usize) -> Result<FrequencyReport> {
    let depth = model.config.encoder.depth;
    let layers: Vec<usize> = (0..depth).collect();
    let feats = model.encode_full(images, &layers)?;
    let (b, n, d) = {
        let s = feats[0].shape();
        (s[0], s[1], s[2])
    };
    if b == 0 {
        return Err(Error::invalid("layer_frequency_report", "empty image batch"));
    }
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::invalid(
            "layer_frequency_report",
            format!("{n} tokens do not form a square grid"),
        ));
    }
    let mut freqs = None;
    let mut curves = Vec::with_capacity(depth);
    for f in &feats {
        let mut acc: Option<Vec<f64>> = None;
        for i in 0..b {
            let grid = Tensor::new(vec![g, g, d], f.data()[i * n * d..(i + 1) * n * d].to_vec())?;
            let c = relative_log_amplitude(&grid, bins)?;
            match acc.as_mut() {
                None => acc = Some(c.values),
                Some(a) => a.iter_mut().zip(&c.values).for_each(|(a, v)| *a += v),
            }
            freqs.get_or_insert(c.freqs);
        }
        let mut acc = acc.unwrap();
        acc.iter_mut().for_each(|v| *v /= b as f64);
        curves.push(acc);
    }
    Ok(FrequencyReport {
        freqs: freqs.unwrap(),
        layers: curves,
        bins,
        images: b,
    })
}
