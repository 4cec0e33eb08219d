//! Two-dimensional DFT helpers over row-major `h × w` grids.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

pub(crate) type C64 = Complex<f64>;

/// Unnormalised forward or inverse 2-D DFT in place.
pub(crate) fn fft2(buf: &mut [C64], h: usize, w: usize, direction: FftDirection) {
    assert_eq!(buf.len(), h * w);
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft(w, direction);
    row.process(buf);
    let col = planner.plan_fft(h, direction);
    let mut column = vec![C64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Signed frequency index of DFT bin `k` for a length-`n` axis.
fn signed(k: usize, n: usize) -> f64 {
    if 2 * k > n {
        k as f64 - n as f64
    } else {
        k as f64
    }
}

/// Radius of DFT bin `(ky, kx)` normalised so the Nyquist corner is 1.
/// Each axis is scaled so its Nyquist frequency is 1 before taking the norm.
pub(crate) fn normalized_radius(ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let fy = signed(ky, h) / (h as f64 / 2.0);
    let fx = signed(kx, w) / (w as f64 / 2.0);
    (fy * fy + fx * fx).sqrt() / std::f64::consts::SQRT_2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corner_radius() {
        let (h, w) = (4, 6);
        let orig: Vec<C64> = (0..h * w).map(|i| C64::new(i as f64, 0.0)).collect();
        let mut buf = orig.clone();
        fft2(&mut buf, h, w, FftDirection::Forward);
        assert!((buf[0].re - orig.iter().map(|c| c.re).sum::<f64>()).abs() < 1e-9);
        fft2(&mut buf, h, w, FftDirection::Inverse);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a.re / (h * w) as f64 - b.re).abs() < 1e-12);
        }
        assert_eq!(normalized_radius(0, 0, h, w), 0.0);
        assert!((normalized_radius(2, 3, h, w) - 1.0).abs() < 1e-15);
    }
}
