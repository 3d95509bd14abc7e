use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::Matrix;
use crate::error::{Error, Result};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Number of frames for a signal of `len` samples (no centre padding).
pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    if len < n_fft {
        0
    } else {
        1 + (len - n_fft) / hop
    }
}

/// Squared-magnitude short-time Fourier transform, `frames × (n_fft/2 + 1)`.
pub fn stft_power(samples: &[f64], n_fft: usize, hop: usize) -> Result<Matrix> {
    if !n_fft.is_power_of_two() || hop == 0 {
        return Err(Error::InvalidInput(format!("n_fft={n_fft} must be a power of two and hop={hop} positive")));
    }
    if samples.len() < n_fft {
        return Err(Error::SignalTooShort {
            len: samples.len(),
            n_fft,
        });
    }
    let window = hann_window(n_fft);
    let frames = frame_count(samples.len(), n_fft, hop);
    let bins = n_fft / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Matrix::zeros(frames, bins);
    for f in 0..frames {
        let frame = &samples[f * hop..f * hop + n_fft];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (dst, c) in out.row_mut(f).iter_mut().zip(&buf[..bins]) {
            *dst = c.norm_sqr();
        }
    }
    Ok(out)
}
