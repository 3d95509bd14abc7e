use serde::{Deserialize, Serialize};

use crate::dsp::Matrix;
use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over the one-sided FFT bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)`
    pub weights: Matrix,
    pub fmin: f64,
    pub fmax: f64,
    pub n_mels: usize,
    /// Peak frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Result<Self> {
        let nyquist = sample_rate / 2.0;
        if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
            return Err(Error::InvalidFrequencyRange { fmin, fmax, nyquist });
        }
        if n_mels < 2 || n_fft < 2 {
            return Err(Error::InvalidInput(format!("n_mels={n_mels} and n_fft={n_fft} must be at least 2")));
        }
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sample_rate / n_fft as f64;
        let mut weights = Matrix::zeros(n_mels, bins);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = weights.row_mut(m);
            for (k, w) in row.iter_mut().enumerate() {
                let f = bin_hz(k);
                *w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
            }
            if row.iter().all(|&w| w == 0.0) {
                return Err(Error::InvalidInput(format!(
                    "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; use fewer mels or a larger n_fft"
                )));
            }
        }
        Ok(MelFilterbank {
            weights,
            fmin,
            fmax,
            n_mels,
            centers: edges[1..=n_mels].to_vec(),
        })
    }

    /// Index of the filter responding most strongly to `hz`.
    pub fn band_of(&self, hz: f64) -> usize {
        let mut best = 0;
        for (m, c) in self.centers.iter().enumerate() {
            if (c - hz).abs() < (self.centers[best] - hz).abs() {
                best = m;
            }
        }
        best
    }

    /// `weights · powerᵀ` for `power: frames × bins`, giving `n_mels × frames`.
    pub fn apply(&self, power: &Matrix) -> Result<Matrix> {
        if power.cols != self.weights.cols {
            return Err(Error::Shape {
                op: "mel_filterbank",
                lhs: vec![self.weights.rows, self.weights.cols],
                rhs: vec![power.rows, power.cols],
            });
        }
        let mut out = Matrix::zeros(self.n_mels, power.rows);
        crate::autodiff::gemm(
            self.n_mels,
            power.cols,
            power.rows,
            &self.weights.data,
            false,
            &power.data,
            true,
            &mut out.data,
            0.0,
        );
        Ok(out)
    }
}
