//! Short-time Fourier transform helpers and the mel filterbank.

use ndarray::Array2;
use num_complex::Complex;
use rustfft::FftPlanner;

use crate::scalar::Scalar;

/// Periodic Hann window.
pub fn hann_window<F: Scalar>(n: usize) -> Vec<F> {
    (0..n)
        .map(|i| F::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Number of frames under centre padding: `floor(len / hop) + 1`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Centre-padded (zeros, `n_fft / 2` each side) STFT, `[T × (n_fft/2 + 1)]`.
pub fn stft<F: Scalar>(signal: &[F], n_fft: usize, hop: usize, window: &[F]) -> Array2<Complex<F>> {
    let pad = n_fft / 2;
    let frames = frame_count(signal.len(), hop);
    let bins = n_fft / 2 + 1;
    let fft = FftPlanner::<F>::new().plan_fft_forward(n_fft);
    let mut out = Array2::from_elem((frames, bins), Complex::new(F::zero(), F::zero()));
    let mut buf = vec![Complex::new(F::zero(), F::zero()); n_fft];
    for t in 0..frames {
        let start = (t * hop) as isize - pad as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let s = if idx >= 0 && (idx as usize) < signal.len() {
                signal[idx as usize]
            } else {
                F::zero()
            };
            *slot = Complex::new(s * window[i], F::zero());
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out[[t, b]] = buf[b];
        }
    }
    out
}

/// Inverse of [`stft`] by weighted overlap-add; returns `(T - 1) * hop` samples.
pub fn istft<F: Scalar>(spec: &Array2<Complex<F>>, n_fft: usize, hop: usize, window: &[F]) -> Vec<F> {
    let (frames, bins) = spec.dim();
    assert_eq!(bins, n_fft / 2 + 1, "spectrum width");
    let pad = n_fft / 2;
    let full = (frames - 1) * hop + n_fft;
    let mut acc = vec![F::zero(); full];
    let mut norm = vec![F::zero(); full];
    let ifft = FftPlanner::<F>::new().plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(F::zero(), F::zero()); n_fft];
    let scale = F::one() / F::lit(n_fft as f64);
    for t in 0..frames {
        for b in 0..bins {
            buf[b] = spec[[t, b]];
        }
        // Hermitian completion for a real signal.
        for b in bins..n_fft {
            buf[b] = spec[[t, n_fft - b]].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n_fft {
            acc[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let tiny = F::lit(1e-8);
    let len = (frames - 1) * hop;
    (0..len)
        .map(|i| {
            let n = norm[i + pad];
            if n > tiny {
                acc[i + pad] / n
            } else {
                F::zero()
            }
        })
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `[n_mels × (n_fft/2 + 1)]`, unit peak.
pub fn mel_filterbank<F: Scalar>(sample_rate: f64, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Array2<F> {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * sample_rate / n_fft as f64;
    Array2::from_shape_fn((n_mels, bins), |(m, b)| {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let f = bin_hz(b);
        let w = if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        };
        F::lit(w)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stft_istft_reconstructs_interior() {
        let n_fft = 64;
        let hop = 16;
        let window = hann_window::<f64>(n_fft);
        let signal: Vec<f64> = (0..640)
            .map(|i| (i as f64 * 0.07).sin() + 0.3 * (i as f64 * 0.31).cos())
            .collect();
        let spec = stft(&signal, n_fft, hop, &window);
        assert_eq!(spec.nrows(), 640 / 16 + 1);
        let back = istft(&spec, n_fft, hop, &window);
        assert_eq!(back.len(), 640);
        for i in 0..640 {
            assert!((back[i] - signal[i]).abs() < 1e-9, "sample {i}");
        }
    }

    #[test]
    fn filterbank_rows_are_triangles() {
        let fb = mel_filterbank::<f64>(24000.0, 1200, 80, 0.0, 12000.0);
        assert_eq!(fb.dim(), (80, 601));
        for row in fb.rows() {
            let peak = row.fold(0.0f64, |m, &v| m.max(v));
            assert!(peak > 0.0 && peak <= 1.0);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
