//! Real DFT analysis and synthesis over normalized windows, with the DC bin
//! dropped and optional low-pass truncation.
//!
//! Conventions: analysis is unnormalized, `c_k = Σ_n x_n e^{-2πikn/T}` for
//! `k = 1..=T/2`. Synthesis of a zero-mean series uses the factor `2/T` for
//! bins below Nyquist and `1/T` for the Nyquist bin.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// A z-scored window plus the statistics needed to undo it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSeries {
    pub values: Vec<f64>,
    pub orig_mean: f64,
    /// Divisor used for normalization: the population std, floored at
    /// [`STD_FLOOR`].
    pub orig_std: f64,
}

impl NormalizedSeries {
    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .map(|v| v * self.orig_std + self.orig_mean)
            .collect()
    }

    /// Normalize another window with these statistics.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|v| (v - self.orig_mean) / self.orig_std)
            .collect()
    }
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-window z-score with population std and an epsilon floor.
pub fn instance_normalize(x: &[f64]) -> NormalizedSeries {
    let (mean, std) = mean_std(x);
    let div = std.max(STD_FLOOR);
    NormalizedSeries {
        values: x.iter().map(|v| (v - mean) / div).collect(),
        orig_mean: mean,
        orig_std: div,
    }
}

/// DFT bins `1..=T/2` of a length-`T` series.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    len: usize,
    coeffs: Vec<Complex64>,
    n_lf: usize,
}

impl Spectrum {
    /// Build from raw bins `1..=T/2`. The Nyquist bin's imaginary part is
    /// forced to zero.
    pub fn from_coeffs(len: usize, mut coeffs: Vec<Complex64>) -> Result<Self> {
        check_len(len)?;
        if coeffs.len() != len / 2 {
            return Err(Error::invalid(
                "spectrum",
                format!(
                    "{} bins for series length {len}, expected {}",
                    coeffs.len(),
                    len / 2
                ),
            ));
        }
        coeffs[len / 2 - 1].im = 0.0;
        Ok(Self {
            len,
            coeffs,
            n_lf: len / 2,
        })
    }

    pub fn series_len(&self) -> usize {
        self.len
    }

    /// Bin `k` is at index `k - 1`.
    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn n_lf(&self) -> usize {
        self.n_lf
    }

    /// Largest admissible `n_lf`, i.e. `T/2`.
    pub fn max_components(&self) -> usize {
        self.len / 2
    }

    /// Keep bins `1..=n_lf`; zero the rest.
    pub fn truncate(&self, n_lf: usize) -> Result<Spectrum> {
        check_n_lf(n_lf, self.len)?;
        let mut coeffs = self.coeffs.clone();
        for c in &mut coeffs[n_lf..] {
            *c = Complex64::new(0.0, 0.0);
        }
        Ok(Spectrum {
            len: self.len,
            coeffs,
            n_lf,
        })
    }

    /// Interleaved `(Re, Im)` of bins `1..=T/2`.
    pub fn pack(&self) -> SpectrumFeatures {
        SpectrumFeatures(self.coeffs.iter().flat_map(|c| [c.re, c.im]).collect())
    }
}

fn check_len(len: usize) -> Result<()> {
    if len == 0 || len % 2 != 0 {
        return Err(Error::OddLength(len));
    }
    Ok(())
}

pub fn check_n_lf(n_lf: usize, len: usize) -> Result<()> {
    if n_lf == 0 || n_lf > len / 2 {
        return Err(Error::TruncationRange { n_lf, max: len / 2 });
    }
    Ok(())
}

/// Analysis over bins `1..=T/2`. `n_lf` starts at `T/2`.
pub fn dft_forward(values: &[f64]) -> Result<Spectrum> {
    let t = values.len();
    check_len(t)?;
    let coeffs = (1..=t / 2)
        .map(|k| {
            values
                .iter()
                .enumerate()
                .fold(Complex64::new(0.0, 0.0), |acc, (n, &x)| {
                    // Reduce k·n mod T first so the angle stays in [0, 2π).
                    let theta = 2.0 * PI * ((k * n) % t) as f64 / t as f64;
                    acc + Complex64::new(x * theta.cos(), -x * theta.sin())
                })
        })
        .collect();
    Spectrum::from_coeffs(t, coeffs)
}

/// Synthesize the zero-mean series described by the retained bins.
pub fn dft_inverse(sp: &Spectrum) -> Vec<f64> {
    let t = sp.len;
    let m = synthesis_matrix(t, sp.n_lf).expect("spectrum invariants hold");
    let f = sp.pack();
    (0..t)
        .map(|n| f.0.iter().enumerate().map(|(r, v)| v * m[r * t + n]).sum())
        .collect()
}

/// Linear map from packed features to the series, as a row-major
/// `[2·(T/2), T]` matrix with rows for bins above `n_lf` zeroed. Multiplying
/// packed features by this matrix is `dft_inverse ∘ truncate ∘ unpack`.
pub fn synthesis_matrix(len: usize, n_lf: usize) -> Result<Vec<f64>> {
    check_len(len)?;
    check_n_lf(n_lf, len)?;
    let half = len / 2;
    let tf = len as f64;
    let mut m = vec![0.0; 2 * half * len];
    for k in 1..=n_lf {
        let (re_row, im_row) = (2 * (k - 1), 2 * (k - 1) + 1);
        for n in 0..len {
            let theta = 2.0 * PI * ((k * n) % len) as f64 / tf;
            if k == half {
                m[re_row * len + n] = theta.cos() / tf;
            } else {
                m[re_row * len + n] = 2.0 * theta.cos() / tf;
                m[im_row * len + n] = -2.0 * theta.sin() / tf;
            }
        }
    }
    Ok(m)
}

/// `dft_inverse(truncate(dft_forward(x), n_lf))`.
pub fn low_pass(x: &[f64], n_lf: usize) -> Result<Vec<f64>> {
    Ok(dft_inverse(&dft_forward(x)?.truncate(n_lf)?))
}

/// Real encoding of a spectrum: interleaved `(Re, Im)` of bins `1..=T/2`,
/// zero beyond the retained bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFeatures(pub Vec<f64>);

impl SpectrumFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse of [`Spectrum::pack`] for an untruncated spectrum. The Nyquist
    /// imaginary slot is ignored and `n_lf` is `T/2`.
    pub fn unpack(&self, len: usize) -> Result<Spectrum> {
        check_len(len)?;
        if self.0.len() != len {
            return Err(Error::FeatureLength {
                expected: len,
                got: self.0.len(),
            });
        }
        let coeffs: Vec<Complex64> = self
            .0
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect();
        Spectrum::from_coeffs(len, coeffs)
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_normalizes_to_zero() {
        let n = instance_normalize(&[5.0; 4]);
        assert_eq!(n.values, vec![0.0; 4]);
        assert_eq!(n.orig_mean, 5.0);
    }

    #[test]
    fn two_point_normalization() {
        let n = instance_normalize(&[0.0, 1.0]);
        assert_eq!(n.values, vec![-1.0, 1.0]);
        assert_eq!(n.orig_std, 0.5);
    }

    #[test]
    fn odd_length_rejected() {
        assert!(matches!(
            dft_forward(&[1.0, 2.0, 3.0]),
            Err(Error::OddLength(3))
        ));
    }

    #[test]
    fn zero_series_zero_spectrum() {
        let sp = dft_forward(&[0.0; 12]).unwrap();
        assert!(sp.coeffs().iter().all(|c| c.norm() == 0.0));
        assert_eq!(sp.n_lf(), 6);
        assert_eq!(dft_inverse(&sp), vec![0.0; 12]);
    }

    #[test]
    fn truncation_range() {
        let sp = dft_forward(&[1.0; 12]).unwrap();
        assert!(matches!(
            sp.truncate(0),
            Err(Error::TruncationRange { n_lf: 0, max: 6 })
        ));
        assert!(matches!(
            sp.truncate(7),
            Err(Error::TruncationRange { n_lf: 7, max: 6 })
        ));
        assert_eq!(sp.truncate(6).unwrap(), sp);
    }

    #[test]
    fn truncate_zeroes_upper_bins_exactly() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let sp = dft_forward(&x).unwrap().truncate(2).unwrap();
        for c in &sp.coeffs()[2..] {
            assert_eq!((c.re, c.im), (0.0, 0.0));
        }
        assert_eq!(sp.n_lf(), 2);
    }

    #[test]
    fn pack_layout() {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); 6];
        coeffs[0] = Complex64::new(1.0, 2.0);
        let sp = Spectrum::from_coeffs(12, coeffs).unwrap();
        let mut expected = vec![0.0; 12];
        expected[0] = 1.0;
        expected[1] = 2.0;
        assert_eq!(sp.pack().0, expected);
    }

    #[test]
    fn nyquist_packs_zero_imaginary() {
        let coeffs = vec![Complex64::new(1.0, 1.0); 6];
        let sp = Spectrum::from_coeffs(12, coeffs).unwrap();
        assert_eq!(sp.pack().0[11], 0.0);
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let f = SpectrumFeatures(vec![0.0; 10]);
        assert!(matches!(
            f.unpack(12),
            Err(Error::FeatureLength {
                expected: 12,
                got: 10
            })
        ));
    }

    #[test]
    fn denormalize_round_trip() {
        let x = [3.0, -1.5, 2.25, 8.0, 0.5, -4.0];
        let n = instance_normalize(&x);
        for (a, b) in n.denormalize(&n.values).iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
