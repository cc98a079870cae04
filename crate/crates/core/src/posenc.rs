//! Positional encodings of normalized scalars and 2D points.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    /// `cos((2z+1)·f·π/2)` only.
    Dct,
    /// `(cos, sin)` pairs of the same arguments.
    Fourier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    pub n_per_axis: usize,
    pub f_max: f64,
    pub kind: EncodingKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncodingError {
    #[error("n_per_axis must be at least 1")]
    ZeroFrequencies,
    #[error("f_max must be finite and non-negative, got {0}")]
    BadMaxFrequency(f64),
}

impl EncodingConfig {
    pub fn dct(n_per_axis: usize, f_max: f64) -> Self {
        Self { n_per_axis, f_max, kind: EncodingKind::Dct }
    }

    pub fn fourier(n_per_axis: usize, f_max: f64) -> Self {
        Self { n_per_axis, f_max, kind: EncodingKind::Fourier }
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.n_per_axis == 0 {
            return Err(EncodingError::ZeroFrequencies);
        }
        if !(self.f_max.is_finite() && self.f_max >= 0.0) {
            return Err(EncodingError::BadMaxFrequency(self.f_max));
        }
        Ok(())
    }

    /// Length of `encode_scalar`.
    pub fn scalar_dim(&self) -> usize {
        match self.kind {
            EncodingKind::Dct => self.n_per_axis,
            EncodingKind::Fourier => 2 * self.n_per_axis,
        }
    }

    /// Length of `encode_2d`.
    pub fn dim_2d(&self) -> usize {
        match self.kind {
            EncodingKind::Dct => self.n_per_axis * self.n_per_axis,
            EncodingKind::Fourier => 2 * self.n_per_axis * self.n_per_axis,
        }
    }
}

/// Evenly spaced `[0, f_max]`, both ends included; `[0]` when `N = 1`.
pub fn frequencies(cfg: &EncodingConfig) -> Vec<f64> {
    let n = cfg.n_per_axis;
    if n <= 1 {
        return vec![0.0; n];
    }
    (0..n).map(|i| cfg.f_max * i as f64 / (n - 1) as f64).collect()
}

fn phases(z: f64, freqs: &[f64]) -> impl Iterator<Item = f64> + '_ {
    freqs.iter().map(move |f| (2.0 * z + 1.0) * f * PI / 2.0)
}

/// Encodes `z ∈ [0, 1]`. Fourier output interleaves `(cos, sin)` per frequency.
pub fn encode_scalar(z: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let freqs = frequencies(cfg);
    match cfg.kind {
        EncodingKind::Dct => phases(z, &freqs).map(f64::cos).collect(),
        EncodingKind::Fourier => phases(z, &freqs).flat_map(|a| [a.cos(), a.sin()]).collect(),
    }
}

/// Separable 2D encoding, row-major over `(i, j)`.
///
/// DCT: `cos(a_i)·cos(b_j)`. Fourier: `(cos, sin)` of `a_i + b_j`, which is
/// the 2D analogue with the same frequency grid and twice the width.
pub fn encode_2d(x: f64, y: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let freqs = frequencies(cfg);
    let a: Vec<f64> = phases(x, &freqs).collect();
    let b: Vec<f64> = phases(y, &freqs).collect();
    let mut out = Vec::with_capacity(cfg.dim_2d());
    for ai in &a {
        for bj in &b {
            match cfg.kind {
                EncodingKind::Dct => out.push(ai.cos() * bj.cos()),
                EncodingKind::Fourier => {
                    out.push((ai + bj).cos());
                    out.push((ai + bj).sin());
                }
            }
        }
    }
    out
}
