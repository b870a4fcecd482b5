//! Calibration activations: synthetic generation, file I/O, and per-weight capture.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix};
use crate::linalg::{random_orthonormal, seeded_rng, sym_eig, Matrix, EIG_CLAMP_REL};
use crate::model::ToyModel;

/// Default number of calibration rows.
pub const DEFAULT_CALIBRATION_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationSource {
    File,
    Synthetic,
    Captured,
}

/// Activation samples, tokens × channels.
#[derive(Debug, Clone)]
pub struct CalibrationMatrix {
    pub x: Matrix,
    pub source: CalibrationSource,
    pub seed: Option<u64>,
    /// Numerical rank of `XᵀX`, recorded on construction.
    pub gram_rank: usize,
}

impl CalibrationMatrix {
    pub fn new(x: Matrix, source: CalibrationSource, seed: Option<u64>) -> Result<Self> {
        let gram_rank = gram_rank(&x)?;
        Ok(Self {
            x,
            source,
            seed,
            gram_rank,
        })
    }

    pub fn tokens(&self) -> usize {
        self.x.rows()
    }

    pub fn channels(&self) -> usize {
        self.x.cols()
    }

    /// True when the channel Gram is invertible without damping.
    pub fn full_rank(&self) -> bool {
        self.gram_rank == self.channels()
    }
}

fn gram_rank(x: &Matrix) -> Result<usize> {
    if x.cols() == 0 {
        return Ok(0);
    }
    let eig = sym_eig(&x.gram())?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Ok(0);
    }
    Ok(eig.values.iter().filter(|&&v| v > EIG_CLAMP_REL * top).count())
}

/// `X = Q₁ · diag(spectrum) · Q₂ᵀ (+ noise)` with seeded random orthonormal `Q₁, Q₂`.
///
/// Without noise the singular values of `X` are exactly `spectrum`. When
/// `m < n` only the first `m` spectrum entries can be realized, so the rest
/// must be zero.
pub fn generate_synthetic(
    m: usize,
    n: usize,
    spectrum: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<CalibrationMatrix> {
    if spectrum.len() != n {
        return Err(Error::Contract(format!(
            "spectrum has {} entries for {n} channels",
            spectrum.len()
        )));
    }
    if let Some(bad) = spectrum.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("spectrum entries must be non-negative, got {bad}")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Contract(format!("noise std must be non-negative, got {noise_std}")));
    }
    let r = m.min(n);
    if spectrum[r..].iter().any(|&v| v != 0.0) {
        return Err(Error::Contract(format!(
            "{m} rows can realize at most {r} nonzero singular values"
        )));
    }
    let mut rng = seeded_rng(seed);
    let q1 = random_orthonormal(m, r, &mut rng);
    let q2 = random_orthonormal(n, r, &mut rng);
    let mut x = q1.scale_columns(&spectrum[..r])?.matmul_t(&q2)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("valid std");
        let noise = Matrix::from_fn(m, n, |_, _| normal.sample(&mut rng));
        x = x.add(&noise)?;
    }
    CalibrationMatrix::new(x, CalibrationSource::Synthetic, Some(seed))
}

/// Spectrum `exp(-decay · i / n)` used for default synthetic calibration.
pub fn decaying_spectrum(n: usize, decay: f64) -> Vec<f64> {
    (0..n).map(|i| (-decay * i as f64 / n as f64).exp()).collect()
}

pub fn load_matrix(path: &Path) -> Result<CalibrationMatrix> {
    CalibrationMatrix::new(read_matrix(path)?, CalibrationSource::File, None)
}

pub fn save_matrix(m: &Matrix, path: &Path) -> Result<()> {
    write_matrix(m, path)
}

/// Input activation of every compressible weight, in forward order.
pub fn capture_activations(
    model: &ToyModel,
    input: &CalibrationMatrix,
) -> Result<Vec<CalibrationMatrix>> {
    let pass = model.forward_pass(&input.x, true)?;
    pass.inputs
        .into_iter()
        .map(|x| CalibrationMatrix::new(x, CalibrationSource::Captured, input.seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use crate::model::{Activation, Layer, Network, WeightMatrix};

    #[test]
    fn flat_spectrum_is_white() {
        let c = generate_synthetic(10, 4, &[1.0; 4], 0.0, 3).unwrap();
        assert!(c.x.gram().rel_diff(&Matrix::identity(4)) < 1e-10);
        assert!(c.full_rank());
    }

    #[test]
    fn planted_spectrum_recovered() {
        let c = generate_synthetic(8, 3, &[5.0, 3.0, 1.0], 0.0, 17).unwrap();
        let s = svd(&c.x).unwrap().sigma;
        for (got, want) in s.iter().zip([5.0, 3.0, 1.0]) {
            assert!((got - want).abs() <= 1e-9 * want);
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let a = generate_synthetic(6, 3, &[1.0, 0.5, 0.1], 0.01, 9).unwrap();
        let b = generate_synthetic(6, 3, &[1.0, 0.5, 0.1], 0.01, 9).unwrap();
        assert_eq!(a.x, b.x);
        assert!(generate_synthetic(6, 3, &[1.0, -0.5, 0.1], 0.0, 9).is_err());
        assert!(generate_synthetic(6, 3, &[1.0, 0.5], 0.0, 9).is_err());
        assert!(generate_synthetic(2, 3, &[1.0, 0.5, 0.1], 0.0, 9).is_err());
        let wide = generate_synthetic(2, 3, &[1.0, 0.5, 0.0], 0.0, 9).unwrap();
        assert_eq!(wide.gram_rank, 2);
    }

    fn two_layer(first: Matrix, second: Matrix) -> ToyModel {
        ToyModel::new(
            vec![
                Layer { weights: vec![WeightMatrix { w: first, layer: 0, name: "attn".into() }] },
                Layer { weights: vec![WeightMatrix { w: second, layer: 1, name: "attn".into() }] },
            ],
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn capture_sees_weight_inputs() {
        let input = generate_synthetic(7, 3, &[2.0, 1.0, 0.5], 0.0, 1).unwrap();
        let w1 = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0], vec![0.5, 0.5, 0.0]])
            .unwrap();
        let base = two_layer(Matrix::identity(3), w1.clone());
        let doubled = two_layer(Matrix::identity(3).scale(2.0), w1);

        let acts = capture_activations(&base, &input).unwrap();
        assert_eq!(acts[0].x, input.x);
        assert_eq!(acts[1].x, input.x);
        let acts2 = capture_activations(&doubled, &input).unwrap();
        assert_eq!(acts2[1].x, acts[1].x.scale(2.0));

        let zero = CalibrationMatrix::new(Matrix::zeros(4, 3), CalibrationSource::File, None).unwrap();
        for a in capture_activations(&base, &zero).unwrap() {
            assert_eq!(a.x.max_abs(), 0.0);
        }
        // capture leaves the forward output unchanged
        assert_eq!(base.output(&input.x).unwrap(), base.forward_pass(&input.x, true).unwrap().hidden[1]);
    }

    #[test]
    fn capture_rejects_wrong_width() {
        let m = two_layer(Matrix::identity(3), Matrix::identity(3));
        let bad = CalibrationMatrix::new(Matrix::zeros(2, 4), CalibrationSource::File, None).unwrap();
        let err = capture_activations(&m, &bad).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }
}
