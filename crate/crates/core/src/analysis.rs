//! Closed-form CFO MSE predictions and their large-array asymptotics.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::spatial_correlation;
use crate::numerics::{fro2, projector_complement, ComplexMatrix, NumericsError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsePrediction {
    pub user: usize,
    pub exact: f64,
    pub asymptotic: f64,
}

/// `||P_perp D^H B Sigma_h||_F^2` with `Sigma_h = diag(sigma_{h,l})`
/// (amplitudes, not variances).
pub fn projected_derivative_energy(b: &ComplexMatrix, tap_amplitudes: &[f64]) -> Result<f64, NumericsError> {
    let n = b.nrows();
    assert_eq!(b.ncols(), tap_amplitudes.len());
    let p = projector_complement(b)?;
    let mut dbs = b.clone();
    for t in 0..n {
        let d = Complex64::new(0.0, -2.0 * PI * t as f64 / n as f64);
        for (l, &s) in tap_amplitudes.iter().enumerate() {
            dbs[(t, l)] *= d * s;
        }
    }
    Ok(fro2(&(p * dbs)))
}

/// `sigma_n^2 Tr(R^3) / (2 ||R||_F^4 ||P_perp D^H B Sigma_h||^2)`.
pub fn theoretical_mse(r: &ComplexMatrix, b: &ComplexMatrix, tap_amplitudes: &[f64], sigma_n2: f64) -> Result<f64, NumericsError> {
    let r2 = r * r;
    let tr3: f64 = (0..r.nrows()).map(|i| (r2.row(i) * r.column(i))[(0, 0)].re).sum();
    let f4 = fro2(r).powi(2);
    let den = projected_derivative_energy(b, tap_amplitudes)?;
    assert!(den > 0.0 && f4 > 0.0, "training does not identify the CFO");
    Ok(sigma_n2 * tr3 / (2.0 * f4 * den))
}

/// `3 (sigma_n^2 / sigma_s^2) / (2 pi^2 M N)`.
pub fn asymptotic_mse(sigma_s2: f64, sigma_n2: f64, m: usize, n: usize) -> f64 {
    3.0 * (sigma_n2 / sigma_s2) / (2.0 * PI * PI * n as f64) / m as f64
}

/// Prediction for one user at mean DOA `theta` with training `b`.
pub fn predict_mse(
    user: usize,
    theta: f64,
    theta_as: f64,
    chi: f64,
    antennas: usize,
    b: &ComplexMatrix,
    pdp: &[f64],
    sigma_s2: f64,
    sigma_n2: f64,
) -> Result<MsePrediction, NumericsError> {
    let r = spatial_correlation(theta, theta_as, chi, antennas);
    let amps: Vec<f64> = pdp.iter().map(|v| v.sqrt()).collect();
    Ok(MsePrediction {
        user,
        exact: theoretical_mse(&r, b, &amps, sigma_n2)?,
        asymptotic: asymptotic_mse(sigma_s2, sigma_n2, antennas, b.nrows()),
    })
}

/// Relative errors of the large-array approximations behind the asymptote.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LargeArrayDiagnostics {
    /// `||R^2 - c R|| / ||c R||` with `c = pi / (theta_as chi sin theta)`.
    pub square_rel_err: f64,
    /// `|Tr(R^3) - M c^2| / (M c^2)`.
    pub cube_trace_rel_err: f64,
    pub trace: f64,
}

pub fn large_array_identities(r: &ComplexMatrix, theta: f64, theta_as: f64, chi: f64) -> LargeArrayDiagnostics {
    let m = r.nrows() as f64;
    let c = PI / (theta_as * chi * theta.sin());
    let r2 = r * r;
    let cr = r.scale(c);
    let square_rel_err = (fro2(&(&r2 - &cr)) / fro2(&cr)).sqrt();
    let tr3: f64 = (0..r.nrows()).map(|i| (r2.row(i) * r.column(i))[(0, 0)].re).sum();
    let cube_trace_rel_err = (tr3 - m * c * c).abs() / (m * c * c);
    let trace = r.diagonal().iter().map(|z| z.re).sum();
    LargeArrayDiagnostics { square_rel_err, cube_trace_rel_err, trace }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cis;
    use crate::signal::TrainingBlock;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn training(n: usize, l: usize, seed: u64) -> TrainingBlock {
        TrainingBlock::random_qpsk(n, l, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn asymptotic_value_and_scaling() {
        let v = asymptotic_mse(1.0, 0.1, 128, 64);
        assert!((v - 1.855e-6).abs() < 1e-9, "{v}");
        assert!((asymptotic_mse(1.0, 0.1, 256, 64) * 2.0 - v).abs() < 1e-20);
        for (s, n2, m, n) in [(1.0, 0.1, 128, 64), (2.0, 0.03, 7, 9)] {
            let x = asymptotic_mse(s, n2, m, n) * m as f64 * n as f64 * (s / n2);
            assert!((x - 3.0 / (2.0 * PI * PI)).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_is_linear_in_noise() {
        let t = training(64, 10, 1);
        let r = spatial_correlation(1.2, 0.087, PI, 32);
        let amps = vec![(0.1f64).sqrt(); 10];
        let a = theoretical_mse(&r, &t.b, &amps, 0.1).unwrap();
        let b = theoretical_mse(&r, &t.b, &amps, 0.2).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_close_to_asymptote_at_default_size() {
        let t = training(64, 10, 2);
        let p = predict_mse(0, PI / 2.0, 5f64.to_radians(), PI, 128, &t.b, &[0.1; 10], 1.0, 0.1).unwrap();
        assert!((p.exact / p.asymptotic - 1.0).abs() < 0.25, "{} {}", p.exact, p.asymptotic);
    }

    #[test]
    fn invariant_to_training_phase_rotation() {
        let t = training(64, 10, 3);
        let rotated = t.b.map(|z| z * cis(0.83));
        let r = spatial_correlation(1.0, 0.087, PI, 64);
        let amps = vec![(0.1f64).sqrt(); 10];
        let a = theoretical_mse(&r, &t.b, &amps, 0.1).unwrap();
        let b = theoretical_mse(&r, &rotated, &amps, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn projected_derivative_energy_limit() {
        let t = training(256, 10, 4);
        let e = projected_derivative_energy(&t.b, &[(0.1f64).sqrt(); 10]).unwrap();
        let ratio = e / (PI * PI * 256.0 / 3.0);
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn square_identity_holds_at_large_array() {
        let spread = 5f64.to_radians();
        let r = spatial_correlation(PI / 2.0, spread, PI, 512);
        let d = large_array_identities(&r, PI / 2.0, spread, PI);
        assert!(d.square_rel_err < 0.1, "{d:?}");
        assert!((d.trace - 512.0).abs() < 1e-9);
        let small = spatial_correlation(1.0, spread, PI, 17);
        assert!((large_array_identities(&small, 1.0, spread, PI).trace - 17.0).abs() < 1e-12);
    }
}
