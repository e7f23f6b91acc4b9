//! Multi-branch receive beamforming on qualified grid directions, LS
//! equivalent-channel estimation and per-subcarrier branch combining.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::estimator::{BeamSpectrum, BinStats, FsBeam};
use crate::numerics::{fft_in_place, pseudo_inverse, unitary_dft_columns, ComplexMatrix};
use crate::signal::{block_phase, phase_diagonal, Qam16};

/// Grid directions used as beamforming branches for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualifiedDoaSet {
    pub user: usize,
    pub bins: Vec<usize>,
    pub metrics: Vec<f64>,
    /// No bin met the threshold; `bins` holds the single best bin.
    pub degraded: bool,
    /// At least one metric hit the zero-residual sentinel.
    pub sentinel: bool,
}

/// Signal-to-residual ratio of one beam after CFO compensation.
pub fn beam_metric(est: &FsBeam, spec: &BeamSpectrum, basis: &crate::estimator::UserBasis, bin: usize, phi_hat: f64) -> (f64, bool) {
    est.bin_stats(spec, basis, phi_hat).metric(bin)
}

/// Bins near the estimated DOA whose metric reaches `level`
/// (`t_h L / (N - L)`). Falls back to the best candidate when none does.
pub fn qualified_doas(est: &FsBeam, stats: &BinStats, user: usize, theta_hat: f64, level: f64) -> QualifiedDoaSet {
    let mut candidates = est.neighbor_set(theta_hat);
    if candidates.is_empty() {
        candidates = est.grid.visible().to_vec();
    }
    let scored: Vec<(usize, f64, bool)> = candidates
        .iter()
        .map(|&b| {
            let (m, s) = stats.metric(b);
            (b, m, s)
        })
        .collect();
    let mut bins = Vec::new();
    let mut metrics = Vec::new();
    let mut sentinel = false;
    for &(b, m, s) in &scored {
        if m >= level {
            bins.push(b);
            metrics.push(m);
            sentinel |= s;
        }
    }
    let degraded = bins.is_empty();
    if degraded {
        let &(b, m, s) = scored
            .iter()
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
            .expect("grid has visible bins");
        bins.push(b);
        metrics.push(m);
        sentinel = s;
    }
    QualifiedDoaSet { user, bins, metrics, degraded, sentinel }
}

/// `M x M_k` matrix of conjugate steering vectors for the given bins.
pub fn beamforming_matrix(est: &FsBeam, bins: &[usize], antennas: usize) -> ComplexMatrix {
    let mut w = ComplexMatrix::zeros(antennas, bins.len());
    for (c, &b) in bins.iter().enumerate() {
        for (m, z) in est.grid.conj_steering(b, antennas).into_iter().enumerate() {
            w[(m, c)] = z;
        }
    }
    w
}

/// Beam outputs `Y W` read off a precomputed spectrum.
pub fn select_beams(spec: &BeamSpectrum, bins: &[usize]) -> ComplexMatrix {
    let n = spec.beams.nrows();
    ComplexMatrix::from_fn(n, bins.len(), |t, c| spec.beams[(t, bins[c])])
}

/// LS estimate `pinv(B) E^H(phi_hat) Y W` of the beamformed channel taps,
/// given the beam outputs `yw = Y W`.
pub fn equivalent_channel(yw: &ComplexMatrix, b: &ComplexMatrix, phi_hat: f64) -> ComplexMatrix {
    let n = yw.nrows();
    let rot = phase_diagonal(-phi_hat, n, n);
    let mut z = yw.clone();
    for j in 0..z.ncols() {
        for (t, r) in rot.iter().enumerate() {
            z[(t, j)] *= r;
        }
    }
    pseudo_inverse(b) * z
}

/// Unnormalized DFT of each column of `taps` zero-padded to `n`, i.e. the
/// per-subcarrier response `sqrt(N) F_L h`.
pub fn frequency_response(taps: &ComplexMatrix, n: usize) -> ComplexMatrix {
    let mut g = ComplexMatrix::zeros(n, taps.ncols());
    let mut buf = vec![Complex64::default(); n];
    for j in 0..taps.ncols() {
        buf.iter_mut().for_each(|z| *z = Complex64::default());
        for l in 0..taps.nrows() {
            buf[l] = taps[(l, j)];
        }
        fft_in_place(&mut buf);
        for t in 0..n {
            g[(t, j)] = buf[t];
        }
    }
    g
}

/// Undo the CFO rotation and block phase of data block `block_index`, then
/// move to the frequency domain: returns `F eta* E^H(phi) Y W`.
pub fn compensate_data(yw: &ComplexMatrix, phi_hat: f64, block_index: usize, n_cp: usize) -> ComplexMatrix {
    let n = yw.nrows();
    let eta = block_phase(phi_hat, block_index, n, n_cp).conj();
    let rot = phase_diagonal(-phi_hat, n, n);
    let mut r = yw.clone();
    for j in 0..r.ncols() {
        for (t, e) in rot.iter().enumerate() {
            r[(t, j)] *= e * eta;
        }
    }
    unitary_dft_columns(&r)
}

/// Per-subcarrier maximum-ratio combining of branch observations `rf`
/// (frequency domain) with branch responses `g`. `None` marks an erasure.
pub fn combine_branches(rf: &ComplexMatrix, g: &ComplexMatrix, qam: &Qam16) -> Vec<Option<usize>> {
    (0..rf.nrows())
        .map(|t| {
            let mut num = Complex64::default();
            let mut den = 0.0;
            for b in 0..rf.ncols() {
                num += g[(t, b)].conj() * rf[(t, b)];
                den += g[(t, b)].norm_sqr();
            }
            if den > 1e-300 && num.is_finite() {
                Some(qam.decide(num / den))
            } else {
                None
            }
        })
        .collect()
}

/// Single-user detection from beam outputs `yw = Y_i^d W` and equivalent
/// taps `h_eq` (`L x M_k`).
pub fn detect_single_user(yw: &ComplexMatrix, h_eq: &ComplexMatrix, phi_hat: f64, block_index: usize, n_cp: usize, qam: &Qam16) -> Vec<Option<usize>> {
    let rf = compensate_data(yw, phi_hat, block_index, n_cp);
    let g = frequency_response(h_eq, yw.nrows());
    combine_branches(&rf, &g, qam)
}

/// Count of symbol errors, erasures counted as errors.
pub fn symbol_errors(decided: &[Option<usize>], truth: &[usize]) -> usize {
    decided.iter().zip(truth).filter(|(d, t)| **d != Some(**t)).count()
}
