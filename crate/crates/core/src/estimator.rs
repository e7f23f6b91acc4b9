//! Per-user joint CFO/DOA estimation in beamspace.
//!
//! The received block is transformed once onto an FFT grid of conjugate
//! steering vectors. For every user the subspace-projection cost is
//! expanded to second order in the CFO, which gives a closed-form vertex
//! update and a corrected alignment objective for the DOA grid search.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::SystemConfig;
use crate::numerics::{cis, fft_rows_padded, orthonormal_basis, ComplexMatrix, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("grid size {fft_size} smaller than array size {antennas}")]
    GridTooSmall { fft_size: usize, antennas: usize },
    #[error("neighbor set is empty for every trial direction")]
    EmptyNeighborhood,
    #[error("all beams in the neighbor set are zero")]
    ZeroEnergy,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One FFT bin of the beamspace grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBin {
    pub index: usize,
    /// Spatial frequency `cos(theta)` after folding into the principal range.
    pub u: f64,
    /// `arccos(u)` when `|u| <= 1`; bins outside are invisible.
    pub theta: Option<f64>,
}

/// Beamspace grid. Bin `i` has conjugate steering vector
/// `[1, exp(-j 2 pi i / M_fft), ..., exp(-j 2 pi i (M-1) / M_fft)]`.
#[derive(Debug, Clone)]
pub struct DoaGrid {
    pub fft_size: usize,
    pub chi: f64,
    pub bins: Vec<GridBin>,
    /// Visible bin indices sorted by ascending angle.
    sorted: Vec<usize>,
    /// Position of each bin in `sorted` (`usize::MAX` when invisible).
    rank: Vec<usize>,
}

impl DoaGrid {
    pub fn new(fft_size: usize, chi: f64) -> Self {
        let period = 2.0 * PI / chi;
        let bins: Vec<GridBin> = (0..fft_size)
            .map(|i| {
                let raw = -2.0 * PI * i as f64 / (chi * fft_size as f64);
                // fold into [-period/2, period/2)
                let u = raw - period * ((raw + period / 2.0) / period).floor();
                let theta = if u.abs() <= 1.0 { Some(u.acos()) } else { None };
                GridBin { index: i, u, theta }
            })
            .collect();
        let mut sorted: Vec<usize> = bins.iter().filter(|b| b.theta.is_some()).map(|b| b.index).collect();
        sorted.sort_by(|&a, &b| bins[a].theta.unwrap().total_cmp(&bins[b].theta.unwrap()).then(a.cmp(&b)));
        let mut rank = vec![usize::MAX; fft_size];
        for (pos, &i) in sorted.iter().enumerate() {
            rank[i] = pos;
        }
        Self { fft_size, chi, bins, sorted, rank }
    }

    pub fn theta(&self, bin: usize) -> Option<f64> {
        self.bins[bin].theta
    }

    /// Visible bins in ascending angle order.
    pub fn visible(&self) -> &[usize] {
        &self.sorted
    }

    /// Bins strictly within `theta_as` of `theta`, sorted by angle.
    pub fn neighbor_set(&self, theta: f64, theta_as: f64) -> Vec<usize> {
        let (lo, hi) = self.neighbor_range(theta, theta_as);
        self.sorted[lo..hi].to_vec()
    }

    /// Half-open range into [`Self::visible`] of the neighbor set.
    fn neighbor_range(&self, theta: f64, theta_as: f64) -> (usize, usize) {
        let th = |i: usize| self.bins[self.sorted[i]].theta.unwrap();
        let lo = self.sorted.partition_point(|&b| self.bins[b].theta.unwrap() <= theta - theta_as);
        let mut hi = self.sorted.partition_point(|&b| self.bins[b].theta.unwrap() < theta + theta_as);
        hi = hi.max(lo);
        // boundary cases of the strict inequality
        let lo = (lo..hi).find(|&i| (th(i) - theta).abs() < theta_as).unwrap_or(hi);
        (lo, hi)
    }

    /// Conjugate steering vector of bin `i` over `m` antennas.
    pub fn conj_steering(&self, bin: usize, m: usize) -> Vec<Complex64> {
        (0..m).map(|c| cis(-2.0 * PI * ((bin * c) % self.fft_size) as f64 / self.fft_size as f64)).collect()
    }
}

/// Beamspace image of one received block, shared by all users.
#[derive(Debug, Clone)]
pub struct BeamSpectrum {
    /// `N x M_fft`; column `i` is `Y a*(theta_i)`.
    pub beams: ComplexMatrix,
    /// `||y_i||^2`.
    pub power: Vec<f64>,
    /// `||D^H y_i||^2`, independent of any CFO compensation.
    pub deriv_power: Vec<f64>,
    /// The block the spectrum was computed from (`N x M`).
    pub source: ComplexMatrix,
}

/// Along-antenna DFT of `y` zero-padded to the grid size.
pub fn beamspace_transform(y: &ComplexMatrix, grid: &DoaGrid) -> Result<BeamSpectrum, EstimatorError> {
    if grid.fft_size < y.ncols() {
        return Err(EstimatorError::GridTooSmall { fft_size: grid.fft_size, antennas: y.ncols() });
    }
    let n = y.nrows();
    let beams = fft_rows_padded(y, grid.fft_size);
    let w: Vec<f64> = (0..n).map(|t| (2.0 * PI * t as f64 / n as f64).powi(2)).collect();
    let power = beams.column_iter().map(|c| c.norm_squared()).collect();
    let deriv_power = beams.column_iter().map(|c| c.iter().zip(&w).map(|(z, w)| w * z.norm_sqr()).sum()).collect();
    Ok(BeamSpectrum { beams, power, deriv_power, source: y.clone() })
}

/// Per-bin quadratic model of the projection cost at a CFO anchor.
///
/// With `z = E^H(phi) y`, `A = Q^H z` and `C = Q^H D^H z`:
/// `s = ||A||^2`, `b = -Re(A^H C)`, `a = ||D^H z||^2 - ||C||^2`, `p = ||y||^2`.
/// The residual `||P_perp E^H(phi + d) y||^2` is `p - s + 2 b d + a d^2 + O(d^3)`.
#[derive(Debug, Clone)]
pub struct BinStats {
    pub phi: f64,
    pub s: Vec<f64>,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub p: Vec<f64>,
}

impl BinStats {
    /// Signal-to-residual ratio of one beam, with a large sentinel when the
    /// residual vanishes. The flag reports the sentinel case.
    pub fn metric(&self, bin: usize) -> (f64, bool) {
        let (s, p) = (self.s[bin], self.p[bin]);
        let r = (p - s).max(0.0);
        if s > 0.0 && r < 1e-12 * s {
            (METRIC_SENTINEL, true)
        } else if s == 0.0 {
            (0.0, false)
        } else {
            (s / r, false)
        }
    }
}

/// Beam metric returned when the residual is numerically zero.
pub const METRIC_SENTINEL: f64 = 1e12;

/// User-specific operators derived from the training matrix.
#[derive(Debug, Clone)]
pub struct UserBasis {
    /// Orthonormal basis of `span(B)`, `N x L`.
    pub q: ComplexMatrix,
    qh: ComplexMatrix,
    qhd: ComplexMatrix,
}

impl UserBasis {
    pub fn new(b: &ComplexMatrix) -> Result<Self, EstimatorError> {
        let q = orthonormal_basis(b)?;
        let n = q.nrows();
        let qh = q.adjoint();
        let mut qhd = qh.clone();
        for t in 0..n {
            let d = Complex64::new(0.0, -2.0 * PI * t as f64 / n as f64);
            for l in 0..qhd.nrows() {
                qhd[(l, t)] *= d;
            }
        }
        Ok(Self { q, qh, qhd })
    }

    pub fn taps(&self) -> usize {
        self.q.ncols()
    }
}

/// Flags raised during estimation; none of them abort.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorFlags {
    pub degenerate_quadratic: bool,
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub phi: f64,
    pub theta: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfoDoaEstimate {
    pub phi_hat: f64,
    pub theta_hat: f64,
    pub bin: usize,
    pub trace: Vec<IterationRecord>,
    pub flags: EstimatorFlags,
}

impl CfoDoaEstimate {
    /// CFO after `n` rounds (1-based); holds the final value after an early exit.
    pub fn phi_at_iteration(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        self.trace.get(n - 1).or(self.trace.last()).map_or(self.phi_hat, |r| r.phi)
    }
}

/// Relative tie window of the DOA objective.
const TIE_TOL: f64 = 1e-9;
const MAX_CFO: f64 = 0.5 - 1e-9;

/// FS-BEAM estimator with its grid and neighbor tables.
#[derive(Debug, Clone)]
pub struct FsBeam {
    pub grid: DoaGrid,
    pub theta_as: f64,
    pub iterations: usize,
    /// Neighbor range (into `grid.visible()`) for each visible bin, by rank.
    ranges: Vec<(usize, usize)>,
}

impl FsBeam {
    pub fn new(cfg: &SystemConfig) -> Self {
        Self::with_grid(DoaGrid::new(cfg.fft_size, cfg.chi), cfg.angular_spread, cfg.iterations)
    }

    pub fn with_grid(grid: DoaGrid, theta_as: f64, iterations: usize) -> Self {
        let ranges = grid
            .visible()
            .iter()
            .map(|&b| grid.neighbor_range(grid.theta(b).unwrap(), theta_as))
            .collect();
        Self { grid, theta_as, iterations, ranges }
    }

    pub fn spectrum(&self, y: &ComplexMatrix) -> Result<BeamSpectrum, EstimatorError> {
        beamspace_transform(y, &self.grid)
    }

    pub fn neighbor_set(&self, theta: f64) -> Vec<usize> {
        self.grid.neighbor_set(theta, self.theta_as)
    }

    /// Neighbor set of a visible grid bin.
    pub fn bin_neighbors(&self, bin: usize) -> &[usize] {
        let (lo, hi) = self.ranges[self.grid.rank[bin]];
        &self.grid.visible()[lo..hi]
    }

    /// Quadratic-model statistics for every bin at CFO anchor `phi`.
    pub fn bin_stats(&self, spec: &BeamSpectrum, basis: &UserBasis, phi: f64) -> BinStats {
        let y = &spec.source;
        let n = y.nrows();
        let l = basis.taps();
        let rot: Vec<Complex64> = (0..n).map(|t| cis(-2.0 * PI * t as f64 * phi / n as f64)).collect();
        // [Q^H E^H; Q^H D^H E^H] Y, then the grid FFT along antennas
        let mut w = ComplexMatrix::zeros(2 * l, n);
        for t in 0..n {
            for r in 0..l {
                w[(r, t)] = basis.qh[(r, t)] * rot[t];
                w[(l + r, t)] = basis.qhd[(r, t)] * rot[t];
            }
        }
        let g = fft_rows_padded(&(w * y), self.grid.fft_size);
        let nb = self.grid.fft_size;
        let mut s = vec![0.0; nb];
        let mut b = vec![0.0; nb];
        let mut a = vec![0.0; nb];
        for i in 0..nb {
            let (mut ss, mut bb, mut cc) = (0.0, 0.0, 0.0);
            for r in 0..l {
                let ai = g[(r, i)];
                let ci = g[(l + r, i)];
                ss += ai.norm_sqr();
                bb -= (ai.conj() * ci).re;
                cc += ci.norm_sqr();
            }
            s[i] = ss;
            b[i] = bb;
            a[i] = (spec.deriv_power[i] - cc).max(0.0);
        }
        BinStats { phi, s, b, a, p: spec.power.clone() }
    }

    /// Normalized projection residual over the neighbor set of `theta`
    /// at CFO `phi`, evaluated directly on the selected beams.
    pub fn cost(&self, spec: &BeamSpectrum, basis: &UserBasis, theta: f64, phi: f64) -> Result<f64, EstimatorError> {
        let set = self.neighbor_set(theta);
        if set.is_empty() {
            return Err(EstimatorError::EmptyNeighborhood);
        }
        self.cost_on(spec, basis, &set, phi)
    }

    fn cost_on(&self, spec: &BeamSpectrum, basis: &UserBasis, set: &[usize], phi: f64) -> Result<f64, EstimatorError> {
        let n = spec.beams.nrows();
        let total: f64 = set.iter().map(|&i| spec.power[i]).sum();
        if total <= 0.0 {
            return Err(EstimatorError::ZeroEnergy);
        }
        let rot: Vec<Complex64> = (0..n).map(|t| cis(-2.0 * PI * t as f64 * phi / n as f64)).collect();
        let mut z = ComplexMatrix::zeros(n, set.len());
        for (c, &i) in set.iter().enumerate() {
            for t in 0..n {
                z[(t, c)] = spec.beams[(t, i)] * rot[t];
            }
        }
        let captured: f64 = (&basis.qh * z).iter().map(|v| v.norm_sqr()).sum();
        Ok((1.0 - captured / total).clamp(0.0, 1.0))
    }

    /// Vertex of the local parabola in the CFO increment, summed over the
    /// neighbor set of `theta`. Returns `(delta, degenerate)`; a degenerate
    /// quadratic gives zero.
    pub fn delta_phi_vertex(&self, spec: &BeamSpectrum, basis: &UserBasis, theta: f64, phi_anchor: f64) -> (f64, bool) {
        let stats = self.bin_stats(spec, basis, phi_anchor);
        let set = self.neighbor_set(theta);
        vertex(&stats, &set)
    }

    /// Corrected alignment objective for every visible bin, as
    /// `(bin, objective, neighborhood energy)`.
    pub fn objective(&self, stats: &BinStats) -> Vec<(usize, f64, f64)> {
        let vis = self.grid.visible();
        let prefix = |v: &[f64]| {
            let mut out = Vec::with_capacity(vis.len() + 1);
            out.push(0.0);
            let mut acc = 0.0;
            for &b in vis {
                acc += v[b];
                out.push(acc);
            }
            out
        };
        let (ps, pb, pa, pp) = (prefix(&stats.s), prefix(&stats.b), prefix(&stats.a), prefix(&stats.p));
        vis.iter()
            .zip(&self.ranges)
            .filter(|(_, &(lo, hi))| hi > lo)
            .map(|(&bin, &(lo, hi))| {
                let (s, b, a, p) = (ps[hi] - ps[lo], pb[hi] - pb[lo], pa[hi] - pa[lo], pp[hi] - pp[lo]);
                if p <= 0.0 {
                    return (bin, f64::NEG_INFINITY, 0.0);
                }
                let corr = if a > 1e-300 { b * b / a } else { 0.0 };
                (bin, ((s + corr) / p).min(1.0), p)
            })
            .collect()
    }

    /// Grid bin maximizing the corrected objective at CFO anchor `phi`.
    pub fn doa_search(&self, spec: &BeamSpectrum, basis: &UserBasis, phi: f64) -> Result<usize, EstimatorError> {
        let stats = self.bin_stats(spec, basis, phi);
        self.search_stats(&stats)
    }

    fn search_stats(&self, stats: &BinStats) -> Result<usize, EstimatorError> {
        let obj = self.objective(stats);
        let best = obj.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
        if !best.is_finite() {
            return Err(EstimatorError::EmptyNeighborhood);
        }
        // near-ties (e.g. noise-free single user, where every beam is in span)
        // go to the most energetic neighborhood, then to the lowest bin
        obj.iter()
            .filter(|o| o.1 >= best - TIE_TOL)
            .max_by(|x, y| x.2.total_cmp(&y.2).then(y.0.cmp(&x.0)))
            .map(|o| o.0)
            .ok_or(EstimatorError::EmptyNeighborhood)
    }

    /// Alternating DOA search and CFO vertex update starting from zero CFO.
    pub fn estimate_user(&self, spec: &BeamSpectrum, basis: &UserBasis) -> Result<CfoDoaEstimate, EstimatorError> {
        self.estimate_from(spec, basis, 0.0, self.iterations)
    }

    pub fn estimate_from(&self, spec: &BeamSpectrum, basis: &UserBasis, phi0: f64, iterations: usize) -> Result<CfoDoaEstimate, EstimatorError> {
        let mut phi = phi0;
        let mut flags = EstimatorFlags::default();
        let mut trace = Vec::with_capacity(iterations);
        let mut bin = 0;
        for _ in 0..iterations {
            let stats = self.bin_stats(spec, basis, phi);
            bin = self.search_stats(&stats)?;
            let set = self.bin_neighbors(bin).to_vec();
            let (delta, degenerate) = vertex(&stats, &set);
            flags.degenerate_quadratic |= degenerate;
            phi += delta;
            if phi.abs() > MAX_CFO {
                phi = phi.clamp(-MAX_CFO, MAX_CFO);
                flags.clamped = true;
            }
            let cost = self.cost_on(spec, basis, &set, phi)?;
            trace.push(IterationRecord { phi, theta: self.grid.theta(bin).unwrap(), cost });
            if delta.abs() < 1e-9 {
                break;
            }
        }
        Ok(CfoDoaEstimate { phi_hat: phi, theta_hat: self.grid.theta(bin).unwrap_or(f64::NAN), bin, trace, flags })
    }
}

fn vertex(stats: &BinStats, set: &[usize]) -> (f64, bool) {
    let b: f64 = set.iter().map(|&i| stats.b[i]).sum();
    let a: f64 = set.iter().map(|&i| stats.a[i]).sum();
    let scale: f64 = set.iter().map(|&i| stats.p[i]).sum();
    if !(a > 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return (0.0, true);
    }
    (-b / a, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{channel_from_rays, draw_channel, steering_vector, UserChannel};
    use crate::numerics::{c64, projector_complement};
    use crate::signal::{noise_matrix, phase_rotation, training_signal, TrainingBlock};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_user(cfg: &SystemConfig, theta: f64, phi: f64, seed: u64) -> (ComplexMatrix, TrainingBlock, UserChannel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = draw_channel(cfg, theta, &mut rng).unwrap();
        u.phi = phi;
        let t = TrainingBlock::random_qpsk(cfg.subcarriers, cfg.taps, 1.0, &mut rng);
        let y = training_signal(std::slice::from_ref(&u), std::slice::from_ref(&t), true);
        (y, t, u)
    }

    #[test]
    fn grid_identity_and_coverage() {
        let grid = DoaGrid::new(256, PI);
        for &i in &[0usize, 1, 17, 128, 200, 255] {
            let th = grid.theta(i).unwrap();
            let a = steering_vector(th, 8, PI);
            let w = grid.conj_steering(i, 8);
            for m in 0..8 {
                assert!((a[m].conj() - w[m]).norm() < 1e-9, "bin {i} m {m}");
            }
        }
        assert_eq!(grid.visible().len(), 256);
        let th: Vec<f64> = grid.visible().iter().map(|&b| grid.theta(b).unwrap()).collect();
        assert!(th.windows(2).all(|w| w[0] <= w[1]));
        assert!(th[0] < 0.2 && *th.last().unwrap() > PI - 0.2);
        // a narrower array constant leaves invisible bins
        let g2 = DoaGrid::new(64, PI / 2.0);
        assert!(g2.visible().len() < 64);
    }

    #[test]
    fn neighbor_set_count_at_broadside() {
        let grid = DoaGrid::new(256, PI);
        let spread = 5f64.to_radians();
        let set = grid.neighbor_set(PI / 2.0, spread);
        let brute = (0..256)
            .filter(|&i| grid.theta(i).is_some_and(|t| (t - PI / 2.0).abs() < spread))
            .count();
        assert_eq!(set.len(), brute);
        // |k/128| < sin(5 deg) gives k in -11..=11
        assert_eq!(set.len(), 23);
        assert!(grid.neighbor_set(PI / 2.0, 0.0).is_empty());
        // spread below the local bin spacing keeps only the nearest bin
        let spacing = (1.0f64 / 128.0).asin();
        let single = grid.neighbor_set(PI / 2.0, 0.9 * spacing);
        assert_eq!(single, vec![0]);
    }

    #[test]
    fn beamspace_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = ComplexMatrix::from_fn(8, 12, |_, _| c64(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let grid = DoaGrid::new(32, PI);
        let spec = beamspace_transform(&y, &grid).unwrap();
        for i in 0..32 {
            let w = grid.conj_steering(i, 12);
            for t in 0..8 {
                let direct: Complex64 = (0..12).map(|m| y[(t, m)] * w[m]).sum();
                assert!((spec.beams[(t, i)] - direct).norm() < 1e-10 * (1.0 + direct.norm()));
            }
        }
        assert!(beamspace_transform(&y, &DoaGrid::new(8, PI)).is_err());
    }

    #[test]
    fn beamspace_of_on_grid_plane_wave() {
        let grid = DoaGrid::new(32, PI);
        let bin = 5;
        let a = steering_vector(grid.theta(bin).unwrap(), 16, PI);
        let y = ComplexMatrix::from_fn(1, 16, |_, m| a[m]);
        let spec = beamspace_transform(&y, &grid).unwrap();
        assert!((spec.beams[(0, bin)] - c64(16.0, 0.0)).norm() < 1e-10);
        // M_fft = 2M: every other bin away from the peak is a Dirichlet null
        for k in [2usize, 4, 6] {
            assert!(spec.beams[(0, (bin + k) % 32)].norm() < 1e-10);
        }
    }

    #[test]
    fn bin_stats_match_explicit_operators() {
        let cfg = SystemConfig { antennas: 16, fft_size: 32, subcarriers: 16, taps: 3, cp_len: 2, pdp: vec![1.0 / 3.0; 3], short_training_len: 8, ..SystemConfig::default() };
        let (mut y, t, _) = single_user(&cfg, 1.2, 0.1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        y += noise_matrix(16, 16, 0.1, &mut rng);
        let est = FsBeam::new(&cfg);
        let spec = est.spectrum(&y).unwrap();
        let basis = UserBasis::new(&t.b).unwrap();
        let phi = 0.03;
        let stats = est.bin_stats(&spec, &basis, phi);
        let p_perp = projector_complement(&t.b).unwrap();
        let eh = phase_rotation(phi, 16).adjoint();
        let dh = ComplexMatrix::from_diagonal(&crate::numerics::ComplexVector::from_fn(16, |n, _| c64(0.0, -2.0 * PI * n as f64 / 16.0)));
        for i in 0..32 {
            let yi = spec.beams.column(i).into_owned();
            let z = &eh * &yi;
            let s_direct = yi.norm_squared() - (&p_perp * &z).norm_squared();
            let b_direct = (z.adjoint() * &p_perp * &dh * &z)[(0, 0)].re;
            let a_direct = (&p_perp * &dh * &z).norm_squared();
            assert!((stats.s[i] - s_direct).abs() < 1e-9 * (1.0 + s_direct.abs()));
            assert!((stats.b[i] - b_direct).abs() < 1e-9 * (1.0 + b_direct.abs()));
            assert!((stats.a[i] - a_direct).abs() < 1e-9 * (1.0 + a_direct.abs()));
        }
    }

    #[test]
    fn noise_free_cost_is_zero_at_truth_and_larger_elsewhere() {
        let cfg = SystemConfig::default();
        let theta = 80f64.to_radians();
        let phi = 0.12;
        let (y, t, _) = single_user(&cfg, theta, phi, 5);
        let est = FsBeam::new(&cfg);
        let spec = est.spectrum(&y).unwrap();
        let basis = UserBasis::new(&t.b).unwrap();
        let at_truth = est.cost(&spec, &basis, theta, phi).unwrap();
        assert!(at_truth < 1e-10, "{at_truth}");
        for d in [0.01, -0.01, 0.1, -0.1] {
            assert!(est.cost(&spec, &basis, theta, phi + d).unwrap() > at_truth);
        }
        for other in [40f64, 120.0] {
            let c = est.cost(&spec, &basis, other.to_radians(), phi).unwrap();
            assert!(c.is_finite() && c >= at_truth);
        }
        // all-zero beams in the neighborhood
        let zero = est.spectrum(&ComplexMatrix::zeros(64, 128)).unwrap();
        assert_eq!(est.cost(&zero, &basis, theta, 0.0), Err(EstimatorError::ZeroEnergy));
    }

    #[test]
    fn pure_noise_cost_approaches_subspace_ratio() {
        let cfg = SystemConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = TrainingBlock::random_qpsk(64, 10, 1.0, &mut rng);
        let basis = UserBasis::new(&t.b).unwrap();
        let est = FsBeam::new(&cfg);
        // 80 blocks x 128 rows of beams per block
        let mut acc = 0.0;
        let reps = 80;
        for _ in 0..reps {
            let y = noise_matrix(64, 128, 1.0, &mut rng);
            let spec = est.spectrum(&y).unwrap();
            acc += est.cost(&spec, &basis, 1.0, 0.07).unwrap();
        }
        let mean = acc / reps as f64;
        assert!((mean - 54.0 / 64.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn vertex_is_stationary_at_truth_and_matches_scan() {
        let cfg = SystemConfig::default();
        let theta = 100f64.to_radians();
        let phi = -0.17;
        let (y, t, _) = single_user(&cfg, theta, phi, 7);
        let est = FsBeam::new(&cfg);
        let spec = est.spectrum(&y).unwrap();
        let basis = UserBasis::new(&t.b).unwrap();
        let (d0, degenerate) = est.delta_phi_vertex(&spec, &basis, theta, phi);
        assert!(!degenerate);
        assert!(d0.abs() < 1e-8, "{d0}");
        let (d1, _) = est.delta_phi_vertex(&spec, &basis, theta, phi - 1e-3);
        assert!((d1 / 1e-3 - 1.0).abs() < 0.05, "{d1}");

        // dense scan of the exact numerator around an offset anchor
        let anchor = phi + 0.004;
        let (dv, _) = est.delta_phi_vertex(&spec, &basis, theta, anchor);
        let set = est.neighbor_set(theta);
        let num = |d: f64| {
            let stats = est.bin_stats(&spec, &basis, anchor + d);
            set.iter().map(|&i| stats.p[i] - stats.s[i]).sum::<f64>()
        };
        let best = (-1000..=1000)
            .map(|k| k as f64 * 1e-5)
            .min_by(|&a, &b| num(a).total_cmp(&num(b)))
            .unwrap();
        assert!((dv - best).abs() <= 2e-5, "vertex {dv} scan {best}");
    }

    #[test]
    fn noise_free_single_user_converges() {
        let cfg = SystemConfig { users: 1, ..SystemConfig::default() };
        let est = FsBeam::new(&cfg);
        for (seed, theta, phi) in [(11, 90.0f64, 0.17), (12, 45.0, -0.2), (13, 130.0, 0.05)] {
            let (y, t, _) = single_user(&cfg, theta.to_radians(), phi, seed);
            let spec = est.spectrum(&y).unwrap();
            let basis = UserBasis::new(&t.b).unwrap();
            let e = est.estimate_user(&spec, &basis).unwrap();
            assert!((e.phi_hat - phi).abs() < 1e-6, "seed {seed}: {} vs {phi}", e.phi_hat);
            assert!(e.trace.len() <= 5);
            assert!((e.theta_hat - theta.to_radians()).abs() < cfg.angular_spread);
        }
    }

    #[test]
    fn on_grid_truth_returns_true_bin() {
        let cfg = SystemConfig::default();
        let est = FsBeam::new(&cfg);
        let bin = 40;
        let theta = est.grid.theta(bin).unwrap();
        let phi = 0.08;
        let h = channel_from_rays(&vec![vec![theta]; 10], &(0..10).map(|l| vec![cis(l as f64)]).collect::<Vec<_>>(), 128, PI);
        let u = UserChannel { h, phi, theta_mean: theta, ray_doas: vec![], ray_gains: vec![] };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = TrainingBlock::random_qpsk(64, 10, 1.0, &mut rng);
        let mut y = training_signal(&[u], std::slice::from_ref(&t), true);
        // a faint noise floor separates the in-span tie
        y += noise_matrix(64, 128, 1e-6, &mut rng);
        let spec = est.spectrum(&y).unwrap();
        let basis = UserBasis::new(&t.b).unwrap();
        let found = est.doa_search(&spec, &basis, phi).unwrap();
        let neighbors = est.bin_neighbors(bin);
        assert!(neighbors.contains(&found));
        assert!((est.grid.theta(found).unwrap() - theta).abs() < 2.0 * (1.0f64 / 128.0).asin());
    }

    #[test]
    fn shift_equivariance() {
        let cfg = SystemConfig::default();
        let est = FsBeam::new(&cfg);
        let (mut y, t, _) = single_user(&cfg, 1.4, 0.05, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        y += noise_matrix(64, 128, 0.1, &mut rng);
        let basis = UserBasis::new(&t.b).unwrap();
        let e0 = est.estimate_user(&est.spectrum(&y).unwrap(), &basis).unwrap();
        let c = 0.1;
        let shifted = phase_rotation(c, 64) * &y;
        let e1 = est.estimate_user(&est.spectrum(&shifted).unwrap(), &basis).unwrap();
        assert!((e1.phi_hat - e0.phi_hat - c).abs() < 1e-4, "{} {}", e0.phi_hat, e1.phi_hat);
    }

    /// Brute force over grid x dense CFO of the exact (unexpanded) cost.
    #[test]
    fn search_agrees_with_brute_force_on_small_instance() {
        let cfg = SystemConfig {
            subcarriers: 16,
            cp_len: 1,
            taps: 2,
            pdp: vec![0.5, 0.5],
            antennas: 32,
            fft_size: 64,
            short_training_len: 8,
            ..SystemConfig::default()
        };
        let est = FsBeam::new(&cfg);
        for seed in 0..4u64 {
            let (mut y, t, u) = single_user(&cfg, 1.0 + 0.3 * seed as f64, 0.1 - 0.05 * seed as f64, 30 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            y += noise_matrix(16, 32, 0.01, &mut rng);
            let spec = est.spectrum(&y).unwrap();
            let basis = UserBasis::new(&t.b).unwrap();
            let e = est.estimate_user(&spec, &basis).unwrap();
            let mut best = (f64::INFINITY, 0usize, 0.0);
            for &bin in est.grid.visible() {
                let th = est.grid.theta(bin).unwrap();
                for k in -100..=100 {
                    let phi = u.phi + k as f64 * 1e-3;
                    let c = est.cost(&spec, &basis, th, phi).unwrap();
                    if c < best.0 {
                        best = (c, bin, phi);
                    }
                }
            }
            let rank = |b: usize| est.grid.visible().iter().position(|&x| x == b).unwrap() as i64;
            assert!((rank(e.bin) - rank(best.1)).abs() <= 1, "seed {seed}: {} vs {}", e.bin, best.1);
            assert!((e.phi_hat - best.2).abs() < 2e-3);
        }
    }

    #[test]
    fn two_separated_users_found_in_their_spreads() {
        let cfg = SystemConfig { users: 2, snr_db: 20.0, ..SystemConfig::default() };
        let est = FsBeam::new(&cfg);
        let doas = [80f64.to_radians(), 100f64.to_radians()];
        let mut hits = 0;
        let trials = 100;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let users: Vec<UserChannel> = doas
                .iter()
                .map(|&d| {
                    let mut u = draw_channel(&cfg, d, &mut rng).unwrap();
                    u.phi = 0.2 * (2.0 * rng.random::<f64>() - 1.0);
                    u
                })
                .collect();
            let tr: Vec<TrainingBlock> = (0..2).map(|_| TrainingBlock::random_qpsk(64, 10, 1.0, &mut rng)).collect();
            let mut y = training_signal(&users, &tr, true);
            y += noise_matrix(64, 128, cfg.noise_variance(), &mut rng);
            let spec = est.spectrum(&y).unwrap();
            let ok = (0..2).all(|k| {
                let e = est.estimate_user(&spec, &UserBasis::new(&tr[k].b).unwrap()).unwrap();
                (e.theta_hat - doas[k]).abs() < cfg.angular_spread
            });
            hits += ok as usize;
        }
        assert!(hits >= 99, "{hits}/100");
    }
}
