//! One-ring geometric channel model, ULA steering vectors and CFO draws.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{cis, ComplexMatrix, ComplexVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("DOA region ({lo:.4}, {hi:.4}) rad leaves (0, pi)")]
    RegionOutOfRange { lo: f64, hi: f64 },
    #[error("phi_max must satisfy 0 <= phi_max < 0.5, got {0}")]
    InvalidPhiMax(f64),
}

/// How the distance between two qualified-DOA sets is measured when grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceRule {
    /// Largest pairwise angular difference (set diameter-sensitive).
    #[default]
    Max,
    /// Smallest pairwise angular difference.
    Min,
}

/// Scenario-independent system parameters. Angles are radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Subcarriers per OFDM block (N).
    pub subcarriers: usize,
    /// Cyclic-prefix length (N_cp).
    pub cp_len: usize,
    /// Receive antennas (M).
    pub antennas: usize,
    /// Simultaneous users (K).
    pub users: usize,
    /// Channel taps (L).
    pub taps: usize,
    /// Scatterer rays per tap (P).
    pub rays: usize,
    /// Half-width of each user's DOA region (theta_as).
    pub angular_spread: f64,
    /// Array phase constant 2 pi d / lambda.
    pub chi: f64,
    /// CFOs are drawn uniformly from [-phi_max, phi_max].
    pub phi_max: f64,
    /// Per-antenna SNR sigma_s^2 / sigma_n^2 in dB.
    pub snr_db: f64,
    /// Beamspace grid size (M_fft).
    pub fft_size: usize,
    /// Qualified-DOA threshold factor (t_h).
    pub qualify_threshold: f64,
    /// Critical-user threshold factor (rho_th).
    pub critical_threshold: f64,
    /// Grouping guard interval (G).
    pub guard: f64,
    /// Alternating DOA search / CFO update rounds.
    pub iterations: usize,
    pub seed: u64,
    /// Per-tap channel variances, summing to one.
    pub pdp: Vec<f64>,
    /// Transmit power sigma_s^2.
    pub signal_power: f64,
    /// Length of the short time-division training sequences (N_s).
    pub short_training_len: usize,
    /// Index `i` of the first data block (phase factor eta_i).
    pub first_data_block: usize,
    pub distance_rule: DistanceRule,
    /// Linearized refinement passes for grouped users.
    pub refine_passes: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let taps = 10;
        let spread = 5f64.to_radians();
        Self {
            subcarriers: 64,
            cp_len: taps - 1,
            antennas: 128,
            users: 4,
            taps,
            rays: 50,
            angular_spread: spread,
            chi: PI,
            phi_max: 0.2,
            snr_db: 10.0,
            fft_size: 256,
            qualify_threshold: 10.0,
            critical_threshold: 2.0 / 3.0,
            guard: 4.0 * spread + 5f64.to_radians(),
            iterations: 5,
            seed: 0,
            pdp: vec![1.0 / taps as f64; taps],
            signal_power: 1.0,
            short_training_len: 16,
            first_data_block: 1,
            distance_rule: DistanceRule::Max,
            refine_passes: 3,
        }
    }
}

impl SystemConfig {
    /// Noise variance sigma_n^2 implied by `snr_db` and `signal_power`.
    pub fn noise_variance(&self) -> f64 {
        noise_variance_for(self.signal_power, self.snr_db)
    }

    /// Numeric qualified-DOA threshold `t_h * L / (N - L)`.
    pub fn qualify_level(&self) -> f64 {
        self.qualify_threshold * self.taps as f64 / (self.subcarriers - self.taps) as f64
    }

    /// Check the structural invariants. The error string names the offending key.
    pub fn validate(&self) -> Result<(), String> {
        let fail = |key: &str, msg: String| Err(format!("{key}: {msg}"));
        if self.subcarriers == 0 {
            return fail("n", "must be positive".into());
        }
        if self.antennas == 0 {
            return fail("m", "must be positive".into());
        }
        if self.users == 0 {
            return fail("k", "must be positive".into());
        }
        if self.taps == 0 || self.taps >= self.subcarriers {
            return fail("l", format!("need 1 <= L < N (L={}, N={})", self.taps, self.subcarriers));
        }
        if self.rays == 0 {
            return fail("p", "must be positive".into());
        }
        if self.cp_len + 1 < self.taps {
            return fail("n_cp", format!("CP length {} shorter than channel (needs >= L-1 = {})", self.cp_len, self.taps - 1));
        }
        if !(self.phi_max >= 0.0 && self.phi_max < 0.5) {
            return fail("phi_max", format!("must satisfy 0 <= phi_max < 0.5, got {}", self.phi_max));
        }
        if self.fft_size < self.antennas {
            return fail("m_fft", format!("grid size {} smaller than M={}", self.fft_size, self.antennas));
        }
        if !(self.angular_spread >= 0.0 && self.angular_spread < PI / 2.0) {
            return fail("theta_as", format!("out of range: {}", self.angular_spread));
        }
        if !(self.chi > 0.0 && self.chi.is_finite()) {
            return fail("chi", "must be positive".into());
        }
        if self.pdp.len() != self.taps {
            return fail("pdp", format!("has {} entries, expected L={}", self.pdp.len(), self.taps));
        }
        if self.pdp.iter().any(|&v| !(v >= 0.0)) {
            return fail("pdp", "entries must be non-negative".into());
        }
        let total: f64 = self.pdp.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return fail("pdp", format!("must sum to 1, sums to {total}"));
        }
        if !(self.signal_power > 0.0) {
            return fail("signal_power", "must be positive".into());
        }
        if !self.snr_db.is_finite() {
            return fail("snr_db", "must be finite".into());
        }
        if self.short_training_len < self.taps || self.short_training_len > self.subcarriers {
            return fail("n_s", format!("need L <= N_s <= N, got {}", self.short_training_len));
        }
        if self.iterations == 0 {
            return fail("iterations", "must be positive".into());
        }
        Ok(())
    }
}

pub fn noise_variance_for(signal_power: f64, snr_db: f64) -> f64 {
    signal_power * 10f64.powf(-snr_db / 10.0)
}

/// One user's multipath channel and impairments.
#[derive(Debug, Clone)]
pub struct UserChannel {
    /// L x M tap matrix; row `l` is `h_l^T`.
    pub h: ComplexMatrix,
    /// Normalized CFO (fraction of the subcarrier spacing).
    pub phi: f64,
    pub theta_mean: f64,
    pub ray_doas: Vec<Vec<f64>>,
    pub ray_gains: Vec<Vec<Complex64>>,
}

/// ULA steering vector, entry `m` = `exp(-j chi m cos(theta))`.
pub fn steering_vector(theta: f64, antennas: usize, chi: f64) -> ComplexVector {
    let step = -chi * theta.cos();
    ComplexVector::from_fn(antennas, |m, _| cis(step * m as f64))
}

/// Circular complex Gaussian sample with total variance `var`.
#[inline]
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

fn check_region(theta_mean: f64, spread: f64) -> Result<(), ChannelError> {
    let (lo, hi) = (theta_mean - spread, theta_mean + spread);
    if lo <= 0.0 || hi >= PI {
        return Err(ChannelError::RegionOutOfRange { lo, hi });
    }
    Ok(())
}

/// Draw a one-ring channel: `P` rays per tap with DOAs uniform on the spread
/// and i.i.d. `CN(0, pdp[l]/P)` gains. The CFO field is left at zero.
pub fn draw_channel<R: Rng + ?Sized>(cfg: &SystemConfig, theta_mean: f64, rng: &mut R) -> Result<UserChannel, ChannelError> {
    check_region(theta_mean, cfg.angular_spread)?;
    let (l_taps, m, p) = (cfg.taps, cfg.antennas, cfg.rays);
    let mut doas = Vec::with_capacity(l_taps);
    let mut gains = Vec::with_capacity(l_taps);
    for l in 0..l_taps {
        let var = cfg.pdp[l] / p as f64;
        let tap_doas: Vec<f64> = (0..p)
            .map(|_| theta_mean + cfg.angular_spread * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let tap_gains: Vec<Complex64> = (0..p).map(|_| complex_gaussian(rng, var)).collect();
        doas.push(tap_doas);
        gains.push(tap_gains);
    }
    let h = channel_from_rays(&doas, &gains, m, cfg.chi);
    Ok(UserChannel { h, phi: 0.0, theta_mean, ray_doas: doas, ray_gains: gains })
}

/// `h_l = sum_p alpha_{l,p} a(theta_{l,p})`, stacked as rows of an L x M matrix.
pub fn channel_from_rays(doas: &[Vec<f64>], gains: &[Vec<Complex64>], antennas: usize, chi: f64) -> ComplexMatrix {
    let mut h = ComplexMatrix::zeros(doas.len(), antennas);
    for (l, (tap_doas, tap_gains)) in doas.iter().zip(gains).enumerate() {
        for (&theta, &alpha) in tap_doas.iter().zip(tap_gains) {
            // phasor recurrence across the array
            let step = cis(-chi * theta.cos());
            let mut z = alpha;
            for col in 0..antennas {
                h[(l, col)] += z;
                z *= step;
            }
        }
    }
    h
}

/// Draw `k` CFOs i.i.d. uniform on `[-phi_max, phi_max]`.
pub fn draw_cfos<R: Rng + ?Sized>(k: usize, phi_max: f64, rng: &mut R) -> Result<Vec<f64>, ChannelError> {
    if !(phi_max >= 0.0 && phi_max < 0.5) {
        return Err(ChannelError::InvalidPhiMax(phi_max));
    }
    Ok((0..k).map(|_| phi_max * (2.0 * rng.random::<f64>() - 1.0)).collect())
}

/// Spatial correlation `R(i,j) = 1/(2 theta_as) int exp(j chi (i-j) cos t) dt`
/// over the user's DOA region. Toeplitz and Hermitian with unit diagonal.
pub fn spatial_correlation(theta_mean: f64, theta_as: f64, chi: f64, antennas: usize) -> ComplexMatrix {
    let lags: Vec<Complex64> = if theta_as <= 1e-12 {
        let c = theta_mean.cos();
        (0..antennas).map(|d| cis(chi * d as f64 * c)).collect()
    } else {
        let (lo, hi) = (theta_mean - theta_as, theta_mean + theta_as);
        (0..antennas)
            .map(|d| {
                if d == 0 {
                    return Complex64::new(1.0, 0.0);
                }
                let f = |t: f64| cis(chi * d as f64 * t.cos());
                integrate(&f, lo, hi, 1e-10) / (2.0 * theta_as)
            })
            .collect()
    };
    ComplexMatrix::from_fn(antennas, antennas, |i, j| {
        if i >= j {
            lags[i - j]
        } else {
            lags[j - i].conj()
        }
    })
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

const GL_ORDER: usize = 12;

fn gl_panel(f: &dyn Fn(f64) -> Complex64, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)) -> Complex64 {
    let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
    rule.0.iter().zip(&rule.1).map(|(x, w)| f(mid + half * x) * *w).sum::<Complex64>() * half
}

/// Adaptive Gauss-Legendre quadrature of a complex integrand to absolute
/// tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> Complex64, a: f64, b: f64, tol: f64) -> Complex64 {
    let rule = gauss_legendre(GL_ORDER);
    let whole = gl_panel(f, a, b, &rule);
    adapt(f, a, b, whole, tol, 0, &rule)
}

fn adapt(f: &dyn Fn(f64) -> Complex64, a: f64, b: f64, whole: Complex64, tol: f64, depth: usize, rule: &(Vec<f64>, Vec<f64>)) -> Complex64 {
    let mid = 0.5 * (a + b);
    let left = gl_panel(f, a, mid, rule);
    let right = gl_panel(f, mid, b, rule);
    if (left + right - whole).norm() <= tol || depth >= 40 {
        return left + right;
    }
    adapt(f, a, mid, left, tol / 2.0, depth + 1, rule) + adapt(f, mid, b, right, tol / 2.0, depth + 1, rule)
}
