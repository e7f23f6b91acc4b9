//! OFDM block synthesis after CP removal: training matrices, CFO phase
//! rotation, received blocks and the 16-QAM alphabet.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_gaussian, UserChannel};
use crate::numerics::{cis, diag, ifft_in_place, ComplexMatrix};

/// Diagonal of `E(phi)` over `len` samples of an `n`-point block:
/// entry `t` is `exp(j 2 pi t phi / n)`.
pub fn phase_diagonal(phi: f64, len: usize, n: usize) -> Vec<Complex64> {
    let w = 2.0 * PI * phi / n as f64;
    (0..len).map(|t| cis(w * t as f64)).collect()
}

/// `E(phi) = diag(exp(j 2 pi n phi / N))`.
pub fn phase_rotation(phi: f64, n: usize) -> ComplexMatrix {
    diag(&phase_diagonal(phi, n, n))
}

/// Accumulated CP-inclusive phase of block `i`: `exp(j 2 pi i (N + N_cp) phi / N)`.
pub fn block_phase(phi: f64, block_index: usize, n: usize, n_cp: usize) -> Complex64 {
    cis(2.0 * PI * (block_index * (n + n_cp)) as f64 * phi / n as f64)
}

/// First column of `sqrt(N) F^H diag(x) F_L`, i.e. the time-domain sequence
/// `ifft(x) / sqrt(N)` (unnormalized inverse transform).
pub fn time_sequence(x: &[Complex64]) -> Vec<Complex64> {
    let mut t = x.to_vec();
    ifft_in_place(&mut t);
    let s = 1.0 / (x.len() as f64).sqrt();
    t.iter_mut().for_each(|z| *z *= s);
    t
}

/// `B = sqrt(N) F^H diag(x) F_L`. Column `l` is the sequence circularly
/// shifted down by `l`.
pub fn build_training_matrix(x: &[Complex64], l: usize) -> ComplexMatrix {
    let n = x.len();
    assert!(l <= n && n > 0, "need 1 <= N and L <= N");
    let t = time_sequence(x);
    ComplexMatrix::from_fn(n, l, |r, c| t[(r + n - c) % n])
}

/// Frequency-domain pilots and their circulant training matrix.
#[derive(Debug, Clone)]
pub struct TrainingBlock {
    pub x: Vec<Complex64>,
    pub b: ComplexMatrix,
}

impl TrainingBlock {
    pub fn new(x: Vec<Complex64>, l: usize) -> Self {
        let b = build_training_matrix(&x, l);
        Self { x, b }
    }

    /// Random QPSK pilots with `|x_n|^2 = power`.
    pub fn random_qpsk<R: Rng + ?Sized>(n: usize, l: usize, power: f64, rng: &mut R) -> Self {
        let a = (power / 2.0).sqrt();
        let x = (0..n)
            .map(|_| {
                let re = if rng.random::<bool>() { a } else { -a };
                let im = if rng.random::<bool>() { a } else { -a };
                Complex64::new(re, im)
            })
            .collect();
        Self::new(x, l)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn taps(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Training,
    Data,
}

/// One received OFDM block (`N x M`).
#[derive(Debug, Clone)]
pub struct ReceivedBlock {
    pub y: ComplexMatrix,
    pub kind: BlockKind,
    pub block_index: usize,
}

/// Gray-mapped square 16-QAM with average power `power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qam16 {
    scale: f64,
}

/// Gray code on one axis: bit pair -> amplitude level.
const LEVELS: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];

impl Qam16 {
    pub fn new(power: f64) -> Self {
        Self { scale: (power / 10.0).sqrt() }
    }

    /// Point for symbol index `idx` (bits b3 b2 on I, b1 b0 on Q).
    pub fn point(&self, idx: usize) -> Complex64 {
        Complex64::new(LEVELS[(idx >> 2) & 3], LEVELS[idx & 3]) * self.scale
    }

    pub fn min_distance(&self) -> f64 {
        2.0 * self.scale
    }

    fn axis_decision(&self, v: f64) -> usize {
        let u = v / self.scale;
        let level = if u < -2.0 {
            -3.0
        } else if u < 0.0 {
            -1.0
        } else if u < 2.0 {
            1.0
        } else {
            3.0
        };
        LEVELS.iter().position(|&l| l == level).unwrap()
    }

    /// Minimum-distance decision.
    pub fn decide(&self, z: Complex64) -> usize {
        (self.axis_decision(z.re) << 2) | self.axis_decision(z.im)
    }

    /// Map a bit stream (length a multiple of 4, MSB first) to symbols.
    pub fn map_bits(&self, bits: &[bool]) -> Vec<Complex64> {
        assert!(bits.len() % 4 == 0, "bit count must be a multiple of 4");
        bits.chunks(4)
            .map(|c| {
                let idx = c.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
                self.point(idx)
            })
            .collect()
    }

    pub fn demap_bits(&self, symbols: &[Complex64]) -> Vec<bool> {
        symbols
            .iter()
            .flat_map(|&z| {
                let idx = self.decide(z);
                (0..4).rev().map(move |k| (idx >> k) & 1 == 1)
            })
            .collect()
    }
}

/// One user's frequency-domain data symbols.
#[derive(Debug, Clone)]
pub struct DataBlock {
    pub indices: Vec<usize>,
    pub s: Vec<Complex64>,
}

impl DataBlock {
    pub fn random<R: Rng + ?Sized>(n: usize, qam: &Qam16, rng: &mut R) -> Self {
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..16)).collect();
        let s = indices.iter().map(|&i| qam.point(i)).collect();
        Self { indices, s }
    }
}

/// `N x M` matrix of i.i.d. `CN(0, var)` entries.
pub fn noise_matrix<R: Rng + ?Sized>(n: usize, m: usize, var: f64, rng: &mut R) -> ComplexMatrix {
    if var == 0.0 {
        return ComplexMatrix::zeros(n, m);
    }
    // column-major fill order keeps draws reproducible across shapes
    let mut out = ComplexMatrix::zeros(n, m);
    for z in out.iter_mut() {
        *z = complex_gaussian(rng, var);
    }
    out
}

/// `sum_k c_k E_k B_k H_k` where `E_k` is the CFO rotation over the rows of
/// `B_k` (referenced to an `n_ref`-point block) and `c_k` a scalar phase.
fn superpose(users: &[UserChannel], mats: &[&ComplexMatrix], phases: &[Complex64], apply_cfo: bool, n_ref: usize) -> ComplexMatrix {
    assert_eq!(users.len(), mats.len());
    let rows = mats.first().map_or(0, |b| b.nrows());
    let m = users.first().map_or(0, |u| u.h.ncols());
    let mut y = ComplexMatrix::zeros(rows, m);
    for ((u, b), c) in users.iter().zip(mats).zip(phases) {
        let bh = *b * &u.h;
        let rot = if apply_cfo { phase_diagonal(u.phi, rows, n_ref) } else { vec![Complex64::new(1.0, 0.0); rows] };
        for j in 0..m {
            for (i, r) in rot.iter().enumerate() {
                y[(i, j)] += c * r * bh[(i, j)];
            }
        }
    }
    y
}

/// Noise-free training reception `sum_k E(phi_k) B_k H_k`. With
/// `apply_cfo = false` every user is treated as synchronized.
pub fn training_signal(users: &[UserChannel], training: &[TrainingBlock], apply_cfo: bool) -> ComplexMatrix {
    let mats: Vec<&ComplexMatrix> = training.iter().map(|t| &t.b).collect();
    let n = training.first().map_or(0, |t| t.len());
    superpose(users, &mats, &vec![Complex64::new(1.0, 0.0); users.len()], apply_cfo, n)
}

/// Short training of length `N_s` inside an `n`-point block timing.
pub fn short_training_signal(users: &[UserChannel], training: &[TrainingBlock], n: usize, apply_cfo: bool) -> ComplexMatrix {
    let mats: Vec<&ComplexMatrix> = training.iter().map(|t| &t.b).collect();
    superpose(users, &mats, &vec![Complex64::new(1.0, 0.0); users.len()], apply_cfo, n)
}

/// Noise-free data reception
/// `sqrt(N) sum_k eta_i(phi_k) E(phi_k) F^H diag(s_k) F_L H_k`.
pub fn data_signal(users: &[UserChannel], data: &[DataBlock], block_index: usize, n_cp: usize, apply_cfo: bool) -> ComplexMatrix {
    let l = users.first().map_or(0, |u| u.h.nrows());
    let mats: Vec<ComplexMatrix> = data.iter().map(|d| build_training_matrix(&d.s, l)).collect();
    let refs: Vec<&ComplexMatrix> = mats.iter().collect();
    let n = data.first().map_or(0, |d| d.s.len());
    let phases: Vec<Complex64> = users
        .iter()
        .map(|u| if apply_cfo { block_phase(u.phi, block_index, n, n_cp) } else { Complex64::new(1.0, 0.0) })
        .collect();
    superpose(users, &refs, &phases, apply_cfo, n)
}

/// `Y = sum_k E(phi_k) B_k H_k + N` with noise variance `sigma_n2` per entry.
pub fn synthesize_training<R: Rng + ?Sized>(users: &[UserChannel], training: &[TrainingBlock], sigma_n2: f64, rng: &mut R) -> ReceivedBlock {
    let mut y = training_signal(users, training, true);
    y += noise_matrix(y.nrows(), y.ncols(), sigma_n2, rng);
    ReceivedBlock { y, kind: BlockKind::Training, block_index: 0 }
}

pub fn synthesize_data<R: Rng + ?Sized>(
    users: &[UserChannel],
    data: &[DataBlock],
    block_index: usize,
    n_cp: usize,
    sigma_n2: f64,
    rng: &mut R,
) -> ReceivedBlock {
    let mut y = data_signal(users, data, block_index, n_cp, true);
    y += noise_matrix(y.nrows(), y.ncols(), sigma_n2, rng);
    ReceivedBlock { y, kind: BlockKind::Data, block_index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{channel_from_rays, draw_channel, SystemConfig};
    use crate::numerics::{c64, dft_columns, dft_matrix, fro2, projector_complement};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &ComplexMatrix, b: &ComplexMatrix, tol: f64) -> bool {
        a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).norm() < tol)
    }

    #[test]
    fn phase_rotation_examples() {
        assert!(close(&phase_rotation(0.0, 5), &ComplexMatrix::identity(5, 5), 1e-15));
        let e = phase_rotation(1.0, 4);
        let expect = [c64(1.0, 0.0), c64(0.0, 1.0), c64(-1.0, 0.0), c64(0.0, -1.0)];
        for (i, z) in expect.iter().enumerate() {
            assert!((e[(i, i)] - z).norm() < 1e-12);
        }
        let prod = phase_rotation(0.3, 8) * phase_rotation(-0.1, 8);
        assert!(close(&prod, &phase_rotation(0.2, 8), 1e-12));
    }

    #[test]
    fn training_matrix_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tb = TrainingBlock::random_qpsk(16, 4, 1.0, &mut rng);
        let f = dft_matrix(16).unwrap();
        let direct = (f.adjoint() * diag(&tb.x) * dft_columns(16, 4).unwrap()).scale(4.0);
        assert!(close(&tb.b, &direct, 1e-12));

        let ones = vec![c64(1.0, 0.0); 4];
        let b = build_training_matrix(&ones, 2);
        let expect = ComplexMatrix::identity(4, 2).scale(2.0);
        assert!(close(&b, &expect, 1e-12));
    }

    #[test]
    fn constant_modulus_training_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tb = TrainingBlock::random_qpsk(64, 10, 1.0, &mut rng);
        let g = tb.b.adjoint() * &tb.b;
        assert!(close(&g, &ComplexMatrix::identity(10, 10).scale(64.0), 1e-10));
        for c in tb.b.column_iter() {
            assert!((c.norm_squared() - 64.0).abs() < 1e-10);
        }
    }

    #[test]
    fn training_identifiability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tb = TrainingBlock::random_qpsk(64, 10, 1.0, &mut rng);
        let p = projector_complement(&tb.b).unwrap();
        for phi in [0.05, -0.05, 0.2, -0.2, 0.45, -0.45] {
            let r = &p * phase_rotation(phi, 64) * &tb.b;
            assert!(fro2(&r) > 1e-6, "phi={phi}");
        }
    }

    fn unit_user(phi: f64) -> UserChannel {
        let h = ComplexMatrix::from_element(1, 1, c64(1.0, 0.0));
        UserChannel { h, phi, theta_mean: PI / 2.0, ray_doas: vec![], ray_gains: vec![] }
    }

    #[test]
    fn training_reception_trivial_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tb = TrainingBlock::random_qpsk(8, 1, 1.0, &mut rng);
        let y = synthesize_training(&[unit_user(0.0)], std::slice::from_ref(&tb), 0.0, &mut rng);
        assert!(close(&y.y, &tb.b, 1e-14));

        let cfg = SystemConfig { antennas: 8, ..SystemConfig::default() };
        let mut u1 = draw_channel(&cfg, 1.0, &mut rng).unwrap();
        let mut u2 = draw_channel(&cfg, 2.0, &mut rng).unwrap();
        u1.phi = 0.1;
        u2.phi = -0.2;
        let t1 = TrainingBlock::random_qpsk(64, 10, 1.0, &mut rng);
        let t2 = TrainingBlock::random_qpsk(64, 10, 1.0, &mut rng);
        let both = training_signal(&[u1.clone(), u2.clone()], &[t1.clone(), t2.clone()], true);
        let a = training_signal(&[u1], &[t1], true);
        let b = training_signal(&[u2], &[t2], true);
        assert!(close(&both, &(a + b), 1e-12));
    }

    #[test]
    fn noise_variance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let users = vec![UserChannel { h: ComplexMatrix::zeros(2, 4), phi: 0.1, theta_mean: 1.0, ray_doas: vec![], ray_gains: vec![] }];
        let tb = TrainingBlock::random_qpsk(16, 2, 1.0, &mut rng);
        let var = 0.3;
        let mut acc = 0.0;
        for _ in 0..100 {
            let y = synthesize_training(&users, std::slice::from_ref(&tb), var, &mut rng);
            acc += fro2(&y.y) / 64.0;
        }
        assert!((acc / 100.0 / var - 1.0).abs() < 0.05);
    }

    #[test]
    fn data_block_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 16;
        let qam = Qam16::new(1.0);
        let h = channel_from_rays(&[vec![1.0], vec![1.3], vec![0.8]], &[vec![c64(0.5, 0.1)], vec![c64(-0.2, 0.3)], vec![c64(0.1, 0.0)]], 4, PI);
        let user = UserChannel { h: h.clone(), phi: 0.13, theta_mean: 1.0, ray_doas: vec![], ray_gains: vec![] };
        let d = DataBlock::random(n, &qam, &mut rng);
        let y = synthesize_data(&[user], std::slice::from_ref(&d), 2, 9, 0.0, &mut rng);
        let f = dft_matrix(n).unwrap();
        let fl = dft_columns(n, 3).unwrap();
        let eta = block_phase(0.13, 2, n, 9);
        let direct = (phase_rotation(0.13, n) * f.adjoint() * diag(&d.s) * fl * h).scale((n as f64).sqrt()) * eta;
        assert!(close(&y.y, &direct, 1e-12));
    }

    #[test]
    fn zero_cfo_reduces_to_synchronous_ofdm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = SystemConfig { antennas: 4, ..SystemConfig::default() };
        let u = draw_channel(&cfg, 1.2, &mut rng).unwrap();
        let d = DataBlock::random(64, &Qam16::new(1.0), &mut rng);
        let with = data_signal(std::slice::from_ref(&u), std::slice::from_ref(&d), 3, 9, true);
        let without = data_signal(&[u], &[d], 3, 9, false);
        assert!(close(&with, &without, 1e-12));
    }

    #[test]
    fn block_phase_step() {
        let (phi, n, ncp) = (0.1, 64, 9);
        let ratio = block_phase(phi, 4, n, ncp) / block_phase(phi, 3, n, ncp);
        assert!((ratio - cis(2.0 * PI * 73.0 * 0.1 / 64.0)).norm() < 1e-12);
        assert!((block_phase(0.0, 7, n, ncp) - c64(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn qam_roundtrip_and_power() {
        let qam = Qam16::new(1.0);
        let p: f64 = (0..16).map(|i| qam.point(i).norm_sqr()).sum::<f64>() / 16.0;
        assert!((p - 1.0).abs() < 1e-15);
        let qam2 = Qam16::new(2.5);
        let p2: f64 = (0..16).map(|i| qam2.point(i).norm_sqr()).sum::<f64>() / 16.0;
        assert!((p2 - 2.5).abs() < 1e-12);
        for i in 0..16 {
            assert_eq!(qam.decide(qam.point(i)), i);
        }
        let bits: Vec<bool> = (0..64).map(|i| (i * 7 + 3) % 5 < 2).collect();
        assert_eq!(qam.demap_bits(&qam.map_bits(&bits)), bits);
        // Gray property: horizontal neighbours differ in one bit
        for q in 0..4 {
            for a in 0..3 {
                let lvl = |k: usize| LEVELS.iter().position(|&l| l == [-3.0, -1.0, 1.0, 3.0][k]).unwrap();
                let i1 = (lvl(a) << 2) | q;
                let i2 = (lvl(a + 1) << 2) | q;
                assert_eq!((i1 ^ i2).count_ones(), 1);
            }
        }
    }

    #[test]
    fn qam_decision_regions() {
        let qam = Qam16::new(1.0);
        let r = 0.499 * qam.min_distance();
        for i in 0..16 {
            for k in 0..8 {
                let z = qam.point(i) + cis(k as f64 * PI / 4.0) * r;
                assert_eq!(qam.decide(z), i);
            }
        }
    }
}
