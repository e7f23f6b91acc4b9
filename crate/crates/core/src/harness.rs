//! Monte Carlo engine: paired realizations, scheme runners and metric
//! aggregation.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::theoretical_mse;
use crate::beamform::{detect_single_user, equivalent_channel, frequency_response, qualified_doas, select_beams, symbol_errors, QualifiedDoaSet};
use crate::channel::{draw_cfos, draw_channel, noise_variance_for, spatial_correlation, SystemConfig, UserChannel};
use crate::estimator::{BeamSpectrum, CfoDoaEstimate, FsBeam, UserBasis};
use crate::grouping::{classify_users, detect_group, estimate_noise_power, form_groups, group_beamformer, refine_cfos, stacked_training};
use crate::numerics::{fro2, orthonormal_basis, pseudo_inverse, unitary_dft_columns, ComplexMatrix};
use crate::signal::{data_signal, noise_matrix, phase_diagonal, short_training_signal, training_signal, DataBlock, Qam16, TrainingBlock};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FsBeam,
    FsBeamUg,
    SyncPerfectZf,
    SyncChestZf,
    SyncPerfectMrc,
    FsTimeDivI,
    FsTimeDivII,
    /// Diagnostic: no CFO compensation.
    NoSync,
    /// Diagnostic: FS-BEAM detection with the true CFOs.
    GenieCfo,
}

impl Scheme {
    pub const ALL: [Scheme; 9] = [
        Scheme::FsBeam,
        Scheme::FsBeamUg,
        Scheme::SyncPerfectZf,
        Scheme::SyncChestZf,
        Scheme::SyncPerfectMrc,
        Scheme::FsTimeDivI,
        Scheme::FsTimeDivII,
        Scheme::NoSync,
        Scheme::GenieCfo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::FsBeam => "fs_beam",
            Scheme::FsBeamUg => "fs_beam_ug",
            Scheme::SyncPerfectZf => "sync_perfect_zf",
            Scheme::SyncChestZf => "sync_chest_zf",
            Scheme::SyncPerfectMrc => "sync_perfect_mrc",
            Scheme::FsTimeDivI => "fs_time_div_i",
            Scheme::FsTimeDivII => "fs_time_div_ii",
            Scheme::NoSync => "no_sync",
            Scheme::GenieCfo => "genie_cfo",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Scheme::ALL
            .iter()
            .copied()
            .find(|x| x.name() == key)
            .ok_or_else(|| format!("unknown scheme '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoaMode {
    /// Mean DOAs in radians, one per user.
    Fixed(Vec<f64>),
    /// Each user uniform in [30, 60] or [120, 150] degrees, sector chosen at random.
    RandomSectors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnrMode {
    /// `sigma_s^2 / sigma_n^2` per antenna.
    #[default]
    PerAntenna,
    /// `M sigma_s^2 / sigma_n^2`.
    Overall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub cfg: SystemConfig,
    pub doa_mode: DoaMode,
    pub snr_points: Vec<f64>,
    pub trials: usize,
    pub schemes: Vec<Scheme>,
    pub data_blocks: usize,
    pub snr_mode: SnrMode,
}

impl Scenario {
    /// Default geometry: `K` users spread over {30, 60, 120, 150} degrees.
    pub fn new(name: &str, cfg: SystemConfig) -> Self {
        let base = [30.0f64, 60.0, 120.0, 150.0];
        let doas = (0..cfg.users).map(|k| base[k % 4].to_radians()).collect();
        Self {
            name: name.to_string(),
            snr_points: vec![cfg.snr_db],
            cfg,
            doa_mode: DoaMode::Fixed(doas),
            trials: 100,
            schemes: vec![Scheme::FsBeam],
            data_blocks: 1,
            snr_mode: SnrMode::PerAntenna,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.cfg.validate().map_err(HarnessError::Invalid)?;
        if self.trials == 0 {
            return Err(HarnessError::Invalid("trials: must be at least 1".into()));
        }
        if self.snr_points.is_empty() {
            return Err(HarnessError::Invalid("snr_points: empty".into()));
        }
        if self.schemes.is_empty() {
            return Err(HarnessError::Invalid("schemes: empty".into()));
        }
        if let DoaMode::Fixed(d) = &self.doa_mode {
            if d.len() != self.cfg.users {
                return Err(HarnessError::Invalid(format!("doas: {} entries for K={}", d.len(), self.cfg.users)));
            }
            for &t in d {
                if t - self.cfg.angular_spread <= 0.0 || t + self.cfg.angular_spread >= PI {
                    return Err(HarnessError::Invalid(format!("doas: region around {:.2} deg leaves (0, 180)", t.to_degrees())));
                }
            }
        }
        Ok(())
    }

    pub fn noise_variance(&self, snr_db: f64) -> f64 {
        let base = noise_variance_for(self.cfg.signal_power, snr_db);
        match self.snr_mode {
            SnrMode::PerAntenna => base,
            SnrMode::Overall => base * self.cfg.antennas as f64,
        }
    }
}

/// Stable child seed for one (SNR point, trial) pair.
pub fn child_seed(master: u64, snr_index: usize, trial: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ snr_index as u64) ^ (trial as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Everything drawn for one trial. All schemes consume the same draws.
#[derive(Debug, Clone)]
pub struct Realization {
    pub users: Vec<UserChannel>,
    pub training: Vec<TrainingBlock>,
    pub short_training: Vec<TrainingBlock>,
    /// `data[b][k]`: block `b` of user `k`.
    pub data: Vec<Vec<DataBlock>>,
    pub sigma_n2: f64,
    pub y_train: ComplexMatrix,
    /// Same channels and noise with every CFO set to zero.
    pub y_train_sync: ComplexMatrix,
    /// Per-user time-division short blocks (`N_s x M`).
    pub y_short: Vec<ComplexMatrix>,
    pub y_data: Vec<ComplexMatrix>,
    pub y_data_sync: Vec<ComplexMatrix>,
    pub checksum: u64,
}

fn checksum(mats: &[&ComplexMatrix]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in mats {
        for z in m.iter() {
            for v in [z.re.to_bits(), z.im.to_bits()] {
                h ^= v;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }
    h
}

pub fn draw_realization(sc: &Scenario, sigma_n2: f64, rng: &mut ChaCha8Rng) -> Realization {
    let cfg = &sc.cfg;
    let k = cfg.users;
    let doas: Vec<f64> = match &sc.doa_mode {
        DoaMode::Fixed(d) => d.clone(),
        DoaMode::RandomSectors => (0..k)
            .map(|_| {
                let lo = if rng.random::<bool>() { 30.0 } else { 120.0 };
                (lo + 30.0 * rng.random::<f64>()).to_radians()
            })
            .collect(),
    };
    let cfos = draw_cfos(k, cfg.phi_max, rng).expect("validated phi_max");
    let users: Vec<UserChannel> = doas
        .iter()
        .zip(&cfos)
        .map(|(&d, &phi)| {
            let mut u = draw_channel(cfg, d, rng).expect("validated geometry");
            u.phi = phi;
            u
        })
        .collect();
    let (n, m, l) = (cfg.subcarriers, cfg.antennas, cfg.taps);
    let training: Vec<TrainingBlock> = (0..k).map(|_| TrainingBlock::random_qpsk(n, l, cfg.signal_power, rng)).collect();
    let short_training: Vec<TrainingBlock> = (0..k).map(|_| TrainingBlock::random_qpsk(cfg.short_training_len, l, cfg.signal_power, rng)).collect();
    let qam = Qam16::new(cfg.signal_power);
    let data: Vec<Vec<DataBlock>> = (0..sc.data_blocks).map(|_| (0..k).map(|_| DataBlock::random(n, &qam, rng)).collect()).collect();

    let noise_train = noise_matrix(n, m, sigma_n2, rng);
    let noise_data: Vec<ComplexMatrix> = (0..sc.data_blocks).map(|_| noise_matrix(n, m, sigma_n2, rng)).collect();
    let noise_short: Vec<ComplexMatrix> = (0..k).map(|_| noise_matrix(cfg.short_training_len, m, sigma_n2, rng)).collect();

    let y_train = training_signal(&users, &training, true) + &noise_train;
    let y_train_sync = training_signal(&users, &training, false) + &noise_train;
    let y_short = (0..k)
        .map(|i| short_training_signal(&users[i..=i], &short_training[i..=i], n, true) + &noise_short[i])
        .collect();
    let mut y_data = Vec::with_capacity(sc.data_blocks);
    let mut y_data_sync = Vec::with_capacity(sc.data_blocks);
    for (b, blocks) in data.iter().enumerate() {
        let idx = cfg.first_data_block + b;
        y_data.push(data_signal(&users, blocks, idx, cfg.cp_len, true) + &noise_data[b]);
        y_data_sync.push(data_signal(&users, blocks, idx, cfg.cp_len, false) + &noise_data[b]);
    }
    let mut all: Vec<&ComplexMatrix> = vec![&noise_train];
    all.extend(noise_data.iter());
    all.push(&y_train);
    let checksum = checksum(&all);
    Realization { users, training, short_training, data, sigma_n2, y_train, y_train_sync, y_short, y_data, y_data_sync, checksum }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SchemeOutcome {
    /// Per-user estimated CFO, when the scheme estimates one.
    pub phi_hat: Option<Vec<f64>>,
    /// Per-user squared CFO error.
    pub cfo_sq_err: Option<Vec<f64>>,
    /// Per-iteration per-user CFO estimates (FS-BEAM family).
    pub iteration_phis: Option<Vec<Vec<f64>>>,
    /// Per-user symbol errors over all data blocks.
    pub symbol_errors: Option<Vec<usize>>,
    pub symbols_per_user: usize,
    pub flags: Vec<String>,
    /// Checksum of the realization the scheme consumed.
    pub realization: u64,
    pub elapsed_s: f64,
}

impl PartialEq for SchemeOutcome {
    fn eq(&self, o: &Self) -> bool {
        // timing is excluded
        self.phi_hat == o.phi_hat
            && self.cfo_sq_err == o.cfo_sq_err
            && self.iteration_phis == o.iteration_phis
            && self.symbol_errors == o.symbol_errors
            && self.symbols_per_user == o.symbols_per_user
            && self.flags == o.flags
            && self.realization == o.realization
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub snr_db: f64,
    pub trial: usize,
    pub seed: u64,
    pub true_phis: Vec<f64>,
    pub outcomes: Vec<(Scheme, SchemeOutcome)>,
}

impl TrialResult {
    pub fn outcome(&self, s: Scheme) -> Option<&SchemeOutcome> {
        self.outcomes.iter().find(|(x, _)| *x == s).map(|(_, o)| o)
    }
}

/// Shared per-scenario state (grids and neighbor tables).
pub struct Engine {
    pub scenario: Scenario,
    pub est: FsBeam,
    qam: Qam16,
}

struct FsBeamPass {
    estimates: Vec<CfoDoaEstimate>,
    qualified: Vec<QualifiedDoaSet>,
    spec: BeamSpectrum,
    flags: Vec<String>,
}

impl Engine {
    pub fn new(scenario: Scenario) -> Result<Self, HarnessError> {
        scenario.validate()?;
        let est = FsBeam::new(&scenario.cfg);
        let qam = Qam16::new(scenario.cfg.signal_power);
        Ok(Self { scenario, est, qam })
    }

    pub fn run_trial(&self, snr_db: f64, seed: u64, trial: usize) -> TrialResult {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma_n2 = self.scenario.noise_variance(snr_db);
        let real = draw_realization(&self.scenario, sigma_n2, &mut rng);
        let outcomes = self
            .scenario
            .schemes
            .iter()
            .map(|&s| {
                let t0 = Instant::now();
                let mut out = self.run_scheme(s, &real);
                out.realization = real.checksum;
                out.elapsed_s = t0.elapsed().as_secs_f64();
                (s, out)
            })
            .collect();
        TrialResult { snr_db, trial, seed, true_phis: real.users.iter().map(|u| u.phi).collect(), outcomes }
    }

    pub fn run_scheme(&self, scheme: Scheme, real: &Realization) -> SchemeOutcome {
        match scheme {
            Scheme::FsBeam => self.fs_beam(real, CfoSource::Estimate),
            Scheme::NoSync => self.fs_beam(real, CfoSource::Zero),
            Scheme::GenieCfo => self.fs_beam(real, CfoSource::Truth),
            Scheme::FsBeamUg => self.fs_beam_ug(real),
            Scheme::SyncPerfectZf => self.sync_zf(real, false),
            Scheme::SyncChestZf => self.sync_zf(real, true),
            Scheme::SyncPerfectMrc => self.sync_mrc(real),
            Scheme::FsTimeDivI => self.time_div_i(real),
            Scheme::FsTimeDivII => self.time_div_ii(real),
        }
    }

    fn errors(&self, real: &Realization, phis: &[f64]) -> Vec<f64> {
        real.users.iter().zip(phis).map(|(u, p)| (p - u.phi).powi(2)).collect()
    }

    fn fs_beam_pass(&self, real: &Realization, source: CfoSource) -> FsBeamPass {
        let cfg = &self.scenario.cfg;
        let spec = self.est.spectrum(&real.y_train).expect("grid validated");
        let mut flags = Vec::new();
        let mut estimates = Vec::with_capacity(cfg.users);
        let mut qualified = Vec::with_capacity(cfg.users);
        for (k, tr) in real.training.iter().enumerate() {
            let basis = UserBasis::new(&tr.b).expect("QPSK training has full rank");
            let e = match source {
                CfoSource::Estimate => self.est.estimate_user(&spec, &basis),
                CfoSource::Zero => self.est.estimate_from(&spec, &basis, 0.0, 0).map(|mut e| {
                    e.bin = self.est.doa_search(&spec, &basis, 0.0).unwrap_or(e.bin);
                    e.theta_hat = self.est.grid.theta(e.bin).unwrap_or(f64::NAN);
                    e
                }),
                CfoSource::Truth => {
                    let phi = real.users[k].phi;
                    self.est.doa_search(&spec, &basis, phi).map(|bin| CfoDoaEstimate {
                        phi_hat: phi,
                        theta_hat: self.est.grid.theta(bin).unwrap(),
                        bin,
                        trace: vec![],
                        flags: Default::default(),
                    })
                }
            };
            let e = e.expect("neighbor sets are nonempty for a positive spread");
            if e.flags.clamped {
                flags.push(format!("user{k}:cfo_clamped"));
            }
            if e.flags.degenerate_quadratic {
                flags.push(format!("user{k}:degenerate_quadratic"));
            }
            let stats = self.est.bin_stats(&spec, &basis, e.phi_hat);
            let q = qualified_doas(&self.est, &stats, k, e.theta_hat, cfg.qualify_level());
            if q.degraded {
                flags.push(format!("user{k}:degraded"));
            }
            estimates.push(e);
            qualified.push(q);
        }
        FsBeamPass { estimates, qualified, spec, flags }
    }

    fn data_spectra(&self, real: &Realization) -> Vec<BeamSpectrum> {
        real.y_data.iter().map(|y| self.est.spectrum(y).expect("grid validated")).collect()
    }

    fn detect_fs_beam_user(&self, real: &Realization, pass: &FsBeamPass, data_specs: &[BeamSpectrum], k: usize) -> usize {
        let cfg = &self.scenario.cfg;
        let bins = &pass.qualified[k].bins;
        let phi = pass.estimates[k].phi_hat;
        let h_eq = equivalent_channel(&select_beams(&pass.spec, bins), &real.training[k].b, phi);
        data_specs
            .iter()
            .enumerate()
            .map(|(b, spec)| {
                let yw = select_beams(spec, bins);
                let dec = detect_single_user(&yw, &h_eq, phi, cfg.first_data_block + b, cfg.cp_len, &self.qam);
                symbol_errors(&dec, &real.data[b][k].indices)
            })
            .sum()
    }

    fn fs_beam(&self, real: &Realization, source: CfoSource) -> SchemeOutcome {
        let pass = self.fs_beam_pass(real, source);
        let data_specs = self.data_spectra(real);
        let phis: Vec<f64> = pass.estimates.iter().map(|e| e.phi_hat).collect();
        let errs = (0..phis.len()).map(|k| self.detect_fs_beam_user(real, &pass, &data_specs, k)).collect();
        let iteration_phis = (source == CfoSource::Estimate).then(|| {
            (1..=self.est.iterations)
                .map(|n| pass.estimates.iter().map(|e| e.phi_at_iteration(n)).collect())
                .collect()
        });
        SchemeOutcome {
            cfo_sq_err: Some(self.errors(real, &phis)),
            phi_hat: Some(phis),
            iteration_phis,
            symbol_errors: Some(errs),
            symbols_per_user: self.symbols_per_user(),
            flags: pass.flags,
            ..Default::default()
        }
    }

    fn symbols_per_user(&self) -> usize {
        self.scenario.cfg.subcarriers * self.scenario.data_blocks
    }

    fn fs_beam_ug(&self, real: &Realization) -> SchemeOutcome {
        let cfg = &self.scenario.cfg;
        let pass = self.fs_beam_pass(real, CfoSource::Estimate);
        let data_specs = self.data_spectra(real);
        let mut flags = pass.flags.clone();
        let mut phis: Vec<f64> = pass.estimates.iter().map(|e| e.phi_hat).collect();
        let mut errs: Vec<Option<usize>> = vec![None; cfg.users];

        let noise_hat = estimate_noise_power(&pass.spec, &self.est.grid);
        let classes = classify_users(&pass.qualified, fro2(&real.y_train), noise_hat, cfg.critical_threshold);
        let angles: Vec<Vec<f64>> = pass
            .qualified
            .iter()
            .map(|q| q.bins.iter().map(|&b| self.est.grid.theta(b).unwrap()).collect())
            .collect();
        let groups = match form_groups(&classes, &angles, cfg.guard, cfg.distance_rule, cfg.taps, cfg.subcarriers) {
            Ok(g) => g.groups,
            Err(e) => {
                flags.push(format!("grouping_fallback:{e}"));
                Vec::new()
            }
        };
        for group in &groups {
            let members_angles: Vec<f64> = group.iter().flat_map(|&k| angles[k].iter().copied()).collect();
            let bf = group_beamformer(&members_angles, group.len() * cfg.taps, cfg.antennas, cfg.chi);
            if bf.deduplicated {
                flags.push(format!("group{group:?}:single_direction"));
            }
            let y_grp = &real.y_train * &bf.w;
            let trainings: Vec<&ComplexMatrix> = group.iter().map(|&k| &real.training[k].b).collect();
            let coarse: Vec<f64> = group.iter().map(|&k| phis[k]).collect();
            let refined = refine_cfos(&coarse, &y_grp, &trainings, cfg.refine_passes);
            if refined.singular {
                flags.push(format!("group{group:?}:refine_singular"));
            }
            if refined.rejected {
                flags.push(format!("group{group:?}:refine_rejected"));
            }
            for (&k, &p) in group.iter().zip(&refined.phis) {
                phis[k] = p;
            }
            let bb = stacked_training(&refined.phis, &trainings);
            let h_eq = pseudo_inverse(&bb) * &y_grp;
            let mut group_errs = vec![0usize; group.len()];
            for (b, y) in real.y_data.iter().enumerate() {
                let yd = y * &bf.w;
                let det = detect_group(&yd, &refined.phis, &h_eq, cfg.taps, cfg.first_data_block + b, cfg.cp_len, &self.qam);
                if det.rank_deficient {
                    flags.push(format!("group{group:?}:rank_deficient"));
                }
                for (i, &k) in group.iter().enumerate() {
                    group_errs[i] += symbol_errors(&det.symbols[i], &real.data[b][k].indices);
                }
            }
            for (i, &k) in group.iter().enumerate() {
                errs[k] = Some(group_errs[i]);
            }
        }
        let errs: Vec<usize> = (0..cfg.users)
            .map(|k| errs[k].unwrap_or_else(|| self.detect_fs_beam_user(real, &pass, &data_specs, k)))
            .collect();
        SchemeOutcome {
            cfo_sq_err: Some(self.errors(real, &phis)),
            phi_hat: Some(phis),
            symbol_errors: Some(errs),
            symbols_per_user: self.symbols_per_user(),
            flags,
            ..Default::default()
        }
    }

    /// Per-subcarrier ZF on synchronized blocks with true or LS-estimated taps.
    fn sync_zf(&self, real: &Realization, estimated: bool) -> SchemeOutcome {
        let cfg = &self.scenario.cfg;
        let (n, k, l) = (cfg.subcarriers, cfg.users, cfg.taps);
        let taps: Vec<ComplexMatrix> = if estimated {
            let stacked: Vec<&ComplexMatrix> = real.training.iter().map(|t| &t.b).collect();
            let bb = stacked_training(&vec![0.0; k], &stacked);
            let h = pseudo_inverse(&bb) * &real.y_train_sync;
            (0..k).map(|i| h.rows(i * l, l).into_owned()).collect()
        } else {
            real.users.iter().map(|u| u.h.clone()).collect()
        };
        let resp: Vec<ComplexMatrix> = taps.iter().map(|h| frequency_response(h, n)).collect();
        let mut errs = vec![0usize; k];
        let mut flags = Vec::new();
        for (b, y) in real.y_data_sync.iter().enumerate() {
            let yf = unitary_dft_columns(y);
            for t in 0..n {
                let g = DMatrix::from_fn(cfg.antennas, k, |m, u| resp[u][(t, m)]);
                let rhs = g.adjoint() * yf.row(t).transpose();
                let sol = (g.adjoint() * &g).lu().solve(&rhs);
                for u in 0..k {
                    let ok = sol.as_ref().map(|s| self.qam.decide(s[u]) == real.data[b][u].indices[t]).unwrap_or(false);
                    errs[u] += (!ok) as usize;
                }
                if sol.is_none() && !flags.iter().any(|f| f == "singular_subcarrier") {
                    flags.push("singular_subcarrier".into());
                }
            }
        }
        SchemeOutcome { symbol_errors: Some(errs), symbols_per_user: self.symbols_per_user(), flags, ..Default::default() }
    }

    fn sync_mrc(&self, real: &Realization) -> SchemeOutcome {
        let cfg = &self.scenario.cfg;
        let n = cfg.subcarriers;
        let resp: Vec<ComplexMatrix> = real.users.iter().map(|u| frequency_response(&u.h, n)).collect();
        let mut errs = vec![0usize; cfg.users];
        for (b, y) in real.y_data_sync.iter().enumerate() {
            let yf = unitary_dft_columns(y);
            for (u, g) in resp.iter().enumerate() {
                for t in 0..n {
                    let mut num = Complex64::default();
                    let mut den = 0.0;
                    for m in 0..cfg.antennas {
                        num += g[(t, m)].conj() * yf[(t, m)];
                        den += g[(t, m)].norm_sqr();
                    }
                    let ok = den > 0.0 && self.qam.decide(num / den) == real.data[b][u].indices[t];
                    errs[u] += (!ok) as usize;
                }
            }
        }
        SchemeOutcome { symbol_errors: Some(errs), symbols_per_user: self.symbols_per_user(), ..Default::default() }
    }

    /// CFO only, from each user's own short block over the full array.
    fn time_div_i(&self, real: &Realization) -> SchemeOutcome {
        let n = self.scenario.cfg.subcarriers;
        let phis: Vec<f64> = real
            .y_short
            .iter()
            .zip(&real.short_training)
            .map(|(y, t)| {
                let q = orthonormal_basis(&t.b).expect("QPSK training has full rank");
                scan_cfo(y, &q, n, SCAN_STEP)
            })
            .collect();
        SchemeOutcome { cfo_sq_err: Some(self.errors(real, &phis)), phi_hat: Some(phis), ..Default::default() }
    }

    /// DOA from the short block, then single-user sync on the beamformed
    /// long block using every grid direction within the spread.
    fn time_div_ii(&self, real: &Realization) -> SchemeOutcome {
        let cfg = &self.scenario.cfg;
        let spec = self.est.spectrum(&real.y_train).expect("grid validated");
        let data_specs = self.data_spectra(real);
        let mut phis = Vec::with_capacity(cfg.users);
        let mut errs = Vec::with_capacity(cfg.users);
        for k in 0..cfg.users {
            let short_spec = self.est.spectrum(&real.y_short[k]).expect("grid validated");
            let bin = self
                .est
                .grid
                .visible()
                .iter()
                .map(|&b| (b, self.est.bin_neighbors(b).iter().map(|&i| short_spec.power[i]).sum::<f64>()))
                .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
                .map(|x| x.0)
                .expect("visible grid");
            let bins = self.est.bin_neighbors(bin).to_vec();
            let yw = select_beams(&spec, &bins);
            let q = orthonormal_basis(&real.training[k].b).expect("QPSK training has full rank");
            let phi = scan_cfo(&yw, &q, cfg.subcarriers, SCAN_STEP);
            let h_eq = equivalent_channel(&yw, &real.training[k].b, phi);
            let e: usize = data_specs
                .iter()
                .enumerate()
                .map(|(b, s)| {
                    let dec = detect_single_user(&select_beams(s, &bins), &h_eq, phi, cfg.first_data_block + b, cfg.cp_len, &self.qam);
                    symbol_errors(&dec, &real.data[b][k].indices)
                })
                .sum();
            phis.push(phi);
            errs.push(e);
        }
        SchemeOutcome {
            cfo_sq_err: Some(self.errors(real, &phis)),
            phi_hat: Some(phis),
            symbol_errors: Some(errs),
            symbols_per_user: self.symbols_per_user(),
            ..Default::default()
        }
    }

    /// All trials of one SNR point, in trial order.
    pub fn run_point(&self, snr_index: usize, master_seed: u64) -> Vec<TrialResult> {
        let snr = self.scenario.snr_points[snr_index];
        (0..self.scenario.trials)
            .into_par_iter()
            .map(|t| self.run_trial(snr, child_seed(master_seed, snr_index, t), t))
            .collect()
    }

    pub fn run_all(&self, master_seed: u64) -> Vec<Vec<TrialResult>> {
        (0..self.scenario.snr_points.len()).map(|i| self.run_point(i, master_seed)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CfoSource {
    Estimate,
    Zero,
    Truth,
}

/// Grid step of the single-user CFO scan.
pub const SCAN_STEP: f64 = 1e-3;

/// Single-user CFO by maximizing the captured energy
/// `||Q^H E^H(phi) Y||^2` over `[-0.5, 0.5)`, then one parabolic refinement.
/// Rows of `y` are samples of an `n_ref`-point block timing.
pub fn scan_cfo(y: &ComplexMatrix, q: &ComplexMatrix, n_ref: usize, step: f64) -> f64 {
    let len = y.nrows();
    let r = y * y.adjoint();
    let p = q * q.adjoint();
    // captured(phi) = Re sum_d c_d exp(-j 2 pi d phi / N), d = n - m
    let mut lags = vec![Complex64::default(); 2 * len - 1];
    for a in 0..len {
        for b in 0..len {
            lags[a + len - 1 - b] += r[(a, b)] * p[(b, a)];
        }
    }
    let value = |phi: f64| -> f64 {
        let w = -2.0 * PI * phi / n_ref as f64;
        lags.iter()
            .enumerate()
            .map(|(i, c)| (c * crate::numerics::cis(w * (i as f64 - (len as f64 - 1.0)))).re)
            .sum()
    };
    let count = (1.0 / step).round() as usize;
    let grid: Vec<f64> = (0..count).map(|i| -0.5 + i as f64 * step).collect();
    let vals: Vec<f64> = grid.iter().map(|&g| value(g)).collect();
    let best = (0..count).max_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(b.cmp(&a))).unwrap_or(0);
    if best == 0 || best + 1 == count {
        return grid[best];
    }
    let (l, c, rr) = (vals[best - 1], vals[best], vals[best + 1]);
    let den = l - 2.0 * c + rr;
    let off = if den < 0.0 { 0.5 * (l - rr) / den } else { 0.0 };
    (grid[best] + off.clamp(-1.0, 1.0) * step).clamp(-0.5, 0.5)
}

/// One aggregated metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub scheme: String,
    pub snr_db: f64,
    pub metric: String,
    pub value: f64,
    pub ci95: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn get(&self, scheme: Scheme, snr_db: f64, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.scheme == scheme.name() && r.snr_db == snr_db && r.metric == metric)
    }
}

/// Mean and normal-approximation 95% half-width.
pub fn mean_ci(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Aggregate trials of one SNR point into rows. CFO MSE averages over
/// users and trials; SER pools symbol errors, with the interval taken over
/// per-trial SER values.
pub fn aggregate(scenario: &str, trials: &[TrialResult], schemes: &[Scheme], iterations: bool) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let Some(first) = trials.first() else { return rows };
    let snr = first.snr_db;
    let row = |scheme: Scheme, metric: String, (value, ci95): (f64, f64)| MetricRow {
        scenario: scenario.to_string(),
        scheme: scheme.name().to_string(),
        snr_db: snr,
        metric,
        value,
        ci95,
        trials: trials.len(),
    };
    for &s in schemes {
        let outs: Vec<&SchemeOutcome> = trials.iter().filter_map(|t| t.outcome(s)).collect();
        if outs.is_empty() {
            continue;
        }
        if outs.iter().all(|o| o.cfo_sq_err.is_some()) {
            let samples: Vec<f64> = outs.iter().flat_map(|o| o.cfo_sq_err.clone().unwrap()).collect();
            rows.push(row(s, "cfo_mse".into(), mean_ci(&samples)));
        }
        if outs.iter().all(|o| o.symbol_errors.is_some()) {
            let per_trial: Vec<f64> = outs
                .iter()
                .map(|o| {
                    let e = o.symbol_errors.as_ref().unwrap();
                    e.iter().sum::<usize>() as f64 / (e.len() * o.symbols_per_user).max(1) as f64
                })
                .collect();
            let total_err: usize = outs.iter().map(|o| o.symbol_errors.as_ref().unwrap().iter().sum::<usize>()).sum();
            let total_sym: usize = outs.iter().map(|o| o.symbol_errors.as_ref().unwrap().len() * o.symbols_per_user).sum();
            let (_, ci) = mean_ci(&per_trial);
            rows.push(row(s, "ser".into(), (total_err as f64 / total_sym.max(1) as f64, ci)));
        }
        if iterations && outs.iter().all(|o| o.iteration_phis.is_some()) {
            let n_iter = outs[0].iteration_phis.as_ref().unwrap().len();
            for it in 0..n_iter {
                let samples: Vec<f64> = trials
                    .iter()
                    .filter_map(|t| t.outcome(s).map(|o| (t, o)))
                    .flat_map(|(t, o)| {
                        o.iteration_phis.as_ref().unwrap()[it].iter().zip(&t.true_phis).map(|(a, b)| (a - b).powi(2)).collect::<Vec<_>>()
                    })
                    .collect();
                rows.push(row(s, format!("cfo_mse_iter_{}", it + 1), mean_ci(&samples)));
            }
        }
    }
    rows
}

/// Run every SNR point of a scenario. `threads = None` uses the global pool.
pub fn run_monte_carlo(scenario: &Scenario, master_seed: u64, threads: Option<usize>, iterations: bool) -> Result<(MetricsTable, Vec<Vec<TrialResult>>), HarnessError> {
    let engine = Engine::new(scenario.clone())?;
    let run = || engine.run_all(master_seed);
    let results = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut table = MetricsTable::default();
    for point in &results {
        table.rows.extend(aggregate(&scenario.name, point, &scenario.schemes, iterations));
    }
    Ok((table, results))
}

/// Mean theoretical CFO MSE over the users of a fixed-DOA scenario, using
/// `draws` random QPSK trainings per user. Correlation matrices are cached
/// per distinct DOA.
pub fn theoretical_cfo_mse(scenario: &Scenario, snr_db: f64, draws: usize, seed: u64) -> Option<f64> {
    let DoaMode::Fixed(doas) = &scenario.doa_mode else { return None };
    let cfg = &scenario.cfg;
    let sigma_n2 = scenario.noise_variance(snr_db);
    let amps: Vec<f64> = cfg.pdp.iter().map(|v| v.sqrt()).collect();
    let mut cache: HashMap<u64, ComplexMatrix> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut count = 0usize;
    for &theta in doas {
        let r = cache
            .entry(theta.to_bits())
            .or_insert_with(|| spatial_correlation(theta, cfg.angular_spread, cfg.chi, cfg.antennas))
            .clone();
        for _ in 0..draws.max(1) {
            let t = TrainingBlock::random_qpsk(cfg.subcarriers, cfg.taps, cfg.signal_power, &mut rng);
            acc += theoretical_mse(&r, &t.b, &amps, sigma_n2).ok()?;
            count += 1;
        }
    }
    Some(acc / count as f64)
}

/// Checks that two blocks differ only through the users' CFO rotation.
pub fn sync_pair_consistent(real: &Realization) -> bool {
    let with = training_signal(&real.users, &real.training, true);
    let without = training_signal(&real.users, &real.training, false);
    let d1 = &real.y_train - &real.y_train_sync;
    let d2 = with - without;
    fro2(&(d1 - d2)) <= 1e-20 * (1.0 + fro2(&real.y_train))
}

/// Rotation helper shared with tests: `E^H(phi) Y`.
pub fn derotate(y: &ComplexMatrix, phi: f64) -> ComplexMatrix {
    let n = y.nrows();
    let rot = phase_diagonal(-phi, n, n);
    let mut out = y.clone();
    for j in 0..out.ncols() {
        for (t, r) in rot.iter().enumerate() {
            out[(t, j)] *= r;
        }
    }
    out
}
