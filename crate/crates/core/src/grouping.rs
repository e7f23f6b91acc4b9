//! User grouping for overlapping DOA regions: critical-user detection,
//! angle-domain clustering, group beamforming, joint CFO refinement by
//! eigen-perturbation and group zero-forcing detection.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamform::{frequency_response, QualifiedDoaSet};
use crate::channel::{steering_vector, DistanceRule};
use crate::estimator::{BeamSpectrum, DoaGrid};
use crate::numerics::{eig_hermitian, fro2, inner, projector_complement, pseudo_inverse, unitary_dft_columns, ComplexMatrix, NumericsError};
use crate::signal::{block_phase, phase_diagonal, Qam16};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupingError {
    #[error("group {members:?} needs {needed} training dimensions but only {available} subcarriers exist")]
    Infeasible { members: Vec<usize>, needed: usize, available: usize },
    #[error("group training matrix lost rank")]
    RankCollapse,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Minimum beam power over the visible grid, in raw units (`N M sigma_n^2`
/// for white noise).
pub fn estimate_noise_power(spec: &BeamSpectrum, grid: &DoaGrid) -> f64 {
    grid.visible().iter().map(|&b| spec.power[b]).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserClass {
    pub user: usize,
    pub rho: f64,
    pub critical: bool,
}

/// Flag users whose summed beam metric falls below `rho_th` times the
/// expected per-user SNR `(||Y||^2 / K) / sigma_hat`.
pub fn classify_users(qualified: &[QualifiedDoaSet], total_energy: f64, noise_hat: f64, rho_th: f64) -> Vec<UserClass> {
    let k = qualified.len().max(1) as f64;
    let rho_ex = if noise_hat > 0.0 { (total_energy / k) / noise_hat } else { f64::INFINITY };
    qualified
        .iter()
        .map(|q| {
            let rho: f64 = q.metrics.iter().sum();
            UserClass { user: q.user, rho, critical: rho < rho_th * rho_ex }
        })
        .collect()
}

/// Partition of the users into jointly processed groups and singletons.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupAssignment {
    /// Groups with at least two members, members ascending.
    pub groups: Vec<Vec<usize>>,
    /// Users left to single-user processing, ascending.
    pub singletons: Vec<usize>,
}

impl GroupAssignment {
    pub fn group_of(&self, user: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&user))
    }
}

/// Angular distance between two sets of directions.
pub fn set_distance(a: &[f64], b: &[f64], rule: DistanceRule) -> f64 {
    let pairs = a.iter().flat_map(|x| b.iter().map(move |y| (x - y).abs()));
    match rule {
        DistanceRule::Max => pairs.fold(0.0, f64::max),
        DistanceRule::Min => pairs.fold(f64::INFINITY, f64::min),
    }
}

/// Two-step grouping. `angles[k]` holds user `k`'s qualified directions.
/// Critical users closer than `guard` are merged transitively; a
/// non-critical user joins the nearest group with a critical member closer
/// than `guard`. Groups with `kappa L >= N` are rejected.
pub fn form_groups(
    classes: &[UserClass],
    angles: &[Vec<f64>],
    guard: f64,
    rule: DistanceRule,
    taps: usize,
    subcarriers: usize,
) -> Result<GroupAssignment, GroupingError> {
    let k = classes.len();
    assert_eq!(angles.len(), k);
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let critical: Vec<usize> = classes.iter().filter(|c| c.critical).map(|c| c.user).collect();
    for (i, &a) in critical.iter().enumerate() {
        for &b in &critical[i + 1..] {
            if set_distance(&angles[a], &angles[b], rule) < guard {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &c in &critical {
        let r = find(&mut parent, c);
        members[r].push(c);
    }
    // step two: absorb non-critical users into the closest group
    let seeds: Vec<Vec<usize>> = members.iter().filter(|m| !m.is_empty()).cloned().collect();
    let mut groups = seeds.clone();
    let mut singletons = Vec::new();
    for c in classes.iter().filter(|c| !c.critical) {
        let best = seeds
            .iter()
            .enumerate()
            .filter_map(|(gi, g)| {
                let d = g
                    .iter()
                    .map(|&m| set_distance(&angles[c.user], &angles[m], rule))
                    .fold(f64::INFINITY, f64::min);
                (d < guard).then_some((gi, d))
            })
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        match best {
            Some((gi, _)) => groups[gi].push(c.user),
            None => singletons.push(c.user),
        }
    }
    let mut out = GroupAssignment::default();
    for mut g in groups {
        g.sort_unstable();
        if g.len() == 1 {
            singletons.push(g[0]);
        } else {
            if g.len() * taps >= subcarriers {
                return Err(GroupingError::Infeasible { needed: g.len() * taps, available: subcarriers, members: g });
            }
            out.groups.push(g);
        }
    }
    singletons.sort_unstable();
    out.groups.sort();
    out.singletons = singletons;
    Ok(out)
}

/// Receive beamformer of a group: `Q` conjugate steering vectors at
/// uniformly spaced directions across the members' qualified span.
#[derive(Debug, Clone)]
pub struct GroupBeamformer {
    pub w: ComplexMatrix,
    pub directions: Vec<f64>,
    /// The span collapsed to a single direction and `Q` was reduced to 1.
    pub deduplicated: bool,
}

pub fn group_beamformer(angles: &[f64], q: usize, antennas: usize, chi: f64) -> GroupBeamformer {
    let lo = angles.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (directions, deduplicated) = if hi - lo <= 0.0 || q <= 1 {
        (vec![lo], q > 1)
    } else {
        ((0..q).map(|i| lo + i as f64 * (hi - lo) / (q - 1) as f64).collect(), false)
    };
    let mut w = ComplexMatrix::zeros(antennas, directions.len());
    for (c, &psi) in directions.iter().enumerate() {
        let a = steering_vector(psi, antennas, chi);
        for m in 0..antennas {
            w[(m, c)] = a[m].conj();
        }
    }
    GroupBeamformer { w, directions, deduplicated }
}

/// Stacked rotated trainings `[E(phi_1) B_1, ..., E(phi_k) B_k]`.
pub fn stacked_training(phis: &[f64], trainings: &[&ComplexMatrix]) -> ComplexMatrix {
    let n = trainings[0].nrows();
    let total: usize = trainings.iter().map(|b| b.ncols()).sum();
    let mut out = ComplexMatrix::zeros(n, total);
    let mut col = 0;
    for (&phi, b) in phis.iter().zip(trainings) {
        let rot = phase_diagonal(phi, n, n);
        for j in 0..b.ncols() {
            for t in 0..n {
                out[(t, col)] = rot[t] * b[(t, j)];
            }
            col += 1;
        }
    }
    out
}

/// `||P_perp(phi) Y_grp Y_grp^H||_F^2`.
pub fn group_cost(phis: &[f64], y_grp: &ComplexMatrix, trainings: &[&ComplexMatrix]) -> Result<f64, GroupingError> {
    let bb = stacked_training(phis, trainings);
    let p = projector_complement(&bb).map_err(|_| GroupingError::RankCollapse)?;
    let r = y_grp * y_grp.adjoint();
    Ok(fro2(&(p * r)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub phis: Vec<f64>,
    /// Linear system singular; coarse values returned.
    pub singular: bool,
    /// Step rejected by the trust region.
    pub rejected: bool,
    pub passes: usize,
}

/// Largest accepted CFO step in any component.
pub const TRUST_RADIUS: f64 = 0.1;

/// Joint CFO refinement of a group around `coarse` by a second-order
/// expansion of the noise-subspace energy `Tr(U_n^H R U_n)`.
pub fn refine_cfos(coarse: &[f64], y_grp: &ComplexMatrix, trainings: &[&ComplexMatrix], max_passes: usize) -> RefineOutcome {
    let mut phis = coarse.to_vec();
    let mut out = RefineOutcome { phis: phis.clone(), singular: false, rejected: false, passes: 0 };
    for pass in 0..max_passes.max(1) {
        match refine_step(&phis, y_grp, trainings) {
            None => {
                if pass == 0 {
                    out.singular = true;
                }
                break;
            }
            Some(delta) => {
                let inf = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
                if inf > TRUST_RADIUS {
                    out.rejected = true;
                    break;
                }
                for (p, d) in phis.iter_mut().zip(&delta) {
                    *p += d;
                }
                out.phis = phis.clone();
                out.passes = pass + 1;
                let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    break;
                }
            }
        }
    }
    out
}

fn refine_step(phis: &[f64], y_grp: &ComplexMatrix, trainings: &[&ComplexMatrix]) -> Option<Vec<f64>> {
    let n = trainings[0].nrows();
    let kappa = phis.len();
    let rotated: Vec<ComplexMatrix> = phis.iter().zip(trainings).map(|(&p, b)| stacked_training(&[p], &[*b])).collect();
    let mut pi = ComplexMatrix::zeros(n, n);
    for b in &rotated {
        pi += b * b.adjoint();
    }
    let eig = eig_hermitian(&pi).ok()?;
    let lmax = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if !(lmax > 0.0) {
        return None;
    }
    let signal: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-10 * lmax).collect();
    let noise: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= 1e-10 * lmax).collect();
    if noise.is_empty() {
        return None;
    }
    let us = eig.eigenvectors.select_columns(&signal);
    let un = eig.eigenvectors.select_columns(&noise);
    let inv: Vec<Complex64> = signal.iter().map(|&i| Complex64::new(1.0 / eig.eigenvalues[i], 0.0)).collect();
    let mut us_scaled = us.clone();
    for (c, s) in inv.iter().enumerate() {
        us_scaled.column_mut(c).scale_mut(s.re);
    }
    let pinv = &us_scaled * us.adjoint();

    let dvals: Vec<Complex64> = (0..n).map(|t| Complex64::new(0.0, 2.0 * PI * t as f64 / n as f64)).collect();
    let scale_rows = |m: &ComplexMatrix, f: &dyn Fn(usize) -> Complex64| {
        let mut o = m.clone();
        for t in 0..o.nrows() {
            let s = f(t);
            for j in 0..o.ncols() {
                o[(t, j)] *= s;
            }
        }
        o
    };
    let dh_un = scale_rows(&un, &|t| dvals[t].conj());
    let d2h_un = scale_rows(&un, &|t| dvals[t].conj() * dvals[t].conj());

    let yh = y_grp.adjoint();
    let vn = &yh * &un;
    let mut vb = Vec::with_capacity(kappa);
    let mut diag_terms = Vec::with_capacity(kappa);
    for b in &rotated {
        let bh = b.adjoint();
        // P_k D^H U_n and D P_k D^H U_n
        let p_dh_un = b * (&bh * &dh_un);
        let bk = -(&pinv * &p_dh_un);
        let d_term = b * (&bh * &d2h_un) + scale_rows(&p_dh_un, &|t| dvals[t]) * Complex64::new(2.0, 0.0);
        let dk = -(&pinv * d_term);
        vb.push(&yh * bk);
        diag_terms.push(inner(&vn, &(&yh * dk)).re);
    }
    let mut a = vec![vec![0.0; kappa]; kappa];
    let mut rhs = vec![0.0; kappa];
    for k in 0..kappa {
        for q in 0..kappa {
            a[k][q] = inner(&vb[k], &vb[q]).re;
        }
        a[k][k] += diag_terms[k];
        rhs[k] = -inner(&vn, &vb[k]).re;
    }
    crate::numerics::solve_real(&a, &rhs)
}

/// Circular convolution matrix `sqrt(N) F^H diag(F_L h) F` of taps `h`.
pub fn circulant_lift(h: &[Complex64], n: usize) -> ComplexMatrix {
    let mut c = ComplexMatrix::zeros(n, n);
    for col in 0..n {
        for (l, &hl) in h.iter().enumerate() {
            c[((col + l) % n, col)] += hl;
        }
    }
    c
}

/// `F E(delta) F^H` is circulant; returns its generating row `c[d]`, with
/// entry `(m, n)` equal to `c[(n - m) mod N]`.
fn rotation_kernel(delta: f64, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|d| {
            let x = d as f64 + delta;
            if x.fract() == 0.0 && (x as i64).rem_euclid(n as i64) == 0 {
                return Complex64::new(1.0, 0.0);
            }
            let sum: Complex64 = (0..n).map(|t| crate::numerics::cis(2.0 * PI * t as f64 * x / n as f64)).sum();
            sum / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupDetection {
    /// Decisions per member, `None` for erasures.
    pub symbols: Vec<Vec<Option<usize>>>,
    pub rank_deficient: bool,
}

/// Zero-forcing detection of all group members from the beamformed data
/// block `yd_grp` (`N x Q`). `h_eq` stacks the members' `L x Q` equivalent
/// taps. Solves the normal equations in the frequency domain.
pub fn detect_group(
    yd_grp: &ComplexMatrix,
    phis: &[f64],
    h_eq: &ComplexMatrix,
    taps: usize,
    block_index: usize,
    n_cp: usize,
    qam: &Qam16,
) -> GroupDetection {
    let n = yd_grp.nrows();
    let q = yd_grp.ncols();
    let kappa = phis.len();
    let erased = || GroupDetection { symbols: vec![vec![None; n]; kappa], rank_deficient: true };
    let etas: Vec<Complex64> = phis.iter().map(|&p| block_phase(p, block_index, n, n_cp)).collect();
    let resp: Vec<ComplexMatrix> = (0..kappa).map(|k| frequency_response(&h_eq.rows(k * taps, taps).into_owned(), n)).collect();

    let dim = kappa * n;
    let mut gram = DMatrix::<Complex64>::zeros(dim, dim);
    for k in 0..kappa {
        for j in 0..kappa {
            let kern = rotation_kernel(phis[j] - phis[k], n);
            let scale = etas[k].conj() * etas[j];
            for m in 0..n {
                for c in 0..n {
                    let mut g = Complex64::default();
                    for b in 0..q {
                        g += resp[k][(m, b)].conj() * resp[j][(c, b)];
                    }
                    gram[(k * n + m, j * n + c)] = scale * g * kern[(c + n - m) % n];
                }
            }
        }
    }
    let mut rhs = nalgebra::DVector::<Complex64>::zeros(dim);
    for k in 0..kappa {
        let rot = phase_diagonal(-phis[k], n, n);
        let mut comp = yd_grp.clone();
        for b in 0..q {
            for t in 0..n {
                comp[(t, b)] *= rot[t];
            }
        }
        let f = unitary_dft_columns(&comp);
        for m in 0..n {
            let mut acc = Complex64::default();
            for b in 0..q {
                acc += resp[k][(m, b)].conj() * f[(m, b)];
            }
            rhs[k * n + m] = etas[k].conj() * acc;
        }
    }
    let Some(chol) = gram.clone().cholesky() else {
        return erased();
    };
    let l = chol.l();
    let dmax = (0..dim).map(|i| l[(i, i)].norm()).fold(0.0, f64::max);
    let dmin = (0..dim).map(|i| l[(i, i)].norm()).fold(f64::INFINITY, f64::min);
    if !(dmin > 1e-6 * dmax) {
        return erased();
    }
    let s = chol.solve(&rhs);
    let symbols = (0..kappa).map(|k| (0..n).map(|m| Some(qam.decide(s[k * n + m]))).collect()).collect();
    GroupDetection { symbols, rank_deficient: false }
}

/// Reference group ZF through the explicit time-domain lift
/// `pinv(H) vec(Y)`; `O((QN)^2 kappa N)`, for small instances only.
pub fn detect_group_explicit(
    yd_grp: &ComplexMatrix,
    phis: &[f64],
    h_eq: &ComplexMatrix,
    taps: usize,
    block_index: usize,
    n_cp: usize,
    qam: &Qam16,
) -> Vec<Vec<usize>> {
    let n = yd_grp.nrows();
    let q = yd_grp.ncols();
    let kappa = phis.len();
    let mut big = ComplexMatrix::zeros(q * n, kappa * n);
    for k in 0..kappa {
        let eta = block_phase(phis[k], block_index, n, n_cp);
        let rot = phase_diagonal(phis[k], n, n);
        for b in 0..q {
            let h: Vec<Complex64> = (0..taps).map(|l| h_eq[(k * taps + l, b)]).collect();
            let c = circulant_lift(&h, n);
            for r in 0..n {
                for col in 0..n {
                    big[(b * n + r, k * n + col)] = eta * rot[r] * c[(r, col)];
                }
            }
        }
    }
    let y = ComplexMatrix::from_fn(q * n, 1, |i, _| yd_grp[(i % n, i / n)]);
    let x = pseudo_inverse(&big) * y;
    (0..kappa)
        .map(|k| {
            let blk = x.rows(k * n, n).into_owned();
            unitary_dft_columns(&blk).iter().map(|&z| qam.decide(z)).collect()
        })
        .collect()
}
