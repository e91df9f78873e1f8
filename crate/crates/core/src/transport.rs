//! Primal-dual hybrid gradient engine shared by every dynamic transport solver.
//!
//! Unknowns are the interior density levels, an auxiliary face mass `m` per
//! kinetic face and slab, and the face momenta. Two families of linear
//! constraints tie them together:
//!
//! ```text
//! continuity:     rho[k+1, c] - rho[k, c] + dt * div V[k] (c) = 0
//! interpolation:  m[k, j] - (rho[k, lo] + rho[k, hi] + rho[k+1, lo] + rho[k+1, hi]) / 4 = 0
//! ```
//!
//! The objective is separable in `(m, V)` per face and in `rho` per cell, so
//! every primal step is a pointwise prox. When every interior face carries
//! momentum, the continuity rows get the exact inverse of their Gram matrix
//! (a separable space-time Laplacian) as dual step; otherwise all steps are
//! diagonally preconditioned from the row and column sums of the operator.
//! The objective is normalised by `dt * cell_volume`.

use crate::error::{Error, Result};
use crate::grid::{FaceKind, Grid, Topology};
use crate::spectral::{AxisKind, SeparablePoisson};
use crate::kinetic::{perspective, prox_perspective};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum FaceRole {
    /// Wall or zero-capacity face; momentum pinned to zero.
    Closed,
    /// Kinetic cost `|V|^2 / m`.
    Kinetic,
    /// Membrane face with quadratic cost `weight * V^2` in normalised units.
    Membrane { weight: f64 },
}

/// Concave, piecewise-linear mobility `G = 1/F` through `(0, 0)`; the
/// integrand is `V^2 / G(m)`.
#[derive(Clone, Debug)]
pub(crate) struct Mobility {
    pub m: Vec<f64>,
    pub g: Vec<f64>,
}

impl Mobility {
    pub fn max_mass(&self) -> f64 {
        *self.m.last().unwrap()
    }

    /// Value and right-derivative at `x` in `[0, max_mass]`.
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let n = self.m.len();
        let i = match self.m.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let slope = (self.g[i + 1] - self.g[i]) / (self.m[i + 1] - self.m[i]);
        (self.g[i] + slope * (x - self.m[i]), slope)
    }

    /// Minimiser over `m in [0, min(cap, max_mass)]` of
    /// `f2 / (G(m) + 2 gamma) + (m - m0)^2 / (2 gamma)`; returns `(m, G(m))`.
    pub fn prox(&self, m0: f64, f2: f64, gamma: f64, cap: f64) -> (f64, f64) {
        let top = cap.min(self.max_mass());
        let last = self.m.len() - 1;
        // Derivative of the reduced objective at breakpoint `i`, right slope.
        let at_knot = |i: usize| {
            let k = i.min(last - 1);
            let s = (self.g[k + 1] - self.g[k]) / (self.m[k + 1] - self.m[k]);
            let q = self.g[i] + 2.0 * gamma;
            -f2 * s / (q * q) + (self.m[i] - m0) / gamma
        };
        if at_knot(0) >= 0.0 {
            return (0.0, 0.0);
        }
        let (gt, st) = self.eval(top);
        let qt = gt + 2.0 * gamma;
        if -f2 * st / (qt * qt) + (top - m0) / gamma <= 0.0 {
            return (top, gt);
        }
        // The derivative is increasing: locate the linear piece holding the
        // root among the breakpoints, then Newton inside it.
        let (mut i, mut j) = (0, last);
        while j - i > 1 {
            let mid = (i + j) / 2;
            if self.m[mid] >= top || at_knot(mid) > 0.0 {
                j = mid;
            } else {
                i = mid;
            }
        }
        let (mut lo, mut hi) = (self.m[i], self.m[j].min(top));
        let slope = (self.g[j] - self.g[i]) / (self.m[j] - self.m[i]);
        let base = self.g[i] - slope * self.m[i];
        let mut x = m0.clamp(lo, hi);
        for _ in 0..100 {
            let q = base + slope * x + 2.0 * gamma;
            let val = -f2 * slope / (q * q) + (x - m0) / gamma;
            let curv = 2.0 * f2 * slope * slope / (q * q * q) + 1.0 / gamma;
            if val > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let mut next = x - val / curv;
            if !(next >= lo && next <= hi) {
                next = 0.5 * (lo + hi);
            }
            let done = (next - x).abs() <= 1e-13 * (1.0 + x.abs());
            x = next;
            if done {
                break;
            }
        }
        (x, base + slope * x)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Integrand {
    Perspective,
    Mobility(Mobility),
}

#[derive(Clone, Debug)]
pub(crate) enum Terminal {
    Fixed(Vec<f64>),
    /// Free last level with cost `weight * sum_c (rt * r ln r + r psi_c)`.
    FreeEnergy { weight: f64, rt: f64, psi: Vec<f64> },
}

#[derive(Clone, Debug)]
pub(crate) struct Program {
    pub grid: Grid,
    pub rho0: Vec<f64>,
    pub terminal: Terminal,
    pub cell_cap: Vec<f64>,
    pub face_cap: Vec<f64>,
    pub roles: Vec<FaceRole>,
    pub integrand: Integrand,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EngineConfig {
    pub max_iter: usize,
    pub tol_residual: f64,
    pub tol_gap: f64,
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub check_every: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Iterate {
    /// All `nt + 1` levels, endpoints included.
    pub rho: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub y_cont: Vec<f64>,
    pub y_int: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct EngineOutput {
    pub state: Iterate,
    pub energy: f64,
    /// Continuity defect in density per unit time.
    pub residual: f64,
    /// Mismatch between face masses and interpolated densities.
    pub interp_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

const NONE: usize = usize::MAX;

struct Layout {
    n: usize,
    nf: usize,
    nt: usize,
    free_end: bool,
    lo: Vec<usize>,
    hi: Vec<usize>,
    /// `dt / dx` of the face's axis.
    coef: Vec<f64>,
    kind: Vec<u8>,
    weight: Vec<f64>,
    kin_per_cell: Vec<f64>,
    active_coef_per_cell: Vec<f64>,
}

const CLOSED: u8 = 0;
const KINETIC: u8 = 1;
const MEMBRANE: u8 = 2;

impl Layout {
    fn new(p: &Program) -> Self {
        let g = &p.grid;
        let n = g.num_cells();
        let nf = g.num_faces();
        let dt = g.dt();
        let mut lo = vec![NONE; nf];
        let mut hi = vec![NONE; nf];
        let mut coef = vec![0.0; nf];
        let mut kind = vec![CLOSED; nf];
        let mut weight = vec![0.0; nf];
        for (j, f) in g.faces().iter().enumerate() {
            lo[j] = f.lo.unwrap_or(NONE);
            hi[j] = f.hi.unwrap_or(NONE);
            coef[j] = dt / g.dx()[f.axis];
            kind[j] = match (&p.roles[j], f.kind) {
                (_, FaceKind::Boundary) => CLOSED,
                (FaceRole::Closed, _) => CLOSED,
                (FaceRole::Kinetic, _) => KINETIC,
                (FaceRole::Membrane { weight: w }, _) => {
                    weight[j] = *w;
                    MEMBRANE
                }
            };
        }
        let mut kin_per_cell = vec![0.0; n];
        let mut active_coef_per_cell = vec![0.0; n];
        for j in 0..nf {
            if kind[j] == CLOSED {
                continue;
            }
            for c in [lo[j], hi[j]] {
                active_coef_per_cell[c] += coef[j];
                if kind[j] == KINETIC {
                    kin_per_cell[c] += 1.0;
                }
            }
        }
        Layout {
            n,
            nf,
            nt: g.nt(),
            free_end: matches!(p.terminal, Terminal::FreeEnergy { .. }),
            lo,
            hi,
            coef,
            kind,
            weight,
            kin_per_cell,
            active_coef_per_cell,
        }
    }

    fn unknown(&self, level: usize) -> bool {
        level >= 1 && (level < self.nt || self.free_end)
    }

    /// Continuity and interpolation rows of `(rho, m, v)`, endpoints included.
    fn constraints(&self, rho: &[f64], m: &[f64], v: &[f64], cont: &mut [f64], int: &mut [f64]) {
        let (n, nf) = (self.n, self.nf);
        for k in 0..self.nt {
            let a = &rho[k * n..(k + 1) * n];
            let b = &rho[(k + 1) * n..(k + 2) * n];
            let row = &mut cont[k * n..(k + 1) * n];
            for c in 0..n {
                row[c] = b[c] - a[c];
            }
            let vs = &v[k * nf..(k + 1) * nf];
            let ms = &m[k * nf..(k + 1) * nf];
            let irow = &mut int[k * nf..(k + 1) * nf];
            for j in 0..nf {
                match self.kind[j] {
                    CLOSED => irow[j] = 0.0,
                    kind => {
                        let (l, h) = (self.lo[j], self.hi[j]);
                        let flux = self.coef[j] * vs[j];
                        row[l] += flux;
                        row[h] -= flux;
                        irow[j] = if kind == KINETIC {
                            ms[j] - 0.25 * (a[l] + a[h] + b[l] + b[h])
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn energy_of(p: &Program, m: &[f64], v: &[f64]) -> f64 {
    let g = &p.grid;
    let nf = g.num_faces();
    let mut total = 0.0;
    for k in 0..g.nt() {
        for j in 0..nf {
            let (mm, vv) = (m[k * nf + j], v[k * nf + j]);
            total += match &p.roles[j] {
                FaceRole::Closed => 0.0,
                FaceRole::Kinetic => match &p.integrand {
                    Integrand::Perspective => perspective(mm, vv * vv, 1.0),
                    Integrand::Mobility(mob) => {
                        let gm = mob.eval(mm.clamp(0.0, mob.max_mass())).0;
                        perspective(gm, vv * vv, 1.0)
                    }
                },
                FaceRole::Membrane { weight } => weight * vv * vv,
            };
        }
    }
    total * g.dt() * g.cell_volume()
}

fn free_energy_prox(r0: f64, step: f64, rt: f64, psi: f64, cap: f64) -> f64 {
    // Root of r - r0 + step (rt (ln r + 1) + psi) = 0, increasing in r.
    let phi = |r: f64| r - r0 + step * (rt * (r.ln() + 1.0) + psi);
    let mut hi = r0.max(0.0) + 1.0;
    while phi(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut lo = hi;
    while phi(lo) > 0.0 && lo > 1e-300 {
        lo *= 0.5;
    }
    if phi(lo) > 0.0 {
        return lo.min(cap);
    }
    let mut r = 0.5 * (lo + hi);
    for _ in 0..200 {
        let val = phi(r);
        if val > 0.0 {
            hi = r;
        } else {
            lo = r;
        }
        let next = r - val / (1.0 + step * rt / r);
        let next = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if (next - r).abs() <= 1e-15 * r {
            r = next;
            break;
        }
        r = next;
    }
    r.min(cap)
}

pub(crate) fn validate(p: &Program) -> Result<()> {
    let g = &p.grid;
    let n = g.num_cells();
    if p.rho0.len() != n || p.cell_cap.len() != n || p.face_cap.len() != g.num_faces() {
        return Err(Error::Shape("program arrays do not match grid".into()));
    }
    if p.roles.len() != g.num_faces() {
        return Err(Error::Shape("face roles do not match grid".into()));
    }
    match &p.terminal {
        Terminal::Fixed(r) if r.len() != n => Err(Error::Shape("terminal density".into())),
        Terminal::FreeEnergy { psi, .. } if psi.len() != n => Err(Error::Shape("potential".into())),
        _ => Ok(()),
    }
}

/// Split of the dual metric between continuity and interpolation rows.
const COUPLING: f64 = 0.2;

type Steps = (Vec<f64>, Vec<f64>, f64, Vec<f64>, Vec<f64>);

/// Continuity rows are preconditioned exactly when every interior face
/// carries momentum: with uniform primal steps their Gram matrix is a
/// separable space-time Laplacian.
fn spectral_operator(p: &Program, lay: &Layout) -> Option<SeparablePoisson> {
    let g = &p.grid;
    let all_open = g
        .faces()
        .iter()
        .zip(&lay.kind)
        .all(|(f, &k)| f.kind == FaceKind::Boundary || k != CLOSED);
    if !all_open {
        return None;
    }
    let mut shape = vec![lay.nt];
    let mut kinds = vec![if lay.free_end { AxisKind::NeumannDirichlet } else { AxisKind::Neumann }];
    let mut weights = vec![1.0];
    let dt = g.dt();
    for (a, &n) in g.cells_per_axis().iter().enumerate() {
        shape.push(n);
        kinds.push(match g.topology() {
            Topology::Periodic => AxisKind::Periodic,
            _ => AxisKind::Neumann,
        });
        let coef = dt / g.dx()[a];
        weights.push(coef * coef);
    }
    Some(SeparablePoisson::new(&shape, &kinds, &weights))
}

/// Gershgorin bound on the interpolation block of `K K^T`, per slab and face.
fn interpolation_bound(lay: &Layout) -> Vec<f64> {
    let (nt, nf) = (lay.nt, lay.nf);
    let mut out = vec![1.0; nt * nf];
    for k in 0..nt {
        for j in 0..nf {
            if lay.kind[j] != KINETIC {
                continue;
            }
            let mut b = 1.0;
            for l in [k, k + 1] {
                if !lay.unknown(l) {
                    continue;
                }
                let slabs = if l < nt { 2.0 } else { 1.0 };
                for c in [lay.lo[j], lay.hi[j]] {
                    b += 0.0625 * lay.kin_per_cell[c] * slabs;
                }
            }
            out[k * nf + j] = b;
        }
    }
    out
}

fn uniform_steps(lay: &Layout, cfg: &EngineConfig) -> Steps {
    let (n, nt) = (lay.n, lay.nt);
    let tau_rho = (0..=nt)
        .flat_map(|l| std::iter::repeat_n(if lay.unknown(l) { cfg.tau } else { 0.0 }, n))
        .collect();
    let tau_v = vec![cfg.tau; lay.nf];
    let sigma_int = interpolation_bound(lay)
        .iter()
        .map(|b| cfg.sigma / ((1.0 + 1.0 / COUPLING) * b))
        .collect();
    (tau_rho, tau_v, cfg.tau, Vec::new(), sigma_int)
}

/// Row and column sums of the constraint operator (Pock-Chambolle, alpha = 1).
fn diagonal_steps(lay: &Layout, cfg: &EngineConfig) -> Steps {
    let (n, nt, nf) = (lay.n, lay.nt, lay.nf);
    let tau_rho = (0..=nt)
        .flat_map(|l| {
            (0..n).map(move |c| {
                if !lay.unknown(l) {
                    return 0.0;
                }
                let slabs = if l < nt { 2.0 } else { 1.0 };
                cfg.tau / (slabs * (1.0 + 0.25 * lay.kin_per_cell[c]))
            })
        })
        .collect();
    let tau_v = lay.coef.iter().map(|a| cfg.tau / (2.0 * a)).collect();
    let sigma_cont = (0..nt)
        .flat_map(|k| {
            (0..n).map(move |c| {
                let s = lay.unknown(k + 1) as u8 as f64
                    + lay.unknown(k) as u8 as f64
                    + lay.active_coef_per_cell[c];
                cfg.sigma / s.max(1e-300)
            })
        })
        .collect();
    let sigma_int = (0..nt)
        .flat_map(|k| {
            let unknown = 2.0 * (lay.unknown(k) as u8 as f64 + lay.unknown(k + 1) as u8 as f64);
            std::iter::repeat_n(cfg.sigma / (1.0 + 0.25 * unknown), nf)
        })
        .collect();
    (tau_rho, tau_v, cfg.tau, sigma_cont, sigma_int)
}

/// Runs the primal-dual iteration from `init` (or from the linear interpolation of the endpoints).
pub(crate) fn solve(p: &Program, cfg: &EngineConfig, init: Option<Iterate>) -> Result<EngineOutput> {
    validate(p)?;
    if cfg.tau * cfg.sigma > 1.0 + 1e-12 || cfg.tau <= 0.0 || cfg.sigma <= 0.0 {
        return Err(Error::Config("step sizes must satisfy tau * sigma <= 1".into()));
    }
    let lay = Layout::new(p);
    let (n, nf, nt) = (lay.n, lay.nf, lay.nt);
    let dt = p.grid.dt();

    let mut st = init.unwrap_or_else(|| initial_iterate(p));
    if st.rho.len() != (nt + 1) * n || st.v.len() != nt * nf {
        return Err(Error::Shape("warm start does not match grid".into()));
    }

    let spectral = spectral_operator(p, &lay);
    let (tau_rho, tau_v, tau_m, sigma_cont, sigma_int) = match &spectral {
        Some(_) => uniform_steps(&lay, cfg),
        None => diagonal_steps(&lay, cfg),
    };
    let mut dual_buf = vec![0.0; if spectral.is_some() { nt * n } else { 0 }];

    struct KinFace {
        j: usize,
        lo: usize,
        hi: usize,
        coef: f64,
        tau_v: f64,
        inv_s: f64,
        cap: f64,
    }
    struct MemFace {
        j: usize,
        lo: usize,
        hi: usize,
        coef: f64,
        tau_v: f64,
        damp: f64,
    }
    let kin: Vec<KinFace> = (0..nf)
        .filter(|&j| lay.kind[j] == KINETIC)
        .map(|j| KinFace {
            j,
            lo: lay.lo[j],
            hi: lay.hi[j],
            coef: lay.coef[j],
            tau_v: tau_v[j],
            inv_s: (tau_m / tau_v[j]).sqrt(),
            cap: p.face_cap[j],
        })
        .collect();
    let mem: Vec<MemFace> = (0..nf)
        .filter(|&j| lay.kind[j] == MEMBRANE)
        .map(|j| MemFace {
            j,
            lo: lay.lo[j],
            hi: lay.hi[j],
            coef: lay.coef[j],
            tau_v: tau_v[j],
            damp: 1.0 / (1.0 + 2.0 * tau_v[j] * lay.weight[j]),
        })
        .collect();

    let mut rho_bar = st.rho.clone();
    let mut m_bar = st.m.clone();
    let mut v_bar = st.v.clone();
    let mut cont = vec![0.0; nt * n];
    let mut int = vec![0.0; nt * nf];
    let mut kty_rho = vec![0.0; (nt + 1) * n];

    let mut prev_energy = f64::NAN;
    let mut out_res = f64::INFINITY;
    let mut out_int = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iter {
        iterations = it;
        // K^T y restricted to rho.
        kty_rho.fill(0.0);
        for k in 0..nt {
            let (lower, upper) = kty_rho.split_at_mut((k + 1) * n);
            let a = &mut lower[k * n..];
            let b = &mut upper[..n];
            let yc = &st.y_cont[k * n..(k + 1) * n];
            for ((x, y), z) in a.iter_mut().zip(b.iter_mut()).zip(yc) {
                *x -= z;
                *y += z;
            }
            let yi = &st.y_int[k * nf..(k + 1) * nf];
            for f in &kin {
                let w = 0.25 * yi[f.j];
                a[f.lo] -= w;
                a[f.hi] -= w;
                b[f.lo] -= w;
                b[f.hi] -= w;
            }
        }

        // Primal step on rho.
        for l in 1..=nt {
            if !lay.unknown(l) {
                continue;
            }
            let range = l * n..(l + 1) * n;
            let rho = &mut st.rho[range.clone()];
            let bar = &mut rho_bar[range.clone()];
            let step = &tau_rho[range.clone()];
            let grad = &kty_rho[range];
            match (&p.terminal, l == nt) {
                (Terminal::FreeEnergy { weight, rt, psi }, true) => {
                    for c in 0..n {
                        let old = rho[c];
                        let trial = old - step[c] * grad[c];
                        let new = free_energy_prox(trial, step[c] * weight, *rt, psi[c], p.cell_cap[c]);
                        rho[c] = new;
                        bar[c] = new + cfg.theta * (new - old);
                    }
                }
                _ => {
                    for c in 0..n {
                        let old = rho[c];
                        let new = (old - step[c] * grad[c]).max(0.0).min(p.cell_cap[c]);
                        rho[c] = new;
                        bar[c] = new + cfg.theta * (new - old);
                    }
                }
            }
        }

        // Primal step on faces.
        for k in 0..nt {
            let yc = &st.y_cont[k * n..(k + 1) * n];
            let range = k * nf..(k + 1) * nf;
            let yi = &st.y_int[range.clone()];
            let ms = &mut st.m[range.clone()];
            let mb = &mut m_bar[range.clone()];
            let vs = &mut st.v[range.clone()];
            let vb = &mut v_bar[range];
            for f in &kin {
                let v_old = vs[f.j];
                let v_trial = v_old - f.tau_v * f.coef * (yc[f.lo] - yc[f.hi]);
                let m_old = ms[f.j];
                let m_trial = m_old - tau_m * yi[f.j];
                let w = v_trial * f.inv_s;
                let (m_new, shrink) = match &p.integrand {
                    Integrand::Perspective => prox_perspective(m_trial, w * w, f.tau_v, 1.0, f.cap),
                    Integrand::Mobility(mob) => {
                        let (mm, gm) = mob.prox(m_trial, w * w, f.tau_v, f.cap);
                        (mm, gm / (gm + 2.0 * f.tau_v))
                    }
                };
                let v_new = shrink * v_trial;
                ms[f.j] = m_new;
                mb[f.j] = m_new + cfg.theta * (m_new - m_old);
                vs[f.j] = v_new;
                vb[f.j] = v_new + cfg.theta * (v_new - v_old);
            }
            for f in &mem {
                let v_old = vs[f.j];
                let v_new = (v_old - f.tau_v * f.coef * (yc[f.lo] - yc[f.hi])) * f.damp;
                vs[f.j] = v_new;
                vb[f.j] = v_new + cfg.theta * (v_new - v_old);
            }
        }

        // Dual ascent on the extrapolated point.
        lay.constraints(&rho_bar, &m_bar, &v_bar, &mut cont, &mut int);
        match &spectral {
            Some(op) => {
                dual_buf.copy_from_slice(&cont);
                op.solve(&mut dual_buf);
                let s = cfg.sigma / (1.0 + COUPLING);
                for (y, r) in st.y_cont.iter_mut().zip(&dual_buf) {
                    *y += s * r;
                }
            }
            None => {
                for (i, r) in cont.iter().enumerate() {
                    st.y_cont[i] += sigma_cont[i] * r;
                }
            }
        }
        for ((y, s), r) in st.y_int.iter_mut().zip(&sigma_int).zip(&int) {
            *y += s * r;
        }

        if it % cfg.check_every == 0 || it == cfg.max_iter {
            lay.constraints(&st.rho, &st.m, &st.v, &mut cont, &mut int);
            out_res = cont.iter().fold(0.0f64, |a, r| a.max(r.abs())) / dt;
            out_int = int.iter().fold(0.0f64, |a, r| a.max(r.abs()));
            let energy = energy_of(p, &st.m, &st.v);
            let stagnant = (energy - prev_energy).abs() <= cfg.tol_gap * (1.0 + energy.abs());
            prev_energy = energy;
            if out_res <= cfg.tol_residual && out_int <= cfg.tol_residual && stagnant {
                converged = true;
                break;
            }
        }
    }

    if !out_res.is_finite() {
        lay.constraints(&st.rho, &st.m, &st.v, &mut cont, &mut int);
        out_res = cont.iter().fold(0.0f64, |a, r| a.max(r.abs())) / dt;
        out_int = int.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    }
    let energy = energy_of(p, &st.m, &st.v);
    Ok(EngineOutput {
        state: st,
        energy,
        residual: out_res,
        interp_residual: out_int,
        iterations,
        converged,
    })
}

/// Linear-in-time interpolation of the endpoints, zero momentum and multipliers.
pub(crate) fn initial_iterate(p: &Program) -> Iterate {
    let g = &p.grid;
    let (n, nf, nt) = (g.num_cells(), g.num_faces(), g.nt());
    let end: &[f64] = match &p.terminal {
        Terminal::Fixed(r) => r,
        Terminal::FreeEnergy { .. } => &p.rho0,
    };
    let mut rho = Vec::with_capacity((nt + 1) * n);
    for l in 0..=nt {
        let s = l as f64 / nt as f64;
        rho.extend((0..n).map(|c| ((1.0 - s) * p.rho0[c] + s * end[c]).min(p.cell_cap[c])));
    }
    let mut m = vec![0.0; nt * nf];
    for k in 0..nt {
        for (j, f) in g.faces().iter().enumerate() {
            if let (Some(l), Some(h)) = (f.lo, f.hi) {
                let a = &rho[k * n..(k + 1) * n];
                let b = &rho[(k + 1) * n..(k + 2) * n];
                m[k * nf + j] = (0.25 * (a[l] + a[h] + b[l] + b[h])).min(p.face_cap[j]);
            }
        }
    }
    Iterate {
        rho,
        m,
        v: vec![0.0; nt * nf],
        y_cont: vec![0.0; nt * n],
        y_int: vec![0.0; nt * nf],
    }
}
