//! Capped Benamou-Brenier solver, its dual certificate and the stark-constraint oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    slice_mass, CapField, DensityField, FaceKind, Grid, InterfaceFlux, MomentumField, Topology,
};
use crate::transport::{self, EngineConfig, EngineOutput, FaceRole, Integrand, Program, Terminal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Target for the max-norm continuity defect (density per unit time) and for the
    /// face-mass interpolation defect (density).
    pub tol_residual: f64,
    /// Relative energy stagnation between convergence checks.
    pub tol_gap: f64,
    /// Primal step multiplier applied on top of the diagonal preconditioner.
    pub pd_tau: f64,
    /// Dual step multiplier; `pd_tau * pd_sigma <= 1`.
    pub pd_sigma: f64,
    pub pd_theta: f64,
    pub check_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 5_000,
            tol_residual: 1e-2,
            tol_gap: 1e-5,
            pd_tau: 0.3,
            pd_sigma: 1.0 / 0.3,
            pd_theta: 1.0,
            check_every: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.check_every == 0 {
            return Err(Error::Config("max_iter and check_every must be positive".into()));
        }
        if !(self.pd_tau > 0.0 && self.pd_sigma > 0.0) || self.pd_tau * self.pd_sigma > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "step multipliers tau = {}, sigma = {} violate tau * sigma <= 1",
                self.pd_tau, self.pd_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.pd_theta) {
            return Err(Error::Config("pd_theta must lie in [0, 1]".into()));
        }
        if !(self.tol_residual > 0.0 && self.tol_gap > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn engine(&self) -> EngineConfig {
        EngineConfig {
            max_iter: self.max_iter,
            tol_residual: self.tol_residual,
            tol_gap: self.tol_gap,
            tau: self.pd_tau,
            sigma: self.pd_sigma,
            theta: self.pd_theta,
            check_every: self.check_every,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub rho: DensityField,
    pub momentum: MomentumField,
    pub flux: Option<InterfaceFlux>,
    /// Kinetic energy, whole convention.
    pub energy: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Certified lower bound on `energy / 2` when available.
    pub dual_bound: Option<f64>,
    /// Continuity multiplier on half-integer levels, half convention (`nt x cells`).
    pub potential: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct Summary {
    energy: f64,
    residual: f64,
    iterations: usize,
    converged: bool,
    dual_bound: Option<f64>,
}

impl Solution {
    /// `{energy, residual, iterations, converged, dual_bound}` as JSON.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&Summary {
            energy: self.energy,
            residual: self.residual,
            iterations: self.iterations,
            converged: self.converged,
            dual_bound: self.dual_bound,
        })
        .expect("summary serialises")
    }

    /// Pressure diagnostic `p = d_t phi + |grad phi|^2 / 2` on interior levels, `(nt - 1) x cells`.
    pub fn pressure(&self, grid: &Grid) -> Vec<f64> {
        let (n, nt) = (grid.num_cells(), grid.nt());
        let (coef, _) = dual_coefficients(&self.potential, grid);
        let vol_dt = grid.cell_volume() * grid.dt();
        (1..nt)
            .flat_map(|l| {
                let coef = &coef;
                (0..n).map(move |c| -coef[l * n + c] / vol_dt)
            })
            .collect()
    }
}

pub(crate) fn check_endpoints(rho0: &[f64], rho1: &[f64], h: &CapField, g: &Grid) -> Result<()> {
    let n = g.num_cells();
    if rho0.len() != n || rho1.len() != n || h.len() != n {
        return Err(Error::Shape("endpoint or cap length does not match grid".into()));
    }
    if rho0.iter().chain(rho1).any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain("endpoint densities must be finite and nonnegative".into()));
    }
    let (m0, m1) = (slice_mass(rho0, g), slice_mass(rho1, g));
    if (m0 - m1).abs() > 1e-10 * m0.abs().max(m1.abs()).max(1e-300) {
        return Err(Error::Infeasible(format!("endpoint masses differ: {m0} vs {m1}")));
    }
    for (c, cap) in h.values().iter().enumerate() {
        let tol = 1e-12 * cap.max(1.0);
        if rho0[c] > cap + tol || rho1[c] > cap + tol {
            return Err(Error::Infeasible(format!("endpoint exceeds cap in cell {c}")));
        }
    }
    Ok(())
}

pub(crate) fn kinetic_roles(g: &Grid, face_cap: &[f64]) -> Vec<FaceRole> {
    g.faces()
        .iter()
        .zip(face_cap)
        .map(|(f, &cap)| match f.kind {
            FaceKind::Interior if cap > 0.0 => FaceRole::Kinetic,
            _ => FaceRole::Closed,
        })
        .collect()
}

/// Bound on the interpolated face mass implied by the cell caps: the mean of
/// the two adjacent caps.
pub(crate) fn implied_face_caps(h: &CapField, g: &Grid) -> Vec<f64> {
    g.faces()
        .iter()
        .map(|f| match (f.lo, f.hi) {
            (Some(l), Some(r)) => 0.5 * (h.get(l) + h.get(r)),
            _ => 0.0,
        })
        .collect()
}

/// Capped Benamou-Brenier problem between two density slices.
pub fn solve_constrained(
    rho0: &[f64],
    rho1: &[f64],
    h: &CapField,
    g: &Grid,
    cfg: &SolverConfig,
) -> Result<Solution> {
    cfg.validate()?;
    if matches!(g.topology(), Topology::SplitBox { .. }) {
        return Err(Error::Config("use the membrane solver on split-box grids".into()));
    }
    check_endpoints(rho0, rho1, h, g)?;
    let program = Program {
        grid: g.clone(),
        rho0: rho0.to_vec(),
        terminal: Terminal::Fixed(rho1.to_vec()),
        cell_cap: h.values().to_vec(),
        roles: kinetic_roles(g, &h.face_caps(g)),
        face_cap: implied_face_caps(h, g),
        integrand: Integrand::Perspective,
    };
    let out = transport::solve(&program, &cfg.engine(), None)?;
    let mut sol = assemble(g, out, None)?;
    let phi = certificate_potential(&sol.potential, rho0, h, g);
    let bound = dual_objective(&phi, rho0, rho1, h, g)?;
    sol.dual_bound = bound.is_finite().then_some(bound);
    if g.topology() == Topology::Box {
        boundary_warning(&sol.rho, g, &mut sol.warnings);
    }
    Ok(sol)
}

pub(crate) fn assemble(g: &Grid, out: EngineOutput, flux: Option<InterfaceFlux>) -> Result<Solution> {
    let n = g.num_cells();
    let nf = g.num_faces();
    let rho = DensityField::from_raw(g.nt() + 1, n, out.state.rho);
    let mut v = out.state.v;
    if flux.is_some() {
        for k in 0..g.nt() {
            for &j in g.interface_faces() {
                v[k * nf + j] = 0.0;
            }
        }
    }
    let momentum = MomentumField::from_values(g, v)?;
    let dt = g.dt();
    let potential = out.state.y_cont.iter().map(|y| 0.5 * dt * y).collect();
    let mut warnings = Vec::new();
    if !out.converged {
        warnings.push(format!(
            "not converged after {} iterations: residual {:.3e}, interpolation mismatch {:.3e}",
            out.iterations, out.residual, out.interp_residual
        ));
    }
    Ok(Solution {
        rho,
        momentum,
        flux,
        energy: out.energy,
        residual: out.residual,
        iterations: out.iterations,
        converged: out.converged,
        dual_bound: None,
        potential,
        warnings,
    })
}

pub(crate) fn boundary_warning(rho: &DensityField, g: &Grid, warnings: &mut Vec<String>) {
    let max = rho.values().iter().cloned().fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for f in g.faces().iter().filter(|f| f.kind == FaceKind::Boundary) {
        let c = f.lo.or(f.hi).unwrap();
        for t in 0..rho.levels() {
            worst = worst.max(rho.slice(t)[c]);
        }
    }
    if worst > 1e-8 * max {
        warnings.push(format!(
            "density {worst:.3e} reaches the box boundary; enlarge the truncation box"
        ));
    }
}

/// Per-level coefficients of `rho` in the Lagrangian after minimising out the
/// momenta. Entry `(l, c)` multiplies `rho[l, c]`; a negative value means the
/// Hamilton-Jacobi inequality is violated there.
fn dual_coefficients(phi: &[f64], g: &Grid) -> (Vec<f64>, ()) {
    let (n, nt) = (g.num_cells(), g.nt());
    let vol = g.cell_volume();
    let dt = g.dt();
    let mut coef = vec![0.0; (nt + 1) * n];
    for k in 0..nt {
        for c in 0..n {
            let p = phi[k * n + c];
            coef[(k + 1) * n + c] += vol * p;
            coef[k * n + c] -= vol * p;
        }
        for f in g.faces().iter().filter(|f| f.is_interior()) {
            let (l, h) = (f.lo.unwrap(), f.hi.unwrap());
            let grad = (phi[k * n + h] - phi[k * n + l]) / g.dx()[f.axis];
            let w = 0.25 * vol * dt * 0.5 * grad * grad;
            for level in [k, k + 1] {
                coef[level * n + l] -= w;
                coef[level * n + h] -= w;
            }
        }
    }
    (coef, ())
}

/// Exact dual value of the discrete problem (half convention) for a potential
/// `phi` on half-integer levels, `nt x cells`. Returns `-inf` when `phi`
/// violates `d_t phi + |grad phi|^2 / 2 <= 0` by more than 1e-8 on an
/// uncapped cell.
pub fn dual_objective(phi: &[f64], rho0: &[f64], rho1: &[f64], h: &CapField, g: &Grid) -> Result<f64> {
    let (n, nt) = (g.num_cells(), g.nt());
    if phi.len() != nt * n || rho0.len() != n || rho1.len() != n || h.len() != n {
        return Err(Error::Shape("potential, endpoints or cap do not match grid".into()));
    }
    if matches!(g.topology(), Topology::SplitBox { .. }) {
        return Err(Error::Config("dual certificate is defined for single domains".into()));
    }
    let (coef, _) = dual_coefficients(phi, g);
    let vol_dt = g.cell_volume() * g.dt();
    let mut value = 0.0;
    for c in 0..n {
        value += coef[c] * rho0[c] + coef[nt * n + c] * rho1[c];
    }
    for l in 1..nt {
        for c in 0..n {
            let a = coef[l * n + c];
            if a >= 0.0 {
                continue;
            }
            let cap = h.get(c);
            if cap.is_infinite() {
                if -a / vol_dt > 1e-8 {
                    return Ok(f64::NEG_INFINITY);
                }
            } else {
                value += a * cap;
            }
        }
    }
    Ok(value)
}

/// Shifts `phi` by `-s t` so the Hamilton-Jacobi inequality holds on every
/// uncapped cell; the bound loses `s * mass * (1 - dt)`.
pub fn certificate_potential(phi: &[f64], rho0: &[f64], h: &CapField, g: &Grid) -> Vec<f64> {
    let _ = rho0;
    let (n, nt) = (g.num_cells(), g.nt());
    let (coef, _) = dual_coefficients(phi, g);
    let vol_dt = g.cell_volume() * g.dt();
    let mut shift = 0.0f64;
    for l in 1..nt {
        for c in 0..n {
            if h.get(c).is_infinite() {
                shift = shift.max(-coef[l * n + c] / vol_dt);
            }
        }
    }
    let dt = g.dt();
    (0..nt)
        .flat_map(|k| {
            let t = (k as f64 + 0.5) * dt;
            phi[k * n..(k + 1) * n].iter().map(move |p| p - shift * t)
        })
        .collect()
}

/// Closed-form optimal curve from `m delta_0` under the cap `lambda` on `x > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StarkCurve {
    pub m: f64,
    pub lambda: f64,
}

impl StarkCurve {
    pub fn new(m: f64, lambda: f64) -> Result<Self> {
        if !(m > 0.0 && lambda > 0.0) {
            return Err(Error::Domain("mass and cap must be positive".into()));
        }
        Ok(StarkCurve { m, lambda })
    }

    /// Left end of the block at time `t`: `(m / lambda) (t^(2/3) - 1)`.
    pub fn position(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        let w = self.m / self.lambda;
        Ok(w * t.powf(2.0 / 3.0) - w)
    }

    /// Total kinetic energy `4 m^3 / (9 lambda^2)` (whole convention).
    pub fn energy(&self) -> f64 {
        4.0 / 9.0 * self.m.powi(3) / (self.lambda * self.lambda)
    }

    /// Cell averages of `rho_t` on a 1D grid: the part of the block left of the
    /// origin is collapsed into the cell just left of 0.
    pub fn sample(&self, t: f64, g: &Grid) -> Result<Vec<f64>> {
        if g.dim() != 1 {
            return Err(Error::Config("stark profile is one-dimensional".into()));
        }
        let x = self.position(t)?;
        let w = self.m / self.lambda;
        let h = g.dx()[0];
        let zero = g
            .layer_at(0.0)
            .filter(|&i| i >= 1)
            .ok_or_else(|| Error::NotGridAligned("origin".into()))?;
        let mut out = vec![0.0; g.num_cells()];
        for (c, o) in out.iter_mut().enumerate() {
            let a = g.origin()[0] + c as f64 * h;
            let overlap = (a + h).min(x + w) - a.max(0.0f64.max(x));
            if a >= 0.0 {
                *o = self.lambda * overlap.max(0.0) / h;
            }
        }
        out[zero - 1] += self.lambda * (-x).max(0.0).min(w) / h;
        Ok(out)
    }

    /// Dual potential `(2/3)(m/lambda) t^(-1/3) max(x, 0) - b t^(1/3)` with
    /// `b = (m/lambda)^2 / 8`; the second term absorbs the discrete gradient
    /// at the kink so the uncapped side stays a subsolution.
    pub fn potential(&self, t: f64, x: f64) -> f64 {
        let w = self.m / self.lambda;
        2.0 / 3.0 * w * t.powf(-1.0 / 3.0) * x.max(0.0) - w * w / 8.0 * t.cbrt()
    }
}

/// `(x_t, total energy)` of the stark-constraint optimal curve.
pub fn stark_exact(m: f64, lambda: f64, t: f64) -> Result<(f64, f64)> {
    let curve = StarkCurve::new(m, lambda)?;
    Ok((curve.position(t)?, curve.energy()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetic::{total_action, ActionConvention};

    #[test]
    fn stark_examples() {
        assert_eq!(stark_exact(1.0, 1.0, 0.0).unwrap().0, -1.0);
        let (x, e) = stark_exact(1.0, 1.0, 1.0).unwrap();
        assert_eq!(x, 0.0);
        assert!((e - 4.0 / 9.0).abs() < 1e-15);
        assert!((stark_exact(2.0, 1.0, 0.5).unwrap().1 - 32.0 / 9.0).abs() < 1e-14);
        assert!(stark_exact(-1.0, 1.0, 0.5).is_err());
        assert!(stark_exact(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn stark_profile_conserves_mass_and_cap() {
        let g = Grid::boxed(&[256], &[-0.5], &[1.5], 16).unwrap();
        let curve = StarkCurve::new(1.0, 1.0).unwrap();
        for t in [0.0, 0.3, 0.7, 1.0] {
            let s = curve.sample(t, &g).unwrap();
            assert!((slice_mass(&s, &g) - 1.0).abs() < 1e-12);
            let zero = g.layer_at(0.0).unwrap();
            assert!(s[zero..].iter().all(|v| *v <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn sampled_stark_trajectory_action() {
        // Sampled optimal curve with upwind-consistent momenta: the mass flux
        // through each face is read off the exact block motion.
        let n = 512;
        let nt = 256;
        let g = Grid::boxed(&[n], &[-0.5], &[1.5], nt).unwrap();
        let curve = StarkCurve::new(1.0, 1.0).unwrap();
        let rho = DensityField::from_slices(&g, |k| curve.sample(k as f64 / nt as f64, &g).unwrap()).unwrap();
        let h = g.dx()[0];
        let mut v = MomentumField::zeros(&g);
        for k in 0..nt {
            // Cumulative mass left of each face moves by the mass change.
            let (a, b) = (rho.slice(k), rho.slice(k + 1));
            let mut left = 0.0;
            for (j, f) in g.faces().iter().enumerate() {
                if let Some(l) = f.lo {
                    left += (b[l] - a[l]) * h;
                }
                if f.is_interior() {
                    v.slab_mut(k)[j] = -left / g.dt();
                }
            }
        }
        let r = crate::grid::continuity_residual(&rho, &v, None, &g).unwrap();
        assert!(r < 1e-8, "{r}");
        let e = total_action(&rho, &v, &g, ActionConvention::Whole).unwrap();
        assert!((e - 4.0 / 9.0).abs() < 0.1 * 4.0 / 9.0, "{e}");
    }

    #[test]
    fn zero_potential_certifies_zero() {
        let g = Grid::torus(&[8], 4).unwrap();
        let rho = vec![1.0; 8];
        let h = CapField::unconstrained(8);
        let d = dual_objective(&vec![0.0; 32], &rho, &rho, &h, &g).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn kantorovich_potential_for_translation() {
        // phi_t(x) = x D - t D^2 / 2 is an exact subsolution on a box; the
        // discrete dual returns D^2 / 2 times the mass.
        let n = 64;
        let nt = 16;
        let g = Grid::boxed(&[n], &[0.0], &[1.0], nt).unwrap();
        let d = 0.5;
        let mut rho0 = vec![0.0; n];
        let mut rho1 = vec![0.0; n];
        for c in 8..24 {
            rho0[c] = 4.0;
            rho1[c + 32] = 4.0;
        }
        let phi: Vec<f64> = (0..nt)
            .flat_map(|k| {
                let t = (k as f64 + 0.5) / nt as f64;
                (0..n).map(move |c| {
                    let x = (c as f64 + 0.5) / n as f64;
                    x * d - t * d * d / 2.0
                })
            })
            .collect();
        let h = CapField::unconstrained(n);
        let val = dual_objective(&phi, &rho0, &rho1, &h, &g).unwrap();
        assert!((val - d * d / 2.0).abs() < 1e-9, "{val}");
        // Doubling the potential violates the Hamilton-Jacobi inequality.
        let bad: Vec<f64> = phi.iter().map(|p| 2.0 * p).collect();
        assert_eq!(dual_objective(&bad, &rho0, &rho1, &h, &g).unwrap(), f64::NEG_INFINITY);
        let fixed = certificate_potential(&bad, &rho0, &h, &g);
        assert!(dual_objective(&fixed, &rho0, &rho1, &h, &g).unwrap().is_finite());
    }

    #[test]
    fn stark_dual_potential_bound() {
        // Exact potential of the stark curve on the window [delta, 1 - delta],
        // mapped onto a grid whose time axis spans [0, 1].
        let curve = StarkCurve::new(1.0, 1.0).unwrap();
        let n = 800;
        let nt = 400;
        let g = Grid::boxed(&[n], &[-1.0], &[1.0], nt).unwrap();
        let delta = 0.01;
        let span = 1.0 - 2.0 * delta;
        let time = |k: f64| delta + span * k / nt as f64;
        let h: Vec<f64> = (0..n).map(|c| if g.cell_center(c)[0] > 0.0 { 1.0 } else { f64::INFINITY }).collect();
        let cap = CapField::new(h).unwrap();
        let phi: Vec<f64> = (0..nt)
            .flat_map(|k| {
                let t = time(k as f64 + 0.5);
                let g = &g;
                (0..n).map(move |c| span * curve.potential(t, g.cell_center(c)[0]))
            })
            .collect();
        let r0 = curve.sample(time(0.0), &g).unwrap();
        let r1 = curve.sample(time(nt as f64), &g).unwrap();
        let raw = dual_objective(&phi, &r0, &r1, &cap, &g).unwrap();
        let phi = certificate_potential(&phi, &r0, &cap, &g);
        let val = dual_objective(&phi, &r0, &r1, &cap, &g).unwrap();
        // Half the action of the rescaled window.
        let target = span * span * 2.0 / 9.0;
        assert!(raw.is_finite(), "potential violates the inequality off the cap");
        assert!(val <= target + 1e-3, "{val}");
        // The `-b t^(1/3)` term is paid by the mass still collapsed left of the
        // origin: at most `(b / 3) * integral of (1 - t^(2/3)) t^(-2/3) = 2b / 3`.
        let loss = 2.0 / 3.0 / 8.0;
        assert!(val > target - loss - 0.01, "{val} vs {target}");
    }
}
