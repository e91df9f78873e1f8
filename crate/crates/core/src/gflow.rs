//! Gradient-flow steppers for the free energy `RT int rho log rho + int rho psi`:
//! minimizing movements in the capped transport metric, membrane-coupled
//! Fokker-Planck diffusion, and the porous-medium-type equation
//! `d_t rho = RT/(1 - beta) Lap rho^(1 - beta)`.

use crate::error::{Error, Result};
use crate::grid::{slice_mass, CapField, FaceKind, Grid, Topology};
use crate::membrane::{join_slices, split_slice};
use crate::solver::{implied_face_caps, kinetic_roles, SolverConfig};
use crate::transport::{self, Integrand, Program, Terminal};

/// Smallest density admitted inside a logarithm.
pub const LOG_FLOOR: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct FreeEnergySpec {
    pub rt: f64,
    /// Potential per cell.
    pub psi: Vec<f64>,
}

impl FreeEnergySpec {
    pub fn new(rt: f64, psi: Vec<f64>) -> Result<Self> {
        if !(rt > 0.0 && rt.is_finite()) {
            return Err(Error::Domain(format!("RT = {rt} must be positive")));
        }
        if psi.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("potential must be finite".into()));
        }
        Ok(FreeEnergySpec { rt, psi })
    }

    /// Pure entropy, `psi = 0`.
    pub fn entropy(rt: f64, cells: usize) -> Result<Self> {
        Self::new(rt, vec![0.0; cells])
    }

    /// `sum_c (RT rho log rho + rho psi) * cell volume`, with `0 log 0 = 0`.
    pub fn value(&self, rho: &[f64], g: &Grid) -> f64 {
        rho.iter()
            .zip(&self.psi)
            .map(|(&r, &p)| if r > 0.0 { self.rt * r * r.ln() + r * p } else { 0.0 })
            .sum::<f64>()
            * g.cell_volume()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JkoConfig {
    /// Pseudo-time slices of the inner transport problem.
    pub nt_inner: usize,
    pub solver: SolverConfig,
}

impl Default for JkoConfig {
    fn default() -> Self {
        JkoConfig { nt_inner: 8, solver: SolverConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub struct JkoStep {
    pub rho: Vec<f64>,
    pub free_energy_before: f64,
    pub free_energy_after: f64,
    /// `W_h^2 / (2 tau)` of the inner transport problem.
    pub transport_cost: f64,
    pub residual: f64,
    pub converged: bool,
    /// The inner solve ended above the starting free energy and the step was rejected.
    pub rejected: bool,
}

/// One minimizing-movement step
/// `argmin_{rho' <= h} W_h(rho, rho')^2 / (2 tau) + F(rho')`.
///
/// The inner problem is the capped transport problem over unit pseudo-time
/// with a free terminal level whose prox is the scalar minimisation of
/// `RT r log r + r psi` on `[0, h]`. If the returned level has a larger free
/// energy than `rho` (possible only when the inner solve is inexact), the
/// step is rejected and `rho` is returned unchanged, which is always admissible.
pub fn jko_step(
    rho: &[f64],
    spec: &FreeEnergySpec,
    tau: f64,
    h: &CapField,
    g: &Grid,
    cfg: &JkoConfig,
) -> Result<JkoStep> {
    cfg.solver.validate()?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("step {tau} must be positive")));
    }
    let n = g.num_cells();
    if rho.len() != n || h.len() != n || spec.psi.len() != n {
        return Err(Error::Shape("density, cap or potential does not match grid".into()));
    }
    if matches!(g.topology(), Topology::SplitBox { .. }) {
        return Err(Error::Config("minimizing movements run on a box or torus".into()));
    }
    if rho.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(Error::Domain("density must be finite and nonnegative".into()));
    }
    if let Some(c) = (0..n).find(|&c| rho[c] > h.get(c) * (1.0 + 1e-12)) {
        return Err(Error::Infeasible(format!("density exceeds the cap in cell {c}")));
    }
    let inner = g.with_nt(cfg.nt_inner)?;
    let program = Program {
        grid: inner.clone(),
        rho0: rho.to_vec(),
        terminal: Terminal::FreeEnergy { weight: 2.0 * tau / inner.dt(), rt: spec.rt, psi: spec.psi.clone() },
        cell_cap: h.values().to_vec(),
        roles: kinetic_roles(&inner, &h.face_caps(&inner)),
        face_cap: implied_face_caps(h, &inner),
        integrand: Integrand::Perspective,
    };
    let out = transport::solve(&program, &cfg.solver.engine(), None)?;
    let last = out.state.rho[cfg.nt_inner * n..].to_vec();
    let before = spec.value(rho, g);
    let after = spec.value(&last, g);
    let rejected = after > before;
    Ok(JkoStep {
        rho: if rejected { rho.to_vec() } else { last },
        free_energy_before: before,
        free_energy_after: if rejected { before } else { after },
        transport_cost: if rejected { 0.0 } else { out.energy / (2.0 * tau) },
        residual: out.residual,
        converged: out.converged,
        rejected,
    })
}

fn check_slice(rho: &[f64], g: &Grid) -> Result<()> {
    if rho.len() != g.num_cells() {
        return Err(Error::Shape("density does not match grid".into()));
    }
    if rho.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(Error::Domain("density must be finite and nonnegative".into()));
    }
    Ok(())
}

fn pressure(r: f64, beta: f64, rt: f64) -> f64 {
    if beta == 0.0 {
        rt * r
    } else {
        rt / (1.0 - beta) * r.powf(1.0 - beta)
    }
}

/// Secant slope of `rho -> RT/(1-beta) rho^(1-beta)` across a face (its derivative when the
/// two densities agree); `None` when both vanish.
fn secant(a: f64, b: f64, beta: f64, rt: f64) -> Option<f64> {
    if a == b {
        if a == 0.0 && beta > 0.0 {
            return None;
        }
        return Some(rt * if beta == 0.0 { 1.0 } else { a.powf(-beta) });
    }
    Some((pressure(b, beta, rt) - pressure(a, beta, rt)) / (b - a))
}

/// Largest explicit step keeping the porous-medium update a convex combination:
/// `dt <= 1 / max_c sum_{faces f at c} D_f / dx_f^2` with `D_f` the secant
/// diffusivity `(P(rho_b) - P(rho_a)) / (rho_b - rho_a)` of `P = RT/(1-beta) rho^(1-beta)`.
/// Faces between two empty cells carry no flux and are skipped.
pub fn pme_cfl_limit(rho: &[f64], beta: f64, rt: f64, g: &Grid) -> Result<f64> {
    check_slice(rho, g)?;
    let mut load = vec![0.0f64; g.num_cells()];
    for f in g.faces().iter().filter(|f| f.is_interior()) {
        let (a, b) = (f.lo.unwrap(), f.hi.unwrap());
        if let Some(d) = secant(rho[a], rho[b], beta, rt) {
            let w = d / (g.dx()[f.axis] * g.dx()[f.axis]);
            load[a] += w;
            load[b] += w;
        }
    }
    let worst = load.iter().cloned().fold(0.0, f64::max);
    Ok(if worst > 0.0 { 1.0 / worst } else { f64::INFINITY })
}

#[derive(Clone, Debug)]
pub struct PmeStep {
    pub rho: Vec<f64>,
    /// Mass removed by clipping negative undershoot (then restored by rescaling).
    pub clipped: f64,
}

fn diffusion_step(rho: &[f64], beta: f64, rt: f64, dt: f64, g: &Grid) -> Result<PmeStep> {
    check_slice(rho, g)?;
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step {dt} must be positive")));
    }
    let limit = pme_cfl_limit(rho, beta, rt, g)?;
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, limit });
    }
    let p: Vec<f64> = rho.iter().map(|&r| pressure(r, beta, rt)).collect();
    let mut out = rho.to_vec();
    for f in g.faces().iter().filter(|f| f.is_interior()) {
        let (a, b) = (f.lo.unwrap(), f.hi.unwrap());
        let h = g.dx()[f.axis];
        let q = dt * (p[b] - p[a]) / (h * h);
        out[a] += q;
        out[b] -= q;
    }
    let mut clipped = 0.0;
    for v in out.iter_mut() {
        if *v < 0.0 {
            clipped -= *v;
            *v = 0.0;
        }
    }
    if clipped > 0.0 {
        let (before, after) = (slice_mass(rho, g), slice_mass(&out, g));
        let s = before / after;
        out.iter_mut().for_each(|v| *v *= s);
        clipped *= g.cell_volume();
    }
    Ok(PmeStep { rho: out, clipped })
}

/// Explicit conservative step of `d_t rho = RT/(1 - beta) Lap rho^(1 - beta)` on a box or torus.
pub fn pme_step(rho: &[f64], beta: f64, rt: f64, dt: f64, g: &Grid) -> Result<PmeStep> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("beta = {beta} outside (0, 1)")));
    }
    if !(rt > 0.0) {
        return Err(Error::Domain(format!("RT = {rt} must be positive")));
    }
    diffusion_step(rho, beta, rt, dt, g)
}

/// Energy dissipated by the porous-medium flow: `sum_c U(rho_c) * cell volume` with
/// `U(r) = -RT r^(1-beta) / (beta (1-beta))`, so that `r U''(r) = P'(r)`.
pub fn pme_energy(rho: &[f64], beta: f64, rt: f64, g: &Grid) -> Result<f64> {
    check_slice(rho, g)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("beta = {beta} outside (0, 1)")));
    }
    let k = -rt / (beta * (1.0 - beta));
    Ok(rho.iter().map(|r| k * r.powf(1.0 - beta)).sum::<f64>() * g.cell_volume())
}

/// Explicit step of the heat equation `d_t rho = RT Lap rho` (the `beta = 0` member).
pub fn heat_step(rho: &[f64], rt: f64, dt: f64, g: &Grid) -> Result<Vec<f64>> {
    if !(rt > 0.0) {
        return Err(Error::Domain(format!("RT = {rt} must be positive")));
    }
    diffusion_step(rho, 0.0, rt, dt, g).map(|s| s.rho)
}

/// How the membrane condition converts a chemical-potential jump into a mass flux.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TeorellConfig {
    /// `false`: flux `alpha [RT log rho + psi]` as printed. `true`: the density-gradient
    /// reading with an `RT` on the left, flux `alpha [RT log rho + psi] / RT`.
    pub teorell_rt_factor: bool,
}

fn log_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else if ((a - b) / (a + b)).abs() < 1e-6 {
        let m = 0.5 * (a + b);
        let d = (b - a) / (a + b);
        m * (1.0 - d * d / 3.0)
    } else {
        (b - a) / (b.ln() - a.ln())
    }
}

/// Chemical potential `RT log rho + psi` of an interface cell.
fn chemical_potential(rho: f64, rt: f64, psi: f64, cell: usize) -> Result<f64> {
    if !(rho > LOG_FLOOR) {
        return Err(Error::Vacuum(cell));
    }
    Ok(rt * rho.ln() + psi)
}

/// Mass flux from the minus to the plus side per unit membrane area.
pub fn teorell_flux(
    rho_minus: f64,
    rho_plus: f64,
    rt: f64,
    psi_minus: f64,
    psi_plus: f64,
    alpha: f64,
    cfg: &TeorellConfig,
) -> Result<f64> {
    let jump = chemical_potential(rho_minus, rt, psi_minus, 0)? - chemical_potential(rho_plus, rt, psi_plus, 0)?;
    Ok(alpha * jump / if cfg.teorell_rt_factor { rt } else { 1.0 })
}

/// Explicit step of `d_t rho = RT Lap rho + div(rho grad psi)` on both halves
/// of a split box, coupled by the Teorell flux through the membrane.
///
/// Interior fluxes use the logarithmic mean of the adjacent densities for the
/// drift, so `rho = exp((c - psi)/RT)` is an exact discrete equilibrium.
#[allow(clippy::too_many_arguments)]
pub fn teorell_step(
    rho_minus: &[f64],
    rho_plus: &[f64],
    spec_minus: &FreeEnergySpec,
    spec_plus: &FreeEnergySpec,
    alpha: f64,
    dt: f64,
    g: &Grid,
    cfg: &TeorellConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !matches!(g.topology(), Topology::SplitBox { .. }) {
        return Err(Error::Config("the membrane stepper needs a split box".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("permeability {alpha} must be nonnegative")));
    }
    if spec_minus.rt != spec_plus.rt {
        return Err(Error::Domain("both sides must share RT".into()));
    }
    let rt = spec_minus.rt;
    let rho = join_slices(rho_minus, rho_plus, g);
    let psi = join_slices(&spec_minus.psi, &spec_plus.psi, g);
    if rho_minus.len() + rho_plus.len() != g.num_cells()
        || spec_minus.psi.len() != rho_minus.len()
        || spec_plus.psi.len() != rho_plus.len()
    {
        return Err(Error::Shape("half slices do not match the split box".into()));
    }
    check_slice(&rho, g)?;
    let diffusive: f64 = g.dx().iter().map(|h| 2.0 * rt / (h * h)).sum();
    let limit = 1.0 / diffusive;
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, limit });
    }
    let mut out = rho.clone();
    for f in g.faces() {
        let (Some(a), Some(b)) = (f.lo, f.hi) else { continue };
        let h = g.dx()[f.axis];
        let flux = match f.kind {
            FaceKind::Interior => {
                -(rt * (rho[b] - rho[a]) + log_mean(rho[a], rho[b]) * (psi[b] - psi[a])) / h
            }
            FaceKind::Interface => {
                let jump = chemical_potential(rho[a], rt, psi[a], a)? - chemical_potential(rho[b], rt, psi[b], b)?;
                alpha * jump / if cfg.teorell_rt_factor { rt } else { 1.0 }
            }
            FaceKind::Boundary => continue,
        };
        let q = dt * flux / h;
        out[a] -= q;
        out[b] += q;
    }
    if let Some(c) = out.iter().position(|v| *v < 0.0) {
        return Err(Error::Vacuum(c));
    }
    Ok(split_slice(&out, g))
}
