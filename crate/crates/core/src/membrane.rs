//! Two half-spaces coupled through a permeable membrane, the thin-strip caps
//! that approximate it, and the crossing-time density of its optimal plans.

use crate::error::{Error, Result};
use crate::grid::{slice_mass, CapField, FaceKind, Grid, InterfaceFlux, Topology};
use crate::solver::{assemble, implied_face_caps, Solution, SolverConfig};
use crate::transport::{self, FaceRole, Integrand, Program, Terminal};

/// Endpoint densities on the two sides of the membrane `x_d = 0`.
///
/// Each side is stored in row-major order over its own half-box (the cells
/// with `x_d < 0` for the minus side, `x_d > 0` for the plus side).
#[derive(Clone, Debug)]
pub struct MembraneProblem {
    pub rho0_minus: Vec<f64>,
    pub rho0_plus: Vec<f64>,
    pub rho1_minus: Vec<f64>,
    pub rho1_plus: Vec<f64>,
    pub alpha: f64,
    pub grid: Grid,
}

impl MembraneProblem {
    pub fn new(
        grid: Grid,
        alpha: f64,
        rho0_minus: Vec<f64>,
        rho0_plus: Vec<f64>,
        rho1_minus: Vec<f64>,
        rho1_plus: Vec<f64>,
    ) -> Result<Self> {
        let Topology::SplitBox { .. } = grid.topology() else {
            return Err(Error::Config("membrane problems live on a split box".into()));
        };
        if !(alpha > 0.0) {
            return Err(Error::Domain(format!("permeability must be positive, got {alpha}")));
        }
        let (lower, upper) = half_sizes(&grid);
        for (v, len) in [(&rho0_minus, lower), (&rho1_minus, lower), (&rho0_plus, upper), (&rho1_plus, upper)] {
            if v.len() != len {
                return Err(Error::Shape(format!("half-box slice has {} cells, expected {len}", v.len())));
            }
        }
        let p = MembraneProblem { rho0_minus, rho0_plus, rho1_minus, rho1_plus, alpha, grid };
        let (m0, m1) = (slice_mass(&p.rho0(), &p.grid), slice_mass(&p.rho1(), &p.grid));
        if (m0 - m1).abs() > 1e-10 * m0.abs().max(m1.abs()).max(1e-300) {
            return Err(Error::Infeasible(format!("endpoint masses differ: {m0} vs {m1}")));
        }
        Ok(p)
    }

    /// Builds the problem from full-grid slices, splitting them at the membrane.
    pub fn from_full(grid: Grid, alpha: f64, rho0: &[f64], rho1: &[f64]) -> Result<Self> {
        if rho0.len() != grid.num_cells() || rho1.len() != grid.num_cells() {
            return Err(Error::Shape("endpoint slices do not match grid".into()));
        }
        let (a0, b0) = split_slice(rho0, &grid);
        let (a1, b1) = split_slice(rho1, &grid);
        Self::new(grid, alpha, a0, b0, a1, b1)
    }

    pub fn rho0(&self) -> Vec<f64> {
        join_slices(&self.rho0_minus, &self.rho0_plus, &self.grid)
    }

    pub fn rho1(&self) -> Vec<f64> {
        join_slices(&self.rho1_minus, &self.rho1_plus, &self.grid)
    }
}

pub(crate) fn half_sizes(g: &Grid) -> (usize, usize) {
    let Topology::SplitBox { interface_layer } = g.topology() else { unreachable!() };
    let cells = g.cells_per_axis();
    let d = cells.len() - 1;
    let cross: usize = cells[..d].iter().product();
    (cross * interface_layer, cross * (cells[d] - interface_layer))
}

pub(crate) fn split_slice(full: &[f64], g: &Grid) -> (Vec<f64>, Vec<f64>) {
    let (mut lower, mut upper) = (Vec::new(), Vec::new());
    for (c, v) in full.iter().enumerate() {
        if g.is_lower_side(c) {
            lower.push(*v);
        } else {
            upper.push(*v);
        }
    }
    (lower, upper)
}

pub(crate) fn join_slices(lower: &[f64], upper: &[f64], g: &Grid) -> Vec<f64> {
    let (mut a, mut b) = (lower.iter(), upper.iter());
    (0..g.num_cells())
        .map(|c| if g.is_lower_side(c) { *a.next().unwrap() } else { *b.next().unwrap() })
        .collect()
}

/// Minimises the sum of the kinetic actions on both sides plus `(1/alpha) int f^2`
/// over flux-coupled trajectories. The returned solution carries the interface flux
/// (positive from the minus to the plus side); momenta on interface faces are zero.
pub fn solve_membrane_limit(p: &MembraneProblem, cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    let g = &p.grid;
    let n = g.num_cells();
    let weight = 1.0 / (g.dx()[g.dim() - 1] * p.alpha);
    let cap = CapField::unconstrained(n);
    let roles = g
        .faces()
        .iter()
        .map(|f| match f.kind {
            FaceKind::Interior => FaceRole::Kinetic,
            FaceKind::Interface => FaceRole::Membrane { weight },
            FaceKind::Boundary => FaceRole::Closed,
        })
        .collect();
    let program = Program {
        grid: g.clone(),
        rho0: p.rho0(),
        terminal: Terminal::Fixed(p.rho1()),
        cell_cap: cap.values().to_vec(),
        face_cap: implied_face_caps(&cap, g),
        roles,
        integrand: Integrand::Perspective,
    };
    let out = transport::solve(&program, &cfg.engine(), None)?;
    let nf = g.num_faces();
    let iface = g.interface_faces();
    let flux_values: Vec<f64> = (0..g.nt())
        .flat_map(|k| iface.iter().map(move |&j| (k, j)))
        .map(|(k, j)| out.state.v[k * nf + j])
        .collect();
    let flux = InterfaceFlux::from_values(g, flux_values)?;
    let mut sol = assemble(g, out, Some(flux))?;
    crate::solver::boundary_warning(&sol.rho, g, &mut sol.warnings);
    Ok(sol)
}

/// Cap `alpha * eps` on the strip `0 < x_d < eps`, unconstrained elsewhere.
pub fn membrane_eps_cap(alpha: f64, eps: f64, g: &Grid) -> Result<CapField> {
    if !(alpha > 0.0 && eps > 0.0) {
        return Err(Error::Domain("alpha and eps must be positive".into()));
    }
    let d = g.dim() - 1;
    let h = g.dx()[d];
    let layers = eps / h;
    if (layers - layers.round()).abs() > 1e-9 * layers.max(1.0) || layers.round() < 1.0 {
        return Err(Error::NotGridAligned(format!("strip width {eps} (cell width {h})")));
    }
    let start = g
        .layer_at(0.0)
        .ok_or_else(|| Error::NotGridAligned("membrane position x_d = 0".into()))?;
    let layers = layers.round() as usize;
    if start + layers > g.cells_per_axis()[d] {
        return Err(Error::Domain("strip extends past the domain".into()));
    }
    let values = (0..g.num_cells())
        .map(|c| {
            let i = g.cell_multi_index(c)[d];
            if i >= start && i < start + layers {
                alpha * eps
            } else {
                f64::INFINITY
            }
        })
        .collect();
    CapField::new(values)
}

/// Density of crossing coordinates `(t0, x~0)` of an optimal membrane plan.
pub fn crossing_density(alpha: f64, c: f64, t0: f64, x0: &[f64]) -> Result<f64> {
    if !(t0 > 0.0 && t0 < 1.0) {
        return Err(Error::Domain(format!("crossing time {t0} outside (0, 1)")));
    }
    let r2: f64 = x0.iter().map(|x| x * x).sum();
    Ok((c - 0.5 * alpha * r2 * (1.0 / t0 + 1.0 / (1.0 - t0))).max(0.0))
}

/// Integral of `crossing_density` over `(0, 1) x R^k` by midpoint quadrature in
/// time and radius on the (truncated) support disk.
pub fn crossing_mass(alpha: f64, c: f64, k: usize) -> Result<f64> {
    const NT: usize = 2000;
    const NR: usize = 400;
    let sphere = match k {
        0 => 1.0,
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => return Err(Error::Domain("tangent dimension above 3 not supported".into())),
    };
    let mut total = 0.0;
    for i in 0..NT {
        let t = (i as f64 + 0.5) / NT as f64;
        if k == 0 {
            total += crossing_density(alpha, c, t, &[])?;
            continue;
        }
        let s = 0.5 * alpha * (1.0 / t + 1.0 / (1.0 - t));
        let radius = (c / s).sqrt();
        let dr = radius / NR as f64;
        let mut inner = 0.0;
        for j in 0..NR {
            let r = (j as f64 + 0.5) * dr;
            inner += crossing_density(alpha, c, t, &[r])? * r.powi(k as i32 - 1);
        }
        total += sphere * inner * dr;
    }
    Ok(total / NT as f64)
}

/// The constant `c` for which the crossing density integrates to one.
pub fn normalize_crossing(alpha: f64, k: usize) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain("alpha must be positive".into()));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while crossing_mass(alpha, hi, k)? < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if crossing_mass(alpha, mid, k)? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
