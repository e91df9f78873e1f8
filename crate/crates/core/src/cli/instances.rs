//! Named, versioned problem instances.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{CapField, Grid};
use crate::membrane::{membrane_eps_cap, MembraneProblem};
use crate::solver::{SolverConfig, StarkCurve};

/// A capped transport problem with fixed endpoints.
#[derive(Clone, Debug)]
pub struct TransportInstance {
    pub name: String,
    pub description: String,
    pub grid: Grid,
    pub rho0: Vec<f64>,
    pub rho1: Vec<f64>,
    pub cap: CapField,
    /// Closed-form continuum energy, when known.
    pub reference: Option<f64>,
    pub solver: SolverConfig,
}

/// Stark constraint, `m = lambda = 1`: a point mass at the origin (held in the cell just left
/// of 0) spreads into the block `[0, 1]` under the cap 1 on `x > 0`. Domain `[-1/2, 3/2]`.
pub fn stark_v1(n: usize, nt: usize) -> Result<TransportInstance> {
    if !n.is_multiple_of(4) {
        return Err(Error::Config(format!("stark-v1 needs a multiple of 4 cells, got {n}")));
    }
    let grid = Grid::boxed(&[n], &[-0.5], &[1.5], nt)?;
    let curve = StarkCurve::new(1.0, 1.0)?;
    let rho0 = curve.sample(0.0, &grid)?;
    let rho1 = curve.sample(1.0, &grid)?;
    let cap = CapField::new(
        (0..n)
            .map(|c| if grid.cell_center(c)[0] > 0.0 { 1.0 } else { f64::INFINITY })
            .collect(),
    )?;
    Ok(TransportInstance {
        name: "stark-v1".into(),
        description: format!("stark constraint m = lambda = 1, box [-0.5, 1.5], N = {n}, nt = {nt}"),
        grid,
        rho0,
        rho1,
        cap,
        reference: Some(curve.energy()),
        solver: SolverConfig { tol_residual: 5e-2, tol_gap: 1e-6, ..SolverConfig::default() },
    })
}

/// Unit-mass block of width 1/4 translated by 1/2 in the box `[0, 1]`, no cap.
pub fn translation_v1(n: usize, nt: usize) -> Result<TransportInstance> {
    if !n.is_multiple_of(8) {
        return Err(Error::Config(format!("translation-v1 needs a multiple of 8 cells, got {n}")));
    }
    let grid = Grid::boxed(&[n], &[0.0], &[1.0], nt)?;
    let block = |lo: usize| -> Vec<f64> {
        (0..n).map(|c| if c >= lo && c < lo + n / 4 { 4.0 } else { 0.0 }).collect()
    };
    Ok(TransportInstance {
        name: "translation-v1".into(),
        description: format!("unit block [1/8, 3/8) translated by 1/2, unconstrained, N = {n}, nt = {nt}"),
        rho0: block(n / 8),
        rho1: block(5 * n / 8),
        cap: CapField::unconstrained(n),
        grid,
        reference: Some(0.25),
        solver: SolverConfig { pd_tau: 1.0, pd_sigma: 1.0, tol_residual: 5e-2, tol_gap: 1e-6, ..SolverConfig::default() },
    })
}

pub fn transport_instance(name: &str, n: Option<usize>, nt: Option<usize>) -> Result<TransportInstance> {
    match name {
        "stark-v1" => {
            let n = n.unwrap_or(512);
            stark_v1(n, nt.unwrap_or(n / 4))
        }
        "translation-v1" => translation_v1(n.unwrap_or(256), nt.unwrap_or(64)),
        _ => Err(Error::Config(format!("unknown transport instance {name}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MembraneShape {
    /// Unit density on `[-1, 0)` to unit density on `[0, 1)`.
    Block,
    /// Point mass just below the membrane to a point mass just above it.
    Point,
}

impl MembraneShape {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "block-membrane-v1" | "block" => Ok(MembraneShape::Block),
            "point-membrane-v1" | "point" => Ok(MembraneShape::Point),
            _ => Err(Error::Config(format!("unknown membrane instance {name}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MembraneShape::Block => "block-membrane-v1",
            MembraneShape::Point => "point-membrane-v1",
        }
    }

    /// Continuum cost of the membrane problem.
    pub fn reference(self, alpha: f64) -> f64 {
        match self {
            MembraneShape::Block => 1.0 + 1.0 / alpha,
            MembraneShape::Point => 1.0 / alpha,
        }
    }

    pub fn default_resolution(self) -> (usize, usize) {
        match self {
            MembraneShape::Block => (160, 64),
            MembraneShape::Point => (40, 16),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MembraneInstance {
    pub name: String,
    pub description: String,
    pub problem: MembraneProblem,
    pub reference: f64,
    pub solver: SolverConfig,
}

/// Limit problem on the split box `[-1, 1]` with the membrane at 0.
pub fn membrane_instance(shape: MembraneShape, alpha: f64, n: usize, nt: usize) -> Result<MembraneInstance> {
    if !n.is_multiple_of(2) {
        return Err(Error::Config(format!("membrane instances need an even cell count, got {n}")));
    }
    let grid = Grid::split(&[n], &[-1.0], &[1.0], nt)?;
    let h = grid.dx()[0];
    let (rho0, rho1): (Vec<f64>, Vec<f64>) = match shape {
        MembraneShape::Block => (
            (0..n).map(|c| if c < n / 2 { 1.0 } else { 0.0 }).collect(),
            (0..n).map(|c| if c >= n / 2 { 1.0 } else { 0.0 }).collect(),
        ),
        MembraneShape::Point => (
            (0..n).map(|c| if c == n / 2 - 1 { 1.0 / h } else { 0.0 }).collect(),
            (0..n).map(|c| if c == n / 2 { 1.0 / h } else { 0.0 }).collect(),
        ),
    };
    Ok(MembraneInstance {
        name: shape.name().into(),
        description: format!("{} limit, alpha = {alpha}, split box [-1, 1], N = {n}, nt = {nt}", shape.name()),
        problem: MembraneProblem::from_full(grid, alpha, &rho0, &rho1)?,
        reference: shape.reference(alpha),
        solver: SolverConfig::default(),
    })
}

/// The same transport on the glued box `[-1, 1 + eps]` where a strip of width `eps` and cap
/// `alpha eps` replaces the membrane and the plus-side endpoint is shifted by `eps`.
/// The cell width is `eps / cells_per_strip`.
pub fn glued_instance(
    shape: MembraneShape,
    alpha: f64,
    eps: f64,
    cells_per_strip: usize,
    nt: usize,
) -> Result<TransportInstance> {
    if !(eps > 0.0) || cells_per_strip == 0 {
        return Err(Error::Config("eps and the strip resolution must be positive".into()));
    }
    let dx = eps / cells_per_strip as f64;
    let cells = (2.0 + eps) / dx;
    if (cells - cells.round()).abs() > 1e-9 * cells {
        return Err(Error::NotGridAligned(format!("eps = {eps} with {cells_per_strip} cells per strip")));
    }
    let n = cells.round() as usize;
    let grid = Grid::boxed(&[n], &[-1.0], &[1.0 + eps], nt)?;
    let cap = membrane_eps_cap(alpha, eps, &grid)?;
    let h = grid.dx()[0];
    let x = |c: usize| grid.cell_center(c)[0];
    let (rho0, rho1): (Vec<f64>, Vec<f64>) = match shape {
        MembraneShape::Block => (
            (0..n).map(|c| if x(c) < 0.0 { 1.0 } else { 0.0 }).collect(),
            (0..n).map(|c| if x(c) > eps { 1.0 } else { 0.0 }).collect(),
        ),
        MembraneShape::Point => {
            let below = (0..n).rfind(|&c| x(c) < 0.0).expect("cells below the strip");
            let above = (0..n).find(|&c| x(c) > eps).expect("cells above the strip");
            (
                (0..n).map(|c| if c == below { 1.0 / h } else { 0.0 }).collect(),
                (0..n).map(|c| if c == above { 1.0 / h } else { 0.0 }).collect(),
            )
        }
    };
    Ok(TransportInstance {
        name: shape.name().into(),
        description: format!("{} on the glued box, alpha = {alpha}, eps = {eps}, N = {n}, nt = {nt}", shape.name()),
        grid,
        rho0,
        rho1,
        cap,
        reference: Some(shape.reference(alpha)),
        solver: SolverConfig { pd_tau: 0.1, pd_sigma: 10.0, max_iter: 4000, ..SolverConfig::default() },
    })
}

/// Periodic translation of a block at fixed mean density through a periodic cap.
#[derive(Clone, Debug, Serialize)]
pub struct HomogInstance {
    pub name: String,
    pub cells: usize,
    pub nt: usize,
    pub density: f64,
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub solver: SolverConfig,
}

impl HomogInstance {
    pub fn grid(&self) -> Result<Grid> {
        Grid::torus(&[self.cells], self.nt)
    }

    /// Indicator of `[lo, hi)` at cell centres.
    pub fn block(&self, g: &Grid, (lo, hi): (f64, f64)) -> Vec<bool> {
        (0..g.num_cells())
            .map(|c| {
                let x = g.cell_center(c)[0];
                x > lo && x < hi
            })
            .collect()
    }
}

/// Two-level cap `(1, 2)` on half cells; block `[1/4, 1/2)` to `[1/2, 3/4)` at mean density
/// 1.2 on a torus with 256 cells and 32 time steps.
pub fn twolevel_homog_v1() -> (CapField, HomogInstance) {
    let h = CapField::new(vec![1.0, 2.0]).expect("positive levels");
    let inst = HomogInstance {
        name: "twolevel-homog-v1".into(),
        cells: 256,
        nt: 32,
        density: 1.2,
        from: (0.25, 0.5),
        to: (0.5, 0.75),
        solver: SolverConfig { max_iter: 6000, tol_gap: 1e-7, ..SolverConfig::default() },
    };
    (h, inst)
}

/// Cap 1 with a centred square hole (cap 0) of side `side`, rounded to whole cells.
pub fn square_hole_cap(cell: &Grid, side: f64) -> Result<CapField> {
    if !(0.0..1.0).contains(&side) {
        return Err(Error::Domain(format!("hole side {side} outside [0, 1)")));
    }
    let values = (0..cell.num_cells())
        .map(|c| {
            let inside = cell
                .cell_center(c)
                .iter()
                .zip(cell.origin())
                .zip(cell.extent())
                .all(|((x, o), e)| ((x - o) / e - 0.5).abs() < 0.5 * side);
            if inside { 0.0 } else { 1.0 }
        })
        .collect();
    CapField::new(values)
}

/// Cap 1 on the lower half and 2 on the upper half of axis 0.
pub fn two_level_cap(cell: &Grid) -> Result<CapField> {
    let n0 = cell.cells_per_axis()[0];
    let values = (0..cell.num_cells())
        .map(|c| if cell.cell_multi_index(c)[0] < n0 / 2 { 1.0 } else { 2.0 })
        .collect();
    CapField::new(values)
}
