//! Staggered space-time grids and the discrete continuity equation.
//!
//! Densities live at cell centres and integer time levels `0..=nt`; momenta
//! live on faces and half-integer time levels, one slab per time step. With
//! this placement the discrete continuity equation
//!
//! ```text
//! (rho[k+1] - rho[k]) / dt + div V[k+1/2] = 0
//! ```
//!
//! is an exact linear constraint. Cells are indexed row-major with the last
//! axis fastest. On a split box the hyperplane between layers
//! `interface_layer - 1` and `interface_layer` of the last axis is a membrane:
//! momentum does not cross it, an [`InterfaceFlux`] does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Unit-periodic in every axis.
    Periodic,
    /// Bounded box with no-flux walls.
    Box,
    /// Two boxes glued along the last axis at `interface_layer`.
    SplitBox { interface_layer: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceKind {
    Interior,
    /// No-flux wall; carries no momentum.
    Boundary,
    /// Membrane face of a split box; carries the interface flux instead of momentum.
    Interface,
}

#[derive(Clone, Copy, Debug)]
pub struct Face {
    pub axis: usize,
    /// Cell on the negative side (the face is its upper face).
    pub lo: Option<usize>,
    /// Cell on the positive side (the face is its lower face).
    pub hi: Option<usize>,
    pub kind: FaceKind,
}

impl Face {
    /// True when both sides exist and the face is an ordinary interior face.
    pub fn is_interior(&self) -> bool {
        self.kind == FaceKind::Interior
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    cells: Vec<usize>,
    dx: Vec<f64>,
    origin: Vec<f64>,
    nt: usize,
    topology: Topology,
    faces: Vec<Face>,
    cell_face_start: Vec<usize>,
    cell_face_list: Vec<(usize, f64)>,
    interface_faces: Vec<usize>,
}

impl Grid {
    /// General constructor: `cells[a]` cells spanning `[lower[a], upper[a])` on each axis.
    pub fn new(
        cells: &[usize],
        lower: &[f64],
        upper: &[f64],
        nt: usize,
        topology: Topology,
    ) -> Result<Self> {
        let dim = cells.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("dimension {dim} not supported (1 or 2)")));
        }
        if lower.len() != dim || upper.len() != dim {
            return Err(Error::Shape("extent does not match dimension".into()));
        }
        if cells.iter().any(|&n| n < 2) {
            return Err(Error::Config("at least 2 cells per axis required".into()));
        }
        if nt < 1 {
            return Err(Error::Config("nt must be at least 1".into()));
        }
        let dx: Vec<f64> = (0..dim)
            .map(|a| (upper[a] - lower[a]) / cells[a] as f64)
            .collect();
        if dx.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Config("degenerate extent".into()));
        }
        if let Topology::SplitBox { interface_layer } = topology {
            if interface_layer == 0 || interface_layer >= cells[dim - 1] {
                return Err(Error::Config(format!(
                    "interface layer {interface_layer} must lie strictly inside the last axis"
                )));
            }
        }

        let mut grid = Grid {
            cells: cells.to_vec(),
            dx,
            origin: lower.to_vec(),
            nt,
            topology,
            faces: Vec::new(),
            cell_face_start: Vec::new(),
            cell_face_list: Vec::new(),
            interface_faces: Vec::new(),
        };
        grid.build_faces();
        Ok(grid)
    }

    /// Unit torus `[0,1)^d`.
    pub fn torus(cells: &[usize], nt: usize) -> Result<Self> {
        let lower = vec![0.0; cells.len()];
        let upper = vec![1.0; cells.len()];
        Self::new(cells, &lower, &upper, nt, Topology::Periodic)
    }

    /// No-flux box.
    pub fn boxed(cells: &[usize], lower: &[f64], upper: &[f64], nt: usize) -> Result<Self> {
        Self::new(cells, lower, upper, nt, Topology::Box)
    }

    /// Split box whose membrane sits at coordinate 0 of the last axis.
    pub fn split(cells: &[usize], lower: &[f64], upper: &[f64], nt: usize) -> Result<Self> {
        let d = cells.len() - 1;
        let h = (upper[d] - lower[d]) / cells[d] as f64;
        let layer = -lower[d] / h;
        let rounded = layer.round();
        if (layer - rounded).abs() > 1e-9 || rounded <= 0.0 {
            return Err(Error::NotGridAligned("membrane position x_d = 0".into()));
        }
        Self::new(
            cells,
            lower,
            upper,
            nt,
            Topology::SplitBox { interface_layer: rounded as usize },
        )
    }

    fn build_faces(&mut self) {
        let dim = self.dim();
        let n_cells = self.num_cells();
        let mut faces = Vec::new();
        for axis in 0..dim {
            let n = self.cells[axis];
            let periodic = self.topology == Topology::Periodic;
            let nf = if periodic { n } else { n + 1 };
            let mut shape = self.cells.clone();
            shape[axis] = nf;
            let total: usize = shape.iter().product();
            for lin in 0..total {
                let idx = unravel(lin, &shape);
                let p = idx[axis];
                let mut lo_idx = idx.clone();
                let mut hi_idx = idx.clone();
                let (lo, hi) = if periodic {
                    lo_idx[axis] = (p + n - 1) % n;
                    hi_idx[axis] = p;
                    (Some(ravel(&lo_idx, &self.cells)), Some(ravel(&hi_idx, &self.cells)))
                } else {
                    let lo = (p >= 1).then(|| {
                        lo_idx[axis] = p - 1;
                        ravel(&lo_idx, &self.cells)
                    });
                    let hi = (p < n).then(|| {
                        hi_idx[axis] = p;
                        ravel(&hi_idx, &self.cells)
                    });
                    (lo, hi)
                };
                let kind = match (lo, hi, self.topology) {
                    (None, _, _) | (_, None, _) => FaceKind::Boundary,
                    (_, _, Topology::SplitBox { interface_layer })
                        if axis == dim - 1 && p == interface_layer =>
                    {
                        FaceKind::Interface
                    }
                    _ => FaceKind::Interior,
                };
                faces.push(Face { axis, lo, hi, kind });
            }
        }

        let mut per_cell: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_cells];
        for (j, f) in faces.iter().enumerate() {
            if let Some(c) = f.lo {
                per_cell[c].push((j, 1.0));
            }
            if let Some(c) = f.hi {
                per_cell[c].push((j, -1.0));
            }
        }
        self.cell_face_start = Vec::with_capacity(n_cells + 1);
        self.cell_face_list.clear();
        for list in per_cell {
            self.cell_face_start.push(self.cell_face_list.len());
            self.cell_face_list.extend(list);
        }
        self.cell_face_start.push(self.cell_face_list.len());
        self.interface_faces = faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FaceKind::Interface)
            .map(|(j, _)| j)
            .collect();
        self.faces = faces;
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.nt as f64
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn extent(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|a| self.dx[a] * self.cells[a] as f64)
            .collect()
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx.iter().product()
    }

    /// (d-1)-dimensional area of a face normal to `axis`; 1 in one dimension.
    pub fn face_area(&self, axis: usize) -> f64 {
        self.dx
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != axis)
            .map(|(_, h)| h)
            .product()
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Faces bounding cell `c`, with sign +1 where the face is the cell's upper face.
    pub fn cell_faces(&self, c: usize) -> &[(usize, f64)] {
        &self.cell_face_list[self.cell_face_start[c]..self.cell_face_start[c + 1]]
    }

    pub fn interface_faces(&self) -> &[usize] {
        &self.interface_faces
    }

    pub fn cell_index(&self, idx: &[usize]) -> usize {
        ravel(idx, &self.cells)
    }

    pub fn cell_multi_index(&self, c: usize) -> Vec<usize> {
        unravel(c, &self.cells)
    }

    pub fn cell_center(&self, c: usize) -> Vec<f64> {
        let idx = self.cell_multi_index(c);
        (0..self.dim())
            .map(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.dx[a])
            .collect()
    }

    /// Index of the layer along the last axis whose lower face sits at `x`.
    pub fn layer_at(&self, x: f64) -> Option<usize> {
        let d = self.dim() - 1;
        let p = (x - self.origin[d]) / self.dx[d];
        let r = p.round();
        ((p - r).abs() < 1e-9 && r >= 0.0 && r <= self.cells[d] as f64).then_some(r as usize)
    }

    /// True for cells on the lower side of the membrane; always false off split boxes.
    pub fn is_lower_side(&self, c: usize) -> bool {
        match self.topology {
            Topology::SplitBox { interface_layer } => {
                let d = self.dim() - 1;
                self.cell_multi_index(c)[d] < interface_layer
            }
            _ => false,
        }
    }

    /// Same grid with a different number of time steps.
    pub fn with_nt(&self, nt: usize) -> Result<Self> {
        let upper: Vec<f64> = (0..self.dim())
            .map(|a| self.origin[a] + self.dx[a] * self.cells[a] as f64)
            .collect();
        Self::new(&self.cells, &self.origin, &upper, nt, self.topology)
    }
}

pub(crate) fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

pub(crate) fn unravel(mut lin: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = lin % shape[a];
        lin /= shape[a];
    }
    idx
}

/// Per-cell density caps. `f64::INFINITY` means unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct CapField {
    values: Vec<f64>,
    alpha: Option<f64>,
}

impl CapField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::Domain(format!("cap value {v} is not in [0, inf]")));
        }
        Ok(CapField { values, alpha: None })
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn unconstrained(n: usize) -> Self {
        CapField { values: vec![f64::INFINITY; n], alpha: None }
    }

    /// Declares the homogenization bounds: every finite nonzero cap must lie in `[alpha, 1/alpha]`.
    pub fn with_bounds(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Domain(format!("alpha = {alpha} outside (0, 1]")));
        }
        for &v in &self.values {
            if v.is_finite() && v != 0.0 && (v < alpha * (1.0 - 1e-12) || v > (1.0 + 1e-12) / alpha) {
                return Err(Error::Domain(format!(
                    "cap value {v} outside [{alpha}, {}]",
                    1.0 / alpha
                )));
            }
        }
        self.alpha = Some(alpha);
        Ok(self)
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, c: usize) -> f64 {
        self.values[c]
    }

    /// Face caps: minimum of the adjacent cell caps.
    pub fn face_caps(&self, grid: &Grid) -> Vec<f64> {
        grid.faces()
            .iter()
            .map(|f| match (f.lo, f.hi) {
                (Some(a), Some(b)) => self.values[a].min(self.values[b]),
                (Some(a), None) | (None, Some(a)) => self.values[a],
                (None, None) => 0.0,
            })
            .collect()
    }

    /// Integral of the cap over the grid.
    pub fn integral(&self, grid: &Grid) -> f64 {
        self.values.iter().sum::<f64>() * grid.cell_volume()
    }
}

/// Density trajectory: `nt + 1` time levels of per-cell densities (mass per unit volume).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    levels: usize,
    cells: usize,
    values: Vec<f64>,
}

impl DensityField {
    pub fn zeros(grid: &Grid) -> Self {
        let levels = grid.nt() + 1;
        let cells = grid.num_cells();
        DensityField { levels, cells, values: vec![0.0; levels * cells] }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        let levels = grid.nt() + 1;
        let cells = grid.num_cells();
        if values.len() != levels * cells {
            return Err(Error::Shape(format!(
                "density has {} values, grid expects {}x{}",
                values.len(),
                levels,
                cells
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("negative or NaN density".into()));
        }
        Ok(DensityField { levels, cells, values })
    }

    /// Builds a trajectory by evaluating `f(t_index)` for every level.
    pub fn from_slices<F: FnMut(usize) -> Vec<f64>>(grid: &Grid, mut f: F) -> Result<Self> {
        let mut values = Vec::with_capacity((grid.nt() + 1) * grid.num_cells());
        for t in 0..=grid.nt() {
            let s = f(t);
            if s.len() != grid.num_cells() {
                return Err(Error::Shape("slice length".into()));
            }
            values.extend(s);
        }
        Self::from_values(grid, values)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn num_cells(&self) -> usize {
        self.cells
    }

    pub fn slice(&self, t: usize) -> &[f64] {
        &self.values[t * self.cells..(t + 1) * self.cells]
    }

    pub fn slice_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.cells..(t + 1) * self.cells]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn from_raw(levels: usize, cells: usize, values: Vec<f64>) -> Self {
        DensityField { levels, cells, values }
    }

    /// Time-reversed copy.
    pub fn reversed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for t in (0..self.levels).rev() {
            values.extend_from_slice(self.slice(t));
        }
        DensityField { levels: self.levels, cells: self.cells, values }
    }

    /// Largest cap violation `max(rho - h, 0)` over all levels.
    pub fn cap_violation(&self, cap: &CapField) -> f64 {
        let mut worst = 0.0f64;
        for t in 0..self.levels {
            for (r, h) in self.slice(t).iter().zip(cap.values()) {
                worst = worst.max(r - h);
            }
        }
        worst
    }
}

/// Face momenta on `nt` half-integer time slabs.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumField {
    slabs: usize,
    faces: usize,
    values: Vec<f64>,
}

impl MomentumField {
    pub fn zeros(grid: &Grid) -> Self {
        MomentumField {
            slabs: grid.nt(),
            faces: grid.num_faces(),
            values: vec![0.0; grid.nt() * grid.num_faces()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nt() * grid.num_faces() {
            return Err(Error::Shape(format!(
                "momentum has {} values, grid expects {}x{}",
                values.len(),
                grid.nt(),
                grid.num_faces()
            )));
        }
        Ok(MomentumField { slabs: grid.nt(), faces: grid.num_faces(), values })
    }

    pub fn slabs(&self) -> usize {
        self.slabs
    }

    pub fn num_faces(&self) -> usize {
        self.faces
    }

    pub fn slab(&self, k: usize) -> &[f64] {
        &self.values[k * self.faces..(k + 1) * self.faces]
    }

    pub fn slab_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.faces..(k + 1) * self.faces]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, s: f64) -> Self {
        MomentumField {
            slabs: self.slabs,
            faces: self.faces,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Slab order reversed and sign flipped: the momentum of the time-reversed curve.
    pub fn reversed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for k in (0..self.slabs).rev() {
            values.extend(self.slab(k).iter().map(|v| -v));
        }
        MomentumField { slabs: self.slabs, faces: self.faces, values }
    }
}

/// Signed flux through the membrane faces of a split box, positive from the
/// lower side into the upper side.
#[derive(Clone, Debug, PartialEq)]
pub struct InterfaceFlux {
    slabs: usize,
    faces: usize,
    values: Vec<f64>,
}

impl InterfaceFlux {
    pub fn zeros(grid: &Grid) -> Result<Self> {
        Self::from_values(grid, vec![0.0; grid.nt() * grid.interface_faces().len()])
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if !matches!(grid.topology(), Topology::SplitBox { .. }) {
            return Err(Error::Config("interface flux requires a split-box grid".into()));
        }
        let faces = grid.interface_faces().len();
        if values.len() != grid.nt() * faces {
            return Err(Error::Shape("interface flux shape".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite interface flux".into()));
        }
        Ok(InterfaceFlux { slabs: grid.nt(), faces, values })
    }

    pub fn slab(&self, k: usize) -> &[f64] {
        &self.values[k * self.faces..(k + 1) * self.faces]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_faces(&self) -> usize {
        self.faces
    }

    pub fn reversed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for k in (0..self.slabs).rev() {
            values.extend(self.slab(k).iter().map(|v| -v));
        }
        InterfaceFlux { slabs: self.slabs, faces: self.faces, values }
    }

    /// Discrete L2 norm squared: sum of f^2 * area * dt.
    pub fn l2_squared(&self, grid: &Grid) -> f64 {
        let area = grid.face_area(grid.dim() - 1);
        self.values.iter().map(|f| f * f).sum::<f64>() * area * grid.dt()
    }
}

/// Finite-volume divergence of one momentum slab. Boundary and membrane faces contribute nothing.
pub fn divergence_slab(v: &[f64], grid: &Grid) -> Result<Vec<f64>> {
    if v.len() != grid.num_faces() {
        return Err(Error::Shape(format!(
            "slab has {} faces, grid has {}",
            v.len(),
            grid.num_faces()
        )));
    }
    let faces = grid.faces();
    let out = (0..grid.num_cells())
        .map(|c| {
            grid.cell_faces(c)
                .iter()
                .filter(|(j, _)| faces[*j].is_interior())
                .map(|&(j, s)| s * v[j] / grid.dx()[faces[j].axis])
                .sum()
        })
        .collect();
    Ok(out)
}

/// Divergence of every slab, `nt x cells`, row-major.
pub fn divergence(v: &MomentumField, grid: &Grid) -> Result<Vec<f64>> {
    if v.slabs() != grid.nt() || v.num_faces() != grid.num_faces() {
        return Err(Error::Shape("momentum field does not match grid".into()));
    }
    let mut out = Vec::with_capacity(grid.nt() * grid.num_cells());
    for k in 0..grid.nt() {
        out.extend(divergence_slab(v.slab(k), grid)?);
    }
    Ok(out)
}

/// Max over `(t, cell)` of the discrete continuity defect, in density per unit time.
///
/// The membrane flux enters the two membrane-adjacent cells as a source of
/// `-f / dx_d` below and `+f / dx_d` above.
pub fn continuity_residual(
    rho: &DensityField,
    v: &MomentumField,
    flux: Option<&InterfaceFlux>,
    grid: &Grid,
) -> Result<f64> {
    if rho.levels() != grid.nt() + 1 || rho.num_cells() != grid.num_cells() {
        return Err(Error::Shape("density field does not match grid".into()));
    }
    let split = matches!(grid.topology(), Topology::SplitBox { .. });
    match (split, flux) {
        (false, Some(_)) => {
            return Err(Error::Config("interface flux given on a grid without membrane".into()))
        }
        (true, Some(f)) if f.num_faces() != grid.interface_faces().len() => {
            return Err(Error::Shape("interface flux does not match grid".into()))
        }
        _ => {}
    }
    let div = divergence(v, grid)?;
    let dt = grid.dt();
    let n = grid.num_cells();
    let hd = grid.dx()[grid.dim() - 1];
    let mut worst = 0.0f64;
    for k in 0..grid.nt() {
        let mut src = vec![0.0; n];
        if let Some(f) = flux {
            for (i, &j) in grid.interface_faces().iter().enumerate() {
                let face = grid.faces()[j];
                let fv = f.slab(k)[i] / hd;
                src[face.lo.unwrap()] += fv;
                src[face.hi.unwrap()] -= fv;
            }
        }
        let (a, b) = (rho.slice(k), rho.slice(k + 1));
        for c in 0..n {
            let r = (b[c] - a[c]) / dt + div[k * n + c] + src[c];
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Total mass of level `t`.
pub fn total_mass(rho: &DensityField, t: usize, grid: &Grid) -> Result<f64> {
    if t >= rho.levels() {
        return Err(Error::Domain(format!("time level {t} out of range")));
    }
    Ok(slice_mass(rho.slice(t), grid))
}

pub fn slice_mass(slice: &[f64], grid: &Grid) -> f64 {
    slice.iter().sum::<f64>() * grid.cell_volume()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn face_layout_1d_box() {
        let g = Grid::boxed(&[4], &[0.0], &[1.0], 2).unwrap();
        assert_eq!(g.num_faces(), 5);
        assert_eq!(g.faces()[0].kind, FaceKind::Boundary);
        assert_eq!(g.faces()[4].kind, FaceKind::Boundary);
        assert_eq!(g.faces()[2].lo, Some(1));
        assert_eq!(g.faces()[2].hi, Some(2));
    }

    #[test]
    fn face_layout_2d_torus() {
        let g = Grid::torus(&[3, 4], 1).unwrap();
        assert_eq!(g.num_faces(), 24);
        for c in 0..g.num_cells() {
            assert_eq!(g.cell_faces(c).len(), 4);
        }
    }

    #[test]
    fn split_box_records_interface() {
        let g = Grid::split(&[3, 4], &[0.0, -1.0], &[1.0, 1.0], 1).unwrap();
        assert_eq!(g.topology(), Topology::SplitBox { interface_layer: 2 });
        assert_eq!(g.interface_faces().len(), 3);
        for &j in g.interface_faces() {
            let f = g.faces()[j];
            assert!(g.is_lower_side(f.lo.unwrap()));
            assert!(!g.is_lower_side(f.hi.unwrap()));
        }
        assert!(Grid::split(&[3], &[-0.25], &[1.0], 1).is_err());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::torus(&[1], 4).is_err());
        assert!(Grid::torus(&[4], 0).is_err());
        assert!(Grid::torus(&[2, 2, 2], 1).is_err());
    }

    #[test]
    fn constant_field_on_torus_is_divergence_free() {
        let g = Grid::torus(&[5, 3], 1).unwrap();
        let v = vec![0.7; g.num_faces()];
        let d = divergence_slab(&v, &g).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn single_face_unit_flux() {
        let g = Grid::boxed(&[4], &[0.0], &[1.0], 1).unwrap();
        let d = divergence_slab(&[0.0, 1.0, 0.0, 0.0, 0.0], &g).unwrap();
        let h = g.dx()[0];
        assert_eq!(d, vec![1.0 / h, -1.0 / h, 0.0, 0.0]);
    }

    #[test]
    fn divergence_shape_mismatch() {
        let g = Grid::boxed(&[4], &[0.0], &[1.0], 1).unwrap();
        assert!(divergence_slab(&[0.0; 4], &g).is_err());
    }

    #[test]
    fn static_density_has_zero_residual() {
        let g = Grid::torus(&[6], 3).unwrap();
        let rho = DensityField::from_slices(&g, |_| vec![1.0; 6]).unwrap();
        let v = MomentumField::zeros(&g);
        assert_eq!(continuity_residual(&rho, &v, None, &g).unwrap(), 0.0);
    }

    #[test]
    fn translation_of_two_cell_block() {
        // One cell per time step at speed dx/dt: the block moves exactly one
        // cell, and the upwind momentum V = rho_left * v balances it exactly.
        // With the centred face average (rho_L + rho_R)/2 the defect is
        // |v| / (2 dx) * jump, which is first order in the block profile.
        let n = 8;
        let g = Grid::torus(&[n], n).unwrap();
        let h = g.dx()[0];
        let speed = h / g.dt();
        let block = |t: usize| {
            let mut s = vec![0.0; n];
            s[t % n] = 1.0;
            s[(t + 1) % n] = 1.0;
            s
        };
        let rho = DensityField::from_slices(&g, block).unwrap();
        let mut upwind = MomentumField::zeros(&g);
        for k in 0..n {
            let s = block(k);
            for (j, f) in g.faces().iter().enumerate() {
                upwind.slab_mut(k)[j] = s[f.lo.unwrap()] * speed;
            }
        }
        let r = continuity_residual(&rho, &upwind, None, &g).unwrap();
        assert!(r < 1e-9, "upwind residual {r}");

        let mut centred = MomentumField::zeros(&g);
        for k in 0..n {
            let (a, b) = (block(k), block(k + 1));
            for (j, f) in g.faces().iter().enumerate() {
                let (l, rr) = (f.lo.unwrap(), f.hi.unwrap());
                centred.slab_mut(k)[j] = 0.25 * (a[l] + a[rr] + b[l] + b[rr]) * speed;
            }
        }
        let r = continuity_residual(&rho, &centred, None, &g).unwrap();
        // Analytic defect for the leading cell: rate 1/dt minus net flux (3/4 - 1/4) v / dx.
        let expected = 1.0 / g.dt() - 0.5 * speed / h;
        assert!((r - expected.abs()).abs() < 1e-9, "{r} vs {expected}");
    }

    #[test]
    fn membrane_drain_is_balanced() {
        let nt = 4;
        let g = Grid::split(&[2], &[-1.0], &[1.0], nt).unwrap();
        let h = g.dx()[0];
        let rho = DensityField::from_slices(&g, |t| {
            let s = t as f64 / nt as f64;
            vec![(1.0 - s) / h, s / h]
        })
        .unwrap();
        let v = MomentumField::zeros(&g);
        let f = InterfaceFlux::from_values(&g, vec![1.0; nt]).unwrap();
        assert!(continuity_residual(&rho, &v, Some(&f), &g).unwrap() < 1e-12);
    }

    #[test]
    fn flux_requires_split_box() {
        let g = Grid::torus(&[4], 2).unwrap();
        assert!(InterfaceFlux::zeros(&g).is_err());
    }

    #[test]
    fn total_mass_examples() {
        let g = Grid::torus(&[10], 1).unwrap();
        let rho = DensityField::from_slices(&g, |_| vec![1.0; 10]).unwrap();
        assert!((total_mass(&rho, 0, &g).unwrap() - 1.0).abs() < 1e-14);
        let mut s = vec![0.0; 10];
        s[3] = 2.5 / g.cell_volume();
        let rho = DensityField::from_slices(&g, |_| s.clone()).unwrap();
        assert!((total_mass(&rho, 1, &g).unwrap() - 2.5).abs() < 1e-13);
        assert!(total_mass(&rho, 2, &g).is_err());
    }

    #[test]
    fn face_caps_take_minimum() {
        let g = Grid::boxed(&[3], &[0.0], &[1.0], 1).unwrap();
        let cap = CapField::new(vec![f64::INFINITY, 2.0, 0.5]).unwrap();
        let fc = cap.face_caps(&g);
        assert_eq!(fc[1], 2.0);
        assert_eq!(fc[2], 0.5);
        assert!(CapField::new(vec![-1.0]).is_err());
        assert!(CapField::new(vec![0.3]).unwrap().with_bounds(0.5).is_err());
        assert!(CapField::new(vec![0.0, 1.5, f64::INFINITY]).unwrap().with_bounds(0.5).is_ok());
    }

    fn random_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, n)
    }

    proptest! {
        #[test]
        fn divergence_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64,
                                v1 in random_vec(24), v2 in random_vec(24)) {
            let g = Grid::torus(&[4, 3], 1).unwrap();
            let comb: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect();
            let d = divergence_slab(&comb, &g).unwrap();
            let d1 = divergence_slab(&v1, &g).unwrap();
            let d2 = divergence_slab(&v2, &g).unwrap();
            for i in 0..d.len() {
                prop_assert!((d[i] - (a * d1[i] + b * d2[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn torus_divergence_sums_to_zero(v in random_vec(24)) {
            let g = Grid::torus(&[4, 3], 1).unwrap();
            let d = divergence_slab(&v, &g).unwrap();
            let s: f64 = d.iter().sum::<f64>() * g.cell_volume();
            prop_assert!(s.abs() < 1e-12);
        }

        #[test]
        fn residual_is_time_reversal_invariant(r in prop::collection::vec(0.0..2.0f64, 20),
                                               v in prop::collection::vec(-1.0..1.0f64, 18),
                                               f in prop::collection::vec(-1.0..1.0f64, 3)) {
            let g = Grid::split(&[5], &[-1.0], &[1.5], 3).unwrap();
            let rho = DensityField::from_values(&g, r).unwrap();
            let mom = MomentumField::from_values(&g, v).unwrap();
            let flux = InterfaceFlux::from_values(&g, f).unwrap();
            let a = continuity_residual(&rho, &mom, Some(&flux), &g).unwrap();
            let b = continuity_residual(&rho.reversed(), &mom.reversed(), Some(&flux.reversed()), &g).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
        }
    }
}
