//! Homogenized integrand: the periodic cell problem, its one-dimensional
//! closed form by water-filling, and the homogenized space-time solver.
//!
//! The unit cell is a periodic grid ([`Grid::torus`]); a flow on it is one
//! value per face. The discrete cell functional is
//!
//! ```text
//! sum_f W_f^2 / nu_f / N,    nu_f = harmonic mean of the two adjacent cells,
//! ```
//!
//! which equals `sum_c a_c / nu_c / N` with `a_c = (1/2) sum_{f at c} W_f^2`.
//! It is jointly convex in `(nu, W)`, and in one dimension it reduces exactly
//! to `F(m) U^2`.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{CapField, Grid, Topology};
use crate::solver::{assemble, check_endpoints, Solution, SolverConfig};
use crate::transport::{self, FaceRole, Integrand, Mobility, Program, Terminal};

/// Stopping rules of the alternating minimisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellConfig {
    /// Stop when the relative value change drops below this.
    pub tol_gap: f64,
    pub max_iter: usize,
    /// Relative residual of the corrector solves.
    pub cg_tol: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig { tol_gap: 1e-10, max_iter: 500, cg_tol: 1e-12 }
    }
}

#[derive(Clone, Debug)]
pub struct CellProblemSolution {
    pub value: f64,
    /// Density per cell of the unit cell; its mean is `m`.
    pub nu: Vec<f64>,
    /// Flow per face of the unit cell; divergence free with mean `U`.
    pub w: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Value after each flow update; nonincreasing.
    pub history: Vec<f64>,
}

/// Levels `nu_c = min(h_c, s w_c)` with `sum nu = target`. Cells with
/// `w_c = 0` receive only what the others cannot hold, at a common level.
fn fill(w: &[f64], h: &[f64], target: f64) -> Vec<f64> {
    let weighted: f64 = w.iter().zip(h).filter(|(w, _)| **w > 0.0).map(|(_, h)| h).sum();
    if weighted <= target {
        let rest = target - weighted;
        let idle: Vec<f64> = w.iter().map(|&w| if w > 0.0 { 0.0 } else { 1.0 }).collect();
        let extra = if rest > 0.0 && idle.iter().any(|&v| v > 0.0) {
            fill(&idle, h, rest)
        } else {
            vec![0.0; w.len()]
        };
        return w
            .iter()
            .zip(h)
            .zip(extra)
            .map(|((&w, &h), e)| if w > 0.0 { h } else { e })
            .collect();
    }
    let total = |s: f64| -> f64 { w.iter().zip(h).map(|(&w, &h)| h.min(s * w)).sum() };
    let mut hi = 0.0f64;
    let mut unbounded = 0.0;
    for (&w, &h) in w.iter().zip(h) {
        if w > 0.0 {
            if h.is_finite() {
                hi = hi.max(h / w);
            } else {
                unbounded += w;
            }
        }
    }
    if unbounded > 0.0 {
        hi = hi.max(target / unbounded);
    }
    let mut lo = 0.0;
    while hi - lo > f64::EPSILON * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Exact level on the active set found by bisection.
    let clamped = |w: f64, h: f64| w > 0.0 && h <= hi * w;
    let (mut held, mut free) = (0.0, 0.0);
    for (&w, &h) in w.iter().zip(h) {
        if clamped(w, h) {
            held += h;
        } else {
            free += w;
        }
    }
    let s = if free > 0.0 { (target - held) / free } else { hi };
    w.iter()
        .zip(h)
        .map(|(&w, &h)| if clamped(w, h) { h } else { (s * w).min(h) })
        .collect()
}

/// Minimiser of `int 1/nu` over `nu <= h`, `int nu = m` on the unit interval,
/// with `h` given per cell of a uniform partition. Returns `(nu, F(m))`.
pub fn water_fill_1d(m: f64, h: &CapField) -> Result<(Vec<f64>, f64)> {
    let n = h.len();
    if n == 0 {
        return Err(Error::Shape("empty cap".into()));
    }
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Domain(format!("mass {m} must be positive")));
    }
    if h.values().iter().any(|&v| v <= 0.0) {
        return Err(Error::Disconnected("the cap vanishes somewhere on the cell".into()));
    }
    let integral = h.values().iter().sum::<f64>() / n as f64;
    if m > integral * (1.0 + 1e-12) {
        return Err(Error::Infeasible(format!("mass {m} exceeds cap integral {integral}")));
    }
    let nu = fill(&vec![1.0; n], h.values(), m * n as f64);
    let f = nu.iter().map(|v| 1.0 / v).sum::<f64>() / n as f64;
    Ok((nu, f))
}

/// Euclidean projection onto `{0 <= nu <= h, sum nu = target}`.
fn project_box_sum(y: &[f64], h: &[f64], target: f64) -> Vec<f64> {
    let total = |l: f64| -> f64 { y.iter().zip(h).map(|(v, c)| (v - l).clamp(0.0, *c)).sum() };
    let span = y.iter().fold(0.0f64, |a, v| a.max(v.abs())) + h.iter().fold(0.0f64, |a, v| a.max(*v));
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let l = 0.5 * (lo + hi);
    y.iter().zip(h).map(|(v, c)| (v - l).clamp(0.0, *c)).collect()
}

/// One-dimensional cell problem as the transport engine discretises it: the
/// cap is refined `refine` times and each face sees the mean of its two cells,
/// `F_r(m) = min mean_f 2 / (nu_c + nu_{c+1})`. Tends to [`water_fill_1d`] as
/// `refine` grows.
pub fn water_fill_faces(m: f64, h: &CapField, refine: usize) -> Result<(Vec<f64>, f64)> {
    if refine == 0 {
        return Err(Error::Config("refine must be positive".into()));
    }
    let (start, _) = water_fill_1d(m, h)?;
    let caps: Vec<f64> = h.values().iter().flat_map(|&v| std::iter::repeat_n(v, refine)).collect();
    let n = caps.len();
    let target = m * n as f64;
    let mut nu: Vec<f64> = start.iter().flat_map(|&v| std::iter::repeat_n(v, refine)).collect();
    let objective = |nu: &[f64]| -> f64 {
        (0..n).map(|c| 2.0 / (nu[c] + nu[(c + 1) % n])).sum::<f64>() / n as f64
    };
    let gradient = |nu: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; n];
        for c in 0..n {
            let d = c + 1 - if c + 1 == n { n } else { 0 };
            let s = nu[c] + nu[d];
            let t = -2.0 / (s * s) / n as f64;
            g[c] += t;
            g[d] += t;
        }
        g
    };
    let mut value = objective(&nu);
    let mut grad = gradient(&nu);
    let mut step = 0.25 * m * m * m;
    for _ in 0..20_000 {
        let trial_point = |step: f64| -> Vec<f64> {
            let y: Vec<f64> = nu.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
            project_box_sum(&y, &caps, target)
        };
        let mut next = trial_point(step);
        let mut next_value = objective(&next);
        while next_value > value && step > 1e-300 {
            step *= 0.5;
            next = trial_point(step);
            next_value = objective(&next);
        }
        let moved: f64 = next.iter().zip(&nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let next_grad = gradient(&next);
        let ds: Vec<f64> = next.iter().zip(&nu).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = ds.iter().zip(&dg).map(|(a, b)| a * b).sum();
        let ss: f64 = ds.iter().map(|a| a * a).sum();
        nu = next;
        grad = next_grad;
        value = next_value;
        if moved <= 1e-14 * (1.0 + m) {
            break;
        }
        if sy > 0.0 {
            step = ss / sy;
        }
    }
    Ok((nu, value))
}

struct Cell<'a> {
    grid: &'a Grid,
    n: usize,
    /// `(lo, hi, axis, 1 / dx_axis)` per face.
    faces: Vec<(usize, usize, usize, f64)>,
}

impl<'a> Cell<'a> {
    fn new(grid: &'a Grid) -> Result<Self> {
        if grid.topology() != Topology::Periodic {
            return Err(Error::Config("the unit cell must be periodic".into()));
        }
        if grid.extent().iter().any(|e| (e - 1.0).abs() > 1e-12) {
            return Err(Error::Config("the unit cell must have unit extent".into()));
        }
        let faces = grid
            .faces()
            .iter()
            .map(|f| (f.lo.unwrap(), f.hi.unwrap(), f.axis, 1.0 / grid.dx()[f.axis]))
            .collect();
        Ok(Cell { grid, n: grid.num_cells(), faces })
    }

    fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// True when the face crosses the periodic seam of its axis.
    fn wraps(&self, j: usize) -> bool {
        let (lo, hi, a, _) = self.faces[j];
        let shape = self.grid.cells_per_axis();
        let il = self.grid.cell_multi_index(lo)[a];
        let ih = self.grid.cell_multi_index(hi)[a];
        il == shape[a] - 1 && ih == 0
    }

    fn mean(&self, w: &[f64], axis: usize) -> f64 {
        self.faces
            .iter()
            .zip(w)
            .filter(|(f, _)| f.2 == axis)
            .map(|(_, v)| v)
            .sum::<f64>()
            / self.n as f64
    }

    fn divergence(&self, w: &[f64]) -> Vec<f64> {
        let mut div = vec![0.0; self.n];
        for (&(lo, hi, _, inv), v) in self.faces.iter().zip(w) {
            div[lo] += v * inv;
            div[hi] -= v * inv;
        }
        div
    }

    fn face_conductivity(&self, nu: &[f64]) -> Vec<f64> {
        self.faces
            .iter()
            .map(|&(lo, hi, _, _)| {
                let (a, b) = (nu[lo], nu[hi]);
                if a > 0.0 && b > 0.0 {
                    2.0 * a * b / (a + b)
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn value(&self, w: &[f64], kf: &[f64]) -> f64 {
        w.iter()
            .zip(kf)
            .filter(|(_, k)| **k > 0.0)
            .map(|(w, k)| w * w / k)
            .sum::<f64>()
            / self.n as f64
    }

    /// `x -> D^T diag(k) D x` with `D` the face gradient.
    fn apply(&self, kf: &[f64], x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (&(lo, hi, _, inv), k) in self.faces.iter().zip(kf) {
            let g = k * (x[hi] - x[lo]) * inv * inv;
            out[hi] += g;
            out[lo] -= g;
        }
    }

    /// Corrector for direction `e_axis`: minimises `sum_f k_f (delta_{a(f), axis} + (D psi)_f)^2`.
    fn corrector(&self, kf: &[f64], axis: usize, tol: f64) -> Vec<f64> {
        let n = self.n;
        let mut b = vec![0.0; n];
        let mut diag = vec![0.0; n];
        for (&(lo, hi, a, inv), k) in self.faces.iter().zip(kf) {
            if a == axis {
                b[hi] -= k * inv;
                b[lo] += k * inv;
            }
            diag[lo] += k * inv * inv;
            diag[hi] += k * inv * inv;
        }
        conjugate_gradient(|x, out| self.apply(kf, x, out), &b, &diag, tol)
    }

    /// Face gradient of `psi`.
    fn gradient(&self, psi: &[f64]) -> Vec<f64> {
        self.faces.iter().map(|&(lo, hi, _, inv)| (psi[hi] - psi[lo]) * inv).collect()
    }

    /// Optimal divergence-free flow with mean `u` for fixed conductivities.
    fn flow(&self, kf: &[f64], u: &[f64], tol: f64) -> Result<Vec<f64>> {
        let d = self.dim();
        let grads: Vec<Vec<f64>> = (0..d).map(|j| self.gradient(&self.corrector(kf, j, tol))).collect();
        let mut a = vec![vec![0.0; d]; d];
        for (f, &(_, _, ax, _)) in self.faces.iter().enumerate() {
            for j in 0..d {
                let e = if ax == j { 1.0 } else { 0.0 };
                a[ax][j] += kf[f] * (e + grads[j][f]);
            }
        }
        for row in a.iter_mut() {
            for v in row.iter_mut() {
                *v /= self.n as f64;
            }
        }
        let c = solve_small(&a, u)?;
        Ok(self
            .faces
            .iter()
            .enumerate()
            .map(|(f, &(_, _, ax, _))| {
                let mut s = c[ax];
                for j in 0..d {
                    s += c[j] * grads[j][f];
                }
                kf[f] * s
            })
            .collect())
    }

    fn support(&self, h: &CapField) -> Vec<bool> {
        h.values().iter().map(|&v| v > 0.0).collect()
    }

    fn check_connected(&self, support: &[bool]) -> Result<()> {
        let Some(start) = support.iter().position(|&s| s) else {
            return Err(Error::Disconnected("the cap vanishes everywhere".into()));
        };
        let mut seen = vec![false; self.n];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            for &(j, _) in self.grid.cell_faces(c) {
                let (lo, hi, _, _) = self.faces[j];
                let other = if lo == c { hi } else { lo };
                if support[other] && !seen[other] {
                    seen[other] = true;
                    queue.push_back(other);
                }
            }
        }
        if support.iter().zip(&seen).any(|(s, v)| *s && !v) {
            return Err(Error::Disconnected("{h > 0} is not connected".into()));
        }
        Ok(())
    }

    /// Shortest closed lattice path through the support winding once around
    /// `axis` and zero times around the others, as `(face, orientation)` steps.
    fn shortest_cycle(&self, support: &[bool], axis: usize) -> Option<Vec<(usize, f64)>> {
        let d = self.dim();
        let copies = 3usize.pow(d as u32);
        let lift = |wind: &[i32]| wind.iter().fold(0usize, |acc, &w| acc * 3 + (w + 1) as usize);
        let mut target_wind = vec![0i32; d];
        target_wind[axis] = 1;
        let target_copy = lift(&target_wind);
        let mut best: Option<Vec<(usize, f64)>> = None;
        for s in (0..self.n).filter(|&c| support[c] && self.grid.cell_multi_index(c)[axis] == 0) {
            let states = self.n * copies;
            let mut parent: Vec<Option<(usize, usize, f64)>> = vec![None; states];
            let mut seen = vec![false; states];
            let origin = s * copies + lift(&vec![0; d]);
            seen[origin] = true;
            let mut queue = VecDeque::from([origin]);
            let goal = s * copies + target_copy;
            while let Some(state) = queue.pop_front() {
                if state == goal {
                    break;
                }
                let (c, copy) = (state / copies, state % copies);
                let mut wind = vec![0i32; d];
                let mut rest = copy;
                for a in (0..d).rev() {
                    wind[a] = (rest % 3) as i32 - 1;
                    rest /= 3;
                }
                for &(j, _) in self.grid.cell_faces(c) {
                    let (lo, hi, a, _) = self.faces[j];
                    let (other, sign) = if lo == c { (hi, 1.0) } else { (lo, -1.0) };
                    if !support[other] {
                        continue;
                    }
                    let mut nw = wind.clone();
                    if self.wraps(j) {
                        nw[a] += sign as i32;
                    }
                    if nw[a].abs() > 1 {
                        continue;
                    }
                    let next = other * copies + lift(&nw);
                    if !seen[next] {
                        seen[next] = true;
                        parent[next] = Some((state, j, sign));
                        queue.push_back(next);
                    }
                }
            }
            if !seen[goal] {
                continue;
            }
            let mut path = Vec::new();
            let mut at = goal;
            while let Some((prev, j, sign)) = parent[at] {
                path.push((j, sign));
                at = prev;
            }
            if best.as_ref().is_none_or(|b| path.len() < b.len()) {
                best = Some(path);
            }
        }
        best
    }

    /// For each cell and axis, the face on its upper side.
    fn upper_faces(&self) -> Vec<Vec<usize>> {
        let mut up = vec![vec![usize::MAX; self.n]; self.dim()];
        for (j, &(lo, _, a, _)) in self.faces.iter().enumerate() {
            up[a][lo] = j;
        }
        up
    }
}

fn conjugate_gradient<F: Fn(&[f64], &mut [f64])>(apply: F, b: &[f64], diag: &[f64], tol: f64) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return x;
    }
    let precond = |r: &[f64], z: &mut [f64]| {
        for ((z, r), d) in z.iter_mut().zip(r).zip(diag) {
            *z = if *d > 0.0 { r / d } else { 0.0 };
        }
    };
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..10 * n + 100 {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= tol * bnorm {
            break;
        }
        precond(&r, &mut z);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

fn solve_small(a: &[Vec<f64>], u: &[f64]) -> Result<Vec<f64>> {
    match a.len() {
        1 => {
            if a[0][0] <= 0.0 {
                return Err(Error::Disconnected("no flow can reach the requested mean".into()));
            }
            Ok(vec![u[0] / a[0][0]])
        }
        2 => {
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if !(det > 0.0) {
                return Err(Error::Disconnected("no flow can reach the requested mean".into()));
            }
            Ok(vec![
                (a[1][1] * u[0] - a[0][1] * u[1]) / det,
                (a[0][0] * u[1] - a[1][0] * u[0]) / det,
            ])
        }
        d => Err(Error::Config(format!("cell dimension {d} not supported"))),
    }
}

fn check_cell_mass(m: f64, h: &CapField, cell: &Grid) -> Result<()> {
    if h.len() != cell.num_cells() {
        return Err(Error::Shape("cap does not match the unit cell".into()));
    }
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Domain(format!("mass {m} must be positive")));
    }
    let integral = h.values().iter().sum::<f64>() / h.len() as f64;
    if m > integral * (1.0 + 1e-12) {
        return Err(Error::Infeasible(format!("mass {m} exceeds cap integral {integral}")));
    }
    Ok(())
}

/// Value of the cell problem `inf { int |W|^2 / nu : nu <= h, int nu = m, div W = 0, mean W = U }`.
///
/// Alternates exact minimisation over the flow (corrector solves) and over the
/// density (water-filling against the local flow intensity).
pub fn f_hom_eval(m: f64, u: &[f64], h: &CapField, cell: &Grid, cfg: &CellConfig) -> Result<CellProblemSolution> {
    let c = Cell::new(cell)?;
    if u.len() != c.dim() {
        return Err(Error::Shape("U does not match the cell dimension".into()));
    }
    check_cell_mass(m, h, cell)?;
    let support = c.support(h);
    c.check_connected(&support)?;
    for a in 0..c.dim() {
        if c.shortest_cycle(&support, a).is_none() {
            return Err(Error::Disconnected(format!("{{h > 0}} does not wrap around axis {a}")));
        }
    }
    let n = c.n;
    let target = m * n as f64;
    let ones: Vec<f64> = support.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let mut nu = fill(&ones, h.values(), target);
    if u.iter().all(|&v| v == 0.0) {
        return Ok(CellProblemSolution {
            value: 0.0,
            nu,
            w: vec![0.0; cell.num_faces()],
            iterations: 0,
            converged: true,
            history: vec![0.0],
        });
    }

    let kf = c.face_conductivity(&nu);
    let mut w = c.flow(&kf, u, cfg.cg_tol)?;
    let mut value = c.value(&w, &kf);
    let mut history = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut load = vec![0.0; n];
        for (&(lo, hi, _, _), v) in c.faces.iter().zip(&w) {
            load[lo] += 0.5 * v * v;
            load[hi] += 0.5 * v * v;
        }
        let weights: Vec<f64> = load.iter().map(|l| l.sqrt()).collect();
        let nu_new = fill(&weights, h.values(), target);
        let kf_new = c.face_conductivity(&nu_new);
        let w_new = c.flow(&kf_new, u, cfg.cg_tol)?;
        let v_new = c.value(&w_new, &kf_new);
        if !(v_new < value) {
            converged = true;
            break;
        }
        let change = (value - v_new) / value;
        nu = nu_new;
        w = w_new;
        value = v_new;
        history.push(value);
        if change < cfg.tol_gap {
            converged = true;
            break;
        }
    }
    Ok(CellProblemSolution { value, nu, w, iterations, converged, history })
}

/// Divergence-free flow supported in `{h > 0}` with mean `U`.
#[derive(Clone, Debug)]
pub struct FeasibleFlow {
    pub w: Vec<f64>,
    /// `mean |W|^2 / |U|^2`.
    pub energy_ratio: f64,
    /// Empirical constant `C` with `f_hom(m, U) <= C |U|^2 / m` for every feasible `m`.
    pub constant: f64,
}

/// Superposes one shortest winding cycle per axis, weighted by `U`, then
/// lowers the energy by Gauss-Seidel sweeps over elementary plaquette loops
/// inside the support (each sweep keeps divergence and mean).
pub fn build_feasible_flow(u: &[f64], h: &CapField, cell: &Grid) -> Result<FeasibleFlow> {
    let c = Cell::new(cell)?;
    if u.len() != c.dim() || h.len() != c.n {
        return Err(Error::Shape("U or cap does not match the unit cell".into()));
    }
    let support = c.support(h);
    c.check_connected(&support)?;
    let shape = cell.cells_per_axis().to_vec();
    let mut w = vec![0.0; cell.num_faces()];
    for (a, &ua) in u.iter().enumerate() {
        let cycle = c.shortest_cycle(&support, a).ok_or_else(|| Error::Disconnected(format!("{{h > 0}} does not wrap around axis {a}")))?;
        let amp = ua * c.n as f64 / shape[a] as f64;
        for (j, sign) in cycle {
            w[j] += sign * amp;
        }
    }
    if c.dim() == 2 {
        let up = c.upper_faces();
        for _ in 0..200 {
            for base in 0..c.n {
                let idx = cell.cell_multi_index(base);
                let right = cell.cell_index(&[(idx[0] + 1) % shape[0], idx[1]]);
                let top = cell.cell_index(&[idx[0], (idx[1] + 1) % shape[1]]);
                let diag = cell.cell_index(&[(idx[0] + 1) % shape[0], (idx[1] + 1) % shape[1]]);
                if ![base, right, top, diag].iter().all(|&q| support[q]) {
                    continue;
                }
                let loop_faces = [(up[0][base], 1.0), (up[1][right], 1.0), (up[0][top], -1.0), (up[1][base], -1.0)];
                let circ: f64 = loop_faces.iter().map(|&(j, s)| s * w[j]).sum();
                let delta = -0.25 * circ;
                for (j, s) in loop_faces {
                    w[j] += s * delta;
                }
            }
        }
    }
    let u2: f64 = u.iter().map(|v| v * v).sum();
    let norm2 = w.iter().map(|v| v * v).sum::<f64>() / c.n as f64;
    let energy_ratio = if u2 > 0.0 { norm2 / u2 } else { 1.0 };
    let supp_frac = support.iter().filter(|&&s| s).count() as f64 / c.n as f64;
    let positive = h.values().iter().filter(|&&v| v > 0.0);
    let h_min = positive.clone().cloned().fold(f64::INFINITY, f64::min);
    let integral = h.values().iter().sum::<f64>() / c.n as f64;
    let spread = if h_min.is_finite() { (integral / (h_min * supp_frac)).max(1.0) } else { 1.0 };
    Ok(FeasibleFlow { w, energy_ratio, constant: supp_frac * energy_ratio * spread })
}

/// Divergence of a face field on the unit cell.
pub fn cell_divergence(w: &[f64], cell: &Grid) -> Result<Vec<f64>> {
    let c = Cell::new(cell)?;
    if w.len() != cell.num_faces() {
        return Err(Error::Shape("flow does not match the unit cell".into()));
    }
    Ok(c.divergence(w))
}

/// Mean of a face field along `axis` on the unit cell.
pub fn cell_mean(w: &[f64], cell: &Grid, axis: usize) -> Result<f64> {
    let c = Cell::new(cell)?;
    if w.len() != cell.num_faces() || axis >= c.dim() {
        return Err(Error::Shape("flow does not match the unit cell".into()));
    }
    Ok(c.mean(w, axis))
}

/// Tiles the unit-cell cap `1/eps` times per axis over the periodic grid `g`.
pub fn periodic_cap(h_cell: &CapField, cell: &Grid, eps: f64, g: &Grid) -> Result<CapField> {
    if g.topology() != Topology::Periodic || cell.topology() != Topology::Periodic {
        return Err(Error::Config("periodic caps need periodic grids".into()));
    }
    if g.dim() != cell.dim() || h_cell.len() != cell.num_cells() {
        return Err(Error::Shape("cell cap does not match".into()));
    }
    let k = (1.0 / eps).round();
    if !(eps > 0.0) || ((1.0 / eps) - k).abs() > 1e-9 || k < 1.0 {
        return Err(Error::NotGridAligned(format!("1/eps = {} is not an integer", 1.0 / eps)));
    }
    let k = k as usize;
    let mut refine = Vec::new();
    for (a, &n) in g.cells_per_axis().iter().enumerate() {
        let nc = cell.cells_per_axis()[a];
        if n % k != 0 || !(n / k).is_multiple_of(nc) {
            return Err(Error::NotGridAligned(format!(
                "axis {a}: {n} cells do not resolve {k} periods of {nc} cells"
            )));
        }
        refine.push(n / k / nc);
    }
    let values = (0..g.num_cells())
        .map(|c| {
            let idx: Vec<usize> = g
                .cell_multi_index(c)
                .iter()
                .enumerate()
                .map(|(a, &i)| (i / refine[a]) % cell.cells_per_axis()[a])
                .collect();
            h_cell.get(cell.cell_index(&idx))
        })
        .collect();
    CapField::new(values)
}

/// Samples of the one-dimensional `F(m)` for a fixed cell cap.
#[derive(Clone, Debug, PartialEq)]
pub struct FhomTable {
    pub m: Vec<f64>,
    pub f: Vec<f64>,
}

impl FhomTable {
    /// Evaluates `F` by water-filling at `samples` equispaced masses in `(0, int h]`.
    pub fn build(h: &CapField, samples: usize) -> Result<Self> {
        if samples < 2 {
            return Err(Error::Config("a table needs at least 2 samples".into()));
        }
        let top = h.values().iter().sum::<f64>() / h.len() as f64;
        if !top.is_finite() {
            return Err(Error::Domain("the cell cap must be finite".into()));
        }
        let m: Vec<f64> = (1..=samples).map(|i| top * i as f64 / samples as f64).collect();
        let f = m.iter().map(|&mi| water_fill_1d(mi, h).map(|r| r.1)).collect::<Result<_>>()?;
        Ok(FhomTable { m, f })
    }

    /// Like [`FhomTable::build`], with [`water_fill_faces`] at refinement `refine`.
    pub fn build_discrete(h: &CapField, refine: usize, samples: usize) -> Result<Self> {
        let coarse = Self::build(h, samples)?;
        let f = coarse
            .m
            .iter()
            .map(|&mi| water_fill_faces(mi, h, refine).map(|r| r.1))
            .collect::<Result<_>>()?;
        Ok(FhomTable { m: coarse.m, f })
    }

    pub fn max_mass(&self) -> f64 {
        *self.m.last().unwrap()
    }

    fn validate(&self) -> Result<()> {
        if self.m.len() < 2 || self.m.len() != self.f.len() {
            return Err(Error::Shape("table needs matching columns of length >= 2".into()));
        }
        if self.m[0] <= 0.0 || self.m.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Domain("table masses must be positive and increasing".into()));
        }
        if self.f.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("table values must be positive".into()));
        }
        Ok(())
    }

    /// `F` decreasing and `1/F` concave on the samples (against the chord of the neighbours).
    pub fn check_shape(&self, tol: f64) -> Result<()> {
        self.validate()?;
        if self.f.windows(2).any(|p| p[1] > p[0] * (1.0 + tol)) {
            return Err(Error::Domain("F is not decreasing".into()));
        }
        let g: Vec<f64> = self.f.iter().map(|v| 1.0 / v).collect();
        for i in 1..g.len() - 1 {
            let s = (self.m[i] - self.m[i - 1]) / (self.m[i + 1] - self.m[i - 1]);
            let chord = (1.0 - s) * g[i - 1] + s * g[i + 1];
            if g[i] < chord - tol * chord.abs() {
                return Err(Error::Domain(format!("1/F is not concave at m = {}", self.m[i])));
            }
        }
        Ok(())
    }

    /// `F(m)`: the reciprocal of the piecewise-linear interpolant of `1/F` through `(0, 0)`.
    pub fn eval(&self, m: f64) -> Result<f64> {
        if !(m >= 0.0) || m > self.max_mass() * (1.0 + 1e-12) {
            return Err(Error::TableRange { value: m, max: self.max_mass() });
        }
        let (g, _) = self.mobility().eval(m.min(self.max_mass()));
        Ok(1.0 / g)
    }

    pub(crate) fn mobility(&self) -> Mobility {
        let mut m = vec![0.0];
        let mut g = vec![0.0];
        m.extend(&self.m);
        g.extend(self.f.iter().map(|v| 1.0 / v));
        Mobility { m, g }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("m,F\n");
        for (m, f) in self.m.iter().zip(&self.f) {
            writeln!(s, "{m:.17e},{f:.17e}").unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut m = Vec::new();
        let mut f = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with('m')) {
                continue;
            }
            let mut parts = line.split(',');
            let mut next = || -> Result<f64> {
                parts
                    .next()
                    .and_then(|p| p.trim().parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad table line {}: {line}", i + 1)))
            };
            m.push(next()?);
            f.push(next()?);
        }
        let table = FhomTable { m, f };
        table.validate()?;
        Ok(table)
    }
}

/// Energy of the homogenized problem: `sum V^2 F(m)` with face mass `m`,
/// on a one-dimensional torus.
pub fn solve_homogenized_1d(
    rho0: &[f64],
    rho1: &[f64],
    table: &FhomTable,
    g: &Grid,
    cfg: &SolverConfig,
) -> Result<Solution> {
    cfg.validate()?;
    table.validate()?;
    if g.dim() != 1 || g.topology() != Topology::Periodic {
        return Err(Error::Config("the homogenized solver runs on a 1D torus".into()));
    }
    let top = table.max_mass();
    let cap = CapField::uniform(g.num_cells(), top)?;
    for &v in rho0.iter().chain(rho1) {
        if v > top * (1.0 + 1e-12) {
            return Err(Error::TableRange { value: v, max: top });
        }
    }
    check_endpoints(rho0, rho1, &cap, g)?;
    let program = Program {
        grid: g.clone(),
        rho0: rho0.to_vec(),
        terminal: Terminal::Fixed(rho1.to_vec()),
        cell_cap: cap.values().to_vec(),
        face_cap: vec![top; g.num_faces()],
        roles: vec![FaceRole::Kinetic; g.num_faces()],
        integrand: Integrand::Mobility(table.mobility()),
    };
    let out = transport::solve(&program, &cfg.engine(), None)?;
    assemble(g, out, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_level(n: usize) -> CapField {
        CapField::new((0..n).map(|i| if i < n / 2 { 1.0 } else { 2.0 }).collect()).unwrap()
    }

    #[test]
    fn water_fill_examples() {
        let (nu, f) = water_fill_1d(0.5, &CapField::uniform(8, 1.0).unwrap()).unwrap();
        assert!(nu.iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!((f - 2.0).abs() < 1e-14);

        let (nu, f) = water_fill_1d(1.2, &two_level(2)).unwrap();
        assert!((nu[0] - 1.0).abs() < 1e-14 && (nu[1] - 1.4).abs() < 1e-14);
        assert!((f - 6.0 / 7.0).abs() < 1e-12);

        let (_, f) = water_fill_1d(1.0, &two_level(10)).unwrap();
        assert!((f - 1.0).abs() < 1e-14);
    }

    #[test]
    fn water_fill_rejects_bad_mass() {
        let h = two_level(4);
        assert!(matches!(water_fill_1d(1.6, &h), Err(Error::Infeasible(_))));
        assert!(matches!(water_fill_1d(0.0, &h), Err(Error::Domain(_))));
        let holey = CapField::new(vec![1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(water_fill_1d(0.3, &holey), Err(Error::Disconnected(_))));
    }

    #[test]
    fn fill_handles_idle_cells_and_infinite_caps() {
        let nu = fill(&[1.0, 0.0, 2.0], &[0.5, 3.0, 1.0], 2.0);
        assert!((nu.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        assert_eq!(nu[0], 0.5);
        assert_eq!(nu[2], 1.0);
        let nu = fill(&[1.0, 1.0], &[f64::INFINITY, 0.25], 3.0);
        assert!((nu[0] - 2.75).abs() < 1e-14 && nu[1] == 0.25);
    }

    #[test]
    fn free_cell_gives_jensen_value() {
        let cell = Grid::torus(&[6, 6], 1).unwrap();
        let h = CapField::uniform(36, 1.0).unwrap();
        let sol = f_hom_eval(0.5, &[1.0, 0.0], &h, &cell, &CellConfig::default()).unwrap();
        assert!((sol.value - 2.0).abs() < 1e-10, "{}", sol.value);
    }

    #[test]
    fn one_dimensional_cell_matches_water_fill() {
        let cell = Grid::torus(&[10], 1).unwrap();
        let h = two_level(10);
        for m in [0.3, 1.0, 1.2, 1.45] {
            let (_, f) = water_fill_1d(m, &h).unwrap();
            let sol = f_hom_eval(m, &[1.7], &h, &cell, &CellConfig::default()).unwrap();
            assert!((sol.value - f * 1.7 * 1.7).abs() < 1e-9, "m={m}: {} vs {}", sol.value, f * 2.89);
        }
    }

    /// Centered square exclusion covering `[lo, hi)^2` cells.
    fn square_hole(n: usize, lo: usize, hi: usize) -> CapField {
        CapField::new(
            (0..n * n)
                .map(|c| {
                    let (i, j) = (c / n, c % n);
                    if (lo..hi).contains(&i) && (lo..hi).contains(&j) { 0.0 } else { 1.0 }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn obstacle_costs_more_and_flow_is_admissible() {
        let n = 16;
        let cell = Grid::torus(&[n, n], 1).unwrap();
        let h = square_hole(n, 3, 13);
        let sol = f_hom_eval(0.5, &[1.0, 0.0], &h, &cell, &CellConfig::default()).unwrap();
        assert!(sol.value > 2.0 + 1e-3, "{}", sol.value);
        assert!(sol.history.windows(2).all(|p| p[1] <= p[0]));
        let div = cell_divergence(&sol.w, &cell).unwrap();
        assert!(div.iter().all(|d| d.abs() < 1e-8), "{:?}", div.iter().cloned().fold(0.0, f64::max));
        assert!((cell_mean(&sol.w, &cell, 0).unwrap() - 1.0).abs() < 1e-9);
        assert!(cell_mean(&sol.w, &cell, 1).unwrap().abs() < 1e-9);
        let mass = sol.nu.iter().sum::<f64>() / (n * n) as f64;
        assert!((mass - 0.5).abs() < 1e-9);
        assert!(sol.nu.iter().zip(h.values()).all(|(v, c)| *v <= c + 1e-12 && *v >= 0.0));
    }

    #[test]
    fn feasible_flow_properties() {
        let cell = Grid::torus(&[8, 8], 1).unwrap();
        let free = build_feasible_flow(&[0.3, -0.7], &CapField::uniform(64, 1.0).unwrap(), &cell).unwrap();
        assert!((free.constant - 1.0).abs() < 1e-9, "{}", free.constant);
        let h = square_hole(8, 2, 6);
        let flow = build_feasible_flow(&[1.0, 0.0], &h, &cell).unwrap();
        assert!(flow.constant > 1.0);
        let div = cell_divergence(&flow.w, &cell).unwrap();
        assert!(div.iter().all(|d| d.abs() < 1e-9));
        assert!((cell_mean(&flow.w, &cell, 0).unwrap() - 1.0).abs() < 1e-9);
        assert!(cell_mean(&flow.w, &cell, 1).unwrap().abs() < 1e-9);
        for (j, f) in cell.faces().iter().enumerate() {
            if h.get(f.lo.unwrap()) == 0.0 || h.get(f.hi.unwrap()) == 0.0 {
                assert_eq!(flow.w[j], 0.0);
            }
        }
    }

    #[test]
    fn disconnected_support_is_refused() {
        let cell = Grid::torus(&[4, 4], 1).unwrap();
        let mut v = vec![1.0; 16];
        for j in 0..4 {
            v[2 * 4 + j] = 0.0;
        }
        let h = CapField::new(v).unwrap();
        assert!(matches!(f_hom_eval(0.2, &[0.0, 1.0], &h, &cell, &CellConfig::default()), Err(Error::Disconnected(_))));
        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        v[6] = 1.0;
        let island = CapField::new(v).unwrap();
        assert!(matches!(build_feasible_flow(&[1.0, 0.0], &island, &cell), Err(Error::Disconnected(_))));
    }

    #[test]
    fn periodic_cap_tiles() {
        let cell = Grid::torus(&[2], 1).unwrap();
        let h = two_level(2);
        let g = Grid::torus(&[8], 1).unwrap();
        assert_eq!(periodic_cap(&h, &cell, 1.0, &g).unwrap().values(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let tiled = periodic_cap(&h, &cell, 0.5, &g).unwrap();
        assert_eq!(tiled.values(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert!((tiled.integral(&g) - 1.5).abs() < 1e-15);
        assert!(periodic_cap(&h, &cell, 1.0 / 3.0, &g).is_err());
        assert!(periodic_cap(&h, &cell, 0.3, &g).is_err());
    }

    #[test]
    fn table_shape_and_csv_round_trip() {
        let table = FhomTable::build(&two_level(2), 50).unwrap();
        table.check_shape(1e-12).unwrap();
        let back = FhomTable::from_csv(&table.to_csv()).unwrap();
        assert_eq!(back, table);
        assert!((table.eval(1.2).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        assert!(matches!(table.eval(1.6), Err(Error::TableRange { .. })));
    }

    #[test]
    fn face_discretised_fill_approaches_water_fill() {
        let h = two_level(2);
        let exact = 6.0 / 7.0;
        let (nu, f4) = water_fill_faces(1.2, &h, 4).unwrap();
        assert!((nu.iter().sum::<f64>() / 8.0 - 1.2).abs() < 1e-12);
        assert!(nu.iter().zip([1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).all(|(v, c)| *v <= c + 1e-12));
        // The plateau profile (1, 1.4) is feasible: its face value bounds F_4 from above.
        let plateau = (3.0 * (1.0 + 1.0 / 1.4) + 2.0 / 1.2) / 8.0;
        assert!(f4 <= plateau + 1e-12 && f4 < exact);
        let f16 = water_fill_faces(1.2, &h, 16).unwrap().1;
        let f64_ = water_fill_faces(1.2, &h, 64).unwrap().1;
        assert!(exact - f16 < exact - f4 && exact - f64_ < exact - f16 && f64_ < exact);
        let flat = water_fill_faces(0.5, &CapField::uniform(3, 1.0).unwrap(), 4).unwrap().1;
        assert!((flat - 2.0).abs() < 1e-12);
    }

    #[test]
    fn homogenized_solver_with_constant_cap_matches_capped_solver() {
        use crate::solver::solve_constrained;
        let n = 32;
        let g = Grid::torus(&[n], 16).unwrap();
        let cell_cap = CapField::uniform(4, 1.0).unwrap();
        let table = FhomTable::build(&cell_cap, 40).unwrap();
        let r0: Vec<f64> = (0..n).map(|c| if (8..16).contains(&c) { 0.8 } else { 0.0 }).collect();
        let r1: Vec<f64> = (0..n).map(|c| if (14..22).contains(&c) { 0.8 } else { 0.0 }).collect();
        let cfg = SolverConfig { max_iter: 4000, tol_gap: 1e-8, tol_residual: 1e-4, ..Default::default() };
        let a = solve_homogenized_1d(&r0, &r1, &table, &g, &cfg).unwrap();
        let b = solve_constrained(&r0, &r1, &CapField::uniform(n, 1.0).unwrap(), &g, &cfg).unwrap();
        assert!((a.energy - b.energy).abs() < 1e-5 * (1.0 + b.energy), "{} vs {}", a.energy, b.energy);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn water_fill_is_optimal_among_perturbations(
            caps in proptest::collection::vec(0.2f64..3.0, 2..9),
            frac in 0.05f64..1.0,
            i in 0usize..8, j in 0usize..8, t in 0.0f64..1.0,
        ) {
            let n = caps.len();
            let h = CapField::new(caps.clone()).unwrap();
            let m = frac * caps.iter().sum::<f64>() / n as f64;
            let (nu, f) = water_fill_1d(m, &h).unwrap();
            prop_assert!((nu.iter().sum::<f64>() / n as f64 - m).abs() < 1e-12 * (1.0 + m));
            prop_assert!(nu.iter().zip(&caps).all(|(v, c)| *v <= *c + 1e-15 && *v > 0.0));
            let (i, j) = (i % n, j % n);
            let room = (caps[i] - nu[i]).min(nu[j]);
            let mut other = nu.clone();
            other[i] += t * room;
            other[j] -= t * room;
            if other[j] > 0.0 {
                let g = other.iter().map(|v| 1.0 / v).sum::<f64>() / n as f64;
                prop_assert!(g >= f - 1e-12 * f);
            }
        }
    }
}
