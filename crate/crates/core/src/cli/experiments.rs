//! Convergence experiments as the thin-membrane width or the homogenization period shrinks.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::instances::{glued_instance, membrane_instance, HomogInstance, MembraneShape};
use super::svg::{line_plot, Series};
use crate::error::{Error, Result};
use crate::grid::{CapField, Grid};
use crate::homog::{periodic_cap, solve_homogenized_1d, water_fill_1d, FhomTable};
use crate::io::table_csv;
use crate::membrane::solve_membrane_limit;
use crate::solver::{solve_constrained, Solution, SolverConfig};

/// Hex SHA-256 of the canonical JSON of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration serialises");
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub instance: String,
    pub description: String,
    pub eps: Vec<f64>,
    pub energies: Vec<f64>,
    pub limit_energy: f64,
    /// The limit each run is compared with; equal to `limit_energy` unless the limit is
    /// evaluated at the resolution of the run itself.
    pub limit_energies: Vec<f64>,
    /// `|energies - limit_energies|`.
    pub errors: Vec<f64>,
    /// Independent value of the limit (closed form or continuum table).
    pub reference: Option<f64>,
    pub reference_errors: Option<Vec<f64>>,
    /// Certified lower bounds `2 x dual objective` on each energy, when available.
    pub lower_bounds: Vec<Option<f64>>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    /// Wall-clock seconds per run; kept out of the JSON so reports are reproducible.
    #[serde(skip)]
    pub runtimes: Vec<f64>,
    #[serde(skip)]
    pub limit_runtime: f64,
    pub config_hash: String,
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

impl ExperimentReport {
    pub fn validate(&self) -> Result<()> {
        let n = self.eps.len();
        let lens = [
            self.energies.len(),
            self.limit_energies.len(),
            self.errors.len(),
            self.lower_bounds.len(),
            self.residuals.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.reference_errors.as_ref().is_some_and(|r| r.len() != n) {
            return Err(Error::Shape("report sequences differ in length from the eps list".into()));
        }
        if self.errors.iter().chain(&self.energies).any(|e| !e.is_finite()) || !self.limit_energy.is_finite() {
            return Err(Error::Domain("report contains non-finite energies".into()));
        }
        Ok(())
    }

    pub fn errors_decreasing(&self) -> bool {
        strictly_decreasing(&self.errors)
    }

    pub fn reference_errors_decreasing(&self) -> Option<bool> {
        self.reference_errors.as_deref().map(strictly_decreasing)
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    pub fn total_runtime(&self) -> f64 {
        self.runtimes.iter().sum::<f64>() + self.limit_runtime
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn timings_json(&self) -> String {
        serde_json::json!({ "runs": self.runtimes, "limit": self.limit_runtime }).to_string() + "\n"
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<f64>> = (0..self.eps.len())
            .map(|i| {
                let reference = self.reference_errors.as_ref().map_or(f64::NAN, |r| r[i]);
                vec![self.eps[i], self.energies[i], self.limit_energies[i], self.errors[i], reference]
            })
            .collect();
        table_csv(&["eps", "energy", "limit", "error", "reference_error"], &rows)
    }

    pub fn to_svg(&self) -> String {
        let mut series = vec![Series {
            label: "|E_eps - E_lim|".into(),
            points: self.eps.iter().cloned().zip(self.errors.iter().cloned()).collect(),
        }];
        if let Some(r) = &self.reference_errors {
            series.push(Series {
                label: "|E_eps - reference|".into(),
                points: self.eps.iter().cloned().zip(r.iter().cloned()).collect(),
            });
        }
        line_plot(&format!("{}: {}", self.experiment, self.instance), "eps", "energy error", &series, true, true)
    }
}

struct Run {
    energy: f64,
    bound: Option<f64>,
    residual: f64,
    iterations: usize,
    converged: bool,
    seconds: f64,
}

fn timed(f: impl FnOnce() -> Result<Solution>) -> Result<Run> {
    let t = Instant::now();
    let s = f()?;
    Ok(Run {
        energy: s.energy,
        bound: s.dual_bound.map(|d| 2.0 * d),
        residual: s.residual,
        iterations: s.iterations,
        converged: s.converged,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaMembraneConfig {
    /// Cells across the strip; the cell width is `eps / cells_per_strip`.
    pub cells_per_strip: usize,
    pub nt: usize,
    pub solver: SolverConfig,
    /// Resolution of the limit problem; the instance default when absent.
    pub limit_cells: Option<usize>,
    pub limit_nt: Option<usize>,
    pub limit_solver: SolverConfig,
}

impl Default for GammaMembraneConfig {
    fn default() -> Self {
        GammaMembraneConfig {
            cells_per_strip: 32,
            nt: 32,
            solver: SolverConfig { pd_tau: 0.1, pd_sigma: 10.0, max_iter: 4000, ..SolverConfig::default() },
            limit_cells: None,
            limit_nt: None,
            limit_solver: SolverConfig::default(),
        }
    }
}

/// Solves the strip problem for every `eps` and the membrane limit, reporting `|E_eps - E_0|`
/// against the computed limit and against the closed form.
pub fn gamma_membrane_experiment(
    eps_list: &[f64],
    alpha: f64,
    shape: MembraneShape,
    cfg: &GammaMembraneConfig,
) -> Result<ExperimentReport> {
    if eps_list.is_empty() {
        return Err(Error::Config("empty eps list".into()));
    }
    let instances = eps_list
        .iter()
        .map(|&eps| glued_instance(shape, alpha, eps, cfg.cells_per_strip, cfg.nt))
        .collect::<Result<Vec<_>>>()?;
    let runs = instances
        .par_iter()
        .map(|inst| timed(|| solve_constrained(&inst.rho0, &inst.rho1, &inst.cap, &inst.grid, &cfg.solver)))
        .collect::<Result<Vec<_>>>()?;
    let (n, nt) = shape.default_resolution();
    let limit = membrane_instance(shape, alpha, cfg.limit_cells.unwrap_or(n), cfg.limit_nt.unwrap_or(nt))?;
    let lim = timed(|| solve_membrane_limit(&limit.problem, &cfg.limit_solver))?;
    let hash = config_hash(&serde_json::json!({
        "experiment": "gamma-membrane",
        "instance": shape.name(),
        "alpha": alpha,
        "eps": eps_list,
        "config": cfg,
    }));
    let energies: Vec<f64> = runs.iter().map(|r| r.energy).collect();
    let reference = shape.reference(alpha);
    let report = ExperimentReport {
        experiment: "gamma-membrane".into(),
        instance: shape.name().into(),
        description: format!(
            "{} with strip cap alpha * eps, alpha = {alpha}, {} cells per strip, nt = {}; limit on the split box: {}",
            shape.name(),
            cfg.cells_per_strip,
            cfg.nt,
            limit.description
        ),
        eps: eps_list.to_vec(),
        errors: energies.iter().map(|e| (e - lim.energy).abs()).collect(),
        reference_errors: Some(energies.iter().map(|e| (e - reference).abs()).collect()),
        reference: Some(reference),
        limit_energies: vec![lim.energy; eps_list.len()],
        limit_energy: lim.energy,
        energies,
        lower_bounds: runs.iter().map(|r| r.bound).collect(),
        residuals: runs.iter().map(|r| r.residual).collect(),
        iterations: runs.iter().map(|r| r.iterations).collect(),
        converged: runs.iter().map(|r| r.converged).collect(),
        runtimes: runs.iter().map(|r| r.seconds).collect(),
        limit_runtime: lim.seconds,
        config_hash: hash,
    };
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaHomogConfig {
    /// Table samples on `(0, int h]`.
    pub samples: usize,
}

impl Default for GammaHomogConfig {
    fn default() -> Self {
        GammaHomogConfig { samples: 50 }
    }
}

/// For `eps = 1/k`: tiles `h_cell` with period `eps`, transports the water-filled profile of the
/// instance density between the two blocks, and compares with the homogenized energy.
///
/// The capped solver sees `r = cells / (k len(h_cell))` cells per cap plateau, and its face
/// masses are arithmetic means of cell densities, so its effective `F` is the face-discretised
/// one at refinement `r`. Each run is therefore compared with the homogenized energy for that
/// table (`limit_energies`); `limit_energy` and `reference_errors` use the continuum
/// water-filling table.
pub fn gamma_homog_experiment(
    eps_list: &[f64],
    h_cell: &CapField,
    inst: &HomogInstance,
    cfg: &GammaHomogConfig,
) -> Result<ExperimentReport> {
    if eps_list.is_empty() {
        return Err(Error::Config("empty eps list".into()));
    }
    let g = inst.grid()?;
    let p = h_cell.len();
    let cell = Grid::torus(&[p], 1)?;
    let refinements = eps_list
        .iter()
        .map(|&eps| {
            let k = (1.0 / eps).round();
            if !(k >= 1.0) || (k * eps - 1.0).abs() > 1e-9 {
                return Err(Error::NotGridAligned(format!("eps = {eps} is not 1/k")));
            }
            let k = k as usize;
            if !inst.cells.is_multiple_of(k * p) {
                return Err(Error::NotGridAligned(format!("eps = 1/{k} with {} cells and a {p}-cell period", inst.cells)));
            }
            Ok(inst.cells / (k * p))
        })
        .collect::<Result<Vec<_>>>()?;

    let from = inst.block(&g, inst.from);
    let to = inst.block(&g, inst.to);
    let limit_ends: Vec<Vec<f64>> = [&from, &to]
        .iter()
        .map(|b| b.iter().map(|&on| if on { inst.density } else { 0.0 }).collect())
        .collect();
    let (profile, _) = water_fill_1d(inst.density, h_cell)?;
    let profile = CapField::new(profile)?;

    let runs = eps_list
        .par_iter()
        .zip(&refinements)
        .map(|(&eps, &r)| {
            let table = FhomTable::build_discrete(h_cell, r, cfg.samples)?;
            let lim = timed(|| solve_homogenized_1d(&limit_ends[0], &limit_ends[1], &table, &g, &inst.solver))?;
            let cap = periodic_cap(h_cell, &cell, eps, &g)?;
            let tiled = periodic_cap(&profile, &cell, eps, &g)?;
            let ends: Vec<Vec<f64>> = [&from, &to]
                .iter()
                .map(|b| b.iter().zip(tiled.values()).map(|(&on, &v)| if on { v } else { 0.0 }).collect())
                .collect();
            let run = timed(|| solve_constrained(&ends[0], &ends[1], &cap, &g, &inst.solver))?;
            Ok((run, lim))
        })
        .collect::<Result<Vec<_>>>()?;

    let continuum = FhomTable::build(h_cell, cfg.samples)?;
    let lim = timed(|| solve_homogenized_1d(&limit_ends[0], &limit_ends[1], &continuum, &g, &inst.solver))?;
    let hash = config_hash(&serde_json::json!({
        "experiment": "gamma-homog",
        "instance": inst,
        "h_cell": h_cell.values(),
        "eps": eps_list,
        "config": cfg,
    }));
    let energies: Vec<f64> = runs.iter().map(|(r, _)| r.energy).collect();
    let limits: Vec<f64> = runs.iter().map(|(_, l)| l.energy).collect();
    let report = ExperimentReport {
        experiment: "gamma-homog".into(),
        instance: inst.name.clone(),
        description: format!(
            "periodic cap {:?} tiled with period eps; block {:?} -> {:?} at mean density {} on a torus, N = {}, nt = {}",
            h_cell.values(),
            inst.from,
            inst.to,
            inst.density,
            inst.cells,
            inst.nt
        ),
        eps: eps_list.to_vec(),
        errors: energies.iter().zip(&limits).map(|(e, l)| (e - l).abs()).collect(),
        reference_errors: Some(energies.iter().map(|e| (e - lim.energy).abs()).collect()),
        reference: Some(lim.energy),
        limit_energies: limits,
        limit_energy: lim.energy,
        energies,
        lower_bounds: runs.iter().map(|(r, _)| r.bound).collect(),
        residuals: runs.iter().map(|(r, _)| r.residual).collect(),
        iterations: runs.iter().map(|(r, _)| r.iterations).collect(),
        converged: runs.iter().map(|(r, l)| r.converged && l.converged).collect(),
        runtimes: runs.iter().map(|(r, l)| r.seconds + l.seconds).collect(),
        limit_runtime: lim.seconds,
        config_hash: hash,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GammaMembraneConfig {
        GammaMembraneConfig {
            cells_per_strip: 4,
            nt: 8,
            solver: SolverConfig { max_iter: 300, ..SolverConfig::default() },
            limit_cells: Some(40),
            limit_nt: Some(8),
            limit_solver: SolverConfig { max_iter: 300, ..SolverConfig::default() },
        }
    }

    #[test]
    fn single_eps_gives_single_error() {
        let r = gamma_membrane_experiment(&[0.5], 2.0, MembraneShape::Block, &quick()).unwrap();
        assert_eq!(r.errors.len(), 1);
        assert!(r.errors[0].is_finite());
        assert!(r.errors_decreasing());
        assert_eq!(r.reference, Some(1.5));
    }

    #[test]
    fn reports_are_reproducible() {
        let a = gamma_membrane_experiment(&[0.5], 2.0, MembraneShape::Block, &quick()).unwrap();
        let b = gamma_membrane_experiment(&[0.5], 2.0, MembraneShape::Block, &quick()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.config_hash.len(), 64);
        let c = gamma_membrane_experiment(&[0.5], 3.0, MembraneShape::Block, &quick()).unwrap();
        assert_ne!(a.config_hash, c.config_hash);
        assert!(!a.to_json().contains("runtimes"));
        let back: ExperimentReport = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back.energies, a.energies);
    }

    #[test]
    fn rejects_misaligned_eps() {
        assert!(gamma_membrane_experiment(&[0.3], 2.0, MembraneShape::Block, &GammaMembraneConfig { cells_per_strip: 1, ..quick() }).is_err());
        assert!(gamma_membrane_experiment(&[], 2.0, MembraneShape::Block, &quick()).is_err());
        let (h, mut inst) = super::super::instances::twolevel_homog_v1();
        inst.cells = 24;
        assert!(gamma_homog_experiment(&[0.3], &h, &inst, &GammaHomogConfig::default()).is_err());
        assert!(gamma_homog_experiment(&[1.0 / 8.0], &h, &inst, &GammaHomogConfig::default()).is_err());
    }

    #[test]
    fn constant_cap_homogenizes_trivially() {
        let (_, mut inst) = super::super::instances::twolevel_homog_v1();
        inst.cells = 32;
        inst.nt = 8;
        inst.density = 0.8;
        inst.solver = SolverConfig { max_iter: 3000, tol_residual: 1e-4, tol_gap: 1e-9, ..SolverConfig::default() };
        let h = CapField::uniform(2, 1.0).unwrap();
        let r = gamma_homog_experiment(&[0.5, 0.25], &h, &inst, &GammaHomogConfig { samples: 20 }).unwrap();
        for (e, l) in r.energies.iter().zip(&r.limit_energies) {
            assert!((e - l).abs() < 1e-4 * (1.0 + l), "{e} vs {l}");
        }
    }
}
