use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use capped_ot::cli::instances::{
    glued_instance, membrane_instance, square_hole_cap, transport_instance, two_level_cap, twolevel_homog_v1,
};
use capped_ot::cli::svg::{heatmap, line_plot, waterfall, Series};
use capped_ot::cli::{
    config_hash, gamma_homog_experiment, gamma_membrane_experiment, ExperimentReport, Format, GammaHomogConfig,
    GammaMembraneConfig, MembraneShape, Output,
};
use capped_ot::gflow::{
    heat_step, jko_step, pme_cfl_limit, pme_energy, pme_step, teorell_step, FreeEnergySpec, JkoConfig, TeorellConfig,
};
use capped_ot::grid::{slice_mass, CapField, DensityField, Grid};
use capped_ot::homog::{build_feasible_flow, f_hom_eval, water_fill_faces, CellConfig, FhomTable};
use capped_ot::io::{flux_csv, table_csv, FieldMeta};
use capped_ot::membrane::solve_membrane_limit;
use capped_ot::solver::{solve_constrained, Solution, SolverConfig, StarkCurve};
use capped_ot::{Error, Result};

/// Density-constrained dynamic optimal transport toolkit.
#[derive(Parser)]
#[command(name = "cot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Cells per axis, `NX` or `NX,NY`.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Time steps.
    #[arg(long, global = true)]
    nt: Option<usize>,
    #[arg(long = "tol-res", global = true)]
    tol_res: Option<f64>,
    #[arg(long = "tol-gap", global = true)]
    tol_gap: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    max_iter: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "cot-out")]
    out: PathBuf,
    /// Artefacts to write besides the JSON summary: csv, json or svg.
    #[arg(long, global = true, default_value = "json")]
    format: String,
    /// Seed of randomized checks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn cells(&self) -> Result<Option<Vec<usize>>> {
        self.grid
            .as_deref()
            .map(|g| {
                g.split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad --grid {g}"))))
                    .collect()
            })
            .transpose()
    }

    fn cells_1d(&self) -> Result<Option<usize>> {
        match self.cells()? {
            None => Ok(None),
            Some(v) if v.len() == 1 => Ok(Some(v[0])),
            Some(_) => Err(Error::Config("this command takes a 1D --grid".into())),
        }
    }

    fn solver(&self, base: SolverConfig) -> SolverConfig {
        SolverConfig {
            max_iter: self.max_iter.unwrap_or(base.max_iter),
            tol_residual: self.tol_res.unwrap_or(base.tol_residual),
            tol_gap: self.tol_gap.unwrap_or(base.tol_gap),
            ..base
        }
    }

    fn output(&self) -> Result<Output> {
        Output::new(&self.out, Format::parse(&self.format)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Capped transport between the endpoints of a built-in instance.
    Solve {
        /// stark-v1 or translation-v1.
        #[arg(long, default_value = "stark-v1")]
        instance: String,
        #[command(flatten)]
        common: Common,
    },
    /// Effective membrane problem on the split box [-1, 1].
    Membrane {
        /// block-membrane-v1 or point-membrane-v1.
        #[arg(long, default_value = "block-membrane-v1")]
        instance: String,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Periodic cell problem f_hom(m, U); --grid sets the cell resolution.
    Cell {
        #[arg(long, default_value_t = 0.5)]
        m: f64,
        /// Mean flow, `U1` or `U1,U2`.
        #[arg(long, default_value = "1")]
        u: String,
        /// uniform:V, twolevel or hole:SIDE.
        #[arg(long, default_value = "uniform:1")]
        cap: String,
        /// Random feasible pairs for a midpoint-convexity check.
        #[arg(long, default_value_t = 0)]
        convexity_pairs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Table of the one-dimensional F(m) = f_hom(m, 1) for a cell cap.
    Ftable {
        /// Cap levels on equal sub-cells of the period.
        #[arg(long, default_value = "1,2")]
        cap: String,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Cells per cap level for the face-discretised table.
        #[arg(long)]
        refine: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Strip problems against the membrane limit as eps shrinks.
    GammaMembrane {
        #[arg(long, default_value = "0.2,0.1,0.05")]
        eps: String,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value = "block-membrane-v1")]
        instance: String,
        #[arg(long, default_value_t = 32)]
        cells_per_strip: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Periodic caps against the homogenized problem as eps shrinks.
    GammaHomog {
        #[arg(long, default_value = "0.25,0.125,0.0625")]
        eps: String,
        #[arg(long, default_value = "twolevel-homog-v1")]
        instance: String,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Gradient-flow time series: pme, heat, jko or teorell.
    Gflow {
        #[arg(long, default_value = "pme")]
        scheme: String,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Time step (JKO step for jko); defaults to half the stability limit.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        rt: f64,
        /// Membrane permeability (teorell).
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Uniform density cap (jko).
        #[arg(long)]
        density_cap: Option<f64>,
        #[arg(long)]
        teorell_rt_factor: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-form stark curve, and a refinement study of stark-v1 over --levels.
    Stark {
        #[arg(long, default_value_t = 1.0)]
        mass: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Cell counts to solve stark-v1 at (nt = N/4); empty for the closed form only.
        #[arg(long, default_value = "")]
        levels: String,
        #[command(flatten)]
        common: Common,
    },
}

/// Outcome of a command: whether every solve converged.
struct Done {
    converged: bool,
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number {t:?}"))))
        .collect()
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json") + "\n"
}

fn solution_json(s: &Solution) -> serde_json::Value {
    json!({
        "energy": s.energy,
        "residual": s.residual,
        "iterations": s.iterations,
        "converged": s.converged,
        "dual_bound": s.dual_bound,
        "warnings": s.warnings,
    })
}

fn profiles(out: &mut Output, name: &str, rho: &DensityField, g: &Grid) -> Result<()> {
    if g.dim() != 1 {
        let cells = g.cells_per_axis();
        let last = rho.slice(rho.levels() - 1);
        return out.text(&format!("{name}.svg"), Format::Svg, "final density", &heatmap(name, last, cells[0], cells[1]));
    }
    let levels: Vec<usize> = (0..5).map(|i| i * (rho.levels() - 1) / 4).collect();
    let x: Vec<f64> = (0..g.num_cells()).map(|c| g.cell_center(c)[0]).collect();
    let rows: Vec<Vec<f64>> = (0..g.num_cells())
        .map(|c| std::iter::once(x[c]).chain(levels.iter().map(|&l| rho.slice(l)[c])).collect())
        .collect();
    let header: Vec<String> =
        std::iter::once("x".to_string()).chain(levels.iter().map(|&l| format!("t={}", l as f64 * g.dt()))).collect();
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    out.text(&format!("{name}.csv"), Format::Csv, "density at five times", &table_csv(&header, &rows))?;
    let slices: Vec<Vec<f64>> = levels.iter().map(|&l| rho.slice(l).to_vec()).collect();
    let times: Vec<f64> = levels.iter().map(|&l| l as f64 * g.dt()).collect();
    out.text(&format!("{name}.svg"), Format::Svg, "density waterfall", &waterfall(name, &x, &slices, &times))
}

fn cmd_solve(instance: &str, c: &Common) -> Result<Done> {
    let inst = transport_instance(instance, c.cells_1d()?, c.nt)?;
    let cfg = c.solver(inst.solver.clone());
    let t = Instant::now();
    let s = solve_constrained(&inst.rho0, &inst.rho1, &inst.cap, &inst.grid, &cfg)?;
    let seconds = t.elapsed().as_secs_f64();
    let hash = config_hash(&json!({"command": "solve", "instance": instance, "description": inst.description, "solver": cfg}));
    let mut out = c.output()?;
    let summary = json!({
        "instance": inst.name,
        "description": inst.description,
        "solution": solution_json(&s),
        "reference": inst.reference,
        "relative_error": inst.reference.map(|r| (s.energy - r) / r),
        "certified_lower_bound": s.dual_bound.map(|d| 2.0 * d),
        "config_hash": hash,
    });
    out.summary("summary.json", "run summary", &pretty(&summary))?;
    out.field("density", "density trajectory", s.rho.values(), &FieldMeta::density(&inst.grid))?;
    out.field("momentum", "face momenta", s.momentum.values(), &FieldMeta::momentum(&inst.grid))?;
    profiles(&mut out, "density", &s.rho, &inst.grid)?;
    out.finish("solve", &hash)?;
    println!(
        "{}: energy {:.6} (reference {:?}), residual {:.2e}, {} iterations, converged {}, {:.1} s",
        inst.name, s.energy, inst.reference, s.residual, s.iterations, s.converged, seconds
    );
    Ok(Done { converged: s.converged })
}

fn cmd_membrane(instance: &str, alpha: f64, c: &Common) -> Result<Done> {
    let shape = MembraneShape::parse(instance)?;
    let (n, nt) = shape.default_resolution();
    let inst = membrane_instance(shape, alpha, c.cells_1d()?.unwrap_or(n), c.nt.unwrap_or(nt))?;
    let cfg = c.solver(inst.solver.clone());
    let s = solve_membrane_limit(&inst.problem, &cfg)?;
    let g = &inst.problem.grid;
    let hash = config_hash(&json!({"command": "membrane", "description": inst.description, "solver": cfg}));
    let mut out = c.output()?;
    let transferred = s.flux.as_ref().map(|f| f.values().iter().sum::<f64>() * g.dt());
    out.summary(
        "summary.json",
        "run summary",
        &pretty(&json!({
            "instance": inst.name,
            "description": inst.description,
            "alpha": alpha,
            "solution": solution_json(&s),
            "reference": inst.reference,
            "relative_error": (s.energy - inst.reference) / inst.reference,
            "mass_through_membrane": transferred,
            "config_hash": hash,
        })),
    )?;
    if let Some(f) = &s.flux {
        out.text("flux.csv", Format::Csv, "interface flux (t, cell, value)", &flux_csv(f, g))?;
        out.field("flux", "interface flux", f.values(), &FieldMeta::flux(g))?;
    }
    out.field("density", "density trajectory", s.rho.values(), &FieldMeta::density(g))?;
    profiles(&mut out, "density", &s.rho, g)?;
    out.finish("membrane", &hash)?;
    println!(
        "{}: energy {:.6} (closed form {:.6}), residual {:.2e}, converged {}",
        inst.name, s.energy, inst.reference, s.residual, s.converged
    );
    Ok(Done { converged: s.converged })
}

fn cell_cap(spec: &str, cell: &Grid) -> Result<CapField> {
    if spec == "twolevel" {
        return two_level_cap(cell);
    }
    if let Some(v) = spec.strip_prefix("uniform:") {
        let v: f64 = v.parse().map_err(|_| Error::Config(format!("bad cap {spec}")))?;
        return CapField::uniform(cell.num_cells(), v);
    }
    if let Some(side) = spec.strip_prefix("hole:") {
        let side: f64 = side.parse().map_err(|_| Error::Config(format!("bad cap {spec}")))?;
        return square_hole_cap(cell, side);
    }
    Err(Error::Config(format!("unknown cap {spec}; expected uniform:V, twolevel or hole:SIDE")))
}

fn cmd_cell(m: f64, u: &str, cap: &str, pairs: usize, c: &Common) -> Result<Done> {
    let u = parse_list(u)?;
    let cells = c.cells()?.unwrap_or_else(|| vec![16; u.len()]);
    let cell = Grid::torus(&cells, 1)?;
    let h = cell_cap(cap, &cell)?;
    let cfg = CellConfig::default();
    let sol = f_hom_eval(m, &u, &h, &cell, &cfg)?;
    let flow = build_feasible_flow(&u, &h, &cell)?;
    let u2: f64 = u.iter().map(|x| x * x).sum();
    let mut converged = sol.converged;
    let mut convexity = serde_json::Value::Null;
    if pairs > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let top = h.integral(&cell).min(1e6);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..pairs {
            let m1 = rng.gen_range(0.05..0.95) * top;
            let m2 = rng.gen_range(0.05..0.95) * top;
            let a: Vec<f64> = u.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = u.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let fa = f_hom_eval(m1, &a, &h, &cell, &cfg)?;
            let fb = f_hom_eval(m2, &b, &h, &cell, &cfg)?;
            let fm = f_hom_eval(0.5 * (m1 + m2), &mid, &h, &cell, &cfg)?;
            converged &= fa.converged && fb.converged && fm.converged;
            worst = worst.max(fm.value - 0.5 * (fa.value + fb.value));
        }
        convexity = json!({"pairs": pairs, "seed": c.seed, "worst_midpoint_excess": worst});
    }
    let hash = config_hash(&json!({"command": "cell", "m": m, "u": u, "cap": cap, "cells": cells, "pairs": pairs, "seed": c.seed}));
    let mut out = c.output()?;
    out.summary(
        "summary.json",
        "run summary",
        &pretty(&json!({
            "m": m,
            "u": u,
            "cap": cap,
            "cells": cells,
            "value": sol.value,
            "lower_bound": u2 / m,
            "upper_bound": flow.constant * u2 / m,
            "empirical_constant": flow.constant,
            "iterations": sol.iterations,
            "converged": sol.converged,
            "convexity": convexity,
            "config_hash": hash,
        })),
    )?;
    let meta = FieldMeta::cap(&cell);
    out.field("nu", "optimal cell density", &sol.nu, &FieldMeta { kind: "density".into(), ..meta })?;
    if cell.dim() == 2 {
        out.text("nu.svg", Format::Svg, "optimal cell density", &heatmap("nu", &sol.nu, cells[0], cells[1]))?;
    }
    let rows: Vec<Vec<f64>> = sol.nu.iter().enumerate().map(|(i, v)| vec![i as f64, *v, h.get(i)]).collect();
    out.text("nu.csv", Format::Csv, "optimal cell density", &table_csv(&["cell", "nu", "h"], &rows))?;
    out.finish("cell", &hash)?;
    println!("f_hom({m}, {u:?}) = {:.9} ({} iterations, converged {})", sol.value, sol.iterations, sol.converged);
    Ok(Done { converged })
}

fn cmd_ftable(cap: &str, samples: usize, refine: Option<usize>, c: &Common) -> Result<Done> {
    let h = CapField::new(parse_list(cap)?)?;
    let table = match refine {
        Some(r) => FhomTable::build_discrete(&h, r, samples)?,
        None => FhomTable::build(&h, samples)?,
    };
    let shape = table.check_shape(1e-9);
    let hash = config_hash(&json!({"command": "ftable", "cap": h.values(), "samples": samples, "refine": refine}));
    let mut out = c.output()?;
    out.summary(
        "summary.json",
        "run summary",
        &pretty(&json!({
            "cap": h.values(),
            "samples": samples,
            "refine": refine,
            "max_mass": table.max_mass(),
            "shape_ok": shape.is_ok(),
            "m": table.m,
            "F": table.f,
            "config_hash": hash,
        })),
    )?;
    out.text("ftable.csv", Format::Csv, "F(m) table", &table.to_csv())?;
    let pts: Vec<(f64, f64)> = table.m.iter().cloned().zip(table.f.iter().cloned()).collect();
    let plot = line_plot("F(m)", "m", "F", &[Series { label: "F".into(), points: pts }], false, true);
    out.text("ftable.svg", Format::Svg, "F(m)", &plot)?;
    out.finish("ftable", &hash)?;
    if let Some(r) = refine {
        let (_, f) = water_fill_faces(table.max_mass() * 0.5, &h, r)?;
        println!("F at half capacity, refinement {r}: {f:.9}");
    }
    print!("{}", table.to_csv());
    shape?;
    Ok(Done { converged: true })
}

fn write_report(out: &mut Output, report: &ExperimentReport) -> Result<()> {
    out.summary("report.json", "experiment report", &report.to_json())?;
    out.summary("timings.json", "wall-clock seconds (not reproducible)", &report.timings_json())?;
    out.text("report.csv", Format::Csv, "energies and errors per eps", &report.to_csv())?;
    out.text("report.svg", Format::Svg, "error against eps", &report.to_svg())?;
    println!("{}", report.to_csv().trim_end());
    println!(
        "limit {:.7}, reference {:?}; errors decreasing: {}; total {:.1} s",
        report.limit_energy,
        report.reference,
        report.errors_decreasing(),
        report.total_runtime()
    );
    Ok(())
}

fn cmd_gamma_membrane(eps: &str, alpha: f64, instance: &str, cells_per_strip: usize, c: &Common) -> Result<Done> {
    let shape = MembraneShape::parse(instance)?;
    let base = GammaMembraneConfig::default();
    let cfg = GammaMembraneConfig {
        cells_per_strip,
        nt: c.nt.unwrap_or(base.nt),
        solver: c.solver(base.solver.clone()),
        ..base
    };
    let eps = parse_list(eps)?;
    let report = gamma_membrane_experiment(&eps, alpha, shape, &cfg)?;
    let mut out = c.output()?;
    write_report(&mut out, &report)?;
    let glued = glued_instance(shape, alpha, eps[eps.len() - 1], cells_per_strip, cfg.nt)?;
    out.field("cap", "strip cap at the smallest eps", glued.cap.values(), &FieldMeta::cap(&glued.grid))?;
    out.finish("gamma-membrane", &report.config_hash)?;
    Ok(Done { converged: report.all_converged() })
}

fn cmd_gamma_homog(eps: &str, instance: &str, samples: usize, c: &Common) -> Result<Done> {
    if instance != "twolevel-homog-v1" {
        return Err(Error::Config(format!("unknown homogenization instance {instance}")));
    }
    let (h, mut inst) = twolevel_homog_v1();
    if let Some(n) = c.cells_1d()? {
        inst.cells = n;
    }
    inst.nt = c.nt.unwrap_or(inst.nt);
    inst.solver = c.solver(inst.solver.clone());
    let report = gamma_homog_experiment(&parse_list(eps)?, &h, &inst, &GammaHomogConfig { samples })?;
    let mut out = c.output()?;
    write_report(&mut out, &report)?;
    out.finish("gamma-homog", &report.config_hash)?;
    Ok(Done { converged: report.all_converged() })
}

struct GflowArgs<'a> {
    scheme: &'a str,
    steps: usize,
    dt: Option<f64>,
    beta: f64,
    rt: f64,
    alpha: f64,
    density_cap: Option<f64>,
    teorell_rt_factor: bool,
}

fn cmd_gflow(a: &GflowArgs, c: &Common) -> Result<Done> {
    let n = c.cells_1d()?.unwrap_or(64);
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut converged = true;
    let mut rejected = 0usize;
    let every = (a.steps / 4).max(1);
    let (grid, x): (Grid, Vec<f64>);
    match a.scheme {
        "pme" | "heat" | "jko" => {
            grid = Grid::torus(&[n], 1)?;
            x = (0..n).map(|i| grid.cell_center(i)[0]).collect();
            let mut rho: Vec<f64> = x.iter().map(|x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).cos()).collect();
            let spec = FreeEnergySpec::entropy(a.rt, n)?;
            let cap = match a.density_cap {
                Some(v) => CapField::uniform(n, v)?,
                None => CapField::unconstrained(n),
            };
            let energy = |r: &[f64]| -> Result<f64> {
                if a.scheme == "pme" { pme_energy(r, a.beta, a.rt, &grid) } else { Ok(spec.value(r, &grid)) }
            };
            let jko = JkoConfig { solver: c.solver(JkoConfig::default().solver), ..JkoConfig::default() };
            let mut t = 0.0;
            for k in 0..=a.steps {
                rows.push(vec![k as f64, t, energy(&rho)?, slice_mass(&rho, &grid)]);
                if k % every == 0 || k == a.steps {
                    snapshots.push((t, rho.clone()));
                }
                if k == a.steps {
                    break;
                }
                let beta = if a.scheme == "heat" { 0.0 } else { a.beta };
                let limit = pme_cfl_limit(&rho, beta, a.rt, &grid)?;
                let dt = a.dt.unwrap_or(0.5 * limit);
                rho = match a.scheme {
                    "pme" => pme_step(&rho, a.beta, a.rt, dt, &grid)?.rho,
                    "heat" => heat_step(&rho, a.rt, dt, &grid)?,
                    _ => {
                        let s = jko_step(&rho, &spec, dt, &cap, &grid, &jko)?;
                        converged &= s.converged;
                        rejected += s.rejected as usize;
                        s.rho
                    }
                };
                t += dt;
            }
        }
        "teorell" => {
            grid = Grid::split(&[n], &[-1.0], &[1.0], 1)?;
            x = (0..n).map(|i| grid.cell_center(i)[0]).collect();
            let half = n / 2;
            let mut minus = vec![1.5; half];
            let mut plus = vec![0.5; n - half];
            let sm = FreeEnergySpec::entropy(a.rt, half)?;
            let sp = FreeEnergySpec::entropy(a.rt, n - half)?;
            let cfg = TeorellConfig { teorell_rt_factor: a.teorell_rt_factor };
            let limit = 1.0 / (2.0 * a.rt / grid.dx()[0].powi(2));
            let dt = a.dt.unwrap_or(0.5 * limit);
            let mut t = 0.0;
            for k in 0..=a.steps {
                let full: Vec<f64> = minus.iter().chain(&plus).cloned().collect();
                let f = sm.value(&minus, &grid) + sp.value(&plus, &grid);
                rows.push(vec![k as f64, t, f, slice_mass(&full, &grid)]);
                if k % every == 0 || k == a.steps {
                    snapshots.push((t, full));
                }
                if k == a.steps {
                    break;
                }
                (minus, plus) = teorell_step(&minus, &plus, &sm, &sp, a.alpha, dt, &grid, &cfg)?;
                t += dt;
            }
        }
        s => return Err(Error::Config(format!("unknown scheme {s}; expected pme, heat, jko or teorell"))),
    }
    let hash = config_hash(&json!({
        "command": "gflow", "scheme": a.scheme, "steps": a.steps, "dt": a.dt, "beta": a.beta, "rt": a.rt,
        "alpha": a.alpha, "density_cap": a.density_cap, "teorell_rt_factor": a.teorell_rt_factor, "cells": n,
    }));
    let mut out = c.output()?;
    let first = &rows[0];
    let last = &rows[rows.len() - 1];
    out.summary(
        "summary.json",
        "run summary",
        &pretty(&json!({
            "scheme": a.scheme,
            "steps": a.steps,
            "final_time": last[1],
            "free_energy": [first[2], last[2]],
            "mass": [first[3], last[3]],
            "converged": converged,
            "rejected_steps": rejected,
            "config_hash": hash,
        })),
    )?;
    out.text("timeseries.csv", Format::Csv, "step, time, free energy, mass", &table_csv(&["step", "t", "free_energy", "mass"], &rows))?;
    let prof: Vec<Vec<f64>> = (0..x.len())
        .map(|i| std::iter::once(x[i]).chain(snapshots.iter().map(|(_, r)| r[i])).collect())
        .collect();
    let header: Vec<String> = std::iter::once("x".into()).chain(snapshots.iter().map(|(t, _)| format!("t={t}"))).collect();
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    out.text("profiles.csv", Format::Csv, "density snapshots", &table_csv(&header, &prof))?;
    let slices: Vec<Vec<f64>> = snapshots.iter().map(|(_, r)| r.clone()).collect();
    let times: Vec<f64> = snapshots.iter().map(|(t, _)| *t).collect();
    out.text("profiles.svg", Format::Svg, "density snapshots", &waterfall(a.scheme, &x, &slices, &times))?;
    let series = [Series { label: "free energy".into(), points: rows.iter().map(|r| (r[1], r[2])).collect() }];
    out.text("energy.svg", Format::Svg, "free energy", &line_plot("free energy", "t", "F", &series, false, false))?;
    out.finish("gflow", &hash)?;
    println!(
        "{}: {} steps to t = {:.4e}, free energy {:.6} -> {:.6}, mass drift {:.1e}, rejected {}",
        a.scheme,
        a.steps,
        last[1],
        first[2],
        last[2],
        last[3] - first[3],
        rejected
    );
    Ok(Done { converged })
}

fn cmd_stark(mass: f64, lambda: f64, levels: &str, c: &Common) -> Result<Done> {
    let curve = StarkCurve::new(mass, lambda)?;
    let exact = curve.energy();
    let rows: Vec<Vec<f64>> = (0..=20)
        .map(|i| {
            let t = i as f64 / 20.0;
            Ok(vec![t, curve.position(t)?, curve.position(t)? + mass / lambda])
        })
        .collect::<Result<_>>()?;
    let levels: Vec<usize> = parse_list(levels)?.into_iter().map(|v| v as usize).collect();
    let mut studies = Vec::new();
    let mut converged = true;
    let mut energies = Vec::new();
    for &n in &levels {
        let inst = transport_instance("stark-v1", Some(n), Some(c.nt.unwrap_or(n / 4)))?;
        let cfg = c.solver(inst.solver.clone());
        let t = Instant::now();
        let s = solve_constrained(&inst.rho0, &inst.rho1, &inst.cap, &inst.grid, &cfg)?;
        converged &= s.converged;
        energies.push(s.energy);
        studies.push(json!({
            "cells": n,
            "energy": s.energy,
            "error": (s.energy - exact).abs(),
            "iterations": s.iterations,
            "converged": s.converged,
            "seconds": t.elapsed().as_secs_f64(),
        }));
    }
    let richardson: Vec<f64> = energies.windows(2).map(|w| 2.0 * w[1] - w[0]).collect();
    let hash = config_hash(&json!({"command": "stark", "mass": mass, "lambda": lambda, "levels": levels, "nt": c.nt,
        "solver": c.solver(SolverConfig::default())}));
    let mut out = c.output()?;
    for s in &mut studies {
        s.as_object_mut().expect("object").remove("seconds");
    }
    out.summary(
        "summary.json",
        "run summary",
        &pretty(&json!({
            "mass": mass,
            "lambda": lambda,
            "exact_energy": exact,
            "levels": studies,
            "richardson_first_order": richardson,
            "richardson_errors": richardson.iter().map(|r| (r - exact).abs()).collect::<Vec<_>>(),
            "config_hash": hash,
        })),
    )?;
    out.text("curve.csv", Format::Csv, "front positions (t, left end, right end)", &table_csv(&["t", "x_left", "x_right"], &rows))?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[2])).collect();
    out.text("curve.svg", Format::Svg, "front of the block", &line_plot("stark front", "t", "x", &[Series { label: "front".into(), points: pts }], false, false))?;
    out.finish("stark", &hash)?;
    println!("exact energy 4 m^3 / (9 lambda^2) = {exact:.9}");
    for (n, e) in levels.iter().zip(&energies) {
        println!("N = {n}: energy {e:.6}, error {:.3e}", (e - exact).abs());
    }
    for r in &richardson {
        println!("first-order extrapolant {r:.6}, error {:.3e}", (r - exact).abs());
    }
    Ok(Done { converged })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible(_) | Error::NotConverged { .. } | Error::Vacuum(_) => 2,
        Error::Io(_) | Error::Json(_) => 1,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<Done> {
    match cli.command {
        Command::Solve { instance, common } => cmd_solve(&instance, &common),
        Command::Membrane { instance, alpha, common } => cmd_membrane(&instance, alpha, &common),
        Command::Cell { m, u, cap, convexity_pairs, common } => cmd_cell(m, &u, &cap, convexity_pairs, &common),
        Command::Ftable { cap, samples, refine, common } => cmd_ftable(&cap, samples, refine, &common),
        Command::GammaMembrane { eps, alpha, instance, cells_per_strip, common } => {
            cmd_gamma_membrane(&eps, alpha, &instance, cells_per_strip, &common)
        }
        Command::GammaHomog { eps, instance, samples, common } => cmd_gamma_homog(&eps, &instance, samples, &common),
        Command::Gflow { scheme, steps, dt, beta, rt, alpha, density_cap, teorell_rt_factor, common } => cmd_gflow(
            &GflowArgs { scheme: &scheme, steps, dt, beta, rt, alpha, density_cap, teorell_rt_factor },
            &common,
        ),
        Command::Stark { mass, lambda, levels, common } => cmd_stark(mass, lambda, &levels, &common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Done { converged: true }) => ExitCode::SUCCESS,
        Ok(Done { converged: false }) => {
            eprintln!("warning: a solve did not converge; best iterate written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
