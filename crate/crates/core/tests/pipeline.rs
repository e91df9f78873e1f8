use approx::assert_relative_eq;
use proptest::prelude::*;

use capped_ot::cli::instances::{glued_instance, transport_instance, MembraneShape};
use capped_ot::cli::{config_hash, gamma_membrane_experiment, GammaMembraneConfig};
use capped_ot::grid::{continuity_residual, total_mass, CapField};
use capped_ot::homog::{water_fill_1d, FhomTable};
use capped_ot::io::{read_field, write_density};
use capped_ot::kinetic::{total_action, ActionConvention};
use capped_ot::solver::{solve_constrained, SolverConfig};

#[test]
fn capped_solution_is_a_feasible_trajectory() {
    let inst = transport_instance("stark-v1", Some(64), Some(16)).unwrap();
    let s = solve_constrained(&inst.rho0, &inst.rho1, &inst.cap, &inst.grid, &inst.solver).unwrap();
    assert!(s.converged);
    assert!(s.rho.cap_violation(&inst.cap) <= 1e-9);
    let res = continuity_residual(&s.rho, &s.momentum, None, &inst.grid).unwrap();
    assert!(res <= 10.0 * inst.solver.tol_residual, "{res}");
    for t in 0..=inst.grid.nt() {
        let tol = if t == 0 || t == inst.grid.nt() { 1e-12 } else { s.residual };
        assert_relative_eq!(total_mass(&s.rho, t, &inst.grid).unwrap(), 1.0, epsilon = tol);
    }
    let action = total_action(&s.rho, &s.momentum, &inst.grid, ActionConvention::Whole).unwrap();
    assert_relative_eq!(action, s.energy, max_relative = inst.solver.tol_residual);
    let lower = 2.0 * s.dual_bound.unwrap();
    assert!(lower <= s.energy * (1.0 + inst.solver.tol_gap) + inst.solver.tol_gap);
}

#[test]
fn density_trajectory_survives_a_round_trip() {
    let inst = transport_instance("translation-v1", Some(32), Some(8)).unwrap();
    let cfg = SolverConfig { max_iter: 200, ..inst.solver };
    let s = solve_constrained(&inst.rho0, &inst.rho1, &inst.cap, &inst.grid, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_density(dir.path(), "rho", &s.rho, &inst.grid).unwrap();
    let (values, meta) = read_field(dir.path(), "rho").unwrap();
    assert_eq!(values, s.rho.values());
    assert_eq!(meta.dt, inst.grid.dt());
}

#[test]
fn tighter_membranes_cost_more() {
    let a = glued_instance(MembraneShape::Block, 2.0, 0.2, 8, 16).unwrap();
    let b = glued_instance(MembraneShape::Block, 1.0, 0.2, 8, 16).unwrap();
    let cfg = GammaMembraneConfig::default().solver;
    let ea = solve_constrained(&a.rho0, &a.rho1, &a.cap, &a.grid, &cfg).unwrap().energy;
    let eb = solve_constrained(&b.rho0, &b.rho1, &b.cap, &b.grid, &cfg).unwrap().energy;
    assert!(eb > ea, "{eb} <= {ea}");
}

#[test]
fn experiment_reports_parse_back() {
    let cfg = GammaMembraneConfig {
        cells_per_strip: 4,
        nt: 8,
        limit_cells: Some(40),
        limit_nt: Some(8),
        ..GammaMembraneConfig::default()
    };
    let rep = gamma_membrane_experiment(&[0.2], 2.0, MembraneShape::Point, &cfg).unwrap();
    rep.validate().unwrap();
    let back: capped_ot::cli::ExperimentReport = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(back.energies, rep.energies);
    assert_eq!(back.config_hash, rep.config_hash);
    assert_ne!(rep.config_hash, config_hash(&0));
    assert_eq!(rep.to_csv().lines().count(), 2);
}

#[test]
fn ftable_csv_round_trip_preserves_evaluation() {
    let h = CapField::new(vec![1.0, 3.0, 2.0]).unwrap();
    let table = FhomTable::build(&h, 30).unwrap();
    let back = FhomTable::from_csv(&table.to_csv()).unwrap();
    for m in [0.1, 0.7, 1.9] {
        assert_relative_eq!(back.eval(m).unwrap(), table.eval(m).unwrap(), max_relative = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn water_fill_respects_caps_and_mass(levels in prop::collection::vec(0.2f64..3.0, 1..6), frac in 0.05f64..1.0) {
        let h = CapField::new(levels.clone()).unwrap();
        let top = levels.iter().sum::<f64>() / levels.len() as f64;
        let m = frac * top;
        let (nu, f) = water_fill_1d(m, &h).unwrap();
        let mean = nu.iter().sum::<f64>() / nu.len() as f64;
        prop_assert!((mean - m).abs() <= 1e-10 * top);
        prop_assert!(nu.iter().zip(&levels).all(|(v, c)| *v <= c * (1.0 + 1e-12) && *v > 0.0));
        prop_assert!(f >= 1.0 / m * (1.0 - 1e-12));
    }
}
