//! The kinetic action `|f|^2 / m`, its proximal map and the cap projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, FaceKind, Grid, MomentumField};

/// Which normalisation of the action a computation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionConvention {
    /// `|f|^2 / m`
    Whole,
    /// `|f|^2 / (2 m)`
    Half,
}

impl ActionConvention {
    pub fn factor(self) -> f64 {
        match self {
            ActionConvention::Whole => 1.0,
            ActionConvention::Half => 0.5,
        }
    }
}

/// Perspective function `kappa |f|^2 / m` with the vacuum convention `0/0 = 0`.
pub fn action_density(m: f64, f: &[f64], conv: ActionConvention) -> Result<f64> {
    if !(m >= 0.0) {
        return Err(Error::Domain(format!("mass {m} is negative")));
    }
    let f2: f64 = f.iter().map(|x| x * x).sum();
    Ok(perspective(m, f2, conv.factor()))
}

#[inline]
pub(crate) fn perspective(m: f64, f2: f64, kappa: f64) -> f64 {
    if m > 0.0 {
        kappa * f2 / m
    } else if f2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Proximal map of the action: the minimiser of
/// `A(m, f) + ((m - m0)^2 + |f - f0|^2) / (2 gamma)` over `m >= 0`.
pub fn prox_action(
    m0: f64,
    f0: &[f64],
    gamma: f64,
    conv: ActionConvention,
) -> Result<(f64, Vec<f64>)> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("prox step {gamma} must be positive")));
    }
    let f2: f64 = f0.iter().map(|x| x * x).sum();
    let (m, shrink) = prox_perspective(m0, f2, gamma, conv.factor(), f64::INFINITY);
    Ok((m, f0.iter().map(|x| x * shrink).collect()))
}

/// Scalar core of the prox, with an optional upper bound `cap` on `m`.
///
/// Returns `(m, s)` where the optimal momentum is `s * f0`. With `c = 2 kappa`
/// stationarity gives `f = m f0 / (m + c gamma)` and the cubic
/// `(m - m0)(m + c gamma)^2 = kappa gamma |f0|^2`, whose root on the right of
/// `max(m0, 0)` is found by Newton's method safeguarded by bisection. The
/// reduced objective in `m` is convex, so the capped minimiser is the clamp of
/// the free one.
pub(crate) fn prox_perspective(m0: f64, f2: f64, gamma: f64, kappa: f64, cap: f64) -> (f64, f64) {
    let c = 2.0 * kappa * gamma;
    if f2 == 0.0 {
        return (m0.clamp(0.0, cap), 0.0);
    }
    let rhs = kappa * gamma * f2;
    let p = |m: f64| (m - m0) * (m + c) * (m + c) - rhs;
    let base = m0.max(0.0);
    if p(0.0) >= 0.0 {
        return (0.0, 0.0);
    }
    // p(base + delta) >= 0 for each delta below; take the tightest. On
    // [base, inf) the cubic is increasing and convex, so Newton started from
    // the right end decreases monotonically onto the root.
    let mut delta = kappa * f2 / (4.0 * kappa * kappa * gamma);
    if m0 > 0.0 {
        delta = delta.min(rhs / ((m0 + c) * (m0 + c)));
    }
    if delta * delta * delta > rhs {
        delta = rhs.cbrt();
    }
    let mut m = base + delta;
    for _ in 0..100 {
        let val = p(m);
        if val <= 0.0 {
            break;
        }
        let dp = (m + c) * (m + c) + 2.0 * (m - m0) * (m + c);
        let next = (m - val / dp).max(base);
        if m - next <= 1e-15 * (m + c) {
            m = next;
            break;
        }
        m = next;
    }
    let m = m.min(cap);
    if m <= 0.0 {
        return (0.0, 0.0);
    }
    (m, m / (m + c))
}

/// `clamp(m, 0, cap)`.
pub fn project_cap(m: f64, cap: f64) -> f64 {
    m.max(0.0).min(cap)
}

/// Face mass interpolated from the two adjacent cells at the two bounding time levels.
pub(crate) fn face_mass(rho_a: &[f64], rho_b: &[f64], lo: usize, hi: usize) -> f64 {
    0.25 * (rho_a[lo] + rho_a[hi] + rho_b[lo] + rho_b[hi])
}

/// Discrete kinetic action of a trajectory: sum over slabs and interior faces of
/// `A(face mass, V) * cell volume * dt`. Infinite when momentum sits on vacuum.
pub fn total_action(
    rho: &DensityField,
    v: &MomentumField,
    grid: &Grid,
    conv: ActionConvention,
) -> Result<f64> {
    if rho.levels() != grid.nt() + 1 || v.slabs() != grid.nt() || v.num_faces() != grid.num_faces()
    {
        return Err(Error::Shape("trajectory does not match grid".into()));
    }
    let kappa = conv.factor();
    let mut total = 0.0;
    for k in 0..grid.nt() {
        let (a, b) = (rho.slice(k), rho.slice(k + 1));
        let slab = v.slab(k);
        for (j, face) in grid.faces().iter().enumerate() {
            if face.kind != FaceKind::Interior {
                continue;
            }
            let m = face_mass(a, b, face.lo.unwrap(), face.hi.unwrap());
            total += perspective(m, slab[j] * slab[j], kappa);
        }
    }
    Ok(total * grid.cell_volume() * grid.dt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense grid search over `[0, 2]^2` refined around the best point.
    fn brute_force_prox(m0: f64, f0: f64, gamma: f64, kappa: f64) -> (f64, f64) {
        let obj = |m: f64, f: f64| {
            perspective(m, f * f, kappa) + ((m - m0).powi(2) + (f - f0).powi(2)) / (2.0 * gamma)
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let n = 400;
        for i in 0..=n {
            for j in 0..=n {
                let (m, f) = (2.0 * i as f64 / n as f64, -2.0 + 4.0 * j as f64 / n as f64);
                let v = obj(m, f);
                if v < best.0 {
                    best = (v, m, f);
                }
            }
        }
        // Refine at 1e-4 resolution in a window around the coarse optimum.
        let (mut bm, mut bf) = (best.1, best.2);
        let mut step = 0.01;
        while step >= 1e-4 {
            let (cm, cf) = (bm, bf);
            for i in -10..=10 {
                for j in -10..=10 {
                    let m = (cm + i as f64 * step).max(0.0);
                    let f = cf + j as f64 * step;
                    let v = obj(m, f);
                    if v < best.0 {
                        best = (v, m, f);
                        bm = m;
                        bf = f;
                    }
                }
            }
            step /= 10.0;
        }
        (best.1, best.2)
    }

    #[test]
    fn action_examples() {
        assert_eq!(action_density(1.0, &[2.0], ActionConvention::Whole).unwrap(), 4.0);
        assert_eq!(action_density(0.0, &[0.0], ActionConvention::Whole).unwrap(), 0.0);
        assert_eq!(action_density(0.5, &[1.0], ActionConvention::Half).unwrap(), 1.0);
        assert!(action_density(0.0, &[1.0], ActionConvention::Whole).unwrap().is_infinite());
        assert!(action_density(-1.0, &[0.0], ActionConvention::Whole).is_err());
    }

    #[test]
    fn conventions_differ_by_two() {
        let w = action_density(0.3, &[1.2, -0.4], ActionConvention::Whole).unwrap();
        let h = action_density(0.3, &[1.2, -0.4], ActionConvention::Half).unwrap();
        assert!((w - 2.0 * h).abs() < 1e-15);
    }

    #[test]
    fn prox_examples() {
        let (m, f) = prox_action(1.0, &[0.0], 1.0, ActionConvention::Whole).unwrap();
        assert_eq!((m, f[0]), (1.0, 0.0));
        let (m, f) = prox_action(-5.0, &[0.0], 1.0, ActionConvention::Whole).unwrap();
        assert_eq!((m, f[0]), (0.0, 0.0));
        assert!(prox_action(1.0, &[1.0], 0.0, ActionConvention::Whole).is_err());
    }

    #[test]
    fn prox_matches_grid_search() {
        // Frozen oracle (1.0627, 0.8416): grid search at 1e-3, refined to 1e-4.
        let (m, f) = prox_action(1.0, &[1.0], 0.1, ActionConvention::Whole).unwrap();
        let (bm, bf) = brute_force_prox(1.0, 1.0, 0.1, 1.0);
        assert!((m - bm).abs() < 1e-3 && (f[0] - bf).abs() < 1e-3, "{m} {} vs {bm} {bf}", f[0]);
        assert!((m - 1.0627).abs() < 1e-3 && (f[0] - 0.8416).abs() < 1e-3, "{m} {}", f[0]);
    }

    #[test]
    fn prox_satisfies_first_order_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let m0 = rng.gen_range(-2.0..3.0);
            let f0 = rng.gen_range(-3.0..3.0);
            let gamma = 10f64.powf(rng.gen_range(-3.0..1.0));
            for kappa in [1.0, 0.5] {
                let (m, s) = prox_perspective(m0, f0 * f0, gamma, kappa, f64::INFINITY);
                let f = s * f0;
                if m > 0.0 {
                    let gm = -kappa * f * f / (m * m) + (m - m0) / gamma;
                    let gf = 2.0 * kappa * f / m + (f - f0) / gamma;
                    assert!(gm.abs() < 1e-9 * (1.0 + m0.abs() + f0 * f0 / gamma), "gm {gm}");
                    assert!(gf.abs() < 1e-9 * (1.0 + f0.abs() / gamma), "gf {gf}");
                } else {
                    // Vacuum: (m0, f0)/gamma must lie in the subdifferential at 0,
                    // i.e. m0 + kappa |f0|^2 / (4 kappa^2 gamma) <= 0.
                    assert!(m0 + f0 * f0 / (4.0 * kappa * gamma) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn prox_optimality_by_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..500 {
            let m0 = rng.gen_range(-1.0..2.0);
            let f0 = rng.gen_range(-2.0..2.0);
            let gamma = rng.gen_range(0.01..1.0);
            let (m, f) = prox_action(m0, &[f0], gamma, ActionConvention::Whole).unwrap();
            let obj = |mm: f64, ff: f64| {
                perspective(mm, ff * ff, 1.0)
                    + ((mm - m0).powi(2) + (ff - f0).powi(2)) / (2.0 * gamma)
            };
            let base = obj(m, f[0]);
            for (dm, df) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h), (h, h), (-h, h)] {
                let mm = m + dm;
                if mm < 0.0 {
                    continue;
                }
                assert!(obj(mm, f[0] + df) >= base - 1e-10);
            }
        }
    }

    #[test]
    fn prox_small_step_limit() {
        let g = 1e-8;
        for (m0, f0) in [(1.0, 0.5), (0.3, -2.0), (-0.5, 1.0), (2.0, 0.0)] {
            let (m, f) = prox_action(m0, &[f0], g, ActionConvention::Whole).unwrap();
            // Converges to the projection onto the closed domain {m >= 0}.
            let em = m0.max(0.0);
            let tol = if m0 > 0.0 { 1e-6 } else { 1e-3 };
            assert!((m - em).abs() < tol && (f[0] - f0).abs() < tol, "{m0} {f0}: {m} {}", f[0]);
        }
    }

    #[test]
    fn capped_prox_clamps() {
        let (m, s) = prox_perspective(2.0, 1.0, 0.1, 1.0, 0.5);
        assert_eq!(m, 0.5);
        assert!((s - 0.5 / 0.7).abs() < 1e-14);
    }

    #[test]
    fn project_cap_examples() {
        assert_eq!(project_cap(1.5, 1.0), 1.0);
        assert_eq!(project_cap(0.5, f64::INFINITY), 0.5);
        assert_eq!(project_cap(-0.1, 1.0), 0.0);
    }

    #[test]
    fn midpoint_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let (m1, m2) = (rng.gen_range(1e-3..3.0), rng.gen_range(1e-3..3.0));
            let f1 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let f2 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let mid = [(f1[0] + f2[0]) / 2.0, (f1[1] + f2[1]) / 2.0];
            let a = action_density((m1 + m2) / 2.0, &mid, ActionConvention::Whole).unwrap();
            let b = action_density(m1, &f1, ActionConvention::Whole).unwrap();
            let c = action_density(m2, &f2, ActionConvention::Whole).unwrap();
            assert!(a <= 0.5 * (b + c) * (1.0 + 1e-12) + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn one_homogeneous(m in 1e-3..5.0f64, f in -5.0..5.0f64, lam in 1e-2..1e2f64) {
            let a = action_density(lam * m, &[lam * f], ActionConvention::Whole).unwrap();
            let b = action_density(m, &[f], ActionConvention::Whole).unwrap();
            prop_assert!((a - lam * b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn total_action_translation_and_scaling() {
        // Unit-mass block of width 1/4 moving by D = 0.5 with V = D * face mass.
        let n = 128;
        let nt = 64;
        let g = Grid::boxed(&[n], &[0.0], &[1.0], nt).unwrap();
        let d = 0.5;
        let profile = |t: f64| {
            (0..n)
                .map(|c| {
                    let x0 = c as f64 / n as f64;
                    let (a, b) = (0.125 + d * t, 0.375 + d * t);
                    let overlap = (x0 + 1.0 / n as f64).min(b) - x0.max(a);
                    4.0 * overlap.max(0.0) * n as f64
                })
                .collect::<Vec<f64>>()
        };
        let rho = DensityField::from_slices(&g, |k| profile(k as f64 / nt as f64)).unwrap();
        let mut v = MomentumField::zeros(&g);
        for k in 0..nt {
            let (a, b) = (rho.slice(k).to_vec(), rho.slice(k + 1).to_vec());
            for (j, f) in g.faces().iter().enumerate() {
                if f.is_interior() {
                    v.slab_mut(k)[j] = d * face_mass(&a, &b, f.lo.unwrap(), f.hi.unwrap());
                }
            }
        }
        let e = total_action(&rho, &v, &g, ActionConvention::Whole).unwrap();
        assert!((e - d * d).abs() < 1e-9, "{e}");
        let e0 = total_action(&rho, &MomentumField::zeros(&g), &g, ActionConvention::Whole).unwrap();
        assert_eq!(e0, 0.0);
        let e3 = total_action(&rho, &v.scaled(3.0), &g, ActionConvention::Whole).unwrap();
        assert!((e3 - 9.0 * e).abs() < 1e-9);
    }
}
