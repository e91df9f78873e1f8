//! Fast solver for separable sums of one-dimensional second-difference operators.

use std::f64::consts::PI;
use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Boundary behaviour of one axis of the operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AxisKind {
    /// Tridiagonal `[-1, 2, -1]` with first and last diagonal entries 1.
    Neumann,
    /// Circulant `[-1, 2, -1]`.
    Periodic,
    /// Like `Neumann`, but with last diagonal entry 2.
    NeumannDirichlet,
}

enum AxisOp {
    Dct(Arc<dyn TransformType2And3<f64>>),
    Hartley(Arc<dyn Fft<f64>>),
    /// Row-major orthonormal eigenvectors.
    Dense(Vec<f64>),
}

struct Axis {
    len: usize,
    op: AxisOp,
    eig: Vec<f64>,
}

impl Axis {
    fn new(len: usize, kind: AxisKind) -> Self {
        let n = len as f64;
        match kind {
            AxisKind::Neumann => Axis {
                len,
                op: AxisOp::Dct(DctPlanner::new().plan_dct2(len)),
                eig: (0..len).map(|k| 2.0 - 2.0 * (PI * k as f64 / n).cos()).collect(),
            },
            AxisKind::Periodic => Axis {
                len,
                op: AxisOp::Hartley(FftPlanner::new().plan_fft_forward(len)),
                eig: (0..len).map(|k| 2.0 - 2.0 * (2.0 * PI * k as f64 / n).cos()).collect(),
            },
            AxisKind::NeumannDirichlet => {
                // Eigenvectors cos(theta (j + 1/2)) with cos(theta (n + 1/2)) = 0.
                let thetas: Vec<f64> = (0..len).map(|k| PI * (k as f64 + 0.5) / (n + 0.5)).collect();
                let mut q = vec![0.0; len * len];
                for (k, th) in thetas.iter().enumerate() {
                    let row = &mut q[k * len..(k + 1) * len];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (th * (j as f64 + 0.5)).cos();
                    }
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                Axis {
                    len,
                    op: AxisOp::Dense(q),
                    eig: thetas.iter().map(|t| 2.0 - 2.0 * t.cos()).collect(),
                }
            }
        }
    }
}

/// Solves `(sum_a w_a L_a) y = r` on a row-major tensor grid, where `L_a`
/// acts along axis `a`. The component of `r` in the null space is dropped.
pub(crate) struct SeparablePoisson {
    shape: Vec<usize>,
    axes: Vec<Axis>,
    inv_denominator: Vec<f64>,
}

impl SeparablePoisson {
    pub(crate) fn new(shape: &[usize], kinds: &[AxisKind], weights: &[f64]) -> Self {
        assert!(shape.len() == kinds.len() && shape.len() == weights.len());
        let axes: Vec<Axis> = shape.iter().zip(kinds).map(|(&n, &k)| Axis::new(n, k)).collect();
        let total: usize = shape.iter().product();
        let mut denom = vec![0.0; total];
        let mut idx = vec![0usize; shape.len()];
        for d in denom.iter_mut() {
            *d = axes.iter().zip(weights).zip(&idx).map(|((ax, w), &i)| w * ax.eig[i]).sum();
            for a in (0..shape.len()).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let scale = denom.iter().cloned().fold(0.0, f64::max);
        let inv_denominator = denom
            .iter()
            .map(|d| if *d > 1e-12 * scale { 1.0 / d } else { 0.0 })
            .collect();
        SeparablePoisson { shape: shape.to_vec(), axes, inv_denominator }
    }

    pub(crate) fn solve(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.inv_denominator.len());
        for a in 0..self.axes.len() {
            self.transform(x, a, false);
        }
        for (v, d) in x.iter_mut().zip(&self.inv_denominator) {
            *v *= d;
        }
        for a in 0..self.axes.len() {
            self.transform(x, a, true);
        }
    }

    fn transform(&self, x: &mut [f64], a: usize, inverse: bool) {
        let ax = &self.axes[a];
        let len = ax.len;
        if len == 1 {
            return;
        }
        let stride: usize = self.shape[a + 1..].iter().product();
        let outer: usize = self.shape[..a].iter().product();
        if let AxisOp::Dense(q) = &ax.op {
            let mut tmp = vec![0.0; len * stride];
            for o in 0..outer {
                let block = &mut x[o * len * stride..(o + 1) * len * stride];
                tmp.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..len {
                    let out = &mut tmp[k * stride..(k + 1) * stride];
                    for j in 0..len {
                        let c = if inverse { q[j * len + k] } else { q[k * len + j] };
                        let src = &block[j * stride..(j + 1) * stride];
                        for (o, s) in out.iter_mut().zip(src) {
                            *o += c * s;
                        }
                    }
                }
                block.copy_from_slice(&tmp);
            }
            return;
        }
        let mut line = vec![0.0; len];
        let mut cline = vec![Complex::new(0.0, 0.0); len];
        let scratch_len = match &ax.op {
            AxisOp::Dct(p) => p.get_scratch_len(),
            AxisOp::Hartley(p) => p.get_inplace_scratch_len(),
            AxisOp::Dense(_) => 0,
        };
        let mut scratch = vec![0.0; scratch_len];
        let mut cscratch = vec![Complex::new(0.0, 0.0); scratch_len];
        for o in 0..outer {
            let base = o * len * stride;
            for i in 0..stride {
                for (j, v) in line.iter_mut().enumerate() {
                    *v = x[base + j * stride + i];
                }
                match &ax.op {
                    AxisOp::Dct(p) => {
                        if inverse {
                            p.process_dct3_with_scratch(&mut line, &mut scratch);
                            let s = 2.0 / len as f64;
                            line.iter_mut().for_each(|v| *v *= s);
                        } else {
                            p.process_dct2_with_scratch(&mut line, &mut scratch);
                        }
                    }
                    AxisOp::Hartley(p) => {
                        for (c, v) in cline.iter_mut().zip(&line) {
                            *c = Complex::new(*v, 0.0);
                        }
                        p.process_with_scratch(&mut cline, &mut cscratch);
                        let s = if inverse { 1.0 / len as f64 } else { 1.0 };
                        for (v, c) in line.iter_mut().zip(&cline) {
                            *v = s * (c.re - c.im);
                        }
                    }
                    AxisOp::Dense(_) => unreachable!(),
                }
                for (j, v) in line.iter().enumerate() {
                    x[base + j * stride + i] = *v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn apply_axis(x: &[f64], shape: &[usize], a: usize, kind: AxisKind) -> Vec<f64> {
        let len = shape[a];
        let stride: usize = shape[a + 1..].iter().product();
        let outer: usize = shape[..a].iter().product();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..stride {
                let at = |j: usize| o * len * stride + j * stride + i;
                for j in 0..len {
                    let mut v = 0.0;
                    let mut diag = 0.0;
                    if j > 0 || kind == AxisKind::Periodic {
                        v -= x[at((j + len - 1) % len)];
                        diag += 1.0;
                    }
                    if j + 1 < len || kind == AxisKind::Periodic {
                        v -= x[at((j + 1) % len)];
                        diag += 1.0;
                    } else if kind == AxisKind::NeumannDirichlet {
                        diag += 1.0;
                    }
                    out[at(j)] = v + diag * x[at(j)];
                }
            }
        }
        out
    }

    fn check(shape: &[usize], kinds: &[AxisKind], weights: &[f64], singular: bool) {
        let total: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut y: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if singular {
            let mean = y.iter().sum::<f64>() / total as f64;
            y.iter_mut().for_each(|v| *v -= mean);
        }
        let mut r = vec![0.0; total];
        for a in 0..shape.len() {
            let part = apply_axis(&y, shape, a, kinds[a]);
            for (ri, p) in r.iter_mut().zip(part) {
                *ri += weights[a] * p;
            }
        }
        let solver = SeparablePoisson::new(shape, kinds, weights);
        solver.solve(&mut r);
        for (a, b) in r.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn inverts_neumann_box() {
        check(&[6, 9], &[AxisKind::Neumann, AxisKind::Neumann], &[1.0, 3.5], true);
    }

    #[test]
    fn inverts_periodic_and_mixed_axes() {
        check(&[5, 8], &[AxisKind::Neumann, AxisKind::Periodic], &[2.0, 0.5], true);
        check(&[7, 6], &[AxisKind::NeumannDirichlet, AxisKind::Periodic], &[1.0, 1.0], false);
        check(&[4, 3, 5], &[AxisKind::NeumannDirichlet, AxisKind::Neumann, AxisKind::Periodic], &[1.0, 2.0, 0.3], false);
    }

    #[test]
    fn drops_null_space() {
        let solver = SeparablePoisson::new(&[4, 4], &[AxisKind::Neumann, AxisKind::Periodic], &[1.0, 1.0]);
        let mut x = vec![1.0; 16];
        solver.solve(&mut x);
        assert!(x.iter().all(|v| v.abs() < 1e-12));
    }
}
