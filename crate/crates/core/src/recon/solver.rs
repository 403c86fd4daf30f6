//! Krylov solvers for the grid Poisson system.
//!
//! The operator is the 7-point negative Laplacian (scaled by h²) with
//! homogeneous Dirichlet conditions: boundary nodes are pinned to zero and
//! every vector keeps them at zero.

use serde::{Deserialize, Serialize};

/// Reductions are summed in fixed-size chunks in index order so results do
/// not depend on how the loops are scheduled.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KrylovMethod {
    /// Conjugate gradients.
    ConjugateGradient,
    /// Conjugate residuals: minimises the residual norm over the same
    /// Krylov space, so the residual never increases.
    #[default]
    ConjugateResidual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Relative residual ‖b − Ax‖/‖b‖ after each iteration, starting with
    /// the initial guess.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl SolveStats {
    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().unwrap_or(&f64::NAN)
    }
}

/// `A x` for the scaled negative Laplacian on an `nx × ny × nz` node grid.
#[derive(Debug, Clone, Copy)]
pub struct GridLaplacian {
    pub dims: [usize; 3],
}

impl GridLaplacian {
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        let [nx, ny, nz] = self.dims;
        i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz
    }

    pub fn zero_boundary(&self, x: &mut [f64]) {
        let [nx, ny, nz] = self.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if self.is_boundary(i, j, k) {
                        x[i + nx * (j + ny * k)] = 0.0;
                    }
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let [nx, ny, nz] = self.dims;
        let sy = nx;
        let sz = nx * ny;
        out.fill(0.0);
        for k in 1..nz.saturating_sub(1) {
            for j in 1..ny.saturating_sub(1) {
                let row = j * sy + k * sz;
                for i in 1..nx - 1 {
                    let c = row + i;
                    out[c] = 6.0 * x[c] - x[c - 1] - x[c + 1] - x[c - sy] - x[c + sy] - x[c - sz] - x[c + sz];
                }
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.chunks(CHUNK)
        .zip(b.chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `p ← r + beta p`
fn xpby(r: &[f64], beta: f64, p: &mut [f64]) {
    for (pi, ri) in p.iter_mut().zip(r) {
        *pi = ri + beta * *pi;
    }
}

/// Solves `A x = b` starting from `x`; `b` must vanish on the boundary.
/// Stops when the relative residual is at most `tol` or after `max_iter`
/// iterations.
pub fn solve(op: &GridLaplacian, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize, method: KrylovMethod) -> SolveStats {
    let n = op.len();
    assert_eq!(b.len(), n);
    assert_eq!(x.len(), n);
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.fill(0.0);
        return SolveStats { iterations: 0, residuals: vec![0.0], converged: true };
    }
    op.zero_boundary(x);
    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut residuals = vec![dot(&r, &r).sqrt() / bnorm];
    if residuals[0] <= tol {
        return SolveStats { iterations: 0, residuals, converged: true };
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    match method {
        KrylovMethod::ConjugateGradient => {
            let mut rr = dot(&r, &r);
            for it in 1..=max_iter {
                op.apply(&p, &mut ap);
                let alpha = rr / dot(&p, &ap);
                axpy(alpha, &p, x);
                axpy(-alpha, &ap, &mut r);
                let rr_new = dot(&r, &r);
                residuals.push(rr_new.sqrt() / bnorm);
                if rr_new.sqrt() / bnorm <= tol {
                    return SolveStats { iterations: it, residuals, converged: true };
                }
                xpby(&r, rr_new / rr, &mut p);
                rr = rr_new;
            }
        }
        KrylovMethod::ConjugateResidual => {
            let mut ar = vec![0.0; n];
            op.apply(&r, &mut ar);
            ap.copy_from_slice(&ar);
            let mut rar = dot(&r, &ar);
            for it in 1..=max_iter {
                let alpha = rar / dot(&ap, &ap);
                axpy(alpha, &p, x);
                axpy(-alpha, &ap, &mut r);
                let res = dot(&r, &r).sqrt() / bnorm;
                residuals.push(res);
                if res <= tol {
                    return SolveStats { iterations: it, residuals, converged: true };
                }
                op.apply(&r, &mut ar);
                let rar_new = dot(&r, &ar);
                let beta = rar_new / rar;
                xpby(&r, beta, &mut p);
                xpby(&ar, beta, &mut ap);
                rar = rar_new;
            }
        }
    }
    SolveStats { iterations: max_iter, residuals, converged: false }
}
