//! Space-time gradient, its adjoint, and the elliptic solve of the splitting.
//!
//! The potential phi lives at time nodes 0..=nt with phi[nt] = g. Cost points
//! sit at (interval k, cell c); there `a = (phi[k+1] - phi[k])/dt` and
//! `b[g]` is the one-sided spatial difference of phi[k] selected by the bits of
//! group `g` (bit `axis` set = forward difference). With the weighted inner
//! product `a a' + (1/G) sum_g b_g . b'_g`, the normal operator of the
//! homogeneous part is Q = -D_tt (Neumann at t = 0, Dirichlet at t = T) - Lap,
//! which is SPD and diagonalised by a spatial DFT plus a tridiagonal solve in time.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Layout helper for cost-point data.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub grid: GridSpec,
    pub cells: usize,
    pub groups: usize,
    pub d: usize,
}

impl Layout {
    pub fn new(grid: GridSpec) -> Self {
        Layout { grid, cells: grid.cells(), groups: grid.groups(), d: grid.d }
    }

    /// Number of `b` entries per cost point.
    pub fn bw(&self) -> usize {
        self.groups * self.d
    }

    pub fn n_points(&self) -> usize {
        self.grid.nt * self.cells
    }
}

/// One-sided differences of a spatial slice at every cell, written as `[c][g][axis]`.
pub fn one_sided_gradients(lay: &Layout, u: &[f64], out: &mut [f64]) {
    let grid = &lay.grid;
    let idx = 1.0 / grid.dx();
    let bw = lay.bw();
    for c in 0..lay.cells {
        let uc = u[c];
        let mut fwd = [0.0; 2];
        let mut bwd = [0.0; 2];
        for a in 0..lay.d {
            fwd[a] = (u[grid.shift(c, a, true)] - uc) * idx;
            bwd[a] = (uc - u[grid.shift(c, a, false)]) * idx;
        }
        let o = &mut out[c * bw..(c + 1) * bw];
        for g in 0..lay.groups {
            for a in 0..lay.d {
                o[g * lay.d + a] = if g >> a & 1 == 1 { fwd[a] } else { bwd[a] };
            }
        }
    }
}

/// Space-time gradient of the full potential (nt + 1 node slices).
pub fn st_gradient(lay: &Layout, phi: &[f64], a: &mut [f64], b: &mut [f64]) {
    let n = lay.cells;
    let dt = lay.grid.dt();
    let bw = lay.bw();
    for k in 0..lay.grid.nt {
        let (p0, p1) = (&phi[k * n..(k + 1) * n], &phi[(k + 1) * n..(k + 2) * n]);
        for c in 0..n {
            a[k * n + c] = (p1[c] - p0[c]) / dt;
        }
        one_sided_gradients(lay, p0, &mut b[k * n * bw..(k + 1) * n * bw]);
    }
}

/// Adjoint of the homogeneous space-time gradient (phi[nt] = 0); output has nt slices.
pub fn st_adjoint(lay: &Layout, a: &[f64], b: &[f64], out: &mut [f64]) {
    let grid = &lay.grid;
    let n = lay.cells;
    let dt = grid.dt();
    let idx = 1.0 / grid.dx();
    let bw = lay.bw();
    let ginv = 1.0 / lay.groups as f64;
    for k in 0..grid.nt {
        let bk = &b[k * n * bw..(k + 1) * n * bw];
        for c in 0..n {
            let prev = if k > 0 { a[(k - 1) * n + c] } else { 0.0 };
            let mut acc = (prev - a[k * n + c]) / dt;
            let mut sp = 0.0;
            for g in 0..lay.groups {
                for ax in 0..lay.d {
                    let j = g * lay.d + ax;
                    if g >> ax & 1 == 1 {
                        sp += bk[grid.shift(c, ax, false) * bw + j] - bk[c * bw + j];
                    } else {
                        sp += bk[c * bw + j] - bk[grid.shift(c, ax, true) * bw + j];
                    }
                }
            }
            acc += sp * idx * ginv;
            out[k * n + c] = acc;
        }
    }
}

/// Q phi for phi on nodes 0..nt (the Dirichlet node is excluded).
pub fn apply_q(grid: &GridSpec, phi: &[f64], out: &mut [f64]) {
    let n = grid.cells();
    let nt = grid.nt;
    let it2 = 1.0 / (grid.dt() * grid.dt());
    let ix2 = 1.0 / (grid.dx() * grid.dx());
    for k in 0..nt {
        for c in 0..n {
            let p = phi[k * n + c];
            let mut t = if k + 1 < nt { p - phi[(k + 1) * n + c] } else { p };
            if k > 0 {
                t += p - phi[(k - 1) * n + c];
            }
            let mut s = 0.0;
            for a in 0..grid.d {
                s += 2.0 * p - phi[k * n + grid.shift(c, a, true)] - phi[k * n + grid.shift(c, a, false)];
            }
            out[k * n + c] = t * it2 + s * ix2;
        }
    }
}

/// Exact solver for Q via spatial DFT and Thomas elimination in time.
pub struct FastSolver {
    grid: GridSpec,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// per frequency: modified super-diagonal and inverse pivots, `[f][k]`
    cprime: Vec<f64>,
    inv_piv: Vec<f64>,
}

impl FastSolver {
    pub fn new(grid: GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.nx);
        let inv = planner.plan_fft_inverse(grid.nx);
        let n = grid.cells();
        let nt = grid.nt;
        let it2 = 1.0 / (grid.dt() * grid.dt());
        let ix2 = 1.0 / (grid.dx() * grid.dx());
        let mut cprime = vec![0.0; n * nt];
        let mut inv_piv = vec![0.0; n * nt];
        for f in 0..n {
            let mut lam = 0.0;
            let js = [f % grid.nx, f / grid.nx];
            for &j in js.iter().take(grid.d) {
                let sn = (std::f64::consts::PI * j as f64 / grid.nx as f64).sin();
                lam += 4.0 * sn * sn * ix2;
            }
            let off = -it2;
            let mut prev_c = 0.0;
            for k in 0..nt {
                let diag = if k == 0 { it2 + lam } else { 2.0 * it2 + lam };
                let piv = diag - off * prev_c;
                inv_piv[f * nt + k] = 1.0 / piv;
                prev_c = off / piv;
                cprime[f * nt + k] = prev_c;
            }
        }
        FastSolver { grid, fwd, inv, cprime, inv_piv }
    }

    fn transform(&self, buf: &mut [Complex64], forward: bool) {
        let nx = self.grid.nx;
        let plan = if forward { &self.fwd } else { &self.inv };
        plan.process(buf);
        if self.grid.d == 2 {
            let mut col = vec![Complex64::new(0.0, 0.0); nx];
            for i in 0..nx {
                for j in 0..nx {
                    col[j] = buf[j * nx + i];
                }
                plan.process(&mut col);
                for j in 0..nx {
                    buf[j * nx + i] = col[j];
                }
            }
        }
    }

    /// Solves Q phi = rhs (nt slices).
    pub fn solve(&self, rhs: &[f64], phi: &mut [f64]) {
        let n = self.grid.cells();
        let nt = self.grid.nt;
        let mut spec = vec![Complex64::new(0.0, 0.0); n * nt];
        for k in 0..nt {
            let s = &mut spec[k * n..(k + 1) * n];
            for c in 0..n {
                s[c] = Complex64::new(rhs[k * n + c], 0.0);
            }
            self.transform(s, true);
        }
        let off = -1.0 / (self.grid.dt() * self.grid.dt());
        let mut col = vec![Complex64::new(0.0, 0.0); nt];
        for f in 0..n {
            let cp = &self.cprime[f * nt..(f + 1) * nt];
            let ip = &self.inv_piv[f * nt..(f + 1) * nt];
            let mut prev = Complex64::new(0.0, 0.0);
            for k in 0..nt {
                let v = (spec[k * n + f] - prev * off) * ip[k];
                col[k] = v;
                prev = v;
            }
            for k in (0..nt - 1).rev() {
                col[k] = col[k] - col[k + 1] * cp[k];
            }
            for k in 0..nt {
                spec[k * n + f] = col[k];
            }
        }
        let scale = 1.0 / n as f64;
        for k in 0..nt {
            let s = &mut spec[k * n..(k + 1) * n];
            self.transform(s, false);
            for c in 0..n {
                phi[k * n + c] = s[c].re * scale;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear map written into its second argument.
pub type LinearOp<'a> = &'a dyn Fn(&[f64], &mut [f64]);

/// Preconditioned conjugate gradient for an SPD operator, warm-started from `x`.
pub fn pcg(
    apply: LinearOp<'_>,
    precond: Option<LinearOp<'_>>,
    rhs: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iters: usize,
) -> Result<CgReport> {
    let n = rhs.len();
    let bnorm = dot(rhs, rhs).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport { iterations: 0, relative_residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    let mut z = vec![0.0; n];
    let prec = |r: &[f64], z: &mut [f64]| match precond {
        Some(p) => p(r, z),
        None => z.copy_from_slice(r),
    };
    prec(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = dot(&r, &r).sqrt() / bnorm;
    let mut it = 0;
    while res > tol {
        if it >= max_iters {
            return Err(Error::CgNotConverged { iters: it, residual: res });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::CgNotConverged { iters: it, residual: res });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        prec(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = dot(&r, &r).sqrt() / bnorm;
        it += 1;
    }
    Ok(CgReport { iterations: it, relative_residual: res })
}
