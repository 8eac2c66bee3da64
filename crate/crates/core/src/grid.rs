//! Space-time grid on [0,T] x T^d with staggered density/momentum storage.
//!
//! Cells are indexed `c = i + nx*j` (axis 0 is x, axis 1 is y). The face
//! `(axis, c)` sits between cell `c` and its forward neighbour along `axis`.
//! Densities live at time nodes, momenta at time midpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    pub nx: usize,
    pub nt: usize,
    #[serde(rename = "T")]
    pub t_final: f64,
}

impl GridSpec {
    pub fn new(d: usize, nx: usize, nt: usize, t_final: f64) -> Result<Self> {
        let g = GridSpec { d, nx, nt, t_final };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<()> {
        if self.d != 1 && self.d != 2 {
            return Err(Error::InvalidGrid(format!("d must be 1 or 2, got {}", self.d)));
        }
        if self.nx < 4 {
            return Err(Error::InvalidGrid(format!("nx must be >= 4, got {}", self.nx)));
        }
        if self.nt < 2 {
            return Err(Error::InvalidGrid(format!("nt must be >= 2, got {}", self.nt)));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::InvalidGrid(format!("T must be positive, got {}", self.t_final)));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }

    pub fn cells(&self) -> usize {
        self.nx.pow(self.d as u32)
    }

    /// Cell volume dx^d.
    pub fn vol(&self) -> f64 {
        self.dx().powi(self.d as i32)
    }

    /// Number of one-sided difference combinations (2^d).
    pub fn groups(&self) -> usize {
        1 << self.d
    }

    pub fn cell_center(&self, c: usize) -> [f64; 2] {
        let dx = self.dx();
        let i = c % self.nx;
        let j = c / self.nx;
        if self.d == 1 {
            [(i as f64 + 0.5) * dx, 0.0]
        } else {
            [(i as f64 + 0.5) * dx, (j as f64 + 0.5) * dx]
        }
    }

    /// Neighbour of cell `c` one step forward (`fwd`) or backward along `axis`.
    #[inline]
    pub fn shift(&self, c: usize, axis: usize, fwd: bool) -> usize {
        let n = self.nx;
        if axis == 0 {
            let i = c % n;
            let base = c - i;
            let ni = if fwd { if i + 1 == n { 0 } else { i + 1 } } else if i == 0 { n - 1 } else { i - 1 };
            base + ni
        } else {
            let j = c / n;
            let i = c % n;
            let nj = if fwd { if j + 1 == n { 0 } else { j + 1 } } else if j == 0 { n - 1 } else { j - 1 };
            nj * n + i
        }
    }

    /// Mass of one spatial slice.
    pub fn mass(&self, slice: &[f64]) -> f64 {
        slice.iter().sum::<f64>() * self.vol()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldRole {
    Density,
    Value,
    Price,
    Generic,
}

/// Which time positions a scalar field is stored at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeLayout {
    /// nodes k = 0..=nt
    Nodes,
    /// midpoints k + 1/2, k = 0..nt
    Intervals,
    /// interior nodes k = 1..nt
    Interior,
    /// a single spatial slice
    Single,
}

impl TimeLayout {
    pub fn slices(self, grid: &GridSpec) -> usize {
        match self {
            TimeLayout::Nodes => grid.nt + 1,
            TimeLayout::Intervals => grid.nt,
            TimeLayout::Interior => grid.nt - 1,
            TimeLayout::Single => 1,
        }
    }

    pub fn time(self, grid: &GridSpec, k: usize) -> f64 {
        let dt = grid.dt();
        match self {
            TimeLayout::Nodes => k as f64 * dt,
            TimeLayout::Intervals => (k as f64 + 0.5) * dt,
            TimeLayout::Interior => (k + 1) as f64 * dt,
            TimeLayout::Single => grid.t_final,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub role: FieldRole,
    pub layout: TimeLayout,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: GridSpec, role: FieldRole, layout: TimeLayout) -> Self {
        let n = layout.slices(&grid) * grid.cells();
        ScalarField { grid, role, layout, values: vec![0.0; n] }
    }

    pub fn from_values(grid: GridSpec, role: FieldRole, layout: TimeLayout, values: Vec<f64>) -> Result<Self> {
        let n = layout.slices(&grid) * grid.cells();
        if values.len() != n {
            return Err(Error::ShapeMismatch(format!("expected {n} values, got {}", values.len())));
        }
        Ok(ScalarField { grid, role, layout, values })
    }

    pub fn slices(&self) -> usize {
        self.layout.slices(&self.grid)
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.cells();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.cells();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Face momenta at time midpoints, stored `[k][axis][cell]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl MomentumField {
    pub fn zeros(grid: GridSpec) -> Self {
        MomentumField { grid, values: vec![0.0; grid.nt * grid.d * grid.cells()] }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        let n = grid.nt * grid.d * grid.cells();
        if values.len() != n {
            return Err(Error::ShapeMismatch(format!("expected {n} momentum values, got {}", values.len())));
        }
        Ok(MomentumField { grid, values })
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.d * self.grid.cells();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.d * self.grid.cells();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn face(&self, k: usize, axis: usize, c: usize) -> f64 {
        let n = self.grid.cells();
        self.values[(k * self.grid.d + axis) * n + c]
    }
}

/// Divergence of one face slice into `out` (cells).
pub fn divergence_slice(grid: &GridSpec, w: &[f64], out: &mut [f64]) {
    let n = grid.cells();
    let idx = 1.0 / grid.dx();
    for c in 0..n {
        let mut acc = 0.0;
        for a in 0..grid.d {
            let fa = &w[a * n..(a + 1) * n];
            acc += fa[c] - fa[grid.shift(c, a, false)];
        }
        out[c] = acc * idx;
    }
}

/// Face gradient of one cell slice into `out` (faces, `[axis][cell]`).
pub fn gradient_slice(grid: &GridSpec, u: &[f64], out: &mut [f64]) {
    let n = grid.cells();
    let idx = 1.0 / grid.dx();
    for a in 0..grid.d {
        for c in 0..n {
            out[a * n + c] = (u[grid.shift(c, a, true)] - u[c]) * idx;
        }
    }
}

pub fn divergence(w: &MomentumField, k: usize) -> Result<Vec<f64>> {
    if k >= w.grid.nt {
        return Err(Error::IndexOutOfRange { index: k, limit: w.grid.nt });
    }
    let mut out = vec![0.0; w.grid.cells()];
    divergence_slice(&w.grid, w.slice(k), &mut out);
    Ok(out)
}

pub fn gradient(grid: &GridSpec, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != grid.cells() {
        return Err(Error::ShapeMismatch(format!("slice has {} cells, grid has {}", u.len(), grid.cells())));
    }
    let mut out = vec![0.0; grid.d * grid.cells()];
    gradient_slice(grid, u, &mut out);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ContinuityResidual {
    pub residual: ScalarField,
    pub norm: f64,
    pub initial_mismatch: f64,
}

/// r[k] = (m[k+1] - m[k])/dt + div w[k+1/2] and its discrete L2 norm.
pub fn continuity_residual(m: &ScalarField, w: &MomentumField, m0: &[f64]) -> Result<ContinuityResidual> {
    let grid = m.grid;
    if m.layout != TimeLayout::Nodes || w.grid != grid || m0.len() != grid.cells() {
        return Err(Error::ShapeMismatch("continuity_residual needs node density, matching momentum and m0".into()));
    }
    let n = grid.cells();
    let dt = grid.dt();
    let mut res = ScalarField::zeros(grid, FieldRole::Generic, TimeLayout::Intervals);
    let mut div = vec![0.0; n];
    let mut sq = 0.0;
    for k in 0..grid.nt {
        divergence_slice(&grid, w.slice(k), &mut div);
        let (m_k, m_k1) = (m.slice(k), m.slice(k + 1));
        let r = res.slice_mut(k);
        for c in 0..n {
            r[c] = (m_k1[c] - m_k[c]) / dt + div[c];
            sq += r[c] * r[c];
        }
    }
    let norm = (sq * dt * grid.vol()).sqrt();
    let initial_mismatch = m
        .slice(0)
        .iter()
        .zip(m0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(ContinuityResidual { residual: res, norm, initial_mismatch })
}

/// Periodic linear-interpolation stencil: lower index, upper index, weight of upper.
#[inline]
fn locate(pos: f64, offset: f64, n: usize) -> (usize, usize, f64) {
    let s = pos * n as f64 - offset;
    let fl = s.floor();
    let i0 = (fl as i64).rem_euclid(n as i64) as usize;
    let i1 = if i0 + 1 == n { 0 } else { i0 + 1 };
    (i0, i1, s - fl)
}

/// d-linear periodic interpolation of a cell slice sampled at `offset` (in cell units).
#[inline]
pub(crate) fn lerp_space(grid: &GridSpec, v: &[f64], x: &[f64], offset: [f64; 2]) -> f64 {
    let (i0, i1, fx) = locate(x[0], offset[0], grid.nx);
    if grid.d == 1 {
        return (1.0 - fx) * v[i0] + fx * v[i1];
    }
    let (j0, j1, fy) = locate(x[1], offset[1], grid.nx);
    let n = grid.nx;
    (1.0 - fy) * ((1.0 - fx) * v[j0 * n + i0] + fx * v[j0 * n + i1])
        + fy * ((1.0 - fx) * v[j1 * n + i0] + fx * v[j1 * n + i1])
}

/// Linear-in-time stencil over `count` samples at times `(k + shift) dt`, clamped at the ends.
#[inline]
fn time_stencil(t: f64, dt: f64, shift: f64, count: usize) -> (usize, usize, f64) {
    let s = (t / dt - shift).clamp(0.0, (count - 1) as f64);
    let k0 = (s.floor() as usize).min(count - 1);
    if k0 + 1 >= count {
        (k0, k0, 0.0)
    } else {
        (k0, k0 + 1, s - k0 as f64)
    }
}

/// Density at (t, x), linear in time between nodes and d-linear in space.
pub fn interp_density(m: &ScalarField, t: f64, x: &[f64]) -> f64 {
    let g = &m.grid;
    let (k0, k1, ft) = time_stencil(t, g.dt(), 0.0, g.nt + 1);
    let a = lerp_space(g, m.slice(k0), x, [0.5, 0.5]);
    let b = lerp_space(g, m.slice(k1), x, [0.5, 0.5]);
    (1.0 - ft) * a + ft * b
}

/// Momentum component `axis` at (t, x), linear in time between midpoints.
pub fn interp_momentum(w: &MomentumField, axis: usize, t: f64, x: &[f64]) -> f64 {
    let g = &w.grid;
    let n = g.cells();
    let (k0, k1, ft) = time_stencil(t, g.dt(), 0.5, g.nt);
    let mut off = [0.5, 0.5];
    off[axis] = 1.0;
    let a = lerp_space(g, &w.slice(k0)[axis * n..(axis + 1) * n], x, off);
    let b = lerp_space(g, &w.slice(k1)[axis * n..(axis + 1) * n], x, off);
    (1.0 - ft) * a + ft * b
}

/// Velocity w/m at (t, x). Only the first `d` entries are meaningful.
pub fn interp_velocity(m: &ScalarField, w: &MomentumField, t: f64, x: &[f64], floor: f64) -> Result<[f64; 2]> {
    let rho = interp_density(m, t, x);
    if !(rho >= floor) || rho <= 0.0 {
        return Err(Error::DegenerateVelocity { density: rho, floor, t, x: x.to_vec() });
    }
    let mut v = [0.0; 2];
    for (a, va) in v.iter_mut().enumerate().take(m.grid.d) {
        *va = interp_momentum(w, a, t, x) / rho;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g1(nx: usize) -> GridSpec {
        GridSpec::new(1, nx, 4, 1.0).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(3, 8, 8, 1.0).is_err());
        assert!(GridSpec::new(1, 3, 8, 1.0).is_err());
        assert!(GridSpec::new(1, 8, 1, 1.0).is_err());
        assert!(GridSpec::new(1, 8, 8, 0.0).is_err());
    }

    #[test]
    fn four_cell_stencils() {
        let g = g1(4);
        let grad = gradient(&g, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(grad, vec![4.0, -4.0, 0.0, 0.0]);
        let mut w = MomentumField::zeros(g);
        w.slice_mut(0)[0] = 1.0;
        let div = divergence(&w, 0).unwrap();
        assert_eq!(div, vec![4.0, -4.0, 0.0, 0.0]);
        assert!(divergence(&w, 4).is_err());
    }

    #[test]
    fn constant_flux_is_divergence_free() {
        let g = GridSpec::new(2, 6, 3, 1.0).unwrap();
        let mut w = MomentumField::zeros(g);
        w.values.iter_mut().for_each(|v| *v = 0.7);
        for k in 0..3 {
            assert!(divergence(&w, k).unwrap().iter().all(|v| v.abs() < 1e-12));
        }
        let grad = gradient(&g, &vec![2.5; 36]).unwrap();
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn explicit_transport_has_zero_residual() {
        let g = GridSpec::new(2, 5, 6, 0.5).unwrap();
        let n = g.cells();
        let mut w = MomentumField::zeros(g);
        for (i, v) in w.values.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.01;
        }
        let m0: Vec<f64> = (0..n).map(|c| 1.0 + 0.1 * (c as f64).sin()).collect();
        let mut m = ScalarField::zeros(g, FieldRole::Density, TimeLayout::Nodes);
        m.slice_mut(0).copy_from_slice(&m0);
        for k in 0..g.nt {
            let div = divergence(&w, k).unwrap();
            let prev = m.slice(k).to_vec();
            let next = m.slice_mut(k + 1);
            for c in 0..n {
                next[c] = prev[c] - g.dt() * div[c];
            }
        }
        let r = continuity_residual(&m, &w, &m0).unwrap();
        assert!(r.norm < 1e-12, "{}", r.norm);
        assert_eq!(r.initial_mismatch, 0.0);
    }

    #[test]
    fn constant_velocity_interpolates_exactly() {
        let g = GridSpec::new(2, 8, 4, 1.0).unwrap();
        let m = ScalarField::from_values(g, FieldRole::Density, TimeLayout::Nodes, vec![1.0; 5 * 64]).unwrap();
        let mut w = MomentumField::zeros(g);
        for k in 0..4 {
            w.slice_mut(k)[..64].iter_mut().for_each(|v| *v = 0.3);
        }
        for &(t, x, y) in &[(0.0, 0.1, 0.2), (0.77, 0.99, 0.5), (1.0, 0.0, 0.0)] {
            let v = interp_velocity(&m, &w, t, &[x, y], 1e-12).unwrap();
            assert!((v[0] - 0.3).abs() < 1e-14 && v[1].abs() < 1e-14);
        }
    }

    #[test]
    fn face_center_query_returns_stored_value() {
        let g = g1(8);
        let m: Vec<f64> = (0..5 * 8).map(|i| 1.0 + 0.1 * i as f64).collect();
        let m = ScalarField::from_values(g, FieldRole::Density, TimeLayout::Nodes, m).unwrap();
        let w: Vec<f64> = (0..4 * 8).map(|i| (i as f64 * 0.37).cos()).collect();
        let w = MomentumField::from_values(g, w).unwrap();
        // face 2 (between cells 2 and 3) at x = 3/8, midpoint k = 1 at t = 1.5 dt
        let t = 1.5 * g.dt();
        let x = [3.0 / 8.0];
        let rho = 0.5 * (interp_density(&m, g.dt(), &x) + interp_density(&m, 2.0 * g.dt(), &x));
        let v = interp_velocity(&m, &w, t, &x, 1e-12).unwrap();
        assert!((v[0] - w.face(1, 0, 2) / rho).abs() < 1e-13);
    }

    #[test]
    fn degenerate_density_is_an_error() {
        let g = g1(4);
        let m = ScalarField::zeros(g, FieldRole::Density, TimeLayout::Nodes);
        let w = MomentumField::zeros(g);
        assert!(matches!(
            interp_velocity(&m, &w, 0.3, &[0.2], 1e-9),
            Err(Error::DegenerateVelocity { .. })
        ));
    }

    /// Straightforward reference interpolator working in physical coordinates.
    fn reference_velocity(m: &ScalarField, w: &MomentumField, t: f64, x: f64, y: f64) -> [f64; 2] {
        let g = m.grid;
        let n = g.nx as i64;
        let h = g.dx();
        let wrap = |i: i64| i.rem_euclid(n) as usize;
        let sample = |vals: &dyn Fn(usize, usize) -> f64, px: f64, py: f64, ox: f64, oy: f64| {
            let fx = px / h - ox;
            let fy = py / h - oy;
            let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
            let (ax, ay) = (fx - ix as f64, fy - iy as f64);
            let mut acc = 0.0;
            for (dxi, wx) in [(0, 1.0 - ax), (1, ax)] {
                for (dyi, wy) in [(0, 1.0 - ay), (1, ay)] {
                    acc += wx * wy * vals(wrap(ix + dxi), wrap(iy + dyi));
                }
            }
            acc
        };
        let dt = g.dt();
        let tn = (t / dt).clamp(0.0, g.nt as f64);
        let kn = (tn.floor() as usize).min(g.nt - 1);
        let an = tn - kn as f64;
        let dens = |k: usize| sample(&|i, j| m.slice(k)[j * g.nx + i], x, y, 0.5, 0.5);
        let rho = (1.0 - an) * dens(kn) + an * dens(kn + 1);
        let tm = (t / dt - 0.5).clamp(0.0, (g.nt - 1) as f64);
        let km = (tm.floor() as usize).min(g.nt - 2);
        let am = tm - km as f64;
        let mut out = [0.0; 2];
        for axis in 0..2 {
            let (ox, oy) = if axis == 0 { (1.0, 0.5) } else { (0.5, 1.0) };
            let mom = |k: usize| sample(&|i, j| w.face(k, axis, j * g.nx + i), x, y, ox, oy);
            out[axis] = ((1.0 - am) * mom(km) + am * mom(km + 1)) / rho;
        }
        out
    }

    proptest! {
        #[test]
        fn adjoint_identity(seed in 0u64..1000, d in 1usize..=2, nx in 4usize..9) {
            let g = GridSpec::new(d, nx, 2, 1.0).unwrap();
            let n = g.cells();
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            };
            let u: Vec<f64> = (0..n).map(|_| next()).collect();
            let w: Vec<f64> = (0..d * n).map(|_| next()).collect();
            let mut grad = vec![0.0; d * n];
            gradient_slice(&g, &u, &mut grad);
            let mut div = vec![0.0; n];
            divergence_slice(&g, &w, &mut div);
            let lhs: f64 = grad.iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = -u.iter().zip(&div).map(|(a, b)| a * b).sum::<f64>();
            let scale = grad.iter().zip(&w).map(|(a, b)| (a * b).abs()).sum::<f64>().max(1e-300);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
            let total: f64 = div.iter().sum();
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            prop_assert!(total.abs() * g.dx() <= 1e-12 * l1.max(1.0));
        }

        #[test]
        fn residual_is_linear(seed in 0u64..500, lam in -3.0f64..3.0) {
            let g = GridSpec::new(1, 6, 3, 1.0).unwrap();
            let gen = |s: u64, len: usize| -> Vec<f64> {
                (0..len).map(|i| ((s as f64 + 1.3) * (i as f64 + 0.7)).sin()).collect()
            };
            let m1 = ScalarField::from_values(g, FieldRole::Generic, TimeLayout::Nodes, gen(seed, 24)).unwrap();
            let m2 = ScalarField::from_values(g, FieldRole::Generic, TimeLayout::Nodes, gen(seed + 7, 24)).unwrap();
            let w1 = MomentumField::from_values(g, gen(seed + 3, 18)).unwrap();
            let w2 = MomentumField::from_values(g, gen(seed + 5, 18)).unwrap();
            let z = vec![0.0; 6];
            let mut mc = m1.clone();
            mc.values.iter_mut().zip(&m2.values).for_each(|(a, b)| *a += lam * b);
            let mut wc = w1.clone();
            wc.values.iter_mut().zip(&w2.values).for_each(|(a, b)| *a += lam * b);
            let r1 = continuity_residual(&m1, &w1, &z).unwrap().residual;
            let r2 = continuity_residual(&m2, &w2, &z).unwrap().residual;
            let rc = continuity_residual(&mc, &wc, &z).unwrap().residual;
            for i in 0..rc.values.len() {
                prop_assert!((rc.values[i] - r1.values[i] - lam * r2.values[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn interpolation_matches_reference(seed in 0u64..300, t in 0.0f64..1.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let g = GridSpec::new(2, 5, 4, 1.0).unwrap();
            let n = g.cells();
            let m: Vec<f64> = (0..5 * n).map(|i| 1.0 + 0.5 * ((seed + i as u64) as f64 * 0.91).sin()).collect();
            let w: Vec<f64> = (0..4 * 2 * n).map(|i| ((seed * 3 + i as u64) as f64 * 1.7).cos()).collect();
            let m = ScalarField::from_values(g, FieldRole::Density, TimeLayout::Nodes, m).unwrap();
            let w = MomentumField::from_values(g, w).unwrap();
            let v = interp_velocity(&m, &w, t, &[x, y], 1e-12).unwrap();
            let r = reference_velocity(&m, &w, t, x, y);
            prop_assert!((v[0] - r[0]).abs() < 1e-12 && (v[1] - r[1]).abs() < 1e-12);
        }
    }
}
