//! Lagrangian layer: mollified fields, sampled agent trajectories, marginal and
//! energy checks, and single-path optimality under random perturbations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::duality::{energy_terms, kinetic, price_measure};
use crate::error::{Error, Result};
use crate::grid::{lerp_space, FieldRole, GridSpec, MomentumField, ScalarField, TimeLayout};
use crate::model::ProblemSpec;
use crate::solver::Solution;

/// Positivity floor applied to the mollified density.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Periodic Gaussian weights of width `eps` on `nx` cells, summing to one.
pub fn gaussian_weights(nx: usize, eps: f64) -> Vec<f64> {
    let h = 1.0 / nx as f64;
    let mut w: Vec<f64> = (0..nx)
        .map(|j| {
            let d = (j.min(nx - j)) as f64 * h;
            (-0.5 * d * d / (eps * eps)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.25) {
        return Err(Error::InvalidParameter(format!("mollification width {eps} outside (0, 0.25)")));
    }
    Ok(())
}

/// Circular convolution of one spatial slice with the Gaussian, axis by axis.
pub fn mollify_slice(grid: &GridSpec, v: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    if v.len() != grid.cells() {
        return Err(Error::ShapeMismatch(format!("slice of {} values on {} cells", v.len(), grid.cells())));
    }
    let w = gaussian_weights(grid.nx, eps);
    Ok(convolve(grid, v, &w))
}

fn convolve(grid: &GridSpec, v: &[f64], w: &[f64]) -> Vec<f64> {
    let nx = grid.nx;
    let mut cur = v.to_vec();
    for axis in 0..grid.d {
        let stride = if axis == 0 { 1 } else { nx };
        let mut out = vec![0.0; cur.len()];
        for (c, o) in out.iter_mut().enumerate() {
            let i = (c / stride) % nx;
            let base = c - i * stride;
            let mut acc = 0.0;
            for (j, wj) in w.iter().enumerate() {
                acc += wj * cur[base + ((i + nx - j) % nx) * stride];
            }
            *o = acc;
        }
        cur = out;
    }
    cur
}

#[derive(Clone, Debug)]
pub struct MollifiedFields {
    pub grid: GridSpec,
    pub eps: f64,
    pub floor: f64,
    /// smallest mollified density before the floor
    pub min_m: f64,
    pub m: ScalarField,
    pub w: MomentumField,
    pub u: ScalarField,
    /// f(m) + beta on intervals
    pub alpha: ScalarField,
    pub beta_t: Vec<f64>,
}

impl MollifiedFields {
    /// The same fields with the momentum reversed.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.w.values.iter_mut().for_each(|v| *v = -*v);
        out
    }
}

fn mollify_field(f: &ScalarField, w: &[f64]) -> ScalarField {
    let grid = f.grid;
    let mut out = f.clone();
    let vals: Vec<Vec<f64>> = (0..f.slices()).into_par_iter().map(|k| convolve(&grid, f.slice(k), w)).collect();
    for (k, v) in vals.into_iter().enumerate() {
        out.slice_mut(k).copy_from_slice(&v);
    }
    out
}

pub fn mollify(sol: &Solution, problem: &ProblemSpec, eps: f64) -> Result<MollifiedFields> {
    check_eps(eps)?;
    let grid = sol.grid;
    let n = grid.cells();
    let wts = gaussian_weights(grid.nx, eps);
    let mut m = mollify_field(&sol.m, &wts);
    let min_m = m.min();
    m.values.iter_mut().for_each(|v| *v = v.max(DENSITY_FLOOR));
    let mut w = sol.w.clone();
    for k in 0..grid.nt {
        let slice = w.slice_mut(k);
        for a in 0..grid.d {
            let part = convolve(&grid, &slice[a * n..(a + 1) * n], &wts);
            slice[a * n..(a + 1) * n].copy_from_slice(&part);
        }
    }
    let (alpha, _) = price_measure(sol, problem)?;
    Ok(MollifiedFields {
        grid,
        eps,
        floor: DENSITY_FLOOR,
        min_m,
        m,
        w,
        u: mollify_field(&sol.u, &wts),
        alpha: mollify_field(&alpha, &wts),
        beta_t: convolve(&grid, &sol.beta_t.values, &wts),
    })
}

/// Sampled trajectories at the grid time nodes with their action split.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub d: usize,
    pub nt: usize,
    pub t_final: f64,
    pub seed: u64,
    /// positions in [0, 1)^d, indexed [path][node][axis]
    pub points: Vec<f64>,
    /// int L(gamma, gamma') dt along each path
    pub kinetic: Vec<f64>,
    /// int f(m) + beta along each path (mollified)
    pub running: Vec<f64>,
    /// g + beta_T at the end point (mollified)
    pub terminal: Vec<f64>,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.kinetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinetic.is_empty()
    }

    pub fn point(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * (self.nt + 1) + k) * self.d;
        &self.points[o..o + self.d]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let len = (self.nt + 1) * self.d;
        &self.points[path * len..(path + 1) * len]
    }
}

fn wrap(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Minimal-image displacement b - a on the circle.
fn step(a: f64, b: f64) -> f64 {
    let d = b - a;
    d - d.round()
}

fn draw_start(grid: &GridSpec, m0: &[f64], cdf: &[f64], peak: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let nx = grid.nx;
    if grid.d == 1 {
        let u: f64 = rng.gen::<f64>() * cdf[nx];
        let i = cdf.partition_point(|v| *v <= u).clamp(1, nx) - 1;
        let frac = if m0[i] > 0.0 { ((u - cdf[i]) / (cdf[i + 1] - cdf[i])).clamp(0.0, 1.0) } else { 0.5 };
        return [wrap((i as f64 + frac) / nx as f64), 0.0];
    }
    loop {
        let x = [rng.gen::<f64>(), rng.gen::<f64>()];
        let c = ((x[0] * nx as f64) as usize).min(nx - 1) + nx * ((x[1] * nx as f64) as usize).min(nx - 1);
        if rng.gen::<f64>() * peak < m0[c] {
            return x;
        }
    }
}

/// Value of a cell field on `slice` at x.
fn at(grid: &GridSpec, slice: &[f64], x: &[f64]) -> f64 {
    lerp_space(grid, slice, x, [0.5, 0.5])
}

/// Action pieces of a polyline given at the nodes k0..=k1.
fn polyline_action(fields: &MollifiedFields, problem: &ProblemSpec, pts: &[[f64; 2]], k0: usize) -> (f64, f64) {
    let grid = &fields.grid;
    let d = grid.d;
    let dt = grid.dt();
    let mut kin = 0.0;
    let mut run = 0.0;
    for (j, pair) in pts.windows(2).enumerate() {
        let k = k0 + j;
        let mut v = [0.0; 2];
        let mut mid = [0.0; 2];
        for a in 0..d {
            let s = step(pair[0][a], pair[1][a]);
            v[a] = s / dt;
            mid[a] = wrap(pair[0][a] + 0.5 * s);
        }
        kin += problem.hamiltonian.eval_l(&mid[..d], &v[..d]) * dt;
        run += at(grid, fields.alpha.slice(k), &mid[..d]) * dt;
    }
    (kin, run)
}

/// RK4 steps per grid interval.
pub const RK4_SUBSTEPS: usize = 8;

/// Velocity of the flux-consistent reconstruction on interval k: the momentum
/// is linear between the two faces of a cell along its own axis, the density
/// is constant in the cell and linear in time. The discrete continuity equation
/// then holds pointwise, so the flow carries cell masses exactly.
pub fn flux_velocity(fields: &MollifiedFields, k: usize, t: f64, x: &[f64]) -> [f64; 2] {
    let grid = &fields.grid;
    let n = grid.cells();
    let tau = (t / grid.dt() - k as f64).clamp(0.0, 1.0);
    let c = cell_of(grid, x);
    let rho = ((1.0 - tau) * fields.m.slice(k)[c] + tau * fields.m.slice(k + 1)[c]).max(fields.floor);
    let wk = fields.w.slice(k);
    let mut v = [0.0; 2];
    for a in 0..grid.d {
        let nx = grid.nx as f64;
        let pos = x[a] * nx;
        let i = (pos.floor() as usize).min(grid.nx - 1);
        let fr = pos - i as f64;
        let left = grid.shift(c, a, false);
        v[a] = ((1.0 - fr) * wk[a * n + left] + fr * wk[a * n + c]) / rho;
    }
    v
}

/// Draws `n` starting points from m0 and integrates x' = w/m with RK4,
/// using `RK4_SUBSTEPS` steps per grid interval.
/// Path j uses stream j of a ChaCha8 generator keyed by `seed`.
pub fn sample_paths(fields: &MollifiedFields, problem: &ProblemSpec, m0: &[f64], n: usize, seed: u64) -> Result<PathEnsemble> {
    let grid = fields.grid;
    if n == 0 {
        return Err(Error::InvalidParameter("ensemble needs at least one path".into()));
    }
    if m0.len() != grid.cells() || m0.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter("initial density must be nonnegative on the grid".into()));
    }
    let d = grid.d;
    let nt = grid.nt;
    let dt = grid.dt();
    let mut cdf = vec![0.0; grid.nx + 1];
    if d == 1 {
        for i in 0..grid.nx {
            cdf[i + 1] = cdf[i] + m0[i];
        }
    }
    let peak = m0.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter("initial density has no mass".into()));
    }
    let g_end: Vec<f64> = problem.sample_g(&grid).iter().zip(&fields.beta_t).map(|(a, b)| a + b).collect();

    type PathOut = (Vec<[f64; 2]>, f64, f64, f64);
    let paths: Vec<PathOut> = (0..n)
        .into_par_iter()
        .map(|j| -> Result<PathOut> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut x = draw_start(&grid, m0, &cdf, peak, &mut rng);
            let mut pts = Vec::with_capacity(nt + 1);
            pts.push(x);
            let vel = |k: usize, t: f64, y: &[f64; 2]| -> [f64; 2] {
                let yw = [wrap(y[0]), wrap(y[1])];
                flux_velocity(fields, k, t, &yw[..d])
            };
            let h = dt / RK4_SUBSTEPS as f64;
            let shifted = |base: &[f64; 2], v: &[f64; 2], h: f64| [base[0] + h * v[0], base[1] + h * v[1]];
            for k in 0..nt {
                for q in 0..RK4_SUBSTEPS {
                    let t = k as f64 * dt + q as f64 * h;
                    let k1 = vel(k, t, &x);
                    let k2 = vel(k, t + 0.5 * h, &shifted(&x, &k1, 0.5 * h));
                    let k3 = vel(k, t + 0.5 * h, &shifted(&x, &k2, 0.5 * h));
                    let k4 = vel(k, t + h, &shifted(&x, &k3, h));
                    for a in 0..d {
                        x[a] = wrap(x[a] + h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]));
                    }
                }
                pts.push(x);
            }
            let (kin, run) = polyline_action(fields, problem, &pts, 0);
            let term = at(&grid, &g_end, &pts[nt][..d]);
            Ok((pts, kin, run, term))
        })
        .collect::<Result<_>>()?;

    let mut ens = PathEnsemble {
        d,
        nt,
        t_final: grid.t_final,
        seed,
        points: Vec::with_capacity(n * (nt + 1) * d),
        kinetic: Vec::with_capacity(n),
        running: Vec::with_capacity(n),
        terminal: Vec::with_capacity(n),
    };
    for (pts, kin, run, term) in paths {
        for p in &pts {
            ens.points.extend_from_slice(&p[..d]);
        }
        ens.kinetic.push(kin);
        ens.running.push(run);
        ens.terminal.push(term);
    }
    Ok(ens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    /// L1 distance between the path histogram and m at every node
    pub per_time: Vec<f64>,
    pub max: f64,
    /// mean path action int L
    pub ensemble_kinetic: f64,
    /// grid kinetic cost of (m, w)
    pub grid_kinetic: f64,
    /// largest histogram density over all nodes
    pub max_empirical_density: f64,
}

fn cell_of(grid: &GridSpec, x: &[f64]) -> usize {
    let nx = grid.nx;
    let i = ((x[0] * nx as f64) as usize).min(nx - 1);
    if grid.d == 1 {
        i
    } else {
        i + nx * ((x[1] * nx as f64) as usize).min(nx - 1)
    }
}

/// Path histograms against the grid density at every node, plus the energy comparison.
pub fn marginal_error(ens: &PathEnsemble, sol: &Solution, problem: &ProblemSpec) -> Result<MarginalReport> {
    let grid = sol.grid;
    if ens.nt != grid.nt || ens.d != grid.d {
        return Err(Error::ShapeMismatch("ensemble and solution on different grids".into()));
    }
    let n = ens.len() as f64;
    let vol = grid.vol();
    let rows: Vec<(f64, f64)> = (0..=grid.nt)
        .into_par_iter()
        .map(|k| {
            let mut hist = vec![0usize; grid.cells()];
            for j in 0..ens.len() {
                hist[cell_of(&grid, ens.point(j, k))] += 1;
            }
            let l1 = hist.iter().zip(sol.m.slice(k)).map(|(h, m)| (*h as f64 / n - m * vol).abs()).sum();
            let peak = hist.iter().copied().max().unwrap_or(0) as f64 / (n * vol);
            (l1, peak)
        })
        .collect();
    let per_time: Vec<f64> = rows.iter().map(|r| r.0).collect();
    Ok(MarginalReport {
        max: per_time.iter().copied().fold(0.0, f64::max),
        per_time,
        ensemble_kinetic: ens.kinetic.iter().sum::<f64>() / n,
        grid_kinetic: kinetic(&sol.m, &sol.w, problem),
        max_empirical_density: rows.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyResidual {
    pub lhs: f64,
    pub rhs: f64,
    pub absolute: f64,
    pub relative: f64,
}

/// Energy identity with the path ensemble supplying the kinetic term.
pub fn energy_residual(ens: &PathEnsemble, sol: &Solution, problem: &ProblemSpec) -> Result<EnergyResidual> {
    let et = energy_terms(sol, problem)?;
    let kin = ens.kinetic.iter().sum::<f64>() / ens.len() as f64;
    let lhs = et.initial;
    let rhs = et.terminal + et.atom + kin + et.running;
    let absolute = (lhs - rhs).abs();
    Ok(EnergyResidual { lhs, rhs, absolute, relative: absolute / lhs.abs().max(rhs.abs()).max(1.0) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationOptions {
    pub t1: f64,
    pub t2: f64,
    pub k_perturb: usize,
    pub seed: u64,
    /// violation threshold; None means 10 (dx + eps)
    pub tol_nash: Option<f64>,
    /// largest amplitude of each temporal mode
    pub amplitude: f64,
    pub modes: usize,
}

impl Default for PerturbationOptions {
    fn default() -> Self {
        PerturbationOptions { t1: 0.0625, t2: 0.9375, k_perturb: 20, seed: 7, tol_nash: None, amplitude: 0.1, modes: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub paths: usize,
    pub perturbations: usize,
    pub tol_nash: f64,
    /// paths with at least one violating perturbation
    pub violating_paths: usize,
    pub fraction: f64,
    /// largest LHS - RHS over all pairs
    pub worst_margin: f64,
}

fn node_index(t: f64, grid: &GridSpec) -> Result<usize> {
    let s = t / grid.dt();
    let k = s.round();
    if (s - k).abs() > 1e-9 || k <= 0.0 || k >= grid.nt as f64 {
        return Err(Error::InvalidParameter(format!("time {t} is not an interior grid node")));
    }
    Ok(k as usize)
}

/// Cost-to-go comparison between each path and perturbed paths gamma + omega on [t1, t2],
/// with omega(t1) = 0 and a free end. The perturbation family is a random sine series.
pub fn perturbation_test(ens: &PathEnsemble, fields: &MollifiedFields, problem: &ProblemSpec, opts: &PerturbationOptions) -> Result<PerturbationReport> {
    let grid = fields.grid;
    if ens.nt != grid.nt || ens.d != grid.d {
        return Err(Error::ShapeMismatch("ensemble and fields on different grids".into()));
    }
    if !(opts.t1 < opts.t2) {
        return Err(Error::InvalidParameter("perturbation window needs t1 < t2".into()));
    }
    let k1 = node_index(opts.t1, &grid)?;
    let k2 = node_index(opts.t2, &grid)?;
    let d = grid.d;
    let dt = grid.dt();
    let tol = opts.tol_nash.unwrap_or(10.0 * (grid.dx() + fields.eps));
    let u_end = fields.u.slice(k2);

    let cost = |pts: &[[f64; 2]]| -> f64 {
        let (kin, run) = polyline_action(fields, problem, pts, k1);
        kin + run + at(&grid, u_end, &pts[pts.len() - 1][..d])
    };

    let margins: Vec<f64> = (0..ens.len())
        .into_par_iter()
        .map(|j| {
            let base: Vec<[f64; 2]> = (k1..=k2)
                .map(|k| {
                    let p = ens.point(j, k);
                    [p[0], if d == 2 { p[1] } else { 0.0 }]
                })
                .collect();
            let lhs = cost(&base);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5DEE_CE66_D1CE_4E5B);
            rng.set_stream(j as u64);
            let mut worst = f64::NEG_INFINITY;
            for _ in 0..opts.k_perturb {
                let coef: Vec<[f64; 2]> = (0..opts.modes)
                    .map(|_| {
                        let a = rng.gen::<f64>() * opts.amplitude;
                        if d == 1 {
                            [if rng.gen::<bool>() { a } else { -a }, 0.0]
                        } else {
                            let th = 2.0 * PI * rng.gen::<f64>();
                            [a * th.cos(), a * th.sin()]
                        }
                    })
                    .collect();
                let pert: Vec<[f64; 2]> = base
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let tau = i as f64 * dt / (opts.t2 - opts.t1);
                        let mut q = *p;
                        for (mode, c) in coef.iter().enumerate() {
                            let s = ((2 * mode + 1) as f64 * 0.5 * PI * tau).sin();
                            for a in 0..d {
                                q[a] += c[a] * s;
                            }
                        }
                        for qa in q.iter_mut().take(d) {
                            *qa = wrap(*qa);
                        }
                        q
                    })
                    .collect();
                worst = worst.max(lhs - cost(&pert));
            }
            worst
        })
        .collect();
    let violating = margins.iter().filter(|m| **m > tol).count();
    Ok(PerturbationReport {
        paths: ens.len(),
        perturbations: opts.k_perturb,
        tol_nash: tol,
        violating_paths: violating,
        fraction: violating as f64 / ens.len().max(1) as f64,
        worst_margin: margins.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Fields built directly from uniform density and a constant momentum, for calibration.
pub fn constant_fields(grid: GridSpec, velocity: [f64; 2]) -> MollifiedFields {
    let mut w = MomentumField::zeros(grid);
    let n = grid.cells();
    for k in 0..grid.nt {
        let s = w.slice_mut(k);
        for a in 0..grid.d {
            s[a * n..(a + 1) * n].iter_mut().for_each(|v| *v = velocity[a]);
        }
    }
    let mut m = ScalarField::zeros(grid, FieldRole::Density, TimeLayout::Nodes);
    m.values.iter_mut().for_each(|v| *v = 1.0);
    MollifiedFields {
        grid,
        eps: 0.0,
        floor: DENSITY_FLOOR,
        min_m: 1.0,
        m,
        w,
        u: ScalarField::zeros(grid, FieldRole::Value, TimeLayout::Nodes),
        alpha: ScalarField::zeros(grid, FieldRole::Generic, TimeLayout::Intervals),
        beta_t: vec![0.0; n],
    }
}
