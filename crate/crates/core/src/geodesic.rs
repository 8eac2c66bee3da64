//! One-dimensional optimal transport on the circle, McCann interpolation and
//! the static projection problem min 1/2 W2^2(m0, m1) + int g m1 over m1 <= m_bar.
//!
//! Densities are cell averages on a uniform grid of `nx` cells. A quantile
//! function is the piecewise-linear curve through breakpoints (s_i, x_i) with
//! s from 0 to 1 and x(1) = x(0) + 1, lifted by Q(s + 1) = Q(s) + 1. Repeated
//! levels encode jumps over empty cells, so the quantile of a piecewise
//! constant density is represented exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileFn {
    /// non-decreasing levels from 0 to 1
    pub s: Vec<f64>,
    /// non-decreasing positions with x[last] = x[0] + 1
    pub x: Vec<f64>,
    /// mass offset of the lift relative to the source origin
    pub cut: f64,
}

impl QuantileFn {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Index of the non-vertical piece containing level u in [0, 1).
    fn piece(&self, u: f64) -> usize {
        let i = self.s.partition_point(|v| *v <= u);
        i.clamp(1, self.s.len() - 1) - 1
    }

    /// Lifted value at s using the linear piece that contains `locate`.
    fn eval_on(&self, s: f64, locate: f64) -> f64 {
        let f = locate.floor();
        let i = self.piece(locate - f);
        let (s0, s1, x0, x1) = (self.s[i], self.s[i + 1], self.x[i], self.x[i + 1]);
        let u = s - f;
        let v = if s1 > s0 { x0 + (u - s0) / (s1 - s0) * (x1 - x0) } else { x1 };
        v + f
    }

    /// Right-continuous lifted evaluation.
    pub fn eval(&self, s: f64) -> f64 {
        self.eval_on(s, s)
    }

    /// Breakpoints of s -> Q(s + shift) inside [0, 1].
    fn shifted_levels(&self, shift: f64) -> impl Iterator<Item = f64> + '_ {
        let sh = shift - shift.floor();
        self.s.iter().flat_map(move |v| [v - sh, v + 1.0 - sh]).filter(|v| *v > 0.0 && *v < 1.0)
    }
}

fn check_density(m: &[f64]) -> Result<f64> {
    if m.len() < 2 {
        return Err(Error::ShapeMismatch("density needs at least two cells".into()));
    }
    if let Some((i, v)) = m.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::InvalidParameter(format!("negative mass {v} in cell {i}")));
    }
    let mass = m.iter().sum::<f64>() / m.len() as f64;
    if !(mass > 0.0) {
        return Err(Error::InvalidParameter("density has no mass".into()));
    }
    Ok(mass)
}

/// Exact quantile of a piecewise constant density (normalised to unit mass),
/// cumulated from the origin x = 0.
pub fn quantile_from_density(m: &[f64]) -> Result<QuantileFn> {
    let mass = check_density(m)?;
    let nx = m.len();
    let h = 1.0 / nx as f64;
    let mut s = Vec::with_capacity(nx + 1);
    let mut x = Vec::with_capacity(nx + 1);
    let mut cum = 0.0;
    for (i, v) in m.iter().enumerate() {
        s.push(cum);
        x.push(i as f64 * h);
        cum += v / mass * h;
    }
    s.push(1.0);
    x.push(1.0);
    // leading empty cells collapse onto the first occupied edge
    let first = m.iter().position(|v| *v > 0.0).unwrap_or(0);
    for k in 0..first {
        s[k] = 0.0;
        x[k] = first as f64 * h;
    }
    for k in 0..=nx {
        s[k] = s[k].clamp(0.0, 1.0);
    }
    // keep x[last] = x[0] + 1
    if first > 0 {
        for k in 0..first {
            s.push(1.0);
            x.push(1.0 + (k + 1) as f64 * h);
        }
        s.drain(0..first);
        x.drain(0..first);
    }
    Ok(QuantileFn { s, x, cut: 0.0 })
}

/// Pushes the uniform measure on s through Q onto `nx` cells (mod 1).
pub fn density_from_quantile(q: &QuantileFn, nx: usize) -> Vec<f64> {
    let mut out = vec![0.0; nx];
    let nxf = nx as f64;
    let mut deposit = |x: f64, mass: f64| {
        let i = ((x - x.floor()) * nxf) as usize % nx;
        out[i] += mass;
    };
    for j in 0..q.len() - 1 {
        let w = q.s[j + 1] - q.s[j];
        if w <= 0.0 {
            continue;
        }
        let (a, b) = (q.x[j], q.x[j + 1]);
        let len = b - a;
        if len <= 1e-14 {
            deposit(a, w);
            continue;
        }
        let mut x = a;
        while x < b {
            let edge = ((x * nxf).floor() + 1.0) / nxf;
            let next = if edge <= x { x + 1.0 / nxf } else { edge }.min(b);
            deposit(0.5 * (x + next), w * (next - x) / len);
            x = next;
        }
    }
    out.iter().map(|v| v * nxf).collect()
}

/// Optimal monotone circle coupling between two quantile functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coupling {
    /// W2^2
    pub cost: f64,
    /// source level s is sent to Q1(s + alpha) + k
    pub alpha: f64,
    pub k: f64,
}

/// Merged pieces (a, b) on which both Q0(s) and Q1(s + alpha) are linear.
fn merged_pieces(q0: &QuantileFn, q1: &QuantileFn, alpha: f64) -> Vec<(f64, f64)> {
    let mut pts: Vec<f64> = q0.s.iter().copied().chain(q1.shifted_levels(alpha)).collect();
    pts.push(0.0);
    pts.push(1.0);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[0], w[1])).collect()
}

/// Source and target values at both ends of a merged piece.
fn ends(q0: &QuantileFn, q1: &QuantileFn, alpha: f64, a: f64, b: f64) -> [(f64, f64); 2] {
    let mid = 0.5 * (a + b);
    [a, b].map(|s| (q0.eval_on(s, mid), q1.eval_on(s + alpha, mid + alpha)))
}

/// (int D, int D^2) for D(s) = Q0(s) - Q1(s + alpha), exact for piecewise-linear Q.
fn moments(q0: &QuantileFn, q1: &QuantileFn, alpha: f64) -> (f64, f64) {
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (a, b) in merged_pieces(q0, q1, alpha) {
        let [(x0, y0), (x1, y1)] = ends(q0, q1, alpha, a, b);
        let (da, db) = (x0 - y0, x1 - y1);
        m1 += 0.5 * (da + db) * (b - a);
        m2 += (da * da + da * db + db * db) / 3.0 * (b - a);
    }
    (m1, m2)
}

fn shift_cost(q0: &QuantileFn, q1: &QuantileFn, alpha: f64) -> (f64, f64) {
    let (m1, m2) = moments(q0, q1, alpha);
    let k = m1.round();
    (m2 - 2.0 * k * m1 + k * k, k)
}

/// Cut scan over `n_cut` offsets followed by golden-section refinement.
pub fn circle_coupling(q0: &QuantileFn, q1: &QuantileFn, n_cut: usize) -> Coupling {
    let best = (0..n_cut)
        .into_par_iter()
        .map(|i| {
            let a = i as f64 / n_cut as f64;
            (shift_cost(q0, q1, a).0, a)
        })
        .reduce(|| (f64::INFINITY, 0.0), |x, y| if y.0 < x.0 { y } else { x });
    refine(q0, q1, best.1, 1.0 / n_cut as f64)
}

fn refine(q0: &QuantileFn, q1: &QuantileFn, center: f64, half: f64) -> Coupling {
    let f = |a: f64| shift_cost(q0, q1, a).0;
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (center - half, center + half);
    let mut x1 = hi - gr * (hi - lo);
    let mut x2 = lo + gr * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - gr * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + gr * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut best = center;
    let mut bc = f(center);
    for a in [x1, x2] {
        let c = f(a);
        if c < bc {
            bc = c;
            best = a;
        }
    }
    let (cost, k) = shift_cost(q0, q1, best);
    let alpha = best - best.floor();
    Coupling { cost: cost.max(0.0), alpha, k: k + (best - alpha) }
}

/// W2^2 on the circle and the optimal cut.
pub fn w2_circle(m0: &[f64], m1: &[f64], n_cut: usize) -> Result<(f64, f64)> {
    let q0 = quantile_from_density(m0)?;
    let q1 = quantile_from_density(m1)?;
    let c = circle_coupling(&q0, &q1, n_cut);
    Ok((c.cost, c.alpha))
}

/// Quantile of the geodesic at time t for a fixed coupling.
pub fn interpolate_quantile(q0: &QuantileFn, q1: &QuantileFn, c: &Coupling, t: f64) -> QuantileFn {
    let mut s = Vec::new();
    let mut x = Vec::new();
    for (a, b) in merged_pieces(q0, q1, c.alpha) {
        for (lv, (x0, y0)) in [a, b].into_iter().zip(ends(q0, q1, c.alpha, a, b)) {
            s.push(lv);
            x.push((1.0 - t) * x0 + t * (y0 + c.k));
        }
    }
    QuantileFn { s, x, cut: c.alpha }
}

/// McCann interpolation between two densities on the same grid.
pub fn mccann_interpolate(m0: &[f64], m1: &[f64], t: f64, n_cut: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("interpolation time {t} outside [0, 1]")));
    }
    if m0.len() != m1.len() {
        return Err(Error::ShapeMismatch("densities on different grids".into()));
    }
    let q0 = quantile_from_density(m0)?;
    let q1 = quantile_from_density(m1)?;
    let c = circle_coupling(&q0, &q1, n_cut);
    Ok(density_from_quantile(&interpolate_quantile(&q0, &q1, &c, t), m0.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionOptions {
    pub fw_tol: f64,
    pub max_iters: usize,
    pub n_cut: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions { fw_tol: 1e-4, max_iters: 5000, n_cut: 1024 }
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub m1: Vec<f64>,
    pub objective: f64,
    pub fw_gap: f64,
    pub iterations: usize,
    /// objective after every accepted step
    pub trace: Vec<f64>,
    /// Frank-Wolfe gap reached fw_tol
    pub certified: bool,
}

const POTENTIAL_SUBSAMPLES: usize = 16;

/// Target-side Kantorovich potential psi1 = phi0^c at cell centres.
fn target_potential(q0: &QuantileFn, q1: &QuantileFn, c: &Coupling, nx: usize) -> Vec<f64> {
    // (x, T(x)) along the source, with jumps over empty source cells kept as steps in x
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    for (a, b) in merged_pieces(q0, q1, c.alpha) {
        let [(x0, y0), (x1, y1)] = ends(q0, q1, c.alpha, a, b);
        for j in 0..=POTENTIAL_SUBSAMPLES {
            let r = j as f64 / POTENTIAL_SUBSAMPLES as f64;
            xs.push(x0 + r * (x1 - x0));
            ts.push(y0 + r * (y1 - y0) + c.k);
        }
    }
    // phi0' = x - T(x), with T linear in x on each step
    let mut phi = vec![0.0; xs.len()];
    for j in 1..xs.len() {
        phi[j] = phi[j - 1] + 0.5 * ((xs[j - 1] - ts[j - 1]) + (xs[j] - ts[j])) * (xs[j] - xs[j - 1]);
    }
    (0..nx)
        .into_par_iter()
        .map(|i| {
            let y = (i as f64 + 0.5) / nx as f64;
            let mut best = f64::INFINITY;
            for (x, p) in xs.iter().zip(&phi) {
                let mut dd = (x - y).rem_euclid(1.0);
                if dd > 0.5 {
                    dd = 1.0 - dd;
                }
                best = best.min(0.5 * dd * dd - p);
            }
            best
        })
        .collect()
}

/// Linear minimisation over {0 <= m <= m_bar, mass 1}: fill the cheapest cells.
fn bang_bang(cost: &[f64], m_bar: f64) -> Vec<f64> {
    let nx = cost.len();
    let mut order: Vec<usize> = (0..nx).collect();
    order.sort_by(|a, b| cost[*a].total_cmp(&cost[*b]));
    let mut out = vec![0.0; nx];
    let mut left = nx as f64; // mass 1 in units of cell averages
    for i in order {
        let take = m_bar.min(left);
        out[i] = take;
        left -= take;
        if left <= 0.0 {
            break;
        }
    }
    out
}

struct Objective<'a> {
    q0: &'a QuantileFn,
    g: &'a [f64],
    n_cut: usize,
}

impl Objective<'_> {
    fn eval(&self, m1: &[f64]) -> Result<(f64, QuantileFn, Coupling)> {
        let q1 = quantile_from_density(m1)?;
        let c = circle_coupling(self.q0, &q1, self.n_cut);
        let lin = self.g.iter().zip(m1).map(|(a, b)| a * b).sum::<f64>() / m1.len() as f64;
        Ok((0.5 * c.cost + lin, q1, c))
    }
}

/// Frank-Wolfe on J(m1) = 1/2 W2^2(m0, m1) + int g m1 over {0 <= m1 <= m_bar, mass 1}.
pub fn solve_projection(m0: &[f64], g: &[f64], m_bar: f64, opts: &ProjectionOptions) -> Result<ProjectionResult> {
    let nx = m0.len();
    if g.len() != nx {
        return Err(Error::ShapeMismatch("terminal cost and density on different grids".into()));
    }
    if !(m_bar >= 1.0) {
        return Err(Error::Infeasible(format!("cap {m_bar} cannot hold unit mass")));
    }
    let mass = check_density(m0)?;
    let m0: Vec<f64> = m0.iter().map(|v| v / mass).collect();
    if m0.iter().any(|v| *v > m_bar) {
        return Err(Error::InvalidParameter("initial density exceeds the cap".into()));
    }
    let q0 = quantile_from_density(&m0)?;
    let obj = Objective { q0: &q0, g, n_cut: opts.n_cut };
    let mut m = m0.clone();
    let (mut val, mut q1, mut cp) = obj.eval(&m)?;
    let mut trace = vec![val];
    let mut gap = f64::INFINITY;
    let mut it = 0;
    while it < opts.max_iters {
        let psi = target_potential(&q0, &q1, &cp, nx);
        let lin: Vec<f64> = psi.iter().zip(g).map(|(a, b)| a + b).collect();
        let s = bang_bang(&lin, m_bar);
        gap = lin.iter().zip(m.iter().zip(&s)).map(|(c, (a, b))| c * (a - b)).sum::<f64>() / nx as f64;
        if gap <= opts.fw_tol {
            break;
        }
        it += 1;
        let mut step = 2.0 / (it as f64 + 2.0);
        let mut accepted = false;
        while step > 1e-8 {
            let cand: Vec<f64> = m.iter().zip(&s).map(|(a, b)| a + step * (b - a)).collect();
            let (v, qq, cc) = obj.eval(&cand)?;
            if v <= val {
                m = cand;
                val = v;
                q1 = qq;
                cp = cc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(val);
    }
    Ok(ProjectionResult {
        m1: m,
        objective: val,
        fw_gap: gap,
        iterations: it,
        trace,
        certified: gap <= opts.fw_tol,
    })
}

/// m_bar lambda / ((1 - t) + t lambda^(1/d)) divided by m_bar.
pub fn lemma51_coefficient(lambda: f64, t: f64, d: usize) -> f64 {
    lambda / ((1.0 - t) + t * lambda.powf(1.0 / d as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma51Row {
    pub t: f64,
    pub max_density: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma51Report {
    pub lambda: f64,
    pub slack: f64,
    pub rows: Vec<Lemma51Row>,
    /// largest max_density - bound
    pub max_violation: f64,
    pub pass: bool,
}

/// Compares the peak density along the geodesic m0 -> m1 with the interpolation bound.
pub fn lemma51_check(m0: &[f64], m1: &[f64], m_bar: f64, c: f64, t_samples: &[f64], slack: f64, n_cut: usize) -> Result<Lemma51Report> {
    if !(c > 0.0 && c < m_bar) {
        return Err(Error::InvalidParameter(format!("slack constant {c} outside (0, {m_bar})")));
    }
    if m0.iter().any(|v| *v > m_bar - c) {
        return Err(Error::InvalidParameter("initial density violates m0 <= m_bar - c".into()));
    }
    let lambda = (m_bar - c) / m_bar;
    let q0 = quantile_from_density(m0)?;
    let q1 = quantile_from_density(m1)?;
    let cp = circle_coupling(&q0, &q1, n_cut);
    let rows: Vec<Lemma51Row> = t_samples
        .iter()
        .map(|&t| {
            let mt = density_from_quantile(&interpolate_quantile(&q0, &q1, &cp, t), m0.len());
            Lemma51Row { t, max_density: mt.iter().copied().fold(0.0, f64::max), bound: m_bar * lemma51_coefficient(lambda, t, 1) }
        })
        .collect();
    let max_violation = rows.iter().map(|r| r.max_density - r.bound).fold(f64::NEG_INFINITY, f64::max);
    Ok(Lemma51Report { lambda, slack, rows, max_violation, pass: max_violation <= slack })
}

/// Largest |m(i+1) - m(i)| / dx over a periodic density.
pub fn lipschitz(m: &[f64]) -> f64 {
    let n = m.len();
    (0..n).map(|i| (m[(i + 1) % n] - m[i]).abs() * n as f64).fold(0.0, f64::max)
}
