//! Independent evaluation of the primal and dual functionals, gap certification,
//! complementarity and energy residuals, and price diagnostics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{continuity_residual, interp_density, interp_momentum, FieldRole, GridSpec, MomentumField, ScalarField, TimeLayout};
use crate::model::ProblemSpec;
use crate::solver::project::project_feasible;
use crate::solver::{extract_price, Solution};

/// Density below this is treated as a small negative round-off.
const NEG_TOL: f64 = 1e-12;
/// Admissible overshoot of the hard cap.
const CAP_TOL: f64 = 1e-6;

/// Kinetic part of B including the potential: sum over intervals of the
/// proportional-split cost m_c/G sum_sigma L(W_sigma / m~_sigma) + m V.
/// Returns +inf on a zero-density face carrying momentum.
pub fn kinetic(m: &ScalarField, w: &MomentumField, problem: &ProblemSpec) -> f64 {
    let grid = m.grid;
    let n = grid.cells();
    let d = grid.d;
    let sc = problem.hamiltonian.s_conj();
    let v = problem.sample_v(&grid);
    let groups = grid.groups();
    let omega = grid.dt() * grid.vol();
    let lkin = |q: f64| if sc == 2.0 { 0.5 * q } else { q.powf(0.5 * sc) / sc };
    let mut total = 0.0;
    for k in 0..grid.nt {
        let mk = m.slice(k + 1);
        let wk = w.slice(k);
        // per face velocity squared, +inf if the face is empty but carries momentum
        let mut vel = vec![0.0; d * n];
        for a in 0..d {
            for c in 0..n {
                let wf = wk[a * n + c];
                let mf = 0.5 * (mk[c].max(0.0) + mk[grid.shift(c, a, true)].max(0.0));
                vel[a * n + c] = if wf == 0.0 {
                    0.0
                } else if mf <= 0.0 {
                    return f64::INFINITY;
                } else {
                    (wf / mf) * (wf / mf)
                };
            }
        }
        for c in 0..n {
            let mc = mk[c].max(0.0);
            total += mc * v[c] * omega;
            if mc == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for g in 0..groups {
                let mut q = 0.0;
                for a in 0..d {
                    let face = if g >> a & 1 == 1 { c } else { grid.shift(c, a, false) };
                    q += vel[a * n + face];
                }
                acc += lkin(q);
            }
            total += mc * acc / groups as f64 * omega;
        }
    }
    total
}

/// Dual functional B(m, w); +inf on a convention breach or an inadmissible density.
pub fn eval_b(m: &ScalarField, w: &MomentumField, problem: &ProblemSpec) -> f64 {
    let grid = m.grid;
    let cp = problem.coupling;
    let omega = grid.dt() * grid.vol();
    if m.values.iter().any(|x| !x.is_finite() || *x < -NEG_TOL) || !w.values.iter().all(|x| x.is_finite()) {
        return f64::INFINITY;
    }
    if cp.is_capped() && m.max() > cp.m_bar + CAP_TOL {
        return f64::INFINITY;
    }
    let kin = kinetic(m, w, problem);
    if !kin.is_finite() {
        return f64::INFINITY;
    }
    let mut total = kin;
    for k in 1..=grid.nt {
        for &x in m.slice(k) {
            let x = if cp.is_capped() { x.clamp(0.0, cp.m_bar) } else { x.max(0.0) };
            total += cp.big_f(x) * omega;
        }
    }
    let g = problem.sample_g(&grid);
    total + g.iter().zip(m.slice(grid.nt)).map(|(a, b)| a * b).sum::<f64>() * grid.vol()
}

/// Relaxed primal functional for a value function with a grid price measure.
/// `alpha_ac` is on intervals, `alpha_t` is the terminal atom.
pub fn eval_a_relaxed(
    u: &ScalarField,
    alpha_ac: &ScalarField,
    alpha_t: &[f64],
    m0: &[f64],
    problem: &ProblemSpec,
) -> Result<f64> {
    let grid = u.grid;
    let n = grid.cells();
    if u.layout != TimeLayout::Nodes
        || alpha_ac.layout != TimeLayout::Intervals
        || alpha_ac.grid != grid
        || alpha_t.len() != n
        || m0.len() != n
    {
        return Err(Error::ShapeMismatch("eval_a_relaxed needs node u, interval alpha and one-slice alpha_T and m0".into()));
    }
    if let Some(x) = alpha_ac.values.iter().chain(alpha_t).find(|x| !(**x >= -1e-14)) {
        return Err(Error::InvalidParameter(format!("price measure must be nonnegative, found {x}")));
    }
    let cp = problem.coupling;
    let omega = grid.dt() * grid.vol();
    let interior: f64 = alpha_ac.values.iter().map(|a| cp.fstar(*a)).sum::<f64>() * omega;
    let terminal = cp.m_bar * alpha_t.iter().sum::<f64>() * grid.vol();
    let initial: f64 = u.slice(0).iter().zip(m0).map(|(a, b)| a * b).sum::<f64>() * grid.vol();
    Ok(interior + terminal - initial)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub a_value: f64,
    pub b_value: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub complementarity_interior: f64,
    pub complementarity_terminal: f64,
    pub energy_residual: f64,
    pub energy_relative: f64,
    pub continuity_residual: f64,
    /// largest F(m) + F*(alpha) - alpha m on the priced saturated set
    pub fenchel_young: f64,
    /// gap below -1e-8 (|A| + |B|)
    pub negative_gap_warning: bool,
}

impl GapReport {
    const KEYS: [&'static str; 11] = [
        "A_value",
        "B_value",
        "gap",
        "relative_gap",
        "complementarity_interior",
        "complementarity_terminal",
        "energy_residual",
        "energy_relative",
        "continuity_residual",
        "fenchel_young",
        "negative_gap_warning",
    ];

    fn numbers(&self) -> [f64; 10] {
        [
            self.a_value,
            self.b_value,
            self.gap,
            self.relative_gap,
            self.complementarity_interior,
            self.complementarity_terminal,
            self.energy_residual,
            self.energy_relative,
            self.continuity_residual,
            self.fenchel_young,
        ]
    }

    /// Flat `key = value` text; floats are written in round-trip form.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(self.numbers()) {
            out.push_str(&format!("{k} = {v:e}\n"));
        }
        out.push_str(&format!("{} = {}\n", Self::KEYS[10], self.negative_gap_warning));
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut vals = [None; 10];
        let mut warn = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == Self::KEYS[10] {
                warn = Some(v.parse::<bool>().map_err(|e| Error::Format(format!("{k}: {e}")))?);
            } else if let Some(i) = Self::KEYS[..10].iter().position(|x| *x == k) {
                vals[i] = Some(v.parse::<f64>().map_err(|e| Error::Format(format!("{k}: {e}")))?);
            }
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::Format(format!("missing key {}", Self::KEYS[i])));
        Ok(GapReport {
            a_value: get(0)?,
            b_value: get(1)?,
            gap: get(2)?,
            relative_gap: get(3)?,
            complementarity_interior: get(4)?,
            complementarity_terminal: get(5)?,
            energy_residual: get(6)?,
            energy_relative: get(7)?,
            continuity_residual: get(8)?,
            fenchel_young: get(9)?,
            negative_gap_warning: warn.ok_or_else(|| Error::Format("missing key negative_gap_warning".into()))?,
        })
    }
}

/// Price measure rebuilt from the raw price: (interval density, terminal atom).
///
/// Interval k carries f(m[k+1]) + beta_raw at node k+1. With a hard cap the
/// last interval carries f(m_T) and the overshoot goes into the atom priced at
/// m_bar; with a penalty there is no atom and the last interval takes it all.
pub fn price_measure(sol: &Solution, problem: &ProblemSpec) -> Result<(ScalarField, Vec<f64>)> {
    let grid = sol.grid;
    let n = grid.cells();
    let nt = grid.nt;
    let dt = grid.dt();
    let cp = problem.coupling;
    let mut alpha = ScalarField::zeros(grid, FieldRole::Generic, TimeLayout::Intervals);
    for k in 0..nt {
        let mk = sol.m.slice(k + 1);
        let out = alpha.slice_mut(k);
        for c in 0..n {
            out[c] = cp.f(mk[c]);
        }
        if k + 1 < nt {
            for (o, b) in out.iter_mut().zip(sol.beta_raw.slice(k)) {
                *o += b;
            }
        }
    }
    if cp.is_capped() {
        Ok((alpha, sol.beta_t_raw.values.clone()))
    } else {
        for (o, b) in alpha.slice_mut(nt - 1).iter_mut().zip(&sol.beta_t_raw.values) {
            *o += b / dt;
        }
        Ok((alpha, vec![0.0; n]))
    }
}

/// Terms of the energy identity
/// int u(0) m0 = int g m_T + m_bar int beta_T + int int L + int int alpha m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTerms {
    pub initial: f64,
    pub terminal: f64,
    pub atom: f64,
    /// grid kinetic cost including the potential
    pub kinetic: f64,
    pub running: f64,
}

pub fn energy_terms(sol: &Solution, problem: &ProblemSpec) -> Result<EnergyTerms> {
    let grid = sol.grid;
    let vol = grid.vol();
    let omega = grid.dt() * vol;
    let m0 = problem.sample_m0(&grid);
    let g = problem.sample_g(&grid);
    let (alpha, alpha_t) = price_measure(sol, problem)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let running = (0..grid.nt).map(|k| dot(alpha.slice(k), sol.m.slice(k + 1))).sum::<f64>() * omega;
    Ok(EnergyTerms {
        initial: dot(sol.u.slice(0), &m0) * vol,
        terminal: dot(&g, sol.m.slice(grid.nt)) * vol,
        atom: problem.coupling.m_bar * alpha_t.iter().sum::<f64>() * vol,
        kinetic: kinetic(&sol.m, &sol.w, problem),
        running,
    })
}

/// Gap, complementarity and energy report from the stored fields only.
pub fn certify(sol: &Solution, problem: &ProblemSpec) -> Result<GapReport> {
    let grid = sol.grid;
    let nt = grid.nt;
    let vol = grid.vol();
    let omega = grid.dt() * vol;
    let cp = problem.coupling;
    let m0 = problem.sample_m0(&grid);

    let (alpha, alpha_t) = price_measure(sol, problem)?;
    let a_value = eval_a_relaxed(&sol.u, &alpha, &alpha_t, &m0, problem)?;
    let b_value = eval_b(&sol.m, &sol.w, problem);
    let gap = a_value + b_value;
    let relative_gap = gap.abs() / a_value.abs().max(b_value.abs()).max(1.0);
    let negative_gap_warning = gap < -1e-8 * (a_value.abs() + b_value.abs());

    // complementarity, normalised by the total price mass
    let mut num_i = 0.0;
    let mut mass_i = 0.0;
    for j in 1..nt {
        for (b, m) in sol.beta_raw.slice(j - 1).iter().zip(sol.m.slice(j)) {
            num_i += b * (cp.m_bar - m).max(0.0) * omega;
            mass_i += b * omega;
        }
    }
    let mut num_t = 0.0;
    let mut mass_t = 0.0;
    for (b, m) in sol.beta_t_raw.values.iter().zip(sol.m.slice(nt)) {
        num_t += b * (cp.m_bar - m).max(0.0) * vol;
        mass_t += b * vol;
    }
    let denom = cp.m_bar * (mass_i + mass_t);
    let (ci, ct) = if denom > 0.0 { (num_i / denom, num_t / denom) } else { (0.0, 0.0) };

    let et = energy_terms(sol, problem)?;
    let lhs = et.initial;
    let rhs = et.terminal + et.atom + et.kinetic + et.running;
    let mut fy = 0.0f64;
    let thresh = cp.m_bar * (1.0 - 1e-3);
    for k in 0..nt {
        for (a, m) in alpha.slice(k).iter().zip(sol.m.slice(k + 1)) {
            if *m >= thresh && a - cp.f(*m) > 0.0 {
                let x = m.clamp(0.0, if cp.is_capped() { cp.m_bar } else { f64::INFINITY });
                fy = fy.max(cp.big_f(x) + cp.fstar(*a) - a * x);
            }
        }
    }
    let energy_residual = lhs - rhs;
    let energy_relative = energy_residual.abs() / lhs.abs().max(rhs.abs()).max(1.0);
    let continuity = continuity_residual(&sol.m, &sol.w, &m0)?.norm;
    Ok(GapReport {
        a_value,
        b_value,
        gap,
        relative_gap,
        complementarity_interior: ci,
        complementarity_terminal: ct,
        energy_residual,
        energy_relative,
        continuity_residual: continuity,
        fenchel_young: fy,
        negative_gap_warning,
    })
}

/// Re-derives the price from (u, m) and certifies; used on loaded solutions.
pub fn certify_fields(sol: &Solution, problem: &ProblemSpec, mask_tol: f64) -> Result<GapReport> {
    let price = extract_price(&sol.u, &sol.m, problem, mask_tol)?;
    let mut s = sol.clone();
    s.beta_raw = price.beta_raw;
    s.beta_t_raw = price.beta_t_raw;
    certify(&s, problem)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub nx: usize,
    pub t1: f64,
    pub t2: f64,
    /// max of beta over the window
    pub max: f64,
    /// L2 norm over the window (the L^{d/(d-1)} norm when d = 2)
    pub l2: f64,
    pub l1: f64,
    /// L1 norm of beta on [T - slab, T)
    pub slab_l1: f64,
    pub beta_t_l1: f64,
}

/// Norms of the reported price over time windows.
pub fn regularity_probe(sol: &Solution, windows: &[(f64, f64)], slab: f64) -> Result<Vec<ProbeRow>> {
    let grid = sol.grid;
    let t = grid.t_final;
    let dt = grid.dt();
    let vol = grid.vol();
    if !(slab > 0.0 && slab < t) {
        return Err(Error::InvalidParameter(format!("slab width {slab} outside (0, {t})")));
    }
    let beta_t_l1 = sol.beta_t.values.iter().map(|b| b.abs()).sum::<f64>() * vol;
    let mut slab_l1 = 0.0;
    for j in 1..grid.nt {
        if j as f64 * dt >= t - slab - 1e-12 {
            slab_l1 += sol.beta.slice(j - 1).iter().map(|b| b.abs()).sum::<f64>() * dt * vol;
        }
    }
    windows
        .iter()
        .map(|&(t1, t2)| {
            if !(t1 > 0.0 && t1 < t2 && t2 < t) {
                return Err(Error::InvalidParameter(format!("window [{t1}, {t2}] outside (0, {t})")));
            }
            let mut row = ProbeRow { nx: grid.nx, t1, t2, slab_l1, beta_t_l1, ..Default::default() };
            let mut sq = 0.0;
            for j in 1..grid.nt {
                let tj = j as f64 * dt;
                if tj < t1 - 1e-12 || tj > t2 + 1e-12 {
                    continue;
                }
                for b in sol.beta.slice(j - 1) {
                    row.max = row.max.max(*b);
                    row.l1 += b.abs() * dt * vol;
                    sq += b * b * dt * vol;
                }
            }
            row.l2 = sq.sqrt();
            Ok(row)
        })
        .collect()
}

/// Competitor obtained by the cutoff translation (t, x) -> (t + zeta eta, x + zeta delta)
/// with zeta = sin^2(pi t / T), re-projected onto discrete feasibility.
pub fn translated_competitor(sol: &Solution, problem: &ProblemSpec, delta: &[f64], eta: f64) -> Result<(ScalarField, MomentumField)> {
    let grid = sol.grid;
    let d = grid.d;
    let t = grid.t_final;
    if delta.len() != d {
        return Err(Error::ShapeMismatch(format!("shift has {} components, grid has d = {d}", delta.len())));
    }
    if delta.iter().any(|x| !(x.abs() <= 0.25)) || !(eta.abs() * PI / t <= 0.5) {
        return Err(Error::InvalidParameter(format!("shift too large: delta {delta:?}, eta {eta}")));
    }
    let zeta = |s: f64| (PI * s / t).sin().powi(2);
    let dzeta = |s: f64| PI / t * (2.0 * PI * s / t).sin();
    let n = grid.cells();
    let dt = grid.dt();
    let mut m = ScalarField::zeros(grid, FieldRole::Density, TimeLayout::Nodes);
    let mut x = [0.0; 2];
    for j in 0..=grid.nt {
        let tj = j as f64 * dt;
        let z = zeta(tj);
        let src = if z == 0.0 { None } else { Some(tj + z * eta) };
        for c in 0..n {
            m.slice_mut(j)[c] = match src {
                None => sol.m.slice(j)[c],
                Some(ts) => {
                    let p = grid.cell_center(c);
                    for a in 0..d {
                        x[a] = p[a] + z * delta[a];
                    }
                    interp_density(&sol.m, ts, &x[..d])
                }
            };
        }
    }
    let mut w = MomentumField::zeros(grid);
    let h = grid.dx();
    for k in 0..grid.nt {
        let tk = (k as f64 + 0.5) * dt;
        let (z, dz) = (zeta(tk), dzeta(tk));
        let ts = tk + z * eta;
        for a in 0..d {
            for c in 0..n {
                let p = grid.cell_center(c);
                for b in 0..d {
                    x[b] = p[b] + z * delta[b];
                }
                x[a] += 0.5 * h;
                let wv = interp_momentum(&sol.w, a, ts, &x[..d]);
                let mv = interp_density(&sol.m, ts, &x[..d]);
                w.slice_mut(k)[a * n + c] = (1.0 + eta * dz) * wv - dz * delta[a] * mv;
            }
        }
    }
    let m0 = problem.sample_m0(&grid);
    let cap = if problem.coupling.is_capped() { Some(problem.coupling.m_bar) } else { None };
    let (m, w, _) = project_feasible(&m, &w, &m0, cap)?;
    Ok((m, w))
}

/// B(translated competitor) - B(solution).
pub fn translation_diagnostic(sol: &Solution, problem: &ProblemSpec, delta: &[f64], eta: f64) -> Result<f64> {
    let (m, w) = translated_competitor(sol, problem, delta, eta)?;
    Ok(eval_b(&m, &w, problem) - eval_b(&sol.m, &sol.w, problem))
}

/// Discrete grid helper used by tests and reports: L1 distance of two slices.
pub fn l1_distance(grid: &GridSpec, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * grid.vol()
}
