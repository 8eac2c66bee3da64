//! Augmented-Lagrangian (ALG2-type) solver for the discrete constrained MFG.
//!
//! The potential phi is the primal variable, q = (a, b) its pointwise split
//! copy at every cost point and mu = (m, w) the multiplier. With the
//! augmented Lagrangian
//!   G(phi) + C(q) - <mu, L phi - q> + r/2 |L phi - q|^2
//! one iteration is an exact elliptic solve for phi, a pointwise prox for q
//! and the multiplier step mu <- mu - r (L phi - q). After the step mu.m is
//! exactly the density returned by the prox and mu.w = -m grad H(b).

pub mod elliptic;
pub mod project;
pub mod prox;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::duality::{self, GapReport};
use crate::error::{Error, Result};
use crate::grid::{FieldRole, GridSpec, MomentumField, ScalarField, TimeLayout};
use crate::model::{validate, CouplingSpec, ProblemSpec};
use elliptic::{apply_q, one_sided_gradients, pcg, st_adjoint, st_gradient, FastSolver, Layout};
use project::{project_feasible, ProjectionReport};
use prox::prox_kernel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub r_admm: f64,
    pub max_iters: usize,
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub prox_tol: f64,
    /// saturation mask for the reported price: m >= m_bar (1 - mask_tol)
    pub mask_tol: f64,
    /// iterations between convergence checks
    pub check_every: usize,
    /// disable the fast preconditioner inside CG
    pub flat_cg: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            r_admm: 1.0,
            max_iters: 20_000,
            tol_feas: 1e-8,
            tol_gap: 1e-3,
            cg_tol: 1e-12,
            cg_max_iters: 2_000,
            prox_tol: 1e-12,
            mask_tol: 1e-3,
            check_every: 50,
            flat_cg: false,
        }
    }
}

impl SolverOptions {
    pub fn check(&self) -> Result<()> {
        let pos = [
            ("r_admm", self.r_admm),
            ("tol_feas", self.tol_feas),
            ("tol_gap", self.tol_gap),
            ("cg_tol", self.cg_tol),
            ("prox_tol", self.prox_tol),
            ("mask_tol", self.mask_tol),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iters == 0 || self.cg_max_iters == 0 || self.check_every == 0 {
            return Err(Error::InvalidParameter("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// |L phi - q| in the cost-point norm
    pub primal: f64,
    /// r |q_new - q_old|
    pub dual: f64,
    /// continuity residual of the multiplier
    pub feas: f64,
    /// relative gap of the un-projected iterate (indicator only)
    pub gap_estimate: f64,
}

/// Discretised problem data shared by the iteration.
#[derive(Clone, Debug)]
pub struct Discrete {
    pub grid: GridSpec,
    pub lay: Layout,
    pub coupling: CouplingSpec,
    pub s: f64,
    pub m0: Vec<f64>,
    pub g: Vec<f64>,
    pub v: Vec<f64>,
}

impl Discrete {
    pub fn new(problem: &ProblemSpec, grid: GridSpec) -> Self {
        Discrete {
            grid,
            lay: Layout::new(grid),
            coupling: problem.coupling,
            s: problem.hamiltonian.s,
            m0: problem.sample_m0(&grid),
            g: problem.sample_g(&grid),
            v: problem.sample_v(&grid),
        }
    }

    /// H~(x_c, b) for the groups of one cost point.
    #[inline]
    pub fn h_tilde(&self, c: usize, b: &[f64]) -> f64 {
        let d = self.lay.d;
        let groups = self.lay.groups;
        let mut acc = 0.0;
        for gi in 0..groups {
            let n2: f64 = b[gi * d..(gi + 1) * d].iter().map(|x| x * x).sum();
            acc += if self.s == 2.0 { 0.5 * n2 } else { n2.powf(0.5 * self.s) / self.s };
        }
        acc / groups as f64 - self.v[c]
    }
}

#[derive(Clone, Debug)]
pub struct SolverState {
    /// potential on nodes 0..=nt, last slice fixed to g
    pub phi: ScalarField,
    pub q_a: Vec<f64>,
    pub q_b: Vec<f64>,
    pub mu_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub history: Vec<IterRecord>,
    /// total negative mass removed by the clamp in the last multiplier update
    pub clamp: f64,
    pub iterations: usize,
}

impl SolverState {
    /// phi = g at T and 0 elsewhere, q = 0, mu.m = m0 at every time, mu.w = 0.
    pub fn initial(disc: &Discrete) -> Self {
        let lay = &disc.lay;
        let n = lay.cells;
        let mut phi = ScalarField::zeros(disc.grid, FieldRole::Value, TimeLayout::Nodes);
        phi.slice_mut(disc.grid.nt).copy_from_slice(&disc.g);
        let np = lay.n_points();
        let mut mu_a = vec![0.0; np];
        for k in 0..disc.grid.nt {
            mu_a[k * n..(k + 1) * n].copy_from_slice(&disc.m0);
        }
        SolverState {
            phi,
            q_a: vec![0.0; np],
            q_b: vec![0.0; np * lay.bw()],
            mu_a,
            mu_b: vec![0.0; np * lay.bw()],
            history: Vec::new(),
            clamp: 0.0,
            iterations: 0,
        }
    }

    /// Multiplier density on nodes (m[0] = m0, m[k+1] = mu.m at interval k).
    pub fn mu_density(&self, disc: &Discrete) -> ScalarField {
        let n = disc.lay.cells;
        let mut m = ScalarField::zeros(disc.grid, FieldRole::Density, TimeLayout::Nodes);
        m.slice_mut(0).copy_from_slice(&disc.m0);
        m.values[n..].copy_from_slice(&self.mu_a);
        m
    }

    /// Multiplier momenta aggregated onto faces. At points where the prox
    /// returned zero density the momentum is -m grad H = 0 exactly; the
    /// round-off left there by the update is dropped.
    pub fn mu_momentum(&self, disc: &Discrete) -> MomentumField {
        let bw = disc.lay.bw();
        let mut b = self.mu_b.clone();
        for (p, &m) in self.mu_a.iter().enumerate() {
            if m <= 0.0 {
                b[p * bw..(p + 1) * bw].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        aggregate_faces(&disc.lay, &b)
    }
}

/// Face momenta W = (1/G) sum of the group momenta pointing at each face.
pub fn aggregate_faces(lay: &Layout, b: &[f64]) -> MomentumField {
    let grid = lay.grid;
    let n = lay.cells;
    let d = lay.d;
    let bw = lay.bw();
    let ginv = 1.0 / lay.groups as f64;
    let mut w = MomentumField::zeros(grid);
    for k in 0..grid.nt {
        let bk = &b[k * n * bw..(k + 1) * n * bw];
        let wk = w.slice_mut(k);
        for c in 0..n {
            for g in 0..lay.groups {
                for a in 0..d {
                    let v = bk[c * bw + g * d + a] * ginv;
                    let face = if g >> a & 1 == 1 { c } else { grid.shift(c, a, false) };
                    wk[a * n + face] += v;
                }
            }
        }
    }
    w
}

fn weighted_norm(lay: &Layout, a: &[f64], b: &[f64]) -> f64 {
    let ginv = 1.0 / lay.groups as f64;
    let sa: f64 = a.iter().map(|x| x * x).sum();
    let sb: f64 = b.iter().map(|x| x * x).sum();
    ((sa + ginv * sb) * lay.grid.dt() * lay.grid.vol()).sqrt()
}

/// Right-hand side of the phi-step: [L0^T (mu + r (q - c_g))]/r + e0 m0/(r dt).
fn elliptic_rhs(disc: &Discrete, state: &SolverState, r: f64) -> Vec<f64> {
    let lay = &disc.lay;
    let n = lay.cells;
    let nt = disc.grid.nt;
    let dt = disc.grid.dt();
    let mut ta = vec![0.0; state.q_a.len()];
    let mut tb = vec![0.0; state.q_b.len()];
    for i in 0..ta.len() {
        ta[i] = state.mu_a[i] + r * state.q_a[i];
    }
    for c in 0..n {
        ta[(nt - 1) * n + c] -= r * disc.g[c] / dt;
    }
    for i in 0..tb.len() {
        tb[i] = state.mu_b[i] + r * state.q_b[i];
    }
    let mut rhs = vec![0.0; nt * n];
    st_adjoint(lay, &ta, &tb, &mut rhs);
    for v in rhs.iter_mut() {
        *v /= r;
    }
    for c in 0..n {
        rhs[c] += disc.m0[c] / (r * dt);
    }
    rhs
}

/// Elliptic step: solves Q phi = rhs by CG (preconditioned by the exact fast solver unless `flat_cg`).
pub fn elliptic_step(
    disc: &Discrete,
    state: &mut SolverState,
    opts: &SolverOptions,
    fast: &FastSolver,
) -> Result<elliptic::CgReport> {
    let grid = disc.grid;
    let n = disc.lay.cells;
    let nt = grid.nt;
    let rhs = elliptic_rhs(disc, state, opts.r_admm);
    let apply = |x: &[f64], o: &mut [f64]| apply_q(&grid, x, o);
    let pre = |x: &[f64], o: &mut [f64]| fast.solve(x, o);
    let x = &mut state.phi.values[..nt * n];
    let rep = if opts.flat_cg {
        pcg(&apply, None, &rhs, x, opts.cg_tol, opts.cg_max_iters)?
    } else {
        pcg(&apply, Some(&pre), &rhs, x, opts.cg_tol, opts.cg_max_iters)?
    };
    Ok(rep)
}

/// q <- prox_{C/r}(L phi - mu/r) at every cost point; returns L phi.
fn prox_step(disc: &Discrete, state: &mut SolverState, opts: &SolverOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let lay = &disc.lay;
    let n = lay.cells;
    let bw = lay.bw();
    let r = opts.r_admm;
    let tau = 1.0 / r;
    let mut la = vec![0.0; lay.n_points()];
    let mut lb = vec![0.0; lay.n_points() * bw];
    st_gradient(lay, &state.phi.values, &mut la, &mut lb);
    let failures: Vec<usize> = state
        .q_a
        .par_iter_mut()
        .zip(state.q_b.par_chunks_mut(bw))
        .enumerate()
        .filter_map(|(p, (qa, qb))| {
            let c = p % n;
            let abar = la[p] - state.mu_a[p] / r;
            let mut bbar = [0.0; 2 * prox::MAX_GROUPS];
            for i in 0..bw {
                bbar[i] = lb[p * bw + i] - state.mu_b[p * bw + i] / r;
            }
            match prox_kernel(abar, &bbar[..bw], lay.d, tau, disc.v[c], &disc.coupling, disc.s, opts.prox_tol, qb) {
                Some((a, _)) => {
                    *qa = a;
                    None
                }
                None => Some(p),
            }
        })
        .collect();
    if let Some(&p) = failures.first() {
        return Err(Error::ProxFailure { k: p / n, cell: p % n });
    }
    Ok((la, lb))
}

/// mu <- mu - r (L phi - q), clamping mu.m at 0; returns the clamp magnitude.
pub fn multiplier_update(state: &mut SolverState, la: &[f64], lb: &[f64], r: f64) -> f64 {
    let mut clamp = 0.0;
    for i in 0..state.mu_a.len() {
        let v = state.mu_a[i] - r * (la[i] - state.q_a[i]);
        if v < 0.0 {
            clamp += -v;
            state.mu_a[i] = 0.0;
        } else {
            state.mu_a[i] = v;
        }
    }
    for i in 0..state.mu_b.len() {
        state.mu_b[i] -= r * (lb[i] - state.q_b[i]);
    }
    state.clamp = clamp;
    clamp
}

/// L2 norm of the continuity residual of the multiplier.
fn multiplier_feasibility(disc: &Discrete, state: &SolverState) -> f64 {
    let lay = &disc.lay;
    let n = lay.cells;
    let mut out = vec![0.0; lay.n_points()];
    st_adjoint(lay, &state.mu_a, &state.mu_b, &mut out);
    let dt = disc.grid.dt();
    for c in 0..n {
        out[c] += disc.m0[c] / dt;
    }
    (out.iter().map(|v| v * v).sum::<f64>() * dt * disc.grid.vol()).sqrt()
}

/// Relative gap between A(phi) and the group-split dual value of mu (not a certificate).
fn gap_estimate(disc: &Discrete, state: &SolverState, la: &[f64], lb: &[f64]) -> f64 {
    let lay = &disc.lay;
    let n = lay.cells;
    let bw = lay.bw();
    let d = lay.d;
    let grid = disc.grid;
    let w = grid.dt() * grid.vol();
    let cp = &disc.coupling;
    let sc = disc.s / (disc.s - 1.0);
    let mut a_val = 0.0;
    let mut b_val = 0.0;
    for p in 0..lay.n_points() {
        let c = p % n;
        let alpha = -la[p] + disc.h_tilde(c, &lb[p * bw..(p + 1) * bw]);
        a_val += cp.fstar(alpha) * w;
        let m = state.mu_a[p];
        let mut kin = 0.0;
        for g in 0..lay.groups {
            if m <= 0.0 {
                break;
            }
            let q = &state.mu_b[p * bw + g * d..p * bw + (g + 1) * d];
            let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if qn > 0.0 {
                kin += qn.powf(sc) / (sc * m.powf(sc - 1.0));
            }
        }
        let mf = if cp.is_capped() { m.min(cp.m_bar) } else { m };
        b_val += (kin / lay.groups as f64 + cp.big_f(mf) + m * disc.v[c]) * w;
    }
    let nt = grid.nt;
    for c in 0..n {
        a_val -= state.phi.values[c] * disc.m0[c] * grid.vol();
        b_val += disc.g[c] * state.mu_a[(nt - 1) * n + c] * grid.vol();
    }
    (a_val + b_val).abs() / a_val.abs().max(b_val.abs()).max(1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub gap: f64,
    pub relative_gap: f64,
    pub feas: f64,
    pub complementarity_interior: f64,
    pub complementarity_terminal: f64,
    pub energy_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_density: f64,
    pub mass_error: f64,
    pub clamp: f64,
    pub projection_alternations: usize,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub grid: GridSpec,
    pub u: ScalarField,
    pub m: ScalarField,
    pub w: MomentumField,
    /// price at interior nodes 1..nt-1, masked to the saturated set
    pub beta: ScalarField,
    pub beta_t: ScalarField,
    /// unmasked price fields
    pub beta_raw: ScalarField,
    pub beta_t_raw: ScalarField,
    pub diagnostics: Diagnostics,
    pub history: Vec<IterRecord>,
}

#[derive(Clone, Debug)]
pub struct PriceFields {
    /// -D_t u + H~(Du) on intervals
    pub alpha_hat: ScalarField,
    pub beta: ScalarField,
    pub beta_raw: ScalarField,
    pub beta_t: ScalarField,
    pub beta_t_raw: ScalarField,
}

/// Recovers the price from a value function and density.
///
/// alpha_hat[k] = -(u[k+1] - u[k])/dt + H~(Du[k]); the interior price at node
/// k+1 is (alpha_hat[k] - f(m[k+1]))_+ and the terminal atom is
/// dt (alpha_hat[nt-1] - f(m[nt]))_+, i.e. u(T-) - g up to the last step's Hamiltonian.
pub fn extract_price(u: &ScalarField, m: &ScalarField, problem: &ProblemSpec, mask_tol: f64) -> Result<PriceFields> {
    let grid = u.grid;
    if u.layout != TimeLayout::Nodes || m.layout != TimeLayout::Nodes || m.grid != grid {
        return Err(Error::ShapeMismatch("extract_price needs node fields on one grid".into()));
    }
    let disc = Discrete::new(problem, grid);
    let lay = &disc.lay;
    let n = lay.cells;
    let nt = grid.nt;
    let dt = grid.dt();
    let bw = lay.bw();
    let cp = &problem.coupling;
    let mut alpha = ScalarField::zeros(grid, FieldRole::Generic, TimeLayout::Intervals);
    let mut b = vec![0.0; n * bw];
    for k in 0..nt {
        one_sided_gradients(lay, u.slice(k), &mut b);
        let (u0, u1) = (u.slice(k), u.slice(k + 1));
        let out = alpha.slice_mut(k);
        for c in 0..n {
            out[c] = -(u1[c] - u0[c]) / dt + disc.h_tilde(c, &b[c * bw..(c + 1) * bw]);
        }
    }
    let thresh = cp.m_bar * (1.0 - mask_tol);
    let mut beta_raw = ScalarField::zeros(grid, FieldRole::Price, TimeLayout::Interior);
    let mut beta = beta_raw.clone();
    for j in 1..nt {
        let (mj, al) = (m.slice(j), alpha.slice(j - 1));
        for c in 0..n {
            let v = (al[c] - cp.f(mj[c])).max(0.0);
            beta_raw.slice_mut(j - 1)[c] = v;
            beta.slice_mut(j - 1)[c] = if mj[c] >= thresh { v } else { 0.0 };
        }
    }
    let mut beta_t_raw = ScalarField::zeros(grid, FieldRole::Price, TimeLayout::Single);
    let mut beta_t = beta_t_raw.clone();
    let (mt, al) = (m.slice(nt), alpha.slice(nt - 1));
    for c in 0..n {
        let v = dt * (al[c] - cp.f(mt[c])).max(0.0);
        beta_t_raw.values[c] = v;
        beta_t.values[c] = if mt[c] >= thresh { v } else { 0.0 };
    }
    Ok(PriceFields { alpha_hat: alpha, beta, beta_raw, beta_t, beta_t_raw })
}

/// Projects the multiplier, extracts the price and certifies.
pub fn assemble_solution(
    problem: &ProblemSpec,
    disc: &Discrete,
    state: &SolverState,
    opts: &SolverOptions,
) -> Result<(Solution, GapReport, ProjectionReport)> {
    let grid = disc.grid;
    let m_hat = state.mu_density(disc);
    let w_hat = state.mu_momentum(disc);
    let cap = if problem.coupling.is_capped() { Some(problem.coupling.m_bar) } else { None };
    let (m, w, prep) = project_feasible(&m_hat, &w_hat, &disc.m0, cap)?;
    let u = state.phi.clone();
    let price = extract_price(&u, &m, problem, opts.mask_tol)?;
    let mut sol = Solution {
        grid,
        u,
        m,
        w,
        beta: price.beta,
        beta_t: price.beta_t,
        beta_raw: price.beta_raw,
        beta_t_raw: price.beta_t_raw,
        diagnostics: Diagnostics::default(),
        history: Vec::new(),
    };
    let rep = duality::certify(&sol, problem)?;
    let d = &mut sol.diagnostics;
    d.gap = rep.gap;
    d.relative_gap = rep.relative_gap;
    d.feas = rep.continuity_residual;
    d.complementarity_interior = rep.complementarity_interior;
    d.complementarity_terminal = rep.complementarity_terminal;
    d.energy_residual = rep.energy_residual;
    d.iterations = state.iterations;
    d.max_density = sol.m.max();
    d.mass_error = (0..=grid.nt).map(|k| (grid.mass(sol.m.slice(k)) - 1.0).abs()).fold(0.0, f64::max);
    d.clamp = state.clamp;
    d.projection_alternations = prep.alternations;
    Ok((sol, rep, prep))
}

/// Runs the iteration from the standard initial state.
pub fn run(problem: &ProblemSpec, grid: &GridSpec, opts: &SolverOptions) -> Result<Solution> {
    let disc = Discrete::new(problem, *grid);
    let mut state = SolverState::initial(&disc);
    run_from(problem, &disc, &mut state, opts)
}

/// Runs the iteration from a given state until certified or out of iterations.
pub fn run_from(problem: &ProblemSpec, disc: &Discrete, state: &mut SolverState, opts: &SolverOptions) -> Result<Solution> {
    validate(problem, &disc.grid).ensure()?;
    opts.check()?;
    let fast = FastSolver::new(disc.grid);
    let lay = disc.lay;
    let r = opts.r_admm;
    let mut best: Option<Solution> = None;
    let mut last_q_a = state.q_a.clone();
    let mut last_q_b = state.q_b.clone();
    let start = state.iterations;
    for it in start..start + opts.max_iters {
        elliptic_step(disc, state, opts, &fast)?;
        last_q_a.copy_from_slice(&state.q_a);
        last_q_b.copy_from_slice(&state.q_b);
        let (la, lb) = prox_step(disc, state, opts)?;
        multiplier_update(state, &la, &lb, r);
        state.iterations = it + 1;
        let last = it + 1 == start + opts.max_iters;
        if (it + 1) % opts.check_every != 0 && !last {
            continue;
        }
        let mut ra = la.clone();
        let mut rb = lb.clone();
        ra.iter_mut().zip(&state.q_a).for_each(|(x, q)| *x -= q);
        rb.iter_mut().zip(&state.q_b).for_each(|(x, q)| *x -= q);
        let primal = weighted_norm(&lay, &ra, &rb);
        ra.iter_mut().zip(state.q_a.iter().zip(&last_q_a)).for_each(|(x, (q, q0))| *x = r * (q - q0));
        rb.iter_mut().zip(state.q_b.iter().zip(&last_q_b)).for_each(|(x, (q, q0))| *x = r * (q - q0));
        let dual = weighted_norm(&lay, &ra, &rb);
        let feas = multiplier_feasibility(disc, state);
        let gap_est = gap_estimate(disc, state, &la, &lb);
        state.history.push(IterRecord { iter: it + 1, primal, dual, feas, gap_estimate: gap_est });
        if gap_est <= opts.tol_gap || last {
            let (mut sol, rep, _) = assemble_solution(problem, disc, state, opts)?;
            let ok = rep.relative_gap <= opts.tol_gap && rep.continuity_residual <= opts.tol_feas;
            sol.diagnostics.converged = ok;
            let better = best.as_ref().is_none_or(|b| sol.diagnostics.relative_gap < b.diagnostics.relative_gap);
            if ok || better {
                best = Some(sol);
            }
            if ok {
                break;
            }
        }
    }
    let mut sol = match best {
        Some(s) => s,
        None => assemble_solution(problem, disc, state, opts)?.0,
    };
    sol.history = state.history.clone();
    Ok(sol)
}
