//! Problem data: Hamiltonian, coupling, initial density and terminal cost.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Integer wave vector, written as a plain integer in 1-D and an array in 2-D.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WaveVector {
    Scalar(i64),
    Vector(Vec<i64>),
}

impl WaveVector {
    fn components(&self) -> [i64; 2] {
        match self {
            WaveVector::Scalar(k) => [*k, 0],
            WaveVector::Vector(v) => [v.first().copied().unwrap_or(0), v.get(1).copied().unwrap_or(0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub k: WaveVector,
    #[serde(default)]
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Real function sum_k c_k exp(2 pi i k.x); the coefficient list must be
/// conjugate symmetric (c_{-k} = conj c_k, every k != 0 listed with its mirror).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FourierSeries {
    pub terms: Vec<FourierTerm>,
}

impl FourierSeries {
    pub fn zero() -> Self {
        FourierSeries { terms: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        FourierSeries { terms: vec![FourierTerm { k: WaveVector::Scalar(0), re: c, im: 0.0 }] }
    }

    /// `c0 + amp * cos(2 pi k x)` along axis 0.
    pub fn cosine(c0: f64, k: i64, amp: f64) -> Self {
        let mut terms = vec![];
        if c0 != 0.0 {
            terms.push(FourierTerm { k: WaveVector::Scalar(0), re: c0, im: 0.0 });
        }
        terms.push(FourierTerm { k: WaveVector::Scalar(k), re: amp / 2.0, im: 0.0 });
        terms.push(FourierTerm { k: WaveVector::Scalar(-k), re: amp / 2.0, im: 0.0 });
        FourierSeries { terms }
    }

    pub fn check(&self, d: usize) -> Result<()> {
        for t in &self.terms {
            let k = t.k.components();
            if d == 1 && k[1] != 0 {
                return Err(Error::InvalidParameter("2-D wave vector in a 1-D problem".into()));
            }
            if k == [0, 0] {
                if t.im != 0.0 {
                    return Err(Error::InvalidParameter("mean coefficient must be real".into()));
                }
                continue;
            }
            let mirror = [-k[0], -k[1]];
            let found = self.terms.iter().any(|o| {
                o.k.components() == mirror && (o.re - t.re).abs() <= 1e-14 && (o.im + t.im).abs() <= 1e-14
            });
            if !found {
                return Err(Error::InvalidParameter(format!(
                    "Fourier coefficient at k={k:?} has no conjugate mirror at k={mirror:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let y = x.get(1).copied().unwrap_or(0.0);
        self.terms
            .iter()
            .map(|t| {
                let k = t.k.components();
                let ph = 2.0 * PI * (k[0] as f64 * x[0] + k[1] as f64 * y);
                t.re * ph.cos() - t.im * ph.sin()
            })
            .sum()
    }

    pub fn sample(&self, grid: &GridSpec) -> Vec<f64> {
        (0..grid.cells()).map(|c| self.eval(&grid.cell_center(c))).collect()
    }

    /// Sup norm bound sum |c_k|.
    pub fn abs_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.re.hypot(t.im)).sum()
    }

    /// Lipschitz bound sum 2 pi |k| |c_k|.
    pub fn lipschitz_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let k = t.k.components();
                2.0 * PI * ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt() * t.re.hypot(t.im)
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub s: f64,
    #[serde(default, rename = "V")]
    pub v: FourierSeries,
}

impl HamiltonianSpec {
    pub fn quadratic() -> Self {
        HamiltonianSpec { s: 2.0, v: FourierSeries::zero() }
    }

    /// Conjugate exponent s' with 1/s + 1/s' = 1.
    pub fn s_conj(&self) -> f64 {
        self.s / (self.s - 1.0)
    }

    pub fn kinetic_h(&self, p: &[f64]) -> f64 {
        norm(p).powf(self.s) / self.s
    }

    pub fn kinetic_hstar(&self, q: &[f64]) -> f64 {
        let sc = self.s_conj();
        norm(q).powf(sc) / sc
    }

    pub fn eval_h(&self, x: &[f64], p: &[f64]) -> f64 {
        self.kinetic_h(p) - self.v.eval(x)
    }

    pub fn eval_hstar(&self, x: &[f64], q: &[f64]) -> f64 {
        self.kinetic_hstar(q) + self.v.eval(x)
    }

    pub fn eval_l(&self, x: &[f64], q: &[f64]) -> f64 {
        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        self.eval_hstar(x, &neg)
    }

    /// Constants (r, C) of the two-sided growth bounds, with r = s.
    pub fn growth_constants(&self) -> (f64, f64) {
        (self.s, self.v.abs_bound().max(1.0))
    }
}

pub(crate) fn norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Zero,
    Power,
}

/// f(m) = kappa m^(theta-1) on [0, m_bar] (or f = 0), optionally penalized above m_bar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub kind: CouplingKind,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    pub m_bar: f64,
    #[serde(default)]
    pub c_bar: Option<f64>,
    /// When set, the hard cap is replaced by the penalty (m - m_bar)_+^(theta-1) / eps.
    #[serde(default)]
    pub penalty: Option<f64>,
}

fn default_theta() -> f64 {
    2.0
}

impl CouplingSpec {
    pub fn zero(m_bar: f64) -> Self {
        CouplingSpec { kind: CouplingKind::Zero, kappa: 0.0, theta: 2.0, m_bar, c_bar: None, penalty: None }
    }

    pub fn power(kappa: f64, theta: f64, m_bar: f64) -> Self {
        CouplingSpec { kind: CouplingKind::Power, kappa, theta, m_bar, c_bar: None, penalty: None }
    }

    pub fn c_bar(&self) -> f64 {
        self.c_bar.unwrap_or(0.01 * self.m_bar)
    }

    pub fn is_capped(&self) -> bool {
        self.penalty.is_none()
    }

    pub fn check(&self) -> Result<()> {
        if !(self.theta > 1.0) {
            return Err(Error::InvalidParameter(format!("theta must exceed 1, got {}", self.theta)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidParameter(format!("kappa must be nonnegative, got {}", self.kappa)));
        }
        if let Some(c) = self.c_bar {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!("c_bar must be positive, got {c}")));
            }
        }
        if let Some(e) = self.penalty {
            if !(e > 0.0) {
                return Err(Error::InvalidParameter(format!("penalty epsilon must be positive, got {e}")));
            }
        }
        Ok(())
    }

    fn f_hard(&self, m: f64) -> f64 {
        match self.kind {
            CouplingKind::Zero => 0.0,
            CouplingKind::Power => self.kappa * m.max(0.0).powf(self.theta - 1.0),
        }
    }

    fn df_hard(&self, m: f64) -> f64 {
        match self.kind {
            CouplingKind::Zero => 0.0,
            CouplingKind::Power if m > 0.0 => self.kappa * (self.theta - 1.0) * m.powf(self.theta - 2.0),
            CouplingKind::Power => {
                if self.theta < 2.0 && self.kappa > 0.0 {
                    f64::INFINITY
                } else if self.theta == 2.0 {
                    self.kappa
                } else {
                    0.0
                }
            }
        }
    }

    fn big_f_hard(&self, m: f64) -> f64 {
        match self.kind {
            CouplingKind::Zero => 0.0,
            CouplingKind::Power => self.kappa * m.max(0.0).powf(self.theta) / self.theta,
        }
    }

    /// Coupling f(m). Above the cap of a hard coupling this is the continuous extension f(m_bar).
    pub fn f(&self, m: f64) -> f64 {
        let base = self.f_hard(m.min(self.m_bar));
        match self.penalty {
            Some(eps) if m > self.m_bar => base + (m - self.m_bar).powf(self.theta - 1.0) / eps,
            _ => base,
        }
    }

    pub fn df(&self, m: f64) -> f64 {
        if m < self.m_bar {
            return self.df_hard(m);
        }
        match self.penalty {
            Some(eps) => {
                let e = m - self.m_bar;
                if self.theta == 2.0 {
                    1.0 / eps
                } else if e > 0.0 {
                    (self.theta - 1.0) * e.powf(self.theta - 2.0) / eps
                } else if self.theta < 2.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
            None => 0.0,
        }
    }

    /// Primitive F(m); +inf outside the admissible range.
    pub fn big_f(&self, m: f64) -> f64 {
        if m < 0.0 {
            return f64::INFINITY;
        }
        if m <= self.m_bar {
            return self.big_f_hard(m);
        }
        match self.penalty {
            Some(eps) => {
                let e = m - self.m_bar;
                self.big_f_hard(self.m_bar) + self.f_hard(self.m_bar) * e + e.powf(self.theta) / (self.theta * eps)
            }
            None => f64::INFINITY,
        }
    }

    /// Maximiser of alpha m - F(m), i.e. a selection of the derivative of F*.
    pub fn fstar_argmax(&self, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            return 0.0;
        }
        let f_cap = self.f_hard(self.m_bar);
        if alpha < f_cap {
            // only reachable for power couplings with kappa > 0
            return (alpha / self.kappa).powf(1.0 / (self.theta - 1.0));
        }
        match self.penalty {
            Some(eps) => self.m_bar + (eps * (alpha - f_cap)).powf(1.0 / (self.theta - 1.0)),
            None => self.m_bar,
        }
    }

    /// Convex conjugate F*(alpha).
    pub fn fstar(&self, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            return 0.0;
        }
        let m = self.fstar_argmax(alpha);
        alpha * m - self.big_f(m)
    }

    /// Returns the penalized coupling f^eps.
    pub fn penalize(&self, eps: f64) -> Result<CouplingSpec> {
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter(format!("penalty epsilon must be positive, got {eps}")));
        }
        Ok(CouplingSpec { penalty: Some(eps), ..*self })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    #[serde(rename = "T")]
    pub t_final: f64,
    pub d: usize,
    pub hamiltonian: HamiltonianSpec,
    pub coupling: CouplingSpec,
    pub m0: FourierSeries,
    pub g: FourierSeries,
}

impl ProblemSpec {
    pub fn grid(&self, nx: usize, nt: usize) -> Result<GridSpec> {
        GridSpec::new(self.d, nx, nt, self.t_final)
    }

    /// m0 sampled at cell centres and rescaled to unit discrete mass.
    pub fn sample_m0(&self, grid: &GridSpec) -> Vec<f64> {
        let mut m0 = self.m0.sample(grid);
        let mass = grid.mass(&m0);
        if mass > 0.0 {
            m0.iter_mut().for_each(|v| *v /= mass);
        }
        m0
    }

    pub fn sample_g(&self, grid: &GridSpec) -> Vec<f64> {
        self.g.sample(grid)
    }

    pub fn sample_v(&self, grid: &GridSpec) -> Vec<f64> {
        self.hamiltonian.v.sample(grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Hp1Status {
    Satisfied { lambda: f64 },
    Violated,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub m_bar: f64,
    pub c_bar: f64,
    pub raw_mass: f64,
    pub min_m0: f64,
    pub max_m0: f64,
    pub f_monotone: bool,
    pub hp1: Hp1Status,
    pub hp2: bool,
    pub growth_r: f64,
    pub growth_c: f64,
    pub hard_failures: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.hard_failures.is_empty()
    }

    pub fn ensure(&self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self.hard_failures.join("; ")))
        }
    }
}

pub fn validate(problem: &ProblemSpec, grid: &GridSpec) -> ValidationReport {
    let cp = &problem.coupling;
    let mut hard = vec![];
    let mut warnings = vec![];
    if problem.d != grid.d || (problem.t_final - grid.t_final).abs() > 1e-15 * problem.t_final {
        hard.push("grid does not match the problem's dimension or horizon".to_string());
    }
    if !(problem.hamiltonian.s > 1.0) {
        hard.push(format!("(H3) growth exponent s must exceed 1, got {}", problem.hamiltonian.s));
    }
    for (name, series) in [("m0", &problem.m0), ("g", &problem.g), ("V", &problem.hamiltonian.v)] {
        if let Err(e) = series.check(problem.d) {
            hard.push(format!("{name}: {e}"));
        }
    }
    if let Err(e) = cp.check() {
        hard.push(e.to_string());
    }
    if !(cp.m_bar > 1.0) {
        hard.push(format!("(H1) density cap m_bar must exceed 1, got {}", cp.m_bar));
    }
    let c_bar = cp.c_bar();
    let raw = problem.m0.sample(grid);
    let raw_mass = grid.mass(&raw);
    if (raw_mass - 1.0).abs() > 1e-10 {
        hard.push(format!("(H2) m0 must have unit mass, sampled mass is {raw_mass}"));
    }
    let min_m0 = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max_m0 = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min_m0 < 0.0 {
        hard.push(format!("(H2) m0 must be nonnegative, min is {min_m0}"));
    }
    if max_m0 >= cp.m_bar - c_bar {
        hard.push(format!("(H2) m0 must stay below m_bar - c_bar = {}, max is {max_m0}", cp.m_bar - c_bar));
    }
    let samples = 512;
    let top = cp.m_bar * if cp.is_capped() { 1.0 } else { 2.0 };
    let mut f_monotone = cp.f(0.0) == 0.0;
    let mut prev = 0.0;
    for i in 1..=samples {
        let fm = cp.f(top * i as f64 / samples as f64);
        if fm < prev {
            f_monotone = false;
        }
        prev = fm;
    }
    if !f_monotone {
        hard.push("(H4) coupling must vanish at 0 and be non-decreasing".to_string());
    }
    let hp1 = if problem.hamiltonian.s == 2.0 {
        Hp1Status::Satisfied { lambda: 1.0 }
    } else {
        warnings.push(format!("(HP1) uniform convexity fails for s = {}", problem.hamiltonian.s));
        Hp1Status::Violated
    };
    let hp2 = match cp.kind {
        CouplingKind::Zero => true,
        CouplingKind::Power => cp.kappa == 0.0 || cp.theta >= 2.0,
    };
    if !hp2 {
        warnings.push("(HP2) d f/dm unbounded near 0".to_string());
    }
    let (growth_r, growth_c) = problem.hamiltonian.growth_constants();
    ValidationReport {
        m_bar: cp.m_bar,
        c_bar,
        raw_mass,
        min_m0,
        max_m0,
        f_monotone,
        hp1,
        hp2,
        growth_r,
        growth_c,
        hard_failures: hard,
        warnings,
    }
}
