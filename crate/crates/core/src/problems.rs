//! Built-in test problems.

use crate::model::{CouplingSpec, FourierSeries, HamiltonianSpec, ProblemSpec};

/// Saturating well: f = 0, m_bar = 3, m0 = 1 + 0.8 cos(2 pi x), g = cos(2 pi x).
pub fn tp1() -> ProblemSpec {
    ProblemSpec {
        t_final: 1.0,
        d: 1,
        hamiltonian: HamiltonianSpec::quadratic(),
        coupling: CouplingSpec::zero(3.0),
        m0: FourierSeries::cosine(1.0, 1, 0.8),
        g: FourierSeries::cosine(0.0, 1, 1.0),
    }
}

/// TP1 with the hard cap replaced by the penalty of strength 1/eps.
pub fn tp2(eps: f64) -> ProblemSpec {
    let mut p = tp1();
    p.coupling.penalty = Some(eps);
    p
}

pub const TP2_EPS: [f64; 4] = [1.0, 0.3, 0.1, 0.03];

/// Hopf-Lax: TP1 with an inactive cap.
pub fn tp3() -> ProblemSpec {
    let mut p = tp1();
    p.coupling.m_bar = 1e6;
    p
}

/// Power coupling f = m, m_bar = 2, m0 = 1 + 0.5 cos(2 pi x), g = cos(2 pi x).
pub fn tp4() -> ProblemSpec {
    ProblemSpec {
        t_final: 1.0,
        d: 1,
        hamiltonian: HamiltonianSpec::quadratic(),
        coupling: CouplingSpec::power(1.0, 2.0, 2.0),
        m0: FourierSeries::cosine(1.0, 1, 0.5),
        g: FourierSeries::cosine(0.0, 1, 1.0),
    }
}

pub fn by_name(name: &str) -> Option<ProblemSpec> {
    match name.to_ascii_lowercase().as_str() {
        "tp1" => Some(tp1()),
        "tp3" => Some(tp3()),
        "tp4" => Some(tp4()),
        _ => None,
    }
}
