//! Pointwise proximal map of c(a, b) = F*(-a + H~(b)).
//!
//! `b` holds `groups` covectors of length `d`; H~ averages |b_g|^s/s over the
//! groups and subtracts V. The prox is computed through its saddle form
//! max over m of min over (a, b): for fixed m the inner problem is explicit
//! (a = abar + tau m, each b_g shrinks radially), and m solves the scalar
//! monotone equation z(m) = f(m) with z = -a + H~(b).

use crate::error::{Error, Result};
use crate::model::{CouplingSpec, HamiltonianSpec};

pub const MAX_GROUPS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ProxResult {
    pub a: f64,
    pub b: Vec<f64>,
    /// Density multiplier of the saddle point.
    pub m: f64,
}

/// Solves rho + c rho^(s-1) = bnorm for rho in [0, bnorm].
#[inline]
fn shrink_radius(bnorm: f64, c: f64, s: f64) -> f64 {
    if bnorm == 0.0 || c == 0.0 {
        return bnorm;
    }
    if s == 2.0 {
        return bnorm / (1.0 + c);
    }
    let (mut lo, mut hi) = (0.0, bnorm);
    let mut r = bnorm / (1.0 + c * bnorm.powf(s - 2.0));
    r = r.clamp(0.0, bnorm);
    for _ in 0..200 {
        let val = r + c * r.powf(s - 1.0) - bnorm;
        if val > 0.0 {
            hi = r;
        } else {
            lo = r;
        }
        if hi - lo <= 1e-16 * bnorm || val == 0.0 {
            break;
        }
        let der = 1.0 + c * (s - 1.0) * r.powf(s - 2.0);
        let mut next = r - val / der;
        if !(next > lo && next < hi) || !der.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if next == r {
            break;
        }
        r = next;
    }
    r
}

struct Scalar<'a> {
    abar: f64,
    norms: [f64; MAX_GROUPS],
    groups: usize,
    tau: f64,
    v: f64,
    s: f64,
    cp: &'a CouplingSpec,
}

impl Scalar<'_> {
    /// Returns (phi(m), phi'(m)) with phi = z - f, decreasing in m.
    fn eval(&self, m: f64) -> (f64, f64) {
        let c = self.tau * m;
        let mut hsum = 0.0;
        let mut dsum = 0.0;
        for &bn in &self.norms[..self.groups] {
            let r = shrink_radius(bn, c, self.s);
            if r > 0.0 {
                let rs1 = r.powf(self.s - 1.0);
                hsum += rs1 * r / self.s;
                let denom = 1.0 + c * (self.s - 1.0) * r.powf(self.s - 2.0);
                dsum += rs1 * (-self.tau * rs1 / denom);
            }
        }
        let g = self.groups as f64;
        let z = -(self.abar + c) + hsum / g - self.v;
        let dz = -self.tau + dsum / g;
        (z - self.cp.f(m), dz - self.cp.df(m))
    }
}

/// Core routine: writes b* into `bout` and returns (a*, m*), or `None` if the
/// root-find fails to reach `tol`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn prox_kernel(
    abar: f64,
    bbar: &[f64],
    d: usize,
    tau: f64,
    v: f64,
    cp: &CouplingSpec,
    s: f64,
    tol: f64,
    bout: &mut [f64],
) -> Option<(f64, f64)> {
    let groups = bbar.len() / d;
    let mut norms = [0.0; MAX_GROUPS];
    for g in 0..groups {
        norms[g] = bbar[g * d..(g + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let sc = Scalar { abar, norms, groups, tau, v, s, cp };
    let (phi0, _) = sc.eval(0.0);
    let m = if phi0 <= 0.0 {
        0.0
    } else {
        let mut lo = 0.0;
        let mut hi = cp.m_bar;
        let (phi_hi, _) = sc.eval(hi);
        if phi_hi >= 0.0 {
            if cp.is_capped() {
                lo = hi;
            } else {
                lo = hi;
                let mut found = false;
                for _ in 0..200 {
                    hi *= 2.0;
                    if sc.eval(hi).0 < 0.0 {
                        found = true;
                        break;
                    }
                    lo = hi;
                }
                if !found {
                    return None;
                }
            }
        }
        if lo == hi {
            lo
        } else {
            let mut m = 0.5 * (lo + hi);
            let mut ok = false;
            for _ in 0..300 {
                let (val, der) = sc.eval(m);
                if val > 0.0 {
                    lo = m;
                } else {
                    hi = m;
                }
                if val == 0.0 || hi - lo <= tol * (1.0 + m.abs()) {
                    ok = true;
                    break;
                }
                let mut next = m - val / der;
                if !(next > lo && next < hi) || !next.is_finite() {
                    next = 0.5 * (lo + hi);
                }
                if next == m {
                    ok = true;
                    break;
                }
                m = next;
            }
            if !ok {
                return None;
            }
            m
        }
    };
    let c = tau * m;
    for g in 0..groups {
        let bn = norms[g];
        let scale = if bn > 0.0 { shrink_radius(bn, c, s) / bn } else { 0.0 };
        for i in 0..d {
            bout[g * d + i] = bbar[g * d + i] * scale;
        }
    }
    Some((abar + c, m))
}

/// Minimiser of 1/2|a - abar|^2 + 1/(2G) sum_g |b_g - bbar_g|^2 + tau F*(-a + H~(x, b)).
///
/// `bbar` carries `G = bbar.len() / x.len()` covectors; with one group this is
/// the plain prox of F*(-a + H(x, b)).
pub fn prox_pointwise(
    x: &[f64],
    abar: f64,
    bbar: &[f64],
    tau: f64,
    coupling: &CouplingSpec,
    h: &HamiltonianSpec,
    tol: f64,
) -> Result<ProxResult> {
    let d = x.len();
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("prox step must be positive, got {tau}")));
    }
    if d == 0 || !bbar.len().is_multiple_of(d) || bbar.len() / d > MAX_GROUPS || bbar.is_empty() {
        return Err(Error::ShapeMismatch(format!("covector data of length {} for d = {d}", bbar.len())));
    }
    let mut b = vec![0.0; bbar.len()];
    let v = h.v.eval(x);
    let (a, m) = prox_kernel(abar, bbar, d, tau, v, coupling, h.s, tol, &mut b)
        .ok_or(Error::ProxFailure { k: 0, cell: 0 })?;
    Ok(ProxResult { a, b, m })
}
