//! Projection of an approximate (m, W) onto exact discrete continuity and the box 0 <= m <= cap.
//!
//! The affine step is a weighted least-squares projection: the correction of
//! m at a node and of W on a face is proportional to the (pre-projection)
//! density there, so empty regions stay empty and no momentum is created
//! where the kinetic perspective would be infinite. The weighted normal
//! operator is assembled once and factored (banded Cholesky when the band is
//! small, otherwise CG preconditioned by the constant-coefficient solver).
//! The box is enforced by alternating with clipping; the last step is always
//! the affine one.

use crate::error::Result;
use crate::grid::{divergence_slice, FieldRole, GridSpec, MomentumField, ScalarField, TimeLayout};
use crate::solver::elliptic::{pcg, FastSolver};

/// Lower-band Cholesky factor of an SPD band matrix.
pub(crate) struct BandCholesky {
    n: usize,
    bw: usize,
    /// row i holds entries j = i - bw ..= i at positions 0..=bw
    l: Vec<f64>,
}

impl BandCholesky {
    /// `band(i, j)` for `j` in `i - bw ..= i` gives the lower part of the matrix.
    fn factor(n: usize, bw: usize, mut l: Vec<f64>) -> Self {
        let w = bw + 1;
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = l[i * w + (j + bw - i)];
                for k in k0..j {
                    s -= l[i * w + (k + bw - i)] * l[j * w + (k + bw - j)];
                }
                if i == j {
                    l[i * w + bw] = s.max(1e-300).sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        BandCholesky { n, bw, l }
    }

    fn solve(&self, rhs: &[f64], x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let mut s = rhs[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l[i * w + (k + bw - i)] * x[k];
            }
            x[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.l[k * w + (i + bw - k)] * x[k];
            }
            x[i] = s / self.l[i * w + bw];
        }
    }
}

/// Weighted normal operator (Q_kappa psi)_k for psi on intervals.
struct WeightedOperator {
    grid: GridSpec,
    /// node weights for nodes 1..=nt, `[j-1][c]`
    km: Vec<f64>,
    /// face weights per interval, `[k][axis][c]`
    kw: Vec<f64>,
}

impl WeightedOperator {
    fn apply(&self, psi: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let n = g.cells();
        let nt = g.nt;
        let it2 = 1.0 / (g.dt() * g.dt());
        let ix2 = 1.0 / (g.dx() * g.dx());
        for k in 0..nt {
            for c in 0..n {
                let p = psi[k * n + c];
                let up = if k + 1 < nt { psi[(k + 1) * n + c] } else { 0.0 };
                let mut t = self.km[k * n + c] * (p - up);
                if k > 0 {
                    t += self.km[(k - 1) * n + c] * (p - psi[(k - 1) * n + c]);
                }
                let mut s = 0.0;
                for a in 0..g.d {
                    let kf = &self.kw[(k * g.d + a) * n..(k * g.d + a + 1) * n];
                    let cf = g.shift(c, a, true);
                    let cb = g.shift(c, a, false);
                    s += kf[c] * (p - psi[k * n + cf]) + kf[cb] * (p - psi[k * n + cb]);
                }
                out[k * n + c] = t * it2 + s * ix2;
            }
        }
    }

    fn bandwidth(&self) -> usize {
        self.grid.cells()
    }

    fn assemble_band(&self, ridge: f64) -> Vec<f64> {
        let g = &self.grid;
        let n = g.cells();
        let nt = g.nt;
        let bw = self.bandwidth();
        let w = bw + 1;
        let it2 = 1.0 / (g.dt() * g.dt());
        let ix2 = 1.0 / (g.dx() * g.dx());
        let mut band = vec![0.0; n * nt * w];
        let mut add = |i: usize, j: usize, v: f64| {
            let (i, j) = if i >= j { (i, j) } else { (j, i) };
            band[i * w + (j + bw - i)] += v;
        };
        for k in 0..nt {
            for c in 0..n {
                let i = k * n + c;
                let up = self.km[k * n + c] * it2;
                add(i, i, up);
                if k + 1 < nt {
                    // the coupling to the next interval is added once, from below
                    add(i, i + n, -up);
                }
                if k > 0 {
                    add(i, i, self.km[(k - 1) * n + c] * it2);
                }
                for a in 0..g.d {
                    let kf = self.kw[(k * g.d + a) * n + c] * ix2;
                    let cf = g.shift(c, a, true);
                    add(i, i, kf);
                    add(k * n + cf, k * n + cf, kf);
                    add(i, k * n + cf, -kf);
                }
            }
        }
        for i in 0..n * nt {
            band[i * w + bw] += ridge;
        }
        band
    }
}

enum Factor {
    Band(BandCholesky),
    Iterative(FastSolver, f64),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ProjectionReport {
    pub alternations: usize,
    pub residual_norm: f64,
    pub max_violation: f64,
}

/// Continuity residual with m[0] replaced by `m0`.
fn residual(grid: &GridSpec, m: &[f64], w: &[f64], m0: &[f64], out: &mut [f64]) {
    let n = grid.cells();
    let dt = grid.dt();
    let fl = grid.d * n;
    let mut div = vec![0.0; n];
    for k in 0..grid.nt {
        divergence_slice(grid, &w[k * fl..(k + 1) * fl], &mut div);
        let prev = if k == 0 { m0 } else { &m[k * n..(k + 1) * n] };
        for c in 0..n {
            out[k * n + c] = (m[(k + 1) * n + c] - prev[c]) / dt + div[c];
        }
    }
}

/// Input densities below this fraction of the peak are treated as empty.
const VACUUM: f64 = 1e-8;

/// Band Cholesky is used when its flop count stays below this.
const BAND_BUDGET: f64 = 2e9;

pub fn project_feasible(
    m_hat: &ScalarField,
    w_hat: &MomentumField,
    m0: &[f64],
    cap: Option<f64>,
) -> Result<(ScalarField, MomentumField, ProjectionReport)> {
    let grid = m_hat.grid;
    let n = grid.cells();
    let nt = grid.nt;
    let d = grid.d;
    let nn = n * nt;
    let fl = d * n;
    let dt = grid.dt();
    let mut m = m_hat.values.clone();
    m[..n].copy_from_slice(m0);
    let mut w = w_hat.values.clone();
    let upper = cap.unwrap_or(f64::INFINITY);

    // near-vacuum values of the input are noise relative to their size; a weighted
    // correction through such tiny weights would cost r^2 / m, so they are emptied
    let peak = m[n..].iter().copied().fold(0.0, f64::max);
    let vacuum = VACUUM * peak;
    for v in m[n..].iter_mut() {
        if *v <= vacuum {
            *v = 0.0;
        }
    }
    zero_empty_faces(&grid, &m, &mut w);
    let km: Vec<f64> = m[n..].iter().map(|v| v.clamp(0.0, upper)).collect();
    let mut kw = vec![0.0; nt * fl];
    for k in 0..nt {
        let mk = &km[k * n..(k + 1) * n];
        for a in 0..d {
            for c in 0..n {
                kw[(k * d + a) * n + c] = 0.5 * (mk[c] + mk[grid.shift(c, a, true)]);
            }
        }
    }
    let scale_m = peak.max(1.0).min(upper);
    let violation = |m: &[f64]| m[n..].iter().map(|&v| (-v).max(v - upper)).fold(0.0, f64::max);

    // active set: nodes clipped to a bound are frozen by giving them zero weight
    let mut frozen = vec![false; nn];
    let mut report = ProjectionReport::default();
    for v in m[n..].iter_mut() {
        *v = v.clamp(0.0, upper);
    }
    let mut r = vec![0.0; nn];
    let mut psi = vec![0.0; nn];
    let mut grad = vec![0.0; fl];
    for it in 0..MAX_ALTERNATIONS {
        let kme: Vec<f64> = km.iter().zip(&frozen).map(|(v, f)| if *f { 0.0 } else { *v }).collect();
        let op = WeightedOperator { grid, km: kme, kw: kw.clone() };
        let solver = WeightedSolver::new(&op);
        residual(&grid, &m, &w, m0, &mut r);
        solver.solve(&op, &r, &mut psi)?;
        for j in 1..=nt {
            for c in 0..n {
                let before = psi[(j - 1) * n + c];
                let after = if j < nt { psi[j * n + c] } else { 0.0 };
                m[j * n + c] -= op.km[(j - 1) * n + c] * (before - after) / dt;
            }
        }
        for k in 0..nt {
            crate::grid::gradient_slice(&grid, &psi[k * n..(k + 1) * n], &mut grad);
            for i in 0..fl {
                w[k * fl + i] += op.kw[k * fl + i] * grad[i];
            }
        }
        report.alternations = it + 1;
        if violation(&m) <= 1e-13 * scale_m {
            break;
        }
        for (i, v) in m[n..].iter_mut().enumerate() {
            if *v < 0.0 || *v > upper {
                *v = v.clamp(0.0, upper);
                frozen[i] = true;
            }
        }
    }
    // remaining violations are round-off sized; clip them and drop the
    // round-off flux left between two empty cells
    for v in m[n..].iter_mut() {
        *v = v.clamp(0.0, upper);
    }
    zero_empty_faces(&grid, &m, &mut w);
    residual(&grid, &m, &w, m0, &mut r);
    report.residual_norm = (r.iter().map(|v| v * v).sum::<f64>() * dt * grid.vol()).sqrt();
    report.max_violation = violation(&m);
    let m = ScalarField::from_values(grid, FieldRole::Density, TimeLayout::Nodes, m)?;
    let w = MomentumField::from_values(grid, w)?;
    Ok((m, w, report))
}

const MAX_ALTERNATIONS: usize = 200;

/// Zeroes momenta on faces whose two cells are empty at the interval's end node.
fn zero_empty_faces(grid: &GridSpec, m: &[f64], w: &mut [f64]) {
    let n = grid.cells();
    let d = grid.d;
    for k in 0..grid.nt {
        let mk = &m[(k + 1) * n..(k + 2) * n];
        for a in 0..d {
            for c in 0..n {
                if mk[c] == 0.0 && mk[grid.shift(c, a, true)] == 0.0 {
                    w[(k * d + a) * n + c] = 0.0;
                }
            }
        }
    }
}

/// Solver for Q_kappa psi = r: banded Cholesky when affordable, otherwise PCG.
struct WeightedSolver {
    factor: Factor,
    ridge: f64,
}

impl WeightedSolver {
    fn new(op: &WeightedOperator) -> Self {
        let grid = op.grid;
        let nn = grid.cells() * grid.nt;
        let peak = op.km.iter().chain(&op.kw).copied().fold(0.0, f64::max).max(1e-300);
        let ridge = 1e-13 * peak / (grid.dt() * grid.dt());
        let bw = op.bandwidth();
        let factor = if nn as f64 * (bw * bw) as f64 <= BAND_BUDGET {
            Factor::Band(BandCholesky::factor(nn, bw, op.assemble_band(ridge)))
        } else {
            let mean = op.kw.iter().sum::<f64>() / op.kw.len() as f64;
            Factor::Iterative(FastSolver::new(grid), mean.max(1e-12))
        };
        WeightedSolver { factor, ridge }
    }

    fn solve(&self, op: &WeightedOperator, rhs: &[f64], psi: &mut [f64]) -> Result<()> {
        let nn = rhs.len();
        match &self.factor {
            Factor::Band(ch) => {
                ch.solve(rhs, psi);
                // a few refinement sweeps remove the ridge and round-off bias
                let mut r = vec![0.0; nn];
                let mut dpsi = vec![0.0; nn];
                for _ in 0..3 {
                    op.apply(psi, &mut r);
                    for i in 0..nn {
                        r[i] = rhs[i] - r[i];
                    }
                    ch.solve(&r, &mut dpsi);
                    for i in 0..nn {
                        psi[i] += dpsi[i];
                    }
                }
                Ok(())
            }
            Factor::Iterative(fs, mean) => {
                let ridge = self.ridge;
                let apply = |x: &[f64], o: &mut [f64]| {
                    op.apply(x, o);
                    for i in 0..x.len() {
                        o[i] += ridge * x[i];
                    }
                };
                let pre = |r: &[f64], z: &mut [f64]| {
                    fs.solve(r, z);
                    z.iter_mut().for_each(|v| *v /= mean);
                };
                psi.iter_mut().for_each(|v| *v = 0.0);
                pcg(&apply, Some(&pre), rhs, psi, 1e-13, 20_000)?;
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::continuity_residual;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn band_cholesky_matches_dense_operator() {
        let grid = GridSpec::new(1, 6, 5, 1.0).unwrap();
        let n = grid.cells() * grid.nt;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let km: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let kw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let op = WeightedOperator { grid, km, kw };
        let ch = BandCholesky::factor(n, op.bandwidth(), op.assemble_band(1e-3));
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut b = vec![0.0; n];
        op.apply(&x, &mut b);
        for i in 0..n {
            b[i] += 1e-3 * x[i];
        }
        let mut y = vec![0.0; n];
        ch.solve(&b, &mut y);
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-9);
        }
    }

    fn perturbed_transport(d: usize, nx: usize, nt: usize, noise: f64) -> (ScalarField, MomentumField, Vec<f64>) {
        let grid = GridSpec::new(d, nx, nt, 1.0).unwrap();
        let n = grid.cells();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m0: Vec<f64> = (0..n).map(|c| 1.0 + 0.5 * (std::f64::consts::TAU * grid.cell_center(c)[0]).cos()).collect();
        let mut m = ScalarField::zeros(grid, FieldRole::Density, TimeLayout::Nodes);
        let mut w = MomentumField::zeros(grid);
        for k in 0..=nt {
            m.slice_mut(k).copy_from_slice(&m0);
        }
        for k in 0..nt {
            for v in w.slice_mut(k).iter_mut() {
                *v = noise * rng.gen_range(-1.0..1.0);
            }
            for v in m.slice_mut(k + 1).iter_mut() {
                *v += noise * rng.gen_range(-1.0..1.0);
            }
        }
        (m, w, m0)
    }

    #[test]
    fn projection_restores_continuity_and_bounds() {
        for d in [1, 2] {
            let (m, w, m0) = perturbed_transport(d, 6, 6, 1e-3);
            let (mp, wp, rep) = project_feasible(&m, &w, &m0, Some(1.6)).unwrap();
            let res = continuity_residual(&mp, &wp, &m0).unwrap();
            assert!(res.norm < 1e-10, "d={d} {rep:?} {}", res.norm);
            assert!(mp.min() >= 0.0 && mp.max() <= 1.6);
            for k in 0..=6 {
                assert!((mp.grid.mass(mp.slice(k)) - mp.grid.mass(&m0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn empty_regions_stay_empty() {
        let grid = GridSpec::new(1, 8, 4, 1.0).unwrap();
        let m0 = vec![0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 0.0, 0.0];
        let mut m = ScalarField::zeros(grid, FieldRole::Density, TimeLayout::Nodes);
        for k in 0..=4 {
            m.slice_mut(k).copy_from_slice(&m0);
        }
        m.slice_mut(2)[3] += 1e-4;
        let w = MomentumField::zeros(grid);
        let (mp, wp, _) = project_feasible(&m, &w, &m0, Some(3.0)).unwrap();
        for k in 0..=4 {
            for c in [0, 1, 6, 7] {
                assert_eq!(mp.slice(k)[c], 0.0);
            }
        }
        for k in 0..4 {
            for f in [0, 6, 7] {
                assert_eq!(wp.face(k, 0, f), 0.0);
            }
        }
        assert!(continuity_residual(&mp, &wp, &m0).unwrap().norm < 1e-10);
    }
}
