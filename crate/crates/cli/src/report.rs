//! Cross-run tables: run summary, regularity refinement, penalized sweep, interpolation bound.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;
use dcmfg::duality::{eval_b, regularity_probe};
use dcmfg::io::load_solution;
use dcmfg::solver::Solution;

use crate::config::{eps_dir, RunConfig};
use crate::{Invalid, EXIT_OK};

struct Table {
    name: &'static str,
    units: &'static str,
    header: &'static str,
    rows: Vec<String>,
}

impl Table {
    fn new(name: &'static str, units: &'static str, header: &'static str) -> Self {
        Table { name, units, header, rows: Vec::new() }
    }

    fn render(&self, runs: &[String]) -> String {
        let mut s = format!("# table: {}\n# units: {}\n", self.name, self.units);
        for (i, r) in runs.iter().enumerate() {
            let _ = writeln!(s, "# run {}: {r}", i + 1);
        }
        s.push_str(self.header);
        s.push('\n');
        for r in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }
}

fn load(dir: &Path, what: &str) -> Result<Solution, Invalid> {
    load_solution(dir).map_err(|e| Invalid(format!("{what} {}: {e}", dir.display())))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn run(dirs: &[std::path::PathBuf], out: Option<&Path>) -> Result<u8> {
    let mut runs = Table::new(
        "runs",
        "relative_gap and residual dimensionless, max_density [mass per unit volume], max_abs_u [cost]",
        "run,d,nx,nt,T,iterations,converged,relative_gap,continuity_residual,max_density,max_abs_u",
    );
    let mut refinement = Table::new(
        "refinement",
        "t1, t2 [time]; beta_max [cost per unit time]; beta norms over the window and slab [cost]; beta_t_l1 [cost]",
        "run,nx,nt,t1,t2,beta_max,beta_l2,beta_l1,slab_l1,beta_t_l1,max_abs_u",
    );
    let mut sweep = Table::new(
        "penalized_sweep",
        "eps [cost x volume per mass]; max_excess [mass per unit volume]; l2_to_hard [mass per unit volume]; B_eps [cost]",
        "run,eps,max_excess,l2_to_hard,B_eps,converged",
    );
    let mut lemma = Table::new(
        "interpolation_bound",
        "t [fraction of the geodesic]; max_density and bound [mass per unit length]",
        "run,t,max_density,bound",
    );
    let mut labels = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let run = i + 1;
        let manifest = dir.join("manifest.toml");
        if !manifest.exists() {
            return Err(Invalid(format!("{} has no manifest.toml; is it a solve output?", dir.display())).into());
        }
        let cfg = RunConfig::load(&manifest)?;
        let problem = cfg.problem.resolve()?;
        let sol = load(dir, "cannot load solution in")?;
        let g = sol.grid;
        let d = &sol.diagnostics;
        labels.push(dir.display().to_string());
        let umax = max_abs(&sol.u.values);
        runs.rows.push(format!(
            "{run},{},{},{},{},{},{},{},{},{},{umax}",
            g.d, g.nx, g.nt, g.t_final, d.iterations, d.converged, d.relative_gap, d.feas, d.max_density
        ));
        let t = g.t_final;
        for row in regularity_probe(&sol, &[(0.1 * t, 0.9 * t)], 0.1 * t)? {
            refinement.rows.push(format!(
                "{run},{},{},{},{},{},{},{},{},{},{umax}",
                row.nx, g.nt, row.t1, row.t2, row.max, row.l2, row.l1, row.slab_l1, row.beta_t_l1
            ));
        }
        if let Some(pen) = &cfg.penalized {
            for &eps in &pen.eps {
                let sub = dir.join("penalized").join(eps_dir(eps));
                let s = load(&sub, "missing penalized run")?;
                let mut p = problem.clone();
                p.coupling = p.coupling.penalize(eps)?;
                let excess = s.m.max() - problem.coupling.m_bar;
                let sq: f64 = s.m.values.iter().zip(&sol.m.values).map(|(a, b)| (a - b).powi(2)).sum();
                let l2 = (sq * g.vol() * g.dt()).sqrt();
                let b = eval_b(&s.m, &s.w, &p);
                sweep.rows.push(format!("{run},{eps},{excess},{l2},{b},{}", s.diagnostics.converged));
            }
        }
        let lemma_csv = dir.join("projection").join("interpolation_bound.csv");
        if let Ok(text) = fs::read_to_string(&lemma_csv) {
            for l in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with('t')) {
                lemma.rows.push(format!("{run},{l}"));
            }
        }
    }
    let tables = [&runs, &refinement, &sweep, &lemma];
    for t in tables {
        if t.rows.is_empty() {
            continue;
        }
        let text = t.render(&labels);
        println!("{text}");
        if let Some(out) = out {
            fs::create_dir_all(out)?;
            fs::write(out.join(format!("{}.csv", t.name)), text)?;
        }
    }
    Ok(EXIT_OK)
}
