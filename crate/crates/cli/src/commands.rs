use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use dcmfg::duality::certify;
use dcmfg::flows::{energy_residual, marginal_error, mollify, perturbation_test, sample_paths, PerturbationOptions};
use dcmfg::geodesic::{lemma51_check, lipschitz, solve_projection};
use dcmfg::grid::{FieldRole, GridSpec, ScalarField, TimeLayout};
use dcmfg::io::{load_solution, save_ensemble, save_gap_report, save_solution, scalar_to_bytes, scalar_to_csv};
use dcmfg::model::{validate, ProblemSpec};
use dcmfg::solver::{run, Solution};
use serde::Serialize;

use crate::config::{eps_dir, RunConfig};
use crate::{Invalid, EXIT_NOT_CONVERGED, EXIT_OK};

#[derive(Serialize)]
struct ManifestHeader<'a> {
    command: &'a str,
    dcmfg_version: &'a str,
    cli_version: &'a str,
    started_unix: u64,
    wall_seconds: f64,
    threads: usize,
    exit_code: u8,
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest: ManifestHeader<'a>,
    summary: toml::Table,
    config: &'a RunConfig,
    resolved_problem: &'a ProblemSpec,
}

struct Clock {
    started_unix: u64,
    start: Instant,
}

impl Clock {
    fn start() -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Clock { started_unix, start: Instant::now() }
    }
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, problem: &ProblemSpec, clock: &Clock, exit_code: u8, summary: toml::Table) -> Result<()> {
    let m = Manifest {
        manifest: ManifestHeader {
            command,
            dcmfg_version: dcmfg::VERSION,
            cli_version: env!("CARGO_PKG_VERSION"),
            started_unix: clock.started_unix,
            wall_seconds: clock.start.elapsed().as_secs_f64(),
            threads: cfg.threads.unwrap_or(1),
            exit_code,
        },
        summary,
        config: cfg,
        resolved_problem: problem,
    };
    fs::write(dir.join("manifest.toml"), toml::to_string(&m)?)?;
    Ok(())
}

fn checked_problem(cfg: &RunConfig) -> Result<(ProblemSpec, GridSpec)> {
    let problem = cfg.problem.resolve()?;
    let grid = problem.grid(cfg.grid.nx, cfg.grid.nt)?;
    let report = validate(&problem, &grid);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    report.ensure()?;
    Ok((problem, grid))
}

fn solve_into(dir: &Path, problem: &ProblemSpec, grid: &GridSpec, cfg: &RunConfig) -> Result<Solution> {
    let sol = run(problem, grid, &cfg.solver)?;
    save_solution(dir, &sol, cfg.output.formats())?;
    save_gap_report(&dir.join("gap_report.txt"), &certify(&sol, problem)?)?;
    Ok(sol)
}

fn summary_of(sol: &Solution) -> toml::Table {
    let d = &sol.diagnostics;
    let mut t = toml::Table::new();
    t.insert("converged".into(), d.converged.into());
    t.insert("iterations".into(), (d.iterations as i64).into());
    t.insert("relative_gap".into(), d.relative_gap.into());
    t.insert("continuity_residual".into(), d.feas.into());
    t
}

pub fn solve(cfg: &RunConfig) -> Result<u8> {
    let clock = Clock::start();
    let (problem, grid) = checked_problem(cfg)?;
    let dir = &cfg.output.directory;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let sol = solve_into(dir, &problem, &grid, cfg)?;
    let mut converged = sol.diagnostics.converged;
    println!("{}", line("solve", &sol));
    let mut summary = summary_of(&sol);
    if let Some(pen) = &cfg.penalized {
        let mut runs = toml::Table::new();
        for &eps in &pen.eps {
            let mut p = problem.clone();
            p.coupling = p.coupling.penalize(eps)?;
            validate(&p, &grid).ensure()?;
            let sub = dir.join("penalized").join(eps_dir(eps));
            let s = solve_into(&sub, &p, &grid, cfg)?;
            println!("{}", line(&format!("solve eps={eps}"), &s));
            converged &= s.diagnostics.converged;
            runs.insert(eps_dir(eps), summary_of(&s).into());
        }
        summary.insert("penalized".into(), runs.into());
    }
    let code = if converged { EXIT_OK } else { EXIT_NOT_CONVERGED };
    write_manifest(dir, "solve", cfg, &problem, &clock, code, summary)?;
    if !converged {
        eprintln!("not converged within {} iterations; best iterate written to {}", cfg.solver.max_iters, dir.display());
    }
    Ok(code)
}

fn line(label: &str, sol: &Solution) -> String {
    let d = &sol.diagnostics;
    format!(
        "{label}: converged={} iterations={} relative_gap={:.3e} residual={:.3e} max_density={:.4}",
        d.converged, d.iterations, d.relative_gap, d.feas, d.max_density
    )
}

fn kv(pairs: &[(&str, String)]) -> String {
    pairs.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k} = {v}");
        s
    })
}

pub fn project(cfg: &RunConfig) -> Result<u8> {
    let clock = Clock::start();
    let (problem, grid) = checked_problem(cfg)?;
    if grid.d != 1 {
        return Err(Invalid("project works on one-dimensional problems only".into()).into());
    }
    let dir = cfg.output.directory.join("projection");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let m_bar = problem.coupling.m_bar;
    let m0 = problem.sample_m0(&grid);
    let g = problem.sample_g(&grid);
    let pc = &cfg.projection;
    let res = solve_projection(&m0, &g, m_bar, &pc.options())?;

    let m1 = ScalarField::from_values(grid, FieldRole::Density, TimeLayout::Single, res.m1.clone())?;
    let formats = cfg.output.formats();
    if formats.csv {
        fs::write(dir.join("m1.csv"), scalar_to_csv(&m1, "m1"))?;
    }
    if formats.bin {
        fs::write(dir.join("m1.bin"), scalar_to_bytes(&m1))?;
    }
    let mut trace = String::from("# units: objective [cost]\niteration,objective\n");
    for (i, v) in res.trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{v}");
    }
    fs::write(dir.join("trace.csv"), trace)?;

    let mut pairs = vec![
        ("objective", res.objective.to_string()),
        ("fw_gap", res.fw_gap.to_string()),
        ("iterations", res.iterations.to_string()),
        ("certified", res.certified.to_string()),
    ];
    let mut summary = toml::Table::new();
    summary.insert("certified".into(), res.certified.into());
    summary.insert("fw_gap".into(), res.fw_gap.into());
    if res.certified {
        let c = pc.c.unwrap_or_else(|| problem.coupling.c_bar());
        let slack = pc.slack.unwrap_or_else(|| 3.0 * lipschitz(&m0) * grid.dx());
        let rep = lemma51_check(&m0, &res.m1, m_bar, c, &pc.t_samples, slack, pc.n_cut)?;
        let mut csv = String::from("# units: t [fraction of the geodesic], max_density and bound [mass per unit length]\n");
        let _ = writeln!(csv, "# grid: d=1 nx={} dx={} m_bar={m_bar} c={c} lambda={} slack={slack}", grid.nx, grid.dx(), rep.lambda);
        csv.push_str("t,max_density,bound\n");
        for r in &rep.rows {
            let _ = writeln!(csv, "{},{},{}", r.t, r.max_density, r.bound);
        }
        fs::write(dir.join("interpolation_bound.csv"), csv)?;
        pairs.extend([
            ("lambda", rep.lambda.to_string()),
            ("slack", rep.slack.to_string()),
            ("max_violation", rep.max_violation.to_string()),
            ("bound_holds", rep.pass.to_string()),
        ]);
        summary.insert("bound_holds".into(), rep.pass.into());
        println!("project: certified fw_gap={:.2e} bound_holds={} max_violation={:.4}", res.fw_gap, rep.pass, rep.max_violation);
    } else {
        println!("project: not certified (fw_gap={:.2e}); interpolation bound not checked", res.fw_gap);
    }
    fs::write(dir.join("projection_report.txt"), kv(&pairs))?;
    let code = if res.certified { EXIT_OK } else { EXIT_NOT_CONVERGED };
    write_manifest(&dir, "project", cfg, &problem, &clock, code, summary)?;
    Ok(code)
}

pub fn sample(cfg: &RunConfig) -> Result<u8> {
    let clock = Clock::start();
    let (problem, grid) = checked_problem(cfg)?;
    let run_dir = &cfg.output.directory;
    let sol = load_solution(run_dir).map_err(|e| {
        Invalid(format!("no solve output in {} ({e}); run `dcmfg solve` with this config first", run_dir.display()))
    })?;
    if sol.grid != grid {
        return Err(Invalid(format!("solution in {} was computed on a different grid", run_dir.display())).into());
    }
    let fc = &cfg.flows;
    let eps = fc.eps_mollify.unwrap_or(grid.dx() / 4.0);
    let fields = mollify(&sol, &problem, eps)?;
    let m0 = problem.sample_m0(&grid);
    let ens = sample_paths(&fields, &problem, &m0, fc.n, fc.seed)?;
    let marg = marginal_error(&ens, &sol, &problem)?;
    let energy = energy_residual(&ens, &sol, &problem)?;
    let opts = PerturbationOptions {
        t1: fc.t1,
        t2: fc.t2,
        k_perturb: fc.k_perturb,
        seed: fc.seed,
        tol_nash: fc.tol_nash,
        amplitude: fc.amplitude,
        modes: fc.modes,
    };
    let nash_ens = sample_paths(&fields, &problem, &m0, fc.nash_paths, fc.seed)?;
    let nash = perturbation_test(&nash_ens, &fields, &problem, &opts)?;
    let control = if fc.control {
        let rev = fields.reversed();
        let rev_ens = sample_paths(&rev, &problem, &m0, fc.nash_paths, fc.seed)?;
        Some(perturbation_test(&rev_ens, &rev, &problem, &opts)?)
    } else {
        None
    };

    let dir = run_dir.join("flows");
    fs::create_dir_all(&dir)?;
    if cfg.output.formats().bin {
        save_ensemble(&dir.join("ensemble.mfgp"), &ens)?;
    }
    let mut csv = String::from("# units: t [time], l1_error [dimensionless]\n");
    let _ = writeln!(csv, "# grid: d={} nx={} nt={} T={} paths={} eps_mollify={eps}", grid.d, grid.nx, grid.nt, grid.t_final, fc.n);
    csv.push_str("t,l1_error\n");
    for (k, e) in marg.per_time.iter().enumerate() {
        let _ = writeln!(csv, "{},{e}", k as f64 * grid.dt());
    }
    fs::write(dir.join("marginals.csv"), csv)?;
    let mut pairs = vec![
        ("paths", fc.n.to_string()),
        ("eps_mollify", eps.to_string()),
        ("min_mollified_density", fields.min_m.to_string()),
        ("marginal_l1_max", marg.max.to_string()),
        ("ensemble_kinetic", marg.ensemble_kinetic.to_string()),
        ("grid_kinetic", marg.grid_kinetic.to_string()),
        ("max_empirical_density", marg.max_empirical_density.to_string()),
        ("energy_lhs", energy.lhs.to_string()),
        ("energy_rhs", energy.rhs.to_string()),
        ("energy_relative", energy.relative.to_string()),
        ("nash_paths", nash.paths.to_string()),
        ("perturbations_per_path", nash.perturbations.to_string()),
        ("tol_nash", nash.tol_nash.to_string()),
        ("violating_paths", nash.violating_paths.to_string()),
        ("violation_fraction", nash.fraction.to_string()),
        ("worst_margin", nash.worst_margin.to_string()),
    ];
    if let Some(c) = &control {
        pairs.push(("control_violation_fraction", c.fraction.to_string()));
    }
    fs::write(dir.join("flows_report.txt"), kv(&pairs))?;
    println!(
        "sample: marginal_l1={:.4} kinetic {:.4} (grid {:.4}) energy_relative={:.2e} violation_fraction={:.4}{}",
        marg.max,
        marg.ensemble_kinetic,
        marg.grid_kinetic,
        energy.relative,
        nash.fraction,
        control.map(|c| format!(" control={:.4}", c.fraction)).unwrap_or_default()
    );
    let mut summary = toml::Table::new();
    summary.insert("marginal_l1_max".into(), marg.max.into());
    summary.insert("violation_fraction".into(), nash.fraction.into());
    write_manifest(&dir, "sample", cfg, &problem, &clock, EXIT_OK, summary)?;
    Ok(EXIT_OK)
}
