//! Run configuration. The grammar is documented in docs/config.md.

use std::path::{Path, PathBuf};

use dcmfg::geodesic::ProjectionOptions;
use dcmfg::io::Formats;
use dcmfg::model::ProblemSpec;
use dcmfg::problems;
use dcmfg::solver::SolverOptions;
use serde::{Deserialize, Deserializer, Serialize};

use crate::Invalid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// worker threads; absent means all available cores
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalized: Option<PenalizedConfig>,
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default)]
    pub flows: FlowsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A built-in problem with optional overrides, or a full problem description.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ProblemConfig {
    Named(NamedProblem),
    Explicit(ProblemSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedProblem {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
}

impl<'de> Deserialize<'de> for ProblemConfig {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let v = toml::Value::deserialize(de)?;
        let named = v.as_table().is_some_and(|t| t.contains_key("name"));
        if named {
            v.try_into().map(ProblemConfig::Named).map_err(D::Error::custom)
        } else {
            v.try_into().map(ProblemConfig::Explicit).map_err(D::Error::custom)
        }
    }
}

impl ProblemConfig {
    pub fn resolve(&self) -> Result<ProblemSpec, Invalid> {
        match self {
            ProblemConfig::Explicit(p) => Ok(p.clone()),
            ProblemConfig::Named(n) => {
                let mut p = match n.name.to_ascii_lowercase().as_str() {
                    "tp2" => {
                        let eps = n.penalty.ok_or_else(|| Invalid("problem tp2 needs a penalty value".into()))?;
                        problems::tp2(eps)
                    }
                    other => problems::by_name(other).ok_or_else(|| {
                        Invalid(format!("unknown problem {:?} (known: tp1, tp2, tp3, tp4)", n.name))
                    })?,
                };
                if let Some(m_bar) = n.m_bar {
                    p.coupling.m_bar = m_bar;
                }
                if let Some(eps) = n.penalty {
                    p.coupling.penalty = Some(eps);
                }
                Ok(p)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub nt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenalizedConfig {
    pub eps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub fw_tol: f64,
    pub max_iters: usize,
    pub n_cut: usize,
    pub t_samples: Vec<f64>,
    /// constant of the interpolation bound; absent means the problem's c_bar
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// additive slack; absent means 3 Lip(m0) dx
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slack: Option<f64>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        let o = ProjectionOptions::default();
        ProjectionConfig {
            fw_tol: o.fw_tol,
            max_iters: o.max_iters,
            n_cut: o.n_cut,
            t_samples: (1..=9).map(|i| i as f64 / 10.0).collect(),
            c: None,
            slack: None,
        }
    }
}

impl ProjectionConfig {
    pub fn options(&self) -> ProjectionOptions {
        ProjectionOptions { fw_tol: self.fw_tol, max_iters: self.max_iters, n_cut: self.n_cut }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowsConfig {
    /// paths for the marginal and energy checks
    #[serde(rename = "N")]
    pub n: usize,
    /// paths for the perturbation test
    pub nash_paths: usize,
    /// mollification width; absent means dx / 4
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_mollify: Option<f64>,
    pub seed: u64,
    pub t1: f64,
    pub t2: f64,
    #[serde(rename = "K_perturb")]
    pub k_perturb: usize,
    /// absent means 10 (dx + eps_mollify)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol_nash: Option<f64>,
    pub amplitude: f64,
    pub modes: usize,
    /// also run the test on the flow with reversed momentum
    pub control: bool,
}

impl Default for FlowsConfig {
    fn default() -> Self {
        let p = dcmfg::flows::PerturbationOptions::default();
        FlowsConfig {
            n: 100_000,
            nash_paths: 10_000,
            eps_mollify: None,
            seed: 1,
            t1: p.t1,
            t2: p.t2,
            k_perturb: p.k_perturb,
            tol_nash: None,
            amplitude: p.amplitude,
            modes: p.modes,
            control: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Bin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: PathBuf::from("runs/out"), formats: vec![OutputFormat::Csv, OutputFormat::Bin] }
    }
}

impl OutputConfig {
    pub fn formats(&self) -> Formats {
        Formats { csv: self.formats.contains(&OutputFormat::Csv), bin: self.formats.contains(&OutputFormat::Bin) }
    }
}

impl RunConfig {
    /// Parses a config file or a run manifest (whose `[config]` table is a config).
    pub fn parse(text: &str) -> Result<Self, Invalid> {
        let mut table: toml::Table = text.parse().map_err(|e| Invalid(format!("config is not valid TOML: {e}")))?;
        if table.contains_key("manifest") {
            match table.remove("config") {
                Some(toml::Value::Table(t)) => table = t,
                _ => return Err(Invalid("manifest has no [config] table".into())),
            }
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| Invalid(format!("config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Invalid> {
        let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<(), Invalid> {
        self.problem.resolve()?;
        if let Some(p) = &self.penalized {
            if p.eps.is_empty() || p.eps.iter().any(|e| e.is_nan() || *e <= 0.0) {
                return Err(Invalid("penalized.eps must be a nonempty list of positive numbers".into()));
            }
        }
        if self.threads == Some(0) {
            return Err(Invalid("threads must be positive".into()));
        }
        if self.output.formats.is_empty() {
            return Err(Invalid("output.formats must name at least one of csv, bin".into()));
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Directory name of one penalized run.
pub fn eps_dir(eps: f64) -> String {
    format!("eps_{eps}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const NAMED: &str = r#"
        [problem]
        name = "tp1"
        [grid]
        nx = 16
        nt = 16
        [solver]
        tol_gap = 1e-2
        [penalized]
        eps = [1.0, 0.1]
        [flows]
        N = 500
        [output]
        directory = "out"
        formats = ["csv"]
    "#;

    #[test]
    fn named_config_round_trips() {
        let c = RunConfig::parse(NAMED).unwrap();
        assert_eq!(c.solver.tol_gap, 1e-2);
        assert_eq!(c.solver.max_iters, SolverOptions::default().max_iters);
        assert_eq!(c.flows.n, 500);
        assert_eq!(c.output.formats(), Formats { csv: true, bin: false });
        assert_eq!(c.problem.resolve().unwrap(), problems::tp1());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn explicit_problem_matches_builtin() {
        let mut t = toml::Table::new();
        t.insert("problem".into(), toml::Value::try_from(problems::tp4()).unwrap());
        t.insert("grid".into(), toml::Value::try_from(GridConfig { nx: 8, nt: 8 }).unwrap());
        let explicit = toml::to_string(&t).unwrap();
        let c = RunConfig::parse(&explicit).unwrap();
        assert_eq!(c.problem.resolve().unwrap(), problems::tp4());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn manifest_is_a_config() {
        let c = RunConfig::parse(NAMED).unwrap();
        let manifest = format!("[manifest]\ncommand = \"solve\"\n\n{}", to_config_table(&c));
        assert_eq!(RunConfig::parse(&manifest).unwrap(), c);
    }

    fn to_config_table(c: &RunConfig) -> String {
        let mut t = toml::Table::new();
        t.insert("config".into(), toml::Value::try_from(c).unwrap());
        toml::to_string(&t).unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::parse("[problem]\nname = \"tp9\"\n[grid]\nnx = 8\nnt = 8\n").is_err());
        assert!(RunConfig::parse("[problem]\nname = \"tp2\"\n[grid]\nnx = 8\nnt = 8\n").is_err());
        assert!(RunConfig::parse("[problem]\nname = \"tp1\"\n[grid]\nnx = 8\nnt = 8\ncolour = 1\n").is_err());
        assert!(RunConfig::parse("[problem]\nname = \"tp1\"\n").is_err());
        assert!(RunConfig::parse(&NAMED.replace("[1.0, 0.1]", "[]")).is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let c = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                let p = c.problem.resolve().unwrap();
                let grid = p.grid(c.grid.nx, c.grid.nt).unwrap();
                assert!(dcmfg::model::validate(&p, &grid).is_ok(), "{}", path.display());
                seen += 1;
            }
        }
        assert!(seen >= 5);
    }
}
