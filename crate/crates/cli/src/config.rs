//! Run configuration read from TOML. Unknown keys are rejected.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use geolp::frac_calculus::{BesovSpec, SOBOLEV_EXPONENTS};
use geolp::geometry::{build_grid, read_metric_table, MetricGrid, MetricSpec};
use geolp::heat::{HeatBackend, HeatConfig};
use geolp::lp::{default_k_range, make_smooth_symbol, make_symbol, normalize_bank, LpBank, Normalization};
use geolp::manifold::Manifold;
use geolp::verify::{Experiment, SuiteOptions, GAMMA_GRID, P_SCAN};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Directory override read when neither `--out` nor the config sets one.
pub const OUT_ENV: &str = "GEOLP_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub bank: BankConfig,
    #[serde(default)]
    pub heat: HeatSection,
    #[serde(default)]
    pub experiments: ExperimentConfig,
    #[serde(default)]
    pub norms: NormsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n1: usize,
    pub n2: usize,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    pub metric: MetricConfig,
    /// Tensor rank used by `spectrum` and by generated fields in `norms`.
    pub rank: usize,
    /// Side of the refined grid for stability checks in `verify`; 0 disables refinement.
    pub refine_n: usize,
    /// Eigenpairs written by `spectrum`; all of them by default when the operator is small.
    pub spectrum_count: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n1: 32,
            n2: 32,
            l1: TAU,
            l2: TAU,
            metric: MetricConfig::Flat {},
            rank: 0,
            refine_n: 64,
            spectrum_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricConfig {
    Flat {},
    /// `exp(2 A cos x1 cos x2) delta`
    Conformal { amplitude: f64 },
    /// A metric table file; relative paths resolve against the config file.
    Table { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    #[serde(rename = "N")]
    pub order: u32,
    pub mode: Normalization,
    /// Width of the subordinated symbol; the canonical symbol when absent.
    pub width: Option<f64>,
    pub k_min: Option<i32>,
    pub k_max: Option<i32>,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig { order: 1, mode: Normalization::SumToIdentity, width: None, k_min: None, k_max: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatSection {
    pub backend: HeatBackend,
    pub steps_per_decade: usize,
    pub spectral_count: Option<usize>,
}

impl Default for HeatSection {
    fn default() -> Self {
        let h = HeatConfig::default();
        HeatSection { backend: h.backend, steps_per_decade: h.steps_per_decade, spectral_count: h.spectral_count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub names: Vec<Experiment>,
    pub samples: usize,
    pub ranks: Vec<usize>,
    pub max_wavenumber: u32,
    pub spectral_decay: f64,
    pub gammas: Vec<f64>,
    pub gamma: f64,
    pub p_scan: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let o = SuiteOptions::default();
        ExperimentConfig {
            names: o.experiments,
            samples: o.samples,
            ranks: o.ranks,
            max_wavenumber: o.max_wavenumber,
            spectral_decay: o.spectral_decay,
            gammas: GAMMA_GRID.to_vec(),
            gamma: o.gamma,
            p_scan: P_SCAN.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormsConfig {
    pub sobolev: Vec<f64>,
    /// `[a, p, q]` triples.
    pub besov: Vec<[f64; 3]>,
    /// Random fields generated when no field file is given.
    pub samples: usize,
}

impl Default for NormsConfig {
    fn default() -> Self {
        NormsConfig {
            sobolev: SOBOLEV_EXPONENTS.to_vec(),
            besov: vec![[0.0, 2.0, 2.0], [0.5, 2.0, 1.0], [1.0, 2.0, 1.0], [0.0, 4.0, 2.0]],
            samples: 3,
        }
    }
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let MetricConfig::Table { path: p } = &mut cfg.grid.metric {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that need no grid or solver.
    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.grid;
        if g.rank > 2 {
            return Err(CliError::config(format!("grid.rank {} outside 0..=2", g.rank)));
        }
        if g.refine_n != 0 && g.refine_n <= g.n1.max(g.n2) {
            return Err(CliError::config(format!("grid.refine_n {} must exceed n1 and n2", g.refine_n)));
        }
        if g.refine_n != 0 && g.n1 != g.n2 {
            return Err(CliError::config("refinement needs a square grid".into()));
        }
        if let MetricConfig::Conformal { amplitude } = g.metric {
            if !amplitude.is_finite() {
                return Err(CliError::config(format!("conformal amplitude {amplitude}")));
            }
        }
        let e = &self.experiments;
        if e.samples == 0 {
            return Err(CliError::config("experiments.samples must be positive".into()));
        }
        if e.ranks.is_empty() || e.ranks.iter().any(|&r| r > 1) {
            return Err(CliError::config(format!("experiments.ranks {:?} must be a nonempty subset of {{0, 1}}", e.ranks)));
        }
        if !(e.spectral_decay > 0.5) {
            return Err(CliError::config(format!("experiments.spectral_decay {} must exceed 0.5", e.spectral_decay)));
        }
        if e.gammas.iter().chain([&e.gamma]).any(|g| !(0.0..1.0).contains(g)) {
            return Err(CliError::config("experiment gammas must lie in [0, 1)".into()));
        }
        if e.p_scan.iter().any(|&p| !(p > 2.0)) {
            return Err(CliError::config("experiments.p_scan entries must exceed 2".into()));
        }
        if self.heat.steps_per_decade == 0 {
            return Err(CliError::config("heat.steps_per_decade must be positive".into()));
        }
        for b in &self.norms.besov {
            if !(b[1] >= 1.0 && b[2] >= 1.0) {
                return Err(CliError::config(format!("besov triple {b:?} needs p, q >= 1")));
            }
        }
        Ok(())
    }

    pub fn metric_grid(&self, n1: usize, n2: usize) -> Result<MetricGrid, CliError> {
        let g = &self.grid;
        let spec = match &g.metric {
            MetricConfig::Flat {} => MetricSpec::Flat,
            MetricConfig::Conformal { amplitude } => MetricSpec::conformal_cos(*amplitude),
            MetricConfig::Table { path } => {
                let t = read_metric_table(path).map_err(CliError::config_from)?;
                if (t.n1, t.n2) != (n1, n2) {
                    return Err(CliError::config(format!(
                        "metric table {} is {}x{}, grid asks for {n1}x{n2}",
                        path.display(),
                        t.n1,
                        t.n2
                    )));
                }
                return Ok(t);
            }
        };
        build_grid(n1, n2, g.l1, g.l2, &spec).map_err(CliError::config_from)
    }

    pub fn metric_label(&self) -> String {
        match &self.grid.metric {
            MetricConfig::Flat {} => "flat".into(),
            MetricConfig::Conformal { amplitude } => format!("conformal A={amplitude}"),
            MetricConfig::Table { path } => format!("table {}", path.display()),
        }
    }

    pub fn manifold(&self) -> Result<Manifold, CliError> {
        Ok(Manifold::new(&self.metric_grid(self.grid.n1, self.grid.n2)?, self.metric_label()))
    }

    /// The refined manifold, when refinement is enabled and the metric is analytic.
    pub fn fine_manifold(&self) -> Result<Option<Manifold>, CliError> {
        let n = self.grid.refine_n;
        if n == 0 || matches!(self.grid.metric, MetricConfig::Table { .. }) {
            return Ok(None);
        }
        Ok(Some(Manifold::new(&self.metric_grid(n, n)?, self.metric_label())))
    }

    pub fn bank(&self) -> Result<LpBank, CliError> {
        let b = &self.bank;
        let symbol = match b.width {
            Some(w) => make_smooth_symbol(b.order, w),
            None => make_symbol(b.order),
        }
        .map_err(CliError::config_from)?;
        let (lo, hi) = default_k_range(self.grid.n1.max(self.grid.n2));
        normalize_bank(&symbol, b.mode, b.k_min.unwrap_or(lo), b.k_max.unwrap_or(hi)).map_err(CliError::config_from)
    }

    pub fn heat_config(&self) -> HeatConfig {
        HeatConfig {
            backend: self.heat.backend,
            steps_per_decade: self.heat.steps_per_decade,
            spectral_count: self.heat.spectral_count,
        }
    }

    pub fn suite_options(&self) -> SuiteOptions {
        let e = &self.experiments;
        SuiteOptions {
            experiments: e.names.clone(),
            ranks: e.ranks.clone(),
            samples: e.samples,
            seed: self.seed,
            max_wavenumber: e.max_wavenumber,
            spectral_decay: e.spectral_decay,
            gammas: e.gammas.clone(),
            gamma: e.gamma,
            p_scan: e.p_scan.clone(),
            heat: self.heat_config(),
        }
    }

    pub fn besov_specs(&self) -> Vec<BesovSpec> {
        self.norms.besov.iter().map(|b| BesovSpec::new(b[0], b[1], b[2])).collect()
    }

    /// `--out`, then the environment, then the config, then `geolp-out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| self.output.clone())
            .unwrap_or_else(|| PathBuf::from("geolp-out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!((c.grid.n1, c.grid.n2, c.seed), (32, 32, 1));
        assert_eq!(c.bank().unwrap().mode, Normalization::SumToIdentity);
        assert_eq!(c.suite_options().experiments.len(), 12);
    }

    #[test]
    fn full_config_parses() {
        let c = RunConfig::parse(
            r#"
            seed = 7
            output = "out"
            [grid]
            n1 = 16
            n2 = 16
            refine_n = 32
            metric = { kind = "conformal", amplitude = 0.3 }
            [bank]
            N = 2
            mode = "squares_to_identity"
            k_min = -1
            k_max = 4
            [heat]
            backend = "crank_nicolson"
            [experiments]
            names = ["lp", "reconstruction"]
            samples = 4
            p_scan = [4.0]
            [norms]
            besov = [[0.5, 2.0, 1.0]]
            "#,
        )
        .unwrap();
        assert_eq!(c.grid.metric, MetricConfig::Conformal { amplitude: 0.3 });
        let b = c.bank().unwrap();
        assert_eq!((b.k_min, b.k_max), (-1, 4));
        assert_eq!(c.heat_config().backend, HeatBackend::CrankNicolson);
        assert_eq!(c.suite_options().experiments, vec![Experiment::Lp, Experiment::Reconstruction]);
        assert_eq!(c.besov_specs().len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 1", "[grid]\nn3 = 4", "[bank]\nmode = \"sideways\"", "[grid]\nmetric = { kind = \"flat\", a = 1 }"] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.code, 2, "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[grid]\nrank = 3",
            "[grid]\nrefine_n = 16",
            "[experiments]\nsamples = 0",
            "[experiments]\nranks = [2]",
            "[experiments]\nspectral_decay = 0.5",
            "[experiments]\ngamma = 1.0",
            "[experiments]\np_scan = [2.0]",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
        let c = RunConfig::parse("[bank]\nN = 0").unwrap();
        assert_eq!(c.bank().unwrap_err().code, 2);
        let c = RunConfig::parse("[grid]\nn1 = 4\nn2 = 4\nrefine_n = 0").unwrap();
        assert_eq!(c.manifold().err().unwrap().code, 2);
    }

    #[test]
    fn output_flag_wins() {
        let c = RunConfig::parse("output = \"a\"").unwrap();
        assert_eq!(c.output_dir(Some(Path::new("b"))), PathBuf::from("b"));
    }
}
