use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use epictrl_core::{EpidemicState, IntegratorConfig, ModelInstance, ModelSpec};
use serde::Deserialize;

/// Scenarios bundled with the binary, by name.
pub const BUNDLED: [(&str, &str); 4] = [
    ("fig1", include_str!("../scenarios/fig1.toml")),
    ("phase-portrait", include_str!("../scenarios/phase-portrait.toml")),
    ("counterexample", include_str!("../scenarios/counterexample.toml")),
    ("classical-sir", include_str!("../scenarios/classical-sir.toml")),
];

/// A malformed or inconsistent scenario file; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub model: ModelSpec,
    pub gamma: f64,
    pub x0: f64,
    pub y0: f64,
    pub ybar: f64,
    /// Further lid levels whose filling-the-box costs are compared.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub phase_portrait: Option<PhasePortrait>,
}

fn default_seed() -> u64 {
    epictrl_core::verification::DEFAULT_SEED
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Keep every n-th integrator sample in trajectory CSVs.
    pub every: usize,
    /// Rows of the κ/λ curve table.
    pub curve_points: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            every: 100,
            curve_points: 201,
        }
    }
}

/// Fan of uncontrolled orbits started on x + y = 1 and on a low row y = `row`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasePortrait {
    pub orbits: usize,
    pub row: f64,
}

impl Default for PhasePortrait {
    fn default() -> Self {
        Self { orbits: 12, row: 0.01 }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError(format!("{origin}: {e}")))?;
        cfg.validate().map_err(|e| ConfigError(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == name) else {
            let names: Vec<_> = BUNDLED.iter().map(|(n, _)| *n).collect();
            return Err(ConfigError(format!("unknown scenario `{name}` (known: {})", names.join(", "))).into());
        };
        let mut cfg = Self::parse(text, name)?;
        if cfg.name.is_empty() {
            cfg.name = name.to_string();
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))
            .with_context(|| "reading scenario")?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if cfg.name.is_empty() {
            cfg.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(cfg)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        self.instance().map_err(|e| e.to_string())?;
        EpidemicState::new(self.x0, self.y0).map_err(|e| e.to_string())?;
        for &l in std::iter::once(&self.ybar).chain(&self.thresholds) {
            if !(l > 0.0 && l <= 1.0) {
                return Err(format!("threshold {l} must lie in (0, 1]"));
            }
        }
        self.integrator.validate().map_err(|e| e.to_string())?;
        if self.output.every == 0 {
            return Err("output.every must be positive".into());
        }
        Ok(())
    }

    pub fn instance(&self) -> epictrl_core::Result<ModelInstance> {
        ModelInstance::new(self.model.build()?, self.gamma)
    }

    pub fn start(&self) -> EpidemicState {
        EpidemicState { x: self.x0, y: self.y0 }
    }
}

/// Resolves `--scenario` / `--config`, defaulting to the fig1 scenario.
pub fn resolve(scenario: Option<&str>, config: Option<&Path>) -> Result<ScenarioConfig> {
    match (scenario, config) {
        (Some(_), Some(_)) => bail!(ConfigError("give either --scenario or --config, not both".into())),
        (_, Some(p)) => ScenarioConfig::load(p),
        (name, None) => ScenarioConfig::bundled(name.unwrap_or("fig1")),
    }
}
