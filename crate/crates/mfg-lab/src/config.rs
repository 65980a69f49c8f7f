//! Experiment configuration: a versioned TOML schema with strict validation,
//! environment-variable overrides, and a content hash embedded in every
//! artifact for reproducibility.
//!
//! Any config key can be overridden from the environment with the prefix
//! `MFG_LAB_`, using `__` as the block separator, e.g.
//! `MFG_LAB_NUMERICS__M=32` or `MFG_LAB_MODEL__SIGMA_G=0.5`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MfgError, Result};
use crate::grid::{Grid, GridMeasure, TimeGrid};
use crate::mfg::PicardParams;
use crate::model::{Coupling, Hamiltonian, HamiltonianKind, Model, Phi};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "MFG_LAB_";

fn config_err(msg: impl Into<String>) -> MfgError {
    MfgError::Config(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub numerics: NumericsBlock,
    #[serde(default)]
    pub experiment: ExperimentBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

fn d_hamiltonian() -> String { "sqrt".into() }
fn d_eps() -> f64 { 0.1 }
fn d_sigma() -> f64 { 0.2 }
fn d_phi() -> String { "linear".into() }
fn d_phi_slope() -> f64 { 1.0 }

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    /// Hamiltonian kind: "sqrt" | "truncated-quadratic" | "constant".
    #[serde(default = "d_hamiltonian")]
    pub hamiltonian: String,
    /// Truncation radius (truncated-quadratic) or constant value (constant).
    #[serde(default)]
    pub param: Option<f64>,
    /// Amplitude of the spatial cosine term in the Hamiltonian.
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Mollifier width of the running coupling.
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    /// Mollifier width of the terminal coupling.
    #[serde(default = "d_sigma")]
    pub sigma_g: f64,
    /// Coupling nonlinearity: "linear" | "cubic".
    #[serde(default = "d_phi")]
    pub phi: String,
    /// Slope of the linear nonlinearity.
    #[serde(default = "d_phi_slope")]
    pub phi_slope: f64,
    /// Common-noise intensity.
    #[serde(default)]
    pub beta: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            hamiltonian: "sqrt".into(),
            param: None,
            eps: 0.1,
            sigma: 0.2,
            sigma_g: 0.2,
            phi: "linear".into(),
            phi_slope: 1.0,
            beta: 0.0,
        }
    }
}

fn d_m() -> usize { 64 }
fn d_s() -> usize { 100 }
fn d_tol() -> f64 { 1e-9 }
fn d_theta() -> f64 { 0.5 }
fn d_max_sweeps() -> usize { 500 }
fn d_k() -> usize { 3 }
fn d_substeps() -> usize { 8 }

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsBlock {
    /// Grid points per axis.
    #[serde(default = "d_m")]
    pub m: usize,
    /// Time steps.
    #[serde(default = "d_s")]
    pub s: usize,
    /// Picard tolerance.
    #[serde(default = "d_tol")]
    pub tol: f64,
    /// Picard damping weight on the new iterate.
    #[serde(default = "d_theta")]
    pub theta: f64,
    /// Max Picard sweeps.
    #[serde(default = "d_max_sweeps")]
    pub max_sweeps: usize,
    /// Cap on the particle time step; defaults to the stability bound.
    #[serde(default)]
    pub dt_sde: Option<f64>,
    /// Scenario-tree depth.
    #[serde(default = "d_k")]
    pub k: usize,
    /// Fine time steps per tree level.
    #[serde(default = "d_substeps")]
    pub substeps: usize,
}

impl Default for NumericsBlock {
    fn default() -> Self {
        Self {
            m: 64,
            s: 100,
            tol: 1e-9,
            theta: 0.5,
            max_sweeps: 500,
            dt_sde: None,
            k: 3,
            substeps: 8,
        }
    }
}

fn d_n_list() -> Vec<usize> { vec![2, 3, 4, 5] }
fn d_n_mc() -> usize { 200 }
fn d_t_end() -> f64 { 1.0 }

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    /// Player counts for sweeps (nash, converge, project, chaos).
    #[serde(default = "d_n_list")]
    pub n_list: Vec<usize>,
    /// Monte-Carlo ensemble size.
    #[serde(default = "d_n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "d_t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub m0: MeasureSpec,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        Self {
            n_list: vec![2, 3, 4, 5],
            n_mc: 200,
            seed: 0,
            t0: 0.0,
            t_end: 1.0,
            m0: MeasureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum MeasureSpec {
    Uniform,
    WrappedGaussian { center: f64, width: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub center: f64,
    pub width: f64,
    pub weight: f64,
}

impl Default for MeasureSpec {
    fn default() -> Self {
        MeasureSpec::WrappedGaussian { center: 0.5, width: 0.15 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Output directory; overridden by `--out`.
    pub dir: Option<String>,
}

fn wrapped_gaussian(x: f64, center: f64, width: f64) -> f64 {
    let mut s = 0.0;
    for k in -4i32..=4 {
        let d = x - center + k as f64;
        s += (-d * d / (2.0 * width * width)).exp();
    }
    s
}

impl MeasureSpec {
    pub fn build(&self, grid: Grid) -> Result<GridMeasure> {
        match self {
            MeasureSpec::Uniform => Ok(GridMeasure::uniform(grid)),
            MeasureSpec::WrappedGaussian { center, width } => {
                if *width <= 0.0 {
                    return Err(config_err("m0 width must be positive"));
                }
                GridMeasure::from_fn(grid, |x| wrapped_gaussian(x[0], *center, *width))
            }
            MeasureSpec::Mixture { components } => {
                if components.is_empty() {
                    return Err(config_err("m0 mixture needs at least one component"));
                }
                for c in components {
                    if c.width <= 0.0 || c.weight < 0.0 {
                        return Err(config_err("mixture widths must be positive, weights nonnegative"));
                    }
                }
                GridMeasure::from_fn(grid, |x| {
                    components
                        .iter()
                        .map(|c| c.weight * wrapped_gaussian(x[0], c.center, c.width))
                        .sum()
                })
            }
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML text, apply environment overrides, and validate.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::env::vars())
    }

    pub fn from_toml_with_env(
        text: &str,
        env: impl Iterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| config_err(format!("TOML parse error: {e}")))?;
        for (key, val) in env {
            let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
            apply_override(&mut value, path, &val)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| config_err(format!("schema error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let n = &self.numerics;
        if n.m < 2 || n.s < 4 {
            return Err(config_err("numerics.m must be ≥ 2 and numerics.s ≥ 4"));
        }
        if !(n.tol > 0.0) || !(0.0 < n.theta && n.theta <= 1.0) {
            return Err(config_err("numerics.tol must be > 0 and theta in (0, 1]"));
        }
        if n.k == 0 || n.k > 12 || n.substeps < 4 {
            return Err(config_err("numerics.k must be in 1..=12 and substeps ≥ 4"));
        }
        let m = &self.model;
        if m.sigma <= 0.0 || m.sigma_g <= 0.0 || m.beta < 0.0 || m.eps < 0.0 {
            return Err(config_err("model widths must be positive, eps and beta nonnegative"));
        }
        let e = &self.experiment;
        if !(e.t_end > e.t0) {
            return Err(config_err("experiment.t_end must exceed t0"));
        }
        if e.n_list.iter().any(|&n| n < 2) {
            return Err(config_err("experiment.n_list entries must be ≥ 2"));
        }
        self.hamiltonian_kind()?;
        self.phi()?;
        Ok(())
    }

    fn hamiltonian_kind(&self) -> Result<HamiltonianKind> {
        match self.model.hamiltonian.as_str() {
            "sqrt" => Ok(HamiltonianKind::SqrtLipschitz),
            "truncated-quadratic" => Ok(HamiltonianKind::TruncatedQuadratic {
                r: self.model.param.unwrap_or(1.0),
            }),
            "constant" => Ok(HamiltonianKind::Constant {
                c: self.model.param.unwrap_or(0.0),
            }),
            other => Err(config_err(format!("unknown hamiltonian kind '{other}'"))),
        }
    }

    fn phi(&self) -> Result<Phi> {
        match self.model.phi.as_str() {
            "linear" => Ok(Phi::Linear(self.model.phi_slope)),
            "cubic" => Ok(Phi::Cubic),
            other => Err(config_err(format!("unknown phi kind '{other}'"))),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(1, self.numerics.m)
    }

    pub fn build_model(&self) -> Result<Model> {
        let grid = self.grid()?;
        let kind = self.hamiltonian_kind()?;
        let phi = self.phi()?;
        Ok(Model {
            hamiltonian: Hamiltonian::new(kind, self.model.eps)?,
            running: Coupling::new(grid, self.model.sigma, phi.clone())?,
            terminal: Coupling::new(grid, self.model.sigma_g, phi)?,
        })
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.experiment.t0, self.experiment.t_end, self.numerics.s)
    }

    pub fn picard(&self) -> PicardParams {
        PicardParams {
            theta: self.numerics.theta,
            tol: self.numerics.tol,
            max_sweeps: self.numerics.max_sweeps,
        }
    }

    pub fn m0(&self) -> Result<GridMeasure> {
        self.experiment.m0.build(self.grid()?)
    }

    /// SHA-256 over the canonical JSON form of the effective config (after
    /// environment overrides), so equal effective configs hash equally.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Apply one `BLOCK__KEY=value` override into the raw TOML tree. Env names
/// are upper case; keys are matched case-insensitively.
fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let segments: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(config_err(format!("malformed override key '{path}'")));
    }
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override '{path}' does not address a table")))?;
        node = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| config_err(format!("override '{path}' does not address a table")))?;
    table.insert(segments.last().unwrap().clone(), parse_scalar(raw));
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\n";

    #[test]
    fn defaults_parse_and_build() {
        let cfg = ExperimentConfig::from_toml_with_env(MINIMAL, std::iter::empty()).unwrap();
        assert_eq!(cfg.numerics.m, 64);
        assert_eq!(cfg.numerics.s, 100);
        let model = cfg.build_model().unwrap();
        assert!(model.is_monotone());
        let m0 = cfg.m0().unwrap();
        assert!((m0.total_mass() - 1.0).abs() < 1e-12);
        cfg.time_grid().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "schema_version = 1\n[numerics]\nmm = 32\n";
        let err = ExperimentConfig::from_toml_with_env(text, std::iter::empty());
        assert!(matches!(err, Err(MfgError::Config(_))));
        let text2 = "schema_version = 1\nbogus = true\n";
        assert!(ExperimentConfig::from_toml_with_env(text2, std::iter::empty()).is_err());
    }

    #[test]
    fn schema_version_enforced() {
        let text = "schema_version = 2\n";
        assert!(ExperimentConfig::from_toml_with_env(text, std::iter::empty()).is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let env = vec![
            ("MFG_LAB_NUMERICS__M".to_string(), "32".to_string()),
            ("MFG_LAB_MODEL__SIGMA_G".to_string(), "0.5".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_with_env(MINIMAL, env.into_iter()).unwrap();
        assert_eq!(cfg.numerics.m, 32);
        assert!((cfg.model.sigma_g - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml_with_env(MINIMAL, std::iter::empty()).unwrap();
        let b = ExperimentConfig::from_toml_with_env(MINIMAL, std::iter::empty()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let env = vec![("MFG_LAB_EXPERIMENT__SEED".to_string(), "7".to_string())];
        let c = ExperimentConfig::from_toml_with_env(MINIMAL, env.into_iter()).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn measure_specs_build() {
        let grid = Grid::new(1, 32).unwrap();
        let u = MeasureSpec::Uniform.build(grid).unwrap();
        assert!((u.density()[0] - 1.0).abs() < 1e-12);
        let g = MeasureSpec::WrappedGaussian { center: 0.25, width: 0.1 }
            .build(grid)
            .unwrap();
        assert!((g.total_mass() - 1.0).abs() < 1e-12);
        let peak = (0..32).max_by(|&a, &b| {
            g.density()[a].partial_cmp(&g.density()[b]).unwrap()
        });
        assert_eq!(peak, Some(8));
        let mix = MeasureSpec::Mixture {
            components: vec![
                MixtureComponent { center: 0.2, width: 0.05, weight: 1.0 },
                MixtureComponent { center: 0.7, width: 0.05, weight: 2.0 },
            ],
        }
        .build(grid)
        .unwrap();
        assert!(mix.density()[(0.7f64 * 32.0) as usize] > mix.density()[(0.2f64 * 32.0) as usize]);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "schema_version = 1\n[numerics]\ntol = 0.0\n",
            "schema_version = 1\n[experiment]\nt_end = 0.0\n",
            "schema_version = 1\n[model]\nhamiltonian = \"cubic\"\n",
            "schema_version = 1\n[experiment]\nn_list = [1, 2]\n",
        ] {
            assert!(
                ExperimentConfig::from_toml_with_env(text, std::iter::empty()).is_err(),
                "accepted invalid config: {text}"
            );
        }
    }
}
