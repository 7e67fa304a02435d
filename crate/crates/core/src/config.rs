//! JSON problem configurations and the bundled presets.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::applications::{build_systemic, build_trading, SystemicParams, TradingParams};
use crate::error::{Error, Result};
use crate::graphon::{block_index, load_kernel_csv, Graphon};
use crate::kernel::{LabelGrid, MatrixField, MatrixKernel, ScalarField, VectorField};
use crate::model::{validate, Coefficients, ProblemSpec, TimeGrid};
use crate::riccati::{Scheme, SolverOptions};

pub const PRESETS: [(&str, &str); 4] = [
    (
        "trading-homog",
        include_str!("../../../configs/trading-homog.json"),
    ),
    (
        "trading-step",
        include_str!("../../../configs/trading-step.json"),
    ),
    (
        "systemic-homog",
        include_str!("../../../configs/systemic-homog.json"),
    ),
    (
        "systemic-sbm",
        include_str!("../../../configs/systemic-sbm.json"),
    ),
];

/// Per-label scalar: a constant, explicit values, or a step profile over
/// equal (or `cuts`-delimited) label blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarProfile {
    Constant(f64),
    Values(Vec<f64>),
    Step {
        step: Vec<f64>,
        #[serde(default)]
        cuts: Option<Vec<f64>>,
    },
}

impl ScalarProfile {
    pub fn to_field(&self, grid: LabelGrid) -> Result<ScalarField> {
        match self {
            ScalarProfile::Constant(v) => Ok(ScalarField::constant(grid, *v)),
            ScalarProfile::Values(v) => ScalarField::new(grid, v.clone()),
            ScalarProfile::Step { step, cuts } => {
                if step.is_empty() || cuts.as_ref().is_some_and(|c| c.len() + 1 != step.len()) {
                    return Err(Error::Config(
                        "step profile needs one more value than cuts".into(),
                    ));
                }
                Ok(ScalarField::from_fn(grid, |_, u| {
                    step[block_index(u, step.len(), cuts.as_deref())]
                }))
            }
        }
    }
}

/// Vector per label: one vector for every label or one per label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorProfile {
    Constant(Vec<f64>),
    PerLabel(Vec<Vec<f64>>),
}

impl VectorProfile {
    fn to_field(&self, grid: LabelGrid, dim: usize, name: &str) -> Result<VectorField> {
        let check = |v: &Vec<f64>| -> Result<DVector<f64>> {
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "{name}: expected length {dim}, got {}",
                    v.len()
                )));
            }
            Ok(DVector::from_column_slice(v))
        };
        match self {
            VectorProfile::Constant(v) => Ok(VectorField::constant(grid, check(v)?)),
            VectorProfile::PerLabel(vs) => {
                VectorField::new(grid, vs.iter().map(check).collect::<Result<_>>()?)
            }
        }
    }
}

/// Matrix per label (row-major nested arrays).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixProfile {
    Constant(Vec<Vec<f64>>),
    PerLabel(Vec<Vec<Vec<f64>>>),
}

fn to_matrix(rows: &[Vec<f64>], shape: (usize, usize), name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Config(format!(
            "{name}: expected a {}x{} matrix",
            shape.0, shape.1
        )));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

impl MatrixProfile {
    fn to_field(&self, grid: LabelGrid, shape: (usize, usize), name: &str) -> Result<MatrixField> {
        match self {
            MatrixProfile::Constant(m) => {
                Ok(MatrixField::constant(grid, to_matrix(m, shape, name)?))
            }
            MatrixProfile::PerLabel(ms) => MatrixField::new(
                grid,
                ms.iter()
                    .map(|m| to_matrix(m, shape, name))
                    .collect::<Result<_>>()?,
            ),
        }
    }
}

/// Interaction kernel: a tabulated CSV file or an analytic graphon times a
/// constant block (identity when omitted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelConfig {
    Table {
        csv: PathBuf,
    },
    Analytic {
        #[serde(flatten)]
        graphon: Graphon,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        block: Option<Vec<Vec<f64>>>,
    },
}

impl KernelConfig {
    pub fn unit() -> Self {
        KernelConfig::Analytic {
            graphon: Graphon::Constant { value: 1.0 },
            block: None,
        }
    }

    fn to_kernel(
        &self,
        grid: LabelGrid,
        d: usize,
        base: &Path,
        name: &str,
    ) -> Result<MatrixKernel> {
        match self {
            KernelConfig::Table { csv } => load_kernel_csv(&base.join(csv), grid, d, d),
            KernelConfig::Analytic { graphon, block } => {
                let block = match block {
                    Some(b) => to_matrix(b, (d, d), name)?,
                    None => DMatrix::identity(d, d),
                };
                graphon.to_kernel(grid, &block)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
}

impl TimeConfig {
    pub fn to_grid(&self) -> Result<TimeGrid> {
        match (self.dt, self.n_steps) {
            (Some(dt), None) => TimeGrid::with_step(self.t0, self.t_end, dt),
            (None, Some(n)) => TimeGrid::new(self.t0, self.t_end, n),
            _ => Err(Error::Config(
                "time section needs exactly one of dt, n_steps".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradingConfig {
    pub p: ScalarProfile,
    pub lambda: ScalarProfile,
    #[serde(default = "KernelConfig::unit")]
    pub g_lambda: KernelConfig,
    pub sigma: ScalarProfile,
    pub sigma0: ScalarProfile,
    #[serde(default = "zero_profile")]
    pub xi_mean: ScalarProfile,
    #[serde(default = "zero_profile")]
    pub xi_var: ScalarProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemicConfig {
    pub kappa: f64,
    #[serde(default = "KernelConfig::unit")]
    pub g_kappa: KernelConfig,
    #[serde(default = "KernelConfig::unit")]
    pub g_eta: KernelConfig,
    #[serde(default = "KernelConfig::unit")]
    pub g_r: KernelConfig,
    pub eta: ScalarProfile,
    pub r: ScalarProfile,
    pub sigma: ScalarProfile,
    pub rho: ScalarProfile,
    #[serde(default = "zero_profile")]
    pub xi_mean: ScalarProfile,
    #[serde(default = "zero_profile")]
    pub xi_var: ScalarProfile,
}

fn zero_profile() -> ScalarProfile {
    ScalarProfile::Constant(0.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub a: Option<MatrixProfile>,
    pub b: Option<MatrixProfile>,
    pub beta: Option<VectorProfile>,
    pub g_a: Option<KernelConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub c: Option<MatrixProfile>,
    pub d: Option<MatrixProfile>,
    pub gamma: Option<VectorProfile>,
    pub g_c: Option<KernelConfig>,
    pub theta: Option<VectorProfile>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Option<MatrixProfile>,
    pub g_q: Option<KernelConfig>,
    pub r: Option<MatrixProfile>,
    pub i_off: Option<VectorProfile>,
    pub coercivity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    pub h: Option<MatrixProfile>,
    pub g_h: Option<KernelConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mean: Option<VectorProfile>,
    pub cov: Option<MatrixProfile>,
}

/// Time-constant general model; omitted coefficients are zero (`R = I`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralConfig {
    pub state_dim: usize,
    pub control_dim: usize,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub initial: InitialConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ModelConfig {
    Trading(TradingConfig),
    Systemic(SystemicConfig),
    General(GeneralConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_cap")]
    pub blow_up_cap: f64,
}

fn default_cap() -> f64 {
    1e6
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            blow_up_cap: default_cap(),
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            scheme: self.scheme,
            blow_up_cap: self.blow_up_cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_n_common")]
    pub n_common: usize,
    #[serde(default = "default_n_idio")]
    pub n_idio: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Perturbation direction per label; every control component gets the value.
    #[serde(default = "unit_profile")]
    pub delta: ScalarProfile,
}

fn default_n_common() -> usize {
    200
}

fn default_n_idio() -> usize {
    10
}

fn default_eps() -> f64 {
    0.1
}

fn unit_profile() -> ScalarProfile {
    ScalarProfile::Constant(1.0)
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_common: default_n_common(),
            n_idio: default_n_idio(),
            seed: 0,
            eps: default_eps(),
            delta: unit_profile(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_common == 0 || self.n_idio == 0 {
            return Err(Error::Config("n_common and n_idio must be positive".into()));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::Config("eps must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Perturbation field for a control of dimension `m`.
    pub fn delta_field(&self, grid: LabelGrid, m: usize) -> Result<VectorField> {
        Ok(self
            .delta
            .to_field(grid)?
            .map(|&v| DVector::from_element(m, v)))
    }
}

/// A complete run description: model, grids, solver and simulation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub labels: usize,
    pub time: TimeConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    /// Directory used to resolve relative table paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "unknown preset '{name}' (available: {})",
                names.join(", ")
            ))
        })?;
        Self::from_json(text)
    }

    /// Replaces the time step (and drops any step count).
    pub fn set_dt(&mut self, dt: f64) {
        self.time.dt = Some(dt);
        self.time.n_steps = None;
    }

    /// SHA-256 of the canonical JSON rendering, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn grid(&self) -> Result<LabelGrid> {
        LabelGrid::new(self.labels)
    }

    pub fn build(&self) -> Result<ProblemSpec> {
        let grid = self.grid()?;
        let tgrid = self.time.to_grid()?;
        let base = self.base_dir.as_path();
        match &self.model {
            ModelConfig::Trading(t) => build_trading(&TradingParams {
                tgrid,
                p: t.p.to_field(grid)?,
                lambda: t.lambda.to_field(grid)?,
                g_lambda: t.g_lambda.to_kernel(grid, 1, base, "g_lambda")?,
                sigma: vec![t.sigma.to_field(grid)?],
                sigma0: vec![t.sigma0.to_field(grid)?],
                xi_mean: t.xi_mean.to_field(grid)?,
                xi_var: t.xi_var.to_field(grid)?,
            }),
            ModelConfig::Systemic(s) => build_systemic(&SystemicParams {
                tgrid,
                kappa: s.kappa,
                g_kappa: s.g_kappa.to_kernel(grid, 1, base, "g_kappa")?,
                g_eta: s.g_eta.to_kernel(grid, 1, base, "g_eta")?,
                g_r: s.g_r.to_kernel(grid, 1, base, "g_r")?,
                eta: s.eta.to_field(grid)?,
                r: s.r.to_field(grid)?,
                sigma: vec![s.sigma.to_field(grid)?],
                rho: vec![s.rho.to_field(grid)?],
                xi_mean: s.xi_mean.to_field(grid)?,
                xi_var: s.xi_var.to_field(grid)?,
            }),
            ModelConfig::General(g) => build_general(g, grid, tgrid, base),
        }
    }
}

fn build_general(
    g: &GeneralConfig,
    grid: LabelGrid,
    tgrid: TimeGrid,
    base: &Path,
) -> Result<ProblemSpec> {
    let (d, m) = (g.state_dim, g.control_dim);
    if d == 0 || m == 0 {
        return Err(Error::Config(
            "state_dim and control_dim must be positive".into(),
        ));
    }
    let mut c = Coefficients::zeros(grid, d, m);
    let mat =
        |p: &Option<MatrixProfile>, shape, name: &str, slot: &mut MatrixField| -> Result<()> {
            if let Some(p) = p {
                *slot = p.to_field(grid, shape, name)?;
            }
            Ok(())
        };
    let vec = |p: &Option<VectorProfile>, dim, name: &str, slot: &mut VectorField| -> Result<()> {
        if let Some(p) = p {
            *slot = p.to_field(grid, dim, name)?;
        }
        Ok(())
    };
    let ker = |p: &Option<KernelConfig>, name: &str, slot: &mut MatrixKernel| -> Result<()> {
        if let Some(p) = p {
            *slot = p.to_kernel(grid, d, base, name)?;
        }
        Ok(())
    };
    mat(&g.drift.a, (d, d), "a", &mut c.a)?;
    mat(&g.drift.b, (d, m), "b", &mut c.b)?;
    vec(&g.drift.beta, d, "beta", &mut c.beta)?;
    ker(&g.drift.g_a, "g_a", &mut c.g_a)?;
    mat(&g.diffusion.c, (d, d), "c", &mut c.c)?;
    mat(&g.diffusion.d, (d, m), "d", &mut c.d)?;
    vec(&g.diffusion.gamma, d, "gamma", &mut c.gamma)?;
    ker(&g.diffusion.g_c, "g_c", &mut c.g_c)?;
    vec(&g.diffusion.theta, d, "theta", &mut c.theta)?;
    mat(&g.cost.q, (d, d), "q", &mut c.q)?;
    ker(&g.cost.g_q, "g_q", &mut c.g_q)?;
    mat(&g.cost.r, (m, m), "r", &mut c.r)?;
    vec(&g.cost.i_off, m, "i_off", &mut c.i_off)?;
    let mut spec = ProblemSpec::new(tgrid, c);
    spec.coercivity = g.cost.coercivity;
    mat(&g.terminal.h, (d, d), "h", &mut spec.h)?;
    ker(&g.terminal.g_h, "g_h", &mut spec.g_h)?;
    vec(&g.initial.mean, d, "mean", &mut spec.xi_mean)?;
    mat(&g.initial.cov, (d, d), "cov", &mut spec.xi_cov)?;
    validate(&spec)?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build() {
        for (name, _) in PRESETS {
            let cfg = ProblemConfig::preset(name).unwrap();
            let spec = cfg.build().unwrap();
            assert_eq!(spec.grid.len(), cfg.labels, "{name}");
        }
        assert!(ProblemConfig::preset("nope").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ProblemConfig::preset("systemic-homog").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.simulation.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn step_profile() {
        let grid = LabelGrid::new(4).unwrap();
        let p: ScalarProfile = serde_json::from_str(r#"{"step":[1.0,3.0]}"#).unwrap();
        let f = p.to_field(grid).unwrap();
        assert_eq!(f.values(), &[1.0, 1.0, 3.0, 3.0]);
        let bad: ScalarProfile =
            serde_json::from_str(r#"{"step":[1.0,3.0],"cuts":[0.2,0.4]}"#).unwrap();
        assert!(bad.to_field(grid).is_err());
    }

    #[test]
    fn general_model_defaults_and_coercivity() {
        let text = r#"{
            "labels": 4,
            "time": {"t_end": 1.0, "n_steps": 10},
            "model": {"kind": "general", "state_dim": 2, "control_dim": 1,
                      "drift": {"b": [[1.0],[0.0]], "g_a": {"kind":"min", "block": [[0.1,0],[0,0.1]]}},
                      "cost": {"q": [[1,0],[0,1]]}}
        }"#;
        let spec = ProblemConfig::from_json(text).unwrap().build().unwrap();
        assert_eq!(spec.state_dim, 2);
        assert_eq!(spec.coefficients[0].r[0][(0, 0)], 1.0);
        let bad = text.replace(r#""cost": {"q""#, r#""cost": {"r": [[0.0]], "q""#);
        let err = ProblemConfig::from_json(&bad).unwrap().build().unwrap_err();
        assert!(err.to_string().contains("coercivity violated"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"labels": 4, "time": {"t_end": 1.0, "n_steps": 10, "bogus": 1},
                       "model": {"kind": "general", "state_dim": 1, "control_dim": 1}}"#;
        assert!(ProblemConfig::from_json(text).is_err());
    }
}
