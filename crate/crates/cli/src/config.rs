//! Run configurations read from TOML files. Unknown keys are rejected and
//! relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use baryflow::datasets::RotatedTask;
use baryflow::flow_empirical::{EmpiricalFlowConfig, FlowInit};
use baryflow::flow_gmm::GmmFlowConfig;
use baryflow::functionals::FunctionalSpec;
use baryflow::gaussian::EmOptions;
use baryflow::ot::OtSolver;
use baryflow::pipeline::MsdaConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Read and parse a config file.
pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|msg| CliError::config(format!("{}:{msg}", path.display())))
}

/// Parse TOML text; errors read `line: message (in `source line`)`.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    toml::from_str(text).map_err(|e: toml::de::Error| {
        let msg = e.message().trim().to_string();
        match e.span() {
            Some(span) => {
                let line = text[..span.start].matches('\n').count() + 1;
                let source = text.lines().nth(line - 1).unwrap_or("").trim();
                format!("{line}: {msg} (in `{source}`)")
            }
            None => format!(" {msg}"),
        }
    })
}

/// Directory against which relative paths of a config are resolved.
pub fn base_dir(config_path: &Path) -> PathBuf {
    match config_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require_file(base: &Path, p: &Path, what: &str) -> CliResult<()> {
    let full = resolve(base, p);
    if full.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("{what} `{}` does not exist", full.display())))
    }
}

/// Checks a functional spec whose target cloud is supplied later.
fn check_functional(f: &FunctionalSpec, has_target: bool, section: &str) -> CliResult<()> {
    if f.target_weight > 0.0 && !has_target {
        return Err(CliError::config(format!("{section}.functional.target_weight > 0 needs a target")));
    }
    let mut probe = f.clone();
    if !(probe.target_weight.is_finite() && probe.target_weight >= 0.0) {
        return Err(CliError::config(format!("{section}.functional.target_weight must be finite and non-negative")));
    }
    probe.target_weight = 0.0;
    probe.validate().map_err(|e| CliError::config(format!("{section}.functional: {e}")))
}

fn check_empirical(cfg: &EmpiricalFlowConfig, n_inputs: usize, has_target: bool, section: &str) -> CliResult<()> {
    check_functional(&cfg.functional, has_target, section)?;
    let mut probe = cfg.clone();
    probe.functional.target_weight = 0.0;
    probe.validate(n_inputs).map_err(|e| CliError::config(format!("{section}: {e}")))?;
    if cfg.init == FlowInit::Explicit {
        return Err(CliError::config(format!("{section}.init = \"explicit\" is not available from a config file")));
    }
    Ok(())
}

fn check_gmm(cfg: &GmmFlowConfig, n_inputs: usize, has_target: bool, section: &str) -> CliResult<()> {
    check_functional(&cfg.functional, has_target, section)?;
    let mut probe = cfg.clone();
    probe.functional.target_weight = 0.0;
    probe.validate(n_inputs).map_err(|e| CliError::config(format!("{section}: {e}")))
}

/// One input measure of a barycenter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Point cloud from a CSV file, labeled when `label_column` is given.
    Csv { path: PathBuf, label_column: Option<String> },
    /// Gaussian with mean and covariance.
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    /// Mixture document as written by the mixture flow.
    Mixture { path: PathBuf },
    /// Generated Swiss roll; the seed defaults to one derived from the run seed.
    SwissRoll {
        n: usize,
        #[serde(default)]
        noise: f64,
        seed: Option<u64>,
    },
    /// Generated standard Gaussian cloud.
    GaussianCloud { n: usize, d: usize, seed: Option<u64> },
}

impl InputSpec {
    fn check(&self, base: &Path) -> CliResult<()> {
        match self {
            InputSpec::Csv { path, .. } => require_file(base, path, "input"),
            InputSpec::Mixture { path } => require_file(base, path, "input"),
            InputSpec::Gaussian { mean, cov } => {
                if mean.is_empty() || cov.len() != mean.len() || cov.iter().any(|r| r.len() != mean.len()) {
                    return Err(CliError::config("gaussian input needs a d-vector mean and a d x d cov"));
                }
                Ok(())
            }
            InputSpec::SwissRoll { n, .. } | InputSpec::GaussianCloud { n, .. } if *n == 0 => {
                Err(CliError::config("generated inputs need n >= 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    #[default]
    Empirical,
    Gmm,
}

/// Config of `baryflow barycenter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarycenterConfig {
    /// Overrides the seeds of the flow sections.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub flow: FlowKind,
    pub inputs: Vec<InputSpec>,
    /// Unlabeled CSV cloud for the target potential.
    pub target: Option<PathBuf>,
    #[serde(default)]
    pub empirical: EmpiricalFlowConfig,
    #[serde(default)]
    pub gmm: GmmFlowConfig,
    /// EM settings used to fit point-cloud inputs for the mixture flow.
    #[serde(default)]
    pub em: EmOptions,
}

impl BarycenterConfig {
    pub fn validate(&self, base: &Path) -> CliResult<()> {
        if self.inputs.is_empty() {
            return Err(CliError::config("`inputs` must list at least one measure"));
        }
        for input in &self.inputs {
            input.check(base)?;
        }
        if let Some(t) = &self.target {
            require_file(base, t, "target")?;
        }
        let has_target = self.target.is_some();
        let n = self.inputs.len();
        match self.flow {
            FlowKind::Empirical => check_empirical(&self.empirical, n, has_target, "empirical"),
            FlowKind::Gmm => {
                check_gmm(&self.gmm, n, has_target, "gmm")?;
                if self.em.components_per_class == 0 {
                    return Err(CliError::config("em.components_per_class must be at least 1"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyBase {
    SwissRoll,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToySolver {
    /// Mini-batch particle flow.
    Wgf,
    /// Mixture flow on EM fits of the family members.
    WgfGmm,
    /// Full-batch fixed-point iteration.
    FixedPoint,
}

impl ToySolver {
    pub fn name(self) -> &'static str {
        match self {
            ToySolver::Wgf => "wgf",
            ToySolver::WgfGmm => "wgf_gmm",
            ToySolver::FixedPoint => "fixed_point",
        }
    }
}

/// Config of `baryflow toy`: a location-scatter family of a whitened base
/// cloud, whose barycenter is known in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub base: ToyBase,
    /// Samples per family member.
    pub n_samples: usize,
    /// Swiss-roll noise before whitening.
    pub noise: f64,
    /// Samples of the closed-form reference barycenter.
    pub reference_samples: usize,
    pub solvers: Vec<ToySolver>,
    pub empirical: EmpiricalFlowConfig,
    pub gmm: GmmFlowConfig,
    pub em: EmOptions,
    /// Settings of the fixed-point baseline.
    pub fixed_point: EmpiricalFlowConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("toy-out"),
            base: ToyBase::SwissRoll,
            n_samples: 2000,
            noise: 0.5,
            reference_samples: 2000,
            solvers: vec![ToySolver::Wgf, ToySolver::WgfGmm, ToySolver::FixedPoint],
            empirical: EmpiricalFlowConfig {
                n_particles: 1000,
                batch_size: 250,
                n_iter: 60,
                init: FlowInit::Subsample,
                solver: OtSolver::Exact,
                ..Default::default()
            },
            gmm: GmmFlowConfig { n_components: 16, n_iter: 100, ..Default::default() },
            em: EmOptions { components_per_class: 16, ..Default::default() },
            fixed_point: EmpiricalFlowConfig {
                n_particles: 1000,
                n_iter: 5,
                step_size: 1.0,
                init: FlowInit::Subsample,
                solver: OtSolver::Exact,
                ..Default::default()
            },
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.n_samples < 2 || self.reference_samples == 0 {
            return Err(CliError::config("n_samples must be at least 2 and reference_samples at least 1"));
        }
        if self.solvers.is_empty() {
            return Err(CliError::config("`solvers` must name at least one solver"));
        }
        let k = baryflow::datasets::default_family().len();
        check_empirical(&self.empirical, k, false, "empirical")?;
        check_gmm(&self.gmm, k, false, "gmm")?;
        check_empirical(&self.fixed_point, k, false, "fixed_point")?;
        if self.em.components_per_class == 0 {
            return Err(CliError::config("em.components_per_class must be at least 1"));
        }
        Ok(())
    }
}

/// Functional combinations of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combo {
    #[serde(rename = "B")]
    B,
    #[serde(rename = "B+V")]
    BV,
    #[serde(rename = "B+U")]
    BU,
    #[serde(rename = "B+V+U")]
    BVU,
}

impl Combo {
    pub fn name(self) -> &'static str {
        match self {
            Combo::B => "B",
            Combo::BV => "B+V",
            Combo::BU => "B+U",
            Combo::BVU => "B+V+U",
        }
    }

    pub fn uses_potential(self) -> bool {
        matches!(self, Combo::BV | Combo::BVU)
    }

    pub fn uses_interaction(self) -> bool {
        matches!(self, Combo::BU | Combo::BVU)
    }
}

/// Data of an adaptation run: a synthetic task, or source and target CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsdaData {
    pub synthetic: Option<RotatedTask>,
    pub sources: Vec<PathBuf>,
    /// Target CSV; its label column is only used for evaluation.
    pub target: Option<PathBuf>,
    pub label_column: String,
}

impl Default for MsdaData {
    fn default() -> Self {
        Self { synthetic: None, sources: Vec::new(), target: None, label_column: "label".to_string() }
    }
}

/// Config of `baryflow msda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsdaRunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Number of seeds averaged per combination.
    pub n_seeds: usize,
    pub combos: Vec<Combo>,
    /// Weight of the target potential in combinations with V.
    pub potential_weight: f64,
    /// Weight and margin of the class repulsion in combinations with U.
    pub interaction_weight: f64,
    pub interaction_margin: f64,
    pub data: MsdaData,
    pub msda: MsdaConfig,
}

impl Default for MsdaRunConfig {
    fn default() -> Self {
        let mut msda = MsdaConfig::default();
        msda.flow.label_weight = 1.0;
        msda.gmm.label_weight = 1.0;
        Self {
            seed: 0,
            output_dir: PathBuf::from("msda-out"),
            n_seeds: 5,
            combos: vec![Combo::B, Combo::BV, Combo::BU, Combo::BVU],
            potential_weight: 0.1,
            interaction_weight: 0.1,
            interaction_margin: 1.0,
            data: MsdaData::default(),
            msda,
        }
    }
}

impl MsdaRunConfig {
    pub fn validate(&self, base: &Path) -> CliResult<()> {
        if self.n_seeds == 0 {
            return Err(CliError::config("n_seeds must be at least 1"));
        }
        if self.combos.is_empty() {
            return Err(CliError::config("`combos` must name at least one combination"));
        }
        for (name, w) in [
            ("potential_weight", self.potential_weight),
            ("interaction_weight", self.interaction_weight),
            ("interaction_margin", self.interaction_margin),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(CliError::config(format!("{name} must be finite and non-negative")));
            }
        }
        let n_sources = match (&self.data.synthetic, self.data.sources.is_empty()) {
            (Some(task), true) => {
                if self.data.target.is_some() {
                    return Err(CliError::config("data.target cannot be combined with data.synthetic"));
                }
                task.specs().map_err(|e| CliError::config(format!("data.synthetic: {e}")))?;
                task.n_sources
            }
            (Some(_), false) => return Err(CliError::config("data.synthetic cannot be combined with data.sources")),
            (None, true) => return Err(CliError::config("data needs either `synthetic` or `sources` and `target`")),
            (None, false) => {
                let target = self.data.target.as_ref().ok_or_else(|| CliError::config("data.target is missing"))?;
                require_file(base, target, "data.target")?;
                for s in &self.data.sources {
                    require_file(base, s, "data.sources entry")?;
                }
                self.data.sources.len()
            }
        };
        check_empirical(&self.msda.flow, n_sources, true, "msda.flow")?;
        check_gmm(&self.msda.gmm, n_sources, true, "msda.gmm")?;
        if self.msda.gmm_particles == 0 || self.msda.gmm_components_per_class == 0 {
            return Err(CliError::config("msda.gmm_particles and msda.gmm_components_per_class must be at least 1"));
        }
        Ok(())
    }
}

/// What `baryflow gen` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GenDataset {
    SwissRoll {
        n: usize,
        #[serde(default)]
        noise: f64,
    },
    GaussianCloud { n: usize, d: usize },
    /// Whitened base cloud, its default location-scatter family and samples of
    /// the closed-form barycenter.
    Family { base: ToyBase, n: usize, #[serde(default)] noise: f64 },
    /// Labeled source domains and a target domain of the rotated task.
    Msda {
        #[serde(default)]
        task: RotatedTask,
    },
}

/// Config of `baryflow gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: GenDataset,
}

impl GenConfig {
    pub fn validate(&self) -> CliResult<()> {
        match &self.dataset {
            GenDataset::SwissRoll { n, .. } | GenDataset::GaussianCloud { n, .. } | GenDataset::Family { n, .. }
                if *n < 2 =>
            {
                Err(CliError::config("dataset.n must be at least 2"))
            }
            GenDataset::GaussianCloud { d: 0, .. } => Err(CliError::config("dataset.d must be at least 1")),
            GenDataset::Msda { task } => {
                task.specs().map_err(|e| CliError::config(format!("dataset.task: {e}")))?;
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
