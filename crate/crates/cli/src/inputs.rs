//! Loading the input measures named in a config.

use std::path::Path;

use baryflow::datasets::{gaussian_cloud, load_csv, swiss_roll, CsvDataset};
use baryflow::flow_empirical::Sampler;
use baryflow::gaussian::{em_fit, EmOptions, GaussianComponent, LabeledGmm};
use baryflow::measures::{EmpiricalMeasure, LabeledEmpiricalMeasure};
use baryflow::rng::child_seed;
use nalgebra::{DMatrix, DVector};

use crate::config::{resolve, InputSpec};
use crate::error::{CliError, CliResult};

/// Stream offset of the seeds given to generated inputs.
const INPUT_STREAM: u64 = 100;

#[derive(Debug, Clone)]
pub enum Input {
    Cloud(EmpiricalMeasure),
    Labeled(LabeledEmpiricalMeasure),
    Gaussian(GaussianComponent),
    Mixture(LabeledGmm),
}

impl Input {
    pub fn sampler(&self) -> &dyn Sampler {
        match self {
            Input::Cloud(m) => m,
            Input::Labeled(m) => m,
            Input::Gaussian(g) => g,
            Input::Mixture(g) => g,
        }
    }

    /// Mixture form for the mixture flow; point clouds are fitted by EM.
    pub fn to_mixture(&self, em: &EmOptions) -> CliResult<LabeledGmm> {
        Ok(match self {
            Input::Cloud(m) => em_fit(m.points(), None, em)?.gmm,
            Input::Labeled(m) => em_fit(m.points(), Some(&m.hard_labels()), em)?.gmm,
            Input::Gaussian(g) => LabeledGmm::uniform(vec![g.clone()], None)?,
            Input::Mixture(g) => g.clone(),
        })
    }

    pub fn is_labeled(&self) -> bool {
        self.sampler().n_classes().is_some()
    }
}

pub fn read_dataset(base: &Path, path: &Path, label_column: Option<&str>) -> CliResult<CsvDataset> {
    let full = resolve(base, path);
    if !full.is_file() {
        return Err(CliError::io(&full, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(load_csv(&full, label_column)?)
}

pub fn load_inputs(specs: &[InputSpec], base: &Path, seed: u64) -> CliResult<Vec<Input>> {
    specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let derived = child_seed(seed, INPUT_STREAM + k as u64);
            Ok(match spec {
                InputSpec::Csv { path, label_column } => {
                    let data = read_dataset(base, path, label_column.as_deref())?;
                    match label_column {
                        Some(_) => Input::Labeled(data.labeled()?),
                        None => Input::Cloud(data.measure),
                    }
                }
                InputSpec::Gaussian { mean, cov } => {
                    let d = mean.len();
                    let cov = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                    Input::Gaussian(GaussianComponent::from_covariance(DVector::from_vec(mean.clone()), cov)?)
                }
                InputSpec::Mixture { path } => {
                    let full = resolve(base, path);
                    let text = std::fs::read_to_string(&full).map_err(|e| CliError::io(&full, e))?;
                    Input::Mixture(LabeledGmm::from_json(&text)?)
                }
                InputSpec::SwissRoll { n, noise, seed } => {
                    Input::Labeled(swiss_roll(*n, *noise, seed.unwrap_or(derived))?)
                }
                InputSpec::GaussianCloud { n, d, seed } => {
                    Input::Cloud(gaussian_cloud(*n, *d, seed.unwrap_or(derived))?.base().clone())
                }
            })
        })
        .collect()
}
