//! Toy generators, synthetic multi-domain classification tasks and CSV I/O.
//!
//! CSV files have a header row, feature columns and an optional categorical
//! label column. Files written by [`save_csv`] name the features
//! `f0..f{d-1}`, store labels as integer ids in a final `label` column and
//! format every float as `{:.16e}`, which round-trips exactly.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_gmm::fixed_point_gaussian_barycenter;
use crate::gaussian::GaussianComponent;
use crate::measures::{BarycentricCoordinates, EmpiricalMeasure, LabeledEmpiricalMeasure};
use crate::rng::{child_seed, seeded};

/// Default number of label bins of the Swiss roll.
pub const SWISS_ROLL_CLASSES: usize = 4;

/// `x -> A x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AffineMapDocument", into = "AffineMapDocument")]
pub struct AffineMap {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

/// Serialized form: `a` as rows, `b` as a list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineMapDocument {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl TryFrom<AffineMapDocument> for AffineMap {
    type Error = Error;

    fn try_from(doc: AffineMapDocument) -> Result<Self> {
        let d = doc.b.len();
        if doc.a.len() != d || doc.a.iter().any(|r| r.len() != d) {
            return Err(Error::dims(format!("affine map needs a {d}x{d} matrix for a shift of length {d}")));
        }
        AffineMap::new(DMatrix::from_fn(d, d, |i, j| doc.a[i][j]), DVector::from_vec(doc.b))
    }
}

impl From<AffineMap> for AffineMapDocument {
    fn from(m: AffineMap) -> Self {
        let d = m.dim();
        AffineMapDocument { a: (0..d).map(|i| m.a.row(i).iter().copied().collect()).collect(), b: m.b.iter().copied().collect() }
    }
}

impl AffineMap {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::dims(format!("affine map with matrix {:?} and shift of length {}", a.shape(), b.len())));
        }
        if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::validation("affine map has non-finite entries"));
        }
        Ok(Self { a, b })
    }

    pub fn identity(d: usize) -> Self {
        Self { a: DMatrix::identity(d, d), b: DVector::zeros(d) }
    }

    /// Rotation by `angle` radians in the plane, then shift.
    pub fn rotation(angle: f64, shift: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        Self { a: DMatrix::from_row_slice(2, 2, &[c, -s, s, c]), b: DVector::from_row_slice(&shift) }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Map every row of `points`.
    pub fn apply(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if points.ncols() != self.dim() {
            return Err(Error::dims(format!("points of dim {} for a map of dim {}", points.ncols(), self.dim())));
        }
        let mut out = points * self.a.transpose();
        for mut row in out.row_iter_mut() {
            row += self.b.transpose();
        }
        Ok(out)
    }

    /// True when `A` is symmetric positive definite.
    pub fn is_symmetric_pd(&self) -> bool {
        let scale = self.a.amax().max(1.0);
        (&self.a - self.a.transpose()).amax() <= 1e-12 * scale && self.a.clone().cholesky().is_some()
    }
}

/// Noisy two-dimensional spiral `(t cos t, t sin t)` with `t` uniform on
/// `[1.5 pi, 4.5 pi]`, labeled by [`SWISS_ROLL_CLASSES`] quantile bins of `t`.
pub fn swiss_roll(n: usize, noise_std: f64, seed: u64) -> Result<LabeledEmpiricalMeasure> {
    swiss_roll_with_classes(n, noise_std, SWISS_ROLL_CLASSES, seed)
}

pub fn swiss_roll_with_classes(n: usize, noise_std: f64, n_classes: usize, seed: u64) -> Result<LabeledEmpiricalMeasure> {
    if n == 0 || n_classes == 0 {
        return Err(Error::validation("swiss roll needs n >= 1 and at least one class"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::validation(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let mut rng = seeded(seed);
    let pi = std::f64::consts::PI;
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(1.5 * pi..=4.5 * pi)).collect();
    let points = DMatrix::from_fn(n, 2, |i, j| if j == 0 { t[i] * t[i].cos() } else { t[i] * t[i].sin() });
    let noise = DMatrix::from_fn(n, 2, |_, _| noise_std * rng.sample::<f64, _>(StandardNormal));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * n_classes / n;
    }
    LabeledEmpiricalMeasure::from_hard_labels(EmpiricalMeasure::uniform(points + noise)?, &labels, n_classes)
}

/// Standard Gaussian cloud in `d` dimensions, labeled by the sign pattern
/// of the first coordinate.
pub fn gaussian_cloud(n: usize, d: usize, seed: u64) -> Result<LabeledEmpiricalMeasure> {
    if n == 0 || d == 0 {
        return Err(Error::validation("gaussian cloud needs n >= 1 and d >= 1"));
    }
    let mut rng = seeded(seed);
    let points = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let labels: Vec<usize> = (0..n).map(|i| usize::from(points[(i, 0)] > 0.0)).collect();
    LabeledEmpiricalMeasure::from_hard_labels(EmpiricalMeasure::uniform(points)?, &labels, 2)
}

/// Affinely transform a measure to zero weighted mean and identity weighted
/// covariance.
pub fn whiten(q: &LabeledEmpiricalMeasure) -> Result<LabeledEmpiricalMeasure> {
    let (x, w) = (q.points(), q.weights());
    let d = q.dim();
    let mean = x.transpose() * w;
    let centered = DMatrix::from_fn(x.nrows(), d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * DMatrix::from_diagonal(w) * &centered;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra("covariance of the measure to whiten is singular".into()))?;
    let l = chol.l();
    let white = l
        .solve_lower_triangular(&centered.transpose())
        .ok_or_else(|| Error::LinearAlgebra("covariance of the measure to whiten is singular".into()))?
        .transpose();
    LabeledEmpiricalMeasure::new(EmpiricalMeasure::new(white, w.clone())?, q.label_logits().clone())
}

/// Push `q0` through each map; labels are carried over unchanged.
pub fn location_scatter_family(q0: &LabeledEmpiricalMeasure, maps: &[AffineMap]) -> Result<Vec<LabeledEmpiricalMeasure>> {
    maps.iter()
        .map(|m| {
            let points = m.apply(q0.points())?;
            LabeledEmpiricalMeasure::new(EmpiricalMeasure::new(points, q0.weights().clone())?, q0.label_logits().clone())
        })
        .collect()
}

/// Default planar family: `A_k = R(theta_k) diag(s_k) R(theta_k)^T` with
/// `theta_k` in {0, 45, 90, 135} degrees and scalings in [0.8, 1.3], shifted
/// by unit vectors along the axes.
pub fn default_family() -> Vec<AffineMap> {
    const SCALES: [[f64; 2]; 4] = [[1.3, 0.8], [0.8, 1.2], [1.2, 0.9], [0.9, 1.3]];
    const SHIFTS: [[f64; 2]; 4] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
    (0..4)
        .map(|k| {
            let r = AffineMap::rotation(k as f64 * std::f64::consts::FRAC_PI_4, [0.0, 0.0]);
            let s = DMatrix::from_diagonal(&DVector::from_row_slice(&SCALES[k]));
            let a = r.a() * s * r.a().transpose();
            AffineMap { a: (&a + a.transpose()) * 0.5, b: DVector::from_row_slice(&SHIFTS[k]) }
        })
        .collect()
}

/// Map sending a whitened generator onto the barycenter of its
/// location-scatter family: `x -> S^{1/2} x + sum_k lambda_k b_k`, with `S`
/// the Gaussian barycenter of the covariances `A_k A_k^T`.
pub fn family_barycenter_map(maps: &[AffineMap], lambda: &BarycentricCoordinates) -> Result<AffineMap> {
    if maps.is_empty() {
        return Err(Error::validation("empty family"));
    }
    let d = maps[0].dim();
    let gaussians = maps
        .iter()
        .map(|m| GaussianComponent::from_covariance(m.b.clone(), &m.a * m.a.transpose()))
        .collect::<Result<Vec<_>>>()?;
    let bar = fixed_point_gaussian_barycenter(&gaussians, lambda, 1e-12, 1000)?;
    let root = crate::gaussian::matrix_sqrt_psd(&bar.gaussian.covariance())?;
    if root.nrows() != d {
        return Err(Error::dims("family maps of different dimensions"));
    }
    AffineMap::new(root, bar.gaussian.mean().clone())
}

/// One domain of a synthetic classification task: class-conditional
/// Gaussians followed by an affine shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// One row per class.
    pub class_means: Vec<Vec<f64>>,
    /// Lower-triangular Cholesky factor per class, as rows.
    pub class_chols: Vec<Vec<Vec<f64>>>,
    pub shift: AffineMap,
    pub n_samples: usize,
    /// Class probabilities; uniform when absent.
    #[serde(default)]
    pub class_priors: Option<Vec<f64>>,
}

impl DomainSpec {
    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, |m| m.len())
    }

    fn components(&self) -> Result<Vec<GaussianComponent>> {
        let c = self.n_classes();
        let d = self.dim();
        if c == 0 || d == 0 {
            return Err(Error::validation("domain needs at least one class and one feature"));
        }
        if self.class_chols.len() != c {
            return Err(Error::dims(format!("{} Cholesky factors for {c} classes", self.class_chols.len())));
        }
        if self.n_samples < c {
            return Err(Error::validation(format!("{} samples for {c} classes", self.n_samples)));
        }
        if self.shift.dim() != d {
            return Err(Error::dims(format!("shift of dim {} for features of dim {d}", self.shift.dim())));
        }
        self.class_means
            .iter()
            .zip(&self.class_chols)
            .map(|(m, l)| {
                if m.len() != d || l.len() != d || l.iter().any(|r| r.len() != d) {
                    return Err(Error::dims(format!("class parameters must be of dim {d}")));
                }
                GaussianComponent::new(DVector::from_row_slice(m), DMatrix::from_fn(d, d, |i, j| l[i][j]))
            })
            .collect()
    }

    fn priors(&self) -> Result<Vec<f64>> {
        let c = self.n_classes();
        match &self.class_priors {
            None => Ok(vec![1.0 / c as f64; c]),
            Some(p) => {
                if p.len() != c || !crate::measures::validate_simplex(p, 1e-9)? {
                    return Err(Error::validation("class_priors must be a probability vector with one entry per class"));
                }
                Ok(p.clone())
            }
        }
    }

    /// Draw the domain: features and integer class labels.
    pub fn sample(&self, seed: u64) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let comps = self.components()?;
        let priors = self.priors()?;
        let d = self.dim();
        let mut rng = seeded(seed);
        let mut points = DMatrix::zeros(self.n_samples, d);
        let mut labels = Vec::with_capacity(self.n_samples);
        for i in 0..self.n_samples {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut class = priors.len() - 1;
            for (k, p) in priors.iter().enumerate() {
                acc += p;
                if u < acc {
                    class = k;
                    break;
                }
            }
            let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = comps[class].chol() * eps + comps[class].mean();
            points.row_mut(i).copy_from(&z.transpose());
            labels.push(class);
        }
        Ok((self.shift.apply(&points)?, labels))
    }
}

/// Target labels, kept apart from the target features so that adaptation
/// code cannot read them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationLabels(Vec<usize>);

impl EvaluationLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fraction of `predicted` equal to the held-out labels.
    pub fn accuracy(&self, predicted: &[usize]) -> Result<f64> {
        if predicted.len() != self.0.len() || self.0.is_empty() {
            return Err(Error::dims(format!("{} predictions for {} labels", predicted.len(), self.0.len())));
        }
        let hits = predicted.iter().zip(&self.0).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / self.0.len() as f64)
    }

    /// The labels themselves, for export.
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Unlabeled target features with their held-out labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomain {
    pub features: EmpiricalMeasure,
    pub labels: EvaluationLabels,
}

#[derive(Debug, Clone)]
pub struct MsdaData {
    pub sources: Vec<LabeledEmpiricalMeasure>,
    pub target: TargetDomain,
}

/// Sample `K` labeled source domains and one target from `K + 1` specs; the
/// last spec is the target.
pub fn synthetic_msda(specs: &[DomainSpec], seed: u64) -> Result<MsdaData> {
    if specs.len() < 2 {
        return Err(Error::validation("need at least one source and one target domain"));
    }
    let (c, d) = (specs[0].n_classes(), specs[0].dim());
    if specs.iter().any(|s| s.n_classes() != c || s.dim() != d) {
        return Err(Error::dims("domains must share classes and feature dimension"));
    }
    let mut drawn = specs
        .iter()
        .enumerate()
        .map(|(k, s)| s.sample(child_seed(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let (tx, ty) = drawn.pop().expect("at least two domains");
    let sources = drawn
        .into_iter()
        .map(|(x, y)| LabeledEmpiricalMeasure::from_hard_labels(EmpiricalMeasure::uniform(x)?, &y, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(MsdaData {
        sources,
        target: TargetDomain { features: EmpiricalMeasure::uniform(tx)?, labels: EvaluationLabels::new(ty) },
    })
}

/// Planar task with classes spread along a line: sources are mildly rotated
/// copies, the target is rotated by `target_angle_deg` about the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotatedTask {
    pub n_sources: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    /// Distance between consecutive class means.
    pub spacing: f64,
    pub class_std: f64,
    /// Largest source rotation; sources spread evenly over +- this angle.
    pub source_angle_deg: f64,
    pub target_angle_deg: f64,
}

impl Default for RotatedTask {
    fn default() -> Self {
        Self {
            n_sources: 3,
            n_classes: 3,
            n_samples: 300,
            spacing: 4.0,
            class_std: 0.5,
            source_angle_deg: 10.0,
            target_angle_deg: 60.0,
        }
    }
}

impl RotatedTask {
    pub fn specs(&self) -> Result<Vec<DomainSpec>> {
        if self.n_sources == 0 || self.n_classes == 0 {
            return Err(Error::validation("rotated task needs at least one source and one class"));
        }
        if !(self.class_std > 0.0 && self.spacing > 0.0) {
            return Err(Error::validation("class_std and spacing must be positive"));
        }
        let means: Vec<Vec<f64>> = (0..self.n_classes).map(|c| vec![self.spacing * (c + 1) as f64, 0.0]).collect();
        let chol = vec![vec![self.class_std, 0.0], vec![0.0, self.class_std]];
        let domain = |deg: f64| DomainSpec {
            class_means: means.clone(),
            class_chols: vec![chol.clone(); self.n_classes],
            shift: AffineMap::rotation(deg.to_radians(), [0.0, 0.0]),
            n_samples: self.n_samples,
            class_priors: None,
        };
        let mut specs: Vec<DomainSpec> = (0..self.n_sources)
            .map(|k| {
                let frac = if self.n_sources == 1 { 0.0 } else { 2.0 * k as f64 / (self.n_sources - 1) as f64 - 1.0 };
                domain(frac * self.source_angle_deg)
            })
            .collect();
        specs.push(domain(self.target_angle_deg));
        Ok(specs)
    }
}

/// Contents of a feature CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub measure: EmpiricalMeasure,
    pub feature_names: Vec<String>,
    /// Contiguous label ids, when a label column was requested.
    pub labels: Option<Vec<usize>>,
    /// Original label value of each id.
    pub label_names: Vec<String>,
}

impl CsvDataset {
    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Labeled measure; errors when the file had no label column.
    pub fn labeled(&self) -> Result<LabeledEmpiricalMeasure> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::validation("dataset has no labels"))?;
        LabeledEmpiricalMeasure::from_hard_labels(self.measure.clone(), labels, self.n_classes())
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match (line, e.kind()) {
        (Some(l), _) => Error::Parse(format!("line {l}: {e}")),
        (None, csv::ErrorKind::Io(_)) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        },
        _ => Error::Parse(e.to_string()),
    }
}

/// Read a CSV with a header row. With `label_column`, that column holds
/// categorical labels and every other column is a feature.
pub fn read_csv<R: Read>(reader: R, label_column: Option<&str>) -> Result<CsvDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(|s| s.trim().to_string()).collect();
    let label_idx = match label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("label column \"{name}\" not found in header")))?,
        ),
        None => None,
    };
    let feature_idx: Vec<usize> = (0..header.len()).filter(|&j| Some(j) != label_idx).collect();
    if feature_idx.is_empty() {
        return Err(Error::Parse("no feature columns".into()));
    }
    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        for &j in &feature_idx {
            let field = record[j].trim();
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("line {line}: column \"{}\": \"{field}\" is not a number", header[j])))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("line {line}: column \"{}\": non-finite value", header[j])));
            }
            values.push(v);
        }
        if let Some(j) = label_idx {
            raw_labels.push(record[j].trim().to_string());
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse("empty measure".into()));
    }
    let points = DMatrix::from_row_slice(rows, feature_idx.len(), &values);
    let (labels, label_names) = match label_idx {
        Some(_) => {
            let names = label_order(&raw_labels);
            let ids = raw_labels.iter().map(|l| names.iter().position(|n| n == l).expect("collected")).collect();
            (Some(ids), names)
        }
        None => (None, Vec::new()),
    };
    Ok(CsvDataset {
        measure: EmpiricalMeasure::uniform(points)?,
        feature_names: feature_idx.iter().map(|&j| header[j].clone()).collect(),
        labels,
        label_names,
    })
}

/// Distinct labels in numeric order when all are integers, else lexicographic.
fn label_order(raw: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = raw.iter().collect();
    let mut names: Vec<String> = distinct.into_iter().cloned().collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().expect("checked"));
    }
    names
}

pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<CsvDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    read_csv(file, label_column).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Write points (and integer labels) with header `f0,...,f{d-1}[,label]`.
pub fn write_csv<W: Write>(writer: W, points: &DMatrix<f64>, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != points.nrows() {
            return Err(Error::dims(format!("{} labels for {} points", l.len(), points.nrows())));
        }
    }
    let mut w = BufWriter::new(writer);
    let mut header: Vec<String> = (0..points.ncols()).map(|j| format!("f{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..points.nrows() {
        let mut fields: Vec<String> = points.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        if let Some(l) = labels {
            fields.push(l[i].to_string());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, points: &DMatrix<f64>, labels: Option<&[usize]>) -> Result<()> {
    write_csv(File::create(path)?, points, labels)
}
