//! CSV ingestion, standardization and JSON documents for parameters,
//! simulation truth and fit results.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, ModelError};
use crate::fplab::TrajectoryRecord;
use crate::gem::FitReport;
use crate::model::{ComponentScale, Dataset, MixtureParams, ModelName, ModelSpec, ScaleDecomposition, Sharing};
use crate::sampler::{ComponentFamily, ScenarioData};

pub const FIT_FORMAT: &str = "epem-fit";
pub const ERROR_FORMAT: &str = "epem-error";
pub const TRUTH_FORMAT: &str = "epem-truth";
pub const FORMAT_VERSION: u32 = 1;
pub const BIC_CONVENTION: &str = "2 loglik - m ln N (larger is better)";

/// Whether the first CSV record is a header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeaderMode {
    /// A header is assumed when any cell of the first record is not numeric.
    #[default]
    Auto,
    Yes,
    No,
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parse comma-separated numeric data; rows and columns in errors are
/// 1-based and count the header line.
pub fn parse_csv<R: Read>(reader: R, header: HeaderMode) -> Result<Dataset, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = idx + 1;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        if idx == 0 {
            let skip = match header {
                HeaderMode::Yes => true,
                HeaderMode::No => false,
                HeaderMode::Auto => record.iter().any(|c| parse_cell(c).is_none()),
            };
            if skip {
                width = Some(record.len());
                continue;
            }
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(IoError::Ragged {
                row: line,
                expected,
                found: record.len(),
            });
        }
        let mut row = Vec::with_capacity(expected);
        for (j, cell) in record.iter().enumerate() {
            row.push(parse_cell(cell).ok_or_else(|| IoError::NonNumeric {
                row: line,
                column: j + 1,
                value: cell.to_string(),
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(IoError::Empty);
    }
    let (n, p) = (rows.len(), rows[0].len());
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    Ok(Dataset::new(x)?)
}

pub fn read_csv(path: &Path, header: HeaderMode) -> Result<Dataset, IoError> {
    parse_csv(std::fs::File::open(path)?, header)
}

/// Write rows with full round-trip precision and an `x1..xp` header.
pub fn write_csv<W: Write>(writer: W, x: &DMatrix<f64>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((1..=x.ncols()).map(|j| format!("x{j}")))?;
    for i in 0..x.nrows() {
        w.write_record(x.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Centre every column and scale it to unit sample standard deviation
/// (divisor `N - 1`); the original moments are kept on the result.
pub fn standardize(data: &Dataset) -> Result<Dataset, IoError> {
    let (n, p) = (data.n(), data.dim());
    if n < 2 {
        return Err(IoError::Config("standardization needs at least two rows".into()));
    }
    let means = DVector::from_fn(p, |j, _| data.x.column(j).mean());
    let mut sds = DVector::zeros(p);
    let mut x = data.x.clone();
    for j in 0..p {
        let mut col = x.column_mut(j);
        col.add_scalar_mut(-means[j]);
        let sd = (col.norm_squared() / (n - 1) as f64).sqrt();
        if !(sd > 0.0) || sd <= 1e-12 * means[j].abs() {
            return Err(IoError::ZeroVariance { column: j + 1 });
        }
        col /= sd;
        sds[j] = sd;
    }
    let mut out = Dataset::new(x)?;
    out.column_means = Some(means);
    out.column_sds = Some(sds);
    Ok(out)
}

/// Means and scale matrices of a mixture fitted on standardized data,
/// expressed in the original units: `mu = m + s * mu_z`,
/// `Sigma = S Sigma_z S` with `S = diag(s)`.
pub fn back_transform(params: &MixtureParams, means: &DVector<f64>, sds: &DVector<f64>) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let s = DMatrix::from_diagonal(sds);
    (0..params.groups())
        .map(|g| {
            let mu = means + params.means[g].component_mul(sds);
            let sigma = &s * params.scale.sigma(g) * &s;
            (mu, sigma)
        })
        .collect()
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], p: usize, what: &str) -> Result<DMatrix<f64>, IoError> {
    if rows.len() != p || rows.iter().any(|r| r.len() != p) {
        return Err(ModelError::InvalidParameter(format!("{what} must be {p}x{p}")).into());
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentScaleJson {
    pub volume: f64,
    pub shape: Vec<f64>,
    /// Row-major; columns are the principal axes.
    pub orientation: Vec<Vec<f64>>,
    /// Reconstructed `Sigma_g`, informational only (ignored on read).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleJson {
    pub structure: String,
    pub volume_sharing: Sharing,
    pub shape_sharing: Sharing,
    pub orientation_sharing: Sharing,
    pub components: Vec<ComponentScaleJson>,
}

/// Serialized [`MixtureParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsJson {
    pub model: ModelName,
    pub groups: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub betas: Vec<f64>,
    pub scale: ScaleJson,
}

impl From<&MixtureParams> for ParamsJson {
    fn from(params: &MixtureParams) -> Self {
        let s = params.spec.structure();
        Self {
            model: params.spec.name,
            groups: params.groups(),
            dim: params.dim(),
            weights: params.weights.clone(),
            means: params.means.iter().map(|m| m.iter().copied().collect()).collect(),
            betas: params.betas.clone(),
            scale: ScaleJson {
                structure: s.code().to_string(),
                volume_sharing: s.volume_sharing(),
                shape_sharing: s.shape_sharing(),
                orientation_sharing: s.orientation_sharing(),
                components: params
                    .scale
                    .components
                    .iter()
                    .map(|c| ComponentScaleJson {
                        volume: c.volume,
                        shape: c.shape.iter().copied().collect(),
                        orientation: rows_of(&c.orientation),
                        sigma: Some(rows_of(&c.sigma())),
                    })
                    .collect(),
            },
        }
    }
}

impl ParamsJson {
    pub fn to_params(&self) -> Result<MixtureParams, IoError> {
        let spec = ModelSpec::new(self.model, self.groups, self.dim)?;
        let p = self.dim;
        if self.scale.structure != spec.structure().code() {
            return Err(ModelError::InvalidParameter(format!(
                "scale structure {} does not match model {}",
                self.scale.structure, self.model
            ))
            .into());
        }
        let components = self
            .scale
            .components
            .iter()
            .map(|c| {
                Ok(ComponentScale {
                    volume: c.volume,
                    shape: DVector::from_vec(c.shape.clone()),
                    orientation: matrix_from_rows(&c.orientation, p, "orientation")?,
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        let params = MixtureParams {
            spec,
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| DVector::from_vec(m.clone())).collect(),
            scale: ScaleDecomposition::new(spec.structure(), components),
            betas: self.betas.clone(),
        };
        params.validate()?;
        Ok(params)
    }
}

pub fn parse_params_json(text: &str) -> Result<MixtureParams, IoError> {
    serde_json::from_str::<ParamsJson>(text)?.to_params()
}

pub fn params_to_json(params: &MixtureParams) -> Result<String, IoError> {
    Ok(serde_json::to_string_pretty(&ParamsJson::from(params))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueComponentJson {
    #[serde(flatten)]
    pub family: ComponentFamily,
    pub mean: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

/// Generating design of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthJson {
    pub format: String,
    pub version: u32,
    pub scenario: String,
    pub seed: u64,
    pub n: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub components: Vec<TrueComponentJson>,
    /// Component index (0-based) of every row of the dataset.
    pub labels: Vec<usize>,
    /// The generating mixture as fit parameters, when every component is MPE.
    pub params: Option<ParamsJson>,
}

impl From<&ScenarioData> for TruthJson {
    fn from(s: &ScenarioData) -> Self {
        Self {
            format: TRUTH_FORMAT.into(),
            version: FORMAT_VERSION,
            scenario: s.spec.scenario.to_string(),
            seed: s.spec.seed,
            n: s.data.n(),
            dim: s.data.dim(),
            weights: s.weights.clone(),
            components: s
                .components
                .iter()
                .map(|c| TrueComponentJson {
                    family: c.family,
                    mean: c.mean.iter().copied().collect(),
                    sigma: rows_of(&c.sigma),
                })
                .collect(),
            labels: s.labels.clone(),
            params: s.params.as_ref().map(ParamsJson::from),
        }
    }
}

pub fn parse_truth_json(text: &str) -> Result<TruthJson, IoError> {
    let truth: TruthJson = serde_json::from_str(text)?;
    if truth.format != TRUTH_FORMAT {
        return Err(IoError::Config(format!("unexpected format `{}`", truth.format)));
    }
    if let Some(p) = &truth.params {
        p.to_params()?;
    }
    Ok(truth)
}

/// Echo of the settings that produced a fit document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub input: String,
    pub g_min: usize,
    pub g_max: usize,
    pub models: Vec<ModelName>,
    pub scale: bool,
    pub seed: u64,
    pub epsilon: f64,
    pub max_iter: usize,
}

/// One row of the model grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSummary {
    pub name: ModelName,
    #[serde(rename = "G")]
    pub groups: usize,
    pub status: String,
    pub loglik: Option<f64>,
    pub m: usize,
    pub bic: Option<f64>,
    pub icl: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub small_sample_warning: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Component means and scale matrices in the original data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginalUnitsJson {
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<Vec<f64>>>,
}

/// Full description of a winning model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WinnerJson {
    pub name: ModelName,
    #[serde(rename = "G")]
    pub groups: usize,
    pub loglik: f64,
    pub m: usize,
    pub bic: f64,
    pub icl: f64,
    pub converged: bool,
    pub iterations: usize,
    pub params: ParamsJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_units: Option<OriginalUnitsJson>,
    /// MAP component (0-based) of every row.
    pub labels: Vec<usize>,
    pub loglik_trace: Vec<f64>,
}

impl WinnerJson {
    pub fn new(report: &FitReport, data: &Dataset) -> Self {
        let params = &report.params;
        let original_units = match (&data.column_means, &data.column_sds) {
            (Some(m), Some(s)) => {
                let bt = back_transform(params, m, s);
                Some(OriginalUnitsJson {
                    means: bt.iter().map(|(mu, _)| mu.iter().copied().collect()).collect(),
                    sigmas: bt.iter().map(|(_, sig)| rows_of(sig)).collect(),
                })
            }
            _ => None,
        };
        Self {
            name: params.spec.name,
            groups: params.groups(),
            loglik: report.loglik,
            m: report.free_params,
            bic: report.bic,
            icl: report.icl,
            converged: report.converged,
            iterations: report.iterations,
            params: ParamsJson::from(params),
            original_units,
            labels: report.map_labels.clone(),
            loglik_trace: report.loglik_trace.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardizationJson {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingsJson {
    pub total_seconds: f64,
}

/// The document written by `epem fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDocument {
    pub format: String,
    pub version: u32,
    pub config: ConfigEcho,
    pub n: usize,
    pub dim: usize,
    pub bic_convention: String,
    pub standardization: Option<StandardizationJson>,
    pub models: Vec<ModelSummary>,
    pub best_bic: WinnerJson,
    pub best_icl: WinnerJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<TimingsJson>,
}

/// Parse and check a fit document: format tag, winner parameters and
/// label counts must all be consistent.
pub fn parse_fit_json(text: &str) -> Result<FitDocument, IoError> {
    let doc: FitDocument = serde_json::from_str(text)?;
    if doc.format != FIT_FORMAT {
        return Err(IoError::Config(format!("unexpected format `{}`", doc.format)));
    }
    if doc.version != FORMAT_VERSION {
        return Err(IoError::Config(format!("unsupported version {}", doc.version)));
    }
    for w in [&doc.best_bic, &doc.best_icl] {
        let params = w.params.to_params()?;
        if params.dim() != doc.dim || w.labels.len() != doc.n || w.labels.iter().any(|&l| l >= params.groups()) {
            return Err(IoError::Config("winner does not match the data shape".into()));
        }
    }
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

/// Machine-readable failure report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDocument {
    pub format: String,
    pub version: u32,
    pub error: ErrorBody,
}

impl ErrorDocument {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            format: ERROR_FORMAT.into(),
            version: FORMAT_VERSION,
            error: ErrorBody {
                kind: kind.into(),
                message: message.into(),
            },
        }
    }
}

/// Tidy trajectory table: `beta,method,iteration,loglik,diverged`.
pub fn write_trajectories<W: Write>(writer: W, records: &[TrajectoryRecord]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["beta", "method", "iteration", "loglik", "diverged"])?;
    for r in records {
        for (k, l) in r.loglik.iter().enumerate() {
            w.write_record([
                r.beta.to_string(),
                r.method.to_string(),
                k.to_string(),
                l.to_string(),
                r.diverged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{log_density, weighted_log_densities, MpeComponent};
    use crate::model::{BetaConstraint, ScaleStructure};
    use crate::sampler::{generate_scenario, Scenario, SimScenario};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parse(text: &str, h: HeaderMode) -> Result<Dataset, IoError> {
        parse_csv(text.as_bytes(), h)
    }

    #[test]
    fn reads_numeric_table() {
        let d = parse("1,2\n3,4\n5,6\n", HeaderMode::Auto).unwrap();
        assert_eq!((d.n(), d.dim()), (3, 2));
        assert_eq!(d.x[(2, 1)], 6.0);
    }

    #[test]
    fn skips_header() {
        let d = parse("a,b\n1,2\n3,4\n", HeaderMode::Yes).unwrap();
        assert_eq!(d.n(), 2);
        let d = parse("a,b\n1,2\n3,4\n", HeaderMode::Auto).unwrap();
        assert_eq!(d.n(), 2);
        assert!(matches!(parse("a,b\n1,2\n", HeaderMode::No), Err(IoError::NonNumeric { row: 1, .. })));
    }

    #[test]
    fn rejects_nan_with_position() {
        match parse("1,2\n3,NaN\n", HeaderMode::No) {
            Err(IoError::NonNumeric { row, column, value }) => {
                assert_eq!((row, column, value.as_str()), (2, 2, "NaN"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_ragged_and_empty() {
        assert!(matches!(parse("1,2\n3\n", HeaderMode::No), Err(IoError::Ragged { row: 2, expected: 2, found: 1 })));
        assert!(matches!(parse("", HeaderMode::Auto), Err(IoError::Empty)));
        assert!(matches!(parse("a,b\n", HeaderMode::Auto), Err(IoError::Empty)));
    }

    #[test]
    fn csv_write_read_round_trip() {
        let x = DMatrix::from_row_slice(2, 2, &[0.1, -1e-300, std::f64::consts::PI, 12345.678]);
        let mut buf = Vec::new();
        write_csv(&mut buf, &x).unwrap();
        let d = parse_csv(buf.as_slice(), HeaderMode::Auto).unwrap();
        assert_eq!(d.x, x);
    }

    #[test]
    fn standardize_moments_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(50, 3, |_, j| 1000.0 + (j + 1) as f64 * rng.random::<f64>());
        let z = standardize(&Dataset::new(x).unwrap()).unwrap();
        for j in 0..3 {
            let c = z.x.column(j);
            assert!(c.mean().abs() < 1e-12);
            assert!(((c.norm_squared() / 49.0).sqrt() - 1.0).abs() < 1e-12);
        }
        let zz = standardize(&Dataset::new(z.x.clone()).unwrap()).unwrap();
        assert!((zz.x - &z.x).amax() < 1e-12);
        let constant = Dataset::new(DMatrix::from_element(4, 2, 3.0)).unwrap();
        assert!(matches!(standardize(&constant), Err(IoError::ZeroVariance { column: 1 })));
    }

    #[test]
    fn back_transform_preserves_density() {
        let truth = generate_scenario(SimScenario::new(Scenario::Sim2, 3)).unwrap();
        let params = truth.params.unwrap();
        let z = standardize(&truth.data).unwrap();
        let (m, s) = (z.column_means.clone().unwrap(), z.column_sds.clone().unwrap());
        let log_jac: f64 = s.iter().map(|v| v.ln()).sum();
        let bt = back_transform(&params, &m, &s);
        for i in 0..20 {
            let zi = z.x.row(i).transpose();
            let xi = truth.data.x.row(i).transpose();
            for (g, (mu, sigma)) in bt.iter().enumerate() {
                let cz = MpeComponent::from_decomposition(params.means[g].clone(), params.scale.component(g), params.betas[g]);
                let cx = MpeComponent::new(mu.clone(), sigma, params.betas[g]).unwrap();
                let lz = log_density(&zi, &cz).unwrap() - log_jac;
                let lx = log_density(&xi, &cx).unwrap();
                assert!((lz - lx).abs() < 1e-10 * lx.abs().max(1.0), "{lz} vs {lx}");
            }
        }
    }

    #[test]
    fn params_round_trip_preserves_density() {
        let truth = generate_scenario(SimScenario::new(Scenario::Sim2, 9)).unwrap();
        let params = truth.params.unwrap();
        let back = parse_params_json(&params_to_json(&params).unwrap()).unwrap();
        assert_eq!(back, params);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(100, 3, |_, _| rng.random_range(-4.0..8.0));
        let a = weighted_log_densities(&x, &params);
        let b = weighted_log_densities(&x, &back);
        assert!((a - b).amax() <= 1e-12);
    }

    #[test]
    fn params_json_rejects_inconsistency() {
        let truth = generate_scenario(SimScenario::new(Scenario::Sim1, 1)).unwrap();
        let mut j = ParamsJson::from(&truth.params.unwrap());
        j.scale.structure = "VVV".into();
        assert!(j.to_params().is_err());
        let mut j2 = j.clone();
        j2.scale.structure = "EII".into();
        j2.weights = vec![0.9, 0.9];
        assert!(j2.to_params().is_err());
        assert!(parse_params_json("{").is_err());
    }

    #[test]
    fn truth_json_round_trip() {
        for sc in Scenario::ALL {
            let s = generate_scenario(SimScenario::new(sc, 4)).unwrap();
            let text = serde_json::to_string(&TruthJson::from(&s)).unwrap();
            let back = parse_truth_json(&text).unwrap();
            assert_eq!(back.n, s.data.n());
            assert_eq!(back.params.is_some(), s.params.is_some());
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let rec = TrajectoryRecord {
            method: crate::fplab::Method::Gem,
            beta: 1.5,
            p: 2,
            loglik: vec![-3.0, -2.5],
            diverged: false,
        };
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "beta,method,iteration,loglik,diverged\n1.5,gem,0,-3,false\n1.5,gem,1,-2.5,false\n");
    }

    #[test]
    fn model_names_serialize_as_strings() {
        let n = ModelName::new(ScaleStructure::VVE, BetaConstraint::Equal);
        assert_eq!(serde_json::to_string(&n).unwrap(), "\"VVEE\"");
    }
}
