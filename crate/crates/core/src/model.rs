//! Model nomenclature, parameter containers and parameter counting.
//!
//! A model is named by four letters: three for the scale structure
//! (volume, shape, orientation; `E` for equal across components, `V` for
//! variable, `I` for identity) and one for the shape parameter constraint.
//! For example `VVIE` has variable volumes and shapes, axis-aligned
//! orientation and a single shape parameter shared by all components.
//!
//! Scale matrices are always held in decomposed form
//! `Sigma_g = lambda_g * Gamma_g * diag(Delta_g) * Gamma_g'` with `prod(Delta_g) = 1`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::linalg;

/// The eight eigen-decomposed scale structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScaleStructure {
    EII,
    VII,
    EEI,
    VVI,
    EEE,
    EEV,
    VVE,
    VVV,
}

/// How a factor of the decomposition is shared across components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// Fixed to the identity (orientation) or to all-ones (shape).
    Identity,
    Equal,
    Variable,
}

impl ScaleStructure {
    pub const ALL: [ScaleStructure; 8] = [
        ScaleStructure::EII,
        ScaleStructure::VII,
        ScaleStructure::EEI,
        ScaleStructure::VVI,
        ScaleStructure::EEE,
        ScaleStructure::EEV,
        ScaleStructure::VVE,
        ScaleStructure::VVV,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ScaleStructure::EII => "EII",
            ScaleStructure::VII => "VII",
            ScaleStructure::EEI => "EEI",
            ScaleStructure::VVI => "VVI",
            ScaleStructure::EEE => "EEE",
            ScaleStructure::EEV => "EEV",
            ScaleStructure::VVE => "VVE",
            ScaleStructure::VVV => "VVV",
        }
    }

    pub fn volume_sharing(self) -> Sharing {
        match self {
            ScaleStructure::EII | ScaleStructure::EEI | ScaleStructure::EEE | ScaleStructure::EEV => {
                Sharing::Equal
            }
            _ => Sharing::Variable,
        }
    }

    pub fn shape_sharing(self) -> Sharing {
        match self {
            ScaleStructure::EII | ScaleStructure::VII => Sharing::Identity,
            ScaleStructure::EEI | ScaleStructure::EEE | ScaleStructure::EEV => Sharing::Equal,
            _ => Sharing::Variable,
        }
    }

    pub fn orientation_sharing(self) -> Sharing {
        match self {
            ScaleStructure::EII
            | ScaleStructure::VII
            | ScaleStructure::EEI
            | ScaleStructure::VVI => Sharing::Identity,
            ScaleStructure::EEE | ScaleStructure::VVE => Sharing::Equal,
            ScaleStructure::EEV | ScaleStructure::VVV => Sharing::Variable,
        }
    }

    /// Number of free parameters in the scale matrices.
    pub fn free_scale_params(self, groups: usize, dim: usize) -> usize {
        let (g, p) = (groups, dim);
        let full = p * (p + 1) / 2;
        match self {
            ScaleStructure::EII => 1,
            ScaleStructure::VII => g,
            ScaleStructure::EEI => p,
            ScaleStructure::VVI => g * p,
            ScaleStructure::EEE => full,
            ScaleStructure::EEV => g * full - (g - 1) * p,
            ScaleStructure::VVE => full + (g - 1) * p,
            ScaleStructure::VVV => g * full,
        }
    }
}

impl fmt::Display for ScaleStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ScaleStructure {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScaleStructure::ALL
            .iter()
            .copied()
            .find(|m| m.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::UnknownModel(s.to_string()))
    }
}

/// Whether the shape parameter is shared by all components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BetaConstraint {
    Equal,
    Variable,
}

impl BetaConstraint {
    pub const ALL: [BetaConstraint; 2] = [BetaConstraint::Equal, BetaConstraint::Variable];

    pub fn code(self) -> char {
        match self {
            BetaConstraint::Equal => 'E',
            BetaConstraint::Variable => 'V',
        }
    }

    pub fn count(self, groups: usize) -> usize {
        match self {
            BetaConstraint::Equal => 1,
            BetaConstraint::Variable => groups,
        }
    }
}

/// One of the sixteen four-letter model names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelName {
    pub structure: ScaleStructure,
    pub beta: BetaConstraint,
}

impl ModelName {
    pub fn new(structure: ScaleStructure, beta: BetaConstraint) -> Self {
        Self { structure, beta }
    }

    pub fn all() -> Vec<ModelName> {
        ScaleStructure::ALL
            .iter()
            .flat_map(|&s| BetaConstraint::ALL.iter().map(move |&b| ModelName::new(s, b)))
            .collect()
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.structure.code(), self.beta.code())
    }
}

impl FromStr for ModelName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || ModelError::UnknownModel(s.to_string());
        if s.len() != 4 || !s.is_ascii() {
            return Err(unknown());
        }
        let structure: ScaleStructure = s[..3].parse().map_err(|_| unknown())?;
        let beta = match s.as_bytes()[3].to_ascii_uppercase() {
            b'E' => BetaConstraint::Equal,
            b'V' => BetaConstraint::Variable,
            _ => return Err(unknown()),
        };
        Ok(ModelName { structure, beta })
    }
}

impl Serialize for ModelName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A model name together with the component count and data dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub name: ModelName,
    pub groups: usize,
    pub dim: usize,
}

impl ModelSpec {
    pub fn new(name: ModelName, groups: usize, dim: usize) -> Result<Self, ModelError> {
        if groups == 0 || dim == 0 {
            return Err(ModelError::InvalidParameter(format!(
                "groups and dimension must be positive (got G={groups}, p={dim})"
            )));
        }
        Ok(Self { name, groups, dim })
    }

    pub fn structure(&self) -> ScaleStructure {
        self.name.structure
    }

    pub fn beta_constraint(&self) -> BetaConstraint {
        self.name.beta
    }

    /// `(G - 1) + G p + scale parameters + shape parameters`.
    pub fn total_free_params(&self) -> usize {
        let (g, p) = (self.groups, self.dim);
        (g - 1) + g * p + self.name.structure.free_scale_params(g, p) + self.name.beta.count(g)
    }
}

pub fn free_scale_param_count(structure: ScaleStructure, groups: usize, dim: usize) -> usize {
    structure.free_scale_params(groups, dim)
}

/// Decomposed scale of a single component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentScale {
    /// `lambda_g`, the volume.
    pub volume: f64,
    /// `Delta_g`, unit-determinant shape.
    pub shape: DVector<f64>,
    /// `Gamma_g`, orthonormal orientation (columns are eigenvectors).
    pub orientation: DMatrix<f64>,
}

impl ComponentScale {
    /// Build from eigenvalues `a` and eigenvectors; the determinant of the
    /// shape is folded into the volume.
    pub fn from_eigen(eigenvalues: &DVector<f64>, orientation: DMatrix<f64>) -> Self {
        let p = eigenvalues.len() as f64;
        let log_vol = eigenvalues.iter().map(|a| a.ln()).sum::<f64>() / p;
        let volume = log_vol.exp();
        let shape = eigenvalues.map(|a| (a.ln() - log_vol).exp());
        Self {
            volume,
            shape,
            orientation,
        }
    }

    pub fn spherical(volume: f64, dim: usize) -> Self {
        Self {
            volume,
            shape: DVector::from_element(dim, 1.0),
            orientation: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    /// Eigenvalues `lambda * Delta`.
    pub fn eigenvalues(&self) -> DVector<f64> {
        &self.shape * self.volume
    }

    pub fn log_det(&self) -> f64 {
        self.dim() as f64 * self.volume.ln() + self.shape.iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.eigenvalues());
        linalg::symmetrize(&(&self.orientation * d * self.orientation.transpose()))
    }

    pub fn sigma_inverse(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.eigenvalues().map(|a| 1.0 / a));
        linalg::symmetrize(&(&self.orientation * d * self.orientation.transpose()))
    }

    /// Symmetric square root `Sigma^{1/2}`.
    pub fn sigma_sqrt(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.eigenvalues().map(f64::sqrt));
        linalg::symmetrize(&(&self.orientation * d * self.orientation.transpose()))
    }

    fn validate(&self, dim: usize) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidParameter(m));
        if self.shape.len() != dim || self.orientation.nrows() != dim || self.orientation.ncols() != dim
        {
            return Err(ModelError::DimensionMismatch {
                expected: dim,
                actual: self.shape.len(),
            });
        }
        if !(self.volume.is_finite() && self.volume > 0.0) {
            return bad(format!("volume must be positive, got {}", self.volume));
        }
        if self.shape.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return bad("shape entries must be positive".into());
        }
        let log_det: f64 = self.shape.iter().map(|d| d.ln()).sum();
        if log_det.abs() > 1e-8 {
            return bad(format!("shape determinant must be 1 (log det = {log_det:e})"));
        }
        if self.orientation.iter().any(|v| !v.is_finite()) {
            return bad("orientation has non-finite entries".into());
        }
        let defect = linalg::orthonormality_defect(&self.orientation);
        if defect > 1e-8 {
            return bad(format!("orientation is not orthonormal (defect {defect:e})"));
        }
        Ok(())
    }
}

/// Per-component scale decompositions; shared factors are stored
/// repeatedly and kept identical across components.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDecomposition {
    pub structure: ScaleStructure,
    pub components: Vec<ComponentScale>,
}

impl ScaleDecomposition {
    pub fn new(structure: ScaleStructure, components: Vec<ComponentScale>) -> Self {
        Self {
            structure,
            components,
        }
    }

    pub fn groups(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, g: usize) -> &ComponentScale {
        &self.components[g]
    }

    pub fn sigma(&self, g: usize) -> DMatrix<f64> {
        self.components[g].sigma()
    }

    /// Checks unit-determinant shapes, orthonormal orientations and the
    /// sharing pattern implied by the structure.
    pub fn validate(&self, dim: usize) -> Result<(), ModelError> {
        if self.components.is_empty() {
            return Err(ModelError::InvalidParameter("no components".into()));
        }
        for c in &self.components {
            c.validate(dim)?;
        }
        let first = &self.components[0];
        let tol = 1e-8;
        let rel = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);
        for c in &self.components[1..] {
            if self.structure.volume_sharing() == Sharing::Equal && !rel(c.volume, first.volume) {
                return Err(ModelError::InvalidParameter(format!(
                    "{} requires equal volumes",
                    self.structure
                )));
            }
            if self.structure.shape_sharing() == Sharing::Equal
                && (&c.shape - &first.shape).amax() > tol
            {
                return Err(ModelError::InvalidParameter(format!(
                    "{} requires equal shapes",
                    self.structure
                )));
            }
            if self.structure.orientation_sharing() == Sharing::Equal
                && (&c.orientation - &first.orientation).amax() > tol
            {
                return Err(ModelError::InvalidParameter(format!(
                    "{} requires a shared orientation",
                    self.structure
                )));
            }
        }
        for c in &self.components {
            if self.structure.shape_sharing() == Sharing::Identity
                && c.shape.iter().any(|d| (d - 1.0).abs() > tol)
            {
                return Err(ModelError::InvalidParameter(format!(
                    "{} requires spherical shape",
                    self.structure
                )));
            }
            if self.structure.orientation_sharing() == Sharing::Identity {
                let p = c.dim();
                if (&c.orientation - DMatrix::<f64>::identity(p, p)).amax() > tol {
                    return Err(ModelError::InvalidParameter(format!(
                        "{} requires axis-aligned orientation",
                        self.structure
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sign-canonicalize every orientation (first nonzero entry of each
    /// column positive). Sigma is unchanged.
    pub fn canonicalize(&mut self) {
        for c in &mut self.components {
            linalg::canonicalize_column_signs(&mut c.orientation);
        }
    }
}

/// `Sigma_g = lambda_g Gamma_g Delta_g Gamma_g'`.
pub fn reconstruct_sigma(scale: &ScaleDecomposition, g: usize) -> DMatrix<f64> {
    scale.sigma(g)
}

/// Full parameter set of a fitted or true mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub spec: ModelSpec,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub scale: ScaleDecomposition,
    /// Shape parameters `beta_g` (repeated when constrained equal).
    pub betas: Vec<f64>,
}

/// Exclusive upper bound on the shape parameter.
pub const BETA_CAP: f64 = 200.0;

impl MixtureParams {
    pub fn groups(&self) -> usize {
        self.spec.groups
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (g, p) = (self.spec.groups, self.spec.dim);
        let bad = |m: String| Err(ModelError::InvalidParameter(m));
        if self.weights.len() != g || self.means.len() != g || self.betas.len() != g {
            return bad(format!("expected {g} components"));
        }
        if self.scale.groups() != g || self.scale.structure != self.spec.name.structure {
            return bad("scale decomposition does not match the model".into());
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("mixing weights must be positive".into());
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("mixing weights sum to {total}"));
        }
        for m in &self.means {
            if m.len() != p {
                return Err(ModelError::DimensionMismatch {
                    expected: p,
                    actual: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return bad("non-finite mean".into());
            }
        }
        for &b in &self.betas {
            if !(b > 0.0 && b < BETA_CAP) {
                return bad(format!("shape parameter {b} outside (0, {BETA_CAP})"));
            }
        }
        if self.spec.name.beta == BetaConstraint::Equal
            && self.betas.iter().any(|&b| b != self.betas[0])
        {
            return bad("equal-shape model with differing shape parameters".into());
        }
        self.scale.validate(p)
    }
}

/// An `N x p` data matrix; rows are observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub column_means: Option<DVector<f64>>,
    pub column_sds: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>) -> Result<Self, ModelError> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(ModelError::InvalidParameter("dataset must be non-empty".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParameter("dataset has non-finite entries".into()));
        }
        Ok(Self {
            x,
            column_means: None,
            column_sds: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// `N x G` posterior membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub tau: DMatrix<f64>,
}

impl Responsibilities {
    pub fn new(tau: DMatrix<f64>) -> Result<Self, ModelError> {
        for i in 0..tau.nrows() {
            let row = tau.row(i);
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0 + 1e-12) {
                return Err(ModelError::InvalidParameter(format!(
                    "responsibility row {i} has entries outside [0, 1]"
                )));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(ModelError::InvalidParameter(format!(
                    "responsibility row {i} sums to {s}"
                )));
            }
        }
        Ok(Self { tau })
    }

    /// Hard (0/1) responsibilities from labels in `0..groups`.
    pub fn from_labels(labels: &[usize], groups: usize) -> Self {
        let mut tau = DMatrix::zeros(labels.len(), groups);
        for (i, &l) in labels.iter().enumerate() {
            tau[(i, l)] = 1.0;
        }
        Self { tau }
    }

    pub fn n(&self) -> usize {
        self.tau.nrows()
    }

    pub fn groups(&self) -> usize {
        self.tau.ncols()
    }

    /// Effective counts `n_g`.
    pub fn counts(&self) -> Vec<f64> {
        (0..self.groups()).map(|g| self.tau.column(g).sum()).collect()
    }

    /// Maximum a posteriori labels (lowest index wins ties).
    pub fn map_labels(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| {
                let row = self.tau.row(i);
                let mut best = 0;
                for g in 1..row.len() {
                    if row[g] > row[best] {
                        best = g;
                    }
                }
                best
            })
            .collect()
    }
}
