//! Exact MPE sampling and the four simulation scenarios.
//!
//! If `X ~ MPE(mu, Sigma, beta)` then `X = mu + R Sigma^{1/2} U` with `U`
//! uniform on the unit sphere and `R` independent of `U`. The density of
//! `R` is proportional to `r^{p-1} exp(-r^{2 beta} / 2)`; substituting
//! `T = R^{2 beta}` gives a density proportional to
//! `t^{p/(2 beta) - 1} exp(-t / 2)`, i.e. `T ~ Gamma(p/(2 beta), scale 2)`.
//!
//! Scenario generators use one ChaCha20 stream per purpose: stream 0 draws
//! the group sizes and stream `g + 1` draws the observations of component
//! `g`, so the seed alone determines every byte of output.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::linalg;
use crate::model::{ComponentScale, Dataset, MixtureParams, ModelSpec, ScaleDecomposition, ScaleStructure};

fn symmetric_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    let p = sigma.nrows();
    if sigma.ncols() != p {
        return Err(ModelError::DimensionMismatch {
            expected: p,
            actual: sigma.ncols(),
        });
    }
    if (sigma - sigma.transpose()).amax() > 1e-10 * sigma.amax().max(1.0) {
        return Err(ModelError::InvalidParameter("scale matrix is not symmetric".into()));
    }
    let (vals, vecs) = linalg::sorted_symmetric_eigen(sigma);
    if !(vals[p - 1] > 0.0) {
        return Err(ModelError::InvalidParameter("scale matrix is not positive definite".into()));
    }
    Ok(&vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose())
}

fn unit_sphere<R: Rng + ?Sized>(p: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = z.norm();
        if n > 0.0 {
            return z / n;
        }
    }
}

/// `n` draws from `MPE(mu, sigma, beta)`, one per row.
pub fn sample_mpe<R: Rng + ?Sized>(
    n: usize,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    beta: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>, ModelError> {
    let p = mu.len();
    if sigma.nrows() != p {
        return Err(ModelError::DimensionMismatch {
            expected: p,
            actual: sigma.nrows(),
        });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(ModelError::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let root = symmetric_sqrt(sigma)?;
    let radial = Gamma::new(p as f64 / (2.0 * beta), 2.0)
        .map_err(|e| ModelError::InvalidParameter(format!("radial law: {e}")))?;
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        let u = unit_sphere(p, rng);
        let t: f64 = radial.sample(rng);
        let r = t.powf(1.0 / (2.0 * beta));
        let x = mu + &root * u * r;
        out.row_mut(i).copy_from(&x.transpose());
    }
    Ok(out)
}

/// `n` draws from a multivariate t with location `mu`, scale `sigma` and
/// `df` degrees of freedom (Gaussian divided by `sqrt(chi^2_df / df)`).
pub fn sample_t<R: Rng + ?Sized>(
    n: usize,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    df: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>, ModelError> {
    let p = mu.len();
    let root = symmetric_sqrt(sigma)?;
    let chi = ChiSquared::new(df).map_err(|e| ModelError::InvalidParameter(format!("degrees of freedom: {e}")))?;
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w: f64 = chi.sample(rng);
        let x = mu + &root * z * (df / w).sqrt();
        out.row_mut(i).copy_from(&x.transpose());
    }
    Ok(out)
}

/// The four simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    Sim1,
    Sim2,
    Sim3,
    Sim4,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Sim1, Scenario::Sim2, Scenario::Sim3, Scenario::Sim4];

    pub fn default_size(self) -> usize {
        match self {
            Scenario::Sim1 => 450,
            Scenario::Sim2 => 500,
            Scenario::Sim3 => 400,
            Scenario::Sim4 => 100,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Scenario::Sim1 => 2,
            Scenario::Sim2 | Scenario::Sim4 => 3,
            Scenario::Sim3 => 30,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::Sim1 => "sim1",
            Scenario::Sim2 => "sim2",
            Scenario::Sim3 => "sim3",
            Scenario::Sim4 => "sim4",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::InvalidParameter(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimScenario {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
}

impl SimScenario {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self {
            scenario,
            n: scenario.default_size(),
            seed,
        }
    }
}

/// Distribution family of a simulated component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ComponentFamily {
    Mpe { beta: f64 },
    Gaussian,
    StudentT { df: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrueComponent {
    pub family: ComponentFamily,
    pub mean: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub spec: SimScenario,
    pub data: Dataset,
    /// Component index of every row.
    pub labels: Vec<usize>,
    /// Generating mixing probabilities.
    pub weights: Vec<f64>,
    pub components: Vec<TrueComponent>,
    /// The generating mixture as ePEM parameters; `None` when some component
    /// is not MPE.
    pub params: Option<MixtureParams>,
}

fn stream(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Multinomial group sizes via sequential binomials.
fn group_sizes<R: Rng + ?Sized>(n: usize, probs: &[f64], rng: &mut R) -> Vec<usize> {
    let mut left = n as u64;
    let mut mass = 1.0;
    let mut sizes = Vec::with_capacity(probs.len());
    for (k, &p) in probs.iter().enumerate() {
        if k + 1 == probs.len() {
            sizes.push(left as usize);
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(left, q).expect("valid binomial").sample(rng);
        sizes.push(draw as usize);
        left -= draw;
        mass -= p;
    }
    sizes
}

fn sim2_sigma() -> (DVector<f64>, DMatrix<f64>) {
    let gamma = DMatrix::from_row_slice(3, 3, &[0.36, 0.48, -0.8, -0.8, 0.6, 0.0, 0.48, 0.64, 0.6]);
    (DVector::from_vec(vec![4.0, 3.0, 1.0]), gamma)
}

fn sim3_sigma() -> DMatrix<f64> {
    let block = DMatrix::from_row_slice(3, 3, &[1.0, 0.1, 0.2, 0.1, 1.5, 0.3, 0.2, 0.3, 1.2]);
    block.kronecker(&DMatrix::<f64>::identity(10, 10))
}

fn sim4_sigma() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.3, 0.25, 0.3, 1.0])
}

/// Draw a dataset from one of the simulation designs.
pub fn generate_scenario(s: SimScenario) -> Result<ScenarioData, ModelError> {
    let p = s.scenario.dim();
    let vec = |v: &[f64]| DVector::from_row_slice(v);
    let mpe = |mean: DVector<f64>, sigma: DMatrix<f64>, beta: f64| TrueComponent {
        family: ComponentFamily::Mpe { beta },
        mean,
        sigma,
    };
    let (weights, components, structure): (Vec<f64>, Vec<TrueComponent>, Option<ScaleStructure>) = match s.scenario {
        Scenario::Sim1 => (
            vec![0.45, 0.55],
            vec![
                mpe(vec(&[0.0, 0.0]), DMatrix::identity(2, 2), 2.0),
                mpe(vec(&[2.0, 0.0]), DMatrix::identity(2, 2), 5.0),
            ],
            Some(ScaleStructure::EII),
        ),
        Scenario::Sim2 => {
            let (delta, gamma) = sim2_sigma();
            let sigma = linalg::symmetrize(&(&gamma * DMatrix::from_diagonal(&delta) * gamma.transpose()));
            (
                vec![0.35, 0.15, 0.5],
                vec![
                    mpe(vec(&[0.0, 2.0, 0.0]), sigma.clone(), 0.85),
                    mpe(vec(&[2.0, 5.0, 0.0]), sigma.clone(), 3.0),
                    mpe(vec(&[4.0, 2.0, 0.0]), sigma, 5.0),
                ],
                Some(ScaleStructure::EEE),
            )
        }
        Scenario::Sim3 => {
            let sigma = sim3_sigma();
            (
                vec![0.35, 0.65],
                vec![
                    mpe(DVector::zeros(30), sigma.clone(), 2.0),
                    mpe(DVector::from_element(30, 3.0), sigma, 0.95),
                ],
                Some(ScaleStructure::EEE),
            )
        }
        Scenario::Sim4 => {
            let sigma = sim4_sigma();
            (
                vec![0.4, 0.6],
                vec![
                    TrueComponent {
                        family: ComponentFamily::Gaussian,
                        mean: DVector::zeros(3),
                        sigma: sigma.clone(),
                    },
                    TrueComponent {
                        family: ComponentFamily::StudentT { df: 5.0 },
                        mean: vec(&[5.0, 0.0, 0.0]),
                        sigma,
                    },
                ],
                None,
            )
        }
    };

    let sizes = group_sizes(s.n, &weights, &mut stream(s.seed, 0));
    let mut x = DMatrix::zeros(s.n, p);
    let mut labels = Vec::with_capacity(s.n);
    let mut row = 0;
    for (g, (comp, &size)) in components.iter().zip(&sizes).enumerate() {
        let mut rng = stream(s.seed, g as u64 + 1);
        let block = match comp.family {
            ComponentFamily::Mpe { beta } => sample_mpe(size, &comp.mean, &comp.sigma, beta, &mut rng)?,
            ComponentFamily::Gaussian => sample_mpe(size, &comp.mean, &comp.sigma, 1.0, &mut rng)?,
            ComponentFamily::StudentT { df } => sample_t(size, &comp.mean, &comp.sigma, df, &mut rng)?,
        };
        x.rows_mut(row, size).copy_from(&block);
        labels.extend(std::iter::repeat_n(g, size));
        row += size;
    }

    let params = match structure {
        Some(structure) => {
            let name = crate::model::ModelName::new(structure, crate::model::BetaConstraint::Variable);
            let spec = ModelSpec::new(name, components.len(), p)?;
            let scales = components
                .iter()
                .map(|c| {
                    if structure == ScaleStructure::EII {
                        ComponentScale::spherical(c.sigma[(0, 0)], p)
                    } else if s.scenario == Scenario::Sim2 {
                        let (delta, gamma) = sim2_sigma();
                        ComponentScale::from_eigen(&delta, gamma)
                    } else {
                        let (vals, vecs) = linalg::sorted_symmetric_eigen(&c.sigma);
                        ComponentScale::from_eigen(&vals, vecs)
                    }
                })
                .collect();
            let betas = components
                .iter()
                .map(|c| match c.family {
                    ComponentFamily::Mpe { beta } => beta,
                    _ => 1.0,
                })
                .collect();
            let mut params = MixtureParams {
                spec,
                weights: weights.clone(),
                means: components.iter().map(|c| c.mean.clone()).collect(),
                scale: ScaleDecomposition::new(structure, scales),
                betas,
            };
            params.scale.canonicalize();
            params.validate()?;
            Some(params)
        }
        None => None,
    };

    Ok(ScenarioData {
        spec: s,
        data: Dataset::new(x)?,
        labels,
        weights,
        components,
        params,
    })
}
