//! The finite-state signal/observation model.
//!
//! The signal is a continuous-time Markov chain on `d` states with
//! intensity matrix `generator`; the observation is either
//! `dY = h(X_t) dt + κ dW_t` (white noise) or a counting process with
//! intensity `h(X_t)`. `Y_0 = 0` throughout.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on generator row sums.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Tolerance on probability-vector sums.
pub const PROB_SUM_TOL: f64 = 1e-12;
/// Relative tolerance for grouping observation values into level sets.
pub const LEVEL_GROUP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsKind {
    WhiteNoise,
    Counting,
}

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelViolation {
    #[error("negative rate {value} at ({row},{col})")]
    NegativeRate { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("dimension mismatch in {field}: expected {expected}, got {got}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("negative intensity {value} for state {state} (counting observations)")]
    NegativeIntensity { state: usize, value: f64 },
    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },
    #[error("kappa must be >= 0, got {0}")]
    NegativeKappa(f64),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid model: {}", join_violations(.0))]
    Invalid(Vec<ModelViolation>),
}

fn join_violations(v: &[ModelViolation]) -> String {
    v.iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Unvalidated model as it appears on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d: usize,
    pub generator: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub kappa: f64,
    pub obs_kind: ObsKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl ModelSpec {
    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(ModelError::NotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<FiniteHmm, ModelError> {
        validate_model(self).map_err(ModelError::Invalid)
    }
}

/// A validated model. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteHmm {
    generator: DMatrix<f64>,
    h: Vec<f64>,
    kappa: f64,
    obs_kind: ObsKind,
    labels: Option<Vec<String>>,
}

/// Checks every model invariant and reports all violations at once.
pub fn validate_model(spec: &ModelSpec) -> Result<FiniteHmm, Vec<ModelViolation>> {
    let d = spec.d;
    let mut errs = Vec::new();
    if d == 0 {
        errs.push(ModelViolation::DimensionMismatch {
            field: "d",
            expected: 1,
            got: 0,
        });
    }
    if spec.h.len() != d {
        errs.push(ModelViolation::DimensionMismatch {
            field: "h",
            expected: d,
            got: spec.h.len(),
        });
    }
    if spec.generator.len() != d {
        errs.push(ModelViolation::DimensionMismatch {
            field: "generator rows",
            expected: d,
            got: spec.generator.len(),
        });
    }
    for row in &spec.generator {
        if row.len() != d {
            errs.push(ModelViolation::DimensionMismatch {
                field: "generator columns",
                expected: d,
                got: row.len(),
            });
        }
    }
    if let Some(labels) = &spec.labels {
        if labels.len() != d {
            errs.push(ModelViolation::DimensionMismatch {
                field: "labels",
                expected: d,
                got: labels.len(),
            });
        }
    }
    let square = spec.generator.len() == d && spec.generator.iter().all(|r| r.len() == d);
    if spec.generator.iter().flatten().any(|x| !x.is_finite()) {
        errs.push(ModelViolation::NonFinite { field: "generator" });
    } else if square {
        for (i, row) in spec.generator.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j && v < 0.0 {
                    errs.push(ModelViolation::NegativeRate {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > ROW_SUM_TOL {
                errs.push(ModelViolation::RowSumNonzero { row: i, sum });
            }
        }
    }
    if spec.h.iter().any(|x| !x.is_finite()) {
        errs.push(ModelViolation::NonFinite { field: "h" });
    } else if spec.obs_kind == ObsKind::Counting {
        for (i, &v) in spec.h.iter().enumerate() {
            if v < 0.0 {
                errs.push(ModelViolation::NegativeIntensity { state: i, value: v });
            }
        }
    }
    if !spec.kappa.is_finite() {
        errs.push(ModelViolation::NonFinite { field: "kappa" });
    } else if spec.kappa < 0.0 {
        errs.push(ModelViolation::NegativeKappa(spec.kappa));
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    Ok(FiniteHmm {
        generator: DMatrix::from_fn(d, d, |i, j| spec.generator[i][j]),
        h: spec.h.clone(),
        kappa: spec.kappa,
        obs_kind: spec.obs_kind,
        labels: spec.labels.clone(),
    })
}

impl FiniteHmm {
    /// Builds and validates a model from a row-major generator.
    pub fn new(
        generator: Vec<Vec<f64>>,
        h: Vec<f64>,
        kappa: f64,
        obs_kind: ObsKind,
    ) -> Result<Self, ModelError> {
        ModelSpec {
            d: h.len(),
            generator,
            h,
            kappa,
            obs_kind,
            labels: None,
        }
        .validate()
    }

    pub fn white_noise(
        generator: Vec<Vec<f64>>,
        h: Vec<f64>,
        kappa: f64,
    ) -> Result<Self, ModelError> {
        Self::new(generator, h, kappa, ObsKind::WhiteNoise)
    }

    pub fn d(&self) -> usize {
        self.h.len()
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn obs_kind(&self) -> ObsKind {
        self.obs_kind
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self, ModelError> {
        let mut spec = self.to_spec();
        spec.kappa = kappa;
        spec.validate()
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, ModelError> {
        if labels.len() != self.d() {
            return Err(ModelError::Invalid(vec![
                ModelViolation::DimensionMismatch {
                    field: "labels",
                    expected: self.d(),
                    got: labels.len(),
                },
            ]));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn to_spec(&self) -> ModelSpec {
        let d = self.d();
        ModelSpec {
            d,
            generator: (0..d)
                .map(|i| (0..d).map(|j| self.generator[(i, j)]).collect())
                .collect(),
            h: self.h.clone(),
            kappa: self.kappa,
            obs_kind: self.obs_kind,
            labels: self.labels.clone(),
        }
    }

    pub fn level_sets(&self) -> LevelSetStructure {
        level_sets(self)
    }
}

/// Partition of the states by observation value.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetStructure {
    /// Distinct observation values, ascending. Each is the smallest member
    /// of its tolerance group.
    pub values: Vec<f64>,
    /// `membership[i]` is the index into `values` of state `i`.
    pub membership: Vec<usize>,
    /// Diagonal 0/1 projections `H_b`, one per value.
    pub projections: Vec<DMatrix<f64>>,
}

impl LevelSetStructure {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `H_b 𝟙`: the indicator vector of level set `k`.
    pub fn indicator(&self, k: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.membership.len(),
            self.membership
                .iter()
                .map(|&m| if m == k { 1.0 } else { 0.0 }),
        )
    }

    /// `H_b v`, without forming the matrix.
    pub fn apply(&self, k: usize, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(
            v.len(),
            |i, _| if self.membership[i] == k { v[i] } else { 0.0 },
        )
    }
}

/// Groups `h` into level sets. Sorted values closer than
/// `1e-9·max(1, max|h|)` to their neighbour are chained into one group.
pub fn level_sets(m: &FiniteHmm) -> LevelSetStructure {
    let h = m.h();
    let d = h.len();
    let scale = h.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let tol = LEVEL_GROUP_TOL * scale;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]));

    let mut values: Vec<f64> = Vec::new();
    let mut membership = vec![0usize; d];
    let mut prev: Option<f64> = None;
    for &i in &order {
        match prev {
            Some(p) if (h[i] - p).abs() <= tol => {}
            _ => values.push(h[i]),
        }
        membership[i] = values.len() - 1;
        prev = Some(h[i]);
    }
    let projections = (0..values.len())
        .map(|k| {
            DMatrix::from_fn(d, d, |i, j| {
                if i == j && membership[i] == k {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    LevelSetStructure {
        values,
        membership,
        projections,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InitialPairError {
    #[error("{which} has length {got}, expected {expected}")]
    Length {
        which: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{which} has a negative or non-finite entry at {index}")]
    BadEntry { which: &'static str, index: usize },
    #[error("{which} sums to {sum}, expected 1")]
    Sum { which: &'static str, sum: f64 },
}

/// A pair of priors `(μ, ν)` on the signal states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPair {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

pub fn check_probability(which: &'static str, p: &[f64], d: usize) -> Result<(), InitialPairError> {
    if p.len() != d {
        return Err(InitialPairError::Length {
            which,
            expected: d,
            got: p.len(),
        });
    }
    if let Some(index) = p.iter().position(|x| !x.is_finite() || *x < 0.0) {
        return Err(InitialPairError::BadEntry { which, index });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(InitialPairError::Sum { which, sum });
    }
    Ok(())
}

impl InitialPair {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self, InitialPairError> {
        let d = mu.len();
        check_probability("mu", &mu, d)?;
        check_probability("nu", &nu, d)?;
        Ok(InitialPair { mu, nu })
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    /// `μ ≪ ν`: every state with zero ν-mass has zero μ-mass.
    pub fn mu_abs_cont_nu(&self) -> bool {
        self.mu
            .iter()
            .zip(&self.nu)
            .all(|(&m, &n)| n != 0.0 || m == 0.0)
    }
}

/// A named model together with a reference pair of priors.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub model: FiniteHmm,
    pub init: InitialPair,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.description)
    }
}

fn preset(
    name: &'static str,
    description: &'static str,
    generator: Vec<Vec<f64>>,
    h: Vec<f64>,
    kappa: f64,
    mu: Vec<f64>,
    nu: Vec<f64>,
) -> Preset {
    Preset {
        name,
        description,
        model: FiniteHmm::white_noise(generator, h, kappa).expect("builtin preset is valid"),
        init: InitialPair::new(mu, nu).expect("builtin prior pair is valid"),
    }
}

/// Four-state cycle `1 → 2 → 3 → 4 → 1` at unit rate, observing the parity
/// of the state through `h = (1, 0, 1, 0)`.
pub fn cyclic_parity_model(kappa: f64) -> Result<FiniteHmm, ModelError> {
    let mut g = vec![vec![0.0; 4]; 4];
    for (i, row) in g.iter_mut().enumerate() {
        row[i] = -1.0;
        row[(i + 1) % 4] = 1.0;
    }
    FiniteHmm::white_noise(g, vec![1.0, 0.0, 1.0, 0.0], kappa)
}

/// The reference models E1–E6.
pub fn builtin_presets() -> Vec<Preset> {
    let third = 1.0 / 3.0;
    vec![
        preset(
            "E1",
            "ergodic two-state chain, h one-to-one (observable)",
            vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
            vec![0.0, 1.0],
            1.0,
            vec![0.9, 0.1],
            vec![0.5, 0.5],
        ),
        preset(
            "E2",
            "ergodic two-state chain, h = 0 (detectable, not observable)",
            vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
            vec![0.0, 0.0],
            1.0,
            vec![0.9, 0.1],
            vec![0.5, 0.5],
        ),
        preset(
            "E3",
            "two absorbing states, h one-to-one (observable, two ergodic classes)",
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![0.0, 1.0],
            1.0,
            vec![0.9, 0.1],
            vec![0.5, 0.5],
        ),
        preset(
            "E4",
            "two absorbing states, h = 0 (not detectable)",
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![0.0, 0.0],
            1.0,
            vec![0.9, 0.1],
            vec![0.5, 0.5],
        ),
        preset(
            "E5",
            "two absorbing states fed by a transient state",
            vec![
                vec![0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0],
                vec![1.0, 1.0, -2.0],
            ],
            vec![0.0, 1.0, 0.0],
            1.0,
            vec![0.0, 0.0, 1.0],
            vec![third, third, 1.0 - 2.0 * third],
        ),
        Preset {
            name: "E6",
            description: "four-state unit-rate cycle observing state parity",
            model: cyclic_parity_model(1.0).expect("builtin preset is valid"),
            init: InitialPair::new(vec![1.0, 0.0, 0.0, 0.0], vec![0.5, 0.0, 0.5, 0.0])
                .expect("builtin prior pair is valid"),
        },
    ]
}

pub fn find_preset(name: &str) -> Option<Preset> {
    builtin_presets()
        .into_iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
}
