//! Observability, detectability and filter-stability verdicts.
//!
//! A model is detectable when it is observable or when the adjoint generator
//! restricted to the nonobservable space is Hurwitz (equivalently, has full
//! rank: every nonzero eigenvalue of a generator has negative real part).
//! With `κ > 0` and white-noise observations, detectability is equivalent to
//! filter stability for absolutely continuous priors, and a single ergodic
//! class is equivalent to stability for arbitrary priors.

use nalgebra::DMatrix;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::chain::{decompose, ChainDecomposition};
use crate::model::{FiniteHmm, ObsKind};
use crate::numlin::{
    is_hurwitz, numerical_rank_scaled, NumError, Subspace, DEFAULT_HURWITZ_MARGIN, DEFAULT_RANK_TOL,
};
use crate::observability::{observable_space, ObservabilityResult};

pub const INVARIANCE_TOL: f64 = 1e-8;

pub const STABLE_NOTE: &str = "requires kappa>0, white-noise observations, mu<<nu";
pub const STRONG_STABLE_NOTE: &str = "requires kappa>0";
pub const NOT_APPLICABLE_NOTE: &str =
    "stability criterion not applicable (kappa=0 or counting observations); use simulation";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerdictError {
    #[error("nonobservable space is trivial; nothing to restrict to")]
    EmptySubspace,
    #[error("nonobservable space is not invariant under the adjoint generator (residual {0:e})")]
    InvarianceViolation(f64),
    #[error("subspace lives in R^{got}, model has {expected} states")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Numerical(#[from] NumError),
}

/// Three-valued verdict for claims that only hold under extra hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Yes,
    No,
    NotApplicable,
}

impl Verdict {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Yes
        } else {
            Verdict::No
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Verdict::Yes => Some(true),
            Verdict::No => Some(false),
            Verdict::NotApplicable => None,
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Verdict::Yes => s.serialize_bool(true),
            Verdict::No => s.serialize_bool(false),
            Verdict::NotApplicable => s.serialize_str("not_applicable"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalVerdict {
    pub value: Verdict,
    pub note: String,
}

/// Largest real part of the spectrum of `Λᵀ|_N`, or a marker when `N = {0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxRealPart {
    Value(f64),
    NTrivial,
}

impl Serialize for MaxRealPart {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MaxRealPart::Value(v) => s.serialize_f64(*v),
            MaxRealPart::NTrivial => s.serialize_str("N trivial"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectEvidence {
    #[serde(rename = "dim_N")]
    pub dim_n: usize,
    pub max_real_part: MaxRealPart,
    /// Numerical rank of `Λᵀ|_N`; absent when `N = {0}`.
    pub restricted_rank: Option<usize>,
    /// Hurwitz and full-rank answers coincide (always true when `N = {0}`).
    pub rank_hurwitz_agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub observable: bool,
    pub detectable: bool,
    pub detect_evidence: DetectEvidence,
    pub stable: ConditionalVerdict,
    pub strong_stable: ConditionalVerdict,
    pub num_ergodic_classes: usize,
    pub has_transient: bool,
    pub kappa_positive: bool,
}

impl StabilityReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `Bᵀ Λᵀ B` for the orthonormal basis `B` of `n`, after checking that
/// `Λᵀ` maps `n` into itself.
pub fn restrict_generator_to_n(m: &FiniteHmm, n: &Subspace) -> Result<DMatrix<f64>, VerdictError> {
    if n.ambient_dim() != m.d() {
        return Err(VerdictError::DimensionMismatch {
            expected: m.d(),
            got: n.ambient_dim(),
        });
    }
    if n.dim() == 0 {
        return Err(VerdictError::EmptySubspace);
    }
    let b = n.basis();
    let gt = m.generator().transpose();
    let image = &gt * b;
    let restricted = b.transpose() * &image;
    let residual = (&image - b * &restricted).norm();
    let scale = m.generator().amax().max(1.0);
    if residual >= INVARIANCE_TOL * scale {
        return Err(VerdictError::InvarianceViolation(residual));
    }
    Ok(restricted)
}

pub fn assess(
    m: &FiniteHmm,
    obs: &ObservabilityResult,
    dec: &ChainDecomposition,
) -> Result<StabilityReport, VerdictError> {
    let dim_n = obs.nonobservable.dim();
    let (detectable, detect_evidence) = if dim_n == 0 {
        (
            true,
            DetectEvidence {
                dim_n,
                max_real_part: MaxRealPart::NTrivial,
                restricted_rank: None,
                rank_hurwitz_agree: true,
            },
        )
    } else {
        let restricted = restrict_generator_to_n(m, &obs.nonobservable)?;
        let hurwitz = is_hurwitz(&restricted, DEFAULT_HURWITZ_MARGIN)?;
        // Scaled by the generator: Λᵀ|_N can be pure rounding noise.
        let rank = numerical_rank_scaled(&restricted, DEFAULT_RANK_TOL, m.generator().amax());
        let full_rank = rank == dim_n;
        debug_assert_eq!(
            hurwitz.hurwitz, full_rank,
            "rank and Hurwitz tests disagree"
        );
        (
            obs.is_observable || hurwitz.hurwitz,
            DetectEvidence {
                dim_n,
                max_real_part: MaxRealPart::Value(hurwitz.max_real_part),
                restricted_rank: Some(rank),
                rank_hurwitz_agree: hurwitz.hurwitz == full_rank,
            },
        )
    };

    let kappa_positive = m.kappa() > 0.0;
    let criterion_applies = kappa_positive && m.obs_kind() == ObsKind::WhiteNoise;
    let num_ergodic_classes = dec.num_classes();
    let (stable, strong_stable) = if criterion_applies {
        (
            ConditionalVerdict {
                value: Verdict::from_bool(detectable),
                note: STABLE_NOTE.to_string(),
            },
            ConditionalVerdict {
                value: Verdict::from_bool(num_ergodic_classes == 1),
                note: STRONG_STABLE_NOTE.to_string(),
            },
        )
    } else {
        let na = ConditionalVerdict {
            value: Verdict::NotApplicable,
            note: NOT_APPLICABLE_NOTE.to_string(),
        };
        (na.clone(), na)
    };

    Ok(StabilityReport {
        observable: obs.is_observable,
        detectable,
        detect_evidence,
        stable,
        strong_stable,
        num_ergodic_classes,
        has_transient: dec.has_transient(),
        kappa_positive,
    })
}

/// Everything computed for one model.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub observability: ObservabilityResult,
    pub chain: ChainDecomposition,
    pub report: StabilityReport,
}

pub fn analyze(m: &FiniteHmm) -> Result<Analysis, VerdictError> {
    let observability = observable_space(m);
    let chain = decompose(m);
    let report = assess(m, &observability, &chain)?;
    Ok(Analysis {
        observability,
        chain,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::find_preset;

    fn report(name: &str) -> StabilityReport {
        analyze(&find_preset(name).unwrap().model).unwrap().report
    }

    fn flags(r: &StabilityReport) -> (bool, bool, Option<bool>, Option<bool>) {
        (
            r.observable,
            r.detectable,
            r.stable.value.as_bool(),
            r.strong_stable.value.as_bool(),
        )
    }

    #[test]
    fn restriction_examples() {
        let e2 = find_preset("E2").unwrap().model;
        let n = observable_space(&e2).nonobservable;
        let r = restrict_generator_to_n(&e2, &n).unwrap();
        assert_eq!(r.shape(), (1, 1));
        assert!((r[(0, 0)] + 2.0).abs() < 1e-12);

        let e4 = find_preset("E4").unwrap().model;
        let n = observable_space(&e4).nonobservable;
        assert_eq!(restrict_generator_to_n(&e4, &n).unwrap()[(0, 0)], 0.0);

        let e1 = find_preset("E1").unwrap().model;
        let n = observable_space(&e1).nonobservable;
        assert_eq!(
            restrict_generator_to_n(&e1, &n),
            Err(VerdictError::EmptySubspace)
        );
    }

    #[test]
    fn restriction_rejects_non_invariant_subspace() {
        let e2 = find_preset("E2").unwrap().model;
        let bad = Subspace::from_vectors(2, &[nalgebra::DVector::from_vec(vec![1.0, 0.0])], 1e-9);
        assert!(matches!(
            restrict_generator_to_n(&e2, &bad),
            Err(VerdictError::InvarianceViolation(_))
        ));
    }

    #[test]
    fn preset_verdicts() {
        assert_eq!(flags(&report("E1")), (true, true, Some(true), Some(true)));
        let e2 = report("E2");
        assert_eq!(flags(&e2), (false, true, Some(true), Some(true)));
        match e2.detect_evidence.max_real_part {
            MaxRealPart::Value(v) => assert!((v + 2.0).abs() < 1e-12),
            MaxRealPart::NTrivial => panic!("E2 has a nontrivial N"),
        }
        assert_eq!(flags(&report("E3")), (true, true, Some(true), Some(false)));
        let e4 = report("E4");
        assert_eq!(flags(&e4), (false, false, Some(false), Some(false)));
        assert_eq!(e4.detect_evidence.restricted_rank, Some(0));
        assert_eq!(e4.num_ergodic_classes, 2);
        let e5 = report("E5");
        assert_eq!(flags(&e5), (true, true, Some(true), Some(false)));
        assert!(e5.has_transient);
    }

    #[test]
    fn kappa_zero_and_counting_are_not_applicable() {
        let e2 = find_preset("E2").unwrap().model.with_kappa(0.0).unwrap();
        let r = analyze(&e2).unwrap().report;
        assert!(r.detectable);
        assert!(!r.kappa_positive);
        assert_eq!(r.stable.value, Verdict::NotApplicable);
        assert_eq!(r.strong_stable.value, Verdict::NotApplicable);

        let counting = FiniteHmm::new(
            vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
            vec![1.0, 2.0],
            1.0,
            ObsKind::Counting,
        )
        .unwrap();
        let r = analyze(&counting).unwrap().report;
        assert!(r.observable);
        assert_eq!(r.stable.value, Verdict::NotApplicable);
    }

    #[test]
    fn report_json_field_names() {
        let v: serde_json::Value = serde_json::from_str(&report("E2").to_json_pretty()).unwrap();
        for key in [
            "observable",
            "detectable",
            "detect_evidence",
            "stable",
            "strong_stable",
            "num_ergodic_classes",
            "has_transient",
            "kappa_positive",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["detect_evidence"]["dim_N"], 1);
        assert_eq!(v["stable"]["value"], true);
        let e1: serde_json::Value = serde_json::from_str(&report("E1").to_json_pretty()).unwrap();
        assert_eq!(e1["detect_evidence"]["max_real_part"], "N trivial");
    }
}
