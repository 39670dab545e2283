//! Observable and nonobservable spaces of a finite-state model.
//!
//! The observable space is the smallest subspace of ℝ^d that contains the
//! level-set indicators of `h` and is invariant under the generator and every
//! level-set projection. It is computed by the growing sequence
//! `Z_1 = span{H_b 𝟙}`, `Z_{n+1} = Z_n + ΛZ_n + Σ_b H_b Z_n`, which must stop
//! growing within `d − 1` expansions. Observation noise plays no role.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::model::{level_sets, FiniteHmm, LevelSetStructure};
use crate::numlin::{self, expm, numerical_rank, NumError, Subspace, DEFAULT_RANK_TOL};

/// Upper bound on the number of words enumerated by [`brute_force_o`].
pub const MAX_ORACLE_WORDS: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObsError {
    #[error("oracle would enumerate {0} words (limit {MAX_ORACLE_WORDS})")]
    ExplosionGuard(u64),
    #[error(transparent)]
    Numerical(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortcut {
    None,
    OneToOneH,
    RankTest,
}

#[derive(Debug, Clone)]
pub struct ObservabilityResult {
    pub observable: Subspace,
    pub nonobservable: Subspace,
    /// Expansions `Z_n → Z_{n+1}` that enlarged the space.
    pub iterations_used: usize,
    /// `dim Z_1, dim Z_2, …` up to and including the first repeated dimension.
    pub z_dims: Vec<usize>,
    pub is_observable: bool,
    pub shortcut_used: Shortcut,
}

/// Generator divided by its largest entry; spans do not depend on the scale
/// and the Gram–Schmidt threshold then sees O(1) vectors.
fn normalized_generator(m: &FiniteHmm) -> DMatrix<f64> {
    let g = m.generator();
    let scale = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if scale > 0.0 {
        g / scale
    } else {
        g.clone()
    }
}

fn indicators(ls: &LevelSetStructure) -> Vec<DVector<f64>> {
    (0..ls.len()).map(|k| ls.indicator(k)).collect()
}

/// `O_h = span{H_b 𝟙}`.
pub fn level_set_space(m: &FiniteHmm) -> Subspace {
    let ls = level_sets(m);
    Subspace::from_vectors(m.d(), &indicators(&ls), DEFAULT_RANK_TOL)
}

pub fn observable_space(m: &FiniteHmm) -> ObservabilityResult {
    let d = m.d();
    let ls = level_sets(m);
    let gen = normalized_generator(m);

    let mut z = Subspace::from_vectors(d, &indicators(&ls), DEFAULT_RANK_TOL);
    let mut z_dims = vec![z.dim()];
    loop {
        let mut candidates = Vec::with_capacity(z.dim() * (ls.len() + 1));
        for v in z.basis().column_iter() {
            let v = v.into_owned();
            candidates.push(&gen * &v);
            for k in 0..ls.len() {
                candidates.push(ls.apply(k, &v));
            }
        }
        let next = z.span_grow(&candidates);
        z_dims.push(next.dim());
        if next.dim() == z.dim() {
            break;
        }
        z = next;
    }
    let iterations_used = z_dims.len() - 2;
    let is_observable = z.dim() == d;
    let shortcut_used = if one_to_one_shortcut(m) {
        Shortcut::OneToOneH
    } else if linear_rank_test(m) {
        Shortcut::RankTest
    } else {
        Shortcut::None
    };
    debug_assert!(shortcut_used == Shortcut::None || is_observable);
    let nonobservable = z.orthogonal_complement();
    ObservabilityResult {
        observable: z,
        nonobservable,
        iterations_used,
        z_dims,
        is_observable,
        shortcut_used,
    }
}

/// Span of every word `H_{n_0} e^{Λδ_1} H_{n_1} ⋯ e^{Λδ_k} H_{n_k} 𝟙` with
/// `k ≤ depth` and `δ_i` drawn from `deltas`. Independent of
/// [`observable_space`]; used as an oracle for it.
pub fn brute_force_o(m: &FiniteHmm, depth: usize, deltas: &[f64]) -> Result<Subspace, ObsError> {
    let d = m.d();
    let ls = level_sets(m);
    let r = ls.len() as u64;
    let nd = deltas.len() as u64;
    let mut total: u64 = 0;
    let mut layer: u64 = r;
    for _ in 0..=depth {
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(r).saturating_mul(nd);
    }
    if total > MAX_ORACLE_WORDS {
        return Err(ObsError::ExplosionGuard(total));
    }

    let flows = deltas
        .iter()
        .map(|&dt| expm(m.generator(), dt))
        .collect::<Result<Vec<_>, _>>()?;
    let mut words = indicators(&ls);
    let mut space = Subspace::from_vectors(d, &words, DEFAULT_RANK_TOL);
    for _ in 0..depth {
        let mut next = Vec::with_capacity(words.len() * flows.len() * ls.len());
        for w in &words {
            for f in &flows {
                let fw = f * w;
                for k in 0..ls.len() {
                    next.push(ls.apply(k, &fw));
                }
            }
        }
        space = space.span_grow(&next);
        words = next;
    }
    Ok(space)
}

/// Krylov test `rank [C ΛC ⋯ Λ^{d−1}C] = d` with `C = [H_b 𝟙]`. Sufficient
/// for observability but not necessary.
pub fn linear_rank_test(m: &FiniteHmm) -> bool {
    let d = m.d();
    let ls = level_sets(m);
    let gen = normalized_generator(m);
    let r = ls.len();
    let mut krylov = DMatrix::zeros(d, r * d);
    let mut block: Vec<DVector<f64>> = indicators(&ls);
    for p in 0..d {
        for (k, c) in block.iter().enumerate() {
            krylov.set_column(p * r + k, c);
        }
        block = block.iter().map(|c| &gen * c).collect();
    }
    numerical_rank(&krylov, numlin::DEFAULT_RANK_TOL) == d
}

/// `h` takes `d` distinct values, so every state is its own level set.
pub fn one_to_one_shortcut(m: &FiniteHmm) -> bool {
    level_sets(m).len() == m.d()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::find_preset;

    fn e5() -> FiniteHmm {
        find_preset("E5").unwrap().model
    }

    #[test]
    fn e1_is_observable_from_level_sets() {
        let r = observable_space(&find_preset("E1").unwrap().model);
        assert_eq!(r.observable.dim(), 2);
        assert!(r.is_observable);
        assert_eq!(r.iterations_used, 0);
        assert_eq!(r.shortcut_used, Shortcut::OneToOneH);
        assert_eq!(r.nonobservable.dim(), 0);
    }

    #[test]
    fn e2_observable_space_is_constants() {
        let r = observable_space(&find_preset("E2").unwrap().model);
        assert_eq!(r.observable.dim(), 1);
        assert!(!r.is_observable);
        assert_eq!(r.shortcut_used, Shortcut::None);
        let w = r.nonobservable.basis().column(0);
        let s = 1.0 / 2f64.sqrt();
        assert!((w[0].abs() - s).abs() < 1e-12 && (w[0] + w[1]).abs() < 1e-12);
        assert_eq!(r.z_dims, vec![1, 1]);
    }

    #[test]
    fn e5_needs_one_expansion() {
        let r = observable_space(&e5());
        assert!(r.is_observable);
        assert_eq!(r.z_dims, vec![2, 3, 3]);
        assert_eq!(r.iterations_used, 1);
        assert_eq!(r.shortcut_used, Shortcut::RankTest);
    }

    #[test]
    fn brute_force_examples() {
        let e1 = find_preset("E1").unwrap().model;
        assert_eq!(brute_force_o(&e1, 0, &[1.0]).unwrap().dim(), 2);
        let e2 = find_preset("E2").unwrap().model;
        let s = brute_force_o(&e2, 3, &[0.5, 1.0]).unwrap();
        assert_eq!(s.dim(), 1);
        assert!(s.residual(&DVector::from_element(2, 1.0)) < 1e-12);
        assert_eq!(brute_force_o(&e5(), 2, &[1.0]).unwrap().dim(), 3);
        // depth 0 only sees the level-set indicators.
        assert_eq!(brute_force_o(&e5(), 0, &[1.0]).unwrap().dim(), 2);
    }

    #[test]
    fn brute_force_guard() {
        let m = crate::model::cyclic_parity_model(1.0).unwrap();
        // r = 2, 20 deltas, depth 8: far beyond the limit.
        let deltas: Vec<f64> = (1..=20).map(|i| i as f64 * 0.1).collect();
        assert!(matches!(
            brute_force_o(&m, 8, &deltas),
            Err(ObsError::ExplosionGuard(_))
        ));
    }

    #[test]
    fn rank_test_examples() {
        assert!(linear_rank_test(&find_preset("E1").unwrap().model));
        assert!(!linear_rank_test(&find_preset("E2").unwrap().model));
        assert!(linear_rank_test(&e5()));
    }

    #[test]
    fn one_to_one_examples() {
        let mk = |h: Vec<f64>| {
            let d = h.len();
            FiniteHmm::white_noise(vec![vec![0.0; d]; d], h, 1.0).unwrap()
        };
        assert!(one_to_one_shortcut(&mk(vec![0.0, 1.0])));
        assert!(!one_to_one_shortcut(&mk(vec![0.0, 0.0])));
        assert!(!one_to_one_shortcut(&mk(vec![0.0, 1.0, 0.0])));
    }

    #[test]
    fn cyclic_parity_model_has_two_dimensional_nonobservable_space() {
        let r = observable_space(&crate::model::cyclic_parity_model(1.0).unwrap());
        assert_eq!(r.observable.dim(), 2);
        assert_eq!(r.nonobservable.dim(), 2);
    }

    #[test]
    fn relabeling_values_leaves_space_unchanged() {
        let g = vec![
            vec![-2.0, 1.0, 1.0, 0.0],
            vec![0.5, -0.5, 0.0, 0.0],
            vec![0.0, 0.0, -1.0, 1.0],
            vec![0.0, 1.0, 1.0, -2.0],
        ];
        let a = FiniteHmm::white_noise(g.clone(), vec![0.0, 1.0, 0.0, 1.0], 1.0).unwrap();
        let b = FiniteHmm::white_noise(g, vec![7.5, -3.0, 7.5, -3.0], 0.2).unwrap();
        let ra = observable_space(&a);
        let rb = observable_space(&b);
        assert_eq!(ra.observable.dim(), rb.observable.dim());
        // Sorted value order flips, so the starting indicators are permuted;
        // compare the spaces through projections.
        for v in rb.observable.basis().column_iter() {
            assert!(ra.observable.residual(&v.into_owned()) < 1e-12);
        }
    }
}
