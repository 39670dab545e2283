//! Class structure of the signal chain and its forward (Kolmogorov) flow.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;

use crate::model::FiniteHmm;
use crate::numlin::{expm, NumError};
use crate::observability::ObservabilityResult;

/// Off-diagonal rates at or below this are treated as structural zeros.
pub const EDGE_TOL: f64 = 1e-12;
/// Residual bound for "indicator lies in the observable space".
pub const MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainDecomposition {
    /// Closed communicating classes, each sorted, ordered by smallest state.
    pub ergodic_classes: Vec<Vec<usize>>,
    pub transient: Vec<usize>,
    /// Stationary law of each ergodic class as a length-`d` vector
    /// supported on that class.
    pub stationary: Vec<Vec<f64>>,
}

impl ChainDecomposition {
    pub fn num_classes(&self) -> usize {
        self.ergodic_classes.len()
    }

    pub fn has_transient(&self) -> bool {
        !self.transient.is_empty()
    }

    pub fn class_indicator(&self, class: usize, d: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        for &i in &self.ergodic_classes[class] {
            v[i] = 1.0;
        }
        v
    }
}

pub fn decompose(m: &FiniteHmm) -> ChainDecomposition {
    let d = m.d();
    let g = m.generator();
    let mut graph = DiGraph::<(), ()>::with_capacity(d, d * d);
    let nodes: Vec<_> = (0..d).map(|_| graph.add_node(())).collect();
    for i in 0..d {
        for j in 0..d {
            if i != j && g[(i, j)] > EDGE_TOL {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut components: Vec<Vec<usize>> = tarjan_scc(&graph)
        .into_iter()
        .map(|c| {
            let mut c: Vec<usize> = c.into_iter().map(|n| n.index()).collect();
            c.sort_unstable();
            c
        })
        .collect();
    components.sort_by_key(|c| c[0]);

    let mut ergodic_classes = Vec::new();
    let mut transient = Vec::new();
    for comp in components {
        let mut member = vec![false; d];
        for &i in &comp {
            member[i] = true;
        }
        let closed = comp
            .iter()
            .all(|&i| (0..d).all(|k| member[k] || g[(i, k)] <= EDGE_TOL));
        if closed {
            ergodic_classes.push(comp);
        } else {
            transient.extend(comp);
        }
    }
    transient.sort_unstable();
    let stationary = ergodic_classes
        .iter()
        .map(|c| class_stationary(g, c, d))
        .collect();
    ChainDecomposition {
        ergodic_classes,
        transient,
        stationary,
    }
}

/// Least-squares solution of `[Λ_Cᵀ; 𝟙ᵀ] π = [0; 1]` on a closed class `C`.
fn class_stationary(g: &DMatrix<f64>, class: &[usize], d: usize) -> Vec<f64> {
    let c = class.len();
    let mut a = DMatrix::zeros(c + 1, c);
    for (r, &j) in class.iter().enumerate() {
        for (col, &i) in class.iter().enumerate() {
            a[(r, col)] = g[(i, j)];
        }
    }
    for col in 0..c {
        a[(c, col)] = 1.0;
    }
    let mut b = DVector::zeros(c + 1);
    b[c] = 1.0;
    let pi = a
        .svd(true, true)
        .solve(&b, 0.0)
        .expect("SVD with both factors computed");
    let clipped: Vec<f64> = pi.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let mut out = vec![0.0; d];
    for (k, &i) in class.iter().enumerate() {
        out[i] = clipped[k] / total;
    }
    out
}

/// `p_t = e^{Λᵀ t} p_0`.
pub fn forward_flow(m: &FiniteHmm, p0: &[f64], t: f64) -> Result<Vec<f64>, NumError> {
    let d = m.d();
    if p0.len() != d {
        return Err(NumError::DimensionMismatch {
            expected: d,
            got: p0.len(),
        });
    }
    let flow = expm(&m.generator().transpose(), t)?;
    Ok((flow * DVector::from_column_slice(p0))
        .iter()
        .cloned()
        .collect())
}

/// Whether each ergodic-class indicator lies in the observable space.
pub fn indicator_in_o_check(
    m: &FiniteHmm,
    dec: &ChainDecomposition,
    obs: &ObservabilityResult,
) -> Vec<bool> {
    let d = m.d();
    (0..dec.num_classes())
        .map(|k| obs.observable.residual(&dec.class_indicator(k, d)) < MEMBERSHIP_TOL)
        .collect()
}
