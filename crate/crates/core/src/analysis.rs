//! Comparison against ground truth, the rigidity threshold and the
//! measurement-error scale.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WeightedGraph;
use crate::reconstruction::{laplacian_lambda_max, ReconstructionResult};
use crate::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeError {
    pub i: usize,
    pub j: usize,
    pub true_weight: f64,
    pub est_weight: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphComparison {
    pub precision: f64,
    pub recall: f64,
    pub true_edges: usize,
    pub detected_edges: usize,
    pub missing: Vec<(usize, usize)>,
    pub spurious: Vec<(usize, usize)>,
    pub max_abs_weight_err: f64,
    pub max_rel_weight_err: f64,
    /// Edges present in both graphs with a determined estimate.
    pub per_edge: Vec<EdgeError>,
}

impl GraphComparison {
    pub fn exact_edges(&self) -> bool {
        self.missing.is_empty() && self.spurious.is_empty()
    }

    /// CSV `i,j,true_weight,est_weight,abs_err,rel_err`.
    pub fn edge_errors_csv(&self) -> String {
        let mut s = String::from("i,j,true_weight,est_weight,abs_err,rel_err\n");
        for e in &self.per_edge {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.i, e.j, e.true_weight, e.est_weight, e.abs_err, e.rel_err
            ));
        }
        s
    }
}

/// Compares an edge set with weights against the true graph. Detected pairs
/// without a weight count for precision and recall only.
pub fn compare_edges(
    truth: &WeightedGraph,
    detected: &[(usize, usize)],
    estimated: &WeightedGraph,
) -> Result<GraphComparison> {
    if truth.n() != estimated.n() {
        return Err(Error::Dimension {
            expected: truth.n(),
            got: estimated.n(),
        });
    }
    let t: BTreeSet<(usize, usize)> = truth.edges().iter().map(|e| (e.i, e.j)).collect();
    let d: BTreeSet<(usize, usize)> = detected
        .iter()
        .map(|&(i, j)| (i.min(j), i.max(j)))
        .chain(estimated.edges().iter().map(|e| (e.i, e.j)))
        .collect();
    let hit = t.intersection(&d).count();
    let precision = if d.is_empty() { 1.0 } else { hit as f64 / d.len() as f64 };
    let recall = if t.is_empty() { 1.0 } else { hit as f64 / t.len() as f64 };

    let mut per_edge = Vec::new();
    for e in truth.edges() {
        if let Some(p) = estimated.weight(e.i, e.j) {
            let abs_err = (p - e.weight).abs();
            per_edge.push(EdgeError {
                i: e.i,
                j: e.j,
                true_weight: e.weight,
                est_weight: p,
                abs_err,
                rel_err: abs_err / e.weight,
            });
        }
    }
    Ok(GraphComparison {
        precision,
        recall,
        true_edges: t.len(),
        detected_edges: d.len(),
        missing: t.difference(&d).copied().collect(),
        spurious: d.difference(&t).copied().collect(),
        max_abs_weight_err: per_edge.iter().map(|e| e.abs_err).fold(0.0, f64::max),
        max_rel_weight_err: per_edge.iter().map(|e| e.rel_err).fold(0.0, f64::max),
        per_edge,
    })
}

pub fn compare(truth: &WeightedGraph, est: &ReconstructionResult) -> Result<GraphComparison> {
    compare_edges(truth, &est.edge_set(), &est.graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rigidity {
    /// `m <= min(nu d) / 4`.
    pub valid: bool,
    /// Threshold guaranteeing the exact edge set.
    pub epsilon: f64,
    /// Entrywise error bound the guarantee was computed for.
    pub m: f64,
}

impl Rigidity {
    /// Per-edge weight error bound `m / d_ij` (with `b_i d_ij` for gains
    /// other than one).
    pub fn weight_err_bound(&self, d_ij: f64) -> f64 {
        self.m / d_ij
    }
}

/// Rigidity of thresholding against an entrywise error of at most `m` in
/// the connection matrix. `min_nu_d` is the smallest `b_i nu_ij d_ij` over
/// edges, from ground truth in tests or from recovered values in the field.
pub fn rigidity_threshold(m: f64, min_nu_d: f64) -> Result<Rigidity> {
    if !(m >= 0.0 && m.is_finite()) || !(min_nu_d > 0.0) {
        return Err(Error::InvalidArgument(
            "rigidity needs m >= 0 and min_nu_d > 0".into(),
        ));
    }
    Ok(Rigidity {
        valid: m <= 0.25 * min_nu_d,
        epsilon: 2.0 * m,
        m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementErrorScale {
    /// `||Delta_Y delta_Y^{-1}||_2`.
    pub relative: f64,
    /// `sqrt(n) (1 + max(nu d) lambda_max) ||Delta_Y delta_Y^{-1}||_2`.
    pub scale: f64,
    /// `||Delta_Y||_2 / ||delta_Y||_2`.
    pub ratio: f64,
    /// False when the ratio is 0.1 or more and the first-order scale says little.
    pub reliable: bool,
}

/// Scale of the deviation in `M` caused by replacing `delta_y` with
/// `delta_y + big_delta_y`. `max_nu_d` and `lambda_max` come from the
/// recovered graph.
pub fn measurement_error_scale(
    delta_y: &DenseMatrix,
    big_delta_y: &DenseMatrix,
    max_nu_d: f64,
    lambda_max: f64,
) -> Result<MeasurementErrorScale> {
    let n = delta_y.nrows();
    if delta_y.shape() != (n, n) || big_delta_y.shape() != (n, n) {
        return Err(Error::Dimension {
            expected: n,
            got: big_delta_y.nrows(),
        });
    }
    // ||X dY^{-1}|| via the transposed solve dY^T Z = X^T
    let z = delta_y
        .transpose()
        .lu()
        .solve(&big_delta_y.transpose())
        .ok_or_else(|| Error::IllConditioned { cond: f64::INFINITY })?;
    let relative = spectral_norm(&z);
    let ratio = spectral_norm(big_delta_y) / spectral_norm(delta_y);
    let reliable = ratio < 0.1;
    if !reliable {
        log::warn!("measurement error is not small against the probe responses (ratio {ratio:.3})");
    }
    Ok(MeasurementErrorScale {
        relative,
        scale: (n as f64).sqrt() * (1.0 + max_nu_d * lambda_max) * relative,
        ratio,
        reliable,
    })
}

/// The same scale with `max_nu_d` and `lambda_max` read off a reconstruction.
pub fn measurement_error_scale_for(
    result: &ReconstructionResult,
    big_delta_y: &DenseMatrix,
) -> Result<MeasurementErrorScale> {
    let max_nu_d = result
        .edges
        .iter()
        .filter_map(|e| e.weight.map(|w| w * e.d))
        .fold(0.0, f64::max);
    measurement_error_scale(
        &result.log.delta_y(),
        big_delta_y,
        max_nu_d,
        laplacian_lambda_max(&result.graph),
    )
}

pub fn spectral_norm(a: &DenseMatrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub runtime_sec: f64,
}

impl Metrics {
    pub fn new(cmp: &GraphComparison, kappa: f64, epsilon: f64, seed: u64, runtime_sec: f64) -> Self {
        Metrics {
            precision: cmp.precision,
            recall: cmp.recall,
            max_abs_err: cmp.max_abs_weight_err,
            max_rel_err: cmp.max_rel_weight_err,
            kappa,
            epsilon,
            seed,
            runtime_sec,
        }
    }

    /// Equality of every field except the wall-clock time.
    pub fn same_outcome(&self, other: &Metrics) -> bool {
        Metrics {
            runtime_sec: 0.0,
            ..self.clone()
        } == Metrics {
            runtime_sec: 0.0,
            ..other.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn identical_graphs() {
        let g = WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5)]).unwrap();
        let c = compare_edges(&g, &[], &g).unwrap();
        assert_eq!((c.precision, c.recall), (1.0, 1.0));
        assert_eq!((c.max_abs_weight_err, c.max_rel_weight_err), (0.0, 0.0));
        assert!(c.exact_edges());
    }

    #[test]
    fn one_spurious_edge() {
        let g = WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5)]).unwrap();
        let h = WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5), (0, 3, 0.1)]).unwrap();
        let c = compare_edges(&g, &[], &h).unwrap();
        assert!((c.precision - 3.0 / 4.0).abs() < 1e-15);
        assert_eq!(c.recall, 1.0);
        assert_eq!(c.spurious, vec![(0, 3)]);
        assert_eq!(c.max_abs_weight_err, 0.0);
    }

    #[test]
    fn empty_graphs_are_perfect() {
        let g = WeightedGraph::empty(3).unwrap();
        let c = compare_edges(&g, &[], &g).unwrap();
        assert_eq!((c.precision, c.recall), (1.0, 1.0));
    }

    #[test]
    fn rigidity_examples() {
        let r = rigidity_threshold(1.0, 4.0).unwrap();
        assert!(r.valid);
        assert_eq!(r.epsilon, 2.0);
        assert!(!rigidity_threshold(2.0, 4.0).unwrap().valid);
        assert!(rigidity_threshold(-1.0, 4.0).is_err());
        assert!(rigidity_threshold(1.0, 0.0).is_err());
    }

    #[test]
    fn measurement_scale_examples() {
        let dy = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.3, 1.5, 0.2, 0.0, 0.4, 1.0]);
        let zero = DMatrix::zeros(3, 3);
        let s = measurement_error_scale(&dy, &zero, 1.0, 2.0).unwrap();
        assert_eq!(s.scale, 0.0);
        let c = 0.01;
        let s = measurement_error_scale(&dy, &(&dy * c), 1.0, 2.0).unwrap();
        assert!((s.relative - c).abs() < 1e-14);
        assert!(s.reliable);
        let s = measurement_error_scale(&dy, &(&dy * 0.5), 1.0, 2.0).unwrap();
        assert!(!s.reliable);
    }

    #[test]
    fn metrics_ignore_runtime() {
        let g = WeightedGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let c = compare_edges(&g, &[], &g).unwrap();
        let a = Metrics::new(&c, 1e-3, 0.01, 7, 1.0);
        let b = Metrics::new(&c, 1e-3, 0.01, 7, 2.5);
        assert!(a.same_outcome(&b));
        assert!(!a.same_outcome(&Metrics::new(&c, 1e-3, 0.01, 8, 1.0)));
    }
}
