//! Weighted undirected graphs, incidence matrices and weighted Laplacians.
//!
//! Edges are stored in canonical orientation `i < j` and sorted
//! lexicographically. The incidence matrix has one row per node and one
//! column per edge, with `+1` at the lower-indexed endpoint and `-1` at the
//! other one, so that `E diag(w) E^T` is the weighted Laplacian.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::DenseMatrix;

/// The generator behind every seeded operation in this crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedGraph {
    n: usize,
    edges: Vec<Edge>,
}

impl WeightedGraph {
    /// Builds a graph from `(i, j, weight)` triples. Orientation of the input
    /// pairs is irrelevant; self-loops, duplicates, out-of-range nodes and
    /// non-positive weights are rejected.
    pub fn new<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        if n == 0 {
            return Err(Error::InvalidGraph("node count must be positive".into()));
        }
        let mut map = BTreeMap::new();
        for (a, b, w) in edges {
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for n = {n}"
                )));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) has non-positive weight {w}"
                )));
            }
            let key = (a.min(b), a.max(b));
            if map.insert(key, w).is_some() {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge ({}, {})",
                    key.0, key.1
                )));
            }
        }
        let edges = map
            .into_iter()
            .map(|((i, j), weight)| Edge { i, j, weight })
            .collect();
        Ok(WeightedGraph { n, edges })
    }

    pub fn empty(n: usize) -> Result<Self> {
        Self::new(n, std::iter::empty())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let key = (i.min(j), i.max(j));
        self.edges
            .binary_search_by(|e| (e.i, e.j).cmp(&key))
            .ok()
            .map(|k| self.edges[k].weight)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.weight(i, j).is_some()
    }

    /// Same edge set with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.n, self.edges.iter().map(|e| (e.i, e.j, e.weight * c)))
    }

    /// Relabels node `k` as `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n)?;
        Self::new(
            self.n,
            self.edges.iter().map(|e| (perm[e.i], perm[e.j], e.weight)),
        )
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for e in &self.edges {
            deg[e.i] += 1;
            deg[e.j] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut components = self.n;
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
            if a != b {
                parent[a] = b;
                components -= 1;
            }
        }
        components == 1
    }

    /// Symmetric weighted adjacency matrix.
    pub fn adjacency(&self) -> DenseMatrix {
        let mut a = DMatrix::zeros(self.n, self.n);
        for e in &self.edges {
            a[(e.i, e.j)] = e.weight;
            a[(e.j, e.i)] = e.weight;
        }
        a
    }

    /// Edge-list CSV with header `i,j,weight`. Weights are printed with the
    /// shortest representation that parses back to the same `f64`.
    pub fn to_edge_csv(&self) -> String {
        let mut s = String::from("i,j,weight\n");
        for e in &self.edges {
            let _ = writeln!(s, "{},{},{}", e.i, e.j, e.weight);
        }
        s
    }

    pub fn write_edge_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_edge_csv().as_bytes())?;
        Ok(())
    }

    /// Parses the edge-list CSV format. The node count is not stored in the
    /// file and must be supplied.
    pub fn from_edge_csv(n: usize, reader: impl BufRead) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if lineno == 0 {
                if line != "i,j,weight" {
                    return Err(Error::Parse(format!(
                        "line 1: expected header `i,j,weight`, found `{line}`"
                    )));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "line {}: expected 3 fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let bad = |what: &str| Error::Parse(format!("line {}: bad {what}", lineno + 1));
            let i = fields[0].trim().parse().map_err(|_| bad("node index i"))?;
            let j = fields[1].trim().parse().map_err(|_| bad("node index j"))?;
            let w = fields[2].trim().parse().map_err(|_| bad("weight"))?;
            edges.push((i, j, w));
        }
        Self::new(n, edges)
    }

    pub fn read_edge_csv(n: usize, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_edge_csv(n, std::io::BufReader::new(f))
    }

    /// Adjacency-matrix CSV (no header), one row per node.
    pub fn to_adjacency_csv(&self) -> String {
        matrix_to_csv(&self.adjacency())
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: perm.len(),
        });
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
    }
    Ok(())
}

pub fn matrix_to_csv(m: &DenseMatrix) -> String {
    let mut s = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", m[(r, c)]);
        }
        s.push('\n');
    }
    s
}

/// Node-by-edge incidence matrix.
pub fn incidence_matrix(g: &WeightedGraph) -> DenseMatrix {
    let mut e = DMatrix::zeros(g.n(), g.num_edges());
    for (k, edge) in g.edges().iter().enumerate() {
        e[(edge.i, k)] = 1.0;
        e[(edge.j, k)] = -1.0;
    }
    e
}

/// `E diag(weight_e * edge_scale_e) E^T`, assembled edge by edge.
pub fn weighted_laplacian(g: &WeightedGraph, edge_scale: &[f64]) -> Result<DenseMatrix> {
    if edge_scale.len() != g.num_edges() {
        return Err(Error::Dimension {
            expected: g.num_edges(),
            got: edge_scale.len(),
        });
    }
    if let Some(s) = edge_scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "edge scale must be positive, got {s}"
        )));
    }
    let mut l = DMatrix::zeros(g.n(), g.n());
    for (e, s) in g.edges().iter().zip(edge_scale) {
        let w = e.weight * s;
        l[(e.i, e.i)] += w;
        l[(e.j, e.j)] += w;
        l[(e.i, e.j)] -= w;
        l[(e.j, e.i)] -= w;
    }
    Ok(l)
}

/// Weighted Laplacian with unit edge scale.
pub fn laplacian(g: &WeightedGraph) -> DenseMatrix {
    weighted_laplacian(g, &vec![1.0; g.num_edges()]).expect("unit scale is valid")
}

/// Sample from the log-uniform distribution on `[lo, hi]`.
pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    let u: f64 = rng.random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

/// Erdős–Rényi graph with log-uniform weights. Pairs `(i, j)`, `i < j`, are
/// visited in lexicographic order; each draws a Bernoulli(p) and, if kept, a
/// weight. Output is deterministic for a fixed seed.
pub fn random_graph(n: usize, p: f64, weight_range: (f64, f64), seed: u64) -> Result<WeightedGraph> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "random graph needs at least 2 nodes, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "edge probability must lie in [0, 1], got {p}"
        )));
    }
    let (lo, hi) = weight_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "weight range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j, log_uniform(&mut rng, lo, hi)));
            }
        }
    }
    WeightedGraph::new(n, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k3() -> WeightedGraph {
        WeightedGraph::new(3, [(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)]).unwrap()
    }

    #[test]
    fn incidence_of_path() {
        let g = WeightedGraph::new(3, [(0, 1, 1.0), (2, 1, 1.0)]).unwrap();
        let e = incidence_matrix(&g);
        assert_eq!(e.shape(), (3, 2));
        assert_eq!(e.column(0).as_slice(), &[1.0, -1.0, 0.0]);
        assert_eq!(e.column(1).as_slice(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn incidence_single_edge_and_empty() {
        let g = WeightedGraph::new(2, [(0, 1, 3.0)]).unwrap();
        assert_eq!(incidence_matrix(&g).as_slice(), &[1.0, -1.0]);
        let e = incidence_matrix(&WeightedGraph::empty(3).unwrap());
        assert_eq!(e.shape(), (3, 0));
    }

    #[test]
    fn laplacian_of_k3() {
        let l = laplacian(&k3());
        let expected = DMatrix::from_row_slice(3, 3, &[2., -1., -1., -1., 2., -1., -1., -1., 2.]);
        assert_eq!(l, expected);
    }

    #[test]
    fn laplacian_single_weighted_edge() {
        let g = WeightedGraph::new(2, [(0, 1, 2.0)]).unwrap();
        assert_eq!(laplacian(&g), DMatrix::from_row_slice(2, 2, &[2., -2., -2., 2.]));
    }

    #[test]
    fn laplacian_matches_incidence_product() {
        let g = random_graph(12, 0.4, (0.3, 10.0), 7).unwrap();
        let scale: Vec<f64> = (0..g.num_edges()).map(|k| 0.5 + k as f64 * 0.1).collect();
        let e = incidence_matrix(&g);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            g.num_edges(),
            g.edges().iter().zip(&scale).map(|(e, s)| e.weight * s),
        ));
        let l = weighted_laplacian(&g, &scale).unwrap();
        let prod = &e * d * e.transpose();
        assert!((l - prod).amax() < 1e-12);
    }

    #[test]
    fn laplacian_rejects_bad_scale() {
        let g = k3();
        assert!(weighted_laplacian(&g, &[1.0, 0.0, 1.0]).is_err());
        assert!(weighted_laplacian(&g, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn graph_invariants_enforced() {
        assert!(WeightedGraph::new(3, [(1, 1, 1.0)]).is_err());
        assert!(WeightedGraph::new(3, [(0, 1, 1.0), (1, 0, 2.0)]).is_err());
        assert!(WeightedGraph::new(3, [(0, 1, -1.0)]).is_err());
        assert!(WeightedGraph::new(3, [(0, 3, 1.0)]).is_err());
        let g = WeightedGraph::new(3, [(2, 0, 1.5)]).unwrap();
        assert_eq!((g.edges()[0].i, g.edges()[0].j), (0, 2));
        assert_eq!(g.weight(2, 0), Some(1.5));
    }

    #[test]
    fn random_graph_extremes() {
        assert_eq!(random_graph(10, 0.0, (1.0, 2.0), 1).unwrap().num_edges(), 0);
        assert_eq!(random_graph(3, 1.0, (1.0, 2.0), 1).unwrap().num_edges(), 3);
        assert!(random_graph(1, 0.5, (1.0, 2.0), 1).is_err());
        assert!(random_graph(5, 1.5, (1.0, 2.0), 1).is_err());
        assert!(random_graph(5, 0.5, (0.0, 2.0), 1).is_err());
    }

    #[test]
    fn random_graph_edge_count_within_three_sigma() {
        // Binomial(4950, 0.15): mean 742.5, sd 25.1.
        let g = random_graph(100, 0.15, (0.3, 10.0), 2024).unwrap();
        assert!((668..=817).contains(&g.num_edges()), "{}", g.num_edges());
        for e in g.edges() {
            assert!(e.weight >= 0.3 && e.weight <= 10.0);
        }
    }

    #[test]
    fn random_graph_is_reproducible() {
        let a = random_graph(30, 0.3, (0.3, 10.0), 99).unwrap();
        let b = random_graph(30, 0.3, (0.3, 10.0), 99).unwrap();
        assert_eq!(a, b);
        let c = random_graph(30, 0.3, (0.3, 10.0), 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn log_uniform_median() {
        // Median of log-uniform on [1, 100] is 10.
        let mut rng = seeded_rng(5);
        let mut xs: Vec<f64> = (0..20001).map(|_| log_uniform(&mut rng, 1.0, 100.0)).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[10000].log10() - 1.0).abs() < 0.03, "{}", xs[10000]);
    }

    #[test]
    fn edge_csv_round_trip_is_exact() {
        let g = random_graph(15, 0.5, (0.3, 10.0), 3).unwrap();
        let csv = g.to_edge_csv();
        let back = WeightedGraph::from_edge_csv(15, csv.as_bytes()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn edge_csv_rejects_bad_header() {
        let err = WeightedGraph::from_edge_csv(3, "a,b,c\n0,1,1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn connectivity() {
        assert!(k3().is_connected());
        assert!(!WeightedGraph::new(3, [(0, 1, 1.0)]).unwrap().is_connected());
    }
}
