//! Adjacency, the symmetric-normalized convolution support and the
//! destination-conditioned node features consumed by the model.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::constellation::{central_angle, TopologySnapshot, Vec3};
use crate::error::{Error, Result};

/// Symmetric 0/1 adjacency with zero diagonal, stored as sorted neighbor rows (CSR).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl AdjacencyMatrix {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Argument(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::Argument(format!("self-loop on node {i}")));
            }
            pairs.push((i, j));
            pairs.push((j, i));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _) in &pairs {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let cols = pairs.into_iter().map(|(_, j)| j).collect();
        Ok(Self { row_ptr, cols })
    }

    /// Builds from per-node neighbor rows that are already sorted, symmetric and
    /// free of self-loops.
    pub(crate) fn from_sorted_rows<R: IntoIterator<Item = usize>>(rows: impl IntoIterator<Item = R>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for row in rows {
            cols.extend(row);
            row_ptr.push(cols.len());
        }
        Self { row_ptr, cols }
    }

    pub fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        u8::from(self.neighbors(i).binary_search(&j).is_ok())
    }

    pub fn is_linked(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == 1
    }

    /// Sorted neighbor ids of `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n()).map(|i| self.degree(i)).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.cols.len() / 2
    }

    /// Edges `(i, j)` with `i < j` in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n()).flat_map(move |i| {
            self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j))
        })
    }

    fn check_node(&self, d: usize) -> Result<()> {
        if d >= self.n() {
            return Err(Error::Argument(format!(
                "node {d} out of range for {} nodes",
                self.n()
            )));
        }
        Ok(())
    }
}

pub fn adjacency(snapshot: &TopologySnapshot) -> AdjacencyMatrix {
    AdjacencyMatrix::from_edges(snapshot.node_count, snapshot.links.iter().map(|l| (l.a, l.b)))
        .expect("snapshot links are validated on construction")
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree diagonal of `A + I`, stored as CSR.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (i, j, v) in self.triplets() {
            out[[i, j]] = v;
        }
        out
    }

    /// Nonzero entries `(row, col, value)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.cols[k], self.values[k]))
        })
    }

    /// Rebuilds from row-major triplets, e.g. when reading a dataset file.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(i, j, v) in triplets {
            if i >= n || j >= n || prev.is_some_and(|p| p >= (i, j)) {
                return Err(Error::Argument(format!(
                    "triplet ({i}, {j}) out of order or out of range for {n} nodes"
                )));
            }
            prev = Some((i, j));
            row_ptr[i + 1] += 1;
            cols.push(j);
            values.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n,
            row_ptr,
            cols,
            values,
        })
    }

    /// `self * rhs` for an `n x f` dense right-hand side.
    pub fn matmul(&self, rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if rhs.nrows() != self.n {
            return Err(Error::dim("normalized adjacency product", self.n, rhs.nrows()));
        }
        let f = rhs.ncols();
        let rhs = rhs.as_standard_layout();
        let src = rhs.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n * f];
        for i in 0..self.n {
            let dst = &mut out[i * f..(i + 1) * f];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let (w, j) = (self.values[k], self.cols[k]);
                let row = &src[j * f..(j + 1) * f];
                for c in 0..f {
                    dst[c] += w * row[c];
                }
            }
        }
        Ok(Array2::from_shape_vec((self.n, f), out).expect("length is n * f"))
    }
}

pub fn normalize(a: &AdjacencyMatrix) -> NormalizedAdjacency {
    let n = a.n();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((a.degree(i) + 1) as f64).sqrt())
        .collect();
    let nnz = n + 2 * a.edge_count();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    row_ptr.push(0);
    for i in 0..n {
        // Neighbors are sorted; splice the self-loop in at its column position.
        let mut pushed_self = false;
        for &j in a.neighbors(i) {
            if !pushed_self && j > i {
                cols.push(i);
                values.push(inv_sqrt[i] * inv_sqrt[i]);
                pushed_self = true;
            }
            cols.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        if !pushed_self {
            cols.push(i);
            values.push(inv_sqrt[i] * inv_sqrt[i]);
        }
        row_ptr.push(cols.len());
    }
    NormalizedAdjacency {
        n,
        row_ptr,
        cols,
        values,
    }
}

/// Proximity of every node to `d`: 1 for one-hop neighbors, 0.5 for nodes exactly
/// two hops away, 0 otherwise (including `d` itself).
pub fn proximity_code(a: &AdjacencyMatrix, d: usize) -> Result<Vec<f64>> {
    a.check_node(d)?;
    let mut code = vec![0.0; a.n()];
    for &j in a.neighbors(d) {
        code[j] = 1.0;
    }
    for &j in a.neighbors(d) {
        for &k in a.neighbors(j) {
            if k != d && code[k] == 0.0 {
                code[k] = 0.5;
            }
        }
    }
    Ok(code)
}

/// Number of common neighbors of each node with `d` (two-hop paths into `d`);
/// zero at `d`.
fn common_neighbor_counts(a: &AdjacencyMatrix, d: usize) -> Vec<usize> {
    let mut counts = vec![0usize; a.n()];
    for &j in a.neighbors(d) {
        for &k in a.neighbors(j) {
            if k != d {
                counts[k] += 1;
            }
        }
    }
    counts
}

/// Which columns make up the low-order input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureLayout {
    /// Destination indicator and normalized degree.
    Topological,
    /// Topological columns plus the normalized central angle to the destination.
    #[default]
    Geometric,
}

impl FeatureLayout {
    pub fn low_width(self) -> usize {
        match self {
            FeatureLayout::Topological => 2,
            FeatureLayout::Geometric => 3,
        }
    }

    pub fn high_width(self) -> usize {
        self.low_width() + 2
    }

    pub fn from_low_width(f_low: usize) -> Option<Self> {
        match f_low {
            2 => Some(FeatureLayout::Topological),
            3 => Some(FeatureLayout::Geometric),
            _ => None,
        }
    }
}

impl std::str::FromStr for FeatureLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topological" => Ok(FeatureLayout::Topological),
            "geometric" => Ok(FeatureLayout::Geometric),
            other => Err(Error::Config(format!(
                "unknown feature layout {other:?} (expected topological or geometric)"
            ))),
        }
    }
}

/// Low-order and high-order (spliced) inputs for one destination.
///
/// Low-order columns: destination indicator, degree / max degree and, for the
/// geometric layout, central angle to the destination / pi. High-order rows append
/// the proximity code and the common-neighbor count with the destination / max degree.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub destination: usize,
    pub low_order: Array2<f64>,
    pub high_order: Array2<f64>,
}

impl NodeFeatures {
    pub fn n(&self) -> usize {
        self.low_order.nrows()
    }

    pub fn layout(&self) -> Option<FeatureLayout> {
        FeatureLayout::from_low_width(self.low_order.ncols())
    }
}

pub fn build_features(
    a: &AdjacencyMatrix,
    d: usize,
    layout: FeatureLayout,
    positions: Option<&[Vec3]>,
) -> Result<NodeFeatures> {
    a.check_node(d)?;
    let n = a.n();
    let max_degree = a.max_degree().max(1) as f64;
    let angles = match layout {
        FeatureLayout::Topological => None,
        FeatureLayout::Geometric => {
            let pos = positions.ok_or_else(|| {
                Error::Argument("geometric features need node positions".into())
            })?;
            if pos.len() != n {
                return Err(Error::dim("node positions", n, pos.len()));
            }
            Some(
                pos.iter()
                    .map(|&p| central_angle(p, pos[d]) / PI)
                    .collect::<Vec<_>>(),
            )
        }
    };
    let proximity = proximity_code(a, d)?;
    let common = common_neighbor_counts(a, d);

    let f_low = layout.low_width();
    let mut low = Array2::zeros((n, f_low));
    let mut high = Array2::zeros((n, f_low + 2));
    for i in 0..n {
        low[[i, 0]] = if i == d { 1.0 } else { 0.0 };
        low[[i, 1]] = a.degree(i) as f64 / max_degree;
        if let Some(angles) = &angles {
            low[[i, 2]] = angles[i];
        }
        for c in 0..f_low {
            high[[i, c]] = low[[i, c]];
        }
        high[[i, f_low]] = proximity[i];
        high[[i, f_low + 1]] = common[i] as f64 / max_degree;
    }
    Ok(NodeFeatures {
        destination: d,
        low_order: low,
        high_order: high,
    })
}
