//! Exact shortest-path computations and the labeled training dataset.
//!
//! Hop counts are the regression target, so every path search here ranks by hop
//! count (or delay) first, then by the other metric, then by the smallest next node
//! id. That ordering makes all oracles fully deterministic.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::constellation::{self, ConstellationConfig, IslPolicy, TopologySnapshot};
use crate::error::{Error, Result};
use crate::graph::{self, AdjacencyMatrix, FeatureLayout, NodeFeatures, NormalizedAdjacency};
use crate::rng;

/// Sentinel stored in [`DistanceField::values`] for nodes that cannot reach the destination.
pub const UNREACHABLE: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Exact,
    Predicted,
}

/// Per-node distance to a fixed destination, either exact hop counts or model output.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub destination: usize,
    pub values: Vec<f64>,
    pub kind: FieldKind,
}

impl DistanceField {
    pub fn hops(&self, i: usize) -> Option<u32> {
        let v = self.values[i];
        (v.is_finite() && self.kind == FieldKind::Exact).then_some(v as u32)
    }

    pub fn is_reachable(&self, i: usize) -> bool {
        self.values[i].is_finite()
    }
}

/// Breadth-first hop counts from every node to `d`.
pub fn hop_distances(a: &AdjacencyMatrix, d: usize) -> Result<DistanceField> {
    if d >= a.n() {
        return Err(Error::Argument(format!(
            "destination {d} out of range for {} nodes",
            a.n()
        )));
    }
    let mut values = vec![UNREACHABLE; a.n()];
    values[d] = 0.0;
    let mut queue = VecDeque::from([d]);
    while let Some(u) = queue.pop_front() {
        for &v in a.neighbors(u) {
            if values[v] == UNREACHABLE {
                values[v] = values[u] + 1.0;
                queue.push_back(v);
            }
        }
    }
    Ok(DistanceField {
        destination: d,
        values,
        kind: FieldKind::Exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Hops,
    Delay,
}

/// Undirected graph with per-link propagation delays (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl WeightedGraph {
    pub fn from_snapshot(snapshot: &TopologySnapshot) -> Self {
        Self::from_snapshot_filtered(snapshot, |_| true)
    }

    /// Keeps only the links whose index passes `keep`.
    pub fn from_snapshot_filtered(
        snapshot: &TopologySnapshot,
        mut keep: impl FnMut(usize) -> bool,
    ) -> Self {
        let mut neighbors = vec![Vec::new(); snapshot.node_count];
        for (k, l) in snapshot.links.iter().enumerate() {
            if keep(k) {
                neighbors[l.a].push((l.b, l.delay));
                neighbors[l.b].push((l.a, l.delay));
            }
        }
        for row in &mut neighbors {
            row.sort_by(|x, y| x.0.cmp(&y.0));
        }
        Self { neighbors }
    }

    /// Every edge gets the same delay.
    pub fn uniform(a: &AdjacencyMatrix, delay: f64) -> Self {
        Self {
            neighbors: (0..a.n())
                .map(|i| a.neighbors(i).iter().map(|&j| (j, delay)).collect())
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// `(neighbor, delay)` sorted by neighbor id.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn delay(&self, i: usize, j: usize) -> Option<f64> {
        self.neighbors[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .ok()
            .map(|k| self.neighbors[i][k].1)
    }

    pub fn remove_link(&mut self, i: usize, j: usize) {
        self.neighbors[i].retain(|&(k, _)| k != j);
        self.neighbors[j].retain(|&(k, _)| k != i);
    }

    pub fn adjacency(&self) -> AdjacencyMatrix {
        AdjacencyMatrix::from_sorted_rows(self.neighbors.iter().map(|row| row.iter().map(|e| e.0)))
    }

    fn check(&self, node: usize) -> Result<()> {
        if node >= self.n() {
            return Err(Error::Argument(format!(
                "node {node} out of range for {} nodes",
                self.n()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub nodes: Vec<usize>,
    /// Cumulative propagation delay, seconds.
    pub delay: f64,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// Lexicographic path cost: (primary metric, secondary metric).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cost(f64, f64);

impl Eq for Cost {}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.total_cmp(&other.1))
    }
}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Cost {
    fn step(self, metric: Metric, delay: f64) -> Cost {
        match metric {
            Metric::Hops => Cost(self.0 + 1.0, self.1 + delay),
            Metric::Delay => Cost(self.0 + delay, self.1 + 1.0),
        }
    }
}

pub fn dijkstra(g: &WeightedGraph, s: usize, d: usize, metric: Metric) -> Result<Option<Path>> {
    dijkstra_avoiding(g, s, d, metric, &[])
}

/// Shortest path from `s` to `d` that never enters a node flagged in `blocked`
/// (other than `s` itself). An empty `blocked` slice blocks nothing.
///
/// Costs to `d` are settled backwards from `d`; the path is then read forwards from
/// `s` choosing, at every node, the optimal continuation with the smallest node id.
pub fn dijkstra_avoiding(
    g: &WeightedGraph,
    s: usize,
    d: usize,
    metric: Metric,
    blocked: &[bool],
) -> Result<Option<Path>> {
    g.check(s)?;
    g.check(d)?;
    let n = g.n();
    let is_blocked = |v: usize| v != s && blocked.get(v).copied().unwrap_or(false);
    if is_blocked(d) {
        return Ok(None);
    }
    if s == d {
        return Ok(Some(Path {
            nodes: vec![s],
            delay: 0.0,
        }));
    }

    let mut dist: Vec<Option<Cost>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[d] = Some(Cost(0.0, 0.0));
    heap.push(Reverse((Cost(0.0, 0.0), d)));
    while let Some(Reverse((cost, u))) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == s {
            break;
        }
        for &(v, delay) in g.neighbors(u) {
            if done[v] || is_blocked(v) {
                continue;
            }
            let next = cost.step(metric, delay);
            if dist[v].is_none_or(|c| next < c) {
                dist[v] = Some(next);
                heap.push(Reverse((next, v)));
            }
        }
    }
    if !done[s] {
        return Ok(None);
    }

    let mut nodes = vec![s];
    let mut total = 0.0;
    let mut u = s;
    while u != d {
        let (v, delay) = g
            .neighbors(u)
            .iter()
            .filter(|&&(v, _)| done[v] && !is_blocked(v) && !nodes.contains(&v))
            .map(|&(v, delay)| (dist[v].unwrap().step(metric, delay), v, delay))
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, v, delay)| (v, delay))
            .expect("a settled node always has a settled continuation");
        nodes.push(v);
        total += delay;
        u = v;
    }
    Ok(Some(Path {
        nodes,
        delay: total,
    }))
}

/// Exhaustive simple-path enumeration, the reference semantics for the brute-force
/// baseline and the test oracle for [`dijkstra`].
///
/// Paths are enumerated with increasing hop budget; the first budget that reaches
/// `d` yields every minimum-hop path, from which the one with the smallest
/// cumulative delay (then lexicographically smallest node sequence) is returned.
pub fn brute_force_shortest(g: &WeightedGraph, s: usize, d: usize, max_hops: usize) -> Option<Path> {
    if s >= g.n() || d >= g.n() {
        return None;
    }
    if s == d {
        return Some(Path {
            nodes: vec![s],
            delay: 0.0,
        });
    }

    fn extend(
        g: &WeightedGraph,
        d: usize,
        budget: usize,
        stack: &mut Vec<usize>,
        delay: f64,
        best: &mut Option<Path>,
    ) {
        let u = *stack.last().unwrap();
        if u == d {
            let better = match best {
                None => true,
                Some(b) => delay
                    .total_cmp(&b.delay)
                    .then_with(|| stack.as_slice().cmp(b.nodes.as_slice()))
                    .is_lt(),
            };
            if better {
                *best = Some(Path {
                    nodes: stack.clone(),
                    delay,
                });
            }
            return;
        }
        if stack.len() > budget {
            return;
        }
        for &(v, w) in g.neighbors(u) {
            if !stack.contains(&v) {
                stack.push(v);
                extend(g, d, budget, stack, delay + w, best);
                stack.pop();
            }
        }
    }

    for budget in 1..=max_hops {
        let mut best = None;
        let mut stack = vec![s];
        extend(g, d, budget, &mut stack, 0.0, &mut best);
        // Shorter budgets found nothing, so every path found here has exactly `budget` hops.
        if best.is_some() {
            return best;
        }
    }
    None
}

/// One (snapshot, destination) regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub snapshot_index: usize,
    pub destination: usize,
    pub adjacency: NormalizedAdjacency,
    pub features: NodeFeatures,
    /// Hop counts; 0 where `mask` is 0.
    pub labels: Vec<f64>,
    /// 1 for nodes that reach the destination and count in the loss.
    pub mask: Vec<f64>,
}

impl TrainingSample {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Builds a sample with exact hop labels from a topology and destination.
    pub fn from_topology(
        a: &AdjacencyMatrix,
        d: usize,
        layout: FeatureLayout,
        positions: Option<&[constellation::Vec3]>,
        snapshot_index: usize,
    ) -> Result<Self> {
        let field = hop_distances(a, d)?;
        let features = graph::build_features(a, d, layout, positions)?;
        let mask: Vec<f64> = field
            .values
            .iter()
            .map(|v| if v.is_finite() { 1.0 } else { 0.0 })
            .collect();
        let labels = field
            .values
            .iter()
            .map(|&v| if v.is_finite() { v } else { 0.0 })
            .collect();
        Ok(Self {
            snapshot_index,
            destination: d,
            adjacency: graph::normalize(a),
            features,
            labels,
            mask,
        })
    }
}

fn default_validation_fraction() -> f64 {
    0.1
}

fn default_destinations() -> usize {
    16
}

/// Everything that determines a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub constellation: ConstellationConfig,
    #[serde(default)]
    pub isl_policy: IslPolicy,
    #[serde(default)]
    pub layout: FeatureLayout,
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_destinations")]
    pub destinations_per_snapshot: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: DatasetSpec,
    /// Snapshot indices skipped because every node was isolated.
    pub skipped_snapshots: Vec<usize>,
    /// Destination sampled for each sample, in sample order.
    pub destinations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn layout(&self) -> FeatureLayout {
        self.provenance.spec.layout
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &TrainingSample> {
        self.train.iter().map(|&i| &self.samples[i])
    }

    pub fn validation_samples(&self) -> impl Iterator<Item = &TrainingSample> {
        self.validation.iter().map(|&i| &self.samples[i])
    }

    /// Wraps explicit samples, all in the training split.
    pub fn from_samples(samples: Vec<TrainingSample>, layout: FeatureLayout) -> Self {
        let train = (0..samples.len()).collect();
        let destinations = samples.iter().map(|s| s.destination).collect();
        let n = samples.first().map_or(1, TrainingSample::n);
        Self {
            samples,
            train,
            validation: Vec::new(),
            provenance: Provenance {
                spec: DatasetSpec {
                    constellation: ConstellationConfig {
                        num_planes: 1,
                        sats_per_plane: n.max(1),
                        phase_factor: 0,
                        ..ConstellationConfig::reference()
                    },
                    isl_policy: IslPolicy::default(),
                    layout,
                    snapshot_times: Vec::new(),
                    destinations_per_snapshot: 0,
                    validation_fraction: 0.0,
                    seed: 0,
                },
                skipped_snapshots: Vec::new(),
                destinations,
            },
        }
    }
}

/// Number of validation snapshots for a split of `count` snapshots.
fn validation_count(count: usize, fraction: f64) -> usize {
    if count < 2 {
        return 0;
    }
    ((count as f64 * fraction).round() as usize).min(count - 1)
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.snapshot_times.is_empty() {
        return Err(Error::Argument("at least one snapshot time is required".into()));
    }
    if !(0.0..1.0).contains(&spec.validation_fraction) {
        return Err(Error::Argument(format!(
            "validation_fraction must lie in [0, 1) (got {})",
            spec.validation_fraction
        )));
    }
    if spec.destinations_per_snapshot == 0 {
        return Err(Error::Argument("destinations_per_snapshot must be >= 1".into()));
    }
    let base = constellation::build_walker(&spec.constellation)?;
    let mut rng = rng::substream(spec.seed, rng::DATASET);

    let count = spec.snapshot_times.len();
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut is_validation = vec![false; count];
    for &k in &order[..validation_count(count, spec.validation_fraction)] {
        is_validation[k] = true;
    }

    let mut samples = Vec::new();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut skipped = Vec::new();
    let mut destinations = Vec::new();
    for (k, &t) in spec.snapshot_times.iter().enumerate() {
        let states = constellation::propagate(&base, &spec.constellation, t - spec.constellation.epoch_s);
        let snap = constellation::snapshot(&states, &spec.constellation, t, spec.isl_policy);
        if snap.isolated.len() == snap.node_count {
            skipped.push(k);
            continue;
        }
        let a = graph::adjacency(&snap);
        let mut nodes: Vec<usize> = (0..snap.node_count).collect();
        let picks = spec.destinations_per_snapshot.min(nodes.len());
        let (chosen, _) = nodes.partial_shuffle(&mut rng, picks);
        for &d in chosen.iter() {
            let sample =
                TrainingSample::from_topology(&a, d, spec.layout, snap.positions.as_deref(), k)?;
            let idx = samples.len();
            if is_validation[k] {
                validation.push(idx);
            } else {
                train.push(idx);
            }
            destinations.push(d);
            samples.push(sample);
        }
    }
    Ok(Dataset {
        samples,
        train,
        validation,
        provenance: Provenance {
            spec: spec.clone(),
            skipped_snapshots: skipped,
            destinations,
        },
    })
}

const DATASET_MAGIC: &[u8; 8] = b"GLRDSET\0";
pub const DATASET_VERSION: u32 = 1;

/// Serializes a dataset into the binary container described in `docs/formats.md`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let layout = ds.layout();
    let n = ds.samples.first().map_or(0, TrainingSample::n);
    let mut is_validation = vec![false; ds.samples.len()];
    for &i in &ds.validation {
        is_validation[i] = true;
    }
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION as usize);
    w.u32(n);
    w.u32(layout.low_width());
    w.u32(layout.high_width());
    w.u32(ds.samples.len());
    w.u32(ds.train.len());
    w.u32(ds.validation.len());
    let provenance = serde_json::to_vec(&ds.provenance)?;
    w.u32(provenance.len());
    w.bytes(&provenance);
    for (i, s) in ds.samples.iter().enumerate() {
        if s.n() != n {
            return Err(Error::dim("dataset sample node count", n, s.n()));
        }
        w.u8(u8::from(is_validation[i]));
        w.u32(s.snapshot_index);
        w.u32(s.destination);
        w.u32(s.adjacency.nnz());
        for (r, c, v) in s.adjacency.triplets() {
            w.u32(r);
            w.u32(c);
            w.f64(v);
        }
        w.f64s(s.features.low_order.iter());
        w.f64s(s.features.high_order.iter());
        w.f64s(&s.labels);
        w.f64s(&s.mask);
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new("dataset", bytes);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()? as u32;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let n = r.u32()?;
    let f_low = r.u32()?;
    let f_high = r.u32()?;
    let layout = FeatureLayout::from_low_width(f_low)
        .filter(|l| l.high_width() == f_high)
        .ok_or_else(|| r.error(format!("unsupported feature widths {f_low}/{f_high}")))?;
    let count = r.u32()?;
    let train_count = r.u32()?;
    let validation_count = r.u32()?;
    let prov_len = r.u32()?;
    let provenance: Provenance = serde_json::from_slice(r.take(prov_len)?)?;
    if provenance.spec.layout != layout {
        return Err(r.error("provenance layout disagrees with header widths".into()));
    }

    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for i in 0..count {
        match r.u8()? {
            0 => train.push(i),
            1 => validation.push(i),
            other => return Err(r.error(format!("bad split tag {other}"))),
        }
        let snapshot_index = r.u32()?;
        let destination = r.u32()?;
        if destination >= n {
            return Err(r.error(format!("destination {destination} out of range")));
        }
        let nnz = r.u32()?;
        let mut triplets = Vec::with_capacity(nnz.min(1 << 20));
        for _ in 0..nnz {
            triplets.push((r.u32()?, r.u32()?, r.f64()?));
        }
        let adjacency = NormalizedAdjacency::from_triplets(n, &triplets)
            .map_err(|e| r.error(e.to_string()))?;
        let low = r.f64s(n * f_low)?;
        let high = r.f64s(n * f_high)?;
        let labels = r.f64s(n)?;
        let mask = r.f64s(n)?;
        samples.push(TrainingSample {
            snapshot_index,
            destination,
            adjacency,
            features: NodeFeatures {
                destination,
                low_order: ndarray::Array2::from_shape_vec((n, f_low), low).unwrap(),
                high_order: ndarray::Array2::from_shape_vec((n, f_high), high).unwrap(),
            },
            labels,
            mask,
        });
    }
    r.finish()?;
    if train.len() != train_count || validation.len() != validation_count {
        return Err(r.error("split counts disagree with header".into()));
    }
    Ok(Dataset {
        samples,
        train,
        validation,
        provenance,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<FsPath>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<FsPath>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
