//! Learned distance-field routing and the TBR/TSR/CGR baselines.
//!
//! Every router forwards hop by hop over the actual (post-interruption) topology,
//! never revisits a node, and gives up after `ttl` hops.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constellation::TopologySnapshot;
use crate::error::{Error, Result};
use crate::gnn::{self, ModelParameters};
use crate::graph::{self, FeatureLayout};
use crate::oracle::{dijkstra, dijkstra_avoiding, DistanceField, FieldKind, Metric, WeightedGraph};
use crate::sim::hop_delay;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "GLR")]
    Glr,
    #[serde(rename = "TBR")]
    Tbr,
    #[serde(rename = "TSR")]
    Tsr,
    #[serde(rename = "CGR")]
    Cgr,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Glr, Algorithm::Tbr, Algorithm::Tsr, Algorithm::Cgr];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Glr => "GLR",
            Algorithm::Tbr => "TBR",
            Algorithm::Tsr => "TSR",
            Algorithm::Cgr => "CGR",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GLR" => Ok(Algorithm::Glr),
            "TBR" => Ok(Algorithm::Tbr),
            "TSR" => Ok(Algorithm::Tsr),
            "CGR" => Ok(Algorithm::Cgr),
            _ => Err(Error::Config(format!("unknown routing algorithm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Delivered,
    DroppedNoNextHop,
    DroppedTtl,
    DroppedLinkFail,
}

impl Outcome {
    pub fn is_delivered(self) -> bool {
        self == Outcome::Delivered
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteResult {
    /// Visited nodes starting at the source; ends at the destination when delivered.
    pub path: Vec<usize>,
    pub outcome: Outcome,
    /// Sum of per-hop propagation and transmission delay, seconds.
    pub total_delay: f64,
    pub hop_count: usize,
    /// Seconds spent in routing computation, excluding propagation.
    pub decision_time: f64,
    /// Wall-clock of each individual route computation or model inference.
    pub decision_times: Vec<f64>,
    /// Shortest-path runs or model inferences performed for this packet.
    pub computations: usize,
}

/// Per-hop delay parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub packet_size_bits: f64,
    pub tx_rate_bps: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            packet_size_bits: 8000.0,
            tx_rate_bps: 100_000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RouteOptions {
    /// Hop limit; defaults to the node count.
    pub ttl: Option<usize>,
    pub delay: DelayModel,
}

/// A planned snapshot with some of its links interrupted.
#[derive(Debug, Clone)]
pub struct ActualTopology<'a> {
    pub planned: &'a TopologySnapshot,
    failed: Vec<bool>,
}

impl<'a> ActualTopology<'a> {
    /// `failed[k]` marks `planned.links[k]` as interrupted.
    pub fn new(planned: &'a TopologySnapshot, failed: Vec<bool>) -> Result<Self> {
        if failed.len() != planned.links.len() {
            return Err(Error::dim("failed-link mask", planned.links.len(), failed.len()));
        }
        Ok(Self { planned, failed })
    }

    pub fn intact(planned: &'a TopologySnapshot) -> Self {
        Self {
            planned,
            failed: vec![false; planned.links.len()],
        }
    }

    /// Marks the links between the given node pairs as failed.
    pub fn with_failed_pairs(
        planned: &'a TopologySnapshot,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let mut failed = vec![false; planned.links.len()];
        for &(i, j) in pairs {
            let k = planned
                .link_index(i, j)
                .ok_or_else(|| Error::Argument(format!("no planned link ({i}, {j})")))?;
            failed[k] = true;
        }
        Ok(Self { planned, failed })
    }

    pub fn node_count(&self) -> usize {
        self.planned.node_count
    }

    pub fn failed_mask(&self) -> &[bool] {
        &self.failed
    }

    pub fn failed_count(&self) -> usize {
        self.failed.iter().filter(|&&f| f).count()
    }

    pub fn is_failed(&self, i: usize, j: usize) -> bool {
        self.planned.link_index(i, j).is_some_and(|k| self.failed[k])
    }

    pub fn surviving_graph(&self) -> WeightedGraph {
        WeightedGraph::from_snapshot_filtered(self.planned, |k| !self.failed[k])
    }

    pub fn planned_graph(&self) -> WeightedGraph {
        WeightedGraph::from_snapshot(self.planned)
    }

    fn check(&self, s: usize, d: usize) -> Result<()> {
        let n = self.node_count();
        if s >= n || d >= n {
            return Err(Error::Argument(format!(
                "source {s} / destination {d} out of range for {n} nodes"
            )));
        }
        Ok(())
    }
}

/// Accumulates a route hop by hop.
struct Walk {
    path: Vec<usize>,
    visited: Vec<bool>,
    total_delay: f64,
    decision_times: Vec<f64>,
    computations: usize,
    delay: DelayModel,
}

impl Walk {
    fn new(n: usize, s: usize, delay: DelayModel) -> Self {
        let mut visited = vec![false; n];
        visited[s] = true;
        Self {
            path: vec![s],
            visited,
            total_delay: 0.0,
            decision_times: Vec::new(),
            computations: 0,
            delay,
        }
    }

    fn current(&self) -> usize {
        *self.path.last().unwrap()
    }

    fn hops(&self) -> usize {
        self.path.len() - 1
    }

    fn advance(&mut self, next: usize, link_delay: f64) {
        self.path.push(next);
        self.visited[next] = true;
        self.total_delay += hop_delay(link_delay, self.delay.packet_size_bits, self.delay.tx_rate_bps);
    }

    fn timed<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let started = Instant::now();
        let out = f();
        self.decision_times.push(started.elapsed().as_secs_f64());
        self.computations += 1;
        out
    }

    fn finish(self, outcome: Outcome) -> RouteResult {
        RouteResult {
            hop_count: self.path.len() - 1,
            path: self.path,
            outcome,
            total_delay: self.total_delay,
            decision_time: self.decision_times.iter().sum(),
            decision_times: self.decision_times,
            computations: self.computations,
        }
    }
}

/// Picks the unvisited surviving neighbor of `current` with the smallest field value.
///
/// The destination itself is always taken when it is adjacent. Ties on the field value
/// go to the shorter link, then to the smaller node id.
pub fn glr_next_hop(
    field: &DistanceField,
    current: usize,
    visited: &[bool],
    graph: &WeightedGraph,
) -> Option<usize> {
    let candidates = graph.neighbors(current).iter().filter(|&&(v, _)| !visited[v]);
    if candidates.clone().any(|&(v, _)| v == field.destination) {
        return Some(field.destination);
    }
    candidates
        .min_by(|a, b| {
            field.values[a.0]
                .total_cmp(&field.values[b.0])
                .then(a.1.total_cmp(&b.1))
                .then(a.0.cmp(&b.0))
        })
        .map(|&(v, _)| v)
}

/// Greedy descent of a distance field over `graph` from `s` to `field.destination`.
pub fn walk_field(
    field: &DistanceField,
    graph: &WeightedGraph,
    s: usize,
    opts: RouteOptions,
) -> RouteResult {
    let mut walk = Walk::new(graph.n(), s, opts.delay);
    let ttl = opts.ttl.unwrap_or(graph.n());
    route_with_field(field, graph, &mut walk, ttl)
}

fn route_with_field(
    field: &DistanceField,
    graph: &WeightedGraph,
    walk: &mut Walk,
    ttl: usize,
) -> RouteResult {
    let d = field.destination;
    let mut select_time = 0.0;
    let outcome = loop {
        let u = walk.current();
        if u == d {
            break Outcome::Delivered;
        }
        if walk.hops() >= ttl {
            break Outcome::DroppedTtl;
        }
        let started = Instant::now();
        let next = glr_next_hop(field, u, &walk.visited, graph);
        select_time += started.elapsed().as_secs_f64();
        match next {
            Some(v) => {
                let delay = graph.delay(u, v).expect("neighbor has a link");
                walk.advance(v, delay);
            }
            None => break Outcome::DroppedNoNextHop,
        }
    };
    // Neighbor selection is part of the single per-packet decision.
    match walk.decision_times.last_mut() {
        Some(t) => *t += select_time,
        None => walk.decision_times.push(select_time),
    }
    let taken = std::mem::replace(walk, Walk::new(1, 0, walk.delay));
    taken.finish(outcome)
}

/// Runs the model once on the actual topology to obtain a predicted distance field
/// towards `d`.
pub fn predict_field(
    params: &ModelParameters,
    graph: &WeightedGraph,
    positions: Option<&[crate::constellation::Vec3]>,
    d: usize,
) -> Result<DistanceField> {
    let layout = FeatureLayout::from_low_width(params.shape().f_low).ok_or_else(|| {
        Error::ShapeMismatch {
            expected: "F_low of 2 or 3".into(),
            found: params.shape().to_string(),
        }
    })?;
    let a = graph.adjacency();
    let ahat = graph::normalize(&a);
    let features = graph::build_features(&a, d, layout, positions)?;
    let values = gnn::predict(params, &ahat, &features)?;
    Ok(DistanceField {
        destination: d,
        values,
        kind: FieldKind::Predicted,
    })
}

/// Learned routing: one inference per packet, then greedy argmin descent.
pub fn route_glr(
    params: &ModelParameters,
    actual: &ActualTopology<'_>,
    s: usize,
    d: usize,
    opts: RouteOptions,
) -> Result<RouteResult> {
    actual.check(s, d)?;
    let n = actual.node_count();
    let mut walk = Walk::new(n, s, opts.delay);
    if s == d {
        return Ok(walk.finish(Outcome::Delivered));
    }
    let graph = actual.surviving_graph();
    let positions = actual.planned.positions.as_deref();
    let field = walk.timed(|| predict_field(params, &graph, positions, d))?;
    Ok(route_with_field(&field, &graph, &mut walk, opts.ttl.unwrap_or(n)))
}

/// Brute-force-equivalent baseline: exact shortest path recomputed at every hop on
/// the surviving topology.
pub fn route_tbr(
    actual: &ActualTopology<'_>,
    s: usize,
    d: usize,
    opts: RouteOptions,
) -> Result<RouteResult> {
    actual.check(s, d)?;
    let graph = actual.surviving_graph();
    let ttl = opts.ttl.unwrap_or(graph.n());
    let mut walk = Walk::new(graph.n(), s, opts.delay);
    let outcome = loop {
        let u = walk.current();
        if u == d {
            break Outcome::Delivered;
        }
        if walk.hops() >= ttl {
            break Outcome::DroppedTtl;
        }
        let visited = walk.visited.clone();
        let path = walk.timed(|| dijkstra_avoiding(&graph, u, d, Metric::Hops, &visited))?;
        match path {
            Some(p) => {
                let v = p.nodes[1];
                walk.advance(v, graph.delay(u, v).unwrap());
            }
            None => break Outcome::DroppedNoNextHop,
        }
    };
    Ok(walk.finish(outcome))
}

/// Source routing: one shortest-path computation on the planned topology, no rerouting.
pub fn route_tsr(actual: &ActualTopology<'_>, s: usize, d: usize, opts: RouteOptions) -> Result<RouteResult> {
    actual.check(s, d)?;
    let planned = actual.planned_graph();
    let mut walk = Walk::new(planned.n(), s, opts.delay);
    let path = walk.timed(|| dijkstra(&planned, s, d, Metric::Hops))?;
    let Some(path) = path else {
        return Ok(walk.finish(Outcome::DroppedNoNextHop));
    };
    for pair in path.nodes.windows(2) {
        let (u, v) = (pair[0], pair[1]);
        if actual.is_failed(u, v) {
            return Ok(walk.finish(Outcome::DroppedLinkFail));
        }
        walk.advance(v, planned.delay(u, v).unwrap());
    }
    Ok(walk.finish(Outcome::Delivered))
}

/// Contact-plan routing: shortest paths over the planned links, discovering failed
/// links hop by hop and pruning them from the working plan.
pub fn route_cgr(
    actual: &ActualTopology<'_>,
    s: usize,
    d: usize,
    opts: RouteOptions,
) -> Result<RouteResult> {
    actual.check(s, d)?;
    let mut plan = actual.planned_graph();
    let ttl = opts.ttl.unwrap_or(plan.n());
    let mut walk = Walk::new(plan.n(), s, opts.delay);
    let outcome = 'route: loop {
        let u = walk.current();
        if u == d {
            break Outcome::Delivered;
        }
        if walk.hops() >= ttl {
            break Outcome::DroppedTtl;
        }
        loop {
            let visited = walk.visited.clone();
            let path = walk.timed(|| dijkstra_avoiding(&plan, u, d, Metric::Hops, &visited))?;
            let Some(path) = path else {
                break 'route Outcome::DroppedNoNextHop;
            };
            let v = path.nodes[1];
            if actual.is_failed(u, v) {
                plan.remove_link(u, v);
                continue;
            }
            walk.advance(v, plan.delay(u, v).unwrap());
            break;
        }
    };
    Ok(walk.finish(outcome))
}

/// Dispatches to the router for `algorithm`.
pub fn route(
    algorithm: Algorithm,
    params: Option<&ModelParameters>,
    actual: &ActualTopology<'_>,
    s: usize,
    d: usize,
    opts: RouteOptions,
) -> Result<RouteResult> {
    match algorithm {
        Algorithm::Glr => {
            let params = params.ok_or_else(|| Error::Config("GLR routing needs a model".into()))?;
            route_glr(params, actual, s, d, opts)
        }
        Algorithm::Tbr => route_tbr(actual, s, d, opts),
        Algorithm::Tsr => route_tsr(actual, s, d, opts),
        Algorithm::Cgr => route_cgr(actual, s, d, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::ModelShape;
    use crate::graph::AdjacencyMatrix;
    use crate::oracle::hop_distances;

    fn snap(n: usize, edges: &[(usize, usize)]) -> TopologySnapshot {
        TopologySnapshot::from_links(n, edges.iter().map(|&(i, j)| (i, j, 0.01))).unwrap()
    }

    fn field(values: Vec<f64>, destination: usize) -> DistanceField {
        DistanceField {
            destination,
            values,
            kind: FieldKind::Predicted,
        }
    }

    #[test]
    fn next_hop_follows_smallest_prediction() {
        // s=0 with neighbors 1,2,3; destination 4 behind node 2.
        let g = WeightedGraph::from_snapshot(&snap(5, &[(0, 1), (0, 2), (0, 3), (2, 4)]));
        let f = field(vec![2.0, 2.0, 1.0, 2.0, 0.0], 4);
        let mut visited = vec![false; 5];
        visited[0] = true;
        assert_eq!(glr_next_hop(&f, 0, &visited, &g), Some(2));
        visited[1] = true;
        visited[2] = true;
        visited[3] = true;
        assert_eq!(glr_next_hop(&f, 0, &visited, &g), None);
    }

    #[test]
    fn next_hop_tie_breaks() {
        let g = WeightedGraph::from_snapshot(&snap(4, &[(0, 2), (0, 1), (0, 3)]));
        let f = field(vec![3.0, 1.0, 1.0, 2.0], 3);
        let visited = [true, false, false, false];
        // Destination adjacent wins outright.
        assert_eq!(glr_next_hop(&f, 0, &visited, &g), Some(3));
        let g = WeightedGraph::from_snapshot(&snap(5, &[(0, 1), (0, 3), (0, 4), (1, 2)]));
        let f2 = field(vec![3.0, 1.0, 0.0, 1.0, 1.0], 2);
        assert_eq!(glr_next_hop(&f2, 0, &[true, false, false, false, false], &g), Some(1));
        // Equal prediction: the shorter link wins.
        let fast = TopologySnapshot::from_links(4, [(0, 1, 0.02), (0, 2, 0.01), (1, 3, 0.01), (2, 3, 0.01)])
            .unwrap();
        let g = WeightedGraph::from_snapshot(&fast);
        let f = field(vec![2.0, 1.0, 1.0, 0.0], 3);
        assert_eq!(glr_next_hop(&f, 0, &[true, false, false, false], &g), Some(2));
    }

    #[test]
    fn greedy_descent_on_exact_field_is_optimal() {
        let s = snap(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)]);
        let g = WeightedGraph::from_snapshot(&s);
        let a = g.adjacency();
        for d in 0..6 {
            let f = hop_distances(&a, d).unwrap();
            for src in 0..6 {
                let r = walk_field(&f, &g, src, RouteOptions::default());
                assert_eq!(r.outcome, Outcome::Delivered);
                assert_eq!(r.hop_count as f64, f.values[src]);
            }
        }
    }

    fn tiny_params() -> ModelParameters {
        let shape = ModelShape {
            f_low: 2,
            f_high: 4,
            hidden: 4,
        };
        ModelParameters::glorot(shape, &mut crate::rng::substream(0, crate::rng::INIT))
    }

    #[test]
    fn glr_trivial_cases() {
        let s = snap(3, &[(1, 2)]);
        let actual = ActualTopology::intact(&s);
        let p = tiny_params();
        let same = route_glr(&p, &actual, 1, 1, RouteOptions::default()).unwrap();
        assert_eq!(same.outcome, Outcome::Delivered);
        assert_eq!(same.path, vec![1]);
        assert_eq!(same.total_delay, 0.0);
        let isolated = route_glr(&p, &actual, 0, 2, RouteOptions::default()).unwrap();
        assert_eq!(isolated.outcome, Outcome::DroppedNoNextHop);
        assert_eq!(isolated.hop_count, 0);
        assert_eq!(isolated.computations, 1);
        assert!(route_glr(&p, &actual, 0, 7, RouteOptions::default()).is_err());
    }

    #[test]
    fn glr_ttl_drop() {
        let s = snap(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let actual = ActualTopology::intact(&s);
        let opts = RouteOptions {
            ttl: Some(2),
            ..RouteOptions::default()
        };
        let r = route_glr(&tiny_params(), &actual, 0, 4, opts).unwrap();
        assert_eq!(r.outcome, Outcome::DroppedTtl);
        assert_eq!(r.hop_count, 2);
    }

    #[test]
    fn tbr_examples() {
        let ring = snap(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]);
        let actual = ActualTopology::intact(&ring);
        let r = route_tbr(&actual, 0, 3, RouteOptions::default()).unwrap();
        assert_eq!(r.outcome, Outcome::Delivered);
        assert_eq!(r.hop_count, 3);
        assert_eq!(r.computations, 3);
        assert_eq!(r.path, vec![0, 1, 2, 3]);
        let same = route_tbr(&actual, 2, 2, RouteOptions::default()).unwrap();
        assert_eq!((same.outcome, same.hop_count), (Outcome::Delivered, 0));

        let split = snap(4, &[(0, 1), (2, 3)]);
        let r = route_tbr(&ActualTopology::intact(&split), 0, 3, RouteOptions::default()).unwrap();
        assert_eq!(r.outcome, Outcome::DroppedNoNextHop);

        // Failure on the short side reroutes around the ring.
        let broken = ActualTopology::with_failed_pairs(&ring, &[(1, 2)]).unwrap();
        let r = route_tbr(&broken, 0, 2, RouteOptions::default()).unwrap();
        assert_eq!(r.path, vec![0, 5, 4, 3, 2]);
    }

    #[test]
    fn tsr_examples() {
        let ring = snap(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]);
        let intact = ActualTopology::intact(&ring);
        let tsr = route_tsr(&intact, 0, 3, RouteOptions::default()).unwrap();
        let tbr = route_tbr(&intact, 0, 3, RouteOptions::default()).unwrap();
        assert_eq!(tsr.path, tbr.path);
        assert_eq!(tsr.computations, 1);

        let broken = ActualTopology::with_failed_pairs(&ring, &[(0, 1)]).unwrap();
        let r = route_tsr(&broken, 0, 3, RouteOptions::default()).unwrap();
        assert_eq!(r.outcome, Outcome::DroppedLinkFail);
        assert_eq!(r.path, vec![0]);

        let split = snap(4, &[(0, 1), (2, 3)]);
        let r = route_tsr(&ActualTopology::intact(&split), 0, 3, RouteOptions::default()).unwrap();
        assert_eq!((r.outcome, r.hop_count), (Outcome::DroppedNoNextHop, 0));
    }

    #[test]
    fn cgr_examples() {
        let ring = snap(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]);
        let intact = ActualTopology::intact(&ring);
        let cgr = route_cgr(&intact, 0, 3, RouteOptions::default()).unwrap();
        assert_eq!(cgr.path, route_tsr(&intact, 0, 3, RouteOptions::default()).unwrap().path);

        // The failed first hop is pruned and the plan detours the other way round.
        let broken = ActualTopology::with_failed_pairs(&ring, &[(0, 1)]).unwrap();
        let cgr = route_cgr(&broken, 0, 2, RouteOptions::default()).unwrap();
        let tbr = route_tbr(&broken, 0, 2, RouteOptions::default()).unwrap();
        assert_eq!(cgr.outcome, Outcome::Delivered);
        assert!(cgr.hop_count >= tbr.hop_count);
        assert!(cgr.path.windows(2).all(|w| !broken.is_failed(w[0], w[1])));
        assert_eq!(cgr.computations, 5);

        // A failure discovered one hop in leaves only the way back, which is visited.
        let late = ActualTopology::with_failed_pairs(&ring, &[(1, 2)]).unwrap();
        let r = route_cgr(&late, 0, 2, RouteOptions::default()).unwrap();
        assert_eq!((r.outcome, r.path), (Outcome::DroppedNoNextHop, vec![0, 1]));

        let cut = ActualTopology::with_failed_pairs(&ring, &[(0, 1), (0, 5)]).unwrap();
        let r = route_cgr(&cut, 0, 3, RouteOptions::default()).unwrap();
        assert_eq!(r.outcome, Outcome::DroppedNoNextHop);
        assert_eq!(r.computations, 3);
    }

    #[test]
    fn delays_accumulate_per_hop() {
        let s = TopologySnapshot::from_links(3, [(0, 1, 0.01), (1, 2, 0.02)]).unwrap();
        let r = route_tbr(&ActualTopology::intact(&s), 0, 2, RouteOptions::default()).unwrap();
        assert!((r.total_delay - (0.01 + 0.08 + 0.02 + 0.08)).abs() < 1e-12);
    }

    #[test]
    fn failure_mask_length_is_checked() {
        let s = snap(3, &[(0, 1)]);
        assert!(ActualTopology::new(&s, vec![]).is_err());
        assert!(ActualTopology::with_failed_pairs(&s, &[(1, 2)]).is_err());
        let _ = AdjacencyMatrix::from_edges(1, []).unwrap();
    }
}
