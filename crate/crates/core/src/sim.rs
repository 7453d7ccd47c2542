//! Packet-level experiments: random traffic over interrupted snapshots.
//!
//! Packet `k` draws its snapshot, source, destination and link interruptions from
//! its own indexed random stream, so every algorithm and every interruption
//! probability sees the same traffic and the same per-link uniforms. A link that
//! fails at probability `p` also fails at any larger `p`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constellation::{snapshot_at, ConstellationConfig, IslPolicy, TopologySnapshot};
use crate::error::{Error, Result};
use crate::gnn::ModelParameters;
use crate::oracle::{hop_distances, WeightedGraph};
use crate::rng;
use crate::routing::{glr_next_hop, predict_field, route, ActualTopology, Algorithm, DelayModel, Outcome, RouteOptions, RouteResult};

/// Propagation plus transmission delay of one hop, seconds.
pub fn hop_delay(propagation_s: f64, packet_size_bits: f64, tx_rate_bps: f64) -> f64 {
    propagation_s + packet_size_bits / tx_rate_bps
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(format!(
            "interruption probability must lie in [0, 1] (got {p})"
        )));
    }
    Ok(())
}

/// Fails each planned link independently with probability `p`.
///
/// One uniform is drawn per link in link order and the link fails iff it is below `p`.
pub fn apply_interruptions<'a>(
    planned: &'a TopologySnapshot,
    p: f64,
    rng: &mut impl Rng,
) -> Result<ActualTopology<'a>> {
    check_probability(p)?;
    let failed = planned.links.iter().map(|_| rng.random::<f64>() < p).collect();
    ActualTopology::new(planned, failed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub constellation: ConstellationConfig,
    pub isl_policy: IslPolicy,
    pub snapshot_times: Vec<f64>,
    pub interruption_prob: f64,
    pub packets: usize,
    pub delay: DelayModel,
    /// Hop limit; defaults to the node count.
    pub ttl: Option<usize>,
    pub algorithms: Vec<Algorithm>,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.constellation.validate()?;
        check_probability(self.interruption_prob)?;
        if self.snapshot_times.is_empty() {
            return Err(Error::Config("experiment needs at least one snapshot time".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("experiment needs at least one algorithm".into()));
        }
        if !(self.delay.tx_rate_bps > 0.0) || !(self.delay.packet_size_bits >= 0.0) {
            return Err(Error::Config(format!(
                "packet size must be >= 0 and transmission rate > 0 (got {} bits, {} bps)",
                self.delay.packet_size_bits, self.delay.tx_rate_bps
            )));
        }
        if self.constellation.num_satellites() < 2 {
            return Err(Error::Config("traffic needs at least two satellites".into()));
        }
        Ok(())
    }

    fn route_options(&self) -> RouteOptions {
        RouteOptions {
            ttl: self.ttl,
            delay: self.delay,
        }
    }
}

/// One packet and how each algorithm handled it.
#[derive(Debug, Clone)]
pub struct PacketRecord {
    pub index: usize,
    pub snapshot: usize,
    pub source: usize,
    pub destination: usize,
    pub failed_links: usize,
    /// Shortest hop count on the actual topology, if the destination is reachable.
    pub optimal_hops: Option<usize>,
    /// In the order of [`ExperimentConfig::algorithms`].
    pub routes: Vec<(Algorithm, RouteResult)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmMetrics {
    pub algorithm: Algorithm,
    pub packets: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub dropped_no_next_hop: usize,
    pub dropped_ttl: usize,
    pub dropped_link_fail: usize,
    pub drop_rate: f64,
    /// Over delivered packets.
    pub mean_delay_s: Option<f64>,
    pub mean_hops: Option<f64>,
    /// Median wall-clock of a single route computation or inference.
    pub median_decision_s: Option<f64>,
    /// Median total routing computation per packet.
    pub median_packet_decision_s: Option<f64>,
    pub total_compute_s: f64,
    pub computations: usize,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    })
}

impl AlgorithmMetrics {
    pub fn from_routes<'a>(algorithm: Algorithm, routes: impl IntoIterator<Item = &'a RouteResult>) -> Self {
        let routes: Vec<&RouteResult> = routes.into_iter().collect();
        let count = |o: Outcome| routes.iter().filter(|r| r.outcome == o).count();
        let delivered: Vec<&&RouteResult> = routes.iter().filter(|r| r.outcome.is_delivered()).collect();
        let mean = |f: &dyn Fn(&RouteResult) -> f64| {
            (!delivered.is_empty())
                .then(|| delivered.iter().map(|r| f(r)).sum::<f64>() / delivered.len() as f64)
        };
        let packets = routes.len();
        let dropped = packets - delivered.len();
        Self {
            algorithm,
            packets,
            delivered: delivered.len(),
            dropped,
            dropped_no_next_hop: count(Outcome::DroppedNoNextHop),
            dropped_ttl: count(Outcome::DroppedTtl),
            dropped_link_fail: count(Outcome::DroppedLinkFail),
            drop_rate: if packets == 0 { 0.0 } else { dropped as f64 / packets as f64 },
            mean_delay_s: mean(&|r| r.total_delay),
            mean_hops: mean(&|r| r.hop_count as f64),
            median_decision_s: median(routes.iter().flat_map(|r| r.decision_times.iter().copied()).collect()),
            median_packet_decision_s: median(
                routes
                    .iter()
                    .filter(|r| r.computations > 0)
                    .map(|r| r.decision_time)
                    .collect(),
            ),
            total_compute_s: routes.iter().map(|r| r.decision_time).sum(),
            computations: routes.iter().map(|r| r.computations).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub node_count: usize,
    pub interruption_prob: f64,
    pub metrics: Vec<AlgorithmMetrics>,
    pub packets: Vec<PacketRecord>,
}

impl ExperimentReport {
    pub fn metrics_for(&self, algorithm: Algorithm) -> Option<&AlgorithmMetrics> {
        self.metrics.iter().find(|m| m.algorithm == algorithm)
    }

    /// Packets `algorithm` delivered within `factor` times the optimal hop count.
    /// Drops and unreachable destinations never count.
    pub fn within_stretch(&self, algorithm: Algorithm, factor: f64) -> usize {
        self.packets
            .iter()
            .filter(|p| {
                let Some(optimal) = p.optimal_hops else {
                    return false;
                };
                p.routes.iter().any(|(alg, r)| {
                    *alg == algorithm
                        && r.outcome.is_delivered()
                        && r.hop_count as f64 <= factor * optimal as f64
                })
            })
            .count()
    }
}

pub fn build_snapshots(config: &ExperimentConfig) -> Result<Vec<TopologySnapshot>> {
    config
        .snapshot_times
        .iter()
        .map(|&t| snapshot_at(&config.constellation, t, config.isl_policy))
        .collect()
}

/// Builds the snapshots and routes `config.packets` packets with every algorithm.
pub fn run_experiment(config: &ExperimentConfig, model: Option<&ModelParameters>) -> Result<ExperimentReport> {
    config.validate()?;
    let snapshots = build_snapshots(config)?;
    run_on_snapshots(config, &snapshots, model)
}

/// As [`run_experiment`], reusing snapshots already built for `config`.
pub fn run_on_snapshots(
    config: &ExperimentConfig,
    snapshots: &[TopologySnapshot],
    model: Option<&ModelParameters>,
) -> Result<ExperimentReport> {
    config.validate()?;
    if config.algorithms.contains(&Algorithm::Glr) && model.is_none() {
        return Err(Error::Config("GLR was requested but no model was supplied".into()));
    }
    if snapshots.len() != config.snapshot_times.len() {
        return Err(Error::dim("snapshots", config.snapshot_times.len(), snapshots.len()));
    }
    let n = config.constellation.num_satellites();
    if let Some(s) = snapshots.iter().find(|s| s.node_count != n) {
        return Err(Error::dim("snapshot node count", n, s.node_count));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.jobs)))?;
    let packets: Vec<PacketRecord> = pool.install(|| {
        (0..config.packets)
            .into_par_iter()
            .map(|k| route_packet(config, snapshots, model, k))
            .collect::<Result<_>>()
    })?;

    let metrics = config
        .algorithms
        .iter()
        .enumerate()
        .map(|(i, &alg)| AlgorithmMetrics::from_routes(alg, packets.iter().map(|p| &p.routes[i].1)))
        .collect();
    Ok(ExperimentReport {
        node_count: n,
        interruption_prob: config.interruption_prob,
        metrics,
        packets,
    })
}

fn route_packet(
    config: &ExperimentConfig,
    snapshots: &[TopologySnapshot],
    model: Option<&ModelParameters>,
    k: usize,
) -> Result<PacketRecord> {
    let n = config.constellation.num_satellites();
    let mut traffic = rng::indexed_substream(config.seed, rng::TRAFFIC, k as u64);
    let snapshot = traffic.random_range(0..snapshots.len());
    let source = traffic.random_range(0..n);
    let mut destination = traffic.random_range(0..n - 1);
    if destination >= source {
        destination += 1;
    }
    let planned = &snapshots[snapshot];
    let mut uniforms = rng::indexed_substream(config.seed, rng::INTERRUPTIONS, k as u64);
    let actual = apply_interruptions(planned, config.interruption_prob, &mut uniforms)?;

    let surviving = actual.surviving_graph().adjacency();
    let optimal_hops = hop_distances(&surviving, destination)?.hops(source).map(|h| h as usize);

    let opts = config.route_options();
    let routes = config
        .algorithms
        .iter()
        .map(|&alg| Ok((alg, route(alg, model, &actual, source, destination, opts)?)))
        .collect::<Result<_>>()?;
    Ok(PacketRecord {
        index: k,
        snapshot,
        source,
        destination,
        failed_links: actual.failed_count(),
        optimal_hops,
        routes,
    })
}

/// How often the learned field picks a next hop that lies on a hop-optimal path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DecisionQuality {
    /// (node, destination) pairs with the destination reachable and distinct.
    pub decisions: usize,
    pub on_optimal_path: usize,
}

impl DecisionQuality {
    pub fn fraction(&self) -> f64 {
        if self.decisions == 0 {
            return 0.0;
        }
        self.on_optimal_path as f64 / self.decisions as f64
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            decisions: self.decisions + other.decisions,
            on_optimal_path: self.on_optimal_path + other.on_optimal_path,
        }
    }
}

/// Scores every first-hop decision towards each of `destinations` on an intact snapshot.
pub fn decision_quality(
    params: &ModelParameters,
    snapshot: &TopologySnapshot,
    destinations: &[usize],
) -> Result<DecisionQuality> {
    let graph = WeightedGraph::from_snapshot(snapshot);
    let a = graph.adjacency();
    let mut q = DecisionQuality::default();
    for &d in destinations {
        let exact = hop_distances(&a, d)?;
        let predicted = predict_field(params, &graph, snapshot.positions.as_deref(), d)?;
        let mut visited = vec![false; graph.n()];
        for u in 0..graph.n() {
            if u == d || !exact.is_reachable(u) {
                continue;
            }
            visited[u] = true;
            let choice = glr_next_hop(&predicted, u, &visited, &graph);
            visited[u] = false;
            q.decisions += 1;
            if choice.is_some_and(|v| exact.values[v] + 1.0 == exact.values[u]) {
                q.on_optimal_path += 1;
            }
        }
    }
    Ok(q)
}

/// Column names of [`metrics_csv_row`].
pub const METRICS_CSV_HEADER: &str = "satellites,interruption_prob,algorithm,packets,delivered,dropped,\
dropped_no_next_hop,dropped_ttl,dropped_link_fail,drop_rate,mean_delay_s,mean_hops,\
median_decision_s,median_packet_decision_s,total_compute_s,computations";

/// Timing columns; they differ between otherwise identical runs.
pub const METRICS_CSV_TIMING_COLUMNS: [&str; 3] =
    ["median_decision_s", "median_packet_decision_s", "total_compute_s"];

pub fn metrics_csv_row(satellites: usize, p: f64, m: &AlgorithmMetrics) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    format!(
        "{satellites},{p},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.algorithm,
        m.packets,
        m.delivered,
        m.dropped,
        m.dropped_no_next_hop,
        m.dropped_ttl,
        m.dropped_link_fail,
        m.drop_rate,
        opt(m.mean_delay_s),
        opt(m.mean_hops),
        opt(m.median_decision_s),
        opt(m.median_packet_decision_s),
        m.total_compute_s,
        m.computations,
    )
}
