//! Walker constellations on circular orbits and the inter-satellite-link topology
//! they induce at a given instant.
//!
//! Positions are kept in an Earth-centered inertial frame; Earth rotation is ignored
//! because only satellite-to-satellite geometry matters for link feasibility.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, km/s.
pub const SPEED_OF_LIGHT_KM_S: f64 = 299_792.458;

pub type Vec3 = [f64; 3];

fn default_earth_radius() -> f64 {
    6371.0
}

fn default_mu() -> f64 {
    398_600.4418
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationConfig {
    pub num_planes: usize,
    pub sats_per_plane: usize,
    /// Orbit altitude above the mean Earth radius, km.
    pub altitude_km: f64,
    pub inclination_deg: f64,
    #[serde(default)]
    pub eccentricity: f64,
    /// Walker phasing factor F, `0 <= F < num_planes`.
    #[serde(default)]
    pub phase_factor: usize,
    pub comm_range_km: f64,
    #[serde(default = "default_earth_radius")]
    pub earth_radius_km: f64,
    /// Gravitational parameter, km^3/s^2.
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub epoch_s: f64,
}

impl ConstellationConfig {
    /// 12 planes of 11 satellites at 1050 km, 53 degrees, 3500 km link range.
    pub fn reference() -> Self {
        Self::with_planes(12)
    }

    /// Reference orbit shell with `num_planes` planes of 11 satellites each.
    pub fn with_planes(num_planes: usize) -> Self {
        Self {
            num_planes,
            sats_per_plane: 11,
            altitude_km: 1050.0,
            inclination_deg: 53.0,
            eccentricity: 0.0,
            phase_factor: 1,
            comm_range_km: 3500.0,
            earth_radius_km: default_earth_radius(),
            mu: default_mu(),
            epoch_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_planes < 1 {
            return Err(Error::Config("num_planes must be >= 1".into()));
        }
        if self.sats_per_plane < 1 {
            return Err(Error::Config("sats_per_plane must be >= 1".into()));
        }
        if !(self.altitude_km > 0.0) || !self.altitude_km.is_finite() {
            return Err(Error::Config(format!(
                "altitude_km must be > 0 (got {})",
                self.altitude_km
            )));
        }
        if !(self.comm_range_km > 0.0) || !self.comm_range_km.is_finite() {
            return Err(Error::Config(format!(
                "comm_range_km must be > 0 (got {})",
                self.comm_range_km
            )));
        }
        if self.phase_factor >= self.num_planes {
            return Err(Error::Config(format!(
                "phase_factor must satisfy 0 <= F < num_planes (got F={} with {} planes)",
                self.phase_factor, self.num_planes
            )));
        }
        if self.eccentricity != 0.0 {
            return Err(Error::Config(format!(
                "eccentricity must be 0, only circular orbits are supported (got {})",
                self.eccentricity
            )));
        }
        if !(self.earth_radius_km > 0.0) || !(self.mu > 0.0) {
            return Err(Error::Config(
                "earth_radius_km and mu must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn num_satellites(&self) -> usize {
        self.num_planes * self.sats_per_plane
    }

    /// Orbit radius (semi-major axis of the circular orbit), km.
    pub fn orbit_radius(&self) -> f64 {
        self.earth_radius_km + self.altitude_km
    }

    /// Orbital period `2*pi*sqrt(a^3/mu)`, seconds.
    pub fn period(&self) -> f64 {
        let a = self.orbit_radius();
        2.0 * PI * (a * a * a / self.mu).sqrt()
    }

    fn raan(&self, plane: usize) -> f64 {
        (plane as f64 * 360.0 / self.num_planes as f64).to_radians()
    }

    /// Argument of latitude at epoch for slot `slot` of plane `plane`, radians.
    fn initial_arg_latitude(&self, plane: usize, slot: usize) -> f64 {
        let total = (self.num_planes * self.sats_per_plane) as f64;
        let deg = slot as f64 * 360.0 / self.sats_per_plane as f64
            + plane as f64 * self.phase_factor as f64 * 360.0 / total;
        deg.to_radians()
    }

    /// In-plane basis (P, Q, normal) for a plane: `r(u) = a (P cos u + Q sin u)`.
    fn plane_basis(&self, plane: usize) -> (Vec3, Vec3, Vec3) {
        let raan = self.raan(plane);
        let inc = self.inclination_deg.to_radians();
        let (so, co) = raan.sin_cos();
        let (si, ci) = inc.sin_cos();
        let p = [co, so, 0.0];
        let q = [-so * ci, co * ci, si];
        let n = [so * si, -co * si, ci];
        (p, q, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteState {
    pub sat_id: usize,
    pub plane_index: usize,
    pub slot_index: usize,
    /// ECI position, km.
    pub position: Vec3,
}

/// How candidate inter-satellite links are proposed before range and
/// line-of-sight filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IslPolicy {
    /// Two intra-plane ring neighbors plus the nearest satellite in each adjacent plane.
    #[default]
    GridCapped,
    /// Every pair within range and with line of sight.
    RangeGraph,
}

impl std::str::FromStr for IslPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid-capped" => Ok(IslPolicy::GridCapped),
            "range-graph" => Ok(IslPolicy::RangeGraph),
            other => Err(Error::Config(format!(
                "unknown ISL policy {other:?} (expected grid-capped or range-graph)"
            ))),
        }
    }
}

impl std::fmt::Display for IslPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IslPolicy::GridCapped => "grid-capped",
            IslPolicy::RangeGraph => "range-graph",
        })
    }
}

/// One undirected inter-satellite link, `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub a: usize,
    pub b: usize,
    /// Propagation delay, seconds.
    pub delay: f64,
}

/// The network at one instant: nodes, undirected links and their propagation delays.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologySnapshot {
    pub time: f64,
    pub node_count: usize,
    /// Sorted by `(a, b)`.
    pub links: Vec<Link>,
    /// Nodes without any link.
    pub isolated: Vec<usize>,
    pub policy: Option<IslPolicy>,
    /// Satellite positions at `time`, when the snapshot came from a constellation.
    pub positions: Option<Vec<Vec3>>,
}

impl TopologySnapshot {
    /// Builds a snapshot from explicit edges. Duplicate and reversed pairs are merged.
    pub fn from_links(
        node_count: usize,
        links: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (i, j, delay) in links {
            if i == j {
                return Err(Error::Argument(format!("self-link on node {i}")));
            }
            if i >= node_count || j >= node_count {
                return Err(Error::Argument(format!(
                    "link ({i}, {j}) out of range for {node_count} nodes"
                )));
            }
            if !(delay > 0.0) || !delay.is_finite() {
                return Err(Error::Argument(format!(
                    "link ({i}, {j}) has non-positive delay {delay}"
                )));
            }
            let (a, b) = (i.min(j), i.max(j));
            if seen.insert((a, b)) {
                out.push(Link { a, b, delay });
            }
        }
        out.sort_by_key(|l| (l.a, l.b));
        let mut snap = Self {
            time: 0.0,
            node_count,
            links: out,
            isolated: Vec::new(),
            policy: None,
            positions: None,
        };
        snap.isolated = snap.compute_isolated();
        Ok(snap)
    }

    fn compute_isolated(&self) -> Vec<usize> {
        let mut has_link = vec![false; self.node_count];
        for l in &self.links {
            has_link[l.a] = true;
            has_link[l.b] = true;
        }
        (0..self.node_count).filter(|&i| !has_link[i]).collect()
    }

    /// Per node: `(neighbor, link index)` sorted by neighbor id.
    pub fn neighbor_table(&self) -> Vec<Vec<(usize, usize)>> {
        let mut table = vec![Vec::new(); self.node_count];
        for (k, l) in self.links.iter().enumerate() {
            table[l.a].push((l.b, k));
            table[l.b].push((l.a, k));
        }
        for row in &mut table {
            row.sort_unstable();
        }
        table
    }

    pub fn link_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.links
            .binary_search_by_key(&key, |l| (l.a, l.b))
            .ok()
    }

    pub fn to_json(&self) -> SnapshotJson {
        SnapshotJson {
            time: self.time,
            n: self.node_count,
            links: self.links.iter().map(|l| (l.a, l.b, l.delay)).collect(),
            isl_policy: self.policy,
            isolated: self.isolated.clone(),
            positions: self.positions.clone(),
        }
    }

    pub fn from_json(json: SnapshotJson) -> Result<Self> {
        let mut snap = Self::from_links(json.n, json.links)?;
        snap.time = json.time;
        snap.policy = json.isl_policy;
        if let Some(pos) = &json.positions {
            if pos.len() != json.n {
                return Err(Error::Format {
                    what: "snapshot",
                    reason: format!("{} positions for {} nodes", pos.len(), json.n),
                });
            }
        }
        snap.positions = json.positions;
        Ok(snap)
    }
}

/// Serialized snapshot: `{time, n, links: [[i, j, delay_s], ...]}` plus optional
/// metadata (policy, isolated nodes, positions in km).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotJson {
    pub time: f64,
    pub n: usize,
    pub links: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isl_policy: Option<IslPolicy>,
    #[serde(default)]
    pub isolated: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<Vec3>>,
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Central angle between two position vectors, radians in `[0, pi]`.
pub fn central_angle(a: Vec3, b: Vec3) -> f64 {
    // atan2 form stays accurate near 0 and pi.
    norm(cross(a, b)).atan2(dot(a, b))
}

pub fn build_walker(config: &ConstellationConfig) -> Result<Vec<SatelliteState>> {
    config.validate()?;
    let a = config.orbit_radius();
    let mut states = Vec::with_capacity(config.num_satellites());
    for plane in 0..config.num_planes {
        let (p, q, _) = config.plane_basis(plane);
        for slot in 0..config.sats_per_plane {
            let (su, cu) = config.initial_arg_latitude(plane, slot).sin_cos();
            states.push(SatelliteState {
                sat_id: plane * config.sats_per_plane + slot,
                plane_index: plane,
                slot_index: slot,
                position: scale(add(scale(p, cu), scale(q, su)), a),
            });
        }
    }
    Ok(states)
}

/// Advances every satellite along its circular orbit by `t` seconds.
pub fn propagate(
    states: &[SatelliteState],
    config: &ConstellationConfig,
    t: f64,
) -> Vec<SatelliteState> {
    let angle = 2.0 * PI * t / config.period();
    let (s, c) = angle.sin_cos();
    states
        .iter()
        .map(|st| {
            let (_, _, n) = config.plane_basis(st.plane_index);
            // Rodrigues rotation about the orbit normal; the position is normal to it.
            let r = st.position;
            let position = add(scale(r, c), scale(cross(n, r), s));
            SatelliteState {
                position,
                ..st.clone()
            }
        })
        .collect()
}

pub fn inter_sat_distance(a: &SatelliteState, b: &SatelliteState) -> f64 {
    norm(sub(a.position, b.position))
}

/// True iff the straight segment between the two satellites clears a sphere of
/// radius `earth_radius` centered at the origin.
pub fn line_of_sight(a: &SatelliteState, b: &SatelliteState, earth_radius: f64) -> bool {
    segment_clears_sphere(a.position, b.position, earth_radius)
}

fn segment_clears_sphere(a: Vec3, b: Vec3, radius: f64) -> bool {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        (-dot(a, ab) / len2).clamp(0.0, 1.0)
    };
    norm(add(a, scale(ab, t))) > radius
}

pub fn snapshot(
    states: &[SatelliteState],
    config: &ConstellationConfig,
    t: f64,
    policy: IslPolicy,
) -> TopologySnapshot {
    let n = states.len();
    let feasible = |i: usize, j: usize| {
        inter_sat_distance(&states[i], &states[j]) <= config.comm_range_km
            && line_of_sight(&states[i], &states[j], config.earth_radius_km)
    };

    let mut pairs = BTreeSet::new();
    match policy {
        IslPolicy::RangeGraph => {
            for i in 0..n {
                for j in i + 1..n {
                    if feasible(i, j) {
                        pairs.insert((i, j));
                    }
                }
            }
        }
        IslPolicy::GridCapped => {
            let mut by_plane: Vec<Vec<usize>> = vec![Vec::new(); config.num_planes];
            for (i, st) in states.iter().enumerate() {
                by_plane[st.plane_index].push(i);
            }
            let slot_lookup = |plane: usize, slot: usize| {
                by_plane[plane]
                    .iter()
                    .copied()
                    .find(|&k| states[k].slot_index == slot)
            };
            let spp = config.sats_per_plane;
            for (i, st) in states.iter().enumerate() {
                let mut proposals = Vec::new();
                if spp > 1 {
                    for slot in [(st.slot_index + 1) % spp, (st.slot_index + spp - 1) % spp] {
                        proposals.extend(slot_lookup(st.plane_index, slot));
                    }
                }
                if config.num_planes > 1 {
                    let np = config.num_planes;
                    for plane in [(st.plane_index + 1) % np, (st.plane_index + np - 1) % np] {
                        let nearest = by_plane[plane].iter().copied().min_by(|&x, &y| {
                            inter_sat_distance(st, &states[x])
                                .total_cmp(&inter_sat_distance(st, &states[y]))
                                .then(x.cmp(&y))
                        });
                        proposals.extend(nearest);
                    }
                }
                for j in proposals {
                    if j != i && feasible(i, j) {
                        pairs.insert((i.min(j), i.max(j)));
                    }
                }
            }
        }
    }

    let links: Vec<Link> = pairs
        .into_iter()
        .map(|(a, b)| Link {
            a,
            b,
            delay: inter_sat_distance(&states[a], &states[b]) / SPEED_OF_LIGHT_KM_S,
        })
        .collect();
    let mut snap = TopologySnapshot {
        time: t,
        node_count: n,
        links,
        isolated: Vec::new(),
        policy: Some(policy),
        positions: Some(states.iter().map(|s| s.position).collect()),
    };
    snap.isolated = snap.compute_isolated();
    snap
}

/// Builds the constellation, propagates it to `t` and takes a snapshot.
pub fn snapshot_at(
    config: &ConstellationConfig,
    t: f64,
    policy: IslPolicy,
) -> Result<TopologySnapshot> {
    let states = build_walker(config)?;
    let states = propagate(&states, config, t - config.epoch_s);
    Ok(snapshot(&states, config, t, policy))
}
