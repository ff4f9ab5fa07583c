//! Deterministic synthetic traffic over a road graph.
//!
//! Speed at step `t` and node `n`:
//!
//! ```text
//! v = free_flow · profile(t mod 288) · capacity(t,n) · congestion(t,n) + σ·ε
//! ```
//!
//! clipped to `[0, free_flow]` (exactly 0 under full closure). `capacity` is `open_ratio^1.5` while an
//! incident is active and relaxes linearly back to 1 over the following six
//! steps. `congestion` is 0.8 when any downstream neighbour was below half
//! its free-flow speed in the previous step, else 1. This is a toy model of
//! spillback, not a calibrated traffic-flow model.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::csvio::{self, Table};
use crate::dataset::TrafficData;
use crate::error::{Error, Result};
use crate::graph::{RoadGraph, StaticAttrs};
use crate::rng;

pub const STEP_MINUTES: usize = 5;
pub const STEPS_PER_DAY: usize = 288;
/// Exponent mapping open-lane ratio to speed capacity.
pub const CAPACITY_EXPONENT: f64 = 1.5;
pub const SPILLBACK_FACTOR: f64 = 0.8;
/// Fraction of free-flow speed below which a node congests its upstream.
pub const SPILLBACK_THRESHOLD: f64 = 0.5;
/// Steps (30 minutes) to recover full capacity after an incident clears.
pub const RECOVERY_STEPS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IncidentKind {
    Accident,
    EmergencyConstruction,
    PlannedConstruction,
}

impl IncidentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IncidentKind::Accident => "accident",
            IncidentKind::EmergencyConstruction => "emergency_construction",
            IncidentKind::PlannedConstruction => "planned_construction",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "accident" => IncidentKind::Accident,
            "emergency_construction" => IncidentKind::EmergencyConstruction,
            "planned_construction" => IncidentKind::PlannedConstruction,
            _ => return None,
        })
    }
}

/// Lane closure at one node over steps `start..end` (end exclusive).
#[derive(Clone, Debug, PartialEq)]
pub struct IncidentEvent {
    pub node: usize,
    pub start: usize,
    pub end: usize,
    /// 1 = all lanes open, 0 = full closure.
    pub open_lane_ratio: f64,
    pub kind: IncidentKind,
}

impl IncidentEvent {
    pub fn is_active(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.node >= n {
            return Err(Error::Index(format!("incident node {} with {n} nodes", self.node)));
        }
        if self.start >= self.end {
            return Err(Error::Config(format!("incident start {} not before end {}", self.start, self.end)));
        }
        if !(0.0..=1.0).contains(&self.open_lane_ratio) {
            return Err(Error::Config(format!("open lane ratio {} outside [0,1]", self.open_lane_ratio)));
        }
        Ok(())
    }

    /// Capacity multiplier this incident imposes at step `t`, if any.
    fn capacity_at(&self, t: usize) -> Option<f64> {
        let closed = self.open_lane_ratio.powf(CAPACITY_EXPONENT);
        if self.is_active(t) {
            Some(closed)
        } else if t >= self.end && t < self.end + RECOVERY_STEPS {
            let k = (t - self.end + 1) as f64;
            Some(closed + (1.0 - closed) * k / RECOVERY_STEPS as f64)
        } else {
            None
        }
    }
}

/// Which capacity-feature channels the generator emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSchema {
    /// Incident occurrence `I` and open-lane ratio `O`.
    Icm495,
    /// Road type `L` and maximum throughput `MT` = AADT × lanes.
    Manhattan,
}

impl FeatureSchema {
    pub fn channel_names(self) -> &'static [&'static str] {
        match self {
            FeatureSchema::Icm495 => &["I", "O"],
            FeatureSchema::Manhattan => &["L", "MT"],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScenario {
    pub graph: RoadGraph,
    pub horizon: usize,
    /// Per-node free-flow speed, mph.
    pub free_flow: Vec<f64>,
    /// 288 multipliers in `(0,1]`, one per 5-minute slot of the day.
    pub daily_profile: Vec<f64>,
    pub incidents: Vec<IncidentEvent>,
    pub noise_sigma: f64,
    pub schema: FeatureSchema,
    pub seed: u64,
}

impl SyntheticScenario {
    fn validate(&self) -> Result<()> {
        let n = self.graph.n();
        if self.free_flow.len() != n || self.free_flow.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("free-flow speeds must be positive, one per node".into()));
        }
        if self.daily_profile.len() != STEPS_PER_DAY || self.daily_profile.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Config(format!("daily profile needs {STEPS_PER_DAY} values in (0,1]")));
        }
        if self.horizon == 0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("horizon must be positive and noise non-negative".into()));
        }
        self.incidents.iter().try_for_each(|e| e.validate(n))
    }
}

/// Two rush-hour dips (08:00 and 17:30), minimum multiplier about 0.65.
pub fn rush_hour_profile() -> Vec<f64> {
    (0..STEPS_PER_DAY)
        .map(|k| {
            let h = k as f64 * STEP_MINUTES as f64 / 60.0;
            1.0 - 0.30 * (-((h - 8.0) / 1.0).powi(2)).exp() - 0.35 * (-((h - 17.5) / 1.2).powi(2)).exp()
        })
        .collect()
}

pub fn flat_profile() -> Vec<f64> {
    vec![1.0; STEPS_PER_DAY]
}

/// Free-flow speed by road type (1 = freeway … 5 = local).
pub fn free_flow_for(road_type: u8) -> f64 {
    [65.0, 55.0, 45.0, 35.0, 30.0][(road_type.clamp(1, 5) - 1) as usize]
}

/// Generates `(speeds [T,N], features [T,N,L])`.
pub fn generate(s: &SyntheticScenario) -> Result<TrafficData> {
    s.validate()?;
    let n = s.graph.n();
    let steps = s.horizon;
    let mut noise = rng::named(s.seed, "noise");
    let mut speeds = Array2::<f64>::zeros((steps, n));
    let mut by_node: Vec<Vec<&IncidentEvent>> = vec![Vec::new(); n];
    for e in &s.incidents {
        by_node[e.node].push(e);
    }
    for t in 0..steps {
        let profile = s.daily_profile[t % STEPS_PER_DAY];
        for k in 0..n {
            let eps: f64 = noise.sample(StandardNormal);
            let capacity = by_node[k]
                .iter()
                .filter_map(|e| e.capacity_at(t))
                .fold(1.0, f64::min);
            let spill = t > 0
                && s.graph
                    .downstream(k)
                    .iter()
                    .any(|&m| speeds[[t - 1, m]] < SPILLBACK_THRESHOLD * s.free_flow[m]);
            let congestion = if spill { SPILLBACK_FACTOR } else { 1.0 };
            // A fully closed link carries no traffic; noise does not apply.
            speeds[[t, k]] = if capacity == 0.0 {
                0.0
            } else {
                let v = s.free_flow[k] * profile * capacity * congestion + s.noise_sigma * eps;
                v.clamp(0.0, s.free_flow[k])
            };
        }
    }
    let names = s.schema.channel_names();
    let mut features = Array3::<f64>::zeros((steps, n, names.len()));
    match s.schema {
        FeatureSchema::Icm495 => {
            for t in 0..steps {
                for k in 0..n {
                    let active = by_node[k].iter().filter(|e| e.is_active(t));
                    let ratio = active.map(|e| e.open_lane_ratio).fold(None, |m: Option<f64>, r| {
                        Some(m.map_or(r, |m| m.min(r)))
                    });
                    features[[t, k, 0]] = if ratio.is_some() { 1.0 } else { 0.0 };
                    features[[t, k, 1]] = ratio.unwrap_or(1.0);
                }
            }
        }
        FeatureSchema::Manhattan => {
            for (k, a) in s.graph.attrs().iter().enumerate() {
                for t in 0..steps {
                    features[[t, k, 0]] = f64::from(a.road_type);
                    features[[t, k, 1]] = a.aadt * f64::from(a.lanes);
                }
            }
        }
    }
    Ok(TrafficData {
        node_ids: s.graph.node_ids().to_vec(),
        speeds,
        feature_names: names.iter().map(|n| n.to_string()).collect(),
        features,
    })
}

/// Writes `speeds.csv` and one `features_<name>.csv` per channel.
///
/// Values use the shortest decimal form that parses back to the same
/// `f64`, so [`crate::dataset::ingest`] reproduces the arrays bit-exactly.
pub fn export_dataset(data: &TrafficData, out_dir: &Path) -> Result<()> {
    let (steps, n) = data.speeds.dim();
    if data.node_ids.len() != n || data.features.dim().0 != steps || data.features.dim().1 != n {
        return Err(Error::dim(
            "export_dataset",
            &[steps, n],
            &[data.features.dim().0, data.features.dim().1],
        ));
    }
    let header = data.node_ids.join(",");
    let row = |vals: &mut dyn Iterator<Item = f64>| vals.map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    csvio::write(
        &out_dir.join("speeds.csv"),
        &header,
        (0..steps).map(|t| row(&mut (0..n).map(|k| data.speeds[[t, k]]))),
    )?;
    for (c, name) in data.feature_names.iter().enumerate() {
        csvio::write(
            &out_dir.join(format!("features_{name}.csv")),
            &header,
            (0..steps).map(|t| row(&mut (0..n).map(|k| data.features[[t, k, c]]))),
        )?;
    }
    Ok(())
}

pub fn write_incidents(path: &Path, graph: &RoadGraph, incidents: &[IncidentEvent]) -> Result<()> {
    csvio::write(
        path,
        "node_id,start,end,open_lane_ratio,kind",
        incidents.iter().map(|e| {
            format!(
                "{},{},{},{},{}",
                graph.node_ids()[e.node],
                e.start,
                e.end,
                e.open_lane_ratio,
                e.kind.as_str()
            )
        }),
    )
}

pub fn read_incidents(path: &Path, graph: &RoadGraph) -> Result<Vec<IncidentEvent>> {
    let t = Table::read(path)?;
    t.expect_header(&["node_id", "start", "end", "open_lane_ratio", "kind"])?;
    t.rows
        .iter()
        .map(|(row, cells)| {
            if cells.len() != 5 {
                return Err(t.err(*row, "expected 5 cells"));
            }
            let node = graph
                .index_of(&cells[0])
                .ok_or_else(|| t.err(*row, format!("unknown node {}", cells[0])))?;
            let e = IncidentEvent {
                node,
                start: t.parse(*row, "start", &cells[1])?,
                end: t.parse(*row, "end", &cells[2])?,
                open_lane_ratio: t.parse(*row, "open_lane_ratio", &cells[3])?,
                kind: IncidentKind::parse(&cells[4]).ok_or_else(|| t.err(*row, format!("unknown kind {}", cells[4])))?,
            };
            e.validate(graph.n()).map_err(|err| t.err(*row, err.to_string()))?;
            Ok(e)
        })
        .collect()
}

/// Parameters for building a random scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioParams {
    pub nodes: usize,
    pub days: usize,
    pub incidents: usize,
    pub noise_sigma: f64,
    pub schema: FeatureSchema,
    pub flat_profile: bool,
    /// Probability of a second upstream feeder per node (merges).
    pub merge_prob: f64,
    /// Nodes `i` link from upstream nodes in `i-reach..i`.
    pub reach: usize,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            nodes: 40,
            days: 60,
            incidents: 120,
            noise_sigma: 1.5,
            schema: FeatureSchema::Icm495,
            flat_profile: false,
            merge_prob: 0.3,
            reach: 3,
        }
    }
}

/// Random directed network: every node `i > 0` is fed by one upstream node
/// within `reach` lower indices, plus an optional second feeder.
pub fn random_network(nodes: usize, merge_prob: f64, reach: usize, seed: u64) -> Result<RoadGraph> {
    let mut r = rng::named(seed, "network");
    let reach = reach.max(1);
    let mut edges = Vec::new();
    for i in 1..nodes {
        let lo = i.saturating_sub(reach);
        let p = r.random_range(lo..i);
        edges.push((p, i));
        if i - lo >= 2 && r.random_bool(merge_prob.clamp(0.0, 1.0)) {
            let mut q = r.random_range(lo..i);
            while q == p {
                q = r.random_range(lo..i);
            }
            edges.push((q, i));
        }
    }
    let attrs = (0..nodes)
        .map(|_| {
            let road_type: u8 = r.random_range(1..=5);
            let lanes = (5 - road_type as u32).max(1) + r.random_range(0..=1);
            let length_m = (r.random_range(200.0..2000.0f64) * 10.0).round() / 10.0;
            let aadt = (f64::from(lanes) * (20000.0 - 3000.0 * f64::from(road_type)) * r.random_range(0.8..1.2)).round();
            StaticAttrs {
                road_type,
                length_m,
                lanes,
                aadt,
            }
        })
        .collect();
    let ids = (0..nodes).map(|i| format!("{}", 24_892_500 + i)).collect();
    RoadGraph::new(ids, attrs, edges)
}

/// Samples non-overlapping incidents (per node, including recovery and a
/// one-hour gap).
pub fn random_incidents(graph: &RoadGraph, horizon: usize, count: usize, seed: u64) -> Result<Vec<IncidentEvent>> {
    let mut r = rng::named(seed, "incidents");
    let mut out: Vec<IncidentEvent> = Vec::with_capacity(count);
    let gap = RECOVERY_STEPS + 12;
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::Config(format!("cannot place {count} incidents in {horizon} steps")));
        }
        let kind = match r.random_range(0..3) {
            0 => IncidentKind::Accident,
            1 => IncidentKind::EmergencyConstruction,
            _ => IncidentKind::PlannedConstruction,
        };
        let duration = match kind {
            IncidentKind::Accident => r.random_range(4..=12),
            IncidentKind::EmergencyConstruction => r.random_range(6..=24),
            IncidentKind::PlannedConstruction => r.random_range(12..=36),
        };
        let node = r.random_range(0..graph.n());
        if duration + 1 >= horizon {
            continue;
        }
        let start = r.random_range(1..horizon - duration);
        let lanes = graph.attrs()[node].lanes;
        let closed = r.random_range(1..=lanes);
        let e = IncidentEvent {
            node,
            start,
            end: start + duration,
            open_lane_ratio: f64::from(lanes - closed) / f64::from(lanes),
            kind,
        };
        let clash = out
            .iter()
            .any(|o| o.node == node && e.start < o.end + gap && o.start < e.end + gap);
        if !clash {
            out.push(e);
        }
    }
    out.sort_by_key(|e| (e.start, e.node));
    Ok(out)
}

impl ScenarioParams {
    /// Builds the scenario, generating a random network unless `graph` is
    /// given.
    pub fn build(&self, graph: Option<RoadGraph>, seed: u64) -> Result<SyntheticScenario> {
        let graph = match graph {
            Some(g) => g,
            None => random_network(self.nodes, self.merge_prob, self.reach, seed)?,
        };
        let horizon = self.days * STEPS_PER_DAY;
        let incidents = random_incidents(&graph, horizon, self.incidents, seed)?;
        let free_flow = graph.attrs().iter().map(|a| free_flow_for(a.road_type)).collect();
        Ok(SyntheticScenario {
            graph,
            horizon,
            free_flow,
            daily_profile: if self.flat_profile { flat_profile() } else { rush_hour_profile() },
            incidents,
            noise_sigma: self.noise_sigma,
            schema: self.schema,
            seed,
        })
    }
}
