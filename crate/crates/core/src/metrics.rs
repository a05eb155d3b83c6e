//! Per-run and cross-run statistics.
//!
//! A packet is a miss unless it reached the sink before its deadline. Delay
//! statistics cover on-time deliveries only, and ECPP divides all energy
//! drawn during the run by the on-time delivery count.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Lag time ran out before delivery.
    Deadline,
    NoCandidate,
    VelocityUnreachable,
    EnergyExhausted,
    Retries,
    /// Still queued or in transit when the run ended.
    InFlight,
}

impl DropReason {
    pub const ALL: [DropReason; 6] = [
        DropReason::Deadline,
        DropReason::NoCandidate,
        DropReason::VelocityUnreachable,
        DropReason::EnergyExhausted,
        DropReason::Retries,
        DropReason::InFlight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DropReason::Deadline => "deadline",
            DropReason::NoCandidate => "no_candidate",
            DropReason::VelocityUnreachable => "velocity_unreachable",
            DropReason::EnergyExhausted => "energy_exhausted",
            DropReason::Retries => "retries",
            DropReason::InFlight => "in_flight",
        }
    }
}

/// Fate of one generated packet.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PacketRecord {
    pub id: u64,
    pub source: NodeId,
    /// Seconds.
    pub created: f64,
    pub deadline: f64,
    /// Elapsed seconds from creation to arrival at the sink.
    pub delay: Option<f64>,
    /// Lag time left in the header on arrival.
    pub final_lag: Option<f64>,
    pub hops: u32,
    pub drop_reason: Option<DropReason>,
}

impl PacketRecord {
    pub fn on_time(&self) -> bool {
        self.drop_reason.is_none() && self.delay.is_some_and(|d| d <= self.deadline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEnergyRow {
    pub node_id: NodeId,
    pub x: f64,
    pub y: f64,
    pub initial: f64,
    pub residual: f64,
    pub tx_j: f64,
    pub rx_j: f64,
    pub idle_j: f64,
    pub sleep_j: f64,
}

impl NodeEnergyRow {
    pub fn consumed(&self) -> f64 {
        self.tx_j + self.rx_j + self.idle_j + self.sleep_j
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub generated: u64,
    pub delivered_on_time: u64,
    pub missed: u64,
    /// `None` when nothing was generated.
    pub dmr: Option<f64>,
    /// `None` when nothing was delivered on time.
    pub ecpp: Option<f64>,
    pub delay_avg: Option<f64>,
    pub delay_worst: Option<f64>,
    pub drops_by_reason: BTreeMap<DropReason, u64>,
    pub total_energy: f64,
    pub energy_by_node: Vec<NodeEnergyRow>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty set of runs")]
    Empty,
}

/// Computes run statistics from packet fates and the final energy ledger.
pub fn finalize(packets: &[PacketRecord], energy_by_node: Vec<NodeEnergyRow>) -> RunMetrics {
    let generated = packets.len() as u64;
    let mut drops_by_reason = BTreeMap::new();
    let mut delays = Vec::new();
    for p in packets {
        if p.on_time() {
            delays.push(p.delay.expect("on-time packets have a delay"));
        } else {
            let reason = p.drop_reason.unwrap_or(DropReason::Deadline);
            *drops_by_reason.entry(reason).or_insert(0) += 1;
        }
    }
    let delivered_on_time = delays.len() as u64;
    let missed = generated - delivered_on_time;
    let total_energy: f64 = energy_by_node.iter().map(NodeEnergyRow::consumed).sum();
    let dmr = (generated > 0).then(|| missed as f64 / generated as f64);
    let ecpp = (delivered_on_time > 0).then(|| total_energy / delivered_on_time as f64);
    let delay_worst = delays.iter().copied().reduce(f64::max);
    // rounding can push the mean of equal values past their maximum
    let delay_avg =
        delay_worst.map(|worst| (delays.iter().sum::<f64>() / delays.len() as f64).min(worst));
    RunMetrics {
        generated,
        delivered_on_time,
        missed,
        dmr,
        ecpp,
        delay_avg,
        delay_worst,
        drops_by_reason,
        total_energy,
        energy_by_node,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dmr,
    Ecpp,
    DelayAvg,
    DelayWorst,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Dmr,
        Metric::Ecpp,
        Metric::DelayAvg,
        Metric::DelayWorst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dmr => "dmr",
            Metric::Ecpp => "ecpp",
            Metric::DelayAvg => "delay_avg",
            Metric::DelayWorst => "delay_worst",
        }
    }

    pub fn of(self, m: &RunMetrics) -> Option<f64> {
        match self {
            Metric::Dmr => m.dmr,
            Metric::Ecpp => m.ecpp,
            Metric::DelayAvg => m.delay_avg,
            Metric::DelayWorst => m.delay_worst,
        }
    }
}

/// One point of a curve: a metric summarized across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub param: f64,
    pub metric: Metric,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n_seeds: usize,
}

/// Mean and sample standard deviation. Values are sorted first so the result
/// does not depend on input order.
fn summarize(mut values: Vec<f64>) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        let mut sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        sq.sort_by(f64::total_cmp);
        (sq.iter().sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

/// Groups runs by parameter value; rows are ordered by parameter, then
/// metric. Undefined per-run values are left out of that metric's summary.
pub fn aggregate(runs: &[(f64, RunMetrics)]) -> Result<Vec<CurveRow>, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sorted: Vec<&(f64, RunMetrics)> = runs.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let groups = sorted.chunk_by(|a, b| a.0 == b.0);
    let mut rows = Vec::new();
    for members in groups {
        let param = members[0].0;
        for metric in Metric::ALL {
            let values: Vec<f64> = members.iter().filter_map(|(_, m)| metric.of(m)).collect();
            let n_seeds = values.len();
            let (mean, sd) = summarize(values);
            rows.push(CurveRow {
                param,
                metric,
                mean,
                sd,
                n_seeds,
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub const PACKET_COLUMNS: [&str; 7] = [
    "id",
    "source",
    "created",
    "delivered_flag",
    "delay",
    "hops",
    "drop_reason",
];

pub fn write_packets_csv<W: Write>(out: W, packets: &[PacketRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PACKET_COLUMNS)?;
    for p in packets {
        w.write_record([
            p.id.to_string(),
            p.source.to_string(),
            format!("{}", p.created),
            u8::from(p.on_time()).to_string(),
            opt(p.delay),
            p.hops.to_string(),
            p.drop_reason
                .map(DropReason::name)
                .unwrap_or("")
                .to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const CURVE_COLUMNS: [&str; 5] = ["param", "metric", "mean", "sd", "n_seeds"];

pub fn write_curve_csv<W: Write>(out: W, rows: &[CurveRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_COLUMNS)?;
    for r in rows {
        w.write_record([
            format!("{}", r.param),
            r.metric.name().to_string(),
            opt(r.mean),
            opt(r.sd),
            r.n_seeds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const ENERGY_COLUMNS: [&str; 9] = [
    "node_id", "x", "y", "initial", "residual", "tx_j", "rx_j", "idle_j", "sleep_j",
];

pub fn write_energy_csv<W: Write>(out: W, rows: &[NodeEnergyRow]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(ENERGY_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}
