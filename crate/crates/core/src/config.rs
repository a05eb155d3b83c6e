//! Scenario configuration.
//!
//! Configs are TOML. Every field has a default, so an empty file is a valid
//! scenario; unknown keys are rejected. `key=value` overrides use dotted
//! paths (`protocol.weights.a=0.2`) and take precedence over the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::EnergyCosts;
use crate::forwarding::{EmptySetPolicy, ForwardingWeights, Policy, SpeedParams, ThvrParams};
use crate::link_estimation::EstimatorParams;
use crate::topology::{Field, Layout, Position, Region};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Missing {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}line {line}: {message}", origin(.path))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },
    #[error("{}invalid `{field}`{}: {message}", origin(.path), at_line(.line))]
    Invalid {
        path: Option<PathBuf>,
        field: String,
        line: Option<usize>,
        message: String,
    },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
}

fn origin(path: &Option<PathBuf>) -> String {
    path.as_ref()
        .map(|p| format!("{}: ", p.display()))
        .unwrap_or_default()
}

fn at_line(line: &Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Lrthr,
    Thvr,
    Speed,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Lrthr, PolicyKind::Thvr, PolicyKind::Speed];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Lrthr => "lrthr",
            PolicyKind::Thvr => "thvr",
            PolicyKind::Speed => "speed",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lrthr" => Ok(PolicyKind::Lrthr),
            "thvr" => Ok(PolicyKind::Thvr),
            "speed" => Ok(PolicyKind::Speed),
            other => Err(format!(
                "unknown policy `{other}` (expected lrthr, thvr or speed)"
            )),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How a receiver's link state reaches the sender between HELLOs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Carried inside the ACK.
    #[default]
    Piggyback,
    /// Sent as its own frame right after the ACK.
    Separate,
    /// Only HELLOs refresh neighbor state.
    HelloOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: usize,
    pub field_width: f64,
    pub field_height: f64,
    pub radio_range: f64,
    pub sink: [f64; 2],
    pub source_center: [f64; 2],
    pub source_half_side: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            nodes: 200,
            field_width: 200.0,
            field_height: 200.0,
            radio_range: 40.0,
            sink: [200.0, 200.0],
            source_center: [40.0, 40.0],
            source_half_side: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    pub sources: usize,
    /// Packets per second per source.
    pub rate: f64,
    pub payload: u32,
    /// Packets per run, split evenly across sources.
    pub packets: u32,
    /// Seconds of beaconing before the first packet.
    pub warmup: f64,
    /// Seconds after the last generation before the run is cut off.
    pub drain: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            sources: 10,
            rate: 1.0,
            payload: 150,
            packets: 500,
            warmup: 11.0,
            drain: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub policy: PolicyKind,
    pub weights: ForwardingWeights,
    pub on_empty: EmptySetPolicy,
    pub thvr: ThvrParams,
    pub speed: SpeedParams,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            policy: PolicyKind::Lrthr,
            weights: ForwardingWeights::default(),
            on_empty: EmptySetPolicy::BestEffort,
            thvr: ThvrParams::default(),
            speed: SpeedParams::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn policy(&self) -> Policy {
        match self.policy {
            PolicyKind::Lrthr => Policy::Lrthr {
                weights: self.weights,
                on_empty: self.on_empty,
            },
            PolicyKind::Thvr => Policy::Thvr(self.thvr),
            PolicyKind::Speed => Policy::Speed(self.speed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub window: u32,
    pub initial_prr: f64,
    /// Delay assumed for never-sampled links; unset means one uncontended
    /// data transmission.
    pub prior_delay: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            alpha: 0.6,
            beta: 0.5,
            window: 30,
            initial_prr: 1.0,
            prior_delay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// True per-link PRR is drawn uniformly from `[prr_min, prr_max]`.
    pub prr_min: f64,
    pub prr_max: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds of channel access per transmission with an empty queue.
    pub base_service: f64,
    /// Extra channel-access seconds per packet waiting behind the head.
    pub service_increment: f64,
    /// Extra channel-access seconds per packet backlogged at any radio
    /// neighbor, queued or in service.
    pub neighbor_increment: f64,
    pub max_retries: u32,
    pub ack_bytes: u32,
    pub feedback: FeedbackMode,
    /// Bytes of link state appended to an ACK or feedback frame.
    pub feedback_bytes: u32,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            prr_min: 0.7,
            prr_max: 1.0,
            bandwidth: 4800.0,
            base_service: 0.005,
            service_increment: 0.01,
            neighbor_increment: 0.0,
            max_retries: 3,
            ack_bytes: 14,
            feedback: FeedbackMode::Piggyback,
            feedback_bytes: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub initial: f64,
    pub tx: f64,
    pub rx: f64,
    pub idle: f64,
    pub sleep: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let c = EnergyCosts::default();
        EnergyConfig {
            initial: 2.0,
            tx: c.tx,
            rx: c.rx,
            idle: c.idle,
            sleep: c.sleep,
        }
    }
}

impl EnergyConfig {
    pub fn costs(&self) -> EnergyCosts {
        EnergyCosts {
            tx: self.tx,
            rx: self.rx,
            idle: self.idle,
            sleep: self.sleep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HelloConfig {
    pub period: f64,
    pub bytes: u32,
    /// A neighbor not heard from for this many seconds is forgotten.
    pub neighbor_timeout: f64,
}

impl Default for HelloConfig {
    fn default() -> Self {
        HelloConfig {
            period: 5.0,
            bytes: 32,
            neighbor_timeout: 12.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// End-to-end deadlines, seconds. `run` executes every deadline.
    pub deadlines: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Record event, decision and estimator traces.
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            deadlines: vec![0.35],
            seeds: vec![1],
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub topology: TopologyConfig,
    pub traffic: TrafficConfig,
    pub protocol: ProtocolConfig,
    pub estimator: EstimatorConfig,
    pub channel: ChannelConfig,
    pub energy: EnergyConfig,
    pub hello: HelloConfig,
    pub run: RunConfig,
}

struct Violation {
    field: &'static str,
    message: String,
}

fn check(ok: bool, field: &'static str, message: impl Into<String>) -> Result<(), Violation> {
    if ok {
        Ok(())
    } else {
        Err(Violation {
            field,
            message: message.into(),
        })
    }
}

fn positive(v: f64, field: &'static str) -> Result<(), Violation> {
    check(
        v.is_finite() && v > 0.0,
        field,
        format!("must be positive, got {v}"),
    )
}

fn non_negative(v: f64, field: &'static str) -> Result<(), Violation> {
    check(
        v.is_finite() && v >= 0.0,
        field,
        format!("must be non-negative, got {v}"),
    )
}

fn unit(v: f64, field: &'static str) -> Result<(), Violation> {
    check(
        (0.0..=1.0).contains(&v),
        field,
        format!("must lie in [0, 1], got {v}"),
    )
}

impl ScenarioConfig {
    pub fn layout(&self) -> Layout {
        let t = &self.topology;
        Layout {
            count: t.nodes,
            field: Field {
                width: t.field_width,
                height: t.field_height,
            },
            radio_range: t.radio_range,
            sink: Position::new(t.sink[0], t.sink[1]),
            source_region: Region::centered(
                Position::new(t.source_center[0], t.source_center[1]),
                t.source_half_side,
            ),
            sources: self.traffic.sources,
        }
    }

    pub fn estimator_params(&self) -> EstimatorParams {
        let e = &self.estimator;
        EstimatorParams {
            alpha: e.alpha,
            beta: e.beta,
            window: e.window,
            initial_prr: e.initial_prr,
            prior_delay: e.prior_delay.unwrap_or_else(|| self.nominal_hop_delay()),
        }
    }

    /// Delay of one data transmission on an idle node.
    pub fn nominal_hop_delay(&self) -> f64 {
        self.channel.base_service + self.traffic.payload as f64 / self.channel.bandwidth
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.violations().map_err(|v| ConfigError::Invalid {
            path: None,
            field: v.field.to_string(),
            line: None,
            message: v.message,
        })
    }

    fn violations(&self) -> Result<(), Violation> {
        let t = &self.topology;
        check(
            t.nodes >= 2,
            "topology.nodes",
            format!("need at least 2 nodes, got {}", t.nodes),
        )?;
        positive(t.field_width, "topology.field_width")?;
        positive(t.field_height, "topology.field_height")?;
        positive(t.radio_range, "topology.radio_range")?;
        let inside = |p: [f64; 2]| {
            (0.0..=t.field_width).contains(&p[0]) && (0.0..=t.field_height).contains(&p[1])
        };
        check(
            inside(t.sink),
            "topology.sink",
            "sink lies outside the field",
        )?;
        non_negative(t.source_half_side, "topology.source_half_side")?;
        let c = t.source_center;
        let h = t.source_half_side;
        check(
            inside([c[0] - h, c[1] - h]) && inside([c[0] + h, c[1] + h]),
            "topology.source_center",
            "source region does not fit inside the field",
        )?;

        let tr = &self.traffic;
        check(
            tr.sources < t.nodes,
            "traffic.sources",
            format!(
                "{} sources do not fit in {} nodes with a sink",
                tr.sources, t.nodes
            ),
        )?;
        positive(tr.rate, "traffic.rate")?;
        check(tr.payload > 0, "traffic.payload", "must be positive")?;
        non_negative(tr.warmup, "traffic.warmup")?;
        non_negative(tr.drain, "traffic.drain")?;
        check(
            tr.packets == 0 || tr.sources > 0,
            "traffic.sources",
            "packets need at least one source",
        )?;

        let p = &self.protocol;
        p.weights.validate().map_err(|e| Violation {
            field: "protocol.weights",
            message: e.to_string(),
        })?;
        unit(p.thvr.velocity_weight, "protocol.thvr.velocity_weight")?;
        non_negative(p.speed.k, "protocol.speed.k")?;

        let e = &self.estimator;
        unit(e.alpha, "estimator.alpha")?;
        unit(e.beta, "estimator.beta")?;
        check(e.window > 0, "estimator.window", "must be positive")?;
        unit(e.initial_prr, "estimator.initial_prr")?;
        if let Some(d) = e.prior_delay {
            positive(d, "estimator.prior_delay")?;
        }

        let ch = &self.channel;
        unit(ch.prr_min, "channel.prr_min")?;
        unit(ch.prr_max, "channel.prr_max")?;
        check(
            ch.prr_min <= ch.prr_max,
            "channel.prr_min",
            "must not exceed channel.prr_max",
        )?;
        positive(ch.bandwidth, "channel.bandwidth")?;
        non_negative(ch.base_service, "channel.base_service")?;
        non_negative(ch.service_increment, "channel.service_increment")?;
        non_negative(ch.neighbor_increment, "channel.neighbor_increment")?;

        let en = &self.energy;
        positive(en.initial, "energy.initial")?;
        non_negative(en.tx, "energy.tx")?;
        non_negative(en.rx, "energy.rx")?;
        non_negative(en.idle, "energy.idle")?;
        non_negative(en.sleep, "energy.sleep")?;

        let hl = &self.hello;
        positive(hl.period, "hello.period")?;
        positive(hl.neighbor_timeout, "hello.neighbor_timeout")?;

        let r = &self.run;
        check(
            !r.deadlines.is_empty(),
            "run.deadlines",
            "at least one deadline is required",
        )?;
        for &d in &r.deadlines {
            positive(d, "run.deadlines")?;
        }
        check(
            !r.seeds.is_empty(),
            "run.seeds",
            "at least one seed is required",
        )?;
        Ok(())
    }

    /// Parses and validates TOML text after applying `overrides`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        parse(text, None, overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Missing {
            path: path.to_path_buf(),
            source,
        })?;
        parse(&text, Some(path), overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_toml_string())
    }

    /// Applies dotted `key=value` overrides to an already-built config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        parse(&self.to_toml_string(), None, overrides)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Best-effort line of `field` (a dotted path) in `text`.
fn find_key_line(text: &str, field: &str) -> Option<usize> {
    let parts: Vec<&str> = field.split('.').collect();
    let mut section: Vec<String> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = header.split('.').map(|s| s.trim().to_string()).collect();
            if section == parts {
                return Some(idx + 1);
            }
            continue;
        }
        let Some((key, _)) = line.split_once('=') else {
            continue;
        };
        let mut path = section.clone();
        path.extend(key.trim().split('.').map(|s| s.trim().to_string()));
        // the key names the field, a table holding it, or a member of it
        if path.iter().zip(&parts).all(|(a, b)| a == b) {
            return Some(idx + 1);
        }
    }
    None
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(raw.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|k| k.trim().is_empty()) {
        return Err(ConfigError::Override(raw.to_string()));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((
        key.split('.').map(|k| k.trim().to_string()).collect(),
        parsed,
    ))
}

/// Applies one `key=value` override onto a TOML table.
pub fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), ConfigError> {
    let (path, value) = parse_override(raw)?;
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for key in parents {
        let entry = cursor
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(raw.to_string()))?;
    }
    cursor.insert(last.clone(), value);
    Ok(())
}

fn parse(
    text: &str,
    path: Option<&Path>,
    overrides: &[String],
) -> Result<ScenarioConfig, ConfigError> {
    let path_buf = path.map(Path::to_path_buf);
    let parse_error = |e: toml::de::Error, source: &str| ConfigError::Parse {
        path: path_buf.clone(),
        line: e.span().map_or(1, |s| line_of(source, s.start)),
        message: e.message().to_string(),
    };
    let mut config: ScenarioConfig = toml::from_str(text).map_err(|e| parse_error(e, text))?;
    if !overrides.is_empty() {
        // overrides land on the fully defaulted file config
        let mut table = toml::Table::try_from(&config).expect("config serializes");
        for raw in overrides {
            apply_override(&mut table, raw)?;
        }
        config = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid {
                path: path_buf.clone(),
                field: "override".into(),
                line: None,
                message: e.message().to_string(),
            })?;
    }
    config.violations().map_err(|v| ConfigError::Invalid {
        path: path_buf.clone(),
        field: v.field.to_string(),
        line: find_key_line(text, v.field),
        message: v.message,
    })?;
    Ok(config)
}
