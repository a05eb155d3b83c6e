//! Next-hop selection.
//!
//! Three policies share one context type:
//!
//! * **LRTHR**: two-hop velocities against a per-packet required velocity
//!   recomputed at every hop from the remaining lag time; candidates meeting
//!   it are ranked by a normalized blend of link reliability, two-hop
//!   velocity and relative residual energy.
//! * **THVR-like**: two-hop velocities against a fixed setpoint, ranked by
//!   velocity and residual energy only, with optional near-source drop.
//! * **SPEED-like**: one-hop velocities against a fixed setpoint with
//!   stateless probabilistic forwarding and a relay-ratio drop rule.
//!
//! Every selected next hop is strictly closer to the destination than the
//! deciding node, so routes cannot loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{SimDuration, SimTime};
use crate::topology::{NeighborTables, NodeId, Topology};

#[derive(Debug, Error, PartialEq)]
pub enum ForwardingError {
    #[error("lag time {0} s leaves no time to reach the destination")]
    Expired(f64),
    #[error("no delay estimate for link {0} -> {1}")]
    MissingDelay(NodeId, NodeId),
    #[error("non-positive delay {delay} on link {from} -> {to}")]
    NonPositiveDelay {
        from: NodeId,
        to: NodeId,
        delay: f64,
    },
    #[error("node {0} has no known distance to the destination")]
    MissingGeometry(NodeId),
    #[error("weights must be non-negative and sum to 1, got ({a}, {b}, {c})")]
    InvalidWeights { a: f64, b: f64, c: f64 },
}

/// Weights of the reliability, velocity and energy terms of the rve metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardingWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ForwardingWeights {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self, ForwardingError> {
        let w = ForwardingWeights { a, b, c };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ForwardingError> {
        let ForwardingWeights { a, b, c } = *self;
        let finite = a.is_finite() && b.is_finite() && c.is_finite();
        if !finite || a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(ForwardingError::InvalidWeights { a, b, c });
        }
        Ok(())
    }
}

impl Default for ForwardingWeights {
    fn default() -> Self {
        ForwardingWeights {
            a: 0.1,
            b: 0.8,
            c: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyView {
    pub residual: f64,
    pub initial: f64,
}

impl EnergyView {
    pub fn ratio(&self) -> f64 {
        if self.initial > 0.0 {
            (self.residual / self.initial).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// What the deciding node believes about its links: its own first-hop PRR
/// and delay estimates plus the second-hop delays its neighbors reported.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkView {
    pub prr: BTreeMap<NodeId, f64>,
    pub delay: BTreeMap<(NodeId, NodeId), f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardingContext {
    pub node: NodeId,
    pub destination: NodeId,
    /// Remaining time to the deadline, seconds.
    pub lag_time: f64,
    /// Fixed per-packet speed setpoint used by the baseline policies, m/s.
    pub setpoint: f64,
    /// Hops the packet has already taken.
    pub hops_travelled: u32,
    pub one_hop: BTreeSet<NodeId>,
    pub two_hop_pairs: BTreeSet<(NodeId, NodeId)>,
    /// Distance to the destination of every node named in the context.
    pub distances: BTreeMap<NodeId, f64>,
    pub link_view: LinkView,
    pub energy_view: BTreeMap<NodeId, EnergyView>,
}

impl ForwardingContext {
    /// Context computed from ground-truth geometry. `delays` and `prrs` hold
    /// whatever estimates are available; missing entries stay missing.
    pub fn from_topology(
        node: NodeId,
        topology: &Topology,
        tables: &NeighborTables,
        lag_time: f64,
        delays: &BTreeMap<(NodeId, NodeId), f64>,
        prrs: &BTreeMap<NodeId, f64>,
        energies: &BTreeMap<NodeId, EnergyView>,
    ) -> Self {
        let one_hop = crate::topology::favorable_one_hop(node, tables, topology);
        let two_hop_pairs = crate::topology::favorable_two_hop(node, tables, topology);
        let distances = topology
            .node_ids()
            .map(|id| (id, topology.distance_to_destination(id)))
            .collect();
        let delay = delays
            .iter()
            .filter(|((from, to), _)| {
                (*from == node && one_hop.contains(to))
                    || (one_hop.contains(from) && two_hop_pairs.contains(&(*from, *to)))
            })
            .map(|(k, v)| (*k, *v))
            .collect();
        let prr = one_hop
            .iter()
            .filter_map(|y| prrs.get(y).map(|p| (*y, *p)))
            .collect();
        let energy_view = one_hop
            .iter()
            .filter_map(|y| energies.get(y).map(|e| (*y, *e)))
            .collect();
        ForwardingContext {
            node,
            destination: topology.destination(),
            lag_time,
            setpoint: 0.0,
            hops_travelled: 0,
            one_hop,
            two_hop_pairs,
            distances,
            link_view: LinkView { prr, delay },
            energy_view,
        }
    }

    pub fn distance(&self, id: NodeId) -> Result<f64, ForwardingError> {
        self.distances
            .get(&id)
            .copied()
            .ok_or(ForwardingError::MissingGeometry(id))
    }

    fn own_distance(&self) -> Result<f64, ForwardingError> {
        self.distance(self.node)
    }

    fn delay(&self, from: NodeId, to: NodeId) -> Result<f64, ForwardingError> {
        let d = *self
            .link_view
            .delay
            .get(&(from, to))
            .ok_or(ForwardingError::MissingDelay(from, to))?;
        if d > 0.0 {
            Ok(d)
        } else {
            Err(ForwardingError::NonPositiveDelay { from, to, delay: d })
        }
    }

    /// PRR of the first-hop link; unknown links are treated as perfect.
    pub fn prr(&self, y: NodeId) -> f64 {
        self.link_view.prr.get(&y).copied().unwrap_or(1.0)
    }

    /// Relative residual energy of `y`; unknown neighbors count as full.
    pub fn energy_ratio(&self, y: NodeId) -> f64 {
        self.energy_view.get(&y).map_or(1.0, EnergyView::ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Selected,
    NoCandidate,
    VelocityUnreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decision {
    pub next_hop: Option<NodeId>,
    pub reason: Reason,
    pub chosen_metric: f64,
}

impl Decision {
    fn select(next_hop: NodeId, metric: f64) -> Self {
        Decision {
            next_hop: Some(next_hop),
            reason: Reason::Selected,
            chosen_metric: metric,
        }
    }

    fn drop(reason: Reason) -> Self {
        Decision {
            next_hop: None,
            reason,
            chosen_metric: 0.0,
        }
    }
}

/// Speed needed to cover `dist_to_dest` within `lag_time` seconds.
pub fn required_velocity(lag_time: f64, dist_to_dest: f64) -> Result<f64, ForwardingError> {
    if !(lag_time > 0.0) {
        return Err(ForwardingError::Expired(lag_time));
    }
    Ok(dist_to_dest / lag_time)
}

/// Progress toward the destination per second over the link `x -> y`.
pub fn one_hop_velocity(ctx: &ForwardingContext, y: NodeId) -> Result<f64, ForwardingError> {
    let progress = ctx.own_distance()? - ctx.distance(y)?;
    Ok(progress / ctx.delay(ctx.node, y)?)
}

/// Progress per second over the two-hop path `x -> y -> z`.
pub fn two_hop_velocity(
    ctx: &ForwardingContext,
    (y, z): (NodeId, NodeId),
) -> Result<f64, ForwardingError> {
    let progress = ctx.own_distance()? - ctx.distance(z)?;
    let delay = ctx.delay(ctx.node, y)? + ctx.delay(y, z)?;
    Ok(progress / delay)
}

#[derive(Debug, Error, PartialEq)]
#[error("deadline expired: lag time would be {0}")]
pub struct LagExpired(pub SimDuration);

/// Lag time written into the header when a node that received the packet at
/// `t_rx` starts transmitting it at `t_tx`.
pub fn update_lag_time(
    previous: SimDuration,
    t_rx: SimTime,
    t_tx: SimTime,
    packet_size: u32,
    bandwidth: f64,
) -> Result<SimDuration, LagExpired> {
    let spent = t_tx.since(t_rx) + SimDuration::transmission(packet_size, bandwidth);
    let lt = previous - spent;
    if lt.is_positive() {
        Ok(lt)
    } else {
        Err(LagExpired(lt))
    }
}

/// Velocity of every pair whose estimates are complete, in pair order.
/// Pairs with a missing second-hop report are skipped.
fn pair_velocities(ctx: &ForwardingContext) -> Vec<((NodeId, NodeId), f64)> {
    ctx.two_hop_pairs
        .iter()
        .filter(|(y, _)| ctx.one_hop.contains(y))
        .filter_map(|&pair| match two_hop_velocity(ctx, pair) {
            Ok(v) => Some((pair, v)),
            Err(e) => {
                log::debug!("node {}: skipping pair {:?}: {e}", ctx.node, pair);
                None
            }
        })
        .collect()
}

fn normalized(value: f64, total: f64) -> f64 {
    if total > 0.0 {
        value / total
    } else {
        0.0
    }
}

/// rve score of each candidate pair. Each term is normalized by its sum over
/// the candidates; a zero sum zeroes that term for everyone.
pub fn rve_metric(
    ctx: &ForwardingContext,
    candidates: &[((NodeId, NodeId), f64)],
    weights: &ForwardingWeights,
) -> BTreeMap<(NodeId, NodeId), f64> {
    let prr_sum: f64 = candidates.iter().map(|((y, _), _)| ctx.prr(*y)).sum();
    let velocity_sum: f64 = candidates.iter().map(|(_, v)| *v).sum();
    let energy_sum: f64 = candidates
        .iter()
        .map(|((y, _), _)| ctx.energy_ratio(*y))
        .sum();
    candidates
        .iter()
        .map(|&((y, z), v)| {
            let score = weights.a * normalized(ctx.prr(y), prr_sum)
                + weights.b * normalized(v, velocity_sum)
                + weights.c * normalized(ctx.energy_ratio(y), energy_sum);
            ((y, z), score)
        })
        .collect()
}

/// First maximum in pair order, i.e. ties go to the smaller next hop.
fn argmax<K: Copy>(scores: impl IntoIterator<Item = (K, f64)>) -> Option<(K, f64)> {
    let mut best: Option<(K, f64)> = None;
    for (k, s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best
}

/// What LRTHR does when no pair meets the required velocity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptySetPolicy {
    /// Forward to the fastest pair anyway.
    #[default]
    BestEffort,
    Drop,
}

pub fn decide_lrthr(
    ctx: &ForwardingContext,
    weights: &ForwardingWeights,
    on_empty: EmptySetPolicy,
) -> Result<Decision, ForwardingError> {
    let required = required_velocity(ctx.lag_time, ctx.own_distance()?)?;
    if ctx.one_hop.contains(&ctx.destination) {
        return Ok(Decision::select(ctx.destination, 1.0));
    }
    let velocities = pair_velocities(ctx);
    if velocities.is_empty() {
        return Ok(Decision::drop(Reason::NoCandidate));
    }
    let meeting: Vec<_> = velocities
        .iter()
        .copied()
        .filter(|&(_, v)| v >= required)
        .collect();
    match meeting.len() {
        0 => match on_empty {
            EmptySetPolicy::Drop => Ok(Decision::drop(Reason::VelocityUnreachable)),
            EmptySetPolicy::BestEffort => {
                let ((y, _), v) = argmax(velocities).expect("non-empty");
                Ok(Decision::select(y, v / required))
            }
        },
        1 => Ok(Decision::select(meeting[0].0 .0, 1.0)),
        _ => {
            let scores = rve_metric(ctx, &meeting, weights);
            let ((y, _), score) = argmax(scores).expect("non-empty");
            Ok(Decision::select(y, score))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThvrParams {
    /// Weight of the velocity term; the energy term gets the remainder.
    pub velocity_weight: f64,
    pub drop_control: bool,
    /// Packets that have taken fewer hops than this count as near-source.
    pub near_source_hops: u32,
}

impl Default for ThvrParams {
    fn default() -> Self {
        ThvrParams {
            velocity_weight: 0.9,
            drop_control: true,
            near_source_hops: 1,
        }
    }
}

pub fn decide_thvr(
    ctx: &ForwardingContext,
    params: &ThvrParams,
) -> Result<Decision, ForwardingError> {
    if !(ctx.lag_time > 0.0) {
        return Err(ForwardingError::Expired(ctx.lag_time));
    }
    if ctx.one_hop.contains(&ctx.destination) {
        return Ok(Decision::select(ctx.destination, 1.0));
    }
    let velocities = pair_velocities(ctx);
    if velocities.is_empty() {
        return Ok(Decision::drop(Reason::NoCandidate));
    }
    let mut candidates: Vec<_> = velocities
        .iter()
        .copied()
        .filter(|&(_, v)| v >= ctx.setpoint)
        .collect();
    if candidates.is_empty() {
        if params.drop_control && ctx.hops_travelled < params.near_source_hops {
            return Ok(Decision::drop(Reason::VelocityUnreachable));
        }
        candidates = velocities;
    }
    let velocity_sum: f64 = candidates.iter().map(|(_, v)| *v).sum();
    let energy_sum: f64 = candidates
        .iter()
        .map(|((y, _), _)| ctx.energy_ratio(*y))
        .sum();
    let c = params.velocity_weight;
    let scores = candidates.iter().map(|&((y, z), v)| {
        let s = c * normalized(v, velocity_sum)
            + (1.0 - c) * normalized(ctx.energy_ratio(y), energy_sum);
        ((y, z), s)
    });
    let ((y, _), score) = argmax(scores).expect("non-empty");
    Ok(Decision::select(y, score))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedSelection {
    /// Pick among qualifying neighbors with probability proportional to
    /// their relay speed.
    #[default]
    Proportional,
    /// Always pick the fastest qualifying neighbor.
    Fastest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedParams {
    /// Gain of the relay-ratio rule applied when nobody meets the setpoint.
    pub k: f64,
    pub selection: SpeedSelection,
}

impl Default for SpeedParams {
    fn default() -> Self {
        SpeedParams {
            k: 10.0,
            selection: SpeedSelection::Proportional,
        }
    }
}

pub fn decide_speed<R: Rng + ?Sized>(
    ctx: &ForwardingContext,
    params: &SpeedParams,
    rng: &mut R,
) -> Result<Decision, ForwardingError> {
    if !(ctx.lag_time > 0.0) {
        return Err(ForwardingError::Expired(ctx.lag_time));
    }
    if ctx.one_hop.contains(&ctx.destination) {
        return Ok(Decision::select(ctx.destination, 1.0));
    }
    let velocities: Vec<(NodeId, f64)> = ctx
        .one_hop
        .iter()
        .filter_map(|&y| match one_hop_velocity(ctx, y) {
            Ok(v) => Some((y, v)),
            Err(e) => {
                log::debug!("node {}: skipping neighbor {y}: {e}", ctx.node);
                None
            }
        })
        .collect();
    if velocities.is_empty() {
        return Ok(Decision::drop(Reason::NoCandidate));
    }
    let qualifying: Vec<_> = velocities
        .iter()
        .copied()
        .filter(|&(_, v)| v >= ctx.setpoint)
        .collect();
    if qualifying.is_empty() {
        // relay ratio from the mean speed shortfall of the forwarding set
        let shortfall = velocities
            .iter()
            .map(|&(_, v)| (1.0 - v / ctx.setpoint).clamp(0.0, 1.0))
            .sum::<f64>()
            / velocities.len() as f64;
        let relay_ratio = (1.0 - params.k * shortfall).max(0.0);
        if rng.gen::<f64>() < relay_ratio {
            let (y, _) = argmax(velocities).expect("non-empty");
            return Ok(Decision::select(y, relay_ratio));
        }
        return Ok(Decision::drop(Reason::VelocityUnreachable));
    }
    match params.selection {
        SpeedSelection::Fastest => {
            let (y, _) = argmax(qualifying).expect("non-empty");
            Ok(Decision::select(y, 1.0))
        }
        SpeedSelection::Proportional => {
            let total: f64 = qualifying.iter().map(|(_, v)| *v).sum();
            let mut target = rng.gen::<f64>() * total;
            for &(y, v) in &qualifying {
                if target < v {
                    return Ok(Decision::select(y, v / total));
                }
                target -= v;
            }
            let &(y, v) = qualifying.last().expect("non-empty");
            Ok(Decision::select(y, v / total))
        }
    }
}

/// Policy selected by scenario configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Lrthr {
        weights: ForwardingWeights,
        on_empty: EmptySetPolicy,
    },
    Thvr(ThvrParams),
    Speed(SpeedParams),
}

impl Policy {
    pub fn decide<R: Rng + ?Sized>(
        &self,
        ctx: &ForwardingContext,
        rng: &mut R,
    ) -> Result<Decision, ForwardingError> {
        match self {
            Policy::Lrthr { weights, on_empty } => decide_lrthr(ctx, weights, *on_empty),
            Policy::Thvr(p) => decide_thvr(ctx, p),
            Policy::Speed(p) => decide_speed(ctx, p, rng),
        }
    }

    /// Whether the policy ranks two-hop pairs (and so needs neighbor reports).
    pub fn uses_two_hop(&self) -> bool {
        !matches!(self, Policy::Speed(_))
    }
}
