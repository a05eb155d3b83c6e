//! Discrete-event network simulation.
//!
//! A run is single-threaded over a time-ordered event queue; ties are broken
//! by scheduling order, and every random outcome comes from counter-based
//! draws, so a run is a pure function of `(config, topology, deadline,
//! seed)`.
//!
//! Medium access is abstracted as a per-node FIFO: a transmission starts
//! `base_service + service_increment * waiting + neighbor_increment *
//! nearby` after the packet reaches the head of the queue, where `nearby`
//! counts packets queued or in service at radio neighbors. The sender stays busy until the ACK arrives or times
//! out, then retries the same next hop up to `max_retries` times.

mod node;
mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{FeedbackMode, ScenarioConfig};
use crate::draws;
use crate::energy::{Cause, EnergyLedger};
use crate::forwarding::{
    update_lag_time, EnergyView, ForwardingContext, ForwardingError, LinkView, Policy, Reason,
};
use crate::link_estimation::{EstimatorParams, LinkTable};
use crate::metrics::{finalize, DropReason, NodeEnergyRow, PacketRecord, RunMetrics};
use crate::time::{SimDuration, SimTime};
use crate::topology::{
    build_neighbor_tables, dist, place_scenario, NeighborTables, NodeId, Position, Topology,
    TopologyError,
};

pub use node::{Feedback, Hello, NeighborView, Packet};
use node::{InService, Node, Queued};
pub use trace::Trace;

const DRAW_TRUE_PRR: u64 = 1;
const DRAW_DATA: u64 = 2;
const DRAW_ACK: u64 = 3;
const DRAW_HELLO: u64 = 4;
const DRAW_FEEDBACK: u64 = 5;
const DRAW_PHASE: u64 = 6;
const DRAW_HELLO_PHASE: u64 = 7;
const STREAM_POLICY: u64 = 8;

/// Gap between the latest possible ACK arrival and the sender's timeout.
const ACK_GUARD: SimDuration = SimDuration::from_nanos(1_000);

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("source {0} is not in the topology")]
    MissingSource(NodeId),
    #[error("deadline must be positive, got {0}")]
    Deadline(f64),
}

#[derive(Debug)]
enum EventKind {
    Generate {
        source: NodeId,
        index: u32,
    },
    Service {
        node: NodeId,
    },
    DataArrive {
        from: NodeId,
        to: NodeId,
        packet: Packet,
        seq: u64,
    },
    AckArrive {
        sender: NodeId,
        from: NodeId,
        attempt: u64,
        feedback: Option<Feedback>,
    },
    AckTimeout {
        sender: NodeId,
        attempt: u64,
    },
    FeedbackArrive {
        sender: NodeId,
        from: NodeId,
        feedback: Feedback,
    },
    HelloTick {
        node: NodeId,
    },
    HelloArrive {
        hello: Rc<Hello>,
        receivers: Vec<NodeId>,
    },
}

#[derive(Debug)]
struct Event {
    at: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub packets: Vec<PacketRecord>,
    pub metrics: RunMetrics,
    /// Sum of every individual energy charge made during the run.
    pub energy_events: f64,
    /// Bytes of ACK, feedback and HELLO frames put on the air.
    pub control_bytes: u64,
    pub end_time: f64,
    pub trace: Option<Trace>,
}

struct Params {
    policy: Policy,
    bandwidth: f64,
    payload: u32,
    base_service: SimDuration,
    service_increment: SimDuration,
    neighbor_increment: SimDuration,
    max_retries: u32,
    ack_bytes: u32,
    feedback: FeedbackMode,
    feedback_bytes: u32,
    hello_period: SimDuration,
    hello_bytes: u32,
    neighbor_timeout: SimDuration,
    prr_min: f64,
    prr_max: f64,
    estimator: EstimatorParams,
    rate: f64,
    packets: u32,
    warmup: SimTime,
    drain: SimDuration,
}

/// Copies of one packet held in queues, in service, or on the air. An
/// undelivered packet drops when the last copy goes, with the reason of the
/// first copy lost for cause.
#[derive(Debug, Default)]
struct Custody {
    holders: u32,
    reason: Option<DropReason>,
}

pub struct Simulator {
    p: Params,
    seed: u64,
    deadline: SimDuration,
    topology: Topology,
    /// Ground-truth radio neighborhoods.
    radio: NeighborTables,
    sources: Vec<NodeId>,
    nodes: BTreeMap<NodeId, Node>,
    ledger: EnergyLedger,
    links: LinkTable,
    true_prr: BTreeMap<(NodeId, NodeId), f64>,
    queue: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    now: SimTime,
    rng: ChaCha8Rng,
    records: Vec<PacketRecord>,
    custody: Vec<Custody>,
    open_packets: u64,
    generation_done: bool,
    last_generation: SimTime,
    attempt_counter: u64,
    link_attempts: BTreeMap<(u64, NodeId, NodeId), u64>,
    energy_events: f64,
    control_bytes: u64,
    trace: Option<Trace>,
}

/// Places the scenario topology for `seed` and runs it.
pub fn run(config: &ScenarioConfig, deadline: f64, seed: u64) -> Result<RunOutput, SimError> {
    config.validate()?;
    let topology = place_scenario(seed, &config.layout())?;
    let mut sim = Simulator::new(config, topology, deadline, seed)?;
    Ok(sim.run_to_end())
}

impl Simulator {
    /// Sources are nodes `1..=traffic.sources`; the topology's destination
    /// is the sink and is mains-powered.
    pub fn new(
        config: &ScenarioConfig,
        topology: Topology,
        deadline: f64,
        seed: u64,
    ) -> Result<Self, SimError> {
        config.validate()?;
        if !(deadline > 0.0 && deadline.is_finite()) {
            return Err(SimError::Deadline(deadline));
        }
        let sources: Vec<NodeId> = (1..=config.traffic.sources as u32).map(NodeId).collect();
        for &s in &sources {
            if topology.position(s).is_none() || s == topology.destination() {
                return Err(SimError::MissingSource(s));
            }
        }
        let ch = &config.channel;
        let p = Params {
            policy: config.protocol.policy(),
            bandwidth: ch.bandwidth,
            payload: config.traffic.payload,
            base_service: SimDuration::from_secs_f64(ch.base_service),
            service_increment: SimDuration::from_secs_f64(ch.service_increment),
            neighbor_increment: SimDuration::from_secs_f64(ch.neighbor_increment),
            max_retries: ch.max_retries,
            ack_bytes: ch.ack_bytes,
            feedback: ch.feedback,
            feedback_bytes: ch.feedback_bytes,
            hello_period: SimDuration::from_secs_f64(config.hello.period),
            hello_bytes: config.hello.bytes,
            neighbor_timeout: SimDuration::from_secs_f64(config.hello.neighbor_timeout),
            prr_min: ch.prr_min,
            prr_max: ch.prr_max,
            estimator: config.estimator_params(),
            rate: config.traffic.rate,
            packets: config.traffic.packets,
            warmup: SimTime::from_secs_f64(config.traffic.warmup),
            drain: SimDuration::from_secs_f64(config.traffic.drain),
        };
        let max_id = topology.node_ids().map(|n| n.0).max().unwrap_or(0) as usize;
        let ledger = EnergyLedger::new(
            max_id + 1,
            config.energy.initial,
            config.energy.costs(),
            p.payload,
            &[topology.destination()],
        );
        let radio = build_neighbor_tables(&topology);
        let nodes = topology
            .nodes()
            .map(|(id, pos)| (id, Node::new(pos)))
            .collect();
        let mut sim = Simulator {
            links: LinkTable::new(p.estimator),
            p,
            seed,
            deadline: SimDuration::from_secs_f64(deadline),
            radio,
            sources,
            nodes,
            ledger,
            true_prr: BTreeMap::new(),
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: SimTime::ZERO,
            rng: {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(STREAM_POLICY);
                rng
            },
            records: Vec::new(),
            custody: Vec::new(),
            open_packets: 0,
            generation_done: false,
            last_generation: SimTime::ZERO,
            attempt_counter: 0,
            link_attempts: BTreeMap::new(),
            energy_events: 0.0,
            control_bytes: 0,
            trace: config.run.trace.then(Trace::default),
            topology,
        };
        sim.draw_true_prr();
        sim.schedule_initial();
        Ok(sim)
    }

    fn draw_true_prr(&mut self) {
        let (lo, hi) = (self.p.prr_min, self.p.prr_max);
        for (&a, ns) in &self.radio.n1 {
            for &b in ns {
                let u = draws::unit(self.seed, DRAW_TRUE_PRR, a.0 as u64, b.0 as u64, 0);
                self.true_prr.insert((a, b), lo + (hi - lo) * u);
            }
        }
    }

    /// Overrides the ground-truth PRR of one directional link.
    pub fn set_true_prr(&mut self, from: NodeId, to: NodeId, prr: f64) {
        self.true_prr.insert((from, to), prr.clamp(0.0, 1.0));
    }

    pub fn true_prr(&self, from: NodeId, to: NodeId) -> f64 {
        self.true_prr.get(&(from, to)).copied().unwrap_or(0.0)
    }

    fn schedule_initial(&mut self) {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            let phase = draws::unit(self.seed, DRAW_HELLO_PHASE, id.0 as u64, 0, 0);
            let offset =
                SimDuration::from_nanos((self.p.hello_period.as_nanos() as f64 * phase) as i64);
            self.schedule(SimTime::ZERO + offset, EventKind::HelloTick { node: id });
        }
        let total = self.p.packets as usize;
        let n = self.sources.len();
        if n == 0 || total == 0 {
            self.generation_done = true;
            self.last_generation = self.p.warmup;
            return;
        }
        let mut last = self.p.warmup;
        for (i, &s) in self.sources.clone().iter().enumerate() {
            let count = total / n + usize::from(i < total % n);
            if count == 0 {
                continue;
            }
            let t = self.generation_time(s, 0);
            self.schedule(
                t,
                EventKind::Generate {
                    source: s,
                    index: 0,
                },
            );
            last = last.max(self.generation_time(s, count as u32 - 1));
        }
        self.last_generation = last;
    }

    fn packets_for(&self, source: NodeId) -> u32 {
        let n = self.sources.len() as u32;
        let i = source.0 - 1;
        self.p.packets / n + u32::from(i < self.p.packets % n)
    }

    fn generation_time(&self, source: NodeId, index: u32) -> SimTime {
        let phase = draws::unit(self.seed, DRAW_PHASE, source.0 as u64, 0, 0);
        self.p.warmup + SimDuration::from_secs_f64((phase + index as f64) / self.p.rate)
    }

    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        debug_assert!(at >= self.now, "event scheduled in the past");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Event { at, seq, kind }));
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn ledger(&self) -> &EnergyLedger {
        &self.ledger
    }

    pub fn links(&self) -> &LinkTable {
        &self.links
    }

    /// `node`'s current view of `neighbor`.
    pub fn neighbor_view(&self, node: NodeId, neighbor: NodeId) -> Option<&NeighborView> {
        self.nodes.get(&node)?.neighbors.get(&neighbor)
    }

    pub fn known_neighbors(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes
            .get(&node)
            .map(|n| n.neighbors.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Last HELLO `node` broadcast.
    pub fn last_hello(&self, node: NodeId) -> Option<&Hello> {
        self.nodes.get(&node)?.last_hello.as_deref()
    }

    pub fn packets(&self) -> &[PacketRecord] {
        &self.records
    }

    fn finished(&self) -> bool {
        self.generation_done && self.open_packets == 0
    }

    fn cutoff(&self) -> SimTime {
        self.last_generation + self.p.drain
    }

    /// Processes events up to and including `until`. Returns false once the
    /// run is over.
    pub fn run_until(&mut self, until: SimTime) -> bool {
        while let Some(Reverse(ev)) = self.queue.peek() {
            if ev.at > until || self.finished() || ev.at > self.cutoff() {
                break;
            }
            let Reverse(ev) = self.queue.pop().expect("peeked");
            debug_assert!(ev.at >= self.now, "clock went backwards");
            self.now = ev.at;
            self.dispatch(ev.kind);
        }
        if !self.finished() && self.now < until.min(self.cutoff()) {
            self.now = until.min(self.cutoff());
        }
        !self.finished() && self.now < self.cutoff() && !self.queue.is_empty()
    }

    pub fn run_to_end(&mut self) -> RunOutput {
        let cutoff = self.cutoff();
        self.run_until(cutoff);
        self.finish()
    }

    fn finish(&mut self) -> RunOutput {
        let end = self.now;
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            self.touch(id);
        }
        for r in &mut self.records {
            if r.drop_reason.is_none() && r.delay.is_none() {
                r.drop_reason = Some(DropReason::InFlight);
            }
        }
        let energy_rows: Vec<NodeEnergyRow> = self
            .topology
            .nodes()
            .map(|(id, pos)| {
                let e = self.ledger.node(id).expect("every node has a ledger entry");
                NodeEnergyRow {
                    node_id: id,
                    x: pos.x,
                    y: pos.y,
                    initial: e.initial,
                    residual: e.residual(),
                    tx_j: e.tx,
                    rx_j: e.rx,
                    idle_j: e.idle,
                    sleep_j: e.sleep,
                }
            })
            .collect();
        let metrics = finalize(&self.records, energy_rows);
        RunOutput {
            packets: self.records.clone(),
            metrics,
            energy_events: self.energy_events,
            control_bytes: self.control_bytes,
            end_time: end.as_secs_f64(),
            trace: self.trace.clone(),
        }
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::Generate { source, index } => self.on_generate(source, index),
            EventKind::Service { node } => self.on_service(node),
            EventKind::DataArrive {
                from,
                to,
                packet,
                seq,
            } => self.on_data_arrive(from, to, packet, seq),
            EventKind::AckArrive {
                sender,
                from,
                attempt,
                feedback,
            } => self.on_ack(sender, from, attempt, feedback),
            EventKind::AckTimeout { sender, attempt } => self.on_ack_timeout(sender, attempt),
            EventKind::FeedbackArrive {
                sender,
                from,
                feedback,
            } => self.on_feedback(sender, from, feedback),
            EventKind::HelloTick { node } => self.on_hello_tick(node),
            EventKind::HelloArrive { hello, receivers } => self.on_hello_arrive(hello, receivers),
        }
    }

    fn event(&mut self, kind: &str, node: NodeId, detail: impl FnOnce() -> String) {
        if let Some(t) = &mut self.trace {
            t.event(self.now, kind, node, &detail());
        }
    }

    // ---- energy -------------------------------------------------------

    fn alive(&self, id: NodeId) -> bool {
        self.ledger.is_alive(id)
    }

    /// Brings `id`'s idle accounting up to now. Returns whether it is alive.
    fn touch(&mut self, id: NodeId) -> bool {
        if !self.alive(id) {
            return false;
        }
        let node = self.nodes.get_mut(&id).expect("known node");
        let idle = self.now.since(node.last_touch).as_secs_f64();
        node.last_touch = self.now;
        self.charge(id, |l| l.charge_time(id, Cause::Idle, idle), "idle")
    }

    /// Applies a charge; kills the node when it exhausts the battery.
    fn charge(
        &mut self,
        id: NodeId,
        f: impl FnOnce(&mut EnergyLedger) -> Result<crate::energy::Charge, crate::energy::EnergyError>,
        what: &str,
    ) -> bool {
        match f(&mut self.ledger) {
            Ok(c) => {
                self.energy_events += c.joules;
                if let Some(t) = &mut self.trace {
                    if c.joules > 0.0 {
                        t.energy(self.now, id, what, c.joules);
                    }
                }
                if c.died {
                    self.kill(id);
                    false
                } else {
                    true
                }
            }
            Err(_) => false,
        }
    }

    /// Touches then charges a frame of `bytes`.
    fn spend(&mut self, id: NodeId, cause: Cause, bytes: u32, what: &str) -> bool {
        self.touch(id) && self.charge(id, |l| l.charge_bytes(id, cause, bytes), what)
    }

    fn kill(&mut self, id: NodeId) {
        self.event("death", id, String::new);
        let node = self.nodes.get_mut(&id).expect("known node");
        let queued: Vec<Queued> = node.queue.drain(..).collect();
        let service = node.service.take();
        for q in queued {
            self.release(q.packet.id, Some(DropReason::EnergyExhausted));
        }
        if let Some(s) = service {
            self.release(s.queued.packet.id, Some(DropReason::EnergyExhausted));
        }
    }

    // ---- packets ------------------------------------------------------

    /// Gives up one copy of packet `id`; `reason` is `None` when the copy
    /// is redundant rather than lost.
    fn release(&mut self, id: u64, reason: Option<DropReason>) {
        let c = &mut self.custody[id as usize];
        c.holders -= 1;
        if c.reason.is_none() {
            c.reason = reason;
        }
        if c.holders == 0 && self.records[id as usize].delay.is_none() {
            let reason = c.reason.expect("a lost packet has a cause");
            self.end_packet(id, reason);
        }
    }

    fn end_packet(&mut self, id: u64, reason: DropReason) {
        let r = &mut self.records[id as usize];
        debug_assert!(
            r.drop_reason.is_none() && r.delay.is_none(),
            "packet {id} ended twice"
        );
        r.drop_reason = Some(reason);
        self.open_packets -= 1;
        if let Some(t) = &mut self.trace {
            t.event(
                self.now,
                "drop",
                NodeId(0),
                &format!("{id} {}", reason.name()),
            );
        }
    }

    fn on_generate(&mut self, source: NodeId, index: u32) {
        if index + 1 < self.packets_for(source) {
            let t = self.generation_time(source, index + 1);
            self.schedule(
                t,
                EventKind::Generate {
                    source,
                    index: index + 1,
                },
            );
        }
        let id = self.records.len() as u64;
        let dest = self.topology.destination();
        let distance = self.topology.distance(source, dest);
        self.records.push(PacketRecord {
            id,
            source,
            created: self.now.as_secs_f64(),
            deadline: self.deadline.as_secs_f64(),
            delay: None,
            final_lag: None,
            hops: 0,
            drop_reason: None,
        });
        self.custody.push(Custody {
            holders: 1,
            reason: None,
        });
        self.open_packets += 1;
        if self.records.len() as u64 == self.p.packets as u64 {
            self.generation_done = true;
        }
        self.event("generate", source, || id.to_string());
        let packet = Packet {
            id,
            source,
            created: self.now,
            deadline: self.deadline,
            lag: self.deadline,
            setpoint: distance / self.deadline.as_secs_f64(),
            path: vec![source],
        };
        if !self.touch(source) {
            self.release(id, Some(DropReason::EnergyExhausted));
            return;
        }
        let node = self.nodes.get_mut(&source).expect("source exists");
        node.seen.insert(id);
        node.queue.push_back(Queued {
            packet,
            t_rx: self.now,
        });
        self.schedule(self.now, EventKind::Service { node: source });
    }

    fn on_service(&mut self, id: NodeId) {
        if !self.alive(id) {
            return;
        }
        loop {
            let node = self.nodes.get_mut(&id).expect("known node");
            if node.service.is_some() {
                return;
            }
            let Some(q) = node.queue.pop_front() else {
                return;
            };
            let remaining = q.packet.lag - self.now.since(q.t_rx);
            if !remaining.is_positive() {
                self.release(q.packet.id, Some(DropReason::Deadline));
                continue;
            }
            let ctx = self.context(id, &q.packet, remaining);
            let decision = self.p.policy.decide(&ctx, &mut self.rng);
            let decision = match decision {
                Ok(d) => d,
                Err(ForwardingError::Expired(_)) => {
                    self.release(q.packet.id, Some(DropReason::Deadline));
                    continue;
                }
                Err(e) => {
                    log::debug!("node {id}: decision failed: {e}");
                    self.release(q.packet.id, Some(DropReason::NoCandidate));
                    continue;
                }
            };
            if let Some(t) = &mut self.trace {
                t.decision(self.now, q.packet.id, id, &decision);
            }
            let Some(next_hop) = decision.next_hop else {
                let reason = match decision.reason {
                    Reason::VelocityUnreachable => DropReason::VelocityUnreachable,
                    _ => DropReason::NoCandidate,
                };
                self.release(q.packet.id, Some(reason));
                continue;
            };
            self.attempt_counter += 1;
            let service = InService {
                queued: q,
                next_hop,
                head_since: self.now,
                attempts: 0,
                attempt_id: self.attempt_counter,
            };
            self.nodes.get_mut(&id).expect("known node").service = Some(service);
            self.transmit(id);
            return;
        }
    }

    /// Decision context from `x`'s neighbor table.
    fn context(&self, x: NodeId, packet: &Packet, remaining: SimDuration) -> ForwardingContext {
        let dest = self.topology.destination();
        let dest_pos = self.topology.position(dest).expect("destination exists");
        let node = &self.nodes[&x];
        let to_dest = |p: Position| dist(p, dest_pos);
        let own = to_dest(node.position);
        let mut distances = BTreeMap::from([(x, own), (dest, 0.0)]);
        let mut one_hop = BTreeSet::new();
        let mut two_hop_pairs = BTreeSet::new();
        let mut view = LinkView::default();
        let mut energy_view = BTreeMap::new();
        let two_hop = self.p.policy.uses_two_hop();
        for (&y, nv) in &node.neighbors {
            let dy = to_dest(nv.position);
            if !(own - dy > 0.0) {
                continue;
            }
            one_hop.insert(y);
            distances.insert(y, dy);
            view.delay.insert((x, y), self.links.delay(x, y));
            if let Some(prr) = nv.prr_in {
                view.prr.insert(y, prr);
            }
            energy_view.insert(y, nv.energy);
            if !two_hop {
                continue;
            }
            for (&z, &zp) in &nv.neighbors {
                let dz = to_dest(zp);
                if z == x || !(dy - dz > 0.0) {
                    continue;
                }
                two_hop_pairs.insert((y, z));
                distances.insert(z, dz);
                if let Some(&d) = nv.delays.get(&z) {
                    view.delay.insert((y, z), d);
                }
            }
        }
        ForwardingContext {
            node: x,
            destination: dest,
            lag_time: remaining.as_secs_f64(),
            setpoint: packet.setpoint,
            hops_travelled: packet.path.len() as u32 - 1,
            one_hop,
            two_hop_pairs,
            distances,
            link_view: view,
            energy_view,
        }
    }

    fn airtime(&self, bytes: u32) -> SimDuration {
        SimDuration::transmission(bytes, self.p.bandwidth)
    }

    fn ack_size(&self) -> u32 {
        match self.p.feedback {
            FeedbackMode::Piggyback => self.p.ack_bytes + self.p.feedback_bytes,
            _ => self.p.ack_bytes,
        }
    }

    fn next_link_draw(&mut self, purpose: u64, a: NodeId, b: NodeId) -> f64 {
        let c = self.link_attempts.entry((purpose, a, b)).or_insert(0);
        let counter = *c;
        *c += 1;
        draws::unit(self.seed, purpose, a.0 as u64, b.0 as u64, counter)
    }

    /// Starts one transmission attempt of `x`'s head-of-line packet.
    fn transmit(&mut self, x: NodeId) {
        let waiting = self.nodes[&x].queue.len() as i64;
        let nearby: i64 = self
            .radio
            .one_hop(x)
            .map(|n| {
                let node = &self.nodes[&n];
                node.queue.len() as i64 + i64::from(node.service.is_some())
            })
            .sum();
        let access = self.p.base_service
            + SimDuration::from_nanos(self.p.service_increment.as_nanos() * waiting)
            + SimDuration::from_nanos(self.p.neighbor_increment.as_nanos() * nearby);
        let t_tx = self.now + access;
        let service = self.nodes[&x].service.clone().expect("packet in service");
        let packet = &service.queued.packet;
        let size = self.p.payload;
        let lag = match update_lag_time(
            packet.lag,
            service.queued.t_rx,
            t_tx,
            size,
            self.p.bandwidth,
        ) {
            Ok(lag) => lag,
            Err(_) => {
                let pid = packet.id;
                self.finish_service(x);
                self.release(pid, Some(DropReason::Deadline));
                return;
            }
        };
        let pid = packet.id;
        if !self.spend(x, Cause::Tx, size, "data_tx") {
            // kill() already settled the packet
            return;
        }
        let y = service.next_hop;
        let seq = {
            let s = self
                .nodes
                .get_mut(&x)
                .expect("known node")
                .data_seq
                .entry(y)
                .or_insert(0);
            *s += 1;
            *s
        };
        let arrive = t_tx + self.airtime(size);
        let delivered = self.next_link_draw(DRAW_DATA, x, y) < self.true_prr(x, y);
        self.event("data_tx", x, || {
            format!("{pid} {y} {} {}", t_tx.as_nanos(), delivered)
        });
        if delivered {
            self.custody[pid as usize].holders += 1;
            let mut copy = service.queued.packet.clone();
            copy.lag = lag;
            self.schedule(
                arrive,
                EventKind::DataArrive {
                    from: x,
                    to: y,
                    packet: copy,
                    seq,
                },
            );
        }
        let timeout = arrive + self.airtime(self.ack_size()) + ACK_GUARD;
        self.schedule(
            timeout,
            EventKind::AckTimeout {
                sender: x,
                attempt: service.attempt_id,
            },
        );
    }

    fn finish_service(&mut self, x: NodeId) {
        if let Some(node) = self.nodes.get_mut(&x) {
            node.service = None;
        }
        self.schedule(self.now, EventKind::Service { node: x });
    }

    fn on_data_arrive(&mut self, x: NodeId, y: NodeId, mut packet: Packet, seq: u64) {
        if !self.spend(y, Cause::Rx, self.p.payload, "data_rx") {
            self.release(packet.id, Some(DropReason::EnergyExhausted));
            return;
        }
        let gap = {
            let node = self.nodes.get_mut(&y).expect("known node");
            let last = node.heard_data_seq.insert(x, seq).unwrap_or(0);
            seq.saturating_sub(last + 1) as u32
        };
        self.links.entry(x, y).prr.record_sequence_gap(gap);
        self.trace_estimator(x, y);
        let pid = packet.id;
        self.event("data_rx", y, || format!("{pid} {x}"));
        if self.nodes.get_mut(&y).expect("known node").seen.insert(pid) {
            packet.path.push(y);
            if y == self.topology.destination() {
                let elapsed = self.now.since(packet.created);
                debug_assert_eq!(elapsed, packet.deadline - packet.lag);
                let r = &mut self.records[pid as usize];
                r.delay = Some(elapsed.as_secs_f64());
                r.final_lag = Some(packet.lag.as_secs_f64());
                r.hops = packet.path.len() as u32 - 1;
                self.open_packets -= 1;
                self.custody[pid as usize].holders -= 1;
            } else {
                self.records[pid as usize].hops = packet.path.len() as u32 - 1;
                let node = self.nodes.get_mut(&y).expect("known node");
                node.queue.push_back(Queued {
                    packet,
                    t_rx: self.now,
                });
                self.schedule(self.now, EventKind::Service { node: y });
            }
        } else {
            self.release(pid, None);
        }
        self.send_ack(y, x);
    }

    fn feedback_for(&self, receiver: NodeId, sender: NodeId) -> Feedback {
        Feedback {
            prr: self.links.prr(sender, receiver),
            energy: self.energy_view(receiver),
        }
    }

    fn energy_view(&self, id: NodeId) -> EnergyView {
        EnergyView {
            residual: if self.ledger.is_mains(id) {
                self.ledger.initial(id)
            } else {
                self.ledger.residual(id)
            },
            initial: self.ledger.initial(id),
        }
    }

    fn send_ack(&mut self, y: NodeId, x: NodeId) {
        let size = self.ack_size();
        if !self.spend(y, Cause::Tx, size, "ack_tx") {
            return;
        }
        self.control_bytes += size as u64;
        let feedback = self.feedback_for(y, x);
        let ack_at = self.now + self.airtime(size);
        if self.next_link_draw(DRAW_ACK, y, x) < self.true_prr(y, x) {
            let attempt = self.nodes[&x]
                .service
                .as_ref()
                .filter(|s| s.next_hop == y)
                .map_or(0, |s| s.attempt_id);
            let piggy = (self.p.feedback == FeedbackMode::Piggyback).then_some(feedback);
            self.schedule(
                ack_at,
                EventKind::AckArrive {
                    sender: x,
                    from: y,
                    attempt,
                    feedback: piggy,
                },
            );
        }
        if self.p.feedback == FeedbackMode::Separate {
            let fsize = self.p.ack_bytes + self.p.feedback_bytes;
            // sent right after the ACK, charged at decision time
            if self.spend(y, Cause::Tx, fsize, "feedback_tx") {
                self.control_bytes += fsize as u64;
                if self.next_link_draw(DRAW_FEEDBACK, y, x) < self.true_prr(y, x) {
                    let at = ack_at + self.airtime(fsize);
                    self.schedule(
                        at,
                        EventKind::FeedbackArrive {
                            sender: x,
                            from: y,
                            feedback,
                        },
                    );
                }
            }
        }
    }

    fn on_ack(&mut self, x: NodeId, y: NodeId, attempt: u64, feedback: Option<Feedback>) {
        let matches = self.nodes[&x]
            .service
            .as_ref()
            .is_some_and(|s| s.attempt_id == attempt && s.next_hop == y);
        if !self.spend(x, Cause::Rx, self.ack_size(), "ack_rx") {
            return;
        }
        if let Some(f) = feedback {
            self.apply_feedback(x, y, f);
        }
        if !matches {
            return;
        }
        let head_since = self.nodes[&x].service.as_ref().expect("matched").head_since;
        let ack_size = self.ack_size();
        let bw = self.p.bandwidth;
        let now = self.now;
        if let Err(e) = self
            .links
            .entry(x, y)
            .delay
            .record(head_since, now, ack_size, bw)
        {
            log::warn!("delay sample rejected on {x}->{y}: {e}");
        }
        self.trace_estimator(x, y);
        let pid = self.nodes[&x]
            .service
            .as_ref()
            .expect("matched")
            .queued
            .packet
            .id;
        self.finish_service(x);
        self.release(pid, None);
    }

    fn on_feedback(&mut self, x: NodeId, y: NodeId, feedback: Feedback) {
        let size = self.p.ack_bytes + self.p.feedback_bytes;
        if self.spend(x, Cause::Rx, size, "feedback_rx") {
            self.apply_feedback(x, y, feedback);
        }
    }

    fn apply_feedback(&mut self, x: NodeId, y: NodeId, f: Feedback) {
        let now = self.now;
        if let Some(nv) = self
            .nodes
            .get_mut(&x)
            .expect("known node")
            .neighbors
            .get_mut(&y)
        {
            nv.prr_in = Some(f.prr);
            nv.energy = f.energy;
            nv.last_heard = now;
        }
    }

    fn on_ack_timeout(&mut self, x: NodeId, attempt: u64) {
        let Some(service) = self.nodes[&x].service.as_ref() else {
            return;
        };
        if service.attempt_id != attempt || !self.alive(x) {
            return;
        }
        let pid = service.queued.packet.id;
        let attempts = service.attempts + 1;
        if attempts > self.p.max_retries {
            self.finish_service(x);
            self.release(pid, Some(DropReason::Retries));
            return;
        }
        self.attempt_counter += 1;
        let next_attempt = self.attempt_counter;
        let s = self
            .nodes
            .get_mut(&x)
            .expect("known node")
            .service
            .as_mut()
            .expect("in service");
        s.attempts = attempts;
        s.attempt_id = next_attempt;
        self.transmit(x);
    }

    // ---- beacons ------------------------------------------------------

    fn on_hello_tick(&mut self, x: NodeId) {
        if !self.touch(x) {
            return;
        }
        let now = self.now;
        let timeout = self.p.neighbor_timeout;
        let node = self.nodes.get_mut(&x).expect("known node");
        node.neighbors
            .retain(|_, nv| now.since(nv.last_heard) <= timeout);
        node.hello_seq += 1;
        let neighbors: BTreeMap<NodeId, Position> = node
            .neighbors
            .iter()
            .map(|(&id, nv)| (id, nv.position))
            .collect();
        let seq = node.hello_seq;
        let position = node.position;
        let prr_reports = neighbors
            .keys()
            .map(|&y| (y, self.links.prr(y, x)))
            .collect();
        let delay_reports = neighbors
            .keys()
            .map(|&y| (y, self.links.delay(x, y)))
            .collect();
        let hello = Rc::new(Hello {
            from: x,
            seq,
            position,
            energy: self.energy_view(x),
            prr_reports,
            delay_reports,
            neighbors,
        });
        let period = self.p.hello_period;
        self.schedule(now + period, EventKind::HelloTick { node: x });
        if !self.spend(x, Cause::Tx, self.p.hello_bytes, "hello_tx") {
            return;
        }
        self.control_bytes += self.p.hello_bytes as u64;
        self.nodes.get_mut(&x).expect("known node").last_hello = Some(Rc::clone(&hello));
        let candidates: Vec<NodeId> = self.radio.one_hop(x).collect();
        let receivers: Vec<NodeId> = candidates
            .into_iter()
            .filter(|&r| {
                draws::unit(self.seed, DRAW_HELLO, x.0 as u64, r.0 as u64, seq)
                    < self.true_prr(x, r)
            })
            .collect();
        self.event("hello_tx", x, || format!("{seq} {}", receivers.len()));
        if !receivers.is_empty() {
            let at = now + self.airtime(self.p.hello_bytes);
            self.schedule(at, EventKind::HelloArrive { hello, receivers });
        }
    }

    fn on_hello_arrive(&mut self, hello: Rc<Hello>, receivers: Vec<NodeId>) {
        let x = hello.from;
        for r in receivers {
            if !self.spend(r, Cause::Rx, self.p.hello_bytes, "hello_rx") {
                continue;
            }
            let now = self.now;
            let node = self.nodes.get_mut(&r).expect("known node");
            let last = node.heard_hello_seq.insert(x, hello.seq);
            let gap = last.map(|l| hello.seq.saturating_sub(l + 1) as u32);
            node.neighbors.insert(
                x,
                NeighborView {
                    hello_seq: hello.seq,
                    position: hello.position,
                    energy: hello.energy,
                    last_heard: now,
                    prr_in: hello.prr_reports.get(&r).copied(),
                    delays: hello.delay_reports.clone(),
                    neighbors: hello.neighbors.clone(),
                },
            );
            let link = self.links.entry(x, r);
            match gap {
                Some(g) => {
                    link.prr.record_sequence_gap(g);
                }
                None => {
                    link.prr.record_sequence_gap(0);
                }
            }
            link.last_hello = Some(now);
            self.trace_estimator(x, r);
        }
    }

    fn trace_estimator(&mut self, from: NodeId, to: NodeId) {
        if let Some(t) = &mut self.trace {
            let prr = self.links.prr(from, to);
            let delay = self.links.delay(from, to);
            t.estimator(self.now, from, to, prr, delay);
        }
    }
}
