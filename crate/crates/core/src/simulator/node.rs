use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use crate::forwarding::EnergyView;
use crate::time::{SimDuration, SimTime};
use crate::topology::{NodeId, Position};

/// Header and bookkeeping carried with a data packet.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub source: NodeId,
    pub created: SimTime,
    pub deadline: SimDuration,
    /// Lag time as last written into the header.
    pub lag: SimDuration,
    /// Speed setpoint fixed at the source, m/s.
    pub setpoint: f64,
    /// Nodes visited, source first.
    pub path: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub(super) struct Queued {
    pub packet: Packet,
    /// When this node received the packet (creation time at the source).
    pub t_rx: SimTime,
}

/// The head-of-line packet while its transmission attempts are running.
#[derive(Debug, Clone)]
pub(super) struct InService {
    pub queued: Queued,
    pub next_hop: NodeId,
    /// When the packet first reached the head of the queue.
    pub head_since: SimTime,
    pub attempts: u32,
    pub attempt_id: u64,
}

/// Link state a receiver reports back to the sender.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    /// Receiver-measured PRR of the sender's link into it.
    pub prr: f64,
    pub energy: EnergyView,
}

/// Periodic beacon contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub from: NodeId,
    pub seq: u64,
    pub position: Position,
    pub energy: EnergyView,
    /// PRR of each incoming link `y -> from`, measured by `from`.
    pub prr_reports: BTreeMap<NodeId, f64>,
    /// Delay estimate of each outgoing link `from -> y`.
    pub delay_reports: BTreeMap<NodeId, f64>,
    /// The sender's current neighbors and where they are.
    pub neighbors: BTreeMap<NodeId, Position>,
}

/// What a node knows about one neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborView {
    /// Sequence number of the HELLO this view was built from.
    pub hello_seq: u64,
    pub position: Position,
    pub energy: EnergyView,
    pub last_heard: SimTime,
    /// PRR of the link from the viewing node into this neighbor, as the
    /// neighbor last reported it.
    pub prr_in: Option<f64>,
    /// The neighbor's reported delays to its own neighbors.
    pub delays: BTreeMap<NodeId, f64>,
    pub neighbors: BTreeMap<NodeId, Position>,
}

#[derive(Debug)]
pub(super) struct Node {
    pub position: Position,
    pub queue: VecDeque<Queued>,
    pub service: Option<InService>,
    pub neighbors: BTreeMap<NodeId, NeighborView>,
    pub seen: BTreeSet<u64>,
    pub hello_seq: u64,
    /// Next per-link data sequence number, by receiver.
    pub data_seq: BTreeMap<NodeId, u64>,
    /// Last data sequence number heard, by sender.
    pub heard_data_seq: BTreeMap<NodeId, u64>,
    /// Last HELLO sequence number heard, by sender.
    pub heard_hello_seq: BTreeMap<NodeId, u64>,
    pub last_touch: SimTime,
    pub last_hello: Option<Rc<Hello>>,
}

impl Node {
    pub fn new(position: Position) -> Self {
        Node {
            position,
            queue: VecDeque::new(),
            service: None,
            neighbors: BTreeMap::new(),
            seen: BTreeSet::new(),
            hello_seq: 0,
            data_seq: BTreeMap::new(),
            heard_data_seq: BTreeMap::new(),
            heard_hello_seq: BTreeMap::new(),
            last_touch: SimTime::ZERO,
            last_hello: None,
        }
    }
}
