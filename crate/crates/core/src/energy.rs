//! Per-node battery ledger.
//!
//! Transmit and receive costs are per data packet and scale linearly with
//! frame size relative to the reference data frame, so control frames (ACKs,
//! HELLOs) are charged for their airtime. Idle and sleep are per-second rates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Tx,
    Rx,
    Idle,
    Sleep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyCosts {
    /// Joules per transmitted reference frame.
    pub tx: f64,
    /// Joules per received reference frame.
    pub rx: f64,
    /// Joules per second while idle listening.
    pub idle: f64,
    /// Joules per second while asleep.
    pub sleep: f64,
}

impl Default for EnergyCosts {
    fn default() -> Self {
        EnergyCosts {
            tx: 0.0255,
            rx: 0.021,
            idle: 0.0096,
            sleep: 0.000005,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("node {0} is dead")]
    DeadNode(NodeId),
    #[error("node {0} is not in the ledger")]
    UnknownNode(NodeId),
    #[error("negative duration {0}")]
    NegativeDuration(f64),
    #[error("{0:?} is not a per-packet cost")]
    NotPerPacket(Cause),
    #[error("{0:?} is not a per-second rate")]
    NotPerSecond(Cause),
}

/// Result of a successful charge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Charge {
    /// Joules actually debited (clamped at the remaining budget).
    pub joules: f64,
    /// The charge exhausted the battery.
    pub died: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEnergy {
    pub initial: f64,
    pub tx: f64,
    pub rx: f64,
    pub idle: f64,
    pub sleep: f64,
    pub dead: bool,
    /// Mains-powered nodes (the sink) are never charged.
    pub mains: bool,
}

impl NodeEnergy {
    pub fn consumed(&self) -> f64 {
        self.tx + self.rx + self.idle + self.sleep
    }

    pub fn residual(&self) -> f64 {
        if self.dead {
            0.0
        } else {
            (self.initial - self.consumed()).max(0.0)
        }
    }

    pub fn ratio(&self) -> f64 {
        if self.mains {
            1.0
        } else if self.dead || self.initial <= 0.0 {
            0.0
        } else {
            (self.residual() / self.initial).clamp(0.0, 1.0)
        }
    }

    fn bucket(&mut self, cause: Cause) -> &mut f64 {
        match cause {
            Cause::Tx => &mut self.tx,
            Cause::Rx => &mut self.rx,
            Cause::Idle => &mut self.idle,
            Cause::Sleep => &mut self.sleep,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    costs: EnergyCosts,
    reference_bytes: u32,
    nodes: Vec<NodeEnergy>,
}

impl EnergyLedger {
    /// Every node in `0..count` starts with `initial` joules; `mains` nodes
    /// are exempt from charging.
    pub fn new(
        count: usize,
        initial: f64,
        costs: EnergyCosts,
        reference_bytes: u32,
        mains: &[NodeId],
    ) -> Self {
        let nodes = (0..count)
            .map(|i| NodeEnergy {
                initial,
                tx: 0.0,
                rx: 0.0,
                idle: 0.0,
                sleep: 0.0,
                dead: false,
                mains: mains.contains(&NodeId(i as u32)),
            })
            .collect();
        EnergyLedger {
            costs,
            reference_bytes: reference_bytes.max(1),
            nodes,
        }
    }

    pub fn costs(&self) -> &EnergyCosts {
        &self.costs
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeEnergy> {
        self.nodes.get(id.0 as usize)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &NodeEnergy)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (NodeId(i as u32), n))
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(|n| !n.dead)
    }

    pub fn is_mains(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(|n| n.mains)
    }

    pub fn residual(&self, id: NodeId) -> f64 {
        self.node(id).map_or(0.0, NodeEnergy::residual)
    }

    pub fn initial(&self, id: NodeId) -> f64 {
        self.node(id).map_or(0.0, |n| n.initial)
    }

    pub fn energy_ratio(&self, id: NodeId) -> f64 {
        self.node(id).map_or(0.0, NodeEnergy::ratio)
    }

    /// Battery energy drawn by every node so far.
    pub fn total_consumed(&self) -> f64 {
        self.nodes.iter().map(NodeEnergy::consumed).sum()
    }

    fn debit(&mut self, id: NodeId, cause: Cause, joules: f64) -> Result<Charge, EnergyError> {
        let node = self
            .nodes
            .get_mut(id.0 as usize)
            .ok_or(EnergyError::UnknownNode(id))?;
        if node.dead {
            return Err(EnergyError::DeadNode(id));
        }
        if node.mains || joules <= 0.0 {
            return Ok(Charge {
                joules: 0.0,
                died: false,
            });
        }
        let available = node.initial - node.consumed();
        let (joules, died) = if joules >= available {
            (available.max(0.0), true)
        } else {
            (joules, false)
        };
        *node.bucket(cause) += joules;
        node.dead = died;
        Ok(Charge { joules, died })
    }

    /// Charges `count` reference-size packets of `cause` (tx or rx).
    pub fn charge(&mut self, id: NodeId, cause: Cause, count: u32) -> Result<Charge, EnergyError> {
        let unit = self.per_packet(cause)?;
        self.debit(id, cause, unit * count as f64)
    }

    /// Charges one frame of `bytes`, scaled against the reference frame.
    pub fn charge_bytes(
        &mut self,
        id: NodeId,
        cause: Cause,
        bytes: u32,
    ) -> Result<Charge, EnergyError> {
        let unit = self.per_packet(cause)?;
        self.debit(id, cause, unit * bytes as f64 / self.reference_bytes as f64)
    }

    /// Charges a time-based state (idle or sleep) for `seconds`.
    pub fn charge_time(
        &mut self,
        id: NodeId,
        cause: Cause,
        seconds: f64,
    ) -> Result<Charge, EnergyError> {
        if seconds < 0.0 {
            return Err(EnergyError::NegativeDuration(seconds));
        }
        let rate = match cause {
            Cause::Idle => self.costs.idle,
            Cause::Sleep => self.costs.sleep,
            other => return Err(EnergyError::NotPerSecond(other)),
        };
        self.debit(id, cause, rate * seconds)
    }

    fn per_packet(&self, cause: Cause) -> Result<f64, EnergyError> {
        match cause {
            Cause::Tx => Ok(self.costs.tx),
            Cause::Rx => Ok(self.costs.rx),
            other => Err(EnergyError::NotPerPacket(other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ledger() -> EnergyLedger {
        EnergyLedger::new(3, 2.0, EnergyCosts::default(), 150, &[NodeId(0)])
    }

    #[test]
    fn one_transmission_costs_table_value() {
        let mut l = ledger();
        let c = l.charge(NodeId(1), Cause::Tx, 1).unwrap();
        assert_eq!(c.joules, 0.0255);
        assert!((l.residual(NodeId(1)) - (2.0 - 0.0255)).abs() < 1e-15);
        assert!((l.energy_ratio(NodeId(1)) - 0.98725).abs() < 1e-6);
    }

    #[test]
    fn zero_count_and_zero_duration_are_free() {
        let mut l = ledger();
        l.charge(NodeId(1), Cause::Rx, 0).unwrap();
        l.charge_time(NodeId(1), Cause::Idle, 0.0).unwrap();
        assert_eq!(l.residual(NodeId(1)), 2.0);
        assert_eq!(l.energy_ratio(NodeId(1)), 1.0);
    }

    #[test]
    fn time_based_rates() {
        let mut l = ledger();
        let c = l.charge_time(NodeId(1), Cause::Idle, 1.0).unwrap();
        assert_eq!(c.joules, 0.0096);
        let c = l.charge_time(NodeId(2), Cause::Sleep, 10.0).unwrap();
        assert!((c.joules - 0.00005).abs() < 1e-18);
        assert_eq!(
            l.charge_time(NodeId(1), Cause::Idle, -1.0),
            Err(EnergyError::NegativeDuration(-1.0))
        );
        assert_eq!(
            l.charge_time(NodeId(1), Cause::Tx, 1.0),
            Err(EnergyError::NotPerSecond(Cause::Tx))
        );
    }

    #[test]
    fn transmit_only_budget_lasts_78_packets() {
        let mut l = ledger();
        let mut completed = 0;
        loop {
            let c = l.charge(NodeId(1), Cause::Tx, 1).unwrap();
            if c.died {
                break;
            }
            completed += 1;
        }
        assert_eq!(completed, (2.0f64 / 0.0255).floor() as u32);
        assert_eq!(completed, 78);
        assert!(!l.is_alive(NodeId(1)));
        assert_eq!(l.energy_ratio(NodeId(1)), 0.0);
        assert_eq!(
            l.charge(NodeId(1), Cause::Tx, 1),
            Err(EnergyError::DeadNode(NodeId(1)))
        );
        // clamped: never more than the initial budget
        assert!((l.node(NodeId(1)).unwrap().consumed() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frame_size_scales_cost() {
        let mut l = ledger();
        let c = l.charge_bytes(NodeId(1), Cause::Rx, 30).unwrap();
        assert!((c.joules - 0.021 * 30.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn mains_node_is_never_charged() {
        let mut l = ledger();
        let c = l.charge(NodeId(0), Cause::Rx, 1000).unwrap();
        assert_eq!(c.joules, 0.0);
        assert_eq!(l.energy_ratio(NodeId(0)), 1.0);
    }

    proptest! {
        #[test]
        fn ledger_conserves_and_never_increases(ops in prop::collection::vec((0u8..4, 0u32..5, 0.0f64..5.0), 0..200)) {
            let mut l = EnergyLedger::new(2, 2.0, EnergyCosts::default(), 150, &[]);
            let mut charged = 0.0;
            let mut last = l.residual(NodeId(1));
            for (kind, count, secs) in ops {
                let r = match kind {
                    0 => l.charge(NodeId(1), Cause::Tx, count),
                    1 => l.charge(NodeId(1), Cause::Rx, count),
                    2 => l.charge_time(NodeId(1), Cause::Idle, secs),
                    _ => l.charge_bytes(NodeId(1), Cause::Tx, count * 10),
                };
                if let Ok(c) = r { charged += c.joules; }
                let now = l.residual(NodeId(1));
                prop_assert!(now <= last + 1e-15);
                prop_assert!((0.0..=2.0).contains(&now));
                last = now;
            }
            let n = l.node(NodeId(1)).unwrap();
            prop_assert!((n.consumed() - charged).abs() <= 1e-12 * charged.max(1.0));
            if !n.dead {
                prop_assert!((n.initial - n.residual() - n.consumed()).abs() <= 1e-12);
            }
        }
    }
}
