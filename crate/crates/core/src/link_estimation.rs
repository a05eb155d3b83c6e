//! Per-link reliability and delay estimators.
//!
//! Reliability uses a windowed mean with exponential history weighting: the
//! receiver counts received and missed packets over a window of `w`
//! transmissions and, at each window boundary, blends the window's ratio
//! `r / (r + m)` into the running estimate with history weight `alpha`.
//! Delay is a plain EWMA over ACK-timed hop samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{SimDuration, SimTime};
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Received,
    Missed,
}

/// Windowed-mean EWMA estimate of a link's packet reception ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrrEstimator {
    current: f64,
    alpha: f64,
    window_size: u32,
    received_in_window: u32,
    missed_in_window: u32,
}

impl PrrEstimator {
    pub fn new(initial: f64, alpha: f64, window_size: u32) -> Self {
        assert!((0.0..=1.0).contains(&initial), "initial PRR outside [0, 1]");
        assert!((0.0..=1.0).contains(&alpha), "alpha outside [0, 1]");
        assert!(window_size > 0, "window size must be positive");
        PrrEstimator {
            current: initial,
            alpha,
            window_size,
            received_in_window: 0,
            missed_in_window: 0,
        }
    }

    pub fn value(&self) -> f64 {
        self.current
    }

    pub fn window_size(&self) -> u32 {
        self.window_size
    }

    pub fn pending(&self) -> (u32, u32) {
        (self.received_in_window, self.missed_in_window)
    }

    /// Counts one packet; returns true when this record closed a window.
    pub fn record(&mut self, outcome: Outcome) -> bool {
        match outcome {
            Outcome::Received => self.received_in_window += 1,
            Outcome::Missed => self.missed_in_window += 1,
        }
        let seen = self.received_in_window + self.missed_in_window;
        if seen < self.window_size {
            return false;
        }
        let ratio = self.received_in_window as f64 / seen as f64;
        self.current = (self.alpha * self.current + (1.0 - self.alpha) * ratio).clamp(0.0, 1.0);
        self.received_in_window = 0;
        self.missed_in_window = 0;
        true
    }

    /// Records `missed` gaps followed by one reception.
    pub fn record_sequence_gap(&mut self, missed: u32) -> u32 {
        let mut flushes = 0;
        for _ in 0..missed {
            flushes += self.record(Outcome::Missed) as u32;
        }
        flushes + self.record(Outcome::Received) as u32
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("ACK at {ack} precedes head-of-line time {ready}")]
    AckBeforeSend { ready: SimTime, ack: SimTime },
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
}

/// EWMA of per-hop delay in seconds. Seeded by its first sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimator {
    current: Option<f64>,
    beta: f64,
}

impl DelayEstimator {
    pub fn new(beta: f64) -> Self {
        assert!((0.0..=1.0).contains(&beta), "beta outside [0, 1]");
        DelayEstimator {
            current: None,
            beta,
        }
    }

    /// Estimator that starts from `initial` instead of its first sample.
    pub fn with_initial(beta: f64, initial: f64) -> Self {
        DelayEstimator {
            current: Some(initial.max(0.0)),
            ..Self::new(beta)
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.current
    }

    pub fn value_or(&self, prior: f64) -> f64 {
        self.current.unwrap_or(prior)
    }

    /// Folds in one already-computed sample (seconds, clamped at zero).
    pub fn record_sample(&mut self, sample: f64) {
        let sample = sample.max(0.0);
        self.current = Some(match self.current {
            None => sample,
            Some(prev) => self.beta * prev + (1.0 - self.beta) * sample,
        });
    }

    /// Folds in the hop delay measured from head-of-line time `ready` to ACK
    /// arrival `ack`, minus the ACK's own airtime.
    pub fn record(
        &mut self,
        ready: SimTime,
        ack: SimTime,
        ack_size: u32,
        bandwidth: f64,
    ) -> Result<f64, EstimatorError> {
        if !(bandwidth > 0.0) {
            return Err(EstimatorError::NonPositiveBandwidth(bandwidth));
        }
        if ack < ready {
            return Err(EstimatorError::AckBeforeSend { ready, ack });
        }
        let sample = (ack.since(ready) - SimDuration::transmission(ack_size, bandwidth))
            .as_secs_f64()
            .max(0.0);
        self.record_sample(sample);
        Ok(sample)
    }
}

/// Estimator internals for one directional link. The PRR side is driven by
/// the receiver, the delay side by the sender.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub from: NodeId,
    pub to: NodeId,
    pub prr: PrrEstimator,
    pub delay: DelayEstimator,
    pub last_hello: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub alpha: f64,
    pub beta: f64,
    pub window: u32,
    pub initial_prr: f64,
    /// Delay assumed for links that have never been sampled, seconds.
    pub prior_delay: f64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        EstimatorParams {
            alpha: 0.6,
            beta: 0.5,
            window: 30,
            initial_prr: 1.0,
            prior_delay: 0.0675,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkSnapshot {
    pub to: NodeId,
    pub prr: f64,
    pub delay: f64,
}

/// All directional link states of a run, keyed by `(from, to)`.
#[derive(Debug, Clone)]
pub struct LinkTable {
    params: EstimatorParams,
    links: BTreeMap<(NodeId, NodeId), LinkState>,
}

impl LinkTable {
    pub fn new(params: EstimatorParams) -> Self {
        LinkTable {
            params,
            links: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &EstimatorParams {
        &self.params
    }

    pub fn get(&self, from: NodeId, to: NodeId) -> Option<&LinkState> {
        self.links.get(&(from, to))
    }

    pub fn entry(&mut self, from: NodeId, to: NodeId) -> &mut LinkState {
        let p = self.params;
        self.links.entry((from, to)).or_insert_with(|| LinkState {
            from,
            to,
            prr: PrrEstimator::new(p.initial_prr, p.alpha, p.window),
            delay: DelayEstimator::new(p.beta),
            last_hello: None,
        })
    }

    pub fn prr(&self, from: NodeId, to: NodeId) -> f64 {
        self.get(from, to)
            .map_or(self.params.initial_prr, |l| l.prr.value())
    }

    pub fn delay(&self, from: NodeId, to: NodeId) -> f64 {
        self.get(from, to).map_or(self.params.prior_delay, |l| {
            l.delay.value_or(self.params.prior_delay)
        })
    }

    /// Point-in-time copy of every outgoing link of `node`.
    pub fn snapshot_links(&self, node: NodeId) -> Vec<LinkSnapshot> {
        self.links
            .range((node, NodeId(0))..=(node, NodeId(u32::MAX)))
            .map(|(_, l)| LinkSnapshot {
                to: l.to,
                prr: l.prr.value(),
                delay: l.delay.value_or(self.params.prior_delay),
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LinkState> {
        self.links.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> EstimatorParams {
        EstimatorParams {
            alpha: 0.6,
            beta: 0.5,
            window: 30,
            initial_prr: 1.0,
            prior_delay: 0.07,
        }
    }

    #[test]
    fn all_received_window_blends_toward_one() {
        let mut e = PrrEstimator::new(0.5, 0.5, 30);
        for i in 0..30 {
            let flushed = e.record(Outcome::Received);
            assert_eq!(flushed, i == 29);
        }
        assert!((e.value() - 0.75).abs() < 1e-12);
        assert_eq!(e.pending(), (0, 0));
    }

    #[test]
    fn all_missed_window_scales_by_alpha() {
        let mut e = PrrEstimator::new(0.8, 0.6, 10);
        for _ in 0..10 {
            e.record(Outcome::Missed);
        }
        assert!((e.value() - 0.6 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn window_ratio_equal_to_prior_is_a_fixed_point() {
        let mut e = PrrEstimator::new(0.5, 0.6, 30);
        for i in 0..30 {
            e.record(if i % 2 == 0 {
                Outcome::Received
            } else {
                Outcome::Missed
            });
        }
        assert!((e.value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fresh_estimator_reports_initial_value() {
        let e = PrrEstimator::new(1.0, 0.6, 30);
        assert_eq!(e.value(), 1.0);
        let mut e2 = e;
        for _ in 0..30 {
            e2.record(Outcome::Received);
        }
        assert_eq!(e2.value(), 1.0);
    }

    #[test]
    fn estimate_changes_only_at_window_boundaries() {
        let mut e = PrrEstimator::new(1.0, 0.6, 30);
        for _ in 0..29 {
            e.record(Outcome::Missed);
            assert_eq!(e.value(), 1.0);
        }
        e.record(Outcome::Missed);
        assert!((e.value() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn sequence_gap_counts_misses_then_reception() {
        let mut e = PrrEstimator::new(1.0, 0.5, 4);
        assert_eq!(e.record_sequence_gap(2), 0);
        assert_eq!(e.pending(), (1, 2));
        assert_eq!(e.record_sequence_gap(0), 1);
        assert!((e.value() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn delay_ewma_examples() {
        let mut d = DelayEstimator::with_initial(0.5, 0.10);
        d.record_sample(0.06);
        assert!((d.value().unwrap() - 0.08).abs() < 1e-12);
        d.record_sample(0.08);
        assert!((d.value().unwrap() - 0.08).abs() < 1e-12);

        let mut fresh = DelayEstimator::new(0.5);
        assert_eq!(fresh.value(), None);
        fresh.record_sample(0.042);
        assert_eq!(fresh.value(), Some(0.042));
    }

    #[test]
    fn delay_sample_subtracts_ack_airtime() {
        let mut d = DelayEstimator::new(0.5);
        let ready = SimTime::from_secs_f64(1.0);
        // ACK of 24 bytes at 2400 B/s takes 10 ms
        let ack = SimTime::from_secs_f64(1.09);
        let s = d.record(ready, ack, 24, 2400.0).unwrap();
        assert!((s - 0.08).abs() < 1e-9);
        assert_eq!(
            d.record(ack, ready, 24, 2400.0),
            Err(EstimatorError::AckBeforeSend {
                ready: ack,
                ack: ready
            })
        );
        assert_eq!(
            d.record(ready, ack, 24, 0.0),
            Err(EstimatorError::NonPositiveBandwidth(0.0))
        );
    }

    #[test]
    fn delay_sample_clamped_at_zero() {
        let mut d = DelayEstimator::new(0.5);
        let t = SimTime::from_secs_f64(1.0);
        assert_eq!(d.record(t, t, 24, 2400.0).unwrap(), 0.0);
    }

    #[test]
    fn snapshot_lists_outgoing_links_only() {
        let mut table = LinkTable::new(params());
        assert!(table.snapshot_links(NodeId(1)).is_empty());
        table.entry(NodeId(1), NodeId(2)).delay.record_sample(0.05);
        table.entry(NodeId(1), NodeId(3));
        table.entry(NodeId(2), NodeId(1)).delay.record_sample(0.09);
        let snap = table.snapshot_links(NodeId(1));
        assert_eq!(snap.len(), 2);
        assert_eq!(snap[0].to, NodeId(2));
        assert_eq!(snap[0].delay, 0.05);
        assert_eq!(snap[1].delay, 0.07);
        // read-your-writes
        table.entry(NodeId(1), NodeId(2)).delay.record_sample(0.15);
        assert!((table.snapshot_links(NodeId(1))[0].delay - 0.10).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn prr_update_is_convex(prior in 0.0f64..=1.0, alpha in 0.0f64..=1.0, received in 0u32..=20) {
            let mut e = PrrEstimator::new(prior, alpha, 20);
            for i in 0..20 {
                e.record(if i < received { Outcome::Received } else { Outcome::Missed });
            }
            let ratio = received as f64 / 20.0;
            let (lo, hi) = (prior.min(ratio), prior.max(ratio));
            prop_assert!(e.value() >= lo - 1e-12 && e.value() <= hi + 1e-12);
        }

        #[test]
        fn delay_update_is_convex(prior in 0.0f64..10.0, beta in 0.0f64..=1.0, sample in 0.0f64..10.0) {
            let mut d = DelayEstimator::with_initial(beta, prior);
            d.record_sample(sample);
            let v = d.value().unwrap();
            prop_assert!(v >= prior.min(sample) - 1e-12 && v <= prior.max(sample) + 1e-12);
        }
    }
}
