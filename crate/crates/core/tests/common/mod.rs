#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lrthr_core::fixture::{parse_fixture, Fixture};
use lrthr_core::forwarding::ForwardingContext;
use lrthr_core::topology::{build_neighbor_tables, NodeId};

pub const WORKED_EXAMPLE: &str = include_str!("../../fixtures/worked_example.topo");

pub fn worked_example() -> Fixture {
    parse_fixture(WORKED_EXAMPLE).expect("worked_example fixture parses")
}

/// Decision context at S built from fixture geometry and the recorded link
/// estimates. Pairs without a recorded second-hop delay are skipped by the
/// policies, so the effective candidates are the geometric pairs that have
/// reports.
pub fn geometric_context(lag_time: f64) -> ForwardingContext {
    let f = worked_example();
    let tables = build_neighbor_tables(&f.topology);
    let delays = f
        .links
        .iter()
        .filter_map(|(k, l)| l.delay.map(|d| (*k, d)))
        .collect();
    let prrs = f
        .links
        .iter()
        .filter(|((from, _), _)| *from == NodeId(0))
        .filter_map(|((_, to), l)| l.prr.map(|p| (*to, p)))
        .collect();
    ForwardingContext::from_topology(
        NodeId(0),
        &f.topology,
        &tables,
        lag_time,
        &delays,
        &prrs,
        &BTreeMap::new(),
    )
}

/// The same decision with the two-hop candidate list taken verbatim from
/// the worked example, which includes (2, 7) even though 7 is farther from
/// the destination than 2.
pub fn stated_context(lag_time: f64) -> ForwardingContext {
    let mut ctx = geometric_context(lag_time);
    let n = NodeId;
    ctx.two_hop_pairs = BTreeSet::from([
        (n(1), n(5)),
        (n(1), n(6)),
        (n(2), n(7)),
        (n(3), n(8)),
        (n(3), n(9)),
        (n(4), n(10)),
    ]);
    ctx.link_view.delay.insert((n(2), n(7)), 0.02);
    ctx
}
