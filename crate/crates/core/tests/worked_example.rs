mod common;

use std::collections::BTreeSet;

use common::{worked_example, geometric_context, stated_context};
use lrthr_core::forwarding::{
    decide_lrthr, decide_speed, decide_thvr, one_hop_velocity, required_velocity, two_hop_velocity,
    update_lag_time, EmptySetPolicy, ForwardingWeights, Reason, SpeedParams, SpeedSelection,
    ThvrParams,
};
use lrthr_core::link_estimation::{EstimatorParams, LinkTable};
use lrthr_core::time::{SimDuration, SimTime};
use lrthr_core::topology::{build_neighbor_tables, favorable_one_hop, favorable_two_hop, NodeId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LAG: f64 = 0.55;
const TOL: f64 = 0.01;
const N: fn(u32) -> NodeId = NodeId;

/// `expected` is quoted with a fixed number of decimals; compare at that
/// precision.
fn close(actual: f64, expected: &str) -> bool {
    let decimals = expected.split_once('.').map_or(0, |(_, f)| f.len()) as i32;
    let scale = 10f64.powi(decimals);
    let rounded = (actual * scale).round() / scale;
    (rounded - expected.parse::<f64>().unwrap()).abs() <= TOL
}

#[test]
fn source_to_destination_is_150_m() {
    let f = worked_example();
    assert!((f.topology.distance(N(0), N(15)) - 150.0).abs() < 1e-6);
}

#[test]
fn favorable_sets_at_source() {
    let f = worked_example();
    let tables = build_neighbor_tables(&f.topology);
    assert_eq!(
        favorable_one_hop(N(0), &tables, &f.topology),
        BTreeSet::from([N(1), N(2), N(3), N(4)])
    );
    let relays: BTreeSet<NodeId> = favorable_two_hop(N(0), &tables, &f.topology)
        .into_iter()
        .map(|(_, z)| z)
        .collect();
    for z in [5, 6, 8, 9, 10] {
        assert!(relays.contains(&N(z)), "relay {z}");
    }
    assert!(favorable_one_hop(N(15), &tables, &f.topology).is_empty());
}

#[test]
fn source_link_snapshot() {
    let f = worked_example();
    let mut table = LinkTable::new(EstimatorParams::default());
    for (&(from, to), l) in &f.links {
        if let Some(d) = l.delay {
            table.entry(from, to).delay.record_sample(d);
        }
    }
    let snap: Vec<(NodeId, f64)> = table
        .snapshot_links(N(0))
        .into_iter()
        .map(|s| (s.to, s.delay))
        .collect();
    assert_eq!(
        snap,
        vec![(N(1), 0.08), (N(2), 0.12), (N(3), 0.13), (N(4), 0.10)]
    );
}

#[test]
fn velocities_match_worked_example() {
    let ctx = stated_context(LAG);
    assert!(close(required_velocity(LAG, 150.0).unwrap(), "272.7"));
    let one_hop = [(1, "375"), (2, "350"), (3, "276.92"), (4, "225")];
    for (y, v) in one_hop {
        let got = one_hop_velocity(&ctx, N(y)).unwrap();
        assert!(close(got, v), "velocity via {y} = {got}");
    }
    let two_hop = [
        ((3, 8), "287.08"),
        ((2, 7), "285.7"),
        ((1, 6), "262.5"),
        ((3, 9), "262.5"),
    ];
    for ((y, z), v) in two_hop {
        let got = two_hop_velocity(&ctx, (N(y), N(z))).unwrap();
        assert!(close(got, v), "velocity via {y}->{z} = {got}");
    }
    // (150 - 117) / (0.08 + 0.06), with the first-hop delay to node 1
    let got = two_hop_velocity(&ctx, (N(1), N(5))).unwrap();
    assert!(close(got, "235.7"), "velocity via 1->5 = {got}");
}

#[test]
fn lrthr_picks_node_2_with_reliability_weighted_metric() {
    let ctx = stated_context(LAG);
    let prr_heavy = ForwardingWeights::new(0.8, 0.1, 0.1).unwrap();
    let d = decide_lrthr(&ctx, &prr_heavy, EmptySetPolicy::BestEffort).unwrap();
    assert_eq!(d.next_hop, Some(N(2)));
    assert_eq!(d.reason, Reason::Selected);
    let d = decide_lrthr(
        &ctx,
        &ForwardingWeights::default(),
        EmptySetPolicy::BestEffort,
    )
    .unwrap();
    assert_eq!(d.next_hop, Some(N(2)));
}

#[test]
fn lrthr_on_geometric_pairs_picks_node_3() {
    // Without the (2, 7) pair, (3, 8) is the only pair meeting 272.7 m/s.
    let ctx = geometric_context(LAG);
    assert!(!ctx.two_hop_pairs.contains(&(N(2), N(7))));
    let d = decide_lrthr(
        &ctx,
        &ForwardingWeights::default(),
        EmptySetPolicy::BestEffort,
    )
    .unwrap();
    assert_eq!(d.next_hop, Some(N(3)));
    assert_eq!(d.chosen_metric, 1.0);
}

#[test]
fn thvr_pure_velocity_picks_node_3() {
    let mut ctx = stated_context(LAG);
    ctx.setpoint = 272.7;
    let params = ThvrParams {
        velocity_weight: 1.0,
        ..ThvrParams::default()
    };
    assert_eq!(decide_thvr(&ctx, &params).unwrap().next_hop, Some(N(3)));
}

#[test]
fn speed_fastest_picks_node_1() {
    let mut ctx = stated_context(LAG);
    ctx.setpoint = 272.7;
    let params = SpeedParams {
        k: 10.0,
        selection: SpeedSelection::Fastest,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        decide_speed(&ctx, &params, &mut rng).unwrap().next_hop,
        Some(N(1))
    );
}

#[test]
fn speed_proportional_never_picks_slow_neighbor() {
    let mut ctx = stated_context(LAG);
    ctx.setpoint = 272.7;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let d = decide_speed(&ctx, &SpeedParams::default(), &mut rng).unwrap();
        assert!(matches!(d.next_hop, Some(NodeId(1..=3))));
    }
}

#[test]
fn lag_time_after_relay() {
    let t_rx = SimTime::from_secs_f64(10.0);
    let t_tx = SimTime::from_secs_f64(10.13);
    let lt = update_lag_time(SimDuration::from_secs_f64(LAG), t_rx, t_tx, 0, 2400.0).unwrap();
    assert_eq!(lt, SimDuration::from_secs_f64(0.42));
}
