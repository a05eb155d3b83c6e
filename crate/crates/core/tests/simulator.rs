use lrthr_core::config::{FeedbackMode, PolicyKind, ScenarioConfig};
use lrthr_core::metrics::{write_packets_csv, DropReason};
use lrthr_core::simulator::{run, Simulator};
use lrthr_core::time::{SimDuration, SimTime};
use lrthr_core::topology::{Field, NodeId, Position, Topology};

fn config(extra: &[&str]) -> ScenarioConfig {
    let mut overrides: Vec<String> = [
        "channel.prr_min=1.0",
        "channel.prr_max=1.0",
        "traffic.sources=1",
        "traffic.packets=5",
        "energy.initial=50.0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    ScenarioConfig::from_toml_str("", &overrides).unwrap()
}

/// Source 1 and sink 0, 30 m apart.
fn pair() -> Topology {
    Topology::new(
        [
            (NodeId(0), Position::new(30.0, 0.0)),
            (NodeId(1), Position::new(0.0, 0.0)),
        ],
        Field {
            width: 100.0,
            height: 10.0,
        },
        40.0,
        NodeId(0),
    )
    .unwrap()
}

/// Source 1, relays 2 and 3, sink 0 on a line with 30 m spacing.
fn chain() -> Topology {
    Topology::new(
        [
            (NodeId(1), Position::new(0.0, 5.0)),
            (NodeId(2), Position::new(30.0, 5.0)),
            (NodeId(3), Position::new(60.0, 5.0)),
            (NodeId(0), Position::new(90.0, 5.0)),
        ],
        Field {
            width: 100.0,
            height: 10.0,
        },
        40.0,
        NodeId(0),
    )
    .unwrap()
}

fn desk(extra: &[&str]) -> ScenarioConfig {
    let mut overrides: Vec<String> = [
        "topology.nodes=50",
        "topology.field_width=100.0",
        "topology.field_height=100.0",
        "topology.sink=[100.0, 100.0]",
        "topology.source_center=[20.0, 20.0]",
        "topology.source_half_side=10.0",
        "traffic.packets=120",
        "energy.initial=50.0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    ScenarioConfig::from_toml_str("", &overrides).unwrap()
}

#[test]
fn perfect_link_delivers_with_exact_latency() {
    let c = config(&[]);
    let mut sim = Simulator::new(&c, pair(), 0.35, 1).unwrap();
    let out = sim.run_to_end();
    assert_eq!(out.metrics.generated, 5);
    assert_eq!(out.metrics.delivered_on_time, 5);
    // 5 ms channel access plus 150 B at 4800 B/s
    for p in &out.packets {
        assert_eq!(p.delay, Some(0.03625));
        assert_eq!(p.hops, 1);
        assert_eq!(
            SimDuration::from_secs_f64(p.deadline)
                - SimDuration::from_secs_f64(p.final_lag.unwrap()),
            SimDuration::from_secs_f64(0.03625)
        );
    }
}

#[test]
fn multi_hop_elapsed_time_equals_lag_consumed() {
    let c = config(&["traffic.packets=20", "channel.prr_min=0.7"]);
    let out = run_on(&c, chain(), 0.5, 3);
    assert!(out.metrics.delivered_on_time > 0);
    for p in out.packets.iter().filter(|p| p.delay.is_some()) {
        let consumed = SimDuration::from_secs_f64(p.deadline)
            - SimDuration::from_secs_f64(p.final_lag.unwrap());
        assert_eq!(consumed, SimDuration::from_secs_f64(p.delay.unwrap()));
        assert_eq!(p.hops, 3);
    }
}

fn run_on(
    c: &ScenarioConfig,
    t: Topology,
    deadline: f64,
    seed: u64,
) -> lrthr_core::simulator::RunOutput {
    Simulator::new(c, t, deadline, seed).unwrap().run_to_end()
}

#[test]
fn dead_link_exhausts_retries_without_reception() {
    let c = config(&["run.trace=true"]);
    let mut sim = Simulator::new(&c, pair(), 0.35, 1).unwrap();
    sim.set_true_prr(NodeId(1), NodeId(0), 0.0);
    let out = sim.run_to_end();
    assert_eq!(out.metrics.delivered_on_time, 0);
    assert_eq!(
        out.metrics.drops_by_reason.get(&DropReason::Retries),
        Some(&5)
    );
    let trace = out.trace.unwrap();
    assert!(!trace.events.contains(",data_rx,"));
    // one first attempt plus three retries per packet
    assert_eq!(trace.events.matches(",data_tx,").count(), 5 * 4);
}

#[test]
fn lost_acks_do_not_drop_delivered_packets() {
    let c = config(&[]);
    let mut sim = Simulator::new(&c, pair(), 0.35, 1).unwrap();
    // the sink's HELLOs get through before its reverse link fails
    sim.run_until(SimTime::from_secs_f64(c.traffic.warmup - 0.5));
    sim.set_true_prr(NodeId(0), NodeId(1), 0.0);
    let out = sim.run_to_end();
    assert_eq!(out.metrics.delivered_on_time, 5);
    assert!(out.metrics.drops_by_reason.is_empty());
}

#[test]
fn packets_and_energy_are_conserved() {
    for (seed, policy) in [(1, "lrthr"), (2, "thvr"), (3, "speed"), (4, "lrthr")] {
        let c = desk(&[
            &format!("protocol.policy=\"{policy}\""),
            "traffic.sources=8",
        ]);
        let out = run(&c, 0.3, seed).unwrap();
        let m = &out.metrics;
        assert_eq!(m.generated, 120);
        let dropped: u64 = m.drops_by_reason.values().sum();
        assert_eq!(m.delivered_on_time + dropped, m.generated);
        let fates = out
            .packets
            .iter()
            .filter(|p| p.delay.is_some() != p.drop_reason.is_some())
            .count();
        assert_eq!(
            fates,
            out.packets.len(),
            "every packet has exactly one fate"
        );
        let ledger: f64 = m
            .energy_by_node
            .iter()
            .map(|r| r.initial - r.residual)
            .sum();
        let rel = (ledger - out.energy_events).abs() / out.energy_events;
        assert!(
            rel <= 1e-12,
            "ledger {ledger} vs events {} ({rel})",
            out.energy_events
        );
        for r in &m.energy_by_node {
            let causes = r.tx_j + r.rx_j + r.idle_j + r.sleep_j;
            assert!(((r.initial - r.residual) - causes).abs() <= 1e-12 * r.initial);
            assert!(r.residual >= 0.0 && r.residual <= r.initial);
        }
    }
}

#[test]
fn starved_batteries_kill_nodes_and_drop_their_packets() {
    let c = desk(&["energy.initial=0.5", "traffic.sources=8"]);
    let out = run(&c, 0.6, 5).unwrap();
    let m = &out.metrics;
    assert!(
        m.drops_by_reason
            .get(&DropReason::EnergyExhausted)
            .copied()
            .unwrap_or(0)
            > 0
    );
    let dead = m
        .energy_by_node
        .iter()
        .filter(|r| r.residual == 0.0)
        .count();
    assert!(dead > 0);
    let dropped: u64 = m.drops_by_reason.values().sum();
    assert_eq!(m.delivered_on_time + dropped, m.generated);
    let ledger: f64 = m
        .energy_by_node
        .iter()
        .map(|r| r.initial - r.residual)
        .sum();
    assert!((ledger - out.energy_events).abs() <= 1e-12 * out.energy_events);
}

#[test]
fn same_seed_same_trace_and_csv() {
    let c = desk(&["run.trace=true", "protocol.policy=\"speed\""]);
    let a = run(&c, 0.3, 11).unwrap();
    let b = run(&c, 0.3, 11).unwrap();
    assert_eq!(a.trace, b.trace);
    let csv = |o: &lrthr_core::simulator::RunOutput| {
        let mut buf = Vec::new();
        write_packets_csv(&mut buf, &o.packets).unwrap();
        buf
    };
    assert_eq!(csv(&a), csv(&b));
    let other = run(&c, 0.3, 12).unwrap();
    assert_ne!(a.trace, other.trace);
}

#[test]
fn piggybacked_feedback_costs_fewer_control_bytes() {
    let bytes = |mode: FeedbackMode| {
        let mut c = desk(&[]);
        c.channel.feedback = mode;
        run(&c, 0.5, 2).unwrap().control_bytes
    };
    let piggy = bytes(FeedbackMode::Piggyback);
    let separate = bytes(FeedbackMode::Separate);
    let hello_only = bytes(FeedbackMode::HelloOnly);
    assert!(piggy < separate, "{piggy} vs {separate}");
    assert!(hello_only < piggy);
}

#[test]
fn neighbor_delay_reports_match_the_last_hello() {
    let mut c = desk(&[]);
    c.channel.feedback = FeedbackMode::HelloOnly;
    let t = lrthr_core::topology::place_scenario(3, &c.layout()).unwrap();
    let mut sim = Simulator::new(&c, t, 0.5, 3).unwrap();
    sim.run_until(SimTime::from_secs_f64(40.0));
    let mut checked = 0;
    for x in sim.topology().node_ids().collect::<Vec<_>>() {
        for y in sim.known_neighbors(x) {
            let view = sim.neighbor_view(x, y).unwrap();
            let hello = sim.last_hello(y).unwrap();
            if view.hello_seq == hello.seq {
                assert_eq!(view.delays, hello.delay_reports);
                assert_eq!(view.neighbors, hello.neighbors);
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn no_traffic_leaves_ratios_undefined() {
    let c = desk(&["traffic.packets=0"]);
    let out = run(&c, 0.3, 1).unwrap();
    assert_eq!(out.metrics.generated, 0);
    assert_eq!(out.metrics.dmr, None);
    assert_eq!(out.metrics.ecpp, None);
}

#[test]
fn policies_share_the_topology_for_a_seed() {
    let mut c = desk(&[]);
    let lr = run(&c, 0.4, 9).unwrap();
    c.protocol.policy = PolicyKind::Speed;
    let sp = run(&c, 0.4, 9).unwrap();
    let pos = |o: &lrthr_core::simulator::RunOutput| {
        o.metrics
            .energy_by_node
            .iter()
            .map(|r| (r.node_id, r.x, r.y))
            .collect::<Vec<_>>()
    };
    assert_eq!(pos(&lr), pos(&sp));
}

#[test]
fn packets_end_once_when_relays_die_mid_transfer() {
    for policy in ["lrthr", "thvr", "speed"] {
        for seed in 1..=3 {
            let c = desk(&[
                &format!("protocol.policy=\"{policy}\""),
                "energy.initial=1.0",
                "traffic.packets=200",
            ]);
            let m = run(&c, 0.5, seed).unwrap().metrics;
            let dropped: u64 = m.drops_by_reason.values().sum();
            assert_eq!(
                m.delivered_on_time + dropped,
                m.generated,
                "{policy} seed {seed}"
            );
        }
    }
}
