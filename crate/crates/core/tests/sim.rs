use std::collections::BTreeMap;

use hiflash::sim::{
    evaluate, normalize_costs, read_summary_csv, run, summarize, write_summary_csv, EventKind, EventLog, Method, PolicyConfig,
    Seeds, SimConfig, World, SUMMARY_HEADER,
};
use hiflash::Error;

fn small() -> SimConfig {
    let mut cfg = SimConfig::example();
    cfg.max_slots = 600;
    cfg
}

fn per_slot(log: &EventLog, kind: EventKind) -> BTreeMap<u64, usize> {
    let mut counts = BTreeMap::new();
    for r in log.records.iter().filter(|r| r.event == kind) {
        *counts.entry(r.slot).or_insert(0) += 1;
    }
    counts
}

#[test]
fn identical_configs_give_identical_logs() {
    for method in [Method::Hifl, Method::Fedasync, Method::Fedavg, Method::Hierfavg] {
        let mut cfg = small();
        cfg.method = method;
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a, b, "{}", method.name());
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        a.write_jsonl(&mut bytes_a).unwrap();
        b.write_jsonl(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }
}

#[test]
fn different_seeds_differ() {
    let a = run(&small()).unwrap();
    let mut cfg = small();
    cfg.seeds = Seeds::all(7);
    let b = run(&cfg).unwrap();
    assert_ne!(a.records, b.records);
}

#[test]
fn at_most_one_checkin_and_one_completion_per_slot() {
    for policy in [PolicyConfig::Unlimited, PolicyConfig::Fixed { k: 1 }, PolicyConfig::Random] {
        let mut cfg = small();
        cfg.num_edges = 4;
        cfg.policy = policy;
        let log = run(&cfg).unwrap();
        assert!(per_slot(&log, EventKind::Checkin).values().all(|&n| n <= 1));
        assert!(per_slot(&log, EventKind::Complete).values().all(|&n| n <= 1));
    }
}

#[test]
fn threshold_zero_runs_edges_one_at_a_time() {
    let mut cfg = small();
    cfg.num_edges = 4;
    cfg.policy = PolicyConfig::Fixed { k: 0 };
    let log = run(&cfg).unwrap();
    let mut running = 0i64;
    for r in &log.records {
        match r.event {
            EventKind::Accept => running += 1,
            EventKind::Complete => running -= 1,
            _ => {}
        }
        assert!((0..=1).contains(&running), "slot {}", r.slot);
    }
    assert_eq!(log.last().unwrap().discarded, 0);
    assert!(log.records.iter().filter(|r| r.event == EventKind::Complete).all(|r| r.tau == Some(0)));
}

#[test]
fn completions_are_either_applied_or_discarded() {
    let mut cfg = small();
    cfg.num_edges = 4;
    cfg.policy = PolicyConfig::Fixed { k: 1 };
    let log = run(&cfg).unwrap();
    let count = |k: EventKind| log.records.iter().filter(|r| r.event == k).count() as u64;
    let last = log.last().unwrap();
    assert_eq!(count(EventKind::Complete), count(EventKind::CloudUpdate) + count(EventKind::Discard));
    assert_eq!(last.cloud_comms, count(EventKind::CloudUpdate));
    assert_eq!(last.discarded, count(EventKind::Discard));
    assert_eq!(last.t_c, last.cloud_comms);
}

#[test]
fn an_edge_never_checks_in_while_it_is_running() {
    let mut cfg = small();
    cfg.num_edges = 4;
    cfg.policy = PolicyConfig::Unlimited;
    let log = run(&cfg).unwrap();
    let mut busy = vec![false; cfg.num_edges];
    for r in &log.records {
        let Some(u) = r.unit else { continue };
        match r.event {
            EventKind::Checkin => assert!(!busy[u], "edge {u} checked in while running at slot {}", r.slot),
            EventKind::Accept => busy[u] = true,
            EventKind::Complete => busy[u] = false,
            _ => {}
        }
    }
}

#[test]
fn cumulative_columns_never_decrease() {
    for method in [Method::Hifl, Method::Hiflash, Method::Fedasync, Method::Fedavg, Method::Hierfavg] {
        let mut cfg = small();
        cfg.method = method;
        if method == Method::Hiflash {
            cfg.method = Method::Hifl;
        }
        let log = run(&cfg).unwrap();
        for w in log.records.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            assert!(b.slot >= a.slot && b.t_c >= a.t_c);
            assert!(b.epochs >= a.epochs && b.comp_cost >= a.comp_cost && b.comm_cost >= a.comm_cost);
            assert!(b.cloud_comms >= a.cloud_comms && b.discarded >= a.discarded);
        }
        assert_eq!(log.rewards.len() as u64, log.outcome.slots);
        assert!(log.rewards.iter().all(|&r| r <= -1.0));
    }
}

#[test]
fn communication_is_charged_once_per_completion() {
    let mut cfg = small();
    cfg.resources.jitter = None;
    cfg.num_edges = 4;
    cfg.policy = PolicyConfig::Unlimited;
    let world = World::build(&cfg).unwrap();
    let log = run(&cfg).unwrap();
    let expected: f64 = log
        .records
        .iter()
        .filter(|r| r.event == EventKind::Complete)
        .map(|r| world.units[r.unit.unwrap()].round_comm)
        .sum();
    let got = log.last().unwrap().comm_cost;
    assert!((got - expected).abs() <= 1e-9 * expected.max(1.0), "{got} vs {expected}");
}

#[test]
fn fedasync_units_are_single_clients() {
    let mut cfg = small();
    cfg.method = Method::Fedasync;
    cfg.policy = PolicyConfig::Unlimited;
    let world = World::build(&cfg).unwrap();
    assert_eq!(world.units.len(), cfg.data.num_clients);
    assert!(world.units.iter().all(|u| u.members.len() == 1 && u.rounds == 1));
    let log = run(&cfg).unwrap();
    let uploads = log.records.iter().filter(|r| r.event == EventKind::Complete).count() as u64;
    assert_eq!(log.last().unwrap().cloud_comms, uploads);
    assert!(log.outcome.total_js.is_none());
}

#[test]
fn evaluate_agrees_with_a_direct_count() {
    let cfg = small();
    let world = World::build(&cfg).unwrap();
    for seed in 0..4 {
        let model = world.spec.init_params(seed);
        let pairs: Vec<(usize, usize)> =
            world.test.samples.iter().map(|s| (world.spec.predict(&model, &s.features), s.label)).collect();
        let got = evaluate(&world.spec, &model, &world.test).unwrap();
        assert!((got - hiflash_oracles::naive_accuracy(&pairs)).abs() < 1e-15);
    }
}

#[test]
fn periodic_evaluation_follows_the_cadence() {
    let mut cfg = small();
    cfg.eval_every = 25;
    cfg.target_accuracy = 1.0;
    let log = run(&cfg).unwrap();
    let eval_slots: Vec<u64> = log.records.iter().filter(|r| r.event == EventKind::Eval).map(|r| r.slot).collect();
    for s in (24..log.outcome.slots).step_by(25) {
        assert!(eval_slots.contains(&s), "no evaluation at slot {s}");
    }
    let updates: Vec<u64> = log.records.iter().filter(|r| r.event == EventKind::CloudUpdate).map(|r| r.slot).collect();
    assert!(updates.iter().all(|s| eval_slots.contains(s)));
}

#[test]
fn unreachable_target_is_censored_at_the_budget() {
    let mut cfg = small();
    cfg.target_accuracy = 1.0;
    cfg.max_slots = 200;
    let log = run(&cfg).unwrap();
    assert!(!log.outcome.reached_target);
    assert_eq!(log.outcome.slots, 200);
    let s = summarize(&log, "x").unwrap();
    assert!(s.censored && s.slots_to_target.is_none() && s.cloud_comms_to_target.is_none());
}

#[test]
fn summaries_survive_a_csv_round_trip() {
    let mut rows = Vec::new();
    for method in [Method::Hifl, Method::Fedavg] {
        let mut cfg = small();
        cfg.method = method;
        rows.push(summarize(&run(&cfg).unwrap(), method.name()).unwrap());
    }
    normalize_costs(&mut rows, 0).unwrap();
    assert_eq!(rows[0].normalized_cost, Some(1.0));
    let mut buf = Vec::new();
    write_summary_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), SUMMARY_HEADER.join(","));
    assert_eq!(read_summary_csv(&buf[..]).unwrap(), rows);
}

#[test]
fn event_logs_survive_a_jsonl_round_trip() {
    let log = run(&small()).unwrap();
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).unwrap();
    assert_eq!(EventLog::read_jsonl(&buf[..]).unwrap(), log);
    assert!(EventLog::read_jsonl(&b"{}\n"[..]).is_err());
}

#[test]
fn a_huge_learning_rate_aborts_with_a_divergence_error() {
    let mut cfg = small();
    cfg.lr = hiflash::learner::LrSchedule::constant(1e300);
    match run(&cfg) {
        Err(Error::Divergence(msg)) => assert!(!msg.is_empty()),
        other => panic!("expected divergence, got {:?}", other.map(|l| l.outcome)),
    }
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let mut cfg = small();
    cfg.num_edges = 0;
    assert!(run(&cfg).is_err());
    let mut cfg = small();
    cfg.learner = hiflash::learner::LearnerSpec::logistic(7, 4, 0.01);
    assert!(run(&cfg).is_err());
}
