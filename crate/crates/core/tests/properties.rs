//! Whole-system properties over randomized inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;
use psc_sim::controller::regs;
use psc_sim::feedback::rms;
use psc_sim::link::frame::Frame;
use psc_sim::plant::{Magnet, PlantParams, Quadrants};
use psc_sim::scenario::Scenario;
use psc_sim::sim::{Scheduler, NS_PER_MS, NS_PER_S, NS_PER_US};
use psc_sim::world::World;
use serde_json::{json, Value};

fn world(v: Value) -> World {
    World::from_scenario(&Scenario::from_json(&v.to_string()).unwrap()).unwrap()
}

#[derive(Debug, Clone)]
enum SchedOp {
    Schedule(u64),
    Cancel(usize),
    Advance(u64),
}

fn sched_op() -> impl Strategy<Value = SchedOp> {
    prop_oneof![
        (0u64..1000).prop_map(SchedOp::Schedule),
        (0usize..64).prop_map(SchedOp::Cancel),
        (0u64..500).prop_map(SchedOp::Advance),
    ]
}

proptest! {
    #[test]
    fn scheduler_accounting_and_order(ops in proptest::collection::vec(sched_op(), 1..200)) {
        let mut s: Scheduler<usize> = Scheduler::new();
        let mut handles = vec![];
        let mut fired: Vec<(u64, usize)> = vec![];
        let mut dues = vec![];
        for op in ops {
            match op {
                SchedOp::Schedule(d) => {
                    let due = s.now() + d;
                    handles.push(s.schedule_at(due, dues.len()).unwrap());
                    dues.push(due);
                }
                SchedOp::Cancel(i) => {
                    if let Some(h) = handles.get(i) {
                        s.cancel(*h);
                    }
                }
                SchedOp::Advance(d) => {
                    let t = s.now() + d;
                    let before = s.now();
                    while let Some((at, e)) = s.pop_until(t) {
                        prop_assert!(at >= before && at <= t);
                        fired.push((at, e));
                    }
                    s.settle_at(t);
                }
            }
            let st = s.stats();
            prop_assert_eq!(st.scheduled, st.fired + st.cancelled + st.pending);
        }
        // Time never runs backwards; equal due times fire in insertion order.
        for w in fired.windows(2) {
            prop_assert!(w[0].0 < w[1].0 || (w[0].0 == w[1].0 && w[0].1 < w[1].1));
        }
        for (at, e) in &fired {
            prop_assert_eq!(*at, dues[*e]);
        }
    }

    #[test]
    fn one_quadrant_never_negative(vs in proptest::collection::vec(-100.0f64..100.0, 1..500), i0 in 0.0f64..120.0) {
        let p = PlantParams {
            resistance: 0.25,
            inductance: 0.06,
            i_max: 120.0,
            v_max: 80.0,
            quadrants: Quadrants::One,
            class_name: "q".into(),
        };
        let mut m = Magnet::new(p).unwrap();
        m.state.current = i0;
        for v in vs {
            let st = m.step(v, 1e-3);
            prop_assert!(st.current >= 0.0 && st.v_applied >= 0.0 && st.v_applied <= 80.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Normal responses arrive in request order; every transaction completes
    /// exactly once; counters reconcile.
    #[test]
    fn link_order_and_reconciliation(
        plan in proptest::collection::vec((0u8..3, 0u64..60), 1..200),
    ) {
        let mut w = world(json!({
            "ps_instances": [{"id": "C1", "class": "corrector", "initial_set": 0.5}],
            "run": {"metrics_period_ms": 0}}));
        w.set_poll_period(0);
        let mut ids = vec![];
        for (kind, gap) in plan {
            let (f, prio) = match kind {
                0 => (Frame::write(regs::I_SET, 0.5f32.to_bits()), false),
                1 => (Frame::block_read(regs::POLL_BASE, regs::POLL_COUNT), false),
                _ => (Frame::write(regs::I_SET, 0.5f32.to_bits()), true),
            };
            if let Ok(id) = w.transact_raw(0, f, prio) {
                ids.push(id);
            }
            w.run_until(w.now() + gap * NS_PER_US).unwrap();
        }
        w.run_until(w.now() + 100 * NS_PER_MS).unwrap();
        let done = w.take_raw_completions();
        let mut seen: Vec<u64> = done.iter().map(|(_, c)| c.id).collect();
        seen.sort();
        ids.sort();
        prop_assert_eq!(&seen, &ids);
        let normal: Vec<u64> = done.iter().filter(|(_, c)| !c.prio).map(|(_, c)| c.id).collect();
        prop_assert!(normal.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(done.iter().all(|(_, c)| c.result.is_ok()));
        prop_assert!(done.iter().filter(|(_, c)| c.prio).all(|(_, c)| c.latency() <= 30 * NS_PER_US));
        prop_assert!(w.check_invariants().is_empty());
    }

    /// After a put to a register-backed channel, a get returns the value.
    #[test]
    fn read_your_write(vals in proptest::collection::vec((0usize..3, -1.0f64..1.0), 1..20)) {
        let mut w = world(json!({
            "ps_instances": [
                {"id": "C1", "class": "corrector", "initial_set": 0.0},
                {"id": "Q1", "class": "quadrupole", "initial_set": 50.0},
                {"id": "B1", "class": "booster", "initial_set": 100.0}],
            "run": {"metrics_period_ms": 0}}));
        for (which, x) in vals {
            let (name, v) = match which {
                0 => ("C1:I-SET", 2.5 * x),
                1 => ("Q1:I-SET", 60.0 + 50.0 * x),
                _ => ("B1:I-SET", 400.0 + 300.0 * x),
            };
            let v = v as f32 as f64;
            w.put(name, json!(v)).unwrap();
            prop_assert_eq!(w.get(name).unwrap().as_f64().unwrap(), v);
            w.run_until(w.now() + 7 * NS_PER_MS).unwrap();
            prop_assert_eq!(w.get(name).unwrap().as_f64().unwrap(), v);
        }
    }

    /// Every member's first ramp write lands within 20 us of t0.
    #[test]
    fn ramp_synchrony(n in 1usize..30, dur in 0.2f64..1.0, lead_ms in 0u64..50, seed in 0u64..1000) {
        let ids: Vec<String> = (0..n).map(|k| format!("Q{k}")).collect();
        let inst: Vec<_> = ids.iter().map(|id| json!({"id": id, "class": "quadrupole", "initial_set": 30.0})).collect();
        let mut w = world(json!({"ps_instances": inst, "run": {"seed": seed, "metrics_period_ms": 0}}));
        w.run_until(lead_ms * NS_PER_MS + 1).unwrap();
        let targets: Vec<f64> = (0..n).map(|k| 40.0 + k as f64).collect();
        w.put("MACHINE:RAMP", json!({"members": ids, "targets": targets, "duration": dur})).unwrap();
        w.run_until(w.now() + 2 * NS_PER_S).unwrap();
        let job = w.job(1).unwrap();
        prop_assert!(job.succeeded());
        for a in &job.applied {
            prop_assert!(a[0] >= job.t0 && a[0] - job.t0 <= 20 * NS_PER_US);
        }
        prop_assert!(job.max_start_offset() <= 20 * NS_PER_US);
    }

    /// Alarm severities of each channel change on every logged transition,
    /// so raises and clears alternate.
    #[test]
    fn alarm_transitions_alternate(
        t_short in 0.2f64..2.0,
        new_r in 0.1f64..0.5,
        t_break in 0.2f64..3.0,
        t_fix in 0.1f64..1.0,
    ) {
        let mut w = world(json!({
            "ps_instances": [
                {"id": "S1", "class": "sextupole", "r": 0.3, "r_nom": 0.3, "initial_set": 100.0},
                {"id": "C1", "class": "corrector", "initial_set": 1.0}],
            "faults": [
                {"t": t_short, "ps": "S1", "kind": "resistance_change", "new_r": new_r},
                {"t": t_break, "ps": "C1", "kind": "link_break", "dir": "tx"},
                {"t": t_break + t_fix, "ps": "C1", "kind": "link_break", "dir": "tx", "broken": false}],
            "run": {"until": 6.0, "metrics_period_ms": 0}}));
        w.run_until(6 * NS_PER_S).unwrap();
        let mut last: BTreeMap<&str, &str> = BTreeMap::new();
        for a in w.alarm_log() {
            let prev = last.insert(a.channel.as_str(), a.severity.as_str()).unwrap_or("none");
            prop_assert_ne!(prev, a.severity.as_str(), "{} repeated", a.channel);
        }
    }

    /// A rejected optic change leaves every member set-point untouched.
    #[test]
    fn optic_rejection_is_atomic(k in 0usize..5, big in 2.0f64..50.0) {
        let mut w = world(json!({
            "toy_machine": {"quad_families": 3, "sext_families": 1, "members_per_family": 2},
            "run": {"metrics_period_ms": 0}}));
        let before: Vec<Value> = w.ids().iter().map(|id| w.get(&format!("{id}:I-SET")).unwrap()).collect();
        let q0: [f64; 5] = w.optic_q().unwrap().into();
        let mut q = q0;
        // Far outside every family's range: energy scaled up, or a huge knob.
        if k == 0 {
            q[0] *= big;
        } else {
            q[k] = 1e4 * big;
        }
        prop_assert!(w.put("OPTIC:Q", json!(q)).is_err());
        w.run_until(w.now() + 10 * NS_PER_MS).unwrap();
        let after: Vec<Value> = w.ids().iter().map(|id| w.get(&format!("{id}:I-SET")).unwrap()).collect();
        prop_assert_eq!(before, after);
        prop_assert_eq!(w.get("OPTIC:Q").unwrap(), json!(q0));
    }

    /// ||y_k|| <= (1 - alpha)^k ||y_0|| + quantization floor for static d.
    #[test]
    fn feedback_contraction(
        n in 1usize..5,
        alpha in 0.1f64..1.0,
        entries in proptest::collection::vec(-0.3f64..0.3, 16),
        d in proptest::collection::vec(-0.5f64..0.5, 4),
    ) {
        let r: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 + entries[i * 4 + j].abs() } else { entries[i * 4 + j] / n as f64 }).collect())
            .collect();
        let ids: Vec<String> = (0..n).map(|j| format!("H{j}")).collect();
        let inst: Vec<_> = ids.iter().map(|id| json!({"id": id, "class": "corrector", "initial_set": 0.0})).collect();
        let mut w = world(json!({
            "ps_instances": inst,
            "feedback": {"correctors": ids, "R_om": r, "d": &d[..n], "alpha": alpha},
            "run": {"metrics_period_ms": 0}}));
        w.run_until(30 * NS_PER_MS).unwrap();
        let fb = w.feedback().unwrap();
        let norm = |y: &[f64]| rms(y) * (y.len() as f64).sqrt();
        let rnorm: f64 = r.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        // The 1-lsb dead-band on each correction step leaves |P y| < lsb / alpha.
        let floor = 3.0 / 131072.0 / alpha * rnorm * (n as f64).sqrt();
        let y0 = norm(&fb.orbit[0]);
        for (k, y) in fb.orbit.iter().enumerate() {
            prop_assert!(norm(y) <= (1.0 - alpha).powi(k as i32) * y0 + floor + 1e-12,
                "step {}: {} vs {}", k, norm(y), (1.0 - alpha).powi(k as i32) * y0);
        }
    }
}
