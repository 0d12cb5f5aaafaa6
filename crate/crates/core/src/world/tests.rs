use super::*;
use crate::channel::program::RAMP_STEP_NS;
use crate::link::Direction;
use crate::sim::NS_PER_US;
use serde_json::json;

fn world(json: &str) -> World {
    World::from_scenario(&Scenario::from_json(json).unwrap()).unwrap()
}

fn three_classes() -> World {
    world(
        r#"{"ps_instances": [
            {"id": "C1", "class": "corrector", "initial_set": 1.0},
            {"id": "Q1", "class": "quadrupole", "initial_set": 60.0},
            {"id": "Q2", "class": "quadrupole", "initial_set": 50.0},
            {"id": "OFF", "class": "corrector"}
        ], "run": {"metrics_period_ms": 0}}"#,
    )
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

#[test]
fn initial_channels_reflect_preset() {
    let w = three_classes();
    assert_eq!(w.get("C1:I-SET").unwrap(), json!(1.0));
    assert_eq!(w.get("C1:MODE").unwrap(), json!("on"));
    assert_eq!(w.get("OFF:MODE").unwrap(), json!("off"));
    assert_eq!(w.get("C1:COMPARE").unwrap(), json!("ok"));
    assert_eq!(w.get("C1:LINK-RX-OK").unwrap(), json!(true));
    assert_eq!(w.get("Q1:HYST-STATE").unwrap(), json!("off_branch"));
    assert_eq!(w.get("C1:ALARM").unwrap(), json!("none"));
    assert!(matches!(w.get("C1:NOPE"), Err(ChError::NoSuchChannel(_))));
    assert!(matches!(w.get("X9:I-SET"), Err(ChError::NoSuchChannel(_))));
    assert_eq!(w.channel_names().len(), 4 * 18 + 1);
}

#[test]
fn put_then_read_back() {
    let mut w = three_classes();
    assert_eq!(w.put("C1:I-SET", json!(2.0)).unwrap(), None);
    assert_eq!(w.get("C1:I-SET").unwrap(), json!(2.0));
    w.run_until(w.now() + NS_PER_S).unwrap();
    assert_eq!(w.get("C1:I-SET").unwrap(), json!(2.0));
    let i = f(&w.get("C1:I-READ").unwrap());
    assert!((i - 2.0).abs() <= w.ps_by_id("C1").unwrap().lsb(), "{i}");
    assert_eq!(w.get("C1:COMPARE").unwrap(), json!("ok"));
    assert!(w.check_invariants().is_empty());
}

#[test]
fn put_errors() {
    let mut w = three_classes();
    let e = w.put("C1:I-SET", json!(3.5)).unwrap_err();
    assert_eq!(e.code(), "out_of_range");
    assert_eq!(w.put("C1:I-READ", json!(1.0)).unwrap_err(), ChError::ReadOnly);
    assert_eq!(w.put("C1:I-SET", json!("abc")).unwrap_err().code(), "type_mismatch");
    // One-quadrant quadrupole cannot go negative.
    assert_eq!(w.put("Q1:I-SET", json!(-1.0)).unwrap_err().code(), "out_of_range");
}

#[test]
fn local_mode_rejects_writes_with_minor_alarm() {
    let mut w = three_classes();
    let p = w.ps_index("C1").unwrap();
    w.ps_mut(p).ctrl.set_local(true);
    assert_eq!(w.put("C1:I-SET", json!(2.0)).unwrap_err(), ChError::Local);
    assert_eq!(w.alarm("C1:I-SET").unwrap(), Severity::Minor);
    w.run_until(w.now() + 200 * NS_PER_MS).unwrap();
    assert_eq!(w.get("C1:LOCAL").unwrap(), json!(true));
    assert_eq!(w.get("C1:MODE").unwrap(), json!("local"));
    w.ps_mut(p).ctrl.set_local(false);
    w.put("C1:I-SET", json!(2.0)).unwrap();
    assert_eq!(w.alarm("C1:I-SET").unwrap(), Severity::None);
}

#[test]
fn monitors_receive_updates() {
    let mut w = three_classes();
    w.handle_request(5, Request::monitor("C1:I-SET", 1));
    let out = w.take_outbox();
    assert_eq!(out.len(), 2);
    assert!(matches!(&out[0].1, Message::Reply(r) if r.ok));
    assert!(matches!(&out[1].1, Message::Update(u) if u.value == json!(1.0)));
    w.handle_request(5, Request::put("C1:I-SET", json!(1.5), 2));
    w.run_until(w.now() + NS_PER_MS).unwrap();
    let out = w.take_outbox();
    let updates: Vec<_> = out
        .iter()
        .filter_map(|(_, m)| match m {
            Message::Update(u) => Some(u.value.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(updates, vec![json!(1.5)]);
    assert!(out.iter().any(|(s, m)| *s == 5 && matches!(m, Message::Reply(r) if r.id == json!(2) && r.ok)));
    w.drop_session(5);
    w.handle_request(6, Request::put("C1:I-SET", json!(1.0), 3));
    w.run_until(w.now() + NS_PER_MS).unwrap();
    assert!(w.take_outbox().iter().all(|(s, _)| *s == 6));
}

#[test]
fn broken_rx_flagged_within_one_tick() {
    let mut w = world(
        r#"{"ps_instances": [{"id": "C1", "class": "corrector", "initial_set": 1.0}],
            "faults": [{"t": 1.00001, "ps": "C1", "kind": "link_break", "dir": "rx"}],
            "run": {"metrics_period_ms": 0}}"#,
    );
    w.run_until(2 * NS_PER_S).unwrap();
    let t = w
        .alarm_log()
        .iter()
        .find(|a| a.channel == "C1:LINK-RX-OK")
        .unwrap()
        .t_ns;
    let t_break = secs_to_ns(1.00001);
    assert!(t >= t_break && t - t_break <= TICK_NS, "{t}");
    assert_eq!(w.get("C1:ALARM").unwrap(), json!("major"));
    assert_eq!(w.put("C1:I-SET", json!(2.0)).unwrap_err(), ChError::LinkDown);
    assert_eq!(w.ps_by_id("C1").unwrap().ctrl.status() & regs::status::RX_BROKEN, regs::status::RX_BROKEN);
    let p = w.ps_index("C1").unwrap();
    w.ps_mut(p).link.set_link_broken(Direction::Rx, false);
    w.run_until(w.now() + 100 * NS_PER_US).unwrap();
    assert_eq!(w.get("C1:LINK-RX-OK").unwrap(), json!(true));
    assert!(w.check_invariants().is_empty());
}

#[test]
fn shorted_winding_raises_resistance_alarm() {
    let mut w = world(
        r#"{"ps_instances": [{"id": "Q1", "class": "quadrupole", "initial_set": 60.0}],
            "faults": [{"t": 2.0, "ps": "Q1", "kind": "resistance_change", "new_r": 0.15}],
            "run": {"metrics_period_ms": 0}}"#,
    );
    w.run_until(8 * NS_PER_S).unwrap();
    let t = w
        .alarm_log()
        .iter()
        .find(|a| a.channel == "Q1:R-LOAD" && a.severity == Severity::Major)
        .expect("alarm raised")
        .t_ns;
    assert!(t > 2 * NS_PER_S && t <= 6 * NS_PER_S, "{t}");
    let r = f(&w.get("Q1:R-LOAD").unwrap());
    assert!((r - 0.15).abs() < 0.01, "{r}");
}

#[test]
fn healthy_supply_never_alarms() {
    let mut w = three_classes();
    w.run_until(5 * NS_PER_S).unwrap();
    assert!(w.alarm_log().is_empty(), "{:?}", w.alarm_log());
}

#[test]
fn cycle_standardizes_and_returns() {
    let mut w = three_classes();
    w.put("Q1:CYCLE-CMD", json!(true)).unwrap();
    assert_eq!(w.get("Q1:RAMP-STATE").unwrap(), json!("cycling"));
    assert_eq!(w.get("Q1:CYCLE-CMD").unwrap(), json!(true));
    assert_eq!(w.put("Q1:I-SET", json!(10.0)).unwrap_err(), ChError::Busy);
    let mut peak: f64 = 0.0;
    let end = w.now() + 90 * NS_PER_S;
    while w.now() < end {
        let t = w.now() + 50 * NS_PER_MS;
        w.run_until(t).unwrap();
        peak = peak.max(w.ps_by_id("Q1").unwrap().ctrl.i_set());
    }
    assert_eq!(peak, 120.0);
    let job = w.job(1).unwrap();
    assert!(job.succeeded());
    assert_eq!(job.steps, 840);
    assert_eq!(w.get("Q1:HYST-STATE").unwrap(), json!("on_branch"));
    assert_eq!(w.get("Q1:CYCLE-CMD").unwrap(), json!(false));
    assert_eq!(w.get("Q1:I-SET").unwrap(), json!(60.0));
    // Decreasing after a cycle keeps the branch; increasing leaves it.
    w.put("Q1:I-SET", json!(50.0)).unwrap();
    assert_eq!(w.get("Q1:HYST-STATE").unwrap(), json!("on_branch"));
    w.put("Q1:I-SET", json!(55.0)).unwrap();
    assert_eq!(w.get("Q1:HYST-STATE").unwrap(), json!("off_branch"));
}

#[test]
fn cycle_rejected_when_off() {
    let mut w = three_classes();
    assert_eq!(w.put("OFF:CYCLE-CMD", json!(true)).unwrap_err().code(), "not_on");
}

#[test]
fn synchronized_ramp() {
    let mut w = three_classes();
    let r = w
        .put(
            "MACHINE:RAMP",
            json!({"members": ["C1", "Q1", "Q2"], "targets": [2.0, 80.0, 40.0], "duration": 2.0}),
        )
        .unwrap();
    assert_eq!(r, Some(json!({"job": 1})));
    w.run_until(w.now() + 3 * NS_PER_S).unwrap();
    let job = w.job(1).unwrap();
    assert!(job.succeeded(), "{:?}", job.error);
    assert_eq!(job.applied[0].len(), 20);
    assert_eq!(job.start_skew(), 0);
    assert!(job.max_start_offset() <= 20 * NS_PER_US, "{}", job.max_start_offset());
    assert_eq!(w.get("Q1:I-SET").unwrap(), json!(80.0));
    assert_eq!(w.get("Q2:RAMP-STATE").unwrap(), json!("idle"));
    // 100 ms cadence.
    let a = &job.applied[1];
    assert!(a.windows(2).all(|p| p[1] - p[0] == RAMP_STEP_NS));
}

#[test]
fn ramp_rejects_unready_member_atomically() {
    let mut w = three_classes();
    let e = w
        .put(
            "MACHINE:RAMP",
            json!({"members": ["C1", "OFF"], "targets": [2.0, 1.0], "duration": 1.0}),
        )
        .unwrap_err();
    assert_eq!(e.code(), "member_not_ready");
    assert_eq!(w.active_jobs(), 0);
    assert!(!w.ps_by_id("C1").unwrap().in_job());
    let e = w
        .put("MACHINE:RAMP", json!({"members": ["C1"], "targets": [2.0], "duration": 0.05}))
        .unwrap_err();
    assert_eq!(e.code(), "out_of_range");
}

#[test]
fn waveform_download_and_trigger() {
    let mut w = three_classes();
    let pts: Vec<f64> = (0..600).map(|k| 1.0 + 0.5 * (k as f64 / 600.0)).collect();
    w.put("C1:WF-LOAD", json!({"name": "saw", "points": pts, "loop_mode": "loop"}))
        .unwrap();
    assert_eq!(w.get("C1:WF-LOAD").unwrap(), json!("saw"));
    let p = w.ps_index("C1").unwrap();
    assert_eq!(w.ps(p).ctrl.reg_read(regs::WF_LEN), 600);
    w.put("C1:TRIG-ARM", json!(true)).unwrap();
    assert!(w.ps(p).ctrl.armed());
    w.ps_mut(p).ctrl.fire_trigger();
    w.run_until(w.now() + 100 * NS_PER_MS).unwrap();
    assert!(w.ps(p).ctrl.waveform_running());
    let bad = w.put("C1:WF-LOAD", json!({"points": [0.0, 5.0]})).unwrap_err();
    assert_eq!(bad.code(), "out_of_range");
}

#[test]
fn families_and_optics() {
    let mut w = world(
        r#"{"toy_machine": {"quad_families": 3, "sext_families": 1, "members_per_family": 2},
            "run": {"metrics_period_ms": 0}}"#,
    );
    assert_eq!(w.ps_count(), 8);
    let fam = w.machine().unwrap().families[0].clone();
    let v0 = f(&w.get(&format!("{}:I-SET", fam.name)).unwrap());
    w.run_until(200 * NS_PER_MS).unwrap();
    let rd = f(&w.get(&format!("{}:I-READ", fam.name)).unwrap());
    assert!((rd - v0).abs() < 0.01, "{rd} {v0}");

    w.put(&format!("{}:I-SET", fam.name), json!(v0 - 0.5)).unwrap();
    for (id, i) in fam.member_currents(v0 - 0.5) {
        assert_eq!(w.get(&format!("{id}:I-SET")).unwrap(), json!(i));
    }

    // Small optic change: plain writes. Large: a ramp.
    let q = w.optic_q().unwrap();
    let small = [q.e, 0.0001, 0.0, 0.0, 0.0];
    w.put("OPTIC:Q", json!(small)).unwrap();
    assert_eq!(w.get("OPTIC:Q").unwrap(), json!(small));
    let jobs_before = w.job(1).is_some();
    assert!(!jobs_before);
    let big = [q.e, 0.5, -0.5, 0.0, 0.0];
    w.put("OPTIC:Q", json!(big)).unwrap();
    assert!(w.job(1).unwrap().succeeded());
    let want = w.machine().unwrap().optic_member_currents(&OpticQ::from(big)).unwrap();
    for (id, i) in want {
        assert_eq!(f(&w.get(&format!("{id}:I-SET")).unwrap()), i);
    }
}

#[test]
fn family_mode_mixed_and_alarm_aggregation() {
    let mut w = world(
        r#"{"toy_machine": {"quad_families": 1, "sext_families": 0, "members_per_family": 2},
            "run": {"metrics_period_ms": 0}}"#,
    );
    assert_eq!(w.get("QF01:MODE").unwrap(), json!("on"));
    w.put("SR-Q01-01:MODE", json!("off")).unwrap();
    assert_eq!(w.get("QF01:MODE").unwrap(), json!("mixed"));
    let p = w.ps_index("SR-Q01-02").unwrap();
    w.ps_mut(p).link.set_link_broken(Direction::Tx, true);
    w.run_until(w.now() + NS_PER_MS).unwrap();
    assert_eq!(w.alarm("QF01:ALARM").unwrap(), Severity::Major);
    assert_eq!(w.put("QF01:I-SET", json!(50.0)).unwrap_err(), ChError::LinkDown);
}

#[test]
fn feedback_loop_runs_on_priority_path() {
    let mut w = world(
        r#"{"ps_instances": [
                {"id": "H1", "class": "corrector", "initial_set": 0.0},
                {"id": "H2", "class": "corrector", "initial_set": 0.0}],
            "feedback": {"correctors": ["H1", "H2"],
                "R_om": [[1.0, 0.2], [0.1, 0.8], [0.3, 0.3]],
                "d": [0.5, -0.4, 0.1], "alpha": 0.5},
            "run": {"metrics_period_ms": 0}}"#,
    );
    w.run_until(100 * NS_PER_MS).unwrap();
    let fb = w.feedback().unwrap();
    assert_eq!(fb.step_times.len(), 101);
    assert!(fb.step_times.windows(2).all(|p| p[1] - p[0] == NS_PER_MS));
    let first = crate::feedback::rms(&fb.orbit[0]);
    let last = crate::feedback::rms(fb.orbit.last().unwrap());
    assert!(last < first, "{first} {last}");
    assert!(w.txn_counts().get(&(Origin::Feedback, true)).copied().unwrap_or(0) > 0);
    assert!(!w.txn_counts().contains_key(&(Origin::Feedback, false)));
    w.put("FB:ENABLE", json!(false)).unwrap();
    assert_eq!(w.get("FB:STATUS").unwrap(), json!("disabled"));
}

#[test]
fn feedback_pauses_on_link_break() {
    let mut w = world(
        r#"{"ps_instances": [{"id": "H1", "class": "corrector", "initial_set": 0.0}],
            "feedback": {"correctors": ["H1"], "R_om": [[1.0]], "d": [0.5]},
            "faults": [{"t": 0.05, "ps": "H1", "kind": "link_break", "dir": "tx"}],
            "run": {"metrics_period_ms": 0}}"#,
    );
    w.run_until(100 * NS_PER_MS).unwrap();
    assert_eq!(w.get("FB:STATUS").unwrap(), json!("paused"));
    assert_eq!(w.alarm("FB:STATUS").unwrap(), Severity::Major);
}

#[test]
fn metrics_rows_and_determinism() {
    let json = r#"{"ps_instances": [
            {"id": "C1", "class": "corrector", "initial_set": 1.0, "noise_sigma": 0.001},
            {"id": "Q1", "class": "quadrupole", "initial_set": 60.0}],
        "faults": [{"t": 0.2, "ps": "C1", "kind": "put", "channel": "I-SET", "value": 2.0}],
        "run": {"seed": 42, "metrics_period_ms": 10, "until": 0.5}}"#;
    let run = || {
        let mut w = world(json);
        w.run_until(500 * NS_PER_MS).unwrap();
        w.metrics.to_csv_string(w.ids())
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.lines().count(), 1 + 2 * 51);
    let mut w = world(json);
    w.run_until(500 * NS_PER_MS).unwrap();
    assert_eq!(w.get("C1:I-SET").unwrap(), json!(2.0));
}

#[test]
fn bad_scenarios_rejected() {
    let bad = [
        r#"{"ps_instances": [{"id": "A", "class": "nope"}]}"#,
        r#"{"ps_instances": [{"id": "A", "class": "corrector"}, {"id": "A", "class": "corrector"}]}"#,
        r#"{"ps_instances": [{"id": "A", "class": "corrector", "initial_set": 9.0}]}"#,
        r#"{"ps_instances": [{"id": "A", "class": "corrector"}],
            "faults": [{"t": 1.0, "ps": "B", "kind": "trigger"}]}"#,
        r#"{"ps_instances": [{"id": "A", "class": "corrector"}],
            "faults": [{"t": 99.0, "ps": "A", "kind": "trigger"}]}"#,
        r#"{"feedback": {"correctors": ["X"], "R_om": [[1.0]], "d": [0.0]}}"#,
    ];
    for b in bad {
        let sc = Scenario::from_json(b).unwrap();
        assert!(World::from_scenario(&sc).is_err(), "{b}");
    }
}

#[test]
fn call_api_round_trip() {
    let mut w = three_classes();
    let r = w.call(Request::put("C1:I-SET", json!(0.5), "x"), NS_PER_S);
    assert!(r.ok, "{r:?}");
    let r = w.call(Request::get("C1:I-SET", 1), NS_PER_S);
    assert_eq!(r.value, Some(json!(0.5)));
    let r = w.call(Request::get("BAD", 2), NS_PER_S);
    assert_eq!(r.error_code(), Some("no_such_channel"));
}
