//! The simulated installation: power supplies with their links, the channel
//! layer above them, families, optics, orbit feedback and the scenario
//! timeline, all driven by one scheduler.

mod chan;
mod fb;
mod jobs;

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde_json::Value;
use thiserror::Error;

use crate::channel::hysteresis::HysteresisState;
use crate::channel::{ChError, Field, Severity, FAMILY_FIELDS, FIELDS};
use crate::controller::{regs, Controller, ControllerConfig, ControllerError, WaveformTarget, TICK_NS};
use crate::feedback::pinv;
use crate::link::frame::{Frame, NakReason, Opcode};
use crate::link::{Completion, Link, LinkClock, LinkError, LinkEvent, Origin, TxnId};
use crate::machine::{toy_ring, Machine, MachineConfig, OpticQ};
use crate::metrics::{MetricsLog, MetricsRow};
use crate::plant::Magnet;
use crate::protocol::{Message, Op, Reply, Request, Update};
use crate::scenario::{ClassSpec, ConfigError, EventKind, PsInstance, Scenario, TimedEvent};
use crate::sim::{secs_to_ns, EventHandle, Nanos, ScheduleError, Scheduler, SchedulerStats, SimRng, NS_PER_MS, NS_PER_S};

pub use fb::FeedbackRt;
pub use jobs::{JobKind, RampJob, RampRequest};

pub type SessionId = u64;
pub type JobId = u64;
type OpId = u64;

/// Session whose messages are kept for the in-process API.
pub const INTERNAL: SessionId = 0;

pub const POLL_PERIOD_NS: Nanos = 100 * NS_PER_MS;
pub const ALARM_PERIOD_NS: Nanos = NS_PER_S;
/// Resistance alarm band, relative to the nominal resistance.
pub const R_BAND: f64 = 0.10;
/// Consecutive out-of-band evaluations before the resistance alarm.
pub const R_STRIKES: u32 = 3;
/// After a set-point change the compare flag waits this long for the
/// current to arrive before alarming.
pub const COMPARE_GRACE_NS: Nanos = 5 * NS_PER_S;
/// Default delay between accepting a ramp and its first update.
pub const RAMP_LEAD_NS: Nanos = NS_PER_MS;
const DONE_JOBS_KEPT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Tick,
    Link(u32, LinkEvent),
    Poll,
    AlarmEval,
    Metrics,
    RampStep(JobId, u32),
    FeedbackStep,
    Scenario(usize),
    Trigger(u32),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Adapter giving one link access to the shared scheduler.
struct Clock<'a> {
    sched: &'a mut Scheduler<Event>,
    link: u32,
}

impl LinkClock for Clock<'_> {
    fn now(&self) -> Nanos {
        self.sched.now()
    }

    fn schedule(&mut self, at: Nanos, ev: LinkEvent) -> EventHandle {
        self.sched
            .schedule_at(at, Event::Link(self.link, ev))
            .expect("links schedule forward")
    }

    fn cancel(&mut self, h: EventHandle) {
        self.sched.cancel(h);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Slot {
    value: Value,
    alarm: Severity,
}

impl Slot {
    fn new(value: Value) -> Self {
        Self {
            value,
            alarm: Severity::None,
        }
    }
}

/// One power supply with its magnet, controller, link and channel state.
pub struct PsState {
    pub id: String,
    pub class: String,
    pub spec: ClassSpec,
    /// Nominal load resistance, centre of the alarm band.
    pub r_nom: f64,
    pub magnet: Magnet,
    pub ctrl: Controller,
    pub link: Link,
    ch: Vec<Slot>,
    /// Exact values of written register channels, kept while the register
    /// still holds the written word.
    written: Vec<Option<(u32, Value)>>,
    pub hyst: HysteresisState,
    grace_until: Option<Nanos>,
    r_strikes: u32,
    r_alarm: bool,
    local_nak: bool,
    ramp_fail: bool,
    job: Option<(JobId, usize)>,
    poll_busy: bool,
    flags: (bool, bool),
    family: Option<usize>,
}

impl PsState {
    pub fn i_min(&self) -> f64 {
        self.ctrl.nominal().i_min()
    }

    pub fn i_max(&self) -> f64 {
        self.spec.i_max
    }

    /// Current quantization step of this supply.
    pub fn lsb(&self) -> f64 {
        self.ctrl.config().adc.lsb()
    }

    pub fn in_job(&self) -> bool {
        self.job.is_some()
    }
}

struct FamilyRt {
    set_value: f64,
    ch: Vec<Slot>,
}

/// Where a finished operation's reply goes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ReplyTo {
    Session(SessionId, Value),
    Internal(u64),
    Scenario(usize),
}

pub(crate) enum Then {
    Nothing,
    Family { fam: usize, value: f64 },
    Optic { q: OpticQ, values: Vec<f64> },
    Download { ps: u32, name: String, rest: VecDeque<Frame> },
}

struct OpState {
    reply: ReplyTo,
    remaining: usize,
    error: Option<ChError>,
    then: Then,
}

#[derive(Debug, Clone)]
enum Pending {
    Poll,
    Put { op: OpId, field: Field, word: u32, value: Value },
    Ramp { job: JobId, pos: usize, value: f64 },
    Feedback,
    Download { op: OpId },
}

/// Outcome of starting an operation.
pub(crate) enum Started {
    Done(Option<Value>),
    Pending,
}

/// One controller tick of one supply, recorded while tracing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t_ns: Nanos,
    pub i_target: f64,
    pub wf_index: u32,
    pub i_read: f64,
    pub v_out: f64,
}

struct Trace {
    ps: u32,
    from: Nanos,
    to: Nanos,
    rows: Vec<TraceRow>,
}

/// One alarm severity transition of a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AlarmTransition {
    pub t_ns: Nanos,
    pub channel: String,
    pub severity: Severity,
}

pub struct World {
    sched: Scheduler<Event>,
    rng: SimRng,
    ps: Vec<PsState>,
    index: HashMap<String, u32>,
    machine: Option<Machine>,
    families: Vec<FamilyRt>,
    optic_q: Option<OpticQ>,
    optic_ramp_s: f64,
    soft: BTreeMap<String, Slot>,
    feedback: Option<FeedbackRt>,
    pending: HashMap<(u32, TxnId), Pending>,
    ops: HashMap<OpId, OpState>,
    next_op: OpId,
    jobs: BTreeMap<JobId, RampJob>,
    done_jobs: VecDeque<RampJob>,
    next_job: JobId,
    monitors: HashMap<String, Vec<SessionId>>,
    outbox: Vec<(SessionId, Message)>,
    internal: Vec<Message>,
    results: HashMap<u64, Result<Option<Value>, ChError>>,
    next_call: u64,
    faults: Vec<TimedEvent>,
    poll_period: Nanos,
    metrics_period: Nanos,
    pub metrics: MetricsLog,
    ids: Vec<String>,
    trace: Option<Trace>,
    raw: Option<Vec<(u32, Completion)>>,
    txn_counts: BTreeMap<(Origin, bool), u64>,
    alarm_log: Vec<AlarmTransition>,
    diagnostics: Vec<String>,
    trips: u64,
    base_dir: std::path::PathBuf,
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

fn ctrl_err(e: ControllerError) -> ConfigError {
    invalid(e)
}

impl World {
    pub fn from_scenario(sc: &Scenario) -> Result<Self, ConfigError> {
        let classes = sc.class_table();
        let mut entries: Vec<PsInstance> = vec![];
        let mut machine_cfg: Option<MachineConfig> = None;
        if let Some(t) = &sc.toy_machine {
            let ring = toy_ring(t);
            let mut sets = HashMap::new();
            for f in &ring.config.families {
                sets.extend(f.member_currents(f.set_value));
            }
            for (id, class) in ring.ps {
                entries.push(PsInstance {
                    initial_set: sets.get(&id).copied(),
                    id,
                    class,
                    ..PsInstance::default()
                });
            }
            machine_cfg = Some(ring.config);
        }
        if let Some(m) = &sc.machine {
            if machine_cfg.is_some() {
                return Err(invalid("toy_machine and machine are mutually exclusive"));
            }
            machine_cfg = Some(m.resolve(&sc.base_dir)?);
        }
        entries.extend(sc.ps_instances.iter().cloned());

        let mut w = World {
            sched: Scheduler::new(),
            rng: SimRng::seed_from(sc.seed()),
            ps: vec![],
            index: HashMap::new(),
            machine: None,
            families: vec![],
            optic_q: None,
            optic_ramp_s: sc.optic_ramp_s,
            soft: BTreeMap::new(),
            feedback: None,
            pending: HashMap::new(),
            ops: HashMap::new(),
            next_op: 1,
            jobs: BTreeMap::new(),
            done_jobs: VecDeque::new(),
            next_job: 1,
            monitors: HashMap::new(),
            outbox: vec![],
            internal: vec![],
            results: HashMap::new(),
            next_call: 1,
            faults: sc.faults.clone(),
            poll_period: POLL_PERIOD_NS,
            metrics_period: secs_to_ns(sc.run.metrics_period_ms * 1e-3),
            metrics: MetricsLog::default(),
            ids: vec![],
            trace: None,
            raw: None,
            txn_counts: BTreeMap::new(),
            alarm_log: vec![],
            diagnostics: vec![],
            trips: 0,
            base_dir: sc.base_dir.clone(),
        };

        let mut triggers = vec![];
        for e in &entries {
            let spec = classes.get(&e.class).ok_or_else(|| ConfigError::UnknownClass {
                ps: e.id.clone(),
                class: e.class.clone(),
            })?;
            if w.index.contains_key(&e.id) {
                return Err(ConfigError::DuplicatePs(e.id.clone()));
            }
            if e.id.is_empty() || e.id.contains(':') {
                return Err(invalid(format!("bad power supply id {:?}", e.id)));
            }
            let r_nom = e.r_nom.unwrap_or(spec.r);
            let mut nominal = spec.plant(&e.class);
            nominal.resistance = r_nom;
            nominal.validate().map_err(|err| invalid(format!("{}: {err}", e.id)))?;
            let mut actual = nominal.clone();
            actual.resistance = e.r.unwrap_or(r_nom);
            actual.inductance = e.l.unwrap_or(spec.l);
            let mut magnet = Magnet::new(actual).map_err(|err| invalid(format!("{}: {err}", e.id)))?;
            if !(spec.f_c > 0.0 && spec.ramp_rate > 0.0 && spec.tol_ppm > 0.0) {
                return Err(invalid(format!("class {}: f_c, ramp_rate and tol_ppm must be positive", e.class)));
            }
            let mut cfg = ControllerConfig::tuned(&nominal, spec.f_c);
            cfg.adc.noise_sigma = e.noise_sigma.unwrap_or(spec.noise_sigma);
            let state_file = sc
                .run
                .state_dir
                .as_ref()
                .map(|d| sc.resolve_path(d).join(format!("{}.json", e.id)));
            let mut ctrl =
                Controller::with_state_file(&e.id, nominal.clone(), cfg, state_file).map_err(ctrl_err)?;
            if let Some(i) = e.initial_set {
                if !(i >= nominal.i_min() && i <= nominal.i_max) {
                    return Err(invalid(format!("{}: initial_set {i} A out of range", e.id)));
                }
                ctrl.preset_steady(&mut magnet, i);
            } else if e.on == Some(true) {
                ctrl.reg_write(regs::MODE, 1).expect("mode write");
            }
            let mut wf_name = String::new();
            if let Some(src) = &e.waveform {
                let wf = src.resolve(&sc.base_dir)?;
                wf_name = if wf.name.is_empty() { "inline".into() } else { wf.name.clone() };
                let target = if e.waveform_persistent {
                    WaveformTarget::Persistent
                } else {
                    WaveformTarget::Volatile
                };
                ctrl.load_waveform(wf, target).map_err(|err| invalid(format!("{}: {err}", e.id)))?;
            }
            if let Some(t) = e.trigger_at {
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(invalid(format!("{}: bad trigger time {t}", e.id)));
                }
                ctrl.reg_write(regs::TRIG_ARM, 1).expect("arm");
                triggers.push((w.ps.len() as u32, secs_to_ns(t)));
            }
            let link = Link::new(e.link.clone().unwrap_or_else(|| sc.link.clone()));
            let p = w.ps.len() as u32;
            w.index.insert(e.id.clone(), p);
            w.ids.push(e.id.clone());
            let mut ch: Vec<Slot> = FIELDS.iter().map(|_| Slot::new(Value::Null)).collect();
            ch[Field::WfLoad.index()] = Slot::new(Value::String(wf_name));
            w.ps.push(PsState {
                id: e.id.clone(),
                class: e.class.clone(),
                spec: spec.clone(),
                r_nom,
                magnet,
                ctrl,
                link,
                ch,
                written: vec![None; FIELDS.len()],
                hyst: HysteresisState::new(spec.tracked),
                grace_until: None,
                r_strikes: 0,
                r_alarm: false,
                local_nak: false,
                ramp_fail: false,
                job: None,
                poll_busy: false,
                flags: (false, false),
                family: None,
            });
        }

        if let Some(cfg) = machine_cfg {
            let m = Machine::new(cfg).map_err(invalid)?;
            m.check_members(|id| w.index.contains_key(id)).map_err(invalid)?;
            for (fi, f) in m.families.iter().enumerate() {
                for mem in &f.members {
                    let p = w.index[&mem.ps] as usize;
                    w.ps[p].family = Some(fi);
                }
                w.families.push(FamilyRt {
                    set_value: f.set_value,
                    ch: FAMILY_FIELDS.iter().map(|_| Slot::new(Value::Null)).collect(),
                });
            }
            if let Some(o) = &m.optic {
                w.optic_q = Some(OpticQ::theoretical(o.e0));
            }
            w.machine = Some(m);
        }

        if let Some(spec) = &sc.feedback {
            spec.validate().map_err(invalid)?;
            let mut correctors = vec![];
            for c in &spec.correctors {
                correctors.push(*w.index.get(c).ok_or_else(|| ConfigError::UnknownPs(c.clone()))?);
            }
            let p = pinv(&spec.r_om).map_err(invalid)?;
            let i_corr = correctors.iter().map(|&c| w.ps[c as usize].ctrl.i_set()).collect();
            w.feedback = Some(FeedbackRt::new(spec.clone(), p, correctors, i_corr));
        }

        for (k, f) in w.faults.iter().enumerate() {
            if !(f.t >= 0.0 && f.t.is_finite() && f.t <= sc.run.until) {
                return Err(invalid(format!("event {k} at t={} s outside the run window", f.t)));
            }
            let needs_ps = !matches!(f.kind, EventKind::Put { .. } | EventKind::Feedback { .. });
            match &f.ps {
                Some(ps) if !w.index.contains_key(ps) => return Err(ConfigError::UnknownPs(ps.clone())),
                None if needs_ps => return Err(invalid(format!("event {k} needs a power supply"))),
                _ => {}
            }
            match &f.kind {
                EventKind::SwapWith { other } if !w.index.contains_key(other) => {
                    return Err(ConfigError::UnknownPs(other.clone()))
                }
                EventKind::ResistanceChange { new_r } if !(*new_r > 0.0 && new_r.is_finite()) => {
                    return Err(invalid(format!("event {k}: resistance must be positive")))
                }
                EventKind::Feedback { .. } if w.feedback.is_none() => {
                    return Err(invalid(format!("event {k}: no feedback configured")))
                }
                _ => {}
            }
        }

        w.init_channels();
        w.schedule_initial(&triggers);
        Ok(w)
    }

    fn schedule_initial(&mut self, triggers: &[(u32, Nanos)]) {
        let s = &mut self.sched;
        s.schedule_at(0, Event::Tick).expect("t=0");
        if self.poll_period > 0 {
            s.schedule_at(0, Event::Poll).expect("t=0");
        }
        if self.metrics_period > 0 {
            s.schedule_at(0, Event::Metrics).expect("t=0");
        }
        s.schedule_at(ALARM_PERIOD_NS, Event::AlarmEval).expect("future");
        if self.feedback.is_some() {
            s.schedule_at(0, Event::FeedbackStep).expect("t=0");
        }
        for (k, f) in self.faults.iter().enumerate() {
            s.schedule_at(secs_to_ns(f.t), Event::Scenario(k)).expect("future");
        }
        for &(p, t) in triggers {
            s.schedule_at(t, Event::Trigger(p)).expect("future");
        }
    }

    // ---- accessors -------------------------------------------------------

    pub fn now(&self) -> Nanos {
        self.sched.now()
    }

    pub fn ps_count(&self) -> usize {
        self.ps.len()
    }

    pub fn ps_index(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn ps(&self, p: u32) -> &PsState {
        &self.ps[p as usize]
    }

    pub fn ps_by_id(&self, id: &str) -> Option<&PsState> {
        self.ps_index(id).map(|p| &self.ps[p as usize])
    }

    pub fn ps_mut(&mut self, p: u32) -> &mut PsState {
        &mut self.ps[p as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn machine(&self) -> Option<&Machine> {
        self.machine.as_ref()
    }

    pub fn optic_q(&self) -> Option<OpticQ> {
        self.optic_q
    }

    pub fn feedback(&self) -> Option<&FeedbackRt> {
        self.feedback.as_ref()
    }

    pub fn job(&self, id: JobId) -> Option<&RampJob> {
        self.jobs
            .get(&id)
            .or_else(|| self.done_jobs.iter().find(|j| j.id == id))
    }

    pub fn active_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn scheduler_stats(&self) -> SchedulerStats {
        self.sched.stats()
    }

    /// Completed transactions per (origin, priority path).
    pub fn txn_counts(&self) -> &BTreeMap<(Origin, bool), u64> {
        &self.txn_counts
    }

    pub fn alarm_log(&self) -> &[AlarmTransition] {
        &self.alarm_log
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn trips(&self) -> u64 {
        self.trips
    }

    pub fn set_poll_period(&mut self, ns: Nanos) {
        let was = self.poll_period;
        self.poll_period = ns;
        if was == 0 && ns > 0 {
            self.sched.schedule_in(0, Event::Poll);
        }
    }

    /// Records every controller tick of `ps` within `[from, to]`.
    pub fn enable_trace(&mut self, ps: u32, from: Nanos, to: Nanos) {
        self.trace = Some(Trace {
            ps,
            from,
            to,
            rows: vec![],
        });
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_ref().map_or(&[], |t| &t.rows)
    }

    // ---- running ---------------------------------------------------------

    pub fn run_until(&mut self, t_end: Nanos) -> Result<(), SimError> {
        while let Some((_, ev)) = self.sched.pop_until(t_end) {
            self.dispatch(ev)?;
        }
        self.sched.settle_at(t_end);
        Ok(())
    }

    /// Due time of the next event.
    pub fn next_event_time(&mut self) -> Option<Nanos> {
        self.sched.peek_due()
    }

    fn dispatch(&mut self, ev: Event) -> Result<(), SimError> {
        match ev {
            Event::Tick => self.on_tick(),
            Event::Link(p, le) => self.on_link(p, le),
            Event::Poll => self.on_poll(),
            Event::AlarmEval => self.on_alarm_eval(),
            Event::Metrics => self.on_metrics()?,
            Event::RampStep(job, k) => self.on_ramp_step(job, k),
            Event::FeedbackStep => self.on_feedback_step(),
            Event::Scenario(k) => self.on_scenario(k),
            Event::Trigger(p) => {
                self.ps[p as usize].ctrl.fire_trigger();
            }
        }
        Ok(())
    }

    fn on_tick(&mut self) {
        let now = self.sched.now();
        self.sched
            .schedule_at(now + TICK_NS, Event::Tick)
            .expect("future");
        let mut changed = vec![];
        for (p, ps) in self.ps.iter_mut().enumerate() {
            let st = ps.link.state();
            if ps.link.physically_broken() != (st.tx_broken, st.rx_broken) {
                let mut clk = Clock {
                    sched: &mut self.sched,
                    link: p as u32,
                };
                ps.link.detect_breaks(&mut clk);
            }
            let st = ps.link.state();
            let flags = (st.tx_broken, st.rx_broken);
            if flags != ps.flags {
                ps.flags = flags;
                ps.ctrl.set_link_flags(flags.0, flags.1);
                changed.push(p as u32);
            }
            let rep = ps.ctrl.tick(&mut ps.magnet, &mut self.rng);
            if rep.tripped {
                self.trips += 1;
                self.diagnostics
                    .push(format!("t={now}: {} overcurrent trip", ps.id));
            }
        }
        if let Some(tr) = self.trace.as_mut() {
            if now >= tr.from && now <= tr.to {
                let c = &self.ps[tr.ps as usize].ctrl;
                tr.rows.push(TraceRow {
                    t_ns: now,
                    i_target: c.i_target(),
                    wf_index: c.reg_read(regs::WF_INDEX),
                    i_read: c.i_read(),
                    v_out: c.v_out(),
                });
            }
        }
        for p in changed {
            self.drain(p);
            self.mirror_link_flags(p);
        }
    }

    fn on_link(&mut self, p: u32, ev: LinkEvent) {
        let now = self.sched.now();
        let ps = &mut self.ps[p as usize];
        let mut clk = Clock {
            sched: &mut self.sched,
            link: p,
        };
        match ev {
            LinkEvent::FwdDone => ps.link.on_fwd_done(&mut clk),
            LinkEvent::ProcDone => {
                if let Some((req, origin)) = ps.link.on_proc_done() {
                    let resp = ps.ctrl.service(&req);
                    ps.link.respond(resp, &mut clk);
                    if origin == Some(Origin::Ramp) {
                        if let Some((job, pos)) = ps.job {
                            if let Some(j) = self.jobs.get_mut(&job) {
                                j.applied[pos].push(now);
                            }
                        }
                    }
                }
            }
            LinkEvent::RetDone => ps.link.on_ret_done(&mut clk),
            LinkEvent::Timeout(id) => ps.link.on_timeout(id, &mut clk),
        }
        self.drain(p);
    }

    fn drain(&mut self, p: u32) {
        let done = self.ps[p as usize].link.take_completions();
        for c in done {
            *self.txn_counts.entry((c.origin, c.prio)).or_default() += 1;
            if c.origin == Origin::Test {
                if let Some(raw) = self.raw.as_mut() {
                    raw.push((p, c));
                }
                continue;
            }
            match self.pending.remove(&(p, c.id)) {
                Some(Pending::Poll) => self.on_poll_done(p, &c),
                Some(Pending::Put { op, field, word, value }) => {
                    self.on_put_done(p, op, field, word, value, &c)
                }
                Some(Pending::Ramp { job, pos, value }) => self.on_ramp_done(p, job, pos, value, &c),
                Some(Pending::Feedback) => self.on_feedback_done(p, &c),
                Some(Pending::Download { op }) => self.on_download_done(op, &c),
                None => {}
            }
        }
    }

    /// Sends a frame on a supply's link and remembers what to do with the
    /// response.
    fn submit(
        &mut self,
        p: u32,
        frame: Frame,
        prio: bool,
        origin: Origin,
        pending: Pending,
    ) -> Result<TxnId, LinkError> {
        let mut clk = Clock {
            sched: &mut self.sched,
            link: p,
        };
        let id = self.ps[p as usize].link.submit(frame, prio, origin, &mut clk)?;
        self.pending.insert((p, id), pending);
        Ok(id)
    }

    /// Raw link access for measurements. Completions are collected and
    /// returned by [`World::take_raw_completions`].
    pub fn transact_raw(&mut self, p: u32, frame: Frame, prio: bool) -> Result<TxnId, LinkError> {
        self.raw.get_or_insert_with(Vec::new);
        let mut clk = Clock {
            sched: &mut self.sched,
            link: p,
        };
        self.ps[p as usize].link.submit(frame, prio, Origin::Test, &mut clk)
    }

    pub fn take_raw_completions(&mut self) -> Vec<(u32, Completion)> {
        self.raw.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn on_metrics(&mut self) -> Result<(), SimError> {
        let now = self.sched.now();
        self.sched
            .schedule_at(now + self.metrics_period, Event::Metrics)
            .expect("future");
        for (p, ps) in self.ps.iter().enumerate() {
            let c = &ps.ctrl;
            let row = MetricsRow {
                t_ns: now,
                ps: p as u32,
                i_set: c.i_target(),
                i_read: c.i_read(),
                v_out: c.v_out(),
                r_load: c.r_load(),
                status: c.status(),
                alarm: ps.ch[Field::Alarm.index()].alarm.level(),
            };
            self.metrics.push(row, &self.ids)?;
        }
        Ok(())
    }

    fn on_scenario(&mut self, k: usize) {
        let ev = self.faults[k].clone();
        let p = ev.ps.as_deref().and_then(|id| self.ps_index(id));
        let now = self.sched.now();
        match ev.kind {
            EventKind::ResistanceChange { new_r } => {
                let p = p.expect("validated") as usize;
                self.ps[p].magnet.set_resistance(new_r).expect("validated");
            }
            EventKind::SwapWith { other } => {
                let a = p.expect("validated") as usize;
                let b = self.index[&other] as usize;
                if a != b {
                    let (lo, hi) = (a.min(b), a.max(b));
                    let (x, y) = self.ps.split_at_mut(hi);
                    std::mem::swap(&mut x[lo].magnet, &mut y[0].magnet);
                }
            }
            EventKind::LinkBreak { dir, broken } => {
                let p = p.expect("validated") as usize;
                self.ps[p].link.set_link_broken(dir, broken);
            }
            EventKind::Local { on } => {
                let p = p.expect("validated") as usize;
                self.ps[p].ctrl.set_local(on);
            }
            EventKind::Trigger => {
                let p = p.expect("validated") as usize;
                self.ps[p].ctrl.fire_trigger();
            }
            EventKind::Put { channel, value } => {
                let name = match &ev.ps {
                    Some(ps) if !channel.contains(':') => format!("{ps}:{channel}"),
                    _ => channel,
                };
                self.put_with(ReplyTo::Scenario(k), &name, value);
            }
            EventKind::Feedback { enabled } => {
                self.set_feedback_enabled(enabled);
            }
        }
        self.diagnostics.push(format!("t={now}: scenario event {k} applied"));
    }

    // ---- requests and replies ---------------------------------------------

    /// Handles one protocol request from `session`. Replies and monitor
    /// updates are queued for [`World::take_outbox`].
    pub fn handle_request(&mut self, session: SessionId, req: Request) {
        let to = ReplyTo::Session(session, req.id.clone());
        match req.op {
            Op::Get => {
                let r = self.get(&req.name).map(Some);
                self.reply(to, r);
            }
            Op::Put => match req.value {
                Some(v) => self.put_with(to, &req.name, v),
                None => self.reply(to, Err(ChError::TypeMismatch("put needs a value".into()))),
            },
            Op::Monitor => match self.get_slot(&req.name) {
                Ok(slot) => {
                    let subs = self.monitors.entry(req.name.clone()).or_default();
                    if !subs.contains(&session) {
                        subs.push(session);
                    }
                    self.reply(to, Ok(Some(slot.value.clone())));
                    let u = Update::new(req.name, slot.value, slot.alarm, self.sched.now());
                    self.send(session, Message::Update(u));
                }
                Err(e) => self.reply(to, Err(e)),
            },
            Op::Unmonitor => {
                let r = self.get_slot(&req.name).map(|_| None);
                if let Some(subs) = self.monitors.get_mut(&req.name) {
                    subs.retain(|s| *s != session);
                }
                self.reply(to, r);
            }
        }
    }

    /// Forgets every subscription of a closed session.
    pub fn drop_session(&mut self, session: SessionId) {
        for subs in self.monitors.values_mut() {
            subs.retain(|s| *s != session);
        }
        self.monitors.retain(|_, v| !v.is_empty());
    }

    pub fn take_outbox(&mut self) -> Vec<(SessionId, Message)> {
        std::mem::take(&mut self.outbox)
    }

    /// Messages addressed to [`INTERNAL`].
    pub fn take_internal(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.internal)
    }

    fn send(&mut self, s: SessionId, m: Message) {
        if s == INTERNAL {
            self.internal.push(m);
        } else {
            self.outbox.push((s, m));
        }
    }

    fn reply(&mut self, to: ReplyTo, r: Result<Option<Value>, ChError>) {
        match to {
            ReplyTo::Session(s, id) => {
                let m = match &r {
                    Ok(v) => Reply::ok(id, v.clone()),
                    Err(e) => Reply::err(id, e),
                };
                self.send(s, Message::Reply(m));
            }
            ReplyTo::Internal(k) => {
                self.results.insert(k, r);
            }
            ReplyTo::Scenario(k) => {
                if let Err(e) = r {
                    let now = self.sched.now();
                    self.diagnostics
                        .push(format!("t={now}: scenario event {k} put failed: {e}"));
                }
            }
        }
    }

    fn put_with(&mut self, to: ReplyTo, name: &str, value: Value) {
        match self.start_put(to.clone(), name, value) {
            Ok(Started::Done(v)) => self.reply(to, Ok(v)),
            Ok(Started::Pending) => {}
            Err(e) => self.reply(to, Err(e)),
        }
    }

    fn new_op(&mut self, reply: ReplyTo, remaining: usize, then: Then) -> OpId {
        let id = self.next_op;
        self.next_op += 1;
        self.ops.insert(
            id,
            OpState {
                reply,
                remaining,
                error: None,
                then,
            },
        );
        id
    }

    /// Counts one finished part of an operation and replies when all parts
    /// are in.
    fn op_part_done(&mut self, op: OpId, r: Result<(), ChError>) {
        let Some(st) = self.ops.get_mut(&op) else { return };
        if let Err(e) = r {
            st.error.get_or_insert(e);
        }
        st.remaining = st.remaining.saturating_sub(1);
        if st.remaining > 0 {
            return;
        }
        let st = self.ops.remove(&op).expect("present");
        match st.error {
            Some(e) => self.reply(st.reply, Err(e)),
            None => {
                self.apply_then(st.then);
                self.reply(st.reply, Ok(None));
            }
        }
    }

    fn apply_then(&mut self, then: Then) {
        match then {
            Then::Nothing | Then::Download { .. } => {}
            Then::Family { fam, value } => {
                self.families[fam].set_value = value;
                self.refresh_family_field(fam, Field::ISet);
            }
            Then::Optic { q, values } => self.commit_optic(q, &values),
        }
    }

    /// Runs a request to completion in virtual time and returns its reply.
    /// Gives up with `timeout` after `limit` of virtual time.
    pub fn call(&mut self, req: Request, limit: Nanos) -> Reply {
        let id = req.id.clone();
        let k = self.next_call;
        self.next_call += 1;
        let to = ReplyTo::Internal(k);
        match req.op {
            Op::Get => {
                let r = self.get(&req.name).map(Some);
                self.reply(to, r);
            }
            Op::Put => match req.value {
                Some(v) => self.put_with(to, &req.name, v),
                None => self.reply(to, Err(ChError::TypeMismatch("put needs a value".into()))),
            },
            Op::Monitor | Op::Unmonitor => {
                self.handle_request(INTERNAL, req);
                self.internal.retain(|m| !matches!(m, Message::Reply(_)));
                return Reply::ok(id, None);
            }
        }
        let r = self.wait_result(k, limit);
        match r {
            Ok(v) => Reply::ok(id, v),
            Err(e) => Reply::err(id, &e),
        }
    }

    fn wait_result(&mut self, k: u64, limit: Nanos) -> Result<Option<Value>, ChError> {
        let deadline = self.sched.now() + limit;
        loop {
            if let Some(r) = self.results.remove(&k) {
                return r;
            }
            match self.sched.pop_until(deadline) {
                Some((_, ev)) => {
                    if let Err(e) = self.dispatch(ev) {
                        return Err(ChError::Config(e.to_string()));
                    }
                }
                None => {
                    self.sched.settle_at(deadline);
                    return Err(ChError::Timeout);
                }
            }
        }
    }

    /// Writes a channel and waits (in virtual time) for the outcome.
    pub fn put(&mut self, name: &str, value: Value) -> Result<Option<Value>, ChError> {
        let k = self.next_call;
        self.next_call += 1;
        self.put_with(ReplyTo::Internal(k), name, value);
        self.wait_result(k, 10 * NS_PER_S)
    }

    /// Starts a write without waiting; see [`World::take_result`].
    pub fn put_async(&mut self, name: &str, value: Value) -> u64 {
        let k = self.next_call;
        self.next_call += 1;
        self.put_with(ReplyTo::Internal(k), name, value);
        k
    }

    pub fn take_result(&mut self, k: u64) -> Option<Result<Option<Value>, ChError>> {
        self.results.remove(&k)
    }

    /// Checks the engine's bookkeeping invariants; returns the violations.
    pub fn check_invariants(&mut self) -> Vec<String> {
        let mut v = vec![];
        let s = self.sched.stats();
        if s.scheduled != s.fired + s.cancelled + s.pending {
            v.push(format!("event accounting: {s:?}"));
        }
        for ps in &self.ps {
            let st = ps.link.state();
            if st.submitted != st.completed + st.failed + ps.link.pending() as u64 {
                v.push(format!("{}: link counters {st:?}", ps.id));
            }
            let i = ps.magnet.state.current;
            if !i.is_finite() || i.abs() > 1.05 * ps.spec.i_max + ps.lsb() {
                v.push(format!("{}: current {i} A", ps.id));
            }
        }
        let mut last: HashMap<&str, Severity> = HashMap::new();
        for t in &self.alarm_log {
            let prev = last.insert(&t.channel, t.severity).unwrap_or(Severity::None);
            if prev == t.severity {
                v.push(format!("{}: repeated {:?} at {}", t.channel, t.severity, t.t_ns));
            }
        }
        v
    }
}

/// Outcome of a completed write transaction.
fn write_outcome(c: &Completion) -> Result<&Frame, ChError> {
    match &c.result {
        Ok(f) if f.opcode == Opcode::Ack => Ok(f),
        Ok(f) => Err(ChError::from(NakReason::from_word(
            f.payload.first().copied().unwrap_or(0),
        ))),
        Err(e) => Err(ChError::from(*e)),
    }
}

#[cfg(test)]
mod tests;
