//! Channel layer: name resolution, reads, writes, the periodic poll,
//! compare and resistance alarms, and family aggregation.

use std::collections::VecDeque;

use serde_json::{json, Value};

use super::*;
use crate::channel::{as_bool, as_f64, f32_value, mode_label, mode_word, num, split_name};
use crate::controller::regs::{self, status};
use crate::controller::{LoopMode, Waveform};
use crate::link::frame::MAX_COUNT;

pub(crate) enum Target {
    Ps(u32, Field),
    Family(usize, Field),
    Soft(String),
}

pub const OPTIC_Q: &str = "OPTIC:Q";
pub const FB_ENABLE: &str = "FB:ENABLE";
pub const FB_STATUS: &str = "FB:STATUS";
pub const FB_ORBIT_RMS: &str = "FB:ORBIT-RMS";
pub const MACHINE_RAMP: &str = "MACHINE:RAMP";

fn sev_label(s: Severity) -> Value {
    Value::String(s.as_str().into())
}

impl World {
    pub(crate) fn resolve(&self, name: &str) -> Result<Target, ChError> {
        if self.soft.contains_key(name) {
            return Ok(Target::Soft(name.to_string()));
        }
        let unknown = || ChError::NoSuchChannel(name.to_string());
        let (dev, field) = split_name(name).ok_or_else(unknown)?;
        let f = Field::parse(field).ok_or_else(unknown)?;
        if let Some(&p) = self.index.get(dev) {
            return Ok(Target::Ps(p, f));
        }
        let fi = self
            .machine
            .as_ref()
            .and_then(|m| m.family_index(dev))
            .ok_or_else(unknown)?;
        if FAMILY_FIELDS.contains(&f) {
            Ok(Target::Family(fi, f))
        } else {
            Err(unknown())
        }
    }

    pub(crate) fn get_slot(&self, name: &str) -> Result<Slot, ChError> {
        Ok(match self.resolve(name)? {
            Target::Ps(p, f) => self.ps[p as usize].ch[f.index()].clone(),
            Target::Family(fi, f) => self.families[fi].ch[fam_slot(f)].clone(),
            Target::Soft(n) => self.soft[&n].clone(),
        })
    }

    /// Current value of a channel.
    pub fn get(&self, name: &str) -> Result<Value, ChError> {
        self.get_slot(name).map(|s| s.value)
    }

    /// Current alarm severity of a channel.
    pub fn alarm(&self, name: &str) -> Result<Severity, ChError> {
        self.get_slot(name).map(|s| s.alarm)
    }

    /// Names of all channels.
    pub fn channel_names(&self) -> Vec<String> {
        let mut v = vec![];
        for id in &self.ids {
            v.extend(FIELDS.iter().map(|f| format!("{id}:{}", f.name())));
        }
        if let Some(m) = &self.machine {
            for fam in &m.families {
                v.extend(FAMILY_FIELDS.iter().map(|f| format!("{}:{}", fam.name, f.name())));
            }
        }
        v.extend(self.soft.keys().cloned());
        v
    }

    fn notify(&mut self, name: &str, value: &Value, alarm: Severity) {
        let Some(subs) = self.monitors.get(name) else { return };
        let now = self.sched.now();
        let msgs: Vec<_> = subs
            .iter()
            .map(|&s| (s, Update::new(name.to_string(), value.clone(), alarm, now)))
            .collect();
        for (s, u) in msgs {
            self.send(s, Message::Update(u));
        }
    }

    fn log_alarm(&mut self, name: &str, severity: Severity) {
        self.alarm_log.push(AlarmTransition {
            t_ns: self.sched.now(),
            channel: name.to_string(),
            severity,
        });
    }

    pub(crate) fn set_chan(&mut self, p: u32, f: Field, value: Value, sev: Severity) {
        let ps = &mut self.ps[p as usize];
        let slot = &mut ps.ch[f.index()];
        if slot.value == value && slot.alarm == sev {
            return;
        }
        let alarm_changed = slot.alarm != sev;
        slot.value = value;
        slot.alarm = sev;
        let fam = ps.family;
        if alarm_changed || !self.monitors.is_empty() {
            let name = format!("{}:{}", ps.id, f.name());
            let value = slot.value.clone();
            if alarm_changed {
                self.log_alarm(&name, sev);
            }
            self.notify(&name, &value, sev);
        }
        if f != Field::Alarm && alarm_changed {
            self.refresh_alarm(p);
        }
        if let Some(fi) = fam {
            if FAMILY_FIELDS.contains(&f) {
                self.refresh_family_field(fi, f);
            }
        }
    }

    fn set_chan_value(&mut self, p: u32, f: Field, value: Value) {
        let sev = self.ps[p as usize].ch[f.index()].alarm;
        self.set_chan(p, f, value, sev);
    }

    fn refresh_alarm(&mut self, p: u32) {
        let worst = self.ps[p as usize]
            .ch
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != Field::Alarm.index())
            .map(|(_, s)| s.alarm)
            .max()
            .unwrap_or_default();
        self.set_chan(p, Field::Alarm, sev_label(worst), worst);
    }

    fn set_family_chan(&mut self, fi: usize, f: Field, value: Value, sev: Severity) {
        let slot = &mut self.families[fi].ch[fam_slot(f)];
        if slot.value == value && slot.alarm == sev {
            return;
        }
        let alarm_changed = slot.alarm != sev;
        slot.value = value.clone();
        slot.alarm = sev;
        if alarm_changed || !self.monitors.is_empty() {
            let name = format!("{}:{}", self.machine.as_ref().expect("families").families[fi].name, f.name());
            if alarm_changed {
                self.log_alarm(&name, sev);
            }
            self.notify(&name, &value, sev);
        }
    }

    pub(crate) fn set_soft(&mut self, name: &str, value: Value, sev: Severity) {
        let slot = self.soft.entry(name.to_string()).or_insert_with(|| Slot::new(Value::Null));
        if slot.value == value && slot.alarm == sev {
            return;
        }
        let alarm_changed = slot.alarm != sev;
        slot.value = value.clone();
        slot.alarm = sev;
        if alarm_changed {
            self.log_alarm(name, sev);
        }
        self.notify(name, &value, sev);
    }

    /// Recomputes one aggregated family channel from its members.
    pub(crate) fn refresh_family_field(&mut self, fi: usize, f: Field) {
        let Some(m) = self.machine.as_ref() else { return };
        let fam = &m.families[fi];
        let members: Vec<&PsState> = fam
            .members
            .iter()
            .map(|mem| &self.ps[self.index[&mem.ps] as usize])
            .collect();
        let slot = |ps: &PsState, f: Field| ps.ch[f.index()].clone();
        let worst = |f: Field| members.iter().map(|ps| ps.ch[f.index()].alarm).max().unwrap_or_default();
        let (value, sev) = match f {
            Field::ISet => (num(self.families[fi].set_value), Severity::None),
            Field::IRead => {
                let mut sum = 0.0;
                for (k, ps) in members.iter().enumerate() {
                    let v = ps.ch[Field::IRead.index()].value.as_f64().unwrap_or(0.0);
                    sum += fam.family_units(k, v);
                }
                (num(sum / members.len() as f64), Severity::None)
            }
            Field::Mode => {
                let first = slot(members[0], Field::Mode).value;
                if members.iter().all(|ps| ps.ch[Field::Mode.index()].value == first) {
                    (first, Severity::None)
                } else {
                    (json!("mixed"), Severity::None)
                }
            }
            Field::Compare => {
                let bad = members
                    .iter()
                    .any(|ps| ps.ch[Field::Compare.index()].value == json!("alarm"));
                (json!(if bad { "alarm" } else { "ok" }), worst(Field::Compare))
            }
            Field::HystState => {
                let off = members.iter().any(|ps| !ps.hyst.on_branch);
                (json!(if off { "off_branch" } else { "on_branch" }), Severity::None)
            }
            Field::CycleCmd => {
                let any = members
                    .iter()
                    .any(|ps| ps.ch[Field::CycleCmd.index()].value == Value::Bool(true));
                (Value::Bool(any), Severity::None)
            }
            Field::Alarm => {
                let w = worst(Field::Alarm);
                (sev_label(w), w)
            }
            Field::RampState => {
                let busy = members
                    .iter()
                    .map(|ps| ps.ch[Field::RampState.index()].value.clone())
                    .find(|v| v != &json!("idle"))
                    .unwrap_or(json!("idle"));
                (busy, worst(Field::RampState))
            }
            _ => return,
        };
        self.set_family_chan(fi, f, value, sev);
        if f != Field::Alarm {
            self.refresh_family_field(fi, Field::Alarm);
        }
    }

    /// Fills every channel from the controllers' registers at start-up.
    pub(crate) fn init_channels(&mut self) {
        for p in 0..self.ps.len() as u32 {
            let c = &self.ps[p as usize].ctrl;
            let words: Vec<u32> = (0..regs::POLL_COUNT as u8)
                .map(|k| c.reg_read(regs::POLL_BASE + k))
                .collect();
            self.apply_poll(p, &words);
            self.mirror_link_flags(p);
            let h = self.ps[p as usize].hyst.label();
            self.set_chan(p, Field::HystState, json!(h), Severity::None);
            self.set_chan(p, Field::CycleCmd, Value::Bool(false), Severity::None);
            self.set_chan(p, Field::RampState, json!("idle"), Severity::None);
            self.refresh_alarm(p);
        }
        for fi in 0..self.families.len() {
            for f in FAMILY_FIELDS {
                self.refresh_family_field(fi, f);
            }
        }
        if let Some(q) = self.optic_q {
            self.set_soft(OPTIC_Q, optic_value(&q), Severity::None);
        }
        if let Some(fb) = &self.feedback {
            let en = fb.enabled;
            self.set_soft(FB_ENABLE, Value::Bool(en), Severity::None);
            self.set_soft(FB_STATUS, json!(if en { "running" } else { "disabled" }), Severity::None);
            self.set_soft(FB_ORBIT_RMS, Value::Null, Severity::None);
        }
        self.set_soft(MACHINE_RAMP, Value::Null, Severity::None);
    }

    pub(crate) fn mirror_link_flags(&mut self, p: u32) {
        let (tx, rx) = self.ps[p as usize].flags;
        let sev = |broken: bool| if broken { Severity::Major } else { Severity::None };
        self.set_chan(p, Field::LinkTxOk, Value::Bool(!tx), sev(tx));
        self.set_chan(p, Field::LinkRxOk, Value::Bool(!rx), sev(rx));
    }

    /// Value of a written register channel: the exact written value while
    /// the register still holds the written word.
    fn read_back(&mut self, p: u32, f: Field, word: u32) -> Value {
        let slot = &mut self.ps[p as usize].written[f.index()];
        match slot {
            Some((w, v)) if *w == word => v.clone(),
            _ => {
                *slot = None;
                f32_value(word)
            }
        }
    }

    /// Updates the channels from a MODE..TRIG_ARM register snapshot.
    fn apply_poll(&mut self, p: u32, w: &[u32]) {
        let st = w[3];
        let i_set = self.read_back(p, Field::ISet, w[1]);
        let wf_off = self.read_back(p, Field::WfOffset, w[6]);
        let wf_scale = self.read_back(p, Field::WfScale, w[7]);
        let ps = &self.ps[p as usize];
        let set_sev = if ps.local_nak { Severity::Minor } else { Severity::None };
        let r_sev = if ps.r_alarm { Severity::Major } else { Severity::None };
        let fault_sev = if st & status::FAULT != 0 { Severity::Major } else { Severity::None };
        self.set_chan(p, Field::Mode, json!(mode_label(w[0])), Severity::None);
        self.set_chan(p, Field::ISet, i_set, set_sev);
        self.set_chan(p, Field::IRead, f32_value(w[2]), Severity::None);
        self.set_chan(p, Field::Status, json!(st), fault_sev);
        self.set_chan(p, Field::RLoad, f32_value(w[4]), r_sev);
        self.set_chan(p, Field::VOut, f32_value(w[5]), Severity::None);
        self.set_chan(p, Field::WfOffset, wf_off, Severity::None);
        self.set_chan(p, Field::WfScale, wf_scale, Severity::None);
        self.set_chan(p, Field::TrigArm, Value::Bool(w[8] != 0), Severity::None);
        self.set_chan(p, Field::Local, Value::Bool(st & status::LOCAL != 0), Severity::None);
        self.eval_compare(
            p,
            f32::from_bits(w[1]) as f64,
            f32::from_bits(w[2]) as f64,
            w[0],
            st,
        );
    }

    fn eval_compare(&mut self, p: u32, i_set: f64, i_read: f64, mode: u32, st: u32) {
        let now = self.sched.now();
        let ps = &mut self.ps[p as usize];
        let tol = ps.spec.tol_ppm * 1e-6 * ps.spec.i_max;
        let on = mode != 0 && st & status::FAULT == 0;
        let suppressed = !on || st & status::WAVEFORM_RUNNING != 0 || ps.job.is_some();
        let deviates = (i_read - i_set).abs() > tol;
        let was = ps.ch[Field::Compare.index()].value == json!("alarm");
        let alarm = if suppressed {
            false
        } else {
            match ps.grace_until {
                Some(_) if !deviates => {
                    ps.grace_until = None;
                    false
                }
                Some(g) if now < g => was,
                _ => {
                    ps.grace_until = None;
                    deviates
                }
            }
        };
        let (v, s) = if alarm {
            ("alarm", Severity::Minor)
        } else {
            ("ok", Severity::None)
        };
        self.set_chan(p, Field::Compare, json!(v), s);
    }

    /// Whether a poll now would still be on the wire when the supply's next
    /// ramp update is due.
    fn poll_conflicts(&self, p: u32) -> bool {
        let Some((job, _)) = self.ps[p as usize].job else { return false };
        let Some(j) = self.jobs.get(&job) else { return false };
        let next = j.t0 + j.next_k as Nanos * crate::channel::program::RAMP_STEP_NS;
        let now = self.sched.now();
        next.abs_diff(now) < NS_PER_MS
    }

    pub(crate) fn on_poll(&mut self) {
        if self.poll_period == 0 {
            return;
        }
        let now = self.sched.now();
        self.sched
            .schedule_at(now + self.poll_period, Event::Poll)
            .expect("future");
        for p in 0..self.ps.len() as u32 {
            let ps = &self.ps[p as usize];
            if ps.poll_busy || ps.flags != (false, false) || self.poll_conflicts(p) {
                continue;
            }
            let frame = Frame::block_read(regs::POLL_BASE, regs::POLL_COUNT);
            if self.submit(p, frame, false, Origin::Poll, Pending::Poll).is_ok() {
                self.ps[p as usize].poll_busy = true;
            }
        }
    }

    pub(crate) fn on_poll_done(&mut self, p: u32, c: &Completion) {
        self.ps[p as usize].poll_busy = false;
        if let Ok(f) = &c.result {
            if f.opcode == Opcode::Ack && f.payload.len() == regs::POLL_COUNT as usize {
                let words = f.payload.clone();
                self.apply_poll(p, &words);
            }
        }
    }

    /// Once a second: the resistance band check. Three consecutive
    /// out-of-band readings raise a major alarm on R-LOAD.
    pub(crate) fn on_alarm_eval(&mut self) {
        let now = self.sched.now();
        self.sched
            .schedule_at(now + ALARM_PERIOD_NS, Event::AlarmEval)
            .expect("future");
        for p in 0..self.ps.len() as u32 {
            let ps = &mut self.ps[p as usize];
            let st = ps.ch[Field::Status.index()].value.as_u64().unwrap_or(0) as u32;
            let i_read = ps.ch[Field::IRead.index()].value.as_f64().unwrap_or(0.0);
            let r = ps.ch[Field::RLoad.index()].value.as_f64().unwrap_or(ps.r_nom);
            let suppressed = st & status::ON == 0
                || st & status::FAULT != 0
                || st & status::WAVEFORM_RUNNING != 0
                || i_read.abs() < crate::controller::R_GUARD_RATIO * ps.spec.i_max
                || ps.job.is_some();
            if suppressed {
                continue;
            }
            if (r / ps.r_nom - 1.0).abs() > R_BAND {
                ps.r_strikes += 1;
                if ps.r_strikes >= R_STRIKES {
                    ps.r_alarm = true;
                }
            } else {
                ps.r_strikes = 0;
                ps.r_alarm = false;
            }
            let sev = if ps.r_alarm { Severity::Major } else { Severity::None };
            let v = ps.ch[Field::RLoad.index()].value.clone();
            self.set_chan(p, Field::RLoad, v, sev);
        }
    }

    // ---- writes ------------------------------------------------------------

    pub(crate) fn start_put(&mut self, to: ReplyTo, name: &str, value: Value) -> Result<Started, ChError> {
        match self.resolve(name)? {
            Target::Soft(n) => self.put_soft(to, &n, value),
            Target::Family(fi, f) => self.put_family(to, fi, f, value),
            Target::Ps(p, f) => self.put_ps(to, p, f, value),
        }
    }

    fn put_soft(&mut self, to: ReplyTo, name: &str, value: Value) -> Result<Started, ChError> {
        match name {
            OPTIC_Q => {
                let q: OpticQ = serde_json::from_value(value)
                    .map_err(|e| ChError::TypeMismatch(format!("expected 5 numbers: {e}")))?;
                self.put_optic(to, q)
            }
            FB_ENABLE => {
                let en = as_bool(&value)?;
                self.set_feedback_enabled(en);
                Ok(Started::Done(None))
            }
            MACHINE_RAMP => {
                let req: RampRequest = serde_json::from_value(value)
                    .map_err(|e| ChError::TypeMismatch(format!("ramp request: {e}")))?;
                let id = self.start_ramp(&req)?;
                Ok(Started::Done(Some(json!({ "job": id }))))
            }
            _ => Err(ChError::ReadOnly),
        }
    }

    fn put_ps(&mut self, to: ReplyTo, p: u32, f: Field, value: Value) -> Result<Started, ChError> {
        if !f.writable() {
            return Err(ChError::ReadOnly);
        }
        let ps = &self.ps[p as usize];
        let (addr, word, stored) = match f {
            Field::ISet => {
                let v = as_f64(&value)?;
                check_range(ps, v)?;
                if ps.in_job() {
                    return Err(ChError::Busy);
                }
                (regs::I_SET, (v as f32).to_bits(), num(v))
            }
            Field::Mode => {
                let w = mode_word(&value)?;
                (regs::MODE, w, json!(mode_label(w)))
            }
            Field::WfOffset | Field::WfScale => {
                let v = as_f64(&value)?;
                if !v.is_finite() {
                    return Err(ChError::InvalidValue);
                }
                (f.register().expect("register field"), (v as f32).to_bits(), num(v))
            }
            Field::TrigArm => {
                let b = as_bool(&value)?;
                (regs::TRIG_ARM, b as u32, Value::Bool(b))
            }
            Field::CycleCmd => {
                if as_bool(&value)? {
                    self.start_cycle(&[p]).map_err(|(_, e)| e)?;
                } else {
                    self.abort_job_of(p);
                }
                return Ok(Started::Done(None));
            }
            Field::WfLoad => return self.start_download(to, p, value),
            _ => return Err(ChError::ReadOnly),
        };
        let op = self.new_op(to, 1, Then::Nothing);
        let pending = Pending::Put {
            op,
            field: f,
            word,
            value: stored,
        };
        if let Err(e) = self.submit(p, Frame::write(addr, word), false, Origin::Client, pending) {
            self.ops.remove(&op);
            return Err(e.into());
        }
        Ok(Started::Pending)
    }

    pub(crate) fn on_put_done(&mut self, p: u32, op: OpId, f: Field, word: u32, value: Value, c: &Completion) {
        let r = write_outcome(c).map(|_| ());
        match &r {
            Ok(()) => {
                self.ps[p as usize].written[f.index()] = Some((word, value.clone()));
                self.after_write(p, f, value);
            }
            Err(ChError::Local) if f == Field::ISet => {
                self.ps[p as usize].local_nak = true;
                let v = self.ps[p as usize].ch[Field::ISet.index()].value.clone();
                self.set_chan(p, Field::ISet, v, Severity::Minor);
            }
            Err(_) => {}
        }
        self.op_part_done(op, r);
    }

    /// Channel bookkeeping after an acknowledged write.
    pub(crate) fn after_write(&mut self, p: u32, f: Field, value: Value) {
        let now = self.sched.now();
        match f {
            Field::ISet => {
                let ps = &mut self.ps[p as usize];
                ps.local_nak = false;
                ps.grace_until = Some(now + COMPARE_GRACE_NS);
                if let Some(v) = value.as_f64() {
                    ps.hyst.update(v);
                }
                let h = json!(ps.hyst.label());
                self.set_chan(p, Field::ISet, value, Severity::None);
                self.set_chan(p, Field::HystState, h, Severity::None);
            }
            _ => self.set_chan_value(p, f, value),
        }
    }

    fn put_family(&mut self, to: ReplyTo, fi: usize, f: Field, value: Value) -> Result<Started, ChError> {
        let members: Vec<u32> = self.machine.as_ref().expect("families").families[fi]
            .members
            .iter()
            .map(|m| self.index[&m.ps])
            .collect();
        match f {
            Field::ISet => {
                let v = as_f64(&value)?;
                let targets: Vec<f64> = self.machine.as_ref().expect("families").families[fi]
                    .member_currents(v)
                    .into_iter()
                    .map(|(_, i)| i)
                    .collect();
                self.put_group(to, &members, &targets, Then::Family { fam: fi, value: v })
            }
            Field::Mode => {
                let w = mode_word(&value)?;
                for &p in &members {
                    if self.ps[p as usize].flags != (false, false) {
                        return Err(ChError::LinkDown);
                    }
                }
                let op = self.new_op(to, members.len(), Then::Nothing);
                for &p in &members {
                    let pending = Pending::Put {
                        op,
                        field: Field::Mode,
                        word: w,
                        value: json!(mode_label(w)),
                    };
                    if let Err(e) = self.submit(p, Frame::write(regs::MODE, w), false, Origin::Client, pending) {
                        self.op_part_done(op, Err(e.into()));
                    }
                }
                Ok(Started::Pending)
            }
            Field::CycleCmd => {
                if as_bool(&value)? {
                    self.start_cycle(&members).map_err(|(_, e)| e)?;
                } else {
                    for p in members {
                        self.abort_job_of(p);
                    }
                }
                Ok(Started::Done(None))
            }
            _ => Err(ChError::ReadOnly),
        }
    }

    /// Writes one set-point to each supply; replies once all are in. The
    /// whole group is checked before anything is sent.
    pub(crate) fn put_group(
        &mut self,
        to: ReplyTo,
        members: &[u32],
        targets: &[f64],
        then: Then,
    ) -> Result<Started, ChError> {
        for (&p, &v) in members.iter().zip(targets) {
            let ps = &self.ps[p as usize];
            check_range(ps, v)?;
            if ps.flags != (false, false) {
                return Err(ChError::LinkDown);
            }
            if ps.in_job() {
                return Err(ChError::Busy);
            }
        }
        let op = self.new_op(to, members.len(), then);
        for (&p, &v) in members.iter().zip(targets) {
            let word = (v as f32).to_bits();
            let pending = Pending::Put {
                op,
                field: Field::ISet,
                word,
                value: num(v),
            };
            if let Err(e) = self.submit(p, Frame::write(regs::I_SET, word), false, Origin::Client, pending) {
                self.op_part_done(op, Err(e.into()));
            }
        }
        Ok(Started::Pending)
    }

    // ---- waveform download ---------------------------------------------------

    fn start_download(&mut self, to: ReplyTo, p: u32, value: Value) -> Result<Started, ChError> {
        let (wf, persistent) = self.parse_waveform(value)?;
        let ps = &self.ps[p as usize];
        wf.validate(ps.i_max())
            .map_err(|e| ChError::OutOfRange(e.to_string()))?;
        if ps.flags != (false, false) {
            return Err(ChError::LinkDown);
        }
        let mut frames = VecDeque::new();
        frames.push_back(Frame::write(regs::WF_CTRL, regs::WF_CTRL_CLEAR));
        let words: Vec<u32> = wf.points.iter().map(|v| (*v as f32).to_bits()).collect();
        for chunk in words.chunks(MAX_COUNT) {
            frames.push_back(Frame::block_write(regs::WF_DATA, chunk.to_vec()));
        }
        frames.push_back(Frame::write(regs::WF_LOOP, (wf.loop_mode == LoopMode::Loop) as u32));
        frames.push_back(Frame::write(regs::WF_OFFSET, (wf.offset as f32).to_bits()));
        frames.push_back(Frame::write(regs::WF_SCALE, (wf.scale as f32).to_bits()));
        let commit = if persistent {
            regs::WF_CTRL_COMMIT_PERSISTENT
        } else {
            regs::WF_CTRL_COMMIT_VOLATILE
        };
        frames.push_back(Frame::write(regs::WF_CTRL, commit));
        let name = if wf.name.is_empty() { "inline".to_string() } else { wf.name.clone() };
        let first = frames.pop_front().expect("non-empty");
        let op = self.new_op(to, 1, Then::Download { ps: p, name, rest: frames });
        if let Err(e) = self.submit(p, first, false, Origin::Download, Pending::Download { op }) {
            self.ops.remove(&op);
            return Err(e.into());
        }
        Ok(Started::Pending)
    }

    fn parse_waveform(&self, value: Value) -> Result<(Waveform, bool), ChError> {
        match value {
            Value::String(path) => {
                let full = self.base_dir.join(&path);
                let mut wf = Waveform::from_file(&full).map_err(|e| ChError::Config(e.to_string()))?;
                if wf.name.is_empty() {
                    wf.name = path;
                }
                Ok((wf, false))
            }
            Value::Object(mut obj) => {
                let persistent = match obj.remove("persistent") {
                    Some(v) => as_bool(&v)?,
                    None => false,
                };
                if let Some(Value::String(path)) = obj.remove("path") {
                    let (wf, _) = self.parse_waveform(Value::String(path))?;
                    return Ok((wf, persistent));
                }
                let wf: Waveform = serde_json::from_value(Value::Object(obj))
                    .map_err(|e| ChError::TypeMismatch(format!("waveform: {e}")))?;
                Ok((wf, persistent))
            }
            other => Err(ChError::TypeMismatch(format!("expected a waveform, got {other}"))),
        }
    }

    pub(crate) fn on_download_done(&mut self, op: OpId, c: &Completion) {
        let r = write_outcome(c).map(|_| ());
        let next = match (&r, self.ops.get_mut(&op)) {
            (Ok(()), Some(OpState { then: Then::Download { ps, rest, .. }, .. })) => {
                rest.pop_front().map(|f| (*ps, f))
            }
            _ => None,
        };
        if let Some((p, frame)) = next {
            if let Err(e) = self.submit(p, frame, false, Origin::Download, Pending::Download { op }) {
                self.op_part_done(op, Err(e.into()));
            }
            return;
        }
        if r.is_ok() {
            if let Some(OpState { then: Then::Download { ps, name, .. }, .. }) = self.ops.get(&op) {
                let (p, name) = (*ps, name.clone());
                self.set_chan(p, Field::WfLoad, Value::String(name), Severity::None);
            }
        }
        self.op_part_done(op, r);
    }
}

fn fam_slot(f: Field) -> usize {
    FAMILY_FIELDS.iter().position(|x| *x == f).expect("family field")
}

pub(crate) fn check_range(ps: &PsState, v: f64) -> Result<(), ChError> {
    if v.is_finite() && v >= ps.i_min() && v <= ps.i_max() {
        Ok(())
    } else {
        Err(ChError::OutOfRange(format!(
            "{}: {v} A outside [{}, {}] A",
            ps.id,
            ps.i_min(),
            ps.i_max()
        )))
    }
}

pub(crate) fn optic_value(q: &OpticQ) -> Value {
    let a: [f64; 5] = (*q).into();
    Value::Array(a.iter().map(|v| num(*v)).collect())
}
