//! Synchronized ramps, standardization cycles and optic changes.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::chan::{check_range, optic_value, MACHINE_RAMP, OPTIC_Q};
use super::*;
use crate::channel::num;
use crate::channel::program::{Profile, MIN_RAMP_S, RAMP_STEP_NS};
use crate::controller::regs;

/// Body of a `MACHINE:RAMP` write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampRequest {
    pub members: Vec<String>,
    pub targets: Vec<f64>,
    /// Seconds.
    pub duration: f64,
    /// Start time in seconds of virtual time; defaults to shortly after now.
    #[serde(default)]
    pub t0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobKind {
    Ramp,
    Cycle,
}

/// A running or finished set-point program over one or more supplies.
#[derive(Debug, Clone)]
pub struct RampJob {
    pub id: JobId,
    pub kind: JobKind,
    pub members: Vec<u32>,
    pub profiles: Vec<Profile>,
    pub t0: Nanos,
    pub steps: u32,
    /// Times the slave applied each update, per member.
    pub applied: Vec<Vec<Nanos>>,
    pub next_k: u32,
    pub outstanding: usize,
    pub error: Option<ChError>,
    pub finished: Option<Nanos>,
    op: Option<OpId>,
    handle: Option<EventHandle>,
}

impl RampJob {
    /// Largest spread of application times across members for one update.
    pub fn start_skew(&self) -> Nanos {
        let n = self.applied.iter().map(Vec::len).min().unwrap_or(0);
        (0..n)
            .map(|k| {
                let ts = self.applied.iter().map(|a| a[k]);
                ts.clone().max().unwrap_or(0) - ts.min().unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }

    /// Largest delay between an update's nominal time and its application.
    pub fn max_start_offset(&self) -> Nanos {
        self.applied
            .iter()
            .flat_map(|a| {
                a.iter()
                    .enumerate()
                    .map(|(k, t)| t.saturating_sub(self.t0 + k as Nanos * RAMP_STEP_NS))
            })
            .max()
            .unwrap_or(0)
    }

    pub fn succeeded(&self) -> bool {
        self.finished.is_some() && self.error.is_none()
    }
}

impl World {
    /// Whether a supply can take part in a program.
    fn ready(&self, p: u32) -> Result<(), ChError> {
        let ps = &self.ps[p as usize];
        if ps.flags != (false, false) {
            return Err(ChError::LinkDown);
        }
        if ps.ctrl.is_local() {
            return Err(ChError::Local);
        }
        if !ps.ctrl.is_on() {
            return Err(ChError::NotOn(ps.id.clone()));
        }
        if ps.in_job() {
            return Err(ChError::Busy);
        }
        Ok(())
    }

    /// Set-point the driver last established for a supply.
    fn current_set(&self, p: u32) -> f64 {
        let ps = &self.ps[p as usize];
        ps.ch[Field::ISet.index()]
            .value
            .as_f64()
            .unwrap_or_else(|| ps.ctrl.i_set())
    }

    /// Starts a synchronized linear ramp. Every member is checked first;
    /// one unready member rejects the whole job.
    pub fn start_ramp(&mut self, req: &RampRequest) -> Result<JobId, ChError> {
        self.start_ramp_op(req, None)
    }

    fn start_ramp_op(&mut self, req: &RampRequest, op: Option<OpId>) -> Result<JobId, ChError> {
        if req.members.is_empty() || req.members.len() != req.targets.len() {
            return Err(ChError::TypeMismatch("members and targets must match".into()));
        }
        if !(req.duration >= MIN_RAMP_S && req.duration.is_finite()) {
            return Err(ChError::OutOfRange(format!(
                "duration {} s below {MIN_RAMP_S} s",
                req.duration
            )));
        }
        let now = self.sched.now();
        let t0 = match req.t0 {
            Some(t) if !(t.is_finite() && t >= 0.0) => {
                return Err(ChError::OutOfRange(format!("start time {t}")))
            }
            Some(t) if secs_to_ns(t) < now => {
                return Err(ChError::OutOfRange(format!("start time {t} s is in the past")))
            }
            Some(t) => secs_to_ns(t),
            None => now + RAMP_LEAD_NS,
        };
        let mut members = vec![];
        for id in &req.members {
            let p = self
                .ps_index(id)
                .ok_or_else(|| ChError::NoSuchChannel(id.clone()))?;
            if members.contains(&p) {
                return Err(ChError::TypeMismatch(format!("{id} listed twice")));
            }
            members.push(p);
        }
        for (&p, &v) in members.iter().zip(&req.targets) {
            self.ready(p)
                .map_err(|e| ChError::MemberNotReady(format!("{}: {}", self.ps[p as usize].id, e.code())))?;
            check_range(&self.ps[p as usize], v)?;
        }
        let profiles = members
            .iter()
            .zip(&req.targets)
            .map(|(&p, &v)| Profile::linear(self.current_set(p), v, req.duration))
            .collect();
        Ok(self.launch(JobKind::Ramp, members, profiles, t0, op))
    }

    /// Starts standardization of the given supplies.
    pub fn start_cycle(&mut self, members: &[u32]) -> Result<JobId, (u32, ChError)> {
        for &p in members {
            self.ready(p).map_err(|e| {
                if members.len() == 1 {
                    (p, e)
                } else {
                    let id = &self.ps[p as usize].id;
                    (p, ChError::MemberNotReady(format!("{id}: {}", e.code())))
                }
            })?;
        }
        let profiles = members
            .iter()
            .map(|&p| {
                let ps = &self.ps[p as usize];
                Profile::standardize(self.current_set(p), ps.i_min(), ps.i_max(), ps.spec.ramp_rate)
            })
            .collect();
        let t0 = self.sched.now() + RAMP_LEAD_NS;
        Ok(self.launch(JobKind::Cycle, members.to_vec(), profiles, t0, None))
    }

    fn launch(&mut self, kind: JobKind, members: Vec<u32>, profiles: Vec<Profile>, t0: Nanos, op: Option<OpId>) -> JobId {
        let id = self.next_job;
        self.next_job += 1;
        let steps = profiles.iter().map(Profile::steps).max().unwrap_or(1);
        let handle = self
            .sched
            .schedule_at(t0, Event::RampStep(id, 0))
            .expect("start is not in the past");
        for (pos, &p) in members.iter().enumerate() {
            let ps = &mut self.ps[p as usize];
            ps.job = Some((id, pos));
            ps.ramp_fail = false;
            let label = match kind {
                JobKind::Ramp => "ramping",
                JobKind::Cycle => "cycling",
            };
            self.set_chan(p, Field::RampState, json!(label), Severity::None);
            if kind == JobKind::Cycle {
                self.set_chan(p, Field::CycleCmd, Value::Bool(true), Severity::None);
            }
        }
        self.jobs.insert(
            id,
            RampJob {
                id,
                kind,
                applied: vec![vec![]; members.len()],
                members,
                profiles,
                t0,
                steps,
                next_k: 0,
                outstanding: 0,
                error: None,
                finished: None,
                op,
                handle: Some(handle),
            },
        );
        self.set_soft(MACHINE_RAMP, json!({"job": id, "state": "running"}), Severity::None);
        id
    }

    pub(crate) fn on_ramp_step(&mut self, id: JobId, k: u32) {
        let Some(job) = self.jobs.get_mut(&id) else { return };
        job.handle = None;
        let writes: Vec<(usize, u32, f64)> = job
            .members
            .iter()
            .zip(&job.profiles)
            .enumerate()
            .filter(|(_, (_, prof))| k < prof.steps())
            .map(|(pos, (&p, prof))| (pos, p, prof.step_value(k)))
            .collect();
        job.next_k = k + 1;
        if k + 1 < job.steps {
            let at = job.t0 + (k + 1) as Nanos * RAMP_STEP_NS;
            job.handle = Some(self.sched.schedule_at(at, Event::RampStep(id, k + 1)).expect("future"));
        }
        for (pos, p, value) in writes {
            let frame = Frame::write(regs::I_SET, (value as f32).to_bits());
            match self.submit(p, frame, false, Origin::Ramp, Pending::Ramp { job: id, pos, value }) {
                Ok(_) => self.jobs.get_mut(&id).expect("live").outstanding += 1,
                Err(e) => {
                    self.abort_job(id, e.into());
                    return;
                }
            }
        }
        self.maybe_finish(id);
    }

    pub(crate) fn on_ramp_done(&mut self, p: u32, id: JobId, pos: usize, value: f64, c: &Completion) {
        let r = write_outcome(c).map(|_| ());
        let Some(job) = self.jobs.get_mut(&id) else { return };
        job.outstanding -= 1;
        debug_assert_eq!(job.members[pos], p);
        match r {
            Ok(()) => {
                let ps = &mut self.ps[p as usize];
                ps.written[Field::ISet.index()] = Some(((value as f32).to_bits(), num(value)));
                ps.hyst.update(value);
                let h = json!(ps.hyst.label());
                self.set_chan(p, Field::ISet, num(value), Severity::None);
                self.set_chan(p, Field::HystState, h, Severity::None);
                self.maybe_finish(id);
            }
            Err(e) => self.abort_job(id, e),
        }
    }

    fn maybe_finish(&mut self, id: JobId) {
        let Some(job) = self.jobs.get(&id) else { return };
        if job.next_k < job.steps || job.outstanding > 0 {
            return;
        }
        let mut job = self.jobs.remove(&id).expect("present");
        let now = self.sched.now();
        job.finished = Some(now);
        for &p in &job.members {
            let ps = &mut self.ps[p as usize];
            ps.job = None;
            ps.grace_until = Some(now + COMPARE_GRACE_NS);
            if job.kind == JobKind::Cycle {
                ps.hyst.standardized();
                let h = json!(ps.hyst.label());
                self.set_chan(p, Field::HystState, h, Severity::None);
                self.set_chan(p, Field::CycleCmd, Value::Bool(false), Severity::None);
            }
            self.set_chan(p, Field::RampState, json!("idle"), Severity::None);
        }
        self.set_soft(MACHINE_RAMP, json!({"job": id, "state": "done"}), Severity::None);
        let op = job.op;
        self.retire(job);
        if let Some(op) = op {
            self.op_part_done(op, Ok(()));
        }
    }

    /// Stops a job; its members keep the last applied set-point and their
    /// RAMP-STATE carries a minor alarm until the next program.
    pub(crate) fn abort_job(&mut self, id: JobId, err: ChError) {
        let Some(mut job) = self.jobs.remove(&id) else { return };
        if let Some(h) = job.handle.take() {
            self.sched.cancel(h);
        }
        let now = self.sched.now();
        self.diagnostics.push(format!("t={now}: job {id} aborted: {err}"));
        job.error = Some(err.clone());
        job.finished = Some(now);
        for &p in &job.members {
            let ps = &mut self.ps[p as usize];
            ps.job = None;
            ps.ramp_fail = true;
            if job.kind == JobKind::Cycle {
                self.set_chan(p, Field::CycleCmd, Value::Bool(false), Severity::None);
            }
            self.set_chan(p, Field::RampState, json!("idle"), Severity::Minor);
        }
        self.set_soft(MACHINE_RAMP, json!({"job": id, "state": "failed", "error": err.to_string()}), Severity::Minor);
        let op = job.op;
        self.retire(job);
        if let Some(op) = op {
            self.op_part_done(op, Err(err));
        }
    }

    pub(crate) fn abort_job_of(&mut self, p: u32) {
        if let Some((id, _)) = self.ps[p as usize].job {
            self.abort_job(id, ChError::Busy);
        }
    }

    fn retire(&mut self, job: RampJob) {
        if self.done_jobs.len() == DONE_JOBS_KEPT {
            self.done_jobs.pop_front();
        }
        self.done_jobs.push_back(job);
    }

    /// Applies a new optic setting: a synchronized ramp when any member
    /// moves by more than 1% of its rating, a group of writes otherwise.
    pub(crate) fn put_optic(&mut self, to: ReplyTo, q: OpticQ) -> Result<Started, ChError> {
        let m = self.machine.as_ref().ok_or(ChError::ReadOnly)?;
        let optic = m.optic.as_ref().ok_or(ChError::ReadOnly)?;
        if ![q.e, q.dnu_x, q.dnu_y, q.dxi_x, q.dxi_y].iter().all(|v| v.is_finite()) || !(q.e > 0.0) {
            return Err(ChError::InvalidValue);
        }
        let values = optic.currents(&q);
        let targets = m.optic_member_currents(&q).map_err(|e| ChError::Config(e.to_string()))?;
        let mut members = vec![];
        let mut currents = vec![];
        let mut big = false;
        for (id, v) in &targets {
            let p = self.index[id];
            check_range(&self.ps[p as usize], *v)?;
            let ps = &self.ps[p as usize];
            if (v - self.current_set(p)).abs() > 0.01 * ps.i_max() {
                big = true;
            }
            members.push(p);
            currents.push(*v);
        }
        let then = Then::Optic { q, values };
        if !big {
            return self.put_group(to, &members, &currents, then);
        }
        let op = self.new_op(to, 1, then);
        let req = RampRequest {
            members: targets.iter().map(|(id, _)| id.clone()).collect(),
            targets: currents,
            duration: self.optic_ramp_s,
            t0: None,
        };
        match self.start_ramp_op(&req, Some(op)) {
            Ok(_) => Ok(Started::Pending),
            Err(e) => {
                self.ops.remove(&op);
                Err(e)
            }
        }
    }

    pub(crate) fn commit_optic(&mut self, q: OpticQ, values: &[f64]) {
        self.optic_q = Some(q);
        for (fi, v) in values.iter().enumerate() {
            self.families[fi].set_value = *v;
            self.refresh_family_field(fi, Field::ISet);
        }
        self.set_soft(OPTIC_Q, optic_value(&q), Severity::None);
    }
}
