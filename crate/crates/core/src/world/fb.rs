//! Orbit feedback: a 1 kHz loop writing corrector set-points over the
//! priority path.

use serde_json::{json, Value};

use super::chan::{FB_ENABLE, FB_ORBIT_RMS, FB_STATUS};
use super::*;
use crate::controller::regs;
use crate::feedback::{correction, mat_vec, rms, FeedbackSpec, Mat, OrbitInput};
use crate::sim::ns_to_secs;

/// Orbit samples kept for inspection.
const HISTORY_CAP: usize = 100_000;

pub struct FeedbackRt {
    pub spec: FeedbackSpec,
    /// Pseudo-inverse of the response matrix.
    pub p: Mat,
    pub correctors: Vec<u32>,
    /// Set-points last commanded, one per corrector.
    pub i_corr: Vec<f64>,
    pub enabled: bool,
    pub paused: bool,
    pub period_ns: Nanos,
    pub step_times: Vec<Nanos>,
    /// Orbit seen by each step, mm.
    pub orbit: Vec<Vec<f64>>,
    pub writes: u64,
    pub write_failures: u64,
    pub busy_skips: u64,
}

impl FeedbackRt {
    pub fn new(spec: FeedbackSpec, p: Mat, correctors: Vec<u32>, i_corr: Vec<f64>) -> Self {
        Self {
            enabled: spec.enabled,
            period_ns: secs_to_ns(spec.period_ms * 1e-3),
            spec,
            p,
            correctors,
            i_corr,
            paused: false,
            step_times: vec![],
            orbit: vec![],
            writes: 0,
            write_failures: 0,
            busy_skips: 0,
        }
    }
}

impl World {
    pub fn set_feedback_enabled(&mut self, en: bool) {
        let Some(fb) = self.feedback.as_mut() else { return };
        fb.enabled = en;
        fb.paused = false;
        self.set_soft(FB_ENABLE, Value::Bool(en), Severity::None);
        self.set_soft(FB_STATUS, json!(if en { "running" } else { "disabled" }), Severity::None);
    }

    pub(crate) fn on_feedback_step(&mut self) {
        let now = self.sched.now();
        let Some(fb) = self.feedback.as_ref() else { return };
        self.sched
            .schedule_at(now + fb.period_ns, Event::FeedbackStep)
            .expect("future");
        if !fb.enabled {
            return;
        }
        let down = fb
            .correctors
            .iter()
            .any(|&c| self.ps[c as usize].flags != (false, false));
        if down {
            if !fb.paused {
                self.feedback.as_mut().expect("present").paused = true;
                self.set_soft(FB_STATUS, json!("paused"), Severity::Major);
                self.diagnostics
                    .push(format!("t={now}: feedback paused, corrector link down"));
            }
            return;
        }
        if fb.paused {
            self.feedback.as_mut().expect("present").paused = false;
            self.set_soft(FB_STATUS, json!("running"), Severity::None);
        }

        let fb = self.feedback.as_ref().expect("present");
        let currents: Vec<f64> = match fb.spec.input {
            OrbitInput::SetPoint => fb.i_corr.clone(),
            OrbitInput::Plant => fb
                .correctors
                .iter()
                .map(|&c| self.ps[c as usize].magnet.state.current)
                .collect(),
        };
        let mut y = mat_vec(&fb.spec.r_om, &currents);
        let sigma = fb.spec.noise_sigma;
        for (v, d) in y.iter_mut().zip(fb.spec.disturbance(ns_to_secs(now))) {
            *v += d + self.rng.gaussian(sigma);
        }
        let delta = correction(&fb.p, &y, fb.spec.alpha);
        let writes: Vec<(usize, u32, f64)> = fb
            .correctors
            .iter()
            .enumerate()
            .filter_map(|(j, &c)| {
                let ps = &self.ps[c as usize];
                if delta[j].abs() < ps.lsb() {
                    return None;
                }
                let v = (fb.i_corr[j] + delta[j]).clamp(ps.i_min(), ps.i_max());
                Some((j, c, v))
            })
            .collect();
        let level = rms(&y);
        {
            let fb = self.feedback.as_mut().expect("present");
            fb.step_times.push(now);
            if fb.orbit.len() < HISTORY_CAP {
                fb.orbit.push(y);
            }
        }
        for (j, c, v) in writes {
            let frame = Frame::write(regs::I_SET, (v as f32).to_bits());
            let r = self.submit(c, frame, true, Origin::Feedback, Pending::Feedback);
            let fb = self.feedback.as_mut().expect("present");
            match r {
                Ok(_) => {
                    fb.i_corr[j] = v;
                    fb.writes += 1;
                }
                Err(LinkError::PriorityBusy) => fb.busy_skips += 1,
                Err(_) => fb.write_failures += 1,
            }
        }
        self.set_soft(FB_ORBIT_RMS, crate::channel::num(level), Severity::None);
    }

    pub(crate) fn on_feedback_done(&mut self, p: u32, c: &Completion) {
        if write_outcome(c).is_err() {
            if let Some(fb) = self.feedback.as_mut() {
                fb.write_failures += 1;
            }
        } else {
            self.ps[p as usize].grace_until = Some(self.sched.now() + COMPARE_GRACE_NS);
        }
    }
}
