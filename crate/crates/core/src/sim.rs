//! Deterministic virtual clock and event scheduler.
//!
//! Time is an integer count of nanoseconds. Events due at the same instant
//! fire in the order they were scheduled. All randomness used by the
//! simulation is drawn from the single [`SimRng`] owned by the world.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Virtual time in nanoseconds.
pub type Nanos = u64;

pub const NS_PER_US: Nanos = 1_000;
pub const NS_PER_MS: Nanos = 1_000_000;
pub const NS_PER_S: Nanos = 1_000_000_000;

/// Converts seconds to the nearest whole nanosecond.
pub fn secs_to_ns(s: f64) -> Nanos {
    (s * NS_PER_S as f64).round() as Nanos
}

pub fn ns_to_secs(t: Nanos) -> f64 {
    t as f64 / NS_PER_S as f64
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("event due at {due} ns is in the past (now {now} ns)")]
    InPast { due: Nanos, now: Nanos },
}

/// Handle returned by [`Scheduler::schedule_at`]; can be used to cancel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchedulerStats {
    pub scheduled: u64,
    pub fired: u64,
    pub cancelled: u64,
    pub pending: u64,
}

struct Entry<E> {
    due: Nanos,
    seq: u64,
    action: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

/// Priority queue of timed events plus the virtual clock they advance.
pub struct Scheduler<E> {
    now: Nanos,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Entry<E>>>,
    cancelled: HashSet<u64>,
    stats: SchedulerStats,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            stats: SchedulerStats::default(),
        }
    }

    #[inline]
    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn stats(&self) -> SchedulerStats {
        SchedulerStats {
            pending: self.heap.len() as u64 - self.cancelled.len() as u64,
            ..self.stats
        }
    }

    pub fn schedule_at(&mut self, due: Nanos, action: E) -> Result<EventHandle, ScheduleError> {
        if due < self.now {
            return Err(ScheduleError::InPast { due, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.stats.scheduled += 1;
        self.heap.push(Reverse(Entry { due, seq, action }));
        Ok(EventHandle(seq))
    }

    /// Schedules `delay` nanoseconds from now. Never fails.
    pub fn schedule_in(&mut self, delay: Nanos, action: E) -> EventHandle {
        let due = self.now + delay;
        self.schedule_at(due, action).expect("future event")
    }

    /// Cancels a pending event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq || self.cancelled.contains(&handle.0) {
            return false;
        }
        if !self.heap.iter().any(|Reverse(e)| e.seq == handle.0) {
            return false;
        }
        self.cancelled.insert(handle.0);
        self.stats.cancelled += 1;
        true
    }

    /// Due time of the earliest live event.
    pub fn peek_due(&mut self) -> Option<Nanos> {
        self.skip_cancelled();
        self.heap.peek().map(|Reverse(e)| e.due)
    }

    fn skip_cancelled(&mut self) {
        while let Some(Reverse(top)) = self.heap.peek() {
            if self.cancelled.remove(&top.seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    /// Pops the next event due at or before `t_end`, advancing the clock to
    /// its due time.
    pub fn pop_until(&mut self, t_end: Nanos) -> Option<(Nanos, E)> {
        self.skip_cancelled();
        match self.heap.peek() {
            Some(Reverse(top)) if top.due <= t_end => {
                let Reverse(entry) = self.heap.pop().expect("peeked");
                self.now = entry.due;
                self.stats.fired += 1;
                Some((entry.due, entry.action))
            }
            _ => None,
        }
    }

    /// Moves the clock forward to `t` without firing anything. Callers must
    /// have drained every event due before `t`.
    pub fn settle_at(&mut self, t: Nanos) {
        debug_assert!(self.peek_due().map_or(true, |d| d >= t));
        if t > self.now {
            self.now = t;
        }
    }

    /// Fires every event due at or before `t_end` in (due, seq) order and
    /// leaves the clock at `t_end`.
    pub fn advance_until<F>(&mut self, t_end: Nanos, mut handler: F) -> Result<u64, ScheduleError>
    where
        F: FnMut(&mut Self, Nanos, E),
    {
        if t_end < self.now {
            return Err(ScheduleError::InPast { due: t_end, now: self.now });
        }
        let mut fired = 0;
        while let Some((due, action)) = self.pop_until(t_end) {
            handler(self, due, action);
            fired += 1;
        }
        self.now = t_end;
        Ok(fired)
    }
}

/// The single seeded random source of a simulation.
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn seed_from(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Zero-mean Gaussian sample. Returns exactly 0 when `sigma` is 0 and
    /// does not consume randomness in that case.
    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(&mut self.inner);
        sigma * z
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.random_range(0..n)
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.random()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_at_now_fires_before_later() {
        let mut s = Scheduler::new();
        s.schedule_at(5, "later").unwrap();
        s.schedule_at(0, "now").unwrap();
        let mut order = vec![];
        s.advance_until(10, |_, _, a| order.push(a)).unwrap();
        assert_eq!(order, ["now", "later"]);
    }

    #[test]
    fn equal_due_is_fifo() {
        let mut s = Scheduler::new();
        s.schedule_at(100, 'a').unwrap();
        s.schedule_at(100, 'b').unwrap();
        let mut order = vec![];
        s.advance_until(100, |_, _, a| order.push(a)).unwrap();
        assert_eq!(order, ['a', 'b']);
    }

    #[test]
    fn past_is_rejected() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.advance_until(10, |_, _, _| {}).unwrap();
        assert_eq!(
            s.schedule_at(9, ()),
            Err(ScheduleError::InPast { due: 9, now: 10 })
        );
    }

    #[test]
    fn empty_advance() {
        let mut s: Scheduler<()> = Scheduler::new();
        assert_eq!(s.advance_until(1_000_000, |_, _, _| {}).unwrap(), 0);
        assert_eq!(s.now(), 1_000_000);
    }

    #[test]
    fn periodic_tick_fires_fifty_times_per_ms() {
        let mut s = Scheduler::new();
        s.schedule_at(20_000, ()).unwrap();
        let fired = s
            .advance_until(NS_PER_MS, |s, t, ()| {
                s.schedule_at(t + 20_000, ()).unwrap();
            })
            .unwrap();
        assert_eq!(fired, 50);
    }

    #[test]
    fn cancel_and_accounting() {
        let mut s = Scheduler::new();
        let a = s.schedule_at(10, 1).unwrap();
        s.schedule_at(20, 2).unwrap();
        s.schedule_at(30, 3).unwrap();
        assert!(s.cancel(a));
        assert!(!s.cancel(a));
        let mut seen = vec![];
        s.advance_until(20, |_, _, x| seen.push(x)).unwrap();
        assert_eq!(seen, [2]);
        let st = s.stats();
        assert_eq!(st.scheduled, st.fired + st.cancelled + st.pending);
        assert_eq!(st.pending, 1);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = SimRng::seed_from(7);
        let mut b = SimRng::seed_from(7);
        for _ in 0..100 {
            assert_eq!(a.gaussian(1.0).to_bits(), b.gaussian(1.0).to_bits());
        }
        assert_eq!(a.gaussian(0.0), 0.0);
    }
}
