//! Point-to-point controller link, master (IP module) side.
//!
//! The link is full duplex: requests travel master to slave on the forward
//! wire, responses come back on the return wire. The master keeps at most one
//! normal transaction outstanding and serves normal requests in FIFO order.
//! A single priority slot bypasses the queue; with `preempt_in_flight` the
//! master aborts a normal request frame that is still being shifted out,
//! sends the priority frame, and retransmits the aborted one afterwards.

pub mod frame;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{EventHandle, Nanos, NS_PER_S, NS_PER_US};
use frame::{decode_frame, encode_frame, Frame, FrameError, Opcode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkParams {
    /// Line rate in bit/s.
    pub bitrate: u64,
    /// Slave service time per request.
    pub t_proc_ns: Nanos,
    /// Abort a normal request frame on the wire for a priority request.
    pub preempt_in_flight: bool,
    /// Timeout as a multiple of the expected round trip.
    pub timeout_factor: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            bitrate: 5_000_000,
            t_proc_ns: 4 * NS_PER_US,
            preempt_in_flight: true,
            timeout_factor: 3,
        }
    }
}

impl LinkParams {
    pub fn wire_ns(&self, bits: u64) -> Nanos {
        (bits * NS_PER_S).div_ceil(self.bitrate)
    }

    /// Idle-link round trip of a request/response pair.
    pub fn round_trip_ns(&self, req_bits: u64, resp_bits: u64) -> Nanos {
        self.wire_ns(req_bits) + self.t_proc_ns + self.wire_ns(resp_bits)
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum LinkError {
    #[error("link down")]
    LinkDown,
    #[error("response timeout")]
    Timeout,
    #[error("priority slot busy")]
    PriorityBusy,
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Master to controller.
    Tx,
    /// Controller to master.
    Rx,
}

/// Who asked for a transaction; used for accounting only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Client,
    Poll,
    Ramp,
    Feedback,
    Download,
    Test,
}

pub type TxnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkEvent {
    FwdDone,
    ProcDone,
    RetDone,
    Timeout(TxnId),
}

/// Scheduling services the link needs from its host.
pub trait LinkClock {
    fn now(&self) -> Nanos;
    fn schedule(&mut self, at: Nanos, ev: LinkEvent) -> EventHandle;
    fn cancel(&mut self, h: EventHandle);
}

#[derive(Debug, Clone)]
struct Txn {
    id: TxnId,
    request: Frame,
    prio: bool,
    origin: Origin,
    submitted: Nanos,
    timeout: Option<EventHandle>,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub id: TxnId,
    pub origin: Origin,
    pub prio: bool,
    pub request: Frame,
    pub result: Result<Frame, LinkError>,
    pub submitted: Nanos,
    pub completed: Nanos,
}

impl Completion {
    pub fn latency(&self) -> Nanos {
        self.completed - self.submitted
    }
}

/// Master-side flags and counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LinkState {
    pub tx_broken: bool,
    pub rx_broken: bool,
    pub crc_err_count: u64,
    pub nak_count: u64,
    pub submitted: u64,
    pub completed: u64,
    pub failed: u64,
    pub aborted_frames: u64,
}

struct OnWire {
    id: TxnId,
    prio: bool,
    bytes: Vec<u8>,
    end: Nanos,
    event: EventHandle,
}

pub struct Link {
    pub params: LinkParams,
    state: LinkState,
    phys_tx_broken: bool,
    phys_rx_broken: bool,
    corrupt_next: bool,
    next_id: TxnId,
    normal_queue: VecDeque<Txn>,
    prio_slot: Option<Txn>,
    /// Transactions that have left the queues and await a response.
    active: Vec<Txn>,
    fwd: Option<OnWire>,
    slave_queue: VecDeque<(TxnId, Vec<u8>)>,
    slave_busy: Option<(TxnId, Frame)>,
    ret_queue: VecDeque<(TxnId, bool, Vec<u8>)>,
    ret: Option<OnWire>,
    done: Vec<Completion>,
}

impl Link {
    pub fn new(params: LinkParams) -> Self {
        Self {
            params,
            state: LinkState::default(),
            phys_tx_broken: false,
            phys_rx_broken: false,
            corrupt_next: false,
            next_id: 0,
            normal_queue: VecDeque::new(),
            prio_slot: None,
            active: vec![],
            fwd: None,
            slave_queue: VecDeque::new(),
            slave_busy: None,
            ret_queue: VecDeque::new(),
            ret: None,
            done: vec![],
        }
    }

    pub fn state(&self) -> &LinkState {
        &self.state
    }

    pub fn physically_broken(&self) -> (bool, bool) {
        (self.phys_tx_broken, self.phys_rx_broken)
    }

    /// Transactions accepted but not yet completed.
    pub fn pending(&self) -> usize {
        (self.state.submitted - self.state.completed - self.state.failed) as usize
    }

    pub fn queued_normal(&self) -> usize {
        self.normal_queue.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending() == 0
    }

    /// Flips one bit of the next frame put on either wire.
    pub fn corrupt_next_frame(&mut self) {
        self.corrupt_next = true;
    }

    pub fn take_completions(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.done)
    }

    fn normal_outstanding(&self) -> bool {
        self.active.iter().any(|t| !t.prio)
    }

    fn prio_outstanding(&self) -> bool {
        self.active.iter().any(|t| t.prio)
    }

    pub fn submit(
        &mut self,
        frame: Frame,
        prio: bool,
        origin: Origin,
        clock: &mut dyn LinkClock,
    ) -> Result<TxnId, LinkError> {
        if self.state.tx_broken || self.state.rx_broken {
            return Err(LinkError::LinkDown);
        }
        if prio && (self.prio_slot.is_some() || self.prio_outstanding()) {
            return Err(LinkError::PriorityBusy);
        }
        encode_frame(&frame)?;
        let id = self.next_id;
        self.next_id += 1;
        self.state.submitted += 1;
        let txn = Txn {
            id,
            request: frame.with_prio(prio),
            prio,
            origin,
            submitted: clock.now(),
            timeout: None,
        };
        if prio {
            self.prio_slot = Some(txn);
        } else {
            self.normal_queue.push_back(txn);
        }
        self.pump(clock);
        Ok(id)
    }

    fn pump(&mut self, clock: &mut dyn LinkClock) {
        if let Some(on) = &self.fwd {
            let preempt = self.params.preempt_in_flight
                && self.prio_slot.is_some()
                && !on.prio
                && on.end > clock.now();
            if !preempt {
                return;
            }
            let on = self.fwd.take().expect("checked");
            clock.cancel(on.event);
            let pos = self.active.iter().position(|t| t.id == on.id).expect("active");
            let mut txn = self.active.remove(pos);
            if let Some(h) = txn.timeout.take() {
                clock.cancel(h);
            }
            self.state.aborted_frames += 1;
            self.normal_queue.push_front(txn);
        }
        let next = if let Some(t) = self.prio_slot.take() {
            t
        } else if !self.normal_outstanding() {
            match self.normal_queue.pop_front() {
                Some(t) => t,
                None => return,
            }
        } else {
            return;
        };
        self.start_fwd(next, clock);
    }

    fn start_fwd(&mut self, mut txn: Txn, clock: &mut dyn LinkClock) {
        let now = clock.now();
        let mut bytes = encode_frame(&txn.request).expect("validated on submit");
        if std::mem::take(&mut self.corrupt_next) {
            bytes[0] ^= 0x01;
        }
        let req_bits = bytes.len() as u64 * 8;
        let end = now + self.params.wire_ns(req_bits);
        let expected = self
            .params
            .round_trip_ns(req_bits, expected_response_bits(&txn.request));
        txn.timeout = Some(clock.schedule(
            now + self.params.timeout_factor * expected,
            LinkEvent::Timeout(txn.id),
        ));
        let event = clock.schedule(end, LinkEvent::FwdDone);
        self.fwd = Some(OnWire {
            id: txn.id,
            prio: txn.prio,
            bytes,
            end,
            event,
        });
        self.active.push(txn);
    }

    /// Request frame fully received by the controller.
    pub fn on_fwd_done(&mut self, clock: &mut dyn LinkClock) {
        let Some(on) = self.fwd.take() else { return };
        if !self.phys_tx_broken {
            self.slave_queue.push_back((on.id, on.bytes));
            self.start_slave(clock);
        }
        self.pump(clock);
    }

    fn start_slave(&mut self, clock: &mut dyn LinkClock) {
        while self.slave_busy.is_none() {
            let Some((id, bytes)) = self.slave_queue.pop_front() else {
                return;
            };
            match decode_frame(&bytes) {
                Ok(req) => {
                    clock.schedule(clock.now() + self.params.t_proc_ns, LinkEvent::ProcDone);
                    self.slave_busy = Some((id, req));
                }
                // The controller drops frames it cannot decode; the master
                // times out.
                Err(_) => self.state.crc_err_count += 1,
            }
        }
    }

    /// The controller finished its service time; the host must execute the
    /// returned request and hand the response to [`Link::respond`].
    /// The origin is `None` when the master already gave up on the
    /// transaction.
    pub fn on_proc_done(&mut self) -> Option<(Frame, Option<Origin>)> {
        let (id, req) = self.slave_busy.as_ref()?;
        let origin = self.active.iter().find(|t| t.id == *id).map(|t| t.origin);
        Some((req.clone(), origin))
    }

    pub fn respond(&mut self, resp: Frame, clock: &mut dyn LinkClock) {
        let Some((id, _)) = self.slave_busy.take() else {
            return;
        };
        let mut bytes = encode_frame(&resp).expect("controller builds valid frames");
        if std::mem::take(&mut self.corrupt_next) {
            bytes[0] ^= 0x01;
        }
        if resp.prio {
            self.ret_queue.push_front((id, true, bytes));
            // A priority response also preempts a normal one on the wire,
            // which is resent from the start afterwards.
            let preempt = self.params.preempt_in_flight
                && self.ret.as_ref().is_some_and(|o| !o.prio && o.end > clock.now());
            if preempt {
                let on = self.ret.take().expect("checked");
                clock.cancel(on.event);
                self.state.aborted_frames += 1;
                // The resent response gets a fresh timeout, as a preempted
                // request does.
                if let Some(t) = self.active.iter_mut().find(|t| t.id == on.id) {
                    if let Some(h) = t.timeout.take() {
                        clock.cancel(h);
                    }
                    let req_bits = frame::bit_len_for(t.request.count());
                    let rt = self.params.round_trip_ns(req_bits, on.bytes.len() as u64 * 8);
                    t.timeout = Some(clock.schedule(
                        clock.now() + self.params.timeout_factor * rt,
                        LinkEvent::Timeout(t.id),
                    ));
                }
                self.ret_queue.insert(1, (on.id, false, on.bytes));
            }
        } else {
            self.ret_queue.push_back((id, false, bytes));
        }
        self.start_ret(clock);
        self.start_slave(clock);
    }

    fn start_ret(&mut self, clock: &mut dyn LinkClock) {
        if self.ret.is_some() {
            return;
        }
        if let Some((id, prio, bytes)) = self.ret_queue.pop_front() {
            let end = clock.now() + self.params.wire_ns(bytes.len() as u64 * 8);
            let event = clock.schedule(end, LinkEvent::RetDone);
            self.ret = Some(OnWire {
                id,
                prio,
                bytes,
                end,
                event,
            });
        }
    }

    /// Response frame fully received by the master.
    pub fn on_ret_done(&mut self, clock: &mut dyn LinkClock) {
        if let Some(OnWire { id, bytes, .. }) = self.ret.take() {
            if !self.phys_rx_broken {
                match decode_frame(&bytes) {
                    Ok(resp) => {
                        if resp.opcode == Opcode::Nak {
                            self.state.nak_count += 1;
                        }
                        self.finish(id, Ok(resp), clock);
                    }
                    Err(_) => self.state.crc_err_count += 1,
                }
            }
        }
        self.start_ret(clock);
        self.pump(clock);
    }

    pub fn on_timeout(&mut self, id: TxnId, clock: &mut dyn LinkClock) {
        let Some(t) = self.active.iter_mut().find(|t| t.id == id) else {
            return;
        };
        t.timeout = None;
        if self.fwd.as_ref().is_some_and(|o| o.id == id) {
            let on = self.fwd.take().expect("checked");
            clock.cancel(on.event);
        }
        self.slave_queue.retain(|(i, _)| *i != id);
        self.ret_queue.retain(|(i, _, _)| *i != id);
        self.state.rx_broken = true;
        self.finish(id, Err(LinkError::Timeout), clock);
        self.pump(clock);
    }

    /// Completes an active transaction. Responses arriving for transactions
    /// that already failed are ignored.
    fn finish(&mut self, id: TxnId, result: Result<Frame, LinkError>, clock: &mut dyn LinkClock) {
        let Some(pos) = self.active.iter().position(|t| t.id == id) else {
            return;
        };
        let txn = self.active.remove(pos);
        self.complete(txn, result, clock);
    }

    fn complete(&mut self, mut txn: Txn, result: Result<Frame, LinkError>, clock: &mut dyn LinkClock) {
        if let Some(h) = txn.timeout.take() {
            clock.cancel(h);
        }
        if result.is_ok() {
            self.state.completed += 1;
        } else {
            self.state.failed += 1;
        }
        self.done.push(Completion {
            id: txn.id,
            origin: txn.origin,
            prio: txn.prio,
            request: txn.request,
            result,
            submitted: txn.submitted,
            completed: clock.now(),
        });
    }

    /// Physical break or repair. The master's flags follow at the next
    /// controller tick via [`Link::detect_breaks`].
    pub fn set_link_broken(&mut self, dir: Direction, broken: bool) {
        match dir {
            Direction::Tx => self.phys_tx_broken = broken,
            Direction::Rx => self.phys_rx_broken = broken,
        }
    }

    /// Updates the master's flags from the physical state. Returns true when
    /// a flag changed. Newly broken links fail every pending transaction.
    pub fn detect_breaks(&mut self, clock: &mut dyn LinkClock) -> bool {
        let changed = self.state.tx_broken != self.phys_tx_broken
            || self.state.rx_broken != self.phys_rx_broken;
        if !changed {
            return false;
        }
        self.state.tx_broken = self.phys_tx_broken;
        self.state.rx_broken = self.phys_rx_broken;
        if self.state.tx_broken || self.state.rx_broken {
            self.fail_all(clock);
        }
        true
    }

    fn fail_all(&mut self, clock: &mut dyn LinkClock) {
        if let Some(on) = self.fwd.take() {
            clock.cancel(on.event);
        }
        self.slave_queue.clear();
        self.ret_queue.clear();
        let mut victims: Vec<Txn> = std::mem::take(&mut self.active);
        victims.extend(self.prio_slot.take());
        victims.extend(self.normal_queue.drain(..));
        victims.sort_by_key(|t| t.id);
        for t in victims {
            self.complete(t, Err(LinkError::LinkDown), clock);
        }
    }
}

/// Bits of the response a request should produce when it succeeds.
pub fn expected_response_bits(req: &Frame) -> u64 {
    match req.opcode {
        Opcode::Read => frame::bit_len_for(1),
        Opcode::BlockRead => frame::bit_len_for(req.payload.first().copied().unwrap_or(1) as usize),
        _ => frame::bit_len_for(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Scheduler;

    /// Minimal host: a scheduler and a register array answering every
    /// request.
    struct Host {
        sched: Scheduler<LinkEvent>,
        link: Link,
        reg: [u32; 256],
    }

    struct Clock<'a>(&'a mut Scheduler<LinkEvent>);

    impl LinkClock for Clock<'_> {
        fn now(&self) -> Nanos {
            self.0.now()
        }
        fn schedule(&mut self, at: Nanos, ev: LinkEvent) -> EventHandle {
            self.0.schedule_at(at, ev).unwrap()
        }
        fn cancel(&mut self, h: EventHandle) {
            self.0.cancel(h);
        }
    }

    impl Host {
        fn new(params: LinkParams) -> Self {
            Self {
                sched: Scheduler::new(),
                link: Link::new(params),
                reg: [0; 256],
            }
        }

        fn submit(&mut self, f: Frame, prio: bool) -> Result<TxnId, LinkError> {
            self.link
                .submit(f, prio, Origin::Test, &mut Clock(&mut self.sched))
        }

        fn run_until(&mut self, t: Nanos) -> Vec<Completion> {
            while let Some((_, ev)) = self.sched.pop_until(t) {
                let mut clk = Clock(&mut self.sched);
                match ev {
                    LinkEvent::FwdDone => self.link.on_fwd_done(&mut clk),
                    LinkEvent::ProcDone => {
                        if let Some((req, _)) = self.link.on_proc_done() {
                            let resp = match req.opcode {
                                Opcode::Write => {
                                    self.reg[req.addr as usize] = req.payload[0];
                                    Frame::ack(req.addr, vec![])
                                }
                                Opcode::Read => Frame::ack(req.addr, vec![self.reg[req.addr as usize]]),
                                Opcode::BlockRead => Frame::ack(req.addr, vec![0; req.payload[0] as usize]),
                                _ => Frame::nak(req.addr, frame::NakReason::BadRequest),
                            };
                            self.link.respond(resp.with_prio(req.prio), &mut clk);
                        }
                    }
                    LinkEvent::RetDone => self.link.on_ret_done(&mut clk),
                    LinkEvent::Timeout(id) => self.link.on_timeout(id, &mut clk),
                }
            }
            self.sched.settle_at(t);
            self.link.take_completions()
        }
    }

    #[test]
    fn single_priority_write_round_trip() {
        let mut h = Host::new(LinkParams::default());
        h.submit(Frame::write(1, 42), true).unwrap();
        let done = h.run_until(100_000);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].latency(), 24_800);
        assert_eq!(h.reg[1], 42);
    }

    #[test]
    fn read_round_trip() {
        let mut h = Host::new(LinkParams::default());
        h.reg[2] = 7;
        h.submit(Frame::read(2), false).unwrap();
        let done = h.run_until(100_000);
        // 6.4 us request + 4 us + 14.4 us response.
        assert_eq!(done[0].latency(), 24_800);
        assert_eq!(done[0].result.as_ref().unwrap().payload, vec![7]);
    }

    #[test]
    fn normal_fifo_order_and_throughput() {
        let mut h = Host::new(LinkParams::default());
        for k in 0..10_000u32 {
            h.submit(Frame::write(1, k), false).unwrap();
        }
        let done = h.run_until(NS_PER_S);
        assert_eq!(done.len(), 10_000);
        let ids: Vec<_> = done.iter().map(|c| c.id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(done.last().unwrap().completed, 10_000 * 24_800);
        assert_eq!(h.reg[1], 9_999);
    }

    #[test]
    fn priority_preempts_in_flight_normal_frame() {
        let mut h = Host::new(LinkParams::default());
        for k in 0..100 {
            h.submit(Frame::write(1, k), false).unwrap();
        }
        h.run_until(3_000);
        h.submit(Frame::write(9, 1), true).unwrap();
        let done = h.run_until(NS_PER_S);
        let p = done.iter().find(|c| c.prio).unwrap();
        assert_eq!(p.latency(), 24_800);
        assert_eq!(h.link.state().aborted_frames, 1);
        assert_eq!(done.len(), 101);
        let normal: Vec<_> = done.iter().filter(|c| !c.prio).map(|c| c.request.payload[0]).collect();
        assert_eq!(normal, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn priority_response_preempts_block_response() {
        let mut h = Host::new(LinkParams::default());
        h.submit(Frame::block_read(0, 64), false).unwrap();
        // Request 6.4 us + 4 us service; the 64-word response then holds the
        // return wire for 417.6 us.
        h.run_until(20_000);
        h.submit(Frame::write(9, 1), true).unwrap();
        let done = h.run_until(NS_PER_S);
        let p = done.iter().find(|c| c.prio).unwrap();
        assert_eq!(p.latency(), 24_800);
        let b = done.iter().find(|c| !c.prio).unwrap();
        assert_eq!(b.result.as_ref().unwrap().payload.len(), 64);
        assert_eq!(b.completed, 20_000 + 24_800 + 417_600);
        assert_eq!(h.link.state().aborted_frames, 1);
    }

    #[test]
    fn without_preemption_waits_for_frame_on_wire() {
        let params = LinkParams {
            preempt_in_flight: false,
            ..LinkParams::default()
        };
        let mut h = Host::new(params);
        for k in 0..100 {
            h.submit(Frame::write(1, k), false).unwrap();
        }
        h.run_until(1);
        h.submit(Frame::write(9, 1), true).unwrap();
        let done = h.run_until(NS_PER_S);
        let p = done.iter().find(|c| c.prio).unwrap();
        assert!(p.latency() > 30_000);
        assert!(p.latency() <= 30_000 + 14_400);
    }

    #[test]
    fn priority_slot_holds_one() {
        let mut h = Host::new(LinkParams::default());
        h.submit(Frame::write(1, 1), true).unwrap();
        assert_eq!(h.submit(Frame::write(1, 2), true), Err(LinkError::PriorityBusy));
    }

    #[test]
    fn tx_break_fails_pending_and_rejects_new() {
        let mut h = Host::new(LinkParams::default());
        for k in 0..5 {
            h.submit(Frame::write(1, k), false).unwrap();
        }
        h.run_until(1_000);
        h.link.set_link_broken(Direction::Tx, true);
        let mut clk = Clock(&mut h.sched);
        assert!(h.link.detect_breaks(&mut clk));
        let done = h.run_until(NS_PER_S);
        assert_eq!(done.len(), 5);
        assert!(done.iter().all(|c| c.result == Err(LinkError::LinkDown)));
        assert_eq!(h.submit(Frame::write(1, 1), false), Err(LinkError::LinkDown));
        h.link.set_link_broken(Direction::Tx, false);
        let mut clk = Clock(&mut h.sched);
        assert!(h.link.detect_breaks(&mut clk));
        assert!(!h.link.state().tx_broken);
        h.submit(Frame::write(1, 1), false).unwrap();
    }

    #[test]
    fn undetected_rx_break_times_out() {
        let mut h = Host::new(LinkParams::default());
        h.link.set_link_broken(Direction::Rx, true);
        h.submit(Frame::write(3, 5), false).unwrap();
        let done = h.run_until(NS_PER_S);
        assert_eq!(done[0].result, Err(LinkError::Timeout));
        assert_eq!(done[0].latency(), 3 * 24_800);
        assert!(h.link.state().rx_broken);
        // The write itself reached the controller.
        assert_eq!(h.reg[3], 5);
    }

    #[test]
    fn corrupted_request_counts_crc_error_and_times_out() {
        let mut h = Host::new(LinkParams::default());
        h.link.corrupt_next_frame();
        h.submit(Frame::write(3, 5), false).unwrap();
        let done = h.run_until(NS_PER_S);
        assert_eq!(done[0].result, Err(LinkError::Timeout));
        assert_eq!(h.link.state().crc_err_count, 1);
        assert_eq!(h.reg[3], 0);
    }

    #[test]
    fn count_overflow_rejected_on_submit() {
        let mut h = Host::new(LinkParams::default());
        let err = h.submit(Frame::block_write(0, vec![0; 300]), false).unwrap_err();
        assert_eq!(err, LinkError::Frame(FrameError::CountOverflow(300)));
    }

    #[test]
    fn accounting_reconciles() {
        let mut h = Host::new(LinkParams::default());
        for k in 0..50 {
            h.submit(Frame::write(1, k), false).unwrap();
            if k % 7 == 0 {
                let _ = h.submit(Frame::write(2, k), true);
            }
            h.run_until(h.sched.now() + 5_000);
        }
        h.run_until(NS_PER_S);
        let st = h.link.state();
        assert_eq!(st.submitted, st.completed + st.failed);
        assert!(h.link.is_idle());
    }
}
