//! The out-of-order pipeline for one core: in-order frontend, rename onto
//! physical register files, issue window with oldest-first select, reorder
//! buffer with in-order retirement, load/store queues with conservative
//! disambiguation, functional-unit timing and mispredict recovery.
//!
//! # Cycle anatomy
//!
//! Each [`Core::step`] advances exactly one cycle, in five phases:
//!
//! 1. **Retire** up to `retire_width` completed head entries in order.
//!    Stores access the memory hierarchy here, off the critical path.
//! 2. **Writeback** executions completing this cycle: wake dependents
//!    (they may issue this same cycle, so one-cycle ops run back to back)
//!    and resolve branches. A mispredicted branch squashes every younger
//!    op, rolls the rename map back via the saved previous mappings,
//!    rewinds the trace cursor to the op after the branch, and stalls the
//!    frontend for the mispredict penalty.
//! 3. **Dispatch** ops whose frontend delay has elapsed into the ROB,
//!    issue window and load/store queues, while resources allow.
//! 4. **Issue** up to `issue_width` ready window entries, oldest first,
//!    subject to functional-unit throughput gating and memory
//!    disambiguation. Loads consult the hierarchy and schedule their
//!    completion at the returned latency.
//! 5. **Fetch** up to `retire_width` trace ops into the frontend pipe
//!    (the frontend is ideal: the trace is already decoded micro-ops, so
//!    instruction-side stalls are not modeled).
//!
//! An op fetched at cycle `f` with an empty machine issues at
//! `f + frontend_depth`, completes `latency` cycles later, and retires the
//! cycle after completion.
//!
//! Traces record the committed path only, so a mispredict costs the redirect
//! penalty but refetches the same upcoming ops. Branch predictions are made
//! at dispatch; the predictor is trained at retirement, in program order.

use crate::config::{FuKind, MachineConfig};
use crate::engine::SimError;
use crate::memhier::{AccessOp, MemHierarchy};
use crate::predictor::{tage_new, tage_predict, tage_update, Prediction, Provider, TageState};
use crate::trace::{MicroOp, OpKind, TraceError, TraceStream};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

/// How branch predictions are produced. `Tage` is the real predictor;
/// `Oracle` and `AlwaysWrong` bound the cost of prediction for tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorMode {
    Tage,
    Oracle,
    AlwaysWrong,
}

/// Per-cause dispatch/issue stall cycle counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StallCounters {
    pub rob_full: u64,
    pub iw_full: u64,
    pub lq_full: u64,
    pub sq_full: u64,
    pub no_phys_reg: u64,
    pub no_fu: u64,
}

/// End-of-run statistics for one core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoreStats {
    /// Total cycles until the last retirement (0 for an empty trace).
    pub cycles: u64,
    pub retired: u64,
    pub predictions: u64,
    pub mispredictions: u64,
    /// Issues per functional-unit kind, indexed by [`FuKind::index`].
    pub fu_issues: [u64; 6],
    pub loads_issued: u64,
    pub stores_issued: u64,
    pub store_forwards: u64,
    pub stalls: StallCounters,
}

/// What one cycle did; used by cap checks and tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CycleEvents {
    pub retired: u64,
    pub issued: u64,
    pub dispatched: u64,
    pub fetched: u64,
    pub squashed: bool,
}

/// Per-kind functional units with reciprocal-throughput gating. A unit
/// accepts at most one new op per `recip_throughput` cycles.
#[derive(Clone, Debug)]
pub struct FuPool {
    latency: [u64; 6],
    recip: [u64; 6],
    /// Per kind, per unit: first cycle at which the unit accepts again.
    next_accept: [Vec<u64>; 6],
}

impl FuPool {
    pub fn new(cfg: &MachineConfig) -> FuPool {
        let mut latency = [0; 6];
        let mut recip = [0; 6];
        let mut next_accept: [Vec<u64>; 6] = Default::default();
        for kind in FuKind::ALL {
            let spec = cfg.fu(kind);
            latency[kind.index()] = spec.latency;
            recip[kind.index()] = spec.recip_throughput;
            next_accept[kind.index()] = vec![0; spec.count as usize];
        }
        FuPool { latency, recip, next_accept }
    }

    /// Tries to start an op of `kind` at `cycle`: picks the lowest-id unit
    /// whose throughput gate has reopened, returning the unit and the
    /// completion cycle, or None if every unit is gated.
    pub fn accept(&mut self, kind: FuKind, cycle: u64) -> Option<(usize, u64)> {
        let k = kind.index();
        let unit = self.next_accept[k].iter().position(|&free| free <= cycle)?;
        self.next_accept[k][unit] = cycle + self.recip[k];
        Some((unit, cycle + self.latency[k]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RegClass {
    Int,
    Fp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PhysReg {
    class: RegClass,
    idx: u16,
}

/// Rename state: architectural-to-physical map plus free lists and
/// readiness scoreboards for both register files.
#[derive(Debug)]
struct RenameState {
    map: [PhysReg; 64],
    free_int: Vec<u16>,
    free_fp: Vec<u16>,
    ready_int: Vec<bool>,
    ready_fp: Vec<bool>,
    int_allocated: u64,
    fp_allocated: u64,
}

impl RenameState {
    fn new(int_regs: usize, fp_regs: usize) -> RenameState {
        // The 64 architectural registers boot mapped onto the first 64
        // integer physical registers, all ready.
        let map = std::array::from_fn(|i| PhysReg { class: RegClass::Int, idx: i as u16 });
        RenameState {
            map,
            free_int: (64..int_regs as u16).rev().collect(),
            free_fp: (0..fp_regs as u16).rev().collect(),
            ready_int: vec![true; int_regs],
            ready_fp: vec![false; fp_regs],
            int_allocated: 64,
            fp_allocated: 0,
        }
    }

    fn alloc(&mut self, class: RegClass) -> Option<PhysReg> {
        let (free, count) = match class {
            RegClass::Int => (&mut self.free_int, &mut self.int_allocated),
            RegClass::Fp => (&mut self.free_fp, &mut self.fp_allocated),
        };
        let idx = free.pop()?;
        *count += 1;
        match class {
            RegClass::Int => self.ready_int[idx as usize] = false,
            RegClass::Fp => self.ready_fp[idx as usize] = false,
        }
        Some(PhysReg { class, idx })
    }

    fn free(&mut self, reg: PhysReg) {
        match reg.class {
            RegClass::Int => {
                self.free_int.push(reg.idx);
                self.int_allocated -= 1;
            }
            RegClass::Fp => {
                self.free_fp.push(reg.idx);
                self.fp_allocated -= 1;
            }
        }
    }

    fn is_ready(&self, reg: PhysReg) -> bool {
        match reg.class {
            RegClass::Int => self.ready_int[reg.idx as usize],
            RegClass::Fp => self.ready_fp[reg.idx as usize],
        }
    }

    fn set_ready(&mut self, reg: PhysReg) {
        match reg.class {
            RegClass::Int => self.ready_int[reg.idx as usize] = true,
            RegClass::Fp => self.ready_fp[reg.idx as usize] = true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RobState {
    Dispatched,
    Executing,
    Completed,
}

#[derive(Clone, Debug)]
struct RobEntry {
    op: MicroOp,
    /// Position of the op in the trace stream; squash rewinds to the entry
    /// after the mispredicted branch.
    stream_idx: u64,
    /// Unique per dispatch instance, so stale completion events for a
    /// squashed-and-replayed op are ignored.
    disp_id: u64,
    state: RobState,
    dst_phys: Option<PhysReg>,
    prev_phys: Option<PhysReg>,
    pred: Option<Prediction>,
}

#[derive(Clone, Copy, Debug)]
struct IwEntry {
    seq: u64,
    disp_id: u64,
    kind: OpKind,
    /// Outstanding source registers; the entry is ready when empty.
    waits: [Option<PhysReg>; 2],
    unresolved: u8,
}

#[derive(Clone, Copy, Debug)]
struct LoadEntry {
    seq: u64,
    addr: u64,
    size: u8,
}

#[derive(Clone, Copy, Debug)]
struct StoreEntry {
    seq: u64,
    addr: u64,
    size: u8,
    /// Set when the store issues (its address generation completes); loads
    /// may not issue past an older store with an unknown address.
    addr_known: bool,
}

#[derive(Clone, Copy, Debug)]
struct FetchedOp {
    op: MicroOp,
    stream_idx: u64,
    dispatch_at: u64,
}

/// Lazily pulls ops from a trace stream, retaining a replay window so a
/// squash can rewind to any op still in flight.
struct TraceCursor {
    stream: TraceStream,
    buffer: VecDeque<MicroOp>,
    buffer_start: u64,
    pos: u64,
    fetched_total: u64,
    stream_ended: bool,
    capacity: usize,
    last_seq: u64,
}

enum CursorNext {
    Op(u64, MicroOp),
    End,
    Err(TraceError),
}

impl TraceCursor {
    fn new(stream: TraceStream, capacity: usize) -> TraceCursor {
        TraceCursor {
            stream,
            buffer: VecDeque::new(),
            buffer_start: 0,
            pos: 0,
            fetched_total: 0,
            stream_ended: false,
            capacity,
            last_seq: 0,
        }
    }

    fn next(&mut self) -> CursorNext {
        if self.pos < self.fetched_total {
            let op = self.buffer[(self.pos - self.buffer_start) as usize];
            self.pos += 1;
            return CursorNext::Op(self.pos - 1, op);
        }
        if self.stream_ended {
            return CursorNext::End;
        }
        match self.stream.next() {
            None => {
                self.stream_ended = true;
                CursorNext::End
            }
            Some(Err(e)) => {
                self.stream_ended = true;
                CursorNext::Err(e)
            }
            Some(Ok(op)) => {
                self.last_seq = op.seq;
                self.buffer.push_back(op);
                self.fetched_total += 1;
                while self.buffer.len() > self.capacity {
                    self.buffer.pop_front();
                    self.buffer_start += 1;
                }
                self.pos += 1;
                CursorNext::Op(self.pos - 1, op)
            }
        }
    }

    fn rewind(&mut self, to_stream_idx: u64) {
        assert!(
            to_stream_idx >= self.buffer_start,
            "replay window too small for rewind"
        );
        self.pos = to_stream_idx;
    }

    fn at_end(&self) -> bool {
        self.stream_ended && self.pos == self.fetched_total
    }
}

fn fu_kind_for(kind: OpKind) -> Option<FuKind> {
    Some(match kind {
        OpKind::IntAlu | OpKind::Branch | OpKind::Jump => FuKind::IntAlu,
        OpKind::IntMul => FuKind::IntMul,
        OpKind::IntDiv => FuKind::IntDiv,
        OpKind::FpAlu => FuKind::FpAlu,
        OpKind::FpMul => FuKind::FpMul,
        OpKind::FpDiv => FuKind::FpDiv,
        OpKind::Load | OpKind::Store | OpKind::Nop => return None,
    })
}

fn dst_class(kind: OpKind) -> RegClass {
    match kind {
        OpKind::FpAlu | OpKind::FpMul | OpKind::FpDiv => RegClass::Fp,
        _ => RegClass::Int,
    }
}

/// One simulated core.
pub struct Core {
    id: usize,
    retire_width: u64,
    issue_width: u64,
    /// Frontend bandwidth; equals the retire width.
    fetch_width: u64,
    frontend_depth: u64,
    frontend_cap: usize,
    rob_size: usize,
    iw_size: usize,
    lq_size: usize,
    sq_size: usize,
    int_phys: u64,
    fp_phys: u64,
    bmispred_penalty: u64,

    cursor: TraceCursor,
    frontend: VecDeque<FetchedOp>,
    fetch_stall_until: u64,
    rob: VecDeque<RobEntry>,
    iw: Vec<IwEntry>,
    lq: Vec<LoadEntry>,
    sq: Vec<StoreEntry>,
    rename: RenameState,
    fu: FuPool,
    /// Completion events: (cycle, seq, dispatch id).
    events: BinaryHeap<Reverse<(u64, u64, u64)>>,
    predictor_mode: PredictorMode,
    tage: TageState,
    next_disp_id: u64,
    last_retired_seq: u64,
    last_retire_cycle: Option<u64>,
    pending_error: Option<TraceError>,
    stats: CoreStats,
}

impl Core {
    pub fn new(
        cfg: &MachineConfig,
        trace: TraceStream,
        core_id: usize,
        predictor_mode: PredictorMode,
    ) -> Result<Core, SimError> {
        let p = &cfg.pipeline;
        if p.int_phys_regs < 64 {
            return Err(SimError::Unsupported(
                "int_phys_regs must be >= 64 (one per architectural register)".into(),
            ));
        }
        let tage = tage_new(&cfg.predictor)
            .map_err(|e| SimError::Unsupported(format!("predictor: {e}")))?;
        let frontend_cap = (p.retire_width * p.frontend_depth).max(p.retire_width) as usize;
        let replay_cap = p.rob_size as usize + frontend_cap + 2 * p.retire_width as usize + 16;
        Ok(Core {
            id: core_id,
            retire_width: p.retire_width,
            issue_width: p.issue_width,
            fetch_width: p.retire_width,
            frontend_depth: p.frontend_depth,
            frontend_cap,
            rob_size: p.rob_size as usize,
            iw_size: p.iw_size as usize,
            lq_size: p.load_queue_size as usize,
            sq_size: p.store_queue_size as usize,
            int_phys: p.int_phys_regs,
            fp_phys: p.fp_phys_regs,
            bmispred_penalty: p.bmispred_penalty,
            cursor: TraceCursor::new(trace, replay_cap),
            frontend: VecDeque::with_capacity(frontend_cap),
            fetch_stall_until: 0,
            rob: VecDeque::with_capacity(p.rob_size as usize),
            iw: Vec::with_capacity(p.iw_size as usize),
            lq: Vec::with_capacity(p.load_queue_size as usize),
            sq: Vec::with_capacity(p.store_queue_size as usize),
            rename: RenameState::new(p.int_phys_regs as usize, p.fp_phys_regs as usize),
            fu: FuPool::new(cfg),
            events: BinaryHeap::new(),
            predictor_mode,
            tage,
            next_disp_id: 0,
            last_retired_seq: 0,
            last_retire_cycle: None,
            pending_error: None,
            stats: CoreStats::default(),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// True when the trace is exhausted and every op has retired.
    pub fn done(&self) -> bool {
        self.cursor.at_end() && self.frontend.is_empty() && self.rob.is_empty()
    }

    pub fn take_error(&mut self) -> Option<TraceError> {
        self.pending_error.take()
    }

    /// Final statistics; `cycles` is the cycle after the last retirement.
    pub fn stats(&self) -> CoreStats {
        let mut s = self.stats;
        s.cycles = self.last_retire_cycle.map_or(0, |c| c + 1);
        s
    }

    fn rob_index_of(&self, seq: u64) -> Option<usize> {
        self.rob.binary_search_by(|e| e.op.seq.cmp(&seq)).ok()
    }

    fn predict(&self, op: &MicroOp) -> Prediction {
        let actual = op.taken.expect("branch carries its outcome");
        match self.predictor_mode {
            PredictorMode::Tage => tage_predict(&self.tage, op.pc),
            PredictorMode::Oracle => Prediction {
                taken: actual,
                provider: Provider::Base,
                alt_pred: actual,
            },
            PredictorMode::AlwaysWrong => Prediction {
                taken: !actual,
                provider: Provider::Base,
                alt_pred: !actual,
            },
        }
    }

    fn wake(&mut self, reg: PhysReg) {
        for entry in &mut self.iw {
            for slot in &mut entry.waits {
                if *slot == Some(reg) {
                    *slot = None;
                    entry.unresolved -= 1;
                }
            }
        }
    }

    /// Squashes every op younger than `branch_seq`, restoring rename
    /// mappings youngest-first, then rewinds the trace to the op after the
    /// branch.
    fn squash_younger(&mut self, branch_seq: u64, branch_stream_idx: u64) {
        while let Some(tail) = self.rob.back() {
            if tail.op.seq <= branch_seq {
                break;
            }
            let entry = self.rob.pop_back().unwrap();
            if let Some(dst) = entry.op.dst {
                self.rename.map[dst as usize] =
                    entry.prev_phys.expect("dst implies saved previous mapping");
                self.rename.free(entry.dst_phys.expect("dst implies allocation"));
            }
            let seq = entry.op.seq;
            self.iw.retain(|e| e.seq != seq);
            self.lq.retain(|e| e.seq != seq);
            self.sq.retain(|e| e.seq != seq);
        }
        self.frontend.clear();
        self.cursor.rewind(branch_stream_idx + 1);
    }

    fn retire_phase(&mut self, hier: &mut MemHierarchy, cycle: u64) -> u64 {
        let mut retired = 0;
        while retired < self.retire_width {
            match self.rob.front() {
                Some(head) if head.state == RobState::Completed => {}
                _ => break,
            }
            let entry = self.rob.pop_front().unwrap();
            let op = &entry.op;
            assert!(op.seq > self.last_retired_seq, "retirement must follow trace order");
            self.last_retired_seq = op.seq;
            match op.kind {
                OpKind::Store => {
                    // The store leaves the queue and updates the hierarchy
                    // now; write-through propagation is off the load-use
                    // critical path, so no core stall is charged.
                    hier.access(self.id, op.mem_addr.unwrap(), AccessOp::Write, cycle);
                    self.sq.retain(|e| e.seq != op.seq);
                }
                OpKind::Load => {
                    self.lq.retain(|e| e.seq != op.seq);
                }
                OpKind::Branch => {
                    let pred = entry.pred.expect("branches are predicted at dispatch");
                    let actual = op.taken.unwrap();
                    self.stats.predictions += 1;
                    if pred.taken != actual {
                        self.stats.mispredictions += 1;
                    }
                    if self.predictor_mode == PredictorMode::Tage {
                        tage_update(&mut self.tage, op.pc, actual, &pred);
                    }
                }
                _ => {}
            }
            if let Some(prev) = entry.prev_phys {
                self.rename.free(prev);
            }
            self.stats.retired += 1;
            self.last_retire_cycle = Some(cycle);
            retired += 1;
        }
        retired
    }

    fn writeback_phase(&mut self, cycle: u64) -> bool {
        let mut squashed = false;
        while let Some(&Reverse((c, seq, disp))) = self.events.peek() {
            if c > cycle {
                break;
            }
            self.events.pop();
            let Some(idx) = self.rob_index_of(seq) else { continue };
            if self.rob[idx].disp_id != disp || self.rob[idx].state != RobState::Executing {
                continue; // stale event for a squashed instance
            }
            self.rob[idx].state = RobState::Completed;
            if let Some(dst) = self.rob[idx].dst_phys {
                self.rename.set_ready(dst);
                self.wake(dst);
            }
            if self.rob[idx].op.kind == OpKind::Branch {
                let pred = self.rob[idx].pred.expect("branches are predicted at dispatch");
                let actual = self.rob[idx].op.taken.unwrap();
                if pred.taken != actual {
                    let stream_idx = self.rob[idx].stream_idx;
                    self.squash_younger(seq, stream_idx);
                    self.fetch_stall_until =
                        self.fetch_stall_until.max(cycle + self.bmispred_penalty);
                    squashed = true;
                }
            }
        }
        squashed
    }

    fn dispatch_phase(&mut self, cycle: u64) -> u64 {
        let mut dispatched = 0;
        while dispatched < self.fetch_width {
            let Some(front) = self.frontend.front() else { break };
            if front.dispatch_at > cycle {
                break;
            }
            let op = front.op;
            if self.rob.len() >= self.rob_size {
                self.stats.stalls.rob_full += 1;
                break;
            }
            if op.kind != OpKind::Nop && self.iw.len() >= self.iw_size {
                self.stats.stalls.iw_full += 1;
                break;
            }
            if op.kind == OpKind::Load && self.lq.len() >= self.lq_size {
                self.stats.stalls.lq_full += 1;
                break;
            }
            if op.kind == OpKind::Store && self.sq.len() >= self.sq_size {
                self.stats.stalls.sq_full += 1;
                break;
            }
            if op.dst.is_some() {
                let class = dst_class(op.kind);
                let free = match class {
                    RegClass::Int => !self.rename.free_int.is_empty(),
                    RegClass::Fp => !self.rename.free_fp.is_empty(),
                };
                if !free {
                    self.stats.stalls.no_phys_reg += 1;
                    break;
                }
            }

            let fetched = self.frontend.pop_front().unwrap();
            let disp_id = self.next_disp_id;
            self.next_disp_id += 1;

            let mut waits = [None, None];
            let mut unresolved = 0;
            for (slot, &src) in waits.iter_mut().zip(op.srcs.as_slice()) {
                let phys = self.rename.map[src as usize];
                if !self.rename.is_ready(phys) {
                    *slot = Some(phys);
                    unresolved += 1;
                }
            }

            let (dst_phys, prev_phys) = match op.dst {
                Some(dst) => {
                    let prev = self.rename.map[dst as usize];
                    let new = self.rename.alloc(dst_class(op.kind)).expect("checked above");
                    self.rename.map[dst as usize] = new;
                    (Some(new), Some(prev))
                }
                None => (None, None),
            };

            let pred = (op.kind == OpKind::Branch).then(|| self.predict(&op));
            let state = if op.kind == OpKind::Nop {
                RobState::Completed
            } else {
                RobState::Dispatched
            };
            self.rob.push_back(RobEntry {
                op,
                stream_idx: fetched.stream_idx,
                disp_id,
                state,
                dst_phys,
                prev_phys,
                pred,
            });
            if op.kind != OpKind::Nop {
                self.iw.push(IwEntry {
                    seq: op.seq,
                    disp_id,
                    kind: op.kind,
                    waits,
                    unresolved,
                });
            }
            match op.kind {
                OpKind::Load => self.lq.push(LoadEntry {
                    seq: op.seq,
                    addr: op.mem_addr.unwrap(),
                    size: op.mem_size.unwrap(),
                }),
                OpKind::Store => self.sq.push(StoreEntry {
                    seq: op.seq,
                    addr: op.mem_addr.unwrap(),
                    size: op.mem_size.unwrap(),
                    addr_known: false,
                }),
                _ => {}
            }
            dispatched += 1;
        }
        dispatched
    }

    /// Whether a load may issue, and the store it can forward from.
    /// Conservative: every older store must have a known address; an
    /// inexact overlap blocks the load until that store retires.
    fn load_disposition(&self, load: &LoadEntry) -> Option<Option<u64>> {
        let lo = load.addr;
        let hi = load.addr + load.size as u64;
        let mut forward_from = None;
        for store in &self.sq {
            if store.seq >= load.seq {
                break;
            }
            if !store.addr_known {
                return None;
            }
            let s_lo = store.addr;
            let s_hi = store.addr + store.size as u64;
            if s_lo == lo && s_hi == hi {
                forward_from = Some(store.seq); // youngest exact match wins
            } else if s_lo < hi && lo < s_hi {
                return None; // partial overlap: wait for the store to drain
            }
        }
        Some(forward_from)
    }

    fn issue_phase(&mut self, hier: &mut MemHierarchy, cycle: u64) -> u64 {
        let mut issued = 0;
        let mut fu_blocked = false;
        let mut i = 0;
        while i < self.iw.len() && issued < self.issue_width {
            if self.iw[i].unresolved > 0 {
                i += 1;
                continue;
            }
            let entry = self.iw[i];
            let completion = match entry.kind {
                OpKind::Load => {
                    let lq_pos = self
                        .lq
                        .iter()
                        .position(|e| e.seq == entry.seq)
                        .expect("issuing load holds a queue entry");
                    let load = self.lq[lq_pos];
                    match self.load_disposition(&load) {
                        None => {
                            i += 1;
                            continue;
                        }
                        Some(Some(_store)) => {
                            self.stats.store_forwards += 1;
                            self.stats.loads_issued += 1;
                            cycle + 1
                        }
                        Some(None) => {
                            let extra = hier.dtlb_access(self.id, load.addr);
                            let res = hier.access(self.id, load.addr, AccessOp::Read, cycle);
                            self.stats.loads_issued += 1;
                            cycle + extra + res.latency
                        }
                    }
                }
                OpKind::Store => {
                    let store = self
                        .sq
                        .iter_mut()
                        .find(|e| e.seq == entry.seq)
                        .expect("issuing store holds a queue entry");
                    store.addr_known = true;
                    // Address generation touches the data TLB; the write
                    // itself happens at retirement.
                    let addr = store.addr;
                    hier.dtlb_access(self.id, addr);
                    self.stats.stores_issued += 1;
                    cycle + 1
                }
                kind => {
                    let fu_kind = fu_kind_for(kind).expect("compute op maps to a unit");
                    match self.fu.accept(fu_kind, cycle) {
                        None => {
                            fu_blocked = true;
                            i += 1;
                            continue;
                        }
                        Some((_unit, completion)) => {
                            self.stats.fu_issues[fu_kind.index()] += 1;
                            completion
                        }
                    }
                }
            };
            let rob_idx = self.rob_index_of(entry.seq).expect("window entry is in the ROB");
            self.rob[rob_idx].state = RobState::Executing;
            self.events.push(Reverse((completion, entry.seq, entry.disp_id)));
            self.iw.remove(i);
            issued += 1;
        }
        if fu_blocked {
            self.stats.stalls.no_fu += 1;
        }
        issued
    }

    fn fetch_phase(&mut self, cycle: u64) -> u64 {
        if cycle < self.fetch_stall_until {
            return 0;
        }
        let mut fetched = 0;
        while fetched < self.fetch_width && self.frontend.len() < self.frontend_cap {
            match self.cursor.next() {
                CursorNext::End => break,
                CursorNext::Err(e) => {
                    self.pending_error = Some(e);
                    break;
                }
                CursorNext::Op(stream_idx, op) => {
                    self.frontend.push_back(FetchedOp {
                        op,
                        stream_idx,
                        dispatch_at: cycle + self.frontend_depth,
                    });
                    fetched += 1;
                }
            }
        }
        fetched
    }

    /// Advances the core by one cycle against the shared memory hierarchy.
    pub fn step(&mut self, hier: &mut MemHierarchy, cycle: u64) -> CycleEvents {
        let retired = self.retire_phase(hier, cycle);
        let squashed = self.writeback_phase(cycle);
        let dispatched = self.dispatch_phase(cycle);
        let issued = self.issue_phase(hier, cycle);
        let fetched = self.fetch_phase(cycle);
        CycleEvents { retired, issued, dispatched, fetched, squashed }
    }

    /// Verifies the per-cycle resource caps; used by the fuzz suites.
    pub fn check_caps(&self, ev: &CycleEvents) -> Result<(), String> {
        let checks = [
            (ev.retired <= self.retire_width, "retire width exceeded"),
            (ev.issued <= self.issue_width, "issue width exceeded"),
            (self.rob.len() <= self.rob_size, "ROB over capacity"),
            (self.iw.len() <= self.iw_size, "issue window over capacity"),
            (self.lq.len() <= self.lq_size, "load queue over capacity"),
            (self.sq.len() <= self.sq_size, "store queue over capacity"),
            (self.rename.int_allocated <= self.int_phys, "int physical registers oversubscribed"),
            (self.rename.fp_allocated <= self.fp_phys, "fp physical registers oversubscribed"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(format!("core {}: {msg}", self.id));
            }
        }
        Ok(())
    }

    /// Exhaustive rename consistency check: no register is simultaneously
    /// free and mapped. Test support; too slow for per-cycle use.
    pub fn check_rename_consistency(&self) -> Result<(), String> {
        let mapped: Vec<PhysReg> = self
            .rename
            .map
            .iter()
            .copied()
            .chain(self.rob.iter().filter_map(|e| e.dst_phys))
            .chain(self.rob.iter().filter_map(|e| e.prev_phys))
            .collect();
        for reg in mapped {
            let free = match reg.class {
                RegClass::Int => self.rename.free_int.contains(&reg.idx),
                RegClass::Fp => self.rename.free_fp.contains(&reg.idx),
            };
            if free {
                return Err(format!("core {}: register {reg:?} both free and in use", self.id));
            }
        }
        Ok(())
    }
}

/// Runs one core to completion against `hier`; the trace's `thread_id`
/// selects which core slot of the hierarchy it drives. Deterministic for
/// fixed inputs.
pub fn run_core(
    cfg: &MachineConfig,
    trace: TraceStream,
    hier: &mut MemHierarchy,
) -> Result<CoreStats, SimError> {
    run_core_with_mode(cfg, trace, hier, PredictorMode::Tage, crate::engine::DEFAULT_CYCLE_CEILING)
}

/// [`run_core`] with an explicit predictor mode and divergence ceiling.
pub fn run_core_with_mode(
    cfg: &MachineConfig,
    trace: TraceStream,
    hier: &mut MemHierarchy,
    mode: PredictorMode,
    cycle_ceiling: u64,
) -> Result<CoreStats, SimError> {
    let thread = trace.thread_id;
    let mut core = Core::new(cfg, trace, thread, mode)?;
    let mut cycle = 0;
    while !core.done() {
        hier.step(cycle);
        core.step(hier, cycle);
        if let Some(e) = core.take_error() {
            return Err(SimError::Trace { thread, source: e });
        }
        cycle += 1;
        if cycle > cycle_ceiling {
            return Err(SimError::Divergence { ceiling: cycle_ceiling });
        }
    }
    Ok(core.stats())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_sandybridge;
    use crate::trace::{gen_ops, GenParams, SrcList, TracePattern};

    fn hier_for(cores: usize) -> MemHierarchy {
        MemHierarchy::new(&default_sandybridge(), cores).unwrap()
    }

    fn run(ops: Vec<MicroOp>, mode: PredictorMode) -> CoreStats {
        let cfg = default_sandybridge();
        let mut hier = hier_for(1);
        run_core_with_mode(
            &cfg,
            TraceStream::from_ops(ops, 0),
            &mut hier,
            mode,
            1_000_000_000,
        )
        .unwrap()
    }

    fn alu(seq: u64, dst: u8, srcs: &[u8]) -> MicroOp {
        MicroOp {
            seq,
            pc: 0x40_0000 + 4 * seq,
            kind: OpKind::IntAlu,
            srcs: SrcList::from_slice(srcs),
            dst: Some(dst),
            mem_addr: None,
            mem_size: None,
            taken: None,
            target: None,
        }
    }

    #[test]
    fn fu_accept_int_div_timing() {
        let cfg = default_sandybridge();
        let mut pool = FuPool::new(&cfg);
        let (unit, completion) = pool.accept(FuKind::IntDiv, 0).unwrap();
        assert_eq!((unit, completion), (0, 21));
        // Gated by reciprocal throughput until cycle 12.
        assert_eq!(pool.accept(FuKind::IntDiv, 5), None);
        assert!(pool.accept(FuKind::IntDiv, 12).is_some());
    }

    #[test]
    fn fu_accept_three_alus_same_cycle() {
        let cfg = default_sandybridge();
        let mut pool = FuPool::new(&cfg);
        for expect_unit in 0..3 {
            let (unit, completion) = pool.accept(FuKind::IntAlu, 0).unwrap();
            assert_eq!((unit, completion), (expect_unit, 1));
        }
        assert_eq!(pool.accept(FuKind::IntAlu, 0), None);
    }

    #[test]
    fn empty_trace_is_zero_cycles() {
        let stats = run(Vec::new(), PredictorMode::Tage);
        assert_eq!(stats.cycles, 0);
        assert_eq!(stats.retired, 0);
        assert_eq!(stats.fu_issues.iter().sum::<u64>(), 0);
    }

    #[test]
    fn single_alu_retires_at_frontend_plus_latency_plus_one() {
        let stats = run(vec![alu(1, 1, &[0, 0])], PredictorMode::Tage);
        // Fetched at cycle 0, issues at 5, completes at 6, retires at 7.
        assert_eq!(stats.cycles, 8);
        assert_eq!(stats.retired, 1);
    }

    #[test]
    fn ten_ready_alus_issue_three_per_cycle() {
        let cfg = default_sandybridge();
        let ops: Vec<MicroOp> = (1..=10).map(|i| alu(i, (i % 60) as u8 + 1, &[0, 0])).collect();
        let mut hier = hier_for(1);
        let mut core = Core::new(&cfg, TraceStream::from_ops(ops, 0), 0, PredictorMode::Tage).unwrap();
        let mut per_cycle = Vec::new();
        for cycle in 0..20 {
            hier.step(cycle);
            let ev = core.step(&mut hier, cycle);
            per_cycle.push(ev.issued);
        }
        // Ops 1..=4 dispatch and issue at cycle 5 (4 fetched in cycle 0,
        // three units available); demand outstrips the ALU count, so three
        // issue per cycle from then on.
        assert_eq!(per_cycle[5], 3);
        assert_eq!(per_cycle[6], 3);
        assert_eq!(per_cycle.iter().sum::<u64>(), 10);
    }

    #[test]
    fn div_chain_serializes_at_unit_latency() {
        let ops = gen_ops(TracePattern::DivChain, 3, &GenParams::default()).unwrap().remove(0);
        let stats = run(ops, PredictorMode::Tage);
        // Issues at cycles 5, 26, 47; last completes at 68, retires at 69.
        assert_eq!(stats.cycles, 70);
        assert_eq!(stats.fu_issues[FuKind::IntDiv.index()], 3);
    }

    #[test]
    fn independent_alus_bound_by_three_units() {
        let ops = gen_ops(TracePattern::AluIndep, 60, &GenParams::default()).unwrap().remove(0);
        let stats = run(ops, PredictorMode::Tage);
        // 60 ops at 3 issues per cycle: issue cycles 5..=24, retire trails
        // by 2.
        assert_eq!(stats.retired, 60);
        assert!(stats.cycles >= 25 && stats.cycles <= 30, "cycles {}", stats.cycles);
    }

    #[test]
    fn store_then_load_forwards() {
        let store = MicroOp {
            seq: 1,
            pc: 0x40_0000,
            kind: OpKind::Store,
            srcs: SrcList::from_slice(&[0]),
            dst: None,
            mem_addr: Some(0x2000),
            mem_size: Some(8),
            taken: None,
            target: None,
        };
        let load = MicroOp {
            seq: 2,
            pc: 0x40_0004,
            kind: OpKind::Load,
            srcs: SrcList::from_slice(&[0]),
            dst: Some(1),
            mem_addr: Some(0x2000),
            mem_size: Some(8),
            taken: None,
            target: None,
        };
        let stats = run(vec![store, load], PredictorMode::Tage);
        assert_eq!(stats.store_forwards, 1);
        assert_eq!(stats.retired, 2);
    }

    #[test]
    fn partial_overlap_blocks_until_store_retires() {
        let store = MicroOp {
            seq: 1,
            pc: 0x40_0000,
            kind: OpKind::Store,
            srcs: SrcList::from_slice(&[0]),
            dst: None,
            mem_addr: Some(0x2000),
            mem_size: Some(8),
            taken: None,
            target: None,
        };
        let load = MicroOp {
            seq: 2,
            pc: 0x40_0004,
            kind: OpKind::Load,
            srcs: SrcList::from_slice(&[0]),
            dst: Some(1),
            mem_addr: Some(0x2004),
            mem_size: Some(4),
            taken: None,
            target: None,
        };
        let stats = run(vec![store, load], PredictorMode::Tage);
        assert_eq!(stats.store_forwards, 0);
        assert_eq!(stats.retired, 2);
        assert_eq!(stats.loads_issued, 1);
    }

    #[test]
    fn forced_mispredicts_pay_the_penalty() {
        let n = 50;
        let ops = gen_ops(TracePattern::BranchPeriodic, n, &GenParams::default())
            .unwrap()
            .remove(0);
        let wrong = run(ops.clone(), PredictorMode::AlwaysWrong);
        let oracle = run(ops, PredictorMode::Oracle);
        assert_eq!(wrong.mispredictions, n);
        assert_eq!(oracle.mispredictions, 0);
        assert!(wrong.cycles >= n * 8, "penalty floor: {}", wrong.cycles);
        assert!(wrong.cycles - oracle.cycles >= n * 8);
    }

    #[test]
    fn squash_replays_the_same_ops() {
        // A mispredicted branch in front of dependent work: everything must
        // still retire exactly once, in order.
        let mut ops = vec![MicroOp {
            seq: 1,
            pc: 0x40_0000,
            kind: OpKind::Branch,
            srcs: SrcList::from_slice(&[0]),
            dst: None,
            mem_addr: None,
            mem_size: None,
            taken: Some(true),
            target: Some(0x40_0000),
        }];
        for i in 2..=40 {
            ops.push(alu(i, (i % 60) as u8 + 1, &[(i % 60) as u8]));
        }
        let stats = run(ops, PredictorMode::AlwaysWrong);
        assert_eq!(stats.retired, 40);
        assert_eq!(stats.mispredictions, 1);
    }

    #[test]
    fn nops_retire_without_issuing() {
        let ops: Vec<MicroOp> = (1..=12)
            .map(|seq| MicroOp {
                seq,
                pc: 0x40_0000 + 4 * seq,
                kind: OpKind::Nop,
                srcs: SrcList::EMPTY,
                dst: None,
                mem_addr: None,
                mem_size: None,
                taken: None,
                target: None,
            })
            .collect();
        let stats = run(ops, PredictorMode::Tage);
        assert_eq!(stats.retired, 12);
        assert_eq!(stats.fu_issues.iter().sum::<u64>(), 0);
        assert_eq!(stats.loads_issued + stats.stores_issued, 0);
    }

    #[test]
    fn caps_and_rename_hold_under_fuzz() {
        let cfg = default_sandybridge();
        for seed in 0..3 {
            let ops = crate::trace::gen_fuzz_traces(seed, 2000, 1).remove(0);
            let mut hier = hier_for(1);
            let mut core =
                Core::new(&cfg, TraceStream::from_ops(ops, 0), 0, PredictorMode::Tage).unwrap();
            let mut cycle = 0;
            while !core.done() {
                hier.step(cycle);
                let ev = core.step(&mut hier, cycle);
                core.check_caps(&ev).unwrap();
                if cycle % 64 == 0 {
                    core.check_rename_consistency().unwrap();
                }
                cycle += 1;
                assert!(cycle < 1_000_000, "fuzz run diverged");
            }
            assert_eq!(core.stats().retired, 2000);
        }
    }

    #[test]
    fn work_conservation_for_ready_alu() {
        // One ready ALU op, idle units, free issue width: it must issue.
        let cfg = default_sandybridge();
        let mut hier = hier_for(1);
        let mut core = Core::new(
            &cfg,
            TraceStream::from_ops(vec![alu(1, 1, &[0, 0])], 0),
            0,
            PredictorMode::Tage,
        )
        .unwrap();
        let mut issued_at = None;
        for cycle in 0..10 {
            hier.step(cycle);
            let ev = core.step(&mut hier, cycle);
            if ev.issued > 0 {
                issued_at = Some(cycle);
                break;
            }
        }
        assert_eq!(issued_at, Some(5));
    }
}
