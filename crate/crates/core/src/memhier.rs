//! TLBs and the three-level cache hierarchy: private write-through L1i/L1d
//! and write-back L2 per core, a shared write-back L3, MESI snooping among
//! the private L2s over the bus, and flat-latency main memory behind L3.
//!
//! # Latency composition
//!
//! Latency composes additively down the walk. The L1 lookup is always paid;
//! an L1 miss adds the L2 lookup; an L2 miss adds one bus hop (request)
//! plus the L3 lookup; an L3 miss adds the memory latency; the fill
//! returning to L2 adds one more bus hop. A remote modified owner supplies
//! data instead of L3: hop + remote L2 lookup + hop. Bus *contention* is
//! modeled in the interconnect (message occupancy and queueing, visible in
//! bus statistics); the composition rule above charges flat hops so access
//! latencies stay analytic.
//!
//! The hierarchy is inclusive (L1 subset of L2 subset of L3): L2 evictions
//! back-invalidate L1, L3 evictions back-invalidate every private cache.
//! Stores reach the hierarchy at retirement; the write-through L1 keeps no
//! dirty lines. There is no limit on outstanding misses, but a per-block
//! merge table coalesces accesses that land while a fill for the same block
//! is still in flight.
//!
//! Addresses are physical (translation is modeled only as TLB latency).
//! Pages are 4 KiB.

use crate::config::{CacheConfig, CacheLevelId, MachineConfig, WriteMode};
use crate::interconnect::{Agent, BusMessage, BusState, BusStats, MessageKind};
use std::collections::BTreeMap;

pub const PAGE_SIZE: u64 = 4096;

/// MESI line states. The write-through L1 never holds M; the shared L3
/// uses M simply to mean dirty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mesi {
    M,
    E,
    S,
    I,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
    pub invalidations: u64,
}

#[derive(Clone, Copy, Debug)]
struct CacheLine {
    /// Block number; meaningful only when `mesi != I`.
    block: u64,
    mesi: Mesi,
    /// 0 is most recent; the victim is the valid line with the highest rank.
    lru_rank: u32,
}

/// One set-associative cache array.
#[derive(Debug)]
pub struct CacheLevel {
    pub level: CacheLevelId,
    sets: usize,
    ways: usize,
    pub latency: u64,
    lines: Vec<CacheLine>,
    pub stats: CacheStats,
}

impl CacheLevel {
    fn new(cfg: &CacheConfig) -> CacheLevel {
        let sets = (cfg.size / (cfg.block_size * cfg.associativity)) as usize;
        let ways = cfg.associativity as usize;
        let mut lines = Vec::with_capacity(sets * ways);
        for _ in 0..sets {
            for w in 0..ways {
                lines.push(CacheLine {
                    block: 0,
                    mesi: Mesi::I,
                    lru_rank: w as u32,
                });
            }
        }
        CacheLevel {
            level: cfg.level,
            sets,
            ways,
            latency: cfg.latency,
            lines,
            stats: CacheStats::default(),
        }
    }

    fn set_index(&self, block: u64) -> usize {
        (block % self.sets as u64) as usize
    }

    fn set(&self, block: u64) -> &[CacheLine] {
        let s = self.set_index(block) * self.ways;
        &self.lines[s..s + self.ways]
    }

    fn set_mut(&mut self, block: u64) -> &mut [CacheLine] {
        let s = self.set_index(block) * self.ways;
        &mut self.lines[s..s + self.ways]
    }

    /// Current state of `block`, or None if not present.
    pub fn state(&self, block: u64) -> Option<Mesi> {
        self.set(block)
            .iter()
            .find(|l| l.mesi != Mesi::I && l.block == block)
            .map(|l| l.mesi)
    }

    fn set_state(&mut self, block: u64, mesi: Mesi) {
        let line = self
            .set_mut(block)
            .iter_mut()
            .find(|l| l.mesi != Mesi::I && l.block == block)
            .expect("set_state on a present line");
        line.mesi = mesi;
    }

    /// Moves `block` to most-recently-used within its set.
    fn touch(&mut self, block: u64) {
        let set = self.set_mut(block);
        let way = set
            .iter()
            .position(|l| l.mesi != Mesi::I && l.block == block)
            .expect("touch on a present line");
        let old = set[way].lru_rank;
        for line in set.iter_mut() {
            if line.lru_rank < old {
                line.lru_rank += 1;
            }
        }
        set[way].lru_rank = 0;
    }

    /// Installs `block` with `mesi`, returning the evicted valid victim
    /// (block, state) if the set was full. Prefers an invalid way; otherwise
    /// evicts exactly the line with the maximum LRU rank.
    fn insert(&mut self, block: u64, mesi: Mesi) -> Option<(u64, Mesi)> {
        debug_assert!(self.state(block).is_none(), "insert of a present block");
        let set = self.set_mut(block);
        let way = match set.iter().position(|l| l.mesi == Mesi::I) {
            Some(w) => w,
            None => {
                let mut max_way = 0;
                for (w, line) in set.iter().enumerate() {
                    if line.lru_rank > set[max_way].lru_rank {
                        max_way = w;
                    }
                }
                max_way
            }
        };
        let evicted = if set[way].mesi != Mesi::I {
            Some((set[way].block, set[way].mesi))
        } else {
            None
        };
        set[way].block = block;
        set[way].mesi = mesi;
        let old = set[way].lru_rank;
        for (w, line) in set.iter_mut().enumerate() {
            if w != way && line.lru_rank < old {
                line.lru_rank += 1;
            }
        }
        set[way].lru_rank = 0;
        evicted
    }

    /// Drops `block` if present, returning its old state and counting an
    /// invalidation.
    fn invalidate(&mut self, block: u64) -> Option<Mesi> {
        let set = self.set_mut(block);
        let way = set
            .iter()
            .position(|l| l.mesi != Mesi::I && l.block == block)?;
        let old = set[way].mesi;
        set[way].mesi = Mesi::I;
        self.stats.invalidations += 1;
        Some(old)
    }

    /// All valid (block, state) pairs; used by invariant sweeps and tests.
    pub fn valid_lines(&self) -> impl Iterator<Item = (u64, Mesi)> + '_ {
        self.lines
            .iter()
            .filter(|l| l.mesi != Mesi::I)
            .map(|l| (l.block, l.mesi))
    }

    /// Checks that LRU ranks within every set form a permutation of
    /// 0..ways-1.
    pub fn lru_ranks_consistent(&self) -> bool {
        for s in 0..self.sets {
            let set = &self.lines[s * self.ways..(s + 1) * self.ways];
            let mut seen = vec![false; self.ways];
            for line in set {
                let r = line.lru_rank as usize;
                if r >= self.ways || seen[r] {
                    return false;
                }
                seen[r] = true;
            }
        }
        true
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TlbStats {
    pub hits: u64,
    pub misses: u64,
}

/// Fully associative LRU TLB over page numbers.
#[derive(Debug)]
pub struct Tlb {
    capacity: usize,
    penalty: u64,
    /// Page numbers, most recently used first.
    entries: Vec<u64>,
    pub stats: TlbStats,
}

impl Tlb {
    pub fn new(capacity: usize, penalty: u64) -> Tlb {
        Tlb {
            capacity,
            penalty,
            entries: Vec::with_capacity(capacity),
            stats: TlbStats::default(),
        }
    }

    /// Translates `vaddr`, returning the extra cycles the access pays:
    /// 0 on a hit, the miss penalty otherwise. The page becomes MRU either
    /// way; on a miss the LRU entry is evicted.
    pub fn access(&mut self, vaddr: u64) -> u64 {
        let page = vaddr / PAGE_SIZE;
        if let Some(pos) = self.entries.iter().position(|&p| p == page) {
            self.entries.remove(pos);
            self.entries.insert(0, page);
            self.stats.hits += 1;
            0
        } else {
            self.entries.insert(0, page);
            if self.entries.len() > self.capacity {
                self.entries.pop();
            }
            self.stats.misses += 1;
            self.penalty
        }
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }
}

/// What kind of access walks the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessOp {
    Read,
    Write,
    Ifetch,
}

/// Which component ultimately supplied the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServedBy {
    L1,
    L2,
    L3,
    Mem,
    RemoteL2,
}

/// Bus snoop request kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnoopReq {
    /// Read for sharing.
    GetS,
    /// Read/upgrade for exclusive ownership.
    GetX,
}

/// One remote L2 state transition caused by a snoop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoherenceAction {
    pub core: usize,
    pub from: Mesi,
    pub to: Mesi,
    /// Dirty data was pushed to L3 (GetS hitting a modified owner).
    pub wrote_back: bool,
    /// The remote cache supplied the block to the requester.
    pub supplied_data: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemAccessResult {
    pub latency: u64,
    pub served_by: ServedBy,
    pub actions: Vec<CoherenceAction>,
}

#[derive(Debug, PartialEq, Eq)]
struct OutboxEntry {
    send_at: u64,
    id: u64,
    msg: BusMessage,
}

impl Ord for OutboxEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.send_at, self.id).cmp(&(other.send_at, other.id))
    }
}

impl PartialOrd for OutboxEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// The full memory system shared by all cores. Mutated only inside the
/// engine loop; per-cycle accesses are processed in core-id order.
pub struct MemHierarchy {
    block_size: u64,
    num_cores: usize,
    l1i: Vec<CacheLevel>,
    l1d: Vec<CacheLevel>,
    l2: Vec<CacheLevel>,
    l3: CacheLevel,
    itlb: Vec<Tlb>,
    dtlb: Vec<Tlb>,
    mem_latency: u64,
    hop: u64,
    bus: BusState,
    outbox: std::collections::BinaryHeap<std::cmp::Reverse<OutboxEntry>>,
    next_msg_id: u64,
    merge: BTreeMap<u64, u64>,
    /// Blocks whose state changed since the last incremental invariant
    /// check.
    touched: Vec<u64>,
}

impl MemHierarchy {
    /// Builds the hierarchy for `active_cores` cores (at most
    /// `cfg.num_cores`). Only write-through L1 over write-back L2/L3 is
    /// modeled; other write-mode combinations are rejected.
    pub fn new(cfg: &MachineConfig, active_cores: usize) -> Result<MemHierarchy, String> {
        assert!(active_cores >= 1 && active_cores as u64 <= cfg.num_cores);
        for level in [CacheLevelId::L1I, CacheLevelId::L1D] {
            if cfg.cache(level).write_mode != WriteMode::WriteThrough {
                return Err(format!("cache.{}: only write-through L1 is modeled", level.name()));
            }
        }
        for level in [CacheLevelId::L2, CacheLevelId::L3] {
            if cfg.cache(level).write_mode != WriteMode::WriteBack {
                return Err(format!("cache.{}: only write-back {} is modeled", level.name(), level.name()));
            }
        }
        let block_size = cfg.cache(CacheLevelId::L1D).block_size;
        for level in CacheLevelId::ALL {
            if cfg.cache(level).block_size != block_size {
                return Err("all cache levels must share one block size".into());
            }
        }
        let p = &cfg.pipeline;
        Ok(MemHierarchy {
            block_size,
            num_cores: active_cores,
            l1i: (0..active_cores).map(|_| CacheLevel::new(cfg.cache(CacheLevelId::L1I))).collect(),
            l1d: (0..active_cores).map(|_| CacheLevel::new(cfg.cache(CacheLevelId::L1D))).collect(),
            l2: (0..active_cores).map(|_| CacheLevel::new(cfg.cache(CacheLevelId::L2))).collect(),
            l3: CacheLevel::new(cfg.cache(CacheLevelId::L3)),
            itlb: (0..active_cores).map(|_| Tlb::new(p.itlb_entries as usize, p.tlb_miss_penalty)).collect(),
            dtlb: (0..active_cores).map(|_| Tlb::new(p.dtlb_entries as usize, p.tlb_miss_penalty)).collect(),
            mem_latency: cfg.mem_latency,
            hop: cfg.noc.hop_latency,
            bus: BusState::new(&cfg.noc, active_cores),
            outbox: std::collections::BinaryHeap::new(),
            next_msg_id: 0,
            merge: BTreeMap::new(),
            touched: Vec::new(),
        })
    }

    pub fn num_cores(&self) -> usize {
        self.num_cores
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    /// Data-TLB lookup for a core; returns the extra cycles to charge.
    pub fn dtlb_access(&mut self, core: usize, vaddr: u64) -> u64 {
        self.dtlb[core].access(vaddr)
    }

    /// Instruction-TLB lookup for a core.
    pub fn itlb_access(&mut self, core: usize, vaddr: u64) -> u64 {
        self.itlb[core].access(vaddr)
    }

    fn post(&mut self, msg: BusMessage, send_at: u64) {
        let id = self.next_msg_id;
        self.next_msg_id += 1;
        self.outbox.push(std::cmp::Reverse(OutboxEntry { send_at, id, msg }));
    }

    /// Advances bus arbitration by one cycle and releases due outbox
    /// messages. Call once per simulated cycle, before stepping cores.
    pub fn step(&mut self, cycle: u64) {
        self.bus.step(cycle);
        while let Some(std::cmp::Reverse(head)) = self.outbox.peek() {
            if head.send_at > cycle {
                break;
            }
            let entry = self.outbox.pop().unwrap().0;
            self.bus.send(entry.msg, cycle);
        }
        // Fills whose in-flight window has passed no longer merge.
        self.merge.retain(|_, &mut ready| ready > cycle);
    }

    /// True while queued or scheduled bus traffic remains; the engine keeps
    /// stepping until the bus drains.
    pub fn traffic_pending(&self) -> bool {
        self.bus.has_pending() || !self.outbox.is_empty()
    }

    pub fn bus_stats(&self) -> BusStats {
        self.bus.stats()
    }

    pub fn core_cache_stats(&self, core: usize) -> (CacheStats, CacheStats, CacheStats) {
        (self.l1i[core].stats, self.l1d[core].stats, self.l2[core].stats)
    }

    pub fn l3_stats(&self) -> CacheStats {
        self.l3.stats
    }

    pub fn tlb_stats(&self, core: usize) -> (TlbStats, TlbStats) {
        (self.itlb[core].stats, self.dtlb[core].stats)
    }

    /// Applies a snoop on behalf of `requester` to every other core's
    /// private caches, per the MESI tables. Returns the state transitions
    /// taken, in core-id order.
    pub fn snoop_apply(&mut self, requester: usize, block: u64, req: SnoopReq) -> Vec<CoherenceAction> {
        let mut actions = Vec::new();
        for core in 0..self.num_cores {
            if core == requester {
                continue;
            }
            let Some(state) = self.l2[core].state(block) else {
                continue;
            };
            match req {
                SnoopReq::GetS => match state {
                    Mesi::M => {
                        // Owner writes back and keeps a shared copy.
                        self.l2[core].set_state(block, Mesi::S);
                        self.l2[core].stats.writebacks += 1;
                        debug_assert!(self.l3.state(block).is_some(), "inclusion: L3 holds L2 lines");
                        self.l3.set_state(block, Mesi::M);
                        actions.push(CoherenceAction {
                            core,
                            from: Mesi::M,
                            to: Mesi::S,
                            wrote_back: true,
                            supplied_data: true,
                        });
                    }
                    Mesi::E => {
                        self.l2[core].set_state(block, Mesi::S);
                        actions.push(CoherenceAction {
                            core,
                            from: Mesi::E,
                            to: Mesi::S,
                            wrote_back: false,
                            supplied_data: false,
                        });
                    }
                    Mesi::S => {}
                    Mesi::I => unreachable!(),
                },
                SnoopReq::GetX => {
                    let supplied = state == Mesi::M;
                    self.l2[core].invalidate(block);
                    self.l1i[core].invalidate(block);
                    self.l1d[core].invalidate(block);
                    actions.push(CoherenceAction {
                        core,
                        from: state,
                        to: Mesi::I,
                        wrote_back: false,
                        supplied_data: supplied,
                    });
                }
            }
        }
        actions
    }

    /// True if any core other than `requester` holds `block` in its L2.
    fn any_remote_holder(&self, requester: usize, block: u64) -> bool {
        (0..self.num_cores)
            .any(|c| c != requester && self.l2[c].state(block).is_some())
    }

    /// Installs `block` into a core's L2, handling the victim: dirty
    /// victims write back to L3, and the victim's L1 copies are dropped to
    /// keep inclusion.
    fn install_l2(&mut self, core: usize, block: u64, state: Mesi, cycle: u64) {
        if let Some((victim, vstate)) = self.l2[core].insert(block, state) {
            if vstate == Mesi::M {
                self.l2[core].stats.writebacks += 1;
                debug_assert!(self.l3.state(victim).is_some(), "inclusion: L3 holds L2 victims");
                self.l3.set_state(victim, Mesi::M);
                self.post(
                    BusMessage {
                        src: Agent::Core(core),
                        dst: Agent::L3,
                        kind: MessageKind::Data,
                        payload_bytes: self.block_size,
                    },
                    cycle,
                );
            }
            self.l1i[core].invalidate(victim);
            self.l1d[core].invalidate(victim);
            self.touched.push(victim);
        }
    }

    /// Installs `block` into L3, back-invalidating every private copy of
    /// the victim.
    fn install_l3(&mut self, block: u64, cycle: u64) {
        if let Some((victim, vstate)) = self.l3.insert(block, Mesi::S) {
            for core in 0..self.num_cores {
                if let Some(s) = self.l2[core].state(victim) {
                    if s == Mesi::M {
                        // Dirty private data heads to memory as L3 drops the block.
                        self.l2[core].stats.writebacks += 1;
                        self.post(
                            BusMessage {
                                src: Agent::Core(core),
                                dst: Agent::L3,
                                kind: MessageKind::Data,
                                payload_bytes: self.block_size,
                            },
                            cycle,
                        );
                    }
                    self.l2[core].invalidate(victim);
                }
                self.l1i[core].invalidate(victim);
                self.l1d[core].invalidate(victim);
            }
            if vstate == Mesi::M {
                self.l3.stats.writebacks += 1;
            }
            self.touched.push(victim);
        }
    }

    /// One demand access walking the hierarchy. State (MESI, LRU, stats,
    /// bus traffic) updates immediately; the returned latency is what the
    /// requesting core must wait.
    pub fn access(&mut self, core: usize, addr: u64, op: AccessOp, cycle: u64) -> MemAccessResult {
        let block = addr / self.block_size;
        self.touched.push(block);
        let result = match op {
            AccessOp::Read | AccessOp::Ifetch => self.read_walk(core, block, op == AccessOp::Ifetch, cycle),
            AccessOp::Write => self.write_walk(core, block, cycle),
        };
        // Coalesce with an in-flight fill of the same block: the access
        // cannot complete before the fill lands.
        if let Some(&ready) = self.merge.get(&block) {
            if ready > cycle + result.latency {
                return MemAccessResult {
                    latency: ready - cycle,
                    ..result
                };
            }
        }
        result
    }

    fn read_walk(&mut self, core: usize, block: u64, ifetch: bool, cycle: u64) -> MemAccessResult {
        let l1 = if ifetch { &mut self.l1i[core] } else { &mut self.l1d[core] };
        let mut latency = l1.latency;
        l1.stats.accesses += 1;
        if l1.state(block).is_some() {
            l1.stats.hits += 1;
            l1.touch(block);
            return MemAccessResult { latency, served_by: ServedBy::L1, actions: Vec::new() };
        }
        l1.stats.misses += 1;

        let l2 = &mut self.l2[core];
        latency += l2.latency;
        l2.stats.accesses += 1;
        if l2.state(block).is_some() {
            l2.stats.hits += 1;
            l2.touch(block);
            self.fill_l1(core, block, ifetch);
            return MemAccessResult { latency, served_by: ServedBy::L2, actions: Vec::new() };
        }
        l2.stats.misses += 1;

        // Request hop onto the bus.
        latency += self.hop;
        self.bus.send(
            BusMessage {
                src: Agent::Core(core),
                dst: Agent::L3,
                kind: MessageKind::Req,
                payload_bytes: 8,
            },
            cycle,
        );
        let actions = self.snoop_apply(core, block, SnoopReq::GetS);
        let served_by;
        if let Some(owner) = actions.iter().find(|a| a.supplied_data).map(|a| a.core) {
            // Remote modified owner supplies: hop + remote lookup + hop.
            latency += self.l2[owner].latency + self.hop;
            served_by = ServedBy::RemoteL2;
            let data_at = cycle + latency - self.hop;
            self.post(
                BusMessage {
                    src: Agent::Core(owner),
                    dst: Agent::Core(core),
                    kind: MessageKind::Data,
                    payload_bytes: self.block_size,
                },
                data_at,
            );
            self.post(
                BusMessage {
                    src: Agent::Core(owner),
                    dst: Agent::L3,
                    kind: MessageKind::Data,
                    payload_bytes: self.block_size,
                },
                data_at,
            );
        } else {
            latency += self.l3.latency;
            self.l3.stats.accesses += 1;
            if self.l3.state(block).is_some() {
                self.l3.stats.hits += 1;
                self.l3.touch(block);
                served_by = ServedBy::L3;
            } else {
                self.l3.stats.misses += 1;
                latency += self.mem_latency;
                self.install_l3(block, cycle);
                served_by = ServedBy::Mem;
            }
            // Fill hop back to the private L2.
            latency += self.hop;
            self.post(
                BusMessage {
                    src: Agent::L3,
                    dst: Agent::Core(core),
                    kind: MessageKind::Data,
                    payload_bytes: self.block_size,
                },
                cycle + latency - self.hop,
            );
        }

        let state = if self.any_remote_holder(core, block) { Mesi::S } else { Mesi::E };
        self.install_l2(core, block, state, cycle);
        self.fill_l1(core, block, ifetch);
        self.merge.insert(block, cycle + latency);
        MemAccessResult { latency, served_by, actions }
    }

    fn write_walk(&mut self, core: usize, block: u64, cycle: u64) -> MemAccessResult {
        let l1 = &mut self.l1d[core];
        let mut latency = l1.latency;
        l1.stats.accesses += 1;
        let l1_hit = l1.state(block).is_some();
        if l1_hit {
            l1.stats.hits += 1;
            l1.touch(block);
        } else {
            l1.stats.misses += 1;
        }

        // Write-through: the store always proceeds to L2 for ownership.
        let l2 = &mut self.l2[core];
        latency += l2.latency;
        l2.stats.accesses += 1;
        let mut actions = Vec::new();
        let served_by;
        match l2.state(block) {
            Some(Mesi::M) => {
                l2.stats.hits += 1;
                l2.touch(block);
                served_by = ServedBy::L2;
            }
            Some(Mesi::E) => {
                l2.stats.hits += 1;
                l2.touch(block);
                l2.set_state(block, Mesi::M);
                served_by = ServedBy::L2;
            }
            Some(Mesi::S) => {
                l2.stats.hits += 1;
                l2.touch(block);
                // Upgrade: invalidate remote sharers over the bus.
                latency += self.hop;
                self.bus.send(
                    BusMessage {
                        src: Agent::Core(core),
                        dst: Agent::L3,
                        kind: MessageKind::Req,
                        payload_bytes: 8,
                    },
                    cycle,
                );
                actions = self.snoop_apply(core, block, SnoopReq::GetX);
                latency += self.hop;
                self.post(
                    BusMessage {
                        src: Agent::L3,
                        dst: Agent::Core(core),
                        kind: MessageKind::Ack,
                        payload_bytes: 8,
                    },
                    cycle + latency - self.hop,
                );
                self.l2[core].set_state(block, Mesi::M);
                served_by = ServedBy::L2;
            }
            Some(Mesi::I) | None => {
                l2.stats.misses += 1;
                latency += self.hop;
                self.bus.send(
                    BusMessage {
                        src: Agent::Core(core),
                        dst: Agent::L3,
                        kind: MessageKind::Req,
                        payload_bytes: 8,
                    },
                    cycle,
                );
                actions = self.snoop_apply(core, block, SnoopReq::GetX);
                if let Some(owner) = actions.iter().find(|a| a.supplied_data).map(|a| a.core) {
                    latency += self.l2[owner].latency + self.hop;
                    served_by = ServedBy::RemoteL2;
                    self.post(
                        BusMessage {
                            src: Agent::Core(owner),
                            dst: Agent::Core(core),
                            kind: MessageKind::Data,
                            payload_bytes: self.block_size,
                        },
                        cycle + latency - self.hop,
                    );
                } else {
                    latency += self.l3.latency;
                    self.l3.stats.accesses += 1;
                    if self.l3.state(block).is_some() {
                        self.l3.stats.hits += 1;
                        self.l3.touch(block);
                        served_by = ServedBy::L3;
                    } else {
                        self.l3.stats.misses += 1;
                        latency += self.mem_latency;
                        self.install_l3(block, cycle);
                        served_by = ServedBy::Mem;
                    }
                    latency += self.hop;
                    self.post(
                        BusMessage {
                            src: Agent::L3,
                            dst: Agent::Core(core),
                            kind: MessageKind::Data,
                            payload_bytes: self.block_size,
                        },
                        cycle + latency - self.hop,
                    );
                }
                self.install_l2(core, block, Mesi::M, cycle);
                self.merge.insert(block, cycle + latency);
            }
        }

        // Write-allocate into the write-through L1; the line stays clean.
        if !l1_hit {
            if let Some((victim, _)) = self.l1d[core].insert(block, Mesi::S) {
                let _ = victim; // clean by construction; nothing to write back
            }
        }
        MemAccessResult { latency, served_by, actions }
    }

    fn fill_l1(&mut self, core: usize, block: u64, ifetch: bool) {
        let l1 = if ifetch { &mut self.l1i[core] } else { &mut self.l1d[core] };
        if l1.state(block).is_none() {
            l1.insert(block, Mesi::S);
        }
    }

    /// Checks the coherence invariants for `blocks`: single writer among
    /// private L2s, no modified lines in a write-through L1, and inclusion
    /// upward through L3.
    pub fn check_blocks(&self, blocks: &[u64]) -> Result<(), String> {
        for &block in blocks {
            let mut owners = 0;
            let mut sharers = 0;
            for core in 0..self.num_cores {
                match self.l2[core].state(block) {
                    Some(Mesi::M) | Some(Mesi::E) => owners += 1,
                    Some(Mesi::S) => sharers += 1,
                    _ => {}
                }
                for l1 in [&self.l1i[core], &self.l1d[core]] {
                    match l1.state(block) {
                        Some(Mesi::M) => {
                            return Err(format!("block {block:#x}: modified line in write-through L1 of core {core}"));
                        }
                        Some(_) if self.l2[core].state(block).is_none() => {
                            return Err(format!("block {block:#x}: L1 line of core {core} not covered by its L2"));
                        }
                        _ => {}
                    }
                }
                if self.l2[core].state(block).is_some() && self.l3.state(block).is_none() {
                    return Err(format!("block {block:#x}: L2 line of core {core} not covered by L3"));
                }
            }
            if owners > 1 {
                return Err(format!("block {block:#x}: {owners} private caches in M/E"));
            }
            if owners == 1 && sharers > 0 {
                return Err(format!("block {block:#x}: M/E owner coexists with {sharers} sharers"));
            }
        }
        Ok(())
    }

    /// Incremental invariant check over blocks touched since the last call.
    pub fn check_touched(&mut self) -> Result<(), String> {
        let blocks = std::mem::take(&mut self.touched);
        self.check_blocks(&blocks)
    }

    /// Full-state invariant sweep over every valid line everywhere.
    pub fn check_full(&self) -> Result<(), String> {
        let mut blocks: Vec<u64> = Vec::new();
        for core in 0..self.num_cores {
            blocks.extend(self.l1i[core].valid_lines().map(|(b, _)| b));
            blocks.extend(self.l1d[core].valid_lines().map(|(b, _)| b));
            blocks.extend(self.l2[core].valid_lines().map(|(b, _)| b));
        }
        blocks.sort_unstable();
        blocks.dedup();
        for core in 0..self.num_cores {
            for l in [&self.l1i[core], &self.l1d[core], &self.l2[core]] {
                if !l.lru_ranks_consistent() {
                    return Err(format!("core {core} {:?}: LRU ranks not a permutation", l.level));
                }
            }
        }
        if !self.l3.lru_ranks_consistent() {
            return Err("L3: LRU ranks not a permutation".into());
        }
        self.check_blocks(&blocks)
    }

    #[cfg(test)]
    fn l1d_state(&self, core: usize, addr: u64) -> Option<Mesi> {
        self.l1d[core].state(addr / self.block_size)
    }

    #[cfg(test)]
    fn l2_state(&self, core: usize, addr: u64) -> Option<Mesi> {
        self.l2[core].state(addr / self.block_size)
    }
}
