//! The shared bus between private L2 caches and the L3: round-robin
//! arbitration, flit accounting, and contention.
//!
//! A message of `f` flits granted at cycle `g` occupies the bus for the
//! half-open window `[g, g + hop_latency + f - 1)` and is delivered at the
//! window's end: the first flit pays the hop latency, each further flit
//! adds one cycle. At most one message occupies the bus at a time; the bus
//! grants at most one message per cycle.

use crate::config::NocConfig;

/// Bus endpoints: one agent per core's L2, plus the shared L3 slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Agent {
    Core(usize),
    L3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageKind {
    Req,
    Data,
    Snoop,
    Ack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BusMessage {
    pub src: Agent,
    pub dst: Agent,
    pub kind: MessageKind,
    pub payload_bytes: u64,
}

impl BusMessage {
    /// Number of flits: `ceil(payload / flit_size)`, at least 1.
    pub fn flits(&self, flit_size: u64) -> u64 {
        self.payload_bytes.div_ceil(flit_size).max(1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BusStats {
    pub messages: u64,
    pub flits: u64,
    pub max_queue_depth: u64,
}

/// Outcome of [`BusState::send`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SendOutcome {
    /// The bus was idle; the message was granted at the send cycle and will
    /// be delivered at the contained cycle.
    Delivered(u64),
    /// The bus was busy or other traffic is pending; the message was queued
    /// and will be granted by a later arbitration round.
    Queued,
}

/// A message granted by arbitration, with its delivery cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub msg: BusMessage,
    pub delivered_at: u64,
}

/// Shared-bus state: one occupancy window at a time, per-agent pending
/// queues, and a round-robin grant pointer.
#[derive(Debug)]
pub struct BusState {
    hop_latency: u64,
    flit_size: u64,
    num_agents: usize,
    /// The bus is free for a new grant at any cycle >= this.
    busy_until: u64,
    pending: Vec<std::collections::VecDeque<BusMessage>>,
    rr_pointer: usize,
    stats: BusStats,
}

impl BusState {
    pub fn new(noc: &NocConfig, num_cores: usize) -> BusState {
        BusState {
            hop_latency: noc.hop_latency,
            flit_size: noc.flit_size,
            num_agents: num_cores + 1,
            busy_until: 0,
            pending: vec![std::collections::VecDeque::new(); num_cores + 1],
            rr_pointer: 0,
            stats: BusStats::default(),
        }
    }

    pub fn stats(&self) -> BusStats {
        self.stats
    }

    pub fn flit_size(&self) -> u64 {
        self.flit_size
    }

    fn agent_index(&self, agent: Agent) -> usize {
        match agent {
            Agent::Core(i) => {
                assert!(i < self.num_agents - 1, "core id out of range");
                i
            }
            Agent::L3 => self.num_agents - 1,
        }
    }

    fn grant(&mut self, msg: BusMessage, cycle: u64) -> u64 {
        let flits = msg.flits(self.flit_size);
        let delivery = cycle + self.hop_latency + (flits - 1);
        self.busy_until = delivery;
        self.stats.messages += 1;
        self.stats.flits += flits;
        delivery
    }

    /// Sends a message at `cycle`. If the bus is idle and nothing else is
    /// waiting it is granted immediately; otherwise it joins its source
    /// agent's queue for round-robin arbitration.
    pub fn send(&mut self, msg: BusMessage, cycle: u64) -> SendOutcome {
        let src = self.agent_index(msg.src);
        if self.busy_until <= cycle && self.pending.iter().all(|q| q.is_empty()) {
            let delivery = self.grant(msg, cycle);
            self.rr_pointer = (src + 1) % self.num_agents;
            SendOutcome::Delivered(delivery)
        } else {
            self.pending[src].push_back(msg);
            let depth: u64 = self.pending.iter().map(|q| q.len() as u64).sum();
            self.stats.max_queue_depth = self.stats.max_queue_depth.max(depth);
            SendOutcome::Queued
        }
    }

    /// Round-robin arbitration: among agents with pending messages, picks
    /// the first at or after the pointer and advances the pointer past it.
    /// Does not check bus occupancy; [`step`](Self::step) does.
    pub fn arbitrate(&mut self) -> Option<usize> {
        for off in 0..self.num_agents {
            let agent = (self.rr_pointer + off) % self.num_agents;
            if !self.pending[agent].is_empty() {
                self.rr_pointer = (agent + 1) % self.num_agents;
                return Some(agent);
            }
        }
        None
    }

    /// Advances the bus by one cycle: if the bus is free, grants the next
    /// queued message (if any) and returns it with its delivery cycle.
    pub fn step(&mut self, cycle: u64) -> Option<Delivery> {
        if self.busy_until > cycle {
            return None;
        }
        let agent = self.arbitrate()?;
        let msg = self.pending[agent].pop_front().expect("arbitrated agent has traffic");
        let delivered_at = self.grant(msg, cycle);
        Some(Delivery { msg, delivered_at })
    }

    /// True if any message is waiting for a grant.
    pub fn has_pending(&self) -> bool {
        self.pending.iter().any(|q| !q.is_empty())
    }

    /// First cycle at which the bus is free for a new grant.
    pub fn busy_until(&self) -> u64 {
        self.busy_until
    }

    #[cfg(test)]
    fn force_pending(&mut self, agent: usize, msg: BusMessage) {
        self.pending[agent].push_back(msg);
    }

    #[cfg(test)]
    fn set_pointer(&mut self, at: usize) {
        self.rr_pointer = at;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_sandybridge;

    fn bus(cores: usize) -> BusState {
        BusState::new(&default_sandybridge().noc, cores)
    }

    fn req(src: usize) -> BusMessage {
        BusMessage {
            src: Agent::Core(src),
            dst: Agent::L3,
            kind: MessageKind::Req,
            payload_bytes: 8,
        }
    }

    #[test]
    fn single_flit_request_on_idle_bus() {
        let mut b = bus(2);
        assert_eq!(b.send(req(0), 10), SendOutcome::Delivered(11));
    }

    #[test]
    fn cache_block_is_two_flits() {
        let msg = BusMessage {
            src: Agent::L3,
            dst: Agent::Core(0),
            kind: MessageKind::Data,
            payload_bytes: 64,
        };
        assert_eq!(msg.flits(32), 2);
        let mut b = bus(2);
        let c = 5;
        assert_eq!(b.send(msg, c), SendOutcome::Delivered(c + 2));
    }

    #[test]
    fn two_simultaneous_sends_deliver_back_to_back() {
        let mut b = bus(2);
        let c = 100;
        assert_eq!(b.send(req(0), c), SendOutcome::Delivered(c + 1));
        assert_eq!(b.send(req(1), c), SendOutcome::Queued);
        // Bus frees at c+1; the queued message is granted there.
        assert_eq!(b.step(c), None);
        let d = b.step(c + 1).unwrap();
        assert_eq!(d.delivered_at, c + 2);
    }

    #[test]
    fn arbitration_rotates_from_pointer() {
        let mut b = bus(4);
        b.set_pointer(1);
        b.force_pending(0, req(0));
        b.force_pending(2, req(2));
        assert_eq!(b.arbitrate(), Some(2));
        assert_eq!(b.rr_pointer, 3);
    }

    #[test]
    fn arbitration_with_nothing_pending() {
        let mut b = bus(4);
        b.set_pointer(2);
        assert_eq!(b.arbitrate(), None);
        assert_eq!(b.rr_pointer, 2);
    }

    #[test]
    fn three_backlogged_agents_each_granted_once() {
        let mut b = bus(3);
        for a in 0..3 {
            b.force_pending(a, req(a));
        }
        let mut granted = Vec::new();
        let mut cycle = 0;
        while b.has_pending() {
            if let Some(d) = b.step(cycle) {
                granted.push(d.msg.src);
            }
            cycle += 1;
        }
        assert_eq!(
            granted,
            vec![Agent::Core(0), Agent::Core(1), Agent::Core(2)]
        );
    }

    #[test]
    fn fairness_under_sustained_backlog() {
        let mut b = bus(4);
        let mut grants = [0u64; 4];
        for cycle in 0..1000 {
            for a in 0..4 {
                if b.pending[a].is_empty() {
                    b.force_pending(a, req(a));
                }
            }
            if let Some(d) = b.step(cycle) {
                match d.msg.src {
                    Agent::Core(i) => grants[i] += 1,
                    Agent::L3 => unreachable!(),
                }
            }
        }
        let min = grants.iter().min().unwrap();
        let max = grants.iter().max().unwrap();
        assert!(max - min <= 1, "grants {grants:?}");
    }

    #[test]
    fn occupancy_windows_never_overlap() {
        let mut rng = crate::util::SplitMix64::new(11);
        let mut b = bus(3);
        let mut windows: Vec<(u64, u64)> = Vec::new();
        for cycle in 0..500 {
            if rng.chance(1, 2) {
                let bytes = [8, 32, 64][rng.below(3) as usize];
                let msg = BusMessage {
                    src: Agent::Core(rng.below(3) as usize),
                    dst: Agent::L3,
                    kind: MessageKind::Data,
                    payload_bytes: bytes,
                };
                if let SendOutcome::Delivered(d) = b.send(msg, cycle) {
                    windows.push((cycle, d));
                }
            }
            if let Some(d) = b.step(cycle) {
                let start = d.delivered_at - b.hop_latency - (d.msg.flits(b.flit_size) - 1);
                windows.push((start, d.delivered_at));
            }
        }
        windows.sort();
        for pair in windows.windows(2) {
            assert!(pair[0].1 <= pair[1].0, "overlap: {:?} then {:?}", pair[0], pair[1]);
        }
    }
}
