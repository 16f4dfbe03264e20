//! TAGE branch predictor: a bimodal base table plus tagged tables indexed
//! with geometrically increasing global-history lengths.
//!
//! Prediction is pure; training happens at retirement, in program order, so
//! the global history register only ever contains committed outcomes and no
//! speculative-history repair is needed.
//!
//! # Index and tag hashing
//!
//! All hashing is folded XOR. `fold(v, b)` XOR-compresses a wide value into
//! `b` bits by repeatedly XORing `b`-bit chunks. For tagged table `i` with
//! history length `L_i`, table size `N` and `B = ceil(log2(N))`:
//!
//! * `index_i = (fold(pc >> 2, B) ^ fold(ghr[0..L_i], B) ^ fold(path, B) ^ i) mod N`
//! * `tag_i   = (fold(pc >> 2, T) ^ fold(ghr[0..L_i], T) ^ (fold(ghr[0..L_i], T-1) << 1)) mod 2^T`,
//!   remapped to 1 if the result is 0 (tag 0 marks an empty slot)
//!
//! where `T` is `tag_bits`, `ghr[0..L]` are the `L` most recent outcomes and
//! `path` is a 16-bit shift register of branch-address bits. The base table
//! is indexed by `(pc >> 2) mod base_entries` and uses 2-bit counters.

use thiserror::Error;

/// Geometry of the predictor. Defaults: 4 tagged tables with history
/// lengths {5, 15, 44, 130}, 1024 entries each, 10-bit tags, 3-bit
/// prediction counters, 2-bit useful counters, and a 4096-entry bimodal
/// base table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TageConfig {
    pub num_tagged_tables: usize,
    /// Strictly increasing history lengths, one per tagged table.
    pub history_lengths: Vec<u32>,
    /// Entries per tagged table.
    pub table_entries: usize,
    pub tag_bits: u32,
    /// Width of the tagged tables' saturating prediction counters.
    pub counter_bits: u32,
    pub useful_bits: u32,
    /// Entries in the bimodal base table (2-bit counters).
    pub base_entries: usize,
}

impl Default for TageConfig {
    fn default() -> Self {
        Self {
            num_tagged_tables: 4,
            history_lengths: vec![5, 15, 44, 130],
            table_entries: 1024,
            tag_bits: 10,
            counter_bits: 3,
            useful_bits: 2,
            base_entries: 4096,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TageError {
    #[error("bad predictor config: {0}")]
    BadConfig(String),
}

/// Which table supplied a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provider {
    Base,
    Table(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub taken: bool,
    pub provider: Provider,
    /// What the next-longest matching component would have predicted.
    pub alt_pred: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
struct TageEntry {
    /// 0 means empty; live tags are remapped away from 0.
    tag: u16,
    ctr: u8,
    useful: u8,
}

/// Committed global branch history, newest outcome in bit 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct GlobalHistory {
    words: Vec<u64>,
}

impl GlobalHistory {
    fn new(max_len: u32) -> Self {
        let words = (max_len as usize).div_ceil(64) + 1;
        Self {
            words: vec![0; words.max(1)],
        }
    }

    fn shift_in(&mut self, taken: bool) {
        for i in (1..self.words.len()).rev() {
            self.words[i] = (self.words[i] << 1) | (self.words[i - 1] >> 63);
        }
        self.words[0] = (self.words[0] << 1) | (taken as u64);
    }

    /// Extracts up to 64 bits starting at bit `start` (0 = newest).
    fn get_bits(&self, start: u32, count: u32) -> u64 {
        debug_assert!((1..=64).contains(&count));
        let word = (start / 64) as usize;
        let off = start % 64;
        let mut val = self.words.get(word).copied().unwrap_or(0) >> off;
        if off > 0 {
            if let Some(hi) = self.words.get(word + 1) {
                val |= hi << (64 - off);
            }
        }
        if count < 64 {
            val &= (1u64 << count) - 1;
        }
        val
    }

    /// XOR-folds the newest `len` history bits down to `out_bits` bits.
    fn fold(&self, len: u32, out_bits: u32) -> u64 {
        if out_bits == 0 || len == 0 {
            return 0;
        }
        let chunk = out_bits.min(64);
        let mut acc = 0u64;
        let mut pos = 0;
        while pos < len {
            let take = chunk.min(len - pos);
            acc ^= self.get_bits(pos, take);
            pos += take;
        }
        acc & mask(out_bits)
    }
}

fn mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// XOR-folds a 64-bit value down to `bits` bits.
fn fold_u64(mut v: u64, bits: u32) -> u64 {
    if bits == 0 {
        return 0;
    }
    if bits >= 64 {
        return v;
    }
    let m = mask(bits);
    let mut acc = 0;
    while v != 0 {
        acc ^= v & m;
        v >>= bits;
    }
    acc
}

/// Full predictor state for one core.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TageState {
    cfg_tables: usize,
    hist_lengths: Vec<u32>,
    table_entries: usize,
    tag_bits: u32,
    counter_bits: u32,
    useful_bits: u32,
    base: Vec<u8>,
    tables: Vec<Vec<TageEntry>>,
    history: GlobalHistory,
    /// 16-bit path register of branch-address bits, for index hashing.
    path: u64,
}

/// Builds a fresh predictor: base counters weakly not-taken, tagged entries
/// empty, history clear.
pub fn tage_new(cfg: &TageConfig) -> Result<TageState, TageError> {
    if cfg.num_tagged_tables != cfg.history_lengths.len() {
        return Err(TageError::BadConfig(format!(
            "num_tagged_tables {} != history_lengths len {}",
            cfg.num_tagged_tables,
            cfg.history_lengths.len()
        )));
    }
    if !cfg.history_lengths.windows(2).all(|w| w[0] < w[1]) {
        return Err(TageError::BadConfig(
            "history_lengths must be strictly increasing".into(),
        ));
    }
    if cfg.history_lengths.contains(&0) {
        return Err(TageError::BadConfig("history lengths must be > 0".into()));
    }
    if cfg.table_entries == 0 || cfg.base_entries == 0 {
        return Err(TageError::BadConfig("tables must be non-empty".into()));
    }
    if !(1..=8).contains(&cfg.counter_bits)
        || !(1..=8).contains(&cfg.useful_bits)
        || !(1..=16).contains(&cfg.tag_bits)
    {
        return Err(TageError::BadConfig(
            "counter_bits/useful_bits in 1..=8, tag_bits in 1..=16".into(),
        ));
    }
    let max_len = cfg.history_lengths.last().copied().unwrap_or(1);
    Ok(TageState {
        cfg_tables: cfg.num_tagged_tables,
        hist_lengths: cfg.history_lengths.clone(),
        table_entries: cfg.table_entries,
        tag_bits: cfg.tag_bits,
        counter_bits: cfg.counter_bits,
        useful_bits: cfg.useful_bits,
        base: vec![1; cfg.base_entries], // 2-bit weakly not-taken
        tables: vec![vec![TageEntry::default(); cfg.table_entries]; cfg.num_tagged_tables],
        history: GlobalHistory::new(max_len),
        path: 0,
    })
}

impl TageState {
    fn table_bits(&self) -> u32 {
        usize::BITS - (self.table_entries - 1).leading_zeros()
    }

    fn index(&self, pc: u64, table: usize) -> usize {
        let bits = self.table_bits().max(1);
        let h = self.history.fold(self.hist_lengths[table], bits);
        let p = fold_u64(pc >> 2, bits);
        let path = fold_u64(self.path & 0xffff, bits);
        ((p ^ h ^ path ^ table as u64) % self.table_entries as u64) as usize
    }

    fn tag(&self, pc: u64, table: usize) -> u16 {
        let len = self.hist_lengths[table];
        let t = fold_u64(pc >> 2, self.tag_bits)
            ^ self.history.fold(len, self.tag_bits)
            ^ (self.history.fold(len, self.tag_bits.saturating_sub(1).max(1)) << 1);
        let t = (t & mask(self.tag_bits)) as u16;
        if t == 0 {
            1
        } else {
            t
        }
    }

    fn base_index(&self, pc: u64) -> usize {
        ((pc >> 2) % self.base.len() as u64) as usize
    }

    fn ctr_taken(&self, ctr: u8) -> bool {
        ctr >= 1 << (self.counter_bits - 1)
    }

    fn ctr_max(&self) -> u8 {
        (mask(self.counter_bits)) as u8
    }

    fn useful_max(&self) -> u8 {
        (mask(self.useful_bits)) as u8
    }

    /// Longest-history tag match, if any, together with the next match.
    fn matches(&self, pc: u64) -> (Option<usize>, Option<usize>) {
        let mut provider = None;
        let mut alt = None;
        for i in (0..self.cfg_tables).rev() {
            let e = &self.tables[i][self.index(pc, i)];
            if e.tag != 0 && e.tag == self.tag(pc, i) {
                if provider.is_none() {
                    provider = Some(i);
                } else {
                    alt = Some(i);
                    break;
                }
            }
        }
        (provider, alt)
    }
}

/// Looks up a prediction for `pc`. Pure: the state is not modified.
pub fn tage_predict(state: &TageState, pc: u64) -> Prediction {
    let (provider, alt) = state.matches(pc);
    let base_taken = state.base[state.base_index(pc)] >= 2;
    let alt_pred = match alt {
        Some(i) => state.ctr_taken(state.tables[i][state.index(pc, i)].ctr),
        None => base_taken,
    };
    match provider {
        Some(i) => Prediction {
            taken: state.ctr_taken(state.tables[i][state.index(pc, i)].ctr),
            provider: Provider::Table(i),
            alt_pred,
        },
        None => Prediction {
            taken: base_taken,
            provider: Provider::Base,
            alt_pred: base_taken,
        },
    }
}

/// Trains the predictor with the resolved outcome of the branch at `pc`.
/// `pred` must be the prediction previously returned for this branch on
/// this state lineage.
pub fn tage_update(state: &mut TageState, pc: u64, outcome: bool, pred: &Prediction) {
    match pred.provider {
        Provider::Base => {
            let idx = state.base_index(pc);
            let c = &mut state.base[idx];
            if outcome {
                *c = (*c + 1).min(3);
            } else {
                *c = c.saturating_sub(1);
            }
        }
        Provider::Table(i) => {
            let idx = state.index(pc, i);
            let max = state.ctr_max();
            let useful_max = state.useful_max();
            let e = &mut state.tables[i][idx];
            if outcome {
                e.ctr = (e.ctr + 1).min(max);
            } else {
                e.ctr = e.ctr.saturating_sub(1);
            }
            // The useful counter tracks whether the provider beats its
            // alternative.
            if pred.taken != pred.alt_pred {
                if pred.taken == outcome {
                    e.useful = (e.useful + 1).min(useful_max);
                } else {
                    e.useful = e.useful.saturating_sub(1);
                }
            }
        }
    }

    if pred.taken != outcome {
        let start = match pred.provider {
            Provider::Base => 0,
            Provider::Table(i) => i + 1,
        };
        let mut allocated = false;
        for i in start..state.cfg_tables {
            let idx = state.index(pc, i);
            let tag = state.tag(pc, i);
            let weak_taken = 1u8 << (state.counter_bits - 1);
            let e = &mut state.tables[i][idx];
            if e.useful == 0 {
                e.tag = tag;
                e.ctr = if outcome { weak_taken } else { weak_taken - 1 };
                e.useful = 0;
                allocated = true;
                break;
            }
        }
        if !allocated {
            for i in start..state.cfg_tables {
                let idx = state.index(pc, i);
                let e = &mut state.tables[i][idx];
                e.useful = e.useful.saturating_sub(1);
            }
        }
    }

    state.history.shift_in(outcome);
    state.path = ((state.path << 1) | ((pc >> 2) & 1)) & 0xffff;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::SplitMix64;
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    fn digest(state: &TageState) -> u64 {
        let mut h = DefaultHasher::new();
        state.hash(&mut h);
        h.finish()
    }

    #[test]
    fn fresh_state_predicts_not_taken() {
        let state = tage_new(&TageConfig::default()).unwrap();
        let p = tage_predict(&state, 0x40_0000);
        assert!(!p.taken);
        assert_eq!(p.provider, Provider::Base);
    }

    #[test]
    fn default_geometry() {
        let cfg = TageConfig::default();
        assert_eq!(cfg.num_tagged_tables, 4);
        assert_eq!(cfg.history_lengths, vec![5, 15, 44, 130]);
        let state = tage_new(&cfg).unwrap();
        assert_eq!(state.tables.len(), 4);
        assert_eq!(state.base.len(), 4096);
    }

    #[test]
    fn decreasing_history_is_bad_config() {
        let cfg = TageConfig {
            history_lengths: vec![130, 44, 15, 5],
            ..TageConfig::default()
        };
        assert!(matches!(tage_new(&cfg), Err(TageError::BadConfig(_))));
    }

    #[test]
    fn taken_updates_flip_prediction() {
        let mut state = tage_new(&TageConfig::default()).unwrap();
        let pc = 0x40_0000;
        for _ in 0..10 {
            let p = tage_predict(&state, pc);
            tage_update(&mut state, pc, true, &p);
        }
        assert!(tage_predict(&state, pc).taken);
    }

    #[test]
    fn fresh_taken_update_increments_base_counter() {
        let mut state = tage_new(&TageConfig::default()).unwrap();
        let pc = 0x40_0000;
        let idx = state.base_index(pc);
        assert_eq!(state.base[idx], 1);
        let p = tage_predict(&state, pc);
        tage_update(&mut state, pc, true, &p);
        assert_eq!(state.base[idx], 2);
    }

    #[test]
    fn saturated_counter_is_unchanged_by_further_taken() {
        let mut state = tage_new(&TageConfig::default()).unwrap();
        let pc = 0x40_0000;
        for _ in 0..20 {
            let p = tage_predict(&state, pc);
            tage_update(&mut state, pc, true, &p);
        }
        let before = state.clone();
        let p = tage_predict(&state, pc);
        assert!(p.taken);
        tage_update(&mut state, pc, true, &p);
        match p.provider {
            Provider::Base => {
                assert_eq!(state.base[state.base_index(pc)], before.base[before.base_index(pc)]);
            }
            Provider::Table(i) => {
                let idx = before.index(pc, i);
                assert_eq!(state.tables[i][idx].ctr, before.tables[i][idx].ctr);
            }
        }
    }

    #[test]
    fn correct_prediction_never_allocates() {
        let mut state = tage_new(&TageConfig::default()).unwrap();
        let pc = 0x1234_5678;
        // Train the base predictor until it is correct, then confirm a
        // correct-outcome update leaves the tagged tables untouched.
        for _ in 0..3 {
            let p = tage_predict(&state, pc);
            tage_update(&mut state, pc, false, &p);
        }
        let p = tage_predict(&state, pc);
        assert!(!p.taken);
        let live_before: usize = state
            .tables
            .iter()
            .map(|t| t.iter().filter(|e| e.tag != 0).count())
            .sum();
        tage_update(&mut state, pc, false, &p);
        let live_after: usize = state
            .tables
            .iter()
            .map(|t| t.iter().filter(|e| e.tag != 0).count())
            .sum();
        assert_eq!(live_before, live_after);
    }

    #[test]
    fn predict_is_pure() {
        let mut state = tage_new(&TageConfig::default()).unwrap();
        let mut rng = SplitMix64::new(42);
        for _ in 0..2000 {
            let pc = rng.below(1 << 20) << 2;
            let before = digest(&state);
            let p = tage_predict(&state, pc);
            assert_eq!(digest(&state), before);
            tage_update(&mut state, pc, rng.chance(1, 2), &p);
        }
    }

    #[test]
    fn counter_bounds_hold_under_fuzz() {
        let mut state = tage_new(&TageConfig::default()).unwrap();
        let mut rng = SplitMix64::new(7);
        let ctr_max = state.ctr_max();
        let useful_max = state.useful_max();
        for _ in 0..100_000 {
            let pc = rng.below(4096) << 2;
            let p = tage_predict(&state, pc);
            tage_update(&mut state, pc, rng.chance(1, 3), &p);
        }
        assert!(state.base.iter().all(|&c| c <= 3));
        for t in &state.tables {
            assert!(t.iter().all(|e| e.ctr <= ctr_max && e.useful <= useful_max));
        }
    }

    #[test]
    fn always_taken_accuracy_never_regresses() {
        let mut state = tage_new(&TageConfig::default()).unwrap();
        let pc = 0x40_1000;
        let mut outcomes = Vec::new();
        for _ in 0..1000 {
            let p = tage_predict(&state, pc);
            outcomes.push(p.taken);
            tage_update(&mut state, pc, true, &p);
        }
        let first_correct = outcomes.iter().position(|&t| t).unwrap();
        assert!(first_correct < 10);
        assert!(outcomes[first_correct..].iter().all(|&t| t));
    }

    #[test]
    fn period_two_pattern_is_mastered() {
        let cfg = TageConfig::default();
        let mut state = tage_new(&cfg).unwrap();
        let pc = 0x40_2000;
        let warmup = 10 * cfg.table_entries;
        for i in 0..warmup {
            let p = tage_predict(&state, pc);
            tage_update(&mut state, pc, i % 2 == 0, &p);
        }
        let mut correct = 0;
        let trials = 2000;
        for i in warmup..warmup + trials {
            let p = tage_predict(&state, pc);
            let outcome = i % 2 == 0;
            if p.taken == outcome {
                correct += 1;
            }
            tage_update(&mut state, pc, outcome, &p);
        }
        assert!(
            correct as f64 / trials as f64 >= 0.99,
            "accuracy {}/{trials}",
            correct
        );
    }

    #[test]
    fn history_fold_matches_naive_reference() {
        let mut hist = GlobalHistory::new(130);
        let mut bits: Vec<bool> = Vec::new();
        let mut rng = SplitMix64::new(3);
        for _ in 0..300 {
            let b = rng.chance(1, 2);
            hist.shift_in(b);
            bits.insert(0, b);
            for (len, out) in [(5u32, 10u32), (15, 10), (44, 9), (130, 11)] {
                let take = (len as usize).min(bits.len());
                let mut naive = 0u64;
                for (i, &bit) in bits[..take].iter().enumerate() {
                    if bit {
                        let chunk_pos = (i as u32) % out;
                        naive ^= 1u64 << chunk_pos;
                    }
                }
                assert_eq!(hist.fold(len, out), naive, "len={len} out={out}");
            }
        }
    }
}
