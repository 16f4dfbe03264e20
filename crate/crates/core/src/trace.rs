//! Micro-op trace records: the text format, streaming readers, and
//! synthetic microtrace generators.
//!
//! One trace file per thread, named `<benchmark>.t<thread_id>.trace`. Each
//! line is one record:
//!
//! ```text
//! <seq> <pc-hex> <KIND> [d=r<N>] [s=r<N>[,r<N>]] [a=<hex> w=<1|2|4|8>] [t=<hex> k=<0|1>]
//! ```
//!
//! `#` starts a comment. Gzip-compressed traces are accepted transparently
//! (detected by the magic bytes).

use crate::util::SplitMix64;
use std::io::{BufRead, BufReader, Read};
use thiserror::Error;

/// Operation kinds. The compute kinds map one-to-one onto functional-unit
/// kinds; branches and jumps execute on the integer ALU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    IntAlu,
    IntMul,
    IntDiv,
    FpAlu,
    FpMul,
    FpDiv,
    Load,
    Store,
    Branch,
    Jump,
    Nop,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::IntAlu => "INT_ALU",
            OpKind::IntMul => "INT_MUL",
            OpKind::IntDiv => "INT_DIV",
            OpKind::FpAlu => "FP_ALU",
            OpKind::FpMul => "FP_MUL",
            OpKind::FpDiv => "FP_DIV",
            OpKind::Load => "LOAD",
            OpKind::Store => "STORE",
            OpKind::Branch => "BRANCH",
            OpKind::Jump => "JUMP",
            OpKind::Nop => "NOP",
        }
    }

    fn from_name(s: &str) -> Option<OpKind> {
        Some(match s {
            "INT_ALU" => OpKind::IntAlu,
            "INT_MUL" => OpKind::IntMul,
            "INT_DIV" => OpKind::IntDiv,
            "FP_ALU" => OpKind::FpAlu,
            "FP_MUL" => OpKind::FpMul,
            "FP_DIV" => OpKind::FpDiv,
            "LOAD" => OpKind::Load,
            "STORE" => OpKind::Store,
            "BRANCH" => OpKind::Branch,
            "JUMP" => OpKind::Jump,
            "NOP" => OpKind::Nop,
            _ => return None,
        })
    }

    pub fn is_mem(self) -> bool {
        matches!(self, OpKind::Load | OpKind::Store)
    }
}

/// Source register list: at most two architectural register ids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SrcList {
    regs: [u8; 2],
    len: u8,
}

impl SrcList {
    pub const EMPTY: SrcList = SrcList { regs: [0; 2], len: 0 };

    pub fn from_slice(regs: &[u8]) -> SrcList {
        assert!(regs.len() <= 2, "at most two sources");
        let mut s = SrcList::EMPTY;
        for &r in regs {
            s.regs[s.len as usize] = r;
            s.len += 1;
        }
        s
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.regs[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// One trace record. Architectural register ids run 0..=63.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MicroOp {
    pub seq: u64,
    pub pc: u64,
    pub kind: OpKind,
    pub srcs: SrcList,
    pub dst: Option<u8>,
    /// Required iff LOAD/STORE.
    pub mem_addr: Option<u64>,
    /// Access width in bytes, one of {1, 2, 4, 8}; present iff LOAD/STORE.
    pub mem_size: Option<u8>,
    /// Required iff BRANCH.
    pub taken: Option<bool>,
    /// Required iff BRANCH/JUMP.
    pub target: Option<u64>,
}

impl MicroOp {
    fn bare(seq: u64, pc: u64, kind: OpKind) -> MicroOp {
        MicroOp {
            seq,
            pc,
            kind,
            srcs: SrcList::EMPTY,
            dst: None,
            mem_addr: None,
            mem_size: None,
            taken: None,
            target: None,
        }
    }

    /// Enforces the per-kind field rules shared by the parser and the
    /// generators.
    pub fn validate(&self) -> Result<(), RecordError> {
        use OpKind::*;
        let forbid = |present: bool, what: &'static str| {
            if present {
                Err(RecordError::Syntax(format!(
                    "{what} not allowed for {}",
                    self.kind.name()
                )))
            } else {
                Ok(())
            }
        };
        if let Some(d) = self.dst {
            if d > 63 {
                return Err(RecordError::Syntax(format!("register r{d} out of range")));
            }
        }
        for &s in self.srcs.as_slice() {
            if s > 63 {
                return Err(RecordError::Syntax(format!("register r{s} out of range")));
            }
        }
        match self.kind {
            IntAlu | IntMul | IntDiv | FpAlu | FpMul | FpDiv => {
                forbid(self.mem_addr.is_some() || self.mem_size.is_some(), "memory fields")?;
                forbid(self.taken.is_some() || self.target.is_some(), "branch fields")?;
            }
            Load => {
                if self.mem_addr.is_none() {
                    return Err(RecordError::MissingField("a (memory address)"));
                }
                if self.mem_size.is_none() {
                    return Err(RecordError::MissingField("w (access width)"));
                }
                forbid(self.taken.is_some() || self.target.is_some(), "branch fields")?;
            }
            Store => {
                if self.mem_addr.is_none() {
                    return Err(RecordError::MissingField("a (memory address)"));
                }
                if self.mem_size.is_none() {
                    return Err(RecordError::MissingField("w (access width)"));
                }
                forbid(self.dst.is_some(), "destination")?;
                forbid(self.taken.is_some() || self.target.is_some(), "branch fields")?;
            }
            Branch => {
                if self.taken.is_none() {
                    return Err(RecordError::MissingField("k (taken flag)"));
                }
                if self.target.is_none() {
                    return Err(RecordError::MissingField("t (target)"));
                }
                forbid(self.dst.is_some(), "destination")?;
                forbid(self.mem_addr.is_some() || self.mem_size.is_some(), "memory fields")?;
            }
            Jump => {
                if self.target.is_none() {
                    return Err(RecordError::MissingField("t (target)"));
                }
                forbid(self.taken.is_some(), "taken flag")?;
                forbid(self.mem_addr.is_some() || self.mem_size.is_some(), "memory fields")?;
            }
            Nop => {
                forbid(self.dst.is_some(), "destination")?;
                forbid(!self.srcs.is_empty(), "sources")?;
                forbid(self.mem_addr.is_some() || self.mem_size.is_some(), "memory fields")?;
                forbid(self.taken.is_some() || self.target.is_some(), "branch fields")?;
            }
        }
        if let Some(w) = self.mem_size {
            if !matches!(w, 1 | 2 | 4 | 8) {
                return Err(RecordError::Syntax(format!("access width {w} not in {{1,2,4,8}}")));
            }
        }
        Ok(())
    }
}

/// Errors for a single record, without position information.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("unknown operation kind `{0}`")]
    BadEnum(String),
}

/// Stream-level errors, carrying 1-based line numbers.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("line {line}: non-monotonic seq {found} after {prev}")]
    NonMonotonicSeq { line: usize, prev: u64, found: u64 },
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_hex(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    u64::from_str_radix(digits, 16).ok()
}

fn parse_reg(s: &str) -> Result<u8, RecordError> {
    let n = s
        .strip_prefix('r')
        .and_then(|d| d.parse::<u8>().ok())
        .ok_or_else(|| RecordError::Syntax(format!("expected register `r<N>`, got `{s}`")))?;
    if n > 63 {
        return Err(RecordError::Syntax(format!("register r{n} out of range 0..=63")));
    }
    Ok(n)
}

/// Parses one trace line into a [`MicroOp`], enforcing the per-kind field
/// rules. The line must not be empty or a pure comment.
pub fn parse_trace_record(line: &str) -> Result<MicroOp, RecordError> {
    let body = match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    };
    let mut tokens = body.split_whitespace();
    let seq = tokens
        .next()
        .ok_or_else(|| RecordError::Syntax("empty record".into()))?
        .parse::<u64>()
        .map_err(|_| RecordError::Syntax("seq must be a decimal integer".into()))?;
    let pc_tok = tokens
        .next()
        .ok_or_else(|| RecordError::Syntax("missing pc".into()))?;
    let pc = parse_hex(pc_tok)
        .ok_or_else(|| RecordError::Syntax(format!("pc must be 0x-prefixed hex, got `{pc_tok}`")))?;
    let kind_tok = tokens
        .next()
        .ok_or_else(|| RecordError::Syntax("missing operation kind".into()))?;
    let kind = OpKind::from_name(kind_tok).ok_or_else(|| RecordError::BadEnum(kind_tok.into()))?;

    let mut op = MicroOp::bare(seq, pc, kind);
    let mut seen = [false; 6];
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| RecordError::Syntax(format!("expected `key=value`, got `{tok}`")))?;
        let slot = match key {
            "d" => 0,
            "s" => 1,
            "a" => 2,
            "w" => 3,
            "t" => 4,
            "k" => 5,
            _ => return Err(RecordError::Syntax(format!("unknown field `{key}`"))),
        };
        if seen[slot] {
            return Err(RecordError::Syntax(format!("duplicate field `{key}`")));
        }
        seen[slot] = true;
        match key {
            "d" => op.dst = Some(parse_reg(value)?),
            "s" => {
                let mut regs = Vec::new();
                for part in value.split(',') {
                    regs.push(parse_reg(part)?);
                }
                if regs.len() > 2 {
                    return Err(RecordError::Syntax("at most two sources".into()));
                }
                op.srcs = SrcList::from_slice(&regs);
            }
            "a" => {
                op.mem_addr = Some(parse_hex(value).ok_or_else(|| {
                    RecordError::Syntax(format!("address must be 0x-prefixed hex, got `{value}`"))
                })?)
            }
            "w" => {
                let w = value
                    .parse::<u8>()
                    .map_err(|_| RecordError::Syntax(format!("bad access width `{value}`")))?;
                op.mem_size = Some(w);
            }
            "t" => {
                op.target = Some(parse_hex(value).ok_or_else(|| {
                    RecordError::Syntax(format!("target must be 0x-prefixed hex, got `{value}`"))
                })?)
            }
            "k" => {
                op.taken = Some(match value {
                    "0" => false,
                    "1" => true,
                    _ => return Err(RecordError::Syntax(format!("taken flag must be 0 or 1, got `{value}`"))),
                })
            }
            _ => unreachable!(),
        }
    }
    op.validate()?;
    Ok(op)
}

/// Renders a [`MicroOp`] as one trace line; the exact inverse of
/// [`parse_trace_record`].
pub fn format_record(op: &MicroOp) -> String {
    let mut s = format!("{} 0x{:x} {}", op.seq, op.pc, op.kind.name());
    if let Some(d) = op.dst {
        s.push_str(&format!(" d=r{d}"));
    }
    if !op.srcs.is_empty() {
        let regs: Vec<String> = op.srcs.as_slice().iter().map(|r| format!("r{r}")).collect();
        s.push_str(&format!(" s={}", regs.join(",")));
    }
    if let Some(a) = op.mem_addr {
        s.push_str(&format!(" a=0x{a:x}"));
    }
    if let Some(w) = op.mem_size {
        s.push_str(&format!(" w={w}"));
    }
    if let Some(t) = op.target {
        s.push_str(&format!(" t=0x{t:x}"));
    }
    if let Some(k) = op.taken {
        s.push_str(&format!(" k={}", k as u8));
    }
    s
}

enum StreamSource {
    Memory(std::vec::IntoIter<MicroOp>),
    Lines {
        reader: Box<dyn BufRead + Send>,
        line: usize,
    },
}

/// A per-thread ordered micro-op sequence. Yields ops lazily and enforces
/// strictly increasing `seq`. Single-consumer; distinct threads' streams
/// may be read concurrently.
pub struct TraceStream {
    pub thread_id: usize,
    last_seq: Option<u64>,
    source: StreamSource,
}

impl TraceStream {
    pub fn from_ops(ops: Vec<MicroOp>, thread_id: usize) -> TraceStream {
        TraceStream {
            thread_id,
            last_seq: None,
            source: StreamSource::Memory(ops.into_iter()),
        }
    }
}

/// Opens a byte stream of newline-delimited records as a lazy
/// [`TraceStream`]. Gzip input is detected by its magic bytes and
/// decompressed transparently.
pub fn read_trace_stream<R: Read + Send + 'static>(source: R, thread_id: usize) -> TraceStream {
    let mut buffered = BufReader::new(source);
    let is_gzip = matches!(buffered.fill_buf(), Ok(buf) if buf.len() >= 2 && buf[0] == 0x1f && buf[1] == 0x8b);
    let reader: Box<dyn BufRead + Send> = if is_gzip {
        Box::new(BufReader::new(flate2::bufread::GzDecoder::new(buffered)))
    } else {
        Box::new(buffered)
    };
    TraceStream {
        thread_id,
        last_seq: None,
        source: StreamSource::Lines { reader, line: 0 },
    }
}

impl Iterator for TraceStream {
    type Item = Result<MicroOp, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (op, line) = match &mut self.source {
            StreamSource::Memory(iter) => (iter.next()?, 0),
            StreamSource::Lines { reader, line } => loop {
                let mut buf = String::new();
                match reader.read_line(&mut buf) {
                    Ok(0) => return None,
                    Ok(_) => {}
                    Err(e) => return Some(Err(TraceError::Io(e))),
                }
                *line += 1;
                let body = match buf.find('#') {
                    Some(pos) => &buf[..pos],
                    None => &buf[..],
                };
                if body.trim().is_empty() {
                    continue;
                }
                match parse_trace_record(&buf) {
                    Ok(op) => break (op, *line),
                    Err(source) => {
                        return Some(Err(TraceError::Record { line: *line, source }))
                    }
                }
            },
        };
        if let Some(prev) = self.last_seq {
            if op.seq <= prev {
                return Some(Err(TraceError::NonMonotonicSeq {
                    line,
                    prev,
                    found: op.seq,
                }));
            }
        }
        self.last_seq = Some(op.seq);
        Some(Ok(op))
    }
}

/// Synthetic workload shapes used by the oracle test suites and the `gen`
/// CLI subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TracePattern {
    /// Independent integer ALU ops, no shared registers.
    AluIndep,
    /// Integer divides, each reading the previous result.
    DivChain,
    /// Dependent loads: op i's address register is op i-1's destination.
    LoadChain,
    /// Independent loads striding by one cache block.
    StreamLoads,
    /// Conditional branches at one pc with a periodic taken pattern.
    BranchPeriodic,
    /// Two threads alternately storing then loading one shared address.
    MesiPingpong,
}

impl TracePattern {
    pub const ALL: [TracePattern; 6] = [
        TracePattern::AluIndep,
        TracePattern::DivChain,
        TracePattern::LoadChain,
        TracePattern::StreamLoads,
        TracePattern::BranchPeriodic,
        TracePattern::MesiPingpong,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TracePattern::AluIndep => "ALU_INDEP",
            TracePattern::DivChain => "DIV_CHAIN",
            TracePattern::LoadChain => "LOAD_CHAIN",
            TracePattern::StreamLoads => "STREAM_LOADS",
            TracePattern::BranchPeriodic => "BRANCH_PERIODIC",
            TracePattern::MesiPingpong => "MESI_PINGPONG",
        }
    }
}

impl std::str::FromStr for TracePattern {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        TracePattern::ALL
            .iter()
            .copied()
            .find(|p| p.name() == upper)
            .ok_or_else(|| GenError::BadParams(format!("unknown pattern `{s}`")))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("bad generator parameters: {0}")]
    BadParams(String),
}

/// Pattern-specific knobs for [`gen_microtrace`].
#[derive(Clone, Copy, Debug)]
pub struct GenParams {
    /// Taken-pattern period for BRANCH_PERIODIC.
    pub period: u64,
    /// LOAD_CHAIN address pattern: stay within one cache block (true) or
    /// touch a fresh block per load (false).
    pub resident: bool,
    /// Address stride in bytes for STREAM_LOADS and non-resident LOAD_CHAIN.
    pub stride: u64,
    pub base_addr: u64,
    pub base_pc: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            period: 2,
            resident: false,
            stride: 64,
            base_addr: 0x10000,
            base_pc: 0x40_0000,
        }
    }
}

fn rotating_reg(i: u64) -> u8 {
    (1 + (i % 63)) as u8
}

/// Generates the ops for a pattern; one vector per thread.
pub fn gen_ops(pattern: TracePattern, n: u64, params: &GenParams) -> Result<Vec<Vec<MicroOp>>, GenError> {
    if n == 0 {
        return Err(GenError::BadParams("op count must be > 0".into()));
    }
    let p = params;
    let threads = match pattern {
        TracePattern::MesiPingpong => 2,
        _ => 1,
    };
    let mut out = Vec::with_capacity(threads);
    for t in 0..threads as u64 {
        let mut ops = Vec::with_capacity(n as usize);
        for i in 0..n {
            let seq = i + 1;
            let pc = p.base_pc + t * 0x1000 + 4 * i;
            let op = match pattern {
                TracePattern::AluIndep => MicroOp {
                    dst: Some(rotating_reg(i)),
                    srcs: SrcList::from_slice(&[0, 0]),
                    ..MicroOp::bare(seq, pc, OpKind::IntAlu)
                },
                TracePattern::DivChain => MicroOp {
                    dst: Some(rotating_reg(i)),
                    srcs: SrcList::from_slice(&[if i == 0 { 0 } else { rotating_reg(i - 1) }]),
                    ..MicroOp::bare(seq, pc, OpKind::IntDiv)
                },
                TracePattern::LoadChain => {
                    let addr = if p.resident {
                        p.base_addr + (i % 8) * 8
                    } else {
                        p.base_addr + i * p.stride
                    };
                    MicroOp {
                        dst: Some(rotating_reg(i)),
                        srcs: SrcList::from_slice(&[if i == 0 { 0 } else { rotating_reg(i - 1) }]),
                        mem_addr: Some(addr),
                        mem_size: Some(8),
                        ..MicroOp::bare(seq, pc, OpKind::Load)
                    }
                }
                TracePattern::StreamLoads => MicroOp {
                    dst: Some(rotating_reg(i)),
                    srcs: SrcList::from_slice(&[0]),
                    mem_addr: Some(p.base_addr + i * p.stride),
                    mem_size: Some(8),
                    ..MicroOp::bare(seq, pc, OpKind::Load)
                },
                TracePattern::BranchPeriodic => {
                    if p.period == 0 {
                        return Err(GenError::BadParams("period must be > 0".into()));
                    }
                    MicroOp {
                        srcs: SrcList::from_slice(&[0]),
                        taken: Some(i % p.period == 0),
                        target: Some(p.base_pc),
                        ..MicroOp::bare(seq, p.base_pc, OpKind::Branch)
                    }
                }
                TracePattern::MesiPingpong => {
                    if i % 2 == 0 {
                        // Each store consumes the previous load's value, so
                        // ownership genuinely bounces between the threads.
                        MicroOp {
                            srcs: SrcList::from_slice(&[if i == 0 { 0 } else { rotating_reg(i - 1) }]),
                            mem_addr: Some(p.base_addr),
                            mem_size: Some(8),
                            ..MicroOp::bare(seq, pc, OpKind::Store)
                        }
                    } else {
                        MicroOp {
                            dst: Some(rotating_reg(i)),
                            srcs: SrcList::from_slice(&[0]),
                            mem_addr: Some(p.base_addr),
                            mem_size: Some(8),
                            ..MicroOp::bare(seq, pc, OpKind::Load)
                        }
                    }
                }
            };
            ops.push(op);
        }
        out.push(ops);
    }
    Ok(out)
}

/// Generates a synthetic microtrace; one stream per thread (two for
/// MESI_PINGPONG, one otherwise).
pub fn gen_microtrace(
    pattern: TracePattern,
    n: u64,
    params: &GenParams,
) -> Result<Vec<TraceStream>, GenError> {
    Ok(gen_ops(pattern, n, params)?
        .into_iter()
        .enumerate()
        .map(|(t, ops)| TraceStream::from_ops(ops, t))
        .collect())
}

/// Random but well-formed multi-threaded traces for fuzzing. Threads share
/// one small address window so multicore runs exercise coherence. Output is
/// fully determined by `seed`.
pub fn gen_fuzz_traces(seed: u64, n: u64, threads: usize) -> Vec<Vec<MicroOp>> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(threads);
    for t in 0..threads {
        let mut ops = Vec::with_capacity(n as usize);
        for i in 0..n {
            let seq = i + 1;
            let pc = 0x40_0000 + t as u64 * 0x10_0000 + 4 * i;
            let addr = 0x1_0000 + rng.below(256) * 8;
            let dst = Some((rng.below(63) + 1) as u8);
            let srcs = SrcList::from_slice(&[rng.below(64) as u8, rng.below(64) as u8]);
            let roll = rng.below(100);
            let op = if roll < 35 {
                MicroOp { dst, srcs, ..MicroOp::bare(seq, pc, OpKind::IntAlu) }
            } else if roll < 42 {
                MicroOp { dst, srcs, ..MicroOp::bare(seq, pc, OpKind::IntMul) }
            } else if roll < 46 {
                MicroOp { dst, srcs, ..MicroOp::bare(seq, pc, OpKind::IntDiv) }
            } else if roll < 53 {
                MicroOp { dst, srcs, ..MicroOp::bare(seq, pc, OpKind::FpAlu) }
            } else if roll < 58 {
                MicroOp { dst, srcs, ..MicroOp::bare(seq, pc, OpKind::FpMul) }
            } else if roll < 61 {
                MicroOp { dst, srcs, ..MicroOp::bare(seq, pc, OpKind::FpDiv) }
            } else if roll < 76 {
                MicroOp {
                    dst,
                    srcs: SrcList::from_slice(&[rng.below(64) as u8]),
                    mem_addr: Some(addr),
                    mem_size: Some(8),
                    ..MicroOp::bare(seq, pc, OpKind::Load)
                }
            } else if roll < 86 {
                MicroOp {
                    srcs: SrcList::from_slice(&[rng.below(64) as u8]),
                    mem_addr: Some(addr),
                    mem_size: Some(8),
                    ..MicroOp::bare(seq, pc, OpKind::Store)
                }
            } else if roll < 96 {
                MicroOp {
                    srcs: SrcList::from_slice(&[rng.below(64) as u8]),
                    taken: Some(rng.chance(1, 2)),
                    target: Some(0x40_0000 + rng.below(64) * 4),
                    // A handful of distinct branch pcs keeps the predictor busy.
                    ..MicroOp::bare(seq, 0x40_0000 + rng.below(16) * 4, OpKind::Branch)
                }
            } else if roll < 98 {
                MicroOp {
                    target: Some(0x40_0000),
                    ..MicroOp::bare(seq, pc, OpKind::Jump)
                }
            } else {
                MicroOp::bare(seq, pc, OpKind::Nop)
            };
            ops.push(op);
        }
        out.push(ops);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    #[test]
    fn parses_alu_record() {
        let op = parse_trace_record("1 0x400000 INT_ALU d=r3 s=r1,r2").unwrap();
        assert_eq!(op.seq, 1);
        assert_eq!(op.pc, 0x40_0000);
        assert_eq!(op.kind, OpKind::IntAlu);
        assert_eq!(op.dst, Some(3));
        assert_eq!(op.srcs.as_slice(), &[1, 2]);
    }

    #[test]
    fn parses_load_record() {
        let op = parse_trace_record("2 0x400004 LOAD d=r4 s=r3 a=0x10000 w=8").unwrap();
        assert_eq!(op.kind, OpKind::Load);
        assert_eq!(op.mem_addr, Some(0x10000));
        assert_eq!(op.mem_size, Some(8));
    }

    #[test]
    fn parses_branch_record() {
        let op = parse_trace_record("3 0x400008 BRANCH s=r4 t=0x400000 k=1").unwrap();
        assert_eq!(op.kind, OpKind::Branch);
        assert_eq!(op.taken, Some(true));
        assert_eq!(op.target, Some(0x40_0000));
    }

    #[test]
    fn load_without_address_is_missing_field() {
        assert!(matches!(
            parse_trace_record("1 0x400000 LOAD d=r4 w=8"),
            Err(RecordError::MissingField(_))
        ));
    }

    #[test]
    fn unknown_kind_is_bad_enum() {
        assert!(matches!(
            parse_trace_record("1 0x400000 LOADX a=0x0 w=8"),
            Err(RecordError::BadEnum(_))
        ));
    }

    #[test]
    fn store_with_dst_is_rejected() {
        assert!(parse_trace_record("1 0x400000 STORE d=r1 a=0x0 w=8").is_err());
    }

    #[test]
    fn bad_width_is_rejected() {
        assert!(parse_trace_record("1 0x400000 LOAD a=0x0 w=3").is_err());
    }

    #[test]
    fn empty_stream() {
        let stream = read_trace_stream(Cursor::new(""), 0);
        assert_eq!(stream.count(), 0);
    }

    #[test]
    fn three_valid_lines_in_order() {
        let text = "# hdr\n1 0x400000 INT_ALU d=r1\n2 0x400004 NOP\n3 0x400008 INT_ALU d=r2\n";
        let ops: Result<Vec<_>, _> = read_trace_stream(Cursor::new(text), 0).collect();
        let ops = ops.unwrap();
        assert_eq!(ops.len(), 3);
        assert_eq!(ops.iter().map(|o| o.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn non_monotonic_seq_reports_line() {
        let text = "1 0x400000 NOP\n3 0x400004 NOP\n2 0x400008 NOP\n";
        let results: Vec<_> = read_trace_stream(Cursor::new(text), 0).collect();
        assert!(results[0].is_ok() && results[1].is_ok());
        match &results[2] {
            Err(TraceError::NonMonotonicSeq { line, prev, found }) => {
                assert_eq!((*line, *prev, *found), (3, 3, 2));
            }
            other => panic!("expected NonMonotonicSeq, got {other:?}"),
        }
    }

    #[test]
    fn gzip_stream_is_transparent() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;

        let text = "1 0x400000 INT_ALU d=r1\n2 0x400004 NOP\n";
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(text.as_bytes()).unwrap();
        let gz = enc.finish().unwrap();
        let ops: Result<Vec<_>, _> = read_trace_stream(Cursor::new(gz), 0).collect();
        assert_eq!(ops.unwrap().len(), 2);
    }

    #[test]
    fn alu_indep_example() {
        let ops = &gen_ops(TracePattern::AluIndep, 4, &GenParams::default()).unwrap()[0];
        let dsts: Vec<_> = ops.iter().map(|o| o.dst.unwrap()).collect();
        assert_eq!(dsts, vec![1, 2, 3, 4]);
        assert!(ops.iter().all(|o| o.srcs.as_slice() == [0, 0]));
        assert!(ops.iter().all(|o| o.kind == OpKind::IntAlu));
    }

    #[test]
    fn div_chain_example() {
        let ops = &gen_ops(TracePattern::DivChain, 3, &GenParams::default()).unwrap()[0];
        assert_eq!(ops[0].srcs.as_slice(), &[0]);
        assert_eq!(ops[1].srcs.as_slice(), &[1]);
        assert_eq!(ops[2].srcs.as_slice(), &[2]);
        let dsts: Vec<_> = ops.iter().map(|o| o.dst.unwrap()).collect();
        assert_eq!(dsts, vec![1, 2, 3]);
    }

    #[test]
    fn branch_periodic_example() {
        let params = GenParams { period: 2, ..GenParams::default() };
        let ops = &gen_ops(TracePattern::BranchPeriodic, 6, &params).unwrap()[0];
        let pattern: Vec<bool> = ops.iter().map(|o| o.taken.unwrap()).collect();
        assert_eq!(pattern, vec![true, false, true, false, true, false]);
        assert!(ops.windows(2).all(|w| w[0].pc == w[1].pc));
    }

    #[test]
    fn zero_ops_is_bad_params() {
        assert!(matches!(
            gen_ops(TracePattern::AluIndep, 0, &GenParams::default()),
            Err(GenError::BadParams(_))
        ));
    }

    #[test]
    fn generated_traces_satisfy_invariants() {
        for pattern in TracePattern::ALL {
            for n in [1, 2, 7, 64, 200] {
                for resident in [false, true] {
                    let params = GenParams { resident, ..GenParams::default() };
                    let threads = gen_ops(pattern, n, &params).unwrap();
                    for ops in &threads {
                        assert_eq!(ops.len(), n as usize);
                        for op in ops {
                            op.validate().unwrap();
                        }
                        assert!(ops.windows(2).all(|w| w[0].seq < w[1].seq));
                    }
                }
            }
        }
    }

    #[test]
    fn fuzz_traces_satisfy_invariants() {
        for seed in 0..5 {
            for ops in gen_fuzz_traces(seed, 500, 3) {
                for op in &ops {
                    op.validate().unwrap();
                }
                assert!(ops.windows(2).all(|w| w[0].seq < w[1].seq));
            }
        }
    }

    fn arb_microop() -> impl Strategy<Value = MicroOp> {
        (0u64..1_000_000, any::<u64>(), 0usize..11).prop_flat_map(|(seq, pc, kind_idx)| {
            let kinds = [
                OpKind::IntAlu,
                OpKind::IntMul,
                OpKind::IntDiv,
                OpKind::FpAlu,
                OpKind::FpMul,
                OpKind::FpDiv,
                OpKind::Load,
                OpKind::Store,
                OpKind::Branch,
                OpKind::Jump,
                OpKind::Nop,
            ];
            let kind = kinds[kind_idx];
            (
                Just(MicroOp::bare(seq + 1, pc, kind)),
                proptest::collection::vec(0u8..64, 0..=2),
                proptest::option::of(0u8..64),
                any::<u64>(),
                prop_oneof![Just(1u8), Just(2), Just(4), Just(8)],
                any::<bool>(),
                any::<u64>(),
            )
                .prop_map(|(mut op, srcs, dst, addr, width, taken, target)| {
                    use OpKind::*;
                    match op.kind {
                        IntAlu | IntMul | IntDiv | FpAlu | FpMul | FpDiv => {
                            op.srcs = SrcList::from_slice(&srcs);
                            op.dst = dst;
                        }
                        Load => {
                            op.srcs = SrcList::from_slice(&srcs);
                            op.dst = dst;
                            op.mem_addr = Some(addr);
                            op.mem_size = Some(width);
                        }
                        Store => {
                            op.srcs = SrcList::from_slice(&srcs);
                            op.mem_addr = Some(addr);
                            op.mem_size = Some(width);
                        }
                        Branch => {
                            op.srcs = SrcList::from_slice(&srcs);
                            op.taken = Some(taken);
                            op.target = Some(target);
                        }
                        Jump => {
                            op.srcs = SrcList::from_slice(&srcs);
                            op.dst = dst;
                            op.target = Some(target);
                        }
                        Nop => {}
                    }
                    op
                })
        })
    }

    proptest! {
        #[test]
        fn parse_format_round_trip(op in arb_microop()) {
            prop_assert_eq!(op.validate(), Ok(()));
            let line = format_record(&op);
            let parsed = parse_trace_record(&line).unwrap();
            prop_assert_eq!(parsed, op);
        }
    }
}
