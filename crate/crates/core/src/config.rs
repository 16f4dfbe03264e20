//! Machine description: types, Sandy Bridge-class defaults, a sectioned
//! key-value config format (parser + writer), and structural validation.
//!
//! Config files are flat UTF-8 text with `[section]` headers and
//! `key = value` lines. Sections: `[machine]`, `[pipeline]`, `[fu.<kind>]`,
//! `[cache.<level>]`, `[noc]`, `[predictor]`. `#` starts a comment. Sizes
//! accept `kB`/`MB` suffixes (powers of two, kB = 1024). Every key overlays
//! the corresponding default; unknown keys are rejected.

use crate::predictor::TageConfig;
use thiserror::Error;

/// Functional-unit kinds. Every micro-op that executes in a functional unit
/// maps to exactly one of these (branches and jumps use the integer ALU).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FuKind {
    IntAlu,
    IntMul,
    IntDiv,
    FpAlu,
    FpMul,
    FpDiv,
}

impl FuKind {
    pub const ALL: [FuKind; 6] = [
        FuKind::IntAlu,
        FuKind::IntMul,
        FuKind::IntDiv,
        FuKind::FpAlu,
        FuKind::FpMul,
        FuKind::FpDiv,
    ];

    pub fn index(self) -> usize {
        match self {
            FuKind::IntAlu => 0,
            FuKind::IntMul => 1,
            FuKind::IntDiv => 2,
            FuKind::FpAlu => 3,
            FuKind::FpMul => 4,
            FuKind::FpDiv => 5,
        }
    }

    /// Lower-snake-case name used in config sections (`[fu.int_alu]`).
    pub fn name(self) -> &'static str {
        match self {
            FuKind::IntAlu => "int_alu",
            FuKind::IntMul => "int_mul",
            FuKind::IntDiv => "int_div",
            FuKind::FpAlu => "fp_alu",
            FuKind::FpMul => "fp_mul",
            FuKind::FpDiv => "fp_div",
        }
    }

    fn from_name(s: &str) -> Option<FuKind> {
        FuKind::ALL.iter().copied().find(|k| k.name() == s)
    }

    /// Whether results of this unit kind land in the floating-point
    /// physical register file.
    pub fn is_fp(self) -> bool {
        matches!(self, FuKind::FpAlu | FuKind::FpMul | FuKind::FpDiv)
    }
}

/// Cache levels in the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CacheLevelId {
    L1I,
    L1D,
    L2,
    L3,
}

impl CacheLevelId {
    pub const ALL: [CacheLevelId; 4] = [
        CacheLevelId::L1I,
        CacheLevelId::L1D,
        CacheLevelId::L2,
        CacheLevelId::L3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CacheLevelId::L1I => "l1i",
            CacheLevelId::L1D => "l1d",
            CacheLevelId::L2 => "l2",
            CacheLevelId::L3 => "l3",
        }
    }

    fn from_name(s: &str) -> Option<CacheLevelId> {
        CacheLevelId::ALL.iter().copied().find(|l| l.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteMode {
    WriteThrough,
    WriteBack,
}

impl WriteMode {
    fn name(self) -> &'static str {
        match self {
            WriteMode::WriteThrough => "write_through",
            WriteMode::WriteBack => "write_back",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Bus,
}

/// Core pipeline sizing. All quantities are entries or cycles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub retire_width: u64,
    pub issue_width: u64,
    pub rob_size: u64,
    pub iw_size: u64,
    pub load_queue_size: u64,
    pub store_queue_size: u64,
    pub int_phys_regs: u64,
    pub fp_phys_regs: u64,
    pub bmispred_penalty: u64,
    pub frontend_depth: u64,
    pub itlb_entries: u64,
    pub dtlb_entries: u64,
    pub tlb_miss_penalty: u64,
}

/// One functional-unit class: how many units exist and their timing.
/// `recip_throughput` is the minimum number of cycles between successive
/// issues to one unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FunctionalUnitSpec {
    pub kind: FuKind,
    pub count: u64,
    pub latency: u64,
    pub recip_throughput: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheConfig {
    pub level: CacheLevelId,
    pub size: u64,
    pub block_size: u64,
    pub associativity: u64,
    pub latency: u64,
    pub write_mode: WriteMode,
    pub shared: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NocConfig {
    pub topology: Topology,
    pub hop_latency: u64,
    pub flit_size: u64,
}

/// Complete machine description. Immutable once built; safe to share
/// read-only across concurrent simulation instances.
#[derive(Clone, Debug, PartialEq)]
pub struct MachineConfig {
    pub num_cores: u64,
    /// Core clock in Hz. Metadata only: simulation is in cycles, seconds
    /// appear only in reports (cycles / frequency).
    pub frequency_hz: u64,
    pub pipeline: PipelineConfig,
    /// Exactly one spec per `FuKind`.
    pub fus: Vec<FunctionalUnitSpec>,
    /// Exactly one config per `CacheLevelId`.
    pub caches: Vec<CacheConfig>,
    /// Flat main-memory latency in cycles.
    pub mem_latency: u64,
    pub noc: NocConfig,
    pub predictor: TageConfig,
}

impl MachineConfig {
    pub fn fu(&self, kind: FuKind) -> &FunctionalUnitSpec {
        self.fus
            .iter()
            .find(|f| f.kind == kind)
            .expect("one functional-unit spec per kind")
    }

    pub fn cache(&self, level: CacheLevelId) -> &CacheConfig {
        self.caches
            .iter()
            .find(|c| c.level == level)
            .expect("one cache config per level")
    }

    fn fu_mut(&mut self, kind: FuKind) -> &mut FunctionalUnitSpec {
        self.fus.iter_mut().find(|f| f.kind == kind).unwrap()
    }

    fn cache_mut(&mut self, level: CacheLevelId) -> &mut CacheConfig {
        self.caches.iter_mut().find(|c| c.level == level).unwrap()
    }
}

/// The default machine: a 12-core 2 GHz Sandy Bridge-class server.
///
/// Pipeline: 4-wide retire, 6-wide issue, 168-entry ROB, 54-entry issue
/// window, 64-entry load and store queues, 160 integer / 144 FP physical
/// registers, 8-cycle branch-mispredict penalty, 128-entry TLBs. Caches:
/// 32 kB write-through L1i/L1d, 256 kB write-back private L2, 15 MB shared
/// L3, all 8-way with 64-byte blocks; 200-cycle main memory behind a
/// 1-cycle bus with 32-byte flits.
pub fn default_sandybridge() -> MachineConfig {
    let fu = |kind, count, latency, recip_throughput| FunctionalUnitSpec {
        kind,
        count,
        latency,
        recip_throughput,
    };
    let cache = |level, size, latency, write_mode, shared| CacheConfig {
        level,
        size,
        block_size: 64,
        associativity: 8,
        latency,
        write_mode,
        shared,
    };
    MachineConfig {
        num_cores: 12,
        frequency_hz: 2_000_000_000,
        pipeline: PipelineConfig {
            retire_width: 4,
            issue_width: 6,
            rob_size: 168,
            iw_size: 54,
            load_queue_size: 64,
            store_queue_size: 64,
            int_phys_regs: 160,
            fp_phys_regs: 144,
            bmispred_penalty: 8,
            frontend_depth: 5,
            itlb_entries: 128,
            dtlb_entries: 128,
            tlb_miss_penalty: 30,
        },
        fus: vec![
            fu(FuKind::IntAlu, 3, 1, 1),
            fu(FuKind::IntMul, 1, 3, 1),
            fu(FuKind::IntDiv, 1, 21, 12),
            fu(FuKind::FpAlu, 1, 3, 1),
            fu(FuKind::FpMul, 1, 5, 1),
            fu(FuKind::FpDiv, 1, 24, 12),
        ],
        caches: vec![
            cache(CacheLevelId::L1I, 32 * 1024, 3, WriteMode::WriteThrough, false),
            cache(CacheLevelId::L1D, 32 * 1024, 3, WriteMode::WriteThrough, false),
            cache(CacheLevelId::L2, 256 * 1024, 6, WriteMode::WriteBack, false),
            cache(CacheLevelId::L3, 15 * 1024 * 1024, 29, WriteMode::WriteBack, true),
        ],
        mem_latency: 200,
        noc: NocConfig {
            topology: Topology::Bus,
            hop_latency: 1,
            flit_size: 32,
        },
        predictor: TageConfig::default(),
    }
}

/// Errors from [`parse_config`]. Every variant carries the 1-based line
/// number of the offending input line.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` expects {expected}")]
    TypeMismatch {
        line: usize,
        key: String,
        expected: &'static str,
    },
}

/// One failed structural invariant, naming the field and the violated rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Parses a config document, applying every present key over
/// [`default_sandybridge`]. The empty document yields the defaults.
pub fn parse_config(text: &str) -> Result<MachineConfig, ConfigError> {
    let mut cfg = default_sandybridge();
    let mut section: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: "unterminated section header".into(),
            })?;
            let name = name.trim();
            if !known_section(name) {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: name.to_string(),
                });
            }
            section = Some(name.to_string());
            continue;
        }

        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            msg: "expected `key = value`".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                line: line_no,
                msg: "empty key or value".into(),
            });
        }
        let section = section.as_deref().ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            msg: "key outside any [section]".into(),
        })?;
        apply_key(&mut cfg, section, key, value, line_no)?;
    }
    Ok(cfg)
}

fn known_section(name: &str) -> bool {
    match name {
        "machine" | "pipeline" | "noc" | "predictor" => true,
        _ => {
            if let Some(kind) = name.strip_prefix("fu.") {
                FuKind::from_name(kind).is_some()
            } else if let Some(level) = name.strip_prefix("cache.") {
                CacheLevelId::from_name(level).is_some()
            } else {
                false
            }
        }
    }
}

fn apply_key(
    cfg: &mut MachineConfig,
    section: &str,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), ConfigError> {
    let full = || format!("{section}.{key}");
    let unknown = || ConfigError::UnknownKey {
        line,
        key: full(),
    };
    let num = |expected| parse_u64(value).ok_or(ConfigError::TypeMismatch { line, key: full(), expected });

    match section {
        "machine" => {
            let v = num("an unsigned integer")?;
            match key {
                "num_cores" => cfg.num_cores = v,
                "frequency" => cfg.frequency_hz = v,
                "mem_latency" => cfg.mem_latency = v,
                _ => return Err(unknown()),
            }
        }
        "pipeline" => {
            let v = num("an unsigned integer")?;
            let p = &mut cfg.pipeline;
            match key {
                "retire_width" => p.retire_width = v,
                "issue_width" => p.issue_width = v,
                "rob_size" => p.rob_size = v,
                "iw_size" => p.iw_size = v,
                "load_queue_size" => p.load_queue_size = v,
                "store_queue_size" => p.store_queue_size = v,
                "int_phys_regs" => p.int_phys_regs = v,
                "fp_phys_regs" => p.fp_phys_regs = v,
                "bmispred_penalty" => p.bmispred_penalty = v,
                "frontend_depth" => p.frontend_depth = v,
                "itlb_entries" => p.itlb_entries = v,
                "dtlb_entries" => p.dtlb_entries = v,
                "tlb_miss_penalty" => p.tlb_miss_penalty = v,
                _ => return Err(unknown()),
            }
        }
        "noc" => match key {
            "topology" => {
                if value != "bus" {
                    return Err(ConfigError::TypeMismatch {
                        line,
                        key: full(),
                        expected: "`bus`",
                    });
                }
                cfg.noc.topology = Topology::Bus;
            }
            "hop_latency" => cfg.noc.hop_latency = num("an unsigned integer")?,
            "flit_size" => cfg.noc.flit_size = num("an unsigned integer")?,
            _ => return Err(unknown()),
        },
        "predictor" => {
            let t = &mut cfg.predictor;
            match key {
                "num_tagged_tables" => t.num_tagged_tables = num("an unsigned integer")? as usize,
                "table_entries" => t.table_entries = num("an unsigned integer")? as usize,
                "tag_bits" => t.tag_bits = num("an unsigned integer")? as u32,
                "counter_bits" => t.counter_bits = num("an unsigned integer")? as u32,
                "useful_bits" => t.useful_bits = num("an unsigned integer")? as u32,
                "base_entries" => t.base_entries = num("an unsigned integer")? as usize,
                "history_lengths" => {
                    let mut lens = Vec::new();
                    for part in value.split(',') {
                        let part = part.trim();
                        let v = part.parse::<u32>().map_err(|_| ConfigError::TypeMismatch {
                            line,
                            key: full(),
                            expected: "a comma-separated list of unsigned integers",
                        })?;
                        lens.push(v);
                    }
                    t.history_lengths = lens;
                }
                _ => return Err(unknown()),
            }
        }
        _ if section.starts_with("fu.") => {
            let kind = FuKind::from_name(&section[3..]).expect("section pre-validated");
            let v = num("an unsigned integer")?;
            let f = cfg.fu_mut(kind);
            match key {
                "count" => f.count = v,
                "latency" => f.latency = v,
                "recip_throughput" => f.recip_throughput = v,
                _ => return Err(unknown()),
            }
        }
        _ if section.starts_with("cache.") => {
            let level = CacheLevelId::from_name(&section[6..]).expect("section pre-validated");
            let c = cfg.cache_mut(level);
            match key {
                "size" => c.size = num("a size (integer, optionally with kB/MB suffix)")?,
                "block_size" => c.block_size = num("a size")?,
                "associativity" => c.associativity = num("an unsigned integer")?,
                "latency" => c.latency = num("an unsigned integer")?,
                "write_mode" => {
                    c.write_mode = match value {
                        "write_through" => WriteMode::WriteThrough,
                        "write_back" => WriteMode::WriteBack,
                        _ => {
                            return Err(ConfigError::TypeMismatch {
                                line,
                                key: full(),
                                expected: "`write_through` or `write_back`",
                            })
                        }
                    }
                }
                "shared" => {
                    c.shared = match value {
                        "true" => true,
                        "false" => false,
                        _ => {
                            return Err(ConfigError::TypeMismatch {
                                line,
                                key: full(),
                                expected: "`true` or `false`",
                            })
                        }
                    }
                }
                _ => return Err(unknown()),
            }
        }
        _ => return Err(unknown()),
    }
    Ok(())
}

/// Parses an unsigned integer with an optional power-of-two size suffix
/// (`kB` = 1024, `MB` = 1024^2). Suffix match is case-insensitive.
fn parse_u64(s: &str) -> Option<u64> {
    let lower = s.to_ascii_lowercase();
    let (digits, mult) = if let Some(d) = lower.strip_suffix("kb") {
        (d.trim_end(), 1024)
    } else if let Some(d) = lower.strip_suffix("mb") {
        (d.trim_end(), 1024 * 1024)
    } else {
        (lower.as_str(), 1)
    };
    digits.parse::<u64>().ok()?.checked_mul(mult)
}

/// Writes `cfg` in the config file format. `parse_config(serialize_config(c))`
/// reproduces `c` exactly for any valid config; sizes are emitted as plain
/// byte counts.
pub fn serialize_config(cfg: &MachineConfig) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(out, "[machine]").unwrap();
    writeln!(out, "num_cores = {}", cfg.num_cores).unwrap();
    writeln!(out, "frequency = {}", cfg.frequency_hz).unwrap();
    writeln!(out, "mem_latency = {}", cfg.mem_latency).unwrap();

    let p = &cfg.pipeline;
    writeln!(out, "\n[pipeline]").unwrap();
    for (k, v) in [
        ("retire_width", p.retire_width),
        ("issue_width", p.issue_width),
        ("rob_size", p.rob_size),
        ("iw_size", p.iw_size),
        ("load_queue_size", p.load_queue_size),
        ("store_queue_size", p.store_queue_size),
        ("int_phys_regs", p.int_phys_regs),
        ("fp_phys_regs", p.fp_phys_regs),
        ("bmispred_penalty", p.bmispred_penalty),
        ("frontend_depth", p.frontend_depth),
        ("itlb_entries", p.itlb_entries),
        ("dtlb_entries", p.dtlb_entries),
        ("tlb_miss_penalty", p.tlb_miss_penalty),
    ] {
        writeln!(out, "{k} = {v}").unwrap();
    }

    for kind in FuKind::ALL {
        let f = cfg.fu(kind);
        writeln!(out, "\n[fu.{}]", kind.name()).unwrap();
        writeln!(out, "count = {}", f.count).unwrap();
        writeln!(out, "latency = {}", f.latency).unwrap();
        writeln!(out, "recip_throughput = {}", f.recip_throughput).unwrap();
    }

    for level in CacheLevelId::ALL {
        let c = cfg.cache(level);
        writeln!(out, "\n[cache.{}]", level.name()).unwrap();
        writeln!(out, "size = {}", c.size).unwrap();
        writeln!(out, "block_size = {}", c.block_size).unwrap();
        writeln!(out, "associativity = {}", c.associativity).unwrap();
        writeln!(out, "latency = {}", c.latency).unwrap();
        writeln!(out, "write_mode = {}", c.write_mode.name()).unwrap();
        writeln!(out, "shared = {}", c.shared).unwrap();
    }

    writeln!(out, "\n[noc]").unwrap();
    writeln!(out, "topology = bus").unwrap();
    writeln!(out, "hop_latency = {}", cfg.noc.hop_latency).unwrap();
    writeln!(out, "flit_size = {}", cfg.noc.flit_size).unwrap();

    let t = &cfg.predictor;
    writeln!(out, "\n[predictor]").unwrap();
    writeln!(out, "num_tagged_tables = {}", t.num_tagged_tables).unwrap();
    let lens: Vec<String> = t.history_lengths.iter().map(|l| l.to_string()).collect();
    writeln!(out, "history_lengths = {}", lens.join(",")).unwrap();
    writeln!(out, "table_entries = {}", t.table_entries).unwrap();
    writeln!(out, "tag_bits = {}", t.tag_bits).unwrap();
    writeln!(out, "counter_bits = {}", t.counter_bits).unwrap();
    writeln!(out, "useful_bits = {}", t.useful_bits).unwrap();
    writeln!(out, "base_entries = {}", t.base_entries).unwrap();
    out
}

/// Checks every structural invariant; returns the empty list iff the config
/// is valid. Violations are data, not errors: callers decide what to do.
pub fn validate_config(cfg: &MachineConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut fail = |field: &str, rule: &str| {
        v.push(Violation {
            field: field.to_string(),
            rule: rule.to_string(),
        })
    };

    if cfg.num_cores < 1 {
        fail("machine.num_cores", "must be >= 1");
    }

    let p = &cfg.pipeline;
    for (name, val) in [
        ("retire_width", p.retire_width),
        ("issue_width", p.issue_width),
        ("rob_size", p.rob_size),
        ("iw_size", p.iw_size),
        ("load_queue_size", p.load_queue_size),
        ("store_queue_size", p.store_queue_size),
        ("int_phys_regs", p.int_phys_regs),
        ("fp_phys_regs", p.fp_phys_regs),
        ("bmispred_penalty", p.bmispred_penalty),
        ("frontend_depth", p.frontend_depth),
        ("itlb_entries", p.itlb_entries),
        ("dtlb_entries", p.dtlb_entries),
        ("tlb_miss_penalty", p.tlb_miss_penalty),
    ] {
        if val == 0 {
            fail(&format!("pipeline.{name}"), "must be > 0");
        }
    }
    if p.rob_size < p.iw_size {
        fail("pipeline.rob_size", "must be >= iw_size");
    }

    for kind in FuKind::ALL {
        let matching: Vec<_> = cfg.fus.iter().filter(|f| f.kind == kind).collect();
        let field = format!("fu.{}", kind.name());
        if matching.len() != 1 {
            fail(&field, "exactly one spec per functional-unit kind");
            continue;
        }
        let f = matching[0];
        if f.count < 1 {
            fail(&format!("{field}.count"), "must be >= 1");
        }
        if f.recip_throughput < 1 {
            fail(&format!("{field}.recip_throughput"), "must be >= 1");
        }
        if f.latency < f.recip_throughput {
            fail(&format!("{field}.latency"), "must be >= recip_throughput");
        }
    }

    for level in CacheLevelId::ALL {
        let matching: Vec<_> = cfg.caches.iter().filter(|c| c.level == level).collect();
        let field = format!("cache.{}", level.name());
        if matching.len() != 1 {
            fail(&field, "exactly one config per cache level");
            continue;
        }
        let c = matching[0];
        if c.block_size == 0 || !c.block_size.is_power_of_two() {
            fail(&format!("{field}.block_size"), "must be a power of two");
        }
        if c.associativity < 1 {
            fail(&format!("{field}.associativity"), "must be >= 1");
        }
        let set_bytes = c.block_size.saturating_mul(c.associativity);
        if set_bytes == 0 || c.size == 0 || c.size % set_bytes != 0 {
            fail(
                &format!("{field}.size"),
                "size not divisible by block_size x associativity",
            );
        }
        if c.latency < 1 {
            fail(&format!("{field}.latency"), "latency must be >= 1");
        }
    }

    if cfg.noc.flit_size == 0 {
        fail("noc.flit_size", "must be > 0");
    }
    if cfg.noc.hop_latency < 1 {
        fail("noc.hop_latency", "must be >= 1");
    }

    let t = &cfg.predictor;
    if t.num_tagged_tables != t.history_lengths.len() {
        fail(
            "predictor.num_tagged_tables",
            "must equal the number of history_lengths",
        );
    }
    if !t.history_lengths.windows(2).all(|w| w[0] < w[1]) {
        fail("predictor.history_lengths", "must be strictly increasing");
    }
    if t.history_lengths.contains(&0) {
        fail("predictor.history_lengths", "lengths must be > 0");
    }
    if t.table_entries == 0 {
        fail("predictor.table_entries", "must be >= 1");
    }
    if t.base_entries == 0 {
        fail("predictor.base_entries", "must be >= 1");
    }
    if !(1..=8).contains(&t.counter_bits) {
        fail("predictor.counter_bits", "must be in 1..=8");
    }
    if !(1..=8).contains(&t.useful_bits) {
        fail("predictor.useful_bits", "must be in 1..=8");
    }
    if !(1..=16).contains(&t.tag_bits) {
        fail("predictor.tag_bits", "must be in 1..=16");
    }

    v
}
