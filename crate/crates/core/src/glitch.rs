//! Clock-glitch semantics.
//!
//! A glitch is a single premature capture edge arriving `offset` after the
//! launching edge of one cycle. Every latch bit whose arrival is later than
//! `offset - t_setup` misses the capture and is filled in by the corruption
//! policy instead.

use serde::{Deserialize, Serialize};

use crate::isa::{nop, Decoded, IClass, Instruction};
use crate::latch::{LatchFields, LatchId, MAX_FIELDS};
use crate::timing::{ns_to_ps, Picos, TimingError, TimingModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorruptionPolicy {
    /// Late bits keep the value the latch held before the edge.
    #[default]
    StaleBits,
    /// Any late bit makes the whole latch keep its previous value.
    StaleRegister,
    /// Late bits capture as zero.
    ZeroLateBits,
}

impl CorruptionPolicy {
    pub const ALL: [CorruptionPolicy; 3] = [
        CorruptionPolicy::StaleBits,
        CorruptionPolicy::StaleRegister,
        CorruptionPolicy::ZeroLateBits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionPolicy::StaleBits => "STALE_BITS",
            CorruptionPolicy::StaleRegister => "STALE_REGISTER",
            CorruptionPolicy::ZeroLateBits => "ZERO_LATE_BITS",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(name))
    }
}

/// What the decoder does with an instruction word that does not decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IllegalPolicy {
    NopReplace,
    #[default]
    Trap,
}

impl IllegalPolicy {
    pub fn name(self) -> &'static str {
        match self {
            IllegalPolicy::NopReplace => "NOP_REPLACE",
            IllegalPolicy::Trap => "TRAP",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [IllegalPolicy::NopReplace, IllegalPolicy::Trap]
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlitchSpec {
    pub cycle: u64,
    pub offset_ns: f64,
    #[serde(default)]
    pub policy: CorruptionPolicy,
    #[serde(default = "default_illegal_policy")]
    pub illegal_policy: IllegalPolicy,
}

fn default_illegal_policy() -> IllegalPolicy {
    IllegalPolicy::NopReplace
}

impl GlitchSpec {
    /// A glitch with the default policies (stale bits, NOP replacement).
    pub fn new(cycle: u64, offset_ns: f64) -> Self {
        GlitchSpec {
            cycle,
            offset_ns,
            policy: CorruptionPolicy::StaleBits,
            illegal_policy: IllegalPolicy::NopReplace,
        }
    }

    pub fn offset_ps(&self) -> Picos {
        ns_to_ps(self.offset_ns)
    }

    pub fn validate(&self, timing: &TimingModel) -> Result<(), TimingError> {
        timing.check_offset_ps(self.offset_ps())
    }
}

/// Which instruction class drives each latch's capture this cycle, or `None`
/// when the latch does not capture new data (hold) or its feeding stage is
/// empty. Indexed by [`LatchId::index`].
pub type CaptureSites = [Option<IClass>; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatchVerdict {
    Clean,
    /// Per-field masks of the bits that miss the capture edge.
    Late([u32; MAX_FIELDS]),
}

impl LatchVerdict {
    pub fn is_clean(&self) -> bool {
        matches!(self, LatchVerdict::Clean)
    }

    pub fn late_masks(&self) -> [u32; MAX_FIELDS] {
        match self {
            LatchVerdict::Clean => [0; MAX_FIELDS],
            LatchVerdict::Late(m) => *m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlitchEffect {
    pub policy: CorruptionPolicy,
    pub verdicts: [LatchVerdict; 3],
}

impl GlitchEffect {
    pub fn verdict(&self, latch: LatchId) -> LatchVerdict {
        self.verdicts[latch.index()]
    }

    pub fn all_clean(&self) -> bool {
        self.verdicts.iter().all(LatchVerdict::is_clean)
    }

    pub fn corrupted_latches(&self) -> Vec<LatchId> {
        LatchId::ALL
            .into_iter()
            .filter(|l| !self.verdict(*l).is_clean())
            .collect()
    }
}

/// Late-bit masks for one latch under `class` with the capture edge at `offset`.
pub fn late_bits(timing: &TimingModel, class: IClass, latch: LatchId, offset: Picos) -> [u32; MAX_FIELDS] {
    let deadline = offset - timing.setup_ps();
    let mut masks = [0u32; MAX_FIELDS];
    for a in timing.arrivals(class, latch) {
        if a.at <= deadline {
            break;
        }
        masks[a.field as usize] |= 1 << a.bit;
    }
    masks
}

pub fn plan_effect(spec: &GlitchSpec, sites: &CaptureSites, timing: &TimingModel) -> Result<GlitchEffect, TimingError> {
    spec.validate(timing)?;
    let offset = spec.offset_ps();
    let verdicts = LatchId::ALL.map(|latch| match sites[latch.index()] {
        None => LatchVerdict::Clean,
        Some(class) => {
            let masks = late_bits(timing, class, latch, offset);
            if masks.iter().all(|&m| m == 0) {
                LatchVerdict::Clean
            } else {
                LatchVerdict::Late(masks)
            }
        }
    });
    Ok(GlitchEffect {
        policy: spec.policy,
        verdicts,
    })
}

/// Value a latch ends up holding when `clean` was presented at its input,
/// `previous` was its old content and `verdict` says which bits were late.
pub fn capture<L: LatchFields>(verdict: LatchVerdict, policy: CorruptionPolicy, previous: &L, clean: &L) -> L {
    let LatchVerdict::Late(masks) = verdict else {
        return *clean;
    };
    if policy == CorruptionPolicy::StaleRegister {
        return *previous;
    }
    let mut out = *clean;
    for (i, &mask) in masks.iter().enumerate().take(L::ID.fields().len()) {
        if mask == 0 {
            continue;
        }
        let late = match policy {
            CorruptionPolicy::StaleBits => previous.get(i) & mask,
            _ => 0,
        };
        out.set(i, (clean.get(i) & !mask) | late);
    }
    out
}

/// What the pipeline executes for a decode result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executed {
    Instruction(Instruction),
    /// The word was illegal and a canonical NOP runs in its place.
    ReplacedNop { word: u32 },
    /// The word was illegal and the core traps.
    Trap { word: u32 },
}

pub fn apply_illegal_policy(decoded: Decoded, policy: IllegalPolicy) -> Executed {
    match (decoded, policy) {
        (Decoded::Valid(i), _) => Executed::Instruction(i),
        (Decoded::Illegal(word), IllegalPolicy::NopReplace) => Executed::ReplacedNop { word },
        (Decoded::Illegal(word), IllegalPolicy::Trap) => Executed::Trap { word },
    }
}

impl Executed {
    /// The instruction that actually flows down the pipeline, if any.
    pub fn instruction(&self) -> Option<Instruction> {
        match self {
            Executed::Instruction(i) => Some(*i),
            Executed::ReplacedNop { .. } => Some(nop()),
            Executed::Trap { .. } => None,
        }
    }
}
