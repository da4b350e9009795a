//! Glitch campaigns: sweep a grid of glitch parameters, classify every run
//! against the glitch-free baseline and root-cause it by lockstep
//! comparison of the two cycle traces.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::Program;
use crate::glitch::{CorruptionPolicy, GlitchSpec, IllegalPolicy};
use crate::isa::{disassemble, IClass};
use crate::latch::{LatchId, Stage};
use crate::machine::{ArchState, Halt, HaltCause};
use crate::pipeline::{hex32, CycleReport, FaultEvent, Pipeline, PipelineConfig};
use crate::rat::windows_for_cycle;
use crate::timing::{ns_to_ps, ps_to_ns, Picos, TimingError, TimingModel};

pub const SCHEMA_VERSION: u32 = 1;
/// Glitch-free state is snapshotted every this many cycles.
pub const CHECKPOINT_INTERVAL: u64 = 256;
/// Length of the divergence chain kept per record.
pub const CHAIN_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    NoEffect,
    NopReplacement,
    MutatedInstruction,
    GhostInstruction,
    SdcOutput,
    SdcStateOnly,
    ControlFlowDeviation,
    Trap,
    Hang,
}

impl Outcome {
    pub const ALL: [Outcome; 9] = [
        Outcome::NoEffect,
        Outcome::NopReplacement,
        Outcome::MutatedInstruction,
        Outcome::GhostInstruction,
        Outcome::SdcOutput,
        Outcome::SdcStateOnly,
        Outcome::ControlFlowDeviation,
        Outcome::Trap,
        Outcome::Hang,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::NoEffect => "NO_EFFECT",
            Outcome::NopReplacement => "NOP_REPLACEMENT",
            Outcome::MutatedInstruction => "MUTATED_INSTRUCTION",
            Outcome::GhostInstruction => "GHOST_INSTRUCTION",
            Outcome::SdcOutput => "SDC_OUTPUT",
            Outcome::SdcStateOnly => "SDC_STATE_ONLY",
            Outcome::ControlFlowDeviation => "CONTROL_FLOW_DEVIATION",
            Outcome::Trap => "TRAP",
            Outcome::Hang => "HANG",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name)
    }
}

/// Inclusive-exclusive cycle range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleRange {
    pub lo: u64,
    pub hi: u64,
}

/// Offsets `lo, lo + step, ...` up to and including `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetGrid {
    pub lo_ns: f64,
    pub hi_ns: f64,
    pub step_ns: f64,
}

impl OffsetGrid {
    pub fn points_ps(&self) -> Vec<Picos> {
        let (lo, hi, step) = (ns_to_ps(self.lo_ns), ns_to_ps(self.hi_ns), ns_to_ps(self.step_ns));
        if step <= 0 {
            return Vec::new();
        }
        (0..).map(|k| lo + k * step).take_while(|&o| o <= hi).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignPlan {
    /// Free-form reference to the program (usually its path).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<String>,
    pub cycles: CycleRange,
    pub offsets: OffsetGrid,
    #[serde(default = "default_policies")]
    pub policies: Vec<CorruptionPolicy>,
    #[serde(default = "default_illegal_policies")]
    pub illegal_policies: Vec<IllegalPolicy>,
    /// Cap on the number of runs; a seeded subset of the grid is drawn when
    /// the grid is larger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_runs: Option<usize>,
    /// Per-run budget as a multiple of the glitch-free cycle count.
    #[serde(default = "default_budget_factor")]
    pub budget_factor: u64,
    /// Cycle limit for the glitch-free baseline.
    #[serde(default = "default_max_cycles")]
    pub max_cycles: u64,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads. Never affects results, so it is not serialized.
    #[serde(skip, default = "default_jobs")]
    pub jobs: usize,
}

fn default_policies() -> Vec<CorruptionPolicy> {
    vec![CorruptionPolicy::StaleBits]
}

fn default_illegal_policies() -> Vec<IllegalPolicy> {
    vec![IllegalPolicy::NopReplace]
}

fn default_budget_factor() -> u64 {
    4
}

fn default_max_cycles() -> u64 {
    10_000_000
}

fn default_jobs() -> usize {
    1
}

impl CampaignPlan {
    pub fn new(cycles: CycleRange, offsets: OffsetGrid) -> Self {
        CampaignPlan {
            program: None,
            timing: None,
            cycles,
            offsets,
            policies: default_policies(),
            illegal_policies: default_illegal_policies(),
            max_runs: None,
            budget_factor: default_budget_factor(),
            max_cycles: default_max_cycles(),
            seed: 0,
            jobs: 1,
        }
    }

    pub fn validate(&self, timing: &TimingModel) -> Result<(), CampaignError> {
        if self.offsets.step_ns.is_nan() || ns_to_ps(self.offsets.step_ns) <= 0 {
            return Err(CampaignError::Plan("offset step must be positive".into()));
        }
        if self.offsets.hi_ns < self.offsets.lo_ns {
            return Err(CampaignError::Plan("offset range is empty".into()));
        }
        for o in [self.offsets.lo_ns, self.offsets.hi_ns] {
            timing.check_offset_ps(ns_to_ps(o))?;
        }
        if self.cycles.hi <= self.cycles.lo {
            return Err(CampaignError::Plan("cycle range is empty".into()));
        }
        if self.policies.is_empty() || self.illegal_policies.is_empty() {
            return Err(CampaignError::Plan("at least one policy of each kind is required".into()));
        }
        if self.budget_factor == 0 {
            return Err(CampaignError::Plan("budget factor must be positive".into()));
        }
        Ok(())
    }

    /// Every grid point in grid-index order.
    pub fn grid(&self) -> Vec<GlitchSpec> {
        let offsets = self.offsets.points_ps();
        let mut out = Vec::new();
        for cycle in self.cycles.lo..self.cycles.hi {
            for &o in &offsets {
                for &policy in &self.policies {
                    for &illegal_policy in &self.illegal_policies {
                        out.push(GlitchSpec {
                            cycle,
                            offset_ns: ps_to_ns(o),
                            policy,
                            illegal_policy,
                        });
                    }
                }
            }
        }
        out
    }

    /// Grid points actually run, with their grid indices.
    pub fn selected(&self) -> Vec<(usize, GlitchSpec)> {
        let grid = self.grid();
        match self.max_runs {
            Some(n) if n < grid.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = sample(&mut rng, grid.len(), n).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| (i, grid[i])).collect()
            }
            _ => grid.into_iter().enumerate().collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("NOT_HALTED: glitch-free run did not halt within {0} cycles")]
    NotHalted(u64),
}

/// The glitch-free reference run with periodic checkpoints.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub trace: Vec<CycleReport>,
    pub state: ArchState,
    pub cycles: u64,
    pub retire_pcs: Vec<u32>,
    checkpoints: Vec<Pipeline>,
}

impl Baseline {
    pub fn new(program: &Program, max_cycles: u64) -> Result<Self, CampaignError> {
        Self::with_config(program, max_cycles, PipelineConfig::default())
    }

    pub fn with_config(program: &Program, max_cycles: u64, config: PipelineConfig) -> Result<Self, CampaignError> {
        let mut p = Pipeline::new(program, config);
        let mut trace = Vec::new();
        let mut checkpoints = Vec::new();
        while !p.halted() {
            if p.cycle() >= max_cycles {
                return Err(CampaignError::NotHalted(max_cycles));
            }
            if p.cycle().is_multiple_of(CHECKPOINT_INTERVAL) {
                checkpoints.push(p.clone());
            }
            trace.push(p.clock(None).expect("glitch-free clock"));
        }
        let retire_pcs = trace.iter().flat_map(|r| r.retired.iter().map(|x| x.pc)).collect();
        Ok(Baseline {
            cycles: p.cycle(),
            state: p.arch,
            trace,
            retire_pcs,
            checkpoints,
        })
    }

    /// Glitch-free pipeline positioned just before `cycle`.
    pub fn pipeline_at(&self, cycle: u64) -> Pipeline {
        let k = ((cycle / CHECKPOINT_INTERVAL) as usize).min(self.checkpoints.len() - 1);
        let mut p = self.checkpoints[k].clone();
        while p.cycle() < cycle && !p.halted() {
            p.clock(None).expect("glitch-free clock");
        }
        p
    }

    fn checkpoint_for(&self, cycle: u64) -> Option<&Pipeline> {
        if !cycle.is_multiple_of(CHECKPOINT_INTERVAL) {
            return None;
        }
        self.checkpoints.get((cycle / CHECKPOINT_INTERVAL) as usize)
    }

    pub fn output_log(&self) -> &[u32] {
        &self.state.output_log
    }
}

/// One observed difference between the glitch-free and the faulty trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub cycle: u64,
    /// `IF_ID.instr_word`, `retire`, `x5`, `mem[0x00002000]`, `output`, `cycle`.
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<u32>,
}

/// First divergence between two runs and the corruption that seeded it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootCause {
    pub cycle: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latch: Option<LatchId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub late_bits: Vec<u8>,
    /// Value the field should have captured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_value: Option<u32>,
    /// Value it held instead (stale or zeroed bits).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale_value: Option<u32>,
    pub chain: Vec<Divergence>,
}

fn latch_divergences(g: &CycleReport, f: &CycleReport, out: &mut Vec<Divergence>) {
    for latch in LatchId::ALL {
        let (gv, fv) = (g.latches.values(latch), f.latches.values(latch));
        for (i, spec) in latch.fields().iter().enumerate() {
            if gv[i] != fv[i] {
                out.push(Divergence {
                    cycle: f.cycle,
                    location: format!("{latch}.{}", spec.name),
                    expected: Some(gv[i]),
                    actual: Some(fv[i]),
                });
            }
        }
    }
}

fn list_divergences<T: PartialEq>(
    cycle: u64,
    g: &[T],
    f: &[T],
    loc: impl Fn(&T) -> String,
    val: impl Fn(&T) -> u32,
    out: &mut Vec<Divergence>,
) {
    for i in 0..g.len().max(f.len()) {
        match (g.get(i), f.get(i)) {
            (Some(a), Some(b)) if a == b => {}
            (a, b) => out.push(Divergence {
                cycle,
                location: loc(b.or(a).unwrap()),
                expected: a.map(&val),
                actual: b.map(&val),
            }),
        }
    }
}

/// All differences in one cycle, in a fixed order: latches (in pipeline
/// order, fields in layout order), retirements, register writes, memory
/// writes, outputs.
pub fn cycle_divergences(g: Option<&CycleReport>, f: &CycleReport) -> Vec<Divergence> {
    let mut out = Vec::new();
    let Some(g) = g else {
        out.push(Divergence {
            cycle: f.cycle,
            location: "cycle".into(),
            expected: None,
            actual: None,
        });
        return out;
    };
    latch_divergences(g, f, &mut out);
    list_divergences(f.cycle, &g.retired, &f.retired, |_| "retire".into(), |r| r.pc, &mut out);
    list_divergences(f.cycle, &g.reg_writes, &f.reg_writes, |w| format!("x{}", w.index), |w| w.new, &mut out);
    list_divergences(
        f.cycle,
        &g.mem_writes,
        &f.mem_writes,
        |w| format!("mem[0x{:08x}]", w.addr),
        |w| w.new,
        &mut out,
    );
    list_divergences(f.cycle, &g.outputs, &f.outputs, |_| "output".into(), |&v| v, &mut out);
    out
}

/// Incremental first-divergence search.
#[derive(Debug, Default, Clone)]
pub struct DivergenceTracker {
    chain: Vec<Divergence>,
    violations: Vec<FaultEvent>,
}

impl DivergenceTracker {
    pub fn observe(&mut self, golden: Option<&CycleReport>, faulty: &CycleReport) {
        for e in &faulty.events {
            if matches!(e, FaultEvent::CaptureViolation { .. }) {
                self.violations.push(e.clone());
            }
        }
        if self.chain.len() < CHAIN_LEN {
            let d = cycle_divergences(golden, faulty);
            let room = CHAIN_LEN - self.chain.len();
            self.chain.extend(d.into_iter().take(room));
        }
    }

    pub fn saturated(&self) -> bool {
        self.chain.len() >= CHAIN_LEN
    }

    pub fn finish(self) -> Option<RootCause> {
        let first = self.chain.first()?.clone();
        let mut rc = RootCause {
            cycle: first.cycle,
            latch: None,
            field: None,
            late_bits: Vec::new(),
            new_value: first.expected,
            stale_value: first.actual,
            chain: self.chain,
        };
        // Seed: the violation on the first diverging latch field, else any
        // violation at or before the divergence.
        let target = first.location.split_once('.');
        let seed = self
            .violations
            .iter()
            .filter(|e| e.cycle() <= first.cycle)
            .flat_map(|e| match e {
                FaultEvent::CaptureViolation { latch, fields, cycle } => {
                    fields.iter().map(move |f| (*cycle, *latch, f)).collect::<Vec<_>>()
                }
                _ => Vec::new(),
            })
            .find(|(_, latch, f)| target == Some((latch.name(), f.field.as_str())))
            .or_else(|| {
                self.violations.iter().find_map(|e| match e {
                    FaultEvent::CaptureViolation { cycle, latch, fields } => {
                        fields.iter().find(|f| f.clean != f.captured).map(|f| (*cycle, *latch, f))
                    }
                    _ => None,
                })
            });
        if let Some((cycle, latch, f)) = seed {
            rc.cycle = cycle;
            rc.latch = Some(latch);
            rc.field = Some(f.field.clone());
            rc.late_bits = f.late_bits.clone();
            rc.new_value = Some(f.clean);
            rc.stale_value = Some(f.captured);
        }
        Some(rc)
    }
}

/// First divergence between two complete cycle traces; `None` if identical.
pub fn first_divergence(golden: &[CycleReport], faulty: &[CycleReport]) -> Option<RootCause> {
    let mut t = DivergenceTracker::default();
    for f in faulty {
        t.observe(golden.get(f.cycle as usize), f);
    }
    if faulty.len() < golden.len() {
        if let Some(g) = golden.get(faulty.len()) {
            t.chain.push(Divergence {
                cycle: g.cycle,
                location: "cycle".into(),
                expected: None,
                actual: None,
            });
        }
    }
    t.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mechanism {
    NopReplacement,
    MutatedInstruction,
    GhostInstruction,
}

impl Mechanism {
    fn outcome(self) -> Outcome {
        match self {
            Mechanism::NopReplacement => Outcome::NopReplacement,
            Mechanism::MutatedInstruction => Outcome::MutatedInstruction,
            Mechanism::GhostInstruction => Outcome::GhostInstruction,
        }
    }
}

/// A latch the glitch violated and the instruction whose capture it was.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetHit {
    pub latch: LatchId,
    pub stage: Stage,
    pub iclass: IClass,
    #[serde(serialize_with = "hex32", deserialize_with = "de_hex32")]
    pub pc: u32,
    pub seq: u64,
}

fn de_hex32<'de, D: serde::Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
    let s = String::deserialize(d)?;
    u32::from_str_radix(s.trim_start_matches("0x"), 16).map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDiff {
    pub expected: Vec<u32>,
    pub actual: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegDiff {
    pub reg: u8,
    pub expected: u32,
    pub actual: u32,
}

/// Instruction a replaced or mutated instruction executed as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    #[serde(serialize_with = "hex32", deserialize_with = "de_hex32")]
    pub pc: u32,
    pub original: String,
    pub executed_as: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub index: usize,
    pub spec: GlitchSpec,
    pub outcome: Outcome,
    /// Architectural effect regardless of mechanism.
    pub effect: Outcome,
    pub mechanisms: Vec<Mechanism>,
    pub targets: Vec<TargetHit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replacements: Vec<Replacement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_cause: Option<RootCause>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_diff: Option<OutputDiff>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reg_diff: Vec<RegDiff>,
    pub misclassified: bool,
    pub cycles: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt: Option<Halt>,
}

/// What a faulty run produced, ready for classification.
#[derive(Debug, Clone)]
pub struct FaultyRun {
    pub state: ArchState,
    pub halted: bool,
    pub cycles: u64,
    pub pc_stream_diverged: bool,
    pub events: Vec<FaultEvent>,
    pub targets: Vec<TargetHit>,
    pub root_cause: Option<RootCause>,
}

/// Run one glitch against the baseline.
pub fn run_faulty(baseline: &Baseline, timing: &TimingModel, spec: &GlitchSpec, budget: u64) -> FaultyRun {
    let mut p = baseline.pipeline_at(spec.cycle);
    let mut tracker = DivergenceTracker::default();
    let mut events = Vec::new();
    let mut targets = Vec::new();
    let mut retire_index = p.retired() as usize;
    let mut pc_diverged = false;
    let mut converged = false;
    let may_converge = baseline.state.halt.map(|h| h.cause) != Some(HaltCause::Illegal);
    while !p.halted() && p.cycle() < budget {
        let cycle = p.cycle();
        let glitch = (cycle == spec.cycle).then_some((spec, timing));
        let rep = p.clock(glitch).expect("validated glitch");
        if cycle == spec.cycle {
            for e in &rep.events {
                if let FaultEvent::CaptureViolation { latch, .. } = e {
                    let k = *latch;
                    if let Some(d) = rep.occupancy.get(k.source_stage()) {
                        targets.push(TargetHit {
                            latch: k,
                            stage: k.sink_stage(),
                            iclass: rep.sites[k.index()].unwrap_or(d.iclass),
                            pc: d.pc,
                            seq: d.seq,
                        });
                    }
                }
            }
        }
        for r in &rep.retired {
            if baseline.retire_pcs.get(retire_index) != Some(&r.pc) {
                pc_diverged = true;
            }
            retire_index += 1;
        }
        if !tracker.saturated() || !rep.events.is_empty() {
            tracker.observe(baseline.trace.get(cycle as usize), &rep);
        }
        events.extend(rep.events);
        if may_converge && p.cycle() > spec.cycle {
            if let Some(ck) = baseline.checkpoint_for(p.cycle()) {
                if p.same_state(ck) {
                    converged = true;
                    break;
                }
            }
        }
    }
    if converged {
        return FaultyRun {
            state: baseline.state.clone(),
            halted: true,
            cycles: baseline.cycles,
            pc_stream_diverged: pc_diverged,
            events,
            targets,
            root_cause: tracker.finish(),
        };
    }
    if p.halted() && retire_index != baseline.retire_pcs.len() {
        pc_diverged = true;
    }
    if p.halted() && (p.cycle() as usize) < baseline.trace.len() && !tracker.saturated() {
        tracker.chain.push(Divergence {
            cycle: p.cycle(),
            location: "cycle".into(),
            expected: None,
            actual: None,
        });
    }
    FaultyRun {
        halted: p.halted(),
        cycles: p.cycle(),
        state: p.arch,
        pc_stream_diverged: pc_diverged,
        events,
        targets,
        root_cause: tracker.finish(),
    }
}

/// Classify a faulty run. Priority: HANG, TRAP, then a mechanism flag when
/// one fired, then the architectural effect.
pub fn classify_outcome(index: usize, spec: &GlitchSpec, baseline: &Baseline, run: FaultyRun) -> OutcomeRecord {
    let golden = &baseline.state;
    let effect = if !run.halted {
        Outcome::Hang
    } else if run.state.halt.is_some_and(|h| h.cause.is_trap()) && run.state.halt != golden.halt {
        Outcome::Trap
    } else if run.pc_stream_diverged {
        Outcome::ControlFlowDeviation
    } else if run.state.output_log != golden.output_log {
        Outcome::SdcOutput
    } else if run.state != *golden {
        Outcome::SdcStateOnly
    } else {
        Outcome::NoEffect
    };

    let mut mechanisms = BTreeSet::new();
    let mut replacements = Vec::new();
    for e in &run.events {
        match e {
            FaultEvent::InstructionReplacedNop { pc, fetched, .. } => {
                mechanisms.insert(Mechanism::NopReplacement);
                replacements.push(Replacement {
                    pc: *pc,
                    original: disassemble(*fetched),
                    executed_as: "nop".into(),
                });
            }
            FaultEvent::MutatedInstruction { pc, fetched, executed, .. } => {
                mechanisms.insert(Mechanism::MutatedInstruction);
                replacements.push(Replacement {
                    pc: *pc,
                    original: disassemble(*fetched),
                    executed_as: disassemble(*executed),
                });
            }
            FaultEvent::GhostInstruction { .. } => {
                mechanisms.insert(Mechanism::GhostInstruction);
            }
            _ => {}
        }
    }
    let mechanisms: Vec<Mechanism> = mechanisms.into_iter().collect();
    let outcome = match effect {
        Outcome::Hang | Outcome::Trap => effect,
        _ => mechanisms.first().map(|m| m.outcome()).unwrap_or(effect),
    };

    let no_effect = outcome == Outcome::NoEffect;
    let output_diff = (!no_effect && run.state.output_log != golden.output_log).then(|| OutputDiff {
        expected: golden.output_log.clone(),
        actual: run.state.output_log.clone(),
    });
    let reg_diff = if no_effect {
        Vec::new()
    } else {
        (1..32u8)
            .filter(|&r| run.state.regs[r as usize] != golden.regs[r as usize])
            .map(|r| RegDiff {
                reg: r,
                expected: golden.regs[r as usize],
                actual: run.state.regs[r as usize],
            })
            .collect()
    };
    let misclassified = match (golden.output_log.first(), run.state.output_log.first()) {
        (Some(g), Some(f)) => g != f,
        (None, Some(_)) => true,
        _ => false,
    };
    OutcomeRecord {
        index,
        spec: *spec,
        outcome,
        effect,
        mechanisms,
        targets: run.targets,
        replacements,
        root_cause: if no_effect { None } else { run.root_cause },
        output_diff,
        reg_diff,
        misclassified,
        cycles: run.cycles,
        halt: run.state.halt,
    }
}

/// Inject one glitch and classify it; the same path every campaign run takes.
pub fn inject(
    baseline: &Baseline,
    timing: &TimingModel,
    spec: &GlitchSpec,
    budget_factor: u64,
    index: usize,
) -> Result<OutcomeRecord, CampaignError> {
    spec.validate(timing)?;
    let budget = baseline.cycles.saturating_mul(budget_factor).max(spec.cycle + 1);
    let run = run_faulty(baseline, timing, spec, budget);
    Ok(classify_outcome(index, spec, baseline, run))
}

pub type OutcomeCounts = BTreeMap<Outcome, u64>;

fn zero_counts() -> OutcomeCounts {
    Outcome::ALL.iter().map(|&o| (o, 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub grid_points: usize,
    pub outcomes: OutcomeCounts,
    pub effects: OutcomeCounts,
    pub mechanisms: BTreeMap<Mechanism, u64>,
    pub misclassified: u64,
}

/// Counts for one (stage, occupant class) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetGroup {
    pub stage: String,
    pub iclass: String,
    pub runs: u64,
    pub outcomes: OutcomeCounts,
    pub misclassified: u64,
}

/// Counts per static instruction (by PC) or per dynamic occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionGroup {
    #[serde(serialize_with = "hex32", deserialize_with = "de_hex32")]
    pub pc: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle: Option<u64>,
    pub instruction: String,
    pub iclass: IClass,
    pub runs: u64,
    pub outcomes: OutcomeCounts,
    pub misclassified: u64,
    /// Most frequent replacement observed for this instruction, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_as: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    pub plan: CampaignPlan,
    pub golden_cycles: u64,
    pub golden_output: Vec<u32>,
    pub summary: Summary,
    pub by_target: Vec<TargetGroup>,
    pub by_static_instruction: Vec<InstructionGroup>,
    pub by_dynamic_instruction: Vec<InstructionGroup>,
    /// Grid indices of runs whose first output differs from the golden one.
    pub misclassifying: Vec<usize>,
    pub warnings: Vec<String>,
    pub records: Vec<OutcomeRecord>,
}

/// Widths of the selective windows inside the plan's cycle range.
fn window_widths(baseline: &Baseline, timing: &TimingModel, cycles: CycleRange) -> Vec<Picos> {
    baseline
        .trace
        .iter()
        .filter(|r| r.cycle >= cycles.lo && r.cycle < cycles.hi)
        .flat_map(|r| windows_for_cycle(r, timing))
        .map(|w| w.hi_ps - w.lo_ps)
        .collect()
}

pub fn run_campaign(plan: &CampaignPlan, program: &Program, timing: &TimingModel) -> Result<CampaignReport, CampaignError> {
    plan.validate(timing)?;
    let baseline = Baseline::new(program, plan.max_cycles)?;
    run_campaign_on(plan, &baseline, timing, program)
}

pub fn run_campaign_on(
    plan: &CampaignPlan,
    baseline: &Baseline,
    timing: &TimingModel,
    program: &Program,
) -> Result<CampaignReport, CampaignError> {
    plan.validate(timing)?;
    let points = plan.selected();
    let grid_points = plan.grid().len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs.max(1))
        .build()
        .map_err(|e| CampaignError::Plan(format!("cannot start worker threads: {e}")))?;
    let records: Vec<OutcomeRecord> = pool.install(|| {
        points
            .par_iter()
            .map(|(i, spec)| inject(baseline, timing, spec, plan.budget_factor, *i).expect("plan validated"))
            .collect()
    });

    let mut warnings = Vec::new();
    let widths = window_widths(baseline, timing, plan.cycles);
    let step = ns_to_ps(plan.offsets.step_ns);
    if let Some(&min) = widths.iter().min() {
        if step > min {
            warnings.push(format!(
                "grid coarser than min window: step {:.3} ns > narrowest selective window {:.3} ns",
                plan.offsets.step_ns,
                ps_to_ns(min)
            ));
        }
    }
    if plan.cycles.hi > baseline.cycles {
        warnings.push(format!(
            "cycle range extends past the glitch-free run ({} cycles); later glitches cannot land",
            baseline.cycles
        ));
    }

    Ok(build_report(plan, baseline, program, grid_points, records, warnings))
}

fn build_report(
    plan: &CampaignPlan,
    baseline: &Baseline,
    program: &Program,
    grid_points: usize,
    records: Vec<OutcomeRecord>,
    warnings: Vec<String>,
) -> CampaignReport {
    let mut summary = Summary {
        runs: records.len(),
        grid_points,
        outcomes: zero_counts(),
        effects: zero_counts(),
        mechanisms: BTreeMap::new(),
        misclassified: 0,
    };
    let mut by_target: BTreeMap<(String, String), TargetGroup> = BTreeMap::new();
    let mut by_static: BTreeMap<u32, InstructionGroup> = BTreeMap::new();
    let mut by_dynamic: BTreeMap<(u64, u32), InstructionGroup> = BTreeMap::new();
    let mut replaced: BTreeMap<u32, BTreeMap<String, u64>> = BTreeMap::new();

    let group = |pc: u32, iclass: IClass, seq: Option<u64>, cycle: Option<u64>| InstructionGroup {
        pc,
        seq,
        cycle,
        instruction: program.word_at(pc).map(disassemble).unwrap_or_else(|| "?".into()),
        iclass,
        runs: 0,
        outcomes: zero_counts(),
        misclassified: 0,
        executed_as: None,
    };

    for r in &records {
        *summary.outcomes.get_mut(&r.outcome).unwrap() += 1;
        *summary.effects.get_mut(&r.effect).unwrap() += 1;
        for m in &r.mechanisms {
            *summary.mechanisms.entry(*m).or_default() += 1;
        }
        summary.misclassified += r.misclassified as u64;
        for rep in &r.replacements {
            *replaced.entry(rep.pc).or_default().entry(rep.executed_as.clone()).or_default() += 1;
        }

        let keys: Vec<(String, String)> = if r.targets.is_empty() {
            vec![("NONE".into(), "NONE".into())]
        } else {
            r.targets
                .iter()
                .map(|t| (t.stage.name().to_string(), t.iclass.name().to_string()))
                .collect()
        };
        for (stage, iclass) in keys {
            let g = by_target.entry((stage.clone(), iclass.clone())).or_insert_with(|| TargetGroup {
                stage,
                iclass,
                runs: 0,
                outcomes: zero_counts(),
                misclassified: 0,
            });
            g.runs += 1;
            *g.outcomes.get_mut(&r.outcome).unwrap() += 1;
            g.misclassified += r.misclassified as u64;
        }
        for t in &r.targets {
            let g = by_static.entry(t.pc).or_insert_with(|| group(t.pc, t.iclass, None, None));
            g.runs += 1;
            *g.outcomes.get_mut(&r.outcome).unwrap() += 1;
            g.misclassified += r.misclassified as u64;
            let g = by_dynamic
                .entry((t.seq, t.pc))
                .or_insert_with(|| group(t.pc, t.iclass, Some(t.seq), Some(r.spec.cycle)));
            g.runs += 1;
            *g.outcomes.get_mut(&r.outcome).unwrap() += 1;
            g.misclassified += r.misclassified as u64;
        }
    }
    for (pc, g) in by_static.iter_mut() {
        if let Some(m) = replaced.get(pc) {
            g.executed_as = m
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(k, _)| k.clone());
        }
    }

    CampaignReport {
        schema_version: SCHEMA_VERSION,
        plan: plan.clone(),
        golden_cycles: baseline.cycles,
        golden_output: baseline.state.output_log.clone(),
        summary,
        by_target: by_target.into_values().collect(),
        by_static_instruction: by_static.into_values().collect(),
        by_dynamic_instruction: by_dynamic.into_values().collect(),
        misclassifying: records.iter().filter(|r| r.misclassified).map(|r| r.index).collect(),
        warnings,
        records,
    }
}

impl CampaignReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per run.
    pub fn records_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index",
            "cycle",
            "offset_ns",
            "policy",
            "illegal_policy",
            "outcome",
            "effect",
            "mechanisms",
            "stages",
            "iclass",
            "pc",
            "misclassified",
            "cycles",
            "root_latch",
            "root_field",
            "root_cycle",
        ])
        .expect("in-memory write");
        for r in &self.records {
            let join = |v: Vec<String>| v.join(";");
            let rc = r.root_cause.as_ref();
            w.write_record([
                r.index.to_string(),
                r.spec.cycle.to_string(),
                format!("{:.3}", r.spec.offset_ns),
                r.spec.policy.name().to_string(),
                r.spec.illegal_policy.name().to_string(),
                r.outcome.name().to_string(),
                r.effect.name().to_string(),
                join(r.mechanisms.iter().map(|m| m.outcome().name().to_string()).collect()),
                join(r.targets.iter().map(|t| t.stage.name().to_string()).collect()),
                join(r.targets.iter().map(|t| t.iclass.name().to_string()).collect()),
                join(r.targets.iter().map(|t| format!("0x{:08x}", t.pc)).collect()),
                r.misclassified.to_string(),
                r.cycles.to_string(),
                rc.and_then(|c| c.latch).map(|l| l.name().to_string()).unwrap_or_default(),
                rc.and_then(|c| c.field.clone()).unwrap_or_default(),
                rc.map(|c| c.cycle.to_string()).unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
    }

    /// Per-stage outcome matrix as a markdown table.
    pub fn stage_matrix_md(&self) -> String {
        let mut rows: BTreeMap<&str, OutcomeCounts> = BTreeMap::new();
        for g in &self.by_target {
            let row = rows.entry(g.stage.as_str()).or_insert_with(zero_counts);
            for (o, n) in &g.outcomes {
                *row.get_mut(o).unwrap() += n;
            }
        }
        let mut s = String::new();
        s.push_str("| stage |");
        for o in Outcome::ALL {
            s.push_str(&format!(" {} |", o.name()));
        }
        s.push_str("\n|---|");
        for _ in Outcome::ALL {
            s.push_str("---:|");
        }
        s.push('\n');
        for (stage, counts) in rows {
            s.push_str(&format!("| {stage} |"));
            for o in Outcome::ALL {
                s.push_str(&format!(" {} |", counts[&o]));
            }
            s.push('\n');
        }
        s
    }

    /// Markdown summary: totals, stage matrix, per-class breakdown, and
    /// misclassifying configurations.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("# Glitch campaign report\n\n");
        s.push_str(&format!(
            "{} runs over {} grid points; glitch-free run: {} cycles, output {:?}.\n\n",
            self.summary.runs, self.summary.grid_points, self.golden_cycles, self.golden_output
        ));
        for w in &self.warnings {
            s.push_str(&format!("> warning: {w}\n"));
        }
        if !self.warnings.is_empty() {
            s.push('\n');
        }
        s.push_str("## Outcomes\n\n| outcome | runs |\n|---|---:|\n");
        for (o, n) in &self.summary.outcomes {
            s.push_str(&format!("| {} | {n} |\n", o.name()));
        }
        s.push_str(&format!("\nMisclassified runs: {}\n\n", self.summary.misclassified));
        s.push_str("## Outcomes per targeted stage\n\n");
        s.push_str(&self.stage_matrix_md());
        s.push_str("\n## Outcomes per stage and occupant class\n\n| stage | iclass | runs | faults | misclassified |\n|---|---|---:|---:|---:|\n");
        for g in &self.by_target {
            let faults = g.runs - g.outcomes[&Outcome::NoEffect];
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                g.stage, g.iclass, g.runs, faults, g.misclassified
            ));
        }
        if !self.misclassifying.is_empty() {
            s.push_str("\n## Misclassifying configurations\n\n| index | cycle | offset_ns | policy | outcome |\n|---:|---:|---:|---|---|\n");
            for r in self.records.iter().filter(|r| r.misclassified) {
                s.push_str(&format!(
                    "| {} | {} | {:.3} | {} | {} |\n",
                    r.index,
                    r.spec.cycle,
                    r.spec.offset_ns,
                    r.spec.policy.name(),
                    r.outcome.name()
                ));
            }
        }
        s
    }

    /// Plot-ready per-instruction risk table: what each static instruction
    /// was, what it executed as when corrupted, and how often each outcome hit.
    pub fn instruction_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "pc".to_string(),
            "instruction".into(),
            "iclass".into(),
            "executed_as".into(),
            "runs".into(),
        ];
        header.extend(Outcome::ALL.iter().map(|o| o.name().to_ascii_lowercase()));
        header.push("misclassified".into());
        header.push("risk".into());
        w.write_record(&header).expect("in-memory write");
        for g in &self.by_static_instruction {
            let faults = g.runs - g.outcomes[&Outcome::NoEffect];
            let mut row = vec![
                format!("0x{:08x}", g.pc),
                g.instruction.clone(),
                g.iclass.name().to_string(),
                g.executed_as.clone().unwrap_or_default(),
                g.runs.to_string(),
            ];
            row.extend(Outcome::ALL.iter().map(|o| g.outcomes[o].to_string()));
            row.push(g.misclassified.to_string());
            row.push(format!("{:.4}", faults as f64 / g.runs.max(1) as f64));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
    }
}
