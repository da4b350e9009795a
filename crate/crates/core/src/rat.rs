//! Risk Assessment Table.
//!
//! The static table ranks every (class, latch) pair by critical-path delay;
//! the window width `t_crit + t_setup - o_min` is the likelihood proxy (a
//! wider window is easier to hit with imprecise equipment). The dynamic
//! table walks a glitch-free run and reports, per cycle, the offsets that
//! violate exactly one latch.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::assembler::Program;
use crate::glitch::GlitchSpec;
use crate::isa::IClass;
use crate::latch::{LatchId, Stage};
use crate::pipeline::{CycleReport, DynInstr, FaultEvent, Occupancy, Pipeline, PipelineConfig};
use crate::timing::{ps_to_ns, slack, Picos, TimingModel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatEntry {
    pub iclass: IClass,
    pub stage: LatchId,
    pub t_crit_ns: f64,
    pub slack_ns: f64,
    pub window_lo_ns: f64,
    /// Exclusive.
    pub window_hi_ns: f64,
    pub likelihood_ns: f64,
    pub rank: usize,
}

pub fn build_static_rat(timing: &TimingModel) -> Vec<RatEntry> {
    let mut pairs: Vec<(IClass, LatchId)> = IClass::ALL
        .iter()
        .flat_map(|&c| LatchId::ALL.iter().map(move |&l| (c, l)))
        .collect();
    pairs.sort_by(|a, b| {
        timing
            .t_crit_ps(b.0, b.1)
            .cmp(&timing.t_crit_ps(a.0, a.1))
            .then_with(|| a.0.name().cmp(b.0.name()))
            .then_with(|| a.1.name().cmp(b.1.name()))
    });
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (c, l))| {
            let hi = timing.threshold_ps(c, l);
            RatEntry {
                iclass: c,
                stage: l,
                t_crit_ns: timing.t_crit_ns(c, l),
                slack_ns: slack(timing, c, l),
                window_lo_ns: timing.min_glitch_ns(),
                window_hi_ns: ps_to_ns(hi),
                likelihood_ns: ps_to_ns(hi - timing.min_glitch_ps()),
                rank: i + 1,
            }
        })
        .collect()
}

pub fn static_rat_csv(entries: &[RatEntry]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iclass", "stage", "t_crit_ns", "slack_ns", "window_lo_ns", "window_hi_ns", "rank"])
        .expect("in-memory write");
    for e in entries {
        w.write_record([
            e.iclass.name().to_string(),
            e.stage.name().to_string(),
            format!("{:.3}", e.t_crit_ns),
            format!("{:.3}", e.slack_ns),
            format!("{:.3}", e.window_lo_ns),
            format!("{:.3}", e.window_hi_ns),
            e.rank.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
}

/// Offsets `[lo, hi)` at which a glitch in `cycle` violates only `latch`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectiveWindow {
    pub cycle: u64,
    pub latch: LatchId,
    /// Stage that consumes the corrupted latch.
    pub stage: Stage,
    pub iclass: IClass,
    pub lo_ns: f64,
    /// Exclusive.
    pub hi_ns: f64,
    /// Instruction whose capture is targeted.
    pub occupant: DynInstr,
    /// Nearest preceding program label, with byte offset when not exact.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub occupants: Occupancy,
    #[serde(skip)]
    pub lo_ps: Picos,
    #[serde(skip)]
    pub hi_ps: Picos,
}

impl SelectiveWindow {
    pub fn width_ns(&self) -> f64 {
        ps_to_ns(self.hi_ps - self.lo_ps)
    }

    /// Middle of the window, rounded down to whole picoseconds.
    pub fn midpoint_ns(&self) -> f64 {
        ps_to_ns((self.lo_ps + self.hi_ps) / 2)
    }
}

#[derive(Debug, Error)]
pub enum RatError {
    #[error("NOT_HALTED: glitch-free run did not halt within {0} cycles")]
    NotHalted(u64),
}

fn occupant_for(occ: &Occupancy, latch: LatchId) -> Option<DynInstr> {
    occ.get(latch.source_stage()).copied()
}

/// Label at or before `pc`, e.g. `l1_thr_3` or `popcount+8`.
pub fn label_for(program: &Program, pc: u32) -> Option<String> {
    program
        .symbols
        .iter()
        .filter(|(_, &a)| a <= pc)
        .max_by_key(|(name, &a)| (a, std::cmp::Reverse(name.as_str())))
        .map(|(name, &a)| if a == pc { name.clone() } else { format!("{name}+{}", pc - a) })
}

/// Windows for one cycle, given its capture sites.
pub fn windows_for_cycle(report: &CycleReport, timing: &TimingModel) -> Vec<SelectiveWindow> {
    let mut out = Vec::new();
    for latch in LatchId::ALL {
        let Some(class) = report.sites[latch.index()] else { continue };
        let others = LatchId::ALL
            .iter()
            .filter(|&&l| l != latch)
            .filter_map(|&l| report.sites[l.index()].map(|c| timing.threshold_ps(c, l)))
            .max()
            .unwrap_or(Picos::MIN);
        let lo = others.max(timing.min_glitch_ps());
        let hi = timing.threshold_ps(class, latch).min(timing.clock_period_ps());
        if lo >= hi {
            continue;
        }
        let Some(occupant) = occupant_for(&report.occupancy, latch) else { continue };
        out.push(SelectiveWindow {
            cycle: report.cycle,
            latch,
            stage: latch.sink_stage(),
            iclass: class,
            lo_ns: ps_to_ns(lo),
            hi_ns: ps_to_ns(hi),
            occupant,
            label: None,
            occupants: report.occupancy,
            lo_ps: lo,
            hi_ps: hi,
        });
    }
    out
}

pub fn build_dynamic_rat(
    program: &Program,
    timing: &TimingModel,
    max_cycles: u64,
) -> Result<Vec<SelectiveWindow>, RatError> {
    let mut p = Pipeline::new(program, PipelineConfig::default());
    let mut out = Vec::new();
    while !p.halted() {
        if p.cycle() >= max_cycles {
            return Err(RatError::NotHalted(max_cycles));
        }
        let rep = p.clock(None).expect("glitch-free clock cannot fail");
        for mut w in windows_for_cycle(&rep, timing) {
            w.label = label_for(program, w.occupant.pc);
            out.push(w);
        }
    }
    Ok(out)
}

pub fn dynamic_rat_jsonl(windows: &[SelectiveWindow]) -> String {
    let mut s = String::new();
    for w in windows {
        s.push_str(&serde_json::to_string(w).expect("window serializes"));
        s.push('\n');
    }
    s
}

/// Empirical check of one window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowCheck {
    pub cycle: u64,
    pub latch: LatchId,
    pub predicted_lo_ns: f64,
    pub predicted_hi_ns: f64,
    pub empirical_lo_ns: f64,
    pub empirical_hi_ns: f64,
    /// Both boundaries within one search step of the prediction.
    pub boundaries_agree: bool,
    /// Grid points inside the window that corrupted exactly the target latch.
    pub grid_points: usize,
    pub grid_exact: usize,
}

impl WindowCheck {
    pub fn ok(&self) -> bool {
        self.boundaries_agree && self.grid_exact == self.grid_points
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Boundary search resolution.
    pub step_ps: Picos,
    /// Spacing of the exactly-one-latch check; 0 disables it.
    pub grid_ps: Picos,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            step_ps: 10,
            grid_ps: 50,
        }
    }
}

fn violated_latches(p: &Pipeline, cycle: u64, offset: Picos, timing: &TimingModel) -> [bool; 3] {
    let mut probe = p.clone();
    let spec = GlitchSpec::new(cycle, ps_to_ns(offset));
    let rep = probe.clock(Some((&spec, timing))).expect("offset inside the domain");
    let mut hit = [false; 3];
    for e in &rep.events {
        if let FaultEvent::CaptureViolation { latch, .. } = e {
            hit[latch.index()] = true;
        }
    }
    hit
}

/// Smallest grid offset in `[from, T)` where `pred` turns false, assuming
/// it is true below some boundary and false above.
fn boundary(from: Picos, step: Picos, limit: Picos, mut pred: impl FnMut(Picos) -> bool) -> Picos {
    let (mut lo, mut hi) = (0i64, (limit - from + step - 1) / step);
    if !pred(from) {
        return from;
    }
    // Invariant: pred(from + lo*step) true, pred(from + hi*step) false or past the limit.
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if pred(from + mid * step) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    from + hi * step
}

/// Re-run the glitched cycle for each window and compare the observed
/// violation boundaries with the predicted ones.
///
/// Only the capture at the glitched cycle decides whether a latch is
/// violated, and history up to that cycle is glitch-free, so each probe
/// clones the glitch-free pipeline just before the cycle and clocks it once.
pub fn verify_rat_empirically(
    program: &Program,
    timing: &TimingModel,
    windows: &[SelectiveWindow],
    options: VerifyOptions,
) -> Vec<WindowCheck> {
    let mut by_cycle: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_cycle.entry(w.cycle).or_default().push(i);
    }
    let mut checks: Vec<Option<WindowCheck>> = vec![None; windows.len()];
    let mut p = Pipeline::new(program, PipelineConfig::default());
    let o_min = timing.min_glitch_ps();
    let period = timing.clock_period_ps();
    let step = options.step_ps;
    for (&cycle, idxs) in &by_cycle {
        while p.cycle() < cycle && !p.halted() {
            p.clock(None).expect("glitch-free clock");
        }
        if p.halted() {
            break;
        }
        for &i in idxs {
            let w = &windows[i];
            let t = w.latch.index();
            let hi = boundary(o_min, step, period, |o| violated_latches(&p, cycle, o, timing)[t]);
            let lo = boundary(o_min, step, period, |o| {
                let v = violated_latches(&p, cycle, o, timing);
                (0..3).any(|k| k != t && v[k])
            });
            let agree = (hi - w.hi_ps).abs() <= step && (lo - w.lo_ps).abs() <= step;
            let (mut points, mut exact) = (0, 0);
            if options.grid_ps > 0 {
                let g = options.grid_ps;
                let mut o = (w.lo_ps + g - 1).div_euclid(g) * g;
                while o < w.hi_ps {
                    points += 1;
                    let v = violated_latches(&p, cycle, o, timing);
                    if (0..3).all(|k| v[k] == (k == t)) {
                        exact += 1;
                    }
                    o += g;
                }
            }
            checks[i] = Some(WindowCheck {
                cycle,
                latch: w.latch,
                predicted_lo_ns: w.lo_ns,
                predicted_hi_ns: w.hi_ns,
                empirical_lo_ns: ps_to_ns(lo),
                empirical_hi_ns: ps_to_ns(hi),
                boundaries_agree: agree,
                grid_points: points,
                grid_exact: exact,
            });
        }
    }
    checks.into_iter().flatten().collect()
}
