mod common;

use glitchbench::assembler::{assemble, Program};
use glitchbench::campaign::{
    first_divergence, inject, run_campaign, Baseline, CampaignPlan, CampaignReport, CycleRange, Mechanism, OffsetGrid,
    Outcome, OutcomeRecord,
};
use glitchbench::glitch::{CorruptionPolicy, GlitchSpec, IllegalPolicy};
use glitchbench::isa::IClass;
use glitchbench::latch::{LatchId, Stage};
use glitchbench::pipeline::run_pipeline;
use glitchbench::rat::build_dynamic_rat;
use glitchbench::timing::{ps_to_ns, TimingModel};
use glitchbench::workloads::{microbench, BnnWorkload};

fn fetch_cycle(b: &Baseline, pc: u32) -> u64 {
    b.trace
        .iter()
        .find(|r| r.occupancy.get(Stage::If).is_some_and(|d| d.pc == pc))
        .map(|r| r.cycle)
        .expect("instruction is fetched")
}

/// Every record for a glitch at `cycle` over the whole offset domain and all policies.
fn sweep(b: &Baseline, t: &TimingModel, cycle: u64) -> Vec<OutcomeRecord> {
    let mut out = Vec::new();
    for policy in CorruptionPolicy::ALL {
        let mut o = t.min_glitch_ps();
        while o < t.clock_period_ps() {
            let spec = GlitchSpec {
                cycle,
                offset_ns: ps_to_ns(o),
                policy,
                illegal_policy: IllegalPolicy::NopReplace,
            };
            out.push(inject(b, t, &spec, 4, 0).unwrap());
            o += 10;
        }
    }
    out
}

#[test]
fn masked_nop_replacement_keeps_its_mechanism_flag() {
    let t = TimingModel::reference();
    let p = assemble(
        "_start:
            li s0, 0x3000
            nop
            nop
            nop
        target:
            lw t0, 0(s0)
            li t0, 5
            li t6, 0x80000000
            sw t0, 0(t6)
            ebreak
        .org 0x3000
            .word 0x1234",
    )
    .unwrap();
    let b = Baseline::new(&p, 10_000).unwrap();
    let cycle = fetch_cycle(&b, p.symbol("target").unwrap());
    let records = sweep(&b, &t, cycle);
    let nops: Vec<_> = records
        .iter()
        .filter(|r| r.mechanisms.contains(&Mechanism::NopReplacement))
        .collect();
    assert!(!nops.is_empty());
    for r in nops {
        assert_eq!(r.outcome, Outcome::NopReplacement);
        assert!(matches!(r.effect, Outcome::NoEffect | Outcome::SdcStateOnly), "{:?}", r.effect);
        assert!(!r.misclassified);
        let rc = r.root_cause.as_ref().unwrap();
        assert_eq!((rc.latch, rc.field.as_deref()), (Some(LatchId::IfId), Some("instr_word")));
    }
}

#[test]
fn mutated_branch_deviates_control_flow() {
    let t = TimingModel::reference();
    let p = assemble(
        "_start:
            li t0, 1
            li a0, 0
            nop
            nop
            blt t0, t0, skip
        br:
            bne t0, t0, skip
            addi a0, a0, 7
        skip:
            addi a0, a0, 1
            li t6, 0x80000000
            sw a0, 0(t6)
            ebreak",
    )
    .unwrap();
    let b = Baseline::new(&p, 10_000).unwrap();
    let cycle = fetch_cycle(&b, p.symbol("br").unwrap());
    let records = sweep(&b, &t, cycle);
    let hit = records.iter().find(|r| {
        r.outcome == Outcome::MutatedInstruction
            && r.effect == Outcome::ControlFlowDeviation
            && r.replacements.iter().any(|x| x.executed_as.starts_with('b'))
    });
    let r = hit.expect("some glitch mutates the branch into a taken branch");
    assert!(r.misclassified);
    assert_eq!(r.root_cause.as_ref().unwrap().latch, Some(LatchId::IfId));
}

#[test]
fn ex_wb_result_corruption_roots_in_result_field() {
    let t = TimingModel::reference();
    let m = microbench(IClass::Muldiv).unwrap();
    let p = assemble(&m.source).unwrap();
    let b = Baseline::new(&p, 10_000).unwrap();
    let ex = m.cycle_in(Stage::Ex);
    let w = build_dynamic_rat(&p, &t, 10_000)
        .unwrap()
        .into_iter()
        .find(|w| w.cycle == ex && w.latch == LatchId::ExWb)
        .expect("EX_WB window for the mul");
    let r = inject(&b, &t, &GlitchSpec::new(ex, w.midpoint_ns()), 4, 0).unwrap();
    assert_eq!(r.targets.len(), 1);
    let rc = r.root_cause.as_ref().expect("corrupted result");
    assert_eq!((rc.latch, rc.field.as_deref(), rc.cycle), (Some(LatchId::ExWb), Some("result"), ex));
    assert_ne!(rc.new_value, rc.stale_value);
    let write = rc.chain.iter().find(|d| d.location == "x5").expect("register write diverges");
    assert_eq!(write.actual, rc.stale_value);
    assert_eq!(write.expected, rc.new_value);
}

#[test]
fn identical_traces_have_no_root_cause() {
    let p = assemble(&microbench(IClass::Load).unwrap().source).unwrap();
    let t = TimingModel::reference();
    let a = run_pipeline(&p, &t, &[], 1000).unwrap();
    let b = run_pipeline(&p, &t, &[], 1000).unwrap();
    assert_eq!(first_divergence(&a.trace, &b.trace), None);
}

#[test]
fn first_divergence_matches_incremental_tracker() {
    let t = TimingModel::reference();
    let m = microbench(IClass::Load).unwrap();
    let p = assemble(&m.source).unwrap();
    let b = Baseline::new(&p, 10_000).unwrap();
    let spec = GlitchSpec::new(m.if_cycle, 7.5);
    let faulty = run_pipeline(&p, &t, &[spec], 10_000).unwrap();
    let full = first_divergence(&b.trace, &faulty.trace).unwrap();
    let rec = inject(&b, &t, &spec, 4, 0).unwrap();
    let inc = rec.root_cause.unwrap();
    assert_eq!((full.cycle, full.latch, full.field.clone()), (inc.cycle, inc.latch, inc.field.clone()));
    assert_eq!(full.chain.first(), inc.chain.first());
}

fn small_plan() -> CampaignPlan {
    let mut plan = CampaignPlan::new(
        CycleRange { lo: 6, hi: 14 },
        OffsetGrid {
            lo_ns: 1.0,
            hi_ns: 8.9,
            step_ns: 0.1,
        },
    );
    plan.policies = CorruptionPolicy::ALL.to_vec();
    plan.illegal_policies = vec![IllegalPolicy::NopReplace, IllegalPolicy::Trap];
    plan
}

#[test]
fn campaign_covers_every_grid_point_reproducibly() {
    let t = TimingModel::reference();
    let p = assemble(&microbench(IClass::Store).unwrap().source).unwrap();
    let plan = small_plan();
    let r = run_campaign(&plan, &p, &t).unwrap();
    assert_eq!(r.records.len(), plan.grid().len());
    assert_eq!(r.summary.runs, r.records.len());
    assert_eq!(r.summary.outcomes.values().sum::<u64>() as usize, r.records.len());
    assert!(r.records.iter().enumerate().all(|(i, x)| x.index == i));
    let b = Baseline::new(&p, plan.max_cycles).unwrap();
    for rec in r.records.iter().step_by(97) {
        assert_eq!(&inject(&b, &t, &rec.spec, plan.budget_factor, rec.index).unwrap(), rec);
    }
    for rec in &r.records {
        if rec.outcome == Outcome::NoEffect {
            assert!(rec.root_cause.is_none() && rec.output_diff.is_none() && rec.reg_diff.is_empty());
        }
    }
}

#[test]
fn subsampled_plan_is_seeded() {
    let t = TimingModel::reference();
    let p = assemble(&microbench(IClass::Load).unwrap().source).unwrap();
    let mut plan = small_plan();
    plan.max_runs = Some(50);
    plan.seed = 9;
    let a = run_campaign(&plan, &p, &t).unwrap();
    assert_eq!(a.records.len(), 50);
    plan.jobs = 3;
    assert_eq!(a.to_json(), run_campaign(&plan, &p, &t).unwrap().to_json());
    plan.seed = 10;
    let c = run_campaign(&plan, &p, &t).unwrap();
    assert_ne!(
        a.records.iter().map(|r| r.index).collect::<Vec<_>>(),
        c.records.iter().map(|r| r.index).collect::<Vec<_>>()
    );
}

#[test]
fn report_round_trips_through_json() {
    let t = TimingModel::reference();
    let p = assemble(&microbench(IClass::Muldiv).unwrap().source).unwrap();
    let r = run_campaign(&small_plan(), &p, &t).unwrap();
    let back: CampaignReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back.to_json(), r.to_json());
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert!(v["plan"].get("jobs").is_none());
    assert!(r.instruction_csv().lines().count() > 1);
    assert_eq!(r.records_csv().lines().count(), r.records.len() + 1);
}

#[test]
fn bnn_campaign_over_threshold_load_window_misclassifies() {
    let t = TimingModel::reference();
    let w = BnnWorkload::reference();
    let p: Program = w.program_for(2);
    let win = build_dynamic_rat(&p, &t, 1_000_000)
        .unwrap()
        .into_iter()
        .find(|x| x.latch == LatchId::IfId && x.label.as_deref() == Some("l1_thr_9") && x.lo_ns <= 4.9)
        .expect("threshold load window");
    let plan = CampaignPlan::new(
        CycleRange {
            lo: win.cycle,
            hi: win.cycle + 1,
        },
        OffsetGrid {
            lo_ns: win.lo_ns,
            hi_ns: win.hi_ns - 0.05,
            step_ns: 0.05,
        },
    );
    let r = run_campaign(&plan, &p, &t).unwrap();
    let hit = r
        .records
        .iter()
        .find(|x| x.outcome == Outcome::NopReplacement && x.misclassified)
        .expect("misclassifying NOP replacement");
    assert!(w.misclassified(2, &hit.output_diff.as_ref().unwrap().actual));
    assert!(r.misclassifying.contains(&hit.index));
    assert!(r.by_target.iter().any(|g| g.stage == "ID" && g.iclass == "LOAD" && g.misclassified > 0));
    assert!(r.by_static_instruction.iter().any(|g| g.executed_as.as_deref() == Some("nop")));
}
