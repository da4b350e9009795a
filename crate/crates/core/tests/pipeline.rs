mod common;

use glitchbench::assembler::assemble;
use glitchbench::glitch::GlitchSpec;
use glitchbench::isa::IClass;
use glitchbench::latch::Stage;
use glitchbench::machine::run_golden;
use glitchbench::pipeline::{run_pipeline, PipelineError};
use glitchbench::timing::TimingModel;
use glitchbench::workloads::{microbench, random_program};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pipeline_matches_iss(seed in any::<u64>(), len in 5usize..120) {
        let p = assemble(&random_program(seed, len)).unwrap();
        let golden = run_golden(&p, 1_000_000);
        let run = run_pipeline(&p, &TimingModel::reference(), &[], 1_000_000).unwrap();
        prop_assert!(golden.halted);
        prop_assert_eq!(&run.state, &golden.state);
        prop_assert_eq!(run.retired as usize, golden.events.len());
        let pcs: Vec<u32> = run.retirements().map(|r| r.pc).collect();
        let golden_pcs: Vec<u32> = golden.events.iter().map(|e| e.pc).collect();
        prop_assert_eq!(pcs, golden_pcs);
    }

    #[test]
    fn glitched_runs_are_deterministic(seed in any::<u64>(), cycle in 0u64..40, offset in 1.0f64..9.9) {
        let p = assemble(&random_program(seed, 30)).unwrap();
        let t = TimingModel::reference();
        let g = [GlitchSpec::new(cycle, offset)];
        let a = run_pipeline(&p, &t, &g, 5_000);
        let b = run_pipeline(&p, &t, &g, 5_000);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a.state, &b.state);
                prop_assert_eq!(a.trace_jsonl(), b.trace_jsonl());
            }
            (Err(PipelineError::NotHalted { .. }), Err(PipelineError::NotHalted { .. })) => {}
            (a, b) => prop_assert!(false, "diverging results: {:?} / {:?}", a.is_ok(), b.is_ok()),
        }
    }
}

#[test]
fn microbench_instances_sit_at_documented_cycles() {
    let t = TimingModel::reference();
    for class in IClass::ALL {
        let m = microbench(class).unwrap();
        let p = assemble(&m.source).unwrap();
        let bench = p.symbol("bench").unwrap();
        assert_eq!(bench, m.pc);
        let run = run_pipeline(&p, &t, &[], 10_000).unwrap();
        for stage in Stage::ALL {
            let k = m.cycle_in(stage) as usize;
            let occ = run.trace[k].occupancy.get(stage).unwrap_or_else(|| panic!("{class} {stage:?} empty"));
            assert_eq!(occ.pc, m.pc, "{class} in {stage:?} at {k}");
        }
        let golden = run_golden(&p, 10_000);
        assert_eq!(run.state.output_log, golden.state.output_log);
        assert_eq!(run.state.output_log.len(), 1);
    }
}

#[test]
fn microbench_checksums() {
    // Independently computed from the microbench data and register setup.
    let s1: u32 = 0x0123_4567;
    let s2: u32 = 13;
    let expected = [
        (IClass::AluReg, s1.wrapping_add(s2) ^ s1.wrapping_sub(s2)),
        (IClass::AluImm, s1.wrapping_add(77) ^ (s2 ^ (-3i32 as u32))),
        (IClass::Load, 0x89ab_cdef ^ 0x7f80),
        (IClass::Store, s1 ^ (s2 & 0xff)),
        (IClass::Upper, 0xabcd_e000 ^ (0x28 + 0x10000)),
        (IClass::Muldiv, s1.wrapping_mul(s2) ^ (s1 / s2)),
        (IClass::System, s1 ^ s2),
    ];
    for (class, want) in expected {
        let p = assemble(&microbench(class).unwrap().source).unwrap();
        let out = run_golden(&p, 10_000).state.output_log;
        assert_eq!(out, [want], "{class}");
    }
}

#[test]
fn branch_microbench_takes_and_skips() {
    let m = microbench(IClass::Branch).unwrap();
    assert!(m.source.contains("bne s1, s1"));
    assert!(m.source.contains("beq s1, s1"));
    let p = assemble(&m.source).unwrap();
    let golden = run_golden(&p, 10_000);
    // addi t0, zero, 99 is skipped by the taken branch.
    assert_eq!(golden.state.regs[5], 0);
    assert_eq!(golden.state.regs[6], 5);
}
