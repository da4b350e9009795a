mod common;

use glitchbench::assembler::{assemble, load_image};
use glitchbench::isa::IClass;
use glitchbench::machine::run_golden;
use glitchbench::workloads::{
    generate_bnn_asm, microbench, reference_bnn_forward, BnnModel, BnnWorkload, InputsFile, BNN_SEED, CLASSES, HIDDEN,
};

fn read(name: &str) -> String {
    std::fs::read_to_string(common::fixtures().join(name)).unwrap()
}

#[test]
fn shipped_bnn_fixtures_match_the_generator() {
    let w = BnnWorkload::reference();
    assert_eq!(read("bnn.s"), w.source());
    let img = load_image(common::fixtures().join("bnn.img")).unwrap();
    assert_eq!(img, w.program);
    let file: InputsFile = serde_json::from_str(&read("inputs.json")).unwrap();
    assert_eq!(file, w.inputs_file());
    assert_eq!(file.seed, BNN_SEED);
    assert_eq!(file.parsed_inputs().unwrap(), w.inputs);
}

#[test]
fn shipped_microbenches_match_the_generator() {
    for class in IClass::ALL {
        let name = format!("micro_{}.s", class.name().to_ascii_lowercase());
        assert_eq!(read(&name), microbench(class).unwrap().source, "{name}");
    }
}

#[test]
fn generation_is_deterministic() {
    let a = BnnWorkload::generate(BNN_SEED);
    let b = BnnWorkload::generate(BNN_SEED);
    assert_eq!(a.source(), b.source());
    assert_ne!(BnnWorkload::generate(7).source(), a.source());
}

#[test]
fn bnn_structure() {
    let src = BnnWorkload::reference().source();
    let layer1 = &src[..src.find("l2_").unwrap()];
    assert_eq!(layer1.lines().filter(|l| l.trim_start().starts_with("blt ")).count(), HIDDEN);
    for n in 0..HIDDEN {
        let start = layer1.find(&format!("l1_n{n}:")).unwrap();
        let end = layer1.find(&format!("l1_skip_{n}:")).unwrap();
        let loads = layer1[start..end].lines().filter(|l| l.trim_start().starts_with("lw ")).count();
        assert!(loads >= 2, "neuron {n} has {loads} loads");
    }
    assert!(src.contains("popcount"));
    assert!(src.contains("ebreak"));
}

#[test]
fn reference_forward_examples() {
    // One hidden neuron with all-(+1) weights and threshold 32 against an
    // all-zero input: xnor(0, 1) = 0 matches, below threshold, so it stays -1.
    let mut m = BnnModel {
        seed: 0,
        w1: vec![u64::MAX; HIDDEN],
        thr1: vec![32; HIDDEN],
        w2: vec![0; CLASSES],
        thr2: vec![0; CLASSES],
    };
    assert_eq!(m.hidden(0), 0);
    // All hidden bits -1 and all class rows identical: a ten-way tie goes to class 0.
    assert_eq!(reference_bnn_forward(&m, 0), 0);
    // Make class 3 the unique best match for the all-(-1) hidden vector.
    m.w2 = vec![u16::MAX; CLASSES];
    m.w2[3] = 0;
    assert_eq!(reference_bnn_forward(&m, 0), 3);
    m.w2[7] = 0;
    assert_eq!(reference_bnn_forward(&m, 0), 3);
}

#[test]
fn labels_are_diverse_and_guest_agrees() {
    let w = BnnWorkload::reference();
    let distinct: std::collections::BTreeSet<_> = w.golden_labels.iter().collect();
    assert!(distinct.len() >= 3);
    for i in [0, 5, 31] {
        let out = run_golden(&w.program_for(i), 1_000_000).state.output_log;
        assert_eq!(out, [w.golden_labels[i]]);
    }
    let near = w.inputs.iter().filter(|&&x| w.model.near_threshold(x)).count();
    assert!(near >= 8);
}

#[test]
fn shape_errors_are_reported() {
    let mut m = BnnWorkload::reference().model;
    m.thr1.pop();
    assert!(generate_bnn_asm(&m, 0).is_err());
    assert!(assemble(&generate_bnn_asm(&BnnWorkload::reference().model, 0).unwrap()).is_ok());
}
