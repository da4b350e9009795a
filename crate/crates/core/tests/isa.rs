mod common;

use glitchbench::assembler::{assemble, AsmErrorKind};
use glitchbench::isa::{decode, disassemble, encode, Decoded, Mnemonic};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn oracle_corpus_matches_clang() {
    let p = assemble(common::ORACLE_SOURCE).unwrap();
    for (k, &want) in common::ORACLE_WORDS.iter().enumerate() {
        let got = p.word_at(4 * k as u32).unwrap();
        assert_eq!(got, want, "word {k}: {} vs 0x{want:08x}", disassemble(got));
    }
}

#[test]
fn load_example_encodes_as_documented() {
    let p = assemble("lw x5, 0(x6)").unwrap();
    assert_eq!(p.word_at(0), Some(0x0003_2283));
    assert_eq!(disassemble(0x0003_2283), "lw x5, 0(x6)");
}

#[test]
fn oracle_words_disassemble_and_reassemble() {
    for (k, &w) in common::ORACLE_WORDS.iter().enumerate() {
        let text = disassemble(w);
        let p = assemble(&format!(".org {}\n{text}", 4 * k)).unwrap();
        assert_eq!(p.word_at(4 * k as u32), Some(w), "{text}");
    }
}

#[test]
fn assembler_errors_carry_spans() {
    let e = assemble("nop\n  frob x1, x2").unwrap_err();
    assert_eq!((e.span.line, e.span.column), (2, 3));
    assert!(matches!(e.kind, AsmErrorKind::UnknownMnemonic(_)));
    let e = assemble("addi x1, x0, 4096").unwrap_err();
    assert!(matches!(e.kind, AsmErrorKind::ImmediateOutOfRange { .. }));
    let e = assemble("beq x0, x0, nowhere").unwrap_err();
    assert!(matches!(e.kind, AsmErrorKind::UnresolvedLabel(_)));
    let e = assemble("a:\na:\nnop").unwrap_err();
    assert!(matches!(e.kind, AsmErrorKind::DuplicateLabel(_)));
}

fn mnemonic() -> impl Strategy<Value = Mnemonic> {
    (0..Mnemonic::ALL.len()).prop_map(|i| Mnemonic::ALL[i])
}

proptest! {
    #[test]
    fn encode_decode_round_trip(m in mnemonic(), seed in any::<u64>()) {
        let i = common::random_instruction(m, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(decode(i.raw), Decoded::Valid(i));
        prop_assert_eq!(encode(&i), Ok(i.raw));
    }

    #[test]
    fn text_round_trip(m in mnemonic(), seed in any::<u64>()) {
        let i = common::random_instruction(m, &mut ChaCha8Rng::seed_from_u64(seed));
        let text = disassemble(i.raw);
        let p = assemble(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
        prop_assert_eq!(p.word_at(0), Some(i.raw), "{}", text);
    }

    #[test]
    fn decode_is_total_and_canonical(word in any::<u32>()) {
        match decode(word) {
            Decoded::Valid(i) => {
                prop_assert_eq!(i.raw, word);
                let again = encode(&i).unwrap();
                prop_assert_eq!(decode(again).valid().map(|d| d.mnemonic), Some(i.mnemonic));
            }
            Decoded::Illegal(w) => {
                prop_assert_eq!(w, word);
                prop_assert!(disassemble(word).starts_with(".illegal"));
            }
        }
    }
}
