//! Tokenizer checks against an independent brute-force trainer, plus
//! roundtrip fuzzing over random UTF-8 and control-token atomicity.

mod support;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use slmforge::tokenizer::{train_bpe, ControlToken, TokenizerArtifact};
use support::oracle::naive_bpe_merges;

const FIXTURE: &[u8] = include_bytes!("fixtures/oracle_corpus.txt");

fn fixture_artifact(n_merges: usize) -> TokenizerArtifact {
    let specials = ControlToken::standard_set();
    let target = 256 + specials.len() + n_merges;
    train_bpe(FIXTURE, target, &specials).expect("train on fixture")
}

#[test]
fn merges_match_brute_force_oracle_rank_for_rank() {
    let n_merges = 150;
    let artifact = fixture_artifact(n_merges);

    let specials = ControlToken::standard_set();
    let surfaces: Vec<&str> = specials.iter().map(|s| s.surface.as_str()).collect();
    let expected = naive_bpe_merges(FIXTURE, n_merges, &surfaces);

    assert_eq!(artifact.merges().len(), n_merges);
    assert_eq!(expected.len(), n_merges, "oracle ran out of material");
    for (rank, (got, want)) in artifact.merges().iter().zip(&expected).enumerate() {
        assert_eq!(
            (&got.0, &got.1),
            (&want.0, &want.1),
            "merge rank {rank} disagrees with the oracle"
        );
    }
}

#[test]
fn fixture_is_pinned_at_ten_kib() {
    assert_eq!(FIXTURE.len(), 10 * 1024);
    assert!(std::str::from_utf8(FIXTURE).is_ok(), "fixture must be UTF-8");
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let len = 1 + (rng.next_u32() % 60) as usize;
    let mut s = String::new();
    while s.chars().count() < len {
        let c = match rng.next_u32() % 10 {
            0..=4 => Some(char::from(b' ' + (rng.next_u32() % 95) as u8)),
            5 => char::from_u32(0xC0 + rng.next_u32() % 0x240),
            6 => char::from_u32(0x4E00 + rng.next_u32() % 0x5000),
            7 => char::from_u32(0x1F300 + rng.next_u32() % 0x200),
            8 => char::from_u32(0x0370 + rng.next_u32() % 0x200),
            _ => char::from_u32(rng.next_u32() % 0x11_0000),
        }
        .unwrap_or('?');
        s.push(c);
    }
    s
}

#[test]
fn thousand_random_utf8_strings_roundtrip_byte_exact() {
    let artifact = fixture_artifact(80);
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    for i in 0..1000 {
        let s = random_string(&mut rng);
        let ids = artifact.encode(&s);
        let back = artifact.decode(&ids).expect("decode");
        assert_eq!(back, s, "roundtrip failed on case {i}");
    }
}

#[test]
fn every_control_token_encodes_to_a_single_id() {
    let artifact = fixture_artifact(80);
    for sp in artifact.specials() {
        let ids = artifact.encode(&sp.surface);
        assert_eq!(ids.len(), 1, "{} split into {:?}", sp.surface, ids);
        assert!(artifact.is_control(ids[0]));

        let wrapped = format!("before {} after", sp.surface);
        let ids = artifact.encode(&wrapped);
        assert_eq!(
            ids.iter().filter(|&&id| artifact.is_control(id)).count(),
            1,
            "{} not atomic when embedded",
            sp.surface
        );
    }
}

#[test]
fn specials_embedded_in_training_corpus_never_leak_as_merges() {
    // The fixture contains literal control surfaces; no learned merge may
    // reproduce one.
    let artifact = fixture_artifact(150);
    let surfaces: Vec<Vec<u8>> = artifact
        .specials()
        .iter()
        .map(|s| s.surface.as_bytes().to_vec())
        .collect();
    for (left, right) in artifact.merges() {
        let mut fused = left.clone();
        fused.extend_from_slice(right);
        assert!(
            !surfaces.contains(&fused),
            "merge reproduced a control surface: {:?}",
            String::from_utf8_lossy(&fused)
        );
    }
}
