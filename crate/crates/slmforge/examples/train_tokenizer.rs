//! Train a byte-level BPE tokenizer on synthesized prompt text and show
//! how control tokens behave: each is one atomic id, merges never cross
//! them, and encode/decode roundtrips exactly.

use anyhow::Result;
use slmforge::distiller::{grammar_generate, GrammarTeacherSpec, IntentRecord};
use slmforge::corpus::Task;
use slmforge::tokenizer::{train_bpe, ControlKind, ControlToken};

fn main() -> Result<()> {
    // Synthesize training text with the deterministic grammar teacher.
    let spec = GrammarTeacherSpec::standard(7);
    let mut corpus = String::new();
    for i in 0..60 {
        let record = IntentRecord::new(vec![
            ("Topic", format!("subject {i}")),
            ("Scene object", format!("object {}", i % 13)),
        ]);
        for task in [Task::Ip, Task::Tp] {
            for target in [6, 9, 14] {
                corpus.push_str(&grammar_generate(&record, task, target, 7, &spec)?);
                corpus.push('\n');
            }
        }
    }

    let artifact = train_bpe(corpus.as_bytes(), 512, &ControlToken::standard_set())?;
    println!(
        "trained tokenizer: {} tokens ({} byte + {} control + {} merged), hash {}",
        artifact.vocab_size(),
        256,
        artifact.specials().len(),
        artifact.merges().len(),
        &artifact.content_hash_hex()[..16],
    );

    // A full training instance: length command, intent, modality, prompt.
    let instance = "<|9|> <|intent|> Topic: subject 3, Scene object: object 3 <|TP|> \
                    create a subject 3 object 3 design template";
    let ids = artifact.encode(instance);
    println!("\ninstance: {instance}");
    println!("encodes to {} ids, first 8: {:?}", ids.len(), &ids[..8]);

    // Control tokens are single ids wherever they appear in the text.
    for kind in [
        ControlKind::Length(9),
        ControlKind::IntentMarker,
        ControlKind::ModalityT2t,
        ControlKind::EndOfText,
    ] {
        let id = artifact.control_id(kind).expect("standard control");
        println!(
            "control {:?} -> id {id} ({} bytes as text)",
            kind,
            artifact.token_bytes(id).unwrap().len()
        );
    }
    assert_eq!(ids[0], artifact.control_id(ControlKind::Length(9)).unwrap());
    assert!(ids.iter().filter(|&&id| artifact.is_control(id)).count() == 3);

    // Exact roundtrip, multibyte text included.
    for text in [instance, "snowy peak \u{2728} caf\u{e9} \u{1F30C}"] {
        assert_eq!(artifact.decode(&artifact.encode(text))?, text);
    }
    println!("\nroundtrip holds for the instance and for multibyte text");
    Ok(())
}
