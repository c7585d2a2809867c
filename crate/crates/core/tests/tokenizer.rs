use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refinpaint_core::midi::{parse_smf, sort_notes, write_smf, NoteEvent, Score};
use refinpaint_core::remi::*;

fn random_score(rng: &mut ChaCha8Rng) -> Score {
    let ppq = [24u16, 96, 120, 384, 480, 960][rng.gen_range(0..6)];
    let n = rng.gen_range(0..60);
    let notes = (0..n)
        .map(|_| {
            NoteEvent::new(
                rng.gen_range(0..128),
                rng.gen_range(0..ppq as u64 * 40),
                rng.gen_range(1..ppq as u64 * 12),
            )
        })
        .collect();
    Score::new(ppq, notes)
}

/// Quantizer written from the tokenizer rules: grid of eighth-beats with
/// round-half-up, durations clamped to 1..=64, piano range only, and
/// same-grid same-pitch duplicates merged keeping the longer one.
fn oracle_quantize(score: &Score) -> Vec<NoteEvent> {
    let round = |ticks: u64| -> u64 {
        let exact = ticks as f64 * 8.0 / score.ppq as f64;
        (exact + 0.5).floor() as u64
    };
    let mut cells: BTreeMap<(u64, u8), u64> = BTreeMap::new();
    for n in &score.notes {
        if !(21..=108).contains(&n.pitch) {
            continue;
        }
        let d = round(n.duration).clamp(1, 64);
        let e = cells.entry((round(n.onset), n.pitch)).or_insert(0);
        *e = (*e).max(d);
    }
    let mut out: Vec<NoteEvent> = cells
        .into_iter()
        .map(|((grid, pitch), d)| NoteEvent::new(pitch, grid * 60, d * 60))
        .collect();
    sort_notes(&mut out);
    out
}

#[test]
fn vocabulary_has_189_entries() {
    assert_eq!(VOCAB_SIZE, 189);
    assert_eq!(Vocab::remi().len(), 189);
    for id in 0..189 {
        assert_eq!(Token::from_id(id).unwrap().id(), id);
    }
    assert!(Token::from_id(189).is_none());
}

#[test]
fn smf_round_trip_preserves_notes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let score = random_score(&mut rng);
        let back = parse_smf(&write_smf(&score)).unwrap();
        assert_eq!(back.ppq, score.ppq);
        assert_eq!(note_multiset(&back), note_multiset(&score));
    }
}

#[test]
fn decode_of_encode_is_quantize() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..300 {
        let score = random_score(&mut rng);
        let seq = encode(&score);
        check_grammar(&seq.tokens).unwrap();
        let decoded = decode(&seq).unwrap();
        assert_eq!(decoded.ppq, DECODE_PPQ);
        assert_eq!(note_multiset(&decoded), oracle_quantize(&score));
        assert_eq!(decoded, quantize(&score));
    }
}

#[test]
fn fuzzed_bytes_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seed_file = write_smf(&random_score(&mut rng));
    for i in 0..10_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect()
        } else {
            // Mutations of a valid file reach deeper into the parser.
            let mut b = seed_file.clone();
            for _ in 0..rng.gen_range(1..6) {
                let k = rng.gen_range(0..b.len());
                b[k] = rng.gen();
            }
            b.truncate(rng.gen_range(0..=b.len()));
            b
        };
        if let Ok(score) = parse_smf(&bytes) {
            assert!(score.is_valid());
            let _ = encode(&score);
        }
    }
}

#[test]
fn toy_pieces_survive_the_full_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for score in refinpaint_core::corpus::generate_toy_corpus(20, &mut rng) {
        let parsed = parse_smf(&write_smf(&score)).unwrap();
        let seq = encode(&parsed);
        assert_eq!(note_multiset(&decode(&seq).unwrap()), oracle_quantize(&score));
    }
}

/// Random walk over the token grammar.
fn grammatical_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<Token> {
    let mut state = GrammarState::Start;
    let mut out = Vec::new();
    while out.len() < len {
        let t = match state {
            GrammarState::Start | GrammarState::InBar => {
                if rng.gen_bool(0.2) { Token::Bar } else { Token::Position(rng.gen_range(0..32)) }
            }
            GrammarState::AfterPitch => Token::Duration(rng.gen_range(1..=64)),
            _ => match rng.gen_range(0..10) {
                0 => Token::Bar,
                1 | 2 => Token::Position(rng.gen_range(0..32)),
                _ => Token::Pitch(rng.gen_range(21..=108)),
            },
        };
        let t = if state == GrammarState::Start { Token::Bar } else { t };
        state = state.step(t).unwrap();
        out.push(t);
    }
    if state == GrammarState::AfterPitch {
        out.push(Token::Duration(1));
    }
    out
}

proptest! {
    #[test]
    fn grammar_accepts_every_encoding(seed in any::<u64>()) {
        let score = random_score(&mut ChaCha8Rng::seed_from_u64(seed));
        let seq = encode(&score);
        prop_assert!(check_grammar(&seq.tokens).is_ok());
        prop_assert!(seq.tokens.iter().all(|t| !t.is_special()));
    }

    #[test]
    fn grammatical_sequences_decode_and_reencode(seed in any::<u64>(), len in 0usize..120) {
        let tokens = grammatical_tokens(&mut ChaCha8Rng::seed_from_u64(seed), len);
        prop_assert!(check_grammar(&tokens).is_ok());
        let once = encode(&decode(&TokenSeq::new(tokens)).unwrap());
        let twice = encode(&decode(&once).unwrap());
        prop_assert_eq!(twice.tokens, once.tokens);
    }

    #[test]
    fn transpose_is_invertible(seed in any::<u64>(), shift in -6i32..=6) {
        let seq = encode(&random_score(&mut ChaCha8Rng::seed_from_u64(seed)));
        let up = transpose(&seq, shift).unwrap();
        if !up.skipped {
            let back = transpose(&up.seq, -shift).unwrap();
            prop_assert!(!back.skipped);
            prop_assert_eq!(back.seq.tokens, seq.tokens);
        } else {
            prop_assert_eq!(up.seq.tokens, seq.tokens);
        }
    }

    #[test]
    fn dump_round_trips(seed in any::<u64>()) {
        let seq = encode(&random_score(&mut ChaCha8Rng::seed_from_u64(seed)));
        prop_assert_eq!(TokenSeq::parse_dump(&seq.dump()).unwrap().tokens, seq.tokens);
    }
}
