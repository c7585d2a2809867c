use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refinpaint_core::corpus::{generate_toy_corpus, MaskRole, MaskVec};
use refinpaint_core::engine::*;
use refinpaint_core::models::{Feedback, Inpainter, ModelConfig, Network};
use refinpaint_core::remi::{encode, Token, TokenSeq, MASK_ID, VOCAB_SIZE};

fn models(seed: u64) -> (Inpainter, Feedback) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = |enc, dec| ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: enc,
        n_dec_layers: dec,
        max_len: 128,
        dropout_p: 0.0,
        vocab_size: VOCAB_SIZE,
    };
    let inp = Inpainter::build(config(1, 1), &mut rng).unwrap();
    let mut fb = Feedback::build(config(1, 0), &mut rng).unwrap();
    // An untrained critic is flat at 0.5; give it opinions.
    let head = fb.params().find("head.weight").unwrap();
    for v in fb.params_mut().get_mut(head).data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    (inp, fb)
}

fn piece(len: usize) -> TokenSeq {
    let score = generate_toy_corpus(1, &mut ChaCha8Rng::seed_from_u64(5)).remove(0);
    TokenSeq::new(encode(&score).tokens[..len].to_vec())
}

fn config(seed: u64) -> EngineConfig {
    EngineConfig {
        seed,
        ..EngineConfig::default()
    }
}

#[test]
fn schedule_table_and_monotonicity() {
    // cos(kπ/20)·100 for k = 1..10, from a table of exact cosines:
    // 98.769, 95.106, 89.101, 80.902, 70.711, 58.779, 45.399, 30.902, 15.643, 0.
    let table: Vec<usize> = (0..10).map(|i| schedule_masked_count(i, 10, 100).unwrap()).collect();
    assert_eq!(table, [99, 96, 90, 81, 71, 59, 46, 31, 16, 0]);
    for t in 1..15 {
        for n in [0, 1, 7, 33, 100] {
            let counts: Vec<usize> = (0..t).map(|i| schedule_masked_count(i, t, n).unwrap()).collect();
            assert!(counts.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(counts[t - 1], 0);
            assert!(counts.iter().all(|&c| c <= n));
        }
    }
    assert!(schedule_masked_count(0, 0, 5).is_err());
}

#[test]
fn refinement_preserves_context_and_nests_masks() {
    let (inp, fb) = models(1);
    let x = piece(60);
    let m_u = MaskVec::from_range(60, 20, 40, MaskRole::Fragment);
    let out = refinpaint(&x, &m_u, &inp, &fb, &config(3), None).unwrap();
    assert_eq!(out.records.len(), 10);
    assert_eq!(out.records[0].regenerated.count(), 20);
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.index, i);
        for p in 0..60 {
            if !m_u.get(p) {
                assert_eq!(r.tokens.tokens[p], x.tokens[p]);
                assert!(r.heatmap.get(p).is_none());
            } else {
                let prob = r.heatmap.get(p).unwrap();
                assert!((0.0..=1.0).contains(&prob));
            }
        }
        assert!(r.regenerated.is_subset_of(&m_u));
        assert!(r.tokens.tokens.iter().all(|t| *t != Token::Mask));
        let mean = m_u.positions().iter().map(|&p| r.heatmap.get(p).unwrap()).sum::<f64>() / 20.0;
        assert!((r.gfs - mean).abs() < 1e-9);
        assert_eq!(r.regen_count, schedule_masked_count(i, 10, 20).unwrap());
        if i > 0 {
            assert_eq!(r.regenerated.count(), out.records[i - 1].regen_count);
        }
    }
    let max = out.records.iter().map(|r| r.gfs).fold(f64::MIN, f64::max);
    assert_eq!(out.selected_record().gfs, max);
    assert!(out.selected_record().gfs >= out.records[0].gfs);
}

#[test]
fn fixed_seed_is_deterministic() {
    let (inp, fb) = models(2);
    let x = piece(50);
    let m_u = MaskVec::from_range(50, 10, 30, MaskRole::Fragment);
    let a = refinpaint(&x, &m_u, &inp, &fb, &config(9), None).unwrap();
    let b = refinpaint(&x, &m_u, &inp, &fb, &config(9), None).unwrap();
    assert_eq!(a, b);
    let ta = Trace::new(&config(9), &m_u, &a).to_json();
    assert_eq!(ta, Trace::new(&config(9), &m_u, &b).to_json());
    let c = refinpaint(&x, &m_u, &inp, &fb, &config(10), None).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn one_iteration_is_single_pass_inpainting() {
    let (inp, fb) = models(3);
    let x = piece(40);
    let m_u = MaskVec::from_range(40, 5, 25, MaskRole::Fragment);
    let cfg = EngineConfig {
        iterations: 1,
        ..config(4)
    };
    let out = refinpaint(&x, &m_u, &inp, &fb, &cfg, None).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.selected, 0);
    assert_eq!(out.records[0].regen_count, 0);
    // The same draw as one direct fill with the engine's rng.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let direct = sample_fill(&mask_tokens(&x, &m_u), &m_u, &inp, 1.0, 1.0, &mut rng).unwrap();
    assert_eq!(out.records[0].tokens.tokens, direct.tokens);
}

#[test]
fn argmax_fill_is_deterministic_and_identity_without_mask() {
    let (inp, _) = models(4);
    let x = piece(40);
    let none = MaskVec::empty(40, MaskRole::Regenerate);
    let same = sample_fill(&x, &none, &inp, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(same.tokens, x.tokens);

    let m = MaskVec::from_range(40, 10, 30, MaskRole::Regenerate);
    let masked = mask_tokens(&x, &m);
    let a = sample_fill(&masked, &m, &inp, ARGMAX_TEMPERATURE, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sample_fill(&masked, &m, &inp, ARGMAX_TEMPERATURE, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.iter().all(|t| !t.is_special()));
}

#[test]
fn fill_rejects_inconsistent_masks() {
    let (inp, _) = models(5);
    let x = piece(30);
    let m = MaskVec::from_range(30, 3, 6, MaskRole::Regenerate);
    // Mask token missing at a regenerate position.
    assert!(matches!(
        sample_fill(&x, &m, &inp, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(EngineError::MaskMismatch(3))
    ));
    let mut ids = mask_tokens(&x, &m).ids();
    ids[10] = MASK_ID;
    let stray = TokenSeq::from_ids(&ids).unwrap();
    assert!(matches!(
        sample_fill(&stray, &m, &inp, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(EngineError::MaskMismatch(10))
    ));
    let short = MaskVec::from_range(29, 3, 6, MaskRole::Regenerate);
    assert!(matches!(
        sample_fill(&mask_tokens(&x, &m), &short, &inp, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(EngineError::LengthMismatch { .. })
    ));
}

#[test]
fn callback_edits_steer_the_next_iteration() {
    let (inp, fb) = models(6);
    let x = piece(50);
    let m_u = MaskVec::from_range(50, 10, 30, MaskRole::Fragment);
    let mut seen = Vec::new();
    let mut cb = |r: &IterationRecord| -> Result<Vec<Edit>, ()> {
        seen.push(r.index);
        Ok(match r.index {
            0 => vec![Edit::ForceKeep { pos: 12 }, Edit::ReplaceToken { pos: 15, token: Token::Bar }],
            1 => vec![Edit::SetKeepCount { k: 20 }],
            _ => vec![Edit::ForceRegenerate { pos: 11 }],
        })
    };
    let out = refinpaint(&x, &m_u, &inp, &fb, &config(1), Some(&mut cb)).unwrap();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    let kept_token = out.records[0].tokens.tokens[12];
    assert!(!out.records[1].regenerated.get(12));
    assert!(!out.records[1].regenerated.get(15));
    assert_eq!(out.records[1].tokens.tokens[12], kept_token);
    assert_eq!(out.records[1].tokens.tokens[15], Token::Bar);
    assert_eq!(out.records[0].human_edits.len(), 2);
    assert_eq!(out.records[2].regenerated.count(), 0);
    assert_eq!(out.records[2].tokens, out.records[1].tokens);
    assert!(out.records[3].regenerated.get(11));
}

#[test]
fn callback_can_abort_and_bad_edits_fail() {
    let (inp, fb) = models(7);
    let x = piece(40);
    let m_u = MaskVec::from_range(40, 10, 20, MaskRole::Fragment);
    let mut abort = |r: &IterationRecord| if r.index == 2 { Err(()) } else { Ok(vec![]) };
    assert_eq!(
        refinpaint(&x, &m_u, &inp, &fb, &config(1), Some(&mut abort)),
        Err(EngineError::CallbackAbort)
    );
    let mut outside = |_: &IterationRecord| Ok(vec![Edit::ForceKeep { pos: 3 }]);
    assert_eq!(
        refinpaint(&x, &m_u, &inp, &fb, &config(1), Some(&mut outside)),
        Err(EngineError::PositionOutsideFragment(3))
    );
    let empty = MaskVec::empty(40, MaskRole::Fragment);
    assert_eq!(refinpaint(&x, &empty, &inp, &fb, &config(1), None), Err(EngineError::EmptyFragment));
    let zero = EngineConfig {
        iterations: 0,
        ..config(1)
    };
    assert!(matches!(refinpaint(&x, &m_u, &inp, &fb, &zero, None), Err(EngineError::Domain { .. })));
}

#[test]
fn trace_json_round_trips() {
    let (inp, fb) = models(8);
    let x = piece(40);
    let m_u = MaskVec::from_range(40, 10, 20, MaskRole::Fragment);
    let out = refinpaint(&x, &m_u, &inp, &fb, &config(2), None).unwrap();
    let trace = Trace::new(&config(2), &m_u, &out);
    let back: Trace = serde_json::from_str(&trace.to_json()).unwrap();
    assert_eq!(back, trace);
    assert_eq!(back.selected_index, out.selected);
    assert_eq!(back.fragment, (10..20).collect::<Vec<_>>());
    assert_eq!(back.iterations.len(), 10);
}
