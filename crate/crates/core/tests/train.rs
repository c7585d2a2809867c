use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refinpaint_core::corpus::{generate_toy_corpus, MaskRole, MaskVec};
use refinpaint_core::models::{Evaluator, Feedback, Inpainter, ModelConfig, Network};
use refinpaint_core::remi::{encode, TokenSeq, VOCAB_SIZE};
use refinpaint_core::tensor::{Graph, Tensor};
use refinpaint_core::train::*;

fn corpus(n: usize) -> Vec<TokenSeq> {
    generate_toy_corpus(n, &mut ChaCha8Rng::seed_from_u64(11))
        .iter()
        .map(encode)
        .collect()
}

fn tiny(enc: usize, dec: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: enc,
        n_dec_layers: dec,
        max_len: 64,
        dropout_p: 0.1,
        vocab_size: VOCAB_SIZE,
    }
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps,
        warmup: (steps / 10).max(1),
        peak_lr: 3e-3,
        window_len: 48,
        val_instances: 8,
        ..TrainConfig::default()
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

#[test]
fn fixed_seed_reproduces_all_three_trainings() {
    let data = corpus(30);
    let run = || {
        let mut inp = Inpainter::build(tiny(1, 1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = train_inpainter(&mut inp, &data, &data, &short(3)).unwrap();
        let mut fb = Feedback::build(tiny(1, 0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = train_feedback(&mut fb, &inp, &data, &data, &short(3)).unwrap();
        let mut ev = Evaluator::build(tiny(0, 1), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = train_evaluator(&mut ev, &data, &data, &short(3)).unwrap();
        (a, b, c, inp.save(), fb.save(), ev.save())
    };
    let first = run();
    let second = run();
    assert_eq!(first.0.losses, second.0.losses);
    assert_eq!(first.1.losses, second.1.losses);
    assert_eq!(first.2.losses, second.2.losses);
    assert_eq!((first.3, first.4, first.5), (second.3, second.4, second.5));
    assert_eq!(first.0.losses.len(), 3);
    assert_eq!(first.0.lrs.len(), 3);
}

#[test]
fn inpainting_loss_averages_exactly_the_subset() {
    let data = corpus(1);
    let window = TokenSeq::new(data[0].tokens[..40].to_vec());
    let m_u = MaskVec::from_range(40, 10, 20, MaskRole::Fragment);
    let m_s = MaskVec::from_positions(40, &[12, 13], MaskRole::Regenerate);
    let ex = MaskedExample { window, m_u, m_s };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cfg = tiny(1, 1);
    cfg.dropout_p = 0.0;
    let inp = Inpainter::build(cfg, &mut rng).unwrap();
    let mut g = Graph::inference();
    let loss = inpainter_loss(&mut g, &inp, &ex, &mut rng).unwrap();

    let target = ex.window.ids();
    let mut g2 = Graph::inference();
    let logits = inp
        .forward(&mut g2, &ex.masked_input().ids(), ex.m_s.bits(), &Inpainter::decoder_input(&target), &mut rng)
        .unwrap();
    let logits = g2.value(logits);
    let manual = -(log_softmax_at(logits.row(12), target[12] as usize) + log_softmax_at(logits.row(13), target[13] as usize)) / 2.0;
    assert!((g.value(loss).item() - manual).abs() < 1e-12);
}

#[test]
fn logits_outside_the_loss_scope_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, v) = (12, 9);
    let logits = Tensor::new(vec![n, v], (0..n * v).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let targets: Vec<u32> = (0..n).map(|_| rng.gen_range(0..v as u32)).collect();
    let select: Vec<bool> = (0..n).map(|i| (3..8).contains(&i)).collect();
    let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let mut zeroed = logits.clone();
    for (i, &s) in select.iter().enumerate() {
        if !s {
            zeroed.data_mut()[i * v..(i + 1) * v].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let ce = |t: &Tensor| {
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let loss = g.cross_entropy(x, &targets, &select).unwrap();
        let value = g.value(loss).item();
        (value, g.backward(loss).unwrap().get(x).unwrap().clone())
    };
    assert_eq!(ce(&logits), ce(&zeroed));
    let column = |t: &Tensor| Tensor::new(vec![n, 1], (0..n).map(|i| t.row(i)[0]).collect()).unwrap();
    let bce = |t: &Tensor| {
        let mut g = Graph::new();
        let x = g.leaf(column(t));
        let loss = g.bce_with_logits(x, &labels, &select).unwrap();
        let value = g.value(loss).item();
        (value, g.backward(loss).unwrap().get(x).unwrap().clone())
    };
    assert_eq!(bce(&logits), bce(&zeroed));
}

#[test]
fn sampled_masks_stay_inside_the_window_content() {
    let data = corpus(10);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let ex = draw_example(&data, 64, true, &mut rng).unwrap();
        assert!(ex.m_s.is_subset_of(&ex.m_u));
        assert!(ex.m_s.count() > 0);
        let content = content_len(&ex.window);
        assert!(ex.m_u.positions().iter().all(|&p| p < content));
        assert!((ex.masked_input().ids().iter().filter(|&&id| id == 1).count()) == ex.m_s.count());
    }
}

#[test]
fn feedback_training_leaves_the_inpainter_untouched() {
    let data = corpus(20);
    let inp = Inpainter::build(tiny(1, 1), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let before = inp.save();
    let mut fb = Feedback::build(tiny(1, 0), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    train_feedback(&mut fb, &inp, &data, &data, &short(4)).unwrap();
    assert_eq!(inp.save(), before);
}

#[test]
fn empty_corpus_and_diverging_runs_fail() {
    let mut inp = Inpainter::build(tiny(1, 1), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert!(matches!(train_inpainter(&mut inp, &[], &[], &short(3)), Err(TrainError::EmptyCorpus)));
    let mut ev = Evaluator::build(tiny(0, 1), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert!(matches!(train_evaluator(&mut ev, &[], &[], &short(3)), Err(TrainError::EmptyCorpus)));
    let data = corpus(5);
    let wild = TrainConfig {
        peak_lr: 1e300,
        ..short(5)
    };
    match train_evaluator(&mut ev, &data, &data, &wild) {
        Err(TrainError::NonFiniteLoss { step }) => assert!(step >= 1),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
    let bad = TrainConfig { warmup: 5, ..short(5) };
    assert!(matches!(train_evaluator(&mut ev, &data, &data, &bad), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn artifacts_are_written_to_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(10);
    let mut ev = Evaluator::build(tiny(0, 1), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let cfg = TrainConfig {
        out_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: Some(2),
        ..short(5)
    };
    let report = train_evaluator(&mut ev, &data, &data, &cfg).unwrap();
    let path = report.checkpoint_path.unwrap();
    let loaded: Evaluator = read_checkpoint(&path).unwrap();
    assert_eq!(loaded.save(), ev.save());
    assert!(dir.path().join("evaluator-step2.ckpt").exists());
    assert!(dir.path().join("evaluator-step4.ckpt").exists());
    let metrics = std::fs::read_to_string(dir.path().join("evaluator-metrics.jsonl")).unwrap();
    let lines: Vec<StepMetrics> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines.iter().map(|m| m.loss).collect::<Vec<_>>(), report.losses);
}

#[test]
fn smoothed_losses_fall_for_all_three_models() {
    let data = corpus(60);
    let cfg = TrainConfig {
        val_instances: 4,
        ..short(300)
    };
    let falls = |losses: &[f64]| {
        let smooth = moving_average(losses, 100);
        smooth[losses.len() - 1] < smooth[99]
    };
    let mut inp = Inpainter::build(tiny(1, 1), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let r = train_inpainter(&mut inp, &data, &data, &cfg).unwrap();
    assert!(falls(&r.losses), "inpainter");
    let mut fb = Feedback::build(tiny(1, 0), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let r = train_feedback(&mut fb, &inp, &data, &data, &cfg).unwrap();
    assert!(falls(&r.losses), "feedback");
    let mut ev = Evaluator::build(tiny(0, 1), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let r = train_evaluator(&mut ev, &data, &data, &cfg).unwrap();
    assert!(falls(&r.losses), "evaluator");
}
