use kbmem::eval::{evaluate_dataset, EvalMode};
use kbmem::memorizer::{generate_greedy, ModelConfig, Parameters, TemplateTable, Vocab};
use kbmem::seed::rng_from_seed;
use kbmem::trainer::{
    compare_convergence, eval_items, memorization_examples, qa_examples, qa_finetune, sample_subset, vocab_for,
    Example, Mode, StopReason, TrainConfig, Trainer,
};
use kbmem::{Checkpoint, Dataset, Triplet};
use proptest::prelude::*;

fn triplets(n: usize) -> Vec<Triplet> {
    (0..n)
        .map(|i| Triplet::new(&format!("s{i}"), &format!("r{}", i % 3), &format!("o{}", (i * 7) % 11)).unwrap())
        .collect()
}

fn tiny_model(vocab: &Vocab, seed: u64) -> Parameters {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 16,
        vocab_size: vocab.len(),
    };
    Parameters::init(cfg, seed).unwrap()
}

fn setup(n: usize) -> (Vec<Triplet>, Vocab) {
    let t = triplets(n);
    let v = vocab_for(&t, None).unwrap();
    (t, v)
}

#[test]
fn first_epoch_touches_exactly_the_sampled_items() {
    let (t, vocab) = setup(10);
    let ex = memorization_examples(&t);
    let cfg = TrainConfig {
        batch_size: 2,
        seed: 4,
        ..Default::default()
    };
    // the sampler oracle: the same RNG stream the trainer starts from
    let state = kbmem::trainer::TrainState::new(10, 0, &cfg);
    let mut rng = state.rng.clone();
    let expected = sample_subset(&[1e6; 10], 3, &mut rng).unwrap();

    let mut tr = Trainer::new(tiny_model(&vocab, 1), &vocab, &ex, cfg).unwrap();
    tr.train_epoch().unwrap();
    let imp = &tr.state.importance;
    let touched: Vec<usize> = (0..10).filter(|&i| imp[i] != 1e6).collect();
    let mut want = expected.clone();
    want.sort_unstable();
    assert_eq!(touched, want);
    assert_eq!(imp.iter().filter(|&&w| w == 1e6).count(), 7);
    assert_eq!(tr.state.epoch, 1);
    assert_eq!(tr.state.step, 2);
}

#[test]
fn importance_equals_measured_losses() {
    let (t, vocab) = setup(6);
    let ex = memorization_examples(&t);
    let cfg = TrainConfig {
        alpha: 1.0,
        batch_size: 6,
        ..Default::default()
    };
    let params = tiny_model(&vocab, 2);
    let mut tr = Trainer::new(params.clone(), &vocab, &ex, cfg).unwrap();
    tr.train_epoch().unwrap();
    // one batch holding every item: importance is the pre-step loss
    let batch = kbmem::memorizer::Batch::new(
        ex.iter()
            .enumerate()
            .map(|(i, e)| kbmem::memorizer::Sample::new(&vocab, &e.prompt, &e.target, i))
            .collect(),
    );
    let losses = kbmem::memorizer::loss(&params, &batch).unwrap();
    for (i, l) in losses.per_sample.iter().enumerate() {
        assert_eq!(tr.state.importance[i], l.max(1e-4));
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let (t, vocab) = setup(12);
    let ex = memorization_examples(&t);
    let ev = eval_items(&ex);
    let cfg = TrainConfig {
        batch_size: 4,
        eval_every: 2,
        max_epochs: 4,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut tr = Trainer::new(tiny_model(&vocab, 3), &vocab, &ex, cfg.clone()).unwrap();
        tr.train_epoch().unwrap();
        tr.train_epoch().unwrap();
        let imp = tr.state.importance.clone();
        let out = tr.run(Mode::Importance, &ev, 0.0).unwrap();
        let ckpt = Checkpoint::new(tr.params.clone(), vocab.clone())
            .with_state(tr.state.clone(), cfg.clone())
            .to_bytes()
            .unwrap();
        (imp, out.curve, ckpt)
    };
    let (a_imp, a_curve, a_ckpt) = run();
    let (b_imp, b_curve, b_ckpt) = run();
    assert_eq!(a_imp, b_imp);
    assert_eq!(a_ckpt, b_ckpt);
    assert_eq!(a_curve.points.len(), b_curve.points.len());
    for (a, b) in a_curve.points.iter().zip(&b_curve.points) {
        assert_eq!((a.step, a.epoch, a.em, a.f1), (b.step, b.epoch, b.em, b.f1));
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
    }
}

#[test]
fn uniform_epoch_visits_each_item_once_and_keeps_importance() {
    let (t, vocab) = setup(9);
    let ex = memorization_examples(&t);
    let cfg = TrainConfig {
        batch_size: 4,
        ..Default::default()
    };
    let mut tr = Trainer::new(tiny_model(&vocab, 1), &vocab, &ex, cfg).unwrap();
    tr.train_uniform_epoch().unwrap();
    assert_eq!(tr.state.step, 3);
    assert!(tr.state.importance.iter().all(|&w| w == 1e6));
}

#[test]
fn single_item_modes_update_identically() {
    let (t, vocab) = setup(1);
    let ex = memorization_examples(&t);
    let cfg = TrainConfig {
        alpha: 1.0,
        ..Default::default()
    };
    let mut a = Trainer::new(tiny_model(&vocab, 5), &vocab, &ex, cfg.clone()).unwrap();
    let mut b = Trainer::new(tiny_model(&vocab, 5), &vocab, &ex, cfg).unwrap();
    for _ in 0..3 {
        a.train_epoch().unwrap();
        b.train_uniform_epoch().unwrap();
        assert_eq!(a.params.data(), b.params.data());
        assert_eq!(a.state.adam, b.state.adam);
    }
}

#[test]
fn memorizes_a_single_triplet() {
    let t = vec![Triplet::new("Palaeontological Museum, Munich", "architect", "Leonhard Romeis").unwrap()];
    let vocab = vocab_for(&t, None).unwrap();
    let ex = memorization_examples(&t);
    let cfg = TrainConfig {
        alpha: 1.0,
        eval_every: 1,
        max_epochs: 300,
        ..Default::default()
    };
    let mut tr = Trainer::new(tiny_model(&vocab, 8), &vocab, &ex, cfg).unwrap();
    let out = tr.run(Mode::Importance, &eval_items(&ex), 0.0).unwrap();
    assert_eq!(out.stop, StopReason::EmThreshold);
    assert_eq!(out.curve.last().unwrap().em, 1.0);
    assert!(tr.state.epoch < 300);
    let answer = generate_greedy(&tr.params, &vocab, &ex[0].prompt, 4).unwrap();
    assert_eq!(answer, "Leonhard Romeis");
    let report = evaluate_dataset(&tr.params, &vocab, &Dataset::new("one", t), EvalMode::Triplet, None, &[]).unwrap();
    assert_eq!((report.em, report.f1), (1.0, 1.0));
}

#[test]
fn flat_f1_triggers_patience() {
    let (t, vocab) = setup(8);
    let ex = memorization_examples(&t);
    // a vanishing learning rate leaves predictions, and so F1, unchanged
    let cfg = TrainConfig {
        learning_rate: 1e-300,
        batch_size: 8,
        alpha: 1.0,
        eval_every: 1,
        patience_epochs: 3,
        max_epochs: 50,
        ..Default::default()
    };
    let mut tr = Trainer::new(tiny_model(&vocab, 1), &vocab, &ex, cfg).unwrap();
    let out = tr.run(Mode::Uniform, &eval_items(&ex), 0.0).unwrap();
    assert_eq!(out.stop, StopReason::Patience);
    assert_eq!(tr.state.epoch, 4);
    assert_eq!(out.best.unwrap().1.step, 1);
}

#[test]
fn resumed_run_continues_steps() {
    let (t, vocab) = setup(10);
    let ex = memorization_examples(&t);
    let ev = eval_items(&ex);
    let cfg = TrainConfig {
        batch_size: 2,
        eval_every: 1,
        max_epochs: 2,
        em_stop_threshold: 1.0,
        ..Default::default()
    };
    let mut tr = Trainer::new(tiny_model(&vocab, 1), &vocab, &ex, cfg.clone()).unwrap();
    let first = tr.run(Mode::Importance, &ev, 0.0).unwrap();
    let bytes = Checkpoint::new(tr.params.clone(), vocab.clone())
        .with_state(tr.state.clone(), cfg.clone())
        .to_bytes()
        .unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let more = TrainConfig { max_epochs: 4, ..cfg };
    let mut again = Trainer::resume(ck.params, ck.state.unwrap(), &ck.vocab, &ex, more).unwrap();
    let second = again.run(Mode::Importance, &ev, first.curve.last().unwrap().seconds).unwrap();
    let mut curve = first.curve.clone();
    for p in second.curve.points {
        curve.push(p).unwrap();
    }
    assert!(curve.points.windows(2).all(|w| w[0].step < w[1].step));
    assert_eq!(again.state.epoch, 4);
}

#[test]
fn compare_from_shared_init_is_deterministic() {
    let (t, vocab) = setup(12);
    let ex = memorization_examples(&t);
    let ev = eval_items(&ex);
    let cfg = TrainConfig {
        batch_size: 4,
        eval_every: 2,
        max_epochs: 3,
        ..Default::default()
    };
    let init = tiny_model(&vocab, 1);
    let a = compare_convergence(&init, &vocab, &ex, &ev, &cfg, &[0.5, 0.9]).unwrap();
    let b = compare_convergence(&init, &vocab, &ex, &ev, &cfg, &[0.5, 0.9]).unwrap();
    assert_eq!(a.summary, b.summary);
    assert!(a.summary[0].steps_to.contains_key("0.90"));
    assert!(a.summary[1].steps_to.contains_key("0.50"));
    let strip = |c: &kbmem::trainer::Curve| c.points.iter().map(|p| (p.step, p.em.to_bits())).collect::<Vec<_>>();
    assert_eq!(strip(&a.importance.curve), strip(&b.importance.curve));
    assert_eq!(strip(&a.uniform.curve), strip(&b.uniform.curve));
}

#[test]
fn qa_pairs_and_errors() {
    let t = vec![Triplet::new("x", "father", "y").unwrap(), Triplet::new("y", "capital of", "z").unwrap()];
    let table = TemplateTable::builtin();
    let qa = qa_examples(&t, &table).unwrap();
    assert_eq!(qa[0].prompt, "the father of x is");
    assert_eq!(qa[1].prompt, "y is capital of");
    for (e, tr) in qa.iter().zip(&t) {
        assert_eq!(e.target, tr.object());
    }
    let bad = vec![Triplet::new("x", "architect", "y").unwrap()];
    assert!(qa_examples(&bad, &table).is_err());

    let vocab = vocab_for(&t, Some(&table)).unwrap();
    assert!(vocab.id("father").is_some() && vocab.id("is").is_some());
    let empty: Vec<Example> = Vec::new();
    assert!(qa_finetune(tiny_model(&vocab, 1), &vocab, &empty, &eval_items(&qa), TrainConfig::for_qa()).is_err());
}

#[test]
fn trainer_rejects_mismatched_inputs() {
    let (t, vocab) = setup(3);
    let ex = memorization_examples(&t);
    assert!(Trainer::new(tiny_model(&vocab, 1), &vocab, &[], TrainConfig::default()).is_err());
    let other = Vocab::build(["q w e r t y u i o p"]).unwrap();
    assert!(Trainer::new(tiny_model(&other, 1), &vocab, &ex, TrainConfig::default()).is_err());
    let long = vec![Example {
        prompt: "s0 ".repeat(20),
        target: "o1".into(),
    }];
    assert!(Trainer::new(tiny_model(&vocab, 1), &vocab, &long, TrainConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampler_returns_distinct_indices(
        weights in proptest::collection::vec(1e-6f64..1e6, 1..40),
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let k = ((weights.len() as f64) * frac) as usize;
        let mut rng = rng_from_seed(seed);
        let s = sample_subset(&weights, k, &mut rng).unwrap();
        prop_assert_eq!(s.len(), k);
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        prop_assert_eq!(d.len(), k);
        prop_assert!(s.iter().all(|&i| i < weights.len()));
        let mut again = rng_from_seed(seed);
        prop_assert_eq!(sample_subset(&weights, k, &mut again).unwrap(), s);
    }
}
