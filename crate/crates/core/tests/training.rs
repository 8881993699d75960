use levt_core::data::{make_synthetic_corpus, Pair, SynthTask, TextCorpus};
use levt_core::edit::{apply_deletion, lev_distance, random_deletion};
use levt_core::model::{ArTeacher, LevT, ModelConfig, SharingMode};
use levt_core::train::*;
use levt_core::vocab::{TokenSeq, Vocab, PLH, UNK};
use levt_core::Error;
use levt_tensor::check::{finite_differences, max_relative_error};
use levt_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        d_hidden: 2 * d,
        n_heads: 2,
        n_layers: layers,
        k_max: 4,
        n_max: 24,
        ..ModelConfig::default()
    }
}

fn corpus(task: SynthTask, n: usize, seed: u64) -> (Vocab, Vec<Pair>) {
    let pairs = make_synthetic_corpus(task, 8, 2..=6, n, seed).unwrap();
    let c = TextCorpus::from_pairs(&pairs);
    let vocab = Vocab::build(c.all_lines(), 1).unwrap();
    let enc = c.encode(&vocab).unwrap();
    (vocab, enc)
}

/// Roll-in states fixed by a seed: insertion inputs are subsequences of
/// the targets, deletion inputs arbitrary sequences.
fn fixed_states(
    pairs: &[Pair],
    vocab: &Vocab,
    seed: u64,
) -> (Vec<TokenSeq>, Vec<TokenSeq>, Vec<TokenSeq>, Vec<TokenSeq>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = vocab.content_ids();
    let sources = pairs.iter().map(|p| p.source.clone()).collect();
    let targets: Vec<TokenSeq> = pairs.iter().map(|p| p.target.clone()).collect();
    let y_ins = targets
        .iter()
        .map(|t| apply_deletion(t, &random_deletion(t, &mut rng)).unwrap())
        .collect();
    let y_del = targets
        .iter()
        .map(|t| {
            let n = rng.random_range(1..t.len());
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(content.clone())).collect();
            TokenSeq::from_interior(&ids).unwrap()
        })
        .collect();
    (sources, y_ins, y_del, targets)
}

#[test]
fn uniform_model_losses_are_log_class_counts() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 16, 1);
    let mut m = LevT::new(&tiny(8, 1), vocab.clone(), 0).unwrap();
    for id in [m.net.del_head, m.net.plh_head, m.net.embed] {
        let shape = m.params.get(id).shape().to_vec();
        *m.params.get_mut(id) = Tensor::zeros(&shape).with_requires_grad(true);
    }
    let (src, y_ins, y_del, tgt) = fixed_states(&pairs, &vocab, 2);
    let mut g = Graph::with_params(&m.params);
    let l = training_losses(&m.net, &mut g, Some(&src), &y_ins, &y_del, &tgt).unwrap();
    let value = |v| g.value(v).item() as f64;
    let checks = [
        (value(l.del), 2f64.ln()),
        (value(l.plh), 5f64.ln()),
        (value(l.tok), (vocab.len() as f64).ln()),
    ];
    for (got, want) in checks {
        assert!((got - want).abs() / want < 0.01, "{got} vs {want}");
    }
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let (vocab, pairs) = corpus(SynthTask::Reverse, 3, 4);
    for seed in 0..2 {
        let m = LevT::new(&tiny(8, 1), vocab.clone(), seed).unwrap();
        let (src, y_ins, y_del, tgt) = fixed_states(&pairs, &vocab, seed);
        let mut g = Graph::with_params(&m.params);
        let l = training_losses(&m.net, &mut g, Some(&src), &y_ins, &y_del, &tgt).unwrap();
        let grads = g.backward(l.total).unwrap();
        let wide: ParamStore<f64> = m.params.cast();
        let numeric = finite_differences(&wide, 1e-5, |s| {
            let mut g = Graph::with_params(s);
            let l = training_losses(&m.net, &mut g, Some(&src), &y_ins, &y_del, &tgt).unwrap();
            g.value(l.total).item()
        });
        let err = max_relative_error(&wide, &grads, &numeric, 1e-3);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn insertion_roll_in_follows_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y0 = TokenSeq::from_interior(&[5, 6, 7]).unwrap();
    let target = TokenSeq::from_interior(&[6, 8, 7, 9]).unwrap();
    let n = 10_000;
    for beta in [0.0, 0.3, 1.0] {
        let mut hits = 0;
        for _ in 0..n {
            let (y, from_init) = rollin_insertion(&y0, &target, beta, &mut rng).unwrap();
            if from_init {
                hits += 1;
                assert_eq!(y, TokenSeq::from_interior(&[6, 7]).unwrap());
            }
            // Either way the state is a subsequence of the target.
            assert_eq!(lev_distance(&y, &target), target.len() - y.len());
        }
        let sd = (beta * (1.0 - beta) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - beta).abs() <= 3.0 * sd + 1e-12);
    }
}

#[test]
fn deletion_roll_in_follows_alpha_and_dae_forces_the_initial_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = 10;
    let y0 = TokenSeq::from_interior(&[5, 6]).unwrap();
    let y_tok = TokenSeq::new(vec![2, PLH, 7, PLH, 3]).unwrap();
    let logits = vec![0.0f32; 2 * v];
    let n = 10_000;
    let count = |cfg: &RollInConfig, rng: &mut ChaCha8Rng| {
        (0..n)
            .filter(|_| rollin_deletion(&y0, &y_tok, &logits, v, cfg, rng).unwrap() == y0)
            .count() as f64
            / n as f64
    };
    let mixture = RollInConfig::default();
    let sd = (0.25 / n as f64).sqrt();
    assert!((count(&mixture, &mut rng) - 0.5).abs() <= 3.0 * sd);
    let dae = RollInConfig {
        dae_mode: true,
        alpha: 0.0,
        ..RollInConfig::default()
    };
    assert_eq!(count(&dae, &mut rng), 1.0);
    // Sampled fills never contain structural ids.
    let learned = RollInConfig {
        alpha: 0.0,
        ..RollInConfig::default()
    };
    for _ in 0..100 {
        let y = rollin_deletion(&y0, &y_tok, &logits, v, &learned, &mut rng).unwrap();
        assert_eq!(y.len(), 5);
        assert!(y.interior().iter().all(|&t| t == UNK || t >= 5));
    }
}

fn train_cfg(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        seed,
        log_every: 1,
        eval_every: 0,
        eval_size: 8,
        ..TrainConfig::default()
    }
}

fn train(model: LevT, pairs: &[Pair], cfg: &TrainConfig) -> (LevT, Vec<StepLog>) {
    let mut logs = Vec::new();
    let mut t = Trainer::new(model, cfg).unwrap();
    t.run(pairs, None, &mut |e| {
        if let TrainEvent::Log(l) = e {
            logs.push(l.clone());
        }
    })
    .unwrap();
    (t.into_model(), logs)
}

fn same_params(a: &LevT, b: &LevT) -> bool {
    a.params
        .iter()
        .zip(b.params.iter())
        .all(|((_, _, x), (_, _, y))| x.data() == y.data())
}

#[test]
fn training_is_deterministic_per_seed() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 64, 7);
    let m = LevT::new(&tiny(8, 1), vocab, 3).unwrap();
    let (a, la) = train(m.clone(), &pairs, &train_cfg(6, 1));
    let (b, lb) = train(m.clone(), &pairs, &train_cfg(6, 1));
    let (c, _) = train(m, &pairs, &train_cfg(6, 2));
    assert!(same_params(&a, &b));
    assert_eq!(la, lb);
    assert!(!same_params(&a, &c));
}

#[test]
fn dae_mode_matches_alpha_one() {
    let (vocab, pairs) = corpus(SynthTask::Reverse, 64, 8);
    let m = LevT::new(&tiny(8, 1), vocab, 4).unwrap();
    let mut dae = train_cfg(5, 3);
    dae.rollin.dae_mode = true;
    let mut one = train_cfg(5, 3);
    one.rollin.alpha = 1.0;
    let (a, la) = train(m.clone(), &pairs, &dae);
    let (b, lb) = train(m, &pairs, &one);
    assert!(same_params(&a, &b));
    assert_eq!(la, lb);
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 16, 9);
    let m = LevT::new(&tiny(8, 1), vocab, 5).unwrap();
    let (after, logs) = train(m.clone(), &pairs, &train_cfg(0, 0));
    assert!(same_params(&m, &after));
    assert!(logs.is_empty());
}

#[test]
fn losses_fall_on_a_small_copy_task() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 256, 10);
    let m = LevT::new(&tiny(16, 1), vocab, 6).unwrap();
    let mut cfg = train_cfg(300, 4);
    cfg.batch_size = 16;
    cfg.log_every = 50;
    cfg.optim.warmup_steps = 50;
    let (_, logs) = train(m, &pairs, &cfg);
    let first = &logs[0];
    let last = logs.last().unwrap();
    assert!(last.loss < 0.7 * first.loss, "{} -> {}", first.loss, last.loss);
    assert!(last.loss.is_finite());
    assert_eq!(last.step, 300);
}

#[test]
fn each_head_trains_only_its_backbone_when_nothing_is_shared() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 4, 11);
    let cfg = ModelConfig {
        sharing: SharingMode::None,
        ..tiny(8, 1)
    };
    let m = LevT::new(&cfg, vocab.clone(), 7).unwrap();
    let (src, y_ins, y_del, tgt) = fixed_states(&pairs, &vocab, 3);
    let mut g = Graph::with_params(&m.params);
    let l = training_losses(&m.net, &mut g, Some(&src), &y_ins, &y_del, &tgt).unwrap();
    let touched = |loss| {
        let grads = g.backward(loss).unwrap();
        m.params
            .iter()
            .filter(|(_, n, _)| n.starts_with("decoder"))
            .filter(|(id, _, _)| {
                grads
                    .param(*id)
                    .is_some_and(|t| t.data().iter().any(|&x| x != 0.0))
            })
            .map(|(_, n, _)| n.split('.').next().unwrap().to_owned())
            .collect::<std::collections::BTreeSet<_>>()
    };
    assert_eq!(touched(l.del), ["decoder0".to_owned()].into());
    assert_eq!(touched(l.plh), ["decoder1".to_owned()].into());
    assert_eq!(touched(l.tok), ["decoder2".to_owned()].into());
}

#[test]
fn non_finite_parameters_stop_training() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 16, 12);
    let mut m = LevT::new(&tiny(8, 1), vocab, 8).unwrap();
    m.params.get_mut(m.net.del_head).data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(m, &train_cfg(3, 0)).unwrap();
    let err = t.run(&pairs, None, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 1, .. }));
    // The state at divergence stays available for inspection.
    assert!(t.model().params.get(t.model().net.del_head).data()[0].is_nan());
}

#[test]
fn validation_keeps_the_best_model() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 64, 13);
    let m = LevT::new(&tiny(8, 1), vocab, 9).unwrap();
    let mut cfg = train_cfg(4, 0);
    cfg.eval_every = 2;
    let mut t = Trainer::new(m, &cfg).unwrap();
    let mut evals = 0;
    t.run(&pairs[..48], Some(&pairs[48..]), &mut |e| {
        if let TrainEvent::Eval(..) = e {
            evals += 1;
        }
    })
    .unwrap();
    assert_eq!(evals, 2);
    assert_eq!(t.history().len(), 2);
    let (best, model) = t.best().unwrap();
    assert!(t.history().iter().all(|p| p.values["exact_match"] <= best));
    if t.history().last().unwrap().values["exact_match"] == best {
        let embed = model.net.embed;
        assert_eq!(model.params.get(embed).data(), t.model().params.get(embed).data());
    }
}

#[test]
fn distilled_targets_are_cached_and_consistent_for_repeated_sources() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 6, 14);
    let teacher = ArTeacher::new(&tiny(8, 1), vocab, 0).unwrap();
    let mut sources: Vec<TokenSeq> = pairs.iter().map(|p| p.source.clone()).collect();
    sources.push(sources[0].clone());
    let dir = tempfile::tempdir().unwrap();
    let first = distill_targets(&teacher, "abc", &sources, 2, Some(dir.path())).unwrap();
    assert_eq!(first.len(), sources.len());
    assert_eq!(first[0], first[sources.len() - 1]);
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 1);

    // A cache hit returns the stored targets without decoding.
    let path = files[0].as_ref().unwrap().path();
    let planted = vec![TokenSeq::from_interior(&[5]).unwrap(); sources.len()];
    std::fs::write(&path, serde_json::to_vec(&planted).unwrap()).unwrap();
    assert_eq!(
        distill_targets(&teacher, "abc", &sources, 2, Some(dir.path())).unwrap(),
        planted
    );
    // A different teacher checksum misses.
    assert_eq!(
        distill_targets(&teacher, "abd", &sources, 2, Some(dir.path())).unwrap(),
        first
    );
}

#[test]
fn distillation_requires_a_teacher() {
    let (_, pairs) = corpus(SynthTask::Copy, 4, 15);
    let expert = ExpertConfig {
        kind: ExpertKind::Distill,
        ..ExpertConfig::default()
    };
    assert!(matches!(prepare_targets(&pairs, &expert), Err(Error::Config(_))));
    let oracle = prepare_targets(&pairs, &ExpertConfig::default()).unwrap();
    assert_eq!(oracle, pairs);
}

#[test]
fn teacher_training_reduces_its_loss() {
    let (vocab, pairs) = corpus(SynthTask::Copy, 128, 16);
    let mut teacher = ArTeacher::new(&tiny(16, 1), vocab, 1).unwrap();
    let mut cfg = train_cfg(200, 0);
    cfg.batch_size = 16;
    cfg.log_every = 50;
    cfg.optim.warmup_steps = 50;
    let mut logs = Vec::new();
    train_teacher(&mut teacher, &pairs, &cfg, &mut |l| logs.push(l.clone())).unwrap();
    assert!(logs.last().unwrap().loss < 0.6 * logs[0].loss);
}
