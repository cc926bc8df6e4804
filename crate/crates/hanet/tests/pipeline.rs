//! End-to-end trainer behavior on a small synthetic benchmark: mode
//! contracts, determinism, checkpoint resume, and the hand-assembled stage
//! loss.

use hanet::contrastive::{augment, l_cls_value, l_trig_value};
use hanet::corpus::{build_benchmark, gen_synthetic_corpus, Benchmark, BuildParams, GenParams};
use hanet::detector::ce_loss;
use hanet::distill::{feature_distill_value, predict_distill_value, FrozenSnapshot};
use hanet::encoder::{encode_eval, sentence_rep, trigger_rep};
use hanet::eval::evaluate_stage;
use hanet::memory::{replay_loss, Embedder};
use hanet::numerics::rng::{RngStream, RngSuite};
use hanet::trainer::{
    run_stage, run_stream, stage_loss, vocab_from_benchmark, Checkpoint, RunMode, StageState,
    TrainConfig,
};

fn tiny_benchmark() -> Benchmark {
    let corpus = gen_synthetic_corpus(
        &GenParams {
            n_types: 10,
            instances_per_type: 30,
            vocab_size: 60,
            sentence_len: 6,
            signal_strength: 0.9,
        },
        3,
    )
    .unwrap();
    build_benchmark(
        &corpus,
        &BuildParams {
            n_tasks: 3,
            way: 2,
            base_shots: 8,
            shots: 3,
            na_ratio: 1,
            dev_per_type: 2,
            test_per_type: 5,
            seed: 5,
        },
    )
    .unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        n_syn: 2,
        hidden_dim: 8,
        ff_dim: 12,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn hanet_memory_grows_by_way_per_stage() {
    let bench = tiny_benchmark();
    let out = run_stream(&bench, &tiny_config(), RunMode::Hanet, None, "m").unwrap();
    // 3 stages x 2-way
    assert_eq!(out.final_state.memory.len(), 6);
    assert_eq!(out.report.stages.len(), 3);
    for (i, s) in out.report.stages.iter().enumerate() {
        assert_eq!(s.stage, i + 1);
        assert!((0.0..=1.0).contains(&s.micro_f1));
    }
}

#[test]
fn finetune_never_constructs_memory() {
    let bench = tiny_benchmark();
    let out = run_stream(&bench, &tiny_config(), RunMode::Finetune, None, "m").unwrap();
    assert!(out.final_state.memory.is_empty());
}

#[test]
fn retrain_runs_fresh_each_stage() {
    let bench = tiny_benchmark();
    let out = run_stream(&bench, &tiny_config(), RunMode::Retrain, None, "m").unwrap();
    assert_eq!(out.report.stages.len(), 3);
    assert!(out.final_state.memory.is_empty());
    assert!(out.final_state.frozen.is_none());
}

#[test]
fn same_seed_runs_are_bitwise_identical() {
    let bench = tiny_benchmark();
    let cfg = tiny_config();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_stream(&bench, &cfg, RunMode::Hanet, Some(dir_a.path()), "m").unwrap();
    let b = run_stream(&bench, &cfg, RunMode::Hanet, Some(dir_b.path()), "m").unwrap();
    assert_eq!(
        serde_json::to_vec(&a.report).unwrap(),
        serde_json::to_vec(&b.report).unwrap()
    );
    for t in 1..=3 {
        let fa = std::fs::read(dir_a.path().join(format!("stage_{t:02}.json"))).unwrap();
        let fb = std::fs::read(dir_b.path().join(format!("stage_{t:02}.json"))).unwrap();
        assert_eq!(fa, fb, "stage {t} checkpoints differ");
    }
}

#[test]
fn degenerate_hanet_schedule_equals_finetune_bitwise() {
    let bench = tiny_benchmark();
    let degenerate = tiny_config().degenerate_schedule();
    let a = run_stream(&bench, &degenerate, RunMode::Hanet, None, "m").unwrap();
    let b = run_stream(&bench, &degenerate, RunMode::Finetune, None, "m").unwrap();
    // identical up to the mode tag: stage scores, counts, and parameters
    assert_eq!(
        serde_json::to_vec(&a.report.stages).unwrap(),
        serde_json::to_vec(&b.report.stages).unwrap()
    );
    assert_eq!(a.report.overall.to_bits(), b.report.overall.to_bits());
    assert_eq!(
        serde_json::to_vec(&a.final_state.params).unwrap(),
        serde_json::to_vec(&b.final_state.params).unwrap()
    );
}

#[test]
fn checkpoint_resume_replays_training_exactly() {
    let bench = tiny_benchmark();
    let cfg = tiny_config();
    let vocab = vocab_from_benchmark(&bench);
    let max_len = hanet::trainer::benchmark_max_len(&bench);

    // straight through: stages 1 and 2
    let mut suite = RngSuite::new(cfg.seed);
    let mut straight = StageState::fresh(&vocab, max_len, &cfg, &mut suite.init).unwrap();
    run_stage(&mut straight, &bench, 1, &cfg, &mut suite, &vocab, true).unwrap();
    let ckpt = Checkpoint::capture(&straight, &vocab, &suite, &bench.checksum());
    run_stage(&mut straight, &bench, 2, &cfg, &mut suite, &vocab, true).unwrap();

    // resume: serialize, reload, run stage 2
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage_01.json");
    ckpt.save(&path).unwrap();
    let (mut resumed, mut suite2, vocab2) = Checkpoint::load(&path).unwrap().into_parts();
    run_stage(&mut resumed, &bench, 2, &cfg, &mut suite2, &vocab2, true).unwrap();

    assert_eq!(straight.params, resumed.params);
    assert_eq!(straight.memory, resumed.memory);
    assert_eq!(
        serde_json::to_vec(&suite).unwrap(),
        serde_json::to_vec(&suite2).unwrap()
    );
}

#[test]
fn frozen_snapshot_is_never_mutated_by_training() {
    let bench = tiny_benchmark();
    let cfg = tiny_config();
    let vocab = vocab_from_benchmark(&bench);
    let max_len = hanet::trainer::benchmark_max_len(&bench);
    let mut suite = RngSuite::new(cfg.seed);
    let mut state = StageState::fresh(&vocab, max_len, &cfg, &mut suite.init).unwrap();
    run_stage(&mut state, &bench, 1, &cfg, &mut suite, &vocab, true).unwrap();
    let before = serde_json::to_vec(&state.params).unwrap();
    run_stage(&mut state, &bench, 2, &cfg, &mut suite, &vocab, true).unwrap();
    let frozen = state.frozen.as_ref().expect("stage 2 snapshots stage 1");
    assert_eq!(serde_json::to_vec(&frozen.params).unwrap(), before);
    // and training did move the live parameters
    assert_ne!(serde_json::to_vec(&state.params).unwrap(), before);
}

/// The full incremental objective equals the sum of its components, each
/// recomputed independently through the module-level value functions (with
/// dropout disabled so train-mode and eval-mode representations coincide).
#[test]
fn stage_loss_matches_hand_assembled_components() {
    let bench = tiny_benchmark();
    let mut cfg = tiny_config();
    cfg.dropout_rate = 0.0;
    let vocab = vocab_from_benchmark(&bench);
    let max_len = hanet::trainer::benchmark_max_len(&bench);
    let mut suite = RngSuite::new(cfg.seed);
    let mut state = StageState::fresh(&vocab, max_len, &cfg, &mut suite.init).unwrap();
    run_stage(&mut state, &bench, 1, &cfg, &mut suite, &vocab, true).unwrap();

    // enter stage 2 by hand so we control the batch
    state.frozen = Some(FrozenSnapshot {
        params: state.params.clone(),
        registry: state.registry.clone(),
    });
    hanet::detector::expand_labels(
        &mut state.params.head,
        &mut state.registry,
        2,
        &bench.tasks[1].label_set.clone(),
        &mut suite.init,
    )
    .unwrap();

    let batch: Vec<_> = bench.tasks[1].train.iter().take(4).cloned().collect();
    assert!(batch.iter().any(|c| c.is_na()) || batch.len() == 4);

    // replay features from the two stage-1 exemplars
    let embedder = Embedder {
        params: &state.params.encoder,
        vocab: &vocab,
    };
    let mut gauss = RngStream::new(99, "gauss");
    let mut replay = Vec::new();
    for (label, ex) in state.memory.iter() {
        let idx = state.registry.index_of(label).unwrap();
        for f in hanet::memory::sample_prototypical(
            ex,
            &bench.instances,
            &embedder,
            cfg.n_syn,
            &mut gauss,
        )
        .unwrap()
        {
            replay.push((f, idx));
        }
    }

    let mut dropout = RngStream::new(cfg.seed, "dropout");
    let mut aug = RngStream::new(cfg.seed, "aug");
    let (bd, _) = stage_loss(
        &state.params,
        &state.registry,
        state.frozen.as_ref(),
        2,
        &batch,
        &replay,
        &bench.instances,
        &vocab,
        &cfg,
        &mut dropout,
        &mut aug,
        false,
    )
    .unwrap();

    // hand assembly with an identically-seeded augmentation stream
    let mut aug2 = RngStream::new(cfg.seed, "aug");
    let mut origin_ids: Vec<&str> = Vec::new();
    for c in &batch {
        if !origin_ids.contains(&c.instance_id.as_str()) {
            origin_ids.push(c.instance_id.as_str());
        }
    }
    let mut views_per_origin = Vec::new();
    for id in &origin_ids {
        let inst = &bench.instances[*id];
        let mut views = vec![inst.clone()];
        views.extend(
            augment(
                inst,
                cfg.aug_method,
                cfg.m_aug,
                cfg.rtr_rate,
                vocab.real_tokens(),
                &mut aug2,
            )
            .unwrap()
            .into_iter()
            .map(|v| v.instance),
        );
        views_per_origin.push(views);
    }
    let enc_of = |inst: &hanet::corpus::Instance| {
        encode_eval(&state.params.encoder, &vocab.encode_tokens(&inst.tokens)).unwrap()
    };

    // CE over view-1 reps
    let reps: Vec<Vec<f64>> = batch
        .iter()
        .map(|c| {
            let oi = origin_ids.iter().position(|o| *o == c.instance_id).unwrap();
            trigger_rep(&enc_of(&views_per_origin[oi][0]), c.start, c.end).unwrap()
        })
        .collect();
    let ce_batch: Vec<(&[f64], usize)> = batch
        .iter()
        .zip(&reps)
        .map(|(c, r)| (r.as_slice(), state.registry.index_of(&c.gold).unwrap()))
        .collect();
    let ce = ce_loss(&state.params.head, &ce_batch).unwrap();
    assert!((bd.ce - ce).abs() < 1e-9, "ce {} vs {}", bd.ce, ce);

    let re = replay_loss(&replay, &state.params.head).unwrap();
    assert!((bd.re - re).abs() < 1e-9);

    let groups: Vec<Vec<Vec<f64>>> = views_per_origin
        .iter()
        .map(|views| views.iter().map(|v| sentence_rep(&enc_of(v))).collect())
        .collect();
    let cls = l_cls_value(&groups, cfg.m_aug, cfg.tau).unwrap().unwrap();
    assert!((bd.cls - cls).abs() < 1e-9, "cls {} vs {}", bd.cls, cls);

    let mut items = Vec::new();
    for c in &batch {
        if c.is_na() {
            continue;
        }
        let oi = origin_ids.iter().position(|o| *o == c.instance_id).unwrap();
        let label = state.registry.index_of(&c.gold).unwrap();
        let k = views_per_origin[oi][0]
            .triggers
            .iter()
            .position(|t| t.start == c.start && t.end == c.end)
            .unwrap();
        for view in &views_per_origin[oi] {
            let t = &view.triggers[k];
            items.push((
                oi,
                label,
                trigger_rep(&enc_of(view), t.start, t.end).unwrap(),
            ));
        }
    }
    let trig = l_trig_value(&items, origin_ids.len(), cfg.m_aug, cfg.tau).unwrap();
    assert!(
        (bd.trig - trig).abs() < 1e-9,
        "trig {} vs {}",
        bd.trig,
        trig
    );

    let frozen = state.frozen.as_ref().unwrap();
    let prev_embedder = Embedder {
        params: frozen.encoder(),
        vocab: &vocab,
    };
    let mut fd = 0.0;
    let mut pd = 0.0;
    for (c, cur_rep) in batch.iter().zip(&reps) {
        let inst = &bench.instances[&c.instance_id];
        let prev_rep = prev_embedder.trigger_rep(inst, c.start, c.end).unwrap();
        fd += feature_distill_value(&[(prev_rep.clone(), cur_rep.clone())]).unwrap();
        let prev_logits = frozen.head().logits(&prev_rep).unwrap();
        let cur_logits = state.params.head.logits(cur_rep).unwrap();
        pd += predict_distill_value(
            &prev_logits,
            &cur_logits,
            frozen.n_labels(),
            cfg.tau_d,
            cfg.pd_literal_tau,
        )
        .unwrap();
    }
    assert!((bd.fd - fd).abs() < 1e-9, "fd {} vs {}", bd.fd, fd);
    assert!((bd.pd - pd).abs() < 1e-9, "pd {} vs {}", bd.pd, pd);

    let expect_total = cfg.lambda_ce * ce
        + cfg.lambda_re * re
        + cfg.lambda_cls * cls
        + cfg.lambda_trig * trig
        + cfg.lambda_fd * fd
        + cfg.lambda_pd * pd;
    assert!(
        (bd.total - expect_total).abs() < 1e-9,
        "total {} vs hand sum {}",
        bd.total,
        expect_total
    );
}

#[test]
fn stage_one_excludes_trigger_contrastive_even_with_positive_weight() {
    let bench = tiny_benchmark();
    let cfg = tiny_config();
    let vocab = vocab_from_benchmark(&bench);
    let max_len = hanet::trainer::benchmark_max_len(&bench);
    let mut suite = RngSuite::new(1);
    let mut state = StageState::fresh(&vocab, max_len, &cfg, &mut suite.init).unwrap();
    hanet::detector::expand_labels(
        &mut state.params.head,
        &mut state.registry,
        1,
        &[
            "NA".to_string(),
            bench.tasks[0].label_set[0].clone(),
            bench.tasks[0].label_set[1].clone(),
        ],
        &mut suite.init,
    )
    .unwrap();
    let batch: Vec<_> = bench.tasks[0].train.iter().take(4).cloned().collect();
    let mut dropout = RngStream::new(1, "dropout");
    let mut aug = RngStream::new(1, "aug");
    let (bd, _) = stage_loss(
        &state.params,
        &state.registry,
        None,
        1,
        &batch,
        &[],
        &bench.instances,
        &vocab,
        &cfg,
        &mut dropout,
        &mut aug,
        false,
    )
    .unwrap();
    assert_eq!(bd.trig, 0.0);
    assert_eq!(bd.fd, 0.0);
    assert_eq!(bd.pd, 0.0);
    assert_eq!(bd.re, 0.0);
    assert!(bd.ce > 0.0);
}

#[test]
fn ce_only_schedule_is_the_finetune_objective() {
    let bench = tiny_benchmark();
    let mut cfg = tiny_config();
    cfg = cfg.degenerate_schedule();
    cfg.dropout_rate = 0.0;
    let vocab = vocab_from_benchmark(&bench);
    let max_len = hanet::trainer::benchmark_max_len(&bench);
    let mut suite = RngSuite::new(2);
    let mut state = StageState::fresh(&vocab, max_len, &cfg, &mut suite.init).unwrap();
    hanet::detector::expand_labels(
        &mut state.params.head,
        &mut state.registry,
        1,
        &[
            "NA".to_string(),
            bench.tasks[0].label_set[0].clone(),
            bench.tasks[0].label_set[1].clone(),
        ],
        &mut suite.init,
    )
    .unwrap();
    let batch: Vec<_> = bench.tasks[0].train.iter().take(3).cloned().collect();
    let mut dropout = RngStream::new(2, "dropout");
    let mut aug = RngStream::new(2, "aug");
    let (bd, _) = stage_loss(
        &state.params,
        &state.registry,
        None,
        1,
        &batch,
        &[],
        &bench.instances,
        &vocab,
        &cfg,
        &mut dropout,
        &mut aug,
        false,
    )
    .unwrap();
    let reps: Vec<Vec<f64>> = batch
        .iter()
        .map(|c| {
            let inst = &bench.instances[&c.instance_id];
            trigger_rep(
                &encode_eval(&state.params.encoder, &vocab.encode_tokens(&inst.tokens)).unwrap(),
                c.start,
                c.end,
            )
            .unwrap()
        })
        .collect();
    let ce_batch: Vec<(&[f64], usize)> = batch
        .iter()
        .zip(&reps)
        .map(|(c, r)| (r.as_slice(), state.registry.index_of(&c.gold).unwrap()))
        .collect();
    let ce = ce_loss(&state.params.head, &ce_batch).unwrap();
    assert!((bd.total - ce).abs() < 1e-9);
    // no augmentation stream consumption in the degenerate schedule
    assert_eq!(aug.counter(), 0);
}

#[test]
fn forgetting_is_visible_in_the_counts() {
    let bench = tiny_benchmark();
    let out = run_stream(&bench, &tiny_config(), RunMode::Finetune, None, "m").unwrap();
    // a finetuned model at the last stage keeps predicting late labels, so
    // earlier-stage golds show up as false negatives
    let last = out.report.stages.last().unwrap();
    assert!(last.fn_ > 0, "expected visible forgetting, got {last:?}");
}

#[test]
fn stage_one_leaves_no_frozen_snapshot() {
    let bench = tiny_benchmark();
    let cfg = tiny_config();
    let vocab = vocab_from_benchmark(&bench);
    let max_len = hanet::trainer::benchmark_max_len(&bench);
    let mut suite = RngSuite::new(cfg.seed);
    let mut state = StageState::fresh(&vocab, max_len, &cfg, &mut suite.init).unwrap();
    run_stage(&mut state, &bench, 1, &cfg, &mut suite, &vocab, true).unwrap();
    assert!(state.frozen.is_none());
    assert_eq!(state.memory.len(), 2);
    run_stage(&mut state, &bench, 2, &cfg, &mut suite, &vocab, true).unwrap();
    assert!(state.frozen.is_some());
}

#[test]
fn evaluating_with_a_missing_label_is_a_state_error() {
    let bench = tiny_benchmark();
    let cfg = tiny_config();
    let vocab = vocab_from_benchmark(&bench);
    let max_len = hanet::trainer::benchmark_max_len(&bench);
    let mut suite = RngSuite::new(cfg.seed);
    let mut state = StageState::fresh(&vocab, max_len, &cfg, &mut suite.init).unwrap();
    run_stage(&mut state, &bench, 1, &cfg, &mut suite, &vocab, true).unwrap();
    // task-2 labels were never registered
    let err = evaluate_stage(&state.params, &state.registry, &vocab, &bench, 2).unwrap_err();
    assert!(matches!(err, hanet::error::Error::State(_)), "{err}");
}

/// The parallel facade must be a pure speedup: batch prediction equals the
/// hand-rolled sequential loop element for element.
#[test]
fn parallel_prediction_matches_sequential_loop_bitwise() {
    let bench = tiny_benchmark();
    let out = run_stream(&bench, &tiny_config(), RunMode::Hanet, None, "m").unwrap();
    let candidates = bench.accumulate_test(3).unwrap();
    let parallel = hanet::eval::predict_candidates(
        &out.final_state.params,
        &out.final_state.registry,
        &out.vocab,
        &bench,
        &candidates,
    )
    .unwrap();
    let sequential: Vec<String> = candidates
        .iter()
        .map(|c| {
            let inst = bench.instance(&c.instance_id).unwrap();
            let ids = out.vocab.encode_tokens(&inst.tokens);
            let enc = encode_eval(&out.final_state.params.encoder, &ids).unwrap();
            let rep = trigger_rep(&enc, c.start, c.end).unwrap();
            let idx =
                hanet::detector::predict_index(&out.final_state.params.head, &rep).unwrap();
            out.final_state.registry.labels()[idx].clone()
        })
        .collect();
    assert_eq!(parallel, sequential);
}

#[test]
fn argmax_is_invariant_under_common_logit_shift() {
    let bench = tiny_benchmark();
    let out = run_stream(&bench, &tiny_config(), RunMode::Hanet, None, "m").unwrap();
    let candidates = bench.accumulate_test(2).unwrap();
    let mut shifted = out.final_state.params.clone();
    for b in shifted.head.bias.data_mut() {
        *b += 3.25;
    }
    for c in candidates.iter().take(20) {
        let inst = bench.instance(&c.instance_id).unwrap();
        let ids = out.vocab.encode_tokens(&inst.tokens);
        let enc = encode_eval(&out.final_state.params.encoder, &ids).unwrap();
        let rep = trigger_rep(&enc, c.start, c.end).unwrap();
        let a = hanet::detector::predict_index(&out.final_state.params.head, &rep).unwrap();
        let b = hanet::detector::predict_index(&shifted.head, &rep).unwrap();
        assert_eq!(a, b);
        let pa = hanet::detector::classify(&out.final_state.params.head, &rep).unwrap();
        let pb = hanet::detector::classify(&shifted.head, &rep).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_trigger_batch_contributes_zero() {
    assert_eq!(l_trig_value(&[], 0, 1, 0.5).unwrap(), 0.0);
    assert_eq!(l_trig_value(&[(0, 0, vec![1.0, 0.0])], 1, 1, 0.5).unwrap(), 0.0);
}

#[test]
fn evaluate_stage_one_scores_only_task_one() {
    let bench = tiny_benchmark();
    let out = run_stream(&bench, &tiny_config(), RunMode::Hanet, None, "m").unwrap();
    let rep = evaluate_stage(
        &out.final_state.params,
        &out.final_state.registry,
        &out.vocab,
        &bench,
        1,
    )
    .unwrap();
    assert_eq!(rep.test_size, bench.tasks[0].test.len());
}
