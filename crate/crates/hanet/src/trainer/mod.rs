//! Per-stage training: loss scheduling, optimizer stepping, previous-model
//! snapshotting, memory merging, and stage checkpointing.
//!
//! Base stage objective: lambda_ce * L_ce + lambda_cls * L_cls. Incremental
//! stages add feature/predict distillation, memory replay and the trigger
//! contrastive loss. Components with a zero weight are never evaluated, and
//! replay features are sampled (mean re-encoded under the current model in
//! eval mode) before the differentiated graph is built, so replay gradients
//! reach the head only.

pub mod checkpoint;

pub use checkpoint::Checkpoint;

use crate::contrastive::{augment, l_cls_on_tape, l_trig_on_tape, AugMethod, TrigItem};
use crate::corpus::{Benchmark, Candidate, Instance, NA_LABEL};
use crate::detector::{expand_labels, logits_on_tape, LabelRegistry};
use crate::distill::{feature_distill_on_tape, predict_distill_on_tape, FrozenSnapshot};
use crate::encoder::{
    encode_on_tape, sentence_rep_on_tape, trigger_rep_on_tape, EncoderParams, Mode, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{assemble_report, evaluate_stage, RunReport};
use crate::memory::{
    merge_memory, replay_loss_on_tape, sample_prototypical, select_exemplars, Embedder, MemorySet,
    Metric,
};
use crate::model::{grads_to_slots, register_model, ModelParams};
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::matrix::Matrix;
use crate::numerics::optim::{adamw_step, OptimizerState};
use crate::numerics::rng::{RngStream, RngSuite};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Hanet,
    Finetune,
    Retrain,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Hanet => "hanet",
            RunMode::Finetune => "finetune",
            RunMode::Retrain => "retrain",
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<RunMode> {
        match s {
            "hanet" => Ok(RunMode::Hanet),
            "finetune" => Ok(RunMode::Finetune),
            "retrain" => Ok(RunMode::Retrain),
            other => Err(Error::InvalidArgument(format!("unknown mode {other}"))),
        }
    }
}

/// All run knobs; mirrored field-for-field by the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_re: f64,
    pub lambda_cls: f64,
    pub lambda_trig: f64,
    pub lambda_fd: f64,
    pub lambda_pd: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub tau_d: f64,
    pub m_aug: usize,
    pub n_syn: usize,
    pub aug_method: AugMethod,
    pub metric: Metric,
    pub na_enabled: bool,
    pub seed: u64,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub dropout_rate: f64,
    pub rtr_rate: f64,
    /// Memory exemplars also join CE batches as ordinary instances.
    pub replay_in_ce: bool,
    /// Keep the printed temperature placement where tau_d cancels.
    pub pd_literal_tau: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lambda_ce: 1.0,
            lambda_re: 1.0,
            lambda_cls: 1.0,
            lambda_trig: 1.0,
            lambda_fd: 1.0,
            lambda_pd: 1.0,
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            tau: 0.1,
            tau_d: 2.0,
            m_aug: 1,
            n_syn: 10,
            aug_method: AugMethod::Shuffle,
            metric: Metric::L2,
            na_enabled: true,
            seed: 1,
            hidden_dim: 16,
            ff_dim: 32,
            dropout_rate: 0.1,
            rtr_rate: 0.15,
            replay_in_ce: true,
            pd_literal_tau: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_ce,
            self.lambda_re,
            self.lambda_cls,
            self.lambda_trig,
            self.lambda_fd,
            self.lambda_pd,
        ];
        if lambdas.iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative".to_string(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.m_aug == 0 || self.n_syn == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch_size, m_aug and n_syn must be positive".to_string(),
            ));
        }
        if self.tau <= 0.0 || self.tau_d <= 0.0 {
            return Err(Error::InvalidArgument(
                "temperatures must be positive".to_string(),
            ));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive and weight_decay non-negative".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..=1.0).contains(&self.rtr_rate) {
            return Err(Error::InvalidArgument(
                "dropout_rate in [0,1) and rtr_rate in [0,1] required".to_string(),
            ));
        }
        Ok(())
    }

    /// The fine-tune degenerate schedule: cross-entropy only, memory kept
    /// out of the CE batches.
    pub fn degenerate_schedule(&self) -> TrainConfig {
        TrainConfig {
            lambda_re: 0.0,
            lambda_cls: 0.0,
            lambda_trig: 0.0,
            lambda_fd: 0.0,
            lambda_pd: 0.0,
            replay_in_ce: false,
            ..self.clone()
        }
    }

    pub fn checksum(&self) -> String {
        crate::checksum::fnv1a_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Everything that survives a stage boundary.
#[derive(Debug, Clone)]
pub struct StageState {
    pub params: ModelParams,
    pub registry: LabelRegistry,
    pub frozen: Option<FrozenSnapshot>,
    pub memory: MemorySet,
    pub stage: usize,
}

impl StageState {
    pub fn fresh(
        vocab: &Vocab,
        max_len: usize,
        cfg: &TrainConfig,
        init: &mut RngStream,
    ) -> Result<StageState> {
        let enc = EncoderParams::init(
            vocab.size(),
            max_len,
            cfg.hidden_dim,
            cfg.ff_dim,
            cfg.dropout_rate,
            init,
        )?;
        Ok(StageState {
            params: ModelParams::new(enc),
            registry: LabelRegistry::new(cfg.na_enabled),
            frozen: None,
            memory: MemorySet::new(),
            stage: 0,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub re: f64,
    pub cls: f64,
    pub trig: f64,
    pub fd: f64,
    pub pd: f64,
    pub cls_skipped: bool,
}

/// Weighted stage objective on one batch, with slot-aligned gradients on
/// request. `replay_features` must be pre-sampled (see module docs); the
/// schedule enables the auxiliary losses only where Algorithm-1 does.
#[allow(clippy::too_many_arguments)]
pub fn stage_loss(
    params: &ModelParams,
    registry: &LabelRegistry,
    frozen: Option<&FrozenSnapshot>,
    stage: usize,
    batch: &[Candidate],
    replay_features: &[(Vec<f64>, usize)],
    instances: &BTreeMap<String, Instance>,
    vocab: &Vocab,
    cfg: &TrainConfig,
    dropout_rng: &mut RngStream,
    aug_rng: &mut RngStream,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Matrix>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "stage_loss: empty batch".to_string(),
        ));
    }
    let incremental = stage > 1;
    let w_ce = cfg.lambda_ce;
    let w_cls = cfg.lambda_cls;
    let w_re = if incremental { cfg.lambda_re } else { 0.0 };
    let w_trig = if incremental { cfg.lambda_trig } else { 0.0 };
    let w_fd = if incremental { cfg.lambda_fd } else { 0.0 };
    let w_pd = if incremental { cfg.lambda_pd } else { 0.0 };
    if (w_fd > 0.0 || w_pd > 0.0) && frozen.is_none() {
        return Err(Error::State(format!(
            "stage {stage} distillation requires a frozen previous model"
        )));
    }

    let mut tape = Tape::new();
    let vars = register_model(&mut tape, params);

    // Distinct origins in first-appearance order.
    let mut origin_ids: Vec<&str> = Vec::new();
    for c in batch {
        if !origin_ids.contains(&c.instance_id.as_str()) {
            origin_ids.push(c.instance_id.as_str());
        }
    }
    let origin_of = |id: &str| origin_ids.iter().position(|o| *o == id).unwrap();

    struct ViewEnc {
        instance: Instance,
        hidden: Var,
    }
    let need_views = w_cls > 0.0 || w_trig > 0.0;
    let mut encoded: Vec<Vec<ViewEnc>> = Vec::with_capacity(origin_ids.len());
    for id in &origin_ids {
        let inst = instances
            .get(*id)
            .ok_or_else(|| Error::MemoryIntegrity(format!("instance {id} missing")))?;
        let mut views = vec![inst.clone()];
        if need_views {
            let augmented = augment(
                inst,
                cfg.aug_method,
                cfg.m_aug,
                cfg.rtr_rate,
                vocab.real_tokens(),
                aug_rng,
            )?;
            views.extend(augmented.into_iter().map(|v| v.instance));
        }
        let mut encs = Vec::with_capacity(views.len());
        for v in views {
            let ids = vocab.encode_tokens(&v.tokens);
            let out = encode_on_tape(
                &mut tape,
                &vars.enc,
                &params.encoder,
                &ids,
                Mode::Train,
                Some(dropout_rng),
            )?;
            encs.push(ViewEnc {
                instance: v,
                hidden: out.hidden,
            });
        }
        encoded.push(encs);
    }

    // Per-candidate view-1 representation and logits, shared by CE and the
    // distillation losses.
    let mut cand_reps: Vec<Var> = Vec::with_capacity(batch.len());
    let mut cand_logits: Vec<Var> = Vec::with_capacity(batch.len());
    for c in batch {
        let oi = origin_of(&c.instance_id);
        let v1 = &encoded[oi][0];
        let rep = trigger_rep_on_tape(
            &mut tape,
            v1.hidden,
            v1.instance.tokens.len(),
            c.start,
            c.end,
        )?;
        let logits = logits_on_tape(&mut tape, &vars.head, rep)?;
        cand_reps.push(rep);
        cand_logits.push(logits);
    }

    let mut bd = LossBreakdown::default();
    let mut weighted: Vec<Var> = Vec::new();
    let mut push_component =
        |tape: &mut Tape, name: &str, var: Var, weight: f64, slot: &mut f64| -> Result<()> {
            let value = tape.scalar(var);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite {name} component in stage loss"
                )));
            }
            *slot = value;
            weighted.push(tape.affine(var, weight, 0.0));
            Ok(())
        };

    if w_ce > 0.0 {
        let mut terms = Vec::with_capacity(batch.len());
        for (i, c) in batch.iter().enumerate() {
            let gold = registry.require(&c.gold)?;
            terms.push(tape.ce_from_logits(cand_logits[i], gold)?);
        }
        let ce = tape.sum_list(terms)?;
        push_component(&mut tape, "L_ce", ce, w_ce, &mut bd.ce)?;
    }

    if w_re > 0.0 && !replay_features.is_empty() {
        let re = replay_loss_on_tape(&mut tape, &vars.head, replay_features)?;
        push_component(&mut tape, "L_re", re, w_re, &mut bd.re)?;
    }

    if w_cls > 0.0 {
        let mut groups: Vec<Vec<Var>> = Vec::with_capacity(encoded.len());
        for views in &encoded {
            let mut g = Vec::with_capacity(views.len());
            for v in views {
                g.push(sentence_rep_on_tape(&mut tape, v.hidden)?);
            }
            groups.push(g);
        }
        match l_cls_on_tape(&mut tape, &groups, cfg.m_aug, cfg.tau)? {
            Some(cls) => push_component(&mut tape, "L_cls", cls, w_cls, &mut bd.cls)?,
            None => bd.cls_skipped = true,
        }
    }

    if w_trig > 0.0 {
        let mut items = Vec::new();
        for (i, c) in batch.iter().enumerate() {
            if c.is_na() {
                continue;
            }
            let oi = origin_of(&c.instance_id);
            let label = registry.require(&c.gold)?;
            let trig_idx = encoded[oi][0]
                .instance
                .triggers
                .iter()
                .position(|t| t.start == c.start && t.end == c.end)
                .ok_or_else(|| {
                    Error::State(format!(
                        "candidate span ({}, {}) is not a trigger of {}",
                        c.start, c.end, c.instance_id
                    ))
                })?;
            items.push(TrigItem {
                origin: oi,
                label,
                rep: cand_reps[i],
            });
            for view in &encoded[oi][1..] {
                let t = &view.instance.triggers[trig_idx];
                let rep = trigger_rep_on_tape(
                    &mut tape,
                    view.hidden,
                    view.instance.tokens.len(),
                    t.start,
                    t.end,
                )?;
                items.push(TrigItem {
                    origin: oi,
                    label,
                    rep,
                });
            }
        }
        let trig = l_trig_on_tape(&mut tape, &items, encoded.len(), cfg.m_aug, cfg.tau)?;
        push_component(&mut tape, "L_trig", trig, w_trig, &mut bd.trig)?;
    }

    if w_fd > 0.0 || w_pd > 0.0 {
        let snapshot = frozen.expect("checked above");
        let prev_embedder = Embedder {
            params: snapshot.encoder(),
            vocab,
        };
        let mut fd_pairs: Vec<(Vec<f64>, Var)> = Vec::with_capacity(batch.len());
        let mut pd_pairs: Vec<(Vec<f64>, Var)> = Vec::with_capacity(batch.len());
        for (i, c) in batch.iter().enumerate() {
            let inst = instances.get(&c.instance_id).ok_or_else(|| {
                Error::MemoryIntegrity(format!("instance {} missing", c.instance_id))
            })?;
            let prev_rep = prev_embedder.trigger_rep(inst, c.start, c.end)?;
            if w_pd > 0.0 {
                pd_pairs.push((snapshot.head().logits(&prev_rep)?, cand_logits[i]));
            }
            if w_fd > 0.0 {
                fd_pairs.push((prev_rep, cand_reps[i]));
            }
        }
        if w_fd > 0.0 {
            let fd = feature_distill_on_tape(&mut tape, &fd_pairs)?;
            push_component(&mut tape, "L_fd", fd, w_fd, &mut bd.fd)?;
        }
        if w_pd > 0.0 {
            let pd = predict_distill_on_tape(
                &mut tape,
                &pd_pairs,
                snapshot.n_labels(),
                cfg.tau_d,
                cfg.pd_literal_tau,
            )?;
            push_component(&mut tape, "L_pd", pd, w_pd, &mut bd.pd)?;
        }
    }

    let total = if weighted.is_empty() {
        tape.scalar_const(0.0)
    } else {
        tape.sum_list(weighted)?
    };
    bd.total = tape.scalar(total);
    if !bd.total.is_finite() {
        return Err(Error::Numeric("non-finite total stage loss".to_string()));
    }

    let grads = if want_grads {
        Some(grads_to_slots(tape.backward(total)?, params))
    } else {
        None
    };
    Ok((bd, grads))
}

/// Train one stage in place: snapshot-and-freeze (t > 1), expand the head
/// for the task's labels, run epochs of AdamW steps over the combined pool,
/// then select exemplars and merge memory when `build_memory` is set.
pub fn run_stage(
    state: &mut StageState,
    bench: &Benchmark,
    t: usize,
    cfg: &TrainConfig,
    suite: &mut RngSuite,
    vocab: &Vocab,
    build_memory: bool,
) -> Result<()> {
    if t == 0 || t > bench.n_tasks() {
        return Err(Error::InvalidArgument(format!("stage {t} out of range")));
    }
    if state.stage + 1 != t {
        return Err(Error::State(format!(
            "run_stage: state completed stage {}, cannot run stage {t}",
            state.stage
        )));
    }
    let task = &bench.tasks[t - 1];

    if t > 1 {
        state.frozen = Some(FrozenSnapshot {
            params: state.params.clone(),
            registry: state.registry.clone(),
        });
    }

    let mut new_labels: Vec<String> = Vec::new();
    if t == 1 && cfg.na_enabled {
        new_labels.push(NA_LABEL.to_string());
    }
    new_labels.extend(task.label_set.iter().cloned());
    expand_labels(
        &mut state.params.head,
        &mut state.registry,
        t,
        &new_labels,
        &mut suite.init,
    )
    .map_err(|e| e.with_stage(t))?;

    let mut pool: Vec<Candidate> = task
        .train
        .iter()
        .filter(|c| cfg.na_enabled || !c.is_na())
        .cloned()
        .collect();
    if t > 1 && cfg.replay_in_ce {
        for (_, ex) in state.memory.iter() {
            pool.push(ex.candidate.clone());
        }
    }

    let mut optimizer = OptimizerState::new(&state.params, cfg.learning_rate, cfg.weight_decay);
    let mut cls_skips = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order = pool.clone();
        suite.split.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let replay = if t > 1 && cfg.lambda_re > 0.0 && !state.memory.is_empty() {
                let embedder = Embedder {
                    params: &state.params.encoder,
                    vocab,
                };
                let mut features = Vec::new();
                for (label, ex) in state.memory.iter() {
                    let idx = state.registry.require(label)?;
                    let drawn = sample_prototypical(
                        ex,
                        &bench.instances,
                        &embedder,
                        cfg.n_syn,
                        &mut suite.gauss,
                    )
                    .map_err(|e| e.with_stage(t))?;
                    features.extend(drawn.into_iter().map(|f| (f, idx)));
                }
                features
            } else {
                Vec::new()
            };
            let (bd, grads) = stage_loss(
                &state.params,
                &state.registry,
                state.frozen.as_ref(),
                t,
                batch,
                &replay,
                &bench.instances,
                vocab,
                cfg,
                &mut suite.dropout,
                &mut suite.aug,
                true,
            )
            .map_err(|e| e.with_stage(t))?;
            if bd.cls_skipped {
                cls_skips += 1;
            }
            adamw_step(
                &mut state.params,
                &grads.expect("gradients requested"),
                &mut optimizer,
            )
            .map_err(|e| e.with_stage(t))?;
        }
    }
    if cls_skips > 0 {
        eprintln!(
            "stage {t}: skipped sentence contrastive loss on {cls_skips} single-origin batches"
        );
    }

    if build_memory {
        let embedder = Embedder {
            params: &state.params.encoder,
            vocab,
        };
        let exemplars = select_exemplars(
            &task.label_set,
            &task.train,
            &bench.instances,
            &embedder,
            cfg.metric,
        )
        .map_err(|e| e.with_stage(t))?;
        state.memory = merge_memory(&state.memory, exemplars).map_err(|e| e.with_stage(t))?;
    }
    state.stage = t;
    Ok(())
}

pub struct RunOutcome {
    pub report: RunReport,
    pub final_state: StageState,
    pub vocab: Vocab,
}

pub fn vocab_from_benchmark(bench: &Benchmark) -> Vocab {
    Vocab::from_tokens(
        bench
            .instances
            .values()
            .flat_map(|i| i.tokens.iter().cloned()),
    )
}

pub fn benchmark_max_len(bench: &Benchmark) -> usize {
    bench
        .instances
        .values()
        .map(|i| i.tokens.len())
        .max()
        .unwrap_or(0)
        + 1
}

/// Run the whole task stream in one mode, evaluating each stage on the
/// accumulated test set. `out_dir`, when given, receives one checkpoint per
/// stage.
pub fn run_stream(
    bench: &Benchmark,
    cfg: &TrainConfig,
    mode: RunMode,
    out_dir: Option<&Path>,
    manifest_id: &str,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let vocab = vocab_from_benchmark(bench);
    let max_len = benchmark_max_len(bench);
    let effective = match mode {
        RunMode::Hanet => cfg.clone(),
        RunMode::Finetune | RunMode::Retrain => cfg.degenerate_schedule(),
    };
    let mut suite = RngSuite::new(cfg.seed);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let n = bench.n_tasks();
    let mut stage_reports = Vec::with_capacity(n);
    let final_state = match mode {
        RunMode::Hanet | RunMode::Finetune => {
            let mut state = StageState::fresh(&vocab, max_len, &effective, &mut suite.init)?;
            for t in 1..=n {
                run_stage(
                    &mut state,
                    bench,
                    t,
                    &effective,
                    &mut suite,
                    &vocab,
                    mode == RunMode::Hanet,
                )?;
                stage_reports.push(evaluate_stage(
                    &state.params,
                    &state.registry,
                    &vocab,
                    bench,
                    t,
                )?);
                if let Some(dir) = out_dir {
                    Checkpoint::capture(&state, &vocab, &suite, &bench.checksum())
                        .save(&dir.join(format!("stage_{t:02}.json")))?;
                }
            }
            state
        }
        RunMode::Retrain => {
            let mut last: Option<StageState> = None;
            for t in 1..=n {
                let state = retrain_stage(bench, t, &effective, &mut suite, &vocab, max_len)?;
                stage_reports.push(evaluate_stage(
                    &state.params,
                    &state.registry,
                    &vocab,
                    bench,
                    t,
                )?);
                if let Some(dir) = out_dir {
                    Checkpoint::capture(&state, &vocab, &suite, &bench.checksum())
                        .save(&dir.join(format!("stage_{t:02}.json")))?;
                }
                last = Some(state);
            }
            last.expect("at least one task")
        }
    };

    let report = assemble_report(
        mode.as_str(),
        cfg.seed,
        &bench.checksum(),
        manifest_id,
        stage_reports,
    )?;
    Ok(RunOutcome {
        report,
        final_state,
        vocab,
    })
}

/// Combined-retrain baseline stage: fresh parameters, cross-entropy only,
/// union of all train candidates of stages 1..=t.
fn retrain_stage(
    bench: &Benchmark,
    t: usize,
    cfg: &TrainConfig,
    suite: &mut RngSuite,
    vocab: &Vocab,
    max_len: usize,
) -> Result<StageState> {
    let mut state = StageState::fresh(vocab, max_len, cfg, &mut suite.init)?;
    for i in 1..=t {
        let mut labels: Vec<String> = Vec::new();
        if i == 1 && cfg.na_enabled {
            labels.push(NA_LABEL.to_string());
        }
        labels.extend(bench.tasks[i - 1].label_set.iter().cloned());
        expand_labels(
            &mut state.params.head,
            &mut state.registry,
            i,
            &labels,
            &mut suite.init,
        )?;
    }
    let pool: Vec<Candidate> = bench.tasks[..t]
        .iter()
        .flat_map(|task| task.train.iter())
        .filter(|c| cfg.na_enabled || !c.is_na())
        .cloned()
        .collect();

    let mut optimizer = OptimizerState::new(&state.params, cfg.learning_rate, cfg.weight_decay);
    for _epoch in 0..cfg.epochs {
        let mut order = pool.clone();
        suite.split.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (_bd, grads) = stage_loss(
                &state.params,
                &state.registry,
                None,
                1,
                batch,
                &[],
                &bench.instances,
                vocab,
                cfg,
                &mut suite.dropout,
                &mut suite.aug,
                true,
            )
            .map_err(|e| e.with_stage(t))?;
            adamw_step(
                &mut state.params,
                &grads.expect("gradients requested"),
                &mut optimizer,
            )?;
        }
    }
    state.stage = t;
    Ok(state)
}
