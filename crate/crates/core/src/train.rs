//! Fold-wise training and prediction for the three formulations.
//!
//! Each fold starts from the same encoder initialization, trains on the
//! fold's training split and predicts the shared evaluation set plus its own
//! held-out records. Fold predictions on the evaluation set are averaged.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{gold_label, FoldPlan, GapRecord, Label};
use crate::encoder::{init_params, EmbeddingStore, EncoderConfig, EncoderParams, StateSource, TokenStates};
use crate::error::{ModelError, TrainError};
use crate::mc::{build_mc_example, mc_backward, mc_forward, mc_loss, McExample, McHead};
use crate::metrics::{ensemble_average, Predictions, ProbTriple};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState, Schedule};
use crate::params::{Joint, Parameters};
use crate::qa::{
    build_qa_example, fit_span_lr, pooled_features_with_missing, qa_forward, qa_head_backward, qa_loss_grad,
    qa_probabilities, BuildMode, LrModel, PooledFeatures, QaBuild, QaExample, QaHead, DEFAULT_C,
    DEFAULT_MAX_ANSWER_LEN, DEFAULT_WINDOW,
};
use crate::seed;
use crate::seq::{
    build_seq_example, seq_backward, seq_forward, seq_forward_cached, seq_loss, Dropout, SeqExample, SeqHead,
    SEQ_DROPOUT, SEQ_HIDDEN_UNITS,
};
use crate::tokenizer::{EncodedInput, Vocab, DEFAULT_MAX_SEQ_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Qa,
    Mc,
    Seq,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Qa, ModelKind::Mc, ModelKind::Seq];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Qa => "qa",
            ModelKind::Mc => "mc",
            ModelKind::Seq => "seq",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qa" => Ok(ModelKind::Qa),
            "mc" => Ok(ModelKind::Mc),
            "seq" => Ok(ModelKind::Seq),
            other => Err(format!("unknown model kind '{other}' (expected qa, mc or seq)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    WarmupLinear,
    Triangular,
    Constant,
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "warmup-linear" => Ok(ScheduleKind::WarmupLinear),
            "triangular" => Ok(ScheduleKind::Triangular),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(format!("unknown schedule '{other}'")),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::WarmupLinear => "warmup-linear",
            ScheduleKind::Triangular => "triangular",
            ScheduleKind::Constant => "constant",
        })
    }
}

/// Input construction and head settings shared by training and prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub window: usize,
    pub max_seq_len: usize,
    pub max_answer_len: usize,
    pub seq_hidden_units: usize,
    pub seq_dropout: f64,
    pub lr_c: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            window: DEFAULT_WINDOW,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            seq_hidden_units: SEQ_HIDDEN_UNITS,
            seq_dropout: SEQ_DROPOUT,
            lr_c: DEFAULT_C,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: ScheduleKind,
    /// `None` means 100 times the training-set size.
    pub triangular_steps_per_cycle: Option<usize>,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub pipeline: PipelineSettings,
}

impl TrainerConfig {
    pub fn for_kind(kind: ModelKind) -> TrainerConfig {
        let base = TrainerConfig {
            learning_rate: 1e-5,
            adam: AdamConfig::default(),
            warmup_fraction: 0.1,
            batch_size: 12,
            epochs: 2,
            schedule: ScheduleKind::WarmupLinear,
            triangular_steps_per_cycle: None,
            clip_norm: Some(1.0),
            seed: 0,
            pipeline: PipelineSettings::default(),
        };
        match kind {
            ModelKind::Qa => base,
            ModelKind::Mc => TrainerConfig { batch_size: 4, ..base },
            ModelKind::Seq => TrainerConfig { batch_size: 10, epochs: 30, schedule: ScheduleKind::Triangular, ..base },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return bad("adam betas must lie in [0, 1), eps > 0, weight_decay >= 0");
        }
        if matches!(self.triangular_steps_per_cycle, Some(0)) {
            return bad("triangular_steps_per_cycle must be positive");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        let p = &self.pipeline;
        if p.window == 0 || p.max_seq_len < 4 || p.max_answer_len == 0 || p.seq_hidden_units == 0 {
            return bad("window, max_seq_len, max_answer_len and seq_hidden_units must be positive");
        }
        if !(0.0..1.0).contains(&p.seq_dropout) || p.lr_c <= 0.0 {
            return bad("seq_dropout must lie in [0, 1) and lr_c must be positive");
        }
        Ok(())
    }

    fn schedule_for(&self, train_size: usize) -> Schedule {
        match self.schedule {
            ScheduleKind::WarmupLinear => Schedule::WarmupLinear { warmup_fraction: self.warmup_fraction },
            ScheduleKind::Triangular => Schedule::Triangular {
                steps_per_cycle: self.triangular_steps_per_cycle.unwrap_or(100 * train_size.max(1)),
            },
            ScheduleKind::Constant => Schedule::Constant,
        }
    }
}

/// Where token states come from.
#[derive(Debug, Clone, Copy)]
pub enum Backbone<'a> {
    /// The compact encoder, initialized from this config and fine-tuned.
    Trainable(&'a EncoderConfig),
    /// Fixed precomputed states; only the head trains.
    External(&'a EmbeddingStore),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Qa(QaHead),
    Mc(McHead),
    Seq(SeqHead),
}

impl Head {
    pub fn kind(&self) -> ModelKind {
        match self {
            Head::Qa(_) => ModelKind::Qa,
            Head::Mc(_) => ModelKind::Mc,
            Head::Seq(_) => ModelKind::Seq,
        }
    }
}

/// Everything needed to predict with one fold's model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// `None` when trained on external states.
    pub encoder: Option<EncoderParams>,
    pub head: Head,
    /// Calibration for the QA formulation.
    pub calibration: Option<LrModel>,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.head.kind()
    }

    /// Predict class probabilities. `external` supplies states when the model
    /// carries no encoder.
    pub fn predict(
        &self,
        external: Option<&EmbeddingStore>,
        records: &[GapRecord],
        vocab: &Vocab,
        settings: &PipelineSettings,
    ) -> Result<Predictions, TrainError> {
        let source: &dyn StateSource = match (&self.encoder, external) {
            (Some(enc), _) => enc,
            (None, Some(store)) => store,
            (None, None) => {
                return Err(TrainError::InvalidConfig("model has no encoder and no embeddings were given".into()))
            }
        };
        match &self.head {
            Head::Qa(h) => {
                let lr = self
                    .calibration
                    .as_ref()
                    .ok_or_else(|| TrainError::Checkpoint("QA model lacks its calibration".into()))?;
                predict_qa(source, h, lr, records, vocab, settings)
            }
            Head::Mc(h) => predict_mc(source, h, records, vocab, settings),
            Head::Seq(h) => predict_seq(source, h, records, vocab, settings),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean loss over the batch.
    pub loss: f64,
}

pub fn step_log_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for l in logs {
        out.push_str(&format!("{},{:e},{:.10}\n", l.step, l.lr, l.loss));
    }
    out
}

/// Mean batch loss per epoch.
pub fn epoch_mean_losses(logs: &[StepLog]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for l in logs {
        let e = sums.entry(l.epoch).or_default();
        e.0 += l.loss;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}

/// Per-fold predictions on the shared evaluation set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FoldPredictions {
    pub folds: Vec<Predictions>,
}

pub fn average_folds(fp: &FoldPredictions) -> Result<Predictions, crate::error::MetricsError> {
    ensemble_average(&fp.folds)
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub model: TrainedModel,
    pub logs: Vec<StepLog>,
    /// Predictions for the fold's held-out records (empty when k = 1).
    pub held_out: Predictions,
    pub train_examples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub kind: ModelKind,
    pub fold_predictions: FoldPredictions,
    pub folds: Vec<FoldOutcome>,
}

impl TrainOutcome {
    /// Out-of-fold predictions gathered over all folds.
    pub fn out_of_fold(&self) -> Predictions {
        self.folds.iter().flat_map(|f| f.held_out.clone()).collect()
    }
}

pub fn qa_key(id: &str) -> String {
    format!("qa:{id}")
}

pub fn seq_key(id: &str) -> String {
    format!("seq:{id}")
}

pub fn mc_key(id: &str, choice: usize) -> String {
    format!("mc:{id}:{choice}")
}

/// Every `(key, input)` the given formulation reads for `record`, at
/// inference. Used to export states for the external-embedding path.
pub fn state_inputs(
    kind: ModelKind,
    record: &GapRecord,
    vocab: &Vocab,
    settings: &PipelineSettings,
) -> Result<Vec<(String, EncodedInput)>, ModelError> {
    Ok(match kind {
        ModelKind::Qa => {
            match build_qa_example(record, vocab, settings.window, settings.max_seq_len, BuildMode::Inference)? {
                QaBuild::Example(ex) => vec![(qa_key(&record.id), ex.encoded)],
                QaBuild::Skip => vec![],
            }
        }
        ModelKind::Mc => {
            let ex = build_mc_example(record, vocab, settings.max_seq_len)?;
            ex.choice_inputs.into_iter().enumerate().map(|(k, e)| (mc_key(&record.id, k), e)).collect()
        }
        ModelKind::Seq => vec![(seq_key(&record.id), build_seq_example(record, vocab, settings.max_seq_len)?.encoded)],
    })
}

/// Run `encoder` over every input of `kind` for `records` and keep the
/// states at 32-bit precision.
pub fn export_states(
    encoder: &EncoderParams,
    kind: ModelKind,
    records: &[GapRecord],
    vocab: &Vocab,
    settings: &PipelineSettings,
) -> Result<EmbeddingStore, TrainError> {
    let mut store = EmbeddingStore::new(encoder.hidden());
    for r in records {
        for (key, input) in state_inputs(kind, r, vocab, settings)? {
            store.insert_states(key, &encoder.forward(&input)?)?;
        }
    }
    Ok(store)
}

/// One formulation's training-time behaviour.
trait Task {
    type Example;
    type Head: Parameters;

    fn example(&self, record: &GapRecord) -> Result<Option<Self::Example>, ModelError>;
    fn inputs<'e>(&self, ex: &'e Self::Example) -> Vec<(String, &'e EncodedInput)>;
    fn init_head(&self, hidden: usize, rng: &mut ChaCha8Rng) -> Self::Head;
    /// Loss and its gradient with respect to the head and to each input's states.
    fn loss_grad(
        &self,
        ex: &Self::Example,
        states: &[TokenStates],
        head: &Self::Head,
        grads: &mut Self::Head,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Array2<f64>>), ModelError>;
    fn wrap(head: Self::Head) -> Head;
}

struct QaTask<'a> {
    vocab: &'a Vocab,
    settings: &'a PipelineSettings,
}

impl Task for QaTask<'_> {
    type Example = QaExample;
    type Head = QaHead;

    fn example(&self, record: &GapRecord) -> Result<Option<QaExample>, ModelError> {
        let s = self.settings;
        match build_qa_example(record, self.vocab, s.window, s.max_seq_len, BuildMode::Training) {
            Ok(QaBuild::Example(ex)) => Ok(Some(ex)),
            Ok(QaBuild::Skip) => Ok(None),
            Err(ModelError::AnswerTruncated(id)) => {
                log::warn!("skipping {id}: answer lies beyond max_seq_len");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn inputs<'e>(&self, ex: &'e QaExample) -> Vec<(String, &'e EncodedInput)> {
        vec![(qa_key(&ex.record_id), &ex.encoded)]
    }

    fn init_head(&self, hidden: usize, rng: &mut ChaCha8Rng) -> QaHead {
        QaHead::init(hidden, rng)
    }

    fn loss_grad(
        &self,
        ex: &QaExample,
        states: &[TokenStates],
        head: &QaHead,
        grads: &mut QaHead,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Array2<f64>>), ModelError> {
        let span = ex.answer_span.ok_or_else(|| ModelError::AnswerTruncated(ex.record_id.clone()))?;
        let logits = qa_forward(&states[0], head);
        let (loss, d_logits) = qa_loss_grad(&logits, span);
        Ok((loss, vec![qa_head_backward(&states[0], head, &d_logits, grads)]))
    }

    fn wrap(head: QaHead) -> Head {
        Head::Qa(head)
    }
}

struct McTask<'a> {
    vocab: &'a Vocab,
    settings: &'a PipelineSettings,
}

impl Task for McTask<'_> {
    type Example = McExample;
    type Head = McHead;

    fn example(&self, record: &GapRecord) -> Result<Option<McExample>, ModelError> {
        build_mc_example(record, self.vocab, self.settings.max_seq_len).map(Some)
    }

    fn inputs<'e>(&self, ex: &'e McExample) -> Vec<(String, &'e EncodedInput)> {
        ex.choice_inputs.iter().enumerate().map(|(k, e)| (mc_key(&ex.record_id, k), e)).collect()
    }

    fn init_head(&self, hidden: usize, rng: &mut ChaCha8Rng) -> McHead {
        McHead::init(hidden, rng)
    }

    fn loss_grad(
        &self,
        ex: &McExample,
        states: &[TokenStates],
        head: &McHead,
        grads: &mut McHead,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Array2<f64>>), ModelError> {
        let st = [&states[0], &states[1], &states[2]];
        let probs = mc_forward(st, head);
        let loss = mc_loss(&probs, ex.gold_choice);
        Ok((loss, mc_backward(st, head, &probs, ex.gold_choice, grads).to_vec()))
    }

    fn wrap(head: McHead) -> Head {
        Head::Mc(head)
    }
}

struct SeqTask<'a> {
    vocab: &'a Vocab,
    settings: &'a PipelineSettings,
}

impl Task for SeqTask<'_> {
    type Example = SeqExample;
    type Head = SeqHead;

    fn example(&self, record: &GapRecord) -> Result<Option<SeqExample>, ModelError> {
        build_seq_example(record, self.vocab, self.settings.max_seq_len).map(Some)
    }

    fn inputs<'e>(&self, ex: &'e SeqExample) -> Vec<(String, &'e EncodedInput)> {
        vec![(seq_key(&ex.record_id), &ex.encoded)]
    }

    fn init_head(&self, hidden: usize, rng: &mut ChaCha8Rng) -> SeqHead {
        SeqHead::init(hidden, self.settings.seq_hidden_units, rng)
    }

    fn loss_grad(
        &self,
        ex: &SeqExample,
        states: &[TokenStates],
        head: &SeqHead,
        grads: &mut SeqHead,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Array2<f64>>), ModelError> {
        let dropout = Dropout { rate: self.settings.seq_dropout, rng };
        let cache = seq_forward_cached(&states[0], &ex.spans, head, Some(dropout))?;
        let loss = seq_loss(&cache.probs, ex.gold);
        Ok((loss, vec![seq_backward(&states[0], &cache, head, ex.gold, grads)]))
    }

    fn wrap(head: SeqHead) -> Head {
        Head::Seq(head)
    }
}

struct FoldRun {
    encoder: Option<EncoderParams>,
    head: Head,
    logs: Vec<StepLog>,
    examples: usize,
}

fn train_fold<T: Task>(
    task: &T,
    backbone: Backbone<'_>,
    train_records: &[&GapRecord],
    fold: usize,
    config: &TrainerConfig,
) -> Result<FoldRun, TrainError> {
    let mut examples = Vec::new();
    for r in train_records {
        if let Some(ex) = task.example(r)? {
            examples.push(ex);
        }
    }
    if examples.is_empty() {
        return Err(TrainError::EmptyFold(fold));
    }
    let (mut encoder, hidden) = match backbone {
        Backbone::Trainable(cfg) => {
            let enc = init_params(cfg)?;
            let h = enc.hidden();
            (Some(enc), h)
        }
        Backbone::External(store) => (None, store.hidden()),
    };
    let mut head = task.init_head(hidden, &mut seed::rng(config.seed, &format!("head-init:{fold}")));
    let mut dropout_rng = seed::rng(config.seed, &format!("dropout:{fold}"));

    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let schedule = config.schedule_for(examples.len());
    let mut joint_state = encoder.as_ref().map(|e| AdamState::new(&Joint { first: e.clone(), second: head.clone() }));
    let mut head_state = AdamState::new(&head);
    let mut logs = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(config.seed, &format!("shuffle:{fold}:{epoch}")));
        for batch in order.chunks(config.batch_size) {
            let mut enc_grads = encoder.as_ref().map(Parameters::zeros_like);
            let mut head_grads = head.zeros_like();
            let mut loss_sum = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let mut states = Vec::new();
                let mut caches = Vec::new();
                for (key, input) in task.inputs(ex) {
                    match (&encoder, backbone) {
                        (Some(enc), _) => {
                            let (s, c) = enc.forward_cached(input)?;
                            states.push(s);
                            caches.push(c);
                        }
                        (None, Backbone::External(store)) => states.push(store.states(&key, input)?),
                        (None, Backbone::Trainable(_)) => unreachable!("trainable backbone always has an encoder"),
                    }
                }
                let (loss, d_states) = task.loss_grad(ex, &states, &head, &mut head_grads, &mut dropout_rng)?;
                loss_sum += loss;
                if let (Some(enc), Some(g)) = (&encoder, enc_grads.as_mut()) {
                    for (c, d) in caches.iter().zip(&d_states) {
                        enc.backward(c, d, g);
                    }
                }
            }
            let n = batch.len() as f64;
            let loss = loss_sum / n;
            if !loss.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            let lr = schedule.lr(step, total_steps, config.learning_rate);
            head_grads.scale(1.0 / n);
            match (encoder.take(), enc_grads, joint_state.as_mut()) {
                (Some(enc), Some(mut eg), Some(state)) => {
                    eg.scale(1.0 / n);
                    let mut grads = Joint { first: eg, second: head_grads };
                    if let Some(c) = config.clip_norm {
                        clip_grad_norm(&mut grads, c);
                    }
                    let mut params = Joint { first: enc, second: head };
                    adam_step(&mut params, &grads, state, &config.adam, lr)?;
                    encoder = Some(params.first);
                    head = params.second;
                }
                _ => {
                    if let Some(c) = config.clip_norm {
                        clip_grad_norm(&mut head_grads, c);
                    }
                    adam_step(&mut head, &head_grads, &mut head_state, &config.adam, lr)?;
                }
            }
            logs.push(StepLog { epoch, step, lr, loss });
            step += 1;
        }
        let means = epoch_mean_losses(&logs);
        log::info!("fold {fold} epoch {} mean loss {:.6}", epoch + 1, means.last().copied().unwrap_or(f64::NAN));
    }
    Ok(FoldRun { encoder, head: T::wrap(head), logs, examples: examples.len() })
}

/// Train one model per fold of `folds` and predict `eval_records` with each.
pub fn train(
    kind: ModelKind,
    backbone: Backbone<'_>,
    vocab: &Vocab,
    records: &[GapRecord],
    folds: &FoldPlan,
    eval_records: &[GapRecord],
    config: &TrainerConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let settings = &config.pipeline;
    let mut outcome = TrainOutcome { kind, fold_predictions: FoldPredictions::default(), folds: Vec::new() };
    for fold in 0..folds.k() {
        let train_records: Vec<&GapRecord> = records.iter().filter(|r| folds.is_training(&r.id, fold)).collect();
        let held_out: Vec<GapRecord> =
            records.iter().filter(|r| folds.k() > 1 && folds.is_held_out(&r.id, fold)).cloned().collect();
        let run = match kind {
            ModelKind::Qa => train_fold(&QaTask { vocab, settings }, backbone, &train_records, fold, config)?,
            ModelKind::Mc => train_fold(&McTask { vocab, settings }, backbone, &train_records, fold, config)?,
            ModelKind::Seq => train_fold(&SeqTask { vocab, settings }, backbone, &train_records, fold, config)?,
        };
        let external = match backbone {
            Backbone::External(s) => Some(s),
            Backbone::Trainable(_) => None,
        };
        let calibration = match &run.head {
            Head::Qa(h) => {
                let source: &dyn StateSource = match (&run.encoder, external) {
                    (Some(e), _) => e,
                    (None, Some(s)) => s,
                    (None, None) => unreachable!("a backbone always supplies states"),
                };
                let owned: Vec<GapRecord> = train_records.iter().map(|r| (*r).clone()).collect();
                let (features, labels) = qa_features(source, h, &owned, vocab, settings)?;
                Some(fit_span_lr(&features, &labels, settings.lr_c)?)
            }
            _ => None,
        };
        let model = TrainedModel { encoder: run.encoder, head: run.head, calibration };
        let eval = model.predict(external, eval_records, vocab, settings)?;
        let held = model.predict(external, &held_out, vocab, settings)?;
        outcome.fold_predictions.folds.push(eval);
        outcome.folds.push(FoldOutcome { fold, model, logs: run.logs, held_out: held, train_examples: run.examples });
    }
    Ok(outcome)
}

/// Pooled QA features and gold labels for `records` (all classes included).
pub fn qa_features(
    source: &dyn StateSource,
    head: &QaHead,
    records: &[GapRecord],
    vocab: &Vocab,
    settings: &PipelineSettings,
) -> Result<(Vec<PooledFeatures>, Vec<Label>), TrainError> {
    let mut features = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        features.push(qa_record_features(source, head, r, vocab, settings)?);
        labels.push(gold_label(r)?);
    }
    Ok((features, labels))
}

fn qa_record_features(
    source: &dyn StateSource,
    head: &QaHead,
    record: &GapRecord,
    vocab: &Vocab,
    settings: &PipelineSettings,
) -> Result<PooledFeatures, TrainError> {
    let QaBuild::Example(ex) =
        build_qa_example(record, vocab, settings.window, settings.max_seq_len, BuildMode::Inference)?
    else {
        unreachable!("inference mode never skips");
    };
    let logits = qa_forward(&source.states(&qa_key(&record.id), &ex.encoded)?, head);
    Ok(pooled_features_with_missing(&logits, ex.a_span, ex.b_span)?)
}

pub fn predict_qa(
    source: &dyn StateSource,
    head: &QaHead,
    lr: &LrModel,
    records: &[GapRecord],
    vocab: &Vocab,
    settings: &PipelineSettings,
) -> Result<Predictions, TrainError> {
    let mut out = Predictions::new();
    for r in records {
        let f = qa_record_features(source, head, r, vocab, settings)?;
        out.insert(r.id.clone(), qa_probabilities(lr, &f));
    }
    Ok(out)
}

pub fn predict_mc(
    source: &dyn StateSource,
    head: &McHead,
    records: &[GapRecord],
    vocab: &Vocab,
    settings: &PipelineSettings,
) -> Result<Predictions, TrainError> {
    let mut out = Predictions::new();
    for r in records {
        let ex = build_mc_example(r, vocab, settings.max_seq_len)?;
        let mut states = Vec::with_capacity(3);
        for (k, input) in ex.choice_inputs.iter().enumerate() {
            states.push(source.states(&mc_key(&r.id, k), input)?);
        }
        out.insert(r.id.clone(), mc_forward([&states[0], &states[1], &states[2]], head));
    }
    Ok(out)
}

pub fn predict_seq(
    source: &dyn StateSource,
    head: &SeqHead,
    records: &[GapRecord],
    vocab: &Vocab,
    settings: &PipelineSettings,
) -> Result<Predictions, TrainError> {
    let mut out = Predictions::new();
    for r in records {
        let ex = build_seq_example(r, vocab, settings.max_seq_len)?;
        let states = source.states(&seq_key(&r.id), &ex.encoded)?;
        out.insert(r.id.clone(), seq_forward(&states, &ex.spans, head, None)?);
    }
    Ok(out)
}

/// Fraction of records whose argmax prediction equals the gold label.
pub fn label_accuracy(preds: &Predictions, records: &[GapRecord]) -> Result<f64, TrainError> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for r in records {
        let p: &ProbTriple = preds
            .get(&r.id)
            .ok_or_else(|| crate::error::MetricsError::CoverageMismatch(format!("missing prediction for {}", r.id)))?;
        if crate::metrics::argmax_label(p) == gold_label(r)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}
