//! Training: the regeneration loss (teacher-forced cross-entropy of the
//! decoder over an injected prefix), the QA retrieval loss (masked to the
//! answer tokens), AdamW over the adapter tensors only, the warmup
//! schedule, and the deterministic training loop.
//!
//! Base-LM fitting lives here too: the desk-scale stand-in for "the frozen
//! LLM" has to come from somewhere, so the toy transformer is first fitted
//! as a plain next-token model, then frozen for all compressor phases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterParams, AdapterSlot, AdapterVars};
use crate::compressor::{validate_compress_inputs, CompressVariant};
use crate::data::{batch_indices, Split};
use crate::model::{build_forward, InputSegment, ModelParams, ModelVars};
use crate::numerics::{Graph, Real, Reduction, ScalarFn, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// What the decoder is conditioned on during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainVariant {
    /// KV prefix injected into decoder attention.
    Kv,
    /// Embedding rows as decoder input slots (baseline).
    Embed,
    /// No compression: adapters fine-tuned on full-context prompts (the
    /// instructed gold standard).
    Full,
}

impl TrainVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainVariant::Kv => "kv",
            TrainVariant::Embed => "embed",
            TrainVariant::Full => "full",
        }
    }

    pub fn compress_variant(self) -> Option<CompressVariant> {
        match self {
            TrainVariant::Kv => Some(CompressVariant::Kv),
            TrainVariant::Embed => Some(CompressVariant::Embed),
            TrainVariant::Full => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub variant: TrainVariant,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
    pub k: usize,
    /// Dev-loss checkpoint interval in steps (0 disables).
    pub eval_every: usize,
}

impl TrainConfig {
    /// Pretraining defaults: warm-up 300, batch 4, peak 1e-4, AdamW.
    pub fn pretrain(k: usize) -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            variant: TrainVariant::Kv,
            total_steps: 2000,
            warmup_steps: 300,
            peak_lr: 1e-4,
            batch_size: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            k,
            eval_every: 0,
        }
    }

    /// Fine-tuning defaults: same shape, peak 5e-5.
    pub fn finetune(k: usize) -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            peak_lr: 5e-5,
            ..TrainConfig::pretrain(k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps && self.total_steps > 0 {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.phase == Phase::Pretrain && self.variant == TrainVariant::Full {
            return Err(Error::Config(
                "pretraining has no full-context variant; it exists only for QA fine-tuning".into(),
            ));
        }
        Ok(())
    }
}

/// One QA training example, already tokenized. For the full-context
/// variant, `question` holds the rendered prompt and `context` is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct QaExample {
    pub context: Vec<u32>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

pub enum TrainSet {
    Pretrain(Vec<Vec<u32>>),
    Finetune(Vec<QaExample>),
}

impl TrainSet {
    pub fn len(&self) -> usize {
        match self {
            TrainSet::Pretrain(v) => v.len(),
            TrainSet::Finetune(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn phase(&self) -> Phase {
        match self {
            TrainSet::Pretrain(_) => Phase::Pretrain,
            TrainSet::Finetune(_) => Phase::Finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

// ── loss graphs ──────────────────────────────────────────────────────

pub(crate) struct BuiltLoss {
    pub loss: Var,
    pub adapter_vars: Vec<Var>,
    /// Final normed hidden states of the decoder pass (exposed so tests
    /// can construct heads that drive the loss to zero).
    #[cfg_attr(not(test), allow(dead_code))]
    pub decoder_hidden: Var,
}

/// Regeneration loss: compress the text, then teacher-force the frozen
/// decoder over ([BOS], T) with targets (T, [EOS]), mean over tokens.
pub(crate) fn pretrain_loss_on_graph<F: Real>(
    g: &mut Graph<F>,
    params: &ModelParams,
    adapters: &AdapterParams,
    text: &[u32],
    k: usize,
    variant: TrainVariant,
    over: Option<(AdapterSlot, Var)>,
) -> Result<BuiltLoss> {
    if variant == TrainVariant::Full {
        return Err(Error::Config("pretraining has no full-context variant".into()));
    }
    validate_compress_inputs(params, adapters, text, k)?;
    let config = &params.config;
    let l = text.len();
    let mv = ModelVars::insert(g, params);
    let av = AdapterVars::insert_with_override(g, adapters, over)?;
    let enc = build_forward(
        g,
        &mv,
        Some(&av),
        config,
        &[InputSegment::BaseTokens(text), InputSegment::CompressedTokens(k)],
        0,
        None,
        false,
    )?;

    let mut dec_input = vec![config.bos_id];
    dec_input.extend_from_slice(text);
    let mut targets: Vec<usize> = text.iter().map(|&t| t as usize).collect();
    targets.push(config.eos_id as usize);

    let (loss, hidden) = match variant {
        TrainVariant::Kv => {
            let mut prefix = Vec::with_capacity(config.n_layers);
            for (kv, vv) in &enc.layer_kv {
                let ks = g.slice_rows(*kv, l, k)?;
                let vs = g.slice_rows(*vv, l, k)?;
                prefix.push((ks, vs));
            }
            let dec = build_forward(
                g,
                &mv,
                None,
                config,
                &[InputSegment::BaseTokens(&dec_input)],
                l + k,
                Some((&prefix, k)),
                true,
            )?;
            let logits = dec.logits.expect("logits requested");
            (g.cross_entropy(logits, &targets, Reduction::Mean)?, dec.hidden)
        }
        TrainVariant::Embed => {
            let rows = g.slice_rows(enc.hidden, l, k)?;
            let bos = [config.bos_id];
            let mut segs = vec![InputSegment::Rows(rows)];
            match av.regen_trigger {
                Some(tv) => segs.push(InputSegment::Rows(tv)),
                None => segs.push(InputSegment::BaseTokens(&bos)),
            }
            segs.push(InputSegment::BaseTokens(text));
            let dec = build_forward(g, &mv, None, config, &segs, 0, None, true)?;
            let logits_all = dec.logits.expect("logits requested");
            let logits = g.slice_rows(logits_all, k, l + 1)?;
            (g.cross_entropy(logits, &targets, Reduction::Mean)?, dec.hidden)
        }
        TrainVariant::Full => unreachable!("rejected above"),
    };
    Ok(BuiltLoss {
        loss,
        adapter_vars: av.vars_in_named_order(),
        decoder_hidden: hidden,
    })
}

/// Retrieval loss: cross-entropy over the answer tokens plus [EOS],
/// conditioned on (prefix, Q, a_<j); no loss lands on question tokens.
pub(crate) fn finetune_loss_on_graph<F: Real>(
    g: &mut Graph<F>,
    params: &ModelParams,
    adapters: &AdapterParams,
    example: &QaExample,
    k: usize,
    variant: TrainVariant,
    over: Option<(AdapterSlot, Var)>,
) -> Result<BuiltLoss> {
    let config = &params.config;
    let (question, answer) = (&example.question, &example.answer);
    if question.is_empty() || answer.is_empty() {
        return Err(Error::Contract("QA loss needs non-empty question and answer".into()));
    }
    let (m, n) = (question.len(), answer.len());
    let mut qa: Vec<u32> = question.clone();
    qa.extend_from_slice(answer);
    let mut targets: Vec<usize> = answer.iter().map(|&t| t as usize).collect();
    targets.push(config.eos_id as usize);

    let mv = ModelVars::insert(g, params);
    let av = AdapterVars::insert_with_override(g, adapters, over)?;

    let (loss, hidden) = match variant {
        TrainVariant::Kv => {
            validate_compress_inputs(params, adapters, &example.context, k)?;
            let l = example.context.len();
            let enc = build_forward(
                g,
                &mv,
                Some(&av),
                config,
                &[
                    InputSegment::BaseTokens(&example.context),
                    InputSegment::CompressedTokens(k),
                ],
                0,
                None,
                false,
            )?;
            let mut prefix = Vec::with_capacity(config.n_layers);
            for (kv, vv) in &enc.layer_kv {
                let ks = g.slice_rows(*kv, l, k)?;
                let vs = g.slice_rows(*vv, l, k)?;
                prefix.push((ks, vs));
            }
            let dec = build_forward(
                g,
                &mv,
                None,
                config,
                &[InputSegment::BaseTokens(&qa)],
                l + k,
                Some((&prefix, k)),
                true,
            )?;
            let logits_all = dec.logits.expect("logits requested");
            let logits = g.slice_rows(logits_all, m - 1, n + 1)?;
            (g.cross_entropy(logits, &targets, Reduction::Mean)?, dec.hidden)
        }
        TrainVariant::Embed => {
            validate_compress_inputs(params, adapters, &example.context, k)?;
            let l = example.context.len();
            let enc = build_forward(
                g,
                &mv,
                Some(&av),
                config,
                &[
                    InputSegment::BaseTokens(&example.context),
                    InputSegment::CompressedTokens(k),
                ],
                0,
                None,
                false,
            )?;
            let rows = g.slice_rows(enc.hidden, l, k)?;
            let dec = build_forward(
                g,
                &mv,
                None,
                config,
                &[InputSegment::Rows(rows), InputSegment::BaseTokens(&qa)],
                0,
                None,
                true,
            )?;
            let logits_all = dec.logits.expect("logits requested");
            let logits = g.slice_rows(logits_all, k + m - 1, n + 1)?;
            (g.cross_entropy(logits, &targets, Reduction::Mean)?, dec.hidden)
        }
        TrainVariant::Full => {
            // Adapters ride the model itself here; there is no encoder.
            let dec = build_forward(
                g,
                &mv,
                Some(&av),
                config,
                &[InputSegment::BaseTokens(&qa)],
                0,
                None,
                true,
            )?;
            let logits_all = dec.logits.expect("logits requested");
            let logits = g.slice_rows(logits_all, m - 1, n + 1)?;
            (g.cross_entropy(logits, &targets, Reduction::Mean)?, dec.hidden)
        }
    };
    Ok(BuiltLoss {
        loss,
        adapter_vars: av.vars_in_named_order(),
        decoder_hidden: hidden,
    })
}

/// Value of the regeneration loss at the current parameters.
pub fn pretrain_loss(
    params: &ModelParams,
    adapters: &AdapterParams,
    text: &[u32],
    k: usize,
    variant: TrainVariant,
) -> Result<f32> {
    let mut g = Graph::<f32>::new();
    let built = pretrain_loss_on_graph(&mut g, params, adapters, text, k, variant, None)?;
    let v = g.value(built.loss).data[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("pretrain loss is not finite".into()));
    }
    Ok(v)
}

/// Value of the QA retrieval loss at the current parameters.
pub fn finetune_loss(
    params: &ModelParams,
    adapters: &AdapterParams,
    example: &QaExample,
    k: usize,
    variant: TrainVariant,
) -> Result<f32> {
    let mut g = Graph::<f32>::new();
    let built = finetune_loss_on_graph(&mut g, params, adapters, example, k, variant, None)?;
    let v = g.value(built.loss).data[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("finetune loss is not finite".into()));
    }
    Ok(v)
}

/// Scalar function wrapping the full pretraining loss with one adapter
/// tensor spliced in, for finite-difference checks.
pub struct PretrainLossFn {
    pub params: ModelParams,
    pub adapters: AdapterParams,
    pub text: Vec<u32>,
    pub k: usize,
    pub variant: TrainVariant,
    pub slot: AdapterSlot,
}

impl ScalarFn for PretrainLossFn {
    fn eval<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        pretrain_loss_on_graph(
            g,
            &self.params,
            &self.adapters,
            &self.text,
            self.k,
            self.variant,
            Some((self.slot, x)),
        )
        .map(|b| b.loss)
    }
}

/// As [`PretrainLossFn`] for the QA loss.
pub struct FinetuneLossFn {
    pub params: ModelParams,
    pub adapters: AdapterParams,
    pub example: QaExample,
    pub k: usize,
    pub variant: TrainVariant,
    pub slot: AdapterSlot,
}

impl ScalarFn for FinetuneLossFn {
    fn eval<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        finetune_loss_on_graph(
            g,
            &self.params,
            &self.adapters,
            &self.example,
            self.k,
            self.variant,
            Some((self.slot, x)),
        )
        .map(|b| b.loss)
    }
}

// ── optimizer ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEntry {
    pub name: String,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// AdamW first/second moments, one entry per trainable tensor in named
/// order, plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    step: usize,
    entries: Vec<MomentEntry>,
}

impl OptimizerState {
    pub fn new(adapters: &AdapterParams) -> Self {
        OptimizerState {
            step: 0,
            entries: adapters
                .named_tensors()
                .into_iter()
                .map(|(name, t)| MomentEntry {
                    name,
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                })
                .collect(),
        }
    }

    fn new_for_shapes(shapes: &[(String, usize)]) -> Self {
        OptimizerState {
            step: 0,
            entries: shapes
                .iter()
                .map(|(name, n)| MomentEntry {
                    name: name.clone(),
                    m: vec![0.0; *n],
                    v: vec![0.0; *n],
                })
                .collect(),
        }
    }

    pub fn from_parts(step: usize, entries: Vec<MomentEntry>) -> Self {
        OptimizerState { step, entries }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn entries(&self) -> &[MomentEntry] {
        &self.entries
    }
}

/// Linear warmup to the peak, constant afterwards.
pub fn lr_at_step(step: usize, config: &TrainConfig) -> f32 {
    warmup_lr(step, config.warmup_steps, config.peak_lr)
}

fn warmup_lr(step: usize, warmup: usize, peak: f32) -> f32 {
    if warmup > 0 && step < warmup {
        peak * step as f32 / warmup as f32
    } else {
        peak
    }
}

fn adamw_apply(
    tensors: Vec<(String, &mut Tensor)>,
    state: &mut OptimizerState,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
) -> Result<()> {
    if tensors.len() != state.entries.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, update got {}",
            state.entries.len(),
            tensors.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for ((name, tensor), entry) in tensors.into_iter().zip(&mut state.entries) {
        let grad = tensor
            .grad
            .take()
            .ok_or_else(|| Error::State(format!("missing gradient for {name}")))?;
        if grad.len() != tensor.data.len() {
            return Err(Error::State(format!("gradient shape mismatch for {name}")));
        }
        for i in 0..grad.len() {
            let g = grad[i];
            entry.m[i] = beta1 * entry.m[i] + (1.0 - beta1) * g;
            entry.v[i] = beta2 * entry.v[i] + (1.0 - beta2) * g * g;
            let m_hat = entry.m[i] / bc1;
            let v_hat = entry.v[i] / bc2;
            let p = tensor.data[i];
            tensor.data[i] = p - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p);
        }
    }
    Ok(())
}

/// Decoupled-weight-decay Adam over the adapter tensors only; the base
/// model is never touched.
pub fn adamw_step(
    adapters: &mut AdapterParams,
    state: &mut OptimizerState,
    lr: f32,
    config: &TrainConfig,
) -> Result<()> {
    adamw_apply(
        adapters.named_tensors_mut(),
        state,
        lr,
        config.beta1,
        config.beta2,
        config.eps,
        config.weight_decay,
    )
}

// ── training loops ───────────────────────────────────────────────────

fn example_loss_and_grads(
    params: &ModelParams,
    adapters: &AdapterParams,
    set: &TrainSet,
    idx: usize,
    config: &TrainConfig,
) -> Result<(f32, Vec<Option<Vec<f32>>>)> {
    let mut g = Graph::<f32>::new();
    let built = match set {
        TrainSet::Pretrain(texts) => pretrain_loss_on_graph(
            &mut g,
            params,
            adapters,
            &texts[idx],
            config.k,
            config.variant,
            None,
        )?,
        TrainSet::Finetune(examples) => finetune_loss_on_graph(
            &mut g,
            params,
            adapters,
            &examples[idx],
            config.k,
            config.variant,
            None,
        )?,
    };
    let loss = g.value(built.loss).data[0];
    g.backward(built.loss)?;
    let grads = built
        .adapter_vars
        .iter()
        .map(|v| g.grad(*v).map(|s| s.to_vec()))
        .collect();
    Ok((loss, grads))
}

fn example_loss_only(
    params: &ModelParams,
    adapters: &AdapterParams,
    set: &TrainSet,
    idx: usize,
    config: &TrainConfig,
) -> Result<f32> {
    let mut g = Graph::<f32>::new();
    let built = match set {
        TrainSet::Pretrain(texts) => pretrain_loss_on_graph(
            &mut g,
            params,
            adapters,
            &texts[idx],
            config.k,
            config.variant,
            None,
        )?,
        TrainSet::Finetune(examples) => finetune_loss_on_graph(
            &mut g,
            params,
            adapters,
            &examples[idx],
            config.k,
            config.variant,
            None,
        )?,
    };
    Ok(g.value(built.loss).data[0])
}

/// Deterministic training over the adapter tensors. The batch loss is the
/// mean of per-example token-mean losses; gradients fan out per example
/// and are reduced in example order, so results are independent of worker
/// count. Aborts on a non-finite loss.
pub fn run_training(
    params: &ModelParams,
    adapters: AdapterParams,
    train: &TrainSet,
    dev: Option<&TrainSet>,
    config: &TrainConfig,
) -> Result<(AdapterParams, Vec<TraceRow>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if train.phase() != config.phase {
        return Err(Error::Config(format!(
            "config phase {:?} does not match dataset kind",
            config.phase
        )));
    }
    if !params.is_fully_frozen() {
        return Err(Error::Contract(
            "base params must be frozen during compressor training".into(),
        ));
    }
    let mut adapters = adapters;
    let mut trace = Vec::new();
    if config.total_steps == 0 {
        return Ok((adapters, trace));
    }
    if config.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds dataset size {}",
            config.batch_size,
            train.len()
        )));
    }
    let mut state = OptimizerState::new(&adapters);
    let n_tensors = state.entries.len();
    let mut step = 0usize;
    'epochs: for epoch in 0u64.. {
        let batches = batch_indices(
            train.len(),
            config.batch_size,
            config.seed.wrapping_add(epoch.wrapping_mul(0x9E37_79B9)),
        )?;
        for batch in batches {
            if step >= config.total_steps {
                break 'epochs;
            }
            let results: Vec<Result<(f32, Vec<Option<Vec<f32>>>)>> = batch
                .par_iter()
                .map(|&i| example_loss_and_grads(params, &adapters, train, i, config))
                .collect();
            let mut acc: Vec<Vec<f32>> = adapters
                .named_tensors()
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect();
            let mut loss_sum = 0.0f64;
            for result in results {
                let (loss, grads) = result?;
                loss_sum += loss as f64;
                debug_assert_eq!(grads.len(), n_tensors);
                for (buf, grad) in acc.iter_mut().zip(grads) {
                    if let Some(gr) = grad {
                        for (a, b) in buf.iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
            }
            let batch_loss = loss_sum / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at step {step} (lr {})",
                    lr_at_step(step, config)
                )));
            }
            let inv_b = 1.0 / batch.len() as f32;
            for ((_, tensor), mut buf) in adapters.named_tensors_mut().into_iter().zip(acc) {
                for v in &mut buf {
                    *v *= inv_b;
                }
                tensor.grad = Some(buf);
            }
            let lr = lr_at_step(step, config);
            adamw_step(&mut adapters, &mut state, lr, config)?;
            trace.push(TraceRow {
                step,
                split: Split::Train,
                loss: batch_loss,
            });
            if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
                if let Some(dev) = dev {
                    let losses: Vec<Result<f32>> = (0..dev.len())
                        .into_par_iter()
                        .map(|i| example_loss_only(params, &adapters, dev, i, config))
                        .collect();
                    let mut sum = 0.0f64;
                    for l in losses {
                        sum += l? as f64;
                    }
                    trace.push(TraceRow {
                        step,
                        split: Split::Dev,
                        loss: sum / dev.len() as f64,
                    });
                }
            }
            step += 1;
        }
    }
    Ok((adapters, trace))
}

// ── base-LM fitting ──────────────────────────────────────────────────

/// Hyperparameters for fitting the toy base model as a plain next-token
/// LM before it is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            total_steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            batch_size: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

fn base_lm_loss_and_grads(
    params: &ModelParams,
    text: &[u32],
    want_grads: bool,
) -> Result<(f32, Vec<Option<Vec<f32>>>)> {
    let config = &params.config;
    let mut g = Graph::<f32>::new();
    let mv = ModelVars::insert(&mut g, params);
    let mut input = vec![config.bos_id];
    input.extend_from_slice(text);
    let mut targets: Vec<usize> = text.iter().map(|&t| t as usize).collect();
    targets.push(config.eos_id as usize);
    let built = build_forward(
        &mut g,
        &mv,
        None,
        config,
        &[InputSegment::BaseTokens(&input)],
        0,
        None,
        true,
    )?;
    let logits = built.logits.expect("logits requested");
    let loss = g.cross_entropy(logits, &targets, Reduction::Mean)?;
    let value = g.value(loss).data[0];
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = mv
        .vars_in_named_order()
        .iter()
        .map(|v| g.grad(*v).map(|s| s.to_vec()))
        .collect();
    Ok((value, grads))
}

/// Fit every base tensor with the next-token objective, then re-freeze.
/// This produces the desk-scale Θ_LLM; it never runs during compressor
/// training.
pub fn train_base_lm(
    params: &mut ModelParams,
    texts: &[Vec<u32>],
    dev: Option<&[Vec<u32>]>,
    config: &BaseTrainConfig,
) -> Result<Vec<TraceRow>> {
    if texts.is_empty() {
        return Err(Error::Contract("base training set is empty".into()));
    }
    if config.batch_size == 0 || config.batch_size > texts.len() {
        return Err(Error::Config(format!(
            "batch_size {} invalid for {} texts",
            config.batch_size,
            texts.len()
        )));
    }
    for t in texts {
        if t.is_empty() {
            return Err(Error::Contract("base training texts must be non-empty".into()));
        }
    }
    params.set_trainable(true);
    let result = base_lm_loop(params, texts, dev, config);
    params.set_trainable(false);
    result
}

fn base_lm_loop(
    params: &mut ModelParams,
    texts: &[Vec<u32>],
    dev: Option<&[Vec<u32>]>,
    config: &BaseTrainConfig,
) -> Result<Vec<TraceRow>> {
    let shapes: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let mut state = OptimizerState::new_for_shapes(&shapes);
    let mut trace = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0u64.. {
        let batches = batch_indices(
            texts.len(),
            config.batch_size,
            config.seed.wrapping_add(epoch.wrapping_mul(0x9E37_79B9)),
        )?;
        for batch in batches {
            if step >= config.total_steps {
                break 'epochs;
            }
            let results: Vec<Result<(f32, Vec<Option<Vec<f32>>>)>> = batch
                .par_iter()
                .map(|&i| base_lm_loss_and_grads(params, &texts[i], true))
                .collect();
            let mut acc: Vec<Vec<f32>> = shapes.iter().map(|(_, n)| vec![0.0; *n]).collect();
            let mut loss_sum = 0.0f64;
            for result in results {
                let (loss, grads) = result?;
                loss_sum += loss as f64;
                for (buf, grad) in acc.iter_mut().zip(grads) {
                    if let Some(gr) = grad {
                        for (a, b) in buf.iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
            }
            let batch_loss = loss_sum / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "base LM loss diverged at step {step}"
                )));
            }
            let inv_b = 1.0 / batch.len() as f32;
            for ((_, tensor), mut buf) in params.named_tensors_mut().into_iter().zip(acc) {
                for v in &mut buf {
                    *v *= inv_b;
                }
                tensor.grad = Some(buf);
            }
            let lr = warmup_lr(step, config.warmup_steps, config.peak_lr);
            adamw_apply(
                params.named_tensors_mut(),
                &mut state,
                lr,
                config.beta1,
                config.beta2,
                config.eps,
                config.weight_decay,
            )?;
            trace.push(TraceRow {
                step,
                split: Split::Train,
                loss: batch_loss,
            });
            if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
                if let Some(dev) = dev {
                    let losses: Vec<Result<(f32, _)>> = dev
                        .par_iter()
                        .map(|t| base_lm_loss_and_grads(params, t, false))
                        .collect();
                    let mut sum = 0.0f64;
                    for l in losses {
                        sum += l?.0 as f64;
                    }
                    trace.push(TraceRow {
                        step,
                        split: Split::Dev,
                        loss: sum / dev.len() as f64,
                    });
                }
            }
            step += 1;
        }
    }
    Ok(trace)
}

/// Mean base-LM loss over a text set at fixed parameters.
pub fn base_lm_eval_loss(params: &ModelParams, texts: &[Vec<u32>]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let losses: Vec<Result<(f32, _)>> = texts
        .par_iter()
        .map(|t| base_lm_loss_and_grads(params, t, false))
        .collect();
    let mut sum = 0.0f64;
    for l in losses {
        sum += l?.0 as f64;
    }
    Ok(sum / texts.len() as f64)
}
