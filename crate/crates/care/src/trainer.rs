//! Training: Adam over the adapter/memory parameters (or the base model for
//! initial knowledge injection), the reconstruction pre-training objective,
//! and the conflict-aware fine-tuning objective with its scenario-routed
//! distillation teacher.

use crate::assessor::{encode_on_tape, AssessorInput};
use crate::error::{Error, Result};
use crate::eval::{closed_book_prompt, rag_prompt};
use crate::model::{
    bind, forward, Binding, ParameterStore, Segment, Trainable,
};
use crate::tensor::{softmax_into, Scalar, Tape, TensorId};
use crate::world::{FinetuneExample, Scenario, Vocab, EOS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimizer steps; the linear schedule decays to zero here.
    pub steps: usize,
    pub warmup_ratio: f64,
    /// Weight on the distillation term of the fine-tuning objective.
    pub kd_weight: f64,
    pub use_lm: bool,
    pub use_kd: bool,
    /// 0 disables periodic validation (final validation still runs).
    pub validate_every: usize,
    /// Contexts longer than this are rejected during pre-training.
    pub max_context_tokens: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn stage1(steps: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            steps,
            warmup_ratio: 0.03,
            kd_weight: 0.0,
            use_lm: true,
            use_kd: false,
            validate_every: 300,
            max_context_tokens: 180,
            seed,
        }
    }

    pub fn stage2(steps: usize, seed: u64) -> Self {
        TrainConfig { kd_weight: 2.0, use_kd: true, ..TrainConfig::stage1(steps, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_lm && !self.use_kd {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must be in [0,1]".into()));
        }
        if self.kd_weight < 0.0 {
            return Err(Error::Config("kd_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `base`, then linear decay to zero at `total`.
pub fn lr_at(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warm = ((warmup_ratio * total as f64).ceil() as usize).min(total);
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        base * (total - step) as f64 / (total - warm).max(1) as f64
    }
}

// --- Optimizer ---------------------------------------------------------------

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step<F: Scalar>(
        &mut self,
        store: &mut ParameterStore<F>,
        grads: &BTreeMap<String, Vec<F>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name);
            if p.data.len() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    detail: format!("{name}: {} params, {} grads", p.data.len(), g.len()),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i].dbl();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.data[i] = F::fp(p.data[i].dbl() - update);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

// --- Loss construction --------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub lm: f64,
    pub kd: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, other: &LossParts) {
        self.lm += other.lm;
        self.kd += other.kd;
        self.total += other.total;
    }

    fn scale(&mut self, k: f64) {
        self.lm *= k;
        self.kd *= k;
        self.total *= k;
    }
}

pub fn recon_instruction(vocab: &Vocab) -> Result<Vec<u32>> {
    vocab.tokenize("repeat this text exactly :")
}

/// A token sequence with next-token loss applied from element `loss_from`
/// onward (`loss_from` = 1 trains every position).
#[derive(Debug, Clone)]
pub struct TokenExample {
    pub tokens: Vec<u32>,
    pub loss_from: usize,
}

/// Mean next-token cross-entropy over the masked positions.
pub fn token_lm_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    store: &ParameterStore<F>,
    ex: &TokenExample,
) -> Result<TensorId> {
    let n = ex.tokens.len();
    if ex.loss_from == 0 || ex.loss_from >= n {
        return Err(Error::Precondition(format!(
            "loss_from {} out of range for {n} tokens",
            ex.loss_from
        )));
    }
    let out = forward(tape, binding, &store.config, &[Segment::Tokens(ex.tokens.clone())], false)?;
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for j in 0..n - 1 {
        targets[j] = ex.tokens[j + 1] as usize;
        mask[j] = j + 1 >= ex.loss_from;
    }
    tape.cross_entropy(out.logits, &targets, &mask)
}

/// Reconstruction objective: compress the context to memory rows with the
/// adapted model, then score the frozen decoder's ability to regenerate
/// the context from those rows plus a fixed instruction.
pub fn recon_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    store: &ParameterStore<F>,
    instruction: &[u32],
    context: &[u32],
    max_context_tokens: usize,
) -> Result<(TensorId, LossParts)> {
    if context.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if context.len() > max_context_tokens {
        return Err(Error::Overlength { len: context.len(), max: max_context_tokens });
    }
    let k = store.config.memory_tokens;
    let mem = encode_on_tape(tape, binding, store, &AssessorInput::pretrain(context.to_vec()))?;

    let mut decode_tokens: Vec<u32> = instruction.to_vec();
    decode_tokens.extend_from_slice(context);
    decode_tokens.push(EOS);
    let segments = [Segment::Rows(mem.rows), Segment::Tokens(decode_tokens.clone())];
    let out = forward(tape, binding, &store.config, &segments, false)?;

    // Position j predicts element j+1; loss covers the context tokens and
    // the trailing end marker, not the instruction.
    let len = k + decode_tokens.len();
    let mut targets = vec![0usize; len];
    let mut mask = vec![false; len];
    for j in 0..len - 1 {
        if j + 1 >= k {
            targets[j] = decode_tokens[j + 1 - k] as usize;
            mask[j] = j + 1 >= k + instruction.len();
        }
    }
    let loss = tape.cross_entropy(out.logits, &targets, &mask)?;
    let lm = tape.scalar(loss).dbl();
    Ok((loss, LossParts { lm, kd: 0.0, total: lm }))
}

/// Per-position next-token distributions of the frozen model at the answer
/// positions, given a plain token prompt. Used as the detached distillation
/// target.
pub fn teacher_distributions<F: Scalar>(
    store: &ParameterStore<F>,
    prompt: &[u32],
    answer: &[u32],
) -> Result<Vec<F>> {
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(answer);
    let mut tape: Tape<F> = Tape::new();
    let binding = bind(&mut tape, store, Trainable::None)?;
    let out = forward(&mut tape, &binding, &store.config, &[Segment::Tokens(tokens)], false)?;
    let logits = tape.data(out.logits);
    let vocab = store.config.vocab_size;
    let mut flat = Vec::with_capacity(answer.len() * vocab);
    let mut row = vec![F::zero(); vocab];
    for i in 0..answer.len() {
        let r = prompt.len() - 1 + i;
        softmax_into(&logits[r * vocab..(r + 1) * vocab], &mut row);
        flat.extend_from_slice(&row);
    }
    Ok(flat)
}

/// Token pieces of one fine-tuning example, pre-tokenized once.
#[derive(Clone)]
pub struct FinetuneItem {
    pub question: Vec<u32>,
    pub context: Vec<u32>,
    /// Gold answer tokens with the end marker appended.
    pub answer: Vec<u32>,
    pub scenario: Scenario,
    pub prompt_head: Vec<u32>,
    pub prompt_tail: Vec<u32>,
    pub teacher_prompt: Vec<u32>,
}

pub fn prepare_finetune_item(vocab: &Vocab, ex: &FinetuneExample) -> Result<FinetuneItem> {
    let question = vocab.tokenize(&ex.question)?;
    let context = vocab.tokenize(&ex.assessor_context)?;
    let mut answer = vocab.tokenize(&ex.answer)?;
    answer.push(EOS);
    let prompt_head =
        vocab.tokenize("refer to the background document and answer the questions : background :")?;
    let prompt_tail = vocab.tokenize(&format!("question : {} the answer is :", ex.question))?;
    let teacher_prompt = match (&ex.scenario, &ex.teacher_context) {
        (Scenario::Grounded, Some(c)) => rag_prompt(vocab, &ex.question, c)?,
        (Scenario::Grounded, None) => {
            return Err(Error::Precondition(format!(
                "grounded example {} lacks a teacher context",
                ex.question_id
            )))
        }
        (Scenario::Adversarial, None) => closed_book_prompt(vocab, &ex.question)?,
        (Scenario::Adversarial, Some(_)) => {
            return Err(Error::Precondition(format!(
                "adversarial example {} must not carry a teacher context",
                ex.question_id
            )))
        }
    };
    Ok(FinetuneItem { question, context, answer, scenario: ex.scenario, prompt_head, prompt_tail, teacher_prompt })
}

/// Conflict-aware fine-tuning objective for one example:
/// answer cross-entropy through the compressed memory, plus `kd_weight`
/// times the KL from the student's answer distributions to the detached
/// scenario teacher (grounded: reads the positive context; adversarial:
/// closed book).
pub fn finetune_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    store: &ParameterStore<F>,
    item: &FinetuneItem,
    config: &TrainConfig,
) -> Result<(TensorId, LossParts)> {
    config.validate()?;
    let k = store.config.memory_tokens;
    let mem = encode_on_tape(
        tape,
        binding,
        store,
        &AssessorInput::finetune(item.question.clone(), item.context.clone()),
    )?;

    let mut tail_and_answer = item.prompt_tail.clone();
    tail_and_answer.extend_from_slice(&item.answer);
    let segments = [
        Segment::Tokens(item.prompt_head.clone()),
        Segment::Rows(mem.rows),
        Segment::Tokens(tail_and_answer.clone()),
    ];
    let out = forward(tape, binding, &store.config, &segments, false)?;

    let answer_start = item.prompt_head.len() + k + item.prompt_tail.len();
    let len = answer_start + item.answer.len();
    let a = item.answer.len();

    let mut lm_id = None;
    if config.use_lm {
        let mut targets = vec![0usize; len];
        let mut mask = vec![false; len];
        for (i, &tok) in item.answer.iter().enumerate() {
            targets[answer_start - 1 + i] = tok as usize;
            mask[answer_start - 1 + i] = true;
        }
        lm_id = Some(tape.cross_entropy(out.logits, &targets, &mask)?);
    }

    let mut kd_id = None;
    if config.use_kd {
        let teacher = teacher_distributions(store, &item.teacher_prompt, &item.answer)?;
        let answer_logits = tape.slice_rows(out.logits, answer_start - 1, a)?;
        let student = tape.softmax_rows(answer_logits)?;
        kd_id = Some(tape.kl_div_rows(student, &teacher)?);
    }

    let total_id = match (lm_id, kd_id) {
        (Some(lm), Some(kd)) => {
            let kd_scaled = tape.scale(kd, F::fp(config.kd_weight))?;
            tape.add(lm, kd_scaled)?
        }
        (Some(lm), None) => lm,
        (None, Some(kd)) => tape.scale(kd, F::fp(config.kd_weight))?,
        (None, None) => unreachable!("validated above"),
    };
    let parts = LossParts {
        lm: lm_id.map(|id| tape.scalar(id).dbl()).unwrap_or(0.0),
        kd: kd_id.map(|id| tape.scalar(id).dbl()).unwrap_or(0.0),
        total: tape.scalar(total_id).dbl(),
    };
    Ok((total_id, parts))
}

// --- Training loop -------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub lm: f64,
    pub kd: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub val: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters at the best validation loss seen.
    pub best: ParameterStore<f32>,
    pub best_val: f64,
    pub curve: Vec<CurveRow>,
    pub steps_run: usize,
    /// Step at which a non-finite loss or gradient stopped training early.
    pub diverged_at: Option<usize>,
}

use serde::Serialize;

/// Mini-batch training with a linear warmup/decay schedule, periodic
/// validation, and best-checkpoint tracking. A non-finite loss or gradient
/// stops early and keeps the best parameters seen so far.
pub fn train<B, LFn, VFn>(
    store: &ParameterStore<f32>,
    trainable: Trainable,
    examples: &[B],
    config: &TrainConfig,
    mut example_loss: LFn,
    mut validate: VFn,
) -> Result<TrainOutcome>
where
    LFn: FnMut(&mut Tape<f32>, &Binding, &ParameterStore<f32>, &B) -> Result<(TensorId, LossParts)>,
    VFn: FnMut(&ParameterStore<f32>) -> Result<f64>,
{
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Precondition("no training examples".into()));
    }
    let mut store = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut adam = Adam::new();
    let mut curve = Vec::with_capacity(config.steps);
    let mut best = store.clone();
    let mut best_val = validate(&store)?;
    let mut diverged_at = None;

    'steps: for step in 0..config.steps {
        let lr = lr_at(config.learning_rate, step, config.steps, config.warmup_ratio);
        let mut batch_grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut parts = LossParts::default();
        for _ in 0..config.batch_size {
            if cursor == examples.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;

            let mut tape: Tape<f32> = Tape::new();
            let binding = bind(&mut tape, &store, trainable)?;
            let (loss_id, p) = match example_loss(&mut tape, &binding, &store, ex) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    diverged_at = Some(step);
                    break 'steps;
                }
                Err(e) => return Err(e),
            };
            parts.add(&p);
            let grads = tape.backward(loss_id)?;
            for (name, g) in binding.name_grads(&grads) {
                let acc = batch_grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, &gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
        }
        let inv = 1.0 / config.batch_size as f32;
        let mut grad_norm = 0.0f64;
        for g in batch_grads.values_mut() {
            for gi in g.iter_mut() {
                *gi *= inv;
                grad_norm += (*gi as f64) * (*gi as f64);
            }
        }
        let grad_norm = grad_norm.sqrt();
        parts.scale(1.0 / config.batch_size as f64);
        if !grad_norm.is_finite() || !parts.total.is_finite() {
            diverged_at = Some(step);
            break;
        }
        adam.step(&mut store, &batch_grads, lr)?;

        let mut val = None;
        let last = step + 1 == config.steps;
        if (config.validate_every > 0 && (step + 1) % config.validate_every == 0) || last {
            let v = validate(&store)?;
            val = Some(v);
            if v.is_finite() && v < best_val {
                best_val = v;
                best = store.clone();
            }
        }
        curve.push(CurveRow { step, lm: parts.lm, kd: parts.kd, total: parts.total, lr, grad_norm, val });
    }

    let steps_run = curve.len();
    Ok(TrainOutcome { best, best_val, curve, steps_run, diverged_at })
}

/// Mean reconstruction loss over a held-out context set (values only).
pub fn mean_recon_loss(
    store: &ParameterStore<f32>,
    contexts: &[Vec<u32>],
    instruction: &[u32],
    max_context_tokens: usize,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::Precondition("empty validation set".into()));
    }
    let mut total = 0.0;
    for c in contexts {
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind(&mut tape, store, Trainable::None)?;
        let (_, parts) = recon_loss(&mut tape, &binding, store, instruction, c, max_context_tokens)?;
        total += parts.total;
    }
    Ok(total / contexts.len() as f64)
}

/// Mean fine-tuning loss over a held-out item set (values only).
pub fn mean_finetune_loss(
    store: &ParameterStore<f32>,
    items: &[FinetuneItem],
    config: &TrainConfig,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Precondition("empty validation set".into()));
    }
    let mut total = 0.0;
    for item in items {
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind(&mut tape, store, Trainable::None)?;
        let (_, parts) = finetune_loss(&mut tape, &binding, store, item, config)?;
        total += parts.total;
    }
    Ok(total / items.len() as f64)
}

/// Teacher-forced reconstruction accuracy: the fraction of context tokens
/// (plus the end marker) whose argmax prediction from the memory rows is
/// exact.
pub fn recon_token_accuracy(
    store: &ParameterStore<f32>,
    contexts: &[Vec<u32>],
    instruction: &[u32],
    max_context_tokens: usize,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::Precondition("empty context set".into()));
    }
    let k = store.config.memory_tokens;
    let vocab = store.config.vocab_size;
    let mut hits = 0usize;
    let mut total = 0usize;
    for context in contexts {
        if context.len() > max_context_tokens {
            return Err(Error::Overlength { len: context.len(), max: max_context_tokens });
        }
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind(&mut tape, store, Trainable::None)?;
        let mem = encode_on_tape(&mut tape, &binding, store, &AssessorInput::pretrain(context.clone()))?;
        let mut decode_tokens: Vec<u32> = instruction.to_vec();
        decode_tokens.extend_from_slice(context);
        decode_tokens.push(EOS);
        let segments = [Segment::Rows(mem.rows), Segment::Tokens(decode_tokens.clone())];
        let out = forward(&mut tape, &binding, &store.config, &segments, false)?;
        let logits = tape.data(out.logits);
        for j in 0..k + decode_tokens.len() - 1 {
            if j + 1 >= k + instruction.len() {
                let target = decode_tokens[j + 1 - k];
                let pred = crate::model::argmax(&logits[j * vocab..(j + 1) * vocab]);
                total += 1;
                if pred == target {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Mean token-level loss over plain sequences (values only).
pub fn mean_token_lm_loss(store: &ParameterStore<f32>, seqs: &[TokenExample]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Precondition("empty validation set".into()));
    }
    let mut total = 0.0;
    for ex in seqs {
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind(&mut tape, store, Trainable::None)?;
        let loss = token_lm_loss(&mut tape, &binding, store, ex)?;
        total += tape.scalar(loss) as f64;
    }
    Ok(total / seqs.len() as f64)
}

/// Verify the analytic gradients of every training objective against
/// central finite differences in f64 on a small model. Returns
/// (objective label, max relative error) per objective; errors above
/// `1e-4` indicate a backward-pass defect.
pub fn objective_gradcheck(config: &crate::model::ModelConfig, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::tensor::gradient_check;
    let base = ParameterStore::<f64>::init(config, seed)?;
    let theta_names = base.theta_names();

    let instruction = vec![1u32, 2];
    let context = vec![5u32, 9, 3];
    let item = FinetuneItem {
        question: vec![4, 6],
        context: context.clone(),
        answer: vec![7, 0],
        scenario: Scenario::Grounded,
        prompt_head: vec![11, 12],
        prompt_tail: vec![13, 14],
        teacher_prompt: vec![11, 5, 9, 3, 13],
    };
    let cases: Vec<(&'static str, TrainConfig)> = vec![
        ("reconstruction", TrainConfig::stage1(1, 0)),
        ("answer-lm", TrainConfig { use_kd: false, ..TrainConfig::stage2(1, 0) }),
        ("distillation", TrainConfig { use_lm: false, ..TrainConfig::stage2(1, 0) }),
        ("joint", TrainConfig::stage2(1, 0)),
    ];
    let mut report = Vec::new();
    for (label, cfg) in cases {
        let eval = |p: &[f64]| -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
            let mut store = base.clone();
            store.set_theta_flat(p);
            let mut tape: Tape<f64> = Tape::new();
            let binding = bind(&mut tape, &store, Trainable::Theta)?;
            let (loss_id, _) = if label == "reconstruction" {
                recon_loss(&mut tape, &binding, &store, &instruction, &context, 180)?
            } else {
                finetune_loss(&mut tape, &binding, &store, &item, &cfg)?
            };
            let val = tape.scalar(loss_id);
            let grads = binding.name_grads(&tape.backward(loss_id)?);
            Ok((val, grads))
        };

        let mut params = base.theta_flat();
        let (_, grads) = eval(&params)?;
        let mut analytic = Vec::with_capacity(params.len());
        for name in &theta_names {
            match grads.get(name) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat(0.0).take(base.get(name).data.len())),
            }
        }

        // Coordinates with near-zero gradient are excluded from the
        // relative comparison (finite-difference noise dominates there)
        // but still verified to be genuinely flat.
        let coords: Vec<usize> =
            (0..params.len()).step_by(3).filter(|&c| analytic[c].abs() > 1e-6).collect();
        if coords.len() < 8 {
            return Err(Error::Precondition(format!(
                "{label}: only {} informative gradient coordinates",
                coords.len()
            )));
        }
        let mut max_rel =
            gradient_check(|p| eval(p).map(|(v, _)| v), &mut params, &analytic, &coords, 1e-4)?;

        let flat: Vec<usize> = (0..params.len())
            .step_by(3)
            .filter(|&c| analytic[c].abs() <= 1e-6)
            .take(10)
            .collect();
        for &c in &flat {
            let orig = params[c];
            params[c] = orig + 1e-4;
            let plus = eval(&params)?.0;
            params[c] = orig - 1e-4;
            let minus = eval(&params)?.0;
            params[c] = orig;
            let fd = ((plus - minus) / 2e-4).abs();
            if fd > 1e-4 {
                max_rel = max_rel.max(fd);
            }
        }
        report.push((label, max_rel));
    }
    Ok(report)
}

pub fn write_curve_csv(rows: &[CurveRow], path: &Path, config_hash: &str) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "step,lm,kd,total,lr,grad_norm,val")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step,
            r.lm,
            r.kd,
            r.total,
            r.lr,
            r.grad_norm,
            r.val.map(|v| v.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::{generate_world, WorldConfig};

    fn micro_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 64,
            memory_tokens: 4,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }

    #[test]
    fn schedule_warms_up_and_decays_to_zero() {
        let total = 100;
        let base = 1e-3;
        let warm = 3; // ceil(0.03 * 100)
        assert!(lr_at(base, 0, total, 0.03) < base / 2.0);
        assert!((lr_at(base, warm, total, 0.03) - base).abs() / base < 0.05);
        assert!(lr_at(base, total - 1, total, 0.03) < base * 0.02);
        for s in 1..total {
            // monotone after warmup
            if s > warm {
                assert!(lr_at(base, s, total, 0.03) <= lr_at(base, s - 1, total, 0.03));
            }
        }
    }

    #[test]
    fn both_loss_terms_disabled_rejected() {
        let mut cfg = TrainConfig::stage2(10, 0);
        cfg.use_lm = false;
        cfg.use_kd = false;
        assert!(cfg.validate().is_err());
    }

    fn sample_world() -> (crate::world::FactWorld, Vec<crate::world::Passage>) {
        let cfg = WorldConfig {
            entities: 12,
            relations: 2,
            triples: 10,
            conflict_rate: 0.5,
            known_fraction: 0.5,
            distractors_per_triple: 0,
        };
        generate_world(&cfg, 64, 3).unwrap()
    }

    fn sample_items(world: &crate::world::FactWorld, corpus: &[crate::world::Passage]) -> Vec<FinetuneItem> {
        let mut examples = world.qa_examples();
        for (i, ex) in examples.iter_mut().enumerate() {
            ex.closed_book_correct = Some(i % 2 == 0);
        }
        let (set, _) = crate::world::build_finetune_set(
            &examples,
            corpus,
            crate::world::Criteria::Correct,
            crate::world::NegativeMining::Hard,
            0,
        )
        .unwrap();
        set.iter().map(|e| prepare_finetune_item(&world.vocab, e).unwrap()).collect()
    }

    #[test]
    fn total_loss_is_lm_plus_weighted_kd() {
        let (world, corpus) = sample_world();
        let items = sample_items(&world, &corpus);
        let store = ParameterStore::<f32>::init(&micro_config(), 7).unwrap();
        let cfg = TrainConfig::stage2(10, 0);
        for item in items.iter().take(4) {
            let mut tape: Tape<f32> = Tape::new();
            let binding = bind(&mut tape, &store, Trainable::Theta).unwrap();
            let (_, parts) = finetune_loss(&mut tape, &binding, &store, item, &cfg).unwrap();
            assert!((parts.total - (parts.lm + cfg.kd_weight * parts.kd)).abs() < 1e-6);

            // toggles isolate each term
            let mut lm_only = cfg.clone();
            lm_only.use_kd = false;
            let mut tape2: Tape<f32> = Tape::new();
            let b2 = bind(&mut tape2, &store, Trainable::Theta).unwrap();
            let (_, p2) = finetune_loss(&mut tape2, &b2, &store, item, &lm_only).unwrap();
            assert_eq!(p2.total, p2.lm);
            assert_eq!(p2.kd, 0.0);
            assert!((p2.lm - parts.lm).abs() < 1e-6);

            let mut kd_only = cfg.clone();
            kd_only.use_lm = false;
            let mut tape3: Tape<f32> = Tape::new();
            let b3 = bind(&mut tape3, &store, Trainable::Theta).unwrap();
            let (_, p3) = finetune_loss(&mut tape3, &b3, &store, item, &kd_only).unwrap();
            assert!((p3.total - cfg.kd_weight * p3.kd).abs() < 1e-6);
            assert_eq!(p3.lm, 0.0);
        }
    }

    #[test]
    fn finetune_gradients_touch_only_adapter_parameters() {
        let (world, corpus) = sample_world();
        let items = sample_items(&world, &corpus);
        let store = ParameterStore::<f32>::init(&micro_config(), 7).unwrap();
        let cfg = TrainConfig::stage2(10, 0);
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind(&mut tape, &store, Trainable::Theta).unwrap();
        let (loss, _) = finetune_loss(&mut tape, &binding, &store, &items[0], &cfg).unwrap();
        let grads = binding.name_grads(&tape.backward(loss).unwrap());
        assert!(!grads.is_empty());
        for name in grads.keys() {
            assert!(
                name.contains("lora") || name == "memory_bank",
                "unexpected gradient on {name}"
            );
        }
        assert!(grads.values().any(|g| g.iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn teacher_is_detached_from_adapter_state() {
        // teacher distributions ignore θ entirely: perturbing an adapter
        // weight must not change them
        let (world, corpus) = sample_world();
        let items = sample_items(&world, &corpus);
        let mut store = ParameterStore::<f32>::init(&micro_config(), 7).unwrap();
        let a = teacher_distributions::<f32>(&store, &items[0].teacher_prompt, &items[0].answer).unwrap();
        store.get_mut("layer0.attn.wq.lora_a").data[0] += 0.5;
        store.get_mut("memory_bank").data[0] += 0.5;
        let b = teacher_distributions::<f32>(&store, &items[0].teacher_prompt, &items[0].answer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initial_lm_loss_near_uniform() {
        let config = ModelConfig::toy();
        let store = ParameterStore::<f32>::init(&config, 11).unwrap();
        let ex = TokenExample { tokens: vec![5, 9, 3, 17, 400, 23, 8], loss_from: 1 };
        let loss = mean_token_lm_loss(&store, &[ex]).unwrap();
        let uniform = (config.vocab_size as f64).ln(); // ≈ 6.238
        assert!((loss - uniform).abs() < 0.3, "init loss {loss} vs uniform {uniform}");
    }

    /// End-to-end check that memory rows carry context content. The base
    /// model first learns a span-copy behaviour ("source, instruction,
    /// source again"); stage-1 training must then steer it through the
    /// memory rows alone. Two contexts share every prompt token, so
    /// perfect teacher-forced accuracy on both is impossible unless the
    /// memory distinguishes them.
    #[test]
    fn reconstruction_memory_disambiguates_contexts() {
        use rand::Rng;
        let config = micro_config();
        let store = ParameterStore::<f32>::init(&config, 5).unwrap();
        let instruction = vec![1u32, 2, 3];

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let copy_seqs: Vec<TokenExample> = (0..80)
            .map(|_| {
                let c: Vec<u32> = (0..5).map(|_| rng.gen_range(10..60)).collect();
                let mut t = c.clone();
                t.extend_from_slice(&instruction);
                t.extend_from_slice(&c);
                t.push(EOS);
                TokenExample { tokens: t, loss_from: c.len() + instruction.len() }
            })
            .collect();
        let cfg_base = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            validate_every: 0,
            ..TrainConfig::stage1(1500, 1)
        };
        let base = train(
            &store,
            Trainable::Base,
            &copy_seqs,
            &cfg_base,
            |tape, b, s, ex: &TokenExample| {
                let id = token_lm_loss(tape, b, s, ex)?;
                let v = tape.scalar(id) as f64;
                Ok((id, LossParts { lm: v, kd: 0.0, total: v }))
            },
            |s| mean_token_lm_loss(s, &copy_seqs[..8]),
        )
        .unwrap();
        assert!(base.diverged_at.is_none());
        assert!(base.best_val < 0.05, "copy pre-training stalled at {}", base.best_val);

        let contexts = vec![vec![10u32, 20, 30, 40, 50], vec![11u32, 21, 31, 41, 51]];
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            validate_every: 0,
            ..TrainConfig::stage1(800, 0)
        };
        let outcome = train(
            &base.best,
            Trainable::Theta,
            &contexts,
            &cfg,
            |tape, binding, store, c: &Vec<u32>| {
                recon_loss(tape, binding, store, &instruction, c, cfg.max_context_tokens)
            },
            |s| mean_recon_loss(s, &contexts, &instruction, cfg.max_context_tokens),
        )
        .unwrap();
        assert!(outcome.diverged_at.is_none());
        let acc = recon_token_accuracy(&outcome.best, &contexts, &instruction, 180).unwrap();
        assert_eq!(acc, 1.0, "reconstruction accuracy {acc}, loss {}", outcome.best_val);
        assert!(outcome.best_val < 0.3, "reconstruction loss stalled at {}", outcome.best_val);
    }

    #[test]
    fn training_is_deterministic() {
        let config = micro_config();
        let store = ParameterStore::<f32>::init(&config, 5).unwrap();
        let instruction = vec![1u32, 2];
        let contexts = vec![vec![10u32, 20, 30], vec![7u32, 8]];
        let cfg = TrainConfig { batch_size: 2, validate_every: 0, ..TrainConfig::stage1(20, 9) };
        let run = || {
            train(
                &store,
                Trainable::Theta,
                &contexts,
                &cfg,
                |tape, binding, store, c: &Vec<u32>| {
                    recon_loss(tape, binding, store, &instruction, c, cfg.max_context_tokens)
                },
                |s| mean_recon_loss(s, &contexts, &instruction, cfg.max_context_tokens),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.best.theta_flat(), b.best.theta_flat());
        assert_eq!(a.curve.len(), b.curve.len());
        for (ra, rb) in a.curve.iter().zip(&b.curve) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        }
    }

    /// End-to-end gradient verification of both training objectives on a
    /// one-layer model in f64: every adapter coordinate's analytic gradient
    /// is compared against central finite differences.
    #[test]
    fn objective_gradients_match_finite_differences() {
        let report = objective_gradcheck(&ModelConfig::probe(), 13).unwrap();
        assert_eq!(report.len(), 4);
        for (label, max_rel) in report {
            assert!(max_rel <= 1e-4, "{label}: max relative gradient error {max_rel}");
        }
    }
}
