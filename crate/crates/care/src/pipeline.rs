//! Pipeline orchestration: one TOML run config drives every stage
//! (worldgen → pretrain-base → probe → pretrain-assessor → build-ftdata →
//! finetune → evaluate → report), with per-stage seeds derived from a
//! master seed, idempotent artifact reuse, and a manifest recording what
//! was produced.

use crate::error::{Error, Result};
use crate::eval::{
    compute_metrics, init_records, render_csv, render_table, run_method, EvalRecord, Method,
    MetricsReport, Timing,
};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ParameterStore, Trainable};
use crate::tensor::Scalar;
use crate::trainer::{
    finetune_loss, mean_finetune_loss, mean_recon_loss, mean_token_lm_loss, prepare_finetune_item,
    recon_instruction, recon_loss, recon_token_accuracy, token_lm_loss, train, write_curve_csv,
    FinetuneItem, LossParts, TokenExample, TrainConfig, TrainOutcome,
};
use crate::world::{
    build_finetune_set, generate_extraction_qa, generate_recon_corpus, generate_world, load_jsonl, load_world,
    probe_closed_book, save_jsonl, save_world, split_validation, Criteria, FactWorld,
    FinetuneExample, NegativeMining, Passage, QAExample, Scenario, WorldConfig, EOS,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable overriding the artifact root directory.
pub const RUN_DIR_ENV: &str = "CARE_RUN_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub validate_every: usize,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams { learning_rate: 3e-3, batch_size: 8, steps: 8000, validate_every: 500 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconParams {
    pub corpus_size: usize,
    pub max_statements: usize,
    pub holdout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub validate_every: usize,
}

impl Default for ReconParams {
    fn default() -> Self {
        ReconParams {
            corpus_size: 5000,
            max_statements: 1,
            holdout: 0.1,
            learning_rate: 1e-2,
            batch_size: 16,
            steps: 2000,
            validate_every: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub validate_every: usize,
    pub kd_weight: f64,
    pub use_lm: bool,
    pub use_kd: bool,
    pub holdout: f64,
    pub criteria: Criteria,
    pub negatives: NegativeMining,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        FinetuneParams {
            learning_rate: 3e-3,
            batch_size: 8,
            steps: 3200,
            validate_every: 300,
            kd_weight: 2.0,
            use_lm: true,
            use_kd: true,
            holdout: 0.1,
            criteria: Criteria::Correct,
            negatives: NegativeMining::Hard,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    pub max_new_tokens: usize,
    pub methods: Vec<String>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            max_new_tokens: 30,
            methods: vec!["closed".into(), "rag".into(), "care".into()],
        }
    }
}

/// Base-model pre-training data mix: the knowledge subset plus a span-copy
/// task that teaches the decoder to read its prompt (reconstruction and
/// memory injection both depend on that routing).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseDataParams {
    pub copy_examples: usize,
    pub copy_max_statements: usize,
    /// Context-reading QA over pseudo-facts, so answer extraction works on
    /// facts the model has never memorized.
    pub qa_examples: usize,
    /// How many times the known-fact sequences repeat in the mix, so the
    /// synthetic curricula cannot drown out fact memorization.
    pub fact_repeats: usize,
}

impl Default for BaseDataParams {
    fn default() -> Self {
        BaseDataParams { copy_examples: 8000, copy_max_statements: 3, qa_examples: 8000, fact_repeats: 25 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub run_dir: String,
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub base: StageParams,
    pub base_data: BaseDataParams,
    pub recon: ReconParams,
    pub finetune: FinetuneParams,
    pub eval: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            run_dir: "runs/default".into(),
            model: ModelConfig::toy(),
            world: WorldConfig::default(),
            base: StageParams::default(),
            base_data: BaseDataParams::default(),
            recon: ReconParams::default(),
            finetune: FinetuneParams::default(),
            eval: EvalParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.model.validate()?;
        Ok(config)
    }

    /// Hash of the canonical JSON form, embedded in every artifact.
    /// The run directory is a location, not content, so it is excluded:
    /// the same run in two places yields identical artifacts.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.run_dir = String::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()[..16].to_string()
    }

    /// Stage seed: derived from the master seed and the stage name, so one
    /// stage can be re-run without perturbing the others.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.master_seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: Vec<StageEntry>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
}

/// Loss closure adapter for plain token sequences.
fn token_loss_adapter(
    tape: &mut crate::tensor::Tape<f32>,
    binding: &crate::model::Binding,
    store: &ParameterStore<f32>,
    ex: &TokenExample,
) -> Result<(crate::tensor::TensorId, LossParts)> {
    let id = token_lm_loss(tape, binding, store, ex)?;
    let v = tape.scalar(id).dbl();
    Ok((id, LossParts { lm: v, kd: 0.0, total: v }))
}

impl Pipeline {
    pub fn new(config: RunConfig, dir: PathBuf) -> Result<Self> {
        config.model.validate()?;
        std::fs::create_dir_all(&dir)?;
        let hash = config.hash();
        Ok(Pipeline { config, dir, hash })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn manifest_path(&self) -> PathBuf {
        self.path("manifest.json")
    }

    fn record_stage(&self, stage: &str, seed: u64, outputs: &[&str], seconds: f64) -> Result<()> {
        let mut manifest: RunManifest = match std::fs::read_to_string(self.manifest_path()) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(_) => RunManifest::default(),
        };
        manifest.config_hash = self.hash.clone();
        manifest.stages.retain(|e| e.stage != stage);
        manifest.stages.push(StageEntry {
            stage: stage.to_string(),
            seed,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            seconds,
        });
        std::fs::write(self.manifest_path(), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// True when `name` exists and its embedded hash matches this config.
    fn artifact_fresh(&self, name: &str) -> bool {
        let path = self.path(name);
        if !path.exists() {
            return false;
        }
        let hash = if name.ends_with(".ckpt") {
            load_checkpoint::<f32>(&path).map(|(_, h)| h).ok()
        } else if name.ends_with(".jsonl") {
            load_jsonl::<serde_json::Value>(&path).map(|(_, h)| h).ok()
        } else if name.ends_with(".csv") {
            std::fs::read_to_string(&path).ok().and_then(|s| {
                s.lines().next().and_then(|l| l.strip_prefix("# config_hash=").map(str::to_string))
            })
        } else {
            None
        };
        hash.as_deref() == Some(self.hash.as_str())
    }

    fn require(&self, name: &str, produced_by: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                stage: produced_by.to_string(),
            });
        }
        Ok(path)
    }

    fn load_world(&self) -> Result<FactWorld> {
        let path = self.require("world.jsonl", "worldgen")?;
        let (world, _) = load_world(&path, self.config.model.vocab_size)?;
        Ok(world)
    }

    fn load_corpus(&self) -> Result<Vec<Passage>> {
        let path = self.require("corpus.jsonl", "worldgen")?;
        let (corpus, _) = load_jsonl(&path)?;
        Ok(corpus)
    }

    // --- Stages -------------------------------------------------------------

    pub fn worldgen(&self, force: bool) -> Result<bool> {
        if !force && self.artifact_fresh("world.jsonl") && self.artifact_fresh("corpus.jsonl") {
            return Ok(false);
        }
        let t0 = Instant::now();
        let seed = self.config.stage_seed("worldgen");
        let (world, corpus) = generate_world(&self.config.world, self.config.model.vocab_size, seed)?;
        // every passage must fit the longest prompt template
        let overhead = 32;
        for p in &corpus {
            let len = world.vocab.tokenize(&p.text)?.len();
            if len + overhead > self.config.model.max_seq_len {
                return Err(Error::Config(format!(
                    "passage {} ({len} tokens) cannot fit max_seq_len {}",
                    p.id, self.config.model.max_seq_len
                )));
            }
        }
        save_world(&world, &self.path("world.jsonl"), &self.hash)?;
        save_jsonl(&corpus, &self.path("corpus.jsonl"), &self.hash)?;
        self.record_stage("worldgen", seed, &["world.jsonl", "corpus.jsonl"], t0.elapsed().as_secs_f64())?;
        Ok(true)
    }

    /// Training mix for φ: statements, closed-book QA and context-reading
    /// QA for the known split, plus generic span-copy sequences.
    fn base_sequences(&self, world: &FactWorld, corpus: &[Passage]) -> Result<Vec<TokenExample>> {
        let vocab = &world.vocab;
        let instruction = recon_instruction(vocab)?;
        let mut facts = Vec::new();
        let mut seqs = Vec::new();
        for t in world.triples.iter().filter(|t| t.known) {
            let statement = vocab.tokenize(&world.statement_text(t))?;
            let mut tokens = statement.clone();
            tokens.push(EOS);
            facts.push(TokenExample { tokens, loss_from: 1 });

            let question = world.question_text(t);
            let mut answer = vocab.tokenize(&world.answer_text(t))?;
            answer.push(EOS);

            let cb = crate::eval::closed_book_prompt(vocab, &question)?;
            let mut tokens = cb.clone();
            tokens.extend_from_slice(&answer);
            facts.push(TokenExample { tokens, loss_from: cb.len() });

            let faithful = corpus
                .iter()
                .find(|p| p.source_triple == t.id && p.kind == crate::world::PassageKind::Faithful)
                .ok_or_else(|| Error::Precondition(format!("triple {} has no faithful passage", t.id)))?;
            let rag = crate::eval::rag_prompt(vocab, &question, &faithful.text)?;
            let mut tokens = rag.clone();
            tokens.extend_from_slice(&answer);
            facts.push(TokenExample { tokens, loss_from: rag.len() });
        }
        for _ in 0..self.config.base_data.fact_repeats.max(1) {
            seqs.extend(facts.iter().cloned());
        }
        let copy_seed = self.config.stage_seed("base-copy");
        for text in generate_recon_corpus(
            world,
            self.config.base_data.copy_examples,
            self.config.base_data.copy_max_statements,
            copy_seed,
        ) {
            let c = vocab.tokenize(&text)?;
            let mut tokens = c.clone();
            tokens.extend_from_slice(&instruction);
            tokens.extend_from_slice(&c);
            tokens.push(EOS);
            seqs.push(TokenExample { tokens, loss_from: c.len() + instruction.len() });
        }
        let qa_seed = self.config.stage_seed("base-qa");
        for (context, question, ans) in
            generate_extraction_qa(world, self.config.base_data.qa_examples, qa_seed)
        {
            let rag = crate::eval::rag_prompt(vocab, &question, &context)?;
            let mut tokens = rag.clone();
            let mut answer = vocab.tokenize(&ans)?;
            answer.push(EOS);
            tokens.extend_from_slice(&answer);
            seqs.push(TokenExample { tokens, loss_from: rag.len() });
        }
        Ok(seqs)
    }

    pub fn pretrain_base(&self, force: bool) -> Result<bool> {
        if !force && self.artifact_fresh("base.ckpt") {
            return Ok(false);
        }
        let t0 = Instant::now();
        let world = self.load_world()?;
        let corpus = self.load_corpus()?;
        let seqs = self.base_sequences(&world, &corpus)?;
        let seed = self.config.stage_seed("pretrain-base");
        let init = ParameterStore::<f32>::init(&self.config.model, self.config.stage_seed("init"))?;
        let p = &self.config.base;
        let cfg = TrainConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            steps: p.steps,
            validate_every: p.validate_every,
            seed,
            ..TrainConfig::stage1(p.steps, seed)
        };
        let val_sample: Vec<TokenExample> = seqs.iter().take(32).cloned().collect();
        let outcome = train(&init, Trainable::Base, &seqs, &cfg, token_loss_adapter, |s| {
            mean_token_lm_loss(s, &val_sample)
        })?;
        self.check_divergence(&outcome, "pretrain-base")?;
        save_checkpoint(&outcome.best, &self.path("base.ckpt"), &self.hash)?;
        write_curve_csv(&outcome.curve, &self.path("base_curve.csv"), &self.hash)?;
        self.record_stage("pretrain-base", seed, &["base.ckpt", "base_curve.csv"], t0.elapsed().as_secs_f64())?;
        Ok(true)
    }

    pub fn probe(&self, force: bool) -> Result<bool> {
        if !force && self.artifact_fresh("probe.jsonl") {
            return Ok(false);
        }
        let t0 = Instant::now();
        let world = self.load_world()?;
        let base_path = self.require("base.ckpt", "pretrain-base")?;
        let (store, _) = load_checkpoint::<f32>(&base_path)?;
        let mut examples = world.qa_examples();
        probe_closed_book(&store, &mut examples, &world.vocab, self.config.eval.max_new_tokens)?;
        save_jsonl(&examples, &self.path("probe.jsonl"), &self.hash)?;
        let seed = self.config.stage_seed("probe");
        self.record_stage("probe", seed, &["probe.jsonl"], t0.elapsed().as_secs_f64())?;
        Ok(true)
    }

    /// Stage-1 result plus its held-out reconstruction accuracy.
    pub fn pretrain_assessor(&self, force: bool) -> Result<Option<f64>> {
        if !force && self.artifact_fresh("assessor.ckpt") {
            return Ok(None);
        }
        let t0 = Instant::now();
        let world = self.load_world()?;
        let base_path = self.require("base.ckpt", "pretrain-base")?;
        let (base, _) = load_checkpoint::<f32>(&base_path)?;
        let phi_before = base.phi_checksum();
        let seed = self.config.stage_seed("pretrain-assessor");
        let p = &self.config.recon;
        let texts = generate_recon_corpus(&world, p.corpus_size, p.max_statements, seed);
        let contexts: Vec<Vec<u32>> = texts.iter().map(|t| world.vocab.tokenize(t)).collect::<Result<_>>()?;
        let (train_set, val_set) = split_validation(&contexts, p.holdout, seed);
        let instruction = recon_instruction(&world.vocab)?;
        let cfg = TrainConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            steps: p.steps,
            validate_every: p.validate_every,
            seed,
            ..TrainConfig::stage1(p.steps, seed)
        };
        // full-holdout validation is too slow inside the loop; sample it
        let val_sample: Vec<Vec<u32>> = val_set.iter().take(64).cloned().collect();
        let outcome = train(
            &base,
            Trainable::Theta,
            &train_set,
            &cfg,
            |tape, binding, store, c: &Vec<u32>| {
                recon_loss(tape, binding, store, &instruction, c, cfg.max_context_tokens)
            },
            |s| mean_recon_loss(s, &val_sample, &instruction, cfg.max_context_tokens),
        )?;
        self.check_divergence(&outcome, "pretrain-assessor")?;
        if outcome.best.phi_checksum() != phi_before {
            return Err(Error::Precondition("base parameters changed during stage 1".into()));
        }
        let accuracy = recon_token_accuracy(&outcome.best, &val_set, &instruction, cfg.max_context_tokens)?;
        save_checkpoint(&outcome.best, &self.path("assessor.ckpt"), &self.hash)?;
        write_curve_csv(&outcome.curve, &self.path("recon_curve.csv"), &self.hash)?;
        self.record_stage(
            "pretrain-assessor",
            seed,
            &["assessor.ckpt", "recon_curve.csv"],
            t0.elapsed().as_secs_f64(),
        )?;
        Ok(Some(accuracy))
    }

    pub fn build_ftdata(&self, force: bool) -> Result<Option<crate::world::BuildStats>> {
        if !force && self.artifact_fresh("ftdata.jsonl") {
            return Ok(None);
        }
        let t0 = Instant::now();
        let corpus = self.load_corpus()?;
        let probe_path = self.require("probe.jsonl", "probe")?;
        let (examples, _): (Vec<QAExample>, _) = load_jsonl(&probe_path)?;
        let seed = self.config.stage_seed("build-ftdata");
        let (set, stats) = build_finetune_set(
            &examples,
            &corpus,
            self.config.finetune.criteria,
            self.config.finetune.negatives,
            seed,
        )?;
        save_jsonl(&set, &self.path("ftdata.jsonl"), &self.hash)?;
        self.record_stage("build-ftdata", seed, &["ftdata.jsonl"], t0.elapsed().as_secs_f64())?;
        Ok(Some(stats))
    }

    /// Stage 2. `scenario_filter` keeps only one scenario (objective
    /// ablations); `from_base` skips the stage-1 initialization.
    /// `out` overrides the checkpoint name (default "care.ckpt").
    pub fn finetune(&self, force: bool, options: &FinetuneOptions) -> Result<bool> {
        let out_name = options.out.as_deref().unwrap_or("care.ckpt");
        let curve_name = format!("{}_curve.csv", out_name.trim_end_matches(".ckpt"));
        if !force && self.artifact_fresh(out_name) {
            return Ok(false);
        }
        let t0 = Instant::now();
        let world = self.load_world()?;
        let init_path = if options.from_base {
            self.require("base.ckpt", "pretrain-base")?
        } else {
            self.require("assessor.ckpt", "pretrain-assessor")?
        };
        let (init, _) = load_checkpoint::<f32>(&init_path)?;
        let phi_before = init.phi_checksum();
        let data_path = self.require("ftdata.jsonl", "build-ftdata")?;
        let (set, _): (Vec<FinetuneExample>, _) = load_jsonl(&data_path)?;
        let set: Vec<FinetuneExample> = match options.scenario_filter {
            Some(s) => set.into_iter().filter(|e| e.scenario == s).collect(),
            None => set,
        };
        if set.is_empty() {
            return Err(Error::Precondition("no fine-tuning examples after filtering".into()));
        }
        let items: Vec<FinetuneItem> =
            set.iter().map(|e| prepare_finetune_item(&world.vocab, e)).collect::<Result<_>>()?;
        let seed = self.config.stage_seed("finetune");
        let p = &self.config.finetune;
        let cfg = TrainConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            steps: p.steps,
            warmup_ratio: 0.03,
            kd_weight: options.kd_weight.unwrap_or(p.kd_weight),
            use_lm: p.use_lm && !options.no_lm,
            use_kd: p.use_kd && !options.no_kd,
            validate_every: p.validate_every,
            max_context_tokens: 180,
            seed,
        };
        cfg.validate()?;
        let (train_set, val_set) = split_validation(&items, p.holdout, seed);
        let val_ref: &[FinetuneItem] = if val_set.is_empty() { &train_set } else { &val_set };
        let outcome = train(
            &init,
            Trainable::Theta,
            &train_set,
            &cfg,
            |tape, binding, store, item: &FinetuneItem| finetune_loss(tape, binding, store, item, &cfg),
            |s| mean_finetune_loss(s, val_ref, &cfg),
        )?;
        self.check_divergence(&outcome, "finetune")?;
        if outcome.best.phi_checksum() != phi_before {
            return Err(Error::Precondition("base parameters changed during stage 2".into()));
        }
        save_checkpoint(&outcome.best, &self.path(out_name), &self.hash)?;
        write_curve_csv(&outcome.curve, &self.path(&curve_name), &self.hash)?;
        self.record_stage("finetune", seed, &[out_name, &curve_name], t0.elapsed().as_secs_f64())?;
        Ok(true)
    }

    /// Run the configured methods over the world's questions and write
    /// records plus a metrics table.
    pub fn evaluate(&self, options: &EvalOptions) -> Result<(MetricsReport, Timing)> {
        let t0 = Instant::now();
        let world = match &options.world {
            Some(path) => load_world(path, self.config.model.vocab_size)?.0,
            None => self.load_world()?,
        };
        let corpus = self.load_corpus()?;
        let ckpt_name = options.checkpoint.as_deref().unwrap_or("care.ckpt");
        let methods: Vec<Method> = match &options.methods {
            Some(list) => list.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?,
            None => self.config.eval.methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?,
        };
        let needs_care = methods.contains(&Method::Care);
        let store = if needs_care {
            let (s, _) = load_checkpoint::<f32>(&self.require(ckpt_name, "finetune")?)?;
            s
        } else {
            let (s, _) = load_checkpoint::<f32>(&self.require("base.ckpt", "pretrain-base")?)?;
            s
        };
        let mut examples = world.qa_examples();
        if let Some(known) = options.known_only {
            let ids: Vec<bool> = world.triples.iter().map(|t| t.known).collect();
            examples.retain(|e| ids[e.source_triple] == known);
        }
        if examples.is_empty() {
            return Err(Error::Precondition("no questions selected for evaluation".into()));
        }
        let mut records = init_records(&examples);
        let mut timing = Timing::default();
        for method in &methods {
            let t = run_method(
                *method,
                &store,
                &world.vocab,
                &examples,
                &corpus,
                &mut records,
                self.config.eval.max_new_tokens,
            )?;
            timing.encode_secs += t.encode_secs;
            timing.generate_secs += t.generate_secs;
        }
        let records_name = options.out.as_deref().unwrap_or("eval.jsonl");
        let metrics_name = format!("{}_metrics.csv", records_name.trim_end_matches(".jsonl"));
        save_jsonl(&records, &self.path(records_name), &self.hash)?;
        let report = compute_metrics(&records);
        let csv = format!("# config_hash={}\n{}", self.hash, render_csv(&report));
        std::fs::write(self.path(&metrics_name), csv)?;
        let seed = self.config.stage_seed("evaluate");
        self.record_stage("evaluate", seed, &[records_name, &metrics_name], t0.elapsed().as_secs_f64())?;
        Ok((report, timing))
    }

    /// Pooled memory embeddings for every question's top-1 context,
    /// labelled by whether that context carries a gold span.
    pub fn dump_embeddings(&self, checkpoint: Option<&str>) -> Result<PathBuf> {
        let world = self.load_world()?;
        let corpus = self.load_corpus()?;
        let ckpt_name = checkpoint.unwrap_or("care.ckpt");
        let (store, _) = load_checkpoint::<f32>(&self.require(ckpt_name, "finetune")?)?;
        let mut records = Vec::new();
        for ex in world.qa_examples() {
            let top = crate::world::retrieve(&ex.question, &corpus, 1);
            let passage = top.first().map(|(p, _)| *p).ok_or_else(|| {
                Error::Precondition("empty retrieval corpus".into())
            })?;
            let question = world.vocab.tokenize(&ex.question)?;
            let context = world.vocab.tokenize(&passage.text)?;
            let memory = crate::assessor::encode(
                &store,
                &crate::assessor::AssessorInput::finetune(question, context),
            )?;
            records.push(crate::assessor::EmbeddingDumpRecord {
                question_id: ex.id.clone(),
                contains_answer: crate::eval::contains_answer_span(&passage.text, &ex.answers),
                pooled: crate::assessor::mean_pool(&memory),
            });
        }
        let path = self.path("embeddings.csv");
        crate::assessor::write_embedding_dump(&records, &path, &self.hash)?;
        Ok(path)
    }

    fn check_divergence(&self, outcome: &TrainOutcome, stage: &str) -> Result<()> {
        match outcome.diverged_at {
            Some(step) => {
                eprintln!("{stage}: loss became non-finite at step {step}");
                Err(Error::Diverged { step })
            }
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    pub kd_weight: Option<f64>,
    pub no_lm: bool,
    pub no_kd: bool,
    pub scenario_filter: Option<Scenario>,
    pub from_base: bool,
    pub out: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub methods: Option<Vec<String>>,
    pub checkpoint: Option<String>,
    pub out: Option<String>,
    /// Some(true): known facts only; Some(false): unknown only.
    pub known_only: Option<bool>,
    /// Alternate world file; defaults to the run directory's.
    pub world: Option<PathBuf>,
}

/// Cross-run comparison table from record files: one row per (file,
/// method) with All / Resilience / Boost columns. Mixed config hashes are
/// flagged in the header.
pub fn report(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Precondition("report needs at least one records file".into()));
    }
    let mut out = String::new();
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for path in paths {
        let (records, hash): (Vec<EvalRecord>, String) = load_jsonl(path)?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        hashes.insert(label.clone(), hash);
        rows.push((label, compute_metrics(&records)));
    }
    let distinct: Vec<&String> = {
        let mut v: Vec<&String> = hashes.values().collect();
        v.sort();
        v.dedup();
        v
    };
    if distinct.len() > 1 {
        out.push_str("WARNING: records come from different configs: ");
        out.push_str(&distinct.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "));
        out.push('\n');
    }
    out.push_str(&format!(
        "{:<28} {:<8} {:>7} {:>7} {:>7}\n",
        "run", "method", "all", "res", "boost"
    ));
    for (label, report) in &rows {
        for m in &report.methods {
            out.push_str(&format!(
                "{:<28} {:<8} {:>7} {:>7} {:>7}\n",
                label,
                m.method,
                fmt_cell(m.overall()),
                fmt_cell(m.resilience()),
                fmt_cell(m.boost()),
            ));
        }
    }
    let _ = render_table; // single-run rendering lives in the eval module
    Ok(out)
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "—".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run_config(dir: &Path) -> RunConfig {
        RunConfig {
            master_seed: 7,
            run_dir: dir.display().to_string(),
            model: ModelConfig {
                vocab_size: 128,
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 96,
                memory_tokens: 4,
                lora_rank: 4,
                lora_alpha: 8.0,
            },
            world: WorldConfig {
                entities: 12,
                relations: 2,
                triples: 10,
                conflict_rate: 0.5,
                known_fraction: 0.5,
                distractors_per_triple: 1,
            },
            base: StageParams { steps: 5, validate_every: 0, ..StageParams::default() },
            base_data: BaseDataParams { copy_examples: 10, copy_max_statements: 2, qa_examples: 10, fact_repeats: 1 },
            recon: ReconParams {
                corpus_size: 20,
                steps: 5,
                validate_every: 0,
                ..ReconParams::default()
            },
            finetune: FinetuneParams { steps: 5, validate_every: 0, ..FinetuneParams::default() },
            eval: EvalParams { max_new_tokens: 4, ..EvalParams::default() },
        }
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let err = toml::from_str::<RunConfig>("master_seed = 1\nnot_a_key = true").unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn stage_seeds_differ_by_stage_and_master() {
        let a = RunConfig { master_seed: 1, ..RunConfig::default() };
        let b = RunConfig { master_seed: 2, ..RunConfig::default() };
        assert_ne!(a.stage_seed("worldgen"), a.stage_seed("probe"));
        assert_ne!(a.stage_seed("worldgen"), b.stage_seed("worldgen"));
        assert_eq!(a.stage_seed("worldgen"), a.stage_seed("worldgen"));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 99;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn stages_are_idempotent_and_artifacts_carry_hash() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(dir.path());
        let pipeline = Pipeline::new(config, dir.path().to_path_buf()).unwrap();
        assert!(pipeline.worldgen(false).unwrap());
        assert!(!pipeline.worldgen(false).unwrap(), "second run must be a no-op");
        assert!(pipeline.worldgen(true).unwrap(), "--force re-runs");

        assert!(pipeline.pretrain_base(false).unwrap());
        assert!(!pipeline.pretrain_base(false).unwrap());
        let (_, hash) = load_checkpoint::<f32>(&pipeline.path("base.ckpt")).unwrap();
        assert_eq!(hash, pipeline.hash);

        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(pipeline.manifest_path()).unwrap()).unwrap();
        assert_eq!(manifest.config_hash, pipeline.hash);
        assert!(manifest.stages.iter().any(|s| s.stage == "worldgen"));
    }

    #[test]
    fn missing_artifact_names_producing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(dir.path());
        let pipeline = Pipeline::new(config, dir.path().to_path_buf()).unwrap();
        match pipeline.probe(false) {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "worldgen"),
            other => panic!("expected missing-artifact error, got {other:?}"),
        }
    }

    #[test]
    fn full_tiny_pipeline_runs_and_is_deterministic() {
        let run = |dir: &Path| -> (String, String) {
            let config = tiny_run_config(dir);
            let pipeline = Pipeline::new(config, dir.to_path_buf()).unwrap();
            pipeline.worldgen(false).unwrap();
            pipeline.pretrain_base(false).unwrap();
            pipeline.probe(false).unwrap();
            pipeline.pretrain_assessor(false).unwrap();
            pipeline.build_ftdata(false).unwrap();
            pipeline.finetune(false, &FinetuneOptions::default()).unwrap();
            pipeline.evaluate(&EvalOptions::default()).unwrap();
            let metrics = std::fs::read_to_string(pipeline.path("eval_metrics.csv")).unwrap();
            let records = std::fs::read_to_string(pipeline.path("eval.jsonl")).unwrap();
            (metrics, records)
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (m1, r1) = run(d1.path());
        let (m2, r2) = run(d2.path());
        assert_eq!(m1, m2, "metrics must be byte-identical across runs");
        assert_eq!(r1, r2, "records must be byte-identical across runs");
        assert!(m1.starts_with("# config_hash="));
    }

    #[test]
    fn report_flags_mixed_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |id: &str| EvalRecord {
            question_id: id.into(),
            question: String::new(),
            answers: vec!["x".into()],
            results: BTreeMap::new(),
            retrieved_id: None,
            retrieved_has_answer: None,
        };
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_jsonl(&[rec("1")], &a, "hash-a").unwrap();
        save_jsonl(&[rec("2")], &b, "hash-b").unwrap();
        let out = report(&[a.clone(), b]).unwrap();
        assert!(out.contains("WARNING"));
        let single = report(&[a]).unwrap();
        assert!(!single.contains("WARNING"));
    }
}
