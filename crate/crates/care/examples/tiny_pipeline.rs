//! Every pipeline stage end to end on a deliberately tiny model and
//! world. The numbers are not meaningful at this scale — the point is the
//! artifact flow: world -> base -> probe -> stage 1 -> data -> stage 2 ->
//! eval -> report. See the README for a full-scale run via the CLI.

use care::model::ModelConfig;
use care::pipeline::{report, EvalOptions, FinetuneOptions, Pipeline, RunConfig};
use care::world::WorldConfig;

fn main() -> care::Result<()> {
    let dir = std::env::temp_dir().join("care_tiny_pipeline");
    let config = RunConfig {
        master_seed: 7,
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
        ..RunConfig::default()
    };
    let mut config = config;
    config.base.steps = 200;
    config.base_data.copy_examples = 50;
    config.base_data.qa_examples = 50;
    config.recon.corpus_size = 50;
    config.recon.steps = 200;
    config.finetune.steps = 100;
    config.eval.max_new_tokens = 4;

    let pipeline = Pipeline::new(config, dir.clone())?;
    println!("run dir: {} (config {})", dir.display(), pipeline.hash);
    println!("worldgen ran: {}", pipeline.worldgen(false)?);
    println!("pretrain-base ran: {}", pipeline.pretrain_base(false)?);
    println!("probe ran: {}", pipeline.probe(false)?);
    if let Some(acc) = pipeline.pretrain_assessor(false)? {
        println!("stage-1 held-out token accuracy: {acc:.3}");
    }
    if let Some(stats) = pipeline.build_ftdata(false)? {
        println!("fine-tuning set: {} grounded, {} adversarial", stats.grounded, stats.adversarial);
    }
    println!("finetune ran: {}", pipeline.finetune(false, &FinetuneOptions::default())?);
    let (metrics, timing) = pipeline.evaluate(&EvalOptions::default())?;
    print!("{}", care::eval::render_table(&metrics));
    println!("encode {:.2}s generate {:.2}s", timing.encode_secs, timing.generate_secs);

    // the report subcommand renders the same records as a comparison row
    print!("{}", report(&[dir.join("eval.jsonl")])?);
    Ok(())
}
