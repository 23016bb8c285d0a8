//! Stage-1 in miniature: pre-train a tiny decoder with a span-copy task,
//! then freeze it and train only the adapters + memory bank to compress
//! whole contexts into K memory embeddings. Ends with greedy decoding
//! from memory alone. Runs in a few minutes on one CPU core.

use care::model::{ModelConfig, ParameterStore, SequenceElement, Trainable};
use care::tensor::Tape;
use care::trainer::{
    mean_recon_loss, mean_token_lm_loss, recon_loss, recon_token_accuracy, token_lm_loss,
    LossParts, TokenExample, TrainConfig,
};
use care::world::EOS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> care::Result<()> {
    let config = ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
        memory_tokens: 4,
        lora_rank: 4,
        lora_alpha: 8.0,
    };
    let store = ParameterStore::<f32>::init(&config, 5)?;
    let instruction = vec![1u32, 2, 3]; // stands in for "repeat this text exactly :"

    // the decoder only learns to *read* its prompt if pre-training demands it
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
    println!("pre-training base on the copy task ({} steps)...", cfg_base.steps);
    let base = care::trainer::train(
        &store,
        Trainable::Base,
        &copy_seqs,
        &cfg_base,
        |tape: &mut Tape<f32>, b, s, ex: &TokenExample| {
            let id = token_lm_loss(tape, b, s, ex)?;
            let v = tape.scalar(id) as f64;
            Ok((id, LossParts { lm: v, kd: 0.0, total: v }))
        },
        |s| mean_token_lm_loss(s, &copy_seqs[..8]),
    )?;
    println!("  copy loss {:.4}", base.best_val);

    let contexts =
        vec![vec![10u32, 20, 30, 40, 50], vec![11u32, 21, 31, 41, 51], vec![9u32, 19, 29, 39, 49]];
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 2,
        validate_every: 0,
        ..TrainConfig::stage1(900, 0)
    };
    println!("training assessor to reconstruct {} contexts from memory...", contexts.len());
    let outcome = care::trainer::train(
        &base.best,
        Trainable::Theta,
        &contexts,
        &cfg,
        |tape, binding, store, c: &Vec<u32>| {
            recon_loss(tape, binding, store, &instruction, c, cfg.max_context_tokens)
        },
        |s| mean_recon_loss(s, &contexts, &instruction, cfg.max_context_tokens),
    )?;
    let acc = recon_token_accuracy(&outcome.best, &contexts, &instruction, 180)?;
    println!("  recon loss {:.4}, teacher-forced token accuracy {acc:.3}", outcome.best_val);

    // free-run: feed only the memory rows plus the instruction
    for c in &contexts {
        let memory = care::assessor::encode(&outcome.best, &care::assessor::AssessorInput::pretrain(c.clone()))?;
        let mut prompt: Vec<SequenceElement<f32>> =
            memory.into_iter().map(SequenceElement::Embedding).collect();
        prompt.extend(instruction.iter().map(|&t| SequenceElement::Token(t)));
        let out = care::model::generate_greedy(&outcome.best, &prompt, c.len() + 2, &[EOS])?;
        println!("  context {c:?} -> decoded {out:?}");
    }
    Ok(())
}
