//! Decoder-only causal transformer used both as the frozen base model and,
//! with LoRA adapters enabled, as the trainable trunk of the context
//! assessor. The input layer accepts mixed sequences of token ids and raw
//! embedding rows so memory embeddings can be injected as soft prompts.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAREMDL1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Score added to masked attention positions. Large enough that the
/// max-subtracted softmax underflows them to exactly zero.
const CAUSAL_MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// K: number of learnable memory tokens.
    pub memory_tokens: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl ModelConfig {
    /// Trains in minutes on a laptop while keeping K at its full value.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            memory_tokens: 16,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }

    /// One-layer d=8 config for finite-difference verification.
    pub fn probe() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 64,
            memory_tokens: 4,
            lora_rank: 2,
            lora_alpha: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.memory_tokens == 0 {
            return Err(Error::Config("memory_tokens must be >= 1".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which partition of the store a tensor belongs to. `Base` is φ and is
/// frozen once base pre-training finishes; adapters and the memory bank
/// together form θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Base,
    Adapter,
    MemoryBank,
}

impl Partition {
    fn tag(self) -> u8 {
        match self {
            Partition::Base => 0,
            Partition::Adapter => 1,
            Partition::MemoryBank => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Partition::Base),
            1 => Ok(Partition::Adapter),
            2 => Ok(Partition::MemoryBank),
            _ => Err(Error::Checkpoint(format!("unknown partition tag {t}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor<F: Scalar> {
    pub data: Vec<F>,
    pub rows: usize,
    pub cols: usize,
    pub partition: Partition,
}

/// Which partition receives gradients in a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    None,
    /// φ only: base pre-training, before the freeze.
    Base,
    /// θ only: LoRA matrices plus the memory bank.
    Theta,
}

/// Named tensors for the frozen base weights φ and the trainable partition
/// θ (LoRA pairs + memory bank), kept strictly disjoint.
#[derive(Debug, Clone)]
pub struct ParameterStore<F: Scalar> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, ParamTensor<F>>,
}

fn sample_normal<F: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> F {
    // Box-Muller; keeps the dependency surface small and the stream
    // identical across platforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    F::fp(z * std)
}

impl<F: Scalar> ParameterStore<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let d = config.d_model;
        let std = 0.02;

        let normal = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, s: f64, p: Partition| ParamTensor {
            data: (0..rows * cols).map(|_| sample_normal::<F>(rng, s)).collect(),
            rows,
            cols,
            partition: p,
        };

        tensors.insert("tok_embed".into(), normal(&mut rng, config.vocab_size, d, std, Partition::Base));
        tensors.insert("pos_embed".into(), normal(&mut rng, config.max_seq_len, d, std, Partition::Base));
        for l in 0..config.n_layers {
            for name in ["wq", "wk", "wv", "wo"] {
                tensors.insert(format!("layer{l}.attn.{name}"), normal(&mut rng, d, d, std, Partition::Base));
            }
            tensors.insert(format!("layer{l}.ff.w1"), normal(&mut rng, d, config.d_ff, std, Partition::Base));
            tensors.insert(format!("layer{l}.ff.w2"), normal(&mut rng, config.d_ff, d, std, Partition::Base));
            for ln in ["ln1", "ln2"] {
                tensors.insert(
                    format!("layer{l}.{ln}.gain"),
                    ParamTensor { data: vec![F::one(); d], rows: 1, cols: d, partition: Partition::Base },
                );
                tensors.insert(
                    format!("layer{l}.{ln}.bias"),
                    ParamTensor { data: vec![F::zero(); d], rows: 1, cols: d, partition: Partition::Base },
                );
            }
            // LoRA on the query/value projections. B starts at zero so the
            // adapted forward equals the frozen forward exactly.
            for target in ["wq", "wv"] {
                tensors.insert(
                    format!("layer{l}.attn.{target}.lora_a"),
                    normal(&mut rng, d, config.lora_rank, std, Partition::Adapter),
                );
                tensors.insert(
                    format!("layer{l}.attn.{target}.lora_b"),
                    ParamTensor {
                        data: vec![F::zero(); config.lora_rank * d],
                        rows: config.lora_rank,
                        cols: d,
                        partition: Partition::Adapter,
                    },
                );
            }
        }
        tensors.insert(
            "final_ln.gain".into(),
            ParamTensor { data: vec![F::one(); d], rows: 1, cols: d, partition: Partition::Base },
        );
        tensors.insert(
            "final_ln.bias".into(),
            ParamTensor { data: vec![F::zero(); d], rows: 1, cols: d, partition: Partition::Base },
        );
        // No weight tying: embedding-injection semantics stay independent
        // of the output head.
        tensors.insert("head".into(), normal(&mut rng, d, config.vocab_size, std, Partition::Base));
        tensors.insert(
            "memory_bank".into(),
            normal(&mut rng, config.memory_tokens, d, std, Partition::MemoryBank),
        );

        Ok(ParameterStore { config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> &ParamTensor<F> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamTensor<F> {
        self.tensors.get_mut(name).expect("unknown parameter")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor<F>)> {
        self.tensors.iter()
    }

    /// Names of θ tensors (adapters + memory bank), in stable order.
    pub fn theta_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.partition != Partition::Base)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn to_f64(&self) -> ParameterStore<f64> {
        ParameterStore {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        ParamTensor {
                            data: t.data.iter().map(|v| v.dbl()).collect(),
                            rows: t.rows,
                            cols: t.cols,
                            partition: t.partition,
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256 over the φ partition, little-endian scalar bytes in name
    /// order. Must be identical before stage 1 and after stage 2.
    pub fn phi_checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            if t.partition != Partition::Base {
                continue;
            }
            hasher.update(name.as_bytes());
            let mut buf = Vec::with_capacity(t.data.len() * F::BYTES);
            for &v in &t.data {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher.finalize().into()
    }

    /// Flatten θ into one vector (name order); used by the optimizer and
    /// the finite-difference checker.
    pub fn theta_flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        for name in self.theta_names() {
            out.extend_from_slice(&self.tensors[&name].data);
        }
        out
    }

    pub fn set_theta_flat(&mut self, flat: &[F]) {
        let mut offset = 0;
        for name in self.theta_names() {
            let t = self.tensors.get_mut(&name).unwrap();
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len());
    }
}

/// Either a vocabulary token or a raw d_model embedding row that bypasses
/// the embedding table.
#[derive(Debug, Clone)]
pub enum SequenceElement<F: Scalar> {
    Token(u32),
    Embedding(Vec<F>),
}

/// Tape-resident parameter handles for one forward/backward pass.
pub struct Binding {
    ids: BTreeMap<String, TensorId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids[name]
    }

    /// Map tape-side leaf gradients back to parameter names.
    pub fn name_grads<F: Scalar>(
        &self,
        grads: &BTreeMap<TensorId, Vec<F>>,
    ) -> BTreeMap<String, Vec<F>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.ids {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Register every parameter as a tape leaf; `trainable` selects which
/// partition gets `requires_grad`.
pub fn bind<F: Scalar>(tape: &mut Tape<F>, store: &ParameterStore<F>, trainable: Trainable) -> Result<Binding> {
    let mut ids = BTreeMap::new();
    for (name, t) in store.iter() {
        let rg = match trainable {
            Trainable::None => false,
            Trainable::Base => t.partition == Partition::Base,
            Trainable::Theta => t.partition != Partition::Base,
        };
        ids.insert(name.clone(), tape.leaf(t.rows, t.cols, t.data.clone(), rg)?);
    }
    Ok(Binding { ids })
}

/// One input segment: token ids run through the embedding table, tape rows
/// enter the first layer directly (soft-prompt injection with gradient
/// flow preserved).
#[derive(Debug, Clone)]
pub enum Segment {
    Tokens(Vec<u32>),
    Rows(TensorId),
}

pub struct ForwardOutput {
    pub logits: TensorId,
    pub hidden: TensorId,
    pub len: usize,
}

pub fn segment_len<F: Scalar>(tape: &Tape<F>, segs: &[Segment]) -> usize {
    segs.iter()
        .map(|s| match s {
            Segment::Tokens(t) => t.len(),
            Segment::Rows(id) => tape.shape(*id).rows,
        })
        .sum()
}

/// Single forward pass over a mixed token/embedding sequence. Causal
/// masking is always on. With `adapters_enabled` false the result depends
/// only on φ.
pub fn forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    config: &ModelConfig,
    segments: &[Segment],
    adapters_enabled: bool,
) -> Result<ForwardOutput> {
    let len = segment_len(tape, segments);
    if len == 0 {
        return Err(Error::EmptyPrompt);
    }
    if len > config.max_seq_len {
        return Err(Error::Overlength { len, max: config.max_seq_len });
    }
    let d = config.d_model;

    // Embed: gather token rows, splice raw rows, then add positions.
    let mut parts = Vec::new();
    for seg in segments {
        match seg {
            Segment::Tokens(toks) => {
                if toks.is_empty() {
                    continue;
                }
                let ids: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
                parts.push(tape.gather(binding.id("tok_embed"), &ids)?);
            }
            Segment::Rows(id) => {
                if tape.shape(*id).cols != d {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        detail: format!("embedding row width {} != d_model {}", tape.shape(*id).cols, d),
                    });
                }
                parts.push(*id);
            }
        }
    }
    let embedded = tape.concat_rows(&parts)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather(binding.id("pos_embed"), &positions)?;
    let mut x = tape.add(embedded, pos)?;

    // Causal mask shared by every layer.
    let mut mask_data = vec![F::zero(); len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            mask_data[i * len + j] = F::fp(CAUSAL_MASK_NEG);
        }
    }
    let mask = tape.constant(len, len, mask_data)?;

    let n_heads = config.n_heads;
    let dh = config.head_dim();
    let scale = F::fp(1.0 / (dh as f64).sqrt());
    let lora_scale = F::fp(config.lora_alpha / config.lora_rank as f64);

    for l in 0..config.n_layers {
        let ln1 = tape.layer_norm_rows(x, binding.id(&format!("layer{l}.ln1.gain")), binding.id(&format!("layer{l}.ln1.bias")))?;

        let proj = |tape: &mut Tape<F>, name: &str, lora: bool| -> Result<TensorId> {
            let w = binding.id(&format!("layer{l}.attn.{name}"));
            let base = tape.matmul(ln1, w, false)?;
            if lora && adapters_enabled {
                let a = binding.id(&format!("layer{l}.attn.{name}.lora_a"));
                let b = binding.id(&format!("layer{l}.attn.{name}.lora_b"));
                let xa = tape.matmul(ln1, a, false)?;
                let xab = tape.matmul(xa, b, false)?;
                let scaled = tape.scale(xab, lora_scale)?;
                tape.add(base, scaled)
            } else {
                Ok(base)
            }
        };
        let q = proj(tape, "wq", true)?;
        let k = proj(tape, "wk", false)?;
        let v = proj(tape, "wv", true)?;

        // Per-head attention; head outputs enter the output projection as
        // row blocks of wo, so no column concat is needed.
        let wo = binding.id(&format!("layer{l}.attn.wo"));
        let mut attn_out: Option<TensorId> = None;
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul(qh, kh, true)?;
            let scaled = tape.scale(scores, scale)?;
            let masked = tape.add(scaled, mask)?;
            let weights = tape.softmax_rows(masked)?;
            let ctx = tape.matmul(weights, vh, false)?;
            let wo_h = tape.slice_rows(wo, h * dh, dh)?;
            let out_h = tape.matmul(ctx, wo_h, false)?;
            attn_out = Some(match attn_out {
                None => out_h,
                Some(acc) => tape.add(acc, out_h)?,
            });
        }
        x = tape.add(x, attn_out.unwrap())?;

        let ln2 = tape.layer_norm_rows(x, binding.id(&format!("layer{l}.ln2.gain")), binding.id(&format!("layer{l}.ln2.bias")))?;
        let h1 = tape.matmul(ln2, binding.id(&format!("layer{l}.ff.w1")), false)?;
        let act = tape.gelu(h1)?;
        let h2 = tape.matmul(act, binding.id(&format!("layer{l}.ff.w2")), false)?;
        x = tape.add(x, h2)?;
    }

    let hidden = tape.layer_norm_rows(x, binding.id("final_ln.gain"), binding.id("final_ln.bias"))?;
    let logits = tape.matmul(hidden, binding.id("head"), false)?;
    Ok(ForwardOutput { logits, hidden, len })
}

/// Convert mixed elements into segments, leafing raw embeddings as
/// constants (no gradient path; use `Segment::Rows` directly for that).
pub fn elements_to_segments<F: Scalar>(tape: &mut Tape<F>, elements: &[SequenceElement<F>], d_model: usize) -> Result<Vec<Segment>> {
    let mut segs: Vec<Segment> = Vec::new();
    let mut pending: Vec<u32> = Vec::new();
    for el in elements {
        match el {
            SequenceElement::Token(t) => pending.push(*t),
            SequenceElement::Embedding(row) => {
                if !pending.is_empty() {
                    segs.push(Segment::Tokens(std::mem::take(&mut pending)));
                }
                if row.len() != d_model {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        detail: format!("embedding row width {} != d_model {}", row.len(), d_model),
                    });
                }
                let id = tape.constant(1, d_model, row.clone())?;
                segs.push(Segment::Rows(id));
            }
        }
    }
    if !pending.is_empty() {
        segs.push(Segment::Tokens(pending));
    }
    Ok(segs)
}

/// Forward pass over `SequenceElement`s on a fresh tape; returns flat
/// logits and final hidden states.
pub fn forward_elements<F: Scalar>(
    store: &ParameterStore<F>,
    elements: &[SequenceElement<F>],
    adapters_enabled: bool,
) -> Result<(Vec<F>, Vec<F>, Shape)> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, store, Trainable::None)?;
    let segs = elements_to_segments(&mut tape, elements, store.config.d_model)?;
    let out = forward(&mut tape, &binding, &store.config, &segs, adapters_enabled)?;
    Ok((
        tape.data(out.logits).to_vec(),
        tape.data(out.hidden).to_vec(),
        tape.shape(out.logits),
    ))
}

/// Lowest-id argmax.
pub fn argmax<F: Scalar>(row: &[F]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Deterministic greedy decoding: argmax with ties broken by lowest token
/// id, stopping at any stop id or the token budget.
pub fn generate_greedy<F: Scalar>(
    store: &ParameterStore<F>,
    prompt: &[SequenceElement<F>],
    max_new_tokens: usize,
    stop_ids: &[u32],
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if prompt.len() + max_new_tokens > store.config.max_seq_len {
        return Err(Error::Overlength {
            len: prompt.len() + max_new_tokens,
            max: store.config.max_seq_len,
        });
    }
    let mut elements = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new_tokens {
        let (logits, _, shape) = forward_elements(store, &elements, false)?;
        let last = &logits[(shape.rows - 1) * shape.cols..];
        let next = argmax(last);
        if stop_ids.contains(&next) {
            break;
        }
        generated.push(next);
        elements.push(SequenceElement::Token(next));
    }
    Ok(generated)
}

// --- Checkpoint format -----------------------------------------------------
//
// magic (8 bytes), version u32, config hash (u32 len + utf8, may be empty),
// ModelConfig as JSON (u32 len + bytes), tensor count u32, then per tensor:
// name (u32 len + utf8), dtype tag u8, partition tag u8, rows u64, cols u64,
// little-endian raw scalars. Trailer: 32-byte SHA-256 over φ.

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    write_u32(w, b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn save_checkpoint<F: Scalar>(store: &ParameterStore<F>, path: &Path, config_hash: &str) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_bytes(&mut w, config_hash.as_bytes())?;
    write_bytes(&mut w, serde_json::to_string(&store.config)?.as_bytes())?;
    let tensors: Vec<_> = store.iter().collect();
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, t) in tensors {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&[F::DTYPE_TAG, t.partition.tag()])?;
        write_u64(&mut w, t.rows as u64)?;
        write_u64(&mut w, t.cols as u64)?;
        let mut buf = Vec::with_capacity(t.data.len() * F::BYTES);
        for &v in &t.data {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.write_all(&store.phi_checksum())?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(ParameterStore<F>, String)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_hash = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut r)?)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags)?;
        if tags[0] != F::DTYPE_TAG {
            return Err(Error::Checkpoint(format!("dtype tag {} does not match requested precision", tags[0])));
        }
        let partition = Partition::from_tag(tags[1])?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut buf = vec![0u8; rows * cols * F::BYTES];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(F::BYTES).map(F::read_le).collect();
        tensors.insert(name, ParamTensor { data, rows, cols, partition });
    }
    let mut stored_sum = [0u8; 32];
    r.read_exact(&mut stored_sum)?;
    let store = ParameterStore { config, tensors };
    if store.phi_checksum() != stored_sum {
        return Err(Error::Checkpoint("phi checksum mismatch".into()));
    }
    Ok((store, config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tokens(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<SequenceElement<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| SequenceElement::Token(rng.gen_range(0..cfg.vocab_size as u32)))
            .collect()
    }

    #[test]
    fn adapter_neutrality_at_init() {
        let cfg = ModelConfig::probe();
        let store = ParameterStore::<f32>::init(&cfg, 7).unwrap();
        for seed in 0..5 {
            let input = random_tokens(&cfg, 12, seed);
            let (with, _, _) = forward_elements(&store, &input, true).unwrap();
            let (without, _, _) = forward_elements(&store, &input, false).unwrap();
            assert_eq!(with, without, "B=0 adapters must be exact no-ops");
        }
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = ModelConfig::probe();
        let store = ParameterStore::<f32>::init(&cfg, 1).unwrap();
        let input = random_tokens(&cfg, 9, 0);
        let (logits, hidden, shape) = forward_elements(&store, &input, false).unwrap();
        assert_eq!(shape.rows, 9);
        assert_eq!(shape.cols, cfg.vocab_size);
        assert_eq!(logits.len(), 9 * cfg.vocab_size);
        assert_eq!(hidden.len(), 9 * cfg.d_model);
    }

    #[test]
    fn causality_by_perturbation() {
        // causal-mask oracle: two inputs differing only at position j must
        // produce identical logits at positions < j.
        let cfg = ModelConfig::probe();
        let store = ParameterStore::<f32>::init(&cfg, 3).unwrap();
        let base = random_tokens(&cfg, 10, 11);
        let j = 6;
        let mut perturbed = base.clone();
        perturbed[j] = SequenceElement::Token(match perturbed[j] {
            SequenceElement::Token(t) => (t + 1) % cfg.vocab_size as u32,
            _ => unreachable!(),
        });
        let (a, _, shape) = forward_elements(&store, &base, false).unwrap();
        let (b, _, _) = forward_elements(&store, &perturbed, false).unwrap();
        assert_eq!(a[..j * shape.cols], b[..j * shape.cols]);
        assert_ne!(a[j * shape.cols..], b[j * shape.cols..]);
    }

    #[test]
    fn embedding_injection_bypasses_table() {
        let cfg = ModelConfig::probe();
        let store = ParameterStore::<f32>::init(&cfg, 5).unwrap();
        // Injecting the embedding-table row for token t must equal feeding t.
        let t = 3usize;
        let row = store.get("tok_embed").data[t * cfg.d_model..(t + 1) * cfg.d_model].to_vec();
        let as_token = vec![SequenceElement::Token(t as u32), SequenceElement::Token(1)];
        let as_embed = vec![SequenceElement::Embedding(row), SequenceElement::Token(1)];
        let (a, _, _) = forward_elements(&store, &as_token, false).unwrap();
        let (b, _, _) = forward_elements(&store, &as_embed, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_is_deterministic_and_respects_stops() {
        let cfg = ModelConfig::probe();
        let store = ParameterStore::<f32>::init(&cfg, 9).unwrap();
        let prompt = random_tokens(&cfg, 5, 2);
        let a = generate_greedy(&store, &prompt, 8, &[]).unwrap();
        let b = generate_greedy(&store, &prompt, 8, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        // A stop id equal to the first generated token yields empty output.
        let stopped = generate_greedy(&store, &prompt, 8, &[a[0]]).unwrap();
        assert!(stopped.is_empty());
    }

    #[test]
    fn argmax_invariance_under_constant_shift() {
        let row = vec![0.5f32, 1.5, -2.0, 1.5];
        let shifted: Vec<f32> = row.iter().map(|v| v + 10.0).collect();
        assert_eq!(argmax(&row), argmax(&shifted));
        assert_eq!(argmax(&row), 1, "ties break to lowest id");
    }

    #[test]
    fn empty_prompt_rejected() {
        let cfg = ModelConfig::probe();
        let store = ParameterStore::<f32>::init(&cfg, 0).unwrap();
        assert!(matches!(
            generate_greedy::<f32>(&store, &[], 4, &[]),
            Err(Error::EmptyPrompt)
        ));
    }

    #[test]
    fn overlength_rejected() {
        let cfg = ModelConfig::probe();
        let store = ParameterStore::<f32>::init(&cfg, 0).unwrap();
        let prompt = random_tokens(&cfg, cfg.max_seq_len, 0);
        assert!(matches!(
            generate_greedy(&store, &prompt, 4, &[]),
            Err(Error::Overlength { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let cfg = ModelConfig::probe();
        let store = ParameterStore::<f32>::init(&cfg, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&store, &path, "cfg-hash").unwrap();
        let (loaded, hash) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(hash, "cfg-hash");
        assert_eq!(loaded.config, store.config);
        for (name, t) in store.iter() {
            let l = loaded.get(name);
            assert_eq!(l.partition, t.partition);
            let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = l.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "tensor {name} must round-trip bit-exactly");
        }
        assert_eq!(loaded.phi_checksum(), store.phi_checksum());
    }

    #[test]
    fn phi_checksum_ignores_theta() {
        let cfg = ModelConfig::probe();
        let mut store = ParameterStore::<f32>::init(&cfg, 1).unwrap();
        let before = store.phi_checksum();
        for v in store.get_mut("memory_bank").data.iter_mut() {
            *v += 1.0;
        }
        for v in store.get_mut("layer0.attn.wq.lora_b").data.iter_mut() {
            *v += 0.5;
        }
        assert_eq!(store.phi_checksum(), before);
        store.get_mut("head").data[0] += 1.0;
        assert_ne!(store.phi_checksum(), before);
    }

    #[test]
    fn theta_flat_round_trip() {
        let cfg = ModelConfig::probe();
        let mut store = ParameterStore::<f32>::init(&cfg, 1).unwrap();
        let mut flat = store.theta_flat();
        for v in flat.iter_mut() {
            *v += 0.25;
        }
        store.set_theta_flat(&flat);
        assert_eq!(store.theta_flat(), flat);
    }
}
