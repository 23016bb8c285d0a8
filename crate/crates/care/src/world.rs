//! Synthetic fact world: entities, relations, and triples that define
//! ground truth, the base model's parametric knowledge, and the retrieval
//! corpus (including conflicting passages). Conflicts are controllable so
//! context-memory disagreement can be dialed in exactly.

use crate::error::{Error, Result};
use crate::eval::contains_answer_span;
use crate::model::{generate_greedy, ParameterStore, SequenceElement};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// End-of-sequence marker; always token id 0.
pub const EOS: u32 = 0;
pub const EOS_WORD: &str = "</s>";

const CONSONANTS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Verbs available as relation surface forms.
const VERBS: &[&str] = &[
    "leads", "owns", "guards", "paints", "trains", "hires", "serves", "follows", "visits", "fears",
    "sells", "builds", "praises", "teaches", "ignores", "helps",
];

/// Fixed words every template and prompt draws from.
const TEMPLATE_WORDS: &[&str] = &[
    "answer", "the", "questions", ":", "question", "?", "is", "refer", "to", "background",
    "document", "and", ".", ",", "who", "does", "repeat", "this", "text", "exactly", "appears",
    "near", "today",
];

/// Word-level vocabulary; rebuilt deterministically from the world.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    fn build(entities: &[String], verbs: &[String], capacity: usize) -> Result<Self> {
        let mut words: Vec<String> = vec![EOS_WORD.to_string()];
        words.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        words.extend(verbs.iter().cloned());
        words.extend(entities.iter().cloned());
        if words.len() > capacity {
            return Err(Error::Config(format!(
                "world needs {} vocabulary words but the model vocab holds {}",
                words.len(),
                capacity
            )));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w}")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Config(format!("word not in vocabulary: {word}")))
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Deterministic 4-letter syllabic entity name for index `i`. All names
/// share a length, so no name can contain another as a substring; span
/// matching stays unambiguous.
fn entity_name(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len(); // 70 syllables
    let a = i / n;
    let b = i % n;
    format!(
        "{}{}{}{}",
        CONSONANTS[a / VOWELS.len()],
        VOWELS[a % VOWELS.len()],
        CONSONANTS[b / VOWELS.len()],
        VOWELS[b % VOWELS.len()]
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Relation {
    pub verb: String,
    pub question_template: String,
    pub statement_template: String,
}

impl Relation {
    fn new(verb: &str) -> Self {
        Relation {
            verb: verb.to_string(),
            question_template: format!("who does {{subject}} {verb} ?"),
            statement_template: format!("{{subject}} {verb} {{object}} ."),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Triple {
    pub id: usize,
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    /// Part of the base model's pre-training subset.
    pub known: bool,
    /// Has a conflicting passage that lexically outranks the faithful one.
    pub conflicted: bool,
}

#[derive(Debug, Clone)]
pub struct FactWorld {
    pub seed: u64,
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub triples: Vec<Triple>,
    pub vocab: Vocab,
}

impl FactWorld {
    pub fn question_text(&self, t: &Triple) -> String {
        self.relations[t.relation]
            .question_template
            .replace("{subject}", &self.entities[t.subject])
    }

    pub fn statement_text(&self, t: &Triple) -> String {
        self.relations[t.relation]
            .statement_template
            .replace("{subject}", &self.entities[t.subject])
            .replace("{object}", &self.entities[t.object])
    }

    pub fn answer_text(&self, t: &Triple) -> String {
        self.entities[t.object].clone()
    }

    pub fn qa_examples(&self) -> Vec<QAExample> {
        self.triples
            .iter()
            .map(|t| QAExample {
                id: format!("q{}", t.id),
                question: self.question_text(t),
                answers: vec![self.answer_text(t)],
                source_triple: t.id,
                closed_book_correct: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassageKind {
    Faithful,
    Conflicting,
    Distractor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Passage {
    pub id: usize,
    pub text: String,
    pub source_triple: usize,
    pub kind: PassageKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub source_triple: usize,
    pub closed_book_correct: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Grounded,
    Adversarial,
}

/// One unit of conflict-aware supervision. Grounded pairs a closed-book
/// failure with an answer-bearing context; Adversarial pairs a closed-book
/// success with a non-answer-bearing hard negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub question_id: String,
    pub question: String,
    pub answer: String,
    pub scenario: Scenario,
    /// What the assessor reads: C_pos for Grounded, C_neg for Adversarial.
    pub assessor_context: String,
    /// What the teacher reads: C_pos for Grounded, nothing for Adversarial.
    pub teacher_context: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    /// Fraction of triples paired with an outranking conflicting passage.
    pub conflict_rate: f64,
    /// Fraction of triples designated as base-model parametric knowledge.
    pub known_fraction: f64,
    /// Distractor passages added per triple.
    pub distractors_per_triple: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            entities: 192,
            relations: 8,
            triples: 160,
            conflict_rate: 0.6,
            known_fraction: 0.6,
            distractors_per_triple: 1,
        }
    }
}

/// Deterministic world + corpus. Conflicting passages are generated for an
/// exact `round(conflict_rate * triples)` quota and always outrank the
/// faithful passage for the same triple under the lexical retriever (the
/// subject term appears twice). Known triples take the quota first, since
/// that is where context-memory conflict can manifest.
pub fn generate_world(config: &WorldConfig, vocab_capacity: usize, seed: u64) -> Result<(FactWorld, Vec<Passage>)> {
    if !(0.0..=1.0).contains(&config.conflict_rate) {
        return Err(Error::Config("conflict_rate must be in [0,1]".into()));
    }
    if !(0.0..=1.0).contains(&config.known_fraction) {
        return Err(Error::Config("known_fraction must be in [0,1]".into()));
    }
    if config.relations > VERBS.len() {
        return Err(Error::Config(format!("at most {} relations supported", VERBS.len())));
    }
    if config.entities < 2 {
        return Err(Error::Config("need at least 2 entities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<String> = (0..config.entities).map(entity_name).collect();
    let relations: Vec<Relation> = VERBS[..config.relations].iter().map(|v| Relation::new(v)).collect();
    let vocab = Vocab::build(&entities, &relations.iter().map(|r| r.verb.clone()).collect::<Vec<_>>(), vocab_capacity)?;

    // One triple per subject. If a subject appeared in two triples, the
    // doubled-subject conflict passage of one could outscore the faithful
    // passage of the other (the query verb is rarer than the subject, but
    // a doubled subject beats it); distinct subjects keep top-1 retrieval
    // unambiguous across the whole corpus.
    if config.triples > config.entities {
        return Err(Error::Config(format!(
            "{} triples requested but only {} entities exist (one triple per subject)",
            config.triples, config.entities
        )));
    }
    let mut subjects: Vec<usize> = (0..config.entities).collect();
    subjects.shuffle(&mut rng);
    subjects.truncate(config.triples);
    subjects.sort_unstable();
    let pairs: Vec<(usize, usize)> =
        subjects.into_iter().map(|s| (s, rng.gen_range(0..config.relations))).collect();

    // Objects for relation r come from entities that are never subjects of
    // r. Then only passages about (s, r) contain both the subject and verb
    // of the question, which keeps top-1 lexical retrieval unambiguous.
    let mut subjects_of: Vec<Vec<bool>> = vec![vec![false; config.entities]; config.relations];
    for &(s, r) in &pairs {
        subjects_of[r][s] = true;
    }
    let object_pool: Vec<Vec<usize>> = subjects_of
        .iter()
        .map(|taken| (0..config.entities).filter(|&e| !taken[e]).collect())
        .collect();
    if object_pool.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(
            "every entity is a subject of some relation; no eligible objects remain".into(),
        ));
    }
    let mut triples: Vec<Triple> = pairs
        .into_iter()
        .enumerate()
        .map(|(id, (subject, relation))| {
            let pool = &object_pool[relation];
            let object = pool[rng.gen_range(0..pool.len())];
            Triple { id, subject, relation, object, known: false, conflicted: false }
        })
        .collect();

    // Known split, then the conflict quota (known triples first).
    let known_quota = (config.known_fraction * config.triples as f64).round() as usize;
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(known_quota) {
        triples[i].known = true;
    }
    let conflict_quota = (config.conflict_rate * config.triples as f64).round() as usize;
    let mut conflict_order: Vec<usize> = (0..triples.len()).collect();
    conflict_order.shuffle(&mut rng);
    conflict_order.sort_by_key(|&i| !triples[i].known);
    for &i in conflict_order.iter().take(conflict_quota) {
        triples[i].conflicted = true;
    }

    let world = FactWorld { seed, entities, relations, triples, vocab };

    let mut passages = Vec::new();
    let push = |text: String, source: usize, kind: PassageKind, passages: &mut Vec<Passage>| {
        passages.push(Passage { id: passages.len(), text, source_triple: source, kind });
    };
    for t in &world.triples {
        push(world.statement_text(t), t.id, PassageKind::Faithful, &mut passages);
        if t.conflicted {
            let pool = &object_pool[t.relation];
            if pool.len() < 2 {
                return Err(Error::Config(format!(
                    "relation {} has too few eligible objects for a conflicting passage",
                    world.relations[t.relation].verb
                )));
            }
            let wrong = loop {
                let o = pool[rng.gen_range(0..pool.len())];
                if o != t.object {
                    break o;
                }
            };
            let s = &world.entities[t.subject];
            let text = format!("{s} , {s} {} {} .", world.relations[t.relation].verb, world.entities[wrong]);
            push(text, t.id, PassageKind::Conflicting, &mut passages);
        }
        for _ in 0..config.distractors_per_triple {
            let other = loop {
                let o = rng.gen_range(0..config.entities);
                if o != t.object {
                    break o;
                }
            };
            let text = format!("{} appears near {} today .", world.entities[t.subject], world.entities[other]);
            push(text, t.id, PassageKind::Distractor, &mut passages);
        }
    }
    Ok((world, passages))
}

// --- Lexical retrieval -------------------------------------------------

/// Pure tf-idf term-overlap scorer; ties broken by ascending passage id.
pub fn retrieve<'a>(query: &str, corpus: &'a [Passage], k: usize) -> Vec<(&'a Passage, f64)> {
    let n = corpus.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for p in corpus {
        let mut seen: Vec<&str> = p.text.split_whitespace().collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let query_terms: Vec<&str> = query.split_whitespace().collect();
    let mut scored: Vec<(&Passage, f64)> = corpus
        .iter()
        .map(|p| {
            let mut score = 0.0;
            for term in &query_terms {
                let tf = p.text.split_whitespace().filter(|w| w == term).count() as f64;
                if tf > 0.0 {
                    let d = df.get(term).copied().unwrap_or(0) as f64;
                    score += tf * (1.0 + n / (1.0 + d)).ln();
                }
            }
            (p, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.id.cmp(&b.0.id)));
    scored.truncate(k);
    scored
}

// --- Closed-book probing ------------------------------------------------

/// Greedy closed-book generation per example; sets `closed_book_correct`
/// via Span EM against the gold answers.
pub fn probe_closed_book(
    base: &ParameterStore<f32>,
    examples: &mut [QAExample],
    vocab: &Vocab,
    max_new_tokens: usize,
) -> Result<()> {
    for ex in examples.iter_mut() {
        if ex.answers.is_empty() {
            return Err(Error::Precondition(format!("example {} has no gold answers", ex.id)));
        }
        let prompt_tokens = crate::eval::closed_book_prompt(vocab, &ex.question)?;
        let prompt: Vec<SequenceElement<f32>> = prompt_tokens.into_iter().map(SequenceElement::Token).collect();
        let out = generate_greedy(base, &prompt, max_new_tokens, &[EOS])?;
        let text = vocab.decode(&out);
        ex.closed_book_correct = Some(crate::eval::span_em(&text, &ex.answers));
    }
    Ok(())
}

// --- Fine-tuning set construction ----------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criteria {
    /// Closed-book correctness drives the scenario split.
    Correct,
    /// Ablation: scenario labels shuffled across examples.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMining {
    /// Highest-ranked retrieved passage lacking any answer span.
    Hard,
    /// Ablation: uniform sample over non-answer-bearing passages.
    Random,
}

#[derive(Debug, Default)]
pub struct BuildStats {
    pub total: usize,
    pub grounded: usize,
    pub adversarial: usize,
    /// Examples whose top-100 retrieval carries no answer span.
    pub dropped_no_span: usize,
    /// Adversarial examples with no qualifying negative.
    pub dropped_no_negative: usize,
}

/// Assemble grounded/adversarial supervision from probed examples. The
/// answer-span filter scans the top 100 retrieved passages.
pub fn build_finetune_set(
    examples: &[QAExample],
    corpus: &[Passage],
    criteria: Criteria,
    negatives: NegativeMining,
    seed: u64,
) -> Result<(Vec<FinetuneExample>, BuildStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = BuildStats::default();

    let probed: Vec<&QAExample> = examples.iter().collect();
    for ex in &probed {
        if ex.closed_book_correct.is_none() {
            return Err(Error::Precondition(format!("example {} was not probed", ex.id)));
        }
    }

    // Scenario per example: the complement of closed-book correctness, or
    // a shuffled copy of those labels for the Random-criteria ablation.
    let mut scenarios: Vec<Scenario> = probed
        .iter()
        .map(|ex| {
            if ex.closed_book_correct.unwrap() {
                Scenario::Adversarial
            } else {
                Scenario::Grounded
            }
        })
        .collect();
    if criteria == Criteria::Random {
        scenarios.shuffle(&mut rng);
    }

    let mut out = Vec::new();
    for (ex, scenario) in probed.iter().zip(scenarios) {
        let top = retrieve(&ex.question, corpus, 100);
        if !top.iter().any(|(p, _)| contains_answer_span(&p.text, &ex.answers)) {
            stats.dropped_no_span += 1;
            continue;
        }
        let example = match scenario {
            Scenario::Grounded => {
                let c_pos = top
                    .iter()
                    .find(|(p, _)| contains_answer_span(&p.text, &ex.answers))
                    .map(|(p, _)| p.text.clone())
                    .expect("span filter guarantees a positive");
                stats.grounded += 1;
                FinetuneExample {
                    question_id: ex.id.clone(),
                    question: ex.question.clone(),
                    answer: ex.answers[0].clone(),
                    scenario: Scenario::Grounded,
                    assessor_context: c_pos.clone(),
                    teacher_context: Some(c_pos),
                }
            }
            Scenario::Adversarial => {
                let c_neg = match negatives {
                    NegativeMining::Hard => top
                        .iter()
                        .find(|(p, _)| !contains_answer_span(&p.text, &ex.answers))
                        .map(|(p, _)| p.text.clone()),
                    NegativeMining::Random => {
                        let pool: Vec<&Passage> = corpus
                            .iter()
                            .filter(|p| !contains_answer_span(&p.text, &ex.answers))
                            .collect();
                        pool.choose(&mut rng).map(|p| p.text.clone())
                    }
                };
                match c_neg {
                    None => {
                        stats.dropped_no_negative += 1;
                        continue;
                    }
                    Some(c_neg) => {
                        stats.adversarial += 1;
                        FinetuneExample {
                            question_id: ex.id.clone(),
                            question: ex.question.clone(),
                            answer: ex.answers[0].clone(),
                            scenario: Scenario::Adversarial,
                            assessor_context: c_neg,
                            teacher_context: None,
                        }
                    }
                }
            }
        };
        out.push(example);
    }
    stats.total = out.len();
    Ok((out, stats))
}

/// Deterministic validation holdout (last `frac` of a seeded shuffle).
pub fn split_validation<T: Clone>(items: &[T], frac: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((items.len() as f64) * frac).round() as usize;
    let val: Vec<T> = order[..n_val].iter().map(|&i| items[i].clone()).collect();
    let train: Vec<T> = order[n_val..].iter().map(|&i| items[i].clone()).collect();
    (train, val)
}

/// Random contexts for reconstruction pre-training. Each context
/// concatenates 1..=`max_statements` sentences in the same shapes the
/// retrieval corpus uses, over random entity/verb choices; token length
/// stays well under the stage-1 cap (7 tokens per sentence at most).
/// Context-reading QA over resampled pseudo-facts, as (context, question,
/// answer). Objects are drawn fresh per example, so no stable pairing can
/// be memorized: reading the context is the only way to answer. A third of
/// the contexts use the doubled-subject shape of conflicting passages.
pub fn generate_extraction_qa(world: &FactWorld, n: usize, seed: u64) -> Vec<(String, String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = &world.entities[rng.gen_range(0..world.entities.len())];
            let o = world.entities[rng.gen_range(0..world.entities.len())].clone();
            let rel = &world.relations[rng.gen_range(0..world.relations.len())];
            let context = if rng.gen_range(0..3) == 0 {
                format!("{s} , {s} {} {o} .", rel.verb)
            } else {
                rel.statement_template.replace("{subject}", s).replace("{object}", &o)
            };
            let question = rel.question_template.replace("{subject}", s);
            (context, question, o)
        })
        .collect()
}

pub fn generate_recon_corpus(world: &FactWorld, n: usize, max_statements: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let count = rng.gen_range(1..=max_statements);
            let mut parts = Vec::with_capacity(count);
            for _ in 0..count {
                let s = &world.entities[rng.gen_range(0..world.entities.len())];
                let o = &world.entities[rng.gen_range(0..world.entities.len())];
                let v = &world.relations[rng.gen_range(0..world.relations.len())].verb;
                parts.push(match rng.gen_range(0..4) {
                    0 => format!("{s} , {s} {v} {o} ."),
                    1 => format!("{s} appears near {o} today ."),
                    _ => format!("{s} {v} {o} ."),
                });
            }
            parts.join(" ")
        })
        .collect()
}

// --- Line-delimited JSON artifacts ----------------------------------------

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    config_hash: String,
    seed: u64,
    entities: Vec<String>,
    relations: Vec<Relation>,
}

pub fn save_world(world: &FactWorld, path: &Path, config_hash: &str) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = WorldHeader {
        config_hash: config_hash.to_string(),
        seed: world.seed,
        entities: world.entities.clone(),
        relations: world.relations.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for t in &world.triples {
        writeln!(w, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

pub fn load_world(path: &Path, vocab_capacity: usize) -> Result<(FactWorld, String)> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header: WorldHeader = serde_json::from_str(&lines.next().ok_or_else(|| {
        Error::Checkpoint("empty world file".into())
    })??)?;
    let mut triples = Vec::new();
    for line in lines {
        triples.push(serde_json::from_str(&line?)?);
    }
    let vocab = Vocab::build(
        &header.entities,
        &header.relations.iter().map(|r| r.verb.clone()).collect::<Vec<_>>(),
        vocab_capacity,
    )?;
    Ok((
        FactWorld {
            seed: header.seed,
            entities: header.entities,
            relations: header.relations,
            triples,
            vocab,
        },
        header.config_hash,
    ))
}

pub fn save_jsonl<T: Serialize>(items: &[T], path: &Path, config_hash: &str) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(&serde_json::json!({ "config_hash": config_hash }))?)?;
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?)?;
    }
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Vec<T>, String)> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header: serde_json::Value = serde_json::from_str(&lines.next().ok_or_else(|| {
        Error::Checkpoint(format!("empty artifact {}", path.display()))
    })??)?;
    let hash = header["config_hash"].as_str().unwrap_or_default().to_string();
    let mut items = Vec::new();
    for line in lines {
        items.push(serde_json::from_str(&line?)?);
    }
    Ok((items, hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> WorldConfig {
        WorldConfig {
            entities: 40,
            relations: 4,
            triples: 30,
            conflict_rate: 0.5,
            known_fraction: 0.6,
            distractors_per_triple: 1,
        }
    }

    #[test]
    fn zero_conflict_rate_means_no_conflicting_passages() {
        let cfg = WorldConfig { conflict_rate: 0.0, ..tiny_config() };
        let (_, corpus) = generate_world(&cfg, 512, 1).unwrap();
        assert!(corpus.iter().all(|p| p.kind != PassageKind::Conflicting));
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = tiny_config();
        let (wa, ca) = generate_world(&cfg, 512, 9).unwrap();
        let (wb, cb) = generate_world(&cfg, 512, 9).unwrap();
        assert_eq!(serde_json::to_string(&wa.triples).unwrap(), serde_json::to_string(&wb.triples).unwrap());
        assert_eq!(serde_json::to_string(&ca).unwrap(), serde_json::to_string(&cb).unwrap());
    }

    #[test]
    fn conflict_quota_is_exact() {
        let cfg = WorldConfig { triples: 30, conflict_rate: 0.5, ..tiny_config() };
        let (world, corpus) = generate_world(&cfg, 512, 2).unwrap();
        assert_eq!(world.triples.iter().filter(|t| t.conflicted).count(), 15);
        assert_eq!(corpus.iter().filter(|p| p.kind == PassageKind::Conflicting).count(), 15);
    }

    #[test]
    fn query_matching_passage_text_ranks_first() {
        let cfg = WorldConfig { conflict_rate: 0.0, distractors_per_triple: 0, ..tiny_config() };
        let (_, corpus) = generate_world(&cfg, 512, 3).unwrap();
        let target = &corpus[7];
        let ranked = retrieve(&target.text, &corpus, 3);
        assert_eq!(ranked[0].0.id, target.id);
    }

    #[test]
    fn no_overlap_orders_by_id() {
        let corpus = vec![
            Passage { id: 0, text: "kora leads vemu .".into(), source_triple: 0, kind: PassageKind::Faithful },
            Passage { id: 1, text: "vemu owns kora .".into(), source_triple: 1, kind: PassageKind::Faithful },
        ];
        let ranked = retrieve("zzz yyy", &corpus, 2);
        assert_eq!(ranked[0].0.id, 0);
        assert_eq!(ranked[1].0.id, 1);
        assert_eq!(ranked[0].1, 0.0);
    }

    #[test]
    fn recall_at_one_is_perfect_on_clean_world() {
        // exhaustive check over every question on a conflict-free,
        // distractor-free world
        let cfg = WorldConfig { conflict_rate: 0.0, distractors_per_triple: 0, ..tiny_config() };
        let (world, corpus) = generate_world(&cfg, 512, 4).unwrap();
        for ex in world.qa_examples() {
            let top = retrieve(&ex.question, &corpus, 1);
            assert!(
                contains_answer_span(&top[0].0.text, &ex.answers),
                "question {} retrieved {:?}",
                ex.question,
                top[0].0
            );
        }
    }

    #[test]
    fn conflicting_passage_outranks_faithful() {
        let cfg = WorldConfig { conflict_rate: 1.0, ..tiny_config() };
        let (world, corpus) = generate_world(&cfg, 512, 5).unwrap();
        for ex in world.qa_examples() {
            let top = retrieve(&ex.question, &corpus, 1);
            assert_eq!(top[0].0.kind, PassageKind::Conflicting, "question {}", ex.question);
            assert_eq!(top[0].0.source_triple, ex.source_triple);
        }
    }

    #[test]
    fn scenario_rule_application() {
        let cfg = WorldConfig { conflict_rate: 1.0, ..tiny_config() };
        let (world, corpus) = generate_world(&cfg, 512, 6).unwrap();
        let mut examples = world.qa_examples();
        examples[0].closed_book_correct = Some(true);
        for ex in examples.iter_mut().skip(1) {
            ex.closed_book_correct = Some(false);
        }
        let (set, stats) = build_finetune_set(&examples, &corpus, Criteria::Correct, NegativeMining::Hard, 0).unwrap();
        assert_eq!(stats.dropped_no_span, 0);
        let by_id: BTreeMap<&str, &FinetuneExample> =
            set.iter().map(|e| (e.question_id.as_str(), e)).collect();
        assert_eq!(by_id[examples[0].id.as_str()].scenario, Scenario::Adversarial);
        assert_eq!(by_id[examples[1].id.as_str()].scenario, Scenario::Grounded);
        // Invariants: grounded contexts carry a gold span, adversarial do not.
        for e in &set {
            let answers = vec![e.answer.clone()];
            match e.scenario {
                Scenario::Grounded => {
                    assert!(contains_answer_span(&e.assessor_context, &answers));
                    assert!(e.teacher_context.is_some());
                }
                Scenario::Adversarial => {
                    assert!(!contains_answer_span(&e.assessor_context, &answers));
                    assert!(e.teacher_context.is_none());
                }
            }
        }
    }

    #[test]
    fn unprobed_examples_rejected() {
        let cfg = tiny_config();
        let (world, corpus) = generate_world(&cfg, 512, 7).unwrap();
        let examples = world.qa_examples();
        assert!(build_finetune_set(&examples, &corpus, Criteria::Correct, NegativeMining::Hard, 0).is_err());
    }

    #[test]
    fn entity_names_have_no_containment() {
        let cfg = tiny_config();
        let (world, _) = generate_world(&cfg, 512, 8).unwrap();
        for (i, a) in world.entities.iter().enumerate() {
            for (j, b) in world.entities.iter().enumerate() {
                if i != j {
                    assert!(!a.contains(b.as_str()));
                }
            }
        }
    }

    #[test]
    fn world_round_trip() {
        let cfg = tiny_config();
        let (world, _) = generate_world(&cfg, 512, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.jsonl");
        save_world(&world, &path, "h").unwrap();
        let (loaded, hash) = load_world(&path, 512).unwrap();
        assert_eq!(hash, "h");
        assert_eq!(loaded.entities, world.entities);
        assert_eq!(serde_json::to_string(&loaded.triples).unwrap(), serde_json::to_string(&world.triples).unwrap());
        assert_eq!(loaded.vocab.len(), world.vocab.len());
    }

    #[test]
    fn recon_corpus_is_deterministic_and_bounded() {
        let cfg = tiny_config();
        let (world, _) = generate_world(&cfg, 512, 12).unwrap();
        let a = generate_recon_corpus(&world, 50, 4, 3);
        let b = generate_recon_corpus(&world, 50, 4, 3);
        assert_eq!(a, b);
        assert!(a.iter().all(|c| c.split_whitespace().count() <= 32));
        assert!(a.iter().all(|c| world.vocab.tokenize(c).is_ok()));
    }

    #[test]
    fn validation_split_sizes() {
        let items: Vec<u32> = (0..100).collect();
        let (train, val) = split_validation(&items, 0.1, 5);
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 90);
    }
}
