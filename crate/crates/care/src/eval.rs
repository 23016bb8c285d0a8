//! Evaluation harness: span exact-match scoring, prompt templates for the
//! three answering methods (closed-book, context concatenation, compressed
//! memory), and conflict-aware metrics split by the base model's
//! closed-book behaviour.

use crate::assessor::{encode, AssessorInput};
use crate::error::{Error, Result};
use crate::model::{generate_greedy, ParameterStore, SequenceElement};
use crate::world::{retrieve, Passage, QAExample, Vocab, EOS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// Lowercase, strip punctuation, collapse whitespace, drop a leading
/// article.
pub fn normalize(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    if matches!(words.first(), Some(&"a") | Some(&"an") | Some(&"the")) {
        words.remove(0);
    }
    words.join(" ")
}

/// True when any normalized gold answer is a non-empty substring of the
/// normalized output.
pub fn span_em(output: &str, golds: &[String]) -> bool {
    let out = normalize(output);
    golds.iter().any(|g| {
        let g = normalize(g);
        !g.is_empty() && out.contains(&g)
    })
}

/// Same predicate applied to a candidate context passage.
pub fn contains_answer_span(text: &str, golds: &[String]) -> bool {
    span_em(text, golds)
}

// --- Prompt templates -----------------------------------------------------

pub fn closed_book_prompt(vocab: &Vocab, question: &str) -> Result<Vec<u32>> {
    vocab.tokenize(&format!("answer the questions : question : {question} the answer is :"))
}

pub fn rag_prompt(vocab: &Vocab, question: &str, background: &str) -> Result<Vec<u32>> {
    vocab.tokenize(&format!(
        "refer to the background document and answer the questions : background : {background} question : {question} the answer is :"
    ))
}

/// Same layout as [`rag_prompt`] with the background slot filled by memory
/// embedding rows instead of tokens.
pub fn memory_prompt(
    vocab: &Vocab,
    question: &str,
    memory: &[Vec<f32>],
) -> Result<Vec<SequenceElement<f32>>> {
    let head = vocab.tokenize("refer to the background document and answer the questions : background :")?;
    let tail = vocab.tokenize(&format!("question : {question} the answer is :"))?;
    let mut elements: Vec<SequenceElement<f32>> =
        head.into_iter().map(SequenceElement::Token).collect();
    elements.extend(memory.iter().cloned().map(SequenceElement::Embedding));
    elements.extend(tail.into_iter().map(SequenceElement::Token));
    Ok(elements)
}

// --- Method runners --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    ClosedBook,
    RagConcat,
    Care,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ClosedBook => "closed",
            Method::RagConcat => "rag",
            Method::Care => "care",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(Method::ClosedBook),
            "rag" => Ok(Method::RagConcat),
            "care" => Ok(Method::Care),
            other => Err(Error::Config(format!("unknown method {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub output: String,
    pub correct: bool,
}

/// One evaluated question with per-method outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub results: BTreeMap<String, MethodResult>,
    pub retrieved_id: Option<usize>,
    pub retrieved_has_answer: Option<bool>,
}

/// Wall-clock split between context compression and token generation.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Timing {
    pub encode_secs: f64,
    pub generate_secs: f64,
}

/// Run one method over all examples, filling its slot in `records`.
/// `records` must be pre-seeded by [`init_records`]. Generation is greedy,
/// zero-shot, capped at `max_new_tokens`.
pub fn run_method(
    method: Method,
    store: &ParameterStore<f32>,
    vocab: &Vocab,
    examples: &[QAExample],
    corpus: &[Passage],
    records: &mut [EvalRecord],
    max_new_tokens: usize,
) -> Result<Timing> {
    if examples.len() != records.len() {
        return Err(Error::Precondition("records do not match examples".into()));
    }
    let mut timing = Timing::default();
    for (ex, rec) in examples.iter().zip(records.iter_mut()) {
        let elements: Vec<SequenceElement<f32>> = match method {
            Method::ClosedBook => closed_book_prompt(vocab, &ex.question)?
                .into_iter()
                .map(SequenceElement::Token)
                .collect(),
            Method::RagConcat | Method::Care => {
                let top = retrieve(&ex.question, corpus, 1);
                let passage = top
                    .first()
                    .map(|(p, _)| *p)
                    .ok_or_else(|| Error::Precondition("empty retrieval corpus".into()))?;
                rec.retrieved_id = Some(passage.id);
                rec.retrieved_has_answer = Some(contains_answer_span(&passage.text, &ex.answers));
                match method {
                    Method::RagConcat => rag_prompt(vocab, &ex.question, &passage.text)?
                        .into_iter()
                        .map(SequenceElement::Token)
                        .collect(),
                    _ => {
                        let t0 = Instant::now();
                        let context = vocab.tokenize(&passage.text)?;
                        let question = vocab.tokenize(&ex.question)?;
                        let memory = encode(store, &AssessorInput::finetune(question, context))?;
                        timing.encode_secs += t0.elapsed().as_secs_f64();
                        memory_prompt(vocab, &ex.question, &memory)?
                    }
                }
            }
        };
        let t0 = Instant::now();
        let out = generate_greedy(store, &elements, max_new_tokens, &[EOS])?;
        timing.generate_secs += t0.elapsed().as_secs_f64();
        let text = vocab.decode(&out);
        let correct = span_em(&text, &ex.answers);
        rec.results.insert(method.as_str().to_string(), MethodResult { output: text, correct });
    }
    Ok(timing)
}

pub fn init_records(examples: &[QAExample]) -> Vec<EvalRecord> {
    examples
        .iter()
        .map(|ex| EvalRecord {
            question_id: ex.id.clone(),
            question: ex.question.clone(),
            answers: ex.answers.clone(),
            results: BTreeMap::new(),
            retrieved_id: None,
            retrieved_has_answer: None,
        })
        .collect()
}

// --- Metrics ----------------------------------------------------------------

/// Count-based metrics for one method. Rates are derived from the counts;
/// an empty subset leaves the corresponding rate `None`.
#[derive(Debug, Clone, Serialize)]
pub struct MethodMetrics {
    pub method: String,
    pub n: usize,
    pub correct: usize,
    /// Correct counts over the closed-book-correct subset.
    pub resilience_correct: usize,
    pub resilience_n: usize,
    /// Correct counts over the closed-book-incorrect subset.
    pub boost_correct: usize,
    pub boost_n: usize,
}

impl MethodMetrics {
    pub fn overall(&self) -> Option<f64> {
        rate(self.correct, self.n)
    }

    pub fn resilience(&self) -> Option<f64> {
        rate(self.resilience_correct, self.resilience_n)
    }

    pub fn boost(&self) -> Option<f64> {
        rate(self.boost_correct, self.boost_n)
    }
}

fn rate(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub methods: Vec<MethodMetrics>,
    /// Fraction of questions whose top-1 retrieval carries a gold span.
    pub recall_at_1: Option<f64>,
}

/// Aggregate records into per-method metrics. The resilience/boost split
/// follows the closed-book method's correctness on the same records; both
/// stay zero-width when closed-book results are absent.
pub fn compute_metrics(records: &[EvalRecord]) -> MetricsReport {
    let closed_key = Method::ClosedBook.as_str();
    let mut methods: Vec<&str> = Vec::new();
    for rec in records {
        for key in rec.results.keys() {
            if !methods.iter().any(|m| m == key) {
                methods.push(key);
            }
        }
    }
    methods.sort_unstable();

    let mut out = Vec::new();
    for method in methods {
        let mut m = MethodMetrics {
            method: method.to_string(),
            n: 0,
            correct: 0,
            resilience_correct: 0,
            resilience_n: 0,
            boost_correct: 0,
            boost_n: 0,
        };
        for rec in records {
            let Some(res) = rec.results.get(method) else { continue };
            m.n += 1;
            if res.correct {
                m.correct += 1;
            }
            if let Some(cb) = rec.results.get(closed_key) {
                if cb.correct {
                    m.resilience_n += 1;
                    if res.correct {
                        m.resilience_correct += 1;
                    }
                } else {
                    m.boost_n += 1;
                    if res.correct {
                        m.boost_correct += 1;
                    }
                }
            }
        }
        out.push(m);
    }

    let with_retrieval: Vec<&EvalRecord> =
        records.iter().filter(|r| r.retrieved_has_answer.is_some()).collect();
    let recall_at_1 = rate(
        with_retrieval.iter().filter(|r| r.retrieved_has_answer == Some(true)).count(),
        with_retrieval.len(),
    );
    MetricsReport { methods: out, recall_at_1 }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "—".to_string(),
    }
}

/// Plain-text table: one row per method, All / Resilience / Boost columns.
pub fn render_table(report: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<8} {:>7} {:>7} {:>7} {:>6}\n", "method", "all", "res", "boost", "n"));
    for m in &report.methods {
        s.push_str(&format!(
            "{:<8} {:>7} {:>7} {:>7} {:>6}\n",
            m.method,
            cell(m.overall()),
            cell(m.resilience()),
            cell(m.boost()),
            m.n
        ));
    }
    if let Some(r) = report.recall_at_1 {
        s.push_str(&format!("recall@1 {r:.3}\n"));
    }
    s
}

pub fn render_csv(report: &MetricsReport) -> String {
    let mut s = String::from("method,all,resilience,boost,n,resilience_n,boost_n\n");
    for m in &report.methods {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.method,
            cell(m.overall()),
            cell(m.resilience()),
            cell(m.boost()),
            m.n,
            m.resilience_n,
            m.boost_n
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize("  The  Eiffel   TOWER! "), "eiffel tower");
        assert_eq!(normalize("An apple."), "apple");
        assert_eq!(normalize("the"), "");
    }

    #[test]
    fn span_em_cases() {
        let golds = vec!["kora".to_string()];
        assert!(span_em("the answer is kora .", &golds));
        assert!(span_em("Kora!", &golds));
        assert!(!span_em("the answer is vemu .", &golds));
        // empty gold never matches
        assert!(!span_em("anything", &[String::new()]));
        // equal-length distinct names never contain each other
        assert!(!span_em("kord", &golds));
    }

    fn record(id: &str, cb: bool, rag: bool) -> EvalRecord {
        let mut results = BTreeMap::new();
        results.insert("closed".to_string(), MethodResult { output: String::new(), correct: cb });
        results.insert("rag".to_string(), MethodResult { output: String::new(), correct: rag });
        EvalRecord {
            question_id: id.to_string(),
            question: String::new(),
            answers: vec!["x".to_string()],
            results,
            retrieved_id: None,
            retrieved_has_answer: None,
        }
    }

    #[test]
    fn metrics_match_brute_force_recount() {
        // correctness patterns chosen to exercise all four cells
        let patterns = [(true, true), (true, false), (false, true), (false, false), (true, true), (false, true)];
        let records: Vec<EvalRecord> = patterns
            .iter()
            .enumerate()
            .map(|(i, &(cb, rag))| record(&format!("q{i}"), cb, rag))
            .collect();
        let report = compute_metrics(&records);
        let rag = report.methods.iter().find(|m| m.method == "rag").unwrap();

        // independent recount
        let mut res_n = 0;
        let mut res_c = 0;
        let mut boost_n = 0;
        let mut boost_c = 0;
        for &(cb, r) in &patterns {
            if cb {
                res_n += 1;
                if r {
                    res_c += 1;
                }
            } else {
                boost_n += 1;
                if r {
                    boost_c += 1;
                }
            }
        }
        assert_eq!(rag.resilience_n, res_n);
        assert_eq!(rag.resilience_correct, res_c);
        assert_eq!(rag.boost_n, boost_n);
        assert_eq!(rag.boost_correct, boost_c);
        // overall decomposes exactly into the two subsets
        assert_eq!(rag.correct, res_c + boost_c);
        assert_eq!(rag.n, res_n + boost_n);
    }

    #[test]
    fn empty_subset_is_undefined_not_zero() {
        let records = vec![record("q0", true, true)];
        let report = compute_metrics(&records);
        let rag = report.methods.iter().find(|m| m.method == "rag").unwrap();
        assert!(rag.boost().is_none());
        assert_eq!(rag.resilience(), Some(1.0));
        assert!(render_table(&report).contains('—'));
    }

    #[test]
    fn overall_is_weighted_mean_of_subsets() {
        let patterns = [(true, true), (true, false), (false, true), (false, false), (false, true)];
        let records: Vec<EvalRecord> = patterns
            .iter()
            .enumerate()
            .map(|(i, &(cb, rag))| record(&format!("q{i}"), cb, rag))
            .collect();
        let report = compute_metrics(&records);
        let rag = report.methods.iter().find(|m| m.method == "rag").unwrap();
        let res = rag.resilience().unwrap();
        let boost = rag.boost().unwrap();
        let n_r = rag.resilience_n as f64;
        let n_b = rag.boost_n as f64;
        let recombined = (res * n_r + boost * n_b) / (n_r + n_b);
        assert!((rag.overall().unwrap() - recombined).abs() < 1e-12);
    }

    #[test]
    fn method_parse_round_trip() {
        for m in [Method::ClosedBook, Method::RagConcat, Method::Care] {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("other").is_err());
    }
}
