//! The evaluation arithmetic on hand-countable records: Span EM
//! normalization, then the Resilience/Boost decomposition where the
//! closed-book run defines the two regimes.

use care::eval::{compute_metrics, render_table, span_em, EvalRecord, MethodResult};
use std::collections::BTreeMap;

fn main() {
    for (out, gold, want) in [
        ("The answer is Paris.", "Paris", true),
        ("unknown", "Paris", false),
        ("the eiffel   TOWER!", "Eiffel Tower", true),
        ("A Parisian cafe", "Paris", false), // no substring match after tokenizing normalization
    ] {
        let got = span_em(out, &[gold.to_string()]);
        println!("span_em({out:?}, {gold:?}) = {got}");
        assert_eq!(got, want);
    }

    // four questions; closed-book knows q1,q2. The method under test gets
    // q1 (resilient) and q3 (boosted): Res 1/2, Boost 1/2.
    let mut records = Vec::new();
    for (id, closed_ok, rag_ok) in
        [("q1", true, true), ("q2", true, false), ("q3", false, true), ("q4", false, false)]
    {
        let mut results = BTreeMap::new();
        results.insert("closed".to_string(), MethodResult { output: String::new(), correct: closed_ok });
        results.insert("rag".to_string(), MethodResult { output: String::new(), correct: rag_ok });
        records.push(EvalRecord {
            question_id: id.to_string(),
            question: String::new(),
            answers: vec!["x".to_string()],
            results,
            retrieved_id: Some(0),
            retrieved_has_answer: Some(true),
        });
    }
    let report = compute_metrics(&records);
    print!("\n{}", render_table(&report));

    let rag = report.methods.iter().find(|m| m.method == "rag").unwrap();
    assert_eq!(rag.resilience(), Some(0.5));
    assert_eq!(rag.boost(), Some(0.5));
    // closed-book against itself is definitional: Res 1, Boost 0
    let closed = report.methods.iter().find(|m| m.method == "closed").unwrap();
    assert_eq!(closed.resilience(), Some(1.0));
    assert_eq!(closed.boost(), Some(0.0));
}
