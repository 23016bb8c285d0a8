//! Generate a synthetic fact world, then show how conflict injection
//! steers top-1 retrieval: a conflicted fact's doubled-subject passage
//! outranks the faithful one, so RAG reads the wrong object.

use care::world::{generate_world, retrieve, PassageKind, WorldConfig};

fn main() -> care::Result<()> {
    let config = WorldConfig { conflict_rate: 0.5, ..WorldConfig::default() };
    let (world, corpus) = generate_world(&config, 512, 42)?;
    println!(
        "{} triples, {} passages, vocab {}",
        world.triples.len(),
        corpus.len(),
        world.vocab.len()
    );

    let clean = world.triples.iter().find(|t| !t.conflicted).unwrap();
    let conflicted = world.triples.iter().find(|t| t.conflicted).unwrap();
    for t in [clean, conflicted] {
        let q = world.question_text(t);
        let top = retrieve(&q, &corpus, 2);
        println!("\nq: {q}   (gold: {})", world.answer_text(t));
        for (p, score) in top {
            println!("  {:9.4}  [{:?}] {}", score, p.kind, p.text);
        }
    }

    // with equal-length subject mentions the faithful passage never wins a
    // conflicted query
    let mut wrong_at_top = 0;
    let mut total = 0;
    for t in world.triples.iter().filter(|t| t.conflicted) {
        total += 1;
        let top = retrieve(&world.question_text(t), &corpus, 1);
        if top[0].0.kind == PassageKind::Conflicting {
            wrong_at_top += 1;
        }
    }
    println!("\nconflicting passage at rank 1 for {wrong_at_top}/{total} conflicted facts");
    Ok(())
}
