//! Check every training objective's reverse-mode gradients against f64
//! central finite differences on a 1-layer probe model.

fn main() -> care::Result<()> {
    let config = care::model::ModelConfig::probe();
    for (name, err) in care::trainer::objective_gradcheck(&config, 17)? {
        println!("{name:<16} max relative error {err:.3e}");
        assert!(err <= 1e-4);
    }
    println!("all objectives within 1e-4");
    Ok(())
}
