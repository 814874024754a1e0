use ereformer::diagnostics::{run_gradchecks, CheckGroup};

/// Finite-difference checks of one module group, `loss` unless named:
/// `cargo run --release --example gradcheck -- stf`.
fn main() -> ereformer::Result<()> {
    let group: CheckGroup = std::env::args().nth(1).as_deref().unwrap_or("loss").parse()?;
    let results = run_gradchecks(group, |r| println!("{r}"))?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(())
}
