//! Finite-difference check of every differentiable operation.

fn main() -> georecon::Result<()> {
    let entries = georecon::gradsuite::run(7)?;
    for e in &entries {
        println!("{e}");
    }
    let failed = entries.iter().filter(|e| !e.passes()).count();
    println!("{failed} of {} checks failed", entries.len());
    Ok(())
}
