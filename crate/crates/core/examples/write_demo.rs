//! Regenerate the bundled demo data: `cargo run -p wsd-core --example write_demo -- data/demo`
fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/demo".into());
    let cfg = wsd_core::synthetic::write_demo(std::path::Path::new(&dir))?;
    println!("wrote {}", cfg.display());
    Ok(())
}
