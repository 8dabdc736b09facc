//! Regenerates the checked-in starter data: `cargo run --example write_starter`.
fn main() -> std::io::Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/starter");
    capstep_core::starter::StarterSet::generate().write_to(&dir)
}
