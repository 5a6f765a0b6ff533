//! Writes the synthetic desk corpora: `cargo run --example make_data -- <dir>`.

use std::path::PathBuf;

use familykit::synth::synthetic_text;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&dir)?;
    for (name, seed, bytes) in [("corpus.txt", 42, 100 * 1024), ("heldout.txt", 43, 16 * 1024), ("calib.txt", 44, 8 * 1024)] {
        std::fs::write(dir.join(name), synthetic_text(seed, bytes))?;
    }
    Ok(())
}
