//! Writes the bundled synthetic corpus: `gen_synth <out-dir>`.

use std::path::PathBuf;

use e2e_absa::corpus::render_conll;
use e2e_absa::synth;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/synth".into()));
    std::fs::create_dir_all(&dir)?;
    for (name, n, seed) in [("train", 1000, 100), ("dev", 200, 200), ("test", 200, 300)] {
        std::fs::write(dir.join(format!("{name}.txt")), render_conll(&synth::generate(n, seed)))?;
    }
    Ok(())
}
