//! Generates a small seeded corpus and prints its provenance record.
//!
//! `cargo run --release --example synthetic_corpus -- [OUT_DIR]`

use std::path::{Path, PathBuf};

use capture_oneshot::dataset::{generate_synthetic_corpus, CorpusManifest, SynthOptions};
use capture_oneshot::Result;

pub fn run_example(out: &Path) -> Result<CorpusManifest> {
    let opts = SynthOptions {
        shots_per_class: 3,
        negatives: Some(4),
        ..SynthOptions::with_classes(3)
    };
    let manifest = generate_synthetic_corpus(&opts, out, 7)?;
    println!("{}", serde_json::to_string_pretty(&manifest.to_provenance_json()?)?);
    Ok(manifest)
}

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("capture_oneshot_corpus"));
    let manifest = run_example(&out)?;
    eprintln!("{} classes written to {}", manifest.num_classes(), out.display());
    Ok(())
}
