//! Applies each capture-simulation technique on its own to a rendered
//! splash screen and writes one PNG per technique plus the full chain.
//!
//! `cargo run --release --example augment_preview -- [OUT_DIR]`

use std::path::{Path, PathBuf};

use capture_oneshot::augment::{apply_plan, sample_plan, AugmentConfig, Technique};
use capture_oneshot::dataset::render_splash;
use capture_oneshot::imaging::save_image;
use capture_oneshot::rng::stream_rng;
use capture_oneshot::Result;

pub fn run_example(out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let splash = render_splash(11, 0, 0, 128);
    let mut written = vec![out.join("clean.png")];
    save_image(&splash, &written[0])?;
    let mut configs: Vec<(String, AugmentConfig)> = Technique::ALL
        .iter()
        .map(|&t| (t.code().to_string(), AugmentConfig::only(&[t]).with_probability(1.0)))
        .collect();
    configs.push(("all".into(), AugmentConfig::default()));
    for (i, (name, cfg)) in configs.iter().enumerate() {
        let plan = sample_plan(cfg, &mut stream_rng(11, 0, i as u64))?;
        let path = out.join(format!("{name}.png"));
        save_image(&apply_plan(&splash, &plan)?, &path)?;
        println!("{name}: {}", plan.to_json());
        written.push(path);
    }
    Ok(written)
}

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("capture_oneshot_preview"));
    let written = run_example(&out)?;
    eprintln!("wrote {} images to {}", written.len(), out.display());
    Ok(())
}
