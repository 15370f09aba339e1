//! Writes a small random checkpoint in the downloaded layout and loads it back.
//!
//! cargo run --example synthetic_checkpoint -- /tmp/tiny-clip

use ovseg::config::{Engine, RunConfig};
use ovseg::synthetic::{write_synthetic_checkpoint, SyntheticText, SyntheticVit};

fn main() -> ovseg::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "tiny-clip".into());
    let dir = std::path::PathBuf::from(dir);
    let vit = SyntheticVit::default();
    write_synthetic_checkpoint(&dir, &vit, &SyntheticText::default(), 7)?;

    let cfg = RunConfig::build(
        None,
        None,
        &[
            ("encoder.patch_size".into(), vit.patch_size.to_string()),
            ("encoder.num_layers".into(), vit.layers.to_string()),
            ("encoder.intermediate_layers".into(), "[2, 3]".into()),
            ("assets.weights_dir".into(), format!("{:?}", dir.display().to_string())),
        ],
    )?;
    let engine = Engine::load(&cfg)?;
    println!(
        "loaded {} layers, width {}, from {}",
        engine.vision.num_layers(),
        engine.vision.width(),
        dir.display()
    );
    Ok(())
}
