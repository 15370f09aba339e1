//! Sliding-window segmentation of a synthetic scene, written out as a colour map.
//!
//! cargo run --example slide_inference -- out.png

use std::sync::Arc;

use ovseg::augment::AugmentationSpec;
use ovseg::backbone::{DenseEncoder, EncoderConfig, VisionTransformer};
use ovseg::pamr::PamrConfig;
use ovseg::pipeline::{window_placements, InferenceConfig, Segmenter};
use ovseg::synthetic::{blocks_scene, SyntheticVit};
use ovseg::text::{ClassEntry, HashingTextEncoder, TextBank, Vocabulary};

fn main() -> ovseg::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "slide_inference.png".into());
    let vit = SyntheticVit::default();
    let tower: Arc<dyn DenseEncoder> = Arc::new(VisionTransformer::new(
        vit.weights(9),
        EncoderConfig {
            backbone_id: "synthetic".into(),
            patch_size: vit.patch_size,
            num_layers: vit.layers,
            intermediate_layers: vec![2, 3],
            ..EncoderConfig::default()
        },
    )?);
    let names = ["background", "red", "green", "blue"];
    let vocab = Vocabulary::new(
        "blocks",
        names.iter().enumerate().map(|(i, n)| ClassEntry::new(i, *n)).collect(),
        Some(0),
    )?;
    let bank = TextBank::build(
        &vocab,
        &["a photo of a {}.".into()],
        &HashingTextEncoder::new(16, 3),
        None,
        0.0,
    )?;

    let inference = InferenceConfig {
        short_side: Some(64),
        window: 32,
        stride: 8,
        ..InferenceConfig::default()
    };
    let (image, _) = blocks_scene(60, 90, 3);
    let resized = image.resize_short_side(64);
    println!(
        "{}x{} input, {} windows of {} at stride {}",
        resized.height(),
        resized.width(),
        window_placements(resized.height(), resized.width(), inference.window, inference.stride).len(),
        inference.window,
        inference.stride
    );

    let seg = Segmenter::new(
        tower,
        bank,
        AugmentationSpec::default(),
        inference,
        PamrConfig::default(),
    )?;
    let map = seg.run(&image)?;
    let mut counts = vec![0usize; map.num_classes()];
    for &l in map.labels.iter() {
        counts[l as usize] += 1;
    }
    for (name, n) in names.iter().zip(counts) {
        println!("{name:<10} {n} px");
    }
    map.colorized()
        .save(&out)
        .map_err(|e| ovseg::Error::Argument(format!("{out}: {e}")))?;
    println!("wrote {out}");
    Ok(())
}
