//! Row mass of every attention mode, and how far each surgery setting moves the patch
//! features away from the unmodified tower.
//!
//! cargo run --example attention_surgery

use ovseg::backbone::{AttentionMode, EncoderConfig, VisionTransformer};
use ovseg::synthetic::{noise_image, SyntheticVit};

fn main() -> ovseg::Result<()> {
    let vit = SyntheticVit::default();
    let base = EncoderConfig {
        backbone_id: "synthetic".into(),
        patch_size: vit.patch_size,
        num_layers: vit.layers,
        intermediate_layers: vec![2, 3],
        ..EncoderConfig::default()
    };
    let tower = VisionTransformer::new(vit.weights(1), base.clone())?;
    let image = noise_image(32, 48, 2);

    for mode in AttentionMode::ALL {
        let model = tower.with_config(EncoderConfig {
            attention_mode: mode,
            ..base.clone()
        })?;
        let (_, trace) = model.encode_traced(&image, &[])?;
        let sums = trace.final_map.row_sums();
        let (lo, hi) = sums
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "{:<12} row sums in [{lo:.5}, {hi:.5}], expected {}",
            mode.as_str(),
            mode.row_mass()
        );
    }

    let reference = tower.with_config(EncoderConfig {
        patch_size: base.patch_size,
        num_layers: base.num_layers,
        ..EncoderConfig::reference()
    })?;
    let plain = reference.encode_image(&image)?;
    let variants = [
        ("surgery", base.clone()),
        (
            "no fusion",
            EncoderConfig {
                use_intermediate_fusion: false,
                ..base.clone()
            },
        ),
        (
            "keep ffn",
            EncoderConfig {
                drop_final_ffn: false,
                ..base.clone()
            },
        ),
    ];
    for (name, cfg) in variants {
        let out = tower.with_config(cfg)?.encode_image(&image)?;
        let mean_cos = out
            .patch_features
            .outer_iter()
            .zip(plain.patch_features.outer_iter())
            .map(|(a, b)| a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt()))
            .sum::<f32>()
            / out.patch_features.nrows() as f32;
        println!("{name:<10} mean cosine to the unmodified tower {mean_cos:.4}");
    }
    Ok(())
}
