//! Feature-level and logit-level augmentation fusion on one window, plus a custom
//! order-altering transform with its own inverse.
//!
//! cargo run --example image_engineering

use std::sync::Arc;

use ndarray::{s, Array3, Axis};
use ovseg::augment::{first_category_features, second_category_logits, AugmentationSpec, SpatialTransform};
use ovseg::backbone::{EncoderConfig, VisionTransformer};
use ovseg::pipeline::window_logits;
use ovseg::raster::Raster;
use ovseg::synthetic::{blocks_scene, SyntheticVit};
use ovseg::text::{ClassEntry, HashingTextEncoder, TextBank, Vocabulary};

/// Quarter turn clockwise; only valid for square windows.
#[derive(Debug, Clone, Copy)]
struct QuarterTurn {
    clockwise: bool,
}

impl SpatialTransform for QuarterTurn {
    fn name(&self) -> String {
        if self.clockwise { "rotate_90" } else { "rotate_270" }.into()
    }

    fn apply_image(&self, image: &Raster) -> Raster {
        Raster::new(self.apply_grid(image.data())).expect("rotation keeps three channels")
    }

    fn apply_grid(&self, grid: &Array3<f32>) -> Array3<f32> {
        let mut g = grid.clone();
        g.swap_axes(1, 2);
        let g = if self.clockwise {
            g.slice_move(s![.., .., ..;-1])
        } else {
            g.slice_move(s![.., ..;-1, ..])
        };
        g.as_standard_layout().into_owned()
    }

    fn inverse(&self) -> Option<Arc<dyn SpatialTransform>> {
        Some(Arc::new(QuarterTurn {
            clockwise: !self.clockwise,
        }))
    }
}

fn argmax_agreement(a: &Array3<f32>, b: &Array3<f32>) -> f32 {
    let arg = |v: &Array3<f32>| -> Vec<usize> {
        v.lanes(Axis(0))
            .into_iter()
            .map(|l| {
                l.iter()
                    .enumerate()
                    .fold(0, |best, (i, &x)| if x > l[best] { i } else { best })
            })
            .collect()
    };
    let (x, y) = (arg(a), arg(b));
    x.iter().zip(&y).filter(|(p, q)| p == q).count() as f32 / x.len() as f32
}

fn main() -> ovseg::Result<()> {
    let vit = SyntheticVit::default();
    let tower = VisionTransformer::new(
        vit.weights(4),
        EncoderConfig {
            backbone_id: "synthetic".into(),
            patch_size: vit.patch_size,
            num_layers: vit.layers,
            intermediate_layers: vec![2, 3],
            ..EncoderConfig::default()
        },
    )?;
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
    let (window, _) = blocks_scene(32, 32, 5);

    let spec = AugmentationSpec::default();
    let fused = first_category_features(&window, &spec, &tower)?;
    println!(
        "category 1: {} passes averaged into {:?} features",
        1 + spec.category1.len(),
        fused.features.dim()
    );

    let plain = window_logits(&window, &tower, &bank, &AugmentationSpec::disabled(), 100.0)?;
    let l2 = second_category_logits(&window, &spec, &tower, &bank.refined_embeddings)?;
    println!(
        "category 2 argmax agrees with the plain window on {:.0}% of patches",
        100.0 * argmax_agreement(&plain.scores, &l2.scores)
    );

    let turned = AugmentationSpec {
        category2: Vec::new(),
        custom_category2: vec![Arc::new(QuarterTurn { clockwise: true })],
        ..AugmentationSpec::default()
    };
    let l2 = second_category_logits(&window, &turned, &tower, &bank.refined_embeddings)?;
    println!(
        "quarter turn argmax agrees on {:.0}% of patches",
        100.0 * argmax_agreement(&plain.scores, &l2.scores)
    );

    for lambda in [0.0, 0.5, 0.75, 1.0] {
        let mixed = window_logits(
            &window,
            &tower,
            &bank,
            &AugmentationSpec {
                lambda,
                ..AugmentationSpec::default()
            },
            100.0,
        )?;
        println!(
            "lambda {lambda:.2}: agreement with plain {:.0}%",
            100.0 * argmax_agreement(&plain.scores, &mixed.scores)
        );
    }
    Ok(())
}
