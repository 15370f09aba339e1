//! Smooths noisy class probabilities along the edges of a synthetic scene.
//!
//! cargo run --example pamr_refine

use ndarray::Array3;
use ovseg::pamr::{refine, PamrConfig};
use ovseg::pipeline::{segment, InferenceConfig};
use ovseg::synthetic::blocks_scene;
use ovseg::volume::{LogitVolume, Resolution};
use rand::{Rng, SeedableRng};

fn accuracy(pred: &ndarray::Array2<u32>, truth: &ndarray::Array2<u32>) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn main() -> ovseg::Result<()> {
    let (image, truth) = blocks_scene(64, 96, 1);
    let classes = 4;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut scores = Array3::<f32>::zeros((classes, image.height(), image.width()));
    for ((y, x), &t) in truth.indexed_iter() {
        for c in 0..classes {
            let signal = if c as u32 == t { 1.0 } else { 0.0 };
            scores[[c, y, x]] = signal + rng.gen_range(-0.9..0.9);
        }
    }
    let probs = LogitVolume::raw(scores, Resolution::Pixel).softmax(5.0);
    let cfg = InferenceConfig::default();
    let before = segment(&probs, &cfg)?;
    println!(
        "before refinement: {:.1}% pixels correct",
        100.0 * accuracy(&before.labels, &truth)
    );

    for iterations in [1, 5, 10] {
        let refined = refine(
            &probs,
            &image,
            &PamrConfig {
                iterations,
                ..PamrConfig::default()
            },
        )?;
        let after = segment(&refined, &cfg)?;
        println!(
            "{iterations:>2} iterations: {:.1}% pixels correct",
            100.0 * accuracy(&after.labels, &truth)
        );
    }
    Ok(())
}
