mod oracle;

use std::sync::Arc;

use ndarray::Array3;
use ovseg::augment::{
    first_category_features, fuse_logits, second_category_logits, AugmentationSpec, FusionSpace, PixelAugmentation,
    SpatialOp, SpatialTransform,
};
use ovseg::backbone::{DenseEncoder, EncoderConfig, VisionTransformer};
use ovseg::pamr::PamrConfig;
use ovseg::pipeline::{count_map, merge_groups, segment, window_logits, InferenceConfig, Segmenter};
use ovseg::raster::Raster;
use ovseg::synthetic::{blocks_scene, mirrored_image, noise_image, SyntheticVit};
use ovseg::tensor::resize_bilinear;
use ovseg::volume::{LogitVolume, Resolution};
use proptest::prelude::*;

fn vit_encoder(seed: u64) -> VisionTransformer {
    let vit = SyntheticVit::default();
    let cfg = EncoderConfig {
        backbone_id: "synthetic".into(),
        patch_size: vit.patch_size,
        num_layers: vit.layers,
        intermediate_layers: vec![2, 3],
        ..EncoderConfig::default()
    };
    VisionTransformer::new(vit.weights(seed), cfg).unwrap()
}

fn small_inference(stride: usize) -> InferenceConfig {
    InferenceConfig {
        short_side: None,
        window: 32,
        stride,
        apply_pamr: false,
        ..InferenceConfig::default()
    }
}

fn max_diff(a: &Array3<f32>, b: &Array3<f32>) -> f32 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn only(ops: &[SpatialOp], lambda: f32) -> AugmentationSpec {
    AugmentationSpec {
        category1: Vec::new(),
        category2: ops.to_vec(),
        lambda,
        ..AugmentationSpec::default()
    }
}

#[test]
fn flip_of_a_symmetric_window_reproduces_the_plain_logits() {
    let bank = oracle::toy_bank(&["sky", "road", "tree"], &[], 7);
    let text = &bank.refined_embeddings;
    let wide = oracle::toy_bank(&["sky", "road", "tree"], &[], 16);
    let window = mirrored_image(32, 32, 4);
    let spec = only(&[SpatialOp::HorizontalFlip], 0.5);

    let stats = oracle::PatchStatsEncoder { patch: 8 };
    let plain = ovseg::backbone::cosine_logits(&stats.encode(&window).unwrap(), text);
    let l2 = second_category_logits(&window, &spec, &stats, text).unwrap();
    assert!(max_diff(&plain, &l2.scores) <= 1e-4);

    // a ViT is not flip-equivariant, but the flipped window is the same window, so
    // undoing the flip mirrors the plain grid
    let vit = vit_encoder(3);
    let text = &wide.refined_embeddings;
    let plain = ovseg::backbone::cosine_logits(&vit.encode(&window).unwrap(), text);
    let l2 = second_category_logits(&window, &spec, &vit, text).unwrap();
    let mirrored = SpatialOp::HorizontalFlip.apply_grid(&plain);
    assert!(max_diff(&mirrored, &l2.scores) <= 1e-4);
}

#[test]
fn reversed_grids_match_flip_equivariant_encoding_for_any_image() {
    let bank = oracle::toy_bank(&["sky", "road", "tree"], &[], 7);
    let stats = oracle::PatchStatsEncoder { patch: 8 };
    let window = noise_image(32, 40, 9);
    let plain = ovseg::backbone::cosine_logits(&stats.encode(&window).unwrap(), &bank.refined_embeddings);
    for op in [SpatialOp::HorizontalFlip, SpatialOp::VerticalFlip, SpatialOp::Rotate180] {
        let l2 = second_category_logits(&window, &only(&[op], 0.5), &stats, &bank.refined_embeddings).unwrap();
        assert!(max_diff(&plain, &l2.scores) <= 1e-5, "{op:?}");
    }
}

#[test]
fn second_category_matches_a_hand_written_loop() {
    let bank = oracle::toy_bank(&["sky", "road", "tree", "car"], &[], 16);
    let text = &bank.refined_embeddings;
    let vit = vit_encoder(5);
    let window = noise_image(32, 32, 10);
    let got = second_category_logits(
        &window,
        &only(&[SpatialOp::HorizontalFlip, SpatialOp::VerticalFlip], 0.5),
        &vit,
        text,
    )
    .unwrap();

    let (h, w) = (window.height(), window.width());
    let flip = |horizontal: bool| {
        let d = window.data();
        Raster::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            if horizontal {
                d[[c, y, w - 1 - x]]
            } else {
                d[[c, h - 1 - y, x]]
            }
        }))
        .unwrap()
    };
    let mut want = vec![vec![vec![0.0f64; 4]; 4]; text.nrows()];
    for horizontal in [true, false] {
        let f = vit.encode(&flip(horizontal)).unwrap();
        let grid = oracle::cosine_grid(&f.patch_features, text, f.grid);
        for (t, plane) in grid.iter().enumerate() {
            for y in 0..4 {
                for x in 0..4 {
                    let (sy, sx) = if horizontal { (y, 3 - x) } else { (3 - y, x) };
                    want[t][y][x] += plane[sy][sx] / 2.0;
                }
            }
        }
    }
    for t in 0..text.nrows() {
        for y in 0..4 {
            for x in 0..4 {
                assert!((want[t][y][x] - got.scores[[t, y, x]] as f64).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn degenerate_coefficients_are_exact() {
    let bank = oracle::toy_bank(&["sky", "road"], &[], 16);
    let vit = vit_encoder(6);
    let window = noise_image(32, 32, 11);

    // no order-preserving augmentation: the fused features are the normalised originals
    let spec = AugmentationSpec::disabled();
    let fused = first_category_features(&window, &spec, &vit).unwrap();
    let mut direct = vit.encode(&window).unwrap().patch_features;
    ovseg::tensor::l2_normalize_rows(&mut direct);
    assert_eq!(fused.features, direct);

    // lambda = 1 keeps only the order-preserving logits, lambda = 0 only the reversed ones
    let mut spec = AugmentationSpec {
        lambda: 1.0,
        ..AugmentationSpec::default()
    };
    let full = window_logits(&window, &vit, &bank, &spec, 100.0).unwrap();
    let l1_spec = AugmentationSpec {
        category2: Vec::new(),
        ..spec.clone()
    };
    assert_eq!(full, window_logits(&window, &vit, &bank, &l1_spec, 100.0).unwrap());
    spec.lambda = 0.0;
    let zero = window_logits(&window, &vit, &bank, &spec, 100.0).unwrap();
    let l2 = second_category_logits(&window, &spec, &vit, &bank.refined_embeddings).unwrap();
    assert_eq!(zero.scores, l2.scores);
}

#[test]
fn probability_space_fusion_stays_normalised() {
    let bank = oracle::toy_bank(&["sky", "road", "tree"], &["wall"], 16);
    let vit = vit_encoder(7);
    let window = noise_image(32, 32, 12);
    let spec = AugmentationSpec {
        fusion_space: FusionSpace::Probabilities,
        ..AugmentationSpec::default()
    };
    let fused = window_logits(&window, &vit, &bank, &spec, 100.0).unwrap();
    assert!(fused.normalized);
    assert!(fused.max_mass_error() < 1e-5);
    let merged = merge_groups(&fused, &bank.group_map, bank.num_classes()).unwrap();
    assert!(merged.max_mass_error() < 1e-5);
}

#[test]
fn one_window_slide_equals_direct_window_inference() {
    let bank = oracle::toy_bank(&["sky", "road", "tree"], &["wall", "floor"], 16);
    let vit: Arc<dyn DenseEncoder> = Arc::new(vit_encoder(8));
    let image = noise_image(32, 32, 13);
    let aug = AugmentationSpec::default();
    for stride in [8, 16, 32] {
        let seg = Segmenter::new(
            vit.clone(),
            bank.clone(),
            aug.clone(),
            small_inference(stride),
            PamrConfig::default(),
        )
        .unwrap();
        let slid = seg.slide_inference(&image).unwrap();

        let logits = window_logits(&image, vit.as_ref(), &bank, &aug, 100.0).unwrap();
        let up = LogitVolume::raw(resize_bilinear(logits.scores.view(), 32, 32), Resolution::Pixel);
        let direct = merge_groups(&up, &bank.group_map, bank.num_classes())
            .unwrap()
            .softmax(100.0);
        assert!(max_diff(&slid.scores, &direct.scores) <= 1e-6, "stride {stride}");
    }
}

#[test]
fn library_bilinear_matches_the_loop_oracle() {
    let src = noise_image(4, 5, 14).into_inner();
    let up = resize_bilinear(src.view(), 32, 40);
    for c in 0..3 {
        let plane: oracle::Mat = (0..4)
            .map(|y| (0..5).map(|x| src[[c, y, x]] as f64).collect())
            .collect();
        let want = oracle::bilinear(&plane, 32, 40);
        for y in 0..32 {
            for x in 0..40 {
                assert!((want[y][x] - up[[c, y, x]] as f64).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn text_width_mismatch_is_a_dimension_error() {
    let bank = oracle::toy_bank(&["sky", "road"], &[], 8);
    let err = window_logits(
        &noise_image(32, 32, 1),
        &vit_encoder(1),
        &bank,
        &AugmentationSpec::default(),
        100.0,
    )
    .unwrap_err();
    assert!(matches!(err, ovseg::Error::Dimension(_)), "{err}");
}

#[test]
fn every_pixel_is_covered_at_the_configured_strides() {
    for stride in [28, 56, 112, 224] {
        for (h, w) in [(224, 224), (336, 448), (336, 500), (375, 336), (229, 1000)] {
            let counts = count_map(h, w, 224, stride);
            assert!(counts.iter().all(|&c| c >= 1.0), "{h}x{w} stride {stride}");
        }
    }
}

#[test]
fn segmentation_of_a_scene_is_deterministic_and_in_vocabulary() {
    let bank = oracle::toy_bank(&["background", "red", "green", "blue"], &["wall"], 16);
    let vit: Arc<dyn DenseEncoder> = Arc::new(vit_encoder(9));
    let (image, _) = blocks_scene(40, 56, 3);
    let inference = InferenceConfig {
        short_side: Some(40),
        apply_pamr: true,
        ..small_inference(8)
    };
    let seg = Segmenter::new(vit, bank, AugmentationSpec::default(), inference, PamrConfig::default()).unwrap();
    let a = seg.run(&image).unwrap();
    let b = seg.run(&image).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height(), a.width()), (40, 56));
    assert!(a.labels.iter().all(|&l| l < 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn logit_fusion_is_linear(values in proptest::collection::vec(-1.0f32..1.0, 24), lambda in 0.0f32..=1.0) {
        let a = LogitVolume::raw(Array3::from_shape_vec((2, 3, 2), values[..12].to_vec()).unwrap(), Resolution::Patch);
        let b = LogitVolume::raw(Array3::from_shape_vec((2, 3, 2), values[12..].to_vec()).unwrap(), Resolution::Patch);
        let fused = fuse_logits(&a, &b, lambda).unwrap();
        for ((f, x), y) in fused.scores.iter().zip(&a.scores).zip(&b.scores) {
            prop_assert!((f - (lambda * x + (1.0 - lambda) * y)).abs() <= 1e-6);
        }
    }

    #[test]
    fn argmax_ignores_the_logit_scale(values in proptest::collection::vec(-1.0f32..1.0, 3 * 4 * 5), scale in 1.0f32..100.0) {
        let raw = LogitVolume::raw(Array3::from_shape_vec((3, 4, 5), values).unwrap(), Resolution::Pixel);
        let cfg = InferenceConfig::default();
        let a = segment(&raw.softmax(scale), &cfg).unwrap();
        let b = segment(&raw.softmax(1.0), &cfg).unwrap();
        // softmax is monotone, so only exact ties after rounding could differ
        let ties = raw.softmax(scale).scores.lanes(ndarray::Axis(0)).into_iter().any(|l| {
            let mut v: Vec<f32> = l.to_vec();
            v.sort_by(|x, y| y.partial_cmp(x).unwrap());
            v[0] == v[1]
        });
        prop_assume!(!ties);
        prop_assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn merged_rows_take_the_group_maximum(values in proptest::collection::vec(-5.0f32..5.0, 3 * 2 * 2), owner in 0usize..2) {
        let raw = LogitVolume::raw(Array3::from_shape_vec((3, 2, 2), values.clone()).unwrap(), Resolution::Pixel);
        let groups = [owner, 1 - owner, owner];
        let merged = merge_groups(&raw, &groups, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let v = |r: usize| values[r * 4 + y * 2 + x];
                let mut want = [f32::NEG_INFINITY; 2];
                for (r, &g) in groups.iter().enumerate() {
                    want[g] = want[g].max(v(r));
                }
                prop_assert_eq!(merged.scores[[0, y, x]], want[0]);
                prop_assert_eq!(merged.scores[[1, y, x]], want[1]);
            }
        }
    }

    #[test]
    fn pixel_augmentations_keep_the_shape(seed in any::<u64>(), h in 8usize..24, w in 8usize..24) {
        let img = noise_image(h, w, seed);
        for aug in [PixelAugmentation::GaussianBlur { kernel: 5, sigma: 1.0 }, PixelAugmentation::Grayscale, PixelAugmentation::Identity] {
            let out = aug.apply(&img).unwrap();
            prop_assert_eq!((out.height(), out.width()), (h, w));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
