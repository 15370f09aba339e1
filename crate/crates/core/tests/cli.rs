use std::path::{Path, PathBuf};
use std::process::Command;

use ovseg::cli::{gen_aux, GenAuxOptions};
use ovseg::config::RunConfig;
use ovseg::pipeline::window_placements;
use ovseg::synthetic::{noise_image, write_synthetic_checkpoint, SyntheticText, SyntheticVit};
use ovseg::text::{AuxCache, AuxKind, CommandClient};

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_checkpoint(
            &dir.path().join("ckpt"),
            &SyntheticVit::default(),
            &SyntheticText::default(),
            3,
        )
        .unwrap();
        let config = format!(
            "[encoder]\npatch_size = 8\nnum_layers = 4\nintermediate_layers = [2, 3]\n\
             [inference]\nshort_side = 40\nwindow = 32\nstride = 16\n\
             [text]\ntemplates = \"plain\"\n\
             [assets]\nweights_dir = {:?}\n",
            dir.path().join("ckpt").display().to_string()
        );
        std::fs::write(dir.path().join("tiny.toml"), config).unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        for i in 0..3 {
            noise_image(36, 50, i)
                .to_rgb8()
                .save(dir.path().join(format!("images/im{i}.png")))
                .unwrap();
        }
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ovseg(&self, args: &[&str]) -> std::process::Output {
        let config = self.path("tiny.toml");
        Command::new(env!("CARGO_BIN_EXE_ovseg"))
            .args(args)
            .args(["--preset", "voc", "--config", config.to_str().unwrap()])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn dump_attention_rows_carry_mass_two() {
    let fx = Fixture::new();
    let image = fx.path("images/im0.png");
    let out = fx.path("attn");
    let run = fx.ovseg(&[
        "dump-attention",
        image.to_str().unwrap(),
        "--patch",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for layer in 1..=4 {
        let dump = json(&out.join(format!("layer{layer:02}_patch0.json")));
        let row: Vec<f64> = dump["row"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(row.len(), 17);
        assert!((row.iter().sum::<f64>() - 2.0).abs() <= 1e-4, "layer {layer}");
        let img = image::open(out.join(format!("layer{layer:02}_patch0.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (4, 4));
    }
    assert!(out.join("config.toml").is_file());

    let last = fx.ovseg(&[
        "dump-attention",
        image.to_str().unwrap(),
        "--patch",
        "15",
        "--layers",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(last.status.success());
    let rejected = fx.ovseg(&[
        "dump-attention",
        image.to_str().unwrap(),
        "--patch",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(rejected.status.code(), Some(2));
}

#[test]
fn segment_is_deterministic_and_names_outputs_after_inputs() {
    let fx = Fixture::new();
    let images = fx.path("images");
    let a = fx.path("seg-a");
    let b = fx.path("seg-b");
    for out in [&a, &b] {
        let run = fx.ovseg(&[
            "segment",
            images.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--overlay",
        ]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    for i in 0..3 {
        let x = std::fs::read(a.join(format!("im{i}.png"))).unwrap();
        assert_eq!(x, std::fs::read(b.join(format!("im{i}.png"))).unwrap());
        let labels = image::open(a.join(format!("im{i}.png"))).unwrap().to_luma8();
        assert_eq!(labels.dimensions(), (50, 36));
        assert!(labels.pixels().all(|p| p.0[0] < 21));
        assert!(a.join(format!("im{i}_overlay.png")).is_file());
    }
    let palette = json(&a.join("palette.json"));
    assert_eq!(palette.as_object().unwrap().len(), 21);
    assert_eq!(palette["1"]["name"], "aeroplane");
    let snapshot = RunConfig::build(None, Some(&a.join("config.toml")), &[]).unwrap();
    assert_eq!(snapshot.encoder.patch_size, 8);
}

#[test]
fn unreadable_image_is_skipped_but_reported() {
    let fx = Fixture::new();
    std::fs::write(fx.path("images/broken.png"), b"not a png").unwrap();
    let out = fx.path("seg");
    let run = fx.ovseg(&[
        "segment",
        fx.path("images").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(3));
    for i in 0..3 {
        assert!(out.join(format!("im{i}.png")).is_file());
    }
}

#[test]
fn invalid_config_aborts_before_inference() {
    let fx = Fixture::new();
    let out = fx.path("seg");
    let run = fx.ovseg(&[
        "segment",
        fx.path("images").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--inference.strid",
        "8",
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!out.join("im0.png").exists());
}

#[test]
fn eval_with_the_same_seed_is_repeatable() {
    let fx = Fixture::new();
    std::fs::create_dir_all(fx.path("labels")).unwrap();
    for i in 0..3 {
        let gray = image::GrayImage::from_fn(50, 36, |x, y| image::Luma([((x / 10 + y / 12) % 21) as u8]));
        gray.save(fx.path(&format!("labels/im{i}.png"))).unwrap();
    }
    std::fs::write(fx.path("ids.txt"), "im0\nim1\nim2\n").unwrap();
    std::fs::write(
        fx.path("data.toml"),
        "split = \"ids.txt\"\nimage_dir = \"images\"\nlabel_dir = \"labels\"\nimage_ext = \".png\"\n",
    )
    .unwrap();
    let manifest = fx.path("data.toml");
    let mut mious = Vec::new();
    for out in ["ev-a", "ev-b"] {
        let out = fx.path(out);
        let run = fx.ovseg(&[
            "eval",
            "--manifest",
            manifest.to_str().unwrap(),
            "--subset",
            "2",
            "--seed",
            "7",
            "--no-pamr",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        let report = json(&out.join("report.json"));
        assert_eq!(report["samples"].as_array().unwrap().len(), 2);
        assert!(out.join("per_class.csv").is_file());
        mious.push(report["miou"].as_f64().unwrap());
    }
    assert_eq!(mious[0], mious[1]);
}

#[test]
fn doubling_the_stride_cuts_windows_about_fourfold() {
    // (1344 - 224) is a multiple of both strides, so no clamped extra window
    let fine = window_placements(1344, 1344, 224, 56).len();
    let coarse = window_placements(1344, 1344, 224, 112).len();
    assert_eq!((fine, coarse), (21 * 21, 11 * 11));
}

fn small_vocab(dir: &Path) -> RunConfig {
    std::fs::write(
        dir.join("vocab.toml"),
        "background = 0\n[[class]]\nid = 0\nname = \"background\"\n[[class]]\nid = 1\nname = \"cat\"\n",
    )
    .unwrap();
    std::fs::write(dir.join("bg.txt"), "sky\nwall\n").unwrap();
    std::fs::write(
        dir.join("run.toml"),
        "[text]\nvocabulary = \"vocab.toml\"\nbackground = \"bg.txt\"\naux_cache = \"aux.toml\"\n",
    )
    .unwrap();
    RunConfig::build(None, Some(&dir.join("run.toml")), &[]).unwrap()
}

fn script(dir: &Path, name: &str, body: &str) -> String {
    use std::os::unix::fs::PermissionsExt;
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path.display().to_string()
}

#[test]
fn gen_aux_fills_misses_and_keeps_hits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_vocab(dir.path());
    let opts = GenAuxOptions {
        kind: AuxKind::Definition,
        cache: None,
        dry_run: true,
        force: false,
    };
    let dry = gen_aux(&cfg, &opts, None).unwrap();
    assert_eq!(dry.prompts.len(), 4);
    assert!(!dir.path().join("aux.toml").exists());

    let echo = CommandClient::from_command_line(&script(
        dir.path(),
        "llm.sh",
        "cat > /dev/null; echo 'A thing seen in photos.'",
    ))
    .unwrap();
    let live = GenAuxOptions {
        dry_run: false,
        ..opts.clone()
    };
    let first = gen_aux(&cfg, &live, Some(&echo)).unwrap();
    assert_eq!(first.generated.len(), 4);
    let cache = AuxCache::load(&dir.path().join("aux.toml")).unwrap();
    for name in ["background", "cat", "sky", "wall"] {
        assert!(!cache.get(name, AuxKind::Definition).unwrap().is_empty());
    }

    let failing = CommandClient::from_command_line(&script(dir.path(), "fail.sh", "exit 1")).unwrap();
    let again = gen_aux(&cfg, &live, Some(&failing)).unwrap();
    assert_eq!(again.cached.len(), 4);
    assert!(again.generated.is_empty());
}

#[test]
fn gen_aux_failures_keep_the_partial_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_vocab(dir.path());
    let body = "p=$(cat); case \"$p\" in *wall*) exit 3;; esac; echo 'Something.'";
    let flaky = CommandClient::from_command_line(&script(dir.path(), "flaky.sh", body)).unwrap();
    let opts = GenAuxOptions {
        kind: AuxKind::Synonym,
        cache: None,
        dry_run: false,
        force: false,
    };
    let err = gen_aux(&cfg, &opts, Some(&flaky)).unwrap_err();
    assert!(err.to_string().contains("wall"), "{err}");
    let cache = AuxCache::load(&dir.path().join("aux.toml")).unwrap();
    assert!(cache.get("cat", AuxKind::Synonym).is_some());
    assert!(cache.get("wall", AuxKind::Synonym).is_none());
}

#[test]
fn gen_aux_dry_run_through_the_binary_prints_prompts() {
    let dir = tempfile::tempdir().unwrap();
    small_vocab(dir.path());
    let run = Command::new(env!("CARGO_BIN_EXE_ovseg"))
        .args([
            "gen-aux",
            "--config",
            dir.path().join("run.toml").to_str().unwrap(),
            "--dry-run",
            "--kind",
            "synonym",
        ])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert_eq!(stdout.matches("--- ").count(), 4);
    assert!(stdout.contains("cat"));
}

#[test]
fn every_ablation_grid_applies_to_its_preset() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/ablations");
    let mut seen = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let grid = ovseg::cli::load_grid(&path).unwrap();
        assert!(!grid.is_empty(), "{}", path.display());
        for preset in ["voc", "object", "context", "stuff"] {
            let base = RunConfig::preset(preset).unwrap();
            for (name, overrides) in &grid {
                let v = base
                    .with_overrides(overrides)
                    .unwrap_or_else(|e| panic!("{} {name}: {e}", path.display()));
                v.validate()
                    .unwrap_or_else(|e| panic!("{} {name}: {e}", path.display()));
            }
        }
        seen += 1;
    }
    assert_eq!(seen, 9);
}
