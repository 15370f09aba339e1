//! Command-line front end: `segment`, `eval`, `gen-aux` and `dump-attention`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::assets::AssetRef;
use crate::config::{Engine, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{run_experiment, write_palette, DatasetManifest, EvalReport, ExperimentOptions};
use crate::raster::Raster;
use crate::text::aux::clean_reply;
use crate::text::{auxiliary_prompt, AuxKind, ChatCompletionsClient, CommandClient, LlmClient, TextBank};

#[derive(Debug, Parser)]
#[command(
    name = "ovseg",
    version,
    about = "Training-free open-vocabulary semantic segmentation with CLIP"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Built-in preset: voc, object, context or stuff.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Config file layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set inference.stride=56` (same as `--inference.stride 56`).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Directory holding the pretrained checkpoints.
    #[arg(long, global = true)]
    pub weights_dir: Option<PathBuf>,
    /// Output directory (defaults to the config's `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment images or directories of images.
    Segment {
        /// Image files, or directories scanned for jpg/jpeg/png
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the image blended with its colour labels.
        #[arg(long)]
        overlay: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate on a dataset manifest and write mIoU reports.
    Eval {
        /// Dataset manifest (TOML), overrides `eval.manifest`
        #[arg(long)]
        manifest: Option<String>,
        /// Evaluate a seeded random subset of this many samples
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the affinity refinement
        #[arg(long)]
        no_pamr: bool,
        /// Sliding-window stride in pixels
        #[arg(long)]
        stride: Option<usize>,
        /// Ablation grid: a TOML file of named override sets, evaluated one after another.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Keep every predicted label raster.
        #[arg(long)]
        persist: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fill the auxiliary-text cache with definitions or synonyms from a language model.
    GenAux {
        /// definition or synonym (defaults to `text.aux_kind`)
        #[arg(long)]
        kind: Option<AuxKind>,
        /// Cache file (defaults to `text.aux_cache`).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// OpenAI-compatible base URL, e.g. http://localhost:8080/v1.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value = "llama-3-8b-instruct")]
        model: String,
        /// Program that reads a prompt on stdin and answers on stdout.
        #[arg(long, conflicts_with = "endpoint")]
        command: Option<String>,
        /// Print the prompts that would be sent and exit.
        #[arg(long)]
        dry_run: bool,
        /// Regenerate entries that are already cached.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the attention row of one patch, per layer, as grayscale images.
    DumpAttention {
        /// Resized and centre-cropped to one inference window
        image: PathBuf,
        /// Patch index in row-major order, below the number of patches.
        #[arg(long)]
        patch: usize,
        /// Layers to dump (1-based); defaults to every layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Dotted `(key, value)` override pairs.
pub type Overrides = Vec<(String, String)>;

/// Pulls `--section.key value` and `--section.key=value` pairs out of the argument list.
pub fn split_dotted_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy().into_owned();
        let Some(flag) = text.strip_prefix("--").filter(|f| {
            let name = f.split('=').next().unwrap_or("");
            name.contains('.') && !name.starts_with('.')
        }) else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let value = iter
                    .next()
                    .ok_or_else(|| Error::Argument(format!("--{flag} needs a value")))?;
                overrides.push((flag.to_string(), value.to_string_lossy().into_owned()));
            }
        }
    }
    Ok((rest, overrides))
}

fn parse_set(entries: &[String]) -> Result<Vec<(String, String)>> {
    entries
        .iter()
        .map(|e| {
            e.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got `{e}`")))
        })
        .collect()
}

fn load_config(args: &ConfigArgs, mut overrides: Vec<(String, String)>) -> Result<RunConfig> {
    let mut all = parse_set(&args.set)?;
    all.append(&mut overrides);
    let mut cfg = RunConfig::build(args.preset.as_deref(), args.config.as_deref(), &all)?;
    if let Some(dir) = &args.weights_dir {
        cfg.assets.weights_dir = Some(std::path::absolute(dir).map_err(|e| Error::io(dir, e))?);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
    }
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (rest, dotted) = split_dotted_overrides(args.into_iter().map(Into::into).collect())?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version; a closed stdout is not an error here
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(Error::Argument(e.to_string())),
    };
    match cli.command {
        Command::Segment { inputs, overlay, cfg } => segment(&load_config(&cfg, dotted)?, &inputs, overlay).map(|_| ()),
        Command::Eval {
            manifest,
            subset,
            seed,
            no_pamr,
            stride,
            grid,
            persist,
            cfg,
        } => {
            let mut extra = dotted;
            if let Some(m) = manifest {
                let abs = std::path::absolute(&m).map_err(|e| Error::io(&m, e))?;
                extra.push(("eval.manifest".into(), format!("{:?}", abs.display().to_string())));
            }
            if let Some(n) = subset {
                extra.push(("eval.subset".into(), n.to_string()));
            }
            if let Some(s) = seed {
                extra.push(("eval.seed".into(), s.to_string()));
            }
            if no_pamr {
                extra.push(("inference.apply_pamr".into(), "false".into()));
            }
            if let Some(s) = stride {
                extra.push(("inference.stride".into(), s.to_string()));
            }
            if persist {
                extra.push(("eval.persist_maps".into(), "true".into()));
            }
            eval(&load_config(&cfg, extra)?, grid.as_deref()).map(|_| ())
        }
        Command::GenAux {
            kind,
            cache,
            endpoint,
            model,
            command,
            dry_run,
            force,
            cfg,
        } => {
            let cfg = load_config(&cfg, dotted)?;
            let client: Option<Box<dyn LlmClient>> = match (endpoint, command) {
                (Some(url), _) => Some(Box::new(ChatCompletionsClient::new(url, model))),
                (None, Some(cmd)) => Some(Box::new(
                    CommandClient::from_command_line(&cmd)
                        .ok_or_else(|| Error::Argument("--command must not be empty".into()))?,
                )),
                (None, None) => None,
            };
            let opts = GenAuxOptions {
                kind: kind.unwrap_or(cfg.text.aux_kind),
                cache,
                dry_run,
                force,
            };
            gen_aux(&cfg, &opts, client.as_deref()).map(|_| ())
        }
        Command::DumpAttention {
            image,
            patch,
            layers,
            cfg,
        } => dump_attention(&load_config(&cfg, dotted)?, &image, patch, &layers).map(|_| ()),
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

/// Segments every input, writing `<stem>.png` labels (plus `<stem>_overlay.png`) into the
/// output directory. A failing image is reported and skipped; the first failure is
/// returned once all images were attempted.
pub fn segment(cfg: &RunConfig, inputs: &[PathBuf], overlay: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let files = expand_inputs(inputs)?;
    let engine = Engine::load(cfg)?;
    let segmenter = engine.segmenter(cfg, None)?;
    let out = cfg.output_dir();
    cfg.write_snapshot(&out)?;
    write_palette(&out.join("palette.json"), &segmenter.bank.class_names)?;

    let mut written = Vec::new();
    let mut first_error = None;
    for file in &files {
        let result = (|| -> Result<PathBuf> {
            let image = Raster::load(file)?;
            let map = segmenter.run(&image)?;
            let stem = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let path = out.join(format!("{stem}.png"));
            map.save_labels(&path)?;
            if overlay {
                let over = out.join(format!("{stem}_overlay.png"));
                map.overlay(&image)
                    .save(&over)
                    .map_err(|source| Error::Image { path: over, source })?;
            }
            Ok(path)
        })();
        match result {
            Ok(path) => {
                tracing::info!(input = %file.display(), output = %path.display(), "segmented");
                written.push(path);
            }
            Err(e) => {
                tracing::error!(input = %file.display(), "{e}");
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(written),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    #[serde(rename = "variant")]
    variants: Vec<GridVariant>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridVariant {
    name: String,
    #[serde(default)]
    set: toml::Table,
}

/// Loads an ablation grid as `(name, overrides)` pairs.
pub fn load_grid(path: &Path) -> Result<Vec<(String, Overrides)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grid: Grid = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok(grid
        .variants
        .into_iter()
        .map(|v| {
            let sets = v.set.into_iter().map(|(k, val)| (k, val.to_string())).collect();
            (v.name, sets)
        })
        .collect())
}

fn manifest_for(cfg: &RunConfig) -> Result<(RunConfig, DatasetManifest)> {
    let reference = cfg
        .eval
        .manifest
        .as_deref()
        .ok_or_else(|| Error::config("no dataset manifest (pass --manifest or set eval.manifest)"))?;
    let path = match cfg.asset(reference) {
        AssetRef::File(p) => p,
        AssetRef::Builtin(_) => return Err(Error::config("manifests cannot be built-in assets")),
    };
    let manifest = DatasetManifest::load(&path)?;
    let mut cfg = cfg.clone();
    let manifest_dir = path.parent().unwrap_or(Path::new("."));
    let absolute = |r: &str| match AssetRef::parse(r, manifest_dir) {
        AssetRef::Builtin(_) => r.to_string(),
        AssetRef::File(p) => p.display().to_string(),
    };
    if let Some(v) = &manifest.vocabulary {
        cfg.text.vocabulary = absolute(v);
    }
    if let Some(b) = &manifest.background {
        cfg.text.background = Some(absolute(b));
    }
    Ok((cfg, manifest))
}

/// Runs the configured evaluation (or every variant of `grid`) and writes
/// `report.json`, `per_class.csv` and `config.toml` per run.
pub fn eval(cfg: &RunConfig, grid: Option<&Path>) -> Result<Vec<(String, EvalReport)>> {
    let variants = match grid {
        Some(path) => load_grid(path)?,
        None => vec![("default".to_string(), Vec::new())],
    };
    let mut configs = Vec::new();
    for (name, overrides) in &variants {
        let v = cfg.with_overrides(overrides)?;
        let (v, manifest) = manifest_for(&v)?;
        v.validate()?;
        configs.push((name.clone(), v, manifest));
    }
    let out_root = cfg.output_dir();
    let mut engine: Option<Engine> = None;
    let mut bank_cache: Option<(String, TextBank)> = None;
    let mut reports = Vec::new();
    for (name, v, manifest) in configs {
        if engine.as_ref().is_none_or(|e| e.backbone_id != v.encoder.backbone_id) {
            engine = Some(Engine::load(&v)?);
            bank_cache = None;
        }
        let engine = engine.as_ref().expect("loaded above");
        let text_key = toml::to_string(&v.text).expect("text config serializes");
        let bank = match &bank_cache {
            Some((key, bank)) if *key == text_key => bank.clone(),
            _ => {
                let bank = v.build_text_bank(&engine.text, None)?;
                bank_cache = Some((text_key, bank.clone()));
                bank
            }
        };
        let segmenter = v.segmenter(std::sync::Arc::new(engine.vision_encoder(&v)?), bank)?;
        let dir = if grid.is_some() {
            out_root.join(&name)
        } else {
            out_root.clone()
        };
        v.write_snapshot(&dir)?;
        let exclude = if v.eval.include_background {
            None
        } else {
            v.load_vocabulary()?.background
        };
        let opts = ExperimentOptions {
            subset: v.eval.subset,
            seed: v.eval.seed,
            persist_dir: v.eval.persist_maps.then(|| dir.join("maps")),
            exclude_class: exclude,
        };
        let mut report = run_experiment(&manifest, &segmenter, &opts)?;
        report.config = Some(v.snapshot());
        report.write_json(&dir.join("report.json"))?;
        report.write_csv(&dir.join("per_class.csv"))?;
        match report.miou_percent() {
            Some(m) => println!("{name}: mIoU {m:.2} over {} samples", report.samples.len()),
            None => println!("{name}: {}", report.status),
        }
        reports.push((name, report));
    }
    if grid.is_some() {
        let path = out_root.join("summary.csv");
        let csv_err = |e: csv::Error| Error::io(&path, e.into());
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["variant", "miou", "samples"]).map_err(csv_err)?;
        for (name, r) in &reports {
            let m = r.miou_percent().map(|m| format!("{m:.2}")).unwrap_or_default();
            w.write_record([name.as_str(), m.as_str(), &r.samples.len().to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct GenAuxOptions {
    pub kind: AuxKind,
    pub cache: Option<PathBuf>,
    pub dry_run: bool,
    pub force: bool,
}

/// Outcome of a cache-filling run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenAuxSummary {
    pub generated: Vec<String>,
    pub cached: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub prompts: Vec<String>,
}

/// Generates an auxiliary text for every class name and background phrase that lacks
/// one. The cache is saved even when some requests fail; the failures are then reported
/// as an error.
pub fn gen_aux(cfg: &RunConfig, opts: &GenAuxOptions, client: Option<&dyn LlmClient>) -> Result<GenAuxSummary> {
    let vocab = cfg.load_vocabulary()?;
    let path = match &opts.cache {
        Some(p) => Some(p.clone()),
        None => match cfg.text.aux_cache.as_deref().map(|r| cfg.asset(r)) {
            Some(AssetRef::File(p)) => Some(p),
            // a dry run only reads, so the shipped caches are fine
            Some(AssetRef::Builtin(_)) if opts.dry_run => None,
            Some(AssetRef::Builtin(_)) => {
                return Err(Error::config("text.aux_cache is built in and read-only; pass --cache"))
            }
            None => return Err(Error::config("no cache file (pass --cache or set text.aux_cache)")),
        },
    };
    let mut cache = match &path {
        Some(p) => crate::text::AuxCache::load_or_default(p)?,
        None => cfg.load_aux_cache()?,
    };
    let mut names = vocab.class_names();
    names.extend(vocab.background_phrases.iter().cloned());
    let mut seen = std::collections::HashSet::new();
    names.retain(|n| seen.insert(n.clone()));

    let mut summary = GenAuxSummary::default();
    let todo: Vec<String> = names
        .into_iter()
        .filter(|n| {
            let hit = cache.get(n, opts.kind).is_some();
            if hit && !opts.force {
                summary.cached.push(n.clone());
            }
            opts.force || !hit
        })
        .collect();
    if opts.dry_run {
        for name in &todo {
            let prompt = auxiliary_prompt(name, opts.kind);
            println!("--- {name}\n{prompt}\n");
            summary.prompts.push(prompt);
        }
        return Ok(summary);
    }
    if todo.is_empty() {
        return Ok(summary);
    }
    let client = client.ok_or_else(|| {
        Error::config(format!(
            "{} entries missing and no language model configured (--endpoint or --command)",
            todo.len()
        ))
    })?;
    for name in todo {
        match client.complete(&auxiliary_prompt(&name, opts.kind)) {
            Ok(reply) => {
                let text = clean_reply(&reply, opts.kind);
                if text.is_empty() {
                    summary.failed.push((name, "empty reply".into()));
                } else {
                    cache.insert(&name, opts.kind, &text, &client.model_tag(), opts.force);
                    summary.generated.push(name);
                }
            }
            Err(reason) => summary.failed.push((name, reason)),
        }
    }
    if let Some(path) = &path {
        cache.save(path)?;
    }
    if summary.failed.is_empty() {
        Ok(summary)
    } else {
        let list: Vec<String> = summary.failed.iter().map(|(c, r)| format!("{c} ({r})")).collect();
        Err(Error::Generation {
            class: list.join(", "),
            reason: format!(
                "{} of {} requests failed; partial cache saved",
                summary.failed.len(),
                summary.failed.len() + summary.generated.len()
            ),
        })
    }
}

/// Per-layer attention row of one patch.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AttentionDump {
    pub layer: usize,
    pub patch: usize,
    pub mode: String,
    /// Head-averaged row over all tokens, class token first.
    pub row: Vec<f32>,
    pub row_sum: f32,
    pub image: PathBuf,
}

/// Resizes the short side to the window, centre-crops a square window and writes one
/// grayscale image plus a JSON row per requested layer.
pub fn dump_attention(cfg: &RunConfig, image: &Path, patch: usize, layers: &[usize]) -> Result<Vec<AttentionDump>> {
    cfg.validate()?;
    let engine = Engine::load(cfg)?;
    let encoder = engine.vision_encoder(cfg)?;
    let window = cfg.inference.window;
    let raster = Raster::load(image)?.resize_short_side(window);
    let (top, left) = ((raster.height() - window) / 2, (raster.width() - window) / 2);
    let crop = raster.crop(top, left, window, window)?;
    let grid = window / cfg.encoder.patch_size;
    let n = grid * grid;
    if patch >= n {
        return Err(Error::Argument(format!(
            "patch index {patch} out of range for {n} patches"
        )));
    }
    let num_layers = engine.vision.num_layers();
    let wanted: Vec<usize> = if layers.is_empty() {
        (1..=num_layers).collect()
    } else {
        layers.to_vec()
    };
    if let Some(bad) = wanted.iter().find(|&&l| l == 0 || l > num_layers) {
        return Err(Error::Argument(format!("layer {bad} outside [1, {num_layers}]")));
    }
    let extra: Vec<usize> = wanted.iter().copied().filter(|&l| l < num_layers).collect();
    let normalized = crop.normalized(crate::raster::CLIP_MEAN, crate::raster::CLIP_STD);
    let (_, trace) = encoder.encode_traced(&normalized, &extra)?;

    let out = cfg.output_dir();
    cfg.write_snapshot(&out)?;
    let mut dumps = Vec::new();
    for &layer in &wanted {
        let map = if layer == num_layers {
            &trace.final_map
        } else {
            &trace
                .recorded
                .iter()
                .find(|(l, _)| *l == layer)
                .expect("recorded on request")
                .1
        };
        let row: Vec<f32> = map.head_mean().row(patch + 1).to_vec();
        let patches = &row[1..];
        let (lo, hi) = patches
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels: Vec<u8> = patches
            .iter()
            .map(|&v| (255.0 * (v - lo) / span).round() as u8)
            .collect();
        let path = out.join(format!("layer{layer:02}_patch{patch}.png"));
        image::GrayImage::from_raw(grid as u32, grid as u32, pixels)
            .expect("one pixel per patch")
            .save(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        let dump = AttentionDump {
            layer,
            patch,
            mode: cfg.encoder.attention_mode.to_string(),
            row_sum: row.iter().map(|&v| v as f64).sum::<f64>() as f32,
            row,
            image: path.clone(),
        };
        let json = out.join(format!("layer{layer:02}_patch{patch}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(&dump).expect("json")).map_err(|e| Error::io(&json, e))?;
        dumps.push(dump);
    }
    Ok(dumps)
}
