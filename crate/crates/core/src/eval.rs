//! Dataset manifests, label rasters, confusion-matrix mIoU and experiment runs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{SegmentationMap, Segmenter};
use crate::raster::Raster;

fn default_ignore() -> u32 {
    255
}

fn default_image_ext() -> String {
    ".jpg".into()
}

fn default_label_ext() -> String {
    ".png".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    #[serde(default)]
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// A list of (image, label) pairs, given inline as `[[sample]]` tables or through a
/// split file of ids joined with `image_dir`/`label_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_dir: Option<PathBuf>,
    #[serde(default = "default_image_ext")]
    pub image_ext: String,
    #[serde(default = "default_label_ext")]
    pub label_ext: String,
    #[serde(default, rename = "sample")]
    pub samples: Vec<SampleEntry>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        m.resolve()?;
        Ok(m)
    }

    /// Parses the manifest and checks that every listed file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        m.check_files()?;
        Ok(m)
    }

    fn join(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn resolve(&mut self) -> Result<()> {
        if let Some(split) = self.split.clone() {
            let (Some(images), Some(labels)) = (self.image_dir.clone(), self.label_dir.clone()) else {
                return Err(Error::config(
                    "manifest: `split` needs both `image_dir` and `label_dir`",
                ));
            };
            let split = self.join(&split);
            let text = std::fs::read_to_string(&split).map_err(|e| Error::io(&split, e))?;
            for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                self.samples.push(SampleEntry {
                    id: id.to_string(),
                    image: images.join(format!("{id}{}", self.image_ext)),
                    label: labels.join(format!("{id}{}", self.label_ext)),
                });
            }
        }
        let base = self.base_dir.clone();
        for s in &mut self.samples {
            for p in [&mut s.image, &mut s.label] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if s.id.is_empty() {
                s.id = s
                    .image
                    .file_stem()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
            }
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(Error::config(format!("manifest: sample id `{}` listed twice", s.id)));
            }
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        let missing: Vec<&Path> = self
            .samples
            .iter()
            .flat_map(|s| [s.image.as_path(), s.label.as_path()])
            .filter(|p| !p.is_file())
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let shown: Vec<String> = missing.iter().take(3).map(|p| p.display().to_string()).collect();
        Err(Error::asset(
            format!("dataset `{}`", self.name),
            format!("{} listed files missing, e.g. {}", missing.len(), shown.join(", ")),
        ))
    }
}

/// Reads a single-channel label PNG, returning the stored values (palette indices for
/// paletted files, not colours).
pub fn read_label(path: &Path) -> Result<Array2<u32>> {
    let bad = |reason: String| Error::Sample {
        sample: path.display().to_string(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed) {
        return Err(bad(format!(
            "expected a single-channel label raster, got {:?}",
            info.color_type
        )));
    }
    let bits = info.bit_depth as usize;
    let line = info.line_size;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let row = &buf[y * line..(y + 1) * line];
        match bits {
            16 => u16::from_be_bytes([row[2 * x], row[2 * x + 1]]) as u32,
            8 => row[x] as u32,
            _ => {
                let per_byte = 8 / bits;
                let byte = row[x / per_byte];
                let shift = 8 - bits * (x % per_byte + 1);
                ((byte >> shift) & ((1 << bits) - 1) as u8) as u32
            }
        }
    }))
}

/// Pixel counts with truth along rows and prediction along columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: Array2::zeros((classes, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    /// Adds one sample; pixels whose truth is `ignore_index` are skipped.
    pub fn add(
        &mut self,
        truth: &Array2<u32>,
        pred: &Array2<u32>,
        ignore_index: u32,
    ) -> std::result::Result<(), String> {
        if truth.dim() != pred.dim() {
            return Err(format!(
                "prediction is {:?} but the label is {:?}",
                pred.dim(),
                truth.dim()
            ));
        }
        let c = self.classes() as u32;
        for (&t, &p) in truth.iter().zip(pred.iter()) {
            if t == ignore_index {
                continue;
            }
            if t >= c {
                return Err(format!("label value {t} is neither below {c} nor {ignore_index}"));
            }
            if p >= c {
                return Err(format!("predicted label {p} is not below {c}"));
            }
            self.counts[[t as usize, p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// `(TP, TP + FP + FN)` per class.
    fn class_counts(&self) -> Vec<(u64, u64)> {
        (0..self.classes())
            .map(|c| {
                let tp = self.counts[[c, c]];
                let fn_ = self.counts.row(c).sum() - tp;
                let fp = self.counts.column(c).sum() - tp;
                (tp, tp + fp + fn_)
            })
            .collect()
    }

    /// IoU per class, `None` where the class is absent from both truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        self.class_counts()
            .into_iter()
            .map(|(tp, union)| (union > 0).then(|| tp as f64 / union as f64))
            .collect()
    }

    /// Mean IoU over classes with non-zero union, skipping `exclude` if given.
    pub fn miou(&self, exclude: Option<usize>) -> Option<f64> {
        let ratios: Vec<(u64, u64)> = self
            .class_counts()
            .into_iter()
            .enumerate()
            .filter(|&(c, (_, union))| Some(c) != exclude && union > 0)
            .map(|(_, r)| r)
            .collect();
        (!ratios.is_empty()).then(|| mean_of_ratios(&ratios))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `a/b` terms. Summed as an exact fraction while it fits, so the result is
/// the correctly rounded value; large vocabularies fall back to a float sum.
fn mean_of_ratios(ratios: &[(u64, u64)]) -> f64 {
    let exact = ratios.iter().try_fold((0u128, 1u128), |(num, den), &(a, b)| {
        let num = num.checked_mul(b as u128)?.checked_add((a as u128).checked_mul(den)?)?;
        let den = den.checked_mul(b as u128)?;
        let g = gcd(num, den).max(1);
        Some((num / g, den / g))
    });
    const EXACT_F64: u128 = 1 << 53;
    if let Some((num, den)) = exact {
        if let Some(den) = den.checked_mul(ratios.len() as u128) {
            let g = gcd(num, den).max(1);
            let (num, den) = (num / g, den / g);
            if num <= EXACT_F64 && den <= EXACT_F64 {
                return num as f64 / den as f64;
            }
        }
    }
    ratios.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / ratios.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: usize,
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub status: String,
    pub dataset: String,
    pub samples: Vec<String>,
    pub miou: Option<f64>,
    pub per_class: Vec<ClassIou>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

impl EvalReport {
    pub fn from_confusion(
        dataset: &str,
        samples: Vec<String>,
        confusion: &ConfusionMatrix,
        class_names: &[String],
        exclude: Option<usize>,
    ) -> Self {
        let status = if samples.is_empty() { "no samples" } else { "ok" };
        Self {
            status: status.into(),
            dataset: dataset.into(),
            samples,
            miou: confusion.miou(exclude),
            per_class: confusion
                .per_class_iou()
                .into_iter()
                .enumerate()
                .map(|(class_id, iou)| ClassIou {
                    class_id,
                    name: class_names.get(class_id).cloned().unwrap_or_default(),
                    iou,
                })
                .collect(),
            confusion: confusion.counts.outer_iter().map(|r| r.to_vec()).collect(),
            excluded_class: exclude,
            config: None,
        }
    }

    pub fn miou_percent(&self) -> Option<f64> {
        self.miou.map(|m| m * 100.0)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `class_id,name,iou` rows; classes without a defined IoU get an empty cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["class_id", "name", "iou"]).map_err(csv_err)?;
        for c in &self.per_class {
            let iou = c.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([c.class_id.to_string(), c.name.clone(), iou])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// mIoU over paired predictions and labels.
pub fn compute_miou(
    predictions: &[SegmentationMap],
    truths: &[Array2<u32>],
    num_classes: usize,
    ignore_index: u32,
) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut confusion = ConfusionMatrix::new(num_classes);
    for (i, (p, t)) in predictions.iter().zip(truths).enumerate() {
        confusion
            .add(t, &p.labels, ignore_index)
            .map_err(|reason| Error::Sample {
                sample: i.to_string(),
                reason,
            })?;
    }
    let names: Vec<String> = (0..num_classes).map(|c| c.to_string()).collect();
    let ids = (0..predictions.len()).map(|i| i.to_string()).collect();
    Ok(EvalReport::from_confusion("", ids, &confusion, &names, None))
}

/// Indices of the evaluated samples: all of them, or a seeded random subset in
/// ascending order.
pub fn select_subset(total: usize, subset: Option<usize>, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    match subset {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
            idx
        }
        _ => idx,
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    pub subset: Option<usize>,
    pub seed: u64,
    /// Where to write per-sample label rasters, if anywhere.
    pub persist_dir: Option<PathBuf>,
    /// A class left out of the mean (e.g. background).
    pub exclude_class: Option<usize>,
}

pub fn run_experiment(
    manifest: &DatasetManifest,
    segmenter: &Segmenter,
    opts: &ExperimentOptions,
) -> Result<EvalReport> {
    let chosen = select_subset(manifest.samples.len(), opts.subset, opts.seed);
    let classes = segmenter.bank.num_classes();
    if let Some(dir) = &opts.persist_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_palette(&dir.join("palette.json"), &segmenter.bank.class_names)?;
    }
    tracing::info!(dataset = %manifest.name, samples = chosen.len(), "evaluating");

    let per_sample = chosen
        .par_iter()
        .map(|&i| {
            let s = &manifest.samples[i];
            let sample_err = |reason: String| Error::Sample {
                sample: s.id.clone(),
                reason,
            };
            let image = Raster::load(&s.image)?;
            let truth = read_label(&s.label)?;
            if truth.dim() != (image.height(), image.width()) {
                return Err(sample_err(format!(
                    "label is {:?} but the image is {}x{}",
                    truth.dim(),
                    image.height(),
                    image.width()
                )));
            }
            let map = segmenter.run(&image)?;
            if let Some(dir) = &opts.persist_dir {
                map.save_labels(&dir.join(format!("{}.png", s.id)))?;
            }
            let mut cm = ConfusionMatrix::new(classes);
            cm.add(&truth, &map.labels, manifest.ignore_index).map_err(sample_err)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = ConfusionMatrix::new(classes);
    for cm in &per_sample {
        confusion.merge(cm);
    }
    let ids = chosen.iter().map(|&i| manifest.samples[i].id.clone()).collect();
    Ok(EvalReport::from_confusion(
        &manifest.name,
        ids,
        &confusion,
        &segmenter.bank.class_names,
        opts.exclude_class,
    ))
}

/// Class id → `{name, rgb}` next to persisted label rasters.
pub fn write_palette(path: &Path, class_names: &[String]) -> Result<()> {
    let colours = crate::pipeline::palette(class_names.len());
    let table: BTreeMap<usize, serde_json::Value> = class_names
        .iter()
        .zip(colours)
        .enumerate()
        .map(|(i, (n, c))| (i, serde_json::json!({ "name": n, "rgb": c })))
        .collect();
    let text = serde_json::to_string_pretty(&table).expect("palette serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
