//! Run configuration and the train / eval / predict / ablate commands.
//!
//! Commands write their artifacts under `RunConfig::out` and return what
//! they wrote; printing is left to the caller.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{GateMode, LesionPooling, ModelConfig, TrainConfig, STAGES};
use crate::data::{load_pairs, read_image, resize, split, synth_generate, Sample, SplitSpec, Splits};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, MetricRow, MetricsReport, DEFAULT_THRESHOLD, METRIC_NAMES};
use crate::model::{param_specs, predict_probabilities};
use crate::tensor::{resize_bilinear, Tensor};
use crate::train::{EpochRecord, Trainer};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Which partition `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
    All,
}

/// Everything a command needs, as one flat key-value document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder_channels: [usize; STAGES],
    pub input_size: (usize, usize),
    pub kernel_size: usize,
    pub heads: usize,
    pub esa_stages: BTreeSet<usize>,
    pub lca_stages: BTreeSet<usize>,
    pub use_dk: bool,
    pub use_esa: bool,
    pub use_lca: bool,
    pub seed: u64,
    pub lesion_pooling: LesionPooling,
    pub lca_gate: GateMode,

    pub lr_init: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dice_smooth: f64,

    /// `synth:N` or a directory holding `images/` and `masks/`.
    pub data: String,
    pub out: PathBuf,
    /// Train / validation / test ratios.
    pub split: [f64; 3],
    pub augment: bool,
    /// Validation cadence in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub eval_split: EvalSplit,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&ModelConfig::default(), &TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(m: &ModelConfig, t: &TrainConfig) -> Self {
        Self {
            encoder_channels: m.encoder_channels,
            input_size: m.input_size,
            kernel_size: m.kernel_size,
            heads: m.heads,
            esa_stages: m.esa_stages.clone(),
            lca_stages: m.lca_stages.clone(),
            use_dk: m.use_dk,
            use_esa: m.use_esa,
            use_lca: m.use_lca,
            seed: m.seed,
            lesion_pooling: m.lesion_pooling,
            lca_gate: m.lca_gate,
            lr_init: t.lr_init,
            power: t.power,
            epochs: t.epochs,
            batch_size: t.batch_size,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            dice_smooth: t.dice_smooth,
            data: "synth:16".into(),
            out: PathBuf::from("runs/default"),
            split: [0.8, 0.1, 0.1],
            augment: true,
            eval_every: 1,
            eval_split: EvalSplit::Test,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder_channels: self.encoder_channels,
            input_size: self.input_size,
            kernel_size: self.kernel_size,
            heads: self.heads,
            esa_stages: self.esa_stages.clone(),
            lca_stages: self.lca_stages.clone(),
            use_dk: self.use_dk,
            use_esa: self.use_esa,
            use_lca: self.use_lca,
            seed: self.seed,
            lesion_pooling: self.lesion_pooling,
            lca_gate: self.lca_gate,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr_init: self.lr_init,
            power: self.power,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            dice_smooth: self.dice_smooth,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        DataSource::parse(&self.data)?;
        SplitSpec::new(self.split[0], self.split[1], self.split[2], self.seed)?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config(format!("threshold must be finite, got {}", self.threshold)));
        }
        Ok(())
    }

    /// Compact JSON of every setting except the output directory, embedded
    /// in reports so they can be traced back to the run that made them.
    pub fn echo(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synth(usize),
    Dir(PathBuf),
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("synth:") {
            Some(n) => n
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .map(Self::Synth)
                .ok_or_else(|| Error::Config(format!("`{s}`: expected synth:N with N ≥ 1"))),
            None if s.is_empty() => Err(Error::Config("no dataset given".into())),
            None => Ok(Self::Dir(PathBuf::from(s))),
        }
    }

    /// Samples at `size`; directory images are resized on load.
    pub fn load(&self, size: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
        match self {
            Self::Synth(n) => synth_generate(*n, size, seed),
            Self::Dir(root) => load_pairs(root)?.iter().map(|s| resize(s, size.0, size.1)).collect(),
        }
    }
}

pub fn load_splits(run: &RunConfig) -> Result<Splits> {
    let samples = DataSource::parse(&run.data)?.load(run.input_size, run.seed)?;
    split(&samples, &SplitSpec::new(run.split[0], run.split[1], run.split[2], run.seed)?)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dice: f64,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    /// `"val"`, or `"train"` when the validation split is empty.
    pub selection_split: &'static str,
}

fn log_csv(log: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(["epoch", "lr", "loss", "iterations", "val_dice"]).map_err(err)?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            format!("{:e}", r.lr),
            format!("{:e}", r.loss),
            r.iterations.to_string(),
            r.val_dice.map(|d| format!("{d:.6}")).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).expect("utf-8"))
}

fn train_in(run: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    run.validate()?;
    let splits = load_splits(run)?;
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (select, selection_split) = if splits.val.is_empty() { (&splits.train, "train") } else { (&splits.val, "val") };
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_against(&run.model())?;
            Trainer::resume(ck, run.train())?
        }
        None => Trainer::new(run.model(), run.train())?,
    };
    create_out(out)?;
    let best_checkpoint = out.join(BEST_CHECKPOINT);
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    while !trainer.is_finished() {
        let mut rec = trainer.run_epoch(&splits.train, run.augment)?;
        let last = trainer.is_finished();
        if last || (rec.epoch + 1) % run.eval_every == 0 {
            let dice = evaluate_dataset(&trainer.params, &trainer.model, select, run.threshold, run.batch_size)?
                .aggregate
                .dice;
            rec.val_dice = Some(dice);
            if best.is_none_or(|(_, d)| dice > d) {
                best = Some((rec.epoch, dice));
                trainer.checkpoint().save(&best_checkpoint)?;
            }
        }
        log.push(rec);
    }
    trainer.checkpoint().save(&final_checkpoint)?;
    write(&out.join("train_log.csv"), log_csv(&log)?)?;
    let (best_epoch, best_dice) = best.ok_or_else(|| Error::Domain("no epochs left to train".into()))?;
    let summary = TrainSummary { log, best_epoch, best_dice, best_checkpoint, final_checkpoint, selection_split };
    let json = serde_json::json!({ "config": serde_json::from_str::<serde_json::Value>(&run.echo()).expect("echo is json"), "summary": summary });
    write(&out.join("train_log.json"), serde_json::to_string_pretty(&json).expect("json"))?;
    Ok(summary)
}

/// Train on the train split, keep the best checkpoint by selection Dice and
/// the final one, and write the per-epoch log. With `resume`, continue from
/// a checkpoint's parameters, velocity and epoch counter.
pub fn cmd_train(run: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    train_in(run, &run.out, resume)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub csv: PathBuf,
    pub json: PathBuf,
}

fn eval_samples(run: &RunConfig) -> Result<Vec<Sample>> {
    let s = load_splits(run)?;
    let (name, samples) = match run.eval_split {
        EvalSplit::Train => ("train", s.train),
        EvalSplit::Val => ("val", s.val),
        EvalSplit::Test => ("test", s.test),
        EvalSplit::All => ("all", [s.train, s.val, s.test].concat()),
    };
    if samples.is_empty() {
        return Err(Error::Data(format!("{name} split is empty; nothing to evaluate")));
    }
    Ok(samples)
}

/// Load a checkpoint, refusing one whose parameters do not fit `run`.
pub fn load_compatible(run: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    ck.check_against(&run.model())?;
    Ok(ck)
}

fn report_json(run: &RunConfig, report: &impl Serialize) -> String {
    let config: serde_json::Value = serde_json::from_str(&run.echo()).expect("echo is json");
    serde_json::to_string_pretty(&serde_json::json!({ "config": config, "report": report })).expect("json")
}

/// Score a checkpoint on `run.eval_split`; writes `report.csv` and
/// `report.json`.
pub fn cmd_eval(run: &RunConfig, checkpoint: &Path) -> Result<EvalOutput> {
    run.validate()?;
    let ck = load_compatible(run, checkpoint)?;
    let samples = eval_samples(run)?;
    let report = evaluate_dataset(&ck.params, &run.model(), &samples, run.threshold, run.batch_size)?;
    create_out(&run.out)?;
    let csv = run.out.join("report.csv");
    let json = run.out.join("report.json");
    write(&csv, report.to_csv(&run.echo())?)?;
    write(&json, report_json(run, &report))?;
    Ok(EvalOutput { report, csv, json })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutput {
    /// `1×H×W` at the image's own resolution.
    pub probabilities: Tensor,
    pub probability_png: PathBuf,
    pub overlay_png: PathBuf,
    pub contour_pixels: usize,
}

/// Boundary of the binary map: foreground pixels with a background
/// 4-neighbour or touching the border.
pub fn contour(mask: &Tensor) -> Vec<bool> {
    let (h, w) = (mask.dim(1), mask.dim(2));
    let m = mask.data();
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize] > 0.5;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn probability_image(prob: &Tensor) -> image::GrayImage {
    let (h, w) = (prob.dim(1), prob.dim(2));
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(prob.data()[y as usize * w + x as usize])]))
}

/// The image with the contour of `prob ≥ threshold` painted red.
pub fn overlay_image(img: &Tensor, prob: &Tensor, threshold: f64) -> (image::RgbImage, usize) {
    let (h, w) = (img.dim(1), img.dim(2));
    let edge = contour(&crate::metrics::binarize(prob, threshold));
    let d = img.data();
    let out = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if edge[i] {
            image::Rgb([255, 0, 0])
        } else {
            image::Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
        }
    });
    (out, edge.iter().filter(|&&e| e).count())
}

fn save_png<P: image::PixelWithColorType<Subpixel = u8>>(img: &image::ImageBuffer<P, Vec<u8>>, path: &Path) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Predict one image: the `P_1` probability map as an 8-bit PNG and an
/// overlay with the thresholded contour.
pub fn cmd_predict(run: &RunConfig, checkpoint: &Path, image_path: &Path) -> Result<PredictOutput> {
    run.validate()?;
    let ck = load_compatible(run, checkpoint)?;
    let cfg = run.model();
    let img = read_image(image_path)?;
    let (h, w) = (img.dim(1), img.dim(2));
    let (ih, iw) = cfg.input_size;
    let input = if (h, w) == (ih, iw) { img.clone() } else { resize_bilinear(&img, ih, iw).map(|v| v.clamp(0.0, 1.0)) };
    let prob = predict_probabilities(&ck.params, &cfg, &Tensor::stack(&[input])?)?.index0(0);
    let probabilities = if (h, w) == (ih, iw) { prob } else { resize_bilinear(&prob, h, w) };
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    create_out(&run.out)?;
    let probability_png = run.out.join(format!("{stem}_prob.png"));
    let overlay_png = run.out.join(format!("{stem}_overlay.png"));
    save_png(&probability_image(&probabilities), &probability_png)?;
    let (overlay, contour_pixels) = overlay_image(&img, &probabilities, run.threshold);
    save_png(&overlay, &overlay_png)?;
    Ok(PredictOutput { probabilities, probability_png, overlay_png, contour_pixels })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: &'static str,
    pub use_dk: bool,
    pub use_esa: bool,
    pub use_lca: bool,
    pub parameters: usize,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// The four ablation settings `(name, use_dk, use_esa, use_lca)`.
pub const ABLATIONS: [(&str, bool, bool, bool); 4] = [
    ("Baseline", false, false, false),
    ("Baseline+DK", true, false, false),
    ("Baseline+DK+ESAs", true, true, false),
    ("Ours", true, true, true),
];

pub fn parameter_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.numel()).sum()
}

impl AblationReport {
    pub fn to_csv(&self, echo: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        let mut header = vec!["setting"];
        header.extend(METRIC_NAMES);
        header.push("parameters");
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.name.to_string()];
            rec.extend(r.metrics.values().iter().map(|v| format!("{v:.6}")));
            rec.push(r.parameters.to_string());
            w.write_record(&rec).map_err(err)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).expect("utf-8");
        Ok(format!("# {echo}\n{body}"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}",
            "Setting", "Rec", "Spec", "Prec", "Dice", "IoUp", "IoUb", "mIoU", "Acc", "Params"
        );
        for r in &self.rows {
            let v = r.metrics.values().map(|x| x * 100.0);
            let _ = writeln!(
                s,
                "{:<18} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>9}",
                r.name, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], r.parameters
            );
        }
        s
    }
}

/// Train and score the four settings with a shared seed. Each run lives in
/// `out/<setting>/`; the table goes to `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(run: &RunConfig) -> Result<AblationReport> {
    run.validate()?;
    let samples = eval_samples(run)?;
    let mut rows = Vec::new();
    for (name, dk, esa, lca) in ABLATIONS {
        let variant = RunConfig { use_dk: dk, use_esa: esa, use_lca: lca, ..run.clone() };
        let summary = train_in(&variant, &run.out.join(name), None)?;
        let ck = Checkpoint::load(&summary.best_checkpoint)?;
        let cfg = variant.model();
        let report = evaluate_dataset(&ck.params, &cfg, &samples, run.threshold, run.batch_size)?;
        log::info!("{name}: dice {:.4}", report.aggregate.dice);
        rows.push(AblationRow {
            name,
            use_dk: dk,
            use_esa: esa,
            use_lca: lca,
            parameters: parameter_count(&cfg),
            metrics: report.aggregate,
        });
    }
    let report = AblationReport { rows };
    write(&run.out.join("ablation.csv"), report.to_csv(&run.echo())?)?;
    write(&run.out.join("ablation.json"), report_json(run, &report))?;
    Ok(report)
}
