//! Dataset-level stages shared by the subcommands: preprocessing, training,
//! inference, evaluation and the ablation study.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avseg_core::evaluation::{
    ablation_report, av_metrics, av_row, pooled_seg_metrics, seg_row, AVReport, AblationRun, AvMode, SegReport,
    ROW_HEADER,
};
use avseg_core::inference::{activation_for_export, decide_av, predict_full, DecisionMode, TriProbMap};
use avseg_core::io::{
    write_av_overlay, write_gray_map, write_rgb, DatasetIndex, FundusImage, LabelColorTable, LabelTriMap, Raster,
    Split,
};
use avseg_core::network::NetworkConfig;
use avseg_core::preprocess::{enhance, InputStack, CHANNEL_NAMES};
use avseg_core::training::{load_checkpoint, save_checkpoint, train, StepReport, TrainImage, TrainState};
use avseg_core::Real;
use rayon::prelude::*;

use crate::config::{Precision, RunConfig};

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).with_context(|| format!("writing {}", p.display()))
}

/// One image after the multi-input preprocessing.
pub struct Prepared {
    pub name: String,
    pub image: FundusImage,
    pub stack: InputStack,
    pub label: LabelTriMap,
}

/// Loads and preprocesses every image of `split`, in manifest order.
pub fn prepare_split(index: &DatasetIndex, split: Split, cfg: &RunConfig) -> Result<Vec<Prepared>> {
    let entries = index.split(split);
    if entries.is_empty() {
        bail!(avseg_core::Error::EmptyEvaluation(format!("dataset has no {} images", split.as_str())));
    }
    let table = LabelColorTable::default();
    entries
        .par_iter()
        .map(|e| {
            let image = e.load_image()?;
            let label = e.load_label(&table, cfg.strict_labels)?;
            let stack = enhance(&image, &cfg.preprocess)?.stack;
            Ok(Prepared { name: e.name.clone(), image, stack, label })
        })
        .collect()
}

fn preview(r: &Raster) -> Raster {
    let (lo, hi) = r.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    r.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

/// Writes the enhanced channels of every image: `<name>.ic.png`,
/// `<name>.gabor.png`, `<name>.line.png` and `<name>.stats.txt`.
pub fn prep(index: &DatasetIndex, cfg: &RunConfig, out: &Path) -> Result<usize> {
    create_dir(out)?;
    index.entries.par_iter().try_for_each(|e| -> Result<()> {
        let image = e.load_image()?;
        let enh = enhance(&image, &cfg.preprocess)?;
        write_rgb(&enh.ic, out.join(format!("{}.ic.png", e.name)))?;
        write_gray_map(&preview(&enh.gabor), out.join(format!("{}.gabor.png", e.name)))?;
        write_gray_map(&preview(&enh.line), out.join(format!("{}.line.png", e.name)))?;
        let mut stats = String::from("channel\tmean\tstd\n");
        for (name, (m, s)) in CHANNEL_NAMES.iter().zip(&enh.stack.stats) {
            let _ = writeln!(stats, "{name}\t{m:?}\t{s:?}");
        }
        write_file(&out.join(format!("{}.stats.txt", e.name)), stats)
    })?;
    Ok(index.entries.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub config_hash: String,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const RUN_LOG: &str = "run.log";

fn train_typed<T: Real>(
    cfg: &RunConfig,
    images: &[TrainImage],
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let net = &cfg.network;
    let tc = cfg.train_config();
    let mut state = match resume {
        Some(p) => load_checkpoint::<T>(p, Some(net))?.state,
        None => TrainState::<T>::new(net, tc.seed)?,
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(RUN_LOG);
    let mut log = if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    if resume.is_none() {
        writeln!(log, "# config {}\n# iteration\tloss\tlr", net.hash())?;
    }
    let mut last = None;
    let mut observer = |r: &StepReport, s: &TrainState<T>| -> avseg_core::Result<()> {
        let io = |e: std::io::Error| avseg_core::Error::Io { path: log_path.clone(), cause: e.to_string() };
        let done = s.iteration;
        if r.iteration.is_multiple_of(cfg.log_every) || done == tc.iterations {
            writeln!(log, "{}", r.log_line()).map_err(io)?;
        }
        if done.is_multiple_of(cfg.checkpoint_every) || done == tc.iterations {
            save_checkpoint(s, net, &ckpt)?;
        }
        last = Some(r.loss);
        Ok(())
    };
    train(images, net, &tc, &cfg.loss, &mut state, &mut observer)?;
    if state.iteration == 0 || !ckpt.exists() {
        save_checkpoint(&state, net, &ckpt)?;
    }
    Ok(TrainSummary { iterations: state.iteration, final_loss: last, checkpoint: ckpt, config_hash: net.hash() })
}

pub fn to_train_images(prepared: &[Prepared]) -> Result<Vec<TrainImage>> {
    prepared
        .iter()
        .map(|p| Ok(TrainImage::new(p.name.clone(), p.stack.clone(), p.label.clone(), p.image.fov.clone())?))
        .collect()
}

/// Trains into `out`, writing `checkpoint.ckpt`, `run.log` and the
/// effective `config.txt`.
pub fn train_run(cfg: &RunConfig, images: &[TrainImage], out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    create_dir(out)?;
    write_file(&out.join("config.txt"), cfg.to_text())?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, images, out, resume),
        Precision::F64 => train_typed::<f64>(cfg, images, out, resume),
    }
}

const MAPS_MAGIC: &str = "avseg-maps 1";

/// Lossless probability planes (vessel, artery, vein) as little-endian f64.
pub fn write_maps(map: &TriProbMap, path: &Path) -> Result<()> {
    let mut bytes = format!("{MAPS_MAGIC} {} {}\n", map.height, map.width).into_bytes();
    for plane in [&map.vessel, &map.artery, &map.vein] {
        bytes.extend(plane.data.iter().flat_map(|v| v.to_le_bytes()));
    }
    write_file(path, bytes)
}

pub fn read_maps(path: &Path) -> Result<TriProbMap> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let nl = bytes.iter().position(|&b| b == b'\n').context("maps file has no header")?;
    let head = std::str::from_utf8(&bytes[..nl])?;
    let dims = head.strip_prefix(MAPS_MAGIC).map(|r| r.split_whitespace().map(str::parse).collect::<Vec<_>>());
    let Some([Ok(h), Ok(w)]) = dims.as_deref() else {
        bail!("{}: bad maps header {head:?}", path.display());
    };
    let (h, w): (usize, usize) = (*h, *w);
    let body = &bytes[nl + 1..];
    if body.len() != 3 * h * w * 8 {
        bail!("{}: expected {} bytes of map data, found {}", path.display(), 3 * h * w * 8, body.len());
    }
    let mut planes = body
        .chunks_exact(h * w * 8)
        .map(|c| Raster::new(h, w, c.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()));
    let mut next = || planes.next().expect("three planes");
    Ok(TriProbMap {
        height: h,
        width: w,
        vessel: next()?,
        artery: next()?,
        vein: next()?,
        activation: None,
        coverage: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferSummary {
    pub images: usize,
    pub config_hash: String,
}

fn infer_typed<T: Real>(ckpt: &Path, cfg: &RunConfig, items: &[Prepared], out: &Path) -> Result<InferSummary> {
    let loaded = load_checkpoint::<T>(ckpt, None)?;
    let net: NetworkConfig = loaded.config;
    let params = loaded.state.params;
    let inf = cfg.inference;
    let hash = net.hash();
    items.par_iter().try_for_each(|p| -> Result<()> {
        let map = predict_full(&params, &net, &p.stack, &inf)?;
        let base = |ext: &str| out.join(format!("{}.{ext}", p.name));
        write_gray_map(&map.vessel, base("vessel.png"))?;
        write_gray_map(&map.artery, base("artery.png"))?;
        write_gray_map(&map.vein, base("vein.png"))?;
        let decisions = decide_av(&map, inf.threshold, DecisionMode::Detected)?;
        write_av_overlay(&decisions, map.height, map.width, base("av.png"))?;
        if let Some(a) = &map.activation {
            write_gray_map(&activation_for_export(a, net.sigma), base("activation.png"))?;
        }
        write_maps(&map, &base("maps"))?;
        let side = format!(
            "threshold = {:?}\nstride = {}\ntile_batch = {}\npatch = {}\nconfig_hash = {hash}\ncheckpoint_iteration = {}\n",
            inf.threshold, inf.stride, inf.tile_batch, net.patch, loaded.state.iteration
        );
        write_file(&base("txt"), side)
    })?;
    Ok(InferSummary { images: items.len(), config_hash: hash })
}

/// Predicts every prepared image with the checkpoint and writes the
/// probability rasters, the A/V overlay, the activation map (when the
/// network has one), a lossless `.maps` file and a `.txt` sidecar.
pub fn infer_run(ckpt: &Path, cfg: &RunConfig, items: &[Prepared], out: &Path) -> Result<InferSummary> {
    create_dir(out)?;
    match cfg.precision {
        Precision::F32 => infer_typed::<f32>(ckpt, cfg, items, out),
        Precision::F64 => infer_typed::<f64>(ckpt, cfg, items, out),
    }
}

fn sidecar_value(path: &Path, key: &str) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
        .with_context(|| format!("{}: missing `{key}`", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub config_hash: String,
    pub images: Vec<String>,
    pub seg: SegReport,
    pub av: Vec<AVReport>,
}

impl EvalSummary {
    pub fn av_mode(&self, mode: AvMode) -> &AVReport {
        self.av.iter().find(|r| r.mode == mode).expect("all modes evaluated")
    }

    pub fn tsv(&self) -> String {
        let mut s = format!("{ROW_HEADER}\n{}\n", seg_row(&self.config_hash, &self.seg));
        for r in &self.av {
            s += &av_row(&self.config_hash, r);
            s.push('\n');
        }
        s
    }

    pub fn text(&self) -> String {
        let pct = |v: f64| if v.is_nan() { "nan".to_string() } else { format!("{:.2}", 100.0 * v) };
        let s = &self.seg;
        let mut t = format!("config {}  images {}\n", self.config_hash, self.images.len());
        let _ = writeln!(
            t,
            "{:<12} acc {:>6}  sen {:>6}  sp {:>6}  auc {:>6}",
            "vessel",
            pct(s.acc),
            pct(s.sen),
            pct(s.sp),
            pct(s.auc)
        );
        for r in &self.av {
            let _ = writeln!(
                t,
                "{:<12} acc {:>6}  sen {:>6}  sp {:>6}  pixels {}",
                format!("av/{}", r.mode.tag()),
                pct(r.acc),
                pct(r.sen),
                pct(r.sp),
                r.pixels
            );
        }
        t
    }
}

/// Scores the predictions in `pred` against the labels of `items`, pooling
/// counts over all images. Writes `report.txt` and `metrics.tsv` to `out`.
pub fn eval_run(items: &[Prepared], pred: &Path, threshold: f64, out: &Path) -> Result<EvalSummary> {
    let maps: Vec<TriProbMap> = items
        .par_iter()
        .map(|p| read_maps(&pred.join(format!("{}.maps", p.name))))
        .collect::<Result<_>>()?;
    let mut hash: Option<String> = None;
    for p in items {
        let h = sidecar_value(&pred.join(format!("{}.txt", p.name)), "config_hash")?;
        match &hash {
            Some(prev) if *prev != h => bail!("predictions come from different configurations ({prev}, {h})"),
            _ => hash = Some(h),
        }
    }
    for (p, m) in items.iter().zip(&maps) {
        if (m.height, m.width) != (p.label.height, p.label.width) {
            bail!(avseg_core::Error::Shape(format!("{}: prediction size differs from label", p.name)));
        }
    }
    let fovs: Vec<Vec<bool>> = items.iter().map(|p| p.image.fov_mask()).collect();
    let seg_items: Vec<(&Raster, &LabelTriMap, &[bool])> =
        items.iter().zip(&maps).zip(&fovs).map(|((p, m), f)| (&m.vessel, &p.label, f.as_slice())).collect();
    let seg = pooled_seg_metrics(&seg_items, threshold)?;
    let per_image: Vec<Vec<AVReport>> = items
        .par_iter()
        .zip(&maps)
        .map(|(p, m)| -> Result<Vec<AVReport>> {
            let detected = decide_av(m, threshold, DecisionMode::Detected)?;
            let all = decide_av(m, threshold, DecisionMode::GtPixels)?;
            AvMode::ALL
                .iter()
                .map(|&mode| {
                    let d = if mode == AvMode::GtPixels { &all } else { &detected };
                    Ok(av_metrics(d, m, &p.label, mode)?)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let av = (0..AvMode::ALL.len())
        .map(|k| AVReport::merge(&per_image.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect::<avseg_core::Result<Vec<_>>>()?;
    let summary = EvalSummary {
        config_hash: hash.unwrap_or_default(),
        images: items.iter().map(|p| p.name.clone()).collect(),
        seg,
        av,
    };
    create_dir(out)?;
    write_file(&out.join("report.txt"), summary.text())?;
    write_file(&out.join("metrics.tsv"), summary.tsv())?;
    Ok(summary)
}

/// The four configurations of the ablation study, derived from `base`.
pub fn ablation_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let variant = |channels: usize, multitask: bool, activation: bool| {
        let mut c = base.clone();
        c.network.input_channels = channels;
        c.network.multitask = multitask;
        c.network.deep_supervision = multitask;
        c.network.activation = activation;
        c
    };
    vec![
        ("Baseline".to_string(), variant(3, false, false)),
        ("+MT".to_string(), variant(3, true, false)),
        ("+MT+MI".to_string(), variant(8, true, false)),
        ("+MT+MI+AC".to_string(), variant(8, true, true)),
    ]
}

fn dir_name(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.trim_matches('_').replace("__", "_")
}

pub struct AblationSummary {
    pub runs: Vec<(AblationRun, EvalSummary)>,
    pub table: String,
}

/// Trains, predicts and scores each ablation configuration (in parallel on
/// the current pool), then writes `ablation.txt` and `ablation.tsv`. The
/// table reports A/V metrics in gt_pixels mode.
pub fn ablate(base: &RunConfig, index: &DatasetIndex, out: &Path) -> Result<AblationSummary> {
    let train_items = prepare_split(index, Split::Train, base)?;
    let test_items = prepare_split(index, Split::Test, base)?;
    let train_images = to_train_images(&train_items)?;
    let configs = ablation_configs(base);
    let runs = configs
        .par_iter()
        .map(|(name, cfg)| -> Result<(AblationRun, EvalSummary)> {
            let dir = out.join(dir_name(name));
            let t = train_run(cfg, &train_images, &dir, None)?;
            let pred = dir.join("pred");
            infer_run(&t.checkpoint, cfg, &test_items, &pred)?;
            let ev = eval_run(&test_items, &pred, cfg.inference.threshold, &dir)?;
            let run = AblationRun {
                name: name.clone(),
                config_hash: ev.config_hash.clone(),
                test_split: ev.images.clone(),
                seg: ev.seg,
                av: *ev.av_mode(AvMode::GtPixels),
            };
            Ok((run, ev))
        })
        .collect::<Result<Vec<_>>>()?;
    let plain: Vec<AblationRun> = runs.iter().map(|(r, _)| r.clone()).collect();
    let (table, tsv) = ablation_report(&plain)?;
    write_file(&out.join("ablation.txt"), &table)?;
    write_file(&out.join("ablation.tsv"), tsv)?;
    Ok(AblationSummary { runs, table })
}
