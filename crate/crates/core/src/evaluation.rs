//! Segmentation and artery/vein metrics, and the ablation table.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::inference::{skeletonize, TriProbMap};
use crate::io::{LabelTriMap, PixelClass, Raster};

/// `num / den`, or NaN when the denominator is zero.
pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts with the positive class first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn acc(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sen(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn sp(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn merge(&self, o: &Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }

    fn add(&mut self, truth: bool, pred: bool) {
        match (truth, pred) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Vessel segmentation metrics. Undefined ratios are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegReport {
    pub counts: Confusion,
    pub acc: f64,
    pub sen: f64,
    pub sp: f64,
    pub auc: f64,
}

impl SegReport {
    fn new(counts: Confusion, auc: f64) -> Self {
        Self { counts, acc: counts.acc(), sen: counts.sen(), sp: counts.sp(), auc }
    }

    /// True when some metric is undefined (no positives or no negatives).
    pub fn has_undefined(&self) -> bool {
        [self.acc, self.sen, self.sp, self.auc].iter().any(|v| v.is_nan())
    }
}

/// Exact ROC area: every positive/negative pair scored 1 when the positive
/// ranks higher and 1/2 on a tie.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParam("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut twice_num) = (0u128, 0u128);
    let (mut pos_total, mut neg_total) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_num += pos * (2 * neg_below + neg);
        neg_below += neg;
        pos_total += pos;
        neg_total += neg;
        i = j;
    }
    if pos_total == 0 || neg_total == 0 {
        return Err(Error::InvalidParam("ROC area needs both classes".into()));
    }
    Ok(twice_num as f64 / (2 * pos_total * neg_total) as f64)
}

fn check_dims(h: usize, w: usize, gt: &LabelTriMap, fov: &[bool]) -> Result<()> {
    if (gt.height, gt.width) != (h, w) || fov.len() != h * w {
        return Err(Error::Shape(format!("prediction {h}x{w} does not match labels/field of view")));
    }
    Ok(())
}

/// Thresholded (`p >= threshold`) confusion counts and ROC area over the
/// in-FOV pixels of all images together.
pub fn pooled_seg_metrics(items: &[(&Raster, &LabelTriMap, &[bool])], threshold: f64) -> Result<SegReport> {
    let mut counts = Confusion::default();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (prob, gt, fov) in items {
        check_dims(prob.height, prob.width, gt, fov)?;
        for i in 0..fov.len() {
            if fov[i] {
                counts.add(gt.vessel[i], prob.data[i] >= threshold);
                scores.push(prob.data[i]);
                labels.push(gt.vessel[i]);
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::EmptyEvaluation("no pixels inside the field of view".into()));
    }
    let auc = roc_auc(&scores, &labels).unwrap_or(f64::NAN);
    Ok(SegReport::new(counts, auc))
}

pub fn seg_metrics(prob: &Raster, gt: &LabelTriMap, fov: &[bool], threshold: f64) -> Result<SegReport> {
    pooled_seg_metrics(&[(prob, gt, fov)], threshold)
}

/// Pixel set of an artery/vein evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AvMode {
    /// All ground-truth artery/vein pixels, labelled by argmax.
    GtPixels,
    /// Ground-truth artery/vein pixels that were also detected as vessel.
    Detected,
    /// Ground-truth artery/vein pixels on the thinned vessel centerline.
    Skeletal,
}

impl AvMode {
    pub fn tag(self) -> &'static str {
        match self {
            AvMode::GtPixels => "gt_pixels",
            AvMode::Detected => "detected",
            AvMode::Skeletal => "skeletal",
        }
    }

    pub const ALL: [AvMode; 3] = [AvMode::GtPixels, AvMode::Detected, AvMode::Skeletal];
}

/// Artery/vein metrics with arteries as the positive class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AVReport {
    pub mode: AvMode,
    pub counts: Confusion,
    pub pixels: u64,
    pub acc: f64,
    pub sen: f64,
    pub sp: f64,
}

impl AVReport {
    fn new(mode: AvMode, counts: Confusion) -> Self {
        Self { mode, counts, pixels: counts.total(), acc: counts.acc(), sen: counts.sen(), sp: counts.sp() }
    }

    /// Sums counts of reports of the same mode.
    pub fn merge(reports: &[AVReport]) -> Result<AVReport> {
        let first = reports.first().ok_or_else(|| Error::EmptyEvaluation("no reports to merge".into()))?;
        if reports.iter().any(|r| r.mode != first.mode) {
            return Err(Error::InvalidParam("cannot merge reports of different modes".into()));
        }
        let counts = reports.iter().fold(Confusion::default(), |a, r| a.merge(&r.counts));
        Ok(AVReport::new(first.mode, counts))
    }
}

fn av_counts(set: impl Iterator<Item = (bool, PixelClass)>) -> Confusion {
    let mut c = Confusion::default();
    for (artery, class) in set {
        match (artery, class) {
            (true, PixelClass::Artery) => c.tp += 1,
            (true, _) => c.fn_ += 1,
            (false, PixelClass::Vein) => c.tn += 1,
            (false, _) => c.fp += 1,
        }
    }
    c
}

/// Artery/vein metrics in gt_pixels or detected mode.
///
/// gt_pixels labels every ground-truth artery/vein pixel by
/// `argmax(p_artery, p_vein)`; detected keeps only the pixels whose decision
/// is not background. Uncertain pixels are never counted.
pub fn av_metrics(decisions: &[PixelClass], tri: &TriProbMap, gt: &LabelTriMap, mode: AvMode) -> Result<AVReport> {
    let n = gt.height * gt.width;
    if decisions.len() != n || (tri.height, tri.width) != (gt.height, gt.width) {
        return Err(Error::Shape("decisions, probabilities and labels differ in size".into()));
    }
    let labelled = (0..n).filter(|&i| (gt.artery[i] || gt.vein[i]) && !gt.uncertain[i]);
    let counts = match mode {
        AvMode::GtPixels => av_counts(labelled.map(|i| {
            let c = if tri.artery.data[i] >= tri.vein.data[i] { PixelClass::Artery } else { PixelClass::Vein };
            (gt.artery[i], c)
        })),
        AvMode::Detected => {
            av_counts(labelled.filter(|&i| decisions[i] != PixelClass::Background).map(|i| (gt.artery[i], decisions[i])))
        }
        AvMode::Skeletal => return skeletal_av_metrics(decisions, gt),
    };
    if counts.total() == 0 {
        return Err(Error::EmptyEvaluation(format!("no pixels in {} evaluation set", mode.tag())));
    }
    Ok(AVReport::new(mode, counts))
}

/// Artery/vein metrics on the ground-truth vessel skeleton. A background
/// decision on a skeleton pixel counts as a miss.
pub fn skeletal_av_metrics(decisions: &[PixelClass], gt: &LabelTriMap) -> Result<AVReport> {
    let n = gt.height * gt.width;
    if decisions.len() != n {
        return Err(Error::Shape("decisions and labels differ in size".into()));
    }
    let skel = skeletonize(&gt.vessel, gt.height, gt.width)?;
    let counts = av_counts(
        (0..n).filter(|&i| skel[i] && (gt.artery[i] || gt.vein[i]) && !gt.uncertain[i]).map(|i| (gt.artery[i], decisions[i])),
    );
    if counts.total() == 0 {
        return Err(Error::EmptyEvaluation("skeleton has no artery/vein pixels".into()));
    }
    Ok(AVReport::new(AvMode::Skeletal, counts))
}

fn pct(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

/// Tab-separated metric rows: `kind mode config acc sen sp auc tp fp tn fn`.
pub fn seg_row(config_hash: &str, r: &SegReport) -> String {
    let c = r.counts;
    format!(
        "vessel\tall\t{config_hash}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
        r.acc, r.sen, r.sp, r.auc, c.tp, c.fp, c.tn, c.fn_
    )
}

pub fn av_row(config_hash: &str, r: &AVReport) -> String {
    let c = r.counts;
    format!(
        "av\t{}\t{config_hash}\t{:.6}\t{:.6}\t{:.6}\tnan\t{}\t{}\t{}\t{}",
        r.mode.tag(),
        r.acc,
        r.sen,
        r.sp,
        c.tp,
        c.fp,
        c.tn,
        c.fn_
    )
}

pub const ROW_HEADER: &str = "kind\tmode\tconfig\tacc\tsen\tsp\tauc\ttp\tfp\ttn\tfn";

/// One evaluated configuration of the ablation study.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub name: String,
    pub config_hash: String,
    /// Identifies the test images the run was evaluated on.
    pub test_split: Vec<String>,
    pub seg: SegReport,
    pub av: AVReport,
}

pub const ABLATION_COLUMNS: [&str; 7] = ["Acc", "Sen", "Sp", "AUC", "A/V Acc", "A/V Sen", "A/V Sp"];

/// Formatted table (vessel Acc/Sen/Sp/AUC, then A/V Acc/Sen/Sp, in percent)
/// and machine-readable rows.
pub fn ablation_report(runs: &[AblationRun]) -> Result<(String, String)> {
    let first = runs.first().ok_or_else(|| Error::EmptyEvaluation("no ablation runs".into()))?;
    if let Some(r) = runs.iter().find(|r| r.test_split != first.test_split) {
        return Err(Error::InvalidParam(format!("run {} was evaluated on a different test split", r.name)));
    }
    let name_w = runs.iter().map(|r| r.name.len()).max().unwrap_or(0).max("Method".len());
    let mut text = String::new();
    let _ = write!(text, "{:<name_w$}  | {:>7} {:>7} {:>7} {:>7} |", "Method", "Acc", "Sen", "Sp", "AUC");
    let _ = writeln!(text, " {:>7} {:>7} {:>7}", "A/V Acc", "A/V Sen", "A/V Sp");
    let mut tsv = format!("method\tconfig\t{}\n", ABLATION_COLUMNS.join("\t"));
    for r in runs {
        let vals = [r.seg.acc, r.seg.sen, r.seg.sp, r.seg.auc, r.av.acc, r.av.sen, r.av.sp];
        let p: Vec<String> = vals.iter().map(|&v| pct(v)).collect();
        let _ = writeln!(
            text,
            "{:<name_w$}  | {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7}",
            r.name, p[0], p[1], p[2], p[3], p[4], p[5], p[6]
        );
        let raw: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(tsv, "{}\t{}\t{}", r.name, r.config_hash, raw.join("\t"));
    }
    Ok((text, tsv))
}
