//! Synthetic fundus photographs with exact artery/vein labels.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use avseg_core::io::{write_rgb, DatasetIndex, FundusImage, LabelColorTable, Raster, Split};
use avseg_core::preprocess::gaussian_blur;
use avseg_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Appearance of one vessel class, as fractional darkening per RGB channel.
#[derive(Clone, Debug, PartialEq)]
pub struct VesselProfile {
    pub contrast: [f64; 3],
    /// Width range of trunk vessels at the disc, in pixels.
    pub trunk_width: (f64, f64),
    /// Central light reflex amplitude (fraction of background).
    pub reflex: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    /// Trunks per class leaving the optic disc.
    pub trees: usize,
    /// Branch generations below each trunk.
    pub branch_depth: usize,
    /// Global vessel width bounds in pixels.
    pub width_range: (f64, f64),
    pub artery: VesselProfile,
    pub vein: VesselProfile,
    pub texture: f64,
    pub illumination: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train: 30,
            test: 10,
            height: 128,
            width: 128,
            trees: 2,
            branch_depth: 2,
            width_range: (1.0, 4.0),
            artery: VesselProfile { contrast: [0.06, 0.26, 0.18], trunk_width: (2.2, 2.8), reflex: 0.10 },
            vein: VesselProfile { contrast: [0.16, 0.42, 0.34], trunk_width: (3.0, 3.8), reflex: 0.0 },
            texture: 0.05,
            illumination: 0.35,
            noise: 0.012,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train + self.test == 0 || self.trees == 0 {
            return Err(Error::InvalidParam("synthetic dataset needs at least one image and one tree".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidParam(format!("image size {}x{} too small", self.height, self.width)));
        }
        let (lo, hi) = self.width_range;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(Error::InvalidParam(format!("width range ({lo}, {hi}) must satisfy 1 <= min <= max")));
        }
        for p in [&self.artery, &self.vein] {
            if !(p.trunk_width.0 >= lo && p.trunk_width.1 >= p.trunk_width.0 && p.trunk_width.1 <= hi) {
                return Err(Error::InvalidParam("trunk widths must lie inside the width range".into()));
            }
            if p.contrast.iter().any(|c| !(0.0..1.0).contains(c)) || !(0.0..1.0).contains(&p.reflex) {
                return Err(Error::InvalidParam("vessel contrast and reflex must lie in [0, 1)".into()));
            }
        }
        if [self.texture, self.illumination, self.noise].iter().any(|v| !(0.0..0.5).contains(v)) {
            return Err(Error::InvalidParam("texture, illumination and noise amplitudes must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<(String, Split)> {
        let train = (0..self.train).map(|i| (format!("syn_train_{i:03}"), Split::Train));
        train.chain((0..self.test).map(|i| (format!("syn_test_{i:03}"), Split::Test))).collect()
    }
}

/// One generated sample.
pub struct SynthImage {
    pub image: FundusImage,
    /// Per-pixel label color.
    pub label: Vec<[u8; 3]>,
}

impl SynthImage {
    pub fn vessel_fraction(&self, table: &LabelColorTable) -> f64 {
        self.label.iter().filter(|&&c| c != table.background).count() as f64 / self.label.len() as f64
    }
}

struct Segment {
    x: f64,
    y: f64,
    radius: f64,
}

/// Centerline samples (half-pixel spacing) of a trunk and its branches.
fn grow_tree(
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    heading: f64,
    width: f64,
    depth: usize,
    spec: &SynthSpec,
    out: &mut Vec<Segment>,
) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let max_len = 0.9 * (h + w) * rng.random_range(0.55..0.8);
    let min_w = spec.width_range.0;
    let bend = Normal::new(0.0, 0.018).expect("valid sigma");
    let (mut x, mut y, mut theta) = (start.0, start.1, heading);
    let mut curvature: f64 = rng.random_range(-0.012..0.012);
    let n_branch = if depth > 0 { rng.random_range(1..=3) } else { 0 };
    let mut branch_at: Vec<f64> = (0..n_branch).map(|_| rng.random_range(0.15..0.7)).collect();
    branch_at.sort_by(f64::total_cmp);
    let mut next_branch = 0;
    let steps = (2.0 * max_len) as usize;
    for k in 0..steps {
        let s = k as f64 / steps as f64;
        let width_here = (width * (1.0 - 0.55 * s)).max(min_w);
        out.push(Segment { x, y, radius: width_here / 2.0 });
        if next_branch < branch_at.len() && s >= branch_at[next_branch] {
            next_branch += 1;
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let child_heading = theta + side * rng.random_range(0.45..1.1);
            let child_width = (width_here * rng.random_range(0.55..0.8)).max(min_w);
            let mut child = ChaCha8Rng::seed_from_u64(rng.random());
            let length = rng.random_range(0.35..0.6);
            grow_child(&mut child, (x, y), child_heading, child_width, depth - 1, spec, length, out);
        }
        curvature = (curvature + bend.sample(rng) * 0.1).clamp(-0.03, 0.03);
        theta += curvature + bend.sample(rng);
        x += 0.5 * theta.cos();
        y += 0.5 * theta.sin();
        if x < -4.0 || y < -4.0 || x > w + 4.0 || y > h + 4.0 {
            break;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn grow_child(
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    heading: f64,
    width: f64,
    depth: usize,
    spec: &SynthSpec,
    length: f64,
    out: &mut Vec<Segment>,
) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let len = length * 0.9 * (h + w) * 0.5;
    let min_w = spec.width_range.0;
    let bend = Normal::new(0.0, 0.03).expect("valid sigma");
    let (mut x, mut y, mut theta) = (start.0, start.1, heading);
    let steps = (2.0 * len) as usize;
    let fork = if depth > 0 && rng.random_bool(0.7) { Some(rng.random_range(0.3..0.7)) } else { None };
    for k in 0..steps {
        let s = k as f64 / steps as f64;
        let width_here = (width * (1.0 - 0.5 * s)).max(min_w);
        out.push(Segment { x, y, radius: width_here / 2.0 });
        if fork.is_some_and(|f| k == (f * steps as f64) as usize) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut child = ChaCha8Rng::seed_from_u64(rng.random());
            let cw = (width_here * 0.7).max(min_w);
            let turn = theta + side * rng.random_range(0.5..1.0);
            grow_child(&mut child, (x, y), turn, cw, depth - 1, spec, 0.6 * length, out);
        }
        theta += bend.sample(rng);
        x += 0.5 * theta.cos();
        y += 0.5 * theta.sin();
        if x < -4.0 || y < -4.0 || x > w + 4.0 || y > h + 4.0 {
            break;
        }
    }
}

/// Smallest normalized distance `d / r` to any segment, with the radius of
/// the closest one.
fn distance_field(segments: &[Segment], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::INFINITY; h * w];
    let mut rad = vec![0.0; h * w];
    for s in segments {
        let reach = 2.0 * s.radius + 1.5;
        let y0 = (s.y - reach).floor().max(0.0) as usize;
        let x0 = (s.x - reach).floor().max(0.0) as usize;
        let y1 = ((s.y + reach).ceil().max(-1.0) + 1.0).min(h as f64) as usize;
        let x1 = ((s.x + reach).ceil().max(-1.0) + 1.0).min(w as f64) as usize;
        for py in y0..y1 {
            for px in x0..x1 {
                let d = ((px as f64 - s.x).powi(2) + (py as f64 - s.y).powi(2)).sqrt();
                let v = d / s.radius;
                let i = py * w + px;
                if v < u[i] {
                    u[i] = v;
                    rad[i] = s.radius;
                }
            }
        }
    }
    (u, rad)
}

/// Generates sample `index` of the dataset; independent of generation order.
pub fn synth_image(spec: &SynthSpec, index: usize) -> Result<SynthImage> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let disc = (
        w as f64 * rng.random_range(0.35..0.65),
        h as f64 * rng.random_range(0.35..0.65),
    );
    let base_heading = rng.random_range(0.0..2.0 * PI);
    let mut classes: [Vec<Segment>; 2] = [Vec::new(), Vec::new()];
    let total = 2 * spec.trees;
    for k in 0..total {
        let class = k % 2;
        let profile = if class == 0 { &spec.artery } else { &spec.vein };
        let heading = base_heading + 2.0 * PI * k as f64 / total as f64 + rng.random_range(-0.3..0.3);
        let width = rng.random_range(profile.trunk_width.0..=profile.trunk_width.1);
        let start = (disc.0 + 2.0 * heading.cos(), disc.1 + 2.0 * heading.sin());
        let mut tree_rng = ChaCha8Rng::seed_from_u64(rng.random());
        grow_tree(&mut tree_rng, start, heading, width, spec.branch_depth, spec, &mut classes[class]);
    }
    let (ua, ra) = distance_field(&classes[0], h, w);
    let (uv, rv) = distance_field(&classes[1], h, w);

    let light = (
        w as f64 * rng.random_range(0.3..0.7),
        h as f64 * rng.random_range(0.3..0.7),
    );
    let diag = ((h * h + w * w) as f64).sqrt() / 2.0;
    let white = Normal::new(0.0, 1.0).expect("valid sigma");
    let noise_field = Raster::from_fn(h, w, |_, _| white.sample(&mut rng));
    let texture = gaussian_blur(&noise_field, 6.0)?;
    let tex_sd = (texture.data.iter().map(|v| v * v).sum::<f64>() / (h * w) as f64).sqrt().max(1e-12);
    let base = [0.80, 0.45, 0.24];
    let disc_sigma = 0.07 * h.min(w) as f64;
    let pixel_noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid sigma");

    let mut rgb = Vec::with_capacity(h * w);
    let mut label = Vec::with_capacity(h * w);
    let table = LabelColorTable::default();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r2 = ((x as f64 - light.0).powi(2) + (y as f64 - light.1).powi(2)) / (diag * diag);
            let illum = 1.0 - spec.illumination * r2;
            let tex = 1.0 + spec.texture * texture.data[i] / tex_sd;
            let d2 = (x as f64 - disc.0).powi(2) + (y as f64 - disc.1).powi(2);
            let glow = 0.35 * (-d2 / (2.0 * disc_sigma * disc_sigma)).exp();
            let mut px = [0.0; 3];
            for c in 0..3 {
                let bg = base[c] * illum * tex + glow;
                let dark = |u: f64, r: f64, p: &VesselProfile| {
                    if u > 2.5 {
                        return 0.0;
                    }
                    let caliber = (0.55 + 0.45 * (2.0 * r / 3.0)).min(1.0);
                    p.contrast[c] * caliber * (-1.3 * u * u).exp()
                };
                let da = dark(ua[i], ra[i], &spec.artery);
                let dv = dark(uv[i], rv[i], &spec.vein);
                let reflex = if ra[i] >= 0.9 && ua[i] < 1.0 { spec.artery.reflex * (-(ua[i] / 0.3).powi(2)).exp() } else { 0.0 };
                let v = bg * (1.0 - da.max(dv)) + bg * reflex * (if dv > da { 0.0 } else { 1.0 });
                px[c] = (v + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            rgb.push(px);
            let (a, v) = (ua[i] <= 1.0, uv[i] <= 1.0);
            label.push(match (a, v) {
                (true, true) => table.crossing,
                (true, false) => table.artery,
                (false, true) => table.vein,
                (false, false) => table.background,
            });
        }
    }
    Ok(SynthImage { image: FundusImage::new(h, w, rgb, None)?, label })
}

fn label_image(label: &[[u8; 3]], h: usize, w: usize) -> Result<FundusImage> {
    FundusImage::new(h, w, label.iter().map(|c| c.map(|b| b as f64 / 255.0)).collect(), None)
}

/// Writes `images/`, `labels/` and the manifest under `root`. Samples are
/// generated in parallel on the current rayon pool; output does not depend
/// on the pool size.
pub fn synth_dataset(spec: &SynthSpec, root: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    for sub in ["images", "labels"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::Io { path: d.clone(), cause: e.to_string() })?;
    }
    let names = spec.names();
    names.par_iter().enumerate().try_for_each(|(i, (name, _))| -> Result<()> {
        let s = synth_image(spec, i)?;
        write_rgb(&s.image, root.join("images").join(format!("{name}.png")))?;
        write_rgb(&label_image(&s.label, spec.height, spec.width)?, root.join("labels").join(format!("{name}.png")))
    })?;
    DatasetIndex::write_manifest(root, &names)?;
    DatasetIndex::load(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_widths() {
        let spec = SynthSpec { width_range: (0.5, 4.0), ..SynthSpec::default() };
        assert!(spec.validate().is_err());
        let spec = SynthSpec { trees: 0, ..SynthSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn sample_is_reproducible_and_order_free() {
        let spec = SynthSpec::default();
        let a = synth_image(&spec, 3).unwrap();
        let _ = synth_image(&spec, 2).unwrap();
        let b = synth_image(&spec, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
    }

    #[test]
    fn both_classes_and_sane_fraction() {
        let spec = SynthSpec::default();
        let table = LabelColorTable::default();
        for i in 0..100 {
            let s = synth_image(&spec, i).unwrap();
            assert!(s.label.contains(&table.artery), "sample {i} has no artery");
            assert!(s.label.contains(&table.vein), "sample {i} has no vein");
            let f = s.vessel_fraction(&table);
            assert!((0.02..=0.15).contains(&f), "sample {i}: vessel fraction {f}");
        }
    }
}
