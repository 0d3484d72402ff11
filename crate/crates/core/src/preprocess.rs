//! Multi-input channels: illumination correction, a multi-scale Gabor wavelet
//! bank, a multi-scale line detector, and the standardized 8-channel stack.
//!
//! All convolutions and window means use mirror padding (`d c b | a b c d | c b a`).

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::io::{FundusImage, Raster};

pub const STACK_CHANNELS: usize = 8;
pub const CHANNEL_NAMES: [&str; STACK_CHANNELS] = ["r", "g", "b", "r_ic", "g_ic", "b_ic", "gabor", "line"];

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur (radius `ceil(4 sigma)`).
pub fn gaussian_blur(src: &Raster, sigma: f64) -> Result<Raster> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!("blur sigma {sigma} must be positive")));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = src.dims();
    let mut tmp = Raster::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * src.get(y, reflect(x as isize + j as isize - r, w));
            }
            tmp.set(y, x, acc);
        }
    }
    let mut out = Raster::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp.get(reflect(y as isize + j as isize - r, h), x);
            }
            out.set(y, x, acc);
        }
    }
    Ok(out)
}

pub fn default_background_sigma(height: usize, width: usize) -> f64 {
    height.max(width) as f64 / 30.0
}

/// Per channel: `clip(x - blur(x) + mean(x), 0, 1)`.
pub fn illumination_correct(img: &FundusImage, background_sigma: f64) -> Result<FundusImage> {
    if !(background_sigma > 0.0) {
        return Err(Error::InvalidParam(format!("background sigma {background_sigma} must be positive")));
    }
    let mut chans = Vec::with_capacity(3);
    for c in 0..3 {
        let ch = img.channel(c);
        let mean = ch.data.iter().sum::<f64>() / ch.data.len() as f64;
        let bg = gaussian_blur(&ch, background_sigma)?;
        chans.push(Raster {
            height: ch.height,
            width: ch.width,
            data: ch.data.iter().zip(&bg.data).map(|(v, b)| (v - b + mean).clamp(0.0, 1.0)).collect(),
        });
    }
    FundusImage::from_channels(&chans[0], &chans[1], &chans[2], img.fov.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaborBankParams {
    /// Wavelet scales in pixels.
    pub scales: Vec<f64>,
    /// Orientations in degrees.
    pub orientations: Vec<f64>,
    pub elongation: f64,
    pub frequency: (f64, f64),
}

impl Default for GaborBankParams {
    fn default() -> Self {
        Self {
            scales: vec![2.0, 3.0, 4.0],
            orientations: (0..18).map(|i| i as f64 * 10.0).collect(),
            elongation: 4.0,
            frequency: (0.0, 3.0),
        }
    }
}

impl GaborBankParams {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.orientations.is_empty() {
            return Err(Error::InvalidParam("Gabor bank needs at least one scale and orientation".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParam("Gabor scales must be positive".into()));
        }
        if !(self.elongation > 0.0) {
            return Err(Error::InvalidParam("Gabor elongation must be positive".into()));
        }
        Ok(())
    }

    fn radius(&self, scale: f64) -> usize {
        (3.0 * scale * self.elongation.max(1.0).sqrt()).ceil() as usize
    }
}

/// Zero-mean complex Gabor wavelet sampled on a `(2r+1)^2` grid, row-major,
/// indexed by `(dy + r, dx + r)`.
pub fn gabor_kernel(params: &GaborBankParams, scale: f64, theta_deg: f64) -> (usize, Vec<Complex64>) {
    let r = params.radius(scale) as isize;
    let (s, c) = (theta_deg * PI / 180.0).sin_cos();
    let (k0x, k0y) = params.frequency;
    let mut k = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            let (dx, dy) = (dx as f64 / scale, dy as f64 / scale);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            let env = (-0.5 * (u * u / params.elongation + v * v)).exp();
            let phase = k0x * u + k0y * v;
            k.push(Complex64::from_polar(env / scale, phase));
        }
    }
    let mean = k.iter().sum::<Complex64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    (r as usize, k)
}

struct Fft2 {
    h: usize,
    w: usize,
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            h,
            w,
            row: p.plan_fft_forward(w),
            col: p.plan_fft_forward(h),
            row_inv: p.plan_fft_inverse(w),
            col_inv: p.plan_fft_inverse(h),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row, &self.col) };
        for r in data.chunks_mut(self.w) {
            row.process(r);
        }
        let mut buf = vec![Complex64::default(); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                buf[y] = data[y * self.w + x];
            }
            col.process(&mut buf);
            for y in 0..self.h {
                data[y * self.w + x] = buf[y];
            }
        }
        if inverse {
            let n = (self.h * self.w) as f64;
            data.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Per pixel, the maximum Gabor modulus over all scales and orientations.
pub fn gabor_enhance(channel: &Raster, params: &GaborBankParams) -> Result<Raster> {
    params.validate()?;
    let (h, w) = channel.dims();
    let pad = params.scales.iter().map(|&s| params.radius(s)).max().unwrap_or(0);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let fft = Fft2::new(ph, pw);

    let mut spectrum: Vec<Complex64> = (0..ph * pw)
        .map(|i| {
            let (y, x) = ((i / pw) as isize - pad as isize, (i % pw) as isize - pad as isize);
            Complex64::new(channel.get(reflect(y, h), reflect(x, w)), 0.0)
        })
        .collect();
    fft.run(&mut spectrum, false);

    let mut best = Raster::filled(h, w, 0.0);
    let mut kbuf = vec![Complex64::default(); ph * pw];
    for &scale in &params.scales {
        for &theta in &params.orientations {
            let (r, k) = gabor_kernel(params, scale, theta);
            let side = 2 * r + 1;
            kbuf.iter_mut().for_each(|v| *v = Complex64::default());
            // correlation: K(o) goes to index -o (mod size)
            for (j, kv) in k.iter().enumerate() {
                let oy = (j / side) as isize - r as isize;
                let ox = (j % side) as isize - r as isize;
                let iy = (-oy).rem_euclid(ph as isize) as usize;
                let ix = (-ox).rem_euclid(pw as isize) as usize;
                kbuf[iy * pw + ix] = *kv;
            }
            fft.run(&mut kbuf, false);
            kbuf.iter_mut().zip(&spectrum).for_each(|(k, s)| *k *= s);
            fft.run(&mut kbuf, true);
            for y in 0..h {
                for x in 0..w {
                    let m = kbuf[(y + pad) * pw + x + pad].norm();
                    if m > best.get(y, x) {
                        best.set(y, x, m);
                    }
                }
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineDetectorParams {
    pub window: usize,
    pub lengths: Vec<usize>,
    /// Orientations in degrees.
    pub orientations: Vec<f64>,
}

impl Default for LineDetectorParams {
    fn default() -> Self {
        Self {
            window: 15,
            lengths: (0..8).map(|i| 2 * i + 1).collect(),
            orientations: (0..12).map(|i| i as f64 * 15.0).collect(),
        }
    }
}

impl LineDetectorParams {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::InvalidParam(format!("line window {} must be odd", self.window)));
        }
        if self.lengths.is_empty() || self.orientations.is_empty() {
            return Err(Error::InvalidParam("line detector needs lengths and orientations".into()));
        }
        if let Some(l) = self.lengths.iter().find(|&&l| l % 2 == 0 || l > self.window) {
            return Err(Error::InvalidParam(format!("line length {l} must be odd and <= window {}", self.window)));
        }
        Ok(())
    }
}

/// Pixel offsets `(dy, dx)` of a centred digital line, stepping one pixel
/// along the dominant axis.
pub fn line_offsets(length: usize, theta_deg: f64) -> Vec<(isize, isize)> {
    let half = (length / 2) as isize;
    let (s, c) = (theta_deg * PI / 180.0).sin_cos();
    (-half..=half)
        .map(|t| {
            if c.abs() >= s.abs() {
                (-(t as f64 * s / c).round() as isize, t)
            } else {
                (-t, (t as f64 * c / s).round() as isize)
            }
        })
        .collect()
}

fn box_mean(src: &Raster, window: usize) -> Raster {
    let r = (window / 2) as isize;
    let (h, w) = src.dims();
    let mut rows = Raster::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| src.get(y, reflect(x as isize + d, w))).sum();
            rows.set(y, x, s);
        }
    }
    let mut out = Raster::filled(h, w, 0.0);
    let area = (window * window) as f64;
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| rows.get(reflect(y as isize + d, h), x)).sum();
            out.set(y, x, s / area);
        }
    }
    out
}

/// Raw line responses `R_L`, one raster per configured length.
pub fn line_responses(channel: &Raster, params: &LineDetectorParams) -> Result<Vec<Raster>> {
    params.validate()?;
    let (h, w) = channel.dims();
    let window = box_mean(channel, params.window);
    let mut out = Vec::with_capacity(params.lengths.len());
    for &len in &params.lengths {
        let lines: Vec<Vec<(isize, isize)>> = params.orientations.iter().map(|&t| line_offsets(len, t)).collect();
        let mut r = Raster::filled(h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::NEG_INFINITY;
                for offs in &lines {
                    let s: f64 = offs
                        .iter()
                        .map(|&(dy, dx)| channel.get(reflect(y as isize + dy, h), reflect(x as isize + dx, w)))
                        .sum();
                    best = best.max(s / offs.len() as f64);
                }
                r.set(y, x, best - window.get(y, x));
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// Mean and population standard deviation.
pub fn mean_std(data: &[f64]) -> (f64, f64) {
    let n = data.len().max(1) as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

const DEGENERATE_STD: f64 = 1e-12;

/// Zero-mean, unit-std copy; a (near-)constant raster maps to all zeros.
pub fn standardize(r: &Raster) -> (Raster, (f64, f64)) {
    let (mean, std) = mean_std(&r.data);
    if std <= DEGENERATE_STD * mean.abs().max(1.0) {
        return (Raster::filled(r.height, r.width, 0.0), (mean, std));
    }
    (r.map(|v| (v - mean) / std), (mean, std))
}

/// Combined line detector: average of the standardized per-length responses
/// and the standardized input.
pub fn line_detect(channel: &Raster, params: &LineDetectorParams) -> Result<Raster> {
    let responses = line_responses(channel, params)?;
    let (mut acc, _) = standardize(channel);
    for r in &responses {
        let (s, _) = standardize(r);
        acc.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += b);
    }
    let n = (responses.len() + 1) as f64;
    acc.data.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Standardized network input `[R, G, B, R_ic, G_ic, B_ic, gabor, line]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<Raster>,
    /// `(mean, std)` of each channel before standardization.
    pub stats: Vec<(f64, f64)>,
}

pub fn build_stack(orig: &FundusImage, ic: &FundusImage, gabor: &Raster, line: &Raster) -> Result<InputStack> {
    let dims = (orig.height, orig.width);
    if (ic.height, ic.width) != dims || gabor.dims() != dims || line.dims() != dims {
        return Err(Error::Shape(format!(
            "stack inputs differ in size: {:?}, {:?}, {:?}, {:?}",
            dims,
            (ic.height, ic.width),
            gabor.dims(),
            line.dims()
        )));
    }
    let raw = [orig.channel(0), orig.channel(1), orig.channel(2), ic.channel(0), ic.channel(1), ic.channel(2)];
    let mut channels = Vec::with_capacity(STACK_CHANNELS);
    let mut stats = Vec::with_capacity(STACK_CHANNELS);
    for r in raw.iter().chain([gabor, line]) {
        let (s, st) = standardize(r);
        channels.push(s);
        stats.push(st);
    }
    Ok(InputStack { height: dims.0, width: dims.1, channels, stats })
}

impl InputStack {
    /// `[channels, size, size]` values of a square crop, first `channels` channels.
    pub fn crop(&self, top: usize, left: usize, size: usize, channels: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(channels * size * size);
        for ch in &self.channels[..channels] {
            for y in top..top + size {
                out.extend_from_slice(&ch.data[y * self.width + left..y * self.width + left + size]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct PreprocessConfig {
    /// `None` selects `max(H, W) / 30`.
    pub background_sigma: Option<f64>,
    pub gabor: GaborBankParams,
    pub line: LineDetectorParams,
}

/// Intermediate maps of the multi-input module.
pub struct Enhanced {
    pub ic: FundusImage,
    pub gabor: Raster,
    pub line: Raster,
    pub stack: InputStack,
}

/// Full multi-input pipeline; Gabor and line filters see the inverted green
/// channel of the illumination-corrected image.
pub fn enhance(img: &FundusImage, cfg: &PreprocessConfig) -> Result<Enhanced> {
    let sigma = cfg.background_sigma.unwrap_or_else(|| default_background_sigma(img.height, img.width));
    let ic = illumination_correct(img, sigma)?;
    let inv_green = ic.channel(1).map(|g| 1.0 - g);
    let gabor = gabor_enhance(&inv_green, &cfg.gabor)?;
    let line = line_detect(&inv_green, &cfg.line)?;
    let stack = build_stack(img, &ic, &gabor, &line)?;
    Ok(Enhanced { ic, gabor, line, stack })
}

pub fn preprocess(img: &FundusImage, cfg: &PreprocessConfig) -> Result<InputStack> {
    Ok(enhance(img, cfg)?.stack)
}
