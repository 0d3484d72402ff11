//! Raster loading and writing, A/V label decoding and dataset indexing.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Scalar raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// RGB fundus photograph with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FundusImage {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<[f64; 3]>,
    /// Field-of-view mask; `None` means the whole frame is in view.
    pub fov: Option<Vec<bool>>,
}

impl FundusImage {
    pub fn new(height: usize, width: usize, rgb: Vec<[f64; 3]>, fov: Option<Vec<bool>>) -> Result<Self> {
        if rgb.len() != height * width {
            return Err(Error::Shape(format!("image {height}x{width} with {} pixels", rgb.len())));
        }
        if let Some((i, px)) = rgb.iter().enumerate().find(|(_, px)| px.iter().any(|v| !(0.0..=1.0).contains(v))) {
            let bad = px.iter().copied().find(|v| !(0.0..=1.0).contains(v)).unwrap_or(f64::NAN);
            return Err(Error::OutOfRange { index: i, value: bad });
        }
        if let Some(m) = &fov {
            if m.len() != height * width {
                return Err(Error::Shape(format!("fov mask has {} pixels, image {height}x{width}", m.len())));
            }
        }
        Ok(Self { height, width, rgb, fov })
    }

    pub fn channel(&self, c: usize) -> Raster {
        Raster { height: self.height, width: self.width, data: self.rgb.iter().map(|px| px[c]).collect() }
    }

    pub fn from_channels(r: &Raster, g: &Raster, b: &Raster, fov: Option<Vec<bool>>) -> Result<Self> {
        if r.dims() != g.dims() || r.dims() != b.dims() {
            return Err(Error::Shape("channel rasters differ in size".into()));
        }
        let rgb = (0..r.data.len()).map(|i| [r.data[i], g.data[i], b.data[i]]).collect();
        Self::new(r.height, r.width, rgb, fov)
    }

    /// In-FOV flags, all true when no mask is attached.
    pub fn fov_mask(&self) -> Vec<bool> {
        self.fov.clone().unwrap_or_else(|| vec![true; self.height * self.width])
    }
}

/// Ground-truth flags per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTriMap {
    pub height: usize,
    pub width: usize,
    pub vessel: Vec<bool>,
    pub artery: Vec<bool>,
    pub vein: Vec<bool>,
    /// Crossings and vessel pixels of unknown class.
    pub uncertain: Vec<bool>,
}

impl LabelTriMap {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self { height, width, vessel: vec![false; n], artery: vec![false; n], vein: vec![false; n], uncertain: vec![false; n] }
    }

    /// Checks the flag invariants; returns the first offending pixel index.
    pub fn validate(&self) -> std::result::Result<(), usize> {
        for i in 0..self.vessel.len() {
            let any = self.artery[i] || self.vein[i] || self.uncertain[i];
            let exclusive = !(self.artery[i] && self.vein[i])
                && !(self.uncertain[i] && (self.artery[i] || self.vein[i]));
            if (any && !self.vessel[i]) || !exclusive {
                return Err(i);
            }
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> LabelTriMap {
        let pick = |m: &Vec<bool>| {
            let mut out = Vec::with_capacity(size * size);
            for y in top..top + size {
                out.extend_from_slice(&m[y * self.width + left..y * self.width + left + size]);
            }
            out
        };
        LabelTriMap {
            height: size,
            width: size,
            vessel: pick(&self.vessel),
            artery: pick(&self.artery),
            vein: pick(&self.vein),
            uncertain: pick(&self.uncertain),
        }
    }
}

/// Label colors. Defaults follow the public AV-DRIVE convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelColorTable {
    pub artery: [u8; 3],
    pub vein: [u8; 3],
    pub crossing: [u8; 3],
    pub uncertain: [u8; 3],
    pub background: [u8; 3],
}

impl Default for LabelColorTable {
    fn default() -> Self {
        Self {
            artery: [255, 0, 0],
            vein: [0, 0, 255],
            crossing: [0, 255, 0],
            uncertain: [255, 255, 255],
            background: [0, 0, 0],
        }
    }
}

/// Final per-pixel decision rendered by [`write_av_overlay`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PixelClass {
    Background,
    /// Vessel without an A/V decision.
    Vessel,
    Artery,
    Vein,
}

pub fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, "file not found"));
    }
    image::open(path).map_err(|e| Error::io(path, e))
}

/// Loads an 8-bit raster as RGB in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<FundusImage> {
    let path = path.as_ref();
    let img = open(path)?;
    let rgb: RgbImage = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => img.to_rgb8(),
        other => {
            return Err(Error::UnsupportedRaster {
                path: path.to_path_buf(),
                detail: format!("{:?} is not 8 bits per channel", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let px = rgb
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    FundusImage::new(h, w, px, None)
}

/// Loads an 8-bit grayscale raster scaled to `[0, 1]`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let img = open(path)?;
    let gray: GrayImage = match img {
        DynamicImage::ImageLuma8(i) => i,
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLumaA8(_) => img.to_luma8(),
        other => {
            return Err(Error::UnsupportedRaster {
                path: path.to_path_buf(),
                detail: format!("{:?} is not 8 bits per channel", other.color()),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Raster::new(h, w, gray.as_raw().iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    Ok(load_gray(path)?.data.iter().map(|&v| v >= 0.5).collect())
}

/// Decodes a color-coded label raster. Unknown colors are an error in strict
/// mode and background otherwise.
pub fn decode_av_label(img: &FundusImage, table: &LabelColorTable, strict: bool) -> Result<LabelTriMap> {
    let mut out = LabelTriMap::empty(img.height, img.width);
    for (i, px) in img.rgb.iter().enumerate() {
        let c = [to_byte(px[0]), to_byte(px[1]), to_byte(px[2])];
        if c == table.artery {
            out.artery[i] = true;
            out.vessel[i] = true;
        } else if c == table.vein {
            out.vein[i] = true;
            out.vessel[i] = true;
        } else if c == table.crossing || c == table.uncertain {
            out.uncertain[i] = true;
            out.vessel[i] = true;
        } else if c != table.background && strict {
            return Err(Error::UnknownLabelColor { x: i % img.width, y: i / img.width, rgb: c });
        }
    }
    Ok(out)
}

pub fn load_av_label(path: impl AsRef<Path>, table: &LabelColorTable, strict: bool) -> Result<LabelTriMap> {
    decode_av_label(&load_image(path)?, table, strict)
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::io(path, e))
}

/// Writes values in `[0, 1]` as 8-bit gray, `round(255 v)` with halves rounded up.
pub fn write_gray_map(map: &Raster, path: impl AsRef<Path>) -> Result<()> {
    if let Some((i, &v)) = map.data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange { index: i, value: v });
    }
    let bytes: Vec<u8> = map.data.iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(map.width as u32, map.height as u32, bytes)
        .ok_or_else(|| Error::Shape("gray buffer size".into()))?;
    save(DynamicImage::ImageLuma8(img), path.as_ref())
}

pub fn write_rgb(img: &FundusImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.rgb.iter().flat_map(|px| px.map(to_byte)).collect();
    let out = RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    save(DynamicImage::ImageRgb8(out), path.as_ref())
}

pub fn write_mask(mask: &[bool], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    save(DynamicImage::ImageLuma8(img), path.as_ref())
}

pub fn overlay_color(c: PixelClass) -> [u8; 3] {
    match c {
        PixelClass::Background => [0, 0, 0],
        PixelClass::Vessel => [255, 255, 255],
        PixelClass::Artery => [255, 0, 0],
        PixelClass::Vein => [0, 0, 255],
    }
}

/// Renders decisions: artery red, vein blue, undecided vessel white.
pub fn write_av_overlay(decisions: &[PixelClass], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    if decisions.len() != height * width {
        return Err(Error::Shape(format!("{} decisions for {height}x{width}", decisions.len())));
    }
    let bytes: Vec<u8> = decisions.iter().flat_map(|&c| overlay_color(c)).collect();
    let img = RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Shape("overlay buffer size".into()))?;
    save(DynamicImage::ImageRgb8(img), path.as_ref())
}

/// Decisions that re-encode a ground-truth label (uncertain pixels become plain vessel).
pub fn label_decisions(label: &LabelTriMap) -> Vec<PixelClass> {
    (0..label.vessel.len())
        .map(|i| {
            if label.artery[i] {
                PixelClass::Artery
            } else if label.vein[i] {
                PixelClass::Vein
            } else if label.vessel[i] {
                PixelClass::Vessel
            } else {
                PixelClass::Background
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub name: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub fov: Option<PathBuf>,
    pub split: Split,
}

/// Dataset laid out as `<root>/{images,labels,fov}/<name>.png` plus
/// `<root>/manifest.txt` with one `name<TAB>split` line per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

pub const MANIFEST: &str = "manifest.txt";

impl DatasetIndex {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = root.join(MANIFEST);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(name), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::io(&manifest, format!("line {}: expected `name split`", lineno + 1)));
            };
            let split = Split::parse(split)
                .ok_or_else(|| Error::io(&manifest, format!("line {}: unknown split `{split}`", lineno + 1)))?;
            let image = root.join("images").join(format!("{name}.png"));
            let label = root.join("labels").join(format!("{name}.png"));
            for p in [&image, &label] {
                if !p.exists() {
                    return Err(Error::io(p, "referenced by manifest but missing"));
                }
            }
            let fov = Some(root.join("fov").join(format!("{name}.png"))).filter(|p| p.exists());
            entries.push(DatasetEntry { name: name.to_string(), image, label, fov, split });
        }
        Ok(Self { root, entries })
    }

    pub fn write_manifest(root: impl AsRef<Path>, names: &[(String, Split)]) -> Result<()> {
        let path = root.as_ref().join(MANIFEST);
        let mut text = String::new();
        for (name, split) in names {
            text.push_str(&format!("{name}\t{}\n", split.as_str()));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

impl DatasetEntry {
    /// Image with its FOV mask attached (when the dataset has one).
    pub fn load_image(&self) -> Result<FundusImage> {
        let mut img = load_image(&self.image)?;
        if let Some(f) = &self.fov {
            let mask = load_mask(f)?;
            if mask.len() != img.height * img.width {
                return Err(Error::Shape(format!("{}: fov size differs from image", f.display())));
            }
            img.fov = Some(mask);
        }
        Ok(img)
    }

    pub fn load_label(&self, table: &LabelColorTable, strict: bool) -> Result<LabelTriMap> {
        load_av_label(&self.label, table, strict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel_image(px: Vec<[u8; 3]>, h: usize, w: usize) -> FundusImage {
        FundusImage::new(h, w, px.iter().map(|p| p.map(|b| b as f64 / 255.0)).collect(), None).unwrap()
    }

    #[test]
    fn load_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = RgbImage::from_raw(2, 1, vec![255, 255, 255, 128, 0, 7]).unwrap();
        img.save(&p).unwrap();
        let f = load_image(&p).unwrap();
        assert_eq!((f.height, f.width), (1, 2));
        assert_eq!(f.rgb[0], [1.0, 1.0, 1.0]);
        assert_eq!(f.rgb[1][0], 128.0 / 255.0);
        assert!((f.rgb[1][0] - 0.50196).abs() < 1e-5);

        let black = dir.path().join("b.png");
        RgbImage::new(2, 2).save(&black).unwrap();
        assert!(load_image(&black).unwrap().rgb.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn load_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        let err = load_image(&missing).unwrap_err().to_string();
        assert!(err.contains("nope.png"), "{err}");

        let truncated = dir.path().join("t.png");
        let mut bytes = Vec::new();
        RgbImage::new(8, 8)
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_image(&truncated).unwrap_err().to_string().contains("t.png"));

        let deep = dir.path().join("d.png");
        image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(2, 2).save(&deep).unwrap();
        assert!(matches!(load_image(&deep), Err(Error::UnsupportedRaster { .. })));
    }

    #[test]
    fn decode_follows_color_table() {
        let img = pixel_image(vec![[255, 0, 0], [0, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255]], 1, 5);
        let l = decode_av_label(&img, &LabelColorTable::default(), true).unwrap();
        assert_eq!(l.artery, vec![true, false, false, false, false]);
        assert_eq!(l.vessel, vec![true, false, true, true, true]);
        assert_eq!(l.uncertain, vec![false, false, true, false, true]);
        assert_eq!(l.vein, vec![false, false, false, true, false]);
        assert!(l.validate().is_ok());
    }

    #[test]
    fn decode_strict_rejects_unknown_color() {
        let img = pixel_image(vec![[0, 0, 0], [10, 20, 30]], 1, 2);
        match decode_av_label(&img, &LabelColorTable::default(), true) {
            Err(Error::UnknownLabelColor { x: 1, y: 0, rgb }) => assert_eq!(rgb, [10, 20, 30]),
            other => panic!("{other:?}"),
        }
        let lenient = decode_av_label(&img, &LabelColorTable::default(), false).unwrap();
        assert!(!lenient.vessel[1]);
    }

    #[test]
    fn gray_rounding_half_up() {
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.5), 128);
        let dir = tempfile::tempdir().unwrap();
        let bad = Raster::new(1, 1, vec![1.5]).unwrap();
        assert!(write_gray_map(&bad, dir.path().join("x.png")).is_err());
    }

    #[test]
    fn overlay_roundtrip_of_decoded_label() {
        let dir = tempfile::tempdir().unwrap();
        let img = pixel_image(vec![[255, 0, 0], [0, 0, 255], [0, 255, 0], [0, 0, 0]], 2, 2);
        let l = decode_av_label(&img, &LabelColorTable::default(), true).unwrap();
        let p = dir.path().join("o.png");
        write_av_overlay(&label_decisions(&l), 2, 2, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.rgb[0], [1.0, 0.0, 0.0]);
        assert_eq!(back.rgb[1], [0.0, 0.0, 1.0]);
        // crossing re-encodes as plain vessel
        assert_eq!(back.rgb[2], [1.0, 1.0, 1.0]);
        assert_eq!(back.rgb[3], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn overlay_single_artery_and_background() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        let mut d = vec![PixelClass::Background; 6];
        write_av_overlay(&d, 2, 3, &p).unwrap();
        assert!(load_image(&p).unwrap().rgb.iter().all(|px| *px == [0.0; 3]));
        d[4] = PixelClass::Artery;
        write_av_overlay(&d, 2, 3, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.rgb[4], [1.0, 0.0, 0.0]);
        assert_eq!(back.rgb.iter().filter(|px| **px != [0.0; 3]).count(), 1);
    }

    #[test]
    fn manifest_roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for sub in ["images", "labels"] {
            fs::create_dir_all(root.join(sub)).unwrap();
            RgbImage::new(2, 2).save(root.join(sub).join("a.png")).unwrap();
        }
        DatasetIndex::write_manifest(root, &[("a".into(), Split::Train)]).unwrap();
        let idx = DatasetIndex::load(root).unwrap();
        assert_eq!(idx.entries.len(), 1);
        assert_eq!(idx.split(Split::Train).len(), 1);
        assert!(idx.entries[0].fov.is_none());
        DatasetIndex::write_manifest(root, &[("a".into(), Split::Train), ("b".into(), Split::Test)]).unwrap();
        assert!(DatasetIndex::load(root).is_err());
    }
}
