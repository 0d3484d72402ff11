//! Random patch batches drawn from preprocessed training images.

use rand::Rng;

use super::loss::LabelBatch;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::io::LabelTriMap;
use crate::preprocess::InputStack;

/// A preprocessed training image with its labels and field of view.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub name: String,
    pub stack: InputStack,
    pub label: LabelTriMap,
    pub fov: Vec<bool>,
}

impl TrainImage {
    pub fn new(name: impl Into<String>, stack: InputStack, label: LabelTriMap, fov: Option<Vec<bool>>) -> Result<Self> {
        let dims = (stack.height, stack.width);
        if (label.height, label.width) != dims {
            return Err(Error::Shape(format!(
                "label {}x{} does not match image {}x{}",
                label.height, label.width, dims.0, dims.1
            )));
        }
        let fov = fov.unwrap_or_else(|| vec![true; dims.0 * dims.1]);
        if fov.len() != dims.0 * dims.1 {
            return Err(Error::Shape("field-of-view mask does not match image".into()));
        }
        Ok(Self { name: name.into(), stack, label, fov })
    }
}

/// Inputs `[N, C, P, P]`, labels, and the `(image, top, left)` of each patch.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    pub input: Tensor<T>,
    pub labels: LabelBatch,
    pub picks: Vec<(usize, usize, usize)>,
}

/// Uniform top-left corner among all placements of a `patch`-sized window.
pub fn sample_position<R: Rng>(height: usize, width: usize, patch: usize, rng: &mut R) -> Result<(usize, usize)> {
    if height < patch || width < patch {
        return Err(Error::ImageTooSmall { height, width, patch });
    }
    Ok((rng.random_range(0..=height - patch), rng.random_range(0..=width - patch)))
}

/// Draws `batch` patches: a uniformly chosen image, then a uniform position.
///
/// Vessel targets are valid everywhere inside the field of view; artery and
/// vein targets additionally exclude uncertain pixels.
pub fn sample_patch_batch<T: Real, R: Rng>(
    images: &[TrainImage],
    patch: usize,
    batch: usize,
    channels: usize,
    rng: &mut R,
) -> Result<PatchBatch<T>> {
    if images.is_empty() {
        return Err(Error::InvalidParam("no training images".into()));
    }
    if let Some(img) = images.iter().find(|i| i.stack.channels.len() < channels) {
        return Err(Error::Shape(format!("{} has fewer than {channels} channels", img.name)));
    }
    let hw = patch * patch;
    let mut input = Vec::with_capacity(batch * channels * hw);
    let mut target = Vec::with_capacity(batch * 3 * hw);
    let mut valid = Vec::with_capacity(batch * 3 * hw);
    let mut picks = Vec::with_capacity(batch);
    for _ in 0..batch {
        let k = rng.random_range(0..images.len());
        let img = &images[k];
        let (top, left) = sample_position(img.stack.height, img.stack.width, patch, rng)?;
        input.extend(img.stack.crop(top, left, patch, channels).into_iter().map(T::lit));
        let lab = img.label.crop(top, left, patch);
        let w = img.stack.width;
        let fov: Vec<bool> =
            (top..top + patch).flat_map(|y| img.fov[y * w + left..y * w + left + patch].iter().copied()).collect();
        target.extend_from_slice(&lab.vessel);
        target.extend_from_slice(&lab.artery);
        target.extend_from_slice(&lab.vein);
        valid.extend_from_slice(&fov);
        for _ in 0..2 {
            valid.extend(fov.iter().zip(&lab.uncertain).map(|(&f, &u)| f && !u));
        }
        picks.push((k, top, left));
    }
    Ok(PatchBatch {
        input: Tensor::new(vec![batch, channels, patch, patch], input)?,
        labels: LabelBatch { n: batch, size: patch, target, valid },
        picks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Raster;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn image(h: usize, w: usize) -> TrainImage {
        let channels = (0..8).map(|c| Raster::from_fn(h, w, |y, x| (c * 10_000 + y * w + x) as f64)).collect();
        let stack = InputStack { height: h, width: w, channels, stats: vec![(0.0, 1.0); 8] };
        let mut label = LabelTriMap::empty(h, w);
        label.vessel[0] = true;
        label.uncertain[0] = true;
        TrainImage::new("t", stack, label, None).unwrap()
    }

    #[test]
    fn positions_are_uniform() {
        let (h, w, p) = (12, 11, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cells = (h - p + 1) * (w - p + 1);
        let draws = 200 * cells;
        let mut counts = vec![0usize; cells];
        for _ in 0..draws {
            let (t, l) = sample_position(h, w, p, &mut rng).unwrap();
            counts[t * (w - p + 1) + l] += 1;
        }
        let expect = draws as f64 / cells as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let pval = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
        assert!(pval > 0.01, "chi-square p = {pval}");
    }

    #[test]
    fn too_small_image_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_position(7, 20, 8, &mut rng), Err(Error::ImageTooSmall { .. })));
        assert!(sample_position(8, 8, 8, &mut rng).is_ok());
    }

    #[test]
    fn batch_layout_and_validity() {
        let imgs = vec![image(10, 10)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: PatchBatch<f32> = sample_patch_batch(&imgs, 4, 3, 8, &mut rng).unwrap();
        assert_eq!(b.input.shape(), &[3, 8, 4, 4]);
        for (s, &(_, top, left)) in b.picks.iter().enumerate() {
            let v = b.input.data()[(s * 8 + 2) * 16 + 5];
            assert_eq!(v, (20_000 + (top + 1) * 10 + left + 1) as f32);
            let at_origin = top == 0 && left == 0;
            assert_eq!(b.labels.target[s * 48], at_origin);
            assert!(b.labels.valid[s * 48]);
            assert_eq!(b.labels.valid[s * 48 + 16], !at_origin);
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let imgs = vec![image(20, 20), image(16, 24)];
        let a: PatchBatch<f32> = sample_patch_batch(&imgs, 8, 4, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b: PatchBatch<f32> = sample_patch_batch(&imgs, 8, 4, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.picks, b.picks);
        assert_eq!(a.input, b.input);
    }
}
