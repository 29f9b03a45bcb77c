use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Label-preserving random transforms.
///
/// Images support horizontal flips and zero-padded random crops; vectors
/// support additive Gaussian jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub flip_prob: f64,
    pub crop_pad: usize,
    pub jitter_std: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::disabled()
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            flip_prob: 0.0,
            crop_pad: 0,
            jitter_std: 0.0,
        }
    }

    /// Flip with probability 0.5 and crop with 4-pixel padding.
    pub fn images() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            crop_pad: 4,
            jitter_std: 0.0,
        }
    }

    /// Gaussian input jitter with standard deviation 0.1.
    pub fn vectors() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.0,
            crop_pad: 0,
            jitter_std: 0.1,
        }
    }

    fn has_image_ops(&self) -> bool {
        self.flip_prob > 0.0 || self.crop_pad > 0
    }

    /// Checks the spec against a sample shape (`[D]` or `[C, H, W]`).
    pub fn validate(&self, sample_shape: &[usize]) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.jitter_std >= 0.0) {
            return Err(Error::Config("augmentation probabilities and spreads must be valid".into()));
        }
        if !self.enabled {
            return Ok(());
        }
        match sample_shape {
            [_] if self.has_image_ops() => Err(Error::Config("flip and crop need image data".into())),
            [_, h, w] if self.crop_pad >= (*h).min(*w) => Err(Error::Config(format!(
                "crop pad {} must be smaller than the image side {}",
                self.crop_pad,
                (*h).min(*w)
            ))),
            _ => Ok(()),
        }
    }
}

/// Applies independent per-sample transforms to `[N, ...]` inputs.
pub fn augment(inputs: &Tensor<f32>, spec: &AugmentSpec, rng: &mut RngStream) -> Result<Tensor<f32>> {
    let shape = inputs.shape();
    spec.validate(&shape[1..])?;
    if !spec.enabled {
        return Ok(inputs.clone());
    }
    let mut out = inputs.clone();
    let row: usize = shape[1..].iter().product();
    let image = match shape {
        [_, c, h, w] => Some((*c, *h, *w)),
        _ => None,
    };
    for sample in out.data_mut().chunks_mut(row.max(1)) {
        if let Some((c, h, w)) = image {
            if spec.flip_prob > 0.0 && rng.random_bool(spec.flip_prob) {
                for line in sample.chunks_mut(w) {
                    line.reverse();
                }
            }
            if spec.crop_pad > 0 {
                let span = 2 * spec.crop_pad;
                let dy = rng.random_range(0..=span) as isize - spec.crop_pad as isize;
                let dx = rng.random_range(0..=span) as isize - spec.crop_pad as isize;
                shift_planes(sample, c, h, w, dy, dx);
            }
        }
        if spec.jitter_std > 0.0 {
            for v in sample.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += (spec.jitter_std * z) as f32;
            }
        }
    }
    Ok(out)
}

/// `out[y][x] = in[y + dy][x + dx]`, zero outside the image.
fn shift_planes(sample: &mut [f32], c: usize, h: usize, w: usize, dy: isize, dx: isize) {
    if dy == 0 && dx == 0 {
        return;
    }
    let src = sample.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                sample[(ch * h + y) * w + x] = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    0.0
                } else {
                    src[(ch * h + sy as usize) * w + sx as usize]
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images() -> Tensor<f32> {
        let data = (0..2 * 3 * 8 * 8).map(|i| (i % 255) as f32 / 255.0).collect();
        Tensor::new(vec![2, 3, 8, 8], data).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let x = images();
        let mut rng = RngStream::seed_from_u64(0);
        let spec = AugmentSpec {
            enabled: false,
            ..AugmentSpec::images()
        };
        assert_eq!(augment(&x, &spec, &mut rng).unwrap(), x);
    }

    #[test]
    fn double_flip_is_identity() {
        let x = images();
        let spec = AugmentSpec {
            enabled: true,
            flip_prob: 1.0,
            crop_pad: 0,
            jitter_std: 0.0,
        };
        let mut rng = RngStream::seed_from_u64(0);
        let once = augment(&x, &spec, &mut rng).unwrap();
        assert_ne!(once, x);
        assert_eq!(augment(&once, &spec, &mut rng).unwrap(), x);
    }

    #[test]
    fn zero_jitter_is_identity() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let spec = AugmentSpec {
            jitter_std: 0.0,
            ..AugmentSpec::vectors()
        };
        assert_eq!(augment(&x, &spec, &mut RngStream::seed_from_u64(0)).unwrap(), x);
        let jittered = augment(&x, &AugmentSpec::vectors(), &mut RngStream::seed_from_u64(0)).unwrap();
        assert_eq!(jittered.shape(), x.shape());
        assert_ne!(jittered, x);
    }

    #[test]
    fn crop_keeps_shape() {
        let x = images();
        let spec = AugmentSpec::images();
        let y = augment(&x, &spec, &mut RngStream::seed_from_u64(3)).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn invalid_specs() {
        let spec = AugmentSpec {
            crop_pad: 8,
            ..AugmentSpec::images()
        };
        assert!(augment(&images(), &spec, &mut RngStream::seed_from_u64(0)).is_err());
        let vectors = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(augment(&vectors, &AugmentSpec::images(), &mut RngStream::seed_from_u64(0)).is_err());
    }
}
