//! Random crop-with-padding and horizontal flip for `[n, c, h, w]` batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentSpec {
    /// Zero padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub hflip: bool,
}

impl AugmentSpec {
    pub const CIFAR: AugmentSpec = AugmentSpec {
        crop_pad: 4,
        hflip: true,
    };

    pub fn is_identity(&self) -> bool {
        self.crop_pad == 0 && !self.hflip
    }
}

fn image_dims(batch: &Batch) -> Result<[usize; 4]> {
    match batch.inputs.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::shape("image batch", &[0, 0, 0, 0], s)),
    }
}

/// Mirrors the images whose `mask` entry is set.
pub fn hflip_images(batch: &Batch, mask: &[bool]) -> Result<Batch> {
    let [n, c, h, w] = image_dims(batch)?;
    if mask.len() != n {
        return Err(Error::shape("flip mask", &[n], &[mask.len()]));
    }
    let src = batch.inputs.data();
    let mut out = src.to_vec();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for row in 0..c * h {
            let base = (i * c * h + row) * w;
            out[base..base + w].reverse();
        }
    }
    Ok(Batch {
        inputs: Tensor::new(vec![n, c, h, w], out)?,
        labels: batch.labels.clone(),
    })
}

/// Shifts each image by `(dy, dx)` inside a zero border of width `pad`,
/// which is a crop of the padded image at offset `(pad + dy, pad + dx)`.
pub fn crop_images(batch: &Batch, pad: usize, shifts: &[(isize, isize)]) -> Result<Batch> {
    let [n, c, h, w] = image_dims(batch)?;
    if shifts.len() != n {
        return Err(Error::shape("crop shifts", &[n], &[shifts.len()]));
    }
    let p = pad as isize;
    if shifts.iter().any(|&(dy, dx)| dy.abs() > p || dx.abs() > p) {
        return Err(Error::config(format!("crop shift exceeds padding {pad}")));
    }
    let src = batch.inputs.data();
    let mut out = vec![0.0f32; src.len()];
    for (i, &(dy, dx)) in shifts.iter().enumerate() {
        for ch in 0..c {
            let plane = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Ok(Batch {
        inputs: Tensor::new(vec![n, c, h, w], out)?,
        labels: batch.labels.clone(),
    })
}

/// Applies random crops and flips drawn from `rng`.
pub fn augment(batch: &Batch, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let [n, ..] = image_dims(batch)?;
    let p = spec.crop_pad as i64;
    let shifts: Vec<(isize, isize)> = (0..n)
        .map(|_| {
            (
                rng.random_range(-p..=p) as isize,
                rng.random_range(-p..=p) as isize,
            )
        })
        .collect();
    let flips: Vec<bool> = (0..n).map(|_| spec.hflip && rng.random::<bool>()).collect();
    let cropped = crop_images(batch, spec.crop_pad, &shifts)?;
    hflip_images(&cropped, &flips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn images() -> Batch {
        let data: Vec<f32> = (0..2 * 3 * 4 * 5).map(|i| i as f32).collect();
        Batch::new(Tensor::new(vec![2, 3, 4, 5], data).unwrap(), vec![0, 1]).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let b = images();
        let mask = [true, false];
        let once = hflip_images(&b, &mask).unwrap();
        assert_ne!(once, b);
        assert_eq!(hflip_images(&once, &mask).unwrap(), b);
        assert_eq!(once.inputs.data()[0], 4.0);
    }

    #[test]
    fn zero_shift_is_identity() {
        let b = images();
        assert_eq!(crop_images(&b, 4, &[(0, 0), (0, 0)]).unwrap(), b);
    }

    #[test]
    fn shift_fills_with_zeros() {
        let b = images();
        let s = crop_images(&b, 4, &[(0, 1), (0, 0)]).unwrap();
        assert_eq!(s.inputs.data()[0], 1.0);
        assert_eq!(s.inputs.data()[4], 0.0);
        assert!(crop_images(&b, 1, &[(2, 0), (0, 0)]).is_err());
    }

    #[test]
    fn seeded_augmentation_is_reproducible() {
        let b = images();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment(&b, &AugmentSpec::CIFAR, &mut rng).unwrap()
        };
        assert_eq!(run(3), run(3));
    }
}
