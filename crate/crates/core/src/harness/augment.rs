//! Training-time augmentation and per-channel normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CROP_PAD: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: bool,
    pub hflip: bool,
    pub flip_prob: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: true,
            hflip: true,
            flip_prob: 0.5,
            mean: CIFAR_MEAN,
            std: CIFAR_STD,
        }
    }
}

/// Reflect padding of one `[C,H,W]` image (edge pixel not repeated).
pub fn reflect_pad(img: &[f32], c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * (n - 1) - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - pad as isize, w);
                out[(ch * ph + y) * pw + x] = img[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

/// `h×w` window at `(oy, ox)` of a `[C,PH,PW]` image.
#[allow(clippy::too_many_arguments)]
pub fn crop(img: &[f32], c: usize, ph: usize, pw: usize, oy: usize, ox: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * ph + oy + y) * pw + ox;
            out.extend_from_slice(&img[row..row + w]);
        }
    }
    out
}

/// Mirrors a `[C,H,W]` image left to right in place.
pub fn hflip(img: &mut [f32], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Crop offset drawn uniformly from `0..=2*CROP_PAD` on each axis.
pub fn crop_offset<R: Rng + ?Sized>(rng: &mut R) -> (usize, usize) {
    (rng.random_range(0..=2 * CROP_PAD), rng.random_range(0..=2 * CROP_PAD))
}

/// Applies pad-reflect + random crop and random horizontal flip when `train`,
/// then normalizes every channel as `(x - mean) / std`.
pub fn augment_normalize<R: Rng + ?Sized>(
    batch: &Tensor,
    config: &AugmentConfig,
    train: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("augment_normalize", &[0, 3, 0, 0], s));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..n {
        let src = &batch.data()[i * per..][..per];
        let mut img = if train && config.crop {
            let padded = reflect_pad(src, c, h, w, CROP_PAD);
            let (oy, ox) = crop_offset(rng);
            crop(&padded, c, h + 2 * CROP_PAD, w + 2 * CROP_PAD, oy, ox, h, w)
        } else {
            src.to_vec()
        };
        if train && config.hflip && rng.random_bool(config.flip_prob) {
            hflip(&mut img, c, h, w);
        }
        for ch in 0..c {
            let (m, sd) = (config.mean[ch], config.std[ch]);
            img[ch * h * w..][..h * w].iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        out.extend(img);
    }
    Tensor::new(s, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_small() {
        let img = [1.0, 2.0, 3.0];
        assert_eq!(reflect_pad(&img, 1, 1, 3, 2)[2 * 7..3 * 7], [3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn center_crop_of_padding_is_identity() {
        let img: Vec<f32> = (0..2 * 5 * 6).map(|v| v as f32).collect();
        let p = reflect_pad(&img, 2, 5, 6, CROP_PAD);
        assert_eq!(crop(&p, 2, 13, 14, CROP_PAD, CROP_PAD, 5, 6), img);
    }
}
