//! CIFAR-10 binary batches: each record is one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32×32).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const PIXELS: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Cifar10Set {
    /// `[N,3,32,32]` in `[0,1]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Cifar10Set {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` records (all of them if `n >= len`).
    pub fn subset(&self, n: usize) -> Result<Cifar10Set> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Cifar10Set> {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * PIXELS..][..PIXELS]);
            labels.push(self.labels[i]);
        }
        Ok(Cifar10Set {
            images: Tensor::new(&[indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)?,
            labels,
        })
    }
}

/// Parses the records of one batch file held in memory.
pub fn parse_batch(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    let whole = bytes.len() / RECORD_BYTES;
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format {
            offset: (whole * RECORD_BYTES) as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {RECORD_BYTES} bytes",
                bytes.len() - whole * RECORD_BYTES
            ),
        });
    }
    let mut pixels = Vec::with_capacity(whole * PIXELS);
    let mut labels = Vec::with_capacity(whole);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format {
                offset: (i * RECORD_BYTES) as u64,
                message: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_batch_file(path: impl AsRef<Path>) -> Result<Cifar10Set> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (pixels, labels) = parse_batch(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    })?;
    if labels.is_empty() {
        return Err(Error::Format {
            offset: 0,
            message: format!("{}: no records", path.display()),
        });
    }
    Ok(Cifar10Set {
        images: Tensor::new(&[labels.len(), 3, IMAGE_SIDE, IMAGE_SIDE], pixels)?,
        labels,
    })
}

fn concat(sets: Vec<Cifar10Set>) -> Result<Cifar10Set> {
    let n: usize = sets.iter().map(Cifar10Set::len).sum();
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for s in sets {
        labels.extend_from_slice(&s.labels);
        data.extend(s.images.into_data());
    }
    Ok(Cifar10Set {
        images: Tensor::new(&[n, 3, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
    })
}

/// Reads `data_batch_1..5.bin` (those present, in order; the first is
/// required) and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Cifar10Set, Cifar10Set)> {
    let dir = dir.as_ref();
    let mut train = Vec::new();
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        let p = dir.join(name);
        if i > 0 && !p.exists() {
            break;
        }
        train.push(load_batch_file(p)?);
    }
    let test = load_batch_file(dir.join(TEST_FILE))?;
    Ok((concat(train)?, test))
}

/// Encodes records in the binary batch format. Pixels are rounded from
/// `[0,1]` to bytes.
pub fn encode_batch(set: &Cifar10Set) -> Vec<u8> {
    let mut out = Vec::with_capacity(set.len() * RECORD_BYTES);
    for (i, &label) in set.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            set.images.data()[i * PIXELS..][..PIXELS]
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    out
}

/// Class-conditional stand-in for CIFAR-10 with the same format. Each
/// class is a colored plaid of two gratings at `±θ` with its own
/// frequency, so horizontal flips preserve the class. Samples vary in
/// phase, position, contrast and background, with additive noise.
pub fn synthetic_cifar10(n: usize, seed: u64) -> Result<Cifar10Set> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.15).expect("valid sigma");
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..CLASSES);
        let c = label as f32;
        let theta = std::f32::consts::FRAC_PI_2 * (c * 0.618).fract() + rng.random_range(-0.12..0.12);
        let freq = 0.12 + 0.05 * (label % 4) as f32 + rng.random_range(-0.02..0.02);
        let phases: [f32; 2] = std::array::from_fn(|_| rng.random_range(0.0..std::f32::consts::TAU));
        let base = [(c * 1.3).sin(), (c * 2.1 + 1.0).sin(), (c * 0.7 + 2.0).sin()];
        let color: [f32; 3] = std::array::from_fn(|i| 0.5 + 0.4 * base[i] + rng.random_range(-0.25..0.25));
        let contrast = rng.random_range(0.1..0.35);
        let background: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let (cy, cx) = (rng.random_range(8.0..24.0f32), rng.random_range(8.0..24.0f32));
        let radius = rng.random_range(7.0..14.0f32);
        let (s, co) = theta.sin_cos();
        for ch in 0..3 {
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let (fy, fx) = (y as f32, x as f32);
                    let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                    let envelope = (-d2 / (2.0 * radius * radius)).exp();
                    let k = std::f32::consts::TAU * freq;
                    let wave = 0.5 * ((k * (fx * co + fy * s) + phases[0]).sin() + (k * (fy * s - fx * co) + phases[1]).sin());
                    let v = background[ch] + contrast * envelope * wave * (2.0 * color[ch] - 0.5)
                        + 0.1 * envelope * (color[ch] - 0.5)
                        + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Ok(Cifar10Set {
        images: Tensor::new(&[n, 3, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
    })
}

/// Writes a synthetic dataset as `data_batch_1.bin` and `test_batch.bin`.
pub fn write_synthetic_cifar10(dir: impl AsRef<Path>, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(TRAIN_FILES[0]), encode_batch(&synthetic_cifar10(n_train, seed)?))?;
    std::fs::write(
        dir.join(TEST_FILE),
        encode_batch(&synthetic_cifar10(n_test, seed.wrapping_add(0x9e37_79b9))?),
    )?;
    Ok(())
}
