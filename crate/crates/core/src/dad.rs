//! Division-adjoint (DAD) coding of signed kernels into one non-negative,
//! unit-sum PSF.
//!
//! Every kernel `W_c` is split into `P_c = max(W_c, 0)` and
//! `N_c = max(-W_c, 0)`. The `2K` parts are stitched on a grid of tiles
//! spaced `tile_pitch` apart and divided by `s = ΣP + ΣN`. After optical
//! convolution each part's response lands in its own window of the sensor
//! plane, so `y_c = s · (window(c,+) - window(c,-))` recovers the signed
//! full convolution.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optics::Psf;
use crate::tensor::{checkpoint, Tensor};

pub const DEFAULT_GUARD: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    fn as_f32(self) -> f32 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub channel: usize,
    pub sign: Sign,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CropMode {
    /// centered `input_h × input_w` window of the full output
    #[default]
    Same,
    Full,
}

impl std::str::FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(CropMode::Same),
            "full" => Ok(CropMode::Full),
            _ => Err(Error::Config(format!("crop mode must be same|full, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DadLayout {
    pub channels: usize,
    pub kernel: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub tile_pitch: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub guard: usize,
    /// 0 until `encode` sets it
    pub scale: f32,
    pub placement: Vec<Tile>,
    /// hash of the kernels the PSF was compiled from
    pub kernel_hash: Option<u64>,
}

pub fn plan_layout(channels: usize, kernel: usize, input_h: usize, input_w: usize, guard: usize) -> Result<DadLayout> {
    if channels == 0 || kernel == 0 || input_h == 0 || input_w == 0 {
        return Err(Error::Parameter(format!(
            "layout needs K, k, H, W >= 1 (got K={channels}, k={kernel}, {input_h}x{input_w})"
        )));
    }
    let parts = 2 * channels;
    let grid_cols = (parts as f64).sqrt().ceil() as usize;
    let grid_rows = parts.div_ceil(grid_cols);
    let mut placement = Vec::with_capacity(parts);
    for channel in 0..channels {
        for (j, sign) in [Sign::Positive, Sign::Negative].into_iter().enumerate() {
            let slot = 2 * channel + j;
            placement.push(Tile {
                channel,
                sign,
                row: slot / grid_cols,
                col: slot % grid_cols,
            });
        }
    }
    Ok(DadLayout {
        channels,
        kernel,
        input_h,
        input_w,
        tile_pitch: input_h.max(input_w) + kernel - 1 + guard,
        grid_rows,
        grid_cols,
        guard,
        scale: 0.0,
        placement,
        kernel_hash: None,
    })
}

impl DadLayout {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(format!("invalid DAD layout: {m}")));
        if self.channels == 0 || self.kernel == 0 || self.input_h == 0 || self.input_w == 0 {
            return bad("zero extent".into());
        }
        if self.grid_rows * self.grid_cols < 2 * self.channels {
            return bad(format!("{}x{} grid holds fewer than {} tiles", self.grid_rows, self.grid_cols, 2 * self.channels));
        }
        let need = self.input_h.max(self.input_w) + self.kernel - 1 + self.guard;
        if self.tile_pitch < need {
            return bad(format!("tile pitch {} < {need}", self.tile_pitch));
        }
        if self.placement.len() != 2 * self.channels {
            return bad(format!("{} placements for {} channels", self.placement.len(), self.channels));
        }
        let mut seen = vec![[false; 2]; self.channels];
        let mut cells = vec![false; self.grid_rows * self.grid_cols];
        for t in &self.placement {
            if t.channel >= self.channels || t.row >= self.grid_rows || t.col >= self.grid_cols {
                return bad(format!("placement {t:?} out of range"));
            }
            let s = &mut seen[t.channel][(t.sign == Sign::Negative) as usize];
            let cell = &mut cells[t.row * self.grid_cols + t.col];
            if *s || *cell {
                return bad(format!("duplicate placement {t:?}"));
            }
            *s = true;
            *cell = true;
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return bad(format!("scale {}", self.scale));
        }
        Ok(())
    }

    /// PSF extent (rows, cols).
    pub fn psf_size(&self) -> (usize, usize) {
        (self.grid_rows * self.tile_pitch, self.grid_cols * self.tile_pitch)
    }

    /// Sensor extent for one input plane.
    pub fn sensor_size(&self) -> (usize, usize) {
        let (ph, pw) = self.psf_size();
        (self.input_h + ph - 1, self.input_w + pw - 1)
    }

    /// Full-convolution output extent.
    pub fn full_size(&self) -> (usize, usize) {
        (self.input_h + self.kernel - 1, self.input_w + self.kernel - 1)
    }

    /// Top-left corner of a tile inside the PSF.
    pub fn tile_origin(&self, tile: &Tile) -> (usize, usize) {
        (tile.row * self.tile_pitch, tile.col * self.tile_pitch)
    }

    /// Top-left corner of a tile's response window on the sensor. The
    /// sensor frame is inverted with respect to the PSF frame.
    pub fn window_origin(&self, tile: &Tile) -> (usize, usize) {
        let (ph, pw) = self.psf_size();
        let (a, b) = self.tile_origin(tile);
        (ph - self.kernel - a, pw - self.kernel - b)
    }

    pub fn tile_for(&self, channel: usize, sign: Sign) -> &Tile {
        self.placement
            .iter()
            .find(|t| t.channel == channel && t.sign == sign)
            .expect("validated layout has every signed part")
    }

    /// TNSR1 records `placement` [2K,4] (channel, ±1, row, col), `meta`
    /// [K, k, H, W, tile_pitch, rows, cols, scale, guard] and, when known,
    /// `kernel_hash` [4] holding 16-bit chunks.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let place: Vec<f32> = self
            .placement
            .iter()
            .flat_map(|t| [t.channel as f32, t.sign.as_f32(), t.row as f32, t.col as f32])
            .collect();
        let meta = vec![
            self.channels as f32,
            self.kernel as f32,
            self.input_h as f32,
            self.input_w as f32,
            self.tile_pitch as f32,
            self.grid_rows as f32,
            self.grid_cols as f32,
            self.scale,
            self.guard as f32,
        ];
        let mut out = vec![
            ("placement".to_string(), Tensor::new(&[self.placement.len(), 4], place).expect("shape")),
            ("meta".to_string(), Tensor::new(&[9], meta).expect("shape")),
        ];
        if let Some(h) = self.kernel_hash {
            let chunks = (0..4).map(|i| ((h >> (16 * i)) & 0xffff) as f32).collect();
            out.push(("kernel_hash".to_string(), Tensor::new(&[4], chunks).expect("shape")));
        }
        out
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let fmt = |m: String| Error::Format { offset: 0, message: m };
        let meta = checkpoint::find(records, "meta")?.data();
        if meta.len() != 9 {
            return Err(fmt(format!("layout meta has {} values, expected 9", meta.len())));
        }
        let int = |v: f32, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(fmt(format!("layout {what} is not a count: {v}")))
            }
        };
        let place = checkpoint::find(records, "placement")?;
        if place.rank() != 2 || place.shape()[1] != 4 {
            return Err(fmt(format!("placement shape {:?}, expected [2K,4]", place.shape())));
        }
        let mut placement = Vec::with_capacity(place.shape()[0]);
        for r in place.data().chunks_exact(4) {
            let sign = match r[1] {
                1.0 => Sign::Positive,
                -1.0 => Sign::Negative,
                v => return Err(fmt(format!("placement sign {v}"))),
            };
            placement.push(Tile {
                channel: int(r[0], "channel")?,
                sign,
                row: int(r[2], "row")?,
                col: int(r[3], "col")?,
            });
        }
        let kernel_hash = match records.iter().find(|(n, _)| n == "kernel_hash") {
            None => None,
            Some((_, t)) => {
                if t.len() != 4 {
                    return Err(fmt("kernel_hash must hold 4 chunks".into()));
                }
                let mut h = 0u64;
                for (i, &c) in t.data().iter().enumerate() {
                    h |= (int(c, "hash chunk")? as u64 & 0xffff) << (16 * i);
                }
                Some(h)
            }
        };
        let layout = DadLayout {
            channels: int(meta[0], "K")?,
            kernel: int(meta[1], "k")?,
            input_h: int(meta[2], "input_h")?,
            input_w: int(meta[3], "input_w")?,
            tile_pitch: int(meta[4], "tile_pitch")?,
            grid_rows: int(meta[5], "rows")?,
            grid_cols: int(meta[6], "cols")?,
            scale: meta[7],
            guard: int(meta[8], "guard")?,
            placement,
            kernel_hash,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let recs = self.to_records();
        let refs: Vec<(&str, &Tensor)> = recs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        checkpoint::save(path, &refs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        DadLayout::from_records(&checkpoint::load(path)?)
    }
}

/// FNV-1a over `(K, k)` and the bit patterns of the kernel values, with
/// `-0.0` folded onto `0.0`. Accepts `[K,k,k]` or `[K,1,k,k]`.
pub fn kernel_hash(kernels: &Tensor) -> u64 {
    let s = kernels.shape();
    let (kc, k) = (s[0], s[s.len() - 1]);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&(kc as u64).to_le_bytes());
    eat(&(k as u64).to_le_bytes());
    for v in kernels.data() {
        eat(&(v + 0.0).to_bits().to_le_bytes());
    }
    h
}

/// `(max(W,0), max(-W,0))`.
pub fn split_signed(w: &Tensor) -> (Tensor, Tensor) {
    (w.map(|v| v.max(0.0)), w.map(|v| (-v).max(0.0)))
}

/// Accepts `[K,k,k]` or `[K,1,k,k]`; returns (K, k).
fn kernel_dims(w: &Tensor) -> Result<(usize, usize)> {
    let s = w.shape();
    let (k_out, kh, kw) = match s {
        [a, b, c] => (*a, *b, *c),
        [a, 1, b, c] => (*a, *b, *c),
        _ => return Err(Error::shape("dad kernels", s, &[0, 0, 0])),
    };
    if kh != kw {
        return Err(Error::Geometry(format!("DAD kernels must be square, got {kh}x{kw}")));
    }
    Ok((k_out, kh))
}

/// Stitches the split kernels into a unit-sum PSF and records the scale
/// and the kernel hash in the returned layout.
pub fn encode(w: &Tensor, layout: &DadLayout) -> Result<(Psf, DadLayout)> {
    w.check_finite("DAD kernels")?;
    let (p, n) = split_signed(w);
    encode_parts(&p, &n, layout)
}

/// Encodes an explicit non-negative pair; the effective signed kernel is
/// `P - N`.
pub fn encode_parts(p: &Tensor, n: &Tensor, layout: &DadLayout) -> Result<(Psf, DadLayout)> {
    layout.validate()?;
    if p.shape() != n.shape() {
        return Err(Error::shape("encode_parts", p.shape(), n.shape()));
    }
    p.check_finite("positive kernels")?;
    n.check_finite("negative kernels")?;
    if p.data().iter().chain(n.data()).any(|&v| v < 0.0) {
        return Err(Error::Contract("kernel parts must be non-negative".into()));
    }
    let (kc, k) = kernel_dims(p)?;
    if kc != layout.channels || k != layout.kernel {
        return Err(Error::Geometry(format!(
            "kernels are {kc} x {k}x{k}, layout expects {} x {}x{}",
            layout.channels, layout.kernel, layout.kernel
        )));
    }
    let s: f64 = p.data().iter().chain(n.data()).map(|&v| v as f64).sum();
    if s == 0.0 {
        return Err(Error::Degenerate("all DAD kernels are zero; PSF scale undefined".into()));
    }
    let (ph, pw) = layout.psf_size();
    let mut psf = vec![0.0f64; ph * pw];
    for t in &layout.placement {
        let (r0, c0) = layout.tile_origin(t);
        let src = match t.sign {
            Sign::Positive => p.data(),
            Sign::Negative => n.data(),
        };
        let base = t.channel * k * k;
        for i in 0..k {
            for j in 0..k {
                psf[(r0 + i) * pw + c0 + j] = src[base + i * k + j] as f64 / s;
            }
        }
    }
    let psf = Psf::normalize(ph, pw, &psf)?;
    let signed = Tensor::new(
        &[kc, k, k],
        p.data().iter().zip(n.data()).map(|(a, b)| a - b).collect(),
    )?;
    let mut out = layout.clone();
    out.scale = s as f32;
    out.kernel_hash = Some(kernel_hash(&signed));
    Ok((psf, out))
}

/// Signed full-convolution maps `[C·K, H+k-1, W+k-1]` from a sensor stack
/// `[C, H+Ph-1, W+Pw-1]`; map `c·K + j` is channel `j` of plane `c`.
pub fn decode(sensor: &Tensor, layout: &DadLayout) -> Result<Tensor> {
    layout.validate()?;
    if layout.scale <= 0.0 {
        return Err(Error::Contract("layout has no scale; encode the kernels first".into()));
    }
    let (sh, sw) = layout.sensor_size();
    let s = sensor.shape();
    if s.len() != 3 || s[1] != sh || s[2] != sw {
        return Err(Error::Geometry(format!(
            "sensor is {s:?}, layout expects [C, {sh}, {sw}]"
        )));
    }
    let planes = s[0];
    let kk = layout.channels;
    let (fh, fw) = layout.full_size();
    let mut out = vec![0.0f32; planes * kk * fh * fw];
    let src = sensor.data();
    for c in 0..planes {
        for j in 0..kk {
            let dst = &mut out[(c * kk + j) * fh * fw..][..fh * fw];
            for (sign, factor) in [(Sign::Positive, layout.scale), (Sign::Negative, -layout.scale)] {
                let (y0, x0) = layout.window_origin(layout.tile_for(j, sign));
                for y in 0..fh {
                    let row = &src[(c * sh + y0 + y) * sw + x0..][..fw];
                    dst[y * fw..][..fw]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, &v)| *d += factor * v);
                }
            }
        }
    }
    Tensor::new(&[planes * kk, fh, fw], out)
}

/// Center crop of full maps `[M, H+k-1, W+k-1]` to `[M, H, W]`.
pub fn crop_same(full: &Tensor, layout: &DadLayout) -> Result<Tensor> {
    let (fh, fw) = layout.full_size();
    let s = full.shape();
    if s.len() != 3 || s[1] != fh || s[2] != fw {
        return Err(Error::Geometry(format!("full maps are {s:?}, expected [M, {fh}, {fw}]")));
    }
    let (h, w, off) = (layout.input_h, layout.input_w, (layout.kernel - 1) / 2);
    let mut out = Vec::with_capacity(s[0] * h * w);
    for m in 0..s[0] {
        for y in 0..h {
            out.extend_from_slice(&full.data()[(m * fh + y + off) * fw + off..][..w]);
        }
    }
    Tensor::new(&[s[0], h, w], out)
}

pub fn decode_with(sensor: &Tensor, layout: &DadLayout, crop: CropMode) -> Result<Tensor> {
    let full = decode(sensor, layout)?;
    match crop {
        CropMode::Full => Ok(full),
        CropMode::Same => crop_same(&full, layout),
    }
}

/// Check that the sensor plane holds no energy outside the
/// tile windows: returns the sum of squares found there.
pub fn energy_outside_windows(sensor: &Tensor, layout: &DadLayout) -> Result<f64> {
    let (sh, sw) = layout.sensor_size();
    let s = sensor.shape();
    if s.len() != 3 || s[1] != sh || s[2] != sw {
        return Err(Error::Geometry(format!("sensor is {s:?}, layout expects [C, {sh}, {sw}]")));
    }
    let (fh, fw) = layout.full_size();
    let mut inside = vec![false; sh * sw];
    for t in &layout.placement {
        let (y0, x0) = layout.window_origin(t);
        for y in 0..fh {
            inside[(y0 + y) * sw + x0..][..fw].iter_mut().for_each(|v| *v = true);
        }
    }
    Ok(sensor
        .data()
        .chunks_exact(sh * sw)
        .flat_map(|plane| plane.iter().zip(&inside))
        .filter(|(_, &i)| !i)
        .map(|(&v, _)| v as f64 * v as f64)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_example() {
        let w = Tensor::new(&[1, 2, 2], vec![2.0, -3.0, 0.0, 1.0]).unwrap();
        let (p, n) = split_signed(&w);
        assert_eq!(p.data(), &[2.0, 0.0, 0.0, 1.0]);
        assert_eq!(n.data(), &[0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_formula() {
        let l = plan_layout(12, 13, 32, 32, DEFAULT_GUARD).unwrap();
        assert_eq!((l.grid_rows, l.grid_cols), (5, 5));
        assert_eq!(l.tile_pitch, 32 + 12 + 2);
        let l = plan_layout(1, 1, 1, 1, 0).unwrap();
        assert_eq!((l.grid_rows, l.grid_cols), (1, 2));
    }

    #[test]
    fn scalar_example() {
        let p = Tensor::new(&[1, 1, 1], vec![0.6]).unwrap();
        let n = Tensor::new(&[1, 1, 1], vec![0.2]).unwrap();
        let layout = plan_layout(1, 1, 1, 1, 0).unwrap();
        let (psf, l) = encode_parts(&p, &n, &layout).unwrap();
        assert!((l.scale - 0.8).abs() < 1e-7);
        assert!((psf.intensity()[0] - 0.75).abs() < 1e-7);
        assert!((psf.intensity()[1] - 0.25).abs() < 1e-7);
        let x = 1.5f32;
        let sensor = crate::optics::optical_convolve(&Tensor::new(&[1, 1, 1], vec![x]).unwrap(), &psf).unwrap();
        let y = decode(&sensor, &l).unwrap();
        assert!((y.data()[0] - 0.4 * x).abs() < 1e-6);
    }

    #[test]
    fn zero_kernels_are_degenerate() {
        let layout = plan_layout(2, 3, 4, 4, 2).unwrap();
        let w = Tensor::zeros(&[2, 3, 3]);
        assert!(matches!(encode(&w, &layout), Err(Error::Degenerate(_))));
    }

    #[test]
    fn decode_needs_scale() {
        let layout = plan_layout(1, 3, 4, 4, 2).unwrap();
        let (sh, sw) = layout.sensor_size();
        assert!(matches!(decode(&Tensor::zeros(&[1, sh, sw]), &layout), Err(Error::Contract(_))));
    }
}
