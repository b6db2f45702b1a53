//! 16-bit binary PGM (P5, maxval 65535, big-endian samples) for PSF
//! images and lithography dose maps.

use std::f64::consts::TAU;
use std::path::Path;

use super::psf::{PhaseMask, Psf};
use super::OpticsConfig;
use crate::error::{Error, Result};

pub const MAXVAL: u16 = 65535;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray16 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

impl Gray16 {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5 {} {} {}\n", self.width, self.height, MAXVAL).into_bytes();
        out.reserve(2 * self.pixels.len());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() {
                match bytes[pos] {
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    c if c.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format {
                    offset: pos as u64,
                    message: "truncated PGM header".into(),
                });
            }
            fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        if fields[0].1 != "P5" {
            return Err(Error::Format {
                offset: 0,
                message: format!("expected P5 magic, found {:?}", fields[0].1),
            });
        }
        let num = |i: usize| -> Result<usize> {
            fields[i].1.parse().map_err(|_| Error::Format {
                offset: fields[i].0 as u64,
                message: format!("bad header number {:?}", fields[i].1),
            })
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != MAXVAL as usize {
            return Err(Error::Format {
                offset: fields[3].0 as u64,
                message: format!("expected maxval 65535, found {maxval}"),
            });
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = 2 * width * height;
        if bytes.len() < pos + need {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("raster truncated: need {need} bytes after offset {pos}"),
            });
        }
        let pixels = bytes[pos..pos + need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        Ok(Gray16 {
            width,
            height,
            pixels,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Gray16::decode(&std::fs::read(path)?)
    }
}

/// Dose value for a phase: `round(φ / 2π · 65535)`.
pub fn phase_to_dose(phase: f32) -> u16 {
    (phase as f64 / TAU * MAXVAL as f64).round() as u16
}

/// Nearest quantization level for a dose value.
pub fn dose_to_phase(dose: u16, levels: u32) -> f32 {
    let k = (dose as f64 / MAXVAL as f64 * levels as f64).round() as u64 % levels as u64;
    (k as f64 * TAU / levels as f64) as f32
}

pub fn dose_map(mask: &PhaseMask) -> Result<Gray16> {
    if mask.levels() == 0 {
        return Err(Error::Contract(
            "dose export needs a quantized mask (levels > 0)".into(),
        ));
    }
    let n = mask.size();
    Ok(Gray16 {
        width: n,
        height: n,
        pixels: mask.phase().iter().map(|&p| phase_to_dose(p)).collect(),
    })
}

pub fn export_dose_map(mask: &PhaseMask, path: impl AsRef<Path>) -> Result<()> {
    dose_map(mask)?.write(path)
}

/// Reads a dose map back to a phase mask with the given level count.
pub fn read_dose_map(path: impl AsRef<Path>, levels: u32, config: OpticsConfig) -> Result<PhaseMask> {
    if levels < 2 {
        return Err(Error::Parameter("dose maps need levels >= 2".into()));
    }
    let img = Gray16::read(path)?;
    if img.width != img.height || img.width != config.mask_pixels {
        return Err(Error::Geometry(format!(
            "dose map is {}x{}, config expects {}x{}",
            img.width, img.height, config.mask_pixels, config.mask_pixels
        )));
    }
    let phase = img.pixels.iter().map(|&d| dose_to_phase(d, levels)).collect();
    PhaseMask::new(phase, levels, config)
}

/// PSF scaled so its peak maps to 65535.
pub fn psf_image(psf: &Psf) -> Gray16 {
    let peak = psf.intensity().iter().copied().fold(0.0f32, f32::max);
    let s = if peak > 0.0 { MAXVAL as f64 / peak as f64 } else { 0.0 };
    Gray16 {
        width: psf.width(),
        height: psf.height(),
        pixels: psf
            .intensity()
            .iter()
            .map(|&v| (v as f64 * s).round() as u16)
            .collect(),
    }
}

/// Metadata written next to a PSF image as `<name>.json`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PsfMeta {
    pub width: usize,
    pub height: usize,
    /// Sum of the stored intensity before quantization.
    pub sum: f64,
    /// Intensity represented by gray level 65535.
    pub peak: f64,
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Writes the PSF image and its metadata sidecar.
pub fn write_psf(psf: &Psf, path: impl AsRef<Path>) -> Result<PsfMeta> {
    let path = path.as_ref();
    psf_image(psf).write(path)?;
    let meta = PsfMeta {
        width: psf.width(),
        height: psf.height(),
        sum: psf.sum(),
        peak: psf.intensity().iter().copied().fold(0.0f32, f32::max) as f64,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(meta_path(path), json + "\n")?;
    Ok(meta)
}

pub fn read_psf_meta(path: impl AsRef<Path>) -> Result<PsfMeta> {
    let text = std::fs::read_to_string(meta_path(path.as_ref()))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })
}

/// Reads a PSF image and renormalizes it to unit sum.
pub fn read_psf(path: impl AsRef<Path>) -> Result<Psf> {
    let img = Gray16::read(path)?;
    let v: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    Psf::normalize(img.height, img.width, &v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dose_formula() {
        assert_eq!(phase_to_dose(0.0), 0);
        assert_eq!(phase_to_dose(std::f32::consts::PI), 32768);
    }

    #[test]
    fn header_format() {
        let g = Gray16 {
            width: 64,
            height: 64,
            pixels: vec![0; 64 * 64],
        };
        let bytes = g.encode();
        assert!(bytes.starts_with(b"P5 64 64 65535\n"));
        assert_eq!(bytes.len(), 15 + 2 * 64 * 64);
    }

    #[test]
    fn decode_accepts_comments_and_reports_truncation() {
        let mut b = b"P5\n# made elsewhere\n2 1\n65535\n".to_vec();
        b.extend_from_slice(&[0x12, 0x34, 0xff, 0xff]);
        let g = Gray16::decode(&b).unwrap();
        assert_eq!(g.pixels, vec![0x1234, 0xffff]);
        b.pop();
        assert!(matches!(Gray16::decode(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn dose_levels_roundtrip() {
        for levels in [2u32, 3, 7, 16, 256] {
            for k in 0..levels {
                let p = (k as f64 * TAU / levels as f64) as f32;
                assert_eq!(dose_to_phase(phase_to_dose(p), levels), p, "levels {levels} k {k}");
            }
        }
    }

    #[test]
    fn unquantized_export_is_refused() {
        let cfg = OpticsConfig {
            mask_pixels: 4,
            ..OpticsConfig::default()
        };
        assert!(matches!(dose_map(&PhaseMask::flat(cfg)), Err(Error::Contract(_))));
    }
}
