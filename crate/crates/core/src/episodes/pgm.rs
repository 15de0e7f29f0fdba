//! Binary greyscale PGM (`P5`) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err("truncated header".into()),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err("not a binary PGM (missing P5 magic)".into());
        }
        let mut num = |what: &str| -> std::result::Result<usize, String> {
            token()?
                .parse::<usize>()
                .map_err(|_| format!("bad {what} in header"))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if width == 0 || height == 0 {
            return Err("zero image dimension".into());
        }
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let end = start + width * height;
        if bytes.len() < end {
            return Err(format!(
                "raster has {} bytes, expected {}",
                bytes.len().saturating_sub(start),
                width * height
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[start..end].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Samples are `round(255 * v)` of a `[1, H, W]` image in `[0, 1]`.
    pub fn from_image(image: &Tensor<f64>) -> Result<Self> {
        let (c, h, w) = image.chw()?;
        if c != 1 {
            return Err(Error::InvalidArgument(format!(
                "PGM holds one channel, image has {c}"
            )));
        }
        let pixels = image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn to_image(&self) -> Tensor<f64> {
        let data = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new([1, self.height, self.width], data).expect("non-empty PGM")
    }

    /// Mask pixel value is the label id.
    pub fn from_mask(mask: &LabelMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            pixels: mask.labels().to_vec(),
        }
    }

    pub fn to_mask(&self) -> LabelMask {
        LabelMask::new(self.height, self.width, self.pixels.clone()).expect("non-empty PGM")
    }
}
