//! Synthetic single-channel shape images. Each class id is one shape family;
//! an instance is the family's canonical region under a random similarity
//! transform, drawn as a flat foreground intensity over a flat background
//! intensity plus clamped Gaussian noise. Pixel values are quantised to
//! multiples of 1/255 so images survive an 8-bit PGM round trip unchanged.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Upper bound on the area fraction of a rendered shape.
pub const MAX_SHAPE_FRACTION: f64 = 0.5;
const MAX_RENDER_ATTEMPTS: usize = 200;
/// Instance half-extent as a fraction of the image side.
const SCALE_RANGE: (f64, f64) = (0.16, 0.375);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
    HorizontalBar,
    VerticalBar,
    LShape,
    TShape,
    Diamond,
    CheckerPatch,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 12] = [
        ShapeFamily::Disk,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Star,
        ShapeFamily::HorizontalBar,
        ShapeFamily::VerticalBar,
        ShapeFamily::LShape,
        ShapeFamily::TShape,
        ShapeFamily::Diamond,
        ShapeFamily::CheckerPatch,
    ];

    pub fn from_class(class_id: usize) -> Option<Self> {
        Self::ALL.get(class_id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Disk => "disk",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Star => "star",
            ShapeFamily::HorizontalBar => "horizontal-bar",
            ShapeFamily::VerticalBar => "vertical-bar",
            ShapeFamily::LShape => "l-shape",
            ShapeFamily::TShape => "t-shape",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::CheckerPatch => "checker-patch",
        }
    }

    /// Maximum absolute rotation in radians. Families whose identity depends
    /// on orientation (bars, square vs diamond) only get a small jitter.
    fn max_rotation(self) -> f64 {
        match self {
            ShapeFamily::Disk
            | ShapeFamily::Ring
            | ShapeFamily::Triangle
            | ShapeFamily::Star
            | ShapeFamily::LShape
            | ShapeFamily::TShape => PI,
            _ => PI / 18.0,
        }
    }

    /// Membership test in the canonical frame, roughly `[-1, 1]^2`.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Disk => u * u + v * v <= 1.0,
            ShapeFamily::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeFamily::Triangle => {
                // equilateral, inscribed in the unit circle, apex at v = -1
                let s3 = 3f64.sqrt();
                v <= 0.5 && s3 * u - v <= 1.0 && -s3 * u - v <= 1.0
            }
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeFamily::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            ShapeFamily::Star => in_star(u, v),
            ShapeFamily::HorizontalBar => u.abs() <= 1.0 && v.abs() <= 0.35,
            ShapeFamily::VerticalBar => u.abs() <= 0.35 && v.abs() <= 1.0,
            ShapeFamily::LShape => {
                ((-0.8..=-0.2).contains(&u) && (-0.9..=0.9).contains(&v))
                    || ((-0.8..=0.8).contains(&u) && (0.3..=0.9).contains(&v))
            }
            ShapeFamily::TShape => {
                ((-0.9..=-0.3).contains(&v) && u.abs() <= 0.9)
                    || (u.abs() <= 0.3 && (-0.9..=0.9).contains(&v))
            }
            ShapeFamily::Diamond => u.abs() / 0.7 + v.abs() <= 1.0,
            ShapeFamily::CheckerPatch => {
                if u.abs() > 0.9 || v.abs() > 0.9 {
                    return false;
                }
                let cu = ((u + 0.9) / 0.6).floor().min(2.0) as i32;
                let cv = ((v + 0.9) / 0.6).floor().min(2.0) as i32;
                (cu + cv) % 2 == 0
            }
        }
    }
}

/// Five-pointed star, outer radius 1, inner radius 0.45, point at angle -pi/2.
fn in_star(u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    if r > 1.0 {
        return false;
    }
    if r < 0.45 * (PI / 5.0).cos() {
        return true;
    }
    let sector = 2.0 * PI / 5.0;
    let theta = (v.atan2(u) + PI / 2.0).rem_euclid(sector);
    // angle measured from the nearest point
    let phi = if theta > sector / 2.0 {
        sector - theta
    } else {
        theta
    };
    // edge from the point (1, 0) to the inner vertex (0.45, sector/2), in polar form
    let (px, py) = (1.0, 0.0);
    let (qx, qy) = (0.45 * (sector / 2.0).cos(), 0.45 * (sector / 2.0).sin());
    let (x, y) = (r * phi.cos(), r * phi.sin());
    // inside if on the origin side of the edge line
    let cross = (qx - px) * (y - py) - (qy - py) * (x - px);
    let origin = (qx - px) * (0.0 - py) - (qy - py) * (0.0 - px);
    cross * origin >= 0.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDatasetConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub fg_intensity_range: (f64, f64),
    pub bg_intensity_range: (f64, f64),
    pub min_shape_fraction: f64,
    /// Instances are redrawn until their mask, and its mirror image, keep a
    /// foreground pixel under top-left subsampling by this factor (the
    /// encoder's downsample factor).
    pub feature_stride: usize,
}

impl Default for ShapeDatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            image_size: 32,
            noise_std: 0.1,
            fg_intensity_range: (0.6, 1.0),
            bg_intensity_range: (0.0, 0.4),
            min_shape_fraction: 0.05,
            feature_stride: 4,
        }
    }
}

impl ShapeDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 || self.num_classes > ShapeFamily::ALL.len() {
            return bad(format!(
                "num_classes must be in 1..={}, got {}",
                ShapeFamily::ALL.len(),
                self.num_classes
            ));
        }
        if self.image_size < 8 {
            return bad(format!("image_size must be >= 8, got {}", self.image_size));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        for (name, (lo, hi)) in [
            ("fg_intensity_range", self.fg_intensity_range),
            ("bg_intensity_range", self.bg_intensity_range),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!(
                    "{name} must be an interval within [0, 1], got ({lo}, {hi})"
                ));
            }
        }
        if !(self.min_shape_fraction > 0.0 && self.min_shape_fraction <= 0.5) {
            return bad(format!(
                "min_shape_fraction must be in (0, 0.5], got {}",
                self.min_shape_fraction
            ));
        }
        if self.feature_stride == 0 || !self.image_size.is_multiple_of(self.feature_stride) {
            return bad(format!(
                "feature_stride must be a positive divisor of image_size {}, got {}",
                self.image_size, self.feature_stride
            ));
        }
        Ok(())
    }
}

/// Rounds to the nearest representable 8-bit level.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws the binary mask (labels 0/1) of one instance of `family`.
pub fn render_shape_mask(family: ShapeFamily, size: usize, rng: &mut impl Rng) -> LabelMask {
    let sz = size as f64;
    let scale = uniform(rng, (SCALE_RANGE.0 * sz, SCALE_RANGE.1 * sz));
    let margin = (0.7 * scale).min(sz / 2.0);
    let cx = uniform(rng, (margin, sz - margin));
    let cy = uniform(rng, (margin, sz - margin));
    let max_rot = family.max_rotation();
    let theta = rng.random_range(-max_rot..=max_rot);
    let (sin, cos) = theta.sin_cos();
    LabelMask::from_fn(size, size, |y, x| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let u = (cos * dx + sin * dy) / scale;
        let v = (-sin * dx + cos * dy) / scale;
        family.contains(u, v) as u8
    })
}

/// One instance of `class_id`: a `[1, S, S]` image and its 0/1 mask.
pub fn render_instance(
    class_id: usize,
    seed: u64,
    config: &ShapeDatasetConfig,
) -> Result<(Tensor<f64>, LabelMask)> {
    let family = ShapeFamily::from_class(class_id)
        .filter(|_| class_id < config.num_classes)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "class id {class_id} outside 0..{}",
                config.num_classes
            ))
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let area = (size * size) as f64;
    let mut mask = None;
    for _ in 0..MAX_RENDER_ATTEMPTS {
        let m = render_shape_mask(family, size, &mut rng);
        let frac = m.count(1) as f64 / area;
        let survives = [m.clone(), m.flip_horizontal()].iter().all(|v| {
            v.downsample(config.feature_stride)
                .is_ok_and(|d| d.count(1) > 0)
        });
        if frac >= config.min_shape_fraction && frac <= MAX_SHAPE_FRACTION && survives {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "could not render a {} covering at least {} of a {size}x{size} image",
            family.name(),
            config.min_shape_fraction
        ))
    })?;
    let fg = uniform(&mut rng, config.fg_intensity_range);
    let bg = uniform(&mut rng, config.bg_intensity_range);
    let noise = (config.noise_std > 0.0)
        .then(|| Normal::new(0.0, config.noise_std).expect("validated noise std"));
    let pixels = mask
        .labels()
        .iter()
        .map(|&l| {
            let base = if l == 1 { fg } else { bg };
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            quantize(base + n)
        })
        .collect();
    Ok((Tensor::new([1, size, size], pixels)?, mask))
}
