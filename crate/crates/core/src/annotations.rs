//! Weak support annotations derived from dense masks: random-walk scribbles
//! and instance bounding boxes.

use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::metric::{compute_prototypes, PrototypeSet};
use crate::scalar::Scalar;
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AnnotationKind {
    #[default]
    Dense,
    Scribble,
    BBox,
}

impl AnnotationKind {
    pub const ALL: [AnnotationKind; 3] = [
        AnnotationKind::Dense,
        AnnotationKind::Scribble,
        AnnotationKind::BBox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnnotationKind::Dense => "dense",
            AnnotationKind::Scribble => "scribble",
            AnnotationKind::BBox => "bbox",
        }
    }
}

impl FromStr for AnnotationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(AnnotationKind::Dense),
            "scribble" => Ok(AnnotationKind::Scribble),
            "bbox" => Ok(AnnotationKind::BBox),
            other => Err(Error::Config(format!(
                "unknown annotation kind {other:?}, expected dense, scribble or bbox"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScribbleConfig {
    /// Foreground strokes per class present in the mask.
    pub strokes: usize,
    /// Maximum number of pixels visited by one stroke.
    pub stroke_length: usize,
}

impl Default for ScribbleConfig {
    fn default() -> Self {
        Self {
            strokes: 3,
            stroke_length: 20,
        }
    }
}

impl ScribbleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stroke_length == 0 {
            return Err(Error::Config(
                "scribble stroke_length must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakAnnotation {
    pub kind: AnnotationKind,
    /// Same shape as the source; [`LabelMask::UNKNOWN`] marks unannotated pixels.
    pub mask: LabelMask,
}

impl WeakAnnotation {
    pub fn dense(mask: LabelMask) -> Self {
        Self {
            kind: AnnotationKind::Dense,
            mask,
        }
    }

    /// Brings the annotation to feature resolution. Dense and box masks keep
    /// the top-left label of each cell. A scribble cell takes the most frequent
    /// annotated label inside it (lower label on ties), or stays unknown, so
    /// thin strokes survive the reduction.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let mask = match self.kind {
            AnnotationKind::Dense | AnnotationKind::BBox => self.mask.downsample(factor)?,
            AnnotationKind::Scribble => downsample_sparse(&self.mask, factor)?,
        };
        Ok(Self {
            kind: self.kind,
            mask,
        })
    }
}

fn downsample_sparse(mask: &LabelMask, factor: usize) -> Result<LabelMask> {
    // validates divisibility
    let coarse = mask.downsample(factor)?;
    let (h, w) = coarse.dims();
    Ok(LabelMask::from_fn(h, w, |cy, cx| {
        let mut counts = [0usize; 256];
        for y in cy * factor..(cy + 1) * factor {
            for x in cx * factor..(cx + 1) * factor {
                counts[mask.get(y, x) as usize] += 1;
            }
        }
        let mut best = LabelMask::UNKNOWN;
        let mut best_n = 0;
        for (label, &n) in counts[..LabelMask::UNKNOWN as usize].iter().enumerate() {
            if n > best_n {
                best = label as u8;
                best_n = n;
            }
        }
        best
    }))
}

fn require_foreground(mask: &LabelMask, op: &str) -> Result<()> {
    if mask
        .labels()
        .iter()
        .all(|&l| l == LabelMask::BACKGROUND || l == LabelMask::UNKNOWN)
    {
        return Err(Error::InvalidArgument(format!(
            "{op}: mask has no foreground pixel"
        )));
    }
    Ok(())
}

const STEPS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbour(mask: &LabelMask, i: usize, (dy, dx): (isize, isize)) -> Option<usize> {
    let (h, w) = mask.dims();
    let y = (i / w) as isize + dy;
    let x = (i % w) as isize + dx;
    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
}

/// Pixels of `label` whose four neighbours are all inside the image and
/// carry `label`; the whole region when that is empty.
fn eroded_region(mask: &LabelMask, label: u8) -> Vec<usize> {
    let region: Vec<usize> = mask.positions(label).collect();
    let inner: Vec<usize> = region
        .iter()
        .copied()
        .filter(|&i| {
            STEPS
                .iter()
                .all(|&s| neighbour(mask, i, s).is_some_and(|j| mask.labels()[j] == label))
        })
        .collect();
    if inner.is_empty() {
        region
    } else {
        inner
    }
}

/// A random walk of at most `length` distinct pixels through `allowed`,
/// preferring to keep its heading.
fn stroke(
    mask: &LabelMask,
    allowed: &[bool],
    start: usize,
    length: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut visited = vec![start];
    let mut at = start;
    let mut heading = STEPS[rng.random_range(0..4)];
    // bounded so walks trapped in tiny regions terminate
    for _ in 0..4 * length {
        if visited.len() >= length {
            break;
        }
        let open: Vec<(isize, isize)> = STEPS
            .iter()
            .copied()
            .filter(|&s| neighbour(mask, at, s).is_some_and(|j| allowed[j]))
            .collect();
        if open.is_empty() {
            break;
        }
        if !open.contains(&heading) || rng.random_bool(0.3) {
            heading = *open.choose(rng).expect("non-empty");
        }
        at = neighbour(mask, at, heading).expect("open step");
        if !visited.contains(&at) {
            visited.push(at);
        }
    }
    visited
}

/// Scribble annotation: `strokes` random-walk strokes inside every (eroded)
/// foreground class region plus one background stroke; everything else is
/// [`LabelMask::UNKNOWN`].
pub fn derive_scribble(
    mask: &LabelMask,
    cfg: &ScribbleConfig,
    seed: u64,
) -> Result<WeakAnnotation> {
    cfg.validate()?;
    require_foreground(mask, "derive_scribble")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LabelMask::filled(mask.height(), mask.width(), LabelMask::UNKNOWN);
    let mut present: Vec<u8> = mask
        .labels()
        .iter()
        .copied()
        .filter(|&l| l != LabelMask::BACKGROUND && l != LabelMask::UNKNOWN)
        .collect();
    present.sort_unstable();
    present.dedup();
    let plan = present
        .into_iter()
        .map(|l| (l, cfg.strokes))
        .chain(std::iter::once((LabelMask::BACKGROUND, 1)));
    for (label, count) in plan {
        let region = eroded_region(mask, label);
        if region.is_empty() {
            continue;
        }
        let mut allowed = vec![false; mask.len()];
        for &i in &region {
            allowed[i] = true;
        }
        for _ in 0..count {
            let start = *region.choose(&mut rng).expect("non-empty region");
            for i in stroke(mask, &allowed, start, cfg.stroke_length, &mut rng) {
                out.set(i / mask.width(), i % mask.width(), label);
            }
        }
    }
    Ok(WeakAnnotation {
        kind: AnnotationKind::Scribble,
        mask: out,
    })
}

/// 4-connected components of equal non-background label, in raster order of
/// their first pixel.
pub fn connected_components(mask: &LabelMask) -> Vec<(u8, Vec<usize>)> {
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    for start in 0..mask.len() {
        let label = mask.labels()[start];
        if seen[start] || label == LabelMask::BACKGROUND || label == LabelMask::UNKNOWN {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push(i);
            for s in STEPS {
                if let Some(j) = neighbour(mask, i, s) {
                    if !seen[j] && mask.labels()[j] == label {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        components.push((label, pixels));
    }
    components
}

/// Box annotation: the tight box of one uniformly chosen foreground
/// component, filled with its label, on a background canvas.
pub fn derive_bbox(mask: &LabelMask, seed: u64) -> Result<WeakAnnotation> {
    require_foreground(mask, "derive_bbox")?;
    let components = connected_components(mask);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (label, pixels) = components.choose(&mut rng).expect("foreground present");
    let w = mask.width();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for &i in pixels {
        y0 = y0.min(i / w);
        y1 = y1.max(i / w);
        x0 = x0.min(i % w);
        x1 = x1.max(i % w);
    }
    let out = LabelMask::from_fn(mask.height(), w, |y, x| {
        if (y0..=y1).contains(&y) && (x0..=x1).contains(&x) {
            *label
        } else {
            LabelMask::BACKGROUND
        }
    });
    Ok(WeakAnnotation {
        kind: AnnotationKind::BBox,
        mask: out,
    })
}

/// Weak annotation of the requested kind.
pub fn derive(
    kind: AnnotationKind,
    mask: &LabelMask,
    scribble: &ScribbleConfig,
    seed: u64,
) -> Result<WeakAnnotation> {
    match kind {
        AnnotationKind::Dense => Ok(WeakAnnotation::dense(mask.clone())),
        AnnotationKind::Scribble => derive_scribble(mask, scribble, seed),
        AnnotationKind::BBox => derive_bbox(mask, seed),
    }
}

/// Prototypes from weak annotations already at feature resolution; unknown
/// pixels feed neither foreground nor background.
pub fn pool_with_weak<'t, S: Scalar>(
    features: &[Var<'t, S>],
    weak: &[WeakAnnotation],
    ways: usize,
) -> Result<PrototypeSet<'t, S>> {
    let masks: Vec<LabelMask> = weak.iter().map(|w| w.mask.clone()).collect();
    compute_prototypes(features, &masks, ways)
}
