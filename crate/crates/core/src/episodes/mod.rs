//! C-way K-shot episodes over disjoint seen/unseen class splits.

pub mod io;
pub mod pgm;
pub mod shapes;

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use shapes::{render_instance, ShapeDatasetConfig, ShapeFamily};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitPart {
    Seen,
    Unseen,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Seen => "seen",
            SplitPart::Unseen => "unseen",
        }
    }
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(SplitPart::Seen),
            "unseen" => Ok(SplitPart::Unseen),
            other => Err(Error::Config(format!(
                "split part must be `seen` or `unseen`, got `{other}`"
            ))),
        }
    }
}

/// Disjoint partition of class ids into training (seen) and testing (unseen) classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl ClassSplit {
    pub fn new(mut seen: Vec<usize>, mut unseen: Vec<usize>) -> Result<Self> {
        seen.sort_unstable();
        unseen.sort_unstable();
        let s: BTreeSet<_> = seen.iter().collect();
        let u: BTreeSet<_> = unseen.iter().collect();
        if s.len() != seen.len() || u.len() != unseen.len() {
            return Err(Error::Config(
                "class split contains duplicate class ids".into(),
            ));
        }
        if let Some(c) = s.intersection(&u).next() {
            return Err(Error::Config(format!(
                "class {c} appears in both seen and unseen parts"
            )));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::Config(
                "both split parts need at least one class".into(),
            ));
        }
        Ok(Self { seen, unseen })
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Seen => &self.seen,
            SplitPart::Unseen => &self.unseen,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }
}

/// Seeded random partition with `round(num_classes * unseen_fraction)` unseen classes.
pub fn make_split(num_classes: usize, unseen_fraction: f64, seed: u64) -> Result<ClassSplit> {
    if !(unseen_fraction > 0.0 && unseen_fraction < 1.0) {
        return Err(Error::Config(format!(
            "unseen fraction must be in (0, 1), got {unseen_fraction}"
        )));
    }
    let n_unseen = (num_classes as f64 * unseen_fraction).round() as usize;
    if n_unseen == 0 || n_unseen >= num_classes {
        return Err(Error::Config(format!(
            "unseen fraction {unseen_fraction} of {num_classes} classes leaves an empty part"
        )));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unseen = ids[..n_unseen].to_vec();
    let seen = ids[n_unseen..].to_vec();
    ClassSplit::new(seen, unseen)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportExample {
    /// Episode-local class slot, `1..=C`.
    pub slot: u8,
    pub shot: usize,
    pub image: Tensor<f64>,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryExample {
    pub image: Tensor<f64>,
    pub mask: LabelMask,
}

/// One C-way K-shot task. Support examples are ordered slot-major
/// (`slot 1 shot 0, slot 1 shot 1, ..., slot C shot K-1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Global class id of each slot; `classes[i]` is slot `i + 1`.
    pub classes: Vec<usize>,
    pub shots: usize,
    pub support: Vec<SupportExample>,
    pub query: Vec<QueryExample>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.support[0].mask.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.ways();
        let fail = |msg: String| Err(Error::InvalidArgument(format!("invalid episode: {msg}")));
        if c == 0 || self.shots == 0 {
            return fail("needs at least one way and one shot".into());
        }
        if self.support.len() != c * self.shots {
            return fail(format!(
                "{} support pairs for {c}-way {}-shot",
                self.support.len(),
                self.shots
            ));
        }
        if self.query.is_empty() {
            return fail("empty query set".into());
        }
        for (i, s) in self.support.iter().enumerate() {
            let slot = (i / self.shots + 1) as u8;
            if s.slot != slot || s.shot != i % self.shots {
                return fail(format!("support pair {i} out of slot-major order"));
            }
            if s.mask.count(slot) == 0 {
                return fail(format!(
                    "support pair {i} has no pixel of its class slot {slot}"
                ));
            }
            check_pair(&s.image, &s.mask, c)?;
        }
        for q in &self.query {
            check_pair(&q.image, &q.mask, c)?;
        }
        Ok(())
    }

    /// Applies `f` to every (image, mask) pair.
    pub fn map_pairs(
        &self,
        mut f: impl FnMut(&Tensor<f64>, &LabelMask) -> (Tensor<f64>, LabelMask),
    ) -> Self {
        let mut out = self.clone();
        for s in &mut out.support {
            (s.image, s.mask) = f(&s.image, &s.mask);
        }
        for q in &mut out.query {
            (q.image, q.mask) = f(&q.image, &q.mask);
        }
        out
    }
}

fn check_pair(image: &Tensor<f64>, mask: &LabelMask, ways: usize) -> Result<()> {
    let (_, h, w) = image.chw()?;
    if (h, w) != mask.dims() {
        return Err(Error::shape(
            "episode image/mask",
            image.shape(),
            &[mask.height(), mask.width()],
        ));
    }
    if let Some(&bad) = mask.labels().iter().find(|&&l| l as usize > ways) {
        return Err(Error::InvalidArgument(format!(
            "invalid episode: label {bad} outside 0..={ways}"
        )));
    }
    Ok(())
}

/// Renders an instance of `class_id` whose mask is relabelled to `slot`.
fn labelled_instance(
    class_id: usize,
    slot: u8,
    seed: u64,
    config: &ShapeDatasetConfig,
) -> Result<(Tensor<f64>, LabelMask)> {
    let (image, mask) = render_instance(class_id, seed, config)?;
    let (h, w) = mask.dims();
    let labels = mask.into_labels().into_iter().map(|l| l * slot).collect();
    Ok((image, LabelMask::new(h, w, labels)?))
}

/// Samples `ways` distinct classes of `part`, `ways * shots` support pairs and
/// `n_query` single-instance query pairs. Fully determined by `seed`.
pub fn sample_episode(
    config: &ShapeDatasetConfig,
    split: &ClassSplit,
    part: SplitPart,
    ways: usize,
    shots: usize,
    n_query: usize,
    seed: u64,
) -> Result<Episode> {
    let pool = split.part(part);
    if ways == 0 || shots == 0 || n_query == 0 {
        return Err(Error::InvalidArgument(format!(
            "ways, shots and n_query must be positive, got {ways}, {shots}, {n_query}"
        )));
    }
    if pool.len() < ways {
        return Err(Error::InvalidArgument(format!(
            "{} split part has {} classes, episode needs {ways}",
            part.name(),
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = pool.choose_multiple(&mut rng, ways).copied().collect();
    let mut support = Vec::with_capacity(ways * shots);
    for (i, &class_id) in classes.iter().enumerate() {
        let slot = (i + 1) as u8;
        for shot in 0..shots {
            let (image, mask) = labelled_instance(class_id, slot, rng.random(), config)?;
            support.push(SupportExample {
                slot,
                shot,
                image,
                mask,
            });
        }
    }
    let mut query = Vec::with_capacity(n_query);
    for _ in 0..n_query {
        let i = rng.random_range(0..ways);
        let (image, mask) = labelled_instance(classes[i], (i + 1) as u8, rng.random(), config)?;
        query.push(QueryExample { image, mask });
    }
    Ok(Episode {
        classes,
        shots,
        support,
        query,
    })
}
