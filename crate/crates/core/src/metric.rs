//! Masked average pooling, the α-scaled distance softmax, the segmentation
//! loss and the prototype alignment (query → support) loss.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;
/// Cosine denominators are clamped from below at this value.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distance {
    /// `1 - cos(u, v)`
    #[default]
    Cosine,
    /// `|u - v|^2`
    SquaredEuclidean,
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Distance::Cosine => "cosine",
            Distance::SquaredEuclidean => "squared_euclidean",
        }
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Distance::Cosine),
            "squared_euclidean" => Ok(Distance::SquaredEuclidean),
            other => Err(Error::Config(format!(
                "unknown distance {other:?}, expected cosine or squared_euclidean"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    pub alpha: f64,
    pub distance: Distance,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            distance: Distance::Cosine,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Nearest-neighbour subsampling keeping the top-left label of every
/// `factor x factor` cell.
pub fn downsample_mask(mask: &LabelMask, factor: usize) -> Result<LabelMask> {
    mask.downsample(factor)
}

#[derive(Clone, Copy, Debug)]
pub struct PrototypeRef<'t, S: Scalar> {
    pub label: u8,
    pub var: Var<'t, S>,
}

/// Background prototype plus one foreground prototype per class slot.
/// `None` marks a prototype whose pooled region was empty.
#[derive(Clone, Debug)]
pub struct PrototypeSet<'t, S: Scalar> {
    pub background: Option<Var<'t, S>>,
    /// `foreground[c - 1]` is the prototype of slot `c`.
    pub foreground: Vec<Option<Var<'t, S>>>,
}

impl<'t, S: Scalar> PrototypeSet<'t, S> {
    pub fn ways(&self) -> usize {
        self.foreground.len()
    }

    pub fn get(&self, label: u8) -> Option<Var<'t, S>> {
        match label {
            LabelMask::BACKGROUND => self.background,
            c => self.foreground.get(c as usize - 1).copied().flatten(),
        }
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        std::iter::once(self.background.is_some())
            .chain(self.foreground.iter().map(Option::is_some))
            .collect()
    }

    /// Valid prototypes, background first then ascending slot.
    pub fn valid(&self) -> Vec<PrototypeRef<'t, S>> {
        (0..=self.ways() as u8)
            .filter_map(|label| self.get(label).map(|var| PrototypeRef { label, var }))
            .collect()
    }

    pub fn dim(&self) -> Option<usize> {
        self.valid().first().map(|p| p.var.shape()[0])
    }

    /// Detached values indexed like [`valid_mask`](Self::valid_mask).
    pub fn values(&self) -> Vec<Option<Tensor<S>>> {
        (0..=self.ways() as u8)
            .map(|label| self.get(label).map(|v| (*v.value()).clone()))
            .collect()
    }
}

fn check_aligned<S: Scalar>(features: &[Var<'_, S>], masks: &[LabelMask]) -> Result<()> {
    if features.len() != masks.len() || features.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "prototype pooling needs matching non-empty inputs, got {} feature maps and {} masks",
            features.len(),
            masks.len()
        )));
    }
    for (f, m) in features.iter().zip(masks) {
        let shape = f.shape();
        if shape.len() != 3 || (shape[1], shape[2]) != m.dims() {
            return Err(Error::shape(
                "prototype pooling",
                &shape,
                &[m.height(), m.width()],
            ));
        }
    }
    Ok(())
}

/// Masked spatial mean of `features` over pixels labelled `label`, or `None`
/// when the region is empty.
fn masked_mean<'t, S: Scalar>(
    features: &Var<'t, S>,
    mask: &LabelMask,
    label: u8,
) -> Result<Option<Var<'t, S>>> {
    let n = mask.count(label);
    if n == 0 {
        return Ok(None);
    }
    let w = S::one() / S::count(n);
    let weights: Vec<S> = mask
        .labels()
        .iter()
        .map(|&l| if l == label { w } else { S::zero() })
        .collect();
    features.weighted_spatial_sum(&weights).map(Some)
}

fn pooled<'t, S: Scalar>(
    features: &[Var<'t, S>],
    masks: &[LabelMask],
    label: u8,
) -> Result<Option<Var<'t, S>>> {
    let mut means = Vec::new();
    for (f, m) in features.iter().zip(masks) {
        if let Some(v) = masked_mean(f, m, label)? {
            means.push(v);
        }
    }
    if means.is_empty() {
        return Ok(None);
    }
    features[0].tape().mean_of(&means).map(Some)
}

/// Prototypes of `ways` class slots and the background from feature maps
/// and masks at feature resolution.
///
/// `p_c` is the mean over images containing slot `c` of the masked mean of
/// their features; `p_bg` likewise over images with background pixels.
/// [`LabelMask::UNKNOWN`] pixels feed neither.
pub fn compute_prototypes<'t, S: Scalar>(
    features: &[Var<'t, S>],
    masks: &[LabelMask],
    ways: usize,
) -> Result<PrototypeSet<'t, S>> {
    check_aligned(features, masks)?;
    let background = pooled(features, masks, LabelMask::BACKGROUND)?;
    let foreground = (1..=ways as u8)
        .map(|c| pooled(features, masks, c))
        .collect::<Result<_>>()?;
    Ok(PrototypeSet {
        background,
        foreground,
    })
}

/// Distance between two vectors.
pub fn distance<S: Scalar>(u: &[S], v: &[S], cfg: &MetricConfig) -> Result<S> {
    if u.len() != v.len() {
        return Err(Error::shape("distance", &[u.len()], &[v.len()]));
    }
    Ok(match cfg.distance {
        Distance::Cosine => {
            let dot: S = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
            let nu = u.iter().map(|&a| a * a).sum::<S>().sqrt();
            let nv = v.iter().map(|&a| a * a).sum::<S>().sqrt();
            S::one() - dot / (nu * nv).max(S::lit(COSINE_EPS))
        }
        Distance::SquaredEuclidean => u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum(),
    })
}

/// `[H, W]` map of distances from every query feature to `proto`.
pub fn distance_map<'t, S: Scalar>(
    features: &Var<'t, S>,
    proto: &Var<'t, S>,
    cfg: &MetricConfig,
) -> Result<Var<'t, S>> {
    match cfg.distance {
        Distance::Cosine => Ok(features
            .cosine_similarity_map(proto, S::lit(COSINE_EPS))?
            .affine(-S::one(), S::one())),
        Distance::SquaredEuclidean => features.squared_distance_map(proto),
    }
}

/// `softmax_j(-alpha * d_j)` over the leading axis of a `[J, H, W]` distance stack.
pub fn probabilities_from_distances<'t, S: Scalar>(
    distances: &Var<'t, S>,
    alpha: S,
) -> Result<Var<'t, S>> {
    distances.scale(-alpha).softmax(0)
}

/// Per-location class distribution over the valid prototypes.
#[derive(Clone, Debug)]
pub struct ProbabilityMap<'t, S: Scalar> {
    /// `[J, H, W]`, one channel per valid prototype.
    pub probs: Var<'t, S>,
    /// Label of every channel, background first then ascending.
    pub labels: Vec<u8>,
}

impl<'t, S: Scalar> ProbabilityMap<'t, S> {
    pub fn channel_of(&self, label: u8) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// `[C + 1, H, W]` tensor with zero channels for invalid prototypes.
    pub fn dense(&self, ways: usize) -> Tensor<S> {
        let p = self.probs.value();
        let (_, h, w) = p.chw().expect("probability map is [J, H, W]");
        let plane = h * w;
        let mut out = Tensor::zeros([ways + 1, h, w]);
        for (j, &label) in self.labels.iter().enumerate() {
            out.data_mut()[label as usize * plane..(label as usize + 1) * plane]
                .copy_from_slice(&p.data()[j * plane..(j + 1) * plane]);
        }
        out
    }
}

fn map_over<'t, S: Scalar>(
    features: &Var<'t, S>,
    protos: &[PrototypeRef<'t, S>],
    cfg: &MetricConfig,
) -> Result<ProbabilityMap<'t, S>> {
    if protos.is_empty() {
        return Err(Error::NoValidPrototypes);
    }
    let dists = protos
        .iter()
        .map(|p| distance_map(features, &p.var, cfg))
        .collect::<Result<Vec<_>>>()?;
    let stacked = features.tape().stack(&dists)?;
    Ok(ProbabilityMap {
        probs: probabilities_from_distances(&stacked, S::lit(cfg.alpha))?,
        labels: protos.iter().map(|p| p.label).collect(),
    })
}

/// Softmax of `-alpha * d` over all valid prototypes at every location of a
/// `[D, H, W]` feature map.
pub fn probability_map<'t, S: Scalar>(
    features: &Var<'t, S>,
    protos: &PrototypeSet<'t, S>,
    cfg: &MetricConfig,
) -> Result<ProbabilityMap<'t, S>> {
    map_over(features, &protos.valid(), cfg)
}

/// Per-location argmax; ties go to the lower label.
pub fn predict_mask<S: Scalar>(probs: &ProbabilityMap<'_, S>) -> LabelMask {
    let p = probs.probs.value();
    let (j, h, w) = p.chw().expect("probability map is [J, H, W]");
    let plane = h * w;
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..j {
                if p.data()[c * plane + i] > p.data()[best * plane + i] {
                    best = c;
                }
            }
            probs.labels[best]
        })
        .collect();
    LabelMask::new(h, w, labels).expect("prediction dims")
}

fn check_dims<S: Scalar>(probs: &ProbabilityMap<'_, S>, gt: &LabelMask) -> Result<()> {
    let shape = probs.probs.shape();
    if (shape[1], shape[2]) != gt.dims() {
        return Err(Error::shape(
            "segmentation loss",
            &shape,
            &[gt.height(), gt.width()],
        ));
    }
    Ok(())
}

/// Mean cross-entropy of `gt` (at feature resolution) under `probs`.
pub fn seg_loss<'t, S: Scalar>(
    probs: &ProbabilityMap<'t, S>,
    gt: &LabelMask,
) -> Result<Var<'t, S>> {
    check_dims(probs, gt)?;
    let targets = gt
        .labels()
        .iter()
        .map(|&l| {
            probs
                .channel_of(l)
                .map(Some)
                .ok_or(Error::MissingPrototype { label: l })
        })
        .collect::<Result<Vec<_>>>()?;
    probs.probs.nll(&targets, S::lit(LOG_FLOOR))
}

/// Reverse-direction loss: prototypes pooled from the query with its
/// predicted mask segment every support image, scored against the support
/// ground truth.
///
/// Support inputs are slot-major (`ways` groups of equal size). Each support
/// image of slot `c` is classified against `{p̄_bg, p̄_c}` only; pixels of
/// slot `c` target `p̄_c` and all others target `p̄_bg`. A target whose
/// prototype is invalid costs the constant `-ln(LOG_FLOOR)`.
pub fn par_loss<'t, S: Scalar>(
    support_features: &[Var<'t, S>],
    support_masks: &[LabelMask],
    query_features: &Var<'t, S>,
    predicted_query_mask: &LabelMask,
    ways: usize,
    cfg: &MetricConfig,
) -> Result<Var<'t, S>> {
    check_aligned(support_features, support_masks)?;
    if ways == 0 || !support_features.len().is_multiple_of(ways) {
        return Err(Error::InvalidArgument(format!(
            "{} support images do not split into {ways} slots",
            support_features.len()
        )));
    }
    let tape = query_features.tape();
    let shots = support_features.len() / ways;
    let query_protos = compute_prototypes(
        std::slice::from_ref(query_features),
        std::slice::from_ref(predicted_query_mask),
        ways,
    )?;
    let floor = S::lit(LOG_FLOOR);
    let mut losses = Vec::with_capacity(support_features.len());
    for (i, (f, m)) in support_features.iter().zip(support_masks).enumerate() {
        let slot = (i / shots + 1) as u8;
        let candidates: Vec<_> = [LabelMask::BACKGROUND, slot]
            .into_iter()
            .filter_map(|label| {
                query_protos
                    .get(label)
                    .map(|var| PrototypeRef { label, var })
            })
            .collect();
        if candidates.is_empty() {
            losses.push(tape.constant(Tensor::scalar(-floor.ln())));
            continue;
        }
        let probs = map_over(f, &candidates, cfg)?;
        let targets: Vec<Option<usize>> = m
            .labels()
            .iter()
            .map(|&l| {
                let label = if l == slot {
                    slot
                } else {
                    LabelMask::BACKGROUND
                };
                probs.channel_of(label)
            })
            .collect();
        losses.push(probs.probs.nll(&targets, floor)?);
    }
    tape.mean_of(&losses)
}

/// `l_seg + lambda * l_par`; `lambda == 0` returns `l_seg` itself.
pub fn total_loss<'t, S: Scalar>(
    l_seg: Var<'t, S>,
    l_par: Var<'t, S>,
    lambda: S,
) -> Result<Var<'t, S>> {
    if lambda < S::zero() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if lambda == S::zero() {
        return Ok(l_seg);
    }
    l_seg.add(&l_par.scale(lambda))
}
