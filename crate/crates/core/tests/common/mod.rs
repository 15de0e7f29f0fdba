//! Shared test fixtures. The oracles are plain loops that never touch the
//! tape; feature maps are `Vec<f64>` laid out `[D, H, W]`.

#![allow(dead_code)]

use protoseg::episodes::{Episode, QueryExample, SupportExample};
use protoseg::{LabelMask, Tensor};
use rand::Rng;

pub const FLOOR: f64 = 1e-12;
pub const EPS: f64 = 1e-8;

pub struct Map {
    pub d: usize,
    pub plane: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self {
            d: s[0],
            plane: s[1] * s[2],
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, ch: usize, i: usize) -> f64 {
        self.data[ch * self.plane + i]
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        (0..self.d).map(|ch| self.at(ch, i)).collect()
    }
}

/// Mean over the maps that contain `label` of the per-map average vector at
/// `label` pixels.
pub fn pool(maps: &[Map], masks: &[LabelMask], label: u8) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut images = 0usize;
    for (m, mask) in maps.iter().zip(masks) {
        let mut sum = vec![0.0; m.d];
        let mut n = 0usize;
        for i in 0..m.plane {
            if mask.labels()[i] == label {
                n += 1;
                for (ch, s) in sum.iter_mut().enumerate() {
                    *s += m.at(ch, i);
                }
            }
        }
        if n == 0 {
            continue;
        }
        images += 1;
        let a = acc.get_or_insert_with(|| vec![0.0; m.d]);
        for (x, s) in a.iter_mut().zip(sum) {
            *x += s / n as f64;
        }
    }
    acc.map(|a| a.into_iter().map(|x| x / images as f64).collect())
}

pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    let den = nu.sqrt() * nv.sqrt();
    1.0 - dot / if den < EPS { EPS } else { den }
}

pub fn squared_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(-alpha d_j) / sum_k exp(-alpha d_k)`, computed from the minimum distance.
pub fn softmax_neg(dists: &[f64], alpha: f64) -> Vec<f64> {
    let m = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = dists.iter().map(|d| (-alpha * (d - m)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Per-pixel distributions over `protos` (listed in channel order).
pub fn probs(query: &Map, protos: &[Vec<f64>], alpha: f64, cosine: bool) -> Vec<Vec<f64>> {
    (0..query.plane)
        .map(|i| {
            let f = query.vector(i);
            let d: Vec<f64> = protos
                .iter()
                .map(|p| {
                    if cosine {
                        cosine_distance(&f, p)
                    } else {
                        squared_distance(&f, p)
                    }
                })
                .collect();
            softmax_neg(&d, alpha)
        })
        .collect()
}

pub fn nll(per_pixel: &[Vec<f64>], targets: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    for (p, t) in per_pixel.iter().zip(targets) {
        let v = t.map_or(0.0, |c| p[c]);
        total -= v.max(FLOOR).ln();
    }
    total / per_pixel.len() as f64
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    best
}

/// Valid prototypes (background first) and their labels.
pub fn prototype_list(maps: &[Map], masks: &[LabelMask], ways: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut protos = Vec::new();
    let mut labels = Vec::new();
    for label in 0..=ways as u8 {
        if let Some(p) = pool(maps, masks, label) {
            protos.push(p);
            labels.push(label);
        }
    }
    (protos, labels)
}

/// Reverse loss: query prototypes from `pred`, each slot-major support image
/// scored against `{bg, its slot}`.
pub fn par(
    support: &[Map],
    support_masks: &[LabelMask],
    query: &Map,
    pred: &LabelMask,
    ways: usize,
    alpha: f64,
) -> f64 {
    let shots = support.len() / ways;
    let qs = std::slice::from_ref(query);
    let qm = std::slice::from_ref(pred);
    let mut total = 0.0;
    for (i, (m, mask)) in support.iter().zip(support_masks).enumerate() {
        let slot = (i / shots + 1) as u8;
        let mut protos = Vec::new();
        let mut labels = Vec::new();
        for label in [0, slot] {
            if let Some(p) = pool(qs, qm, label) {
                protos.push(p);
                labels.push(label);
            }
        }
        if protos.is_empty() {
            total += -FLOOR.ln();
            continue;
        }
        let pp = probs(m, &protos, alpha, true);
        let targets: Vec<Option<usize>> = mask
            .labels()
            .iter()
            .map(|&l| {
                let want = if l == slot { slot } else { 0 };
                labels.iter().position(|&x| x == want)
            })
            .collect();
        total += nll(&pp, &targets);
    }
    total / support.len() as f64
}

pub fn random_map(rng: &mut impl Rng, d: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([d, h, w], |_| rng.random_range(-1.0..1.0))
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, max_label: u8) -> LabelMask {
    LabelMask::from_fn(h, w, |_, _| rng.random_range(0..=max_label))
}

/// Micro-episode of `ways` x `shots` random 8x8 images. Every support image
/// has a random blob of its slot and some background.
pub fn micro_episode(rng: &mut impl Rng, ways: usize, shots: usize, size: usize) -> Episode {
    let blob = |rng: &mut dyn rand::RngCore, label: u8| {
        let y0 = rng.random_range(0..size / 2);
        let x0 = rng.random_range(0..size / 2);
        let h = rng.random_range(2..=size / 2);
        let w = rng.random_range(2..=size / 2);
        LabelMask::from_fn(size, size, |y, x| {
            if (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x) {
                label
            } else {
                0
            }
        })
    };
    let mut support = Vec::new();
    for c in 0..ways {
        for k in 0..shots {
            support.push(SupportExample {
                slot: (c + 1) as u8,
                shot: k,
                image: Tensor::from_fn([1, size, size], |_| rng.random_range(0.0..1.0)),
                mask: blob(rng, (c + 1) as u8),
            });
        }
    }
    let q_label = rng.random_range(1..=ways) as u8;
    let query = vec![QueryExample {
        image: Tensor::from_fn([1, size, size], |_| rng.random_range(0.0..1.0)),
        mask: blob(rng, q_label),
    }];
    Episode {
        classes: (0..ways).collect(),
        shots,
        support,
        query,
    }
}

/// Small encoder used for finite-difference checks on 8x8 images.
pub fn micro_encoder() -> protoseg::encoder::EncoderConfig {
    use protoseg::encoder::{BlockConfig, EncoderConfig};
    EncoderConfig {
        in_channels: 1,
        blocks: vec![
            BlockConfig {
                out_channels: 3,
                pool_stride: 2,
                dilation: 1,
            },
            BlockConfig {
                out_channels: 4,
                pool_stride: 1,
                dilation: 2,
            },
        ],
    }
}

/// Max relative error between tape gradients of the episode objective with
/// respect to every encoder parameter and central differences (h = 1e-5).
/// The reverse direction uses the predictions of the unperturbed model.
pub fn pipeline_gradient_error(ways: usize, lambda: f64, seed: u64) -> f64 {
    use protoseg::encoder::EncoderParams;
    use protoseg::metric::MetricConfig;
    use protoseg::tensor::{central_difference, max_relative_error};
    use protoseg::trainer::episode_objective;
    use protoseg::Tape;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let enc = micro_encoder();
    let episode = micro_episode(&mut rng, ways, 2, 8);
    let params = EncoderParams::<f64>::init(&enc, seed).unwrap();
    let metric = MetricConfig::default();

    let tape = Tape::new();
    let vars = params.register(&tape);
    let obj = episode_objective(&enc, &vars, &episode, &metric, lambda, None).unwrap();
    let fixed = obj.predictions.clone();
    let grads = tape.backward(obj.total).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.wrt(v).into_data()).collect();

    let numeric = central_difference(
        |x: &[f64]| {
            let mut p = params.clone();
            p.set_flat(x);
            let tape = Tape::new();
            let vars = p.register(&tape);
            let obj =
                episode_objective(&enc, &vars, &episode, &metric, lambda, Some(&fixed)).unwrap();
            obj.total.value().data()[0]
        },
        &params.flatten(),
        1e-5,
    );
    max_relative_error(&analytic, &numeric)
}
