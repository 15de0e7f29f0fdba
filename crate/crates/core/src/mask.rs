use crate::error::{Error, Result};

/// Per-pixel integer labels: 0 is background, `1..=C` are episode class
/// slots, and [`LabelMask::UNKNOWN`] marks pixels a weak annotation leaves
/// unlabelled.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub const BACKGROUND: u8 = 0;
    pub const UNKNOWN: u8 = 255;

    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(
                "LabelMask::new",
                &[height, width],
                &[labels.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self::new(height, width, vec![label; height * width]).expect("non-empty mask")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let labels = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self::new(height, width, labels).expect("non-empty mask")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Largest label other than [`LabelMask::UNKNOWN`].
    pub fn max_label(&self) -> u8 {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != Self::UNKNOWN)
            .max()
            .unwrap_or(0)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = self.labels.clone();
        for row in labels.chunks_mut(self.width) {
            row.reverse();
        }
        Self { labels, ..*self }
    }

    /// Keeps the top-left label of every `factor x factor` cell.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "downsample factor {factor} does not divide mask size {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        Ok(Self::from_fn(h, w, |y, x| self.get(y * factor, x * factor)))
    }

    /// Nearest-neighbour resize; the source of output `(y, x)` is
    /// `(y * H / height, x * W / width)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize target must be at least 1x1, got {height}x{width}"
            )));
        }
        Ok(Self::from_fn(height, width, |y, x| {
            self.get(y * self.height / height, x * self.width / width)
        }))
    }

    /// Pixels whose label equals `label`, as flat indices.
    pub fn positions(&self, label: u8) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == label)
            .map(|(i, _)| i)
    }
}
