//! Policy application: each operation is sampled independently with its own
//! probability and the sampled operations are composed in order.

pub mod ops;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
pub use ops::{AugmentationOp, Magnitude, OpKind, Sign, FILL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    /// Operations are visited in [`OpKind::ALL`] order.
    #[default]
    Fixed,
    /// A fresh permutation is drawn for every application.
    Random,
}

impl std::str::FromStr for OrderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(OrderMode::Fixed),
            "random" => Ok(OrderMode::Random),
            other => Err(Error::config(
                "order",
                format!("expected `fixed` or `random`, got `{other}`"),
            )),
        }
    }
}

/// Dataset-level augmentations applied before the policy. All off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BaseAugment {
    /// Zero-pad by this many pixels, then take a random crop of the original size.
    pub pad_crop: usize,
    pub horizontal_flip: bool,
    /// Side length of a square cutout filled with [`FILL`]; 0 disables it.
    pub cutout: usize,
}

impl BaseAugment {
    pub fn is_noop(&self) -> bool {
        self.pad_crop == 0 && !self.horizontal_flip && self.cutout == 0
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Image {
        let mut out = img.clone();
        let (w, h) = (img.width(), img.height());
        if self.pad_crop > 0 {
            let pad = self.pad_crop as isize;
            let ox = rng.random_range(-(pad as i64)..=pad as i64) as isize;
            let oy = rng.random_range(-(pad as i64)..=pad as i64) as isize;
            out = Image::from_fn(w, h, |x, y| {
                let sx = x as isize + ox;
                let sy = y as isize + oy;
                if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                    img.pixel(sx as usize, sy as usize)
                } else {
                    [0; 3]
                }
            });
        }
        if self.horizontal_flip && rng.random::<bool>() {
            let src = out.clone();
            out = Image::from_fn(w, h, |x, y| src.pixel(w - 1 - x, y));
        }
        if self.cutout > 0 {
            let cx = rng.random_range(0..w) as isize;
            let cy = rng.random_range(0..h) as isize;
            let half = (self.cutout / 2) as isize;
            let side = self.cutout as isize;
            for y in (cy - half).max(0)..(cy - half + side).min(h as isize) {
                for x in (cx - half).max(0)..(cx - half + side).min(w as isize) {
                    out.set_pixel(x as usize, y as usize, FILL);
                }
            }
        }
        out
    }
}

/// Applies probability-vector policies at a fixed global magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyApplicator {
    pub magnitude: Magnitude,
    pub order: OrderMode,
    pub base: BaseAugment,
}

impl PolicyApplicator {
    pub fn new(magnitude: Magnitude, order: OrderMode) -> Self {
        PolicyApplicator {
            magnitude,
            order,
            base: BaseAugment::default(),
        }
    }

    pub fn with_base(mut self, base: BaseAugment) -> Self {
        self.base = base;
        self
    }

    pub fn ops(&self) -> [AugmentationOp; OpKind::COUNT] {
        OpKind::ALL.map(|k| AugmentationOp::new(k, self.magnitude))
    }

    /// Visits the operations in this applicator's order, applying operation
    /// `j` iff a Bernoulli(`policy[j]`) draw succeeds.
    ///
    /// Panics if `policy` does not have one entry per operation.
    pub fn apply<R: Rng + ?Sized>(&self, policy: &[f64], img: &Image, rng: &mut R) -> Image {
        assert_eq!(
            policy.len(),
            OpKind::COUNT,
            "policy must have one probability per operation"
        );
        let mut order: [usize; OpKind::COUNT] = std::array::from_fn(|i| i);
        if self.order == OrderMode::Random {
            order.shuffle(rng);
        }
        let mut out = if self.base.is_noop() {
            img.clone()
        } else {
            self.base.apply(img, rng)
        };
        for j in order {
            if rng.random::<f64>() < policy[j] {
                out = AugmentationOp::new(OpKind::ALL[j], self.magnitude).apply(&out, rng);
            }
        }
        out
    }
}

/// Parses a comma-separated probability vector with one entry per operation.
pub fn parse_policy(text: &str) -> Result<Vec<f64>> {
    let policy = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Invalid(format!("policy entry `{}`: {e}", s.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    if policy.len() != OpKind::COUNT {
        return Err(Error::Invalid(format!(
            "policy needs {} probabilities, got {}",
            OpKind::COUNT,
            policy.len()
        )));
    }
    if let Some(p) = policy.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("policy probability {p} is outside [0, 1]")));
    }
    Ok(policy)
}
