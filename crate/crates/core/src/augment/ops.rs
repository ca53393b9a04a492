//! The fifteen base operations and their magnitude tables.
//!
//! Every operation is parameterized by one integer magnitude `m` in `[0, 10]`
//! shared across the whole policy. The maps from `m` to operation parameters
//! are linear:
//!
//! | op                                    | parameter at magnitude `m`              |
//! |---------------------------------------|-----------------------------------------|
//! | Rotate                                | `±(m/10 · 30)` degrees                  |
//! | ShearX, ShearY                        | `±(m/10 · 0.3)` shear factor            |
//! | TranslateX, TranslateY                | `±(m/10 · 0.3)` of the image extent     |
//! | Solarize                              | threshold `256 − round(m/10 · 256)`     |
//! | SolarizeAdd                           | add `round(m/10 · 110)` below 128       |
//! | Posterize                             | keep `8 − round(m/10 · 4)` bits         |
//! | Color, Contrast, Brightness, Sharpness| enhancement factor `1 ± m/10 · 0.9`     |
//! | Identity, AutoContrast, Equalize      | magnitude ignored                       |
//!
//! Signed operations pick their sign uniformly at random per application.
//! Geometric operations use nearest-neighbour sampling at pixel centres and
//! fill exposed pixels with [`FILL`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Constant fill for pixels exposed by geometric transforms.
pub const FILL: [u8; 3] = [128, 128, 128];

pub const MAX_MAGNITUDE: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    SolarizeAdd,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Posterize,
}

impl OpKind {
    /// All operations in their canonical application order.
    pub const ALL: [OpKind; 15] = [
        OpKind::Identity,
        OpKind::AutoContrast,
        OpKind::Equalize,
        OpKind::Rotate,
        OpKind::Solarize,
        OpKind::SolarizeAdd,
        OpKind::Color,
        OpKind::Contrast,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Posterize,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "Identity",
            OpKind::AutoContrast => "AutoContrast",
            OpKind::Equalize => "Equalize",
            OpKind::Rotate => "Rotate",
            OpKind::Solarize => "Solarize",
            OpKind::SolarizeAdd => "SolarizeAdd",
            OpKind::Color => "Color",
            OpKind::Contrast => "Contrast",
            OpKind::Brightness => "Brightness",
            OpKind::Sharpness => "Sharpness",
            OpKind::ShearX => "ShearX",
            OpKind::ShearY => "ShearY",
            OpKind::TranslateX => "TranslateX",
            OpKind::TranslateY => "TranslateY",
            OpKind::Posterize => "Posterize",
        }
    }

    /// Whether the operation's parameter takes a random sign.
    pub fn is_signed(self) -> bool {
        matches!(
            self,
            OpKind::Rotate
                | OpKind::Color
                | OpKind::Contrast
                | OpKind::Brightness
                | OpKind::Sharpness
                | OpKind::ShearX
                | OpKind::ShearY
                | OpKind::TranslateX
                | OpKind::TranslateY
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown augmentation `{s}`")))
    }
}

/// Global augmentation magnitude in `[0, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Magnitude(u8);

impl Magnitude {
    pub fn new(m: u8) -> Result<Self> {
        if m > MAX_MAGNITUDE {
            return Err(Error::config(
                "magnitude",
                format!("{m} is outside [0, {MAX_MAGNITUDE}]"),
            ));
        }
        Ok(Magnitude(m))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    fn level(self) -> f64 {
        self.0 as f64 / MAX_MAGNITUDE as f64
    }
}

impl TryFrom<u8> for Magnitude {
    type Error = Error;

    fn try_from(m: u8) -> Result<Self> {
        Magnitude::new(m)
    }
}

impl From<Magnitude> for u8 {
    fn from(m: Magnitude) -> u8 {
        m.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Sign {
        if rng.random::<bool>() {
            Sign::Positive
        } else {
            Sign::Negative
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Sign::Positive => v,
            Sign::Negative => -v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentationOp {
    pub kind: OpKind,
    pub magnitude: Magnitude,
}

impl AugmentationOp {
    pub fn new(kind: OpKind, magnitude: Magnitude) -> Self {
        AugmentationOp { kind, magnitude }
    }

    /// Applies the operation, drawing a sign for signed operations.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Image {
        let sign = if self.kind.is_signed() {
            Sign::random(rng)
        } else {
            Sign::Positive
        };
        self.apply_signed(img, sign)
    }

    /// Applies the operation with an explicit sign. Unsigned operations ignore it.
    pub fn apply_signed(&self, img: &Image, sign: Sign) -> Image {
        let level = self.magnitude.level();
        let enhance = || 1.0 + sign.apply(level * 0.9);
        match self.kind {
            OpKind::Identity => img.clone(),
            OpKind::AutoContrast => autocontrast(img),
            OpKind::Equalize => equalize(img),
            OpKind::Rotate => rotate(img, sign.apply(level * 30.0)),
            OpKind::Solarize => solarize(img, 256 - (level * 256.0).round() as u16),
            OpKind::SolarizeAdd => solarize_add(img, (level * 110.0).round() as u8, 128),
            OpKind::Color => color(img, enhance()),
            OpKind::Contrast => contrast(img, enhance()),
            OpKind::Brightness => brightness(img, enhance()),
            OpKind::Sharpness => sharpness(img, enhance()),
            OpKind::ShearX => shear_x(img, sign.apply(level * 0.3)),
            OpKind::ShearY => shear_y(img, sign.apply(level * 0.3)),
            OpKind::TranslateX => translate_x(img, sign.apply(level * 0.3 * img.width() as f64)),
            OpKind::TranslateY => translate_y(img, sign.apply(level * 0.3 * img.height() as f64)),
            OpKind::Posterize => posterize(img, 8 - (level * 4.0).round() as u8),
        }
    }
}

/// Inverse-maps every output pixel centre through `source` and samples the
/// nearest input pixel, filling with [`FILL`] outside the input.
fn remap(img: &Image, source: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (w, h) = (img.width(), img.height());
    Image::from_fn(w, h, |x, y| {
        let (sx, sy) = source(x as f64 + 0.5, y as f64 + 0.5);
        let (fx, fy) = (sx.floor(), sy.floor());
        if fx >= 0.0 && fy >= 0.0 && fx < w as f64 && fy < h as f64 {
            img.pixel(fx as usize, fy as usize)
        } else {
            FILL
        }
    })
}

/// Counter-clockwise rotation about the image centre.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = img.width() as f64 / 2.0;
    let cy = img.height() as f64 / 2.0;
    remap(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cos * dx - sin * dy + cx, sin * dx + cos * dy + cy)
    })
}

pub fn shear_x(img: &Image, factor: f64) -> Image {
    remap(img, |x, y| (x + factor * y, y))
}

pub fn shear_y(img: &Image, factor: f64) -> Image {
    remap(img, |x, y| (x, factor * x + y))
}

pub fn translate_x(img: &Image, pixels: f64) -> Image {
    remap(img, |x, y| (x + pixels, y))
}

pub fn translate_y(img: &Image, pixels: f64) -> Image {
    remap(img, |x, y| (x, y + pixels))
}

/// Inverts every value at or above `threshold`. A threshold of 256 is the identity.
pub fn solarize(img: &Image, threshold: u16) -> Image {
    img.map_values(|v| if v as u16 >= threshold { 255 - v } else { v })
}

/// Adds `addition` (saturating) to every value below `threshold`.
pub fn solarize_add(img: &Image, addition: u8, threshold: u8) -> Image {
    img.map_values(|v| if v < threshold { v.saturating_add(addition) } else { v })
}

/// Keeps the `bits` most significant bits of every value.
pub fn posterize(img: &Image, bits: u8) -> Image {
    let bits = bits.clamp(1, 8);
    let mask = !((1u16 << (8 - bits)) - 1) as u8;
    img.map_values(|v| v & mask)
}

fn per_channel_lut(img: &Image, luts: &[[u8; 256]; 3]) -> Image {
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = luts[i % 3][*v as usize];
    }
    out
}

fn channel_histograms(img: &Image) -> [[u32; 256]; 3] {
    let mut hist = [[0u32; 256]; 3];
    for (i, &v) in img.data().iter().enumerate() {
        hist[i % 3][v as usize] += 1;
    }
    hist
}

/// Stretches each channel linearly so its minimum maps to 0 and its maximum
/// to 255, rounding to nearest. Constant channels are left unchanged.
pub fn autocontrast(img: &Image) -> Image {
    let hist = channel_histograms(img);
    let mut luts = [[0u8; 256]; 3];
    for (lut, h) in luts.iter_mut().zip(&hist) {
        let lo = h.iter().position(|&c| c > 0).unwrap_or(0) as u32;
        let hi = h.iter().rposition(|&c| c > 0).unwrap_or(255) as u32;
        for (v, out) in lut.iter_mut().enumerate() {
            let v = v as u32;
            *out = if hi <= lo {
                v as u8
            } else {
                let span = hi - lo;
                let clamped = v.clamp(lo, hi) - lo;
                ((clamped * 255 + span / 2) / span) as u8
            };
        }
    }
    per_channel_lut(img, &luts)
}

/// Per-channel histogram equalization.
///
/// `step = (total − count of the highest occupied bin) / 255` (integer
/// division). Value `i` maps to `min(255, (step/2 + Σ_{j<i} h[j]) / step)`.
/// A channel with at most one occupied bin, or a zero step, is unchanged.
pub fn equalize(img: &Image) -> Image {
    let hist = channel_histograms(img);
    let mut luts = [[0u8; 256]; 3];
    for (lut, h) in luts.iter_mut().zip(&hist) {
        let occupied: Vec<u32> = h.iter().copied().filter(|&c| c > 0).collect();
        let total: u32 = occupied.iter().sum();
        let step = if occupied.len() <= 1 {
            0
        } else {
            (total - occupied[occupied.len() - 1]) / 255
        };
        if step == 0 {
            for (v, out) in lut.iter_mut().enumerate() {
                *out = v as u8;
            }
            continue;
        }
        let mut n = step / 2;
        for (out, &count) in lut.iter_mut().zip(h) {
            *out = (n / step).min(255) as u8;
            n += count;
        }
    }
    per_channel_lut(img, &luts)
}

/// `degenerate + factor · (img − degenerate)`, rounded and clamped per value.
fn blend(degenerate: &Image, img: &Image, factor: f64) -> Image {
    let data = degenerate
        .data()
        .iter()
        .zip(img.data())
        .map(|(&d, &v)| {
            let d = d as f64;
            (d + factor * (v as f64 - d)).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image::new(img.width(), img.height(), data).expect("blend preserves dimensions")
}

#[inline]
fn luma(rgb: [u8; 3]) -> u8 {
    ((rgb[0] as u32 * 19595 + rgb[1] as u32 * 38470 + rgb[2] as u32 * 7471 + 0x8000) >> 16) as u8
}

fn grayscale(img: &Image) -> Image {
    Image::from_fn(img.width(), img.height(), |x, y| {
        let l = luma(img.pixel(x, y));
        [l, l, l]
    })
}

/// Saturation: interpolates between the grayscale image and `img`.
pub fn color(img: &Image, factor: f64) -> Image {
    blend(&grayscale(img), img, factor)
}

/// Interpolates between a flat image at the mean luminance and `img`.
pub fn contrast(img: &Image, factor: f64) -> Image {
    let pixels = img.width() * img.height();
    let sum: u64 = (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
        .map(|(x, y)| luma(img.pixel(x, y)) as u64)
        .sum();
    let mean = (sum as f64 / pixels as f64 + 0.5).floor() as u8;
    blend(&Image::filled(img.width(), img.height(), [mean; 3]), img, factor)
}

/// Interpolates between black and `img`.
pub fn brightness(img: &Image, factor: f64) -> Image {
    blend(&Image::filled(img.width(), img.height(), [0; 3]), img, factor)
}

/// Interpolates between a smoothed copy and `img`. The smoothing kernel is
/// `[[1,1,1],[1,5,1],[1,1,1]] / 13`; border pixels are not smoothed.
pub fn sharpness(img: &Image, factor: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut smooth = img.clone();
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = [0u32; 3];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let weight = if dx == 1 && dy == 1 { 5 } else { 1 };
                        let p = img.pixel(x + dx - 1, y + dy - 1);
                        for c in 0..3 {
                            acc[c] += weight * p[c] as u32;
                        }
                    }
                }
                smooth.set_pixel(x, y, acc.map(|a| ((a + 6) / 13) as u8));
            }
        }
    }
    blend(&smooth, img, factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn op(kind: OpKind, m: u8) -> AugmentationOp {
        AugmentationOp::new(kind, Magnitude::new(m).unwrap())
    }

    #[test]
    fn canonical_order_has_fifteen_ops() {
        assert_eq!(OpKind::COUNT, 15);
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(
            names.join(","),
            "Identity,AutoContrast,Equalize,Rotate,Solarize,SolarizeAdd,Color,Contrast,\
             Brightness,Sharpness,ShearX,ShearY,TranslateX,TranslateY,Posterize"
        );
        assert_eq!("shearx".parse::<OpKind>().unwrap(), OpKind::ShearX);
        assert!("Cutout".parse::<OpKind>().is_err());
    }

    #[test]
    fn magnitude_range() {
        assert!(Magnitude::new(10).is_ok());
        assert!(Magnitude::new(11).is_err());
    }

    #[test]
    fn identity_like_cases() {
        let img = random_image(1, 9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in 0..=10 {
            assert_eq!(op(OpKind::Identity, m).apply(&img, &mut rng), img);
        }
        for kind in [
            OpKind::Rotate,
            OpKind::ShearX,
            OpKind::ShearY,
            OpKind::TranslateX,
            OpKind::TranslateY,
            OpKind::Posterize,
            OpKind::Solarize,
            OpKind::SolarizeAdd,
            OpKind::Color,
            OpKind::Contrast,
            OpKind::Brightness,
            OpKind::Sharpness,
        ] {
            assert_eq!(op(kind, 0).apply(&img, &mut rng), img, "{kind}");
        }
        assert_eq!(posterize(&img, 8), img);
        assert_eq!(solarize(&img, 256), img);
    }

    #[test]
    fn solarize_full_magnitude_inverts() {
        let img = random_image(2, 4, 4);
        let out = op(OpKind::Solarize, 10).apply_signed(&img, Sign::Positive);
        assert_eq!(out, img.map_values(|v| 255 - v));
    }

    #[test]
    fn solarize_add_only_touches_dark_values() {
        let img = Image::new(2, 1, vec![0, 127, 128, 200, 250, 10]).unwrap();
        let out = solarize_add(&img, 110, 128);
        assert_eq!(out.data(), &[110, 237, 128, 200, 250, 120]);
    }

    #[test]
    fn posterize_masks_low_bits() {
        let img = Image::new(1, 1, vec![255, 0x5a, 0x0f]).unwrap();
        assert_eq!(posterize(&img, 4).data(), &[0xf0, 0x50, 0x00]);
        assert_eq!(
            op(OpKind::Posterize, 10).apply_signed(&img, Sign::Positive),
            posterize(&img, 4)
        );
    }

    #[test]
    fn autocontrast_stretches_and_is_idempotent() {
        let img = Image::from_fn(4, 1, |x, _| [50 + x as u8 * 10, 7, 200 - x as u8]);
        let once = autocontrast(&img);
        assert_eq!(once.pixel(0, 0)[0], 0);
        assert_eq!(once.pixel(3, 0)[0], 255);
        assert_eq!(once.pixel(2, 0)[1], 7, "constant channel unchanged");
        assert_eq!(autocontrast(&once), once);
    }

    #[test]
    fn equalize_flat_and_two_level() {
        let flat = Image::filled(4, 4, [9, 9, 9]);
        assert_eq!(equalize(&flat), flat);
        // 255 low pixels and 255 high pixels: step = 1, low -> 0, high -> 255
        let img = Image::from_fn(255, 2, |_, y| if y == 0 { [10; 3] } else { [20; 3] });
        let out = equalize(&img);
        assert_eq!(out.pixel(0, 0), [0; 3]);
        assert_eq!(out.pixel(0, 1), [255; 3]);
    }

    #[test]
    fn geometric_ops_move_pixels() {
        let img = Image::from_fn(6, 4, |x, y| [x as u8, y as u8, 0]);
        let t = translate_x(&img, 2.0);
        assert_eq!(t.pixel(0, 1), [2, 1, 0]);
        assert_eq!(t.pixel(5, 1), FILL);
        let t = translate_y(&img, -1.0);
        assert_eq!(t.pixel(3, 0), FILL);
        assert_eq!(t.pixel(3, 1), [3, 0, 0]);
        let s = shear_x(&img, 1.0);
        assert_eq!(s.pixel(0, 0), [1, 0, 0]);
        assert_eq!(s.pixel(0, 2), [3, 2, 0]);
        let s = shear_y(&img, 1.0);
        assert_eq!(s.pixel(1, 0), [1, 2, 0]);
        // half-turn maps (x, y) to (w-1-x, h-1-y)
        let r = rotate(&img, 180.0);
        assert_eq!(r.pixel(0, 0), [5, 3, 0]);
        assert_eq!(r.pixel(5, 3), [0, 0, 0]);
    }

    #[test]
    fn brightness_extremes() {
        let img = random_image(3, 5, 5);
        assert_eq!(brightness(&img, 0.0), Image::filled(5, 5, [0; 3]));
        assert_eq!(brightness(&img, 1.0), img);
        let dim = op(OpKind::Brightness, 10).apply_signed(&img, Sign::Negative);
        assert!(dim.data().iter().zip(img.data()).all(|(d, v)| d <= v));
    }

    #[test]
    fn color_zero_is_grayscale() {
        let img = random_image(4, 3, 3);
        let g = color(&img, 0.0);
        for y in 0..3 {
            for x in 0..3 {
                let p = g.pixel(x, y);
                assert!(p[0] == p[1] && p[1] == p[2]);
            }
        }
    }

    #[test]
    fn contrast_zero_is_flat() {
        let img = random_image(5, 4, 4);
        let flat = contrast(&img, 0.0);
        let first = flat.pixel(0, 0);
        assert!(flat.data().chunks(3).all(|p| p == first));
    }

    #[test]
    fn sharpness_leaves_border_and_flat_images() {
        let flat = Image::filled(5, 5, [77; 3]);
        assert_eq!(sharpness(&flat, 1.9), flat);
        let img = random_image(6, 5, 5);
        let blurred = sharpness(&img, 0.0);
        assert_eq!(blurred.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(blurred.pixel(4, 2), img.pixel(4, 2));
    }

    #[test]
    fn every_op_preserves_dimensions_and_input() {
        let img = random_image(7, 11, 6);
        let before = img.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in OpKind::ALL {
            for m in [0, 3, 10] {
                let out = op(kind, m).apply(&img, &mut rng);
                assert_eq!((out.width(), out.height()), (11, 6), "{kind}");
            }
        }
        assert_eq!(img, before);
    }
}
