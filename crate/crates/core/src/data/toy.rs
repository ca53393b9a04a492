//! Small synthetic datasets for desk-scale runs and tests.

use rand::Rng;

use super::{Dataset, LabeledSample};
use crate::imaging::Image;

/// 5x5 bitmaps of the digits 0-9, one row per string.
const GLYPHS: [[&str; 5]; 10] = [
    ["01110", "10001", "10001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "01110"],
    ["11110", "00001", "01110", "10000", "11111"],
    ["11110", "00001", "00110", "00001", "11110"],
    ["10010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "11110"],
    ["01110", "10000", "11110", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "00100"],
    ["01110", "10001", "01110", "10001", "01110"],
    ["01110", "10001", "01111", "00001", "01110"],
];

/// Digit-like glyphs on a noisy dark background, labels `i % classes`.
///
/// Each sample draws its glyph at a random offset of up to two pixels with a
/// random stroke intensity and tint; every stroke pixel drops out with
/// probability 0.15. `classes` must be in `2..=10` and `side`
/// at least 7.
pub fn glyphs<R: Rng + ?Sized>(count: usize, classes: usize, side: usize, rng: &mut R) -> Dataset {
    assert!((2..=10).contains(&classes), "glyph datasets support 2 to 10 classes");
    assert!(side >= 7, "glyph images need a side of at least 7 pixels");
    let cell = (side - 2) / 5;
    let margin = (side - 5 * cell) / 2;

    let samples = (0..count)
        .map(|i| {
            let label = i % classes;
            let glyph = &GLYPHS[label];
            let ox = margin as isize + rng.random_range(-2i64..=2) as isize;
            let oy = margin as isize + rng.random_range(-2i64..=2) as isize;
            let intensity: f64 = rng.random_range(0.7..1.0);
            let tint: [f64; 3] = [
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
            ];
            let noise: Vec<u8> = (0..side * side * 3).map(|_| rng.random_range(0..80)).collect();
            let dropout: Vec<bool> = (0..side * side).map(|_| rng.random_bool(0.15)).collect();
            let image = Image::from_fn(side, side, |x, y| {
                let gx = (x as isize - ox).div_euclid(cell as isize);
                let gy = (y as isize - oy).div_euclid(cell as isize);
                let on = (0..5).contains(&gx)
                    && (0..5).contains(&gy)
                    && glyph[gy as usize].as_bytes()[gx as usize] == b'1'
                    && !dropout[y * side + x];
                let n = (y * side + x) * 3;
                std::array::from_fn(|c| {
                    if on {
                        (255.0 * intensity * tint[c]) as u8
                    } else {
                        noise[n + c]
                    }
                })
            });
            LabeledSample { image, label }
        })
        .collect();
    Dataset::new(samples, classes).expect("labels are below the class count")
}

/// Two classes separated by which half of the image is bright.
pub fn half_planes<R: Rng + ?Sized>(count: usize, side: usize, rng: &mut R) -> Dataset {
    assert!(side >= 2);
    let samples = (0..count)
        .map(|i| {
            let label = i % 2;
            let image = Image::from_fn(side, side, |x, _| {
                let bright = (x < side / 2) == (label == 0);
                let base: u8 = if bright { 170 } else { 60 };
                let v = base + rng.random_range(0..40);
                [v, v, v]
            });
            LabeledSample { image, label }
        })
        .collect();
    Dataset::new(samples, 2).expect("labels are below the class count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glyph_dataset_is_balanced() {
        let ds = glyphs(100, 4, 12, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(ds.class_histogram(), vec![25; 4]);
        assert_eq!(ds.image_dims(), Some((12, 12)));
    }

    #[test]
    fn glyph_dataset_is_reproducible() {
        let a = glyphs(20, 10, 10, &mut ChaCha8Rng::seed_from_u64(5));
        let b = glyphs(20, 10, 10, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
