//! The built-in classifier: an optional 3x3 convolution with ReLU and 2x2
//! average pooling, an optional ReLU hidden layer, and a dense output layer.
//!
//! All parameters live in one flat vector laid out as
//! `conv_w[f][c][ky][kx], conv_b[f], hidden_w[j][i], hidden_b[j], out_w[k][j], out_b[k]`,
//! omitting the blocks of disabled layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{softmax_cross_entropy, TrainableModel};
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// Number of 3x3 convolution filters; 0 disables the convolution stage.
    pub conv_filters: usize,
    /// Width of the hidden layer; 0 connects features straight to the output.
    pub hidden: usize,
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("model.input", "image dimensions must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least two classes"));
        }
        if self.conv_filters > 0 && (self.width < 2 || self.height < 2) {
            return Err(Error::config(
                "model.conv_filters",
                "pooling needs images of at least 2x2",
            ));
        }
        Ok(())
    }

    fn input_len(&self) -> usize {
        self.width * self.height * 3
    }

    fn pooled_dims(&self) -> (usize, usize) {
        (self.width / 2, self.height / 2)
    }

    fn feature_len(&self) -> usize {
        if self.conv_filters > 0 {
            let (pw, ph) = self.pooled_dims();
            self.conv_filters * pw * ph
        } else {
            self.input_len()
        }
    }

    fn output_fan_in(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.feature_len()
        }
    }

    fn layout(&self) -> Layout {
        let conv_w = 0;
        let conv_b = conv_w + self.conv_filters * 27;
        let hidden_w = conv_b + self.conv_filters;
        let hidden_b = hidden_w + self.hidden * self.feature_len();
        let out_w = hidden_b + self.hidden;
        let out_b = out_w + self.classes * self.output_fan_in();
        Layout {
            conv_w,
            conv_b,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            total: out_b + self.classes,
        }
    }

    /// Parameter tensor shapes in storage order.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        if self.conv_filters > 0 {
            shapes.push(vec![self.conv_filters, 3, 3, 3]);
            shapes.push(vec![self.conv_filters]);
        }
        if self.hidden > 0 {
            shapes.push(vec![self.hidden, self.feature_len()]);
            shapes.push(vec![self.hidden]);
        }
        shapes.push(vec![self.classes, self.output_fan_in()]);
        shapes.push(vec![self.classes]);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    conv_w: usize,
    conv_b: usize,
    hidden_w: usize,
    hidden_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinClassifier {
    spec: ClassifierSpec,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
struct Activations {
    input: Vec<f64>,
    conv_pre: Vec<f64>,
    features: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl BuiltinClassifier {
    /// He-normal weights and zero biases drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let l = spec.layout();
        let mut params = vec![0.0; l.total];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, gain: f64| {
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive fan-in");
            for p in &mut params[range] {
                *p = normal.sample(rng);
            }
        };
        if spec.conv_filters > 0 {
            fill(l.conv_w..l.conv_b, 27, 2.0);
        }
        if spec.hidden > 0 {
            fill(l.hidden_w..l.hidden_b, spec.feature_len(), 2.0);
        }
        fill(l.out_w..l.out_b, spec.output_fan_in(), 1.0);
        Ok(BuiltinClassifier { spec, params })
    }

    pub fn from_parameters(spec: ClassifierSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.parameter_count() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, got {}",
                spec.parameter_count(),
                params.len()
            )));
        }
        Ok(BuiltinClassifier { spec, params })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    fn check_image(&self, image: &Image) {
        assert_eq!(
            (image.width(), image.height()),
            (self.spec.width, self.spec.height),
            "image does not match the classifier input size"
        );
    }

    fn forward(&self, image: &Image) -> Activations {
        self.check_image(image);
        let s = &self.spec;
        let l = s.layout();
        let p = &self.params;
        let input: Vec<f64> = image.data().iter().map(|&v| v as f64 / 255.0 - 0.5).collect();

        let (conv_pre, features) = if s.conv_filters > 0 {
            let (w, h) = (s.width, s.height);
            let mut pre = vec![0.0; s.conv_filters * w * h];
            for f in 0..s.conv_filters {
                let bias = p[l.conv_b + f];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias;
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = x as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let base = (iy as usize * w + ix as usize) * 3;
                                for c in 0..3 {
                                    acc += p[l.conv_w + ((f * 3 + c) * 3 + ky) * 3 + kx] * input[base + c];
                                }
                            }
                        }
                        pre[(f * h + y) * w + x] = acc;
                    }
                }
            }
            let (pw, ph) = s.pooled_dims();
            let mut pooled = vec![0.0; s.conv_filters * pw * ph];
            for f in 0..s.conv_filters {
                for py in 0..ph {
                    for px in 0..pw {
                        let mut acc = 0.0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            acc += pre[(f * h + 2 * py + dy) * w + 2 * px + dx].max(0.0);
                        }
                        pooled[(f * ph + py) * pw + px] = acc * 0.25;
                    }
                }
            }
            (pre, pooled)
        } else {
            (Vec::new(), input.clone())
        };

        let (hidden_pre, hidden) = if s.hidden > 0 {
            let n = features.len();
            let pre: Vec<f64> = (0..s.hidden)
                .map(|j| {
                    let row = &p[l.hidden_w + j * n..l.hidden_w + (j + 1) * n];
                    p[l.hidden_b + j] + dot(row, &features)
                })
                .collect();
            let act = pre.iter().map(|&z| z.max(0.0)).collect();
            (pre, act)
        } else {
            (Vec::new(), Vec::new())
        };

        let last = if s.hidden > 0 { &hidden } else { &features };
        let n = last.len();
        let logits = (0..s.classes)
            .map(|k| p[l.out_b + k] + dot(&p[l.out_w + k * n..l.out_w + (k + 1) * n], last))
            .collect();

        Activations {
            input,
            conv_pre,
            features,
            hidden_pre,
            hidden,
            logits,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TrainableModel for BuiltinClassifier {
    fn class_count(&self) -> usize {
        self.spec.classes
    }

    fn logits(&self, image: &Image) -> Vec<f64> {
        self.forward(image).logits
    }

    fn accumulate_gradient(&self, image: &Image, label: usize, grad: &mut [f64]) -> f64 {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer has the wrong length");
        let s = &self.spec;
        let l = s.layout();
        let p = &self.params;
        let act = self.forward(image);
        let (loss, mut d_logits) = softmax_cross_entropy(&act.logits, label);
        d_logits[label] -= 1.0;

        let last = if s.hidden > 0 { &act.hidden } else { &act.features };
        let n = last.len();
        let mut d_last = vec![0.0; n];
        for (k, &dk) in d_logits.iter().enumerate() {
            grad[l.out_b + k] += dk;
            let w_row = &p[l.out_w + k * n..l.out_w + (k + 1) * n];
            let g_row = &mut grad[l.out_w + k * n..l.out_w + (k + 1) * n];
            for i in 0..n {
                g_row[i] += dk * last[i];
                d_last[i] += dk * w_row[i];
            }
        }

        if s.conv_filters == 0 && s.hidden == 0 {
            return loss;
        }

        let d_features = if s.hidden > 0 {
            let m = act.features.len();
            let mut d_features = vec![0.0; if s.conv_filters > 0 { m } else { 0 }];
            for j in 0..s.hidden {
                if act.hidden_pre[j] <= 0.0 {
                    continue;
                }
                let dz = d_last[j];
                grad[l.hidden_b + j] += dz;
                let g_row = &mut grad[l.hidden_w + j * m..l.hidden_w + (j + 1) * m];
                for (g, x) in g_row.iter_mut().zip(&act.features) {
                    *g += dz * x;
                }
                if s.conv_filters > 0 {
                    let w_row = &p[l.hidden_w + j * m..l.hidden_w + (j + 1) * m];
                    for (d, w) in d_features.iter_mut().zip(w_row) {
                        *d += dz * w;
                    }
                }
            }
            d_features
        } else {
            d_last
        };

        if s.conv_filters > 0 {
            let (w, h) = (s.width, s.height);
            let (pw, ph) = s.pooled_dims();
            for f in 0..s.conv_filters {
                for py in 0..ph {
                    for px in 0..pw {
                        let d_pool = d_features[(f * ph + py) * pw + px] * 0.25;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let (y, x) = (2 * py + dy, 2 * px + dx);
                            if act.conv_pre[(f * h + y) * w + x] <= 0.0 {
                                continue;
                            }
                            grad[l.conv_b + f] += d_pool;
                            for ky in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = x as isize + kx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let base = (iy as usize * w + ix as usize) * 3;
                                    for c in 0..3 {
                                        grad[l.conv_w + ((f * 3 + c) * 3 + ky) * 3 + kx] +=
                                            d_pool * act.input[base + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        loss
    }

    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(conv: usize, hidden: usize) -> ClassifierSpec {
        ClassifierSpec {
            width: 6,
            height: 4,
            classes: 3,
            conv_filters: conv,
            hidden,
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(spec(0, 0).parameter_count(), 3 * 72 + 3);
        assert_eq!(spec(0, 5).parameter_count(), 5 * 72 + 5 + 3 * 5 + 3);
        // conv: 2 filters -> pooled 3x2 -> 12 features
        assert_eq!(spec(2, 5).parameter_count(), 2 * 27 + 2 + 5 * 12 + 5 + 3 * 5 + 3);
        let total: usize = spec(2, 5)
            .layer_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        assert_eq!(total, spec(2, 5).parameter_count());
    }

    #[test]
    fn logits_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = BuiltinClassifier::new(spec(2, 5), &mut rng).unwrap();
        let img = Image::from_fn(6, 4, |x, y| [(x * 40) as u8, (y * 60) as u8, 255]);
        let logits = model.logits(&img);
        assert_eq!(logits.len(), 3);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_parameter_mismatch() {
        assert!(BuiltinClassifier::from_parameters(spec(0, 0), vec![0.0; 3]).is_err());
        assert!(ClassifierSpec {
            classes: 1,
            ..spec(0, 0)
        }
        .validate()
        .is_err());
    }
}
