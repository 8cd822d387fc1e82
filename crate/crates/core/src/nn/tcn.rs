use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{conv_forward, dense_forward, Tape, Var};
use super::{check_inputs, uniform, Recorded};
use crate::Result;

/// Sizes of the downscaling TCN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownscaleShape {
    pub input_width: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl DownscaleShape {
    pub fn dilation(layer: usize) -> usize {
        1 << layer
    }

    /// Number of past steps (including the current one) an output sees.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.layers).map(|l| (self.kernel - 1) * Self::dilation(l)).sum::<usize>()
    }

    fn layer_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_width
        } else {
            self.channels
        }
    }

    fn blocks(&self) -> Vec<usize> {
        let mut b = Vec::with_capacity(2 * self.layers + 3);
        for l in 0..self.layers {
            b.push(self.channels * self.layer_in(l) * self.kernel);
            b.push(self.channels);
        }
        let top = if self.layers == 0 { self.input_width } else { self.channels };
        b.push(top);
        b.push(1);
        b.push(self.input_width);
        b
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().sum()
    }
}

/// Causal dilated convolutions (dilations `1, 2, 4, …`) with ReLU, a linear
/// head and a linear skip from the current inputs:
/// `y = σ · (head · h + c + S x̂_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownscaleModel {
    pub shape: DownscaleShape,
    pub params: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_scale: f64,
}

impl DownscaleModel {
    pub fn zeros(shape: DownscaleShape) -> Self {
        DownscaleModel {
            shape,
            params: vec![0.0; shape.n_params()],
            input_scale: vec![1.0; shape.input_width],
            output_scale: 1.0,
        }
    }

    /// Uniform `±1/√fan_in` convolution weights, a near-zero head
    /// (`±10⁻²/√fan_in`), zero biases and skip.
    pub fn init<R: Rng>(shape: DownscaleShape, rng: &mut R) -> Self {
        let mut m = Self::zeros(shape);
        let blocks = shape.blocks();
        let mut off = 0;
        for (i, len) in blocks.iter().enumerate() {
            let fan_in = if i < 2 * shape.layers {
                shape.layer_in(i / 2) * shape.kernel
            } else {
                blocks[2 * shape.layers]
            };
            if i % 2 == 0 && i <= 2 * shape.layers {
                let gain = if i == 2 * shape.layers { 1e-2 } else { 1.0 };
                let bound = gain / (fan_in.max(1) as f64).sqrt();
                m.params[off..off + len].iter_mut().for_each(|v| *v = uniform(rng, bound));
            }
            off += len;
        }
        m
    }

    pub fn with_scales(mut self, input_scale: Vec<f64>, output_scale: f64) -> Self {
        self.input_scale = input_scale;
        self.output_scale = output_scale;
        self
    }

    fn split<'a>(&self, p: &'a [f64]) -> Vec<&'a [f64]> {
        let mut out = Vec::new();
        let mut off = 0;
        for len in self.shape.blocks() {
            out.push(&p[off..off + len]);
            off += len;
        }
        out
    }

    fn scaled(&self, inputs: &[f64], steps: usize) -> Vec<f64> {
        let n = self.shape.input_width;
        let mut x = inputs.to_vec();
        for t in 0..steps {
            for (v, s) in x[t * n..(t + 1) * n].iter_mut().zip(&self.input_scale) {
                *v *= s;
            }
        }
        x
    }

    pub fn forward(&self, inputs: &[f64], steps: usize) -> Result<Vec<f64>> {
        let s = self.shape;
        check_inputs(inputs, steps, s.input_width)?;
        let p = self.split(&self.params);
        let x = self.scaled(inputs, steps);
        let mut h = x.clone();
        for l in 0..s.layers {
            let mut y = vec![0.0; steps * s.channels];
            conv_forward(&h, p[2 * l], p[2 * l + 1], s.layer_in(l), s.channels, s.kernel, DownscaleShape::dilation(l), &mut y);
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            h = y;
        }
        let top = p[2 * s.layers].len();
        let mut head = vec![0.0; steps];
        dense_forward(&h, p[2 * s.layers], Some(p[2 * s.layers + 1]), top, 1, &mut head);
        let mut skip = vec![0.0; steps];
        dense_forward(&x, p[2 * s.layers + 2], None, s.input_width, 1, &mut skip);
        Ok(head.iter().zip(&skip).map(|(a, b)| self.output_scale * (a + b)).collect())
    }

    pub fn record(&self, tape: &mut Tape, inputs: &[f64], steps: usize) -> Result<Recorded> {
        let s = self.shape;
        check_inputs(inputs, steps, s.input_width)?;
        let params: Vec<Var> = self.split(&self.params).into_iter().map(|b| tape.leaf(b)).collect();
        let x = tape.leaf(&self.scaled(inputs, steps));
        let mut h = x;
        for l in 0..s.layers {
            let y = tape.causal_conv(h, params[2 * l], params[2 * l + 1], steps, s.channels, s.kernel, DownscaleShape::dilation(l))?;
            h = tape.relu(y);
        }
        let head = tape.dense(h, params[2 * s.layers], Some(params[2 * s.layers + 1]), steps, 1)?;
        let skip = tape.dense(x, params[2 * s.layers + 2], None, steps, 1)?;
        let sum = tape.add(head, skip)?;
        let output = tape.scale(sum, self.output_scale);
        Ok(Recorded { output, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> DownscaleShape {
        DownscaleShape {
            input_width: 3,
            channels: 6,
            layers: 4,
            kernel: 2,
        }
    }

    #[test]
    fn receptive_field_is_sixteen() {
        assert_eq!(shape().receptive_field(), 16);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let m = DownscaleModel::zeros(shape());
        let x: Vec<f64> = (0..60).map(|i| i as f64).collect();
        assert!(m.forward(&x, 20).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn impulse_response_stays_in_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = DownscaleModel::init(shape(), &mut rng);
        // Positive biases keep the ReLUs active so the response is visible.
        m.params.iter_mut().for_each(|v| *v = v.abs() + 0.01);
        let steps = 50;
        let base = vec![0.0; steps * 3];
        let mut imp = base.clone();
        imp[10 * 3 + 1] = 1.0;
        let y0 = m.forward(&base, steps).unwrap();
        let y1 = m.forward(&imp, steps).unwrap();
        for t in 0..steps {
            let changed = (y1[t] - y0[t]).abs() > 1e-15;
            assert_eq!(changed, (10..26).contains(&t), "t={t}");
        }
    }

    #[test]
    fn tape_route_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DownscaleModel::init(shape(), &mut rng).with_scales(vec![0.5, 1.0, 2.0], 1.5);
        let mut m = m;
        let n = m.params.len();
        for v in m.params[n - 3..].iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let steps = 30;
        let x: Vec<f64> = (0..steps * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..steps).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let rec = m.record(&mut tape, &x, steps).unwrap();
        let y = m.forward(&x, steps).unwrap();
        for (a, b) in tape.value(rec.output).iter().zip(&y) {
            assert!((a - b).abs() < 1e-13);
        }
        let t = tape.leaf(&target);
        let loss = tape.mse(rec.output, t).unwrap();
        tape.backward(loss).unwrap();
        let g = rec.gradient(&tape);
        let mse = |p: &DownscaleModel| {
            let y = p.forward(&x, steps).unwrap();
            y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / steps as f64
        };
        let h = 1e-6;
        for i in 0..n {
            let mut p = m.clone();
            p.params[i] += h;
            let mut q = m.clone();
            q.params[i] -= h;
            let fd = (mse(&p) - mse(&q)) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            assert!(err < 1e-5, "param {i}: fd {fd} vs {}", g[i]);
        }
    }
}
