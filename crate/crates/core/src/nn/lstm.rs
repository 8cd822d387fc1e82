use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{dense_forward, lstm_forward, Tape, Var};
use super::{check_inputs, uniform, Recorded};
use crate::Result;

/// Sizes of the debiasing model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebiasShape {
    /// Number of input series (cone width); the target center is feature 0.
    pub input_width: usize,
    pub hidden: usize,
    /// Width of the residual block's inner layer.
    pub residual_width: usize,
}

impl DebiasShape {
    pub fn n_params(&self) -> usize {
        let (n, h, r) = (self.input_width, self.hidden, self.residual_width);
        4 * h * n + 4 * h * h + 4 * h + h + 1 + 2 * r + r + r + 2 + 1
    }

    /// Lengths of the parameter blocks in storage order: LSTM input weights,
    /// recurrent weights, bias, head weights, head bias, residual inner
    /// weights and bias, residual outer weights, linear bypass, output bias.
    fn blocks(&self) -> [usize; 10] {
        let (n, h, r) = (self.input_width, self.hidden, self.residual_width);
        [4 * h * n, 4 * h * h, 4 * h, h, 1, 2 * r, r, r, 2, 1]
    }
}

/// LSTM followed by a linear head and a residual block.
///
/// With normalised inputs `x̂ = x ⊙ s`, hidden states `h = LSTM(x̂)` and
/// `u = head·h + c`, the output is
/// `y = x_0 + σ · (W₂ tanh(W₁ z + b₁) + V z + b₂)` with `z = [u, x̂_0]`,
/// so zero parameters pass the target input through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasModel {
    pub shape: DebiasShape,
    pub params: Vec<f64>,
    /// Fixed per-feature input normalisation.
    pub input_scale: Vec<f64>,
    /// Fixed scale of the correction added to the target input.
    pub output_scale: f64,
}

impl DebiasModel {
    pub fn zeros(shape: DebiasShape) -> Self {
        DebiasModel {
            shape,
            params: vec![0.0; shape.n_params()],
            input_scale: vec![1.0; shape.input_width],
            output_scale: 1.0,
        }
    }

    /// Uniform `±1/√fan_in` weights, forget-gate bias `+1`, and a near-zero
    /// head so the pass-through dominates at the start.
    pub fn init<R: Rng>(shape: DebiasShape, rng: &mut R) -> Self {
        let mut m = Self::zeros(shape);
        let (n, h, r) = (shape.input_width, shape.hidden, shape.residual_width);
        let b = shape.blocks();
        let mut off = 0;
        let lstm_bound = 1.0 / ((n + h).max(1) as f64).sqrt();
        for (i, len) in b.iter().enumerate() {
            let block = &mut m.params[off..off + len];
            match i {
                0 | 1 => block.iter_mut().for_each(|v| *v = uniform(rng, lstm_bound)),
                2 => {
                    block.iter_mut().for_each(|v| *v = uniform(rng, lstm_bound));
                    block[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                }
                3 => block.iter_mut().for_each(|v| *v = uniform(rng, 1e-2 / (h.max(1) as f64).sqrt())),
                5 | 6 => block.iter_mut().for_each(|v| *v = uniform(rng, 1.0 / 2f64.sqrt())),
                7 => block.iter_mut().for_each(|v| *v = uniform(rng, 1e-2 / (r.max(1) as f64).sqrt())),
                _ => {}
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
        let mut out = Vec::with_capacity(10);
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

    /// Gradient-free forward pass over `steps` rows of `inputs` (row-major,
    /// `steps × input_width`).
    pub fn forward(&self, inputs: &[f64], steps: usize) -> Result<Vec<f64>> {
        let n = self.shape.input_width;
        check_inputs(inputs, steps, n)?;
        let (h, r) = (self.shape.hidden, self.shape.residual_width);
        let p = self.split(&self.params);
        let x = self.scaled(inputs, steps);
        let mut hs = vec![0.0; steps * h];
        let mut gates = vec![0.0; steps * 4 * h];
        let mut cells = vec![0.0; steps * h];
        lstm_forward(&x, p[0], p[1], p[2], n, h, &mut hs, &mut gates, &mut cells);
        let mut u = vec![0.0; steps];
        dense_forward(&hs, p[3], Some(p[4]), h, 1, &mut u);
        let mut z = vec![0.0; 2 * steps];
        for t in 0..steps {
            z[2 * t] = u[t];
            z[2 * t + 1] = x[t * n];
        }
        let mut a = vec![0.0; steps * r];
        dense_forward(&z, p[5], Some(p[6]), 2, r, &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        let mut inner = vec![0.0; steps];
        dense_forward(&a, p[7], None, r, 1, &mut inner);
        let mut lin = vec![0.0; steps];
        dense_forward(&z, p[8], Some(p[9]), 2, 1, &mut lin);
        Ok((0..steps)
            .map(|t| inputs[t * n] + self.output_scale * (inner[t] + lin[t]))
            .collect())
    }

    /// Records the forward pass on `tape` with one leaf per parameter block.
    pub fn record(&self, tape: &mut Tape, inputs: &[f64], steps: usize) -> Result<Recorded> {
        let n = self.shape.input_width;
        check_inputs(inputs, steps, n)?;
        let (h, r) = (self.shape.hidden, self.shape.residual_width);
        let params: Vec<Var> = self.split(&self.params).into_iter().map(|b| tape.leaf(b)).collect();
        let x = tape.leaf(&self.scaled(inputs, steps));
        let hs = tape.lstm_seq(x, params[0], params[1], params[2], steps, h)?;
        let u = tape.dense(hs, params[3], Some(params[4]), steps, 1)?;
        let mut select = vec![0.0; n];
        select[0] = 1.0;
        let select = tape.leaf(&select);
        let xt = tape.dense(x, select, None, steps, 1)?;
        let z = tape.concat_cols(u, xt, steps)?;
        let a = tape.dense(z, params[5], Some(params[6]), steps, r)?;
        let a = tape.tanh(a);
        let inner = tape.dense(a, params[7], None, steps, 1)?;
        let lin = tape.dense(z, params[8], Some(params[9]), steps, 1)?;
        let block = tape.add(inner, lin)?;
        let block = tape.scale(block, self.output_scale);
        let target: Vec<f64> = (0..steps).map(|t| inputs[t * n]).collect();
        let target = tape.leaf(&target);
        let output = tape.add(target, block)?;
        Ok(Recorded { output, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{quantile_loss, quantile_loss_grad, QuantileVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> DebiasShape {
        DebiasShape {
            input_width: 3,
            hidden: 4,
            residual_width: 5,
        }
    }

    fn inputs(rng: &mut ChaCha8Rng, steps: usize, n: usize) -> Vec<f64> {
        (0..steps * n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_parameters_pass_target_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DebiasModel::zeros(shape()).with_scales(vec![0.5, 2.0, 3.0], 1.7);
        let x = inputs(&mut rng, 20, 3);
        let y = m.forward(&x, 20).unwrap();
        for t in 0..20 {
            assert_eq!(y[t], x[3 * t]);
        }
        assert!(m.forward(&x[..59], 20).is_err());
    }

    #[test]
    fn hand_computed_two_step_recurrence() {
        // Scalar input, hidden 1, no residual layer; the linear bypass reads u.
        let s = DebiasShape {
            input_width: 1,
            hidden: 1,
            residual_width: 0,
        };
        let mut m = DebiasModel::zeros(s);
        // wx: i f g o, wh: i f g o, b: i f g o, head w, head b, v = [1, 0], b2.
        let p = [0.5, -0.3, 0.8, 0.2, 0.1, 0.4, -0.6, 0.3, 0.05, 0.1, -0.1, 0.2, 0.9, 0.0, 1.0, 0.0, 0.0];
        m.params.copy_from_slice(&p);
        let x = [0.7, -1.1];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        let mut expect = Vec::new();
        for xt in x {
            let i = sig(0.5 * xt + 0.1 * h + 0.05);
            let f = sig(-0.3 * xt + 0.4 * h + 0.1);
            let g = (0.8 * xt - 0.6 * h - 0.1).tanh();
            let o = sig(0.2 * xt + 0.3 * h + 0.2);
            c = f * c + i * g;
            h = o * c.tanh();
            expect.push(xt + 0.9 * h);
        }
        let y = m.forward(&x, 2).unwrap();
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let rec = m.record(&mut tape, &x, 2).unwrap();
        assert_eq!(tape.value(rec.output), y.as_slice());
    }

    #[test]
    fn tape_route_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DebiasModel::init(shape(), &mut rng).with_scales(vec![0.7, 1.2, 0.9], 1.3);
        let x = inputs(&mut rng, 30, 3);
        let mut tape = Tape::new();
        let rec = m.record(&mut tape, &x, 30).unwrap();
        let y = m.forward(&x, 30).unwrap();
        for (a, b) in tape.value(rec.output).iter().zip(&y) {
            assert!((a - b).abs() < 1e-13);
        }
        // Forget-gate bias initialised to one.
        let b_off = 4 * 4 * 3 + 4 * 4 * 4;
        assert!(m.params[b_off + 4..b_off + 8].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn quantile_loss_gradient_through_model_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qv = QuantileVector::tails();
        for case in 0..50 {
            let s = DebiasShape {
                input_width: 2,
                hidden: 2,
                residual_width: 2,
            };
            let mut m = DebiasModel::init(s, &mut rng);
            // Larger head weights so every block carries gradient.
            m.params.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            let steps = 25;
            let x = inputs(&mut rng, steps, 2);
            let obs: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut tape = Tape::new();
            let rec = m.record(&mut tape, &x, steps).unwrap();
            let out = tape.value(rec.output).to_vec();
            let seed = quantile_loss_grad(&out, &obs, &qv).unwrap();
            tape.backward_with(rec.output, &seed).unwrap();
            let g = rec.gradient(&tape);
            let h = 1e-6;
            for i in (0..m.params.len()).step_by(3) {
                let mut p = m.clone();
                p.params[i] += h;
                let mut q = m.clone();
                q.params[i] -= h;
                let fd = (quantile_loss(&p.forward(&x, steps).unwrap(), &obs, &qv).unwrap()
                    - quantile_loss(&q.forward(&x, steps).unwrap(), &obs, &qv).unwrap())
                    / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
                assert!(err < 1e-4, "case {case} param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn affine_configuration() {
        let s = DebiasShape {
            input_width: 1,
            hidden: 0,
            residual_width: 0,
        };
        assert_eq!(s.n_params(), 4);
        let mut m = DebiasModel::zeros(s);
        // u = c; y = x + v1·x + b2 with unit scales.
        m.params.copy_from_slice(&[0.0, 0.0, 2.0, 2.0]);
        let y = m.forward(&[1.0, -1.0], 2).unwrap();
        assert_eq!(y, vec![5.0, -1.0]);
    }
}
