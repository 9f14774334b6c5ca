//! Parameterized layers: owned weights plus a forward that binds them onto a
//! tape by name. Names are dotted paths ("backbone.block0.conv.weight") so
//! checkpoints and the optimizer address parameters uniformly.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{self, BnStats, Mode};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Uniform access to a component's named tensors. `trainable = false` marks
/// state carried between steps but not touched by the optimizer (batch-norm
/// running statistics).
pub trait ParamGroup {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool));

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, trainable| {
            if trainable {
                n += t.numel();
            }
        });
        n
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    rng::fill_normal(rng, t.data_mut(), std);
    t
}

#[derive(Debug, Clone)]
pub struct Conv1x1Layer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv1x1Layer {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv1x1Layer {
            name: name.to_string(),
            weight: kaiming(&[c_out, c_in], c_in, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    /// Zero weights and bias; used where a neutral start matters (the cost
    /// volume summary conv and the SRIM expansion conv).
    pub fn zeroed(name: &str, c_in: usize, c_out: usize) -> Self {
        Conv1x1Layer {
            name: name.to_string(),
            weight: Tensor::zeros(&[c_out, c_in]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    /// Every weight set to `scale / c_in`, bias zero: the output starts as a
    /// scaled average of the input channels.
    pub fn averaging(name: &str, c_in: usize, c_out: usize, scale: f64) -> Self {
        Conv1x1Layer {
            name: name.to_string(),
            weight: Tensor::from_vec(vec![c_out, c_in], vec![scale / c_in as f64; c_out * c_in])
                .expect("shape matches data"),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias);
        nn::conv1x1(tape, x, w, b)
    }
}

impl ParamGroup for Conv1x1Layer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f(&format!("{}.weight", self.name), &self.weight, true);
        f(&format!("{}.bias", self.name), &self.bias, true);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&format!("{}.weight", self.name), &mut self.weight, true);
        f(&format!("{}.bias", self.name), &mut self.bias, true);
    }
}

#[derive(Debug, Clone)]
pub struct Conv3x3Layer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv3x3Layer {
    pub fn new(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv3x3Layer {
            name: name.to_string(),
            weight: kaiming(&[c_out, c_in, 3, 3], c_in * 9, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias);
        nn::conv3x3(tape, x, w, b, self.stride)
    }
}

impl ParamGroup for Conv3x3Layer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f(&format!("{}.weight", self.name), &self.weight, true);
        f(&format!("{}.bias", self.name), &self.bias, true);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&format!("{}.weight", self.name), &mut self.weight, true);
        f(&format!("{}.bias", self.name), &mut self.bias, true);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2dLayer {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BnStats,
}

impl BatchNorm2dLayer {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2dLayer {
            name: name.to_string(),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            stats: BnStats::new(channels),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(&format!("{}.gamma", self.name), &self.gamma);
        let b = tape.param(&format!("{}.beta", self.name), &self.beta);
        nn::batch_norm2d(tape, x, g, b, &mut self.stats, mode)
    }
}

impl ParamGroup for BatchNorm2dLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f(&format!("{}.gamma", self.name), &self.gamma, true);
        f(&format!("{}.beta", self.name), &self.beta, true);
        f(
            &format!("{}.running_mean", self.name),
            &self.stats.running_mean,
            false,
        );
        f(
            &format!("{}.running_var", self.name),
            &self.stats.running_var,
            false,
        );
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma, true);
        f(&format!("{}.beta", self.name), &mut self.beta, true);
        f(
            &format!("{}.running_mean", self.name),
            &mut self.stats.running_mean,
            false,
        );
        f(
            &format!("{}.running_var", self.name),
            &mut self.stats.running_var,
            false,
        );
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            name: name.to_string(),
            weight: kaiming(&[out_dim, in_dim], in_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeroed(name: &str, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            name: name.to_string(),
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias);
        nn::linear(tape, x, w, b)
    }
}

impl ParamGroup for LinearLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f(&format!("{}.weight", self.name), &self.weight, true);
        f(&format!("{}.bias", self.name), &self.bias, true);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&format!("{}.weight", self.name), &mut self.weight, true);
        f(&format!("{}.bias", self.name), &mut self.bias, true);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visit_orders_and_counts() {
        let mut rng = rng::rng_from_seed(0);
        let conv = Conv1x1Layer::new("m.reduce", 8, 4, &mut rng);
        assert_eq!(conv.num_trainable(), 8 * 4 + 4);

        let bn = BatchNorm2dLayer::new("m.bn", 4);
        let mut names = vec![];
        bn.visit(&mut |n, _, tr| names.push((n.to_string(), tr)));
        assert_eq!(names.len(), 4);
        assert!(names[0].1 && names[1].1 && !names[2].1 && !names[3].1);
        assert_eq!(bn.num_trainable(), 8);
    }
}
