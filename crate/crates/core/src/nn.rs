//! Dense tanh networks with explicit reverse-mode gradients.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Uniform(−1/√fan_in, 1/√fan_in) for weights and biases.
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| draw());
        let bias = Array1::from_shape_fn(fan_out, |_| draw());
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Feed-forward stack: tanh after every layer except the last, which is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; entry `l > 0` is the tanh output of layer `l − 1`.
    inputs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl MlpGrad {
    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].forward(x);
        if last > 0 {
            h.mapv_inplace(f64::tanh);
        }
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.forward(&h);
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&h);
            if l < last {
                out.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = out;
        }
        (h, MlpCache { inputs })
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            weight: self.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            bias: self.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the block input.
    pub fn backward(&self, cache: &MlpCache, grad_out: Array2<f64>, grad: &mut MlpGrad) -> Array2<f64> {
        let mut g = grad_out;
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            grad.weight[l] += &input.t().dot(&g);
            grad.bias[l] += &g.sum_axis(Axis(0));
            let mut gin = g.dot(&self.layers[l].weight.t());
            if l > 0 {
                // input[l] = tanh(pre[l-1])
                ndarray::Zip::from(&mut gin)
                    .and(input)
                    .for_each(|gi, &a| *gi *= 1.0 - a * a);
            }
            g = gin;
        }
        g
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}
