//! Dense layers and ReLU perceptrons with hand-written backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Fan-in scaled uniform weights in `±1/√fan_in`, zero bias.
    pub fn new(rng: &mut RandomStream, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// Multilayer perceptron: ReLU between layers, optional squashing at the
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: OutputActivation,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(rng: &mut RandomStream, dims: &[usize], output: OutputActivation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and output size");
        let layers = dims.windows(2).map(|w| Dense::new(rng, w[0], w[1])).collect();
        Self { layers, output }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect(),
            output: self.output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn infer(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(&x);
        for layer in self.layers.iter().skip(1) {
            h.mapv_inplace(relu);
            h = layer.forward(&h.view());
        }
        self.squash(&mut h);
        h
    }

    pub fn forward(&self, x: Array2<f64>) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = self.layers[0].forward(&x.view());
        inputs.push(x);
        for layer in self.layers.iter().skip(1) {
            h.mapv_inplace(relu);
            let next = layer.forward(&h.view());
            inputs.push(h);
            h = next;
        }
        self.squash(&mut h);
        MlpCache { inputs, output: h }
    }

    fn squash(&self, h: &mut Array2<f64>) {
        if self.output == OutputActivation::Sigmoid {
            h.mapv_inplace(sigmoid);
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the input when requested.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_out: &Array2<f64>,
        grads: &mut Mlp,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let mut dz = d_out.clone();
        if self.output == OutputActivation::Sigmoid {
            dz.zip_mut_with(&cache.output, |d, &y| *d *= y * (1.0 - y));
        }
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let x = &cache.inputs[i];
            g.weight += &dz.t().dot(x);
            g.bias += &dz.sum_axis(Axis(0));
            if i == 0 {
                return need_input_grad.then(|| dz.dot(&layer.weight));
            }
            let mut dx = dz.dot(&layer.weight);
            dx.zip_mut_with(x, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            dz = dx;
        }
        unreachable!()
    }

    pub fn visit_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), l.weight.as_slice().unwrap()));
            out.push((format!("{prefix}.{i}.bias"), l.bias.as_slice().unwrap()));
        }
    }

    pub fn visit_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), l.weight.as_slice_mut().unwrap()));
            out.push((format!("{prefix}.{i}.bias"), l.bias.as_slice_mut().unwrap()));
        }
    }

    pub fn shapes(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), l.weight.shape().to_vec()));
            out.push((format!("{prefix}.{i}.bias"), l.bias.shape().to_vec()));
        }
    }
}

/// Pattern of active hidden units for a forward pass (one bit per
/// unit); two inputs with the same pattern lie in the same linear piece.
pub fn activation_pattern(cache: &MlpCache) -> Vec<bool> {
    cache
        .inputs
        .iter()
        .skip(1)
        .flat_map(|h| h.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect()
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(1);
        let mlp = Mlp::new(&mut rng, &[3, 5, 2], OutputActivation::Sigmoid);
        let x = array![[0.3, -0.2, 0.9], [1.1, 0.4, -0.7]];
        let loss = |m: &Mlp, x: &Array2<f64>| m.infer(x.view()).iter().map(|v| v * v).sum::<f64>();
        let cache = mlp.forward(x.clone());
        let d_out = cache.output.mapv(|v| 2.0 * v);
        let mut grads = mlp.zeros_like();
        let dx = mlp.backward(&cache, &d_out, &mut grads, true).unwrap();

        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
        for li in 0..2 {
            for idx in 0..mlp.layers[li].weight.len() {
                let mut mp = mlp.clone();
                mp.layers[li].weight.as_slice_mut().unwrap()[idx] += h;
                let mut mm = mlp.clone();
                mm.layers[li].weight.as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
                let an = grads.layers[li].weight.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-7, "layer {li} idx {idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn infer_equals_forward() {
        let mut rng = stream(2);
        let mlp = Mlp::new(&mut rng, &[4, 8, 8, 3], OutputActivation::Identity);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        assert_eq!(mlp.infer(x.view()), mlp.forward(x).output);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
