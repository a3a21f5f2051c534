use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{matmul_nn, matmul_nt, matmul_tn, Matrix};
use super::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative given pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
            activation,
        }
    }

    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let mut layer = Self::zeros(input, output, activation);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-limit..=limit);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    generation: u64,
}

/// Compares parameters only.
impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Values saved by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` feeds layer `l`; the final entry is the network output.
    inputs: Vec<Matrix>,
    /// Pre-activations per layer.
    pre: Vec<Matrix>,
    generation: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.inputs.last().unwrap()
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
    /// Gradient with respect to the network input.
    pub input: Matrix,
}

impl GradientBundle {
    /// Flat views in the order of [`Mlp::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
            .collect()
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::Shape("network needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(NeuralError::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(NeuralError::Shape(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    /// Glorot-initialized layers with the given widths and activations.
    pub fn random<R: Rng>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self, NeuralError> {
        if widths.len() != activations.len() + 1 {
            return Err(NeuralError::Shape("need one activation per layer".into()));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| DenseLayer::glorot(w[0], w[1], a, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Mutable parameter views (`w0, b0, w1, b1, ...`). Invalidates caches.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache), NeuralError> {
        if x.cols() != self.input_dim() {
            return Err(NeuralError::Shape(format!(
                "input width {} but network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        for layer in &self.layers {
            let mut z = matmul_nt(inputs.last().unwrap(), &layer.weights);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let y = z.map(|v| layer.activation.apply(v));
            pre.push(z);
            inputs.push(y);
        }
        let out = inputs.last().unwrap().clone();
        Ok((
            out,
            ForwardCache {
                inputs,
                pre,
                generation: self.generation,
            },
        ))
    }

    /// Output only.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix, NeuralError> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Exact gradients of a scalar loss given `dy = dLoss/dOutput`.
    pub fn backward(&self, cache: &ForwardCache, dy: &Matrix) -> Result<GradientBundle, NeuralError> {
        if cache.generation != self.generation || cache.pre.len() != self.layers.len() {
            return Err(NeuralError::StaleCache);
        }
        if dy.shape() != cache.output().shape() {
            return Err(NeuralError::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                dy.shape(),
                cache.output().shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dy.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[l];
            let y = &cache.inputs[l + 1];
            // dL/dz
            for ((d, &zv), &yv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()).zip(y.as_slice()) {
                *d *= layer.activation.derivative(zv, yv);
            }
            let dw = matmul_tn(&delta, &cache.inputs[l]);
            let mut db = vec![0.0; layer.output_dim()];
            for r in 0..delta.rows() {
                for (s, v) in db.iter_mut().zip(delta.row(r)) {
                    *s += v;
                }
            }
            let dx = matmul_nn(&delta, &layer.weights);
            grads.push(LayerGrad {
                weights: dw,
                bias: db,
            });
            delta = dx;
        }
        grads.reverse();
        Ok(GradientBundle {
            layers: grads,
            input: delta,
        })
    }
}
