//! Parameter tensors, gradient buffers and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Ordered collection of tensors; the model defines what each slot means.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Flat view used by gradient checks: (tensor, offset) for a global index.
    pub fn locate(&self, mut index: usize) -> (usize, usize) {
        for (t, tensor) in self.tensors.iter().enumerate() {
            if index < tensor.data.len() {
                return (t, index);
            }
            index -= tensor.data.len();
        }
        panic!("parameter index out of range");
    }
}

/// Gradient accumulator with the same layout as [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Params);

impl Gradients {
    pub fn for_params(params: &Params) -> Self {
        Gradients(params.zeros_like())
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.0.tensors[id]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.tensors.iter_mut().zip(&other.0.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn get(&self, index: usize) -> f64 {
        let (t, o) = self.0.locate(index);
        self.0.tensors[t].data[o]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Params,
    v: Params,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params, grads: &Gradients) {
        let c = self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = grads.norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.0.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
    }
}
