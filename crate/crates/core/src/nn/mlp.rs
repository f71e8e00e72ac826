use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::sigmoid;
use crate::nn::tape::{Tape, Var};
use crate::nn::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    None,
    Sigmoid,
}

/// Shape of a fully connected network: `layer_dims[0]` is the input width and
/// every following entry is the output width of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_bias() -> bool {
    true
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, output_activation: OutputActivation) -> Result<Self> {
        let spec = Self {
            layer_dims,
            hidden_activation: Activation::Relu,
            output_activation,
            bias: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One affine layer, no activation.
    pub fn linear(input: usize, output: usize) -> Self {
        Self {
            layer_dims: vec![input, output],
            hidden_activation: Activation::Relu,
            output_activation: OutputActivation::None,
            bias: true,
        }
    }

    /// One linear map without a bias term.
    pub fn projection(input: usize, output: usize) -> Self {
        Self {
            bias: false,
            ..Self::linear(input, output)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::config("MLP layer widths must be positive"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in x out`
    pub weight: Tensor2,
    /// `1 x out`, absent for bias-free layers.
    pub bias: Option<Tensor2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..a))
                    .collect();
                Layer {
                    weight: Tensor2::new(fan_in, fan_out, data).expect("shape"),
                    bias: spec.bias.then(|| Tensor2::zeros(1, fan_out)),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor2::zeros(w[0], w[1]),
                bias: spec.bias.then(|| Tensor2::zeros(1, w[1])),
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Single linear layer with identity weight and zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            spec: MlpSpec::linear(dim, dim),
            layers: vec![Layer {
                weight: Tensor2::identity(dim),
                bias: Some(Tensor2::zeros(1, dim)),
            }],
        }
    }

    /// Zeroes the weights and bias of the final layer.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data_mut().fill(0.0);
            if let Some(b) = &mut last.bias {
                b.data_mut().fill(0.0);
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// `(name suffix, tensor)` pairs in persistence order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{i}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{i}.bias"), b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    /// Forward pass without recording.
    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?;
            if let Some(bias) = &l.bias {
                for r in 0..h.rows() {
                    for (o, b) in h.row_mut(r).iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
            }
            h = self.activate(h, i == last);
        }
        Ok(h)
    }

    fn activate(&self, h: Tensor2, is_last: bool) -> Tensor2 {
        if is_last {
            match self.spec.output_activation {
                OutputActivation::None => h,
                OutputActivation::Sigmoid => h.map(sigmoid),
            }
        } else {
            match self.spec.hidden_activation {
                Activation::Relu => h.map(|v| v.max(0.0)),
                Activation::None => h,
            }
        }
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "MLP expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Registers every weight and bias as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.param(l.weight.clone()),
                    l.bias.clone().map(|b| tape.param(b)),
                )
            })
            .collect();
        MlpVars {
            spec: self.spec.clone(),
            layers,
        }
    }
}

/// Tape handles for the parameters of one [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    spec: MlpSpec,
    layers: Vec<(Var, Option<Var>)>,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.spec.input_dim() {
            return Err(Error::invalid(format!(
                "MLP expects {} input columns, got {}",
                self.spec.input_dim(),
                tape.value(x).cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            if let Some(b) = b {
                h = tape.add_row(h, b)?;
            }
            h = if i == last {
                match self.spec.output_activation {
                    OutputActivation::None => h,
                    OutputActivation::Sigmoid => tape.sigmoid(h),
                }
            } else {
                match self.spec.hidden_activation {
                    Activation::Relu => tape.relu(h),
                    Activation::None => h,
                }
            };
        }
        Ok(h)
    }

    /// Leaf handles in the same order as [`MlpParams::named_tensors`].
    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers
            .iter()
            .flat_map(|&(w, b)| std::iter::once(w).chain(b))
    }
}
