//! Fully connected networks on the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::matrix::Matrix;
use crate::diffcore::params::{Layout, ParamBlock, ParameterVector};
use crate::diffcore::tape::{Tape, Var};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Shape of a multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub weight_normalized: bool,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_sizes: &[usize],
        output_dim: usize,
        activation: Activation,
        weight_normalized: bool,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_sizes: hidden_sizes.to_vec(),
            output_dim,
            activation,
            weight_normalized,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_sizes.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            if self.weight_normalized {
                blocks.push(ParamBlock::new(format!("layer{i}.direction"), &[fan_out, fan_in]));
                blocks.push(ParamBlock::new(format!("layer{i}.scale"), &[fan_out]));
            } else {
                blocks.push(ParamBlock::new(format!("layer{i}.weight"), &[fan_out, fan_in]));
            }
            blocks.push(ParamBlock::new(format!("layer{i}.bias"), &[fan_out]));
        }
        blocks
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.param_blocks()).expect("generated block names are unique")
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(ParamBlock::numel).sum()
    }

    /// Checks that `layout` carries this network's blocks with matching shapes.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        for b in self.param_blocks() {
            match layout.locate(&b.name) {
                Some((_, found)) if found.shape == b.shape => {}
                Some((_, found)) => {
                    return Err(Error::Config(format!(
                        "block `{}` has shape {:?}, network expects {:?}",
                        b.name, found.shape, b.shape
                    )))
                }
                None => return Err(Error::Config(format!("parameters lack block `{}`", b.name))),
            }
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases. Weight-norm scales start at the
    /// direction norms so the initial weights equal the directions.
    pub fn init_values<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            if self.weight_normalized {
                let scales: Vec<f64> = w
                    .chunks_exact(fan_in)
                    .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect();
                values.extend_from_slice(&w);
                values.extend_from_slice(&scales);
            } else {
                values.extend_from_slice(&w);
            }
            values.extend(std::iter::repeat(0.0).take(fan_out));
        }
        values
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector {
        let layout = std::sync::Arc::new(self.layout());
        ParameterVector::new(layout, self.init_values(rng)).expect("init matches layout")
    }
}

/// Records the network on `tape` for a batch `input` (one sample per row).
pub fn mlp_tape(tape: &mut Tape<'_>, spec: &MlpSpec, input: Var) -> Result<Var> {
    check_dim("network input", spec.input_dim, tape.value(input).cols())?;
    let n_layers = spec.hidden_sizes.len() + 1;
    let mut h = input;
    for i in 0..n_layers {
        let w = if spec.weight_normalized {
            let v = tape.param_block(&format!("layer{i}.direction"))?;
            let g = tape.param_block(&format!("layer{i}.scale"))?;
            tape.weight_norm(v, g)?
        } else {
            tape.param_block(&format!("layer{i}.weight"))?
        };
        let b = tape.param_block(&format!("layer{i}.bias"))?;
        let z = tape.matmul_t(h, w)?;
        let z = tape.add_row(z, b)?;
        h = if i + 1 == n_layers {
            z
        } else {
            match spec.activation {
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
            }
        };
    }
    Ok(h)
}

/// Batched forward pass, one sample per row.
pub fn mlp_forward_batch(spec: &MlpSpec, params: &ParameterVector, input: &Matrix) -> Result<Matrix> {
    spec.check_layout(params.layout())?;
    let mut tape = Tape::for_params(params);
    let x = tape.constant(input.clone());
    let y = mlp_tape(&mut tape, spec, x)?;
    Ok(tape.value(y).clone())
}

/// Forward pass for a single input vector.
pub fn mlp_forward(spec: &MlpSpec, params: &ParameterVector, input: &[f64]) -> Result<Vec<f64>> {
    check_dim("network input", spec.input_dim, input.len())?;
    Ok(mlp_forward_batch(spec, params, &Matrix::row_vector(input))?.into_vec())
}
