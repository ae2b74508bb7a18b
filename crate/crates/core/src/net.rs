//! The energy network: an ELU multilayer perceptron whose last hidden vector
//! `h` feeds a quadratic output layer
//!
//! ```text
//! E = (a·h + b1)(c·h + b2) + Σ d_i h_i² + b3
//! ```
//!
//! The quadratic head lets the energy grow quadratically with distance from
//! the data, which is the shape the denoising objective asks for.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::energy::{check_batch, EnergyFn};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Widths of the hidden ELU layers. An empty list feeds the input
    /// straight into the quadratic head.
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl NetConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, seed: u64) -> Self {
        NetConfig {
            input_dim,
            hidden_dims,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config(format!(
                "hidden widths must be at least 1, got {:?}",
                self.hidden_dims
            )));
        }
        Ok(())
    }

    /// Width of the vector seen by the head.
    pub fn head_width(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    /// Parameter names and shapes in storage order.
    pub fn param_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &w) in self.hidden_dims.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), vec![fan_in, w]));
            out.push((format!("trunk.{i}.bias"), vec![w]));
            fan_in = w;
        }
        let w = self.head_width();
        for name in ["a", "c", "d"] {
            out.push((format!("head.{name}"), vec![w]));
        }
        for name in ["b1", "b2", "b3"] {
            out.push((format!("head.{name}"), vec![1]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNet {
    config: NetConfig,
    params: Vec<Tensor>,
}

impl EnergyNet {
    /// Trunk weights ~ N(0, 2/fan_in), head vectors ~ N(0, 1/width), all
    /// biases zero. Deterministic in `config.seed`.
    pub fn init(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let head_std = (1.0 / config.head_width() as f64).sqrt();
        let params = config
            .param_manifest()
            .into_iter()
            .map(|(name, shape)| {
                let std = if name.ends_with(".weight") {
                    (2.0 / shape[0] as f64).sqrt()
                } else if matches!(name.as_str(), "head.a" | "head.c" | "head.d") {
                    head_std
                } else {
                    return Tensor::zeros(shape);
                };
                Tensor::randn(shape, &mut rng).map(|v| v * std)
            })
            .collect();
        Ok(EnergyNet { config, params })
    }

    /// Rebuilds a network from stored parameters, checking them against the
    /// manifest implied by `config`.
    pub fn from_params(config: NetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let manifest = config.param_manifest();
        if manifest.len() != params.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameter tensors, got {}",
                manifest.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in manifest.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(EnergyNet { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// All parameters concatenated in manifest order.
    pub fn flat_params(&self) -> Tensor {
        let data: Vec<f64> = self.params.iter().flat_map(|p| p.data().iter().copied()).collect();
        Tensor::from_parts(vec![data.len()], data)
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.config
            .param_manifest()
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.index_of(name)?])
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.index_of(name)?;
        if value.shape() != self.params[i].shape() {
            return Err(Error::dim(
                "set_param",
                format!("{name}: {:?} vs {:?}", value.shape(), self.params[i].shape()),
            ));
        }
        self.params[i] = value;
        Ok(())
    }

    /// Records the parameters on `tape`, as differentiable leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundNet {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.var(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundNet {
            config: self.config.clone(),
            params,
            energy_scale: 1.0,
        }
    }
}

/// An [`EnergyNet`] whose parameters are recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundNet {
    config: NetConfig,
    params: Vec<Var>,
    energy_scale: f64,
}

impl BoundNet {
    /// Splits one flat parameter vector, laid out in manifest order, into the
    /// network's tensors. Gradients with respect to `flat` then cover every
    /// parameter at once.
    pub fn from_flat(config: NetConfig, flat: &Var) -> Result<Self> {
        config.validate()?;
        let total = config.param_count();
        if flat.value().numel() != total {
            return Err(Error::dim(
                "from_flat",
                format!("{} values for {total} parameters", flat.value().numel()),
            ));
        }
        let row = flat.reshape([1, total])?;
        let mut offset = 0;
        let mut params = Vec::new();
        for (_, shape) in config.param_manifest() {
            let n: usize = shape.iter().product();
            params.push(row.slice_cols(offset, offset + n)?.reshape(shape)?);
            offset += n;
        }
        Ok(BoundNet {
            config,
            params,
            energy_scale: 1.0,
        })
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Multiplies the output energy by `factor`.
    pub fn with_energy_scale(mut self, factor: f64) -> Self {
        self.energy_scale = factor;
        self
    }

    /// Energies of the rows of `x` (`[batch, input_dim]` -> `[batch]`).
    pub fn energy(&self, x: &Var) -> Result<Var> {
        let batch = check_batch(&x.value(), self.config.input_dim, "energy")?;
        let layers = self.config.hidden_dims.len();
        let mut h = x.clone();
        for l in 0..layers {
            h = h.matmul(&self.params[2 * l])?.add(&self.params[2 * l + 1])?.elu()?;
        }
        let w = self.config.head_width();
        let head = &self.params[2 * layers..];
        let column = |v: &Var| v.reshape([w, 1]);
        let left = h.matmul(&column(&head[0])?)?.add(&head[3])?;
        let right = h.matmul(&column(&head[1])?)?.add(&head[4])?;
        let quad = h.square()?.matmul(&column(&head[2])?)?;
        let e = left.mul(&right)?.add(&quad)?.add(&head[5])?.reshape([batch])?;
        if self.energy_scale == 1.0 {
            Ok(e)
        } else {
            e.scale(self.energy_scale)
        }
    }

    /// `∇ₓE` for every row, recorded so that it can be differentiated with
    /// respect to the parameters.
    pub fn energy_grad(&self, x: &Var) -> Result<Var> {
        let total = self.energy(x)?.sum()?;
        Ok(x.tape().grad(&total, &[x])?.remove(0))
    }
}

impl EnergyFn for EnergyNet {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn energy(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let e = bound.energy(&tape.constant(x.clone()))?;
        let v = e.value();
        Ok(v.as_ref().clone())
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.var(x.clone());
        let e = bound.energy(&xv)?;
        let g = tape.grad_values(&e.sum()?, &[&xv])?.remove(0);
        let e = e.value().as_ref().clone();
        Ok((e, g))
    }
}
