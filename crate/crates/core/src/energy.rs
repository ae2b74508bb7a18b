//! The [`EnergyFn`] abstraction shared by samplers, estimators and analysis
//! code, plus a few closed-form energies used as references.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar energy `E(x)` evaluated row-wise on a `[batch, dim]` tensor.
pub trait EnergyFn {
    fn input_dim(&self) -> usize;

    /// Energies, shape `[batch]`.
    fn energy(&self, x: &Tensor) -> Result<Tensor>;

    /// Row-wise input gradients, shape `[batch, dim]`.
    fn energy_grad(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.energy_and_grad(x)?.1)
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl<E: EnergyFn + ?Sized> EnergyFn for &E {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn energy(&self, x: &Tensor) -> Result<Tensor> {
        (**self).energy(x)
    }
    fn energy_grad(&self, x: &Tensor) -> Result<Tensor> {
        (**self).energy_grad(x)
    }
    fn energy_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        (**self).energy_and_grad(x)
    }
}

pub(crate) fn check_batch(x: &Tensor, dim: usize, op: &'static str) -> Result<usize> {
    match x.shape() {
        [b, d] if *d == dim => Ok(*b),
        s => Err(Error::dim(op, format!("expected [batch, {dim}], got {s:?}"))),
    }
}

/// `E(x) = |x - mean|^2 / (2 variance)`: the negative log density (up to a
/// constant) of an isotropic Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticEnergy {
    mean: Vec<f64>,
    variance: f64,
}

impl QuadraticEnergy {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || mean.is_empty() {
            return Err(Error::config(format!(
                "quadratic energy needs a non-empty mean and positive variance, got {variance}"
            )));
        }
        Ok(QuadraticEnergy { mean, variance })
    }

    /// Centered at the origin.
    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], variance)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// `log ∫ exp(-E)`.
    pub fn log_partition(&self) -> f64 {
        0.5 * self.mean.len() as f64 * (2.0 * std::f64::consts::PI * self.variance).ln()
    }
}

impl EnergyFn for QuadraticEnergy {
    fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn energy(&self, x: &Tensor) -> Result<Tensor> {
        check_batch(x, self.mean.len(), "quadratic_energy")?;
        let e = x
            .row_iter()
            .map(|row| {
                let sq: f64 = row.iter().zip(&self.mean).map(|(v, m)| (v - m) * (v - m)).sum();
                sq / (2.0 * self.variance)
            })
            .collect();
        Tensor::vector(e)
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = check_batch(x, self.mean.len(), "quadratic_energy")?;
        let d = self.mean.len();
        let mut grad = Vec::with_capacity(b * d);
        for row in x.row_iter() {
            grad.extend(row.iter().zip(&self.mean).map(|(v, m)| (v - m) / self.variance));
        }
        Ok((self.energy(x)?, Tensor::new([b, d], grad)?))
    }
}

/// The same energy everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantEnergy {
    pub dim: usize,
    pub value: f64,
}

impl EnergyFn for ConstantEnergy {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &Tensor) -> Result<Tensor> {
        let b = check_batch(x, self.dim, "constant_energy")?;
        Ok(Tensor::full([b], self.value))
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = check_batch(x, self.dim, "constant_energy")?;
        Ok((Tensor::full([b], self.value), Tensor::zeros([b, self.dim])))
    }
}

/// `factor * E(x)`. With `factor = 1/α²` this is the temperature-rescaled
/// energy under which Langevin trajectories and the denoising objective are
/// unchanged.
#[derive(Clone, Debug)]
pub struct ScaledEnergy<E> {
    pub inner: E,
    pub factor: f64,
}

impl<E: EnergyFn> EnergyFn for ScaledEnergy<E> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn energy(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.energy(x)?.scale(self.factor)
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (e, g) = self.inner.energy_and_grad(x)?;
        Ok((e.scale(self.factor)?, g.scale(self.factor)?))
    }
}
