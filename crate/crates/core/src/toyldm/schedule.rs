//! Noise schedule and forward noising.

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// A latent feature grid of shape `[h, w, d_z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(Tensor);

impl Latent {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "latent must be 3-D (h, w, channels), got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::Numeric("latent contains non-finite values".into()));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// View as a `[h*w, d_z]` matrix of spatial tokens.
    pub fn as_matrix(&self) -> Tensor {
        let s = self.0.shape();
        self.0.reshaped(&[s[0] * s[1], s[2]]).expect("latent reshape")
    }
}

/// Diffusion timestep coefficients. Timesteps are 1-based (`1..=T`);
/// `alpha_bar(0)` is defined as 1 so the final posterior step is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear beta schedule between the given endpoints.
pub fn make_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 timesteps, got {t_count}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule endpoints must satisfy 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let mut betas = Vec::with_capacity(t_count);
    let mut alpha_bars = Vec::with_capacity(t_count);
    let mut product = 1.0;
    for i in 0..t_count {
        let frac = i as f64 / (t_count - 1) as f64;
        let beta = beta_start + (beta_end - beta_start) * frac;
        product *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(product);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    #[cfg(test)]
    pub(crate) fn from_raw(betas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        Self { betas, alpha_bars }
    }

    /// Timestep count T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Index(format!(
                "timestep {t} out of range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of `(1 - beta)` up to timestep `t`; `t = 0`
    /// returns 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Forward noising: `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise(&self, z0: &Latent, eps: &Latent, t: usize) -> Result<Latent> {
        self.check_t(t)?;
        if z0.tensor().shape() != eps.tensor().shape() {
            return Err(Error::Shape(format!(
                "latent and noise shapes differ: {:?} vs {:?}",
                z0.tensor().shape(),
                eps.tensor().shape()
            )));
        }
        let abar = self.alpha_bar(t);
        let signal = z0.tensor().scale(abar.sqrt());
        let noise = eps.tensor().scale((1.0 - abar).sqrt());
        Ok(Latent(signal.add(&noise)?))
    }
}
