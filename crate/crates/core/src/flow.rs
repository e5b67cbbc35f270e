//! Conditional flow matching on the optimal-transport path, guidance
//! combination and the fixed-step midpoint integrator.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Noise floor of the probability path at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathConfig {
    pub sigma_min: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { sigma_min: 0.1 }
    }
}

impl PathConfig {
    pub fn new(sigma_min: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&sigma_min) {
            return Err(Error::InvalidArgument(format!(
                "sigma_min {sigma_min} outside [0, 1)"
            )));
        }
        Ok(Self { sigma_min })
    }

    pub fn sigma(&self, t: f64) -> f64 {
        1.0 - (1.0 - self.sigma_min) * t
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    Ok(())
}

/// `t * x_h + (1 - (1 - sigma_min) t) * x_0`.
pub fn sample_path(x_h: &Tensor, x_0: &Tensor, t: f64, cfg: &PathConfig) -> Result<Tensor> {
    same_shape(x_h, x_0)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    Ok(((x_h * t)? + (x_0 * cfg.sigma(t))?)?)
}

/// Per-item path for a batch: `t` holds one time per leading-axis item.
pub fn sample_path_batched(
    x_h: &Tensor,
    x_0: &Tensor,
    t: &Tensor,
    cfg: &PathConfig,
) -> Result<Tensor> {
    same_shape(x_h, x_0)?;
    let mut shape = vec![x_h.dim(0)?];
    shape.extend(std::iter::repeat_n(1, x_h.rank() - 1));
    let t = t.to_dtype(x_h.dtype())?.reshape(shape)?;
    let sigma = ((&t * -(1.0 - cfg.sigma_min))? + 1.0)?;
    Ok((x_h.broadcast_mul(&t)? + x_0.broadcast_mul(&sigma)?)?)
}

/// Time derivative of the path: `x_h - (1 - sigma_min) x_0`.
pub fn target_field(x_h: &Tensor, x_0: &Tensor, cfg: &PathConfig) -> Result<Tensor> {
    same_shape(x_h, x_0)?;
    Ok((x_h - (x_0 * (1.0 - cfg.sigma_min))?)?)
}

/// Mean squared error over every element.
pub fn cfm_loss(v_pred: &Tensor, u_target: &Tensor) -> Result<Tensor> {
    same_shape(v_pred, u_target)?;
    Ok((v_pred - u_target)?.sqr()?.mean_all()?)
}

/// `v_uncond + omega * (v_cond - v_uncond)`.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, omega: f64) -> Result<Tensor> {
    same_shape(v_cond, v_uncond)?;
    if omega == 1.0 {
        return Ok(v_cond.clone());
    }
    Ok((v_uncond + ((v_cond - v_uncond)? * omega)?)?)
}

pub(crate) fn check_finite(x: &Tensor) -> Result<bool> {
    let s = x
        .to_dtype(DType::F64)?
        .sqr()?
        .sum_all()?
        .to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// Integrates `dx/dt = field(t, x)` from `t = 0` to `t = 1` with `steps`
/// uniform explicit-midpoint steps.
pub fn midpoint_solve<F>(mut field: F, x_0: &Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "solver needs at least one step".into(),
        ));
    }
    let h = 1.0 / steps as f64;
    let mut x = x_0.clone();
    for step in 0..steps {
        let t = step as f64 * h;
        let k1 = field(t, &x)?;
        if !check_finite(&k1)? {
            return Err(Error::SolverDiverged { step });
        }
        let mid = (&x + (k1 * (h / 2.0))?)?;
        let k2 = field(t + h / 2.0, &mid)?;
        if !check_finite(&k2)? {
            return Err(Error::SolverDiverged { step });
        }
        x = (x + (k2 * h)?)?;
    }
    Ok(x)
}
