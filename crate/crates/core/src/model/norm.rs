use crate::error::Result;
use crate::tensor::{Real, Tensor, Var};

use super::{ParamId, ParameterRegistry, Session};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Gain and shift of a layer normalization, initialised to 1 and 0.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl NormParams {
    pub fn register<R: Real>(reg: &mut ParameterRegistry<R>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: reg.add(format!("{prefix}.gain"), Tensor::full(&[d], R::one())?)?,
            shift: reg.add(format!("{prefix}.shift"), Tensor::zeros(&[d])?)?,
        })
    }

    pub fn apply<R: Real>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.shift));
        s.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Applies the norm when present.
pub fn maybe_norm<R: Real>(norm: Option<&NormParams>, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
    match norm {
        Some(n) => n.apply(s, x),
        None => Ok(x),
    }
}
