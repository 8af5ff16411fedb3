use super::ParameterSet;
use crate::{Error, Result};

/// A parameter update rule. Implementations clear gradients after stepping.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParameterSet) -> Result<()>;
}

/// Plain SGD with a fixed learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        sgd_step(params, self.lr)
    }
}

/// `p <- p - lr * grad(p)` for every grad-enabled tensor, then zeroes the
/// gradients. Frozen tensors are skipped.
///
/// Fails without touching any value if a grad-enabled tensor has no gradient.
pub fn sgd_step(params: &mut ParameterSet, lr: f64) -> Result<()> {
    if let Some((name, _)) = params
        .iter()
        .find(|(_, t)| t.grad_enabled() && t.grad().is_none())
    {
        return Err(Error::Contract(format!("parameter {name} has no gradient")));
    }
    for (_, t) in params.iter_mut() {
        if !t.grad_enabled() {
            continue;
        }
        let g = t.grad().expect("checked above").to_vec();
        if lr != 0.0 {
            for (p, gv) in t.data_mut().iter_mut().zip(&g) {
                *p -= lr * gv;
            }
        }
        t.zero_grad();
    }
    Ok(())
}
