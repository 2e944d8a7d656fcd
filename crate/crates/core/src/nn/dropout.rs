use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// Inverted dropout. Returns the output and the per-entry scale that was
/// applied (0 or 1/(1-rate)), which the backward pass multiplies by.
/// Outside training, or at rate 0, the input is returned unchanged with an
/// empty mask.
pub fn dropout<R: Rng + ?Sized>(input: &Matrix, rate: f64, rng: &mut R, training: bool) -> Result<(Matrix, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), Vec::new()));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.as_slice().len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut out = input.clone();
    for (v, m) in out.as_mut_slice().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, mask))
}

pub(crate) fn apply_mask(grad: &mut Matrix, mask: &[f64]) {
    if mask.is_empty() {
        return;
    }
    for (g, m) in grad.as_mut_slice().iter_mut().zip(mask) {
        *g *= m;
    }
}
