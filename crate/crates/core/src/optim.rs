//! Plain stochastic gradient descent.

use crate::error::{Error, Result};
use crate::nets::ParamVector;

/// `w ← w − lr·(g + weight_decay·w)` for every parameter, no momentum.
pub fn sgd_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !params.same_template(grads) {
        return Err(Error::Dimension(format!(
            "sgd_step: gradients {:?} do not match parameters {:?}",
            grads.iter().map(|(n, t)| (n, t.shape())).collect::<Vec<_>>(),
            params.iter().map(|(n, t)| (n, t.shape())).collect::<Vec<_>>(),
        )));
    }
    if lr < 0.0 || weight_decay < 0.0 {
        return Err(Error::Contract(format!(
            "sgd_step: lr {lr} and weight_decay {weight_decay} must be non-negative"
        )));
    }
    for ((_, w), (_, g)) in params.iter_mut().zip(grads.iter()) {
        for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
            *wv -= lr * (gv + weight_decay * *wv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: &[f64]) -> ParamVector {
        let mut p = ParamVector::new();
        p.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = single(&[1.0, -2.0]);
        sgd_step(&mut p, &single(&[5.0, 5.0]), 0.0, 0.3).unwrap();
        assert_eq!(p, single(&[1.0, -2.0]));
    }

    #[test]
    fn decay_only() {
        let mut p = single(&[2.0, -4.0]);
        sgd_step(&mut p, &single(&[0.0, 0.0]), 0.1, 0.5).unwrap();
        assert_eq!(p.flatten(), vec![2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn quadratic_closed_form() {
        // f(w) = ½(w−3)², gradient w−3 at w=0.
        let mut p = single(&[0.0]);
        sgd_step(&mut p, &single(&[-3.0]), 0.1, 0.0).unwrap();
        assert!((p.flatten()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = single(&[0.0]);
        assert!(matches!(
            sgd_step(&mut p, &single(&[0.0, 1.0]), 0.1, 0.0),
            Err(Error::Dimension(_))
        ));
    }
}
