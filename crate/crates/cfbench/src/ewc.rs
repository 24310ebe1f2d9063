//! Elastic weight consolidation: a quadratic penalty anchoring parameters
//! that were important for the first sub-task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::network::{ParamSet, Penalty};

/// Anchor parameters, Fisher importances and the regularization strength.
/// The anchor is the parameter snapshot taken after first-sub-task training
/// and stays immutable during retraining.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EwcState {
    pub anchor: ParamSet,
    pub fisher: FisherDiagonal,
    pub lambda: f64,
}

impl EwcState {
    pub fn new(anchor: ParamSet, fisher: FisherDiagonal, lambda: f64) -> Result<Self> {
        if !anchor.same_shapes(&fisher.values) {
            return Err(Error::config("EWC anchor and Fisher shapes do not match"));
        }
        if lambda < 0.0 {
            return Err(Error::config("EWC lambda must be nonnegative"));
        }
        Ok(EwcState { anchor, fisher, lambda })
    }

    /// `(lambda/2) * sum_i F_i (theta_i - theta*_i)^2` and its gradient.
    pub fn penalty(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        if !params.same_shapes(&self.anchor) {
            return Err(Error::config("EWC penalty: parameter shapes do not match anchor"));
        }
        let mut grads = params.zeros_like();
        let mut value = 0.0;
        for ((g, (p, a)), f) in grads
            .values_mut()
            .zip(params.values().zip(self.anchor.values()))
            .zip(self.fisher.values.values())
        {
            let d = p - a;
            value += f * d * d;
            *g = self.lambda * f * d;
        }
        Ok((0.5 * self.lambda * value, grads))
    }
}

impl Penalty for EwcState {
    fn eval(&self, params: &ParamSet) -> (f64, ParamSet) {
        self.penalty(params).expect("EWC penalty shape mismatch")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerParams;
    use crate::tensor::Tensor;

    fn scalar_set(v: f64) -> ParamSet {
        ParamSet {
            layers: vec![Some(LayerParams {
                w: Tensor::from_vec(&[1, 1], vec![v]),
                b: Tensor::zeros(&[1]),
            })],
        }
    }

    fn state(anchor: f64, fisher_w: f64, fisher_b: f64, lambda: f64) -> EwcState {
        let mut f = scalar_set(fisher_w);
        f.layers[0].as_mut().unwrap().b.data_mut()[0] = fisher_b;
        EwcState::new(
            scalar_set(anchor),
            FisherDiagonal { values: f, sample_count: 1 },
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn penalty_vanishes_at_anchor() {
        let s = state(2.5, 3.0, 1.0, 7.0);
        let (v, g) = s.penalty(&scalar_set(2.5)).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().all(|x| x == 0.0));
    }

    #[test]
    fn closed_form_scalar_case() {
        // F=1, lambda=2, theta - theta* = 3: penalty 9, grad 6.
        let s = state(0.0, 1.0, 0.0, 2.0);
        let (v, g) = s.penalty(&scalar_set(3.0)).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        assert!((g.values().next().unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = state(0.7, 2.3, 0.9, 4.2);
        let theta = 1.9;
        let h = 1e-6;
        let (_, g) = s.penalty(&scalar_set(theta)).unwrap();
        let (vp, _) = s.penalty(&scalar_set(theta + h)).unwrap();
        let (vm, _) = s.penalty(&scalar_set(theta - h)).unwrap();
        let numeric = (vp - vm) / (2.0 * h);
        let analytic = g.values().next().unwrap();
        assert!((analytic - numeric).abs() / numeric.abs() < 1e-6);
    }

    #[test]
    fn penalty_is_monotone_in_distance() {
        let s = state(0.0, 1.5, 0.0, 2.0);
        let mut last = -1.0;
        for d in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let (v, _) = s.penalty(&scalar_set(d)).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn shape_mismatch_is_a_configuration_error() {
        let s = state(0.0, 1.0, 1.0, 1.0);
        let bigger = ParamSet {
            layers: vec![Some(LayerParams {
                w: Tensor::zeros(&[2, 2]),
                b: Tensor::zeros(&[2]),
            })],
        };
        assert!(matches!(s.penalty(&bigger), Err(Error::Config(_))));
    }
}
