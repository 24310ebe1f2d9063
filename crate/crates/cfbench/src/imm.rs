//! Incremental moment matching: merging a first-task model and a
//! second-task model by convex combination of weights (mean) or
//! Fisher-weighted combination (mode), plus the phase-2 weight-transfer /
//! L2-transfer initialization options.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::network::{ParamSet, Penalty};

/// Default denominator stabilizer for mode merging; avoids 0/0 where both
/// Fisher entries vanish.
pub const MODE_STABILIZER: f64 = 1e-8;

/// Default L2-transfer regularizer strength.
pub const L2_TRANSFER_STRENGTH: f64 = 0.01;

/// How the phase-2 network is initialized from the phase-1 model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    /// Phase 2 starts at the phase-1 weights.
    WeightTransfer,
    /// Phase 2 starts fresh, with an L2 pull toward the phase-1 weights.
    L2Transfer,
    /// Phase 2 starts fresh with no coupling.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeVariant {
    Mean,
    Mode,
}

impl MergeVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeVariant::Mean => "mean",
            MergeVariant::Mode => "mode",
        }
    }
}

/// Both trained models plus their Fisher diagonals. Fisher slots may be
/// absent when only mean merging is wanted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImmState {
    pub model1: ParamSet,
    pub fisher1: Option<FisherDiagonal>,
    pub model2: ParamSet,
    pub fisher2: Option<FisherDiagonal>,
    pub transfer_mode: TransferMode,
    pub l2_strength: f64,
}

impl ImmState {
    pub fn new(model1: ParamSet, model2: ParamSet, transfer_mode: TransferMode) -> Result<Self> {
        if !model1.same_shapes(&model2) {
            return Err(Error::config("IMM models must share an architecture"));
        }
        let l2_strength = match transfer_mode {
            TransferMode::L2Transfer => L2_TRANSFER_STRENGTH,
            _ => 0.0,
        };
        Ok(ImmState { model1, fisher1: None, model2, fisher2: None, transfer_mode, l2_strength })
    }

    pub fn with_fishers(mut self, f1: FisherDiagonal, f2: FisherDiagonal) -> Result<Self> {
        if !f1.values.same_shapes(&self.model1) || !f2.values.same_shapes(&self.model2) {
            return Err(Error::config("Fisher shapes do not match IMM models"));
        }
        self.fisher1 = Some(f1);
        self.fisher2 = Some(f2);
        Ok(self)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("IMM alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `theta = (1-alpha) * theta1 + alpha * theta2`.
pub fn imm_mean_merge(state: &ImmState, alpha: f64) -> Result<ParamSet> {
    check_alpha(alpha)?;
    Ok(state
        .model1
        .zip_map(&state.model2, |t1, t2| (1.0 - alpha) * t1 + alpha * t2))
}

/// `theta_i = ((1-a) F1_i t1_i + a F2_i t2_i) / ((1-a) F1_i + a F2_i + eps)`.
pub fn imm_mode_merge(state: &ImmState, alpha: f64, stabilizer: f64) -> Result<ParamSet> {
    check_alpha(alpha)?;
    let (f1, f2) = match (&state.fisher1, &state.fisher2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::config("mode-IMM requires Fisher diagonals for both models")),
    };
    let mut merged = state.model1.zeros_like();
    for ((((m, t1), t2), w1), w2) in merged
        .values_mut()
        .zip(state.model1.values())
        .zip(state.model2.values())
        .zip(f1.values.values())
        .zip(f2.values.values())
    {
        let a1 = (1.0 - alpha) * w1;
        let a2 = alpha * w2;
        *m = (a1 * t1 + a2 * t2) / (a1 + a2 + stabilizer);
    }
    Ok(merged)
}

/// L2 pull toward the phase-1 weights: `strength * ||theta - theta1||^2`.
#[derive(Clone, Debug)]
pub struct L2TransferPenalty {
    pub anchor: ParamSet,
    pub strength: f64,
}

impl Penalty for L2TransferPenalty {
    fn eval(&self, params: &ParamSet) -> (f64, ParamSet) {
        let mut grads = params.zeros_like();
        let mut value = 0.0;
        for (g, (p, a)) in grads.values_mut().zip(params.values().zip(self.anchor.values())) {
            let d = p - a;
            value += d * d;
            *g = 2.0 * self.strength * d;
        }
        (self.strength * value, grads)
    }
}

/// Initial parameters for phase-2 training plus the training-time penalty
/// the mode implies. `fresh` supplies a newly initialized parameter set for
/// the re-initializing modes.
pub fn transfer_init(
    model1: &ParamSet,
    mode: TransferMode,
    fresh: impl FnOnce() -> ParamSet,
) -> (ParamSet, Option<L2TransferPenalty>) {
    match mode {
        TransferMode::WeightTransfer => (model1.clone(), None),
        TransferMode::L2Transfer => (
            fresh(),
            Some(L2TransferPenalty { anchor: model1.clone(), strength: L2_TRANSFER_STRENGTH }),
        ),
        TransferMode::Random => (fresh(), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerParams;
    use crate::tensor::Tensor;

    fn set(values: &[f64]) -> ParamSet {
        ParamSet {
            layers: vec![Some(LayerParams {
                w: Tensor::from_vec(&[values.len(), 1], values.to_vec()),
                b: Tensor::zeros(&[values.len()]),
            })],
        }
    }

    fn fisher(values: &[f64]) -> FisherDiagonal {
        let mut f = set(values);
        for b in f.layers[0].as_mut().unwrap().b.data_mut() {
            *b = 1.0;
        }
        FisherDiagonal { values: f, sample_count: 1 }
    }

    fn state(t1: &[f64], t2: &[f64]) -> ImmState {
        ImmState::new(set(t1), set(t2), TransferMode::WeightTransfer).unwrap()
    }

    #[test]
    fn mean_endpoints_return_the_models() {
        let s = state(&[2.0, -1.0], &[6.0, 3.0]);
        assert_eq!(imm_mean_merge(&s, 0.0).unwrap(), s.model1);
        assert_eq!(imm_mean_merge(&s, 1.0).unwrap(), s.model2);
    }

    #[test]
    fn mean_convex_combination() {
        let s = state(&[2.0], &[6.0]);
        let m = imm_mean_merge(&s, 0.25).unwrap();
        assert_eq!(m.values().next().unwrap(), 3.0);
    }

    #[test]
    fn mean_stays_within_envelope() {
        let s = state(&[2.0, 5.0, -3.0], &[6.0, 1.0, -1.0]);
        for k in 0..=20 {
            let alpha = k as f64 / 20.0;
            let m = imm_mean_merge(&s, alpha).unwrap();
            for ((v, t1), t2) in m.values().zip(s.model1.values()).zip(s.model2.values()) {
                assert!(v >= t1.min(t2) - 1e-12 && v <= t1.max(t2) + 1e-12);
            }
        }
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let s = state(&[1.0], &[2.0]);
        assert!(imm_mean_merge(&s, -0.1).is_err());
        assert!(imm_mean_merge(&s, 1.1).is_err());
    }

    #[test]
    fn mode_requires_fishers() {
        let s = state(&[1.0], &[2.0]);
        assert!(matches!(imm_mode_merge(&s, 0.5, MODE_STABILIZER), Err(Error::Config(_))));
    }

    #[test]
    fn mode_scalar_hand_evaluation() {
        // t1=1, t2=3, F1=1, F2=3, alpha=0.5, stabilizer -> 0: (0.5+4.5)/2 = 2.5
        let s = state(&[1.0], &[3.0])
            .with_fishers(fisher(&[1.0]), fisher(&[3.0]))
            .unwrap();
        let m = imm_mode_merge(&s, 0.5, 0.0).unwrap();
        assert!((m.values().next().unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn mode_with_equal_fishers_reduces_to_mean() {
        // No coordinate of the convex combination crosses zero on the grid,
        // so the relative comparison stays well-conditioned.
        let s = state(&[2.0, -1.5, 0.25], &[4.0, -2.5, 0.75])
            .with_fishers(fisher(&[100.0, 100.0, 100.0]), fisher(&[100.0, 100.0, 100.0]))
            .unwrap();
        for k in 0..=10 {
            let alpha = k as f64 / 10.0;
            let mode = imm_mode_merge(&s, alpha, MODE_STABILIZER).unwrap();
            let mean = imm_mean_merge(&s, alpha).unwrap();
            for (a, b) in mode.values().zip(mean.values()) {
                let rel = (a - b).abs() / b.abs().max(1e-12);
                assert!(rel < 1e-9, "alpha {alpha}: mode {a} vs mean {b}");
            }
        }
    }

    #[test]
    fn mode_with_vanishing_second_fisher_returns_model1() {
        let s = state(&[1.5, -2.0], &[9.0, 9.0])
            .with_fishers(fisher(&[2.0, 2.0]), fisher(&[0.0, 0.0]))
            .unwrap();
        let m = imm_mode_merge(&s, 0.5, MODE_STABILIZER).unwrap();
        for (v, t1) in m.values().zip(s.model1.values()) {
            assert!((v - t1).abs() < 1e-7);
        }
    }

    #[test]
    fn self_merge_returns_the_model() {
        let t = [0.3, -4.0, 2.25];
        let s = state(&t, &t)
            .with_fishers(fisher(&[0.9, 0.02, 3.0]), fisher(&[0.9, 0.02, 3.0]))
            .unwrap();
        for k in 0..=10 {
            let alpha = k as f64 / 10.0;
            let mean = imm_mean_merge(&s, alpha).unwrap();
            assert!(mean.max_abs_diff(&s.model1) < 1e-12);
            let mode = imm_mode_merge(&s, alpha, 0.0).unwrap();
            assert!(mode.max_abs_diff(&s.model1) < 1e-12);
        }
    }

    #[test]
    fn mismatched_architectures_are_rejected() {
        assert!(ImmState::new(set(&[1.0]), set(&[1.0, 2.0]), TransferMode::WeightTransfer).is_err());
    }

    #[test]
    fn weight_transfer_is_bitwise() {
        let m1 = set(&[1.0, 2.0]);
        let (init, pen) = transfer_init(&m1, TransferMode::WeightTransfer, || set(&[9.0, 9.0]));
        assert_eq!(init, m1);
        assert!(pen.is_none());
    }

    #[test]
    fn l2_transfer_penalty_vanishes_at_anchor_and_matches_fd() {
        let m1 = set(&[1.0, -2.0]);
        let (_, pen) = transfer_init(&m1, TransferMode::L2Transfer, || set(&[0.1, 0.1]));
        let pen = pen.unwrap();
        let (v0, _) = pen.eval(&m1);
        assert_eq!(v0, 0.0);

        let theta = set(&[1.7, -0.4]);
        let (_, g) = pen.eval(&theta);
        let h = 1e-6;
        let mut plus = theta.clone();
        *plus.values_mut().next().unwrap() += h;
        let mut minus = theta.clone();
        *minus.values_mut().next().unwrap() -= h;
        let numeric = (pen.eval(&plus).0 - pen.eval(&minus).0) / (2.0 * h);
        let analytic = g.values().next().unwrap();
        assert!((analytic - numeric).abs() / numeric.abs() < 1e-6);
    }

    #[test]
    fn random_transfer_uses_fresh_params() {
        let m1 = set(&[1.0, 2.0]);
        let (init, pen) = transfer_init(&m1, TransferMode::Random, || set(&[9.0, 8.0]));
        assert_eq!(init, set(&[9.0, 8.0]));
        assert!(pen.is_none());
    }
}
