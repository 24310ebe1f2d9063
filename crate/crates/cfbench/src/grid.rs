//! Model zoo presets and the hyper-parameter grid.
//!
//! Phase-1 points are the Cartesian product of hidden-layer count, layer
//! width and the first-task learning rate; the retraining rate is swept
//! separately in phase 2. Convolutional kinds have a fixed topology and vary
//! only the learning rate.

use serde::{Deserialize, Serialize};

use crate::imm::TransferMode;
use crate::layers::LayerSpec;

pub const INPUT_DROP_RATE: f64 = 0.2;
pub const HIDDEN_DROP_RATE: f64 = 0.5;
pub const CONV_DROP_RATE: f64 = 0.5;
pub const LWTA_BLOCK_SIZE: usize = 2;
pub const MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "D-FC")]
    DFc,
    #[serde(rename = "CONV")]
    Conv,
    #[serde(rename = "D-CONV")]
    DConv,
    #[serde(rename = "LWTA")]
    Lwta,
    #[serde(rename = "EWC")]
    Ewc,
    #[serde(rename = "IMM")]
    Imm,
}

pub const ALL_MODEL_KINDS: [ModelKind; 7] = [
    ModelKind::Fc,
    ModelKind::DFc,
    ModelKind::Conv,
    ModelKind::DConv,
    ModelKind::Lwta,
    ModelKind::Ewc,
    ModelKind::Imm,
];

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Fc => "FC",
            ModelKind::DFc => "D-FC",
            ModelKind::Conv => "CONV",
            ModelKind::DConv => "D-CONV",
            ModelKind::Lwta => "LWTA",
            ModelKind::Ewc => "EWC",
            ModelKind::Imm => "IMM",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        ALL_MODEL_KINDS.iter().copied().find(|k| k.as_str() == s)
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, ModelKind::Conv | ModelKind::DConv)
    }

    /// IMM trains with plain SGD; everything else uses momentum 0.99.
    pub fn momentum(&self) -> f64 {
        match self {
            ModelKind::Imm => 0.0,
            _ => MOMENTUM,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One phase-1 grid point plus the fixed training constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub model: ModelKind,
    /// Hidden-layer count L (fixed topology for conv kinds).
    pub hidden_layers: usize,
    /// Hidden-layer width S; absent for conv kinds.
    pub width: Option<usize>,
    pub eps1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl HyperParams {
    /// The layer chain this point instantiates.
    pub fn layer_chain(&self) -> Vec<LayerSpec> {
        let mut l = Vec::new();
        match self.model {
            ModelKind::Fc | ModelKind::Ewc | ModelKind::Imm => {
                for _ in 0..self.hidden_layers {
                    l.push(LayerSpec::Dense { width: self.width.unwrap() });
                    l.push(LayerSpec::Relu);
                }
            }
            ModelKind::DFc => {
                l.push(LayerSpec::Dropout { rate: INPUT_DROP_RATE });
                for _ in 0..self.hidden_layers {
                    l.push(LayerSpec::Dense { width: self.width.unwrap() });
                    l.push(LayerSpec::Relu);
                    l.push(LayerSpec::Dropout { rate: HIDDEN_DROP_RATE });
                }
            }
            ModelKind::Lwta => {
                for _ in 0..self.hidden_layers {
                    l.push(LayerSpec::Dense { width: self.width.unwrap() });
                    l.push(LayerSpec::Lwta { block_size: LWTA_BLOCK_SIZE });
                }
            }
            ModelKind::Conv => {
                l.extend(conv_stack(false));
            }
            ModelKind::DConv => {
                l.extend(conv_stack(true));
            }
        }
        l.push(LayerSpec::Dense { width: 10 });
        l.push(LayerSpec::SoftmaxReadout);
        l
    }
}

/// Two 5x5 conv blocks (32 then 64 filters) with 2x2 max-pooling, then a
/// 1024-unit head.
fn conv_stack(dropout: bool) -> Vec<LayerSpec> {
    let mut l = Vec::new();
    if dropout {
        l.push(LayerSpec::Dropout { rate: CONV_DROP_RATE });
    }
    for filters in [32usize, 64] {
        l.push(LayerSpec::Conv2d { filters, filter_size: 5 });
        l.push(LayerSpec::Relu);
        l.push(LayerSpec::Maxpool2d { pool_size: 2, stride: 2 });
        if dropout {
            l.push(LayerSpec::Dropout { rate: CONV_DROP_RATE });
        }
    }
    l.push(LayerSpec::Dense { width: 1024 });
    l.push(LayerSpec::Relu);
    if dropout {
        l.push(LayerSpec::Dropout { rate: CONV_DROP_RATE });
    }
    l
}

/// Value sets and fixed constants the grid is built from; manifests can
/// override any of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub hidden_layers: Vec<usize>,
    pub widths: Vec<usize>,
    pub eps1: Vec<f64>,
    pub eps2: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha_grid: Vec<f64>,
    /// EWC regularization; `None` means the published rule lambda = 1/eps2.
    pub lambda_override: Option<f64>,
    pub transfer_mode: TransferMode,
    pub fisher_samples: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            hidden_layers: vec![2, 3],
            widths: vec![200, 400, 800],
            eps1: vec![0.01, 0.001],
            eps2: vec![0.001, 0.0001, 0.00001],
            epochs: 10,
            batch_size: 100,
            alpha_grid: (0..=20).map(|k| k as f64 * 0.05).collect(),
            lambda_override: None,
            transfer_mode: TransferMode::WeightTransfer,
            fisher_samples: 1000,
        }
    }
}

/// Ordered phase-1 points: hidden-layer count, then width, then eps1 (conv
/// kinds: eps1 only).
pub fn build_grid(model: ModelKind, s: &GridSettings) -> Vec<HyperParams> {
    let mut grid = Vec::new();
    if model.is_conv() {
        for &eps1 in &s.eps1 {
            grid.push(HyperParams {
                model,
                hidden_layers: 2,
                width: None,
                eps1,
                epochs: s.epochs,
                batch_size: s.batch_size,
                momentum: model.momentum(),
            });
        }
    } else {
        for &hidden_layers in &s.hidden_layers {
            for &width in &s.widths {
                for &eps1 in &s.eps1 {
                    grid.push(HyperParams {
                        model,
                        hidden_layers,
                        width: Some(width),
                        eps1,
                        epochs: s.epochs,
                        batch_size: s.batch_size,
                        momentum: model.momentum(),
                    });
                }
            }
        }
    }
    grid
}
