//! Experiment manifests: a human-editable JSON description of one run.
//! Unknown keys are rejected outright, every seed is explicit, and
//! validation collects all problems before any training starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::grid::{GridSettings, ModelKind};
use crate::imm::TransferMode;
use crate::rng::RngStream;
use crate::slt::{make_slt, SltSpec};

pub const MANIFEST_VERSION: u32 = 1;

/// Environment variable naming the default dataset directory.
pub const DATA_DIR_ENV: &str = "CF_BENCH_DATA";

const TAG_SYNTH_TRAIN: u64 = 90;
const TAG_SYNTH_TEST: u64 = 91;
const TAG_CLASS_SELECT: u64 = 80;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
    pub permutation: u64,
    pub fisher: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Big-endian IDX image/label file pairs.
    Idx {
        #[serde(default)]
        name: Option<String>,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// `label,p0,p1,...` CSV files.
    Csv {
        #[serde(default)]
        name: Option<String>,
        train: PathBuf,
        test: PathBuf,
    },
    /// Ten seeded Gaussian blobs, for desk-scale smoke runs.
    Synthetic {
        #[serde(default)]
        name: Option<String>,
        n_per_class_train: usize,
        n_per_class_test: usize,
        dims: usize,
        separation: f64,
    },
}

impl DatasetSource {
    pub fn name(&self) -> String {
        let (custom, fallback) = match self {
            DatasetSource::Idx { name, train_images, .. } => (
                name.clone(),
                train_images
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "idx".into()),
            ),
            DatasetSource::Csv { name, train, .. } => (
                name.clone(),
                train
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "csv".into()),
            ),
            DatasetSource::Synthetic { name, .. } => (name.clone(), "synthetic".into()),
        };
        custom.unwrap_or(fallback)
    }
}

/// Grid overrides; anything left out keeps the published value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOverrides {
    pub hidden_layers: Option<Vec<usize>>,
    pub widths: Option<Vec<usize>>,
    pub eps1: Option<Vec<f64>>,
    pub eps2: Option<Vec<f64>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub alpha_grid: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub transfer_mode: Option<TransferMode>,
    pub fisher_samples: Option<usize>,
}

impl GridOverrides {
    pub fn resolve(&self) -> GridSettings {
        let d = GridSettings::default();
        GridSettings {
            hidden_layers: self.hidden_layers.clone().unwrap_or(d.hidden_layers),
            widths: self.widths.clone().unwrap_or(d.widths),
            eps1: self.eps1.clone().unwrap_or(d.eps1),
            eps2: self.eps2.clone().unwrap_or(d.eps2),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            alpha_grid: self.alpha_grid.clone().unwrap_or(d.alpha_grid),
            lambda_override: self.lambda,
            transfer_mode: self.transfer_mode.unwrap_or(d.transfer_mode),
            fisher_samples: self.fisher_samples.unwrap_or(d.fisher_samples),
        }
    }
}

/// One or several SLT names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SltNames {
    One(String),
    Many(Vec<String>),
}

impl SltNames {
    pub fn as_vec(&self) -> Vec<String> {
        match self {
            SltNames::One(s) => vec![s.clone()],
            SltNames::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub model: String,
    pub dataset: DatasetSource,
    pub slts: SltNames,
    pub seeds: Seeds,
    #[serde(default)]
    pub grid: GridOverrides,
    /// Steps between evaluations; omitted means once per epoch.
    #[serde(default)]
    pub eval_every_batches: Option<usize>,
    /// Desk-scale cap on per-class train counts; omitted means uncapped.
    #[serde(default)]
    pub per_class_cap: Option<usize>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub save_checkpoints: bool,
}

/// A manifest that passed validation, with everything resolved.
#[derive(Clone, Debug)]
pub struct ValidatedManifest {
    pub manifest: Manifest,
    pub model: ModelKind,
    pub slts: Vec<SltSpec>,
    pub grid: GridSettings,
    pub dataset_name: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Manifest(vec![format!("cannot read {}: {e}", path.display())])
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(vec![format!("{}: {e}", path.display())]))
    }

    /// Checks every field and referenced file, reporting all problems at
    /// once. `data_dir` is prepended to relative dataset paths.
    pub fn validate(&self, data_dir: Option<&Path>) -> Result<ValidatedManifest> {
        let mut errors = Vec::new();

        if self.version != MANIFEST_VERSION {
            errors.push(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            ));
        }

        let model = ModelKind::parse(&self.model);
        if model.is_none() {
            errors.push(format!(
                "unknown model kind '{}' (known: FC, D-FC, CONV, D-CONV, LWTA, EWC, IMM)",
                self.model
            ));
        }

        let mut slts = Vec::new();
        let names = self.slts.as_vec();
        if names.is_empty() {
            errors.push("no SLT names given".to_string());
        }
        for name in &names {
            match make_slt(name) {
                Ok(spec) => slts.push(spec),
                Err(e) => errors.push(e.to_string()),
            }
        }

        match &self.dataset {
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels, .. } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    let full = resolve_path(p, data_dir);
                    if !full.is_file() {
                        errors.push(format!("dataset file not found: {}", full.display()));
                    }
                }
            }
            DatasetSource::Csv { train, test, .. } => {
                for p in [train, test] {
                    let full = resolve_path(p, data_dir);
                    if !full.is_file() {
                        errors.push(format!("dataset file not found: {}", full.display()));
                    }
                }
            }
            DatasetSource::Synthetic { n_per_class_train, n_per_class_test, dims, separation, .. } => {
                if *n_per_class_train == 0 || *n_per_class_test == 0 {
                    errors.push("synthetic dataset needs at least one sample per class".into());
                }
                if *dims == 0 {
                    errors.push("synthetic dims must be positive".into());
                }
                if *separation <= 0.0 {
                    errors.push(format!("synthetic separation must be positive, got {separation}"));
                }
            }
        }

        let grid = self.grid.resolve();
        if grid.hidden_layers.is_empty() || grid.hidden_layers.contains(&0) {
            errors.push("grid.hidden_layers must be nonempty positive values".into());
        }
        if grid.widths.is_empty() || grid.widths.contains(&0) {
            errors.push("grid.widths must be nonempty positive values".into());
        }
        if model == Some(ModelKind::Lwta) && grid.widths.iter().any(|w| w % 2 != 0) {
            errors.push("LWTA widths must be divisible by the block size 2".into());
        }
        if grid.eps1.is_empty() || grid.eps1.iter().any(|e| *e <= 0.0) {
            errors.push("grid.eps1 must be nonempty positive values".into());
        }
        if grid.eps2.is_empty() || grid.eps2.iter().any(|e| *e <= 0.0) {
            errors.push("grid.eps2 must be nonempty positive values".into());
        }
        if grid.epochs == 0 {
            errors.push("grid.epochs must be at least 1".into());
        }
        if grid.batch_size == 0 {
            errors.push("grid.batch_size must be at least 1".into());
        }
        if grid.alpha_grid.is_empty() || grid.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            errors.push("grid.alpha_grid values must lie in [0, 1]".into());
        }
        if let Some(l) = grid.lambda_override {
            if l < 0.0 {
                errors.push(format!("grid.lambda must be nonnegative, got {l}"));
            }
        }
        if grid.fisher_samples == 0 {
            errors.push("grid.fisher_samples must be at least 1".into());
        }
        if self.eval_every_batches == Some(0) {
            errors.push("eval_every_batches must be at least 1".into());
        }
        if self.per_class_cap == Some(0) {
            errors.push("per_class_cap must be at least 1".into());
        }

        if !errors.is_empty() {
            return Err(Error::Manifest(errors));
        }
        Ok(ValidatedManifest {
            manifest: self.clone(),
            model: model.unwrap(),
            slts,
            grid,
            dataset_name: self.dataset.name(),
        })
    }
}

fn resolve_path(p: &Path, data_dir: Option<&Path>) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match data_dir {
        Some(d) => d.join(p),
        None => p.to_path_buf(),
    }
}

/// Loads (or generates) the base dataset pair, applies 10-class selection
/// when more classes are present, applies the per-class train cap, and
/// checks the container invariants.
pub fn load_base_pair(m: &ValidatedManifest, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let seeds = &m.manifest.seeds;
    let (train, test) = match &m.manifest.dataset {
        DatasetSource::Idx { train_images, train_labels, test_images, test_labels, .. } => (
            data::load_idx(
                &resolve_path(train_images, data_dir),
                &resolve_path(train_labels, data_dir),
                Split::Train,
            )?,
            data::load_idx(
                &resolve_path(test_images, data_dir),
                &resolve_path(test_labels, data_dir),
                Split::Test,
            )?,
        ),
        DatasetSource::Csv { train, test, .. } => (
            data::load_csv(&resolve_path(train, data_dir), Split::Train)?,
            data::load_csv(&resolve_path(test, data_dir), Split::Test)?,
        ),
        DatasetSource::Synthetic { n_per_class_train, n_per_class_test, dims, separation, .. } => {
            let root = RngStream::new(seeds.init);
            (
                data::synthetic_blobs(
                    *n_per_class_train,
                    *dims,
                    *separation,
                    &mut root.fork(TAG_SYNTH_TRAIN),
                    Split::Train,
                ),
                data::synthetic_blobs(
                    *n_per_class_test,
                    *dims,
                    *separation,
                    &mut root.fork(TAG_SYNTH_TEST),
                    Split::Test,
                ),
            )
        }
    };

    let distinct = train.class_counts().len();
    let (mut train, test) = if distinct > 10 {
        let mut rng = RngStream::new(seeds.permutation).fork(TAG_CLASS_SELECT);
        let (tr, te, _) = data::select_top_classes(&train, &test, &mut rng)?;
        (tr, te)
    } else {
        (train, test)
    };

    if let Some(cap) = m.manifest.per_class_cap {
        train = train.cap_per_class(cap);
    }

    train.validate()?;
    test.validate()?;
    Ok((train, test))
}
