//! The application-oriented evaluation protocol.
//!
//! Phase 1 trains every grid point on the first sub-task only and selects
//! the snapshot with the highest first-sub-task test accuracy. Phase 2
//! retrains copies of that snapshot on the second sub-task, once per
//! retraining learning rate, recording accuracy curves on both sub-tasks and
//! their union. Qualities are the "best" (max over retraining) and "last"
//! (end of retraining) joint-test accuracies, maximized over the retraining
//! rate. A fresh copy of the selected architecture trained on the union
//! provides the baseline. EWC adds a Fisher-anchored penalty to phase 2; IMM
//! instead keeps the phase-1 model, retrains a second model, and merges the
//! two over a balancing-weight grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ewc::EwcState;
use crate::fisher::estimate_fisher_diagonal;
use crate::grid::{build_grid, GridSettings, HyperParams, ModelKind};
use crate::imm::{
    imm_mean_merge, imm_mode_merge, transfer_init, ImmState, MergeVariant, MODE_STABILIZER,
};
use crate::network::{Network, ParamSet, Penalty};
use crate::optim::OptimizerState;
use crate::rng::RngStream;
use crate::slt::{AuditSnapshot, SltInstance};

const TAG_PHASE1: u64 = 1;
const TAG_PHASE2: u64 = 2;
const TAG_BASELINE: u64 = 3;
const TAG_IMM_REINIT: u64 = 4;
const TAG_FISHER_D1: u64 = 5;
const TAG_FISHER_D2: u64 = 6;

/// Root seeds for the independent random streams of one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSeeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
    pub fisher: u64,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub grid: GridSettings,
    /// Steps between evaluations; `None` evaluates once per epoch. Every
    /// phase also evaluates at step 0 and at the final step.
    pub eval_every_batches: Option<usize>,
    pub seeds: ProtocolSeeds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitId {
    D1Test,
    D2Test,
    JointTest,
}

impl SplitId {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitId::D1Test => "d1_test",
            SplitId::D2Test => "d2_test",
            SplitId::JointTest => "joint_test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
}

/// Accuracy curves of one training run (one grid point in phase 1, one
/// retraining-rate branch in phase 2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub grid_index: usize,
    pub hyper: HyperParams,
    pub phase: u8,
    pub eps2: Option<f64>,
    pub diverged_at: Option<usize>,
    pub d1_test: Vec<EvalPoint>,
    pub d2_test: Vec<EvalPoint>,
    pub joint_test: Vec<EvalPoint>,
}

impl RunRecord {
    pub fn curve(&self, split: SplitId) -> &[EvalPoint] {
        match split {
            SplitId::D1Test => &self.d1_test,
            SplitId::D2Test => &self.d2_test,
            SplitId::JointTest => &self.joint_test,
        }
    }
}

/// Which phase-1 snapshot was selected for retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub grid_index: usize,
    pub step: usize,
    pub accuracy: f64,
    pub hyper: HyperParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub q_best: f64,
    pub q_last: f64,
    pub eps2_best: f64,
    pub eps2_last: f64,
    /// IMM only: the winning balancing weight and merge variant.
    pub alpha: Option<f64>,
    pub variant: Option<MergeVariant>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImmTuningPoint {
    pub variant: MergeVariant,
    pub alpha: f64,
    pub accuracy: f64,
}

/// Trained parameter sets and Fisher diagonals, available for checkpointing
/// after a run. Not part of the serialized result; reports never need them.
#[derive(Clone, Debug, Default)]
pub struct ExperimentArtifacts {
    pub selected_params: Option<ParamSet>,
    pub fisher_d1: Option<crate::fisher::FisherDiagonal>,
    pub fisher_d2: Option<crate::fisher::FisherDiagonal>,
    pub imm_model2: Option<ParamSet>,
    pub imm_merged_best: Option<ParamSet>,
}

/// Everything one protocol run produces, sufficient to re-render any report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub phase1: Vec<RunRecord>,
    pub selected: SelectedModel,
    pub phase2: Vec<RunRecord>,
    pub imm_tuning: Vec<ImmTuningPoint>,
    pub quality: Quality,
    pub baseline_curve: Vec<EvalPoint>,
    pub baseline: f64,
    pub audit_after_phase1: AuditSnapshot,
    pub constraint_notes: Vec<String>,
    /// Not serialized: wall time is reported separately so result files stay
    /// byte-identical across reruns.
    #[serde(skip)]
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub artifacts: ExperimentArtifacts,
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainSpec<'a> {
    train: &'a Dataset,
    evals: Vec<(SplitId, &'a Dataset)>,
    lr: f64,
    momentum: f64,
    epochs: usize,
    batch_size: usize,
    cadence: Option<usize>,
    snapshot_split: Option<SplitId>,
    penalty: Option<&'a dyn Penalty>,
}

struct Snapshot {
    step: usize,
    accuracy: f64,
    params: ParamSet,
}

struct TrainOutcome {
    curves: Vec<(SplitId, Vec<EvalPoint>)>,
    snapshot: Option<Snapshot>,
    diverged_at: Option<usize>,
}

fn train_model(
    net: &mut Network,
    spec: &TrainSpec,
    shuffle_rng: &mut RngStream,
    dropout_rng: &mut RngStream,
) -> Result<TrainOutcome> {
    let n = spec.train.len();
    if n == 0 {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    let batches_per_epoch = n.div_ceil(spec.batch_size);
    let total_steps = spec.epochs * batches_per_epoch;
    let cadence = spec.cadence.unwrap_or(batches_per_epoch).max(1);

    let mut curves: Vec<(SplitId, Vec<EvalPoint>)> =
        spec.evals.iter().map(|(id, _)| (*id, Vec::new())).collect();
    let mut snapshot: Option<Snapshot> = None;
    let mut opt = OptimizerState::new(net.params(), spec.lr, spec.momentum);

    let evaluate = |net: &Network,
                        step: usize,
                        curves: &mut Vec<(SplitId, Vec<EvalPoint>)>,
                        snapshot: &mut Option<Snapshot>|
     -> Result<()> {
        for ((id, ds), curve) in spec.evals.iter().zip(curves.iter_mut()) {
            let accuracy = net.evaluate_accuracy(ds, spec.batch_size)?;
            curve.1.push(EvalPoint { step, accuracy });
            if spec.snapshot_split == Some(*id) {
                let better = snapshot
                    .as_ref()
                    .map(|s| accuracy > s.accuracy)
                    .unwrap_or(true);
                if better {
                    *snapshot = Some(Snapshot { step, accuracy, params: net.params().clone() });
                }
            }
        }
        Ok(())
    };

    evaluate(net, 0, &mut curves, &mut snapshot)?;

    let mut diverged_at = None;
    let mut step = 0usize;
    'training: for _epoch in 0..spec.epochs {
        let order = shuffle_rng.permutation(n);
        for chunk in order.chunks(spec.batch_size) {
            let (x, y) = spec.train.batch_indexed(chunk);
            match net.loss_and_grads(&x, &y, crate::layers::Mode::Train, dropout_rng, spec.penalty)
            {
                Ok((loss, grads)) if loss.is_finite() => {
                    opt.step(net.params_mut(), &grads);
                }
                Ok(_) | Err(Error::Numerical { .. }) => {
                    diverged_at = Some(step);
                    break 'training;
                }
                Err(e) => return Err(e),
            }
            step += 1;
            if step % cadence == 0 || step == total_steps {
                evaluate(net, step, &mut curves, &mut snapshot)?;
            }
        }
    }

    Ok(TrainOutcome { curves, snapshot, diverged_at })
}

fn curves_into_record(
    grid_index: usize,
    hyper: &HyperParams,
    phase: u8,
    eps2: Option<f64>,
    outcome: &TrainOutcome,
) -> RunRecord {
    let pick = |id: SplitId| -> Vec<EvalPoint> {
        outcome
            .curves
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, pts)| pts.clone())
            .unwrap_or_default()
    };
    RunRecord {
        grid_index,
        hyper: hyper.clone(),
        phase,
        eps2,
        diverged_at: outcome.diverged_at,
        d1_test: pick(SplitId::D1Test),
        d2_test: pick(SplitId::D2Test),
        joint_test: pick(SplitId::JointTest),
    }
}

// ---------------------------------------------------------------------------
// phase 1
// ---------------------------------------------------------------------------

/// Trains every grid point on the first sub-task and picks the (point, step)
/// snapshot with maximal first-sub-task test accuracy. Ties prefer the
/// earlier step, then the lower grid index. Diverged points are excluded.
fn run_phase1(
    cfg: &ExperimentConfig,
    slt: &SltInstance,
) -> Result<(Vec<RunRecord>, SelectedModel, ParamSet)> {
    let grid = build_grid(cfg.model, &cfg.grid);
    let input_dims = slt.d1_train().image_dims();

    let outcomes: Vec<Result<(RunRecord, Option<Snapshot>)>> = grid
        .par_iter()
        .enumerate()
        .map(|(idx, hp)| {
            let tag = idx as u64;
            let mut init = RngStream::new(cfg.seeds.init).fork(TAG_PHASE1).fork(tag);
            let mut net = Network::build(hp.layer_chain(), input_dims, &mut init)
                .map_err(|e| Error::config(format!("grid point {idx}: {e}")))?;
            let mut shuffle = RngStream::new(cfg.seeds.shuffle).fork(TAG_PHASE1).fork(tag);
            let mut dropout = RngStream::new(cfg.seeds.dropout).fork(TAG_PHASE1).fork(tag);
            let spec = TrainSpec {
                train: slt.d1_train(),
                evals: vec![(SplitId::D1Test, slt.d1_test())],
                lr: hp.eps1,
                momentum: hp.momentum,
                epochs: hp.epochs,
                batch_size: hp.batch_size,
                cadence: cfg.eval_every_batches,
                snapshot_split: Some(SplitId::D1Test),
                penalty: None,
            };
            let out = train_model(&mut net, &spec, &mut shuffle, &mut dropout)?;
            let record = curves_into_record(idx, hp, 1, None, &out);
            let snapshot = if out.diverged_at.is_some() { None } else { out.snapshot };
            Ok((record, snapshot))
        })
        .collect();

    let mut records = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, Snapshot)> = None;
    for (idx, outcome) in outcomes.into_iter().enumerate() {
        let (record, snapshot) = outcome?;
        records.push(record);
        if let Some(s) = snapshot {
            let wins = match &best {
                None => true,
                Some((_, b)) => {
                    s.accuracy > b.accuracy || (s.accuracy == b.accuracy && s.step < b.step)
                }
            };
            if wins {
                best = Some((idx, s));
            }
        }
    }

    let (grid_index, snapshot) =
        best.ok_or_else(|| Error::data("every phase-1 grid point diverged"))?;
    let selected = SelectedModel {
        grid_index,
        step: snapshot.step,
        accuracy: snapshot.accuracy,
        hyper: grid[grid_index].clone(),
    };
    Ok((records, selected, snapshot.params))
}

// ---------------------------------------------------------------------------
// phase 2
// ---------------------------------------------------------------------------

type PenaltyFactory<'a> = dyn Fn(f64) -> Option<Box<dyn Penalty + 'a>> + Sync + 'a;

fn run_phase2(
    cfg: &ExperimentConfig,
    slt: &SltInstance,
    selected: &SelectedModel,
    start_params: &ParamSet,
    penalty_for: &PenaltyFactory,
    snapshot_split: Option<SplitId>,
) -> Result<(Vec<RunRecord>, Vec<Option<Snapshot>>)> {
    let hp = &selected.hyper;
    let input_dims = slt.d1_train().image_dims();

    let outcomes: Vec<Result<(RunRecord, Option<Snapshot>)>> = cfg
        .grid
        .eps2
        .par_iter()
        .enumerate()
        .map(|(j, &eps2)| {
            let tag = j as u64;
            // A pristine copy of the selected snapshot per retraining rate.
            let mut net = Network::build(
                hp.layer_chain(),
                input_dims,
                &mut RngStream::new(0),
            )?;
            net.set_params(start_params.clone())?;
            let mut shuffle = RngStream::new(cfg.seeds.shuffle).fork(TAG_PHASE2).fork(tag);
            let mut dropout = RngStream::new(cfg.seeds.dropout).fork(TAG_PHASE2).fork(tag);
            let penalty = penalty_for(eps2);
            let spec = TrainSpec {
                train: slt.d2_train(),
                evals: vec![
                    (SplitId::D1Test, slt.d1_test()),
                    (SplitId::D2Test, slt.d2_test()),
                    (SplitId::JointTest, slt.joint_test()),
                ],
                lr: eps2,
                momentum: hp.momentum,
                epochs: hp.epochs,
                batch_size: hp.batch_size,
                cadence: cfg.eval_every_batches,
                snapshot_split,
                penalty: penalty.as_deref(),
            };
            let out = train_model(&mut net, &spec, &mut shuffle, &mut dropout)?;
            let record = curves_into_record(selected.grid_index, hp, 2, Some(eps2), &out);
            let snapshot = if out.diverged_at.is_some() { None } else { out.snapshot };
            Ok((record, snapshot))
        })
        .collect();

    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    for outcome in outcomes {
        let (record, snapshot) = outcome?;
        records.push(record);
        snapshots.push(snapshot);
    }
    Ok((records, snapshots))
}

/// "best" = max joint-test accuracy over retraining steps and rates; "last" =
/// max over rates of the final-step joint accuracy. Diverged branches are
/// excluded. Ties prefer the earlier step, then the lower rate index.
fn quality_from_phase2(records: &[RunRecord]) -> Result<Quality> {
    let mut best: Option<(f64, usize, f64)> = None; // (acc, step, eps2)
    let mut last: Option<(f64, f64)> = None; // (acc, eps2)
    for record in records {
        if record.diverged_at.is_some() {
            continue;
        }
        let eps2 = record.eps2.expect("phase-2 record without eps2");
        for p in &record.joint_test {
            let wins = match &best {
                None => true,
                Some((acc, step, _)) => {
                    p.accuracy > *acc || (p.accuracy == *acc && p.step < *step)
                }
            };
            if wins {
                best = Some((p.accuracy, p.step, eps2));
            }
        }
        if let Some(p) = record.joint_test.last() {
            if last.map(|(acc, _)| p.accuracy > acc).unwrap_or(true) {
                last = Some((p.accuracy, eps2));
            }
        }
    }
    let (q_best, _, eps2_best) =
        best.ok_or_else(|| Error::data("every retraining branch diverged"))?;
    let (q_last, eps2_last) = last.unwrap();
    Ok(Quality { q_best, q_last, eps2_best, eps2_last, alpha: None, variant: None })
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

/// Fresh-initialized copy of the selected architecture trained on the union
/// of both sub-tasks; returns its joint-test accuracy curve and final value.
fn run_baseline(
    cfg: &ExperimentConfig,
    slt: &SltInstance,
    hp: &HyperParams,
) -> Result<(Vec<EvalPoint>, f64)> {
    let input_dims = slt.d1_train().image_dims();
    let mut init = RngStream::new(cfg.seeds.init).fork(TAG_BASELINE);
    let mut net = Network::build(hp.layer_chain(), input_dims, &mut init)?;
    let mut shuffle = RngStream::new(cfg.seeds.shuffle).fork(TAG_BASELINE);
    let mut dropout = RngStream::new(cfg.seeds.dropout).fork(TAG_BASELINE);
    let spec = TrainSpec {
        train: slt.joint_train(),
        evals: vec![(SplitId::JointTest, slt.joint_test())],
        lr: hp.eps1,
        momentum: hp.momentum,
        epochs: hp.epochs,
        batch_size: hp.batch_size,
        cadence: cfg.eval_every_batches,
        snapshot_split: None,
        penalty: None,
    };
    let out = train_model(&mut net, &spec, &mut shuffle, &mut dropout)?;
    if let Some(step) = out.diverged_at {
        return Err(Error::data(format!("baseline training diverged at step {step}")));
    }
    let curve = out.curves.into_iter().next().unwrap().1;
    let accuracy = curve.last().unwrap().accuracy;
    Ok((curve, accuracy))
}

// ---------------------------------------------------------------------------
// IMM
// ---------------------------------------------------------------------------

struct ImmPhase {
    records: Vec<RunRecord>,
    tuning: Vec<ImmTuningPoint>,
    quality: Quality,
    model2: ParamSet,
    merged_best: ParamSet,
    fisher1: crate::fisher::FisherDiagonal,
    fisher2: crate::fisher::FisherDiagonal,
}

fn run_imm(
    cfg: &ExperimentConfig,
    slt: &SltInstance,
    selected: &SelectedModel,
    model1: &ParamSet,
) -> Result<ImmPhase> {
    let hp = &selected.hyper;
    let input_dims = slt.d1_train().image_dims();

    // Phase-2 starting point per the transfer mode; the fresh draw is shared
    // by all retraining-rate branches.
    let fresh = || {
        let mut rng = RngStream::new(cfg.seeds.init).fork(TAG_IMM_REINIT);
        Network::build(hp.layer_chain(), input_dims, &mut rng)
            .expect("phase-1 already built this architecture")
            .params()
            .clone()
    };
    let (start, l2_penalty) = transfer_init(model1, cfg.grid.transfer_mode, fresh);

    let factory = move |_eps2: f64| -> Option<Box<dyn Penalty + '_>> {
        l2_penalty
            .clone()
            .map(|p| Box::new(p) as Box<dyn Penalty>)
    };
    let (records, snapshots) = run_phase2(
        cfg,
        slt,
        selected,
        &start,
        &factory,
        Some(SplitId::D2Test),
    )?;

    // Best second model by second-sub-task test accuracy, over rates and
    // steps.
    let mut best: Option<(f64, usize, usize)> = None; // (acc, step, branch)
    for (j, snap) in snapshots.iter().enumerate() {
        if let Some(s) = snap {
            let wins = match &best {
                None => true,
                Some((acc, step, _)) => {
                    s.accuracy > *acc || (s.accuracy == *acc && s.step < *step)
                }
            };
            if wins {
                best = Some((s.accuracy, s.step, j));
            }
        }
    }
    let (_, _, branch) = best.ok_or_else(|| Error::data("every retraining branch diverged"))?;
    let eps2_chosen = cfg.grid.eps2[branch];
    let model2 = snapshots
        .into_iter()
        .nth(branch)
        .unwrap()
        .unwrap()
        .params;

    // Fisher diagonals for both models on their own sub-tasks.
    let mut net = Network::build(hp.layer_chain(), input_dims, &mut RngStream::new(0))?;
    net.set_params(model1.clone())?;
    let fisher1 = estimate_fisher_diagonal(
        &net,
        slt.d1_train(),
        cfg.grid.fisher_samples,
        &mut RngStream::new(cfg.seeds.fisher).fork(TAG_FISHER_D1),
    )?;
    net.set_params(model2.clone())?;
    let fisher2 = estimate_fisher_diagonal(
        &net,
        slt.d2_train(),
        cfg.grid.fisher_samples,
        &mut RngStream::new(cfg.seeds.fisher).fork(TAG_FISHER_D2),
    )?;

    let state = ImmState::new(model1.clone(), model2, cfg.grid.transfer_mode)?
        .with_fishers(fisher1, fisher2)?;

    // The tuning curve: joint-test accuracy of the merged model as a
    // function of the balancing weight, for both variants.
    let mut tuning = Vec::new();
    let mut winner: Option<(ImmTuningPoint, ParamSet)> = None;
    for variant in [MergeVariant::Mean, MergeVariant::Mode] {
        for &alpha in &cfg.grid.alpha_grid {
            let merged = match variant {
                MergeVariant::Mean => imm_mean_merge(&state, alpha)?,
                MergeVariant::Mode => imm_mode_merge(&state, alpha, MODE_STABILIZER)?,
            };
            net.set_params(merged)?;
            let accuracy = net.evaluate_accuracy(slt.joint_test(), hp.batch_size)?;
            let point = ImmTuningPoint { variant, alpha, accuracy };
            tuning.push(point);
            if winner.as_ref().map(|(w, _)| accuracy > w.accuracy).unwrap_or(true) {
                winner = Some((point, net.params().clone()));
            }
        }
    }
    let (winner, merged_best) = winner.unwrap();

    let quality = Quality {
        q_best: winner.accuracy,
        q_last: winner.accuracy,
        eps2_best: eps2_chosen,
        eps2_last: eps2_chosen,
        alpha: Some(winner.alpha),
        variant: Some(winner.variant),
    };
    let ImmState { model2, fisher1, fisher2, .. } = state;
    Ok(ImmPhase {
        records,
        tuning,
        quality,
        model2,
        merged_best,
        fisher1: fisher1.unwrap(),
        fisher2: fisher2.unwrap(),
    })
}

// ---------------------------------------------------------------------------
// the whole experiment
// ---------------------------------------------------------------------------

/// Runs the full protocol for one model kind on one SLT. Deterministic given
/// the seeds; parallel grid points and retraining branches own forked rng
/// streams, so thread count cannot change any result.
pub fn run_experiment(cfg: &ExperimentConfig, slt: &SltInstance) -> Result<ExperimentOutput> {
    let started = std::time::Instant::now();

    let (phase1, selected, selected_params) = run_phase1(cfg, slt)?;

    let audit_after_phase1 = slt.audit();
    if !audit_after_phase1.d2_untouched() {
        return Err(Error::config(
            "protocol violation: second-sub-task data was read during phase 1",
        ));
    }

    let mut constraint_notes = vec![
        "the 'best' criterion scans joint-test accuracy over retraining and therefore \
         requires retained first-sub-task test data (violates the low-memory constraint)"
            .to_string(),
    ];

    let mut artifacts = ExperimentArtifacts {
        selected_params: Some(selected_params.clone()),
        ..Default::default()
    };

    let (phase2, imm_tuning, quality) = match cfg.model {
        ModelKind::Imm => {
            constraint_notes.push(
                "the balancing weight alpha is selected on joint-test accuracy, i.e. by \
                 cross-validation against first-sub-task data (violates the low-memory and \
                 causality constraints)"
                    .to_string(),
            );
            let imm = run_imm(cfg, slt, &selected, &selected_params)?;
            artifacts.fisher_d1 = Some(imm.fisher1);
            artifacts.fisher_d2 = Some(imm.fisher2);
            artifacts.imm_model2 = Some(imm.model2);
            artifacts.imm_merged_best = Some(imm.merged_best);
            (imm.records, imm.tuning, imm.quality)
        }
        ModelKind::Ewc => {
            let input_dims = slt.d1_train().image_dims();
            let mut net =
                Network::build(selected.hyper.layer_chain(), input_dims, &mut RngStream::new(0))?;
            net.set_params(selected_params.clone())?;
            let fisher = estimate_fisher_diagonal(
                &net,
                slt.d1_train(),
                cfg.grid.fisher_samples,
                &mut RngStream::new(cfg.seeds.fisher).fork(TAG_FISHER_D1),
            )?;
            artifacts.fisher_d1 = Some(fisher.clone());
            let anchor = selected_params.clone();
            let lambda_override = cfg.grid.lambda_override;
            let factory = move |eps2: f64| -> Option<Box<dyn Penalty + '_>> {
                let lambda = lambda_override.unwrap_or(1.0 / eps2);
                Some(Box::new(
                    EwcState::new(anchor.clone(), fisher.clone(), lambda)
                        .expect("anchor and Fisher come from the same network"),
                ) as Box<dyn Penalty>)
            };
            let (records, _) = run_phase2(cfg, slt, &selected, &selected_params, &factory, None)?;
            let quality = quality_from_phase2(&records)?;
            (records, Vec::new(), quality)
        }
        _ => {
            let factory = |_eps2: f64| -> Option<Box<dyn Penalty>> { None };
            let (records, _) = run_phase2(cfg, slt, &selected, &selected_params, &factory, None)?;
            let quality = quality_from_phase2(&records)?;
            (records, Vec::new(), quality)
        }
    };

    let (baseline_curve, baseline) = run_baseline(cfg, slt, &selected.hyper)?;

    Ok(ExperimentOutput {
        phase1,
        selected,
        phase2,
        imm_tuning,
        quality,
        baseline_curve,
        baseline,
        audit_after_phase1,
        constraint_notes,
        wall_time_secs: started.elapsed().as_secs_f64(),
        artifacts,
    })
}
