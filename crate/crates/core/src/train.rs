//! Multi-level objective, teacher-forced training loop, inference and
//! checkpoints.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_groups, ClusterConfig, Partition};
use crate::data::{ground_truth_relation, off_diagonal_mask, FrameAnnotation, LabelSet};
use crate::error::{Error, Result};
use crate::model::{graph_stage, hierarchy_stage, FrameInputs, ModelConfig, ModelParams};
use crate::nn::weights::{load_weights, save_weights};
use crate::nn::{AdamState, ParamSet, Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub individual: f64,
    pub social: f64,
    pub global: f64,
    pub relation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            individual: 1.0,
            social: 1.0,
            global: 1.0,
            relation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability threshold for emitting a label.
    pub tau: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 4,
            epochs: 50,
            tau: 0.5,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("threshold {tau} outside (0, 1)")))
    }
}

/// Per-frame loss terms; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub individual: f64,
    pub social: f64,
    pub global: f64,
    pub relation: f64,
    pub total: f64,
}

impl LossComponents {
    fn accumulate(&mut self, other: &Self, scale: f64) {
        self.individual += scale * other.individual;
        self.social += scale * other.social;
        self.global += scale * other.global;
        self.relation += scale * other.relation;
        self.total += scale * other.total;
    }
}

fn multi_hot(sets: &[&LabelSet], n: usize, frame_id: u64, tier: &str) -> Result<Tensor2> {
    let mut t = Tensor2::zeros(sets.len(), n);
    for (r, set) in sets.iter().enumerate() {
        for &l in set.iter() {
            if l >= n {
                return Err(Error::data(
                    None,
                    format!("frame {frame_id}: {tier} label {l} outside vocabulary of {n}"),
                ));
            }
            t[(r, l)] = 1.0;
        }
    }
    Ok(t)
}

/// Records the loss of one frame under teacher forcing and returns the
/// total node and the component values.
pub fn record_frame_loss(
    tape: &mut Tape,
    vars: &crate::model::ModelVars,
    cfg: &ModelConfig,
    weights: &LossWeights,
    frame: &FrameAnnotation,
) -> Result<(Var, LossComponents)> {
    let inputs = FrameInputs::new(frame, cfg)?;
    let gt_groups = frame.multi_member_groups();
    let actions: Vec<&LabelSet> = frame.subjects.iter().map(|s| &s.actions).collect();
    let y_i = multi_hot(&actions, cfg.num_actions, frame.frame_id, "individual")?;
    let socials: Vec<&LabelSet> = gt_groups.iter().map(|(_, l)| l).collect();
    let y_p = multi_hot(&socials, cfg.num_social, frame.frame_id, "social")?;
    let y_g = multi_hot(
        &[&frame.global_activities],
        cfg.num_global,
        frame.frame_id,
        "global",
    )?;
    let n = frame.num_subjects();

    let g = graph_stage(tape, vars, cfg, &inputs)?;
    let (_, out) = hierarchy_stage(tape, vars, cfg, g.n_i, &frame.gt_partition())?;
    let l_i = tape.bce(out.a_i, &y_i, None)?;
    let l_g = tape.bce(out.a_g, &y_g, None)?;
    let l_d = tape.bce(
        g.r,
        &ground_truth_relation(frame),
        Some(&off_diagonal_mask(n)),
    )?;
    let mut terms = vec![
        (l_i, weights.individual),
        (l_g, weights.global),
        (l_d, weights.relation),
    ];
    let mut social = 0.0;
    if let Some(a_p) = out.a_p {
        let l_p = tape.bce(a_p, &y_p, None)?;
        social = tape.scalar(l_p);
        terms.push((l_p, weights.social));
    }
    let total = tape.sum_scalars(&terms)?;
    let parts = LossComponents {
        individual: tape.scalar(l_i),
        social,
        global: tape.scalar(l_g),
        relation: tape.scalar(l_d),
        total: tape.scalar(total),
    };
    Ok((total, parts))
}

pub fn total_loss(
    params: &ModelParams,
    frame: &FrameAnnotation,
    weights: &LossWeights,
) -> Result<LossComponents> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    Ok(record_frame_loss(&mut tape, &vars, &params.config, weights, frame)?.1)
}

/// Loss and its gradient for every parameter in [`ParamSet::params`] order.
pub fn loss_and_gradients(
    params: &ModelParams,
    frame: &FrameAnnotation,
    weights: &LossWeights,
) -> Result<(LossComponents, Vec<Tensor2>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let (root, parts) = record_frame_loss(&mut tape, &vars, &params.config, weights, frame)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss on frame {}",
            frame.frame_id
        )));
    }
    let grads = tape.backward(root)?;
    Ok((
        parts,
        vars.leaves()
            .into_iter()
            .map(|v| grads.get_or_zeros(&tape, v))
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-frame loss over the epoch, measured before each batch update.
    pub mean_loss: f64,
    pub components: LossComponents,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub trace: Vec<EpochRecord>,
}

pub fn train(
    params: ModelParams,
    frames: &[FrameAnnotation],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(params, None, frames, cfg, 0, |_| Ok(()))
}

/// Runs epochs `start_epoch..cfg.epochs`, calling `on_epoch` after each one.
///
/// The shuffle order of epoch `e` depends only on `(cfg.seed, e)`, so a run
/// resumed from a checkpoint replays the same batches.
pub fn train_with(
    mut params: ModelParams,
    adam: Option<AdamState>,
    frames: &[FrameAnnotation],
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.config.validate()?;
    if frames.is_empty() {
        return Err(Error::data(None, "training set is empty"));
    }
    let dim = params.config.feature_dim;
    if let Some(f) = frames.iter().find(|f| f.feature_dim() != dim) {
        return Err(Error::data(
            None,
            format!(
                "frame {}: feature dim {} but model expects {dim}",
                f.frame_id,
                f.feature_dim()
            ),
        ));
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(params.params()));
    let names = params.param_names();
    let mut trace = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_add(epoch as u64),
        ));
        let mut sum = LossComponents::default();
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(LossComponents, Vec<Tensor2>)>> = batch
                .par_iter()
                .map(|&i| loss_and_gradients(&params, &frames[i], &cfg.loss_weights))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Option<Vec<Tensor2>> = None;
            for r in results {
                let (parts, g) = r?;
                sum.accumulate(&parts, 1.0);
                match &mut grads {
                    None => grads = Some(g.into_iter().map(|t| t.scale(scale)).collect()),
                    Some(acc) => {
                        for (a, t) in acc.iter_mut().zip(&g) {
                            a.add_assign(&t.scale(scale));
                        }
                    }
                }
            }
            let grads = grads.expect("non-empty batch");
            let mut slots: Vec<(String, &mut Tensor2)> =
                names.iter().cloned().zip(params.params_mut()).collect();
            adam.step(&mut slots, &grads, cfg.lr)?;
            steps += 1;
        }
        let mut components = LossComponents::default();
        components.accumulate(&sum, 1.0 / frames.len() as f64);
        let record = EpochRecord {
            epoch,
            mean_loss: components.total,
            components,
            steps,
        };
        info!("epoch {epoch}: loss {:.6}", record.mean_loss);
        on_epoch(&record)?;
        trace.push(record);
    }
    Ok(TrainOutcome {
        params,
        adam,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub tau: f64,
    pub cluster: ClusterConfig,
    /// Aggregate over the annotated groups instead of the predicted ones.
    pub gt_groups: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            cluster: ClusterConfig::default(),
            gt_groups: false,
        }
    }
}

/// Raw model outputs kept alongside the decoded labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probabilities {
    pub individual: Tensor2,
    pub social: Tensor2,
    pub global: Tensor2,
    pub relation: Tensor2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParPrediction {
    pub frame_id: u64,
    pub subject_ids: Vec<u64>,
    /// Per subject, in frame order.
    pub actions: Vec<LabelSet>,
    /// Over subject indices.
    pub partition: Partition,
    /// Per group of `partition`.
    pub group_activities: Vec<LabelSet>,
    pub global: LabelSet,
    pub probabilities: Probabilities,
}

fn decode(probs: &Tensor2, tau: f64) -> Vec<LabelSet> {
    (0..probs.rows())
        .map(|r| {
            probs
                .row(r)
                .iter()
                .enumerate()
                .filter_map(|(l, &p)| (p > tau).then_some(l))
                .collect()
        })
        .collect()
}

/// Predicts relations, groups them, then reads out labels over the
/// predicted partition.
pub fn infer(
    params: &ModelParams,
    frame: &FrameAnnotation,
    cfg: &InferConfig,
) -> Result<ParPrediction> {
    check_tau(cfg.tau)?;
    let inputs = FrameInputs::new(frame, &params.config)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let g = graph_stage(&mut tape, &vars, &params.config, &inputs)?;
    let relation = tape.value(g.r).clone();
    let partition = if cfg.gt_groups {
        frame.gt_partition()
    } else {
        cluster_groups(&relation, &cfg.cluster)?
    };
    let (_, out) = hierarchy_stage(&mut tape, &vars, &params.config, g.n_i, &partition)?;
    let social = out.a_p.map_or_else(
        || Tensor2::zeros(0, params.config.num_social),
        |v| tape.value(v).clone(),
    );
    let probabilities = Probabilities {
        individual: tape.value(out.a_i).clone(),
        global: tape.value(out.a_g).clone(),
        social,
        relation,
    };
    debug!(
        "frame {}: {} predicted groups",
        frame.frame_id,
        partition.groups().len()
    );
    Ok(ParPrediction {
        frame_id: frame.frame_id,
        subject_ids: frame.subjects.iter().map(|s| s.id).collect(),
        actions: decode(&probabilities.individual, cfg.tau),
        group_activities: decode(&probabilities.social, cfg.tau),
        global: decode(&probabilities.global, cfg.tau)
            .pop()
            .unwrap_or_default(),
        partition,
        probabilities,
    })
}

/// Sidecar written next to the weights of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub model_file: String,
    pub adam_file: String,
    pub train: TrainConfig,
    pub trace: Vec<EpochRecord>,
    #[serde(default)]
    pub config_echo: serde_json::Value,
}

pub const MODEL_FILE: &str = "model.json";
pub const ADAM_FILE: &str = "adam.json";
pub const STATE_FILE: &str = "train_state.json";

fn save_adam(path: &Path, params: &ModelParams, adam: &AdamState) -> Result<()> {
    let names = params.param_names();
    let tensors: Vec<(String, Tensor2)> = names
        .iter()
        .zip(&adam.first_moment)
        .map(|(n, t)| (format!("m.{n}"), t.clone()))
        .chain(
            names
                .iter()
                .zip(&adam.second_moment)
                .map(|(n, t)| (format!("v.{n}"), t.clone())),
        )
        .collect();
    let meta = serde_json::json!({
        "step": adam.step,
        "beta1": adam.beta1,
        "beta2": adam.beta2,
        "eps": adam.eps,
    });
    save_weights(path, &tensors, meta)
}

fn load_adam(path: &Path, params: &ModelParams) -> Result<AdamState> {
    let (manifest, tensors) = load_weights(path)?;
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let n = params.param_names().len();
    if tensors.len() != 2 * n {
        return Err(corrupt(format!(
            "expected {} moment tensors, found {}",
            2 * n,
            tensors.len()
        )));
    }
    for ((name, t), p) in tensors
        .iter()
        .zip(params.params().iter().chain(params.params().iter()))
    {
        if t.shape() != p.shape() {
            return Err(corrupt(format!("moment {name} has shape {:?}", t.shape())));
        }
    }
    let meta = &manifest.meta;
    let num = |k: &str| {
        meta[k]
            .as_f64()
            .ok_or_else(|| corrupt(format!("missing {k}")))
    };
    let mut moments = tensors.into_iter().map(|(_, t)| t);
    Ok(AdamState {
        beta1: num("beta1")?,
        beta2: num("beta2")?,
        eps: num("eps")?,
        step: meta["step"]
            .as_u64()
            .ok_or_else(|| corrupt("missing step".into()))?,
        first_moment: moments.by_ref().take(n).collect(),
        second_moment: moments.collect(),
    })
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    adam: &AdamState,
    state: &TrainState,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    params.save(&dir.join(&state.model_file))?;
    save_adam(&dir.join(&state.adam_file), params, adam)?;
    let path = dir.join(STATE_FILE);
    fs::write(&path, serde_json::to_string_pretty(state)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, AdamState, TrainState)> {
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: TrainState = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let params = ModelParams::load(&dir.join(&state.model_file))?;
    let adam = load_adam(&dir.join(&state.adam_file), &params)?;
    Ok((params, adam, state))
}
