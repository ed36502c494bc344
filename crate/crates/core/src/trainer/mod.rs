//! Self-supervised training of the embedding network with the masked TDoA
//! loss and the optional displacement term, plus prediction and smoothing.

pub mod loss;
pub mod optim;
pub mod smooth;

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use loss::{displacement_loss, displacement_residual_grad, tdoa_residual, tdoa_residual_grad};
pub use optim::{Adam, AdamConfig};
pub use smooth::smooth;

use crate::error::{Error, Result};
use crate::eval::TrajectoryEstimate;
use crate::geometry::{Bounds, Point3};
use crate::model::{ChartModel, Gradients, ModelConfig, OutputFrame};
use crate::nlos::{build_masks, MaskPolicy, MaskVector};
use crate::pipeline::PreprocessedFrame;
use crate::rng::{derive_seed, stream_rng};
use crate::scalar::Real;
use crate::scenario::{DisplacementSet, Scenario, TdoaLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TdoaOnly,
    TdoaPlusDisplacement,
}

/// Denominator of the masked TDoA sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Number of retained (`nu = 1`) terms in the batch.
    Retained,
    /// Frames in the batch times TDoAs per frame, whatever the masks say.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelWidths {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub fc1_units: usize,
    pub fc2_units: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        let s = ModelConfig::standard(1, 4);
        Self {
            conv1_channels: s.conv1_channels,
            conv2_channels: s.conv2_channels,
            fc1_units: s.fc1_units,
            fc2_units: s.fc2_units,
        }
    }
}

impl ModelWidths {
    pub fn model_config(&self, m: usize, c: usize) -> ModelConfig {
        ModelConfig {
            m,
            c,
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            fc1_units: self.fc1_units,
            fc2_units: self.fc2_units,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub mask: MaskPolicy,
    /// Weight of the displacement term.
    pub beta: f64,
    /// Largest timestamp gap of a training pair, seconds.
    pub epsilon_s: f64,
    pub epochs: usize,
    /// Pairs drawn per epoch; `None` draws one pair per frame.
    pub pairs_per_epoch: Option<usize>,
    /// Frames (TDoA-only) or pairs (joint) per optimizer step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub normalization: LossNormalization,
    pub widths: ModelWidths,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::TdoaPlusDisplacement,
            mask: MaskPolicy::Threshold(crate::nlos::DEFAULT_LAMBDA),
            beta: 2.0,
            epsilon_s: 4.0,
            epochs: 40,
            pairs_per_epoch: None,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            normalization: LossNormalization::Retained,
            widths: ModelWidths::default(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be a finite nonnegative number");
        }
        if !(self.epsilon_s > 0.0) {
            return bad("epsilon_s must be positive");
        }
        if self.batch_size == 0 || self.pairs_per_epoch == Some(0) {
            return bad("batch_size and pairs_per_epoch must be positive");
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return bad("optimizer needs lr > 0, betas in [0, 1) and epsilon > 0");
        }
        if let MaskPolicy::Threshold(l) = self.mask {
            if !(l > 0.0 && l < 1.0) {
                return bad("mask lambda must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// Everything the losses need: inputs, masks, geometry and displacements.
#[derive(Debug, Clone)]
pub struct TrainingDataset {
    pub frames: Vec<PreprocessedFrame>,
    pub masks: Vec<MaskVector>,
    pub layout: TdoaLayout,
    pub trp_positions: Vec<Point3>,
    pub ue_height_m: f64,
    pub meters_per_sample: f64,
    pub bounds: Bounds,
    /// Measurements indexed by source frame index.
    pub displacements: Option<DisplacementSet>,
}

impl TrainingDataset {
    pub fn new(
        frames: Vec<PreprocessedFrame>,
        masks: Vec<MaskVector>,
        scenario: &Scenario,
        displacements: Option<DisplacementSet>,
    ) -> Result<Self> {
        let layout = scenario.tdoa_layout();
        if frames.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if masks.len() != frames.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} masks", frames.len()),
                got: format!("{}", masks.len()),
            });
        }
        let (m, c) = frames[0].h_norm.dim();
        for (i, (f, k)) in frames.iter().zip(&masks).enumerate() {
            if f.h_norm.dim() != (m, c) || f.tdoa.len() != layout.len() || k.nu.len() != layout.len() {
                return Err(Error::invalid(format!("frame {i} does not match the scenario layout")));
            }
        }
        if m != scenario.num_trps() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} TRP rows", scenario.num_trps()),
                got: format!("{m}"),
            });
        }
        if let Some(d) = &displacements {
            if let Some(p) = d.pairs.iter().find(|p| p.i == p.j || !(p.d_hat >= 0.0)) {
                return Err(Error::invalid(format!("invalid displacement pair ({}, {})", p.i, p.j)));
            }
        }
        Ok(Self {
            frames,
            masks,
            layout,
            trp_positions: scenario.trp_positions.clone(),
            ue_height_m: scenario.ue_height_m,
            meters_per_sample: scenario.meters_per_sample(),
            bounds: scenario.bounds,
            displacements,
        })
    }

    /// Builds masks from `policy`; `los_labels` is only needed by the oracle.
    pub fn from_frames(
        frames: Vec<PreprocessedFrame>,
        scenario: &Scenario,
        policy: MaskPolicy,
        los_labels: Option<&Array2<bool>>,
        displacements: Option<DisplacementSet>,
    ) -> Result<Self> {
        let masks = build_masks(&frames, policy, &scenario.tdoa_layout(), los_labels)?;
        Self::new(frames, masks, scenario, displacements)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    fn terms<T: Real>(&self) -> Vec<Vec<Term<T>>> {
        let x: Vec<[T; 3]> = self
            .trp_positions
            .iter()
            .map(|p| crate::geometry::cast3(*p))
            .collect();
        self.frames
            .iter()
            .zip(&self.masks)
            .map(|(f, mask)| {
                self.layout
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask.nu[*i])
                    .map(|(i, e)| Term {
                        x_m: x[e.trp],
                        x_ref: x[e.reference],
                        range_diff: T::of(f.tdoa.values[i] * self.meters_per_sample),
                    })
                    .collect()
            })
            .collect()
    }

    fn displacement_lookup(&self) -> HashMap<(usize, usize), f64> {
        self.displacements
            .iter()
            .flat_map(|d| d.pairs.iter())
            .map(|p| ((p.i.min(p.j), p.i.max(p.j)), p.d_hat))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Term<T> {
    x_m: [T; 3],
    x_ref: [T; 3],
    range_diff: T,
}

fn frame_tdoa<T: Real>(u: [T; 2], terms: &[Term<T>], height: T) -> (T, [T; 2]) {
    let mut sum = T::zero();
    let mut g = [T::zero(); 2];
    for t in terms {
        let (r, d) = tdoa_residual_grad(u, t.x_m, t.x_ref, t.range_diff, height);
        sum += r;
        g[0] += d[0];
        g[1] += d[1];
    }
    (sum, g)
}

/// Loss components of one evaluation, all in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub tdoa: f64,
    pub displacement: f64,
    pub total: f64,
}

/// Loss value and parameter gradients of one minibatch.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub tdoa: f64,
    pub displacement: f64,
    pub total: f64,
    pub grads: Gradients<T>,
}

/// Precomputed per-frame loss terms for one model precision.
pub struct LossContext<'a, T> {
    data: &'a TrainingDataset,
    terms: Vec<Vec<Term<T>>>,
    height: T,
    normalization: LossNormalization,
}

impl<'a, T: Real> LossContext<'a, T> {
    pub fn new(data: &'a TrainingDataset, normalization: LossNormalization) -> Self {
        Self {
            data,
            terms: data.terms(),
            height: T::of(data.ue_height_m),
            normalization,
        }
    }

    fn retained(&self, frame: usize) -> usize {
        self.terms[frame].len()
    }

    fn denominator(&self, frames: &[usize]) -> f64 {
        match self.normalization {
            LossNormalization::Retained => frames.iter().map(|&f| self.retained(f)).sum::<usize>() as f64,
            LossNormalization::Fixed => (frames.len() * self.data.layout.len()) as f64,
        }
    }

    fn inputs(&self, frames: &[usize]) -> Vec<ArrayView2<'a, f64>> {
        frames.iter().map(|&f| self.data.frames[f].h_norm.view()).collect()
    }

    /// Masked TDoA loss over a batch of frame positions, with the
    /// gradient of the whole batch objective.
    pub fn tdoa_loss(&self, model: &ChartModel<T>, frames: &[usize]) -> Result<BatchLoss<T>> {
        if frames.is_empty() {
            return Err(Error::invalid("empty minibatch"));
        }
        let (u, tape) = model.forward_batch(&self.inputs(frames))?;
        let denom = self.denominator(frames);
        let mut upstream = Array2::zeros((frames.len(), 2));
        let mut sum = 0.0;
        if denom > 0.0 {
            let inv = T::of(1.0 / denom);
            for (b, &f) in frames.iter().enumerate() {
                let (s, g) = frame_tdoa([u[[b, 0]], u[[b, 1]]], &self.terms[f], self.height);
                sum += s.as_f64();
                upstream[[b, 0]] = g[0] * inv;
                upstream[[b, 1]] = g[1] * inv;
            }
        }
        let tdoa = if denom > 0.0 { sum / denom } else { 0.0 };
        let grads = model.backward(&tape, upstream.view())?;
        Ok(BatchLoss { tdoa, displacement: 0.0, total: tdoa, grads })
    }

    /// Siamese pair loss: masked TDoA terms of both frames of every pair
    /// plus `beta` times the mean displacement residual. Both branches run
    /// through the same parameters in one batch.
    pub fn joint_loss(&self, model: &ChartModel<T>, pairs: &[(usize, usize, f64)], beta: f64) -> Result<BatchLoss<T>> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty minibatch"));
        }
        let p = pairs.len();
        let frames: Vec<usize> = pairs.iter().map(|q| q.0).chain(pairs.iter().map(|q| q.1)).collect();
        let (u, tape) = model.forward_batch(&self.inputs(&frames))?;
        let at = |b: usize| [u[[b, 0]], u[[b, 1]]];
        let mut upstream = Array2::zeros((2 * p, 2));

        let denom = self.denominator(&frames);
        let mut tdoa_sum = 0.0;
        if denom > 0.0 {
            let inv = T::of(1.0 / denom);
            for (b, &f) in frames.iter().enumerate() {
                let (s, g) = frame_tdoa(at(b), &self.terms[f], self.height);
                tdoa_sum += s.as_f64();
                upstream[[b, 0]] += g[0] * inv;
                upstream[[b, 1]] += g[1] * inv;
            }
        }
        let tdoa = if denom > 0.0 { tdoa_sum / denom } else { 0.0 };

        let w = T::of(beta / p as f64);
        let mut disp_sum = 0.0;
        for (k, &(_, _, d_hat)) in pairs.iter().enumerate() {
            let (r, g) = displacement_residual_grad(at(k), at(p + k), T::of(d_hat));
            disp_sum += r.as_f64();
            upstream[[k, 0]] += w * g[0];
            upstream[[k, 1]] += w * g[1];
            upstream[[p + k, 0]] -= w * g[0];
            upstream[[p + k, 1]] -= w * g[1];
        }
        let displacement = disp_sum / p as f64;
        let grads = model.backward(&tape, upstream.view())?;
        Ok(BatchLoss { tdoa, displacement, total: tdoa + beta * displacement, grads })
    }

    /// Full-dataset loss without gradients.
    pub fn evaluate(&self, model: &ChartModel<T>, mode: TrainMode, beta: f64, epoch: usize) -> Result<LossRecord> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        let u = model.embed(&self.inputs(&all))?;
        let denom = self.denominator(&all);
        let tdoa = if denom > 0.0 {
            all.iter()
                .map(|&f| {
                    frame_tdoa([T::of(u[f][0]), T::of(u[f][1])], &self.terms[f], self.height)
                        .0
                        .as_f64()
                })
                .sum::<f64>()
                / denom
        } else {
            0.0
        };
        let pos: HashMap<usize, usize> = self
            .data
            .frames
            .iter()
            .enumerate()
            .map(|(k, f)| (f.source_index, k))
            .collect();
        let mut disp = 0.0;
        let mut count = 0usize;
        for q in self.data.displacements.iter().flat_map(|d| d.pairs.iter()) {
            if let (Some(&a), Some(&b)) = (pos.get(&q.i), pos.get(&q.j)) {
                disp += displacement_loss(u[a], u[b], q.d_hat);
                count += 1;
            }
        }
        let displacement = if count > 0 { disp / count as f64 } else { 0.0 };
        let total = match mode {
            TrainMode::TdoaOnly => tdoa,
            TrainMode::TdoaPlusDisplacement => tdoa + beta * displacement,
        };
        Ok(LossRecord { epoch, tdoa, displacement, total })
    }
}

/// Uniform pairs `(i, j)`, `i != j`, redrawn until `|t_j - t_i| <= epsilon_s`.
pub fn sample_pairs(timestamps: &[f64], epsilon_s: f64, count: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let n = timestamps.len();
    if n < 2 {
        return Err(Error::invalid("pair sampling needs at least two frames"));
    }
    let mut sorted = timestamps.to_vec();
    sorted.sort_by(f64::total_cmp);
    if !sorted.windows(2).any(|w| w[1] - w[0] <= epsilon_s) {
        return Err(Error::NoAdmissiblePair { epsilon_s });
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j && (timestamps[j] - timestamps[i]).abs() <= epsilon_s {
            out.push((i, j));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: ChartModel<T>,
    /// Entry 0 is the initialized model; entry `e` follows epoch `e`.
    pub history: Vec<LossRecord>,
}

/// Output frame that maps the network's unit-scale output onto the area.
pub fn area_output_frame(bounds: &Bounds) -> OutputFrame {
    OutputFrame {
        center: bounds.center(),
        scale: 0.5 * bounds.width(0).max(bounds.width(1)),
    }
}

/// Adam training loop. Deterministic for a given dataset and config.
pub fn train<T: Real>(data: &TrainingDataset, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let (m, c) = data.frames[0].h_norm.dim();
    let mut model = ChartModel::<T>::new(config.widths.model_config(m, c), derive_seed(config.rng_seed, "init"))?;
    model.set_output_frame(area_output_frame(&data.bounds));
    let ctx = LossContext::<T>::new(data, config.normalization);

    let lookup = data.displacement_lookup();
    if config.mode == TrainMode::TdoaPlusDisplacement {
        let d = data
            .displacements
            .as_ref()
            .ok_or_else(|| Error::invalid("displacement mode needs displacement measurements"))?;
        if config.epsilon_s > d.epsilon_s {
            return Err(Error::invalid(format!(
                "pair window {} s exceeds the measured displacement window {} s",
                config.epsilon_s, d.epsilon_s
            )));
        }
    }

    let mut history = vec![ctx.evaluate(&model, config.mode, config.beta, 0)?];
    let mut adam = Adam::<T>::new(config.optimizer, model.num_params());
    let timestamps = data.timestamps();
    let shuffle_seed = derive_seed(config.rng_seed, "shuffle");
    let pair_seed = derive_seed(config.rng_seed, "pairs");
    let eligible: Vec<usize> = (0..data.len()).filter(|&f| ctx.retained(f) > 0).collect();

    for epoch in 1..=config.epochs {
        let diverged = || Error::Diverged { epoch };
        let mut step = |model: &mut ChartModel<T>, loss: BatchLoss<T>| -> Result<()> {
            if !loss.total.is_finite() || !loss.grads.is_finite() {
                return Err(diverged());
            }
            adam.update(model.params_mut(), loss.grads.as_slice());
            Ok(())
        };
        match config.mode {
            TrainMode::TdoaOnly => {
                let mut order = eligible.clone();
                order.shuffle(&mut stream_rng(shuffle_seed, epoch as u64));
                for batch in order.chunks(config.batch_size) {
                    let loss = ctx.tdoa_loss(&model, batch)?;
                    step(&mut model, loss)?;
                }
            }
            TrainMode::TdoaPlusDisplacement => {
                let count = config.pairs_per_epoch.unwrap_or(data.len());
                let pairs = sample_pairs(&timestamps, config.epsilon_s, count, &mut stream_rng(pair_seed, epoch as u64))?;
                let pairs = pairs
                    .into_iter()
                    .map(|(i, j)| {
                        let (si, sj) = (data.frames[i].source_index, data.frames[j].source_index);
                        lookup
                            .get(&(si.min(sj), si.max(sj)))
                            .map(|&d| (i, j, d))
                            .ok_or_else(|| Error::invalid(format!("no displacement measurement for frames ({si}, {sj})")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for batch in pairs.chunks(config.batch_size) {
                    let loss = ctx.joint_loss(&model, batch, config.beta)?;
                    step(&mut model, loss)?;
                }
            }
        }
        let record = ctx.evaluate(&model, config.mode, config.beta, epoch)?;
        if !record.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

/// Embeds raw `M x C` inputs; no TDoA, mask or displacement data involved.
pub fn predict<T: Real>(model: &ChartModel<T>, inputs: &[ArrayView2<f64>]) -> Result<Vec<[f64; 2]>> {
    model.embed(inputs)
}

/// Predicted trajectory over preprocessed frames.
pub fn predict_frames<T: Real>(model: &ChartModel<T>, frames: &[PreprocessedFrame]) -> Result<TrajectoryEstimate> {
    let inputs: Vec<_> = frames.iter().map(|f| f.h_norm.view()).collect();
    let u = predict(model, &inputs)?;
    Ok(TrajectoryEstimate {
        timestamps: frames.iter().map(|f| f.timestamp).collect(),
        source_index: frames.iter().map(|f| f.source_index).collect(),
        positions: u.into_iter().map(Some).collect(),
    })
}

#[cfg(test)]
mod tests;
