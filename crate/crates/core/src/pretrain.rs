//! Motion-biased masked pretraining.
//!
//! Patches that are behavioral, or sit next to a behavioral patch, are masked
//! with probability `rho_b`; all others with `rho_n`. The encoder sees a mask
//! token in place of every masked patch. Two linear heads read the contextual
//! embeddings: one reconstructs the `S * 6` patch values, the other predicts a
//! 26-way direction class for each point. The objective is
//!
//! ```text
//! L_m = L_MD + lambda * L_MSE
//! L_MSE = (1 / M) * sum over masked points of |x_hat - x|^2
//! L_MD  = mean over masked, non-stationary points of -log softmax(z)[y]
//! ```

use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::direction::{label_trajectory_directions, DEFAULT_EPS, NUM_DIRECTIONS};
use crate::error::{Error, Result};
use crate::flightgen::derive_seed;
use crate::nn::encoder::Mode;
use crate::nn::{accumulate, join, log_sum_exp, AdamW, AdamWConfig, EncoderConfig, Linear, Mat, Parameters, PatchEncoder};
use crate::patching::{patch_trajectory, PatchSequence, PatchingConfig};
use crate::trajectory::{Trajectory, NUM_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskTier {
    /// Behavioral, or at patch-order distance 1 from a behavioral patch.
    Behavioral,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub tier: Vec<MaskTier>,
    /// Set when no patch was drawn and one was masked by the fallback rule.
    pub forced: bool,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub rho_b: f64,
    pub rho_n: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            rho_b: 0.4,
            rho_n: 0.2,
            lambda: 1.0,
            epochs: 20,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.rho_n && self.rho_n < self.rho_b && self.rho_b <= 1.0) {
            return Err(Error::Config(format!(
                "masking probabilities need 0 <= rho_n < rho_b <= 1, got rho_n={} rho_b={}",
                self.rho_n, self.rho_b
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Tier of every patch.
pub fn mask_tiers(seq: &PatchSequence) -> Vec<MaskTier> {
    let n = seq.patches.len();
    (0..n)
        .map(|i| {
            let near = (i.saturating_sub(1)..=(i + 1).min(n - 1)).any(|j| seq.patches[j].is_behavioral);
            if near {
                MaskTier::Behavioral
            } else {
                MaskTier::Other
            }
        })
        .collect()
}

/// Independent Bernoulli draw per patch at the probability of its tier. An
/// empty draw masks the patch with the largest peak angle inside the highest
/// non-empty tier.
pub fn sample_mask<R: Rng>(seq: &PatchSequence, rho_b: f64, rho_n: f64, rng: &mut R) -> MaskPlan {
    let tier = mask_tiers(seq);
    let mut masked: Vec<bool> = tier
        .iter()
        .map(|t| {
            let p = match t {
                MaskTier::Behavioral => rho_b,
                MaskTier::Other => rho_n,
            };
            rng.random::<f64>() < p
        })
        .collect();
    let mut forced = false;
    if !masked.iter().any(|m| *m) && !masked.is_empty() {
        let top = if tier.contains(&MaskTier::Behavioral) {
            MaskTier::Behavioral
        } else {
            MaskTier::Other
        };
        let mut best: Option<usize> = None;
        for i in (0..tier.len()).filter(|&i| tier[i] == top) {
            if best.is_none_or(|b| seq.patches[i].peak_angle > seq.patches[b].peak_angle) {
                best = Some(i);
            }
        }
        masked[best.expect("non-empty tier")] = true;
        forced = true;
    }
    MaskPlan { masked, tier, forced }
}

/// Encoder plus the reconstruction and direction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainModel {
    pub encoder: PatchEncoder,
    /// `d_model -> S * 6`.
    pub recon: Linear,
    /// `d_model -> S * 26`.
    pub direction: Linear,
}

impl PretrainModel {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let encoder = PatchEncoder::new(config, rng)?;
        Ok(Self {
            recon: Linear::new(config.d_model, config.patch_width(), rng),
            direction: Linear::new(config.d_model, config.patch_size * NUM_DIRECTIONS, rng),
            encoder,
        })
    }
}

impl Parameters for PretrainModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.recon.collect(&join(prefix, "recon"), out);
        self.direction.collect(&join(prefix, "direction"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.encoder.collect_mut(out);
        self.recon.collect_mut(out);
        self.direction.collect_mut(out);
    }
}

/// `N x (S * 6)` reconstructed patch values.
pub fn reconstruct(contextual: &Mat, head: &Linear) -> Mat {
    head.forward(contextual)
}

/// `N x S x 26` direction logits.
pub fn direction_logits(contextual: &Mat, head: &Linear) -> Array3<f64> {
    let n = contextual.nrows();
    let s = head.output_dim() / NUM_DIRECTIONS;
    head.forward(contextual)
        .into_shape_with_order((n, s, NUM_DIRECTIONS))
        .expect("row-major logits")
}

fn check_plan(rows: usize, plan: &MaskPlan) -> Result<()> {
    if plan.masked.len() != rows {
        return Err(Error::Shape(format!("mask of {} for {} patches", plan.masked.len(), rows)));
    }
    Ok(())
}

/// Reconstruction loss and its gradient with respect to `recon`.
pub fn mse_loss_with_grad(recon: &Mat, target: &Mat, plan: &MaskPlan) -> Result<(f64, Mat, usize)> {
    if recon.dim() != target.dim() {
        return Err(Error::Shape(format!("recon {:?} vs target {:?}", recon.dim(), target.dim())));
    }
    check_plan(recon.nrows(), plan)?;
    let points = recon.ncols() / NUM_FEATURES * plan.masked_count();
    if points == 0 {
        return Err(Error::Precondition("reconstruction loss needs at least one masked point".into()));
    }
    let mut grad = Mat::zeros(recon.raw_dim());
    let mut sum = 0.0;
    for (i, _) in plan.masked.iter().enumerate().filter(|(_, m)| **m) {
        let diff = &recon.row(i) - &target.row(i);
        sum += diff.dot(&diff);
        grad.row_mut(i).assign(&(diff * (2.0 / points as f64)));
    }
    Ok((sum / points as f64, grad, points))
}

pub fn mse_loss(recon: &Mat, target: &Mat, plan: &MaskPlan) -> Result<f64> {
    Ok(mse_loss_with_grad(recon, target, plan)?.0)
}

/// Direction loss and its gradient with respect to the logits. `labels` has
/// one entry per patch point, row-major over `(patch, point)`; `None` marks
/// stationary pairs and trajectory endpoints.
pub fn md_loss_with_grad(logits: &Array3<f64>, labels: &[Option<usize>], plan: &MaskPlan) -> Result<(f64, Array3<f64>, usize)> {
    let (n, s, c) = logits.dim();
    if labels.len() != n * s {
        return Err(Error::Shape(format!("{} labels for {n} x {s} points", labels.len())));
    }
    check_plan(n, plan)?;
    let eligible: Vec<(usize, usize, usize)> = (0..n)
        .filter(|&i| plan.masked[i])
        .flat_map(|i| (0..s).filter_map(move |j| labels[i * s + j].map(|y| (i, j, y))))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Precondition("direction loss needs a masked, non-stationary point".into()));
    }
    let count = eligible.len() as f64;
    let mut grad = Array3::zeros(logits.raw_dim());
    let mut sum = 0.0;
    for &(i, j, y) in &eligible {
        if y >= c {
            return Err(Error::ClassOutOfRange(y));
        }
        let z = logits.slice(ndarray::s![i, j, ..]).to_vec();
        let lse = log_sum_exp(&z);
        sum += lse - z[y];
        let mut g = grad.slice_mut(ndarray::s![i, j, ..]);
        for k in 0..c {
            g[k] = (z[k] - lse).exp() / count;
        }
        g[y] -= 1.0 / count;
    }
    Ok((sum / count, grad, eligible.len()))
}

pub fn md_loss(logits: &Array3<f64>, labels: &[Option<usize>], plan: &MaskPlan) -> Result<f64> {
    Ok(md_loss_with_grad(logits, labels, plan)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_md: f64,
    pub l_m: f64,
    pub masked_points: usize,
}

pub fn combined_loss(l_mse: f64, l_md: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        l_mse,
        l_md,
        l_m: l_md + lambda * l_mse,
        masked_points: 0,
    }
}

/// One trajectory prepared for pretraining.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub id: String,
    pub sequence: PatchSequence,
    /// `N x (S * 6)` patch values; also the reconstruction target.
    pub values: Mat,
    /// Direction class of the pair starting at each patch point.
    pub labels: Vec<Option<usize>>,
}

/// Patches a normalized trajectory and labels every patch point with the
/// direction towards its successor on the denoised trajectory.
pub fn prepare_sample(traj: &Trajectory, config: &PatchingConfig) -> Result<PretrainSample> {
    let patched = patch_trajectory(traj, config)?;
    let pair_labels = label_trajectory_directions(&patched.trajectory, DEFAULT_EPS);
    let seq = patched.patches;
    let width = config.patch_width();
    let mut values = Mat::zeros((seq.len(), width));
    let mut labels = Vec::with_capacity(seq.len() * config.patch_size);
    for (i, p) in seq.patches.iter().enumerate() {
        values.row_mut(i).assign(&ndarray::ArrayView1::from(&p.values));
        labels.extend(p.source_indices.iter().map(|&j| pair_labels.get(j).and_then(|l| l.class_id())));
    }
    Ok(PretrainSample {
        id: traj.id.clone(),
        sequence: seq,
        values,
        labels,
    })
}

pub fn prepare_samples(dataset: &[Trajectory], config: &PatchingConfig) -> Result<Vec<PretrainSample>> {
    dataset
        .iter()
        .map(|t| prepare_sample(t, config).map_err(|e| Error::Precondition(format!("trajectory {}: {e}", t.id))))
        .collect()
}

/// Loss of one sample under a fixed mask; accumulates gradients when `grad`
/// is given.
pub fn sample_loss<R: Rng>(
    model: &PretrainModel,
    sample: &PretrainSample,
    plan: &MaskPlan,
    lambda: f64,
    mode: &mut Mode<'_, R>,
    grad: Option<&mut PretrainModel>,
) -> Result<LossBreakdown> {
    let trace = model.encoder.forward(&sample.values, Some(&plan.masked), mode)?;
    let recon = reconstruct(&trace.output, &model.recon);
    let logits = direction_logits(&trace.output, &model.direction);
    let (l_mse, d_recon, points) = mse_loss_with_grad(&recon, &sample.values, plan)?;
    let (l_md, d_logits, _) = md_loss_with_grad(&logits, &sample.labels, plan)?;
    let mut out = combined_loss(l_mse, l_md, lambda);
    out.masked_points = points;
    if let Some(grad) = grad {
        let n = d_logits.dim().0;
        let d_logits = d_logits.into_shape_with_order((n, model.direction.output_dim())).expect("contiguous");
        let mut d_ctx = model.recon.backward(&trace.output, &(d_recon * lambda), &mut grad.recon);
        d_ctx += &model.direction.backward(&trace.output, &d_logits, &mut grad.direction);
        model.encoder.backward(&trace, &d_ctx, &mut grad.encoder);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    /// Evaluation losses (dropout off, fixed evaluation masks).
    pub l_mse: f64,
    pub l_md: f64,
    pub l_m: f64,
    pub masked_points: usize,
    /// Mean training objective over the epoch's updates; equals `l_m` at epoch 0.
    pub train_l_m: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub curve: Vec<EpochRecord>,
}

impl PretrainOutcome {
    pub fn initial(&self) -> &EpochRecord {
        &self.curve[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.curve.last().expect("curve holds the initial record")
    }
}

const EVAL_STREAM: u64 = u64::MAX - 1;
const SHUFFLE_STREAM: u64 = u64::MAX;

fn evaluate(model: &PretrainModel, samples: &[PretrainSample], eval_plans: &[MaskPlan], lambda: f64) -> Result<LossBreakdown> {
    let mut mse = 0.0;
    let mut md = 0.0;
    let mut points = 0;
    for (sample, plan) in samples.iter().zip(eval_plans) {
        let b = sample_loss::<ChaCha8Rng>(model, sample, plan, lambda, &mut Mode::Eval, None)?;
        mse += b.l_mse;
        md += b.l_md;
        points += b.masked_points;
    }
    let m = samples.len() as f64;
    let mut out = combined_loss(mse / m, md / m, lambda);
    out.masked_points = points;
    Ok(out)
}

/// Masks used for every evaluation pass of a run.
pub fn evaluation_plans(samples: &[PretrainSample], config: &PretrainConfig) -> Vec<MaskPlan> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, EVAL_STREAM, i as u64));
            sample_mask(&s.sequence, config.rho_b, config.rho_n, &mut rng)
        })
        .collect()
}

/// Trains `model` on `samples`. Each epoch shuffles the sample order, runs
/// minibatch AdamW steps and then evaluates on fixed masks. Every sample draws
/// its mask and dropout from a seed derived from `(seed, epoch, sample index)`.
pub fn pretrain(samples: &[PretrainSample], mut model: PretrainModel, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Precondition("pretraining needs at least one sample".into()));
    }
    let eval_plans = evaluation_plans(samples, config);
    let start = Instant::now();
    let init = evaluate(&model, samples, &eval_plans, config.lambda)?;
    let mut curve = vec![EpochRecord {
        epoch: 0,
        l_mse: init.l_mse,
        l_md: init.l_md,
        l_m: init.l_m,
        masked_points: init.masked_points,
        train_l_m: init.l_m,
        seconds: start.elapsed().as_secs_f64(),
    }];
    log::info!("epoch 0 l_m={:.5} l_mse={:.5} l_md={:.5}", init.l_m, init.l_mse, init.l_md);
    let mut opt = AdamW::new(config.optimizer, &model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut shuffle);
        let mut train_sum = 0.0;
        for (batch_id, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad = model.zeros_like();
            let mut step_grad = model.zeros_like();
            for &idx in batch {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, idx as u64));
                let plan = sample_mask(&samples[idx].sequence, config.rho_b, config.rho_n, &mut rng);
                let b = sample_loss(&model, &samples[idx], &plan, config.lambda, &mut Mode::Train(&mut rng), Some(&mut step_grad))?;
                if !b.l_m.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch} batch {batch_id} sample {}: l_mse={} l_md={}",
                        samples[idx].id, b.l_mse, b.l_md
                    )));
                }
                train_sum += b.l_m;
            }
            accumulate(&mut grad, &step_grad, 1.0 / batch.len() as f64);
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch} batch {batch_id}: gradient")));
            }
            opt.step(&mut model, &grad);
        }
        let ev = evaluate(&model, samples, &eval_plans, config.lambda)?;
        if !ev.l_m.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch} evaluation: l_mse={} l_md={}",
                ev.l_mse, ev.l_md
            )));
        }
        log::info!("epoch {epoch} l_m={:.5} l_mse={:.5} l_md={:.5}", ev.l_m, ev.l_mse, ev.l_md);
        curve.push(EpochRecord {
            epoch,
            l_mse: ev.l_mse,
            l_md: ev.l_md,
            l_m: ev.l_m,
            masked_points: ev.masked_points,
            train_l_m: train_sum / samples.len() as f64,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(PretrainOutcome { model, curve })
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - f| / max(|a|, |f|)` over entries whose absolute
    /// difference exceeds the floor.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
}

/// Checks `dL_m/dtheta` for every parameter entry of `model` on one sample
/// with dropout off.
pub fn gradient_check(model: &PretrainModel, sample: &PretrainSample, plan: &MaskPlan, lambda: f64, step: f64, abs_floor: f64) -> Result<GradCheck> {
    let mut analytic = model.zeros_like();
    sample_loss::<ChaCha8Rng>(model, sample, plan, lambda, &mut Mode::Eval, Some(&mut analytic))?;
    let flat_grad: Vec<f64> = analytic.named_tensors().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect();
    let mut probe = model.clone();
    let mut k = 0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let tensor_count = probe.tensors_mut().len();
    for t in 0..tensor_count {
        let len = probe.tensors_mut()[t].len();
        for e in 0..len {
            let original = probe.tensors_mut()[t].as_slice_mut().expect("standard layout")[e];
            let value_at = |v: f64, probe: &mut PretrainModel| -> Result<f64> {
                probe.tensors_mut()[t].as_slice_mut().expect("standard layout")[e] = v;
                Ok(sample_loss::<ChaCha8Rng>(probe, sample, plan, lambda, &mut Mode::Eval, None)?.l_m)
            };
            let plus = value_at(original + step, &mut probe)?;
            let minus = value_at(original - step, &mut probe)?;
            value_at(original, &mut probe)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = flat_grad[k];
            let abs = (a - numeric).abs();
            worst_abs = worst_abs.max(abs);
            if abs > abs_floor {
                worst_rel = worst_rel.max(abs / a.abs().max(numeric.abs()));
            }
            k += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst_rel,
        max_absolute_error: worst_abs,
        checked: k,
    })
}

/// Parameters of `after` that differ bitwise from `before`.
pub fn changed_tensors<P: Parameters>(before: &P, after: &P) -> Vec<String> {
    before
        .named_tensors()
        .into_iter()
        .zip(after.named_tensors())
        .filter(|((_, a), (_, b))| a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()))
        .map(|((name, _), _)| name)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_normal;
    use crate::patching::Patch;

    fn seq_from_flags(flags: &[bool], peaks: &[f64]) -> PatchSequence {
        PatchSequence {
            patches: flags
                .iter()
                .zip(peaks)
                .map(|(&b, &p)| Patch {
                    values: vec![0.0; 6],
                    source_indices: vec![0],
                    is_behavioral: b,
                    span: 1,
                    peak_angle: p,
                })
                .collect(),
            n: flags.len(),
            clusters_found: 0,
            centers: vec![],
        }
    }

    fn plan(masked: &[bool]) -> MaskPlan {
        MaskPlan {
            masked: masked.to_vec(),
            tier: vec![MaskTier::Other; masked.len()],
            forced: false,
        }
    }

    #[test]
    fn tiers_cover_neighbors() {
        let seq = seq_from_flags(&[false, false, true, false, false, false, true], &[0.0; 7]);
        use MaskTier::*;
        assert_eq!(mask_tiers(&seq), vec![Other, Behavioral, Behavioral, Behavioral, Other, Behavioral, Behavioral]);
    }

    #[test]
    fn mask_extremes_and_fallback() {
        let seq = seq_from_flags(&[false, true, false, false, false], &[1.0, 50.0, 3.0, 90.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = sample_mask(&seq, 1.0, 0.0, &mut rng);
        assert_eq!(full.masked, vec![true, true, true, false, false]);
        assert!(!full.forced);
        for _ in 0..20 {
            let p = sample_mask(&seq, 0.0, 0.0, &mut rng);
            assert_eq!(p.masked_count(), 1);
            assert!(p.forced);
            // patch 3 has the largest angle but sits in the lower tier
            assert!(p.masked[1]);
        }
        let flat = seq_from_flags(&[false; 4], &[1.0, 5.0, 5.0, 2.0]);
        assert_eq!(sample_mask(&flat, 0.0, 0.0, &mut rng).masked, vec![false, true, false, false]);
    }

    #[test]
    fn mse_examples_and_oracle() {
        let target = init_normal(3, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let p = plan(&[true, false, true]);
        assert_eq!(mse_loss(&target, &target, &p).unwrap(), 0.0);
        let mut shifted = target.clone();
        for i in 0..3 {
            shifted[[i, 0]] += 1.0;
            shifted[[i, 6]] += 1.0;
        }
        assert!((mse_loss(&shifted, &target, &p).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(mse_loss(&target, &target, &plan(&[false; 3])), Err(Error::Precondition(_))));
    }

    #[test]
    fn md_examples() {
        let labels: Vec<Option<usize>> = vec![Some(3), Some(7), None, Some(25)];
        let p = plan(&[true, true]);
        let uniform = Array3::zeros((2, 2, NUM_DIRECTIONS));
        assert!((md_loss(&uniform, &labels, &p).unwrap() - 26f64.ln()).abs() < 1e-12);
        let margin = |m: f64| {
            let mut z = Array3::zeros((2, 2, NUM_DIRECTIONS));
            for (k, l) in labels.iter().enumerate() {
                if let Some(y) = l {
                    z[[k / 2, k % 2, *y]] = m;
                }
            }
            md_loss(&z, &labels, &p).unwrap()
        };
        assert!(margin(10.0) < margin(5.0));
        assert!(margin(10.0) < 2e-3);
        let stationary = vec![None; 4];
        assert!(matches!(md_loss(&uniform, &stationary, &p), Err(Error::Precondition(_))));
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(2.0, 3.0, 0.0).l_m, 3.0);
        assert_eq!(combined_loss(2.0, 3.0, 1.0).l_m, 5.0);
        assert_eq!(combined_loss(0.25, 1.5, 0.5).l_m, 1.625);
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let ctx = init_normal(3, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let recon = reconstruct(&ctx, &Linear::zeros(8, 24));
        assert_eq!(recon.dim(), (3, 24));
        assert!(recon.iter().all(|v| *v == 0.0));
        let logits = direction_logits(&ctx, &Linear::zeros(8, 4 * NUM_DIRECTIONS));
        assert_eq!(logits.dim(), (3, 4, NUM_DIRECTIONS));
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    fn turning_trajectory(n: usize) -> Trajectory {
        use crate::trajectory::TrajectoryPoint;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = (0..n)
            .map(|i| {
                let t = i as f64;
                let (x, y) = if i < n / 2 { (t, 0.0) } else { (n as f64 / 2.0, t - n as f64 / 2.0) };
                let jitter = rng.random::<f64>() * 0.01;
                TrajectoryPoint::new(t, [x + jitter, y, 0.1 * t, 1.0, 0.0, 0.1])
            })
            .collect();
        Trajectory::new("turn", pts)
    }

    fn tiny_setup() -> (PretrainModel, PretrainSample) {
        let cfg = EncoderConfig {
            patch_size: 4,
            num_patches: 2,
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 16,
            dropout: 0.0,
        };
        let model = PretrainModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let sample = prepare_sample(&turning_trajectory(24), &PatchingConfig::with_geometry(4, 2)).unwrap();
        (model, sample)
    }

    #[test]
    fn labels_follow_source_indices() {
        let (_, sample) = tiny_setup();
        assert_eq!(sample.values.dim(), (2, 24));
        assert_eq!(sample.labels.len(), 8);
        let last = *sample.sequence.patches[1].source_indices.last().unwrap();
        assert_eq!(sample.labels[7].is_none(), last + 1 == sample.sequence.n);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (model, sample) = tiny_setup();
        let p = plan(&[true, false]);
        let check = gradient_check(&model, &sample, &p, 0.7, 1e-5, 1e-6).unwrap();
        assert_eq!(check.checked, model.num_params());
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (model, sample) = tiny_setup();
        let cfg = PretrainConfig {
            epochs: 1,
            optimizer: AdamWConfig {
                lr: 0.0,
                ..AdamWConfig::default()
            },
            ..PretrainConfig::default()
        };
        let out = pretrain(std::slice::from_ref(&sample), model.clone(), &cfg).unwrap();
        assert!(changed_tensors(&model, &out.model).is_empty());
        assert_eq!(out.curve.len(), 2);
    }

    #[test]
    fn training_is_deterministic_and_logs_identity() {
        let (model, sample) = tiny_setup();
        let samples = vec![sample.clone(), sample];
        let cfg = PretrainConfig {
            epochs: 3,
            batch_size: 1,
            seed: 9,
            ..PretrainConfig::default()
        };
        let a = pretrain(&samples, model.clone(), &cfg).unwrap();
        let b = pretrain(&samples, model, &cfg).unwrap();
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.l_m.to_bits(), y.l_m.to_bits());
            assert_eq!(x.train_l_m.to_bits(), y.train_l_m.to_bits());
            assert_eq!(x.l_m, x.l_md + cfg.lambda * x.l_mse);
        }
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn config_validation() {
        assert!(PretrainConfig::default().validate().is_ok());
        let bad = PretrainConfig {
            rho_n: 0.4,
            ..PretrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
