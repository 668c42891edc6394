//! Task heads on top of the patch encoder: multi-horizon prediction (FTP),
//! flight recognition (FR) and anomaly detection (AD).
//!
//! The FTP head reads the pooled representation concatenated with the last
//! patch's contextual embedding and emits all `H_max` future positions in one
//! pass. Its outputs are displacements from the last observed point in
//! normalized units, so a zero head predicts "stay where you are".

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flightgen::derive_seed;
use crate::nn::encoder::{EncoderTrace, Mode};
use crate::nn::{accumulate, gelu, gelu_grad, join, log_sum_exp, logistic, mean_rows, AdamW, AdamWConfig, Linear, Mat, Parameters, PatchEncoder};
use crate::patching::{patch_trajectory, PatchingConfig};
use crate::trajectory::{normalize, NormStats, Trajectory};

/// Prediction horizons, in trajectory steps.
pub const HORIZONS: [usize; 5] = [1, 3, 15, 30, 60];

/// Normalization and patching applied to every raw trajectory before it
/// reaches the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputPipeline {
    pub norm: NormStats,
    pub patching: PatchingConfig,
}

/// Encoder-ready view of one trajectory.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub values: Mat,
    /// Last observed (lon, lat, alt), normalized.
    pub last_position: [f64; 3],
}

impl InputPipeline {
    pub fn prepare(&self, traj: &Trajectory) -> Result<PreparedInput> {
        let z = normalize(traj, &self.norm);
        let patched = patch_trajectory(&z, &self.patching)?;
        let last = patched
            .trajectory
            .points
            .last()
            .ok_or_else(|| Error::Precondition("empty trajectory".into()))?
            .position();
        let seq = &patched.patches;
        let mut values = Mat::zeros((seq.len(), self.patching.patch_width()));
        for (i, p) in seq.patches.iter().enumerate() {
            values.row_mut(i).assign(&ndarray::ArrayView1::from(&p.values));
        }
        Ok(PreparedInput {
            values,
            last_position: last,
        })
    }
}

/// Contextual patch embeddings and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub per_patch: Mat,
    pub pooled: Vec<f64>,
}

pub fn embed(encoder: &PatchEncoder, pipeline: &InputPipeline, traj: &Trajectory) -> Result<Representation> {
    let input = pipeline.prepare(traj)?;
    let per_patch = encoder.contextual(&input.values)?;
    let pooled = mean_rows(&per_patch).row(0).to_vec();
    Ok(Representation { per_patch, pooled })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Ftp,
    Fr,
    Ad,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Ftp => "ftp",
            HeadKind::Fr => "fr",
            HeadKind::Ad => "ad",
        }
    }
}

/// `[pooled, last patch] -> H_max x 3` normalized displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct FtpHead {
    pub h_max: usize,
    pub linear: Linear,
}

/// One hidden layer perceptron on the pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Ftp(FtpHead),
    Fr(MlpHead),
    Ad(MlpHead),
}

impl FtpHead {
    pub fn new<R: Rng>(d_model: usize, h_max: usize, rng: &mut R) -> Self {
        let mut linear = Linear::new(2 * d_model, h_max * 3, rng);
        linear.w.mapv_inplace(|v| v * 0.1);
        Self { h_max, linear }
    }

    pub fn zeros(d_model: usize, h_max: usize) -> Self {
        Self {
            h_max,
            linear: Linear::zeros(2 * d_model, h_max * 3),
        }
    }
}

impl MlpHead {
    pub fn new<R: Rng>(d_model: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(d_model, hidden, rng),
            out: Linear::new(hidden, outputs, rng),
        }
    }

    pub fn zeros(d_model: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            hidden: Linear::zeros(d_model, hidden),
            out: Linear::zeros(hidden, outputs),
        }
    }

    pub fn outputs(&self) -> usize {
        self.out.output_dim()
    }

    fn forward(&self, pooled: &Mat) -> (Mat, Mat) {
        let pre = self.hidden.forward(pooled);
        let out = self.out.forward(&pre.mapv(gelu));
        (out, pre)
    }

    fn backward(&self, pooled: &Mat, pre: &Mat, dout: &Mat, grad: &mut MlpHead) -> Mat {
        let dact = self.out.backward(&pre.mapv(gelu), dout, &mut grad.out);
        let dpre = dact * &pre.mapv(gelu_grad);
        self.hidden.backward(pooled, &dpre, &mut grad.hidden)
    }
}

impl Parameters for FtpHead {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.linear.collect(&join(prefix, "linear"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.linear.collect_mut(out);
    }
}

impl Parameters for MlpHead {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.hidden.collect(&join(prefix, "hidden"), out);
        self.out.collect(&join(prefix, "out"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.hidden.collect_mut(out);
        self.out.collect_mut(out);
    }
}

impl Parameters for Head {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        match self {
            Head::Ftp(h) => h.collect(prefix, out),
            Head::Fr(h) | Head::Ad(h) => h.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        match self {
            Head::Ftp(h) => h.collect_mut(out),
            Head::Fr(h) | Head::Ad(h) => h.collect_mut(out),
        }
    }
}

fn ftp_input(contextual: &Mat) -> Mat {
    let last = contextual.slice(s![contextual.nrows() - 1.., ..]);
    concatenate![Axis(1), mean_rows(contextual), last]
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Ftp(_) => HeadKind::Ftp,
            Head::Fr(_) => HeadKind::Fr,
            Head::Ad(_) => HeadKind::Ad,
        }
    }

    /// Raw head output as a `1 x k` row: displacements, class logits or the
    /// anomaly logit.
    pub fn forward(&self, contextual: &Mat) -> Mat {
        match self {
            Head::Ftp(h) => h.linear.forward(&ftp_input(contextual)),
            Head::Fr(h) | Head::Ad(h) => h.forward(&mean_rows(contextual)).0,
        }
    }

    /// Loss on one example and, when `grad` is given, accumulation of head
    /// gradients. Returns the loss and `dL/d contextual`.
    fn loss_and_backward(&self, contextual: &Mat, target: &Target, grad: Option<&mut Head>) -> Result<(f64, Option<Mat>)> {
        let n = contextual.nrows() as f64;
        match (self, target) {
            (Head::Ftp(h), Target::Future(y)) => {
                let x = ftp_input(contextual);
                let out = h.linear.forward(&x);
                let y = y.view().into_shape_with_order((1, y.len())).expect("contiguous target");
                if y.ncols() != out.ncols() {
                    return Err(Error::Shape(format!("target of {} for {} head outputs", y.ncols(), out.ncols())));
                }
                let diff = &out - &y;
                let k = diff.len() as f64;
                let loss = diff.iter().map(|v| v * v).sum::<f64>() / k;
                let Some(Head::Ftp(g)) = grad else {
                    return Ok((loss, None));
                };
                let dx = h.linear.backward(&x, &(diff * (2.0 / k)), &mut g.linear);
                let d = contextual.ncols();
                let mut dctx = Mat::from_elem(contextual.raw_dim(), 0.0);
                let dpool = dx.slice(s![.., ..d]).to_owned() / n;
                for mut row in dctx.rows_mut() {
                    row += &dpool.row(0);
                }
                let last = contextual.nrows() - 1;
                let mut lr = dctx.row_mut(last);
                lr += &dx.slice(s![0, d..]);
                Ok((loss, Some(dctx)))
            }
            (Head::Fr(h), Target::Class(c)) => {
                let pooled = mean_rows(contextual);
                let (logits, pre) = h.forward(&pooled);
                let z = logits.row(0).to_vec();
                if *c >= z.len() {
                    return Err(Error::ClassOutOfRange(*c));
                }
                let lse = log_sum_exp(&z);
                let loss = lse - z[*c];
                let Some(Head::Fr(g)) = grad else {
                    return Ok((loss, None));
                };
                let mut dz = logits.mapv(|v| (v - lse).exp());
                dz[[0, *c]] -= 1.0;
                let dpool = h.backward(&pooled, &pre, &dz, g);
                Ok((loss, Some(spread_pool_grad(&dpool, contextual.nrows()))))
            }
            (Head::Ad(h), Target::Anomaly(y)) => {
                let pooled = mean_rows(contextual);
                let (logit, pre) = h.forward(&pooled);
                let z = logit[[0, 0]];
                let t = if *y { 1.0 } else { 0.0 };
                // log(1 + e^z) - t z, computed stably
                let loss = z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
                let Some(Head::Ad(g)) = grad else {
                    return Ok((loss, None));
                };
                let dz = Mat::from_elem((1, 1), logistic(z) - t);
                let dpool = h.backward(&pooled, &pre, &dz, g);
                Ok((loss, Some(spread_pool_grad(&dpool, contextual.nrows()))))
            }
            (head, target) => Err(Error::Config(format!(
                "{} head cannot train on {} targets",
                head.kind().as_str(),
                target.kind().as_str()
            ))),
        }
    }
}

fn spread_pool_grad(dpool: &Mat, rows: usize) -> Mat {
    let row = dpool.row(0).mapv(|v| v / rows as f64);
    let mut out = Mat::zeros((rows, dpool.ncols()));
    for mut r in out.rows_mut() {
        r.assign(&row);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `H_max x 3` normalized displacements from the last observed point.
    Future(Mat),
    Class(usize),
    Anomaly(bool),
}

impl Target {
    pub fn kind(&self) -> HeadKind {
        match self {
            Target::Future(_) => HeadKind::Ftp,
            Target::Class(_) => HeadKind::Fr,
            Target::Anomaly(_) => HeadKind::Ad,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadExample {
    pub id: String,
    pub values: Mat,
    pub target: Target,
}

/// FTP example from a raw trajectory: the first `history` points are the
/// input and the next `h_max` positions the target.
pub fn ftp_example(pipeline: &InputPipeline, traj: &Trajectory, history: usize, h_max: usize) -> Result<HeadExample> {
    if traj.len() < history + h_max {
        return Err(Error::Precondition(format!(
            "trajectory {} has {} points, needs {}",
            traj.id,
            traj.len(),
            history + h_max
        )));
    }
    let input = pipeline.prepare(&traj.slice(0..history))?;
    let z = normalize(&traj.slice(history..history + h_max), &pipeline.norm);
    let mut target = Mat::zeros((h_max, 3));
    for (h, p) in z.points.iter().enumerate() {
        let pos = p.position();
        for k in 0..3 {
            target[[h, k]] = pos[k] - input.last_position[k];
        }
    }
    Ok(HeadExample {
        id: traj.id.clone(),
        values: input.values,
        target: Target::Future(target),
    })
}

pub fn class_example(pipeline: &InputPipeline, traj: &Trajectory, class: usize) -> Result<HeadExample> {
    Ok(HeadExample {
        id: traj.id.clone(),
        values: pipeline.prepare(traj)?.values,
        target: Target::Class(class),
    })
}

pub fn anomaly_example(pipeline: &InputPipeline, traj: &Trajectory, anomalous: bool) -> Result<HeadExample> {
    Ok(HeadExample {
        id: traj.id.clone(),
        values: pipeline.prepare(traj)?.values,
        target: Target::Anomaly(anomalous),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            freeze_encoder: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutcome {
    pub head: Head,
    pub encoder: PatchEncoder,
    /// Mean training loss before any update, then after each epoch.
    pub curve: Vec<f64>,
    pub seconds: f64,
}

/// Encoder and head trained jointly when the encoder is not frozen.
#[derive(Debug, Clone, PartialEq)]
struct Joint {
    encoder: PatchEncoder,
    head: Head,
}

impl Parameters for Joint {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.encoder.collect_mut(out);
        self.head.collect_mut(out);
    }
}

fn mean_loss(encoder: &PatchEncoder, head: &Head, data: &[HeadExample], cached: Option<&[Mat]>) -> Result<f64> {
    let mut sum = 0.0;
    for (i, ex) in data.iter().enumerate() {
        let ctx = match cached {
            Some(c) => c[i].clone(),
            None => encoder.contextual(&ex.values)?,
        };
        sum += head.loss_and_backward(&ctx, &ex.target, None)?.0;
    }
    Ok(sum / data.len() as f64)
}

/// Minimizes MSE (FTP), cross-entropy (FR) or logistic loss (AD) over
/// `data`. With a frozen encoder the contextual embeddings are computed once
/// and only the head moves; otherwise both are updated with dropout active.
pub fn train_head(encoder: &PatchEncoder, head: Head, data: &[HeadExample], config: &HeadTrainConfig) -> Result<HeadOutcome> {
    if data.is_empty() {
        return Err(Error::Precondition("head training needs examples".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.target.kind() != head.kind()) {
        return Err(Error::Config(format!(
            "{} head given {} label for {}",
            head.kind().as_str(),
            bad.target.kind().as_str(),
            bad.id
        )));
    }
    let start = Instant::now();
    let cached: Option<Vec<Mat>> = if config.freeze_encoder {
        Some(data.iter().map(|e| encoder.contextual(&e.values)).collect::<Result<_>>()?)
    } else {
        None
    };
    let mut joint = Joint {
        encoder: encoder.clone(),
        head,
    };
    let mut curve = vec![mean_loss(&joint.encoder, &joint.head, data, cached.as_deref())?];
    let mut head_opt = AdamW::new(config.optimizer, &joint.head);
    let mut joint_opt = AdamW::new(config.optimizer, &joint);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX, epoch as u64));
        order.shuffle(&mut shuffle);
        for (batch_id, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            if let Some(cache) = &cached {
                let mut g = joint.head.zeros_like();
                for &i in batch {
                    joint.head.loss_and_backward(&cache[i], &data[i].target, Some(&mut g))?;
                }
                let mut scaled = g.zeros_like();
                accumulate(&mut scaled, &g, scale);
                check_grad(&scaled, epoch, batch_id)?;
                head_opt.step(&mut joint.head, &scaled);
            } else {
                let mut g = joint.zeros_like();
                for &i in batch {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, i as u64));
                    let trace: EncoderTrace = joint.encoder.forward(&data[i].values, None, &mut Mode::Train(&mut rng))?;
                    let (_, dctx) = joint.head.loss_and_backward(&trace.output, &data[i].target, Some(&mut g.head))?;
                    joint.encoder.backward(&trace, &dctx.expect("gradient requested"), &mut g.encoder);
                }
                let mut scaled = g.zeros_like();
                accumulate(&mut scaled, &g, scale);
                check_grad(&scaled, epoch, batch_id)?;
                joint_opt.step(&mut joint, &scaled);
            }
        }
        let loss = mean_loss(&joint.encoder, &joint.head, data, cached.as_deref())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("head loss after epoch {epoch}")));
        }
        log::info!("{} head epoch {epoch} loss={loss:.6}", joint.head.kind().as_str());
        curve.push(loss);
    }
    Ok(HeadOutcome {
        head: joint.head,
        encoder: joint.encoder,
        curve,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn check_grad<P: Parameters>(g: &P, epoch: usize, batch: usize) -> Result<()> {
    if g.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("head gradient at epoch {epoch} batch {batch}")))
    }
}

fn contextual_for(encoder: &PatchEncoder, pipeline: &InputPipeline, traj: &Trajectory) -> Result<(Mat, [f64; 3])> {
    let input = pipeline.prepare(traj)?;
    Ok((encoder.contextual(&input.values)?, input.last_position))
}

/// Predicted physical (lon, lat, alt) for each requested horizon, from a
/// single forward pass.
pub fn predict_trajectory(
    encoder: &PatchEncoder,
    head: &FtpHead,
    pipeline: &InputPipeline,
    history: &Trajectory,
    horizons: &[usize],
) -> Result<BTreeMap<usize, [f64; 3]>> {
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > head.h_max) {
        return Err(Error::HorizonRange {
            horizon: h,
            max: head.h_max,
        });
    }
    if history.len() < pipeline.patching.patch_size {
        return Err(Error::TooShort {
            n: history.len(),
            patch_size: pipeline.patching.patch_size,
        });
    }
    let (ctx, last) = contextual_for(encoder, pipeline, history)?;
    let out = head.linear.forward(&ftp_input(&ctx));
    Ok(horizons
        .iter()
        .map(|&h| {
            let z: [f64; 3] = std::array::from_fn(|k| last[k] + out[[0, (h - 1) * 3 + k]]);
            (h, pipeline.norm.denormalize_position(z))
        })
        .collect())
}

/// Softmax class probabilities.
pub fn classify_flight(encoder: &PatchEncoder, head: &MlpHead, pipeline: &InputPipeline, traj: &Trajectory) -> Result<Vec<f64>> {
    let (ctx, _) = contextual_for(encoder, pipeline, traj)?;
    let logits = head.forward(&mean_rows(&ctx)).0.row(0).to_vec();
    Ok(softmax(&logits))
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Logistic of the anomaly logit.
pub fn score_anomaly(encoder: &PatchEncoder, head: &MlpHead, pipeline: &InputPipeline, traj: &Trajectory) -> Result<f64> {
    let (ctx, _) = contextual_for(encoder, pipeline, traj)?;
    Ok(logistic(head.forward(&mean_rows(&ctx)).0[[0, 0]]))
}

/// FTP prediction for an already prepared example, in normalized
/// displacement units.
pub fn predict_example(encoder: &PatchEncoder, head: &FtpHead, values: &Mat) -> Result<Array1<f64>> {
    let ctx = encoder.contextual(values)?;
    Ok(head.linear.forward(&ftp_input(&ctx)).row(0).to_owned())
}
