//! Discrete domain latent: scores, annealed posterior, embedding mixing,
//! the usage-entropy regularizer and the target-encoder training step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{entropy_of, Graph, Var};
use crate::model::{DropoutRng, Seq2Seq, TargetEncoderInput, TokenMatrix};
use crate::optim::{adam_step, AdamState};
use crate::rng::{self, Stream};
use crate::vocab::START;

/// How a posterior was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    Soft,
    Hard,
    Gumbel,
}

/// Relaxation used on non-hard steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    #[default]
    Softmax,
    Gumbel,
}

/// One probability vector over the `N` domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPosterior {
    pub p: Vec<f64>,
    pub mode: PosteriorMode,
}

impl DomainPosterior {
    /// `softmax(s / T)`.
    pub fn soft(scores: &[f64], temperature: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::contract(format!(
                "soft posterior needs T > 0, got {temperature}"
            )));
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(Self {
            p: e.into_iter().map(|x| x / z).collect(),
            mode: PosteriorMode::Soft,
        })
    }

    /// One-hot at `argmax(s)`, lowest index on ties.
    pub fn hard(scores: &[f64]) -> Self {
        let n = scores.len();
        let mut p = vec![0.0; n];
        p[argmax(scores)] = 1.0;
        Self {
            p,
            mode: PosteriorMode::Hard,
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Linear temperature annealing from 1 to 0 with a hard-step probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub total_steps: u64,
    pub t_min: f64,
    pub p_hard: f64,
    #[serde(default)]
    pub frozen: bool,
}

impl AnnealSchedule {
    pub fn new(total_steps: u64) -> Self {
        Self {
            total_steps,
            t_min: 1e-3,
            p_hard: 0.25,
            frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("anneal total_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_hard) {
            return Err(Error::Config(format!("p_hard {} not in [0, 1]", self.p_hard)));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("t_min {} not in (0, 1)", self.t_min)));
        }
        Ok(())
    }

    /// `T = max(0, 1 - step / total_steps)`.
    pub fn temperature(&self, step: u64) -> f64 {
        (1.0 - step as f64 / self.total_steps as f64).max(0.0)
    }

    /// Freezes the target encoder once the temperature reaches zero; never unfreezes.
    pub fn observe(&mut self, step: u64) {
        if self.temperature(step) <= 0.0 {
            self.frozen = true;
        }
    }
}

/// Draws soft or hard for one training step; consumes exactly one uniform draw.
pub fn sample_mode<R: Rng>(rng: &mut R, schedule: &AnnealSchedule) -> PosteriorMode {
    let x: f64 = rng.gen();
    if schedule.frozen || x < schedule.p_hard {
        PosteriorMode::Hard
    } else {
        PosteriorMode::Soft
    }
}

/// `s = h Mᵀ` for `h [B × d]` and `M [N × d]`.
pub fn domain_scores(g: &mut Graph, h: Var, m: Var) -> Result<Var> {
    let mt = g.transpose(m)?;
    g.matmul(h, mt)
}

/// Posterior for a batch of scores `[B × N]`.
///
/// Hard posteriors are constants, so nothing upstream of `s` receives
/// gradient through them. Gumbel noise is drawn from `gumbel` when given.
pub fn domain_posterior<R: Rng>(
    g: &mut Graph,
    s: Var,
    temperature: f64,
    mode: PosteriorMode,
    gumbel: Option<&mut R>,
) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 {
        return Err(Error::contract(format!("scores must be [B × N], got {shape:?}")));
    }
    match mode {
        PosteriorMode::Hard => {
            let n = shape[1];
            let onehot = g
                .value(s)
                .chunks(n)
                .flat_map(|row| DomainPosterior::hard(row).p)
                .collect();
            g.constant(shape, onehot)
        }
        PosteriorMode::Soft | PosteriorMode::Gumbel => {
            if temperature <= 0.0 {
                return Err(Error::contract(format!(
                    "{mode:?} posterior needs T > 0, got {temperature}"
                )));
            }
            let x = if mode == PosteriorMode::Gumbel {
                let rng = gumbel.ok_or_else(|| Error::contract("gumbel posterior without a noise source"))?;
                let noise = (0..g.value(s).len())
                    .map(|_| {
                        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        -(-u.ln()).ln()
                    })
                    .collect();
                let n = g.constant(shape, noise)?;
                g.add(s, n)?
            } else {
                s
            };
            let x = g.scale(x, 1.0 / temperature);
            g.softmax(x, 1)
        }
    }
}

/// `e = p Eᵀ` row-wise: each row of `p [B × N]` mixes the columns of `E [d × N]`.
pub fn mix_domain_embedding(g: &mut Graph, embeddings: Var, p: Var) -> Result<Var> {
    let (se, sp) = (g.shape(embeddings), g.shape(p));
    if se.len() != 2 || sp.len() != 2 || se[1] != sp[1] {
        return Err(Error::Shape {
            op: "mix_domain_embedding",
            left: se.to_vec(),
            right: sp.to_vec(),
        });
    }
    let et = g.transpose(embeddings)?;
    g.matmul(p, et)
}

/// `L_XE = -p̃ log p̃` with `p̃` the batch mean of the posteriors `[B × N]`.
pub fn entropy_regularizer(g: &mut Graph, p: Var) -> Result<Var> {
    let mean = g.mean_rows(p)?;
    Ok(g.entropy(mean))
}

/// `nll - λ L_XE`.
pub fn total_loss(g: &mut Graph, nll: Var, l_xe: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(l_xe, lambda);
    g.sub(nll, weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    /// Weight of the usage-entropy regularizer.
    pub lambda: f64,
    #[serde(default)]
    pub relaxation: Relaxation,
    /// Let the regularizer back-propagate into the target encoder on hard steps.
    #[serde(default)]
    pub regularizer_grad_on_hard: bool,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            relaxation: Relaxation::Softmax,
            regularizer_grad_on_hard: false,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub loss: f64,
    pub nll: f64,
    pub l_xe: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<PosteriorMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Selected domain (argmax of the scores, or the E-step choice) per batch row, counted.
    pub histogram: Vec<usize>,
    pub decoder_forwards: u64,
    pub target_tokens: usize,
}

/// Step index, learning rate and run seed for one update.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
}

/// Target encoder input ids: `[start] + y` or `[start] + x`.
pub fn target_encoder_ids(batch: &Batch, input: TargetEncoderInput) -> TokenMatrix {
    match input {
        TargetEncoderInput::Target => batch.tgt_in.clone(),
        TargetEncoderInput::Source => {
            let rows: Vec<Vec<usize>> = (0..batch.src.rows)
                .map(|r| {
                    std::iter::once(START)
                        .chain(
                            batch
                                .src
                                .row(r)
                                .iter()
                                .zip(batch.src.row_mask(r))
                                .filter(|(_, &m)| m)
                                .map(|(&t, _)| t),
                        )
                        .collect()
                })
                .collect();
            TokenMatrix::from_rows(&rows, crate::vocab::PAD)
        }
    }
}

pub(crate) fn check_loss(report: &LossReport) -> Result<()> {
    if !report.loss.is_finite() || !report.nll.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {}: nll={} l_xe={} loss={}",
            report.step, report.nll, report.l_xe, report.loss
        )));
    }
    Ok(())
}

/// Nodes of an assembled training loss.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub loss: Var,
    pub nll: Var,
    pub l_xe: Var,
    /// Argmax-domain counts (all rows in slot 0 without a target encoder).
    pub histogram: Vec<usize>,
}

/// Builds `nll - λ L_XE` for a batch with the given posterior mode.
///
/// `mode` is ignored for a model without a target encoder, which gets the
/// constant posterior and `L_XE = 0`. On hard steps `L_XE` is computed from
/// the soft posterior at `max(T, t_min)` and is detached unless
/// `latent.regularizer_grad_on_hard` is set and the schedule is not frozen.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph(
    g: &mut Graph,
    model: &Seq2Seq,
    batch: &Batch,
    mode: PosteriorMode,
    temperature: f64,
    schedule: &AnnealSchedule,
    latent: &LatentConfig,
    dropout: &mut DropoutRng<'_>,
    gumbel: Option<&mut ChaCha8Rng>,
) -> Result<LossGraph> {
    let n = model.n_domains();
    let rows = batch.src.rows;
    let z = model.encode_source_graph(g, &batch.src, dropout)?;
    let (p, l_xe, histogram) = match &model.target_encoder {
        Some(te) => {
            let ids = target_encoder_ids(batch, te.input);
            let h = model.encode_target_latent_graph(g, &ids)?;
            let m = g.param(te.head);
            let s = domain_scores(g, h, m)?;
            let histogram = histogram_of(g.value(s), n);
            let p = domain_posterior(g, s, temperature, mode, gumbel)?;
            let l_xe = if mode == PosteriorMode::Hard {
                let soft =
                    domain_posterior::<ChaCha8Rng>(g, s, temperature.max(schedule.t_min), PosteriorMode::Soft, None)?;
                let reg = entropy_regularizer(g, soft)?;
                if latent.regularizer_grad_on_hard && !schedule.frozen {
                    reg
                } else {
                    g.detach(reg)
                }
            } else {
                entropy_regularizer(g, p)?
            };
            (p, l_xe, histogram)
        }
        None => {
            let p = g.constant(vec![rows, n], vec![1.0 / n as f64; rows * n])?;
            let l_xe = g.constant(vec![1], vec![0.0])?;
            (p, l_xe, vec![rows])
        }
    };
    let emb = g.param(model.domain_embeddings);
    let e = mix_domain_embedding(g, emb, p)?;
    let logits = model.decode_teacher_forced_graph(g, z, &batch.src.mask, e, &batch.tgt_in, dropout)?;
    let nll = g.cross_entropy(logits, &batch.tgt_out.ids, &batch.tgt_out.mask)?;
    let loss = total_loss(g, nll, l_xe, latent.lambda)?;
    Ok(LossGraph {
        loss,
        nll,
        l_xe,
        histogram,
    })
}

/// One update of the target-encoder model (or of the vanilla model when the
/// network has no target encoder): one source encoding, one target encoding,
/// one decoder forward, one backward, one Adam step.
pub fn train_step(
    model: &mut Seq2Seq,
    adam: &mut AdamState,
    schedule: &mut AnnealSchedule,
    latent: &LatentConfig,
    batch: &Batch,
    ctx: StepContext,
) -> Result<LossReport> {
    let forwards_before = model.decoder_forwards();
    let mut dropout = rng::stream(ctx.seed, Stream::Dropout, ctx.step);
    let mut mode_rng = rng::stream(ctx.seed, Stream::Mode, ctx.step);
    let mut gumbel_rng = rng::stream(ctx.seed, Stream::Gumbel, ctx.step);

    let temperature = schedule.temperature(ctx.step);
    let has_te = model.target_encoder.is_some();
    let mode = if has_te {
        let mut mode = sample_mode(&mut mode_rng, schedule);
        if mode == PosteriorMode::Soft && temperature < schedule.t_min {
            mode = PosteriorMode::Hard;
        }
        if mode == PosteriorMode::Soft && latent.relaxation == Relaxation::Gumbel {
            mode = PosteriorMode::Gumbel;
        }
        mode
    } else {
        PosteriorMode::Soft
    };

    let (loss_v, nll_v, lxe_v, histogram, grads) = {
        let model_ref: &Seq2Seq = model;
        let mut g = Graph::new(&model_ref.params);
        let parts = loss_graph(
            &mut g,
            model_ref,
            batch,
            mode,
            temperature,
            schedule,
            latent,
            &mut Some(&mut dropout),
            Some(&mut gumbel_rng),
        )?;
        let (loss_v, nll_v, lxe_v) = (g.scalar(parts.loss), g.scalar(parts.nll), g.scalar(parts.l_xe));
        let grads = if loss_v.is_finite() {
            Some(g.backward(parts.loss)?.into_params())
        } else {
            None
        };
        (loss_v, nll_v, lxe_v, parts.histogram, grads)
    };

    let report = LossReport {
        step: ctx.step,
        loss: loss_v,
        nll: nll_v,
        l_xe: lxe_v,
        lr: ctx.lr,
        mode: has_te.then_some(mode),
        temperature: has_te.then_some(temperature),
        histogram,
        decoder_forwards: model.decoder_forwards() - forwards_before,
        target_tokens: batch.tgt_out.tokens(),
    };
    check_loss(&report)?;
    let grads = grads.expect("finite loss has gradients");
    adam_step(&mut model.params, &grads, adam, ctx.lr)?;
    schedule.observe(ctx.step + 1);
    Ok(report)
}

/// Counts of the argmax domain per row of a `[B × N]` score matrix.
pub fn histogram_of(scores: &[f64], n: usize) -> Vec<usize> {
    let mut h = vec![0; n];
    for row in scores.chunks(n) {
        h[argmax(row)] += 1;
    }
    h
}

/// Usage entropy of a histogram.
pub fn histogram_entropy(h: &[usize]) -> f64 {
    let total: usize = h.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let p: Vec<f64> = h.iter().map(|&c| c as f64 / total as f64).collect();
    entropy_of(&p)
}
