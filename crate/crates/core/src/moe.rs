//! Hard-EM mixture-of-experts baseline with shared parameters.
//!
//! The E-step scores every sentence under each of the `N` domain embeddings
//! (one evaluation-mode decoder pass per domain) and keeps the argmax; the
//! M-step trains on that one-hot assignment.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{log_softmax, Graph, Var};
use crate::latent::{check_loss, LossReport, StepContext};
use crate::model::{DropoutRng, Seq2Seq};
use crate::optim::{adam_step, AdamState};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Selected domain per batch row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoeAssignment {
    pub d_star: Vec<usize>,
}

impl MoeAssignment {
    pub fn histogram(&self, n: usize) -> Vec<usize> {
        let mut h = vec![0; n];
        for &d in &self.d_star {
            h[d] += 1;
        }
        h
    }
}

/// Summed teacher-forced log-likelihood of every row under every domain, `[B][N]`.
pub fn domain_log_likelihoods(model: &Seq2Seq, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let n = model.n_domains();
    let rows = batch.len();
    let (len, v) = (batch.tgt_out.cols, model.tgt_vocab());
    let zx = model.encode_source(&batch.src)?;
    let mut out = vec![vec![0.0; n]; rows];
    for k in 0..n {
        let ek = model.domain_embedding(k);
        let e = Tensor::new(vec![rows, ek.len()], ek.repeat(rows))?;
        let logits = model.decode_teacher_forced(&zx, &e, &batch.tgt_in)?;
        for (r, row) in out.iter_mut().enumerate() {
            let mut ll = 0.0;
            for t in 0..len {
                if batch.tgt_out.mask[r * len + t] {
                    let lp = log_softmax(&logits.data()[(r * len + t) * v..][..v]);
                    ll += lp[batch.tgt_out.ids[r * len + t]];
                }
            }
            row[k] = ll;
        }
    }
    Ok(out)
}

/// `d*ᵢ = argmax_d log p(yᵢ | xᵢ, d)`; ties go to the lowest index.
pub fn moe_e_step(model: &Seq2Seq, batch: &Batch) -> Result<MoeAssignment> {
    let ll = domain_log_likelihoods(model, batch)?;
    Ok(MoeAssignment {
        d_star: ll.iter().map(|row| crate::latent::argmax(row)).collect(),
    })
}

/// Teacher-forced NLL with each row decoded under its assigned one-hot domain.
pub fn moe_loss_graph(
    g: &mut Graph,
    model: &Seq2Seq,
    batch: &Batch,
    assignment: &MoeAssignment,
    dropout: &mut DropoutRng<'_>,
) -> Result<Var> {
    let n = model.n_domains();
    let rows = batch.len();
    if assignment.d_star.len() != rows {
        return Err(Error::contract(format!(
            "assignment has {} rows for a batch of {rows}",
            assignment.d_star.len()
        )));
    }
    if let Some(&bad) = assignment.d_star.iter().find(|&&d| d >= n) {
        return Err(Error::Index {
            what: "domain",
            index: bad,
            size: n,
        });
    }
    let z = model.encode_source_graph(g, &batch.src, dropout)?;
    let mut onehot = vec![0.0; rows * n];
    for (r, &d) in assignment.d_star.iter().enumerate() {
        onehot[r * n + d] = 1.0;
    }
    let p = g.constant(vec![rows, n], onehot)?;
    let emb = g.param(model.domain_embeddings);
    let e = crate::latent::mix_domain_embedding(g, emb, p)?;
    let logits = model.decode_teacher_forced_graph(g, z, &batch.src.mask, e, &batch.tgt_in, dropout)?;
    g.cross_entropy(logits, &batch.tgt_out.ids, &batch.tgt_out.mask)
}

/// One teacher-forced forward with the assigned one-hot domains, backward and Adam.
pub fn moe_m_step(
    model: &mut Seq2Seq,
    adam: &mut AdamState,
    batch: &Batch,
    assignment: &MoeAssignment,
    ctx: StepContext,
) -> Result<LossReport> {
    let forwards_before = model.decoder_forwards();
    let mut dropout = rng::stream(ctx.seed, Stream::Dropout, ctx.step);
    let (loss, grads) = {
        let model_ref: &Seq2Seq = model;
        let mut g = Graph::new(&model_ref.params);
        let nll = moe_loss_graph(&mut g, model_ref, batch, assignment, &mut Some(&mut dropout))?;
        let value = g.scalar(nll);
        let grads = if value.is_finite() {
            Some(g.backward(nll)?.into_params())
        } else {
            None
        };
        (value, grads)
    };
    let report = LossReport {
        step: ctx.step,
        loss,
        nll: loss,
        l_xe: 0.0,
        lr: ctx.lr,
        mode: None,
        temperature: None,
        histogram: assignment.histogram(model.n_domains()),
        decoder_forwards: model.decoder_forwards() - forwards_before,
        target_tokens: batch.tgt_out.tokens(),
    };
    check_loss(&report)?;
    adam_step(&mut model.params, &grads.expect("finite loss has gradients"), adam, ctx.lr)?;
    Ok(report)
}

/// E-step then M-step: exactly `N + 1` decoder passes.
pub fn moe_train_step(
    model: &mut Seq2Seq,
    adam: &mut AdamState,
    batch: &Batch,
    ctx: StepContext,
) -> Result<LossReport> {
    let before = model.decoder_forwards();
    let assignment = moe_e_step(model, batch)?;
    let mut report = moe_m_step(model, adam, batch, &assignment, ctx)?;
    report.decoder_forwards = model.decoder_forwards() - before;
    Ok(report)
}
