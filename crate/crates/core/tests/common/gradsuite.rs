//! Finite-difference checks of every differentiable graph operation on
//! randomized tiny shapes, and of the assembled training losses.

use domaingen::data::Batch;
use domaingen::graph::{AttentionArgs, Var};
use domaingen::latent::{loss_graph, AnnealSchedule, LatentConfig, PosteriorMode};
use domaingen::model::{ModelConfig, Seq2Seq, TargetEncoderInput};
use domaingen::moe::{moe_loss_graph, MoeAssignment};
use domaingen::{Graph, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
        .unwrap()
        .with_grad()
}

/// Worst relative error between analytic and central-difference gradients
/// of `f` with respect to every entry of every input.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::no_grad(&store);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t)).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.input(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel(analytic[i], numeric));
        }
    }
    worst
}

/// Scalar contraction with fixed, distinct weights.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = g.constant(g.shape(x).to_vec(), w).unwrap();
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

/// One randomized case per operation; returns `(operation, worst error)`.
pub fn op_case(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (m, n, k) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));

    let ins = [random(&mut r, &[m, n]), random(&mut r, &[m, n])];
    out.push(("add", gradcheck(&ins, &|g, v| { let y = g.add(v[0], v[1]).unwrap(); weighted_sum(g, y) })));
    out.push(("sub", gradcheck(&ins, &|g, v| { let y = g.sub(v[0], v[1]).unwrap(); weighted_sum(g, y) })));
    out.push(("mul", gradcheck(&ins, &|g, v| { let y = g.mul(v[0], v[1]).unwrap(); weighted_sum(g, y) })));
    let c = r.gen_range(-2.0..2.0);
    out.push(("scale", gradcheck(&ins[..1], &|g, v| { let y = g.scale(v[0], c); weighted_sum(g, y) })));
    out.push(("relu", gradcheck(&ins[..1], &|g, v| { let y = g.relu(v[0]); weighted_sum(g, y) })));
    out.push(("transpose", gradcheck(&ins[..1], &|g, v| { let y = g.transpose(v[0]).unwrap(); weighted_sum(g, y) })));
    out.push(("sum", gradcheck(&ins[..1], &|g, v| g.sum(v[0]))));
    out.push(("mean_rows", gradcheck(&ins[..1], &|g, v| { let y = g.mean_rows(v[0]).unwrap(); weighted_sum(g, y) })));

    let bias = random(&mut r, &[n]);
    out.push((
        "add_broadcast",
        gradcheck(&[ins[0].clone(), bias], &|g, v| {
            let y = g.add_broadcast(v[0], v[1]).unwrap();
            weighted_sum(g, y)
        }),
    ));

    let keep: Vec<bool> = (0..m * n).map(|_| r.gen_bool(0.6)).collect();
    out.push((
        "dropout",
        gradcheck(&ins[..1], &|g, v| {
            let y = g.dropout(v[0], &keep, 0.4).unwrap();
            weighted_sum(g, y)
        }),
    ));

    let a3 = random(&mut r, &[m, k, n]);
    let w = random(&mut r, &[n, k]);
    out.push((
        "matmul",
        gradcheck(&[a3.clone(), w], &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, y)
        }),
    ));

    let width = r.gen_range(2..5);
    let x = random(&mut r, &[m, k, width]);
    let (gamma, beta) = (random(&mut r, &[width]), random(&mut r, &[width]));
    out.push((
        "layer_norm",
        gradcheck(&[x.clone(), gamma, beta], &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y)
        }),
    ));
    for axis in 0..3 {
        out.push((
            "softmax",
            gradcheck(std::slice::from_ref(&x), &|g, v| {
                let y = g.softmax(v[0], axis).unwrap();
                weighted_sum(g, y)
            }),
        ));
    }
    out.push((
        "select_position",
        gradcheck(std::slice::from_ref(&x), &|g, v| {
            let y = g.select_position(v[0], k - 1).unwrap();
            weighted_sum(g, y)
        }),
    ));
    let first = random(&mut r, &[m, width]);
    out.push((
        "replace_first",
        gradcheck(&[x.clone(), first], &|g, v| {
            let y = g.replace_first(v[0], v[1]).unwrap();
            weighted_sum(g, y)
        }),
    ));

    let p = random(&mut r, &[m, n]);
    out.push((
        "entropy",
        gradcheck(&[p], &|g, v| {
            let s = g.softmax(v[0], 1).unwrap();
            let mean = g.mean_rows(s).unwrap();
            g.entropy(mean)
        }),
    ));

    let vocab = r.gen_range(2..6);
    let table = random(&mut r, &[vocab, width]);
    let ids: Vec<usize> = (0..m * k).map(|_| r.gen_range(0..vocab)).collect();
    out.push((
        "embedding",
        gradcheck(&[table], &|g, v| {
            let y = g.embedding(v[0], &ids, &[m, k]).unwrap();
            weighted_sum(g, y)
        }),
    ));

    let logits = random(&mut r, &[m, k, vocab]);
    let targets: Vec<usize> = (0..m * k).map(|_| r.gen_range(0..vocab)).collect();
    let mut mask: Vec<bool> = (0..m * k).map(|_| r.gen_bool(0.7)).collect();
    mask[0] = true;
    out.push(("cross_entropy", gradcheck(&[logits], &|g, v| g.cross_entropy(v[0], &targets, &mask).unwrap())));

    let heads = r.gen_range(1..3);
    let d = heads * r.gen_range(1..3);
    let lq = r.gen_range(1..4);
    for causal in [false, true] {
        let lk = if causal { lq + r.gen_range(0..2) } else { r.gen_range(1..4) };
        let q = random(&mut r, &[m, lq, d]);
        let kk = random(&mut r, &[m, lk, d]);
        let vv = random(&mut r, &[m, lk, d]);
        let mut key_mask: Vec<bool> = (0..m * lk).map(|_| r.gen_bool(0.7)).collect();
        for b in 0..m {
            key_mask[b * lk] = true;
        }
        let masked = r.gen_bool(0.5);
        out.push((
            "attention",
            gradcheck(&[q, kk, vv], &|g, v| {
                let args = AttentionArgs {
                    heads,
                    causal,
                    key_mask: masked.then_some(key_mask.as_slice()),
                };
                let y = g.attention(v[0], v[1], v[2], args).unwrap();
                weighted_sum(g, y)
            }),
        ));
    }
    out
}

fn tiny_config(r: &mut ChaCha8Rng, n_domains: usize) -> ModelConfig {
    let heads = r.gen_range(1..3);
    ModelConfig {
        d_model: 2 * heads,
        n_layers: r.gen_range(1..3),
        n_heads: heads,
        d_ff: r.gen_range(2..5),
        src_vocab_size: 9,
        tgt_vocab_size: 9,
        n_domains,
        dropout_enc_dec: 0.0,
        dropout_target_enc: 0.0,
        max_len: 6,
        seed: r.gen(),
    }
}

fn tiny_batch(r: &mut ChaCha8Rng) -> Batch {
    let rows = r.gen_range(1..4);
    let seqs: Vec<(Vec<usize>, Vec<usize>)> = (0..rows)
        .map(|_| {
            let s = (0..r.gen_range(1..4)).map(|_| r.gen_range(4..9)).collect();
            let t = (0..r.gen_range(1..4)).map(|_| r.gen_range(4..9)).collect();
            (s, t)
        })
        .collect();
    let items: Vec<(u64, &[usize], &[usize])> = seqs
        .iter()
        .enumerate()
        .map(|(i, (s, t))| (i as u64, s.as_slice(), t.as_slice()))
        .collect();
    Batch::new(&items)
}

/// Worst error over every parameter entry of `model` for the scalar built by `f`.
fn model_gradcheck(model: &mut Seq2Seq, f: &dyn Fn(&mut Graph, &Seq2Seq) -> Var) -> f64 {
    let grads = {
        let mut g = Graph::new(&model.params);
        let l = f(&mut g, model);
        g.backward(l).unwrap().into_params()
    };
    let eval = |m: &Seq2Seq| {
        let mut g = Graph::no_grad(&m.params);
        let l = f(&mut g, m);
        g.scalar(l)
    };
    let ids: Vec<_> = model.params.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = model.params.get(id).numel();
        for j in 0..n {
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[j]);
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + H;
            let up = eval(model);
            model.params.get_mut(id).data_mut()[j] = orig - H;
            let down = eval(model);
            model.params.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel(analytic, (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// The soft-mode target-encoder training loss (and the hard-EM M-step loss)
/// on a random tiny model; returns `(loss, worst error)`.
pub fn loss_case(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.gen_range(1..5);
    let input = if r.gen_bool(0.5) { TargetEncoderInput::Target } else { TargetEncoderInput::Source };
    let cfg = tiny_config(&mut r, n);
    let batch = tiny_batch(&mut r);
    let temperature = r.gen_range(0.2..1.0);
    let latent = LatentConfig {
        lambda: r.gen_range(0.0..2.0),
        ..LatentConfig::default()
    };
    let schedule = AnnealSchedule::new(100);
    let mut te = Seq2Seq::with_target_encoder(&cfg, input).unwrap();
    let soft = model_gradcheck(&mut te, &|g, m| {
        loss_graph(g, m, &batch, PosteriorMode::Soft, temperature, &schedule, &latent, &mut None, None)
            .unwrap()
            .loss
    });
    let mut moe = Seq2Seq::with_domains(&cfg).unwrap();
    let assignment = MoeAssignment {
        d_star: (0..batch.len()).map(|_| r.gen_range(0..n)).collect(),
    };
    let em = model_gradcheck(&mut moe, &|g, m| moe_loss_graph(g, m, &batch, &assignment, &mut None).unwrap());
    vec![("soft-mode training loss", soft), ("hard-EM M-step loss", em)]
}
