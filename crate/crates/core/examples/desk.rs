//! Desk-scale run: `cargo run --release --example desk -- <method> [steps] [lambda] [input] [seed]`.

use std::time::Instant;

use domaingen::commands::{cmd_train, evaluate, reference_usage, translate};
use domaingen::config::{Method, RunConfig};
use domaingen::decoding::{DecodeMode, DecodeOptions};
use domaingen::latent::AnnealSchedule;
use domaingen::model::TargetEncoderInput;

fn main() -> domaingen::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let method = match args.first().map(String::as_str) {
        Some("moe") => Method::Moe,
        Some("vanilla") => Method::Vanilla,
        _ => Method::TargetEncoder,
    };
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let lambda: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let input = match args.get(3).map(String::as_str) {
        Some("source") => TargetEncoderInput::Source,
        _ => TargetEncoderInput::Target,
    };
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);

    let mut cfg = RunConfig::desk(method, 4, seed);
    cfg.steps = steps;
    cfg.valid_every = 0;
    cfg.log_every = 500;
    cfg.out_dir = std::env::temp_dir().join(format!("desk-{}-{seed}", method.name()));
    if let Some(s) = cfg.schedule.as_mut() {
        *s = AnnealSchedule::new(steps);
    }
    if let Some(r) = cfg.regularizer.as_mut() {
        r.lambda = lambda;
    }
    if method == Method::TargetEncoder {
        cfg.target_encoder_input = Some(input);
    }
    let t0 = Instant::now();
    let out = cmd_train(&cfg)?;
    let secs = t0.elapsed().as_secs_f64();
    for r in out.reports.iter().step_by(500) {
        println!(
            "step {:5} nll {:.4} lxe {:.4} hist {:?}",
            r.step, r.nll, r.l_xe, r.histogram
        );
    }
    println!("train {secs:.1}s");
    let test = &out.data.test;
    let refs: Vec<Vec<Vec<usize>>> = test.iter().map(|e| e.references.clone()).collect();
    let modes: &[DecodeOptions] = if method == Method::Vanilla {
        &[DecodeOptions {
            mode: DecodeMode::Beam,
            beam_size: 4,
            max_len: 0,
        }]
    } else {
        &[DecodeOptions::default()]
    };
    for &opts in modes {
        let sets = translate(&out.checkpoint, test, opts)?;
        let hyps: Vec<Vec<Vec<usize>>> = sets
            .iter()
            .map(|s| s.iter().map(|h| h.content().to_vec()).collect())
            .collect();
        let rep = evaluate(&hyps, &refs)?;
        println!(
            "{:?}: mbleu {:.2} pairwise {:.2} distinct {:.3} all_exact {:.3} coverage {:.3} per-domain {:?}",
            opts.mode,
            rep.mbleu.score,
            rep.pairwise_bleu.map_or(f64::NAN, |p| p.score),
            rep.coverage.mean_distinct,
            rep.coverage.all_exact,
            rep.coverage.reference_coverage,
            rep.per_domain_bleu
        );
    }
    if out.checkpoint.model.target_encoder.is_some() {
        let u = reference_usage(&out.checkpoint.model, test)?;
        println!("usage {:?} entropy {:.4} (ln4 {:.4})", u.histogram, u.entropy, 4f64.ln());
    }
    Ok(())
}
