//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so the summary is printed even when
//! everything passes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lacos::checkpoint::frozen_footprint;
use lacos::cli::{cmd_eval, cmd_quantize, cmd_sweep, cmd_synth, cmd_train, EvalArgs, QuantizeArgs, SweepArgs, SynthArgs, TrainArgs};
use lacos::encoder::Slot;
use lacos::eval::spearman;
use lacos::gradcheck::{central_difference, check_gradients, relative_error, GradCheck};
use lacos::lora::CountParams;
use lacos::quant::{dequantize_blockwise, quantize_blockwise};
use lacos::{
    init_lora, mnr_loss, mnr_loss_value, trainable_fraction, Adam, AdamConfig, AttachPoint, AttentionMask,
    EncoderConfig, FrozenWeight, LoraLinear, MnrConfig, QuantConfig, Reduction, RunConfig, SentenceEncoder, Tape,
    Tensor, TokenBatch, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn quantization_round_trip() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for (i, &b) in [1usize, 2, 16, 64, 4096].iter().cycle().take(200).enumerate() {
        let (rows, cols) = (r.random_range(1..80), r.random_range(1..80));
        let s = [1e-3, 0.1, 1.0][i % 3];
        let x = Tensor::<f32>::uniform(rows, cols, -s, s, &mut r);
        let q = quantize_blockwise(&x, QuantConfig::symmetric(b).unwrap()).unwrap();
        let xh = dequantize_blockwise::<f64>(&q);
        for (blk, (xs, hs)) in x.data().chunks(b).zip(xh.data().chunks(b)).enumerate() {
            let absmax = xs.iter().fold(0.0f64, |m, v| m.max(f64::from(*v).abs()));
            for (v, h) in xs.iter().zip(hs) {
                let err = (f64::from(*v) - h).abs();
                if err > absmax / 254.0 + 1e-7 {
                    return Err(format!("matrix {i} (B={b}) block {blk}: error {err:e} > bound"));
                }
                worst = worst.max(err / (absmax / 254.0).max(f64::MIN_POSITIVE));
            }
        }
    }
    for b in [1usize, 2, 16, 64, 4096] {
        let z = Tensor::<f32>::zeros(17, 9);
        let q = quantize_blockwise(&z, QuantConfig::symmetric(b).unwrap()).unwrap();
        if dequantize_blockwise::<f32>(&q) != z {
            return Err(format!("zero matrix not exact for B={b}"));
        }
    }
    Ok(format!("200 matrices within bound (worst {worst:.3} of half-step); zeros exact"))
}

fn quantization_footprint() -> Outcome {
    let mut ratios = Vec::new();
    for n in [64usize, 1024] {
        let x = Tensor::<f32>::randn(n, n, 1.0, &mut rng(n as u64));
        let q = quantize_blockwise(&x, QuantConfig::symmetric(64).unwrap()).unwrap();
        ratios.push(q.serialized_size() as f64 / (4 * n * n) as f64);
    }
    check(
        ratios.iter().all(|&r| r <= 0.27),
        format!("64x64 ratio {:.4}, 1024x1024 ratio {:.4} (limit 0.27)", ratios[0], ratios[1]),
    )
}

fn lora_output<'p>(layer: &'p LoraLinear<f64>, tape: &mut Tape<'p, f64>, x: &Tensor<f64>) -> Var {
    let xv = tape.constant(x.clone());
    layer.forward(tape, xv).unwrap()
}

fn lora_init_identity() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let (d, k) = (r.random_range(1..24), r.random_range(1..24));
        let rank = r.random_range(1..=d.min(k));
        let mut base = FrozenWeight::dense(Tensor::<f64>::randn(d, k, 1.0, &mut r));
        if case % 2 == 1 {
            base.quantize(QuantConfig::symmetric(r.random_range(1..32)).unwrap()).unwrap();
        }
        let mut layer = init_lora(base, rank, case, AttachPoint::FfnIn)
            .unwrap()
            .with_scale(r.random_range(0.5..4.0));
        let x = Tensor::<f64>::randn(r.random_range(1..6), d, 1.0, &mut r);
        let dense = x.matmul(&layer.base.to_dense()).unwrap();
        {
            let mut tape = Tape::no_grad();
            let y = lora_output(&layer, &mut tape, &x);
            worst = worst.max(tape.value(y).max_abs_diff(&dense));
        }
        let checksum = layer.base.checksum();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), &[layer.down.shape(), layer.up.shape()], Some(256)).unwrap();
        for _ in 0..10 {
            let grads = {
                let mut tape = Tape::new();
                let y = lora_output(&layer, &mut tape, &x);
                let y = tape.gelu(y);
                let s = tape.sum(y);
                let g = tape.backward(s).unwrap();
                layer.trainable().map(|t| g.of(t).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            };
            let [down, up] = layer.trainable_mut();
            opt.step(&mut [down, up], &[&grads[0], &grads[1]]).unwrap();
        }
        if layer.base.checksum() != checksum {
            return Err(format!("config {case}: frozen base changed"));
        }
        if layer.up.data().iter().all(|&v| v == 0.0) {
            return Err(format!("config {case}: adapters did not move"));
        }
    }
    check(
        worst <= 1e-7,
        format!("20 configs, max |lora - base| at init {worst:e}; checksums unchanged after 10 steps"),
    )
}

fn trainable_fraction_reference() -> Outcome {
    let cfg = EncoderConfig {
        vocab_size: 4096,
        d_model: 512,
        n_layers: 4,
        n_heads: 8,
        d_ff: 2048,
        max_seq_len: 32,
        lora_rank: 2,
        lora_attach_points: [AttachPoint::FfnIn, AttachPoint::FfnOut, AttachPoint::FinalHidden]
            .into_iter()
            .collect(),
        ..EncoderConfig::default()
    };
    let model = SentenceEncoder::<f32>::new(cfg).unwrap();

    // Hand count: embeddings, per-layer attention, FFN and layer norms,
    // final norm and projection; adapters r·(in+out) per adapted matrix.
    let (v, d, l, f, s, r) = (4096usize, 512usize, 4usize, 2048usize, 32usize, 2usize);
    let frozen = (v + s) * d + l * (4 * d * d + d * f + f * d + 2 * 2 * d) + 2 * d + d * d;
    let trainable = l * (r * (d + f) + r * (f + d)) + r * (d + d);
    let oracle = trainable as f64 / (trainable + frozen) as f64;

    // Walk of the stored tensors, independent of the counting code.
    let (mut walked_t, mut walked_f) = (0usize, 0usize);
    model.visit(&mut |_, slot| match slot {
        Slot::Param(t) if t.requires_grad => walked_t += t.len(),
        Slot::Param(t) => walked_f += t.len(),
        Slot::Weight(w) => walked_f += w.num_params(),
    });
    let got = trainable_fraction(&model);
    let counts = model.param_counts();
    check(
        got < 0.01
            && got == oracle
            && (walked_t, walked_f) == (trainable, frozen)
            && (counts.trainable, counts.frozen) == (trainable, frozen),
        format!("fraction {got:.6} ({trainable} of {}), oracle {oracle:.6}", trainable + frozen),
    )
}

fn encoder_weighted_sum<'p>(m: &'p SentenceEncoder<f64>, tape: &mut Tape<'p, f64>, b: &TokenBatch, w: &Tensor<f64>) -> Var {
    let e = m.encode(tape, b).unwrap();
    let wv = tape.constant(w.clone());
    let p = tape.mul(e, wv).unwrap();
    tape.sum(p)
}

fn gradient_fidelity() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    let cfg = GradCheck::default();
    // 20 MNR instances.
    for i in 0..20 {
        let (n, d) = (r.random_range(1..6), r.random_range(1..8));
        let u = Tensor::<f64>::randn(n, d, 1.0, &mut r).trainable();
        let v = Tensor::<f64>::randn(n, d, 1.0, &mut r).trainable();
        let mnr = MnrConfig {
            scale: r.random_range(0.5..20.0),
            reduction: if i % 2 == 0 { Reduction::Sum } else { Reduction::Mean },
        };
        let rep = check_gradients(&[u, v], &cfg, |tape, x| mnr_loss(tape, x[0], x[1], &mnr)).unwrap();
        worst = worst.max(rep.max_relative_error());
    }
    // 20 LoRA layer instances, dense and quantized bases.
    for i in 0..20 {
        let (d, k) = (r.random_range(1..8), r.random_range(1..8));
        let rank = r.random_range(1..=d.min(k));
        let mut base = FrozenWeight::dense(Tensor::<f64>::randn(d, k, 1.0, &mut r));
        if i % 2 == 1 {
            base.quantize(QuantConfig::symmetric(4).unwrap()).unwrap();
        }
        let mut layer = init_lora(base, rank, i, AttachPoint::FfnIn).unwrap().with_scale(1.5);
        layer.up = Tensor::randn(rank, k, 0.5, &mut r).trainable();
        let x = Tensor::<f64>::randn(3, d, 1.0, &mut r);
        let loss = |l: &LoraLinear<f64>| {
            let mut tape = Tape::no_grad();
            let y = lora_output(l, &mut tape, &x);
            let y = tape.gelu(y);
            let s = tape.sum(y);
            tape.value(s).data()[0]
        };
        let g = {
            let mut tape = Tape::new();
            let y = lora_output(&layer, &mut tape, &x);
            let y = tape.gelu(y);
            let s = tape.sum(y);
            tape.backward(s).unwrap()
        };
        for which in 0..2 {
            let analytic = g.of(layer.trainable()[which]).unwrap().to_vec();
            let mut probe = layer.clone();
            let numeric = central_difference(analytic.len(), cfg.step, |j, delta| {
                probe.trainable_mut()[which].data_mut()[j] += delta;
                let value = loss(&probe);
                probe.trainable_mut()[which].data_mut()[j] -= delta;
                Ok(value)
            })
            .unwrap();
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    // 10 end-to-end tiny encoders (d_model 8, one layer).
    for i in 0..10u64 {
        let ecfg = EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: if i % 2 == 0 { 1 } else { 2 },
            d_ff: 16,
            max_seq_len: 6,
            lora_rank: 2,
            lora_attach_points: [AttachPoint::AttnQ, AttachPoint::AttnV, AttachPoint::FfnIn, AttachPoint::FfnOut, AttachPoint::FinalHidden]
                .into_iter()
                .collect(),
            attention: if i % 3 == 0 { AttentionMask::Bidirectional } else { AttentionMask::Causal },
            init_std: 0.5,
            seed: 40 + i,
            ..EncoderConfig::default()
        };
        let mut model = SentenceEncoder::<f64>::new(ecfg).unwrap();
        for (_, t) in model.trainable_params_mut() {
            let noise = Tensor::<f64>::randn(t.rows(), t.cols(), 0.3, &mut r);
            t.data_mut().copy_from_slice(noise.data());
        }
        let seqs: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..r.random_range(1..=6)).map(|_| r.random_range(1..12)).collect())
            .collect();
        let batch = TokenBatch::from_sequences(&seqs);
        let w = Tensor::<f64>::randn(3, 8, 1.0, &mut r);
        let g = {
            let mut tape = Tape::new();
            let l = encoder_weighted_sum(&model, &mut tape, &batch, &w);
            tape.backward(l).unwrap()
        };
        let n_params = model.trainable_params().len();
        for idx in 0..n_params {
            let analytic = g.of(model.trainable_params()[idx].1).unwrap().to_vec();
            let numeric = central_difference(analytic.len(), cfg.step, |j, delta| {
                model.trainable_params_mut()[idx].1.data_mut()[j] += delta;
                let mut tape = Tape::no_grad();
                let l = encoder_weighted_sum(&model, &mut tape, &batch, &w);
                let value = tape.value(l).data()[0];
                drop(tape);
                model.trainable_params_mut()[idx].1.data_mut()[j] -= delta;
                Ok(value)
            })
            .unwrap();
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    check(worst < 1e-3, format!("50 instances (20 MNR, 20 LoRA, 10 encoder), max relative error {worst:.2e}"))
}

fn mnr_oracle_values() -> Outcome {
    let cfg = MnrConfig::default();
    let one = Tensor::<f64>::from_f64_rows(&[&[0.3, -1.2, 2.0]]).unwrap();
    let l1 = mnr_loss_value(&one, &one.scale(2.0), &cfg).unwrap();
    let eye = Tensor::<f64>::identity(2);
    let l2 = mnr_loss_value(&eye, &eye, &cfg).unwrap();
    check(
        l1 == 0.0 && (l2 - 0.626524).abs() <= 1e-5,
        format!("n=1 loss {l1}, n=2 orthonormal loss {l2:.7} (expected 0.626524)"),
    )
}

fn optimizer_equivalence() -> Outcome {
    // Reference Adam, written out from the update rule.
    let n = 10;
    let lr = 1e-3;
    let mut r = rng(7);
    let init: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut p = Tensor::new(1, n, init.clone()).unwrap().trainable();
    let mut opt = Adam::new(AdamConfig::with_lr(lr), &[(1, n)], None).unwrap();
    let (mut q, mut m, mut v) = (init, vec![0.0; n], vec![0.0; n]);
    let mut worst = 0.0f64;
    for t in 1..=1000 {
        let g: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        opt.step(&mut [&mut p], &[&g]).unwrap();
        for i in 0..n {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            q[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        for (a, b) in p.data().iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
    }

    // Quantized state on f(w) = ‖w − w*‖² from w = 0.
    let target = [0.3, -0.7];
    let mut w = Tensor::<f64>::zeros(1, 2).trainable();
    let mut opt = Adam::new(AdamConfig::with_lr(0.05), &[(1, 2)], Some(256)).unwrap();
    for _ in 0..500 {
        let g = [2.0 * (w.data()[0] - target[0]), 2.0 * (w.data()[1] - target[1])];
        opt.step(&mut [&mut w], &[&g]).unwrap();
    }
    let dist = (w.data()[0] - target[0]).abs().max((w.data()[1] - target[1]).abs());

    // Hand-computed: m̂ = 0.5, v̂ = 0.25, p' = 1 - 0.1·0.5/(0.5 + 1e-8).
    let hand = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    let mut step1 = Vec::new();
    for state in [None, Some(256)] {
        let mut p = Tensor::<f64>::scalar(1.0).trainable();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[(1, 1)], state).unwrap();
        opt.step(&mut [&mut p], &[&[0.5]]).unwrap();
        step1.push(p.data()[0]);
    }
    check(
        worst <= 1e-12 && dist < 1e-2 && step1.iter().all(|x| (x - hand).abs() <= 1e-9),
        format!(
            "1000-step max deviation {worst:e}; q8-state quadratic distance {dist:.2e}; step-1 values {step1:?} \
             vs hand value {hand} ({:.1e} from 0.9, all of it from eps)",
            hand - 0.9
        ),
    )
}

fn spearman_oracle() -> Outcome {
    fn oracle(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| {
                    let below = v.iter().filter(|b| *b < a).count() as f64;
                    let equal = v.iter().filter(|b| *b == a).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = rx.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in rx.iter().zip(&ry) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }
    let mut r = rng(8);
    let mut tested = 0;
    while tested < 1000 {
        let n = r.random_range(2..40);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64).collect();
        let expected = oracle(&x, &y);
        if !expected.is_finite() {
            continue;
        }
        let got = spearman(&x, &y).map_err(|e| e.to_string())?;
        if got != expected.clamp(-1.0, 1.0) {
            return Err(format!("vector {tested}: {got} vs oracle {expected}"));
        }
        tested += 1;
    }
    let hand = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    check(hand == 0.8, format!("1000 tie-heavy vectors match the oracle exactly; hand case {hand}"))
}

struct Pipeline {
    dir: PathBuf,
}

impl Pipeline {
    fn data(&self) -> PathBuf {
        self.dir.join("data")
    }

    fn synth(&self) {
        cmd_synth(&SynthArgs {
            seed: 7,
            train_pairs: 2000,
            eval_pairs: 400,
            vocab: 64,
            out: self.data(),
        })
        .unwrap();
    }

    fn train(&self, config: &Path, name: &str) -> lacos::TrainSummary {
        cmd_train(&TrainArgs {
            config: config.to_path_buf(),
            data: Some(self.data().join("train.jsonl")),
            out: Some(self.dir.join(name)),
        })
        .unwrap()
    }

    fn eval(&self, model: &Path, report: &str) -> lacos::EvalReport {
        cmd_eval(&EvalArgs {
            model: model.to_path_buf(),
            data: self.data().join("sts.jsonl"),
            report: self.dir.join(report),
        })
        .unwrap()
    }

    fn sweep(&self, config: &Path) -> lacos::cli::SweepReport {
        cmd_sweep(&SweepArgs {
            r: vec![1, 2, 4, 8, 16],
            batch: vec![32],
            lr: vec![1e-4],
            config: config.to_path_buf(),
            data: Some(self.data().join("train.jsonl")),
            out: self.dir.join("sweep"),
        })
        .unwrap()
    }
}

fn repo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json")
}

fn learning_signal(p: &Pipeline) -> Outcome {
    p.synth();
    let config = repo_config();
    let mut baseline_cfg = RunConfig::from_json(&fs::read_to_string(&config).unwrap()).unwrap();
    baseline_cfg.epochs = 0;
    let baseline_path = p.dir.join("baseline.json");
    fs::write(&baseline_path, baseline_cfg.to_json()).unwrap();
    p.train(&baseline_path, "baseline");
    let base = p.eval(&p.dir.join("baseline/adapter.lacs"), "baseline_report.json");

    let s = p.train(&config, "trained");
    let trained = p.eval(&p.dir.join("trained/adapter.lacs"), "trained_report.json");
    let running = s.last_epoch_running_loss.unwrap_or(f64::INFINITY);
    let (b, t) = (base.max.unwrap_or(f64::NAN), trained.max.unwrap_or(f64::NAN));
    check(
        s.final_loss < 0.7 * s.initial_loss && running < 0.7 * s.initial_loss && t - b >= 0.3,
        format!(
            "loss {:.3} -> {:.3} (ratio {:.3}; running epoch mean ratio {:.3}); max_rho baseline {b:.4} -> trained {t:.4} (gain {:+.4})",
            s.initial_loss,
            s.final_loss,
            s.final_loss / s.initial_loss,
            running / s.initial_loss,
            t - b
        ),
    )
}

fn quantized_parity(p: &Pipeline) -> Outcome {
    let out = p.dir.join("trained/quantized.lacs");
    let ratio = cmd_quantize(&QuantizeArgs {
        input: p.dir.join("trained/adapter.lacs"),
        out: out.clone(),
        block_size: 64,
    })
    .unwrap();
    let q = p.eval(&out, "quantized_report.json");
    let dense: lacos::EvalReport =
        serde_json::from_str(&fs::read_to_string(p.dir.join("trained_report.json")).unwrap()).unwrap();
    let loaded = lacos::checkpoint::load::<f32>(&out).unwrap();
    let (stored, f32_bytes) = frozen_footprint(&loaded.model);
    let diff = (q.max.unwrap() - dense.max.unwrap()).abs();
    check(
        diff < 0.02 && loaded.model.is_quantized() && stored as f64 / f32_bytes as f64 == ratio,
        format!(
            "max_rho dense {:.4} vs q8 {:.4} (|diff| {diff:.4}); frozen ratio {ratio:.4}",
            dense.max.unwrap(),
            q.max.unwrap()
        ),
    )
}

fn sweep_mechanics(p: &Pipeline) -> Outcome {
    let report = p.sweep(&repo_config());
    let losses: Vec<f64> = report.runs.iter().filter_map(|r| r.validation_loss).collect();
    let z: Vec<f64> = report.runs.iter().filter_map(|r| r.standardized).collect();
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let best = report.best.as_ref().ok_or("no best run")?;
    let ok = report.runs.len() == 5
        && losses.len() == 5
        && z.len() == 5
        && z.iter().all(|v| (0.0..=1.0).contains(v))
        && z.contains(&0.0)
        && z.contains(&1.0)
        && best.validation_loss == min
        && report.runs[best.index].validation_loss == Some(min);
    let listing: Vec<String> = report
        .runs
        .iter()
        .map(|r| format!("r={}:{:.4}", r.r, r.validation_loss.unwrap_or(f64::NAN)))
        .collect();
    check(ok, format!("5 runs [{}], best r={}", listing.join(" "), best.r))
}

fn same_bytes(a: &Path, b: &Path, rel: &str) -> Result<(), String> {
    let (x, y) = (fs::read(a.join(rel)), fs::read(b.join(rel)));
    match (x, y) {
        (Ok(x), Ok(y)) if x == y => Ok(()),
        _ => Err(format!("{rel} differs")),
    }
}

fn determinism(first: &Pipeline, second: &Pipeline) -> Outcome {
    second.synth();
    second.train(&repo_config(), "trained");
    second.eval(&second.dir.join("trained/adapter.lacs"), "trained_report.json");
    second.sweep(&repo_config());
    let mut files = vec![
        "data/train.jsonl".to_string(),
        "data/sts.jsonl".to_string(),
        "trained/metrics.jsonl".to_string(),
        "trained/summary.json".to_string(),
        "trained/adapter.lacs".to_string(),
        "trained_report.json".to_string(),
        "sweep/sweep_report.json".to_string(),
    ];
    for i in 0..5 {
        files.push(format!("sweep/runs/{i}/metrics.jsonl"));
        files.push(format!("sweep/runs/{i}/adapter.lacs"));
    }
    for f in &files {
        same_bytes(&first.dir, &second.dir, f)?;
    }
    Ok(format!("{} artifacts byte-identical across re-runs", files.len()))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let first = Pipeline {
        dir: tmp.path().join("first"),
    };
    let second = Pipeline {
        dir: tmp.path().join("second"),
    };
    let criteria: Vec<Criterion> = vec![
        ("quantization round-trip bound", Box::new(quantization_round_trip)),
        ("quantization footprint", Box::new(quantization_footprint)),
        ("LoRA init identity", Box::new(lora_init_identity)),
        ("trainable fraction", Box::new(trainable_fraction_reference)),
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("MNR oracle values", Box::new(mnr_oracle_values)),
        ("optimizer equivalence and convergence", Box::new(optimizer_equivalence)),
        ("Spearman oracle", Box::new(spearman_oracle)),
        ("end-to-end learning signal", Box::new(|| learning_signal(&first))),
        ("quantized-inference parity", Box::new(|| quantized_parity(&first))),
        ("sweep mechanics", Box::new(|| sweep_mechanics(&first))),
        ("determinism", Box::new(|| determinism(&first, &second))),
    ];
    let mut lines = Vec::new();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let line = format!("criterion {:>2} {status} {name} ({secs:.1}s): {detail}", i + 1);
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
