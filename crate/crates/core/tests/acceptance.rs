//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Run with
//! `cargo test -p ircascade --test acceptance -- --nocapture`.

use std::collections::BTreeMap;

use ircascade::cascade::{run, CascadeConfig, ClipRefresh, ClipSource, ModelKind, Stage};
use ircascade::cnn::{conv2d_valid, fc, forward, maxpool2x2, FloatModel, Tensor};
use ircascade::energy::{estimate, report_for_rate, savings_curve, CostModel};
use ircascade::eval::ConfusionMatrix;
use ircascade::frameio::{synth_stream, to_violation_label, FrameSeq, SynthConfig};
use ircascade::quant::{
    calibrate, dequantize_value, payload_bytes, qforward, quantize_model, quantize_value, QParams,
    Requant,
};
use ircascade::train::{grad_check, train, Hyper};
use ircascade::trigger::{ClipState, TriggerConfig, THRESHOLD_NEVER};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn result_line(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn random_model(channels: usize, hidden: usize, seed: u64) -> FloatModel {
    let mut model = FloatModel::init(channels, hidden, 22.0, 2.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for b in model.conv_b.iter_mut().chain(model.fc1_b.iter_mut()) {
        *b = rng.gen_range(-0.5..0.5);
    }
    model.fc2_b[0] = rng.gen_range(-0.5..0.5);
    for c in 0..channels {
        model.bn.gamma[c] = rng.gen_range(0.5..1.5);
        model.bn.beta[c] = rng.gen_range(-0.5..0.5);
        model.bn.mean[c] = rng.gen_range(-0.5..0.5);
        model.bn.var[c] = rng.gen_range(0.2..2.0);
    }
    model
}

fn mixed_config(empty_fraction: f64, length: usize) -> SynthConfig {
    SynthConfig {
        background_temp: 22.0,
        noise_sigma: 0.2,
        blob_amplitude: 3.0,
        blob_sigma: 0.9,
        empty_frame_fraction: empty_fraction,
        max_people: 2,
        length,
    }
}

fn mixed_stream(empty_fraction: f64, length: usize, seed: u64) -> FrameSeq {
    synth_stream(&mixed_config(empty_fraction, length), seed).unwrap()
}

/// Mixed stream preceded by an empty warmup segment, mirroring the
/// install-in-an-empty-room bootstrap: the trigger's first clip window
/// completes before people appear.
fn warmed_stream(empty_fraction: f64, length: usize, seed: u64) -> FrameSeq {
    warmed_stream_with_noise(empty_fraction, 0.2, length, seed)
}

fn warmed_stream_with_noise(
    empty_fraction: f64,
    noise_sigma: f64,
    length: usize,
    seed: u64,
) -> FrameSeq {
    let base = SynthConfig {
        noise_sigma,
        ..mixed_config(empty_fraction, length)
    };
    let warm_cfg = SynthConfig {
        empty_frame_fraction: 1.0,
        length: 16,
        ..base.clone()
    };
    let mut frames = synth_stream(&warm_cfg, seed).unwrap();
    frames.extend(synth_stream(&base, seed.wrapping_add(1)).unwrap());
    for (i, f) in frames.iter_mut().enumerate() {
        f.frame_index = i as u32;
    }
    frames
}

fn ground_truth_cascade(model: ModelKind, threshold: u32) -> CascadeConfig {
    CascadeConfig {
        trigger: TriggerConfig::new(8, threshold).unwrap(),
        clip_source: ClipSource::GroundTruth,
        refresh: ClipRefresh::Online,
        model,
    }
}

/// Criterion 1: the default cost model reproduces the reference deployment
/// operating point at the invocation rate its averages imply.
#[test]
fn criterion_1_energy_model_reproduction() {
    let report = report_for_rate(0.6167, &CostModel::default());
    let energy_ok = (report.avg_energy - 0.75).abs() <= 0.01;
    let latency_ok = (report.avg_latency - 198.0).abs() <= 2.0;

    // Same numbers via a real trace with the imposed rate.
    let cnn = 6167;
    let total = 10_000;
    let stream_report = {
        let decisions: Vec<ircascade::cascade::Decision> = (0..total)
            .map(|i| ircascade::cascade::Decision {
                violation: false,
                stage: if i < cnn {
                    Stage::Cnn
                } else {
                    Stage::TriggerOnly
                },
                active_pixels: 0,
            })
            .collect();
        let trace = ircascade::cascade::Trace {
            labels: vec![false; total],
            decisions,
        };
        estimate(&trace, &CostModel::default()).unwrap()
    };
    let trace_ok = (stream_report.avg_energy - 0.75).abs() <= 0.01
        && (stream_report.avg_latency - 198.0).abs() <= 2.0;

    result_line(
        "1 (energy-model reproduction)",
        energy_ok && latency_ok && trace_ok,
        &format!(
            "rate 0.6167 -> {:.4} uJ, {:.2} us",
            report.avg_energy, report.avg_latency
        ),
    );
}

/// Criterion 2: savings across streams with low/medium/high empty-frame
/// fractions span a range covering [0.37, 0.57], and savings is
/// non-decreasing in the threshold on every stream.
#[test]
fn criterion_2_savings_band() {
    let model = ModelKind::Float(random_model(8, 16, 7));
    let mut at_threshold_one = Vec::new();
    let mut monotone = true;
    let mut rejections = Vec::new();

    for (i, (empty_fraction, noise)) in [(0.45, 0.2), (0.70, 0.2), (0.995, 0.0)]
        .into_iter()
        .enumerate()
    {
        let stream = warmed_stream_with_noise(empty_fraction, noise, 1500, 300 + 10 * i as u64);
        let mut traces = BTreeMap::new();
        for threshold in (0..=THRESHOLD_NEVER).step_by(4) {
            let cfg = ground_truth_cascade(model.clone(), threshold);
            traces.insert(threshold, run(&stream, &cfg).unwrap());
        }
        let curve = savings_curve(&traces, &CostModel::default()).unwrap();
        monotone &= curve.windows(2).all(|w| w[1].1 >= w[0].1);

        let one = run(&stream, &ground_truth_cascade(model.clone(), 1)).unwrap();
        let report = estimate(&one, &CostModel::default()).unwrap();
        rejections.push(1.0 - report.invocation_rate);
        at_threshold_one.push(report.savings_vs_static);
    }

    let min = at_threshold_one
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max = at_threshold_one
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let spans_band = min <= 0.37 && max >= 0.57;

    result_line(
        "2 (savings band)",
        spans_band && monotone,
        &format!(
            "savings at threshold 1: [{min:.3}, {max:.3}] covering [0.37, 0.57]; \
             rejection rates {:.3}..{:.3}; monotone in threshold: {monotone}",
            rejections.iter().copied().fold(f64::INFINITY, f64::min),
            rejections.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
    );
}

/// Criterion 3: invocation count and energy are non-increasing over the
/// full threshold grid; the sentinel threshold is the constant classifier
/// with balanced accuracy exactly 0.5.
#[test]
fn criterion_3_monotonicity_suite() {
    let model = ModelKind::Float(random_model(8, 16, 9));
    let stream = warmed_stream(0.5, 1200, 400);

    let mut prev_count = usize::MAX;
    let mut prev_energy = f64::INFINITY;
    let mut monotone = true;
    let mut last_trace = None;
    for threshold in 0..=THRESHOLD_NEVER {
        let cfg = ground_truth_cascade(model.clone(), threshold);
        let trace = run(&stream, &cfg).unwrap();
        let count = trace.cnn_invocations();
        let energy = estimate(&trace, &CostModel::default()).unwrap().avg_energy;
        monotone &= count <= prev_count && energy <= prev_energy;
        prev_count = count;
        prev_energy = energy;
        last_trace = Some(trace);
    }

    let constant = last_trace.unwrap();
    let cm = ConfusionMatrix::from_preds(&constant.predictions(), &constant.labels).unwrap();
    let bal_acc = cm.balanced_accuracy().unwrap();
    let constant_ok = constant.cnn_invocations() == 0 && bal_acc == 0.5;

    result_line(
        "3 (monotonicity suite)",
        monotone && constant_ok,
        &format!("monotone over 0..=65: {monotone}; bal_acc at 65 = {bal_acc}"),
    );
}

/// Criterion 4: on a mixed synthetic stream the cascade at threshold 1
/// loses at most 2 percentage points of balanced accuracy versus the
/// static CNN while saving at least 30% energy. With a LINAIGE CSV
/// supplied via the LINAIGE_CSV environment variable the same comparison
/// is reported informatively, without a gate.
#[test]
fn criterion_4_adaptive_vs_static_gap() {
    // Train the full-size model on one synthetic session, evaluate on a
    // fresh one. Blob amplitude is 15x the noise sigma.
    let train_stream = mixed_stream(0.4, 700, 500);
    let hyper = Hyper {
        max_epochs: 120,
        ..Hyper::default()
    };
    let outcome = train(&train_stream, &hyper, 0).unwrap();
    let stats = calibrate(&outcome.model, &train_stream).unwrap();
    let qm = quantize_model(&outcome.model, &stats).unwrap();

    let test_stream = warmed_stream(0.5, 2000, 501);
    let labels: Vec<bool> = test_stream
        .iter()
        .map(|f| to_violation_label(f.person_count))
        .collect();

    // Static baseline: the quantized CNN on every frame.
    let static_preds: Vec<bool> = test_stream
        .iter()
        .map(|f| qforward(&qm, f).unwrap().class)
        .collect();
    let static_cm = ConfusionMatrix::from_preds(&static_preds, &labels).unwrap();
    let static_bal = static_cm.balanced_accuracy().unwrap();

    let cfg = ground_truth_cascade(ModelKind::Quant(qm.clone()), 1);
    let trace = run(&test_stream, &cfg).unwrap();
    let cascade_cm = ConfusionMatrix::from_preds(&trace.predictions(), &trace.labels).unwrap();
    let cascade_bal = cascade_cm.balanced_accuracy().unwrap();
    let report = estimate(&trace, &CostModel::default()).unwrap();

    let drop = static_bal - cascade_bal;
    let pass = drop <= 0.02 && report.savings_vs_static >= 0.30;
    result_line(
        "4 (adaptive-vs-static gap)",
        pass,
        &format!(
            "static bal_acc {static_bal:.4}, cascade bal_acc {cascade_bal:.4}, \
             drop {:.2} pp, savings {:.1}%",
            drop * 100.0,
            report.savings_vs_static * 100.0
        ),
    );

    // Informative-only comparison on real data when available.
    if let Ok(path) = std::env::var("LINAIGE_CSV") {
        match ircascade::frameio::load_csv(&path) {
            Ok(frames) => report_linaige(&frames),
            Err(e) => println!("criterion 4: LINAIGE_CSV set but unusable: {e}"),
        }
    }
}

fn report_linaige(frames: &FrameSeq) {
    use ircascade::frameio::split_by_session;
    let Ok((train_set, test_set)) = split_by_session(frames, 1) else {
        println!("criterion 4: LINAIGE split on session 1 failed; skipping report");
        return;
    };
    let hyper = Hyper::default();
    let Ok(outcome) = train(&train_set, &hyper, 0) else {
        println!("criterion 4: LINAIGE training failed; skipping report");
        return;
    };
    let stats = calibrate(&outcome.model, &train_set).unwrap();
    let qm = quantize_model(&outcome.model, &stats).unwrap();
    let labels: Vec<bool> = test_set
        .iter()
        .map(|f| to_violation_label(f.person_count))
        .collect();
    let static_preds: Vec<bool> = test_set
        .iter()
        .map(|f| qforward(&qm, f).unwrap().class)
        .collect();
    let static_bal = ConfusionMatrix::from_preds(&static_preds, &labels)
        .unwrap()
        .balanced_accuracy()
        .unwrap();
    let cfg = ground_truth_cascade(ModelKind::Quant(qm), 1);
    let trace = run(&test_set, &cfg).unwrap();
    let cascade_bal = ConfusionMatrix::from_preds(&trace.predictions(), &trace.labels)
        .unwrap()
        .balanced_accuracy()
        .unwrap();
    println!(
        "criterion 4 (informative, LINAIGE): static bal_acc {static_bal:.4}, \
         adaptive bal_acc {cascade_bal:.4} at threshold 1 (no pass/fail gate)"
    );
}

/// Criterion 5: numerical correctness of the kernels, the gradient,
/// quantization round-trips, float/quant agreement and the requant
/// approximation.
#[test]
fn criterion_5_numerical_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let mut detail = String::new();

    // Gradient check on a reduced model.
    let grad_model = random_model(4, 6, 601);
    let grad_frames: FrameSeq = mixed_stream(0.5, 8, 602);
    let grad_err = grad_check(&grad_model, &grad_frames, 1e-4).unwrap();
    let grad_ok = grad_err <= 1e-3;
    detail.push_str(&format!("grad rel err {grad_err:.2e}; "));

    // BN-fold two-path equivalence.
    let fold_model = random_model(6, 10, 603);
    let folded = fold_model.fold().unwrap();
    let mut fold_gap = 0.0f64;
    for frame in mixed_stream(0.5, 100, 604) {
        let a = forward(&fold_model, &frame).unwrap().probability;
        let b = forward(&folded, &frame).unwrap().probability;
        fold_gap = fold_gap.max((a - b).abs());
    }
    let fold_ok = fold_gap <= 1e-5;
    detail.push_str(&format!("fold gap {fold_gap:.2e}; "));

    // Conv / pool / fc against brute-force oracles.
    let input = Tensor::new(
        vec![1, 8, 8],
        (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let weights = Tensor::new(
        vec![5, 1, 3, 3],
        (0..45).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let bias: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let conv = conv2d_valid(&input, &weights, &bias).unwrap();
    let mut kernel_gap = 0.0f64;
    for c in 0..5 {
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = bias[c];
                for di in 0..3 {
                    for dj in 0..3 {
                        acc +=
                            weights.data[c * 9 + di * 3 + dj] * input.data[(i + di) * 8 + j + dj];
                    }
                }
                kernel_gap = kernel_gap.max((conv.data[c * 36 + i * 6 + j] - acc).abs());
            }
        }
    }
    let pooled = maxpool2x2(&conv).unwrap();
    for c in 0..5 {
        for i in 0..3 {
            for j in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        best = best.max(conv.data[c * 36 + (2 * i + di) * 6 + 2 * j + dj]);
                    }
                }
                kernel_gap = kernel_gap.max((pooled.data[c * 9 + i * 3 + j] - best).abs());
            }
        }
    }
    let fc_w = Tensor::new(
        vec![4, 45],
        (0..180).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let fc_b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fc_out = fc(&pooled.data, &fc_w, &fc_b).unwrap();
    for i in 0..4 {
        let mut acc = fc_b[i];
        for j in 0..45 {
            acc += fc_w.data[i * 45 + j] * pooled.data[j];
        }
        kernel_gap = kernel_gap.max((fc_out[i] - acc).abs());
    }
    let kernels_ok = kernel_gap <= 1e-6;
    detail.push_str(&format!("kernel oracle gap {kernel_gap:.2e}; "));

    // Quantization round-trip within half a scale step.
    let q = QParams::asymmetric(-4.0, 4.0).unwrap();
    let mut rt_ok = true;
    let mut x = -4.0;
    while x <= 4.0 {
        let back = dequantize_value(quantize_value(x, &q), &q);
        rt_ok &= (x - back).abs() <= q.scale / 2.0 + 1e-12;
        x += 0.003;
    }
    detail.push_str(&format!("round-trip within scale/2: {rt_ok}; "));

    // Requant multiplier relative error.
    let mut requant_ok = true;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..200 {
        let ratio = 10f64.powf(rng.gen_range(-6.0..1.0));
        let r = Requant::from_ratio(ratio).unwrap();
        let rel = (r.realized() - ratio).abs() / ratio;
        worst_rel = worst_rel.max(rel);
        requant_ok &= rel <= 2f64.powi(-30);
    }
    detail.push_str(&format!("requant rel err {worst_rel:.2e}; "));

    // Float/quant class agreement over 1000 synthetic frames.
    let train_stream = mixed_stream(0.5, 400, 605);
    let outcome = train(
        &train_stream,
        &Hyper {
            channels: 8,
            hidden: 16,
            max_epochs: 40,
            ..Hyper::default()
        },
        0,
    )
    .unwrap();
    let stats = calibrate(&outcome.model, &train_stream).unwrap();
    let qm = quantize_model(&outcome.model, &stats).unwrap();
    let eval_stream = mixed_stream(0.5, 1000, 606);
    let mut agree = 0usize;
    for frame in &eval_stream {
        let f = forward(&outcome.model, frame).unwrap();
        let qp = qforward(&qm, frame).unwrap();
        if f.class == qp.class {
            agree += 1;
        }
    }
    let agreement = agree as f64 / eval_stream.len() as f64;
    let agreement_ok = agreement >= 0.97;
    detail.push_str(&format!("float/quant agreement {agreement:.3}"));

    result_line(
        "5 (numerical correctness)",
        grad_ok && fold_ok && kernels_ok && rt_ok && requant_ok && agreement_ok,
        &detail,
    );
}

/// Criterion 6: the serialized int8 payload of the full-size model lands
/// within 5% of the 37.97 kB reference model-memory figure.
#[test]
fn criterion_6_architecture_memory() {
    let model = random_model(64, 64, 700);
    let calib = mixed_stream(0.5, 20, 701);
    let stats = calibrate(&model, &calib).unwrap();
    let qm = quantize_model(&model, &stats).unwrap();
    let bytes = payload_bytes(&qm) as f64;
    let target = 37_970.0;
    let rel = (bytes - target).abs() / target;
    result_line(
        "6 (architecture memory)",
        rel <= 0.05,
        &format!(
            "payload {bytes} B vs {target} B target ({:.2}% off)",
            rel * 100.0
        ),
    );
}

/// Criterion 7: training, quantization and cascade evaluation are
/// byte-deterministic given seeds. The CLI-level check lives in the cli
/// integration tests; this covers the library surfaces.
#[test]
fn criterion_7_determinism() {
    let hyper = Hyper {
        channels: 8,
        hidden: 8,
        max_epochs: 4,
        ..Hyper::default()
    };
    let stream = mixed_stream(0.5, 160, 800);

    let a = train(&stream, &hyper, 3).unwrap();
    let b = train(&stream, &hyper, 3).unwrap();
    let models_equal = a.model == b.model;

    let stats_a = calibrate(&a.model, &stream).unwrap();
    let stats_b = calibrate(&b.model, &stream).unwrap();
    let qa = quantize_model(&a.model, &stats_a).unwrap();
    let qb = quantize_model(&b.model, &stats_b).unwrap();
    let irq_equal =
        ircascade::quant::quant_model_bytes(&qa, 3) == ircascade::quant::quant_model_bytes(&qb, 3);

    let cfg = ground_truth_cascade(ModelKind::Quant(qa), 1);
    let trace_a = run(&stream, &cfg).unwrap();
    let trace_b = run(&stream, &cfg).unwrap();
    let traces_equal = trace_a.to_csv_string() == trace_b.to_csv_string();

    result_line(
        "7 (determinism)",
        models_equal && irq_equal && traces_equal,
        &format!("models {models_equal}, irq bytes {irq_equal}, traces {traces_equal}"),
    );
}

/// The bootstrap contract: an all-background stream never reaches the CNN
/// after the first clip window, at the default threshold.
#[test]
fn bootstrap_quiet_stream_never_invokes_cnn() {
    let cfg = SynthConfig {
        empty_frame_fraction: 1.0,
        noise_sigma: 0.0,
        length: 100,
        ..SynthConfig::default()
    };
    let stream = synth_stream(&cfg, 900).unwrap();
    let cascade_cfg = ground_truth_cascade(ModelKind::Float(random_model(4, 6, 901)), 1);
    let trace = run(&stream, &cascade_cfg).unwrap();
    assert_eq!(trace.cnn_invocations(), 0);

    // Self-predicted mode bootstraps from the first window regardless.
    let mut state = ClipState::new();
    let self_cfg = CascadeConfig {
        clip_source: ClipSource::SelfPredicted,
        ..cascade_cfg
    };
    for frame in &stream[..8] {
        ircascade::cascade::classify_frame(frame, &mut state, &self_cfg).unwrap();
    }
    assert_eq!(state.clip_value(), Some(22.0));
}
