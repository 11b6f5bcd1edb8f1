//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 2 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemadapt::autodiff::{check_gradients, Tape, Tensor, Var};
use schemadapt::bench::protocols::{
    evaluate_on_target, generalization_gap, run_ablations, run_few_shot, train_source, BenchConfig,
};
use schemadapt::bench::{bayes_probe, generate_pair, GeneratorConfig, Paraphrase};
use schemadapt::config::{ProviderSettings, RunConfig};
use schemadapt::encoder::{encode_dataset, EncoderVariant, ProjectionKind, SchemaEmbeddings, TokenRef};
use schemadapt::embedding::OfflineEmbedder;
use schemadapt::metrics::{auc_pr, auroc, balanced_accuracy, confusion, f1, metric_report};
use schemadapt::mgda::min_norm_solve;
use schemadapt::model::{FusionConfig, FusionModel, SampleInput};
use schemadapt::objectives::{contrastive_loss, contrastive_on_tape, focal_loss, focal_on_tape, ContrastParams};
use schemadapt::pipeline::train_run;
use schemadapt::schema::{parse_dataset, parse_schema, DatasetMatrix};
use schemadapt::trainer::TrainData;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| format!("{x:.4}"))
}

// ---------------------------------------------------------------- 1

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduce an op output to a scalar through a fixed random weighting, so
/// every output entry carries a distinct cotangent.
fn project(t: &mut Tape, y: Var, seed: u64) -> schemadapt::Result<Var> {
    let (r, c) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = t.constant(&rand_tensor(&mut rng, r, c, -1.0, 1.0));
    let m = t.mul(y, w)?;
    t.sum(m)
}

fn op_gradchecks(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c, k) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5));
    let x = rand_tensor(&mut rng, r, c, -1.5, 1.5);
    let y = rand_tensor(&mut rng, r, c, -1.5, 1.5);
    let pos = rand_tensor(&mut rng, r, c, 0.5, 2.0);
    let a = rand_tensor(&mut rng, r, k, -1.0, 1.0);
    let b = rand_tensor(&mut rng, k, c, -1.0, 1.0);
    let row = rand_tensor(&mut rng, 1, c, -1.0, 1.0);
    let s = rand_tensor(&mut rng, 1, 1, -1.0, 1.0);
    let qkv: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 5, 4, -1.0, 1.0)).collect();
    let col = rand_tensor(&mut rng, 6, 1, -2.0, 2.0);
    let labels = [Some(true), Some(false), None, Some(true), Some(false), Some(false)];

    type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> schemadapt::Result<Var>>;
    let unary = |f: fn(&mut Tape, Var) -> schemadapt::Result<Var>| -> OpFn { Box::new(move |t, v| f(t, v[0])) };
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![x.clone(), y.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![x.clone(), y.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![x.clone(), y.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![x.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul_row", vec![x.clone(), row.clone()], Box::new(|t, v| t.mul_row(v[0], v[1]))),
        ("scale", vec![x.clone(), s.clone()], Box::new(|t, v| t.scale(v[0], v[1]))),
        ("scalar_mul", vec![x.clone()], Box::new(|t, v| t.scalar_mul(v[0], -1.7))),
        ("tanh", vec![x.clone()], unary(Tape::tanh)),
        ("sigmoid", vec![x.clone()], unary(Tape::sigmoid)),
        ("exp", vec![x.clone()], unary(Tape::exp)),
        ("log", vec![pos.clone()], unary(Tape::log)),
        ("gelu", vec![x.clone()], unary(Tape::gelu)),
        ("softmax", vec![x.clone()], unary(Tape::softmax)),
        ("layer_norm", vec![x.clone()], unary(Tape::layer_norm)),
        ("l2_normalize_rows", vec![x.clone()], unary(Tape::l2_normalize_rows)),
        ("sum", vec![x.clone()], unary(Tape::sum)),
        ("mean", vec![x.clone()], unary(Tape::mean)),
        ("concat_rows", vec![x.clone(), y.clone()], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![x.clone(), a.clone()], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("slice", vec![x.clone()], Box::new(move |t, v| t.slice(v[0], 1, 1, r - 1, c - 1))),
        (
            "gather_rows",
            vec![x.clone(), y.clone()],
            Box::new(|t, v| t.gather_rows(&[v[0], v[1]], &[(1, 0), (0, 1), (1, 0), (0, 0)])),
        ),
        (
            "segment_attention",
            qkv.clone(),
            Box::new(|t, v| t.segment_attention(v[0], v[1], v[2], &[(0, 2), (2, 3)], 2)),
        ),
        (
            "focal",
            vec![col.clone()],
            Box::new(move |t, v| {
                let p = t.sigmoid(v[0])?;
                focal_on_tape(t, p, &labels, 0.7, 2.0)
            }),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (name, inputs, f) in cases {
        let check = check_gradients(&inputs, 1e-5, |t, v| {
            let out = f(t, v)?;
            project(t, out, seed)
        })
        .map_err(|e| format!("{name}: {e}"))?;
        let err = check.max_relative_error();
        ensure(err < 1e-4, || format!("{name} seed {seed}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn model_loss(model: &FusionModel, table: &Tensor, samples: &[SampleInput], seed: u64) -> (Tape, Var, Vec<Var>) {
    let mut t = Tape::new();
    let f = model.forward(&mut t, table, samples).unwrap();
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::new();
    for k in 0..model.config.num_labels {
        let labels: Vec<Option<bool>> = (0..n).map(|_| Some(rng.random_bool(0.5))).collect();
        terms.push(focal_on_tape(&mut t, f.probs[k], &labels, 0.8, 2.0).unwrap());
        terms.push(project(&mut t, f.reps[k], seed + k as u64).unwrap());
    }
    let mut loss = terms[0];
    for &v in &terms[1..] {
        loss = t.add(loss, v).unwrap();
    }
    (t, loss, f.params)
}

fn model_gradcheck(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let cfg = FusionConfig {
        d_model: 8,
        num_layers: 2,
        num_heads: 2,
        num_labels: 2,
        ffn_mult: 2,
        embed_dim: 6,
        projection: if seed % 2 == 0 { ProjectionKind::Linear } else { ProjectionKind::Mlp },
        aux_tokens: if seed % 3 == 0 { 2 } else { 0 },
        ..FusionConfig::default()
    };
    let mut model = FusionModel::new(cfg.clone(), seed).unwrap();
    model.set_gates(0.4);
    let table = rand_tensor(&mut rng, 5, 6, -1.0, 1.0);
    let samples: Vec<SampleInput> = (0..3)
        .map(|_| SampleInput {
            tokens: (0..3)
                .map(|_| TokenRef {
                    column: 0,
                    entry: rng.random_range(0..5),
                    scale: rng.random_range(0.3..1.7),
                })
                .collect(),
            aux: (0..cfg.aux_tokens * cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let (t, loss, vars) = model_loss(&model, &table, &samples, seed);
    let grads = t.backward(loss).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).expect("parameter gradient").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.iter_mut().nth(i).unwrap().value.data_mut()[j] += delta;
                let (t, l, _) = model_loss(&m, &table, &samples, seed);
                t.scalar(l)
            };
            *num = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let err = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        let name = &model.params.at(i).name;
        ensure(err < 1e-4, || format!("model seed {seed}, `{name}`: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut ops: f64 = 0.0;
    let mut full: f64 = 0.0;
    for seed in 0..20 {
        ops = ops.max(op_gradchecks(seed)?);
        full = full.max(model_gradcheck(seed)?);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("suite took {secs:.1}s"))?;
    Ok(format!("20 seeds; worst op error {ops:.1e}, worst model error {full:.1e}; {secs:.1}s"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_margin = f64::INFINITY;
    let mut worst_two = 0.0f64;
    for case in 0..500 {
        let t = rng.random_range(2..=24);
        let d = rng.random_range(10..=1000);
        let g: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s = min_norm_solve(&g, 100, 1e-6).map_err(|e| e.to_string())?;
        let gbar: Vec<f64> = (0..d).map(|j| (0..t).map(|i| s.alpha[i] * g[i][j]).sum()).collect();
        let nn = dot(&gbar, &gbar);
        let margin = g.iter().map(|gt| dot(gt, &gbar)).fold(f64::INFINITY, f64::min) - nn;
        worst_margin = worst_margin.min(margin);
        ensure(margin >= -1e-6, || format!("case {case}: KKT margin {margin:e}"))?;

        // Two-task oracle on the first two gradients.
        let pair = [g[0].clone(), g[1].clone()];
        let s2 = min_norm_solve(&pair, 100, 1e-6).map_err(|e| e.to_string())?;
        let diff: Vec<f64> = pair[0].iter().zip(&pair[1]).map(|(a, b)| a - b).collect();
        let a = (dot(&pair[1], &pair[1]) - dot(&pair[0], &pair[1])) / dot(&diff, &diff);
        let a = a.clamp(0.0, 1.0);
        let err = (s2.alpha[0] - a).abs().max((s2.alpha[1] - (1.0 - a)).abs());
        worst_two = worst_two.max(err);
        ensure(err < 1e-6, || format!("case {case}: two-task alpha off by {err:e}"))?;
    }
    let s = min_norm_solve(&[vec![2.0, 0.0], vec![0.0, 1.0]], 100, 1e-6).map_err(|e| e.to_string())?;
    ensure((s.alpha[0] - 0.2).abs() < 1e-9 && (s.alpha[1] - 0.8).abs() < 1e-9, || {
        format!("diag(2,1) gave alpha {:?}", s.alpha)
    })?;
    Ok(format!(
        "500 sets; min KKT margin {worst_margin:.1e}; two-task error {worst_two:.1e}; alpha=({:.6}, {:.6})",
        s.alpha[0], s.alpha[1]
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let p: f64 = rng.random_range(1e-4..1.0 - 1e-4);
        let y = rng.random_bool(0.5);
        let bce = if y { -p.ln() } else { -(1.0 - p).ln() };
        worst = worst.max((focal_loss(p, y, 1.0, 0.0) - bce).abs());
    }
    ensure(worst <= 1e-12, || format!("focal vs BCE differs by {worst:e}"))?;

    let p = ContrastParams::default();
    let reps: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    for value in [true, false] {
        let labels = vec![Some(value); 8];
        let l = contrastive_loss(&reps, &labels, &p);
        ensure(l == 0.0, || format!("shared-label contrastive loss {l:e}"))?;
        let mut t = Tape::new();
        let r = t.leaf(&Tensor::from_rows(&reps).unwrap().with_grad());
        let v = contrastive_on_tape(&mut t, r, &labels, &p).map_err(|e| e.to_string())?;
        ensure(t.scalar(v) == 0.0, || format!("tape contrastive loss {:e}", t.scalar(v)))?;
    }

    // Stop-gradient: the hardness ratio W_beta / W_alpha is frozen at its
    // current value, then the remaining expression is differentiated.
    let labels = vec![Some(true), Some(false), Some(true), None, Some(false), Some(true), Some(true), Some(false)];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let ratio: Vec<Option<f64>> = (0..reps.len())
        .map(|i| {
            labels[i]?;
            let (mut wa, mut wb) = (0.0, 0.0);
            for j in 0..reps.len() {
                if j != i && labels[j].is_some() {
                    let s = dot(&reps[i], &reps[j]);
                    wa += (s / p.tau_alpha).exp();
                    wb += (s / p.tau_beta).exp();
                }
            }
            Some(wb / wa)
        })
        .collect();
    let detached = |r: &[Vec<f64>]| -> f64 {
        let mut vals = Vec::new();
        for i in 0..r.len() {
            let (Some(yi), Some(c)) = (labels[i], ratio[i]) else { continue };
            let (mut wa, mut pos, mut peers) = (0.0, 0.0, 0);
            for j in 0..r.len() {
                let Some(yj) = labels[j] else { continue };
                if j == i {
                    continue;
                }
                let e = (dot(&r[i], &r[j]) / p.tau_alpha).exp();
                wa += e;
                if yj == yi {
                    pos += e;
                    peers += 1;
                }
            }
            if peers > 0 {
                vals.push(-c * (pos / wa).ln());
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let mut t = Tape::new();
    let r = t.leaf(&Tensor::from_rows(&reps).unwrap().with_grad());
    let v = contrastive_on_tape(&mut t, r, &labels, &p).map_err(|e| e.to_string())?;
    let analytic = t.backward(v).map_err(|e| e.to_string())?.wrt(r).unwrap().to_vec();
    let h = 1e-6;
    let mut work = reps.clone();
    let mut worst_sg = 0.0f64;
    for i in 0..work.len() {
        for k in 0..work[i].len() {
            let o = work[i][k];
            work[i][k] = o + h;
            let up = detached(&work);
            work[i][k] = o - h;
            let dn = detached(&work);
            work[i][k] = o;
            let num = (up - dn) / (2.0 * h);
            let a = analytic[i * work[i].len() + k];
            worst_sg = worst_sg.max((a - num).abs() / (1.0 + num.abs()));
        }
    }
    ensure(worst_sg < 1e-7, || format!("stop-gradient mismatch {worst_sg:e}"))?;
    Ok(format!(
        "focal/BCE max diff {worst:.1e}; shared-label contrastive = 0; stop-gradient max diff {worst_sg:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

fn renamed(data: &DatasetMatrix) -> DatasetMatrix {
    let mut schema = data.schema.clone();
    for c in &mut schema.columns {
        c.name = format!("RENAMED_{}", c.name.to_lowercase());
    }
    let csv = data.to_csv();
    let (header, body) = csv.split_once('\n').unwrap();
    let header: Vec<String> = header
        .split(',')
        .map(|h| match data.schema.column_index(h) {
            Some(i) => schema.columns[i].name.clone(),
            None => h.to_string(),
        })
        .collect();
    let schema = parse_schema(&schema.to_json()).unwrap();
    parse_dataset(&format!("{}\n{body}", header.join(",")), &schema).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn criterion_4() -> Check {
    let g = GeneratorConfig {
        n_source: 120,
        n_target: 40,
        ..GeneratorConfig::default()
    };
    let a = generate_pair(&g, 4).map_err(|e| e.to_string())?.source;
    let b = renamed(&a);
    ensure(a.schema.columns.iter().zip(&b.schema.columns).all(|(x, y)| x.name != y.name), || {
        "rename left a column unchanged".into()
    })?;
    let provider = OfflineEmbedder::new(4, 32).unwrap();
    let encode = |d: &DatasetMatrix| -> TrainData {
        let emb = SchemaEmbeddings::build(&d.schema, EncoderVariant::Semantic, &provider).unwrap();
        let enc = encode_dataset(d, &emb).unwrap();
        TrainData::from_encoded(&enc, None, true, d.schema.label_columns.clone()).unwrap()
    };
    let (ea, eb) = (encode(&a), encode(&b));
    ensure(bits(ea.table.data()) == bits(eb.table.data()), || "embedding tables differ".into())?;
    ensure(ea.samples == eb.samples, || "token sequences differ".into())?;

    let model = FusionModel::new(
        FusionConfig {
            d_model: 16,
            num_layers: 2,
            num_heads: 4,
            num_labels: a.schema.num_labels(),
            embed_dim: 32,
            gate_init: 0.5,
            ..FusionConfig::default()
        },
        4,
    )
    .unwrap();
    let pa = model.predict(&ea.table, &ea.samples).map_err(|e| e.to_string())?;
    let pb = model.predict(&eb.table, &eb.samples).map_err(|e| e.to_string())?;
    for (x, y) in pa.iter().zip(&pb) {
        ensure(bits(&x.logits) == bits(&y.logits), || "logits differ".into())?;
    }
    let probs = |p: &[schemadapt::model::LabelOutputs]| -> Vec<Vec<f64>> { p.iter().map(|o| o.probabilities.clone()).collect() };
    let ra = metric_report(&probs(&pa), &ea.labels, &ea.label_names, 0.5).map_err(|e| e.to_string())?;
    let rb = metric_report(&probs(&pb), &eb.labels, &eb.label_names, 0.5).map_err(|e| e.to_string())?;
    ensure(ra.to_json() == rb.to_json(), || "metric reports differ".into())?;
    Ok(format!("{} rows, {} columns renamed; tokens, logits and metrics bitwise equal", a.len(), a.schema.columns.len()))
}

// ---------------------------------------------------------------- 5

fn criterion_5(extra: &mut Vec<(String, Check)>) -> Check {
    let cfg = BenchConfig::default();
    let light = generate_pair(&cfg.generator, cfg.seed).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (semantic, _) = train_source(&light, EncoderVariant::Semantic, &cfg).map_err(|e| e.to_string())?;
    let sem = evaluate_on_target(&semantic, &light, EncoderVariant::Semantic, &cfg).map_err(|e| e.to_string())?;
    let (random, _) = train_source(&light, EncoderVariant::RandomEmbed, &cfg).map_err(|e| e.to_string())?;
    let rnd = evaluate_on_target(&random, &light, EncoderVariant::RandomEmbed, &cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    let (s, r) = (sem.macro_auroc().unwrap_or(f64::NAN), rnd.macro_auroc().unwrap_or(f64::NAN));
    let src = semantic.test_report.macro_auroc().unwrap_or(f64::NAN);

    // Spec examples riding on the same runs.
    let final_val = semantic.curves.last().and_then(|c| c.val_macro.auroc);
    extra.push((
        "source model final validation macro AUROC > 0.85".into(),
        if final_val.unwrap_or(0.0) > 0.85 {
            Ok(format!("{}", fmt_opt(final_val)))
        } else {
            Err(format!("{}", fmt_opt(final_val)))
        },
    ));
    let identical_cfg = GeneratorConfig {
        paraphrase: Paraphrase::Identical,
        ..cfg.generator.clone()
    };
    let identical = generate_pair(&identical_cfg, cfg.seed).map_err(|e| e.to_string())?;
    let same = if identical.source == light.source {
        evaluate_on_target(&semantic, &identical, EncoderVariant::Semantic, &cfg).map_err(|e| e.to_string())?
    } else {
        let (m, _) = train_source(&identical, EncoderVariant::Semantic, &cfg).map_err(|e| e.to_string())?;
        evaluate_on_target(&m, &identical, EncoderVariant::Semantic, &cfg).map_err(|e| e.to_string())?
    };
    let same = same.macro_auroc().unwrap_or(f64::NAN);
    extra.push((
        "zero-shot, identical paraphrase: target within 0.02 of source test".into(),
        if (same - src).abs() <= 0.02 {
            Ok(format!("target {same:.4}, source test {src:.4}"))
        } else {
            Err(format!("target {same:.4}, source test {src:.4}"))
        },
    ));

    let detail = format!("semantic {s:.4}, random {r:.4}, gap {:.4}, source test {src:.4}; {secs:.0}s", s - r);
    ensure(s - r >= 0.10, || format!("gap below 0.10: {detail}"))?;
    ensure((0.45..=0.60).contains(&r), || format!("random outside [0.45, 0.60]: {detail}"))?;
    ensure(secs < 600.0, || format!("over 10 min: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn criterion_6(extra: &mut Vec<(String, Check)>) -> Check {
    let cfg = BenchConfig::default();
    let g = GeneratorConfig {
        n_target: cfg.few_shot.n_target,
        ..cfg.generator.clone()
    };
    let pair = generate_pair(&g, cfg.seed).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let result = run_few_shot(&pair, &cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let grid = &cfg.few_shot.grid;
    let score = |arm: &str, n: usize| {
        result
            .arm(&format!("{arm}_n{n}"))
            .and_then(|a| a.macro_auroc("target_test"))
            .unwrap_or(f64::NAN)
    };
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (i, &n) in grid.iter().enumerate() {
        let (ft, sc) = (score("finetune", n), score("scratch", n));
        let slack = if i + 1 == grid.len() { 0.01 } else { 0.0 };
        parts.push(format!("n={n}: {ft:.4} vs {sc:.4}"));
        if !(ft >= sc - slack) {
            failures.push(format!("n={n}"));
        }
    }
    let ft: Vec<f64> = grid.iter().map(|&n| score("finetune", n)).collect();
    let monotone = ft.windows(2).all(|w| w[1] >= w[0] - 0.02);
    extra.push((
        "few-shot: fine-tuned arm monotone in n (0.02 slack)".into(),
        if monotone { Ok(format!("{ft:.4?}")) } else { Err(format!("{ft:.4?}")) },
    ));
    let last = *grid.last().unwrap();
    let gap = (score("finetune", last) - score("scratch", last)).abs();
    extra.push((
        format!("few-shot: arms within 0.05 at n={last}"),
        if gap <= 0.05 { Ok(format!("gap {gap:.4}")) } else { Err(format!("gap {gap:.4}")) },
    ));
    let detail = format!("{}; {secs:.0}s", parts.join("; "));
    ensure(failures.is_empty(), || format!("ordering violated at {}: {detail}", failures.join(", ")))?;
    ensure(secs < 1200.0, || format!("over 20 min: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for layers in 1..=3 {
        for seed in 0..5 {
            let cfg = FusionConfig {
                d_model: 16,
                num_layers: layers,
                num_heads: 4,
                num_labels: 3,
                embed_dim: 12,
                aux_tokens: 2,
                ..FusionConfig::default()
            };
            let model = FusionModel::new(cfg.clone(), seed).unwrap();
            let table = rand_tensor(&mut rng, 7, 12, -1.0, 1.0);
            let samples: Vec<SampleInput> = (0..4)
                .map(|_| SampleInput {
                    tokens: (0..rng.random_range(1..6))
                        .map(|_| TokenRef {
                            column: 0,
                            entry: rng.random_range(0..7),
                            scale: rng.random_range(0.2..1.8),
                        })
                        .collect(),
                    aux: (0..2 * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect();
            let mut t = Tape::new();
            let vars = model.params.bind(&mut t);
            let (x, segments) = model.assemble(&mut t, &vars, &table, &samples).map_err(|e| e.to_string())?;
            let y = model.transform(&mut t, &vars, x, &segments).map_err(|e| e.to_string())?;
            ensure(bits(t.value(x)) == bits(t.value(y)), || {
                format!("{layers} layer(s), seed {seed}: output differs from input")
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} models with 1 to 3 layers: output bitwise equal to input"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-12);
    // 6 x 2 fixture. Label a: positives score 0.9, 0.7, 0.6 and negatives
    // 0.8, 0.4, 0.2, so 7 of 9 pairs are ordered. Label b has a three-way tie
    // at 0.5 holding two positives and a negative.
    let scores = [[0.9, 0.3], [0.8, 0.5], [0.7, 0.5], [0.6, 0.1], [0.4, 0.9], [0.2, 0.5]];
    let labels = [[true, false], [false, true], [true, false], [true, false], [false, true], [false, true]];
    // AUC-PR (trapezoid from recall 0, precision 1):
    //   a: 1/3 + 0 + (1/3)(1/2 + 2/3)/2 + (1/3)(2/3 + 3/4)/2 = 55/72
    //   b: 1/3 + (2/3)(1 + 3/4)/2 = 11/12
    // At threshold 0.5 both labels give TP 3, FP 1, TN 2, FN 0:
    //   F1 = 6/7, balanced accuracy = (1 + 2/3)/2 = 5/6.
    let expected = [(7.0 / 9.0, 55.0 / 72.0, 6.0 / 7.0, 5.0 / 6.0), (8.0 / 9.0, 11.0 / 12.0, 6.0 / 7.0, 5.0 / 6.0)];
    for (k, &(roc, pr, f, ba)) in expected.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let y: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        let c = confusion(&s, &y, 0.5);
        ensure(close(auroc(&s, &y), roc), || format!("label {k} auroc {:?}", auroc(&s, &y)))?;
        ensure(close(auc_pr(&s, &y), pr), || format!("label {k} auc_pr {:?}", auc_pr(&s, &y)))?;
        ensure(close(f1(c), f), || format!("label {k} f1 {:?}", f1(c)))?;
        ensure(close(balanced_accuracy(c), ba), || format!("label {k} balanced accuracy {:?}", balanced_accuracy(c)))?;
    }
    let probs: Vec<Vec<f64>> = scores.iter().map(|r| r.to_vec()).collect();
    let obs: Vec<Vec<Option<bool>>> = labels.iter().map(|r| r.iter().map(|&y| Some(y)).collect()).collect();
    let report = metric_report(&probs, &obs, &["a".into(), "b".into()], 0.5).map_err(|e| e.to_string())?;
    ensure(close(report.macro_.auroc, 5.0 / 6.0), || format!("macro auroc {:?}", report.macro_.auroc))?;
    ensure(close(report.macro_.auc_pr, 121.0 / 144.0), || format!("macro auc_pr {:?}", report.macro_.auc_pr))?;

    // 3 x 1 fixture: both positives rank below the negative.
    //   AUC-PR: 0 + (1/2)(0 + 1/2)/2 + (1/2)(1/2 + 2/3)/2 = 5/12
    //   threshold 0.5: TP 0, FP 1, TN 0, FN 2, so F1 = 0 and balanced accuracy = 0.
    let (s, y) = ([0.2, 0.6, 0.4], [true, false, true]);
    let c = confusion(&s, &y, 0.5);
    ensure(close(auroc(&s, &y), 0.0), || format!("3x1 auroc {:?}", auroc(&s, &y)))?;
    ensure(close(auc_pr(&s, &y), 5.0 / 12.0), || format!("3x1 auc_pr {:?}", auc_pr(&s, &y)))?;
    ensure(close(f1(c), 0.0) && close(balanced_accuracy(c), 0.0), || "3x1 threshold metrics".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let n = rng.random_range(4..60);
        // Scores on a coarse grid so ties occur.
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64 / 40.0).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        y[0] = true;
        y[1] = false;
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v - 1.0).exp() + v * v * v).collect();
        ensure(auroc(&s, &y) == auroc(&t, &y), || format!("case {case}: AUROC changed under a monotone map"))?;
    }
    Ok("6x2 and 3x1 fixtures exact to 1e-12; 100 monotone-transform cases invariant".into())
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let g = GeneratorConfig {
        n_source: 300,
        n_target: 40,
        ..GeneratorConfig::default()
    };
    let data = generate_pair(&g, 9).map_err(|e| e.to_string())?.source;
    let mut cfg = RunConfig {
        seed: 9,
        provider: ProviderSettings {
            dimension: 32,
            ..ProviderSettings::default()
        },
        ..RunConfig::default()
    };
    cfg.model.d_model = 16;
    cfg.model.embed_dim = 32;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg.bench.provider.dimension = 64;
    cfg.propagate_seed();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train_run(&data, &cfg, d.path()).map_err(|e| e.to_string())?;
    }
    let mut sizes = Vec::new();
    for f in ["train_log.ndjson", "checkpoint.bin", "final.bin", "metrics.json"] {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{f} differs between runs"))?;
        sizes.push(format!("{f} {}B", a.len()));
    }
    Ok(format!("two seeded runs byte-identical: {}", sizes.join(", ")))
}

// ---------------------------------------------------------------- 10

fn criterion_10(extra: &mut Vec<(String, Check)>) -> Check {
    let cfg = BenchConfig::default();
    let pair = generate_pair(&cfg.generator, cfg.seed).map_err(|e| e.to_string())?;
    let result = run_ablations(&pair, &cfg).map_err(|e| e.to_string())?;
    let arm = |n: &str| result.arm(n).ok_or_else(|| format!("arm {n} missing"));
    let (aux, both, table) = (arm("modality_aux")?, arm("modality_table_aux")?, arm("modality_table")?);
    let gap_aux = generalization_gap(&aux.curves, 1).unwrap_or(f64::NAN);
    let gap_both = generalization_gap(&both.curves, 1).unwrap_or(f64::NAN);

    let (tb, ta) = (both.macro_auroc("test").unwrap_or(f64::NAN), table.macro_auroc("test").unwrap_or(f64::NAN));
    extra.push((
        "ablation: table+aux >= table-only - 0.02".into(),
        if tb >= ta - 0.02 {
            Ok(format!("{tb:.4} vs {ta:.4}"))
        } else {
            Err(format!("{tb:.4} vs {ta:.4}"))
        },
    ));
    let rows = result.to_markdown().lines().filter(|l| l.starts_with("| ") && !l.starts_with("| arm")).count();
    extra.push((
        "ablation: every arm has one table row".into(),
        if rows == result.arms.len() && rows == 8 { Ok(format!("{rows} rows")) } else { Err(format!("{rows} rows")) },
    ));

    let detail = format!("final val-train loss gap: aux-only {gap_aux:.4}, table+aux {gap_both:.4}");
    ensure(gap_aux > gap_both, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- benchmark validity

fn probe_check() -> Check {
    let cfg = BenchConfig::default();
    let pair = generate_pair(&cfg.generator, cfg.seed).map_err(|e| e.to_string())?;
    let macro_of = |z: &[Vec<f64>], d: &DatasetMatrix| -> Option<f64> {
        let per = bayes_probe(z, &d.label_matrix()).ok()?;
        let v: Vec<f64> = per.into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (s, t) = (macro_of(&pair.source_z, &pair.source), macro_of(&pair.target_z, &pair.target));
    let detail = format!("source {}, target {}", fmt_opt(s), fmt_opt(t));
    ensure(s.unwrap_or(0.0) >= 0.9 && t.unwrap_or(0.0) >= 0.9, || detail.clone())?;
    Ok(detail)
}

fn run_guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let names = [
        "gradient correctness",
        "MGDA certificate",
        "loss reductions",
        "schema invariance",
        "zero-shot ordering",
        "few-shot ordering",
        "gate-zero identity",
        "metric oracle",
        "end-to-end reproducibility",
        "overfitting signature",
    ];
    let mut extra: Vec<(String, Check)> = Vec::new();
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !want(n) {
            continue;
        }
        let start = Instant::now();
        let r = run_guarded(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut extra),
            6 => criterion_6(&mut extra),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => criterion_10(&mut extra),
        });
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS [{n:>2}] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{n:>2}] {name}: {d} ({secs:.1}s)");
            }
        }
    }
    if want(5) {
        extra.push(("benchmark validity: Bayes probe >= 0.9 on both sides".into(), run_guarded(probe_check)));
    }
    for (name, r) in extra {
        match r {
            Ok(d) => println!("  check ok   {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("  check FAIL {name}: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
