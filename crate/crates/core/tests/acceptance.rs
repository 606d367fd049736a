//! End-to-end acceptance checks. Each criterion runs against its time budget
//! and prints one PASS/FAIL line; the process exits nonzero if any fails.
//! Runs without the libtest harness so the lines are never captured.

mod common;

use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hear_core::autodiff::Graph;
use hear_core::channel_dictionary::{ChannelType, GlobalDictionary};
use hear_core::evaluation::{
    balanced_accuracy, finetune, macro_f1, predict, run_protocol, split_dataset, weighted_f1, ConfusionMatrix,
    FinetuneConfig, PatchCache,
};
use hear_core::gradcheck;
use hear_core::layout_scheduler::{
    data_parallel_step, group_by_layout, make_epoch_schedule, run_prefetch_pipeline, Dataset, ManifestEntry,
    pretrain_on_dataset, PlannedBatch, PretrainRun, WorkerSim,
};
use hear_core::model::{expand_bias, Model, ModelConfig, Variant};
use hear_core::pretraining::{
    pretrain_step, quantization_loss, quantize, quantize_rows, spectrum_targets, AdamW,
    OptimConfig, PatchBatch, PretrainConfig, SpectrumTarget,
};
use hear_core::signal::PreprocessConfig;
use hear_core::synthetic_data::{default_layouts, generate, SynthSpec};
use hear_core::{Matrix64, Model32, Model64};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Synthetic data is generated in microvolt-like units of order one.
fn synth_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        amplitude_scale: 1.0,
        ..PreprocessConfig::default()
    }
}

const EXCERPT: &str = "\
Fp1, 10-20, EEG, -0.0806, -0.0291, -0.0413
Cz, 10-20, EEG, -0.0803, -0.0138, 0.0292
E21, EGI 256, EEG, -0.0822, -0.0475, -0.0033
E65, EGI 256, EEG, -0.0811, -0.0061, 0.0491
E128, EGI 256, EEG, 0.0557, -0.0786, 0.0566
EEG001, BioSemi 128, EEG, -0.0806, -0.0291, -0.0413
EEG072, BioSemi 128, EEG, 0.0368, -0.1008, 0.0364
";

fn dictionary_fidelity() -> Outcome {
    let d = GlobalDictionary::parse(EXCERPT).map_err(|e| e.to_string())?;
    ensure(d.len() == 7, || format!("{} rows", d.len()))?;
    ensure(d.to_text() == EXCERPT, || format!("serialized:\n{}", d.to_text()))?;
    let std = GlobalDictionary::standard();
    for line in EXCERPT.lines() {
        let f: Vec<&str> = line.split(", ").collect();
        let e = std.lookup(f[0]).ok_or(format!("{} missing from bundled dictionary", f[0]))?;
        let pos: Vec<f64> = f[3..].iter().map(|v| v.parse().unwrap()).collect();
        ensure(e.position.as_slice() == pos.as_slice() && e.system == f[1], || format!("{} differs", f[0]))?;
    }
    for (raw, want) in [("EEG FP1-REF", "Fp1"), ("Fc5.", "FC5"), ("EEG:C3", "C3")] {
        let got = std.lookup(raw).map(|e| e.name.as_str());
        ensure(got == Some(want), || format!("{raw} -> {got:?}"))?;
    }
    Ok("7 rows round-trip, 3 aliases resolve".into())
}

fn eeg_names(count: usize) -> Vec<String> {
    GlobalDictionary::standard()
        .entries()
        .iter()
        .filter(|e| e.channel_type == ChannelType::Eeg && e.system.starts_with("10-"))
        .take(count)
        .map(|e| e.name.clone())
        .collect()
}

fn layout_polymorphism() -> Outcome {
    let dict = GlobalDictionary::standard();
    let mut model: Model32 = Model::init(ModelConfig::desk(), 0);
    model.add_classifier(2);
    let before = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let steps = 4;
    for c in [1usize, 3, 22, 59] {
        let names = eeg_names(c);
        let layout = dict.map_layout(&names, "poly").map_err(|e| e.to_string())?;
        ensure(layout.channel_count() == c, || format!("only {} channels mapped", layout.channel_count()))?;
        let patches = hear_core::Matrix32::randn(c * steps, 200, 1.0, &mut rng);
        let f = model.forward(&patches, &layout.coordinates, steps).map_err(|e| e.to_string())?;
        ensure(f.hidden.shape() == (1 + c * steps, 32), || format!("C={c}: hidden {:?}", f.hidden.shape()))?;
        ensure(f.hidden.all_finite(), || format!("C={c}: non-finite output"))?;
        let logits = hear_core::evaluation::sample_logits(&model, &patches, &layout.coordinates, steps)
            .map_err(|e| e.to_string())?;
        ensure(logits.shape() == (1, 2), || format!("C={c}: logits {:?}", logits.shape()))?;
    }
    ensure(model.params == before, || "parameters changed".into())?;
    Ok("C = 1, 3, 22, 59".into())
}

fn random_coords(rng: &mut ChaCha8Rng, c: usize) -> Vec<[f64; 3]> {
    (0..c)
        .map(|_| std::array::from_fn(|_| rng.random_range(-0.1..0.1)))
        .collect()
}

fn equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_perm, mut worst_shift) = (0.0f64, 0.0f64);
    for case in 0..50u64 {
        let model = gradcheck::check_model(case);
        let w = model.config.window_len;
        let c = rng.random_range(1..=6);
        let steps = rng.random_range(1..=model.config.max_time_patches);
        let coords = random_coords(&mut rng, c);
        let patches = Matrix64::randn(c * steps, w, 1.0, &mut rng);

        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pcoords: Vec<[f64; 3]> = perm.iter().map(|&p| coords[p]).collect();
        let ppatches = Matrix64::from_fn(c * steps, w, |r, col| patches.get(perm[r / steps] * steps + r % steps, col));
        let a = model.forward(&patches, &coords, steps).map_err(|e| e.to_string())?.hidden;
        let b = model.forward(&ppatches, &pcoords, steps).map_err(|e| e.to_string())?.hidden;
        let expect = Matrix64::from_fn(a.rows(), a.cols(), |r, col| {
            if r == 0 {
                a.get(0, col)
            } else {
                let (e, t) = ((r - 1) / steps, (r - 1) % steps);
                a.get(1 + perm[e] * steps + t, col)
            }
        });
        worst_perm = worst_perm.max(rel_diff(b.data(), expect.data()));

        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        let moved: Vec<[f64; 3]> = coords.iter().map(|p| std::array::from_fn(|k| p[k] + shift[k])).collect();
        let b0 = model.compute_spatial_bias(&coords).map_err(|e| e.to_string())?;
        let b1 = model.compute_spatial_bias(&moved).map_err(|e| e.to_string())?;
        for (x, y) in b0.iter().zip(&b1) {
            worst_shift = worst_shift.max(rel_diff(x.data(), y.data()));
        }
    }
    ensure(worst_perm < 1e-6, || format!("permutation relative error {worst_perm:e}"))?;
    ensure(worst_shift < 1e-6, || format!("translation relative error {worst_shift:e}"))?;
    Ok(format!("50 cases, permutation {worst_perm:.1e}, translation {worst_shift:.1e}"))
}

fn bias_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100 {
        let c = rng.random_range(1..=8);
        let steps = rng.random_range(1..=5);
        let heads = rng.random_range(1..=4);
        let mut g = Graph::<f64>::new();
        let table = g.constant(Matrix64::randn(c * c, heads, 1.0, &mut rng));
        for h in 0..heads {
            let ex = g.expand_bias(table, h, c, steps, true);
            let m = g.value(ex).clone();
            ensure(m.shape() == (1 + c * steps, 1 + c * steps), || format!("case {case}: shape"))?;
            for i in 0..m.rows() {
                ensure(m.get(0, i) == 0.0 && m.get(i, 0) == 0.0, || format!("case {case}: CLS entry {i}"))?;
            }
            for (e1, t1, e2, t2) in (0..20).map(|_| {
                (rng.random_range(0..c), rng.random_range(0..steps), rng.random_range(0..c), rng.random_range(0..steps))
            }) {
                let v = m.get(1 + e1 * steps + t1, 1 + e2 * steps + t2);
                let anchor = m.get(1 + e1 * steps, 1 + e2 * steps);
                ensure(v == anchor, || format!("case {case}: varies with time"))?;
                ensure(v == g.value(table).get(e1 * c + e2, h), || format!("case {case}: wrong pair"))?;
            }
        }
        let per_head: Vec<Matrix64> = (0..heads)
            .map(|h| Matrix64::from_fn(c, c, |a, b| g.value(table).get(a * c + b, h)))
            .collect();
        for (h, free) in expand_bias(&per_head, steps, true).iter().enumerate() {
            let ex = g.expand_bias(table, h, c, steps, true);
            ensure(g.value(ex) == free, || format!("case {case}: graph and free expansion differ"))?;
        }
    }
    Ok("100 cases".into())
}

fn gradient_checks() -> Outcome {
    let mut report = gradcheck::run_suite(0, usize::MAX).map_err(|e| e.to_string())?;
    report.extend(gradcheck::run_suite(1, usize::MAX).map_err(|e| e.to_string())?);
    for part in ["spatial", "bias", "channel_attn", "temporal", "quantization", "spectrum"] {
        ensure(report.entries.iter().any(|e| e.name.contains(part) && e.checked > 0), || {
            format!("no check covers {part}")
        })?;
    }
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    ensure(report.passed(), || format!("{} at {:e}", worst.name, worst.max_rel_error))?;
    let n: usize = report.entries.iter().map(|e| e.checked).sum();
    Ok(format!("{n} entries, max relative error {:.2e}", report.max_rel_error()))
}

fn cosine_argmax(p: &[f64], book: &Matrix64) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..book.rows())
        .map(|k| {
            let v = book.row(k);
            (k, p.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (norm(p) * norm(v)))
        })
        .fold((0, f64::NEG_INFINITY), |best, (k, s)| if s > best.1 { (k, s) } else { best })
        .0
}

fn vq_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for draw in 0..1000 {
        let book = Matrix64::randn(16, 8, 1.0, &mut rng);
        let p = Matrix64::randn(1, 8, 1.0, &mut rng);
        let got = quantize(p.row(0), &book).0;
        let want = cosine_argmax(p.row(0), &book);
        ensure(got == want, || format!("draw {draw}: {got} vs {want}"))?;
    }

    // Gradient w.r.t. the encoder side must match the finite difference of
    // the commitment term alone; w.r.t. the codebook, of the squared term.
    let x0 = Matrix64::randn(6, 8, 1.0, &mut rng);
    let v0 = Matrix64::randn(16, 8, 1.0, &mut rng);
    let idx = quantize_rows(&x0, &v0);
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    let v = g.input(v0.clone());
    let l = quantization_loss(&mut g, x, v, &idx).map_err(|e| e.to_string())?;
    let grads = g.backward(l);
    let (dx, dv) = (grads.wrt(x).unwrap().clone(), grads.wrt(v).unwrap().clone());
    let unit = |r: &[f64]| {
        let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        r.iter().map(|a| a / n).collect::<Vec<_>>()
    };
    let terms = |x: &Matrix64, v: &Matrix64| {
        idx.iter().enumerate().fold((0.0, 0.0), |(sq, nm), (r, &k)| {
            let d: f64 = unit(x.row(r)).iter().zip(unit(v.row(k))).map(|(a, b)| (a - b) * (a - b)).sum();
            (sq + d, nm + d.sqrt())
        })
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let (mut p, mut m) = (x0.clone(), x0.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let num = (terms(&p, &v0).1 - terms(&m, &v0).1) / (2.0 * h);
        worst = worst.max((num - dx.data()[i]).abs());
    }
    for i in 0..v0.len() {
        let (mut p, mut m) = (v0.clone(), v0.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let num = (terms(&x0, &p).0 - terms(&x0, &m).0) / (2.0 * h);
        worst = worst.max((num - dv.data()[i]).abs());
    }
    ensure(worst < 1e-6, || format!("stop-gradient partition off by {worst:e}"))?;
    Ok(format!("1000 draws, partition error {worst:.1e}"))
}

fn inverse_dft(t: &SpectrumTarget<f64>, w: usize) -> Vec<f64> {
    (0..w)
        .map(|n| {
            (0..w)
                .map(|k| {
                    let (kk, sign) = if k <= w / 2 { (k, 1.0) } else { (w - k, -1.0) };
                    let ang = std::f64::consts::TAU * (k * n) as f64 / w as f64;
                    t.amplitude[kk] * (ang + sign * t.phase[kk]).cos()
                })
                .sum()
        })
        .collect()
}

fn spectrum_oracle() -> Outcome {
    let w = 200;
    for k in [1usize, 5, 10, 37, 63, 99] {
        let arg = |n: usize| std::f64::consts::TAU * (k * n) as f64 / w as f64;
        let c = spectrum_targets(&(0..w).map(|n| arg(n).cos()).collect::<Vec<_>>());
        let s = spectrum_targets(&(0..w).map(|n| arg(n).sin()).collect::<Vec<_>>());
        for b in 0..=w / 2 {
            let want = if b == k { 0.5 } else { 0.0 };
            ensure((c.amplitude[b] - want).abs() < 1e-9, || format!("cos k={k} bin {b}"))?;
            ensure((s.amplitude[b] - want).abs() < 1e-9, || format!("sin k={k} bin {b}"))?;
        }
        ensure(c.phase[k].abs() < 1e-9, || format!("cos k={k} phase {}", c.phase[k]))?;
        ensure((s.phase[k] + std::f64::consts::FRAC_PI_2).abs() < 1e-9, || format!("sin k={k} phase {}", s.phase[k]))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for w in [16usize, 17, 64, 200] {
        for _ in 0..5 {
            let x: Vec<f64> = (0..w).map(|_| rng.random_range(-3.0..3.0)).collect();
            let back = inverse_dft(&spectrum_targets(&x), w);
            worst = x.iter().zip(&back).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    ensure(worst < 1e-9, || format!("round-trip error {worst:e}"))?;
    Ok(format!("round-trip error {worst:.1e}"))
}

fn small_f64_model(seed: u64) -> Model64 {
    Model::init(
        ModelConfig {
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            window_len: 200,
            max_time_patches: 4,
            codebook_size: 16,
            variant: Variant::Custom,
            bias_hidden: 8,
            mlp_ratio: 2,
        },
        seed,
    )
}

fn scheduler_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let groups = rng.random_range(1..=12);
        let manifest: Vec<ManifestEntry> = (0..rng.random_range(groups..=groups + 10))
            .map(|i| ManifestEntry {
                subset_id: format!("s{i}"),
                signature: format!("L{}", rng.random_range(0..groups)),
                channels: vec!["C3".into()],
                sample_rate: 200.0,
                num_samples: rng.random_range(0..40),
            })
            .collect();
        let index = group_by_layout(&manifest);
        let batch = rng.random_range(1..=16);
        let plan = make_epoch_schedule(&index, batch, rng.random());
        let mut seen = HashSet::new();
        for b in &plan.batches {
            for &id in &b.sample_ids {
                ensure(index.sample(id).signature == b.signature, || format!("case {case}: mixed batch"))?;
                ensure(seen.insert(id), || format!("case {case}: sample {id} twice"))?;
            }
            ensure(!b.sample_ids.is_empty() && b.sample_ids.len() <= batch, || format!("case {case}: batch size"))?;
        }
        ensure(seen.len() == index.len(), || format!("case {case}: {} of {} covered", seen.len(), index.len()))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dict = GlobalDictionary::standard();
    let spec = SynthSpec {
        samples_per_layout: 24,
        ..SynthSpec::default()
    };
    generate(&spec, &dict, dir.path()).map_err(|e| e.to_string())?;
    let ds = Dataset::open(dir.path(), &dict).map_err(|e| e.to_string())?;
    let pre = synth_preprocess();
    let plan = make_epoch_schedule(&ds.index, 5, 1);
    let collect = |depth: usize| -> Result<Vec<PatchBatch<f32>>, String> {
        let mut out = Vec::new();
        run_prefetch_pipeline(&plan, depth, |_, pb| ds.load_batch(pb, &pre, 4), |_, b| {
            out.push(b);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        Ok(out)
    };
    let sync = collect(0)?;
    ensure(sync == collect(4)?, || "prefetch changed batch contents".into())?;
    ensure(sync.len() == plan.len(), || "prefetch dropped batches".into())?;

    let sim = WorkerSim::new(Arc::clone(&ds.index), 5, 2, 4);
    let single = make_epoch_schedule(&ds.index, 5, 2);
    for step in 1..=sim.steps() {
        let sig = sim.sync_layout_index(step).map_err(|e| e.to_string())?;
        ensure(sig == single.batches[step - 1].signature, || format!("step {step}: layout differs"))?;
    }

    let cfg = PretrainConfig::default();
    let mut a = small_f64_model(1);
    let mut b = a.clone();
    let mut opt_a = AdamW::new(cfg.optim.clone(), &a.params);
    let mut opt_b = AdamW::new(cfg.optim.clone(), &b.params);
    let steps = sim.steps().min(8);
    let mut worst = 0.0f64;
    for step in 1..=steps {
        let pb: &PlannedBatch = &single.batches[step - 1];
        let batch: PatchBatch<f64> = ds.load_batch(pb, &pre, 4).map_err(|e| e.to_string())?;
        pretrain_step(&mut a, &mut opt_a, &batch, &cfg).map_err(|e| e.to_string())?;
        data_parallel_step(&mut b, &mut opt_b, &batch, &cfg, 4).map_err(|e| e.to_string())?;
        for ((_, name, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
            let d = x.data().iter().zip(y.data()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            ensure(d < 1e-6, || format!("step {step}: {name} drifted by {d:e}"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("200 manifests, {} prefetched batches, {steps} parallel steps (max drift {worst:.1e})", sync.len()))
}

struct Pipeline {
    model: Option<Model32>,
}

fn pretrain_run(steps: usize) -> PretrainRun {
    PretrainRun {
        steps,
        batch_size: 16,
        prefetch_depth: 2,
        preprocess: synth_preprocess(),
        objective: PretrainConfig::default(),
    }
}

fn finetune_config() -> FinetuneConfig {
    FinetuneConfig {
        epochs: 10,
        preprocess: synth_preprocess(),
        ..FinetuneConfig::default()
    }
}

/// Loss drop when pretraining repeatedly on eight noiseless samples.
fn overfit_drop(dict: &GlobalDictionary) -> Result<f64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SynthSpec {
        layouts: vec![default_layouts()[0].clone()],
        samples_per_layout: 8,
        noise_sigma: 0.0,
        ..SynthSpec::default()
    };
    generate(&spec, dict, dir.path()).map_err(|e| e.to_string())?;
    let ds = Dataset::open(dir.path(), dict).map_err(|e| e.to_string())?;
    let pb = PlannedBatch {
        signature: ds.index.sample(0).signature.clone(),
        sample_ids: (0..8).collect(),
    };
    let batch: PatchBatch<f32> = ds.load_batch(&pb, &synth_preprocess(), 16).map_err(|e| e.to_string())?;
    let steps = 400;
    let cfg = PretrainConfig {
        optim: OptimConfig {
            lr: 3e-3,
            total_steps: steps,
            ..OptimConfig::default()
        },
        ..PretrainConfig::default()
    };
    let mut model: Model32 = Model::init(ModelConfig::desk(), 0);
    let mut opt = AdamW::new(cfg.optim.clone(), &model.params);
    let mut totals = Vec::with_capacity(steps);
    for _ in 0..steps {
        totals.push(pretrain_step(&mut model, &mut opt, &batch, &cfg).map_err(|e| e.to_string())?.losses.total());
    }
    let tail = totals[steps - 10..].iter().sum::<f64>() / 10.0;
    Ok(1.0 - tail / totals[0])
}

fn end_to_end(state: &mut Pipeline) -> Outcome {
    let dict = GlobalDictionary::standard();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    generate(&SynthSpec::default(), &dict, dir.path()).map_err(|e| e.to_string())?;
    let ds = Dataset::open(dir.path(), &dict).map_err(|e| e.to_string())?;
    ensure(ds.len() == 400, || format!("{} samples", ds.len()))?;
    let ids: Vec<u64> = (0..ds.len() as u64).collect();

    let sanity: Vec<u64> = ids.iter().copied().step_by(2).collect();
    let truth: Vec<usize> = sanity.iter().map(|&id| ds.label(id).unwrap()).collect();
    let guess: Vec<usize> = sanity.iter().map(|&id| common::bandpower_predict(&ds, id, 2)).collect();
    let sanity_acc = common::balanced_accuracy(&truth, &guess, 2);
    ensure(sanity_acc >= 0.95, || format!("bandpower oracle only {sanity_acc:.3} on 200 samples"))?;

    let mut model: Model32 = Model::init(ModelConfig::desk(), 0);
    let log = pretrain_on_dataset(&mut model, &ds, &pretrain_run(500), |_| {}).map_err(|e| e.to_string())?;
    ensure(log.len() == 500, || format!("{} pretraining steps", log.len()))?;
    state.model = Some(model.clone());

    let result = run_protocol(&model, &ds, &ids, "synthetic", &[0, 1, 2], 2, &finetune_config()).map_err(|e| e.to_string())?;
    let (mean, std) = result.summary()[0];
    let mut oracle = Vec::new();
    for seed in [0, 1, 2] {
        let (_, _, test) = split_dataset(&ids, seed).map_err(|e| e.to_string())?;
        let truth: Vec<usize> = test.iter().map(|&id| ds.label(id).unwrap()).collect();
        let guess: Vec<usize> = test.iter().map(|&id| common::bandpower_predict(&ds, id, 2)).collect();
        oracle.push(common::balanced_accuracy(&truth, &guess, 2));
    }
    let oracle_mean = oracle.iter().sum::<f64>() / 3.0;
    ensure(mean >= 0.90, || format!("balanced accuracy {mean:.4}"))?;
    ensure(mean >= oracle_mean - 0.05, || format!("balanced accuracy {mean:.4} vs oracle {oracle_mean:.4}"))?;

    let drop = overfit_drop(&dict)?;
    ensure(drop >= 0.90, || format!("overfit loss drop {:.1}%", 100.0 * drop))?;
    Ok(format!(
        "balanced accuracy {mean:.4} ± {std:.4}, oracle {oracle_mean:.4}, overfit drop {:.1}%",
        100.0 * drop
    ))
}

fn zero_shot(state: &Pipeline) -> Outcome {
    let dict = GlobalDictionary::standard();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    generate(&SynthSpec::default(), &dict, dir.path()).map_err(|e| e.to_string())?;
    let ds = Dataset::open(dir.path(), &dict).map_err(|e| e.to_string())?;
    let by_layout = |subset: &str| -> Vec<u64> {
        (0..ds.len() as u64).filter(|&id| ds.layout_of(id).subset_id == subset).collect()
    };
    let (first, second) = (by_layout("layout0"), by_layout("layout1"));
    ensure(second.len() == 200, || format!("{} held-out samples", second.len()))?;
    let base = match &state.model {
        Some(m) => m.clone(),
        None => Model::init(ModelConfig::desk(), 0),
    };
    let cfg = finetune_config();
    let all: Vec<u64> = first.iter().chain(&second).copied().collect();
    let cache = PatchCache::build(&ds, &all, &cfg.preprocess, base.config.max_time_patches).map_err(|e| e.to_string())?;
    let cut = first.len() * 4 / 5;
    let (tuned, _) = finetune(&base, &ds, &cache, &first[..cut], &first[cut..], 2, &cfg, 0).map_err(|e| e.to_string())?;
    let pred = predict(&tuned, &ds, &cache, &second).map_err(|e| e.to_string())?;
    let hits = second.iter().zip(&pred).filter(|(&id, &p)| ds.label(id) == Some(p)).count();
    let acc = hits as f64 / second.len() as f64;
    let bar = 0.5 + 3.0 * (0.25 / second.len() as f64).sqrt();
    ensure(acc > bar, || format!("accuracy {acc:.3} <= {bar:.3}"))?;
    Ok(format!("accuracy {acc:.3} on unseen layout (bar {bar:.3})"))
}

/// Per-class one-vs-rest counts, written out longhand.
fn hand_metrics(m: &[Vec<u64>]) -> (f64, f64, f64) {
    let k = m.len();
    let total: u64 = m.iter().flatten().sum();
    let (mut recall_sum, mut present, mut f1_sum, mut weighted) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = m[c][c] as f64;
        let fn_: f64 = (0..k).filter(|&j| j != c).map(|j| m[c][j] as f64).sum();
        let fp: f64 = (0..k).filter(|&i| i != c).map(|i| m[i][c] as f64).sum();
        let support = tp + fn_;
        if support == 0.0 {
            continue;
        }
        let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
        recall_sum += tp / support;
        f1_sum += f1;
        weighted += support * f1;
        present += 1.0;
    }
    (recall_sum / present, weighted / total as f64, f1_sum / present)
}

fn metrics_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let k = rng.random_range(2..=6);
        let mut counts: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..20)).collect()).collect();
        if case % 5 == 0 {
            counts[k - 1] = vec![0; k];
        }
        counts[0][0] += 1;
        let cm = ConfusionMatrix::from_counts(counts.clone());
        let (ba, wf, mf) = hand_metrics(&counts);
        let got = [
            balanced_accuracy(&cm).map_err(|e| e.to_string())?,
            weighted_f1(&cm).map_err(|e| e.to_string())?,
            macro_f1(&cm).map_err(|e| e.to_string())?,
        ];
        for (g, w) in got.iter().zip([ba, wf, mf]) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("20 matrices, max deviation {worst:.1e}"))
}

fn main() {
    let mut state = Pipeline { model: None };
    let mut failed = Vec::new();
    let mut run = |id: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        let took = t.elapsed();
        let out = match out {
            Ok(msg) if took > budget => Err(format!("{msg}; took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match out {
            Ok(msg) => println!("criterion {id:>2} PASS {name} [{took:.2?}] {msg}"),
            Err(msg) => {
                println!("criterion {id:>2} FAIL {name} [{took:.2?}] {msg}");
                failed.push(id);
            }
        }
    };
    let s = Duration::from_secs;
    run(1, "dictionary fidelity", s(1), &mut dictionary_fidelity);
    run(2, "layout polymorphism", s(10), &mut layout_polymorphism);
    run(3, "equivariance", s(30), &mut equivariance);
    run(4, "bias structure", s(10), &mut bias_structure);
    run(5, "gradient checks", s(120), &mut gradient_checks);
    run(6, "vq oracle", s(30), &mut vq_oracle);
    run(7, "spectrum oracle", s(10), &mut spectrum_oracle);
    run(8, "scheduler properties", s(120), &mut scheduler_properties);
    run(9, "end-to-end synthetic", s(600), &mut || end_to_end(&mut state));
    run(10, "zero-shot layout", s(300), &mut || zero_shot(&state));
    run(11, "metrics", s(1), &mut metrics_check);
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
