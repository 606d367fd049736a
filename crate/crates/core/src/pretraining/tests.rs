use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ModelConfig, Variant};

fn small_model(seed: u64) -> Model<f64> {
    Model::init(
        ModelConfig {
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            window_len: 16,
            max_time_patches: 4,
            codebook_size: 16,
            variant: Variant::Custom,
            bias_hidden: 8,
            mlp_ratio: 2,
        },
        seed,
    )
}

fn batch(seed: u64) -> PatchBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchBatch {
        signature: "test".into(),
        coords: vec![[-0.05, 0.0, 0.05], [0.05, 0.0, 0.05]],
        steps: 2,
        samples: (0..3).map(|i| (i, Matrix::randn(4, 16, 1.0, &mut rng))).collect(),
    }
}

/// Index of the largest cosine similarity, first on ties.
fn brute_force(p: &[f64], book: &Matrix<f64>) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for k in 0..book.rows() {
        let v = book.row(k);
        let cos = p.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (norm(p) * norm(v));
        if cos > best_cos {
            best_cos = cos;
            best = k;
        }
    }
    best
}

#[test]
fn quantize_picks_nearer_axis() {
    let book = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(quantize(&[0.9, 0.1], &book).0, 0);
    assert_eq!(quantize(&[0.1, 0.9], &book), (1, vec![0.0, 1.0]));
}

#[test]
fn quantize_ignores_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let book = Matrix::<f64>::randn(6, 4, 1.0, &mut rng);
    let p: Vec<f64> = book.row(3).iter().map(|v| 5.0 * v).collect();
    assert_eq!(quantize(&p, &book).0, 3);
    for _ in 0..50 {
        let p: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = rng.random_range(0.01..100.0);
        let q: Vec<f64> = p.iter().map(|v| a * v).collect();
        assert_eq!(quantize(&p, &book).0, quantize(&q, &book).0);
    }
}

#[test]
fn quantize_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let book = Matrix::<f64>::randn(16, 8, 1.0, &mut rng);
        let p = Matrix::<f64>::randn(1, 8, 1.0, &mut rng);
        assert_eq!(quantize(p.row(0), &book).0, brute_force(p.row(0), &book));
    }
}

#[test]
fn zero_representation_goes_to_first_codeword() {
    let book = Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]]);
    assert_eq!(quantize(&[0.0, 0.0], &book).0, 0);
}

#[test]
fn aligned_outputs_have_zero_quantization_loss() {
    let book: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 2.0, 2.0], vec![0.0, 3.0, -4.0]]);
    let x = Matrix::from_rows(&[vec![0.0, 6.0, -8.0], vec![0.5, 1.0, 1.0]]);
    let idx = quantize_rows(&x, &book);
    assert_eq!(idx, vec![1, 0]);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let bv = g.constant(book);
    let l = quantization_loss(&mut g, xv, bv, &idx).unwrap();
    assert!(g.scalar(l).abs() < 1e-15);
}

#[test]
fn orthogonal_pair_costs_two_plus_root_two() {
    let mut g = Graph::new();
    let x = g.constant(Matrix::from_rows(&[vec![1.0, 0.0]]));
    let v = g.constant(Matrix::from_rows(&[vec![0.0, 1.0]]));
    let l = quantization_loss(&mut g, x, v, &[0]).unwrap();
    assert!((g.scalar(l) - (2.0 + 2f64.sqrt())).abs() < 1e-15);
    assert!(matches!(
        quantization_loss(&mut g, x, v, &[1]),
        Err(Error::IndexOutOfRange { index: 1, size: 1 })
    ));
}

#[test]
fn stop_gradients_split_the_two_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = Matrix::<f64>::randn(4, 5, 1.0, &mut rng);
    let v0 = Matrix::<f64>::randn(6, 5, 1.0, &mut rng);
    let idx = quantize_rows(&x0, &v0);
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    let v = g.input(v0.clone());
    let l = quantization_loss(&mut g, x, v, &idx).unwrap();
    let grads = g.backward(l);
    let (dx, dv) = (grads.wrt(x).unwrap().clone(), grads.wrt(v).unwrap().clone());

    // Plain-arithmetic terms with one side held fixed.
    let unit = |r: &[f64]| {
        let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        r.iter().map(|a| a / n).collect::<Vec<_>>()
    };
    let terms = |x: &Matrix<f64>, v: &Matrix<f64>| {
        let (mut sq, mut nm) = (0.0, 0.0);
        for (r, &k) in idx.iter().enumerate() {
            let d: f64 = unit(x.row(r)).iter().zip(unit(v.row(k))).map(|(a, b)| (a - b) * (a - b)).sum();
            sq += d;
            nm += d.sqrt();
        }
        (sq, nm)
    };
    let h = 1e-6;
    for i in 0..x0.len() {
        let (mut xp, mut xm) = (x0.clone(), x0.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let num = (terms(&xp, &v0).1 - terms(&xm, &v0).1) / (2.0 * h);
        assert!((num - dx.data()[i]).abs() < 1e-6, "encoder entry {i}");
    }
    for i in 0..v0.len() {
        let (mut vp, mut vm) = (v0.clone(), v0.clone());
        vp.data_mut()[i] += h;
        vm.data_mut()[i] -= h;
        let num = (terms(&x0, &vp).0 - terms(&x0, &vm).0) / (2.0 * h);
        assert!((num - dv.data()[i]).abs() < 1e-6, "codebook entry {i}");
    }
}

#[test]
fn spectrum_of_zero_patch_is_zero() {
    let t = spectrum_targets(&[0.0f64; 16]);
    assert_eq!(t.amplitude, vec![0.0; 9]);
    assert_eq!(t.phase, vec![0.0; 9]);
}

#[test]
fn cosine_and_sine_spectra() {
    let w = 200;
    for k in [1usize, 10, 37, 99] {
        let arg = |n: usize| 2.0 * std::f64::consts::PI * (k * n) as f64 / w as f64;
        let c: Vec<f64> = (0..w).map(|n| arg(n).cos()).collect();
        let s: Vec<f64> = (0..w).map(|n| arg(n).sin()).collect();
        let tc = spectrum_targets(&c);
        let ts = spectrum_targets(&s);
        for b in 0..=w / 2 {
            let want = if b == k { 0.5 } else { 0.0 };
            assert!((tc.amplitude[b] - want).abs() < 1e-9, "cos k={k} bin {b}");
            assert!((ts.amplitude[b] - want).abs() < 1e-9, "sin k={k} bin {b}");
        }
        assert!(tc.phase[k].abs() < 1e-9);
        assert!((ts.phase[k] + std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }
}

#[test]
fn phase_lies_in_half_open_interval() {
    // x[n] = (−1)^n has its energy at Nyquist with phase 0; a shifted
    // impulse gives phases across the circle.
    let mut x = vec![0.0f64; 8];
    x[4] = 1.0;
    let t = spectrum_targets(&x);
    for p in t.phase {
        assert!(p > -std::f64::consts::PI && p <= std::f64::consts::PI);
    }
}

/// Rebuilds a real signal from the one-sided spectrum by direct summation.
fn inverse(t: &SpectrumTarget<f64>, w: usize) -> Vec<f64> {
    (0..w)
        .map(|n| {
            let mut acc = 0.0;
            for k in 0..w {
                let kk = if k <= w / 2 { k } else { w - k };
                let sign = if k <= w / 2 { 1.0 } else { -1.0 };
                let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / w as f64;
                acc += t.amplitude[kk] * (ang + sign * t.phase[kk]).cos();
            }
            acc
        })
        .collect()
}

#[test]
fn spectrum_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for w in [16usize, 17, 200] {
        let x: Vec<f64> = (0..w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let back = inverse(&spectrum_targets(&x), w);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn spectrum_loss_examples() {
    let m = |v: Vec<f64>| Matrix::from_vec(1, v.len(), v);
    let run = |pa: Vec<f64>, pp: Vec<f64>, a: Vec<f64>, p: Vec<f64>| {
        let mut g = Graph::new();
        let vs = [pa, pp, a, p].map(|v| g.constant(m(v)));
        let l = spectrum_loss(&mut g, vs[0], vs[1], vs[2], vs[3]).unwrap();
        g.scalar(l)
    };
    assert_eq!(run(vec![1.0, 2.0], vec![0.1, -0.2], vec![1.0, 2.0], vec![0.1, -0.2]), 0.0);
    let tau = 2.0 * std::f64::consts::PI;
    assert!(run(vec![1.0, 2.0], vec![0.1 + tau, -0.2 + tau], vec![1.0, 2.0], vec![0.1, -0.2]).abs() < 1e-12);
    assert_eq!(run(vec![3.0], vec![0.5], vec![1.0], vec![0.5]), 4.0);

    let mut g = Graph::<f64>::new();
    let a = g.constant(Matrix::zeros(1, 2));
    let b = g.constant(Matrix::zeros(1, 3));
    assert!(matches!(spectrum_loss(&mut g, a, a, a, b), Err(Error::ShapeMismatch(_))));
}

#[test]
fn unmasked_predictions_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let patches = Matrix::<f64>::randn(6, 16, 1.0, &mut rng);
    let plan = mask_patches(6, 0.5, 9);
    let mut g = Graph::new();
    let pred = g.input(Matrix::randn(6, 18, 1.0, &mut rng));
    let l = masked_spectrum_loss(&mut g, pred, &patches, &plan).unwrap();
    let grads = g.backward(l);
    let dp = grads.wrt(pred).unwrap();
    for r in 0..6 {
        let zero = dp.row(r).iter().all(|&v| v == 0.0);
        assert_eq!(zero, !plan.mask[r], "row {r}");
    }
}

#[test]
fn mask_counts_round_half_up() {
    assert_eq!(mask_patches(10, 0.5, 1).count(), 5);
    assert_eq!(mask_patches(1, 0.5, 1).count(), 1);
    assert_eq!(mask_patches(3, 0.5, 1).count(), 2);
    assert_eq!(mask_patches(7, 0.25, 1).count(), 2);
    assert_eq!(mask_patches(40, 0.5, 7), mask_patches(40, 0.5, 7));
    assert_ne!(mask_patches(40, 0.5, 7).mask, mask_patches(40, 0.5, 8).mask);
}

#[test]
fn cosine_schedule_endpoints() {
    let c = OptimConfig {
        total_steps: 100,
        ..OptimConfig::default()
    };
    assert_eq!(c.lr_at(0), 1e-3);
    assert!((c.lr_at(50) - 5e-4).abs() < 1e-15);
    assert!(c.lr_at(100).abs() < 1e-15);
    assert!(c.lr_at(500).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_repeats_losses() {
    let mut model = small_model(1);
    let cfg = PretrainConfig {
        optim: OptimConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..OptimConfig::default()
        },
        ..PretrainConfig::default()
    };
    let mut opt = AdamW::new(cfg.optim.clone(), &model.params);
    let b = batch(2);
    let before = model.params.clone();
    let a = pretrain_step(&mut model, &mut opt, &b, &cfg).unwrap();
    // Same masks for the second step: rewind the step counter.
    opt.step = 0;
    let c = pretrain_step(&mut model, &mut opt, &b, &cfg).unwrap();
    assert_eq!(a.losses, c.losses);
    assert_eq!(model.params, before);
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let mut model = small_model(3);
    let cfg = PretrainConfig {
        optim: OptimConfig {
            lr: 3e-3,
            ..OptimConfig::default()
        },
        ..PretrainConfig::default()
    };
    let mut opt = AdamW::new(cfg.optim.clone(), &model.params);
    let b = batch(4);
    let first = pretrain_step(&mut model, &mut opt, &b, &cfg).unwrap();
    assert_eq!(first.step, 1);
    let mut last = first.clone();
    for _ in 0..60 {
        last = pretrain_step(&mut model, &mut opt, &b, &cfg).unwrap();
    }
    assert!(last.losses.total() < first.losses.total());
    assert!(model.params.all_finite());
}

#[test]
fn non_finite_input_aborts_without_update() {
    let mut model = small_model(5);
    let cfg = PretrainConfig::default();
    let mut opt = AdamW::new(cfg.optim.clone(), &model.params);
    let mut b = batch(6);
    b.samples[1].1.set(0, 0, f64::NAN);
    let before = model.params.clone();
    assert!(matches!(
        pretrain_step(&mut model, &mut opt, &b, &cfg),
        Err(Error::NonFiniteLoss(1))
    ));
    assert_eq!(model.params, before);
    assert_eq!(opt.step, 0);
}

#[test]
fn shard_gradients_sum_to_batch_gradient() {
    let model = small_model(7);
    let cfg = PretrainConfig::default();
    let b = batch(8);
    let (full_l, full_g) = batch_gradients(&model, &b, &b.samples, &cfg, 3, 3).unwrap();
    let (l1, g1) = batch_gradients(&model, &b, &b.samples[..2], &cfg, 3, 3).unwrap();
    let (l2, g2) = batch_gradients(&model, &b, &b.samples[2..], &cfg, 3, 3).unwrap();
    assert!((l1.total() + l2.total() - full_l.total()).abs() < 1e-12);
    for ((f, a), c) in full_g.iter().zip(&g1).zip(&g2) {
        for ((x, y), z) in f.data().iter().zip(a.data()).zip(c.data()) {
            assert!((x - (y + z)).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn log_line_layout() {
    let r = StepRecord {
        step: 3,
        losses: Losses {
            quantization: 1.5,
            spectrum: 2.0,
        },
        lr: 1e-3,
        signature: "abcd".into(),
    };
    let fields: Vec<String> = r.to_string().split(", ").map(String::from).collect();
    assert_eq!(fields.len(), 6);
    assert_eq!(fields[0], "3");
    assert_eq!(fields[3].parse::<f64>().unwrap(), 3.5);
    assert_eq!(fields[5], "abcd");
}
