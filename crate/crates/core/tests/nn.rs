mod common;

use fibromap::nn::{
    adam_step, conv2d_forward, load_model, load_model_expecting, loss_bce, mean_bce, model_bytes,
    save_model, AdamState, CnnModel, ModelSpec, Sample, Tensor,
};
use fibromap::Error;
use rand::Rng;

#[test]
fn gradients_match_central_differences() {
    for seed in [1, 2] {
        let g = common::gradient_check(seed);
        assert_eq!(g.failures, 0, "seed {seed}: worst relative error {}", g.worst);
        assert_eq!(g.checked, common::reduced_model(seed).0.param_count());
    }
}

/// Six nested loops, no padding tricks.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (h, wd, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (k, cout) = (w.shape[0], w.shape[3]);
    let r = (k / 2) as i64;
    let mut out = vec![0.0; h * wd * cout];
    for y in 0..h {
        for xx in 0..wd {
            for o in 0..cout {
                let mut acc = b.data[o];
                for dy in 0..k {
                    for dx in 0..k {
                        let sy = y as i64 + dy as i64 - r;
                        let sx = xx as i64 + dx as i64 - r;
                        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x.data[(sy as usize * wd + sx as usize) * cin + c]
                                * w.data[((dy * k + dx) * cin + c) * cout + o];
                        }
                    }
                }
                out[(y * wd + xx) * cout + o] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = common::rng(5);
    for _ in 0..40 {
        let (h, w, cin, cout) = (
            r.random_range(1..8),
            r.random_range(1..8),
            r.random_range(1..4),
            r.random_range(1..4),
        );
        let k = [1, 3, 5][r.random_range(0..3)];
        let mut t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = t(vec![h, w, cin]);
        let kw = t(vec![k, k, cin, cout]);
        let b = t(vec![cout]);
        let got = conv2d_forward(&x, &kw, &b).unwrap();
        assert_eq!(got.shape, vec![h, w, cout]);
        for (a, e) in got.data.iter().zip(naive_conv(&x, &kw, &b)) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

fn traced_model(position: bool) -> CnnModel {
    let spec = ModelSpec {
        patch_size: 5,
        channels: [1, 1],
        hidden: 1,
        position_features: position,
    };
    let mut m = CnnModel::zeros(spec).unwrap();
    m.params[0].data[4] = 1.0;
    m.params[2].data[4] = 1.0;
    m.params[4].data = vec![0.01, 0.02, -0.01, 0.03];
    m.params[5].data = vec![0.1];
    m.params[6].data = vec![0.5, 0.2, -0.3, 0.1];
    m.params[7].data = vec![-0.4];
    m
}

#[test]
fn forward_matches_hand_trace() {
    // identity convolutions; first pool of 0..25 keeps 6 8 9 / 16 18 19 / 21 23 24,
    // second keeps 18 19 23 24; hidden = 0.18 + 0.38 - 0.23 + 0.72 + 0.1 = 1.15
    let px: Vec<f64> = (0..25).map(f64::from).collect();
    let pos = [1.0, 2.0, 0.5];
    let with = traced_model(true).forward(&px, pos).unwrap();
    let z: f64 = 0.575 + 0.2 - 0.6 + 0.05 - 0.4;
    assert!((with - 1.0 / (1.0 + (-z).exp())).abs() < 1e-10, "{with}");
    let without = traced_model(false).forward(&px, pos).unwrap();
    assert!((without - 1.0 / (1.0 + (-0.175f64).exp())).abs() < 1e-10, "{without}");
}

#[test]
fn batch_loss_is_mean_of_per_sample_bce() {
    let (model, batch) = common::reduced_model(3);
    let samples: Vec<Sample<'_>> = batch
        .iter()
        .map(|(px, pos, y)| Sample {
            pixels: px,
            pos: *pos,
            label: *y,
        })
        .collect();
    let (loss, _) = model.backward(&samples).unwrap();
    let mut total = 0.0;
    for (px, pos, y) in &batch {
        let q = model.forward(px, *pos).unwrap();
        total += if *y == 1 { -q.ln() } else { -(1.0 - q).ln() };
    }
    assert!((loss - total / batch.len() as f64).abs() < 1e-12);
    assert!((mean_bce(&[0.25, 0.75], &[0, 1]) - (-(0.75f64).ln())).abs() < 1e-15);
    assert!(model.backward(&[]).is_err());
}

#[test]
fn adam_two_step_trace() {
    let mut params = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
    let mut state = AdamState::new(&params);
    let g1 = vec![Tensor::new(vec![2], vec![0.5, 0.0]).unwrap()];
    let g2 = vec![Tensor::new(vec![2], vec![-0.2, 3.0]).unwrap()];
    adam_step(&mut params, &g1, &mut state, 0.1).unwrap();
    adam_step(&mut params, &g2, &mut state, 0.1).unwrap();
    // element 0: m1 = 0.05, v1 = 2.5e-4; m2 = 0.025, v2 = 2.8975e-4
    let w1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    let w2 = w1 - 0.1 * (0.025 / 0.19) / ((2.8975e-4 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    // element 1: zero first gradient, then m2 = 0.3, v2 = 9e-3
    let u2 = -2.0 - 0.1 * (0.3 / 0.19) / ((9e-3 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    assert!((params[0].data[0] - w2).abs() < 1e-14, "{} vs {w2}", params[0].data[0]);
    assert!((params[0].data[1] - u2).abs() < 1e-14, "{} vs {u2}", params[0].data[1]);
    assert_eq!(state.step, 2);
}

fn separable_patches(n: usize, p: usize, seed: u64) -> Vec<(Vec<f64>, [f64; 3], u8)> {
    let mut r = common::rng(seed);
    (0..n)
        .map(|k| {
            let y = (k % 2) as u8;
            let px = (0..p * p)
                .map(|i| {
                    let base = if y == 1 && (i / p + i % p) % 2 == 0 { 0.8 } else { 0.4 };
                    base + r.random_range(-0.1..0.1)
                })
                .collect();
            (px, [0.0; 3], y)
        })
        .collect()
}

#[test]
fn fifty_epochs_halve_the_loss() {
    let data = separable_patches(50, 11, 8);
    let samples: Vec<Sample<'_>> = data
        .iter()
        .map(|(px, pos, y)| Sample {
            pixels: px,
            pos: *pos,
            label: *y,
        })
        .collect();
    let mut model = CnnModel::init(ModelSpec::new(11), 4).unwrap();
    let (start, _) = model.backward(&samples).unwrap();
    for _ in 0..50 {
        for chunk in samples.chunks(10) {
            let (_, grads) = model.backward(chunk).unwrap();
            adam_step(&mut model.params, &grads, &mut model.adam, 1e-3).unwrap();
        }
    }
    let (end, _) = model.backward(&samples).unwrap();
    assert!(end <= 0.5 * start, "loss {start} -> {end}");
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fpcnn");
    let mut m = CnnModel::init(ModelSpec::new(7), 11).unwrap();
    m.norm = Some(fibromap::patches::NormStats::new(12.5, 180.0).unwrap());
    m.adam.step = 17;
    m.adam.m[3].data[0] = 0.25;
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(model_bytes(&back), model_bytes(&m));
    assert_eq!(load_model_expecting(&path, &m.spec).unwrap(), m);
    let other = ModelSpec {
        position_features: false,
        ..m.spec
    };
    assert!(matches!(
        load_model_expecting(&path, &other),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn bce_is_finite_at_the_extremes() {
    for q in [0.0, 1e-300, 0.5, 1.0 - 1e-16, 1.0] {
        assert!(loss_bce(q, 0).is_finite() && loss_bce(q, 1).is_finite());
    }
}
