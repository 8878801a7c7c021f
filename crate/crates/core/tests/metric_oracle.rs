use cascade_depth::evaluation::{evaluate, EvalOptions};
use cascade_depth::imaging::{ImageGrid, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar-loop reference: [abs_rel, sq_rel, rmse, rmse_log, δ1, δ2, δ3].
fn brute_force(pred: &[f64], gt: &[f64], valid: &[bool], cap: f64, median_scale: bool) -> [f64; 7] {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..pred.len() {
        if valid[i] {
            p.push(pred[i]);
            g.push(gt[i]);
        }
    }
    let med = |v: &Vec<f64>| {
        let mut s = v.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        }
    };
    let scale = if median_scale { med(&g) / med(&p) } else { 1.0 };
    let n = p.len();
    let mut out = [0.0; 7];
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    for i in 0..n {
        let pi = (p[i] * scale).max(1e-3).min(cap);
        let gi = g[i].max(1e-3).min(cap);
        out[0] += (pi - gi).abs() / gi;
        out[1] += (pi - gi) * (pi - gi) / gi;
        sq += (pi - gi) * (pi - gi);
        sq_log += (pi.ln() - gi.ln()) * (pi.ln() - gi.ln());
        let r = if pi / gi > gi / pi { pi / gi } else { gi / pi };
        for k in 0..3 {
            if r < 1.25f64.powi(k as i32 + 1) {
                out[4 + k] += 1.0;
            }
        }
    }
    out[0] /= n as f64;
    out[1] /= n as f64;
    out[2] = (sq / n as f64).sqrt();
    out[3] = (sq_log / n as f64).sqrt();
    for v in &mut out[4..] {
        *v /= n as f64;
    }
    out
}

#[test]
fn evaluate_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
        let n = h * w;
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..120.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.random_range(0.3..3.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        valid[0] = true;
        let median_scale = case % 2 == 0;
        let opts = EvalOptions {
            cap: 80.0,
            median_scale,
        };
        let r = evaluate(
            &ImageGrid::new(h, w, 1, pred.clone()).unwrap(),
            &ImageGrid::new(h, w, 1, gt.clone()).unwrap(),
            &Mask::new(h, w, valid.clone()).unwrap(),
            &opts,
        )
        .unwrap();
        let want = brute_force(&pred, &gt, &valid, 80.0, median_scale);
        for (k, (a, b)) in r.values().iter().zip(want).enumerate() {
            assert!(
                (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                "case {case} metric {k}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn two_pixel_example() {
    let r = evaluate(
        &ImageGrid::new(1, 2, 1, vec![11.0, 18.0]).unwrap(),
        &ImageGrid::new(1, 2, 1, vec![10.0, 20.0]).unwrap(),
        &Mask::filled(1, 2, true),
        &EvalOptions {
            cap: 80.0,
            median_scale: false,
        },
    )
    .unwrap();
    assert_eq!(r.abs_rel, 0.1);
    assert_eq!(r.rmse, 2.5f64.sqrt());
}
