//! Statistical checks: ES and PES estimators, augmentation and unroll-length
//! sampling.

use std::sync::Arc;

use lopt_core::meta::{es_gradient, sample_unroll_length, Estimator, Particle, ParticleFactory, Pes, Segment};
use lopt_core::tasks::{init_task, AugmentSpec, DatasetSpec, TaskSpec};
use lopt_core::{ParamTree, Result, Rng, Tensor};

fn scalar(v: f32) -> ParamTree {
    ParamTree::new(vec![("x".into(), Tensor::scalar(v))]).unwrap()
}

fn x(t: &ParamTree) -> f64 {
    f64::from(t.get("x").unwrap().data()[0])
}

/// Mean and standard error of `n` samples.
fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Independent single-pair estimates of the smoothed gradient at `theta`.
fn es_samples(f: impl Fn(f64) -> f64, theta: f32, sigma: f64, pairs: usize, seed: u64) -> Vec<f64> {
    let th = scalar(theta);
    let mut rng = Rng::new(seed, 0);
    (0..pairs)
        .map(|_| {
            let est = es_gradient(|p| Ok(f(x(p))), &th, 2, sigma, &mut rng).unwrap();
            x(&est.grad)
        })
        .collect()
}

#[test]
fn es_square_at_one() {
    // 10^5 draws = 5 * 10^4 antithetic pairs; the smoothed gradient of x^2 is 2x
    let s = es_samples(|v| v * v, 1.0, 0.1, 50_000, 1);
    let (m, se) = mean_se(&s);
    assert!((m - 2.0).abs() < 3.0 * se, "mean {m} se {se}");
}

#[test]
fn es_linear_is_exact_in_expectation() {
    let a = [0.5f64, -2.0, 3.0];
    let th = ParamTree::new(vec![("w".into(), Tensor::from_vec(vec![0.1, 0.2, 0.3]))]).unwrap();
    let mut rng = Rng::new(2, 0);
    let mut samples = vec![Vec::new(); 3];
    for _ in 0..50_000 {
        let est = es_gradient(
            |p| Ok(p.get("w").unwrap().data().iter().zip(a).map(|(&w, a)| f64::from(w) * a).sum()),
            &th,
            2,
            0.05,
            &mut rng,
        )
        .unwrap();
        for (s, &g) in samples.iter_mut().zip(est.grad.get("w").unwrap().data()) {
            s.push(f64::from(g));
        }
    }
    for (s, a) in samples.iter().zip(a) {
        let (m, se) = mean_se(s);
        assert!((m - a).abs() < 3.0 * se, "{m} vs {a} (se {se})");
    }
}

#[test]
fn es_constant_objective_cancels() {
    let s = es_samples(|_| 3.25, 0.7, 0.3, 100, 3);
    assert!(s.iter().all(|&g| g == 0.0));
}

#[test]
fn es_smoothing_bias_grows_with_sigma() {
    // E[grad] of x^4 smoothed with N(0, sigma^2) is 4x^3 + 12 x sigma^2
    let th = 1.0f64;
    for (sigma, seed) in [(0.1, 4), (0.5, 5)] {
        let s = es_samples(|v| v.powi(4), th as f32, sigma, 50_000, seed);
        let (m, se) = mean_se(&s);
        let want = 4.0 * th.powi(3) + 12.0 * th * sigma * sigma;
        assert!((m - want).abs() < 3.0 * se, "sigma {sigma}: {m} vs {want} (se {se})");
    }
    let lo = mean_se(&es_samples(|v| v.powi(4), 1.0, 0.1, 50_000, 6)).0;
    let hi = mean_se(&es_samples(|v| v.powi(4), 1.0, 0.5, 50_000, 7)).0;
    assert!(hi - lo > 2.0, "bias should grow by 12 * (0.25 - 0.01) = 2.88: {lo} -> {hi}");
}

/// Two-step linear system: `s` starts at 0, each step `s += theta`, loss `s^2`.
/// Over two truncations of one step the full-unroll loss is
/// `theta_1^2 + (theta_1 + theta_2)^2`, whose total derivative at a shared
/// theta is `10 theta`; truncated ES only sees `2 theta + 4 theta = 6 theta`.
struct Linear {
    s: f64,
    t: u64,
}

impl Particle for Linear {
    fn unroll(&mut self, meta: &ParamTree, k: u64) -> Result<Segment> {
        let mut sum = 0.0;
        let mut n = 0;
        while n < k && self.t < 2 {
            self.s += x(meta);
            sum += self.s * self.s;
            self.t += 1;
            n += 1;
        }
        Ok(Segment {
            mean_loss: sum / n as f64,
            steps: n,
            finished: self.t >= 2,
        })
    }
}

struct LinearFactory;

impl ParticleFactory for LinearFactory {
    type P = Linear;

    fn spawn(&self, _seed: u64) -> Result<Linear> {
        Ok(Linear { s: 0.0, t: 0 })
    }
}

fn full_unroll_estimates(estimator: Estimator, reps: u64) -> Vec<f64> {
    let theta = 0.5f32;
    let th = scalar(theta);
    (0..reps)
        .map(|rep| {
            let mut pes = Pes::new(LinearFactory, &th, 2, 0.1, estimator, rep).unwrap();
            let g1 = x(&pes.step(&th, 1).unwrap().grad);
            let g2 = x(&pes.step(&th, 1).unwrap().grad);
            g1 + g2
        })
        .collect()
}

#[test]
fn pes_is_unbiased_and_truncated_es_is_not() {
    let exact = 10.0 * 0.5;
    let (m, se) = mean_se(&full_unroll_estimates(Estimator::Pes, 10_000));
    assert!((m - exact).abs() < 3.0 * se, "PES {m} vs {exact} (se {se})");
    let (mt, set) = mean_se(&full_unroll_estimates(Estimator::TruncatedEs, 10_000));
    assert!((mt - exact).abs() > 3.0 * set, "truncated ES {mt} should be biased (se {set})");
    assert!((mt - 6.0 * 0.5).abs() < 3.0 * set, "truncated ES {mt} vs 3.0");
}

#[test]
fn pes_antithetic_pairs_and_resets() {
    let th = scalar(0.2);
    let mut pes = Pes::new(LinearFactory, &th, 6, 0.1, Estimator::Pes, 9).unwrap();
    for step in 0..6 {
        pes.step(&th, 1).unwrap();
        for pair in &pes.pairs {
            let (a, b) = (x(&pair.member_xi(0)), x(&pair.member_xi(1)));
            assert_eq!(a, -b);
            // unroll length 2: xi is reset after every second truncation
            if step % 2 == 1 {
                assert_eq!(a, 0.0);
            }
        }
    }
}

/// Kolmogorov-Smirnov distance between samples and U(0, 1).
fn ks_uniform(mut u: Vec<f64>) -> f64 {
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

#[test]
fn augmentation_scale_is_log_uniform() {
    let spec = TaskSpec {
        dataset: DatasetSpec::SynthBlobs {
            classes: 2,
            dim: 2,
            separation: 1.0,
            n_train: 4,
            n_val: 2,
        },
        batch_size: 4,
        augment: AugmentSpec {
            enabled: true,
            ..AugmentSpec::default()
        },
        ..TaskSpec::default()
    };
    let data = Arc::new(spec.dataset.load(0, None).unwrap());
    let n = 4000;
    let (lo, hi) = (1e-3f64.ln(), 1e3f64.ln());
    let u: Vec<f64> = (0..n)
        .map(|seed| {
            let t = init_task(&TaskSpec { seed, ..spec.clone() }, data.clone()).unwrap();
            (t.applied_alpha.ln() - lo) / (hi - lo)
        })
        .collect();
    assert!(u.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
    let d = ks_uniform(u);
    // 1% critical value
    assert!(d < 1.63 / (n as f64).sqrt(), "KS distance {d}");
}

#[test]
fn unroll_lengths_are_log_uniform() {
    let mut rng = Rng::new(10, 0);
    let n = 100_000;
    let draws: Vec<u64> = (0..n).map(|_| sample_unroll_length(&mut rng, 100, 2000)).collect();
    assert!(draws.iter().all(|&d| (100..=2000).contains(&d)));
    let mut sorted = draws.clone();
    sorted.sort_unstable();
    let median = sorted[n / 2] as f64;
    assert!((median - 447.2).abs() < 5.0, "median {median}");
    assert_eq!(sample_unroll_length(&mut rng, 50, 50), 50);
}
