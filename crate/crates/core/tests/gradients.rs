//! Analytic network gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warmstart::policy::{
    gaussian_log_prob, gaussian_sample, gradients, new_policy, new_value_net, ForwardCache, LossKind, MlpParams,
    PolicyLossWeights, PolicySample,
};

const H: f64 = 1e-6;

fn max_rel_error(params: &MlpParams, batch: &[PolicySample], kind: LossKind, coords: &[usize]) -> f64 {
    let (_, g) = gradients(params, batch, kind).unwrap();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut p = params.clone();
        p.theta_mut()[i] += H;
        let up = gradients(&p, batch, kind).unwrap().0;
        p.theta_mut()[i] -= 2.0 * H;
        let down = gradients(&p, batch, kind).unwrap().0;
        let fd = (up - down) / (2.0 * H);
        let rel = (g[i] - fd).abs() / (g[i].abs() + 1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn random_obs(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..23).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn coords(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

#[test]
fn mse_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let p = new_policy(10, 25, -1.0, &mut rng).unwrap();
    let batch: Vec<PolicySample> = (0..4)
        .map(|_| PolicySample {
            obs: random_obs(&mut rng),
            target: (0..50).map(|_| rng.random_range(-0.9..0.9)).collect(),
            ..Default::default()
        })
        .collect();
    let c = coords(&mut rng, p.num_params(), 20);
    let err = max_rel_error(&p, &batch, LossKind::Mse, &c);
    assert!(err < 1e-5, "max relative error {err}");
}

fn ppo_batch(p: &MlpParams, rng: &mut ChaCha8Rng, n: usize) -> Vec<PolicySample> {
    (0..n)
        .map(|k| {
            let obs = random_obs(rng);
            let mean = p.forward(&obs).unwrap();
            let action = gaussian_sample(&mean, p.log_std().unwrap(), rng);
            // Shift the stored log-probability so some ratios sit outside the clip range.
            let shift = [0.0, 0.5, -0.5, 0.05][k % 4];
            PolicySample {
                old_log_prob: gaussian_log_prob(&mean, p.log_std().unwrap(), &action) + shift,
                obs,
                target: (0..50).map(|_| rng.random_range(-0.9..0.9)).collect(),
                action,
                advantage: rng.random_range(-1.0..1.0),
            }
        })
        .collect()
}

#[test]
fn ppo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let p = new_policy(10, 25, -1.0, &mut rng).unwrap();
    let batch = ppo_batch(&p, &mut rng, 8);
    let w = PolicyLossWeights { policy: 0.45, entropy: 0.01, imitation: 0.1, clip: 0.2 };
    let mut c = coords(&mut rng, p.num_params(), 18);
    // Always include two log_std coordinates.
    c.push(p.num_params() - 1);
    c.push(p.num_params() - 37);
    let err = max_rel_error(&p, &batch, LossKind::Ppo(w), &c);
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn value_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let v = new_value_net(10, &mut rng).unwrap();
    let batch: Vec<PolicySample> = (0..6)
        .map(|_| PolicySample {
            obs: random_obs(&mut rng),
            target: vec![rng.random_range(-3.0..0.0)],
            ..Default::default()
        })
        .collect();
    let c = coords(&mut rng, v.num_params(), 20);
    let err = max_rel_error(&v, &batch, LossKind::Value, &c);
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn combined_gradient_is_affine_in_lambda() {
    // d/dtheta [lam * L_rl + (1 - lam) * L_im] on a tiny network.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p = MlpParams::new(&[23, 5, 4], warmstart::policy::OutputActivation::Tanh, Some(-1.0), 1.0, &mut rng).unwrap();
    let batch: Vec<PolicySample> = (0..5)
        .map(|_| {
            let obs = random_obs(&mut rng);
            let mean = p.forward(&obs).unwrap();
            let action = gaussian_sample(&mean, p.log_std().unwrap(), &mut rng);
            PolicySample {
                old_log_prob: gaussian_log_prob(&mean, p.log_std().unwrap(), &action),
                obs,
                target: (0..4).map(|_| rng.random_range(-0.9..0.9)).collect(),
                action,
                advantage: rng.random_range(-1.0..1.0),
            }
        })
        .collect();
    let lam = 0.9;
    let rl = PolicyLossWeights { policy: 0.5, entropy: 0.0, imitation: 0.0, clip: 0.2 };
    let im = PolicyLossWeights { policy: 0.0, entropy: 0.0, imitation: 1.0, clip: 0.2 };
    let both = PolicyLossWeights { policy: lam * 0.5, entropy: 0.0, imitation: 1.0 - lam, clip: 0.2 };
    let (_, g_rl) = gradients(&p, &batch, LossKind::Ppo(rl)).unwrap();
    let (_, g_im) = gradients(&p, &batch, LossKind::Ppo(im)).unwrap();
    let (_, g) = gradients(&p, &batch, LossKind::Ppo(both)).unwrap();
    for i in 0..g.len() {
        assert!((g[i] - (lam * g_rl[i] + (1.0 - lam) * g_im[i])).abs() < 1e-12);
    }
    let all: Vec<usize> = (0..p.num_params()).collect();
    let err = max_rel_error(&p, &batch, LossKind::Ppo(both), &all);
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn doubling_a_hidden_weight_changes_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let p = new_policy(10, 25, -1.0, &mut rng).unwrap();
    let obs = random_obs(&mut rng);
    let mut cache = ForwardCache::default();
    p.forward_cached(&obs, &mut cache).unwrap();
    let before = cache.output().to_vec();
    // A second-hidden-layer weight joining two live units.
    let from = cache.layer_input(1).iter().position(|a| *a > 0.0).unwrap();
    let to = cache.layer_input(2).iter().position(|a| *a > 0.0).unwrap();
    let i = 23 * 64 + 64 + to * 64 + from;
    let mut q = p.clone();
    q.theta_mut()[i] *= 2.0;
    assert_ne!(before, q.forward(&obs).unwrap());

    // Directional derivative of sum(output) along that weight.
    let mut g = vec![0.0; p.num_params()];
    p.backward(&cache, &[1.0; 50], &mut g);
    let f = |d: f64| {
        let mut r = p.clone();
        r.theta_mut()[i] += d;
        r.forward(&obs).unwrap().iter().sum::<f64>()
    };
    let fd = (f(H) - f(-H)) / (2.0 * H);
    assert!((g[i] - fd).abs() / (g[i].abs() + 1e-8) < 1e-5, "{} vs {fd}", g[i]);
}
