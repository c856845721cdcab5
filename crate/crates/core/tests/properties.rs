use std::sync::Arc;

use cdrl::eval::mean_and_cov;
use cdrl::models::{cond_energy_grad, ClassCond, EnergyFn, EnergyModel};
use cdrl::ndgrad::{Activation, Conditioning, Mlp, MlpSpec, ParamSet, Tensor};
use cdrl::rng::RngStream;
use cdrl::schedule::build_cosine_schedule;
use cdrl::trainer::{make_pair, PairMode, TrainConfig, Trainer};

const SMALL: &str = "T = 4\nK = 5\ndataset = checkerboard\nhidden = 16,16\nbatch_size = 64\ndata_size = 1000\n\
                     total_iters = 30\nwarmup_iters = 5\ninit_head_start = 2\nema_decay = 0.8\nseed = 3\n";

fn small(extra: &str) -> Trainer {
    Trainer::new(TrainConfig::parse(&format!("{SMALL}{extra}")).unwrap()).unwrap()
}

#[test]
fn updates_do_not_cross_between_models() {
    // One step from identical states: the energy update must not depend on the
    // initializer's learning rate, nor the initializer update on the energy's.
    let mut base = small("warmup_iters = 0\n");
    let mut other_init_lr = small("warmup_iters = 0\nlr_init = 0.5\n");
    let mut other_ebm_lr = small("warmup_iters = 0\nlr_ebm = 0.5\n");
    for tr in [&mut base, &mut other_init_lr, &mut other_ebm_lr] {
        tr.train_step().unwrap();
    }
    assert_eq!(base.energy.net().params().flatten(), other_init_lr.energy.net().params().flatten());
    assert_ne!(base.init.net().params().flatten(), other_init_lr.init.net().params().flatten());
    assert_eq!(base.init.net().params().flatten(), other_ebm_lr.init.net().params().flatten());
    assert_ne!(base.energy.net().params().flatten(), other_ebm_lr.energy.net().params().flatten());
}

#[test]
fn ema_shadow_stays_inside_parameter_envelope() {
    let mut tr = small("");
    let check = |shadow: &ParamSet<f32>, lo: &[f32], hi: &[f32]| {
        for ((&s, &l), &h) in shadow.flatten().iter().zip(lo).zip(hi) {
            let slack = 1e-6 * l.abs().max(h.abs()).max(1e-6);
            assert!(s >= l - slack && s <= h + slack, "{s} outside [{l}, {h}]");
        }
    };
    let mut env = [
        (tr.energy.net().params().flatten(), tr.energy.net().params().flatten()),
        (tr.init.net().params().flatten(), tr.init.net().params().flatten()),
    ];
    for _ in 0..30 {
        tr.train_step().unwrap();
        for ((lo, hi), p) in env.iter_mut().zip([tr.energy.net().params(), tr.init.net().params()]) {
            for ((l, h), v) in lo.iter_mut().zip(hi.iter_mut()).zip(p.flatten()) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        check(&tr.energy_ema, &env[0].0, &env[0].1);
        check(&tr.init_ema, &env[1].0, &env[1].1);
    }
}

#[test]
fn whole_run_is_bitwise_reproducible() {
    let mut a = small("");
    let mut b = small("");
    a.fit(|_| {}).unwrap();
    b.fit(|_| {}).unwrap();
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
    let mut c = small("seed = 4\n");
    c.fit(|_| {}).unwrap();
    assert_ne!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
}

#[test]
fn pairing_modes_share_marginals() {
    let sched = build_cosine_schedule(5, 9.8, -5.1, 0.054).unwrap();
    let n = 100_000;
    let mut rng = RngStream::new(21);
    // Non-Gaussian data with variance 4/3, mean 0.
    let x0 = Tensor::from_fn(n, 1, |_, _| 4.0 * rng.uniform() - 2.0);
    let draw = |rng: &mut RngStream| Tensor::from_fn(n, 1, |_, _| rng.normal());
    for t in 0..5 {
        let levels = vec![t; n];
        let (e, e2) = (draw(&mut rng), draw(&mut rng));
        let (ys, xs) = make_pair(&x0, &levels, &e, None, &sched, PairMode::Shared);
        let (e, e2b) = (draw(&mut rng), e2);
        let (yi, xi) = make_pair(&x0, &levels, &e, Some(&e2b), &sched, PairMode::Independent);
        let expect_x = sched.alpha_bar(t + 1).powi(2) * 4.0 / 3.0 + sched.sigma_bar(t + 1).powi(2);
        for (x, y) in [(&xs, &ys), (&xi, &yi)] {
            let (m, v) = mean_and_cov(x);
            // Four standard errors, Gaussian approximation for the variance.
            assert!(m[0].abs() < 4.0 * (expect_x / n as f64).sqrt(), "level {t} mean {}", m[0]);
            assert!((v[0] - expect_x).abs() < 4.0 * expect_x * (2.0 / n as f64).sqrt(), "level {t} var {}", v[0]);
            let (_, vy) = mean_and_cov(y);
            let expect_y = sched.alpha_next(t).powi(2)
                * (sched.alpha_bar(t).powi(2) * 4.0 / 3.0 + sched.sigma_bar(t).powi(2));
            assert!((vy[0] - expect_y).abs() < 4.0 * expect_y * (2.0 / n as f64).sqrt());
        }
    }
}

#[test]
fn conditional_gradient_matches_finite_differences() {
    let sched = Arc::new(build_cosine_schedule(5, 9.8, -5.1, 0.054).unwrap());
    let mut rng = RngStream::new(31);
    let spec = MlpSpec {
        input_dim: 2,
        output_dim: 1,
        hidden: vec![8, 8],
        time_embed_dim: 4,
        num_classes: 0,
        class_embed_dim: 0,
        activation: Activation::Softplus,
    };
    let m = EnergyModel::<f64>::from_net(Mlp::init(spec, &mut rng, 1.0), sched.clone()).unwrap();
    let h = 1e-4;
    for t in [0, 2, 4] {
        let y = Tensor::from_fn(3, 2, |_, _| rng.normal());
        let x = Tensor::from_fn(3, 2, |_, _| rng.normal());
        let g = cond_energy_grad(&m, &y, &x, t, ClassCond::Null).unwrap();
        let s2 = sched.sigma_next(t).powi(2);
        let logp = |y: &Tensor<f64>| -> Vec<f64> {
            let f = m.energy(y, t, ClassCond::Null).unwrap();
            (0..y.rows())
                .map(|i| {
                    let q: f64 = y.row(i).iter().zip(x.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
                    f[i] - q / (2.0 * s2)
                })
                .collect()
        };
        for i in 0..3 {
            for j in 0..2 {
                let (mut up, mut down) = (y.clone(), y.clone());
                up.set(i, j, y.get(i, j) + h);
                down.set(i, j, y.get(i, j) - h);
                let fd = (logp(&up)[i] - logp(&down)[i]) / (2.0 * h);
                let a = g.get(i, j);
                assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-4), "t={t} {a} vs {fd}");
            }
        }
    }
}

#[test]
fn matched_samples_give_noise_floor_gradient() {
    // The energy gradient estimator mean f(y) - mean f(y') vanishes in
    // expectation when both pools come from one distribution.
    let mut rng = RngStream::new(41);
    let spec = MlpSpec {
        input_dim: 2,
        output_dim: 1,
        hidden: vec![16],
        time_embed_dim: 0,
        num_classes: 0,
        class_embed_dim: 0,
        activation: Activation::Swish,
    };
    let net: Mlp<f64> = Mlp::init(spec, &mut rng, 1.0);
    let grad_norm = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
        let n = a.rows();
        let both = Tensor::vstack(a, b).unwrap();
        let (_, tape) = net.forward(&both, &Conditioning::uniform(2 * n, 0.0, None)).unwrap();
        let up = Tensor::from_fn(2 * n, 1, |i, _| if i < n { -1.0 / n as f64 } else { 1.0 / n as f64 });
        tape.grad_params(net.params(), &up).unwrap().global_norm()
    };
    let n = 20_000;
    let real = Tensor::from_fn(n, 2, |_, _| rng.normal());
    let same = Tensor::from_fn(n, 2, |_, _| rng.normal());
    let shifted = Tensor::from_fn(n, 2, |_, _| rng.normal() + 1.0);
    let matched = grad_norm(&real, &same);
    let mismatched = grad_norm(&real, &shifted);
    assert!(matched < 0.05 * mismatched, "matched {matched} vs mismatched {mismatched}");
}

#[test]
fn energy_gap_shrinks_on_gaussian_data() {
    let cfg = TrainConfig::parse(
        "T = 5\nK = 15\nstep_constant = 0.025\ndataset = gaussian\ndata_dim = 1\nhidden = 32,32\nbatch_size = 128\n\
         total_iters = 2000\nlr_ebm = 1e-3\nlr_init = 1e-3\nwarmup_iters = 200\ninit_head_start = 20\n\
         ebm_loss_scale = raw\nper_element_levels = true\nseed = 1\n",
    )
    .unwrap();
    let mut tr = Trainer::new(cfg).unwrap();
    let mut gaps = Vec::new();
    tr.fit(|s| gaps.push((s.mean_energy_real - s.mean_energy_fake).abs())).unwrap();
    let window = |k: usize| gaps[k * 100..(k + 1) * 100].iter().sum::<f64>() / 100.0;
    let (first, last) = (window(0), window(19));
    assert!(last < first, "gap over the first 100 iterations {first}, last 100 {last}");
}
