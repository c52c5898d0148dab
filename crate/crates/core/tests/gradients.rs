mod common;

use burst2vec::diffcore::{Graph, NodeId, Tensor};
use burst2vec::losses::LossWeights;
use burst2vec::model::{Burst2Vec, TaskId};
use common::*;
use rand::Rng;

type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Checks one primitive: the scalar `Σ op(x) ⊙ W` (fixed random `W`) is
/// differentiated analytically and by central differences in every input.
fn check_primitive(seed: u64, inputs: Vec<Tensor>, build: &Build) -> f64 {
    let mut r = rng(seed.wrapping_mul(31).wrapping_add(7));
    let eval = |xs: &[Tensor], weight: Option<&Tensor>| -> (f64, Tensor, Vec<NodeId>, Graph) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &ids);
        let shape = g.shape(out).to_vec();
        let w = weight
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape));
        let wn = g.constant(w.clone());
        let prod = g.mul(out, wn).unwrap();
        let loss = g.sum(prod);
        (g.value(loss).item(), w, ids, g)
    };
    let (_, zero_w, _, _) = eval(&inputs, None);
    let weight = uniform(&mut r, zero_w.shape(), -1.0, 1.0);

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &ids);
    let wn = g.constant(weight.clone());
    let prod = g.mul(out, wn).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();

    let h = 1e-6;
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (i, id) in ids.iter().enumerate() {
        let a = grads.wrt(*id);
        for k in 0..inputs[i].len() {
            let mut xs = inputs.clone();
            xs[i].data_mut()[k] += h;
            let up = eval(&xs, Some(&weight)).0;
            xs[i].data_mut()[k] -= 2.0 * h;
            let down = eval(&xs, Some(&weight)).0;
            let n = (up - down) / (2.0 * h);
            diff += (a.data()[k] - n).powi(2);
            na += a.data()[k].powi(2);
            nn += n * n;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

fn run_primitive(name: &str, make: impl Fn(u64) -> (Vec<Tensor>, Box<Build>)) {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (inputs, build) = make(seed);
        let err = check_primitive(seed, inputs, &*build);
        worst = worst.max(err);
        assert!(err < 1e-5, "{name} seed {seed}: relative error {err:e}");
    }
    eprintln!("{name}: worst relative error {worst:e}");
}

fn u(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    uniform(&mut rng(seed), shape, lo, hi)
}

/// Values bounded away from zero (for kinks and poles).
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    let mut t = uniform(&mut r, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

#[test]
fn matmul_matches_fd() {
    run_primitive("matmul", |s| {
        let (m, k, n) = dims(s);
        (
            vec![u(s, &[m, k], -1.0, 1.0), u(s + 1000, &[k, n], -1.0, 1.0)],
            Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()),
        )
    });
}

#[test]
fn add_bias_matches_fd() {
    run_primitive("add_bias", |s| {
        let (b, t, d) = dims(s);
        (
            vec![u(s, &[b, t, d], -1.0, 1.0), u(s + 1000, &[d], -1.0, 1.0)],
            Box::new(|g, x| g.add_bias(x[0], x[1]).unwrap()),
        )
    });
}

#[test]
fn elementwise_binary_ops_match_fd() {
    run_primitive("add", |s| {
        let (m, n, _) = dims(s);
        (
            vec![u(s, &[m, n], -1.0, 1.0), u(s + 1, &[m, n], -1.0, 1.0)],
            Box::new(|g, x| g.add(x[0], x[1]).unwrap()),
        )
    });
    run_primitive("sub", |s| {
        let (m, n, _) = dims(s);
        (
            vec![u(s, &[m, n], -1.0, 1.0), u(s + 1, &[m, n], -1.0, 1.0)],
            Box::new(|g, x| g.sub(x[0], x[1]).unwrap()),
        )
    });
    run_primitive("mul", |s| {
        let (m, n, _) = dims(s);
        (
            vec![u(s, &[m, n], -1.0, 1.0), u(s + 1, &[m, n], -1.0, 1.0)],
            Box::new(|g, x| g.mul(x[0], x[1]).unwrap()),
        )
    });
    run_primitive("div", |s| {
        let (m, n, _) = dims(s);
        (
            vec![u(s, &[m, n], -1.0, 1.0), away_from_zero(s + 1, &[m, n])],
            Box::new(|g, x| g.div(x[0], x[1]).unwrap()),
        )
    });
    run_primitive("safe_div", |s| {
        let (m, n, _) = dims(s);
        (
            vec![u(s, &[m, n], -1.0, 1.0), u(s + 1, &[m, n], 0.2, 1.0)],
            Box::new(|g, x| g.safe_div(x[0], x[1], 1e-12).unwrap()),
        )
    });
}

#[test]
fn unary_ops_match_fd() {
    run_primitive("scale", |s| {
        let (m, n, _) = dims(s);
        (vec![u(s, &[m, n], -1.0, 1.0)], Box::new(|g, x| g.scale(x[0], -1.7)))
    });
    run_primitive("add_scalar", |s| {
        let (m, n, _) = dims(s);
        (vec![u(s, &[m, n], -1.0, 1.0)], Box::new(|g, x| g.add_scalar(x[0], 0.3)))
    });
    run_primitive("relu", |s| {
        let (m, n, _) = dims(s);
        (vec![away_from_zero(s, &[m, n])], Box::new(|g, x| g.relu(x[0])))
    });
    run_primitive("abs", |s| {
        let (m, n, _) = dims(s);
        (vec![away_from_zero(s, &[m, n])], Box::new(|g, x| g.abs(x[0])))
    });
    run_primitive("log", |s| {
        let (m, n, _) = dims(s);
        (vec![u(s, &[m, n], 0.2, 2.0)], Box::new(|g, x| g.log(x[0])))
    });
    run_primitive("softmax", |s| {
        let (m, n, _) = dims(s);
        (vec![u(s, &[m, n + 1], -2.0, 2.0)], Box::new(|g, x| g.softmax(x[0])))
    });
    run_primitive("log_softmax", |s| {
        let (m, n, _) = dims(s);
        (vec![u(s, &[m, n + 1], -2.0, 2.0)], Box::new(|g, x| g.log_softmax(x[0])))
    });
}

#[test]
fn reductions_and_layout_ops_match_fd() {
    run_primitive("sum", |s| {
        let (m, n, _) = dims(s);
        (vec![u(s, &[m, n], -1.0, 1.0)], Box::new(|g, x| g.sum(x[0])))
    });
    run_primitive("mean", |s| {
        let (m, n, _) = dims(s);
        (vec![u(s, &[m, n], -1.0, 1.0)], Box::new(|g, x| g.mean(x[0])))
    });
    run_primitive("mean_axis", |s| {
        let (a, b, c) = dims(s);
        let axis = (s % 3) as usize;
        (
            vec![u(s, &[a, b, c], -1.0, 1.0)],
            Box::new(move |g, x| g.mean_axis(x[0], axis).unwrap()),
        )
    });
    run_primitive("concat", |s| {
        let (m, n, k) = dims(s);
        (
            vec![u(s, &[m, n], -1.0, 1.0), u(s + 1, &[m, k], -1.0, 1.0)],
            Box::new(|g, x| g.concat(x[0], x[1]).unwrap()),
        )
    });
    run_primitive("pick", |s| {
        let (m, n, _) = dims(s);
        let idx: Vec<usize> = (0..m).map(|i| (i * 7 + s as usize) % n).collect();
        (
            vec![u(s, &[m, n], -1.0, 1.0)],
            Box::new(move |g, x| g.pick(x[0], &idx).unwrap()),
        )
    });
    run_primitive("reshape", |s| {
        let (m, n, _) = dims(s);
        (
            vec![u(s, &[m, n], -1.0, 1.0)],
            Box::new(move |g, x| g.reshape(x[0], vec![n, m]).unwrap()),
        )
    });
}

#[test]
fn conv_and_pooling_match_fd() {
    run_primitive("conv1d", |s| {
        let mut r = rng(s);
        let (b, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let k = r.random_range(1..5);
        let stride = r.random_range(1..4);
        let t = k + r.random_range(0..8);
        (
            vec![u(s, &[b, t, cin], -1.0, 1.0), u(s + 1, &[k, cin, cout], -1.0, 1.0)],
            Box::new(move |g, x| g.conv1d(x[0], x[1], stride).unwrap()),
        )
    });
    run_primitive("masked_mean_pool", |s| {
        let mut r = rng(s);
        let (b, t, d) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..4));
        let counts: Vec<usize> = (0..b).map(|_| r.random_range(1..=t)).collect();
        (
            vec![u(s, &[b, t, d], -1.0, 1.0)],
            Box::new(move |g, x| g.masked_mean_pool(x[0], &counts).unwrap()),
        )
    });
}

#[test]
fn gradient_reversal_scales_and_flips() {
    for seed in 0..100u64 {
        let lambda = rng(seed).random_range(0.0..2.0);
        let x = u(seed, &[3, 2], -1.0, 1.0);
        let w = u(seed + 1, &[3, 2], -1.0, 1.0);
        let grad = |reverse: bool| {
            let mut g = Graph::new();
            let xn = g.param(x.clone());
            let y = if reverse { g.gradient_reversal(xn, lambda) } else { xn };
            let wn = g.constant(w.clone());
            let p = g.mul(y, wn).unwrap();
            let l = g.sum(p);
            assert_eq!(g.value(y), &x);
            g.backward(l).unwrap().wrt(xn)
        };
        let (plain, reversed) = (grad(false), grad(true));
        for (a, b) in plain.data().iter().zip(reversed.data()) {
            assert!((b + lambda * a).abs() < 1e-15);
        }
    }
}

#[test]
fn end_to_end_objective_matches_fd() {
    for seed in 0..20 {
        let err = end_to_end_gradient_error(seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

/// Reversal on the discriminator input: the shared extractor's gradient from
/// `L_D` is `−α1` times the gradient of a plain (non-reversed) graph.
#[test]
fn shared_extractor_gradient_flips_with_reversal() {
    use burst2vec::losses::{discriminator_loss, TargetNodes};
    let config = toy_config(0);
    let model = Burst2Vec::new(config.clone(), 5).unwrap();
    let mut r = rng(11);
    let input = toy_input(&config, &mut r);
    let _ = TargetNodes::insert;
    let grad = |reversal: Option<f64>| {
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let bundle = model.represent(&mut g, &b, &input).unwrap();
        let logits = model.discriminate(&mut g, &b, bundle.shared, reversal).unwrap();
        let l = discriminator_loss(&mut g, TaskId::Age, logits).unwrap();
        g.backward(l).unwrap().wrt(b.node("extractor.shared.fc2.weight"))
    };
    let alpha1 = LossWeights::default().alpha1;
    let (plain, reversed) = (grad(None), grad(Some(alpha1)));
    assert!(plain.data().iter().any(|v| v.abs() > 1e-8));
    for (a, b) in plain.data().iter().zip(reversed.data()) {
        assert!((b + alpha1 * a).abs() < 1e-14);
    }
}

