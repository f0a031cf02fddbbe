//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use lmd_core::datagen::{perturb, PerturbConfig};
use lmd_core::diffcore::{Architecture, ModelState, Tape, Tensor, Var};
use lmd_core::icc::{fdc_loss, ClassMoments, MahalanobisMetric, MahalanobisMode};
use lmd_core::rrl::{loss_stage1, ModelConfig, Stage1Batch, Stage1Config};
use lmd_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-8)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks sit outside the FD stencil.
pub fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.01..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_spd(rng: &mut ChaCha8Rng, c: usize) -> Tensor {
    let b = rand_tensor(rng, &[c, c], -1.0, 1.0);
    let mut a = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            a[i * c + j] = (0..c).map(|k| b.at(i, k) * b.at(j, k)).sum::<f64>();
        }
        a[i * c + i] += 0.5;
    }
    Tensor::matrix(c, c, a).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Scalarises `build` as `Σ (y − T)²` with a fixed random target `T`, then
/// compares tape gradients of every input against central differences.
/// Inputs listed in `symmetric` are perturbed as `E_rs + E_sr`.
pub fn fd_op(rng: &mut ChaCha8Rng, inputs: &[Tensor], symmetric: &[usize], build: &Build<'_>) -> f64 {
    let shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = build(&mut t, &vars).unwrap();
        t.value(y).shape().to_vec()
    };
    let target = rand_tensor(rng, &shape, -1.0, 1.0);
    let loss = |xs: &[Tensor], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let y = build(&mut t, &vars).unwrap();
        let tv = t.constant(target.clone());
        let d = t.sub(y, tv).unwrap();
        let sq = t.square(d).unwrap();
        let l = t.sum(sq).unwrap();
        let value = t.value(l).item();
        if !grad {
            return (value, Vec::new());
        }
        let g = t.backward(l).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.get(*v).map_or(vec![0.0; x.len()], |t| t.data().to_vec()))
            .collect();
        (value, grads)
    };
    let (_, analytic) = loss(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let sym = symmetric.contains(&i);
        let c = if sym { x.shape()[0] } else { 0 };
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for j in 0..x.len() {
            let (r, s) = if sym { (j / c, j % c) } else { (0, 0) };
            if sym && s < r {
                continue;
            }
            let shifted = |sign: f64| {
                let mut xs = inputs.to_vec();
                let d = xs[i].data_mut();
                d[j] += sign * FD_STEP;
                if sym && r != s {
                    d[s * c + r] += sign * FD_STEP;
                }
                loss(&xs, false).0
            };
            num.push((shifted(1.0) - shifted(-1.0)) / (2.0 * FD_STEP));
            let a = &analytic[i];
            ana.push(if sym && r != s { a[j] + a[s * c + r] } else { a[j] });
        }
        worst = worst.max(rel_err(&ana, &num));
    }
    worst
}

/// One random point for a named op; returns the worst relative error.
pub fn op_point(name: &str, rng: &mut ChaCha8Rng) -> f64 {
    let (b, c, k) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5));
    match name {
        "matmul" => {
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0), rand_tensor(rng, &[c, k], -1.0, 1.0)];
            fd_op(rng, &xs, &[], &|t, v| t.matmul(v[0], v[1]))
        }
        "add_bias" => {
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0), rand_tensor(rng, &[c], -1.0, 1.0)];
            fd_op(rng, &xs, &[], &|t, v| t.add_bias(v[0], v[1]))
        }
        "relu" => {
            let xs = [rand_off_zero(rng, &[b, c])];
            fd_op(rng, &xs, &[], &|t, v| Ok(t.relu(v[0])))
        }
        "add" | "sub" => {
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0), rand_tensor(rng, &[b, c], -1.0, 1.0)];
            if name == "add" {
                fd_op(rng, &xs, &[], &|t, v| t.add(v[0], v[1]))
            } else {
                fd_op(rng, &xs, &[], &|t, v| t.sub(v[0], v[1]))
            }
        }
        "scale" => {
            let s = rng.random_range(-3.0..3.0);
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0)];
            fd_op(rng, &xs, &[], &move |t, v| t.scale(v[0], s))
        }
        "square" => {
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0)];
            fd_op(rng, &xs, &[], &|t, v| t.square(v[0]))
        }
        "sum" => {
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0)];
            fd_op(rng, &xs, &[], &|t, v| t.sum(v[0]))
        }
        "softmax_rows" => {
            let xs = [rand_tensor(rng, &[b, k], -2.0, 2.0)];
            fd_op(rng, &xs, &[], &|t, v| t.softmax_rows(v[0]))
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let xs = [rand_tensor(rng, &[b, k], -2.0, 2.0)];
            fd_op(rng, &xs, &[], &move |t, v| t.cross_entropy(v[0], &labels))
        }
        "kl_rows" => {
            let xs = [rand_tensor(rng, &[b, k], -2.0, 2.0), rand_tensor(rng, &[b, k], -2.0, 2.0)];
            fd_op(rng, &xs, &[], &|t, v| {
                let p = t.softmax_rows(v[0])?;
                let q = t.softmax_rows(v[1])?;
                t.kl_rows(p, q)
            })
        }
        "gram_sample" => {
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0)];
            fd_op(rng, &xs, &[], &|t, v| t.gram_sample(v[0]))
        }
        "gram_channel" => {
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0)];
            fd_op(rng, &xs, &[], &|t, v| t.gram_channel(v[0]))
        }
        "quadratic_form" => {
            let xs = [
                rand_tensor(rng, &[b, c], -1.0, 1.0),
                rand_tensor(rng, &[c], -1.0, 1.0),
                rand_spd(rng, c),
            ];
            fd_op(rng, &xs, &[2], &|t, v| t.quadratic_form(v[0], v[1], v[2]))
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..b + 2).map(|_| rng.random_range(0..b)).collect();
            let xs = [rand_tensor(rng, &[b, c], -1.0, 1.0)];
            fd_op(rng, &xs, &[], &move |t, v| t.gather_rows(v[0], &idx))
        }
        "normalize_rows" => {
            let xs = [rand_off_zero(rng, &[b, c])];
            fd_op(rng, &xs, &[], &|t, v| t.normalize_rows(v[0]))
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: [&str; 16] = [
    "matmul",
    "add_bias",
    "relu",
    "add",
    "sub",
    "scale",
    "square",
    "sum",
    "softmax_rows",
    "cross_entropy",
    "kl_rows",
    "gram_sample",
    "gram_channel",
    "quadratic_form",
    "gather_rows",
    "normalize_rows",
];

fn student_grads(state: &ModelState) -> Vec<f64> {
    state
        .encoder
        .iter()
        .chain(state.classifier.iter())
        .flat_map(|p| p.grad.as_ref().map_or(vec![0.0; p.value.len()], |g| g.data().to_vec()))
        .collect()
}

/// Central differences over every student parameter of `f`.
fn fd_params(state: &ModelState, train_classifier: bool, f: &dyn Fn(&ModelState) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let n_sets = if train_classifier { 2 } else { 1 };
    for set in 0..n_sets {
        let count = if set == 0 { state.encoder.params.len() } else { state.classifier.params.len() };
        for p in 0..count {
            let len = if set == 0 {
                state.encoder.params[p].value.len()
            } else {
                state.classifier.params[p].value.len()
            };
            for j in 0..len {
                let eval = |sign: f64| {
                    let mut s = state.clone();
                    let ps = if set == 0 { &mut s.encoder } else { &mut s.classifier };
                    ps.params[p].value.data_mut()[j] += sign * FD_STEP;
                    f(&s)
                };
                out.push((eval(1.0) - eval(-1.0)) / (2.0 * FD_STEP));
            }
        }
    }
    out
}

fn small_state(rng: &mut ChaCha8Rng, d: usize, k: usize) -> ModelState {
    let arch = Architecture {
        input_dim: d,
        hidden: vec![5],
        feature_dim: 3,
        num_classes: k,
    };
    let mut s = ModelState::new(arch, rng.random(), 0.9).unwrap();
    // Random biases keep feature rows away from zero, where row
    // normalisation is in its ε regime and steeper than the FD stencil.
    for p in s.encoder.params.iter_mut().chain(s.classifier.params.iter_mut()) {
        if p.name.ends_with("bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    s.teacher_encoder = s.encoder.clone();
    s.teacher_classifier = s.classifier.clone();
    // A teacher that differs from the student makes every consistency term live.
    for p in s.teacher_encoder.params.iter_mut().chain(s.teacher_classifier.params.iter_mut()) {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    s
}

/// Smallest |pre-activation| of the (single) hidden ReLU layer over `x`,
/// for student and teacher.
fn kink_margin(state: &ModelState, x: &[f64]) -> f64 {
    let d = state.arch.input_dim;
    let mut m = f64::INFINITY;
    for enc in [&state.encoder, &state.teacher_encoder] {
        let (w, b) = (&enc.params[0].value, &enc.params[1].value);
        let h = w.shape()[1];
        for row in x.chunks(d) {
            for j in 0..h {
                let a: f64 = b.data()[j] + (0..d).map(|i| row[i] * w.at(i, j)).sum::<f64>();
                m = m.min(a.abs());
            }
        }
    }
    m
}

/// Inputs whose hidden pre-activations stay 1e-3 clear of the ReLU kink in
/// every view, so the FD stencil never straddles it.
fn clear_inputs(
    rng: &mut ChaCha8Rng,
    state: &ModelState,
    rows: usize,
    views: &[PerturbConfig],
    index: u64,
) -> Vec<f64> {
    let d = state.arch.input_dim;
    loop {
        let x: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ok = kink_margin(state, &x) > 1e-3
            && views.iter().all(|v| kink_margin(state, &perturb(&x, d, v, index)) > 1e-3);
        if ok {
            return x;
        }
    }
}

/// The full stage-one loss against all student parameters.
pub fn stage1_point(rng: &mut ChaCha8Rng, gram_normalize: bool) -> f64 {
    let (b, d, k) = (4, 3, 3);
    let state = small_state(rng, d, k);
    let y: Vec<usize> = (0..b).map(|i| i % k).collect();
    let mut cfg = Stage1Config::with_seed(rng.random());
    cfg.model = ModelConfig { hidden: vec![5], feature_dim: 3 };
    cfg.gram_normalize = gram_normalize;
    cfg.lambda1 = 0.5;
    let x = clear_inputs(rng, &state, b, &[cfg.perturb_strong, cfg.perturb_weak], 7);
    let batch = Stage1Batch { features: &x, labels: &y, index: 7 };
    let mut s = state.clone();
    loss_stage1(&batch, &s, &cfg).unwrap().backward_into(&mut s).unwrap();
    let analytic = student_grads(&s);
    let numeric = fd_params(&state, true, &|st| loss_stage1(&batch, st, &cfg).unwrap().terms.total);
    rel_err(&analytic, &numeric)
}

/// The FDC loss against encoder parameters, in both metric modes.
pub fn fdc_point(rng: &mut ChaCha8Rng, mode: MahalanobisMode) -> f64 {
    let (b, d, k, c) = (6, 3, 3, 3);
    let state = small_state(rng, d, k);
    let x = clear_inputs(rng, &state, b, &[], 0);
    let y: Vec<usize> = (0..b).map(|i| i % k).collect();
    let mu: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sigma: Vec<f64> = (0..k).flat_map(|_| rand_spd(rng, c).into_data()).collect();
    let m = ClassMoments::from_parts(k, c, mu, sigma, 1e-3, 0.9, vec![2; k]).unwrap();
    let metric = MahalanobisMetric::new(&m, mode).unwrap();
    let lambda_e = 0.3;
    let mut s = state.clone();
    fdc_loss(&x, &y, &s, &metric, lambda_e).unwrap().backward_into(&mut s).unwrap();
    let analytic: Vec<f64> = s
        .encoder
        .iter()
        .flat_map(|p| p.grad.as_ref().unwrap().data().to_vec())
        .collect();
    let numeric = fd_params(&state, false, &|st| fdc_loss(&x, &y, st, &metric, lambda_e).unwrap().terms.total);
    rel_err(&analytic, &numeric)
}

/// Worst relative error per op (and per composite loss) over `points`
/// random points each.
pub fn gradient_sweep(points: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, f64)> = OPS
        .iter()
        .map(|op| {
            let worst = (0..points).map(|_| op_point(op, &mut rng)).fold(0.0, f64::max);
            (op.to_string(), worst)
        })
        .collect();
    let composites: [(&str, &dyn Fn(&mut ChaCha8Rng) -> f64); 4] = [
        ("loss_stage1", &|r| stage1_point(r, false)),
        ("loss_stage1(gram_normalize)", &|r| stage1_point(r, true)),
        ("fdc_loss(inverse)", &|r| fdc_point(r, MahalanobisMode::Inverse)),
        ("fdc_loss(as_printed)", &|r| fdc_point(r, MahalanobisMode::AsPrinted)),
    ];
    for (name, f) in composites {
        let worst = (0..points).map(|_| f(&mut rng)).fold(0.0, f64::max);
        out.push((name.to_string(), worst));
    }
    out
}

/// Macro one-vs-rest AUC by counting every positive/negative pair; ties count
/// one half. Classes lacking positives or negatives are skipped.
pub fn auc_pair_oracle(scores: &[f64], y: &[usize], k: usize) -> f64 {
    let mut aucs = Vec::new();
    for class in 0..k {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi != class {
                continue;
            }
            for (j, &yj) in y.iter().enumerate() {
                if yj == class {
                    continue;
                }
                let (a, b) = (scores[i * k + class], scores[j * k + class]);
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                pairs += 1.0;
            }
        }
        if pairs > 0.0 {
            aucs.push(wins / pairs);
        }
    }
    aucs.iter().sum::<f64>() / aucs.len() as f64
}

/// Quadratic kappa straight from the label vectors: observed mean squared
/// label gap over the gap between independently shuffled true and predicted
/// labels (all `N²` pairings).
pub fn kappa_oracle(y: &[usize], pred: &[usize]) -> f64 {
    let n = y.len() as f64;
    let observed: f64 = y.iter().zip(pred).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n;
    let mut expected = 0.0;
    for &a in y {
        for &b in pred {
            expected += (a as f64 - b as f64).powi(2);
        }
    }
    1.0 - observed / (expected / (n * n))
}

/// Random scored instance with deliberate score ties and at least two
/// distinct true labels.
pub fn metric_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>, usize) {
    let k = rng.random_range(2..7);
    let n = rng.random_range(20..150);
    let coarse = rng.random_bool(0.5);
    let scores = (0..n * k)
        .map(|_| {
            let s: f64 = rng.random();
            if coarse { (s * 8.0).floor() / 8.0 } else { s }
        })
        .collect();
    let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    y[0] = 0;
    y[1] = k - 1;
    (scores, y, k)
}

/// Largest deviation of the library AUC and kappa from their oracles over
/// `instances` random draws.
pub fn metric_oracle_gaps(instances: usize, seed: u64) -> (f64, f64) {
    use lmd_core::metrics::{argmax_rows, auc_ovr_macro, confusion_matrix, quadratic_weighted_kappa};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut auc_gap, mut kappa_gap) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let (scores, y, k) = metric_instance(&mut rng);
        let auc = auc_ovr_macro(&scores, &y, k).unwrap();
        auc_gap = auc_gap.max((auc - auc_pair_oracle(&scores, &y, k)).abs());
        let mut pred = argmax_rows(&scores, k);
        // A predictor that sometimes copies the truth keeps kappa away from 0.
        for (p, &t) in pred.iter_mut().zip(&y) {
            if rng.random_bool(0.4) {
                *p = t;
            }
        }
        let kappa = quadratic_weighted_kappa(&confusion_matrix(&y, &pred, k).unwrap());
        kappa_gap = kappa_gap.max((kappa - kappa_oracle(&y, &pred)).abs());
    }
    (auc_gap, kappa_gap)
}
