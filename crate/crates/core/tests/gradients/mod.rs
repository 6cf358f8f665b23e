//! Reverse-mode gradients against central finite differences, shared by
//! the core tests and the acceptance target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use racer::autodiff::{AttentionLayout, Graph, Reduce, Tensor, Var};
use racer::dataset::ContextTargetBatch;
use racer::np::{gaussian_head, kl_rows, nll_points, LatentSample, ModelConfig, ModelKind, Network};

const H: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Checks every input element of `f` where the loss is
/// `Σ f(inputs) ⊙ w` for a fixed random weighting `w`.
fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor], w: Option<&Tensor>| -> (f64, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = f(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let w = w.cloned().unwrap_or_else(|| Tensor::full(&shape, 1.0));
        let wv = g.input(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        g.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();
        (value, grads, w)
    };
    let (_, _, ones) = eval(&inputs, None);
    let w = random(&mut rng, ones.shape(), -1.0, 1.0);
    let (_, grads, _) = eval(&inputs, Some(&w));
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * H);
            worst = worst.max(rel_err(grads[i].data()[j], numeric));
        }
    }
    assert!(worst < tol, "{name}: worst relative error {worst:e}");
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

pub fn matmul_and_elementwise() {
    let mut r = rng();
    check("matmul", vec![random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[4, 2], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1]).unwrap(), 1e-6);
    let (a, b) = (random(&mut r, &[3, 2], -1.0, 1.0), random(&mut r, &[3, 2], 0.5, 2.0));
    check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap(), 1e-6);
    check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap(), 1e-6);
    check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap(), 1e-6);
    check("div", vec![a.clone(), b.clone()], |g, v| g.div(v[0], v[1]).unwrap(), 1e-6);
    check("add_bias", vec![a.clone(), random(&mut r, &[2], -1.0, 1.0)], |g, v| g.add_bias(v[0], v[1]).unwrap(), 1e-6);
    check("scale", vec![a.clone()], |g, v| g.scale(v[0], -2.5), 1e-6);
    check("add_const", vec![a.clone()], |g, v| g.add_const(v[0], 3.0), 1e-6);
}

pub fn unary_ops() {
    let mut r = rng();
    let x = random(&mut r, &[4, 3], -2.0, 2.0);
    check("tanh", vec![x.clone()], |g, v| g.tanh(v[0]).unwrap(), 1e-6);
    check("exp", vec![x.clone()], |g, v| g.exp(v[0]).unwrap(), 1e-6);
    check("softplus", vec![x.clone()], |g, v| g.softplus(v[0]).unwrap(), 1e-6);
    check("square", vec![x.clone()], |g, v| g.square(v[0]).unwrap(), 1e-6);
    check("log", vec![random(&mut r, &[4, 3], 0.3, 3.0)], |g, v| g.log(v[0]).unwrap(), 1e-6);
    // keep away from the kink
    let y = Tensor::new(x.shape().to_vec(), x.data().iter().map(|d| if d.abs() < 0.1 { d + 0.3 } else { *d }).collect()).unwrap();
    check("relu", vec![y], |g, v| g.relu(v[0]).unwrap(), 1e-6);
}

pub fn reductions_and_reshapes() {
    let mut r = rng();
    let x = random(&mut r, &[4, 3], -2.0, 2.0);
    check("softmax0", vec![x.clone()], |g, v| g.softmax(v[0], 0).unwrap(), 1e-6);
    check("softmax1", vec![x.clone()], |g, v| g.softmax(v[0], 1).unwrap(), 1e-6);
    check("reduce_sum", vec![x.clone()], |g, v| g.reduce(Reduce::Sum, v[0], 1).unwrap(), 1e-6);
    check("reduce_mean", vec![x.clone()], |g, v| g.reduce(Reduce::Mean, v[0], 0).unwrap(), 1e-6);
    check("sum", vec![x.clone()], |g, v| g.sum(v[0]), 1e-6);
    check("mean", vec![x.clone()], |g, v| g.mean(v[0]), 1e-6);
    check(
        "concat",
        vec![x.clone(), random(&mut r, &[4, 2], -1.0, 1.0)],
        |g, v| g.concat_cols(&[v[0], v[1], v[0]]).unwrap(),
        1e-6,
    );
    check("slice", vec![x.clone()], |g, v| g.slice_cols(v[0], 1, 2).unwrap(), 1e-6);
    check("transpose", vec![x.clone()], |g, v| g.transpose(v[0]).unwrap(), 1e-6);
    check("group_mean", vec![x.clone()], |g, v| g.group_mean(v[0], 2).unwrap(), 1e-6);
    check("repeat_rows", vec![x.clone()], |g, v| g.repeat_rows(v[0], 3).unwrap(), 1e-6);
}

pub fn attention_all_inputs() {
    let mut r = rng();
    let layout = AttentionLayout {
        heads: 2,
        groups: 2,
        queries: 3,
        keys: 4,
    };
    check(
        "attention",
        vec![
            random(&mut r, &[6, 4], -1.0, 1.0),
            random(&mut r, &[8, 4], -1.0, 1.0),
            random(&mut r, &[8, 6], -1.0, 1.0),
        ],
        move |g, v| g.attention(v[0], v[1], v[2], layout).unwrap(),
        1e-6,
    );
}

pub fn gaussian_terms() {
    let mut r = rng();
    check(
        "nll",
        vec![random(&mut r, &[5, 1], -1.0, 1.0), random(&mut r, &[5, 2], -1.0, 1.0)],
        |g, v| {
            let p = gaussian_head(g, v[1], 1).unwrap();
            nll_points(g, v[0], p).unwrap()
        },
        1e-6,
    );
    check(
        "kl",
        vec![random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[3, 4], -1.0, 1.0)],
        |g, v| {
            let q = gaussian_head(g, v[0], 2).unwrap();
            let p = gaussian_head(g, v[1], 2).unwrap();
            kl_rows(g, q, p).unwrap()
        },
        1e-6,
    );
}

fn batch(rng: &mut impl Rng, bins: usize, groups: usize, nc: usize, nt: usize) -> ContextTargetBatch {
    let mut rows = |n: usize| {
        let data = (0..n)
            .flat_map(|_| {
                let mut r: Vec<f64> = (0..bins).map(|_| rng.gen_range(0.2..30.0)).collect();
                r.push(rng.gen_range(0.0..5.0));
                r.push(rng.gen_range(-2.0..2.0));
                r
            })
            .collect();
        Tensor::matrix(n, bins + 2, data).unwrap()
    };
    let x_context = rows(groups * nc);
    let x_target = rows(groups * nt);
    let mut col = |n: usize| Tensor::matrix(n, 1, (0..n).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap();
    ContextTargetBatch {
        groups,
        n_context: nc,
        n_target: nt,
        x_context,
        y_context: col(groups * nc),
        x_target,
        y_target: col(groups * nt),
        prior: col(groups * nt),
    }
}

/// 95th percentile relative error over 100 random parameter probes of the
/// full PI-AttNP training objective.
pub fn objective_probe_p95() -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let mut cfg = ModelConfig::new(ModelKind::PiAttNp);
    cfg.bins = 8;
    cfg.embed = 4;
    cfg.repr = 8;
    cfg.latent = 4;
    cfg.heads = 2;
    cfg.hidden = 8;
    let mut net = Network::new(cfg, 3).unwrap();
    let b = batch(&mut r, 8, 3, 4, 5);
    let eps = Tensor::matrix(3, 4, (0..12).map(|_| r.sample(StandardNormal)).collect()).unwrap();

    let loss = |net: &Network| -> f64 {
        let mut g = Graph::new();
        let (l, _) = net.loss_on(&mut g, &b, LatentSample::Posterior(&eps)).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let (l, _) = net.loss_on(&mut g, &b, LatentSample::Posterior(&eps)).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_grads(&net.params);

    let ids: Vec<_> = net.params.ids().collect();
    let mut errs = Vec::new();
    for _ in 0..100 {
        let id = ids[r.gen_range(0..ids.len())];
        let j = r.gen_range(0..net.params.get(id).numel());
        let orig = net.params.get(id).data()[j];
        let h = 1e-5;
        net.params.get_mut(id).data_mut()[j] = orig + h;
        let up = loss(&net);
        net.params.get_mut(id).data_mut()[j] = orig - h;
        let down = loss(&net);
        net.params.get_mut(id).data_mut()[j] = orig;
        errs.push(rel_err(grads[id.index()].data()[j], (up - down) / (2.0 * h)));
    }
    errs.sort_by(f64::total_cmp);
    errs[94]
}

/// Every per-op check.
#[allow(dead_code)]
pub const OP_SUITES: [fn(); 5] = [matmul_and_elementwise, unary_ops, reductions_and_reshapes, attention_all_inputs, gaussian_terms];
