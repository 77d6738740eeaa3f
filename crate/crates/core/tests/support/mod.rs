//! Oracles shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use mogle::data::{PromptTokens, PROMPT_LEN, VOCAB_SIZE};
use mogle::dit::{Denoiser, DenoiserConfig};
use mogle::mogle::{Mogle, MogleConfig};
use mogle::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use mogle::Result;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Scalar `Σ out ⊙ weights`, so every output element reaches the loss with
/// a distinct coefficient.
pub fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p, None)
}

/// Analytic input gradients of `f` against central differences.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let ga = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + FD_STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - FD_STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            analytic.push(ga.data()[i]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Analytic parameter gradients of `f` against central differences on up to
/// `per_tensor` random coordinates of each listed parameter.
pub fn gradcheck_params(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    per_tensor: usize,
    rng: &mut impl Rng,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut acc = store.clone();
    acc.zero_grads();
    acc.accumulate_grads(&g, &grads);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut work = store.clone();
    for &id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let ga = acc.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for i in coords {
            let x = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = x + FD_STEP;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = x - FD_STEP;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = x;
            analytic.push(ga.data()[i]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn dims(rng: &mut impl Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Broadcast-compatible partner shape: each axis kept or set to 1, and
/// sometimes leading axes dropped.
fn broadcast_partner(shape: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let drop = rng.random_range(0..shape.len());
    shape[drop..]
        .iter()
        .map(|&d| if rng.random_bool(0.4) { 1 } else { d })
        .collect()
}

fn nrm(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal(shape, 1.0, rng)
}

type OpCase = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// One random instance of the named operation, already projected to a scalar.
fn op_case(name: &str, rng: &mut ChaCha8Rng) -> OpCase {
    macro_rules! case {
        ($inputs:expr, $out_shape:expr, |$g:ident, $v:ident| $body:expr) => {{
            let inputs: Vec<Tensor<f64>> = $inputs;
            let w = normal(&$out_shape, 1.0, &mut rng_from(&inputs));
            let f = move |$g: &mut Graph<f64>, $v: &[Var]| -> Result<Var> {
                let out = $body?;
                project($g, out, &w)
            };
            (inputs, Box::new(f) as Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)
        }};
    }
    match name {
        "matmul" => {
            let (m, k, n) = (dims(rng, 1)[0], dims(rng, 1)[0], dims(rng, 1)[0]);
            let b = rng.random_range(1..=3);
            match rng.random_range(0..3) {
                0 => case!(vec![nrm(rng, &[m, k]), nrm(rng, &[k, n])], [m, n], |g, v| g.matmul(v[0], v[1])),
                1 => case!(vec![nrm(rng, &[b, m, k]), nrm(rng, &[b, k, n])], [b, m, n], |g, v| g.matmul(v[0], v[1])),
                _ => case!(vec![nrm(rng, &[b, m, k]), nrm(rng, &[k, n])], [b, m, n], |g, v| g.matmul(v[0], v[1])),
            }
        }
        "matmul_nt" => {
            let (m, k, n, b) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=3),
            );
            case!(vec![nrm(rng, &[b, m, k]), nrm(rng, &[b, n, k])], [b, m, n], |g, v| g.matmul_nt(v[0], v[1]))
        }
        "add" | "sub" | "mul" => {
            let rank = rng.random_range(1..=3);
            let s = dims(rng, rank);
            let p = broadcast_partner(&s, rng);
            let (a, b) = if rng.random_bool(0.5) { (s.clone(), p) } else { (p, s.clone()) };
            let op = name.to_string();
            case!(vec![nrm(rng, &a), nrm(rng, &b)], s, |g, v| match op.as_str() {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            })
        }
        "scale" => {
            let s = dims(rng, 2);
            let c: f64 = rng.random_range(-2.0..2.0);
            case!(vec![nrm(rng, &s)], s, |g, v| Ok::<_, mogle::Error>(g.scale(v[0], c)))
        }
        "softmax" => {
            let s = dims(rng, 3);
            let axis = rng.random_range(0..3);
            case!(vec![nrm(rng, &s)], s, |g, v| g.softmax(v[0], axis))
        }
        "layer_norm" => {
            let (n, d) = (rng.random_range(1..=4), rng.random_range(3..=6));
            // rows with near-zero spread make central differences ill-conditioned
            let x = loop {
                let x = nrm(rng, &[n, d]);
                let spread = x.data().chunks(d).map(|r| {
                    let m = r.iter().sum::<f64>() / d as f64;
                    r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64
                });
                if spread.fold(f64::MAX, f64::min) > 0.1 {
                    break x;
                }
            };
            case!(vec![x, nrm(rng, &[d]), nrm(rng, &[d])], [n, d], |g, v| g.layer_norm(v[0], v[1], v[2]))
        }
        "gelu" => {
            let s = dims(rng, 2);
            case!(vec![nrm(rng, &s)], s, |g, v| Ok::<_, mogle::Error>(g.gelu(v[0])))
        }
        "reshape" => {
            let (a, b, c) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
            case!(vec![nrm(rng, &[a, b, c])], [a * b, c], |g, v| g.reshape(v[0], &[a * b, c]))
        }
        "permute" => {
            let s = dims(rng, 3);
            let mut perm = vec![0, 1, 2];
            perm.swap(0, rng.random_range(0..3));
            perm.swap(1, 2);
            let out: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
            case!(vec![nrm(rng, &s)], out, |g, v| g.permute(v[0], &perm))
        }
        "transpose" => {
            let s = dims(rng, 3);
            let (d0, d1) = (rng.random_range(0..3), rng.random_range(0..3));
            let mut out = s.clone();
            out.swap(d0, d1);
            case!(vec![nrm(rng, &s)], out, |g, v| g.transpose(v[0], d0, d1))
        }
        "concat" => {
            let s = dims(rng, 3);
            let axis = rng.random_range(0..3);
            let parts = rng.random_range(2..=3);
            let mut inputs = Vec::new();
            let mut out = s.clone();
            out[axis] = 0;
            for _ in 0..parts {
                let mut p = s.clone();
                p[axis] = rng.random_range(1..=3);
                out[axis] += p[axis];
                inputs.push(normal(&p, 1.0, rng));
            }
            case!(inputs, out, |g, v| g.concat(v, axis))
        }
        "slice" => {
            let s: Vec<usize> = (0..3).map(|_| rng.random_range(2..=5)).collect();
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..s[axis] - 1);
            let end = rng.random_range(start + 1..=s[axis]);
            let mut out = s.clone();
            out[axis] = end - start;
            case!(vec![nrm(rng, &s)], out, |g, v| g.slice(v[0], axis, start, end))
        }
        "gather" => {
            let (vocab, w) = (rng.random_range(2..=6), rng.random_range(1..=4));
            let ids: Vec<usize> = (0..rng.random_range(1..=7)).map(|_| rng.random_range(0..vocab)).collect();
            let n = ids.len();
            case!(vec![nrm(rng, &[vocab, w])], [n, w], |g, v| g.gather(v[0], &ids))
        }
        "sum" | "mean" => {
            let s = dims(rng, 3);
            let axis = [None, Some(0), Some(1), Some(2)].choose(rng).copied().flatten();
            let out: Vec<usize> = match axis {
                None => vec![],
                Some(a) => s.iter().enumerate().filter(|&(i, _)| i != a).map(|(_, &d)| d).collect(),
            };
            let mean = name == "mean";
            case!(vec![nrm(rng, &s)], out, |g, v| if mean { g.mean(v[0], axis) } else { g.sum(v[0], axis) })
        }
        "mse" => {
            let s = dims(rng, 2);
            case!(vec![nrm(rng, &s), nrm(rng, &s)], [], |g, v| g.mse(v[0], v[1]))
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// Deterministic projection weights tied to the instance inputs.
fn rng_from(inputs: &[Tensor<f64>]) -> ChaCha8Rng {
    let seed = inputs
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0u64, |h, x| h.rotate_left(7) ^ x.to_bits());
    ChaCha8Rng::seed_from_u64(seed)
}

pub const GRAPH_OPS: [&str; 20] = [
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "scale",
    "softmax",
    "layer_norm",
    "gelu",
    "reshape",
    "permute",
    "transpose",
    "concat",
    "slice",
    "gather",
    "sum",
    "mean",
    "mse",
    "mlp3",
    "time_embedder",
];

/// Worst relative error of an operation over `instances` random cases.
pub fn op_gradient_error(name: &str, instances: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let err = match name {
            "mlp3" => mlp3_error(&mut r)?,
            "time_embedder" => time_embedder_error(&mut r)?,
            _ => {
                let (inputs, f) = op_case(name, &mut r);
                gradcheck(&inputs, f)?
            }
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Random three-layer GELU MLP; all parameter gradients.
fn mlp3_error(r: &mut ChaCha8Rng) -> Result<f64> {
    use mogle::nn::{Init, Linear};
    let widths: Vec<usize> = (0..4).map(|_| r.random_range(2..=6)).collect();
    let mut store = ParamStore::<f32>::new();
    let layers: Vec<Linear> = (0..3)
        .map(|i| Linear::new(&mut store, &format!("l{i}"), widths[i], widths[i + 1], true, Init::FanIn, r))
        .collect::<Result<_>>()?;
    let mut store = store.cast::<f64>();
    randomize_store(&mut store, 0.5, r);
    let n = r.random_range(1..=4);
    let x = normal(&[n, widths[0]], 1.0, r);
    let w = normal(&[n, widths[3]], 1.0, r);
    let ids: Vec<ParamId> = store.ids().collect();
    gradcheck_params(&store, &ids, usize::MAX, r, |g, s| {
        let mut h = g.constant(x.clone());
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(g, s, h)?;
            if i < 2 {
                h = g.gelu(h);
            }
        }
        project(g, h, &w)
    })
}

fn time_embedder_error(r: &mut ChaCha8Rng) -> Result<f64> {
    use mogle::nn::TimeEmbedder;
    let d = 2 * r.random_range(1..=4);
    let mut store = ParamStore::<f32>::new();
    let te = TimeEmbedder::new(&mut store, "time", d, 1000, r)?;
    let store = store.cast::<f64>();
    let ts: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..=1000)).collect();
    let w = normal(&[ts.len(), d], 1.0, r);
    let ids: Vec<ParamId> = store.ids().collect();
    gradcheck_params(&store, &ids, usize::MAX, r, |g, s| {
        let e = te.forward(g, s, &ts)?;
        project(g, e, &w)
    })
}

pub fn randomize_store(store: &mut ParamStore<f64>, std: f64, r: &mut impl Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = normal(&shape, std, r);
    }
}

/// Tiny composed denoiser (one block, LoRA on attention, full expert
/// mixture) with every parameter randomised and trainable; all parameter
/// gradients of a projected noise prediction, sampled per tensor.
pub fn composed_denoiser_error(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let cfg = DenoiserConfig {
        blocks: 1,
        dim: 12,
        heads: 2,
        image_tokens: 4,
        prompt_tokens: PROMPT_LEN,
        vocab: VOCAB_SIZE,
        mlp_ratio: 2,
        max_t: 1000,
    };
    let mut store = ParamStore::<f32>::new();
    let mut den = Denoiser::new(&mut store, cfg.clone(), &mut r)?;
    den.attach_lora(&mut store, 2, 4.0, &mut r)?;
    let n = 4;
    let mix = Mogle::new(&mut store, MogleConfig::default(), n, cfg.dim, cfg.max_t, &mut r)?;
    let mut store = store.cast::<f64>();
    store.set_all_trainable(true);
    randomize_store(&mut store, 0.3, &mut r);
    let (b, l, d) = (2, cfg.image_tokens, cfg.dim);
    let z = normal(&[b, l, d], 1.0, &mut r);
    let masks = normal(&[b, n + 1, l, d], 1.0, &mut r);
    let ts: Vec<usize> = (0..b).map(|_| r.random_range(1..=cfg.max_t)).collect();
    let prompts = vec![PromptTokens::new([1, 8, 14, 19, 22, 27])?, PromptTokens::NULL];
    let w = normal(&[b, l, d], 1.0, &mut r);
    let ids: Vec<ParamId> = store.ids().collect();
    gradcheck_params(&store, &ids, 3, &mut r, |g, s| {
        let zv = g.constant(z.clone());
        let mv = g.constant(masks.clone());
        let cond = mix.forward(g, s, mv, zv, &ts)?.cond;
        let p = den.embed_prompt(g, s, &prompts)?;
        let out = den.predict_noise(g, s, zv, &ts, p, cond)?;
        project(g, out, &w)
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// eigenvalues and column eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), v)
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
}

/// PSD square root through the Jacobi oracle, negative eigenvalues clamped.
pub fn sqrt_psd(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let sym: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.5 * (a[i][j] + a[j][i])).collect()).collect();
    let (vals, vecs) = jacobi_eigen(&sym);
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k]).sum()).collect())
        .collect()
}

/// Fréchet distance computed independently of the library.
pub fn frechet_oracle(mu_a: &[f64], cov_a: &[Vec<f64>], mu_b: &[f64], cov_b: &[Vec<f64>]) -> f64 {
    let n = mu_a.len();
    let mean: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b).powi(2)).sum();
    let ra = sqrt_psd(cov_a);
    let inner = matmul(&matmul(&ra, cov_b), &ra);
    let root = sqrt_psd(&inner);
    let tr = |m: &[Vec<f64>]| (0..n).map(|i| m[i][i]).sum::<f64>();
    mean + tr(cov_a) + tr(cov_b) - 2.0 * tr(&root)
}

/// Unbiased polynomial-kernel MMD² × 1000 by explicit double sums.
pub fn kid_oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let d = x[0].len() as f64;
    let k = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3);
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += k(&x[i], &x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += k(&y[i], &y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for a in x {
        for b in y {
            kxy += k(a, b);
        }
    }
    1000.0 * (kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}
