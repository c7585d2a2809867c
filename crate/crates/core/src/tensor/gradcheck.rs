//! Central finite-difference gradient checking, plus a suite of random
//! instances covering every differentiable op.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AttnMask, Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Below this magnitude errors are measured absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Fixed projection weights so a tensor output reduces to a scalar whose
/// gradient is not uniform.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.25).collect()
}

fn scalar_loss<F>(g: &mut Graph, vars: &[Var], build: &F) -> Result<Var, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let out = build(g, vars)?;
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::new(shape.clone(), projection(shape.iter().product()))?);
    let weighted = g.mul(out, w)?;
    Ok(g.sum(weighted))
}

/// Compares reverse-mode gradients of `sum(build(inputs) * w)` against
/// central differences with step `h` for every input element.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = scalar_loss(&mut g, &vars, &build)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = scalar_loss(&mut g, &vars, &build)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        for e in 0..inputs[k].numel() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[e];
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

pub const SUITE_STEP: f64 = 1e-5;

/// One random instance of an op check.
pub type OpInstance = fn(&mut ChaCha8Rng) -> Result<GradCheck, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches data")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5))
}

const H: f64 = SUITE_STEP;

fn matmul(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, k, n) = dims(rng);
    check_gradients(&[randn(rng, &[m, k]), randn(rng, &[k, n])], H, |g, v| g.matmul(v[0], v[1]))
}

fn add(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    check_gradients(&[randn(rng, &[m, n]), randn(rng, &[m, n])], H, |g, v| g.add(v[0], v[1]))
}

fn mul(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    check_gradients(&[randn(rng, &[m, n]), randn(rng, &[m, n])], H, |g, v| g.mul(v[0], v[1]))
}

/// One input feeding several ops, so gradients must accumulate.
fn shared_input(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    check_gradients(&[randn(rng, &[m, n])], H, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.add(sq, v[0])
    })
}

fn scale(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    let f: f64 = rng.gen_range(-3.0..3.0);
    check_gradients(&[randn(rng, &[m, n])], H, move |g, v| Ok(g.scale(v[0], f)))
}

fn transpose(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    check_gradients(&[randn(rng, &[m, n])], H, |g, v| g.transpose(v[0]))
}

fn reshape(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    check_gradients(&[randn(rng, &[m, n])], H, move |g, v| g.reshape(v[0], vec![n, m]))
}

fn concat_last_dim(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, a, b) = dims(rng);
    check_gradients(&[randn(rng, &[m, a]), randn(rng, &[m, b])], H, |g, v| {
        g.concat_last_dim(&[v[0], v[1], v[0]])
    })
}

fn slice_last_dim(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    let start = rng.gen_range(0..n);
    let len = rng.gen_range(1..=n - start);
    check_gradients(&[randn(rng, &[m, n])], H, move |g, v| g.slice_last_dim(v[0], start, len))
}

fn embedding_lookup(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (v, d, _) = dims(rng);
    let ids: Vec<u32> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..v as u32)).collect();
    check_gradients(&[randn(rng, &[v, d])], H, move |g, vars| g.embedding_lookup(vars[0], &ids))
}

fn linear(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, k, n) = dims(rng);
    check_gradients(&[randn(rng, &[m, k]), randn(rng, &[k, n]), randn(rng, &[n])], H, |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    })
}

fn layernorm(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, _, _) = dims(rng);
    let n = rng.gen_range(2..7);
    check_gradients(&[randn(rng, &[m, n]), randn(rng, &[n]), randn(rng, &[n])], H, |g, v| {
        g.layernorm(v[0], v[1], v[2])
    })
}

fn gelu(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    check_gradients(&[randn(rng, &[m, n])], H, |g, v| Ok(g.gelu(v[0])))
}

/// Dropout with a fixed mask seed is a fixed linear map.
fn dropout(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    let seed: u64 = rng.gen();
    check_gradients(&[randn(rng, &[m, n])], H, move |g, v| {
        g.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(seed))
    })
}

fn masked_softmax(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    let mut allow: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.6)).collect();
    for i in 0..m {
        allow[i * n + rng.gen_range(0..n)] = true;
    }
    let mask = Arc::new(AttnMask::new(m, n, allow)?);
    check_gradients(&[randn(rng, &[m, n])], H, move |g, v| g.masked_softmax(v[0], Some(mask.clone())))
}

fn softmax_unmasked(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    check_gradients(&[randn(rng, &[m, n])], H, |g, v| g.masked_softmax(v[0], None))
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    let targets: Vec<u32> = (0..m).map(|_| rng.gen_range(0..n as u32)).collect();
    let mut select: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.7)).collect();
    select[0] = true;
    check_gradients(&[randn(rng, &[m, n])], H, move |g, v| g.cross_entropy(v[0], &targets, &select))
}

fn bce_with_logits(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, _, _) = dims(rng);
    let labels: Vec<f64> = (0..m).map(|_| rng.gen_range(0..2) as f64).collect();
    let mut select: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.7)).collect();
    select[0] = true;
    check_gradients(&[randn(rng, &[m, 1])], H, move |g, v| g.bce_with_logits(v[0], &labels, &select))
}

fn sum(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (m, n, _) = dims(rng);
    check_gradients(&[randn(rng, &[m, n])], H, |g, v| Ok(g.sum(v[0])))
}

/// One causal attention head built from the primitive ops.
fn attention_block(rng: &mut ChaCha8Rng) -> Result<GradCheck, TensorError> {
    let (n, d) = (rng.gen_range(1..5), rng.gen_range(2..5));
    let mask = Arc::new(AttnMask::from_fn(n, n, |i, j| j <= i));
    let inputs = [randn(rng, &[n, d]), randn(rng, &[d, d]), randn(rng, &[d, d])];
    check_gradients(&inputs, H, move |g: &mut Graph, v: &[Var]| {
        let q = g.matmul(v[0], v[1])?;
        let k = g.matmul(v[0], v[2])?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 0.5);
        let p = g.masked_softmax(s, Some(mask.clone()))?;
        g.matmul(p, v[0])
    })
}

/// Every differentiable op with its random-instance generator.
pub fn op_suite() -> Vec<(&'static str, OpInstance)> {
    vec![
        ("matmul", matmul),
        ("add", add),
        ("mul", mul),
        ("shared_input", shared_input),
        ("scale", scale),
        ("transpose", transpose),
        ("reshape", reshape),
        ("concat_last_dim", concat_last_dim),
        ("slice_last_dim", slice_last_dim),
        ("embedding_lookup", embedding_lookup),
        ("linear", linear),
        ("layernorm", layernorm),
        ("gelu", gelu),
        ("dropout", dropout),
        ("masked_softmax", masked_softmax),
        ("softmax_unmasked", softmax_unmasked),
        ("cross_entropy", cross_entropy),
        ("bce_with_logits", bce_with_logits),
        ("sum", sum),
        ("attention_block", attention_block),
    ]
}

/// Runs `instances` seeded instances of every op in the suite.
pub fn run_op_suite(instances: u64) -> Result<Vec<OpReport>, TensorError> {
    op_suite()
        .into_iter()
        .enumerate()
        .map(|(k, (op, instance))| {
            let mut worst: f64 = 0.0;
            for seed in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + k as u64);
                let r = instance(&mut rng)?;
                worst = worst.max(r.max_rel_err);
            }
            Ok(OpReport {
                op,
                instances: instances as usize,
                max_rel_err: worst,
            })
        })
        .collect()
}
