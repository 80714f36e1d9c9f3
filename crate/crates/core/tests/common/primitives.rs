//! Every graph primitive paired with an independent double-precision oracle.

use mixquant::tensor::{Graph, Tensor, Var};
use mixquant::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
pub type Oracle = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    pub oracle: Oracle,
}

fn case(
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    oracle: impl Fn(&[Vec<f64>]) -> Vec<f64> + 'static,
) -> Case {
    Case {
        name,
        shapes,
        build: Box::new(build),
        oracle: Box::new(oracle),
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn softmax_rows(x: &[f64], cols: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (row, o)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let len = if causal { (r + 1).min(cols) } else { cols };
        let max = row[..len].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row[..len].iter().map(|v| (v - max).exp()).sum();
        for j in 0..len {
            o[j] = (row[j] - max).exp() / total;
        }
    }
    out
}

pub fn cases() -> Vec<Case> {
    vec![
        case(
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            |g, v| g.matmul(v[0], v[1]),
            |x| matmul(&x[0], &x[1], 3, 4, 2),
        ),
        case(
            "transpose",
            vec![vec![2, 3]],
            |g, v| g.transpose(v[0]),
            |x| (0..3).flat_map(|j| (0..2).map(move |i| (i, j))).map(|(i, j)| x[0][i * 3 + j]).collect(),
        ),
        case(
            "add",
            vec![vec![2, 3], vec![2, 3]],
            |g, v| g.add(v[0], v[1]),
            |x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
        ),
        case(
            "add_row",
            vec![vec![3, 2], vec![2]],
            |g, v| g.add_row(v[0], v[1]),
            |x| x[0].iter().enumerate().map(|(i, a)| a + x[1][i % 2]).collect(),
        ),
        case(
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            |g, v| g.mul(v[0], v[1]),
            |x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
        ),
        case(
            "scale",
            vec![vec![5]],
            |g, v| g.scale(v[0], 2.5),
            |x| x[0].iter().map(|a| 2.5 * a).collect(),
        ),
        case(
            "scale_by",
            vec![vec![2, 2], vec![1]],
            |g, v| g.scale_by(v[0], v[1]),
            |x| x[0].iter().map(|a| a * x[1][0]).collect(),
        ),
        case(
            "concat",
            vec![vec![2, 2], vec![2, 3]],
            |g, v| g.concat(&[v[0], v[1]]),
            |x| {
                (0..2)
                    .flat_map(|r| x[0][r * 2..r * 2 + 2].iter().chain(&x[1][r * 3..r * 3 + 3]).copied().collect::<Vec<_>>())
                    .collect()
            },
        ),
        case(
            "slice_cols",
            vec![vec![3, 5]],
            |g, v| g.slice_cols(v[0], 1, 3),
            |x| (0..3).flat_map(|r| x[0][r * 5 + 1..r * 5 + 4].to_vec()).collect(),
        ),
        case(
            "layer_norm",
            vec![vec![3, 4], vec![4], vec![4]],
            |g, v| g.layer_norm(v[0], v[1], v[2]),
            |x| {
                x[0].chunks(4)
                    .flat_map(|row| {
                        let mu = row.iter().sum::<f64>() / 4.0;
                        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
                        let inv = 1.0 / (var + 1e-5).sqrt();
                        row.iter()
                            .enumerate()
                            .map(|(j, v)| (v - mu) * inv * x[1][j] + x[2][j])
                            .collect::<Vec<_>>()
                    })
                    .collect()
            },
        ),
        case(
            "gelu",
            vec![vec![7]],
            |g, v| g.gelu(v[0]),
            |x| x[0].iter().map(|&v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()))).collect(),
        ),
        case(
            "softmax",
            vec![vec![3, 4]],
            |g, v| g.softmax(v[0], false),
            |x| softmax_rows(&x[0], 4, false),
        ),
        case(
            "softmax_causal",
            vec![vec![4, 4]],
            |g, v| g.softmax(v[0], true),
            |x| softmax_rows(&x[0], 4, true),
        ),
        case(
            "cross_entropy",
            vec![vec![3, 5]],
            |g, v| g.cross_entropy(v[0], &[4, 0, 2]),
            |x| {
                let p = softmax_rows(&x[0], 5, false);
                [4usize, 0, 2].iter().enumerate().map(|(r, &t)| -p[r * 5 + t].ln()).collect()
            },
        ),
        case(
            "gather_rows",
            vec![vec![4, 3]],
            |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]),
            |x| [2usize, 0, 2, 3].iter().flat_map(|&i| x[0][i * 3..i * 3 + 3].to_vec()).collect(),
        ),
        case(
            "sum",
            vec![vec![2, 3]],
            |g, v| g.sum(v[0]),
            |x| vec![x[0].iter().sum()],
        ),
        case(
            "mean",
            vec![vec![2, 3]],
            |g, v| g.mean(v[0]),
            |x| vec![x[0].iter().sum::<f64>() / 6.0],
        ),
        case(
            "element",
            vec![vec![2, 3]],
            |g, v| g.element(v[0], 4),
            |x| vec![x[0][4]],
        ),
    ]
}

/// `Σ c·f(x)` through the oracle.
fn weighted(oracle: &Oracle, inputs: &[Vec<f64>], c: &[f64]) -> f64 {
    oracle(inputs).iter().zip(c).map(|(a, b)| a * b).sum()
}

pub fn relative_error(c: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = c
        .shapes
        .iter()
        .map(|s| Tensor::uniform(s, 1.5, &mut rng))
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (c.build)(&mut g, &vars).unwrap();
    let n_out = g.value(out).numel();
    let weights: Vec<f32> = (0..n_out).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let w = g.constant(Tensor::new(g.value(out).shape().to_vec(), weights.clone()).unwrap());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.gradient(loss, &vars).unwrap();

    let c64: Vec<f64> = weights.iter().map(|&v| f64::from(v)).collect();
    let x64: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let forward = (c.oracle)(&x64);
    let value: Vec<f64> = g.value(out).data().iter().map(|&v| f64::from(v)).collect();
    for (a, b) in value.iter().zip(&forward) {
        assert!((a - b).abs() < 1e-5, "{}: forward {a} vs oracle {b}", c.name);
    }

    let (mut diff, mut norm) = (0.0, 0.0);
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..x64[i].len() {
            let mut plus = x64.clone();
            let mut minus = x64.clone();
            plus[i][j] += H;
            minus[i][j] -= H;
            let fd = (weighted(&c.oracle, &plus, &c64) - weighted(&c.oracle, &minus, &c64)) / (2.0 * H);
            diff += (f64::from(grad.data()[j]) - fd).powi(2);
            norm += fd * fd;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

