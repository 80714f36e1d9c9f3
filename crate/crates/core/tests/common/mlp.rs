//! Small tanh regressor with hand-written gradients and a dense Hessian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One-hidden-layer tanh regressor with 26 parameters, in double precision.
pub struct Mlp {
    xs: Vec<[f64; 3]>,
    ys: Vec<f64>,
}

pub const HIDDEN: usize = 5;
pub const N_PARAMS: usize = 3 * HIDDEN + HIDDEN + HIDDEN + 1;

impl Mlp {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<[f64; 3]> = (0..8)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let ys = xs.iter().map(|x| (x[0] - 2.0 * x[1] * x[2]).sin()).collect();
        Mlp { xs, ys }
    }

    fn hidden(&self, theta: &[f64], x: &[f64; 3]) -> Vec<f64> {
        (0..HIDDEN)
            .map(|j| {
                let z = (0..3).map(|i| theta[j * 3 + i] * x[i]).sum::<f64>() + theta[15 + j];
                z.tanh()
            })
            .collect()
    }

    fn output(&self, theta: &[f64], h: &[f64]) -> f64 {
        (0..HIDDEN).map(|j| theta[20 + j] * h[j]).sum::<f64>() + theta[25]
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.xs.len() as f64;
        self.xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| {
                let h = self.hidden(theta, x);
                0.5 * (self.output(theta, &h) - y).powi(2)
            })
            .sum::<f64>()
            / n
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.xs.len() as f64;
        let mut g = vec![0.0; N_PARAMS];
        for (x, y) in self.xs.iter().zip(&self.ys) {
            let h = self.hidden(theta, x);
            let dy = (self.output(theta, &h) - y) / n;
            g[25] += dy;
            for j in 0..HIDDEN {
                g[20 + j] += dy * h[j];
                let dz = dy * theta[20 + j] * (1.0 - h[j] * h[j]);
                g[15 + j] += dz;
                for i in 0..3 {
                    g[j * 3 + i] += dz * x[i];
                }
            }
        }
        g
    }

    /// Dense Hessian from second differences of the loss alone.
    pub fn hessian(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let h = 1e-4;
        let at = |di: usize, si: f64, dj: usize, sj: f64| {
            let mut t = theta.to_vec();
            t[di] += si * h;
            t[dj] += sj * h;
            self.loss(&t)
        };
        (0..N_PARAMS)
            .map(|i| {
                (0..N_PARAMS)
                    .map(|j| (at(i, 1.0, j, 1.0) - at(i, 1.0, j, -1.0) - at(i, -1.0, j, 1.0) + at(i, -1.0, j, -1.0)) / (4.0 * h * h))
                    .collect()
            })
            .collect()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
