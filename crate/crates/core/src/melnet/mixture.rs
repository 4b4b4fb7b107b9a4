use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Per-bin Gaussian mixtures over a `[batch, time, freq]` grid, `k`
/// components each, stored bin-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub shape: [usize; 3],
    pub k: usize,
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl MixtureParams {
    /// Softmax of `logits` and `exp` of `log_sigma`, row by row.
    pub fn from_raw(shape: [usize; 3], k: usize, logits: &[f64], mu: &[f64], log_sigma: &[f64]) -> Self {
        let mut pi = Vec::with_capacity(logits.len());
        for row in logits.chunks(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            pi.extend(e.iter().map(|v| v / s));
        }
        Self {
            shape,
            k,
            pi,
            mu: mu.to_vec(),
            sigma: log_sigma.iter().map(|v| v.exp()).collect(),
        }
    }

    pub fn bins(&self) -> usize {
        self.shape.iter().product()
    }

    fn offset(&self, b: usize, i: usize, j: usize) -> usize {
        ((b * self.shape[1] + i) * self.shape[2] + j) * self.k
    }

    /// `(pi, mu, sigma)` at one bin.
    pub fn bin(&self, b: usize, i: usize, j: usize) -> (&[f64], &[f64], &[f64]) {
        let o = self.offset(b, i, j);
        let r = o..o + self.k;
        (&self.pi[r.clone()], &self.mu[r.clone()], &self.sigma[r])
    }

    /// Mixture mean `Σ πₖμₖ` at every bin.
    pub fn mean(&self) -> Array3<f64> {
        let [b, t, f] = self.shape;
        Array3::from_shape_fn((b, t, f), |(b, i, j)| {
            let (pi, mu, _) = self.bin(b, i, j);
            pi.iter().zip(mu).map(|(p, m)| p * m).sum()
        })
    }
}

/// Ancestral draw: a component from `pi`, then a normal sample from it.
pub fn sample_bin<R: Rng + ?Sized>(pi: &[f64], mu: &[f64], sigma: &[f64], rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut c = pi.len() - 1;
    for (i, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            c = i;
            break;
        }
    }
    let z: f64 = StandardNormal.sample(rng);
    mu[c] + sigma[c] * z
}

/// Mean NLL of `grid[batch, time, freq]` under one maximum-likelihood
/// Gaussian per frequency band, fitted to that same grid.
pub fn gaussian_baseline_nll(grid: &Array3<f64>) -> f64 {
    let (b, t, f) = grid.dim();
    let n = (b * t) as f64;
    let mut total = 0.0;
    for j in 0..f {
        let col = grid.slice(ndarray::s![.., .., j]);
        let mean = col.sum() / n;
        let var = col.mapv(|v| (v - mean).powi(2)).sum() / n;
        total += 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + 1.0);
    }
    total / f as f64
}
