//! Synthetic test beds: diagonal quadratics and consistent least squares.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_call, Problem, ProblemError};

/// Components `f_l(x) = 1/2 (x - c)^T D (x - c) + xi_l^T x` with diagonal
/// `D` and zero-mean offsets `xi_l`, so the full objective is the plain
/// quadratic and a single-sample gradient has variance
/// `(1/m) sum_l ||xi_l||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    diag: Vec<f64>,
    center: Vec<f64>,
    offsets: Vec<Vec<f64>>,
}

impl QuadraticProblem {
    pub fn new(diag: Vec<f64>, center: Vec<f64>) -> Result<Self, ProblemError> {
        if diag.len() != center.len() {
            return Err(ProblemError::DimensionMismatch { expected: diag.len(), actual: center.len() });
        }
        if diag.is_empty() || diag.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(ProblemError::InvalidInput("diagonal must be non-empty, finite and >= 0".into()));
        }
        Ok(Self { diag, center, offsets: Vec::new() })
    }

    /// Adds `m` Gaussian offsets, recentred to mean zero and rescaled so the
    /// single-sample gradient variance equals `sigma^2` exactly.
    pub fn with_noise(mut self, m: usize, sigma: f64, seed: u64) -> Result<Self, ProblemError> {
        if m < 2 || !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(ProblemError::InvalidInput(format!("noise needs m >= 2 and sigma >= 0, got m = {m}, sigma = {sigma}")));
        }
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offsets: Vec<Vec<f64>> =
            (0..m).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        for j in 0..d {
            let mean = offsets.iter().map(|o| o[j]).sum::<f64>() / m as f64;
            offsets.iter_mut().for_each(|o| o[j] -= mean);
        }
        let var = offsets.iter().flatten().map(|v| v * v).sum::<f64>() / m as f64;
        let scale = if var > 0.0 { sigma / var.sqrt() } else { 0.0 };
        offsets.iter_mut().flatten().for_each(|v| *v *= scale);
        self.offsets = offsets;
        Ok(self)
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn mu(&self) -> f64 {
        self.diag.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Variance of a single-sample gradient around the full gradient.
    pub fn noise_variance(&self) -> f64 {
        if self.offsets.is_empty() {
            return 0.0;
        }
        self.offsets.iter().flatten().map(|v| v * v).sum::<f64>() / self.offsets.len() as f64
    }
}

/// Diagonal quadratic `1/2 x^T D x` with spectrum spaced linearly in
/// `[1/kappa, 1]`, so `L = 1`, `mu = 1/kappa` and the optimum is 0.
pub fn make_quadratic(d: usize, kappa: f64, noise: Option<(usize, f64)>, seed: u64) -> Result<QuadraticProblem, ProblemError> {
    if d == 0 || !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(ProblemError::InvalidInput(format!("need d >= 1 and kappa >= 1, got d = {d}, kappa = {kappa}")));
    }
    let mu = 1.0 / kappa;
    let diag = (0..d)
        .map(|j| if d == 1 { 1.0 } else { mu + (1.0 - mu) * j as f64 / (d - 1) as f64 })
        .collect();
    let q = QuadraticProblem::new(diag, vec![0.0; d])?;
    match noise {
        Some((m, sigma)) => q.with_noise(m, sigma, seed),
        None => Ok(q),
    }
}

impl Problem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn num_samples(&self) -> usize {
        self.offsets.len().max(1)
    }

    fn value_grad(&self, x: &[f64], batch: Option<&[usize]>, grad: &mut [f64]) -> Result<f64, ProblemError> {
        check_call(self.dim(), self.num_samples(), x, batch, grad)?;
        let mut value = 0.0;
        for j in 0..x.len() {
            let r = x[j] - self.center[j];
            grad[j] = self.diag[j] * r;
            value += 0.5 * self.diag[j] * r * r;
        }
        if let (Some(b), false) = (batch, self.offsets.is_empty()) {
            let w = 1.0 / b.len() as f64;
            for &l in b {
                for j in 0..x.len() {
                    grad[j] += w * self.offsets[l][j];
                    value += w * self.offsets[l][j] * x[j];
                }
            }
        }
        Ok(value)
    }

    fn smoothness(&self) -> f64 {
        self.diag.iter().copied().fold(0.0, f64::max)
    }
}

/// Dense least squares `(1/m) sum_l 1/2 (a_l^T x - b_l)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    rows: Vec<Vec<f64>>,
    targets: Vec<f64>,
    smoothness: f64,
}

impl LeastSquares {
    pub fn new(rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self, ProblemError> {
        if rows.is_empty() || rows.len() != targets.len() {
            return Err(ProblemError::InvalidInput("need one target per row and at least one row".into()));
        }
        let d = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(ProblemError::DimensionMismatch { expected: d, actual: r.len() });
        }
        // Frobenius bound on the Hessian's largest eigenvalue.
        let smoothness = rows.iter().flatten().map(|v| v * v).sum::<f64>() / rows.len() as f64;
        Ok(Self { rows, targets, smoothness })
    }
}

impl Problem for LeastSquares {
    fn dim(&self) -> usize {
        self.rows[0].len()
    }

    fn num_samples(&self) -> usize {
        self.rows.len()
    }

    fn value_grad(&self, x: &[f64], batch: Option<&[usize]>, grad: &mut [f64]) -> Result<f64, ProblemError> {
        check_call(self.dim(), self.num_samples(), x, batch, grad)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let all: Vec<usize>;
        let idx = match batch {
            Some(b) => b,
            None => {
                all = (0..self.rows.len()).collect();
                &all
            }
        };
        let w = 1.0 / idx.len() as f64;
        let mut value = 0.0;
        for &l in idx {
            let a = &self.rows[l];
            let r = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() - self.targets[l];
            value += 0.5 * r * r;
            for (g, ai) in grad.iter_mut().zip(a) {
                *g += w * r * ai;
            }
        }
        Ok(w * value)
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }
}

/// Consistent, ill-conditioned least squares with known spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSpec {
    pub dim: usize,
    pub workers: usize,
    /// Hessian eigenvalues are `j^-spectrum_decay`, `j = 1..=dim`.
    pub spectrum_decay: f64,
    /// Squared coordinates of `x^0 - x*` in the eigenbasis are `j^-init_decay`.
    pub init_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LeastSquaresInstance {
    pub shards: Vec<LeastSquares>,
    pub x_star: Vec<f64>,
    /// Largest eigenvalue of the global Hessian.
    pub smoothness: f64,
}

/// Builds `N = dim` rows `sqrt(N lambda_j) q_j^T` from a random orthonormal
/// basis, so the averaged Hessian is `sum_j lambda_j q_j q_j^T`, and targets
/// `b = A x*` so every worker's loss vanishes at `x*` (interpolation). Rows
/// are shuffled before the contiguous split. Starting from `x^0 = 0`.
pub fn make_least_squares(spec: &LeastSquaresSpec) -> Result<LeastSquaresInstance, ProblemError> {
    let d = spec.dim;
    let n = spec.workers;
    if d == 0 || n == 0 || !d.is_multiple_of(n) {
        return Err(ProblemError::InvalidInput(format!("dim {d} must be a positive multiple of workers {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = random_orthonormal(d, &mut rng);
    let lambdas: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-spec.spectrum_decay)).collect();
    let coeffs: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-spec.init_decay / 2.0)).collect();
    let mut x_star = vec![0.0; d];
    for (q, c) in basis.iter().zip(&coeffs) {
        for (x, qi) in x_star.iter_mut().zip(q) {
            *x += c * qi;
        }
    }
    let nrows = d as f64;
    let mut rows: Vec<(Vec<f64>, f64)> = basis
        .iter()
        .zip(&lambdas)
        .map(|(q, &lam)| {
            let s = (nrows * lam).sqrt();
            let a: Vec<f64> = q.iter().map(|v| s * v).collect();
            let b = a.iter().zip(&x_star).map(|(ai, xi)| ai * xi).sum();
            (a, b)
        })
        .collect();
    rows.shuffle(&mut rng);
    let m = d / n;
    let shards = rows
        .chunks(m)
        .map(|chunk| LeastSquares::new(chunk.iter().map(|r| r.0.clone()).collect(), chunk.iter().map(|r| r.1).collect()))
        .collect::<Result<_, _>>()?;
    Ok(LeastSquaresInstance { shards, x_star, smoothness: lambdas[0] })
}

/// Rows of a Haar-like random orthogonal matrix via modified Gram-Schmidt
/// with one reorthogonalization pass.
fn random_orthonormal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for q in &basis {
                let p: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= p * qi);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_gradient() {
        let q = make_quadratic(1, 1.0, None, 0).unwrap();
        let mut g = [0.0];
        q.value_grad(&[3.0], None, &mut g).unwrap();
        assert_eq!(g, [3.0]);
    }

    #[test]
    fn condition_number_by_construction() {
        let q = make_quadratic(10, 50.0, None, 0).unwrap();
        assert!((q.smoothness() / q.mu() - 50.0).abs() < 1e-12);
        assert!(make_quadratic(3, 0.5, None, 0).is_err());
    }

    #[test]
    fn gd_halves_within_bound() {
        let kappa = 20.0;
        let q = make_quadratic(5, kappa, None, 0).unwrap();
        let eta = 1.0 / q.smoothness();
        let every = (kappa * std::f64::consts::LN_2).ceil() as usize;
        let mut x = vec![1.0; 5];
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut g = vec![0.0; 5];
        for _ in 0..5 {
            let start = norm(&x);
            for _ in 0..every {
                q.value_grad(&x.clone(), None, &mut g).unwrap();
                x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= eta * gi);
            }
            assert!(norm(&x) <= 0.5 * start);
        }
    }

    #[test]
    fn noise_variance_is_exact() {
        let q = make_quadratic(4, 2.0, Some((8, 0.3)), 7).unwrap();
        assert!((q.noise_variance() - 0.09).abs() < 1e-12);
        let x = [0.5, -1.0, 2.0, 0.0];
        let mut full = [0.0; 4];
        q.value_grad(&x, None, &mut full).unwrap();
        let mut mean = [0.0; 4];
        let mut g = [0.0; 4];
        for l in 0..8 {
            q.value_grad(&x, Some(&[l]), &mut g).unwrap();
            mean.iter_mut().zip(&g).for_each(|(m, gi)| *m += gi / 8.0);
        }
        for (a, b) in mean.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn least_squares_interpolates() {
        let spec = LeastSquaresSpec { dim: 12, workers: 3, spectrum_decay: 2.0, init_decay: 1.0, seed: 1 };
        let inst = make_least_squares(&spec).unwrap();
        assert_eq!(inst.shards.len(), 3);
        let mut g = vec![0.0; 12];
        for s in &inst.shards {
            let v = s.value_grad(&inst.x_star, None, &mut g).unwrap();
            assert!(v < 1e-25);
            assert!(g.iter().all(|x| x.abs() < 1e-12));
        }
        // f(0) = 1/2 sum_j lambda_j c_j^2
        let f0: f64 = inst.shards.iter().map(|s| s.value(&[0.0; 12]).unwrap()).sum::<f64>() / 3.0;
        let want: f64 = (1..=12).map(|j| 0.5 * (j as f64).powi(-2) * (j as f64).powi(-1)).sum();
        assert!((f0 - want).abs() < 1e-12);
        assert_eq!(inst.smoothness, 1.0);
    }
}
