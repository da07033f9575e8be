//! High-accuracy reference optimum by gradient descent with backtracking,
//! cached on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};

use super::{Problem, ProblemError};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop once `||grad f||^2` is at most this.
    pub grad_tol_sq: f64,
    /// Maximum step halvings per iteration.
    pub max_halvings: u32,
    /// Consecutive accepted steps without decrease before giving up.
    pub max_stalls: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iters: 5000, grad_tol_sq: 1e-30, max_halvings: 60, max_stalls: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOptimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm_sq: f64,
    pub iterations: u64,
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Gradient descent from zero with an Armijo backtracking line search. The
/// trial step doubles after every accepted step. Once the predicted decrease
/// drops below what `f64` can resolve, steps are taken at the last accepted
/// stepsize without the sufficient-decrease test.
pub fn solve_reference_optimum(problem: &dyn Problem, opts: &SolverOptions) -> Result<ReferenceOptimum, ProblemError> {
    let d = problem.dim();
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut trial = vec![0.0; d];
    let mut f = problem.value_grad(&x, None, &mut g)?;
    let mut gsq = sq(&g);
    let mut step = 1.0 / problem.smoothness();
    let mut stalls = 0usize;
    let mut iterations = 0u64;

    while (iterations as usize) < opts.max_iters && gsq > opts.grad_tol_sq {
        let resolvable = 0.5 * step * gsq > 64.0 * f64::EPSILON * f.abs().max(f64::MIN_POSITIVE);
        let mut t = if resolvable { 2.0 * step } else { step };
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            for j in 0..d {
                trial[j] = x[j] - t * g[j];
            }
            let ft = problem.value(&trial)?;
            if !resolvable || ft <= f - 0.5 * t * gsq {
                accepted = ft.is_finite();
                if accepted {
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            debug!("line search exhausted at iteration {iterations}, ||g||^2 = {gsq:e}");
            break;
        }
        std::mem::swap(&mut x, &mut trial);
        let f_new = problem.value_grad(&x, None, &mut g)?;
        gsq = sq(&g);
        if resolvable && f_new >= f {
            stalls += 1;
            if stalls >= opts.max_stalls {
                return Err(ProblemError::SolverFailure(format!(
                    "objective did not decrease for {stalls} consecutive steps"
                )));
            }
        } else {
            stalls = 0;
        }
        f = f_new;
        step = t;
        iterations += 1;
    }
    info!("reference optimum: f* = {f:.17e}, ||grad||^2 = {gsq:e} after {iterations} iterations");
    Ok(ReferenceOptimum { x, f, grad_norm_sq: gsq, iterations })
}

fn cache_path(dir: &Path, key: &str, lambda: f64) -> PathBuf {
    dir.join(format!("{key}-{:016x}.opt", lambda.to_bits()))
}

/// Binary layout, little-endian: `d: u64 | x*: d f64 | f*: f64 |
/// ||grad||^2: f64 | iterations: u64`.
pub fn store_cached_optimum(dir: &Path, key: &str, lambda: f64, opt: &ReferenceOptimum) -> Result<PathBuf, ProblemError> {
    let io = |path: &Path, source| ProblemError::Io { path: path.display().to_string(), source };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let path = cache_path(dir, key, lambda);
    let mut buf = Vec::with_capacity(8 * (opt.x.len() + 4));
    buf.extend_from_slice(&(opt.x.len() as u64).to_le_bytes());
    for v in &opt.x {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&opt.f.to_le_bytes());
    buf.extend_from_slice(&opt.grad_norm_sq.to_le_bytes());
    buf.extend_from_slice(&opt.iterations.to_le_bytes());
    // Write to a temporary name first so a concurrent reader never sees a
    // partial file.
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(|e| io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
    Ok(path)
}

pub fn load_cached_optimum(dir: &Path, key: &str, lambda: f64) -> Result<Option<ReferenceOptimum>, ProblemError> {
    let path = cache_path(dir, key, lambda);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(ProblemError::Io { path: path.display().to_string(), source: e }),
    };
    let word = |i: usize| -> Option<[u8; 8]> { bytes.get(8 * i..8 * i + 8).map(|s| s.try_into().unwrap()) };
    let corrupt = || ProblemError::InvalidInput(format!("corrupt optimum cache {}", path.display()));
    let d = u64::from_le_bytes(word(0).ok_or_else(corrupt)?) as usize;
    if bytes.len() != 8 * (d + 4) {
        return Err(corrupt());
    }
    let f64_at = |i: usize| f64::from_le_bytes(word(i).unwrap());
    Ok(Some(ReferenceOptimum {
        x: (1..=d).map(f64_at).collect(),
        f: f64_at(d + 1),
        grad_norm_sq: f64_at(d + 2),
        iterations: u64::from_le_bytes(word(d + 3).unwrap()),
    }))
}

/// Loads the optimum for `(key, lambda)` from `cache_dir`, solving and
/// storing it on a miss.
pub fn reference_optimum(
    problem: &dyn Problem,
    key: &str,
    lambda: f64,
    cache_dir: Option<&Path>,
    opts: &SolverOptions,
) -> Result<ReferenceOptimum, ProblemError> {
    if let Some(dir) = cache_dir {
        if let Some(opt) = load_cached_optimum(dir, key, lambda)? {
            if opt.x.len() == problem.dim() {
                debug!("loaded cached optimum for {key}");
                return Ok(opt);
            }
        }
    }
    let opt = solve_reference_optimum(problem, opts)?;
    if let Some(dir) = cache_dir {
        store_cached_optimum(dir, key, lambda, &opt)?;
    }
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::QuadraticProblem;

    #[test]
    fn quadratic_converges_to_center() {
        let c = vec![1.5, -2.0, 0.25];
        let q = QuadraticProblem::new(vec![1.0; 3], c.clone()).unwrap();
        let opt = solve_reference_optimum(&q, &SolverOptions::default()).unwrap();
        for (a, b) in opt.x.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(opt.grad_norm_sq <= 1e-30 || opt.iterations == 5000);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let q = QuadraticProblem::new(vec![1.0, 1e-2, 3.0], vec![1.0, 1.0, 1.0]).unwrap();
        let opt = solve_reference_optimum(&q, &SolverOptions::default()).unwrap();
        assert!(opt.f < 1e-12, "{}", opt.f);
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let opt = ReferenceOptimum { x: vec![0.1, -3.0, f64::MIN_POSITIVE], f: 0.0379, grad_norm_sq: 1e-31, iterations: 17 };
        store_cached_optimum(dir.path(), "abc", 6e-4, &opt).unwrap();
        assert_eq!(load_cached_optimum(dir.path(), "abc", 6e-4).unwrap(), Some(opt));
        assert_eq!(load_cached_optimum(dir.path(), "abc", 5e-4).unwrap(), None);
    }
}
