//! Sparse inverse-covariance estimation under a block-Toeplitz constraint,
//! solved with ADMM.
//!
//! Minimises `-log det Θ + tr(S Θ) + λ Σ_{i≠j} |Θ_ij|` over symmetric
//! positive-definite `Θ` whose `(r, c)` block of size `m × m` depends only on
//! `r - c`: block `(r, c)` is `A^(r-c)` below the diagonal and its transpose
//! above, with `A^(0)` symmetric.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{weighted_moments, Matrix};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct GlassoProblem<T = f64> {
    pub empirical_covariance: Matrix<T>,
    pub sample_count: usize,
    pub lambda: T,
    pub window: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub penalty_rho: f64,
    pub max_iters: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            penalty_rho: 1.0,
            max_iters: 1000,
            abs_tol: 1e-6,
            rel_tol: 1e-5,
        }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_rho > 0.0) || !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(Error::Config("ADMM penalty and tolerances must be positive".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("ADMM needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GlassoSolution<T = f64> {
    pub theta: Matrix<T>,
    pub objective: T,
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: T,
    pub dual_residual: T,
    /// Residuals grew by more than 10× tolerance somewhere in the last ten iterations.
    pub oscillating: bool,
    /// Diagonal loading applied to a singular covariance.
    pub ridge: T,
}

/// Groups of matrix entries constrained to share one value.
#[derive(Clone, Debug)]
struct ToeplitzGroups {
    /// Group index of every entry (row-major).
    group_of: Vec<usize>,
    sizes: Vec<usize>,
    /// Whether the group lies on the main diagonal (unpenalised).
    diagonal: Vec<bool>,
}

impl ToeplitzGroups {
    fn new(m: usize, window: usize) -> Self {
        let d = m * window;
        let mut keys: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let mut group_of = Vec::with_capacity(d * d);
        let mut sizes = Vec::new();
        let mut diagonal = Vec::new();
        for i in 0..d {
            for j in 0..d {
                let key = block_key(i, j, m);
                let next = sizes.len();
                let g = *keys.entry(key).or_insert(next);
                if g == next {
                    sizes.push(0);
                    diagonal.push(key.0 == 0 && key.1 == key.2);
                }
                sizes[g] += 1;
                group_of.push(g);
            }
        }
        ToeplitzGroups {
            group_of,
            sizes,
            diagonal,
        }
    }

    fn means<T: Real>(&self, mat: &Matrix<T>) -> Vec<T> {
        let mut sums = vec![T::zero(); self.sizes.len()];
        for (&g, &x) in self.group_of.iter().zip(mat.as_slice()) {
            sums[g] += x;
        }
        sums.iter()
            .zip(&self.sizes)
            .map(|(&s, &n)| s / T::from_usize_lossy(n))
            .collect()
    }

    fn fill<T: Real>(&self, values: &[T], d: usize) -> Matrix<T> {
        Matrix::from_row_major(d, d, self.group_of.iter().map(|&g| values[g]).collect())
    }
}

/// `(lag, p, q)` identifying the Toeplitz parameter behind entry `(i, j)`.
fn block_key(i: usize, j: usize, m: usize) -> (usize, usize, usize) {
    let (bi, p) = (i / m, i % m);
    let (bj, q) = (j / m, j % m);
    if bi == bj {
        (0, p.min(q), p.max(q))
    } else if bi > bj {
        (bi - bj, p, q)
    } else {
        (bj - bi, q, p)
    }
}

/// Euclidean projection onto symmetric block-Toeplitz matrices.
pub fn toeplitz_project<T: Real>(mat: &Matrix<T>, m: usize, window: usize) -> Matrix<T> {
    let groups = ToeplitzGroups::new(m, window);
    groups.fill(&groups.means(mat), m * window)
}

/// Exact check: every entry equals the others in its Toeplitz group.
pub fn is_block_toeplitz<T: Real>(mat: &Matrix<T>, m: usize, window: usize) -> bool {
    let d = m * window;
    if mat.rows() != d || mat.cols() != d {
        return false;
    }
    let mut seen: HashMap<(usize, usize, usize), T> = HashMap::new();
    for i in 0..d {
        for j in 0..d {
            let v = mat[(i, j)];
            match seen.entry(block_key(i, j, m)) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    if *e.get() != v {
                        return false;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(v);
                }
            }
        }
    }
    true
}

/// The distinct blocks `A^(0) .. A^(window-1)`; `A^(l)` is block `(l, 0)`.
pub fn unique_blocks<T: Real>(theta: &Matrix<T>, m: usize, window: usize) -> Vec<Matrix<T>> {
    (0..window)
        .map(|l| Matrix::from_fn(m, m, |p, q| theta[(l * m + p, q)]))
        .collect()
}

/// Inverse of [`unique_blocks`].
pub fn from_blocks<T: Real>(blocks: &[Matrix<T>]) -> Result<Matrix<T>> {
    let window = blocks.len();
    let m = blocks.first().map_or(0, Matrix::rows);
    if window == 0 || blocks.iter().any(|b| b.rows() != m || b.cols() != m) {
        return Err(Error::arg("Toeplitz blocks must be non-empty and all m × m"));
    }
    if blocks[0].asymmetry() != T::zero() {
        return Err(Error::arg("Toeplitz block A^(0) must be symmetric"));
    }
    let d = m * window;
    Ok(Matrix::from_fn(d, d, |i, j| {
        let (bi, p) = (i / m, i % m);
        let (bj, q) = (j / m, j % m);
        if bi >= bj {
            blocks[bi - bj][(p, q)]
        } else {
            blocks[bj - bi][(q, p)]
        }
    }))
}

/// Number of nonzero free parameters: upper triangle of `A^(0)` plus every
/// entry of the lag blocks.
pub fn toeplitz_nonzeros<T: Real>(theta: &Matrix<T>, m: usize, window: usize) -> usize {
    let blocks = unique_blocks(theta, m, window);
    let mut n = 0;
    for (l, b) in blocks.iter().enumerate() {
        for p in 0..m {
            for q in 0..m {
                if (l > 0 || q >= p) && b[(p, q)] != T::zero() {
                    n += 1;
                }
            }
        }
    }
    n
}

/// `-log det Θ + tr(S Θ) + λ ||Θ||_{1,off}`; `None` if Θ is not PD.
pub fn objective<T: Real>(theta: &Matrix<T>, s: &Matrix<T>, lambda: T) -> Option<T> {
    let ch = theta.cholesky()?;
    Some(-ch.log_det() + s.trace_product(theta) + lambda * theta.off_diagonal_l1())
}

fn soft_threshold<T: Real>(x: T, k: T) -> T {
    if x > k {
        x - k
    } else if x < -k {
        x + k
    } else {
        T::zero()
    }
}

pub fn solve<T: Real>(problem: &GlassoProblem<T>, settings: &AdmmSettings) -> Result<GlassoSolution<T>> {
    settings.validate()?;
    let d = problem.m * problem.window;
    let s_in = &problem.empirical_covariance;
    if problem.m == 0 || problem.window == 0 {
        return Err(Error::arg("m and window must be positive"));
    }
    if s_in.rows() != d || s_in.cols() != d {
        return Err(Error::arg(format!(
            "covariance is {}×{}, expected {d}×{d}",
            s_in.rows(),
            s_in.cols()
        )));
    }
    if problem.sample_count < 1 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    if !(problem.lambda >= T::zero()) {
        return Err(Error::arg("lambda must be non-negative"));
    }
    if !s_in.is_finite() {
        return Err(Error::arg("covariance has non-finite entries"));
    }
    let sym_tol = T::lit(1e-10) * s_in.max_abs().max(T::one());
    if s_in.asymmetry() > sym_tol {
        return Err(Error::arg("covariance is not symmetric"));
    }

    let mut s = s_in.clone();
    s.symmetrize();
    let mut ridge = T::zero();
    if s.cholesky().is_none() {
        let tr = s.trace();
        ridge = if tr > T::zero() {
            T::lit(1e-6) * tr / T::from_usize_lossy(d)
        } else {
            T::lit(1e-6)
        };
        s.add_diagonal(ridge);
    }

    let rho = T::lit(settings.penalty_rho);
    let abs_tol = T::lit(settings.abs_tol);
    let rel_tol = T::lit(settings.rel_tol);
    let lambda = problem.lambda;
    let groups = ToeplitzGroups::new(problem.m, problem.window);
    let dim = T::from_usize_lossy(d);
    let two = T::lit(2.0);
    let four = T::lit(4.0);

    let mut z = Matrix::from_fn(d, d, |i, j| {
        if i == j {
            T::one() / s[(i, i)].max(T::min_positive_value())
        } else {
            T::zero()
        }
    });
    z = groups.fill(&groups.means(&z), d);
    let mut u = Matrix::zeros(d, d);
    let mut theta = z.clone();
    let mut history: Vec<(T, T, T, T)> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let (mut r_norm, mut s_norm) = (T::infinity(), T::infinity());

    for it in 0..settings.max_iters {
        iterations = it + 1;
        let target = z.sub(&u).scale(rho).sub(&s);
        let eig = target.sym_eigen();
        theta = eig.reconstruct_with(|l| (l + (l * l + four * rho).sqrt()) / (two * rho));

        let z_old = z;
        let v = theta.add(&u);
        let means = groups.means(&v);
        let shrunk: Vec<T> = means
            .iter()
            .zip(&groups.diagonal)
            .map(|(&x, &diag)| if diag { x } else { soft_threshold(x, lambda / rho) })
            .collect();
        z = groups.fill(&shrunk, d);
        u = v.sub(&z);

        r_norm = theta.sub(&z).frobenius_norm();
        s_norm = z.sub(&z_old).frobenius_norm() * rho;
        let eps_pri = dim * abs_tol + rel_tol * theta.frobenius_norm().max(z.frobenius_norm());
        let eps_dual = dim * abs_tol + rel_tol * rho * u.frobenius_norm();
        history.push((r_norm, s_norm, eps_pri, eps_dual));
        if !theta.is_finite() {
            break;
        }
        if r_norm <= eps_pri && s_norm <= eps_dual {
            converged = true;
            break;
        }
    }

    let oscillating = history
        .windows(2)
        .rev()
        .take(9)
        .any(|w| w[1].0 > w[0].0 + T::lit(10.0) * w[1].2 || w[1].1 > w[0].1 + T::lit(10.0) * w[1].3);

    let chosen = if z.cholesky().is_some() {
        z
    } else {
        let proj = groups.fill(&groups.means(&theta), d);
        if proj.cholesky().is_some() {
            proj
        } else {
            return Err(Error::Convergence {
                iterations,
                primal: r_norm.as_f64(),
                dual: s_norm.as_f64(),
            });
        }
    };
    let obj = objective(&chosen, &s, lambda).ok_or_else(|| Error::Convergence {
        iterations,
        primal: r_norm.as_f64(),
        dual: s_norm.as_f64(),
    })?;
    if !converged {
        log::debug!("ADMM stopped after {iterations} iterations without meeting tolerances");
    }
    Ok(GlassoSolution {
        theta: chosen,
        objective: obj,
        iterations,
        converged,
        primal_residual: r_norm,
        dual_residual: s_norm,
        oscillating,
        ridge,
    })
}

/// Weighted mean and biased covariance of stacked windows.
pub fn empirical_stats<T: Real, W: AsRef<[T]>>(
    windows: &[W],
    weights: Option<&[T]>,
) -> Result<(Vec<T>, Matrix<T>, T)> {
    if windows.is_empty() {
        return Err(Error::arg("no windows"));
    }
    let d = windows[0].as_ref().len();
    if windows.iter().any(|w| w.as_ref().len() != d) {
        return Err(Error::arg("windows differ in dimension"));
    }
    let ones;
    let w = match weights {
        Some(w) => {
            if w.len() != windows.len() {
                return Err(Error::arg("weights and windows differ in length"));
            }
            if w.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
                return Err(Error::arg("weights must be finite and non-negative"));
            }
            w
        }
        None => {
            ones = vec![T::one(); windows.len()];
            &ones
        }
    };
    if !(w.iter().copied().sum::<T>() > T::zero()) {
        return Err(Error::arg("total weight is zero"));
    }
    Ok(weighted_moments(windows, w))
}
