//! Dense linear algebra used by the solvers: factorizations, a cyclic Jacobi
//! eigensolver, and block subspace iteration for the leading eigenpairs of a
//! large symmetric PSD matrix.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this size (or when the search block would cover most of the matrix)
/// the full Jacobi decomposition is cheaper than subspace iteration.
const DENSE_EIGEN_LIMIT: usize = 300;
const SUBSPACE_MAX_ITER: usize = 2000;
const SUBSPACE_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn dot<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.dot(&b)
}

pub fn norm<T: Scalar>(a: ArrayView1<T>) -> T {
    a.dot(&a).sqrt()
}

pub fn frobenius<T: Scalar>(a: ArrayView2<T>) -> T {
    a.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn max_abs<T: Scalar>(a: ArrayView2<T>) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<T: Scalar>(a: ArrayView2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!(
            "cholesky needs a square matrix, got {:?}",
            a.dim()
        )));
    }
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::Numeric(format!(
                "matrix not positive definite (pivot {j} = {d})"
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    Ok(l)
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn cholesky_solve<T: Scalar>(a: ArrayView2<T>, b: ArrayView1<T>) -> Result<Array1<T>> {
    let n = a.nrows();
    if b.len() != n {
        return Err(Error::Shape(format!("rhs length {} for {n}x{n} system", b.len())));
    }
    let l = cholesky(a)?;
    let mut y = Array1::<T>::zeros(n);
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[[i, k]] * y[k];
        }
        y[i] = v / l[[i, i]];
    }
    let mut x = Array1::<T>::zeros(n);
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= l[[k, i]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    Ok(x)
}

/// Solves `A X = B` by LU factorization with partial pivoting.
pub fn lu_solve<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Shape(format!(
            "lu_solve: A is {:?}, B is {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut lu = a.to_owned();
    let mut x = b.to_owned();
    let scale = max_abs(a).max(T::min_positive_value());
    let tiny = scale * T::epsilon() * T::from_usize_lossy(n.max(1));
    for col in 0..n {
        let (piv, pval) = (col..n)
            .map(|r| (r, lu[[r, col]].abs()))
            .fold((col, -T::one()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pval > tiny) {
            return Err(Error::Numeric(format!(
                "singular system: pivot {col} has magnitude {pval}"
            )));
        }
        if piv != col {
            for j in 0..n {
                lu.swap([col, j], [piv, j]);
            }
            for j in 0..x.ncols() {
                x.swap([col, j], [piv, j]);
            }
        }
        let d = lu[[col, col]];
        for r in (col + 1)..n {
            let f = lu[[r, col]] / d;
            if f == T::zero() {
                continue;
            }
            lu[[r, col]] = f;
            for j in (col + 1)..n {
                let v = lu[[col, j]];
                lu[[r, j]] -= f * v;
            }
            for j in 0..x.ncols() {
                let v = x[[col, j]];
                x[[r, j]] -= f * v;
            }
        }
    }
    for j in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut v = x[[i, j]];
            for k in (i + 1)..n {
                v -= lu[[i, k]] * x[[k, j]];
            }
            x[[i, j]] = v / lu[[i, i]];
        }
    }
    Ok(x)
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order; eigenvectors are the matching columns.
pub fn symmetric_eigen<T: Scalar>(a: ArrayView2<T>) -> Result<(Array1<T>, Array2<T>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("eigen needs a square matrix, got {:?}", a.dim())));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite entry in symmetric matrix".into()));
    }
    let mut m = a.as_standard_layout().into_owned();
    // average out round-off asymmetry from callers
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[[i, j]] + m[[j, i]]) * T::lit(0.5);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    // eigenvectors are accumulated as rows of V^T
    let mut vt = Array2::<T>::eye(n);
    let total = frobenius(m.view()).max(T::min_positive_value());
    let eps = T::epsilon();
    let negligible = eps * total / T::from_usize_lossy(n.max(1));
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off == T::zero() || off.sqrt() <= eps * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                if apq.abs() <= negligible || apq.abs() <= eps * T::lit(0.5) * (app * aqq).abs().sqrt() {
                    m[[p, q]] = T::zero();
                    m[[q, p]] = T::zero();
                    continue;
                }
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // rows p and q are contiguous; the matching columns are mirrored after
                rotate_rows(a_rows(&mut m, n), p, q, c, s);
                m[[p, p]] = app - t * apq;
                m[[q, q]] = aqq + t * apq;
                m[[p, q]] = T::zero();
                m[[q, p]] = T::zero();
                for k in 0..n {
                    if k != p && k != q {
                        m[[k, p]] = m[[p, k]];
                        m[[k, q]] = m[[q, k]];
                    }
                }
                rotate_rows(a_rows(&mut vt, n), p, q, c, s);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap_or(std::cmp::Ordering::Equal));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let vectors = vt.select(Axis(0), &order).reversed_axes();
    Ok((values, vectors))
}

fn a_rows<T: Scalar>(m: &mut Array2<T>, n: usize) -> &mut [T] {
    let slice = m.as_slice_mut().expect("standard layout");
    debug_assert_eq!(slice.len(), n * n);
    slice
}

/// `row_p <- c row_p - s row_q`, `row_q <- s row_p + c row_q` on a row-major buffer.
fn rotate_rows<T: Scalar>(buf: &mut [T], p: usize, q: usize, c: T, s: T) {
    let n = (buf.len() as f64).sqrt() as usize;
    let (head, tail) = buf.split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Orthonormalizes the columns in place with twice-repeated modified Gram-Schmidt.
///
/// Columns that collapse numerically are replaced by fresh random directions, so the
/// result always has orthonormal columns. The returned `R` diagonal is positive for
/// every column that was not replaced.
pub fn orthonormalize_columns<T: Scalar>(q: &mut Array2<T>, rng: &mut ChaCha8Rng) -> Vec<T> {
    let (n, b) = q.dim();
    assert!(b <= n, "cannot hold {b} orthonormal columns in dimension {n}");
    let mut diag = Vec::with_capacity(b);
    for j in 0..b {
        let mut reference = norm(q.column(j));
        let mut replaced = false;
        loop {
            for _pass in 0..2 {
                for i in 0..j {
                    let proj = q.column(i).dot(&q.column(j));
                    let qi = q.column(i).to_owned();
                    q.column_mut(j).scaled_add(-proj, &qi);
                }
            }
            let nrm = norm(q.column(j));
            if nrm > T::lit(1e-10) * reference && nrm > T::min_positive_value() {
                q.column_mut(j).mapv_inplace(|x| x / nrm);
                diag.push(if replaced { T::zero() } else { nrm });
                break;
            }
            replaced = true;
            for i in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                q[[i, j]] = T::lit(z);
            }
            reference = norm(q.column(j));
        }
    }
    diag
}

/// Leading eigenpairs of a symmetric PSD matrix.
#[derive(Debug, Clone)]
pub struct TopEigen<T> {
    pub values: Array1<T>,
    pub vectors: Array2<T>,
    pub converged: bool,
    pub iterations: usize,
}

/// Computes the `k` largest eigenpairs of a symmetric PSD matrix `g`.
///
/// Small problems are solved densely; large ones by block subspace iteration with
/// Rayleigh-Ritz projection, iterated until every requested residual
/// `||G u - lambda u||` falls below a tolerance relative to the top eigenvalue.
pub fn top_eigen<T: Scalar>(g: ArrayView2<T>, k: usize) -> Result<TopEigen<T>> {
    let n = g.nrows();
    if g.ncols() != n {
        return Err(Error::Shape(format!("expected a square matrix, got {:?}", g.dim())));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("requested {k} eigenpairs of a {n}x{n} matrix")));
    }
    let block = n.min(2 * k + 10);
    if n <= DENSE_EIGEN_LIMIT || 2 * block >= n {
        let (values, vectors) = symmetric_eigen(g)?;
        return Ok(TopEigen {
            values: values.slice(s![..k]).to_owned(),
            vectors: vectors.slice(s![.., ..k]).to_owned(),
            converged: true,
            iterations: 1,
        });
    }

    let eps = T::epsilon();
    let tol = (eps.sqrt() * T::lit(1e-3)).max(eps * T::lit(64.0) * T::from_usize_lossy(n).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSPACE_SEED);
    let mut q = Array2::<T>::zeros((n, block));
    for x in q.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x = T::lit(z);
    }
    orthonormalize_columns(&mut q, &mut rng);
    let mut z = g.dot(&q);
    let mut values = Array1::<T>::zeros(block);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=SUBSPACE_MAX_ITER {
        iterations = it;
        q.assign(&z);
        orthonormalize_columns(&mut q, &mut rng);
        z = g.dot(&q);
        let h = q.t().dot(&z);
        let (theta, w) = symmetric_eigen(h.view())?;
        q = q.dot(&w);
        z = z.dot(&w);
        values = theta;
        let top = values[0].abs().max(T::min_positive_value());
        let worst = (0..k)
            .map(|j| {
                let mut r = z.column(j).to_owned();
                r.scaled_add(-values[j], &q.column(j));
                norm(r.view())
            })
            .fold(T::zero(), T::max);
        if worst <= tol * top {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("subspace iteration stopped after {iterations} iterations without converging");
    }
    Ok(TopEigen {
        values: values.slice(s![..k]).to_owned(),
        vectors: q.slice(s![.., ..k]).to_owned(),
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let b = array![1.0, -2.0, 0.5];
        let x = cholesky_solve(a.view(), b.view()).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v: &f64| v.abs() < 1e-12));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(cholesky(a.view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn lu_handles_pivoting() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let b = array![[2.0], [3.0]];
        let x = lu_solve(a.view(), b.view()).unwrap();
        assert_eq!(x, array![[3.0], [2.0]]);
    }

    #[test]
    fn lu_reports_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let b = array![[1.0], [1.0]];
        assert!(lu_solve(a.view(), b.view()).is_err());
    }

    #[test]
    fn jacobi_diagonal_sorted() {
        let a = array![[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(a.view()).unwrap();
        assert_eq!(vals, array![4.0, 2.0, 1.0]);
        assert!((vecs[[1, 0]] as f64).abs() == 1.0);
    }

    #[test]
    fn jacobi_reconstructs() {
        let a = array![[2.0, -1.0, 0.3], [-1.0, 2.0, -1.0], [0.3, -1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(a.view()).unwrap();
        let rec = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        assert!((rec - &a).iter().all(|v: &f64| v.abs() < 1e-12));
        let gram = vecs.t().dot(&vecs) - Array2::<f64>::eye(3);
        assert!(gram.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn subspace_iteration_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let mut f = Array2::<f64>::zeros((n, 60));
        for (j, mut col) in f.columns_mut().into_iter().enumerate() {
            let scale = 0.85f64.powi(j as i32);
            for x in col.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = z * scale;
            }
        }
        let g = f.dot(&f.t());
        let top = top_eigen(g.view(), 8).unwrap();
        assert!(top.converged);
        let (dense, _) = symmetric_eigen(g.view()).unwrap();
        for j in 0..8 {
            assert!((top.values[j] - dense[j]).abs() <= 1e-9 * dense[0]);
        }
    }
}
