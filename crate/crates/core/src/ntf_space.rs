//! Spectral reduction of the neural tangent feature matrix and the
//! heterogeneity-aware clustering kernel built on it.
//!
//! The right singular vectors `V` (p x k) are never formed. Everything that needs
//! them goes through `U` and `S`: the reduced features are `Psi = U diag(S)`, and
//! reduced coordinates of an output perturbation are `diag(S)^-1 U^T delta`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mlp::MlpState;
use crate::scalar::Scalar;

/// Smallest singular value accepted by [`NtfSpace::reduced_coords`].
pub const MIN_SINGULAR_VALUE: f64 = 1e-12;

/// Bound on `|<Psi_V(x_i), theta>| / (||Psi_V(x_i)|| ||theta|| + 1e-12)` after an update.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

/// Row source for Gram accumulation; rows are produced on demand in fixed order.
pub trait NtfSource<T> {
    fn rows(&self) -> usize;
    fn dim(&self) -> usize;
    /// Writes rows `start .. start + out.nrows()` into `out`.
    fn fill(&self, start: usize, out: ArrayViewMut2<T>);
}

impl<T: Scalar> NtfSource<T> for ArrayView2<'_, T> {
    fn rows(&self) -> usize {
        self.nrows()
    }

    fn dim(&self) -> usize {
        self.ncols()
    }

    fn fill(&self, start: usize, mut out: ArrayViewMut2<T>) {
        let m = out.nrows();
        out.assign(&self.slice(s![start..start + m, ..]));
    }
}

/// Tangent features of a network at its snapshot `w0`, computed block by block.
pub struct TangentFeatures<'a, T> {
    model: MlpState<T>,
    x: ArrayView2<'a, T>,
}

impl<'a, T: Scalar> TangentFeatures<'a, T> {
    pub fn new(model: &MlpState<T>, x: ArrayView2<'a, T>) -> Result<Self> {
        if x.ncols() != model.input_dim() {
            return Err(Error::Shape(format!(
                "model expects {} input columns, got {}",
                model.input_dim(),
                x.ncols()
            )));
        }
        Ok(Self {
            model: model.at_init(),
            x,
        })
    }
}

impl<T: Scalar> NtfSource<T> for TangentFeatures<'_, T> {
    fn rows(&self) -> usize {
        self.x.nrows()
    }

    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn fill(&self, start: usize, out: ArrayViewMut2<T>) {
        let m = out.nrows();
        self.model
            .tangent_rows_into(self.x.slice(s![start..start + m, ..]), out);
    }
}

/// `G = Phi Phi^T` accumulated from row blocks, holding at most two blocks of
/// `block` rows besides the `n x n` output.
pub fn build_gram<T: Scalar, S: NtfSource<T> + ?Sized>(src: &S, block: usize) -> Result<Array2<T>> {
    if block == 0 {
        return Err(Error::Config("gram block size must be >= 1".into()));
    }
    let n = src.rows();
    let p = src.dim();
    let mut g = Array2::<T>::zeros((n, n));
    let mut bi = Array2::<T>::zeros((block.min(n), p));
    let mut bj = Array2::<T>::zeros((block.min(n), p));
    let mut i0 = 0;
    while i0 < n {
        let mi = block.min(n - i0);
        let mut rows_i = bi.slice_mut(s![..mi, ..]);
        src.fill(i0, rows_i.view_mut());
        if rows_i.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite tangent feature in rows {i0}..{}",
                i0 + mi
            )));
        }
        let rows_i = bi.slice(s![..mi, ..]);
        let diag = rows_i.dot(&rows_i.t());
        for a in 0..mi {
            for b in a..mi {
                let v = diag[[a, b]];
                g[[i0 + a, i0 + b]] = v;
                g[[i0 + b, i0 + a]] = v;
            }
        }
        let mut j0 = i0 + mi;
        while j0 < n {
            let mj = block.min(n - j0);
            src.fill(j0, bj.slice_mut(s![..mj, ..]));
            let off = rows_i.dot(&bj.slice(s![..mj, ..]).t());
            g.slice_mut(s![i0..i0 + mi, j0..j0 + mj]).assign(&off);
            g.slice_mut(s![j0..j0 + mj, i0..i0 + mi]).assign(&off.t());
            j0 += mj;
        }
        i0 += mi;
    }
    Ok(g)
}

/// Rank-k spectral factors of the tangent feature matrix.
#[derive(Debug, Clone)]
pub struct NtfSpace<T> {
    u: Array2<T>,
    s: Array1<T>,
    psi: Array2<T>,
    /// Eigenvalues of the Gram matrix beyond the retained rank are not tracked; this
    /// is `||G||_F^2 - sum S_j^4`, the squared reconstruction residual.
    tail_sq: T,
    warnings: Vec<String>,
}

impl<T: Scalar> NtfSpace<T> {
    /// Builds a space directly from factors; `s` must be positive and non-increasing.
    pub fn from_factors(u: Array2<T>, s: Array1<T>) -> Result<Self> {
        if u.ncols() != s.len() {
            return Err(Error::Shape(format!(
                "U has {} columns but {} singular values",
                u.ncols(),
                s.len()
            )));
        }
        if s.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::Numeric("singular values must be positive".into()));
        }
        if s.windows(2).into_iter().any(|w| w[1] > w[0]) {
            return Err(Error::Numeric("singular values must be non-increasing".into()));
        }
        let psi = &u * &s;
        Ok(Self {
            u,
            s,
            psi,
            tail_sq: T::zero(),
            warnings: Vec::new(),
        })
    }

    pub fn u(&self) -> &Array2<T> {
        &self.u
    }

    pub fn singular_values(&self) -> &Array1<T> {
        &self.s
    }

    /// Reduced features `U diag(S)`, one row per training sample.
    pub fn psi(&self) -> &Array2<T> {
        &self.psi
    }

    pub fn k(&self) -> usize {
        self.s.len()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `||G - U diag(S^2) U^T||_F` implied by the decomposition.
    pub fn residual_norm(&self) -> T {
        self.tail_sq.max(T::zero()).sqrt()
    }

    /// Max absolute entry of `U^T U - I`.
    pub fn orthonormality_defect(&self) -> T {
        let gram = self.u.t().dot(&self.u) - Array2::<T>::eye(self.k());
        linalg::max_abs(gram.view())
    }

    /// The leading `k` components of this space.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::Config(format!("cannot truncate rank {} to {k}", self.k())));
        }
        let dropped: T = self.s.slice(s![k..]).iter().map(|&v| v.powi(4)).sum();
        Ok(Self {
            u: self.u.slice(s![.., ..k]).to_owned(),
            s: self.s.slice(s![..k]).to_owned(),
            psi: self.psi.slice(s![.., ..k]).to_owned(),
            tail_sq: self.tail_sq + dropped,
            warnings: self.warnings.clone(),
        })
    }

    /// `diag(S)^-1 U^T delta`: the coordinates `theta` with `delta ~ Psi theta`.
    pub fn reduced_coords(&self, delta: ArrayView1<T>) -> Result<Array1<T>> {
        if delta.len() != self.n() {
            return Err(Error::Shape(format!(
                "delta has {} entries for {} samples",
                delta.len(),
                self.n()
            )));
        }
        if let Some((index, &v)) = self.s.iter().enumerate().find(|(_, &v)| v < T::lit(MIN_SINGULAR_VALUE)) {
            return Err(Error::SingularScale {
                index,
                value: v.to_f64_lossy(),
            });
        }
        Ok(self.u.t().dot(&delta) / &self.s)
    }

    /// Pulls a gradient with respect to reduced coordinates back to sample space:
    /// `U diag(S)^-1 g`.
    pub fn lift_coords_gradient(&self, g: ArrayView1<T>) -> Array1<T> {
        self.u.dot(&(&g / &self.s))
    }
}

/// Leading eigenpairs of a Gram matrix as an [`NtfSpace`].
///
/// `k` is reduced (with a warning) when the matrix has lower numerical rank.
pub fn decompose<T: Scalar>(g: ArrayView2<T>, k: usize) -> Result<NtfSpace<T>> {
    let n = g.nrows();
    if g.ncols() != n {
        return Err(Error::Shape(format!("Gram matrix must be square, got {:?}", g.dim())));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("rank k={k} must lie in 1..={n}")));
    }
    let top = linalg::top_eigen(g, k)?;
    let mut warnings = Vec::new();
    if !top.converged {
        warnings.push(format!(
            "eigensolver stopped after {} iterations before reaching tolerance",
            top.iterations
        ));
    }
    let lead = top.values[0].max(T::zero());
    let floor = lead * T::epsilon() * T::from_usize_lossy(n) * T::lit(10.0);
    let rank = top.values.iter().take_while(|&&v| v > floor && v > T::zero()).count();
    if rank == 0 {
        return Err(Error::Numeric("Gram matrix is numerically zero".into()));
    }
    if rank < k {
        let msg = format!("requested rank {k} exceeds numerical rank {rank}; using {rank}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let s_vals = top.values.slice(s![..rank]).mapv(|v| v.sqrt());
    let u = top.vectors.slice(s![.., ..rank]).to_owned();
    let g_sq: T = g.iter().map(|&v| v * v).sum();
    let kept: T = s_vals.iter().map(|&v| v.powi(4)).sum();
    let mut space = NtfSpace::from_factors(u, s_vals)?;
    space.tail_sq = g_sq - kept;
    space.warnings = warnings;
    Ok(space)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    /// Project the invariant direction out of the original `U_i S` every time.
    #[default]
    Fresh,
    /// Project out of the current variant features, accumulating all past directions.
    Cumulative,
}

impl std::str::FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(KernelMode::Fresh),
            "cumulative" => Ok(KernelMode::Cumulative),
            other => Err(Error::Config(format!("unknown kernel mode `{other}`"))),
        }
    }
}

/// Variant features `Psi_V` whose inner products define the clustering kernel.
#[derive(Debug, Clone)]
pub struct KernelState<T> {
    pub psi_v: Array2<T>,
    pub iteration: usize,
    /// Unit directions projected out so far, oldest first.
    pub theta_history: Vec<Array1<T>>,
}

impl<T: Scalar> KernelState<T> {
    /// The starting kernel: plain inner products of reduced tangent features.
    pub fn initial(space: &NtfSpace<T>) -> Self {
        Self {
            psi_v: space.psi().clone(),
            iteration: 0,
            theta_history: Vec::new(),
        }
    }

    /// `max_i |<Psi_V(x_i), theta>| / (||Psi_V(x_i)|| ||theta|| + 1e-12)`.
    pub fn orthogonality_residual(&self, theta: ArrayView1<T>) -> T {
        let tn = linalg::norm(theta);
        let proj = self.psi_v.dot(&theta);
        self.psi_v
            .rows()
            .into_iter()
            .zip(proj.iter())
            .map(|(row, &ip)| ip.abs() / (linalg::norm(row) * tn + T::lit(1e-12)))
            .fold(T::zero(), T::max)
    }
}

fn project_out<T: Scalar>(base: &Array2<T>, theta: ArrayView1<T>, tn2: T) -> Array2<T> {
    let mut out = base.clone();
    // second pass removes the round-off left by the first
    for _ in 0..2 {
        let coef = out.dot(&theta) / tn2;
        out -= &(coef.insert_axis(Axis(1)) * &theta.insert_axis(Axis(0)));
    }
    out
}

/// Removes the component along `theta` from every row of the variant features.
///
/// Fails with [`Error::Invariant`] if the orthogonality bound does not hold afterwards.
pub fn orthogonal_update<T: Scalar>(
    space: &NtfSpace<T>,
    state: &KernelState<T>,
    theta: ArrayView1<T>,
    mode: KernelMode,
) -> Result<KernelState<T>> {
    if theta.len() != space.k() {
        return Err(Error::Shape(format!(
            "theta has {} entries for rank {}",
            theta.len(),
            space.k()
        )));
    }
    let tn2 = theta.dot(&theta);
    if !(tn2 > T::zero()) || !tn2.is_finite() {
        return Err(Error::DegenerateDirection("cannot project out a zero direction".into()));
    }
    let unit = theta.mapv(|v| v / tn2.sqrt());
    let psi_v = match mode {
        KernelMode::Fresh => project_out(space.psi(), theta, tn2),
        KernelMode::Cumulative => project_out(&state.psi_v, theta, tn2),
    };
    let mut history = state.theta_history.clone();
    history.push(unit);
    let next = KernelState {
        psi_v,
        iteration: state.iteration + 1,
        theta_history: history,
    };
    let tol = T::lit(ORTHOGONALITY_TOL).max(T::epsilon() * T::lit(16.0));
    let resid = next.orthogonality_residual(theta);
    if !(resid <= tol) {
        return Err(Error::Invariant(format!(
            "variant features not orthogonal to theta_inv: residual {resid:e} > {tol:e}"
        )));
    }
    Ok(next)
}

/// `K = Psi_V Psi_V^T`.
pub fn kernel_matrix<T: Scalar>(state: &KernelState<T>) -> Array2<T> {
    state.psi_v.dot(&state.psi_v.t())
}
