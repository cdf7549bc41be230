//! Two-layer scalar-output perceptron, its neural tangent features, and training
//! under squared loss with an optional invariant-direction alignment penalty.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ntf_space::NtfSpace;
use crate::scalar::Scalar;

/// Below this norm the reduced coordinates of `f_w - f_{w0}` are treated as zero and
/// the alignment penalty contributes nothing.
pub const ALIGNMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative; the rectifier uses 0 at the kink.
    #[inline]
    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Parameters `W1 (h x d)`, `b1 (h)`, `W2 (h)`, `b2` and the frozen snapshot `w0`.
///
/// The flat layout is `W1` row-major, then `b1`, `W2`, `b2`.
#[derive(Debug, Clone)]
pub struct MlpState<T> {
    w1: Array2<T>,
    b1: Array1<T>,
    w2: Array1<T>,
    b2: T,
    activation: Activation,
    w0: Arc<Array1<T>>,
}

/// Intermediate values of one forward pass over a batch.
struct Forward<T> {
    pre: Array2<T>,
    act: Array2<T>,
    out: Array1<T>,
}

impl<T: Scalar> MlpState<T> {
    /// Gaussian initialization: `W1, b1 ~ N(0, 1/d)`, `W2 ~ N(0, 1/h)`, `b2 = 0`.
    pub fn init(input: usize, hidden: usize, activation: Activation, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "network needs positive sizes, got input {input}, hidden {hidden}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |scale: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z * scale)
        };
        let s1 = 1.0 / (input as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Array2::from_shape_simple_fn((hidden, input), || gauss(s1));
        let b1 = Array1::from_shape_simple_fn(hidden, || gauss(s1));
        let w2 = Array1::from_shape_simple_fn(hidden, || gauss(s2));
        Self::from_parts(w1, b1, w2, T::zero(), activation)
    }

    /// Builds a network from explicit parameters; the snapshot `w0` is taken here.
    pub fn from_parts(w1: Array2<T>, b1: Array1<T>, w2: Array1<T>, b2: T, activation: Activation) -> Result<Self> {
        let h = w1.nrows();
        if b1.len() != h || w2.len() != h {
            return Err(Error::Shape(format!(
                "hidden sizes disagree: W1 {h}, b1 {}, W2 {}",
                b1.len(),
                w2.len()
            )));
        }
        let mut m = Self {
            w1,
            b1,
            w2,
            b2,
            activation,
            w0: Arc::new(Array1::zeros(0)),
        };
        m.w0 = Arc::new(m.flatten());
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `p = h*d + h + h + 1`.
    pub fn num_params(&self) -> usize {
        let (h, d) = self.w1.dim();
        h * d + 2 * h + 1
    }

    pub fn w0(&self) -> &Array1<T> {
        &self.w0
    }

    pub fn flatten(&self) -> Array1<T> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend(self.w1.iter().copied());
        v.extend(self.b1.iter().copied());
        v.extend(self.w2.iter().copied());
        v.push(self.b2);
        Array1::from_vec(v)
    }

    /// New state with parameters `flat`, sharing this state's `w0` snapshot.
    pub fn with_params(&self, flat: ArrayView1<T>) -> Result<Self> {
        let p = self.num_params();
        if flat.len() != p {
            return Err(Error::Shape(format!("expected {p} parameters, got {}", flat.len())));
        }
        let (h, d) = self.w1.dim();
        let w1 = flat
            .slice(s![..h * d])
            .to_owned()
            .into_shape_with_order((h, d))
            .expect("contiguous");
        Ok(Self {
            w1,
            b1: flat.slice(s![h * d..h * d + h]).to_owned(),
            w2: flat.slice(s![h * d + h..h * d + 2 * h]).to_owned(),
            b2: flat[p - 1],
            activation: self.activation,
            w0: Arc::clone(&self.w0),
        })
    }

    /// The network at its initialization snapshot.
    pub fn at_init(&self) -> Self {
        self.with_params(self.w0.view()).expect("snapshot has matching length")
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<T>) -> Forward<T> {
        let mut pre = x.dot(&self.w1.t());
        pre += &self.b1;
        let act = pre.mapv(|z| self.activation.apply(z));
        let mut out = act.dot(&self.w2);
        out += self.b2;
        Forward { pre, act, out }
    }

    /// `f_w(x_i)` for every row.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array1<T>> {
        self.check_input(&x)?;
        Ok(self.run(x).out)
    }

    /// Gradient of `sum_i g_i f_w(x_i)` with respect to the flat parameters.
    fn backprop(&self, x: ArrayView2<T>, fw: &Forward<T>, g: ArrayView1<T>) -> Array1<T> {
        let (h, d) = self.w1.dim();
        let mut grad = Array1::<T>::zeros(self.num_params());
        let mut dpre = fw.pre.mapv(|z| self.activation.derivative(z));
        dpre *= &self.w2;
        dpre *= &g.insert_axis(Axis(1));
        let dw1 = dpre.t().dot(&x);
        grad.slice_mut(s![..h * d])
            .assign(&Array1::from_iter(dw1.iter().copied()));
        grad.slice_mut(s![h * d..h * d + h]).assign(&dpre.sum_axis(Axis(0)));
        grad.slice_mut(s![h * d + h..h * d + 2 * h]).assign(&fw.act.t().dot(&g));
        grad[h * d + 2 * h] = g.sum();
        grad
    }

    /// Neural tangent features `grad_w f_{w0}(x_i)`, one row per sample, in flat order.
    ///
    /// Always evaluated at the initialization snapshot, whatever the current parameters.
    pub fn ntf(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut out = Array2::<T>::zeros((x.nrows(), self.num_params()));
        self.at_init().tangent_rows_into(x, out.view_mut());
        Ok(out)
    }

    /// Tangent kernel `Phi Phi^T` at the snapshot without forming `Phi`:
    /// `(X X^T + 1) * (D D^T) + A A^T + 1` with `D = act'(Z) W2` and `A = act(Z)`.
    pub fn tangent_gram(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let m = self.at_init();
        let fw = m.run(x);
        let mut gate = fw.pre.mapv(|z| m.activation.derivative(z));
        gate *= &m.w2;
        let mut g = x.dot(&x.t());
        g.mapv_inplace(|v| v + T::one());
        g *= &gate.dot(&gate.t());
        g += &fw.act.dot(&fw.act.t());
        g.mapv_inplace(|v| v + T::one());
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite tangent kernel entry".into()));
        }
        Ok(g)
    }

    /// Writes `grad_w f_w(x_i)` at the *current* parameters into `out`.
    pub(crate) fn tangent_rows_into(&self, x: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
        let (h, d) = self.w1.dim();
        let fw = self.run(x);
        let mut gate = fw.pre.mapv(|z| self.activation.derivative(z));
        gate *= &self.w2;
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let xi = x.row(i);
            let gi = gate.row(i);
            for hh in 0..h {
                let g = gi[hh];
                let mut seg = row.slice_mut(s![hh * d..(hh + 1) * d]);
                seg.assign(&xi);
                seg *= g;
            }
            row.slice_mut(s![h * d..h * d + h]).assign(&gi);
            row.slice_mut(s![h * d + h..h * d + 2 * h]).assign(&fw.act.row(i));
            row[h * d + 2 * h] = T::one();
        }
    }
}

/// Alignment target for feedback training: keep `S^-1 U^T (f_w(X) - f_{w0}(X))`
/// parallel to `theta`.
#[derive(Debug, Clone, Copy)]
pub struct Alignment<'a, T> {
    pub theta: &'a Array1<T>,
    pub space: &'a NtfSpace<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentValue<T> {
    /// Signed cosine between `theta` and the reduced coordinates (0 when undefined).
    pub cosine: T,
    /// `1 - |cos|`, or 0 when the coordinates vanish.
    pub penalty: T,
}

impl<T: Scalar> Alignment<'_, T> {
    pub fn new<'a>(theta: &'a Array1<T>, space: &'a NtfSpace<T>) -> Result<Alignment<'a, T>> {
        if theta.len() != space.k() {
            return Err(Error::Shape(format!(
                "theta has {} entries for a rank-{} space",
                theta.len(),
                space.k()
            )));
        }
        if !(crate::linalg::norm(theta.view()) > T::zero()) {
            return Err(Error::DegenerateDirection("theta_inv has zero norm".into()));
        }
        Ok(Alignment { theta, space })
    }

    /// Penalty value and, when defined, its gradient with respect to `delta_f`.
    pub fn evaluate(&self, delta_f: ArrayView1<T>) -> Result<(AlignmentValue<T>, Option<Array1<T>>)> {
        let c = self.space.reduced_coords(delta_f)?;
        let cn = crate::linalg::norm(c.view());
        if cn < T::lit(ALIGNMENT_EPS) {
            let v = AlignmentValue {
                cosine: T::zero(),
                penalty: T::zero(),
            };
            return Ok((v, None));
        }
        let tn = crate::linalg::norm(self.theta.view());
        let cos = self.theta.dot(&c) / (tn * cn);
        let sign = if cos < T::zero() { -T::one() } else { T::one() };
        // d(1 - |cos|)/dc
        let mut dc = self.theta.mapv(|t| t / (tn * cn));
        dc.scaled_add(-cos / (cn * cn), &c);
        dc *= -sign;
        let grad = self.space.lift_coords_gradient(dc.view());
        Ok((
            AlignmentValue {
                cosine: cos,
                penalty: T::one() - cos.abs(),
            },
            Some(grad),
        ))
    }
}

/// Full-batch gradient descent settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<T> {
    pub lambda: T,
    pub epochs: usize,
    pub lr: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Objective after every epoch (entry 0 is the starting point).
    pub loss_trace: Vec<f64>,
    pub final_cosine: Option<f64>,
    /// Set when the final objective exceeds the starting one.
    pub non_converged: bool,
}

/// Objective value and flat gradient of
/// `mean (f_w(x_i) - y_i)^2 + lambda * (1 - |cos(theta, S^-1 U^T (f_w - f_{w0}))|)`.
pub fn feedback_objective<T: Scalar>(
    model: &MlpState<T>,
    x: ArrayView2<T>,
    y: ArrayView1<T>,
    f0: ArrayView1<T>,
    align: Option<&Alignment<'_, T>>,
    lambda: T,
) -> Result<(T, Array1<T>, Option<AlignmentValue<T>>)> {
    model.check_input(&x)?;
    let n = x.nrows();
    if y.len() != n || f0.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} targets and {} reference outputs",
            y.len(),
            f0.len()
        )));
    }
    let fw = model.run(x);
    let resid = &fw.out - &y;
    let nn = T::from_usize_lossy(n);
    let mse = resid.dot(&resid) / nn;
    let mut g_out = resid.mapv(|r| T::lit(2.0) * r / nn);
    let mut loss = mse;
    let mut value = None;
    if let Some(a) = align {
        let delta = &fw.out - &f0;
        let (v, grad) = a.evaluate(delta.view())?;
        loss += lambda * v.penalty;
        if let Some(gd) = grad {
            g_out.scaled_add(lambda, &gd);
        }
        value = Some(v);
    }
    let grad = model.backprop(x, &fw, g_out.view());
    Ok((loss, grad, value))
}

/// Trains by full-batch gradient descent on squared loss plus, when `align` is
/// given, the weighted alignment penalty. Returns a new state; `model` is untouched.
pub fn train_feedback<T: Scalar>(
    model: &MlpState<T>,
    x: ArrayView2<T>,
    y: ArrayView1<T>,
    align: Option<&Alignment<'_, T>>,
    cfg: &TrainConfig<T>,
) -> Result<(MlpState<T>, TrainReport)> {
    if !(cfg.lambda >= T::zero()) {
        return Err(Error::Config(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    if !(cfg.lr > T::zero()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    let f0 = model.at_init().forward(x)?;
    let mut state = model.clone();
    let mut params = state.flatten();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut last_cos = None;
    for epoch in 0..=cfg.epochs {
        let (loss, grad, value) = feedback_objective(&state, x, y, f0.view(), align, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
        trace.push(loss.to_f64_lossy());
        last_cos = value.map(|v| v.cosine.to_f64_lossy());
        if epoch == cfg.epochs {
            break;
        }
        params.scaled_add(-cfg.lr, &grad);
        state = state.with_params(params.view())?;
    }
    let initial_loss = trace[0];
    let final_loss = *trace.last().expect("at least one entry");
    Ok((
        state,
        TrainReport {
            initial_loss,
            final_loss,
            loss_trace: trace,
            final_cosine: last_cos,
            non_converged: final_loss > initial_loss,
        },
    ))
}
