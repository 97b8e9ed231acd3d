//! State-space sequence engine.
//!
//! A diagonal linear state-space model is discretized by zero-order hold and
//! evaluated three ways that must agree:
//!
//! * [`scan_recurrent`]: `h_t = Ā h_{t-1} + B̄ x_t`, `y_t = C̄ h_t`, one step at a
//!   time.
//! * [`scan_kernel`] + [`apply_conv_form`]: for time-invariant parameters the
//!   output is a causal convolution with `K = (C̄B̄, C̄ĀB̄, …, C̄Ā^{T-1}B̄)`.
//! * [`scan_parallel`]: the recurrence as a prefix scan under the associative
//!   operator `(a, u) ∘ (a', u') = (a·a', a'·u + u')`.
//!
//! The initial state is always zero.

pub mod parallel;
pub mod selective;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use parallel::{blelloch_exclusive_scan, linear_recurrence_scan};
pub use selective::{SelectiveScan, SelectiveVars, ZohRule};

/// Extents of one scan problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    pub state_dim: usize,
    pub seq_len: usize,
    pub channels: usize,
}

impl SsmDims {
    pub fn new(state_dim: usize, seq_len: usize, channels: usize) -> Result<Self> {
        if state_dim == 0 || seq_len == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "ssm dims must be positive, got M={state_dim} T={seq_len} D={channels}"
            )));
        }
        Ok(Self {
            state_dim,
            seq_len,
            channels,
        })
    }
}

/// Continuous parameters of one input channel: diagonal `A`, input map `B`,
/// output map `C`, all of length M, and the step `Δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: T,
}

/// Discrete parameters of one input channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c_bar: Vec<T>,
}

impl<T: Real> DiscreteSsm<T> {
    pub fn state_dim(&self) -> usize {
        self.a_bar.len()
    }

    fn check(&self) -> Result<()> {
        let m = self.a_bar.len();
        if self.b_bar.len() != m || self.c_bar.len() != m {
            return Err(Error::shape(
                "discrete ssm",
                &[m, m, m],
                &[m, self.b_bar.len(), self.c_bar.len()],
            ));
        }
        Ok(())
    }
}

/// |Δa| below which the input factor switches to its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// Input factor `φ(Δ, a) = (e^{Δa} − 1)/a` of the exact hold, so that
/// `b̄ = φ·b`. Evaluated through `expm1`, and by its series
/// `Δ(1 + Δa/2 + (Δa)²/6)` when `|Δa|` is below [`ZOH_SERIES_THRESHOLD`].
#[inline]
pub fn zoh_input_factor<T: Real>(delta: T, a: T, rule: ZohRule) -> T {
    match rule {
        ZohRule::Simplified => delta,
        ZohRule::Exact => {
            let x = delta * a;
            if x.abs() < T::c(ZOH_SERIES_THRESHOLD) {
                delta * (T::one() + x * T::c(0.5) + x * x / T::c(6.0))
            } else {
                delta * x.exp_m1() / x
            }
        }
    }
}

/// Partial derivatives `(∂φ/∂Δ, ∂φ/∂a)` of [`zoh_input_factor`].
#[inline]
pub fn zoh_input_factor_grad<T: Real>(delta: T, a: T, rule: ZohRule) -> (T, T) {
    match rule {
        ZohRule::Simplified => (T::one(), T::zero()),
        ZohRule::Exact => {
            let x = delta * a;
            if x.abs() < T::c(ZOH_SERIES_THRESHOLD) {
                let d_delta = T::one() + x + x * x * T::c(0.5);
                let d_a = delta * delta * (T::c(0.5) + x / T::c(3.0));
                (d_delta, d_a)
            } else {
                // φ = Δ·g(x) with g(x) = expm1(x)/x; ∂φ/∂Δ = e^x, ∂φ/∂a = Δ²·g'(x)
                let gp = if x.abs() < T::c(1e-3) {
                    T::c(0.5) + x / T::c(3.0) + x * x / T::c(8.0) + x * x * x / T::c(30.0)
                } else {
                    (x * x.exp() - x.exp_m1()) / (x * x)
                };
                (x.exp(), delta * delta * gp)
            }
        }
    }
}

/// Zero-order-hold discretization of a diagonal system:
/// `ā = e^{Δa}`, `b̄ = ((e^{Δa} − 1)/a)·b`, `c̄ = c`.
pub fn discretize_zoh<T: Real>(cont: &ContinuousSsm<T>, rule: ZohRule) -> Result<DiscreteSsm<T>> {
    if !(cont.delta > T::zero()) {
        return Err(Error::Config(format!(
            "ZOH step must be positive, got {}",
            cont.delta
        )));
    }
    let m = cont.a.len();
    if cont.b.len() != m || cont.c.len() != m {
        return Err(Error::shape(
            "discretize_zoh",
            &[m, m, m],
            &[m, cont.b.len(), cont.c.len()],
        ));
    }
    let d = cont.delta;
    Ok(DiscreteSsm {
        a_bar: cont.a.iter().map(|&a| (d * a).exp()).collect(),
        b_bar: cont
            .a
            .iter()
            .zip(&cont.b)
            .map(|(&a, &b)| zoh_input_factor(d, a, rule) * b)
            .collect(),
        c_bar: cont.c.clone(),
    })
}

/// Discrete parameters that vary per step: `ā, b̄, c̄` each `[len, channels,
/// state]`.
#[derive(Clone, Debug)]
pub struct PerStepSsm<T: Real> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
    pub c_bar: Tensor<T>,
}

/// Parameters accepted by the scans.
#[derive(Clone, Copy, Debug)]
pub enum ScanParams<'a, T: Real> {
    /// One time-invariant parameter set per channel.
    Invariant(&'a [DiscreteSsm<T>]),
    PerStep(&'a PerStepSsm<T>),
}

impl<T: Real> ScanParams<'_, T> {
    /// Validates against `x [len, channels]` and returns `(len, channels, state)`.
    fn dims(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let &[len, d] = x.shape() else {
            return Err(Error::contract(
                "scan",
                format!("input must be [len, channels], got {:?}", x.shape()),
            ));
        };
        match self {
            ScanParams::Invariant(sets) => {
                if sets.len() != d {
                    return Err(Error::contract(
                        "scan",
                        format!("{} parameter sets for {d} channels", sets.len()),
                    ));
                }
                let m = sets.first().map_or(0, DiscreteSsm::state_dim);
                for s in sets.iter() {
                    s.check()?;
                    if s.state_dim() != m {
                        return Err(Error::contract("scan", "channels disagree on state dim"));
                    }
                }
                Ok((len, d, m))
            }
            ScanParams::PerStep(p) => {
                let m = p.a_bar.shape().get(2).copied().unwrap_or(0);
                for t in [&p.a_bar, &p.b_bar, &p.c_bar] {
                    if t.shape() != [len, d, m] {
                        return Err(Error::shape("scan per-step params", &[len, d, m], t.shape()));
                    }
                }
                Ok((len, d, m))
            }
        }
    }

    /// `(ā, b̄, c̄)` at step `t`, channel `d`, state `m`.
    #[inline]
    fn at(&self, t: usize, d: usize, m: usize, dims: (usize, usize, usize)) -> (T, T, T) {
        match self {
            ScanParams::Invariant(sets) => {
                let s = &sets[d];
                (s.a_bar[m], s.b_bar[m], s.c_bar[m])
            }
            ScanParams::PerStep(p) => {
                let i = (t * dims.1 + d) * dims.2 + m;
                (p.a_bar.data()[i], p.b_bar.data()[i], p.c_bar.data()[i])
            }
        }
    }
}

/// Sequential evaluation of `h_t = ā_t h_{t-1} + b̄_t x_t`, `y_t = c̄_t·h_t`
/// from `h_0 = 0`. `x` is `[len, channels]`.
pub fn scan_recurrent<T: Real>(params: ScanParams<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let dims @ (len, d, m) = params.dims(x)?;
    let mut h = vec![T::zero(); d * m];
    let mut y = Tensor::zeros(&[len, d]);
    for t in 0..len {
        for di in 0..d {
            let xv = x.data()[t * d + di];
            let mut acc = T::zero();
            for mi in 0..m {
                let (a, b, c) = params.at(t, di, mi, dims);
                let s = &mut h[di * m + mi];
                *s = a * *s + b * xv;
                acc += c * *s;
            }
            y.data_mut()[t * d + di] = acc;
        }
    }
    Ok(y)
}

/// Gradients of a recurrent scan with respect to its input and its discrete
/// per-step parameters.
#[derive(Clone, Debug)]
pub struct RecurrentGrads<T: Real> {
    pub x: Tensor<T>,
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
    pub c_bar: Tensor<T>,
}

/// Reverse pass of [`scan_recurrent`] for the output gradient `gy [len, d]`.
/// Parameter gradients come back per step (`[len, d, m]`); sum over steps
/// for time-invariant parameters.
pub fn scan_recurrent_backward<T: Real>(
    params: ScanParams<'_, T>,
    x: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<RecurrentGrads<T>> {
    let dims @ (len, d, m) = params.dims(x)?;
    if gy.shape() != x.shape() {
        return Err(Error::shape("scan_recurrent_backward", x.shape(), gy.shape()));
    }
    // forward states
    let mut states = vec![T::zero(); len * d * m];
    for t in 0..len {
        for di in 0..d {
            let xv = x.data()[t * d + di];
            for mi in 0..m {
                let (a, b, _) = params.at(t, di, mi, dims);
                let prev = if t == 0 {
                    T::zero()
                } else {
                    states[((t - 1) * d + di) * m + mi]
                };
                states[(t * d + di) * m + mi] = a * prev + b * xv;
            }
        }
    }
    let mut gx = Tensor::zeros(&[len, d]);
    let mut ga = Tensor::zeros(&[len, d, m]);
    let mut gb = Tensor::zeros(&[len, d, m]);
    let mut gc = Tensor::zeros(&[len, d, m]);
    let mut carry = vec![T::zero(); d * m];
    for t in (0..len).rev() {
        for di in 0..d {
            let g = gy.data()[t * d + di];
            let xv = x.data()[t * d + di];
            let mut gxv = T::zero();
            for mi in 0..m {
                let (a, b, c) = params.at(t, di, mi, dims);
                let i = (t * d + di) * m + mi;
                let gh = g * c + carry[di * m + mi];
                let prev = if t == 0 {
                    T::zero()
                } else {
                    states[i - d * m]
                };
                gc.data_mut()[i] = g * states[i];
                ga.data_mut()[i] = gh * prev;
                gb.data_mut()[i] = gh * xv;
                gxv += gh * b;
                carry[di * m + mi] = a * gh;
            }
            gx.data_mut()[t * d + di] = gxv;
        }
    }
    Ok(RecurrentGrads {
        x: gx,
        a_bar: ga,
        b_bar: gb,
        c_bar: gc,
    })
}

/// Convolution kernel `K [channels, len]` with `K_{d,k} = Σ_m c̄ ā^k b̄`.
/// Only time-invariant parameters have a kernel.
pub fn scan_kernel<T: Real>(params: ScanParams<'_, T>, len: usize) -> Result<Tensor<T>> {
    let ScanParams::Invariant(sets) = params else {
        return Err(Error::contract(
            "scan_kernel",
            "per-step (selective) parameters have no convolution kernel",
        ));
    };
    let d = sets.len();
    let mut k = Tensor::zeros(&[d, len]);
    for (di, s) in sets.iter().enumerate() {
        s.check()?;
        let mut pow: Vec<T> = vec![T::one(); s.state_dim()];
        for step in 0..len {
            let mut acc = T::zero();
            for mi in 0..s.state_dim() {
                acc += s.c_bar[mi] * pow[mi] * s.b_bar[mi];
                pow[mi] *= s.a_bar[mi];
            }
            k.data_mut()[di * len + step] = acc;
        }
    }
    Ok(k)
}

/// Causal convolution `y_t = Σ_{k=0}^{t} K_k x_{t-k}` per channel.
pub fn apply_conv_form<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let &[len, d] = x.shape() else {
        return Err(Error::contract("apply_conv_form", "input must be [len, channels]"));
    };
    if kernel.shape().len() != 2 || kernel.shape()[0] != d || kernel.shape()[1] < len {
        return Err(Error::shape("apply_conv_form kernel", &[d, len], kernel.shape()));
    }
    let klen = kernel.shape()[1];
    let mut y = Tensor::zeros(&[len, d]);
    for di in 0..d {
        let kd = &kernel.data()[di * klen..][..klen];
        for t in 0..len {
            let mut acc = T::zero();
            for (k, kv) in kd.iter().enumerate().take(t + 1) {
                acc += *kv * x.data()[(t - k) * d + di];
            }
            y.data_mut()[t * d + di] = acc;
        }
    }
    Ok(y)
}

/// The recurrence evaluated as a prefix scan. `partition` is the chunk
/// length handed to each worker; results are bit-identical for a fixed
/// partition regardless of thread count.
pub fn scan_parallel<T: Real>(
    params: ScanParams<'_, T>,
    x: &Tensor<T>,
    partition: usize,
) -> Result<Tensor<T>> {
    let dims @ (len, d, m) = params.dims(x)?;
    if partition == 0 {
        return Err(Error::Config("scan partition must be positive".into()));
    }
    let mut y = Tensor::zeros(&[len, d]);
    let mut a = vec![T::zero(); len];
    let mut u = vec![T::zero(); len];
    for di in 0..d {
        for mi in 0..m {
            for t in 0..len {
                let (av, bv, _) = params.at(t, di, mi, dims);
                a[t] = av;
                u[t] = bv * x.data()[t * d + di];
            }
            let h = linear_recurrence_scan(&a, &u, partition);
            for (t, hv) in h.iter().enumerate() {
                let (_, _, c) = params.at(t, di, mi, dims);
                y.data_mut()[t * d + di] += c * *hv;
            }
        }
    }
    Ok(y)
}
