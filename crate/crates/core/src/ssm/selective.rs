//! Input-dependent (selective) scan.
//!
//! Per token `x_t ∈ R^D`:
//! `B_t = W_B x_t + b_B`, `C_t = W_C x_t + b_C` (both `R^M`),
//! `Δ_t = softplus(W_Δ x_t + b_Δ)` (one step per channel), and a static
//! diagonal `A = −exp(A_log)` of shape `[D, M]`. Each channel `d` then runs
//! the zero-order-hold recurrence with `ā = exp(Δ_{t,d} A_{d,m})` and
//! `b̄ = φ(Δ_{t,d}, A_{d,m}) B_{t,m}`.

use serde::{Deserialize, Serialize};

use super::{zoh_input_factor, zoh_input_factor_grad};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamBuilder, ParamId, Real, Tensor, Var};

/// Which input factor the discretization uses for `b̄`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZohRule {
    /// `b̄ = (ΔA)^{-1}(exp(ΔA) − I)ΔB`.
    #[default]
    Exact,
    /// `b̄ = ΔB`.
    Simplified,
}

fn check_shapes<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let &[len, d] = x.shape() else {
        return Err(Error::contract("selective_scan", "x must be [len, channels]"));
    };
    let m = a.shape().get(1).copied().unwrap_or(0);
    if a.shape() != [d, m] {
        return Err(Error::shape("selective_scan A", &[d, m], a.shape()));
    }
    if delta.shape() != [len, d] {
        return Err(Error::shape("selective_scan delta", &[len, d], delta.shape()));
    }
    for (t, name) in [(b, "selective_scan B"), (c, "selective_scan C")] {
        if t.shape() != [len, m] {
            return Err(Error::shape(name, &[len, m], t.shape()));
        }
    }
    Ok((len, d, m))
}

/// Forward pass. Returns `y [len, d]` and all states `[len, d, m]`.
pub(crate) fn scan_forward<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    rule: ZohRule,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (len, d, m) = check_shapes(x, delta, a, b, c)?;
    let (xd, dd, ad, bd, cd) = (x.data(), delta.data(), a.data(), b.data(), c.data());
    let mut states = vec![T::zero(); len * d * m];
    let mut y = Tensor::zeros(&[len, d]);
    for t in 0..len {
        let (prev, cur) = states.split_at_mut(t * d * m);
        let prev = if t == 0 { None } else { Some(&prev[(t - 1) * d * m..]) };
        for di in 0..d {
            let dt = dd[t * d + di];
            let xv = xd[t * d + di];
            let mut acc = T::zero();
            for mi in 0..m {
                let av = ad[di * m + mi];
                let abar = (dt * av).exp();
                let phi = zoh_input_factor(dt, av, rule);
                let hp = prev.map_or(T::zero(), |p| p[di * m + mi]);
                let h = abar * hp + phi * bd[t * m + mi] * xv;
                cur[di * m + mi] = h;
                acc += cd[t * m + mi] * h;
            }
            y.data_mut()[t * d + di] = acc;
        }
    }
    Ok((y, states))
}

pub(crate) struct ScanGrads<T: Real> {
    pub x: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    rule: ZohRule,
    states: &[T],
    gy: &Tensor<T>,
) -> ScanGrads<T> {
    let (len, d) = (x.shape()[0], x.shape()[1]);
    let m = a.shape()[1];
    let (xd, dd, ad, bd, cd, gyd) = (x.data(), delta.data(), a.data(), b.data(), c.data(), gy.data());
    let mut gx = Tensor::zeros(x.shape());
    let mut gdelta = Tensor::zeros(delta.shape());
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let mut gc = Tensor::zeros(c.shape());
    // carry[d, m] = ā_{t+1} · ∂L/∂h_{t+1}
    let mut carry = vec![T::zero(); d * m];
    for t in (0..len).rev() {
        for di in 0..d {
            let dt = dd[t * d + di];
            let xv = xd[t * d + di];
            let g = gyd[t * d + di];
            let mut gxv = T::zero();
            let mut gdt = T::zero();
            for mi in 0..m {
                let av = ad[di * m + mi];
                let bv = bd[t * m + mi];
                let abar = (dt * av).exp();
                let phi = zoh_input_factor(dt, av, rule);
                let (dphi_dt, dphi_da) = zoh_input_factor_grad(dt, av, rule);
                let i = (t * d + di) * m + mi;
                let hp = if t == 0 { T::zero() } else { states[i - d * m] };
                let gh = g * cd[t * m + mi] + carry[di * m + mi];
                gc.data_mut()[t * m + mi] += g * states[i];
                let g_abar = gh * hp;
                let g_beta = gh * xv; // beta = phi * B
                gxv += gh * phi * bv;
                gb.data_mut()[t * m + mi] += g_beta * phi;
                let g_phi = g_beta * bv;
                gdt += g_abar * av * abar + g_phi * dphi_dt;
                ga.data_mut()[di * m + mi] += g_abar * dt * abar + g_phi * dphi_da;
                carry[di * m + mi] = abar * gh;
            }
            gx.data_mut()[t * d + di] = gxv;
            gdelta.data_mut()[t * d + di] = gdt;
        }
    }
    ScanGrads {
        x: gx,
        delta: gdelta,
        a: ga,
        b: gb,
        c: gc,
    }
}

/// Selective parameter projections of one scan over `channels`-wide tokens
/// with a `state_dim`-dimensional state per channel.
#[derive(Clone, Debug)]
pub struct SelectiveScan {
    pub channels: usize,
    pub state_dim: usize,
    pub rule: ZohRule,
    pub b_proj: ParamId,
    pub b_bias: ParamId,
    pub c_proj: ParamId,
    pub c_bias: ParamId,
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
}

/// Graph handles of the per-step parameters.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveVars {
    /// `[len, D]`, strictly positive.
    pub delta: Var,
    /// `[D, M]`, strictly negative.
    pub a: Var,
    /// `[len, M]`.
    pub b: Var,
    /// `[len, M]`.
    pub c: Var,
}

impl SelectiveScan {
    pub fn build(pb: &mut ParamBuilder, channels: usize, state_dim: usize, rule: ZohRule) -> Self {
        let (d, m) = (channels, state_dim);
        // A_log = ln(1..=M) per channel, the usual real diagonal initialization
        let a_init: Vec<f64> = (0..d)
            .flat_map(|_| (1..=m).map(|k| (k as f64).ln()))
            .collect();
        Self {
            channels,
            state_dim,
            rule,
            b_proj: pb.add("b_proj", &[m, d], Init::FanIn(d)),
            b_bias: pb.add("b_bias", &[m], Init::Zeros),
            c_proj: pb.add("c_proj", &[m, d], Init::FanIn(d)),
            c_bias: pb.add("c_bias", &[m], Init::Zeros),
            dt_proj: pb.add("dt_proj", &[d, d], Init::FanIn(d)),
            // softplus(-2) ≈ 0.127
            dt_bias: pb.add("dt_bias", &[d], Init::Const(-2.0)),
            a_log: pb.add("a_log", &[d, m], Init::Values(a_init)),
        }
    }

    /// Per-step `Δ_t, B_t, C_t` and static `A` for tokens `x [len, D]`.
    pub fn params<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<SelectiveVars> {
        let b = g.linear(x, g.param(self.b_proj), Some(g.param(self.b_bias)))?;
        let c = g.linear(x, g.param(self.c_proj), Some(g.param(self.c_bias)))?;
        let dt = g.linear(x, g.param(self.dt_proj), Some(g.param(self.dt_bias)))?;
        let delta = g.softplus(dt);
        let ea = g.exp(g.param(self.a_log));
        let a = g.neg(ea);
        Ok(SelectiveVars { delta, a, b, c })
    }

    /// Runs the selective scan over tokens `x [len, D]`, returning `[len, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let p = self.params(g, x)?;
        g.selective_scan(x, p.delta, p.a, p.b, p.c, self.rule)
    }

    /// Multiply-accumulates per token: the three projections plus
    /// discretization, state update and readout.
    pub fn macs_per_token(&self) -> u64 {
        let (d, m) = (self.channels as u64, self.state_dim as u64);
        2 * d * m + d * d + 3 * d * m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;
    use crate::ssm::{scan_recurrent, PerStepSsm, ScanParams};

    fn rand_tensor(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    #[test]
    fn fused_kernel_matches_discretized_recurrence() {
        let mut rng = Rng64::new(3);
        let (len, d, m) = (9, 3, 4);
        let x = rand_tensor(&mut rng, &[len, d], -1.0, 1.0);
        let delta = rand_tensor(&mut rng, &[len, d], 0.05, 1.0);
        let a = rand_tensor(&mut rng, &[d, m], -2.0, -0.1);
        let b = rand_tensor(&mut rng, &[len, m], -1.0, 1.0);
        let c = rand_tensor(&mut rng, &[len, m], -1.0, 1.0);
        let (y, _) = scan_forward(&x, &delta, &a, &b, &c, ZohRule::Exact).unwrap();

        let mut p = PerStepSsm {
            a_bar: Tensor::zeros(&[len, d, m]),
            b_bar: Tensor::zeros(&[len, d, m]),
            c_bar: Tensor::zeros(&[len, d, m]),
        };
        for t in 0..len {
            for di in 0..d {
                let cont = crate::ssm::ContinuousSsm {
                    a: (0..m).map(|mi| a.data()[di * m + mi]).collect(),
                    b: (0..m).map(|mi| b.data()[t * m + mi]).collect(),
                    c: (0..m).map(|mi| c.data()[t * m + mi]).collect(),
                    delta: delta.data()[t * d + di],
                };
                let disc = crate::ssm::discretize_zoh(&cont, ZohRule::Exact).unwrap();
                for mi in 0..m {
                    let i = (t * d + di) * m + mi;
                    p.a_bar.data_mut()[i] = disc.a_bar[mi];
                    p.b_bar.data_mut()[i] = disc.b_bar[mi];
                    p.c_bar.data_mut()[i] = disc.c_bar[mi];
                }
            }
        }
        let oracle = scan_recurrent(ScanParams::PerStep(&p), &x).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn zero_input_gives_ln2_steps_and_unit_decay() {
        let mut pb = ParamBuilder::new();
        let s = SelectiveScan::build(&mut pb, 3, 2, ZohRule::Exact);
        let mut store = pb.materialize::<f64>(&mut Rng64::new(0));
        for id in [s.b_proj, s.c_proj, s.dt_proj, s.dt_bias, s.a_log] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&store);
        let x = g.leaf(Tensor::zeros(&[5, 3]));
        let p = s.params(&mut g, x).unwrap();
        assert!(g
            .value(p.delta)
            .data()
            .iter()
            .all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        assert!(g.value(p.a).data().iter().all(|v| *v == -1.0));
    }

    #[test]
    fn zero_b_gives_zero_output() {
        let mut pb = ParamBuilder::new();
        let s = SelectiveScan::build(&mut pb, 2, 3, ZohRule::Exact);
        let mut store = pb.materialize::<f64>(&mut Rng64::new(5));
        store.get_mut(s.b_proj).value.data_mut().fill(0.0);
        store.get_mut(s.b_bias).value.data_mut().fill(0.0);
        let mut g = Graph::with_params(&store);
        let mut rng = Rng64::new(1);
        let x = g.leaf(rand_tensor(&mut rng, &[7, 2], -1.0, 1.0));
        let y = s.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let z = |s: &[usize]| Tensor::<f64>::zeros(s);
        assert!(scan_forward(&z(&[4, 2]), &z(&[4, 2]), &z(&[2, 3]), &z(&[4, 2]), &z(&[4, 3]), ZohRule::Exact).is_err());
        assert!(scan_forward(&z(&[4, 2]), &z(&[3, 2]), &z(&[2, 3]), &z(&[4, 3]), &z(&[4, 3]), ZohRule::Exact).is_err());
    }
}
