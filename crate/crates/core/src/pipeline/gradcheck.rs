//! Finite-difference gradient checks over seeded random shapes for every
//! differentiable building block.

use serde::Serialize;

use crate::blocks::{Csg, CsgConfig, Hsb, HsbConfig, SeAttention};
use crate::config::RunConfig;
use crate::cross_scan::{Ss2d, Ss2dConfig};
use crate::error::Result;
use crate::rng::Rng64;
use crate::ssm::SelectiveScan;
use crate::tensor::{grad_check, GradCheckOptions, Graph, ParamBuilder, Reduction, Tensor, Var};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub op: &'static str,
    pub case: usize,
    /// Human-readable description of the sampled geometry.
    pub shape: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Analytic and central-difference derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

impl GradCheckSummary {
    /// Largest relative error per operator, in suite order.
    pub fn worst_by_op(&self) -> Vec<(&'static str, f64, usize)> {
        let mut out: Vec<(&'static str, f64, usize)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(op, _, _)| *op == e.op) {
                Some(w) => {
                    w.1 = w.1.max(e.max_rel_error);
                    w.2 += 1;
                }
                None => out.push((e.op, e.max_rel_error, 1)),
            }
        }
        out
    }
}

/// Narrowest layer norm sampled. Over one or two channels the normalized
/// output switches sign across a band of width about sqrt(eps), where no
/// finite-difference step resolves it.
const NORM_MIN: usize = 3;

pub const SUITE_OPS: [&str; 7] = ["conv2d", "layer_norm", "se_attention", "selective_scan", "ss2d", "hsb", "csg"];

fn uniform(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn pick(rng: &mut Rng64, lo: usize, hi: usize) -> usize {
    rng.int_inclusive(lo as u64, hi as u64) as usize
}

/// Parameters of a block followed by the input tensor, the layout expected
/// by the closures below.
fn with_input(pb: &ParamBuilder, rng: &mut Rng64, x: Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut inputs = pb.materialize::<f64>(rng).values();
    inputs.push(x);
    inputs
}

struct Case {
    shape: String,
    inputs: Vec<Tensor<f64>>,
    f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
}

fn small_ssm(cfg: &Ss2dConfig, rng: &mut Rng64) -> Ss2dConfig {
    Ss2dConfig {
        state_dim: pick(rng, 1, cfg.state_dim.clamp(1, 3)),
        ..cfg.clone()
    }
}

fn make_case(op: &str, cfg: &RunConfig, rng: &mut Rng64) -> Result<Case> {
    let m = &cfg.model;
    Ok(match op {
        "conv2d" => {
            let groups = pick(rng, 1, 2);
            let cin = groups * pick(rng, 1, 2);
            let cout = groups * pick(rng, 1, 2);
            let k = [1, 3][pick(rng, 0, 1)];
            let stride = pick(rng, 1, 2);
            let pad = pick(rng, 0, k / 2);
            let (h, w) = (pick(rng, k, 5), pick(rng, k, 5));
            let inputs = vec![
                uniform(rng, &[1, cin, h, w]),
                uniform(rng, &[cout, cin / groups, k, k]),
                uniform(rng, &[cout]),
            ];
            Case {
                shape: format!("x[1,{cin},{h},{w}] w[{cout},{},{k},{k}] s{stride} p{pad} g{groups}", cin / groups),
                inputs,
                f: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups)),
            }
        }
        "layer_norm" => {
            let (c, h, w) = (pick(rng, NORM_MIN, 6), pick(rng, 1, 4), pick(rng, 1, 4));
            let inputs = vec![uniform(rng, &[1, c, h, w]), uniform(rng, &[c]), uniform(rng, &[c])];
            let eps = m.ssm.ln_eps;
            Case {
                shape: format!("x[1,{c},{h},{w}]"),
                inputs,
                f: Box::new(move |g, v| g.layer_norm(v[0], v[1], v[2], eps)),
            }
        }
        "se_attention" => {
            let (c, h, w) = (pick(rng, 1, 8), pick(rng, 1, 3), pick(rng, 1, 3));
            let mut pb = ParamBuilder::new();
            let se = SeAttention::build(&mut pb, c, m.hsb.se_reduction);
            let x = uniform(rng, &[1, c, h, w]);
            let inputs = with_input(&pb, rng, x);
            let n = inputs.len() - 1;
            Case {
                shape: format!("x[1,{c},{h},{w}] hidden {}", se.hidden),
                inputs,
                f: Box::new(move |g, v| se.gates(g, v[n])),
            }
        }
        "selective_scan" => {
            let (len, d, ms) = (pick(rng, 1, 8), pick(rng, 1, 3), pick(rng, 1, 4));
            let mut pb = ParamBuilder::new();
            let s = SelectiveScan::build(&mut pb, d, ms, m.ssm.zoh);
            let x = uniform(rng, &[len, d]);
            let inputs = with_input(&pb, rng, x);
            let n = inputs.len() - 1;
            Case {
                shape: format!("x[{len},{d}] M={ms}"),
                inputs,
                f: Box::new(move |g, v| s.forward(g, v[n])),
            }
        }
        "ss2d" => {
            let (c, h, w) = (pick(rng, NORM_MIN, NORM_MIN + 1), pick(rng, 1, 3), pick(rng, 1, 3));
            let ssm = small_ssm(&m.ssm, rng);
            let mut pb = ParamBuilder::new();
            let b = Ss2d::build(&mut pb, c, &ssm);
            let x = uniform(rng, &[1, c, h, w]);
            let inputs = with_input(&pb, rng, x);
            let n = inputs.len() - 1;
            Case {
                shape: format!("x[1,{c},{h},{w}] M={}", ssm.state_dim),
                inputs,
                f: Box::new(move |g, v| b.forward(g, v[n])),
            }
        }
        "hsb" => {
            let hsb = HsbConfig { ..m.hsb.clone() };
            let c = hsb.reduction * pick(rng, NORM_MIN, NORM_MIN + 1);
            let (h, w) = (pick(rng, 1, 3), pick(rng, 1, 3));
            let ssm = small_ssm(&m.ssm, rng);
            let mut pb = ParamBuilder::new();
            let b = Hsb::build(&mut pb, c, &hsb, &ssm)?;
            let x = uniform(rng, &[1, c, h, w]);
            let inputs = with_input(&pb, rng, x);
            let n = inputs.len() - 1;
            Case {
                shape: format!("x[1,{c},{h},{w}] M={}", ssm.state_dim),
                inputs,
                f: Box::new(move |g, v| b.forward(g, v[n])),
            }
        }
        "csg" => {
            let csg = CsgConfig {
                hsb_layers: m.csg.hsb_layers.clamp(1, 2),
                ..m.csg.clone()
            };
            // smallest width whose HSBs normalize at least NORM_MIN channels
            let inner = |c: usize| {
                let b = if csg.enabled { csg.branch_channels(c).ok()? } else { c };
                (b % m.hsb.reduction == 0).then_some(b / m.hsb.reduction)
            };
            let unit = (1..=64).find(|&c| inner(c).is_some_and(|i| i >= NORM_MIN)).unwrap_or(4 * NORM_MIN);
            let c = unit + pick(rng, 0, 1) * (1..=64).find(|&k| inner(unit + k).is_some()).unwrap_or(unit);
            let (h, w) = (pick(rng, 1, 3), pick(rng, 1, 2));
            let ssm = small_ssm(&m.ssm, rng);
            let mut pb = ParamBuilder::new();
            let b = Csg::build(&mut pb, c, &csg, &m.hsb, &ssm)?;
            let x = uniform(rng, &[1, c, h, w]);
            let inputs = with_input(&pb, rng, x);
            let n = inputs.len() - 1;
            Case {
                shape: format!("x[1,{c},{h},{w}] layers {} M={}", csg.hsb_layers, ssm.state_dim),
                inputs,
                f: Box::new(move |g, v| b.forward(g, v[n])),
            }
        }
        other => unreachable!("unknown suite op {other}"),
    })
}

/// Central-difference check of every suite operator on `cases` random
/// geometries each, honoring the block toggles of `cfg`.
pub fn gradcheck_suite(cfg: &RunConfig, cases: usize, seed: u64) -> Result<GradCheckSummary> {
    let opts = GradCheckOptions::default();
    let mut entries = Vec::with_capacity(SUITE_OPS.len() * cases);
    for (k, op) in SUITE_OPS.into_iter().enumerate() {
        let mut rng = Rng64::new(seed.wrapping_add(k as u64 * 0x9e37_79b9));
        for case in 0..cases {
            let c = make_case(op, cfg, &mut rng)?;
            let case_opts = GradCheckOptions {
                reduction: Reduction::WeightedSum { seed: rng.next_u64() },
                ..opts
            };
            let r = grad_check(&c.f, &c.inputs, case_opts)?;
            entries.push(GradCheckEntry {
                op,
                case,
                shape: c.shape,
                checked: r.checked,
                max_rel_error: r.max_rel_error,
                worst_values: r.worst_values,
                passed: r.passed,
            });
        }
    }
    Ok(GradCheckSummary {
        tolerance: opts.tolerance,
        passed: entries.iter().all(|e| e.passed),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pillar::GridSpec;

    #[test]
    fn small_suite_passes() {
        let cfg = RunConfig::with_grid(GridSpec::default());
        let s = gradcheck_suite(&cfg, 20, 11).unwrap();
        assert_eq!(s.entries.len(), 20 * SUITE_OPS.len());
        for e in &s.entries {
            assert!(e.passed, "{e:?}");
            assert!(e.checked > 0);
        }
        assert_eq!(s.worst_by_op().len(), SUITE_OPS.len());
    }
}
