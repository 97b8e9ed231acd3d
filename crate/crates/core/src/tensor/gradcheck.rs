//! Central finite-difference check of the tape's analytic gradients. The
//! numeric side is Richardson-extrapolated, with an adaptive fallback for
//! sharply curved entries.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng64;

/// How a non-scalar output is reduced to the scalar being differentiated.
#[derive(Clone, Copy, Debug)]
pub enum Reduction {
    Sum,
    /// `sum(w ⊙ y)` with fixed weights drawn uniformly from `[-1, 1]`.
    /// Avoids reductions under which the true gradient vanishes, such as the
    /// plain sum of a normalized map.
    WeightedSum { seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// derivative is zero are compared on an absolute scale.
    pub floor: f64,
    pub reduction: Reduction,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            reduction: Reduction::WeightedSum { seed: 0x5eed },
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Analytic and central-difference derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
    pub passed: bool,
}

fn reduce(g: &mut Graph<f64>, y: Var, reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Sum => Ok(g.sum(y)),
        Reduction::WeightedSum { seed } => {
            let mut rng = Rng64::new(seed);
            let w = Tensor::from_fn(g.shape(y), |_| rng.uniform(-1.0, 1.0));
            let wy = g.mul_const(y, w)?;
            Ok(g.sum(wy))
        }
    }
}

/// Ridders' polynomial extrapolation of central differences over steps
/// shrinking from `h` by 1.4, returning the estimate with the smallest
/// internal error.
fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const LEVELS: usize = 16;
    let mut prev = vec![central(h)?];
    let (mut best, mut err) = (prev[0], f64::INFINITY);
    let mut hh = h;
    for _ in 1..LEVELS {
        hh /= SHRINK;
        let mut row = vec![central(hh)?];
        let mut fac = SHRINK * SHRINK;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        let n = row.len();
        // higher orders stopped helping: round-off has taken over
        if (row[n - 1] - prev[n - 2]).abs() >= 2.0 * err {
            break;
        }
        prev = row;
    }
    Ok(best)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], reduction: Reduction) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::from_leaves(inputs);
    let vars: Vec<Var> = (0..inputs.len()).map(|i| g.param(super::ParamId(i))).collect();
    let y = f(&mut g, &vars)?;
    let s = reduce(&mut g, y, reduction)?;
    Ok(g.value(s).data()[0])
}

/// Compares the analytic gradient of `reduce(f(inputs))` with respect to every
/// element of every input against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::from_leaves(inputs);
    let vars: Vec<Var> = (0..inputs.len()).map(|i| g.param(super::ParamId(i))).collect();
    let y = f(&mut g, &vars)?;
    let s = reduce(&mut g, y, opts.reduction)?;
    let grads = g.backward(s)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
        passed: true,
    };
    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.or_zeros(vars[k], input.shape());
        for i in 0..input.len() {
            let orig = input.data()[i];
            let mut central = |h: f64| -> Result<f64> {
                perturbed[k].data_mut()[i] = orig + h;
                let plus = eval(&f, &perturbed, opts.reduction)?;
                perturbed[k].data_mut()[i] = orig - h;
                let minus = eval(&f, &perturbed, opts.reduction)?;
                perturbed[k].data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            // one Richardson step cancels the O(h²) truncation term
            let coarse = central(opts.eps)?;
            let fine = central(opts.eps / 2.0)?;
            let mut numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic.data()[i];
            if (a - numeric).abs() > opts.tolerance * a.abs().max(numeric.abs()).max(opts.floor) {
                // sharply curved entry: settle it with an adaptive tableau
                numeric = ridders(&mut central, 10.0 * opts.eps)?;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((k, i));
                report.worst_values = (a, numeric);
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}
