//! Central finite-difference gradient checking.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Magnitudes below this count as this in the relative-error denominator.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// An input tensor for a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Input {
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Self {
        Self {
            values,
            shape: shape.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input, element) where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Input], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| {
            if track {
                tape.variable(x.values.clone(), &x.shape)
            } else {
                tape.constant(x.values.clone(), &x.shape)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`, over every element of every input.
pub fn check<F>(f: F, inputs: &[Input], h: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.values.len() {
            probe[i].values[j] = x.values[j] + h;
            let (t, _, o) = eval(&f, &probe, false)?;
            let up = t.scalar(o);
            probe[i].values[j] = x.values[j] - h;
            let (t, _, o) = eval(&f, &probe, false)?;
            let down = t.scalar(o);
            probe[i].values[j] = x.values[j];
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFiniteGradient(format!("input {i} element {j}")));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// [`check`] with the default step and floor.
pub fn check_default<F>(f: F, inputs: &[Input]) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, inputs, DEFAULT_STEP, DEFAULT_FLOOR)
}

/// Gradient check of a scalar loss with respect to every trainable scalar in
/// `store`; frozen parameters are skipped.
pub fn check_params<F>(store: &ParamStore, f: F, h: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut grads = store.clone();
    grads.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &grads)?;
    tape.backward(out)?;
    tape.accumulate_into(&mut grads)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        if store.is_frozen(name) {
            continue;
        }
        let n = store.values(name)?.len();
        for j in 0..n {
            let orig = store.values(name)?[j];
            let mut at = |v: f64| -> Result<f64> {
                probe.get_mut(name).expect("present").values[j] = v;
                let mut t = Tape::new();
                let o = f(&mut t, &probe)?;
                Ok(t.scalar(o))
            };
            let up = at(orig + h)?;
            let down = at(orig - h)?;
            at(orig)?;
            let numeric = (up - down) / (2.0 * h);
            let a = grads.get(name).expect("present").grad[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFiniteGradient(format!("{name}[{j}]")));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
