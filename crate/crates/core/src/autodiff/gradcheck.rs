use serde::Serialize;

use super::{AdError, OpKind, Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// One entry per input element, inputs in argument order.
    #[serde(skip)]
    pub rel_errors: Vec<f64>,
    pub rtol: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GradCheckReport {
    fn failed(rtol: f64, error: AdError) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            rel_errors: Vec::new(),
            rtol,
            passed: false,
            error: Some(error.to_string()),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every element of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, epsilon: f64, rtol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var, AdError>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), epsilon, rtol)
}

/// Multi-input form of [`finite_difference_check`].
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], epsilon: f64, rtol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    check(&f, xs, epsilon, rtol, None)
}

/// Same as [`finite_difference_check_many`] but with the backward rule of
/// `fault` negated on the analytic tape.
#[doc(hidden)]
pub fn finite_difference_check_with_fault<F>(
    f: F,
    xs: &[Tensor],
    epsilon: f64,
    rtol: f64,
    fault: Option<OpKind>,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    check(&f, xs, epsilon, rtol, fault)
}

fn check<F>(f: &F, xs: &[Tensor], epsilon: f64, rtol: f64, fault: Option<OpKind>) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let analytic = match analytic_grads(f, xs, fault) {
        Ok(g) => g,
        Err(e) => return GradCheckReport::failed(rtol, e),
    };
    let mut rel_errors = Vec::new();
    let mut inputs: Vec<Tensor> = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        for j in 0..x.len() {
            let orig = x.values()[j];
            inputs[i].values_mut()[j] = orig + epsilon;
            let plus = evaluate(f, &inputs);
            inputs[i].values_mut()[j] = orig - epsilon;
            let minus = evaluate(f, &inputs);
            inputs[i].values_mut()[j] = orig;
            match (plus, minus) {
                (Ok(p), Ok(m)) => {
                    let numeric = (p - m) / (2.0 * epsilon);
                    rel_errors.push(relative_error(analytic[i][j], numeric));
                }
                (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(rtol, e),
            }
        }
    }
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        max_rel_error,
        rel_errors,
        rtol,
        passed: max_rel_error < rtol,
        error: None,
    }
}

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    let vars = xs
        .iter()
        .map(|x| tape.constant(x.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(AdError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

fn analytic_grads<F>(f: &F, xs: &[Tensor], fault: Option<OpKind>) -> Result<Vec<Vec<f64>>, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars = xs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect())
}
