use super::{Graph, Tensor, TensorError, Var};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e−8)`.
    pub max_relative_error: f64,
    /// Component attaining the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of `sum(op(input))` with central
/// finite differences of step `eps` taken on every input component.
///
/// `op` builds its output from the input node on a fresh graph each call.
/// Any non-finite forward value or gradient is reported with the offending
/// input component.
pub fn grad_check<F>(op: F, input: &Tensor<f64>, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |x: Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.leaf(x, false);
        let out = op(&mut g, v)?;
        let s = g.sum(out);
        Ok(g.value(s).data()[0])
    };

    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let out = op(&mut g, x)?;
    let s = g.sum(out);
    g.backward(s)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);
    if let Some(index) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { index });
    }

    let mut numeric = Vec::with_capacity(input.len());
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let d = (up - down) / (2.0 * eps);
        if !d.is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        numeric.push(d);
    }

    let (worst_index, max_relative_error) = relative_errors(&analytic, &numeric)
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}

pub(crate) fn relative_errors<'a>(
    analytic: &'a [f64],
    numeric: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
}
