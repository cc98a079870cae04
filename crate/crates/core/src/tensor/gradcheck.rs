use super::{Graph, ParameterSet, Tape, TensorError, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Number of parameter elements compared.
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares reverse-mode gradients of `loss` against central differences
/// with step `h`, for every element of every parameter. The relative error
/// is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients<F>(params: &ParameterSet<f64>, h: f64, floor: f64, loss: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &ParameterSet<f64>) -> Result<Var, TensorError>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let l = loss(&mut tape, &analytic)?;
    tape.backward(l, &mut analytic)?;

    let eval = |p: &ParameterSet<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let v = loss(&mut t, p)?;
        t.value(&v).item()
    };

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.value(id).len();
        for i in 0..n {
            let orig = params.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
