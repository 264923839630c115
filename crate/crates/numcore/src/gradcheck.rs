use crate::{Bound, NumError, ParamStore, Tape, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares analytic gradients against central differences
/// `(f(p+h) − f(p−h)) / 2h` for every entry of every parameter.
///
/// `f` must rebuild its graph from the bound parameters and be a pure
/// function of them (seed any sampling inside `f`). The error per entry is
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<E, G>(params: &ParamStore<f64>, mut f: G, h: f64, tol: f64) -> Result<GradCheckReport, E>
where
    E: From<NumError>,
    G: FnMut(&mut Tape<f64>, &Bound) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = bound.gradients(&tape, &grads);

    let mut eval = |p: &ParamStore<f64>, name: &str, index: usize| -> Result<f64, E> {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let l = f(&mut t, &b)?;
        let v = t.item(l);
        if !v.is_finite() {
            return Err(NumError::NonFinite {
                name: name.to_string(),
                index,
            }
            .into());
        }
        Ok(v)
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
        tol,
        passed: true,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.numel());
        for i in 0..n {
            let orig = params.get(name).expect("param").data()[i];
            probe.get_mut(name).expect("param").data_mut()[i] = orig + h;
            let up = eval(&probe, name, i)?;
            probe.get_mut(name).expect("param").data_mut()[i] = orig - h;
            let down = eval(&probe, name, i)?;
            probe.get_mut(name).expect("param").data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(name).expect("grad").data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
