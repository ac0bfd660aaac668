use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::NumericsError;

/// Largest relative error between backward gradients and central finite
/// differences over every listed parameter entry.
///
/// `f` must rebuild the whole computation on the fresh tape it is handed and
/// return a scalar. Relative error is `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &mut ParamStore, ids: &[ParamId], epsilon: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params.get(id).len()])
        })
        .collect();
    let eval = |params: &ParamStore| -> Result<f64, NumericsError> {
        let mut t = Tape::new();
        let v = f(&mut t, params)?;
        Ok(t.value(v).item())
    };
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        for n in 0..params.get(id).len() {
            let orig = params.get(id).data()[n];
            params.get_mut(id).data_mut()[n] = orig + epsilon;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[n] = orig - epsilon;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[n] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[k][n];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
