//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::nn::params::{ParamStore, Session};
use crate::nn::tape::Var;

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient, for a loss of magnitude at most one. Larger
/// losses scale the floor, since rounding in the differences does too.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_with_floor(analytic, numeric, REL_ERR_FLOOR)
}

fn rel_err_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `loss` against central
/// differences with step `h`, on up to `per_param` random coordinates of
/// every parameter.
pub fn check_gradients<F>(params: &ParamStore, loss: F, h: f64, per_param: usize, rng: &mut impl Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::new(params, true);
    let out = loss(&mut s)?;
    let floor = REL_ERR_FLOOR * s.tape.scalar(out).abs().max(1.0);
    let grads = s.backward(out)?;
    drop(s);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut s = Session::new(p, false);
        let out = loss(&mut s)?;
        Ok(s.tape.scalar(out))
    };

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let mut probe = params.clone();
    for (name, g) in grads.iter() {
        let n = g.numel();
        let picks = sample(rng, n, per_param.min(n));
        for i in picks {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err_with_floor(g.data()[i], numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
