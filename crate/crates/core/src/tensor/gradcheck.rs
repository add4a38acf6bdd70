use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative deviations; below it the deviation is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_abs_dev: f64,
    /// `|tape - fd| / max(|tape|, |fd|, REL_FLOOR)`, maximized over elements.
    pub max_rel_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_dev(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_dev).fold(0.0, f64::max)
    }

    pub fn max_abs_dev(&self) -> f64 {
        self.entries.iter().map(|e| e.max_abs_dev).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar `f` against central finite
/// differences with step `eps`, element by element.
///
/// `f` receives the tape and one leaf per parameter (in order) and must
/// return a scalar. Functions containing [`Tape::spike`] are only valid in
/// regions where no potential sits within `eps` of a threshold or of the
/// surrogate window edges; the harness cannot detect that by itself.
pub fn grad_check<F>(f: F, params: &[(&str, Tensor)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter {
            name: "eps",
            value: eps,
            expected: "> 0",
        });
    }
    let eval = |values: &[Tensor], track: bool| -> Result<(Tape, Vec<Var>, f64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(track)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if track {
            tape.backward(out)?;
        }
        Ok((tape, vars, v))
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (tape, vars, f0) = eval(&values, true)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective at the base point".into()));
    }

    let mut report = GradCheckReport::default();
    for (pi, (name, p)) in params.iter().enumerate() {
        let analytic = tape.grad(vars[pi]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut entry = GradCheckEntry {
            name: name.to_string(),
            max_abs_dev: 0.0,
            max_rel_dev: 0.0,
        };
        for j in 0..p.numel() {
            let orig = p.data()[j];
            values[pi].data_mut()[j] = orig + eps;
            let (_, _, plus) = eval(&values, false)?;
            values[pi].data_mut()[j] = orig - eps;
            let (_, _, minus) = eval(&values, false)?;
            values[pi].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{name}` element {j}")));
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            entry.max_abs_dev = entry.max_abs_dev.max(abs);
            entry.max_rel_dev = entry.max_rel_dev.max(rel);
        }
        report.entries.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::from_vec(vec![0.3, -0.7]);
        let r = grad_check(|t, _| Ok(t.scalar(4.0)), &[("w", p)], 1e-4).unwrap();
        assert_eq!(r.max_abs_dev(), 0.0);
    }

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::scalar(1.0);
        let r = grad_check(|t, v| Ok(t.scale(v[0], 3.0)), &[("w", p)], 1e-4).unwrap();
        assert!(r.max_abs_dev() < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let p = Tensor::scalar(0.0);
        // 1e308 * w overflows under the ±eps perturbation.
        let err = grad_check(
            |t, v| {
                let big = t.scale(v[0], 1e308);
                let y = t.scale(big, 1e10);
                Ok(y)
            },
            &[("gain", p)],
            1e-4,
        );
        match err {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("gain")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[("w", p)], 0.0).is_err());
    }
}
