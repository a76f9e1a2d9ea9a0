use crate::error::{NddeError, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(NddeError::Input(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let fp = f(&x)?;
        x[i] = point[i] - step;
        let fm = f(&x)?;
        x[i] = point[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(NddeError::Numerical(format!(
                "non-finite evaluation while differencing coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}

/// `|a - b| / max(|b|, floor)`; the comparison used in every gradient check.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_difference_gradient(|x| Ok(x[0] * x[0] + x[1] * x[1]), &[1.0, 2.0], 1e-5)
            .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let g = finite_difference_gradient(|_| Ok(3.5), &[0.1, -9.0, 4.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_difference_gradient(|x| Ok(x[0].sin()), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(finite_difference_gradient(|x| Ok(x[0]), &[0.0], 0.0).is_err());
        assert!(finite_difference_gradient(|x| Ok(x[0]), &[0.0], -1.0).is_err());
        assert!(matches!(
            finite_difference_gradient(|_| Ok(f64::NAN), &[0.0], 1e-5),
            Err(NddeError::Numerical(_))
        ));
    }
}
