use crate::error::{check_len, NddeError, Result};

/// Vector-valued natural cubic spline (zero second derivative at both ends).
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalCubicSpline {
    times: Vec<f64>,
    dim: usize,
    /// knot values, `times.len() x dim`
    values: Vec<f64>,
    /// second derivatives at the knots, same layout as `values`
    second: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn fit(samples: &[(f64, Vec<f64>)]) -> Result<Self> {
        if samples.len() < 3 {
            return Err(NddeError::Input(format!(
                "natural cubic spline needs at least 3 samples, got {}",
                samples.len()
            )));
        }
        let dim = samples[0].1.len();
        if dim == 0 {
            return Err(NddeError::Input("spline samples must be non-empty".into()));
        }
        for w in samples.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(NddeError::Input(format!("duplicate spline knot at t = {}", w[0].0)));
            }
            if !(w[1].0 > w[0].0) {
                return Err(NddeError::Input("spline knot times must be strictly increasing".into()));
            }
        }
        let mut values = Vec::with_capacity(samples.len() * dim);
        for (t, v) in samples {
            check_len("spline sample width", dim, v.len())?;
            if !t.is_finite() || v.iter().any(|x| !x.is_finite()) {
                return Err(NddeError::Input("non-finite spline sample".into()));
            }
            values.extend_from_slice(v);
        }
        let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let k = times.len();
        let mut second = vec![0.0; k * dim];

        // Interior equations, Thomas algorithm on the (k-2) x (k-2) system.
        let interior = k - 2;
        let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let mut c_prime = vec![0.0; interior];
        let mut d_prime = vec![0.0; interior];
        for c in 0..dim {
            for i in 0..interior {
                let j = i + 1;
                let a = h[j - 1];
                let b = 2.0 * (h[j - 1] + h[j]);
                let cc = h[j];
                let y = |q: usize| values[q * dim + c];
                let rhs = 6.0 * ((y(j + 1) - y(j)) / h[j] - (y(j) - y(j - 1)) / h[j - 1]);
                if i == 0 {
                    c_prime[i] = cc / b;
                    d_prime[i] = rhs / b;
                } else {
                    let denom = b - a * c_prime[i - 1];
                    c_prime[i] = cc / denom;
                    d_prime[i] = (rhs - a * d_prime[i - 1]) / denom;
                }
            }
            for i in (0..interior).rev() {
                let next = if i + 1 < interior {
                    second[(i + 2) * dim + c]
                } else {
                    0.0
                };
                second[(i + 1) * dim + c] = d_prime[i] - c_prime[i] * next;
            }
        }
        Ok(Self {
            times,
            dim,
            values,
            second,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    pub fn knots(&self) -> &[f64] {
        &self.times
    }

    fn interval(&self, t: f64) -> Result<usize> {
        let (lo, hi) = self.domain();
        let tol = 1e-12 * (hi - lo).abs().max(1.0);
        if !(t >= lo - tol && t <= hi + tol) {
            return Err(NddeError::Domain(format!(
                "t = {t} outside spline domain [{lo}, {hi}]"
            )));
        }
        let idx = self.times.partition_point(|&x| x <= t);
        Ok(idx.clamp(1, self.times.len() - 1) - 1)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let i = self.interval(t)?;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        let d = self.dim;
        for c in 0..d {
            let (y0, y1) = (self.values[i * d + c], self.values[(i + 1) * d + c]);
            let (m0, m1) = (self.second[i * d + c], self.second[(i + 1) * d + c]);
            out[c] = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        }
        Ok(())
    }

    /// Analytic first derivative of the cubic pieces.
    pub fn derivative_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let i = self.interval(t)?;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        let d = self.dim;
        for c in 0..d {
            let (y0, y1) = (self.values[i * d + c], self.values[(i + 1) * d + c]);
            let (m0, m1) = (self.second[i * d + c], self.second[(i + 1) * d + c]);
            out[c] = (y1 - y0) / h + ((1.0 - 3.0 * a * a) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0;
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }
}
