use crate::error::{check_len, NddeError, Result};
use crate::solver::Trajectory;

/// Cotangents `dL/dh(t_i)` at observation times, sorted by descending time,
/// which is the order the backward pass consumes them in.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationLossGrads {
    entries: Vec<(f64, Vec<f64>)>,
}

impl ObservationLossGrads {
    pub fn new(mut entries: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        if let Some((_, first)) = entries.first() {
            let d = first.len();
            for (t, c) in &entries {
                check_len("observation cotangent", d, c.len())?;
                if !t.is_finite() || c.iter().any(|v| !v.is_finite()) {
                    return Err(NddeError::Numerical(format!(
                        "non-finite observation cotangent at t = {t}"
                    )));
                }
            }
        }
        entries.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(Self { entries })
    }

    /// A single cotangent at time `t`.
    pub fn single(t: f64, cotangent: Vec<f64>) -> Result<Self> {
        Self::new(vec![(t, cotangent)])
    }

    pub fn entries(&self) -> &[(f64, Vec<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|(_, c)| c.len())
    }
}

/// A target value observed at time `time`. For [`LossSpec::LogisticReadout`]
/// the target is the one-element label `[+1]` or `[-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub target: Vec<f64>,
}

impl Observation {
    pub fn new(time: f64, target: Vec<f64>) -> Self {
        Self { time, target }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `sum_i ||h(t_i) - y_i||^2 / (count * d)`.
    Mse,
    /// `sum_i ||h(t_i) - y_i||^2`.
    SumSquares,
    /// Mean logistic loss `log(1 + exp(-y z))` of the readout `z = w . h + b`.
    LogisticReadout { weights: Vec<f64>, bias: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub cotangents: ObservationLossGrads,
    /// Gradient with respect to `(weights, bias)` for the readout loss.
    pub readout_grad: Option<Vec<f64>>,
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value, per-observation cotangents and readout gradient from the
/// observed states (one per observation, in the same order).
pub fn loss_from_states(
    spec: &LossSpec,
    states: &[Vec<f64>],
    observations: &[Observation],
) -> Result<(f64, Vec<Vec<f64>>, Option<Vec<f64>>)> {
    check_len("observed states", observations.len(), states.len())?;
    if observations.is_empty() {
        return Err(NddeError::Input("loss needs at least one observation".into()));
    }
    let count = observations.len() as f64;
    match spec {
        LossSpec::Mse | LossSpec::SumSquares => {
            let d = states[0].len();
            let scale = if matches!(spec, LossSpec::Mse) {
                1.0 / (count * d as f64)
            } else {
                1.0
            };
            let mut value = 0.0;
            let mut cots = Vec::with_capacity(states.len());
            for (h, obs) in states.iter().zip(observations) {
                check_len("observation target", h.len(), obs.target.len())?;
                let mut c = vec![0.0; h.len()];
                for q in 0..h.len() {
                    let r = h[q] - obs.target[q];
                    value += r * r;
                    c[q] = 2.0 * r * scale;
                }
                cots.push(c);
            }
            Ok((value * scale, cots, None))
        }
        LossSpec::LogisticReadout { weights, bias } => {
            let mut value = 0.0;
            let mut cots = Vec::with_capacity(states.len());
            let mut rg = vec![0.0; weights.len() + 1];
            for (h, obs) in states.iter().zip(observations) {
                check_len("readout width", weights.len(), h.len())?;
                check_len("label", 1, obs.target.len())?;
                let y = obs.target[0];
                let z = crate::numerics::linalg::dot(weights, h) + bias;
                value += softplus(-y * z) / count;
                let dz = -y * sigmoid(-y * z) / count;
                cots.push(weights.iter().map(|w| dz * w).collect());
                for (g, hv) in rg.iter_mut().zip(h) {
                    *g += dz * hv;
                }
                rg[weights.len()] += dz;
            }
            Ok((value, cots, Some(rg)))
        }
    }
}

/// Evaluates the loss on a trajectory and returns the cotangents the backward
/// pass needs. Off-grid observation times are read from dense output.
pub fn loss_cotangents(
    spec: &LossSpec,
    traj: &Trajectory,
    observations: &[Observation],
) -> Result<LossEval> {
    let t0 = traj.start_time();
    let t1 = traj.terminal_time();
    let tol = 1e-12 * (t1 - t0).abs().max(1.0);
    let mut states = Vec::with_capacity(observations.len());
    for obs in observations {
        if !(obs.time >= t0 - tol && obs.time <= t1 + tol) {
            return Err(NddeError::Domain(format!(
                "observation time {} outside [{t0}, {t1}]",
                obs.time
            )));
        }
        states.push(traj.dense_eval(obs.time.clamp(t0, t1))?);
    }
    let (value, cots, readout_grad) = loss_from_states(spec, &states, observations)?;
    let entries = observations.iter().map(|o| o.time).zip(cots).collect();
    Ok(LossEval {
        value,
        cotangents: ObservationLossGrads::new(entries)?,
        readout_grad,
    })
}
