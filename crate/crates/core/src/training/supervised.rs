use super::config::TrainConfig;
use super::engine::{train, ItemEval, Objective};
use super::record::TrainRecord;
use crate::error::{check_len, NddeError, Result};
use crate::numerics::mlp::{forward_flat, vjp_flat};
use crate::numerics::{MlpLayout, MlpParams};

/// Mean squared error of an MLP on input/target pairs.
pub struct MlpFit {
    layout: MlpLayout,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl MlpFit {
    pub fn new(layout: MlpLayout, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        check_len("training targets", inputs.len(), targets.len())?;
        if inputs.is_empty() {
            return Err(NddeError::Input("no training pairs".into()));
        }
        for (x, y) in inputs.iter().zip(&targets) {
            check_len("network input", layout.input_width(), x.len())?;
            check_len("network target", layout.output_width(), y.len())?;
        }
        Ok(Self {
            layout,
            inputs,
            targets,
        })
    }
}

impl Objective for MlpFit {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn theta_len(&self) -> usize {
        self.layout.param_count()
    }

    fn evaluate(&self, theta: &[f64], item: usize, grad: Option<&mut [f64]>) -> Result<ItemEval> {
        let (x, y) = (&self.inputs[item], &self.targets[item]);
        let d = y.len();
        let mut out = vec![0.0; d];
        forward_flat(&self.layout, theta, x, &mut out)?;
        let loss = out.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64;
        if let Some(g) = grad {
            let cot: Vec<f64> = out.iter().zip(y).map(|(a, b)| 2.0 * (a - b) / d as f64).collect();
            let mut gi = vec![0.0; x.len()];
            vjp_flat(&self.layout, theta, x, &cot, &mut gi, g)?;
        }
        Ok(ItemEval { loss, nfe: 0 })
    }
}

/// Fits `init` to the pairs; returns the trained network and the record.
pub fn fit_mlp(
    init: &MlpParams,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    cfg: &TrainConfig,
) -> Result<(MlpParams, TrainRecord)> {
    let layout = init.layout().clone();
    let fit = MlpFit::new(layout.clone(), inputs, targets)?;
    let record = train(&fit, None, init.flatten(), cfg)?;
    let params = MlpParams::unflatten(&layout, &record.final_theta)?;
    Ok((params, record))
}
