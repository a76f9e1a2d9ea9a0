//! Fully connected networks with hand-derived reverse-mode products.
//!
//! Parameters are stored flat, layer by layer: the row-major weight matrix
//! (`out x in`) followed by the bias (`out`). Every kernel in this module works
//! directly on that flat slice so that optimizers, finite-difference checks and
//! the adjoint accumulator all share one parameter vector.

use std::cell::RefCell;

use rand::Rng;

use super::linalg::{matvec_into, matvec_t_into, RealMatrix, RealVector};
use crate::error::{check_len, NddeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Architecture of an MLP: node counts per layer boundary and one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpLayout {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpLayout {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NddeError::Input("an MLP needs at least one layer".into()));
        }
        if widths.contains(&0) {
            return Err(NddeError::Input("layer widths must be positive".into()));
        }
        check_len("activations per layer", widths.len() - 1, activations.len())?;
        Ok(Self {
            widths,
            activations,
        })
    }

    /// tanh on every hidden layer, identity on the output layer.
    pub fn tanh_hidden(widths: &[usize]) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let activations = (0..layers)
            .map(|i| {
                if i + 1 == layers {
                    Activation::Identity
                } else {
                    Activation::Tanh
                }
            })
            .collect();
        Self::new(widths.to_vec(), activations)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn total_nodes(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn zeros(&self) -> MlpParams {
        MlpParams {
            layout: self.clone(),
            flat: vec![0.0; self.param_count()],
        }
    }

    /// Uniform weights in `[-s, s]` with `s = 1/sqrt(fan_in)`, biases likewise.
    pub fn init_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> MlpParams {
        let mut flat = Vec::with_capacity(self.param_count());
        for w in self.widths.windows(2) {
            let s = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                flat.push(rng.random_range(-s..=s));
            }
        }
        MlpParams {
            layout: self.clone(),
            flat,
        }
    }
}

/// One layer's weights and bias borrowed from the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub rows: usize,
    pub cols: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layout: MlpLayout,
    flat: Vec<f64>,
}

impl MlpParams {
    /// Builds parameters from explicit `(weights, bias)` layers.
    pub fn from_layers(layers: Vec<(RealMatrix, RealVector, Activation)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NddeError::Input("an MLP needs at least one layer".into()));
        }
        let mut widths = vec![layers[0].0.cols()];
        let mut activations = Vec::new();
        let mut flat = Vec::new();
        for (i, (w, b, act)) in layers.into_iter().enumerate() {
            check_len("layer input width", widths[i], w.cols())?;
            check_len("bias width", w.rows(), b.len())?;
            widths.push(w.rows());
            activations.push(act);
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(&b);
        }
        Ok(Self {
            layout: MlpLayout::new(widths, activations)?,
            flat,
        })
    }

    pub fn unflatten(layout: &MlpLayout, flat: &[f64]) -> Result<Self> {
        check_len("flattened MLP parameters", layout.param_count(), flat.len())?;
        Ok(Self {
            layout: layout.clone(),
            flat: flat.to_vec(),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.flat.clone()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn layer(&self, i: usize) -> LayerView<'_> {
        layer_view(&self.layout, &self.flat, i)
    }
}

fn layer_view<'a>(layout: &MlpLayout, flat: &'a [f64], i: usize) -> LayerView<'a> {
    let mut off = 0;
    for w in layout.widths.windows(2).take(i) {
        off += w[1] * w[0] + w[1];
    }
    let cols = layout.widths[i];
    let rows = layout.widths[i + 1];
    LayerView {
        rows,
        cols,
        weights: &flat[off..off + rows * cols],
        bias: &flat[off + rows * cols..off + rows * cols + rows],
        activation: layout.activations[i],
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs the network on `input`, storing every layer's post-activation output in
/// `acts` (input first).
fn forward_store(layout: &MlpLayout, flat: &[f64], input: &[f64], acts: &mut [f64]) {
    let w = &layout.widths;
    acts[..w[0]].copy_from_slice(input);
    let mut a_off = 0;
    let mut p_off = 0;
    for l in 0..layout.num_layers() {
        let (cols, rows) = (w[l], w[l + 1]);
        let weights = &flat[p_off..p_off + rows * cols];
        let bias = &flat[p_off + rows * cols..p_off + rows * cols + rows];
        let (prev, next) = acts.split_at_mut(a_off + cols);
        let x = &prev[a_off..];
        let y = &mut next[..rows];
        matvec_into(weights, rows, cols, x, y);
        let act = layout.activations[l];
        for (yi, bi) in y.iter_mut().zip(bias) {
            *yi = act.apply(*yi + bi);
        }
        a_off += cols;
        p_off += rows * cols + rows;
    }
}

/// Allocation-free forward pass on a flat parameter slice.
pub fn forward_flat(
    layout: &MlpLayout,
    flat: &[f64],
    input: &[f64],
    out: &mut [f64],
) -> Result<()> {
    check_len("MLP input", layout.input_width(), input.len())?;
    check_len("MLP output", layout.output_width(), out.len())?;
    check_len("MLP parameters", layout.param_count(), flat.len())?;
    SCRATCH.with(|s| {
        let mut acts = s.borrow_mut();
        let need = layout.total_nodes();
        if acts.len() < need {
            acts.resize(need, 0.0);
        }
        forward_store(layout, flat, input, &mut acts[..need]);
        out.copy_from_slice(&acts[need - layout.output_width()..need]);
    });
    Ok(())
}

/// Reverse-mode product `cotangent^T J` with respect to both the input and the
/// parameters. `grad_params` is overwritten.
pub fn vjp_flat(
    layout: &MlpLayout,
    flat: &[f64],
    input: &[f64],
    cotangent: &[f64],
    grad_input: &mut [f64],
    grad_params: &mut [f64],
) -> Result<()> {
    check_len("MLP input", layout.input_width(), input.len())?;
    check_len("MLP cotangent", layout.output_width(), cotangent.len())?;
    check_len("MLP input gradient", layout.input_width(), grad_input.len())?;
    check_len("MLP parameters", layout.param_count(), flat.len())?;
    check_len("MLP parameter gradient", layout.param_count(), grad_params.len())?;
    let w = &layout.widths;
    let max_w = *w.iter().max().unwrap();
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        let nodes = layout.total_nodes();
        let need = nodes + 2 * max_w;
        if buf.len() < need {
            buf.resize(need, 0.0);
        }
        let (acts, rest) = buf.split_at_mut(nodes);
        let (delta, next_delta) = rest.split_at_mut(max_w);
        forward_store(layout, flat, input, acts);

        let layers = layout.num_layers();
        let mut a_off = nodes - w[layers];
        let mut p_end = flat.len();
        delta[..w[layers]].copy_from_slice(cotangent);
        for l in (0..layers).rev() {
            let (cols, rows) = (w[l], w[l + 1]);
            let p_off = p_end - (rows * cols + rows);
            let out_a = &acts[a_off..a_off + rows];
            if layout.activations[l] == Activation::Tanh {
                for (d, a) in delta[..rows].iter_mut().zip(out_a) {
                    *d *= 1.0 - a * a;
                }
            }
            let in_off = a_off - cols;
            let in_a = &acts[in_off..a_off];
            let gw = &mut grad_params[p_off..p_off + rows * cols];
            for r in 0..rows {
                let dr = delta[r];
                let row = &mut gw[r * cols..(r + 1) * cols];
                for (g, a) in row.iter_mut().zip(in_a) {
                    *g = dr * a;
                }
            }
            grad_params[p_off + rows * cols..p_end].copy_from_slice(&delta[..rows]);
            let weights = &flat[p_off..p_off + rows * cols];
            matvec_t_into(weights, rows, cols, &delta[..rows], &mut next_delta[..cols]);
            delta[..cols].copy_from_slice(&next_delta[..cols]);
            a_off = in_off;
            p_end = p_off;
        }
        grad_input.copy_from_slice(&delta[..w[0]]);
    });
    Ok(())
}

pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<RealVector> {
    let mut out = vec![0.0; params.layout.output_width()];
    forward_flat(&params.layout, &params.flat, input, &mut out)?;
    Ok(RealVector::from_vec_unchecked(out))
}

/// Returns `(cotangent^T dF/dinput, cotangent^T dF/dparams)`.
pub fn mlp_vjp(
    params: &MlpParams,
    input: &[f64],
    cotangent: &[f64],
) -> Result<(RealVector, MlpParams)> {
    let mut gi = vec![0.0; params.layout.input_width()];
    let mut gp = params.layout.zeros();
    vjp_flat(
        &params.layout,
        &params.flat,
        input,
        cotangent,
        &mut gi,
        &mut gp.flat,
    )?;
    Ok((RealVector::from_vec_unchecked(gi), gp))
}
