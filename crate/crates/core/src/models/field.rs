use crate::error::{check_len, NddeError, Result};
use crate::numerics::mlp::{forward_flat, vjp_flat, MlpLayout};

/// A right-hand side `dh/dt = f(h(t), h(t - tau), t; params)`.
///
/// Fields only describe structure; the trainable parameters are passed in as a
/// flat slice so that optimizers and gradient checks can own them.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn param_count(&self) -> usize;

    fn eval(&self, params: &[f64], h: &[f64], h_delayed: &[f64], t: f64, out: &mut [f64])
        -> Result<()>;

    /// Reverse-mode products of `cotangent^T` with the three partial Jacobians.
    /// All three outputs are overwritten.
    #[allow(clippy::too_many_arguments)]
    fn vjp(
        &self,
        params: &[f64],
        h: &[f64],
        h_delayed: &[f64],
        t: f64,
        cotangent: &[f64],
        grad_h: &mut [f64],
        grad_h_delayed: &mut [f64],
        grad_params: &mut [f64],
    ) -> Result<()>;

    /// `false` when `f` never reads its delayed argument.
    fn uses_delay(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str;
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn param_count(&self) -> usize {
        (**self).param_count()
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).eval(p, h, hd, t, out)
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        (**self).vjp(p, h, hd, t, c, gh, ghd, gp)
    }
    fn uses_delay(&self) -> bool {
        (**self).uses_delay()
    }
    fn name(&self) -> &'static str {
        (**self).name()
    }
}

impl<F: VectorField + ?Sized> VectorField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn param_count(&self) -> usize {
        (**self).param_count()
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).eval(p, h, hd, t, out)
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        (**self).vjp(p, h, hd, t, c, gh, ghd, gp)
    }
    fn uses_delay(&self) -> bool {
        (**self).uses_delay()
    }
    fn name(&self) -> &'static str {
        (**self).name()
    }
}

fn check_io(field: &dyn VectorField, params: &[f64], h: &[f64], hd: &[f64]) -> Result<()> {
    check_len("field parameters", field.param_count(), params.len())?;
    check_len("field state", field.dim(), h.len())?;
    check_len("field delayed state", field.dim(), hd.len())
}

/// Neural NDDE field: an MLP over `concat(h, h_delayed)`, width `2d -> d`.
#[derive(Debug, Clone)]
pub struct NeuralNdde {
    layout: MlpLayout,
    dim: usize,
}

impl NeuralNdde {
    /// `hidden` lists the hidden widths; the input is `2 * dim`, output `dim`.
    pub fn new(dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = vec![2 * dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Ok(Self {
            layout: MlpLayout::tanh_hidden(&widths)?,
            dim,
        })
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }
}

impl VectorField for NeuralNdde {
    fn dim(&self) -> usize {
        self.dim
    }
    fn param_count(&self) -> usize {
        self.layout.param_count()
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        check_io(self, p, h, hd)?;
        let d = self.dim;
        let mut input = [0.0; 32];
        if 2 * d <= 32 {
            input[..d].copy_from_slice(h);
            input[d..2 * d].copy_from_slice(hd);
            forward_flat(&self.layout, p, &input[..2 * d], out)
        } else {
            let mut v = h.to_vec();
            v.extend_from_slice(hd);
            forward_flat(&self.layout, p, &v, out)
        }
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        _t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        check_io(self, p, h, hd)?;
        let d = self.dim;
        let (mut input, mut gi) = ([0.0; 32], [0.0; 32]);
        let (mut v, mut g) = (Vec::new(), Vec::new());
        let (input, gi): (&mut [f64], &mut [f64]) = if 2 * d <= 32 {
            (&mut input[..2 * d], &mut gi[..2 * d])
        } else {
            v.resize(2 * d, 0.0);
            g.resize(2 * d, 0.0);
            (&mut v, &mut g)
        };
        input[..d].copy_from_slice(h);
        input[d..].copy_from_slice(hd);
        vjp_flat(&self.layout, p, input, c, gi, gp)?;
        gh.copy_from_slice(&gi[..d]);
        ghd.copy_from_slice(&gi[d..]);
        Ok(())
    }
    fn name(&self) -> &'static str {
        "neural-ndde"
    }
}

/// Neural NODE field: an MLP over `h` only.
#[derive(Debug, Clone)]
pub struct NeuralNode {
    layout: MlpLayout,
    dim: usize,
}

impl NeuralNode {
    pub fn new(dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Ok(Self {
            layout: MlpLayout::tanh_hidden(&widths)?,
            dim,
        })
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }
}

impl VectorField for NeuralNode {
    fn dim(&self) -> usize {
        self.dim
    }
    fn param_count(&self) -> usize {
        self.layout.param_count()
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        check_io(self, p, h, hd)?;
        forward_flat(&self.layout, p, h, out)
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        _t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        check_io(self, p, h, hd)?;
        ghd.fill(0.0);
        vjp_flat(&self.layout, p, h, c, gh, gp)
    }
    fn uses_delay(&self) -> bool {
        false
    }
    fn name(&self) -> &'static str {
        "neural-node"
    }
}

/// `f(h, h_delayed) = G(h_delayed)` for an MLP `G: R^d -> R^d`.
#[derive(Debug, Clone)]
pub struct DelayedNeural {
    layout: MlpLayout,
}

impl DelayedNeural {
    pub fn new(layout: MlpLayout) -> Result<Self> {
        check_len(
            "delayed network output width",
            layout.input_width(),
            layout.output_width(),
        )?;
        Ok(Self { layout })
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }
}

impl VectorField for DelayedNeural {
    fn dim(&self) -> usize {
        self.layout.input_width()
    }
    fn param_count(&self) -> usize {
        self.layout.param_count()
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        check_io(self, p, h, hd)?;
        forward_flat(&self.layout, p, hd, out)
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        _t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        check_io(self, p, h, hd)?;
        gh.fill(0.0);
        vjp_flat(&self.layout, p, hd, c, ghd, gp)
    }
    fn name(&self) -> &'static str {
        "delayed-neural"
    }
}

/// `x' = beta x(t-tau) / (1 + x(t-tau)^n) - gamma x(t)`; params `[beta, n, gamma]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MackeyGlass;

impl MackeyGlass {
    pub const BETA: usize = 0;
    pub const EXPONENT: usize = 1;
    pub const GAMMA: usize = 2;

    fn check_positive(hd: f64, t: f64) -> Result<()> {
        if hd > 0.0 {
            Ok(())
        } else {
            Err(NddeError::Domain(format!(
                "Mackey-Glass delayed state must be positive, got {hd} at t = {t}"
            )))
        }
    }
}

impl VectorField for MackeyGlass {
    fn dim(&self) -> usize {
        1
    }
    fn param_count(&self) -> usize {
        3
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        check_io(self, p, h, hd)?;
        let (beta, n, gamma) = (p[0], p[1], p[2]);
        let x = hd[0];
        Self::check_positive(x, t)?;
        out[0] = beta * x / (1.0 + x.powf(n)) - gamma * h[0];
        Ok(())
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        check_io(self, p, h, hd)?;
        let (beta, n, gamma) = (p[0], p[1], p[2]);
        let x = hd[0];
        Self::check_positive(x, t)?;
        let xn = x.powf(n);
        let den = 1.0 + xn;
        let c = c[0];
        gh[0] = -gamma * c;
        ghd[0] = c * beta * (1.0 + (1.0 - n) * xn) / (den * den);
        gp[0] = c * x / den;
        gp[1] = -c * beta * x * xn * x.ln() / (den * den);
        gp[2] = -c * h[0];
        Ok(())
    }
    fn name(&self) -> &'static str {
        "mackey-glass"
    }
}

/// Delayed logistic growth `x' = r x(t) (1 - x(t-tau))`; params `[r]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Population;

impl VectorField for Population {
    fn dim(&self) -> usize {
        1
    }
    fn param_count(&self) -> usize {
        1
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        check_io(self, p, h, hd)?;
        out[0] = p[0] * h[0] * (1.0 - hd[0]);
        Ok(())
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        _t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        check_io(self, p, h, hd)?;
        gh[0] = c[0] * p[0] * (1.0 - hd[0]);
        ghd[0] = -c[0] * p[0] * h[0];
        gp[0] = c[0] * h[0] * (1.0 - hd[0]);
        Ok(())
    }
    fn name(&self) -> &'static str {
        "population"
    }
}

/// `x' = A tanh(x(t) + x(t-tau))`; params are `A` row-major.
#[derive(Debug, Clone, Copy)]
pub struct LinearTanh {
    dim: usize,
}

impl LinearTanh {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// The stable rotational matrix used for the delayed spiral.
    pub fn default_spiral_matrix() -> Vec<f64> {
        vec![-0.1, 2.0, -2.0, -0.1]
    }
}

impl VectorField for LinearTanh {
    fn dim(&self) -> usize {
        self.dim
    }
    fn param_count(&self) -> usize {
        self.dim * self.dim
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        check_io(self, p, h, hd)?;
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|j| p[i * d + j] * (h[j] + hd[j]).tanh()).sum();
        }
        Ok(())
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        _t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        check_io(self, p, h, hd)?;
        let d = self.dim;
        for j in 0..d {
            let z = (h[j] + hd[j]).tanh();
            let gz: f64 = (0..d).map(|i| p[i * d + j] * c[i]).sum();
            gh[j] = gz * (1.0 - z * z);
            ghd[j] = gh[j];
            for i in 0..d {
                gp[i * d + j] = c[i] * z;
            }
        }
        Ok(())
    }
    fn name(&self) -> &'static str {
        "linear-tanh"
    }
}

/// `x' = a x(t-tau)` componentwise; params `[a]`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarDelay {
    dim: usize,
}

impl ScalarDelay {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Default for ScalarDelay {
    fn default() -> Self {
        Self::new(1)
    }
}

impl VectorField for ScalarDelay {
    fn dim(&self) -> usize {
        self.dim
    }
    fn param_count(&self) -> usize {
        1
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        check_io(self, p, h, hd)?;
        for (o, x) in out.iter_mut().zip(hd) {
            *o = p[0] * x;
        }
        Ok(())
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        _t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        check_io(self, p, h, hd)?;
        gh.fill(0.0);
        for (g, ci) in ghd.iter_mut().zip(c) {
            *g = p[0] * ci;
        }
        gp[0] = hd.iter().zip(c).map(|(x, ci)| x * ci).sum();
        Ok(())
    }
    fn name(&self) -> &'static str {
        "scalar-delay"
    }
}

/// `h_1' = ||h(t-tau)|| - r`, all other coordinates frozen; params `[r]`.
#[derive(Debug, Clone, Copy)]
pub struct AnnulusSeparator {
    dim: usize,
}

impl AnnulusSeparator {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl VectorField for AnnulusSeparator {
    fn dim(&self) -> usize {
        self.dim
    }
    fn param_count(&self) -> usize {
        1
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        check_io(self, p, h, hd)?;
        out.fill(0.0);
        out[0] = crate::numerics::linalg::norm(hd) - p[0];
        Ok(())
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        _t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        check_io(self, p, h, hd)?;
        gh.fill(0.0);
        let nrm = crate::numerics::linalg::norm(hd);
        for (g, x) in ghd.iter_mut().zip(hd) {
            *g = if nrm > 0.0 { c[0] * x / nrm } else { 0.0 };
        }
        gp[0] = -c[0];
        Ok(())
    }
    fn name(&self) -> &'static str {
        "annulus-separator"
    }
}

/// Convenience: evaluate a field into a fresh vector.
pub fn field_eval(
    field: &dyn VectorField,
    params: &[f64],
    h: &[f64],
    h_delayed: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; field.dim()];
    field.eval(params, h, h_delayed, t, &mut out)?;
    Ok(out)
}

/// Result of [`field_vjp`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVjp {
    pub grad_h: Vec<f64>,
    pub grad_h_delayed: Vec<f64>,
    pub grad_params: Vec<f64>,
}

pub fn field_vjp(
    field: &dyn VectorField,
    params: &[f64],
    h: &[f64],
    h_delayed: &[f64],
    t: f64,
    cotangent: &[f64],
) -> Result<FieldVjp> {
    check_len("field cotangent", field.dim(), cotangent.len())?;
    let d = field.dim();
    let mut out = FieldVjp {
        grad_h: vec![0.0; d],
        grad_h_delayed: vec![0.0; d],
        grad_params: vec![0.0; field.param_count()],
    };
    field.vjp(
        params,
        h,
        h_delayed,
        t,
        cotangent,
        &mut out.grad_h,
        &mut out.grad_h_delayed,
        &mut out.grad_params,
    )?;
    Ok(out)
}
