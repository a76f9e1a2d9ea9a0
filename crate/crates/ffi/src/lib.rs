//! C interface to the `ndde` library.
//!
//! Fields and trajectories are opaque handles created and freed through this
//! interface. Every fallible call returns an [`NddeStatus`]; on failure the
//! message is kept per thread and read back with [`ndde_last_error_message`].
//! Buffers are caller-owned and passed as pointer plus length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndde::adjoint::{adjoint_backward, ObservationLossGrads};
use ndde::experiments::{ExperimentName, ExperimentSpec};
use ndde::models::{MackeyGlass, NeuralNdde, Population, ScalarDelay, VectorField};
use ndde::solver::{integrate_ndde, HistoryFunction, SolverConfig, Trajectory};
use ndde::NddeError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NddeStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Domain = 3,
    Divergence = 4,
    Input = 5,
    Numerical = 6,
    State = 7,
    Config = 8,
    Parse = 9,
    Io = 10,
    InvalidUtf8 = 11,
    Panic = 12,
}

/// A vector field together with its current parameter vector.
pub struct NddeField {
    field: Box<dyn VectorField>,
    params: Vec<f64>,
}

/// A solved trajectory and the constant history it started from.
pub struct NddeTrajectory {
    traj: Trajectory,
    history: HistoryFunction,
}

struct Failure(NddeStatus, String);

impl From<NddeError> for Failure {
    fn from(e: NddeError) -> Self {
        let status = match &e {
            NddeError::Dimension { .. } => NddeStatus::Dimension,
            NddeError::Domain(_) => NddeStatus::Domain,
            NddeError::Divergence { .. } => NddeStatus::Divergence,
            NddeError::Input(_) => NddeStatus::Input,
            NddeError::Numerical(_) => NddeStatus::Numerical,
            NddeError::State(_) => NddeStatus::State,
            NddeError::Config(_) => NddeStatus::Config,
            NddeError::Parse { .. } => NddeStatus::Parse,
            NddeError::Io(_) | NddeError::Json(_) => NddeStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NddeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NddeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            NddeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(NddeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize, what: &str) -> Result<(), Failure> {
    if len != src.len() {
        return Err(Failure(
            NddeStatus::Dimension,
            format!("{what}: buffer holds {len} values, need {}", src.len()),
        ));
    }
    if len > 0 {
        if dst.is_null() {
            return Err(null(what));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    }
    Ok(())
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(NddeStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn field_ref<'a>(f: *const NddeField) -> Result<&'a NddeField, Failure> {
    f.as_ref().ok_or_else(|| null("field"))
}

unsafe fn traj_ref<'a>(t: *const NddeTrajectory) -> Result<&'a NddeTrajectory, Failure> {
    t.as_ref().ok_or_else(|| null("trajectory"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ndde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the calling thread's last error message, 0 if none.
#[no_mangle]
pub extern "C" fn ndde_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (truncated, always
/// NUL-terminated when `len > 0`) and returns its full length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ndde_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Neural delay field `f(h(t), h(t - tau))` with tanh hidden layers of the
/// given widths and parameters drawn from `seed`.
///
/// # Safety
/// `hidden` must point to `n_hidden` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_neural(
    dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    seed: u64,
    out: *mut *mut NddeField,
) -> NddeStatus {
    guard(|| {
        let widths = if n_hidden == 0 {
            &[][..]
        } else if hidden.is_null() {
            return Err(null("hidden"));
        } else {
            std::slice::from_raw_parts(hidden, n_hidden)
        };
        let field = NeuralNdde::new(dim, widths)?;
        let params = field.layout().init_uniform(&mut ChaCha8Rng::seed_from_u64(seed)).flatten();
        emit(out, NddeField { field: Box::new(field), params })
    })
}

/// Mackey-Glass field `beta x(t-tau) / (1 + x(t-tau)^n) - gamma x(t)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_mackey_glass(
    beta: f64,
    n: f64,
    gamma: f64,
    out: *mut *mut NddeField,
) -> NddeStatus {
    let mut params = vec![0.0; 3];
    params[MackeyGlass::BETA] = beta;
    params[MackeyGlass::EXPONENT] = n;
    params[MackeyGlass::GAMMA] = gamma;
    guard(|| emit(out, NddeField { field: Box::new(MackeyGlass), params }))
}

/// Delayed logistic field `r x(t) (1 - x(t-tau))`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_population(r: f64, out: *mut *mut NddeField) -> NddeStatus {
    guard(|| emit(out, NddeField { field: Box::new(Population), params: vec![r] }))
}

/// Linear delay field `x' = a x(t-tau)` in `dim` independent components.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_scalar_delay(dim: usize, a: f64, out: *mut *mut NddeField) -> NddeStatus {
    guard(|| {
        if dim == 0 {
            return Err(Failure(NddeStatus::Input, "dimension must be positive".into()));
        }
        emit(out, NddeField { field: Box::new(ScalarDelay::new(dim)), params: vec![a] })
    })
}

/// Releases a field. Null is ignored.
///
/// # Safety
/// `f` must come from an `ndde_field_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_free(f: *mut NddeField) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `f` must be null or a live field.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_dim(f: *const NddeField) -> usize {
    f.as_ref().map_or(0, |f| f.field.dim())
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `f` must be null or a live field.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_param_count(f: *const NddeField) -> usize {
    f.as_ref().map_or(0, |f| f.params.len())
}

/// # Safety
/// `f` must be a live field and `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_get_params(f: *const NddeField, buf: *mut f64, len: usize) -> NddeStatus {
    guard(|| copy_out(&field_ref(f)?.params, buf, len, "params"))
}

/// Replaces the parameter vector; `len` must equal the parameter count and
/// every value must be finite.
///
/// # Safety
/// `f` must be a live field and `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ndde_field_set_params(f: *mut NddeField, buf: *const f64, len: usize) -> NddeStatus {
    guard(|| {
        let f = f.as_mut().ok_or_else(|| null("field"))?;
        let values = slice(buf, len, "params")?;
        if len != f.params.len() {
            return Err(Failure(
                NddeStatus::Dimension,
                format!("field takes {} parameters, got {len}", f.params.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Failure(NddeStatus::Input, "parameters must be finite".into()));
        }
        f.params.copy_from_slice(values);
        Ok(())
    })
}

/// Solves from the constant history `x0` on `[-tau, 0]` over `segments`
/// delay intervals with `steps_per_segment` RK4 steps each.
///
/// # Safety
/// `f` must be a live field, `x0` must hold `dim` values, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ndde_integrate(
    f: *const NddeField,
    x0: *const f64,
    dim: usize,
    tau: f64,
    segments: usize,
    steps_per_segment: usize,
    out: *mut *mut NddeTrajectory,
) -> NddeStatus {
    guard(|| {
        let f = field_ref(f)?;
        let history = HistoryFunction::constant(slice(x0, dim, "x0")?.to_vec())?;
        let cfg = SolverConfig::new(steps_per_segment)?;
        let traj = integrate_ndde(f.field.as_ref(), &f.params, &history, tau, segments, &cfg)?;
        emit(out, NddeTrajectory { traj, history })
    })
}

/// Releases a trajectory. Null is ignored.
///
/// # Safety
/// `t` must come from [`ndde_integrate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ndde_trajectory_free(t: *mut NddeTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of grid points, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live trajectory.
#[no_mangle]
pub unsafe extern "C" fn ndde_trajectory_len(t: *const NddeTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.traj.len())
}

/// # Safety
/// `t` must be null or a live trajectory.
#[no_mangle]
pub unsafe extern "C" fn ndde_trajectory_dim(t: *const NddeTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.traj.dim())
}

/// # Safety
/// `t` must be null or a live trajectory.
#[no_mangle]
pub unsafe extern "C" fn ndde_trajectory_segments(t: *const NddeTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.traj.n_segments())
}

/// Time and state of grid point `j`.
///
/// # Safety
/// `t` must be a live trajectory, `time` writable, `state` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ndde_trajectory_point(
    t: *const NddeTrajectory,
    j: usize,
    time: *mut f64,
    state: *mut f64,
    len: usize,
) -> NddeStatus {
    guard(|| {
        let t = traj_ref(t)?;
        if j >= t.traj.len() {
            return Err(Failure(NddeStatus::Input, format!("point {j} out of range 0..{}", t.traj.len())));
        }
        if time.is_null() {
            return Err(null("time"));
        }
        *time = t.traj.time(j);
        copy_out(t.traj.state(j), state, len, "state")
    })
}

/// State at `k tau` for `k = 0..=segments`.
///
/// # Safety
/// `t` must be a live trajectory and `state` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ndde_trajectory_checkpoint(
    t: *const NddeTrajectory,
    k: usize,
    state: *mut f64,
    len: usize,
) -> NddeStatus {
    guard(|| {
        let t = traj_ref(t)?;
        if k > t.traj.n_segments() {
            return Err(Failure(NddeStatus::Input, format!("checkpoint {k} beyond {}", t.traj.n_segments())));
        }
        copy_out(t.traj.checkpoint(k), state, len, "state")
    })
}

/// Gradients of `L = cotangent . h(T)` from the adjoint pass: the parameter
/// gradient into `grad_w`, the initial-state gradient into `grad_h0`, and the
/// delay and terminal-time derivatives into `grad_tau` and `grad_t`.
///
/// # Safety
/// Handles must be live and every buffer must hold its stated length.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ndde_terminal_gradient(
    f: *const NddeField,
    t: *const NddeTrajectory,
    cotangent: *const f64,
    dim: usize,
    grad_w: *mut f64,
    n_w: usize,
    grad_h0: *mut f64,
    n_h0: usize,
    grad_tau: *mut f64,
    grad_t: *mut f64,
) -> NddeStatus {
    guard(|| {
        let f = field_ref(f)?;
        let t = traj_ref(t)?;
        if grad_tau.is_null() || grad_t.is_null() {
            return Err(null("scalar gradient output"));
        }
        let e = slice(cotangent, dim, "cotangent")?;
        let grads = ObservationLossGrads::single(t.traj.terminal_time(), e.to_vec())?;
        let cfg = SolverConfig::new(t.traj.steps_per_segment())?;
        let g = adjoint_backward(f.field.as_ref(), &f.params, &t.traj, &t.history, &grads, &cfg)?;
        copy_out(&g.grad_w, grad_w, n_w, "grad_w")?;
        copy_out(&g.grad_h0, grad_h0, n_h0, "grad_h0")?;
        *grad_tau = g.grad_tau;
        *grad_t = g.grad_t;
        Ok(())
    })
}

/// Runs a named experiment with its defaults, writing to `out_dir`, and
/// stores the process exit code it maps to (0 passed, 2 bad config, 3 checks
/// failed) in `exit_code`. A null `out_dir` uses the default location.
///
/// # Safety
/// `name` must be a NUL-terminated string, `out_dir` null or one, and
/// `exit_code` writable.
#[no_mangle]
pub unsafe extern "C" fn ndde_run_experiment(
    name: *const c_char,
    out_dir: *const c_char,
    quiet: bool,
    exit_code: *mut i32,
) -> NddeStatus {
    guard(|| {
        if exit_code.is_null() {
            return Err(null("exit_code"));
        }
        let name: ExperimentName = text(name, "name")?.parse()?;
        let mut spec = ExperimentSpec::new(name);
        if !out_dir.is_null() {
            spec = spec.with_out_dir(PathBuf::from(text(out_dir, "out_dir")?));
        }
        let manifest = spec.run(quiet)?;
        *exit_code = manifest.exit_code();
        Ok(())
    })
}
