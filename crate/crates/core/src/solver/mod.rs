//! Forward integration of NODEs and constant-delay NDDEs.

pub mod history;
pub mod integrate;
pub mod spline;
pub mod trajectory;

pub use history::{eval_history, fit_natural_cubic_spline, HistoryFunction, OdeHistory};
pub use integrate::{integrate_ndde, integrate_ndde_from, integrate_node, Method, SolverConfig};
pub use spline::NaturalCubicSpline;
pub use trajectory::{read_series_csv, Trajectory};

/// `dense_eval(traj, t)`: Hermite interpolation of the stored grid.
pub fn dense_eval(traj: &Trajectory, t: f64) -> crate::Result<Vec<f64>> {
    traj.dense_eval(t)
}
