use std::io::Write;
use std::path::Path;

use crate::error::{NddeError, Result};

/// Dense solver output on a uniform per-segment grid.
///
/// The grid covers `[t0, t0 + n * segment_len]` with `steps_per_segment`
/// steps per segment; segment boundaries are shared grid points, so the
/// checkpoints `h(t0 + k * segment_len)` are stored states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub(crate) t0: f64,
    pub(crate) segment_len: f64,
    pub(crate) n_segments: usize,
    pub(crate) steps_per_segment: usize,
    pub(crate) dim: usize,
    pub(crate) delay: Option<f64>,
    pub(crate) states: Vec<f64>,
    pub(crate) derivs: Vec<f64>,
    pub(crate) stage_evaluations: usize,
    pub(crate) auxiliary_evaluations: usize,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delay(&self) -> Option<f64> {
        self.delay
    }

    pub fn start_time(&self) -> f64 {
        self.t0
    }

    pub fn segment_len(&self) -> f64 {
        self.segment_len
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn steps_per_segment(&self) -> usize {
        self.steps_per_segment
    }

    pub fn step(&self) -> f64 {
        self.segment_len / self.steps_per_segment as f64
    }

    pub fn terminal_time(&self) -> f64 {
        self.boundary_time(self.n_segments)
    }

    pub fn boundary_time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.segment_len
    }

    pub fn len(&self) -> usize {
        self.n_segments * self.steps_per_segment + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time of global grid index `j`.
    pub fn time(&self, j: usize) -> f64 {
        let m = self.steps_per_segment;
        let (k, i) = (j / m, j % m);
        self.boundary_time(k) + i as f64 * self.step()
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    pub fn derivative(&self, j: usize) -> &[f64] {
        &self.derivs[j * self.dim..(j + 1) * self.dim]
    }

    /// `h(t0 + k * segment_len)`, `k = 0..=n`.
    pub fn checkpoint(&self, k: usize) -> &[f64] {
        self.state(k * self.steps_per_segment)
    }

    pub fn checkpoints(&self) -> Vec<Vec<f64>> {
        (0..=self.n_segments)
            .map(|k| self.checkpoint(k).to_vec())
            .collect()
    }

    pub fn terminal_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn terminal_derivative(&self) -> &[f64] {
        self.derivative(self.len() - 1)
    }

    /// Field evaluations spent on RK4 stages: `4 * steps * segments`.
    pub fn stage_evaluations(&self) -> usize {
        self.stage_evaluations
    }

    /// Extra evaluations used only for dense output (the terminal derivative).
    pub fn auxiliary_evaluations(&self) -> usize {
        self.auxiliary_evaluations
    }

    /// Grid index `j` and offset `t - t_j` such that `t` lies in `[t_j, t_{j+1}]`.
    pub(crate) fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let t_end = self.terminal_time();
        let tol = 1e-12 * (t_end - self.t0).abs().max(1.0);
        if !(t >= self.t0 - tol && t <= t_end + tol) {
            return Err(NddeError::Domain(format!(
                "t = {t} outside trajectory span [{}, {t_end}]",
                self.t0
            )));
        }
        let last = self.len() - 1;
        let guess = ((t - self.t0) / self.step()).floor();
        let mut j = if guess < 0.0 { 0 } else { (guess as usize).min(last) };
        while j > 0 && self.time(j) > t {
            j -= 1;
        }
        while j < last && self.grid_time(j + 1) <= t {
            j += 1;
        }
        Ok((j, t - self.grid_time(j)))
    }

    fn grid_time(&self, j: usize) -> f64 {
        if j == self.len() - 1 {
            self.terminal_time()
        } else {
            self.time(j)
        }
    }

    /// Cubic Hermite interpolation of `(state, derivative)` pairs; exact on the grid.
    pub fn dense_eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.dense_eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn dense_eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let (j, off) = self.locate(t)?;
        if off == 0.0 || j == self.len() - 1 {
            out.copy_from_slice(self.state(j));
            return Ok(());
        }
        let dt = self.grid_time(j + 1) - self.grid_time(j);
        hermite(
            self.state(j),
            self.derivative(j),
            self.state(j + 1),
            self.derivative(j + 1),
            dt,
            off / dt,
            out,
        );
        Ok(())
    }

    /// Writes `t,x1,...,xd` rows for every `decimation`-th grid point (the final
    /// point is always included).
    pub fn write_csv<W: Write>(&self, mut w: W, decimation: usize) -> Result<()> {
        let decimation = decimation.max(1);
        let header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "t,{}", header.join(","))?;
        let last = self.len() - 1;
        for j in (0..=last).filter(|j| j % decimation == 0 || *j == last) {
            write_csv_row(&mut w, self.grid_time(j), self.state(j))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, decimation: usize) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f, decimation)
    }
}

pub(crate) fn write_csv_row<W: Write>(w: &mut W, t: f64, x: &[f64]) -> Result<()> {
    write!(w, "{t:.16e}")?;
    for v in x {
        write!(w, ",{v:.16e}")?;
    }
    writeln!(w)?;
    Ok(())
}

/// Cubic Hermite basis on `[0, 1]` scaled to an interval of length `dt`.
#[inline]
pub(crate) fn hermite(
    y0: &[f64],
    f0: &[f64],
    y1: &[f64],
    f1: &[f64],
    dt: f64,
    theta: f64,
    out: &mut [f64],
) {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    for i in 0..out.len() {
        out[i] = h00 * y0[i] + h10 * dt * f0[i] + h01 * y1[i] + h11 * dt * f1[i];
    }
}

/// Reads a `t,x1,...,xd` series as written by [`Trajectory::write_csv`].
pub fn read_series_csv(text: &str) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(NddeError::Parse {
        line: 1,
        message: "empty series file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "t" {
        return Err(NddeError::Parse {
            line: 1,
            message: format!("expected header `t,x1,...`, found `{header}`"),
        });
    }
    let d = cols.len() - 1;
    let mut out = Vec::new();
    for (n, l) in lines {
        let vals = l
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| NddeError::Parse {
                    line: n + 1,
                    message: format!("bad number `{tok}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != d + 1 || vals.iter().any(|v| !v.is_finite()) {
            return Err(NddeError::Parse {
                line: n + 1,
                message: format!("expected {} finite columns", d + 1),
            });
        }
        out.push((vals[0], vals[1..].to_vec()));
    }
    Ok(out)
}
