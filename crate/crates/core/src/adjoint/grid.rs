//! Local backward grid shared by every layer: the forward grid plus the local
//! times of off-grid observations, with cotangent jumps binned per layer.

use super::loss::ObservationLossGrads;
use crate::error::{NddeError, Result};

/// Observations closer than this fraction of a step to a grid point are
/// treated as lying on it.
pub(crate) const SNAP_FRACTION: f64 = 1e-9;

#[derive(Debug, Clone)]
pub(crate) struct BackwardGrid {
    /// Ascending local times, `points[0] = 0`, last = segment length.
    pub points: Vec<f64>,
    /// Forward step index containing subinterval `k = [points[k], points[k+1]]`.
    pub fwd: Vec<usize>,
    /// `(layer, point, cotangent)` sorted so that `pop()` yields the latest jump.
    pub jumps: Vec<(usize, usize, Vec<f64>)>,
}

impl BackwardGrid {
    pub fn subintervals(&self) -> usize {
        self.points.len() - 1
    }

    /// Places observations (global times measured from `t0`) on a grid of
    /// `n` layers of length `seg` with `m` uniform steps each.
    pub fn build(
        obs: &ObservationLossGrads,
        t0: f64,
        seg: f64,
        n: usize,
        m: usize,
        local: impl Fn(usize) -> f64,
    ) -> Result<Self> {
        let dt = seg / m as f64;
        let total = n * m;
        let span = n as f64 * seg;
        let tol = 1e-12 * span.abs().max(1.0);
        // (layer, grid index) for snapped observations, (layer, local time) otherwise.
        let mut on_grid: Vec<(usize, usize, &[f64])> = Vec::new();
        let mut off_grid: Vec<(usize, f64, &[f64])> = Vec::new();
        for (t, cot) in obs.entries() {
            let u = t - t0;
            if !(u >= -tol && u <= span + tol) {
                return Err(NddeError::Domain(format!(
                    "observation time {t} outside [{t0}, {}]",
                    t0 + span
                )));
            }
            let g = u / dt;
            let j = g.round();
            if (g - j).abs() <= SNAP_FRACTION * g.abs().max(1.0) && j >= 0.0 {
                let j = (j as usize).min(total);
                let (mut layer, mut idx) = (j / m, j % m);
                if idx == 0 && layer > 0 {
                    layer -= 1;
                    idx = m;
                }
                on_grid.push((layer, idx, cot));
            } else {
                let layer = ((u / seg).floor().max(0.0) as usize).min(n - 1);
                let s = (u - layer as f64 * seg).clamp(0.0, seg);
                off_grid.push((layer, s, cot));
            }
        }

        let mut extra: Vec<f64> = off_grid.iter().map(|o| o.1).collect();
        extra.sort_by(f64::total_cmp);
        extra.dedup_by(|a, b| (*a - *b).abs() <= SNAP_FRACTION * dt);

        let mut points = Vec::with_capacity(m + 1 + extra.len());
        let mut fwd = Vec::with_capacity(m + extra.len());
        let mut grid_pos = Vec::with_capacity(m + 1);
        let mut e = 0;
        for j in 0..m {
            grid_pos.push(points.len());
            points.push(local(j));
            fwd.push(j);
            let hi = local(j + 1);
            while e < extra.len() && extra[e] < hi {
                if extra[e] > local(j) {
                    points.push(extra[e]);
                    fwd.push(j);
                }
                e += 1;
            }
        }
        grid_pos.push(points.len());
        points.push(local(m));

        let mut jumps: Vec<(usize, usize, Vec<f64>)> = on_grid
            .into_iter()
            .map(|(l, j, c)| (l, grid_pos[j], c.to_vec()))
            .collect();
        for (layer, s, cot) in off_grid {
            let k = points.partition_point(|p| *p < s - SNAP_FRACTION * dt);
            let k = k.min(points.len() - 1);
            jumps.push((layer, k, cot.to_vec()));
        }
        jumps.sort_by_key(|a| (a.0, a.1));
        Ok(Self { points, fwd, jumps })
    }

    /// Adds every cotangent recorded at `(layer, point)` into `lam`.
    pub fn apply_jumps(&mut self, layer: usize, point: usize, lam: &mut [f64]) {
        while let Some((l, p, _)) = self.jumps.last() {
            if (*l, *p) != (layer, point) {
                break;
            }
            let (_, _, c) = self.jumps.pop().expect("checked above");
            for (x, y) in lam.iter_mut().zip(&c) {
                *x += y;
            }
        }
    }

    pub fn has_pending(&self) -> bool {
        !self.jumps.is_empty()
    }
}
