use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NddeError, Result};
use crate::models::VectorField;
use crate::solver::{integrate_ndde, HistoryFunction, SolverConfig};

/// A delay system to sample: field, parameters, history and delay.
pub struct SeriesSystem<'a> {
    pub field: &'a dyn VectorField,
    pub params: &'a [f64],
    pub history: HistoryFunction,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesOptions {
    /// Length of the returned series.
    pub t_data: f64,
    pub dt: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Transient discarded before the first returned sample; times restart at 0.
    pub burn_in: f64,
    /// Steps per delay interval of the fine solve.
    pub fine_steps: usize,
}

impl SeriesOptions {
    pub fn new(t_data: f64, dt: f64) -> Self {
        Self {
            t_data,
            dt,
            noise_sd: 0.0,
            seed: 0,
            burn_in: 0.0,
            fine_steps: 1000,
        }
    }
}

/// Solves `system` on a fine grid and samples it every `dt`, adding Gaussian
/// observation noise when `noise_sd > 0`.
pub fn generate_series(system: &SeriesSystem<'_>, opts: &SeriesOptions) -> Result<Vec<(f64, Vec<f64>)>> {
    if !(opts.dt > 0.0 && opts.t_data > 0.0 && opts.burn_in >= 0.0 && opts.noise_sd >= 0.0) {
        return Err(NddeError::Input(format!(
            "need dt > 0, T_data > 0, burn-in >= 0 and noise >= 0; got dt = {}, T_data = {}",
            opts.dt, opts.t_data
        )));
    }
    let span = opts.burn_in + opts.t_data;
    let n = ((span / system.tau) - 1e-9).ceil().max(1.0) as usize;
    let traj = integrate_ndde(
        system.field,
        system.params,
        &system.history,
        system.tau,
        n,
        &SolverConfig::new(opts.fine_steps)?,
    )?;
    let count = (opts.t_data / opts.dt + 1e-9).floor() as usize;
    let noise = Normal::new(0.0, opts.noise_sd).map_err(|e| NddeError::Input(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..=count)
        .map(|j| {
            let t = j as f64 * opts.dt;
            let mut x = traj.dense_eval((opts.burn_in + t).min(traj.terminal_time()))?;
            if opts.noise_sd > 0.0 {
                x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            Ok((t, x))
        })
        .collect()
}

pub fn write_series_csv<W: Write>(mut w: W, samples: &[(f64, Vec<f64>)]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.1.len());
    let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    writeln!(w, "t,{}", header.join(","))?;
    for (t, x) in samples {
        crate::solver::trajectory::write_csv_row(&mut w, *t, x)?;
    }
    Ok(())
}

pub fn save_series_csv(path: &Path, samples: &[(f64, Vec<f64>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_series_csv(&mut f, samples)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MackeyGlass, Population};
    use crate::solver::read_series_csv;

    #[test]
    fn population_settles_into_oscillation_about_one() {
        let sys = SeriesSystem {
            field: &Population,
            params: &[1.8],
            history: HistoryFunction::constant(vec![0.5]).unwrap(),
            tau: 1.0,
        };
        let s = generate_series(&sys, &SeriesOptions::new(60.0, 0.1)).unwrap();
        assert_eq!(s.len(), 601);
        let late: Vec<f64> = s.iter().filter(|(t, _)| *t >= 30.0).map(|(_, x)| x[0]).collect();
        let mean = late.iter().sum::<f64>() / late.len() as f64;
        let (lo, hi) = late.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((mean - 1.0).abs() < 0.1, "{mean}");
        assert!(hi - lo > 0.3 && lo > 0.0, "{lo} {hi}");
    }

    #[test]
    fn mackey_glass_is_bounded_and_aperiodic() {
        let sys = SeriesSystem {
            field: &MackeyGlass,
            params: &[2.0, 10.0, 1.0],
            history: HistoryFunction::constant(vec![0.5]).unwrap(),
            tau: 3.18,
        };
        let mut opts = SeriesOptions::new(300.0, 0.1);
        opts.burn_in = 50.0;
        let s = generate_series(&sys, &opts).unwrap();
        assert!(s.iter().all(|(_, x)| x[0] > 0.0 && x[0] < 2.0));
        // Distinct local maxima that never settle onto one repeating value.
        let xs: Vec<f64> = s.iter().map(|(_, x)| x[0]).collect();
        let peaks: Vec<f64> = xs.windows(3).filter(|w| w[1] > w[0] && w[1] >= w[2]).map(|w| w[1]).collect();
        let tail = &peaks[peaks.len() / 2..];
        let spread = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - tail.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(peaks.len() > 20 && spread > 0.05, "{} peaks, spread {spread}", peaks.len());
    }

    #[test]
    fn noise_free_and_noisy_outputs_are_reproducible() {
        let sys = SeriesSystem {
            field: &Population,
            params: &[1.8],
            history: HistoryFunction::constant(vec![0.5]).unwrap(),
            tau: 1.0,
        };
        let render = |noise: f64, seed: u64| {
            let mut o = SeriesOptions::new(5.0, 0.25);
            o.noise_sd = noise;
            o.seed = seed;
            let mut buf = Vec::new();
            write_series_csv(&mut buf, &generate_series(&sys, &o).unwrap()).unwrap();
            buf
        };
        assert_eq!(render(0.0, 3), render(0.0, 3));
        assert_eq!(render(0.0, 3), render(0.0, 4));
        assert_eq!(render(0.01, 3), render(0.01, 3));
        assert_ne!(render(0.01, 3), render(0.01, 4));
        let back = read_series_csv(std::str::from_utf8(&render(0.0, 1)).unwrap()).unwrap();
        assert_eq!(back.len(), 21);
        assert_eq!(back[4].0, 1.0);
    }

    #[test]
    fn rejects_bad_options() {
        let sys = SeriesSystem {
            field: &Population,
            params: &[1.8],
            history: HistoryFunction::constant(vec![0.5]).unwrap(),
            tau: 1.0,
        };
        assert!(generate_series(&sys, &SeriesOptions::new(5.0, 0.0)).is_err());
        assert!(generate_series(&sys, &SeriesOptions::new(0.0, 0.1)).is_err());
    }
}
