use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::optim::AdamState;
use super::record::{EpochRecord, TrainEvent, TrainRecord, TrainStatus};
use crate::error::{check_len, NddeError, Result};

/// Loss of one dataset item and the forward stage evaluations it cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemEval {
    pub loss: f64,
    pub nfe: u64,
}

/// A dataset whose items share one trainable vector `theta`.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn theta_len(&self) -> usize;

    /// Loss of `item`. When `grad` is given it is overwritten with the gradient.
    fn evaluate(&self, theta: &[f64], item: usize, grad: Option<&mut [f64]>) -> Result<ItemEval>;

    /// Per-coordinate learning-rate multipliers.
    fn lr_scale(&self) -> Option<Vec<f64>> {
        None
    }

    /// Restores admissibility after a step; returns the delay if it was clamped.
    fn project(&self, _theta: &mut [f64]) -> Option<f64> {
        None
    }

    fn tau(&self, _theta: &[f64]) -> Option<f64> {
        None
    }

    fn tracked(&self, _theta: &[f64]) -> Vec<(String, f64)> {
        Vec::new()
    }
}

fn is_recoverable(e: &NddeError) -> bool {
    matches!(
        e,
        NddeError::Divergence { .. } | NddeError::Domain(_) | NddeError::Numerical(_)
    )
}

struct BatchEval {
    loss_sum: f64,
    grad: Vec<f64>,
    nfe: u64,
}

/// Sums item losses and gradients in item order, whatever the thread count.
fn eval_batch<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    items: &[usize],
    want_grad: bool,
) -> Result<BatchEval> {
    let dim = obj.theta_len();
    let results: Vec<Result<(ItemEval, Vec<f64>)>> = items
        .par_iter()
        .map(|&i| {
            let mut g = if want_grad { vec![0.0; dim] } else { Vec::new() };
            let e = obj.evaluate(theta, i, want_grad.then_some(&mut g[..]))?;
            Ok((e, g))
        })
        .collect();
    let mut out = BatchEval {
        loss_sum: 0.0,
        grad: vec![0.0; if want_grad { dim } else { 0 }],
        nfe: 0,
    };
    for r in results {
        let (e, g) = r?;
        out.loss_sum += e.loss;
        out.nfe += e.nfe;
        for (a, b) in out.grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if !out.loss_sum.is_finite() || out.grad.iter().any(|v| !v.is_finite()) {
        return Err(NddeError::Numerical("non-finite loss or gradient".into()));
    }
    let n = items.len() as f64;
    out.grad.iter_mut().for_each(|g| *g /= n);
    Ok(out)
}

/// Total loss over every item, forward only.
pub fn evaluate_loss<O: Objective + ?Sized>(obj: &O, theta: &[f64]) -> Result<(f64, u64)> {
    let items: Vec<usize> = (0..obj.len()).collect();
    let b = eval_batch(obj, theta, &items, false)?;
    Ok((b.loss_sum / obj.len() as f64, b.nfe))
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| NddeError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs the optimizer over `train` starting from `theta0`, recording one entry
/// per epoch plus the final state. A failed or non-finite step rolls back to
/// the previous parameters, halves the learning rate and retries.
pub fn train<O: Objective + ?Sized>(
    train: &O,
    test: Option<&O>,
    theta0: Vec<f64>,
    cfg: &TrainConfig,
) -> Result<TrainRecord> {
    cfg.validate()?;
    check_len("initial parameters", train.theta_len(), theta0.len())?;
    if train.is_empty() {
        return Err(NddeError::Input("training set is empty".into()));
    }
    let start = Instant::now();
    let mut record = with_pool(cfg.threads, || run(train, test, theta0, cfg))??;
    record.wall_time_s = start.elapsed().as_secs_f64();
    Ok(record)
}

struct Snapshot {
    theta: Vec<f64>,
    opt: AdamState,
    grad: Vec<f64>,
}

fn run<O: Objective + ?Sized>(
    obj: &O,
    test: Option<&O>,
    mut theta: Vec<f64>,
    cfg: &TrainConfig,
) -> Result<TrainRecord> {
    let n = obj.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let scale = obj.lr_scale();
    let mut optimizer = cfg.optimizer;
    let mut opt = AdamState::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut nfe = 0u64;
    let mut solves = 0u64;
    let mut epochs = Vec::with_capacity(cfg.epochs + 1);
    let mut events = Vec::new();
    let mut prev: Option<Snapshot> = None;
    let mut status = TrainStatus::Completed;

    let test_loss = |theta: &[f64], nfe: &mut u64, solves: &mut u64| -> Result<Option<f64>> {
        match test {
            None => Ok(None),
            Some(t) => match evaluate_loss(t, theta) {
                Ok((l, k)) => {
                    *nfe += k;
                    *solves += t.len() as u64;
                    Ok(Some(l))
                }
                Err(e) if is_recoverable(&e) => Ok(Some(f64::INFINITY)),
                Err(e) => Err(e),
            },
        }
    };

    'epochs: for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let tau = obj.tau(&theta);
        let tracked = obj.tracked(&theta);
        let test_loss = test_loss(&theta, &mut nfe, &mut solves)?;
        let lr_at_start = optimizer.lr();
        let mut loss_sum = 0.0;
        let mut retries = 0usize;
        for chunk in order.chunks(batch) {
            let b = loop {
                match eval_batch(obj, &theta, chunk, true) {
                    Ok(b) => break b,
                    Err(e) if is_recoverable(&e) => {
                        retries += 1;
                        let Some(p) = prev.as_ref().filter(|_| retries <= cfg.max_retries) else {
                            status = TrainStatus::Diverged {
                                epoch,
                                detail: e.to_string(),
                            };
                            break 'epochs;
                        };
                        optimizer.set_lr(0.5 * optimizer.lr());
                        events.push(TrainEvent::Divergence {
                            epoch,
                            detail: e.to_string(),
                            new_lr: optimizer.lr(),
                        });
                        theta.clone_from(&p.theta);
                        opt.clone_from(&p.opt);
                        optimizer.step(&mut theta, &p.grad, &mut opt, scale.as_deref())?;
                        if let Some(t) = obj.project(&mut theta) {
                            events.push(TrainEvent::TauProjected { epoch, tau: t });
                        }
                    }
                    Err(e) => return Err(e),
                }
            };
            retries = 0;
            nfe += b.nfe;
            solves += chunk.len() as u64;
            loss_sum += b.loss_sum;
            prev = Some(Snapshot {
                theta: theta.clone(),
                opt: opt.clone(),
                grad: b.grad.clone(),
            });
            optimizer.step(&mut theta, &b.grad, &mut opt, scale.as_deref())?;
            if let Some(t) = obj.project(&mut theta) {
                events.push(TrainEvent::TauProjected { epoch, tau: t });
            }
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            test_loss,
            nfe,
            tau,
            tracked,
            lr: lr_at_start,
        });
    }

    if status == TrainStatus::Completed {
        match evaluate_loss(obj, &theta) {
            Ok((l, k)) => {
                nfe += k;
                solves += n as u64;
                let test_loss = test_loss(&theta, &mut nfe, &mut solves)?;
                epochs.push(EpochRecord {
                    epoch: cfg.epochs,
                    train_loss: l,
                    test_loss,
                    nfe,
                    tau: obj.tau(&theta),
                    tracked: obj.tracked(&theta),
                    lr: optimizer.lr(),
                });
            }
            Err(e) if is_recoverable(&e) => {
                // The last step broke the model; fall back to the last
                // parameters whose gradient evaluated cleanly.
                events.push(TrainEvent::Divergence {
                    epoch: cfg.epochs,
                    detail: e.to_string(),
                    new_lr: optimizer.lr(),
                });
                let fallback = prev.map(|p| p.theta);
                match fallback.as_deref().map(|t| evaluate_loss(obj, t)) {
                    Some(Ok((l, k))) => {
                        theta = fallback.unwrap_or_default();
                        nfe += k;
                        solves += n as u64;
                        let test_loss = test_loss(&theta, &mut nfe, &mut solves)?;
                        epochs.push(EpochRecord {
                            epoch: cfg.epochs,
                            train_loss: l,
                            test_loss,
                            nfe,
                            tau: obj.tau(&theta),
                            tracked: obj.tracked(&theta),
                            lr: optimizer.lr(),
                        });
                    }
                    _ => {
                        status = TrainStatus::Diverged {
                            epoch: cfg.epochs,
                            detail: e.to_string(),
                        };
                        if let Some(t) = fallback {
                            theta = t;
                        }
                    }
                }
            }
            Err(e) => return Err(e),
        }
    } else if let Some(p) = prev {
        theta = p.theta;
    }

    Ok(TrainRecord {
        epochs,
        events,
        status,
        final_theta: theta,
        forward_solves: solves,
        wall_time_s: 0.0,
    })
}
