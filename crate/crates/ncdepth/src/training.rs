//! Training: the Huber data term, the confidence-augmented loss with its
//! epoch weighting, masked reduction over valid ground truth, ADAM, the
//! seeded training loop, and a finite-difference gradient-check harness.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{NcError, Result};
use crate::nconv::{nconv_backward, nconv_forward, NConvLayer};
use crate::network::{model_backward, model_forward, save_checkpoint, Model};
use crate::rng::SeededRng;
use crate::tensor::{SignalPair, Tensor4};

/// Huber norm with breakpoint 1: quadratic inside, linear outside.
pub fn huber(z: f64, t: f64) -> f64 {
    let d = z - t;
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn huber_deriv(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Loss decomposition over the valid pixels of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Mean Huber error E over valid pixels.
    pub data_term: f64,
    /// Mean of the confidence reward term -(1/p)(C - E C); negative when
    /// the network is confident where it is accurate.
    pub confidence_term: f64,
    /// Mean total loss; equals data_term + confidence_term.
    pub total: f64,
    pub valid_count: usize,
}

fn check_loss_shapes(z: &Tensor4, c: &Tensor4, target: &Tensor4, valid: &Tensor4) -> Result<()> {
    if !z.same_shape(c) || !z.same_shape(target) || !z.same_shape(valid) {
        return Err(NcError::Shape(format!(
            "loss inputs must agree: z {:?}, c {:?}, target {:?}, valid {:?}",
            z.shape(),
            c.shape(),
            target.shape(),
            valid.shape()
        )));
    }
    Ok(())
}

/// Confidence-augmented loss. Per valid pixel, with `E` the Huber error
/// and `C` the output confidence:
///
/// ```text
/// total_pixel = E - (1/p) * (C - E * C)
/// ```
///
/// reduced as the mean over valid pixels; invalid pixels contribute to
/// neither term. `p` is the 1-based epoch index, so the confidence reward
/// fades as training progresses.
pub fn conf_loss(
    z: &Tensor4,
    c: &Tensor4,
    target: &Tensor4,
    valid: &Tensor4,
    p: usize,
) -> Result<LossReport> {
    let (report, _, _) = conf_loss_with_grad(z, c, target, valid, p)?;
    Ok(report)
}

/// [`conf_loss`] plus the gradients of the mean total loss with respect to
/// the prediction and the output confidence.
pub fn conf_loss_with_grad(
    z: &Tensor4,
    c: &Tensor4,
    target: &Tensor4,
    valid: &Tensor4,
    p: usize,
) -> Result<(LossReport, Tensor4, Tensor4)> {
    check_loss_shapes(z, c, target, valid)?;
    if p < 1 {
        return Err(NcError::Invalid("epoch index p starts at 1".into()));
    }
    let count = valid.values().iter().filter(|&&v| v > 0.5).count();
    if count == 0 {
        return Err(NcError::Invalid(
            "sample has no valid ground-truth pixels".into(),
        ));
    }
    let inv_p = 1.0 / p as f64;
    let inv_n = 1.0 / count as f64;
    let (n, ch, h, w) = z.shape();
    let mut grad_z = Tensor4::zeros(n, ch, h, w)?;
    let mut grad_c = Tensor4::zeros(n, ch, h, w)?;
    let mut sum_e = 0.0;
    let mut sum_conf_term = 0.0;
    let mut sum_total = 0.0;
    for k in 0..z.len() {
        if valid.values()[k] <= 0.5 {
            continue;
        }
        let zv = z.values()[k];
        let tv = target.values()[k];
        let cv = c.values()[k];
        let e = huber(zv, tv);
        let conf_term = -inv_p * (cv - e * cv);
        sum_e += e;
        sum_conf_term += conf_term;
        sum_total += e + conf_term;
        // d(total)/dz = huber'(z - t) (1 + C/p) / N
        grad_z.values_mut()[k] = huber_deriv(zv - tv) * (1.0 + cv * inv_p) * inv_n;
        // d(total)/dC = -(1/p)(1 - E) / N
        grad_c.values_mut()[k] = -inv_p * (1.0 - e) * inv_n;
    }
    let report = LossReport {
        data_term: sum_e * inv_n,
        confidence_term: sum_conf_term * inv_n,
        total: sum_total * inv_n,
        valid_count: count,
    };
    Ok((report, grad_z, grad_c))
}

/// Bias-corrected ADAM over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Default coefficients (beta1 0.9, beta2 0.999, eps 1e-8) with the
    /// given learning rate.
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NcError::Shape(format!(
                "adam state sized for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / b1t;
            let v_hat = self.v[k] / b2t;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Loop configuration. The model variant and epsilon live in the model's
/// own spec; this carries the optimization schedule.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// When set, history.csv / model_final.ncm / model_best.ncm are
    /// written here.
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(NcError::Invalid("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(NcError::Invalid("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NcError::Invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One history row per epoch.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_data_loss: f64,
    pub mean_total_loss: f64,
    pub mean_output_conf: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters at the epoch with the lowest mean data loss.
    pub best_model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRow>,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "model_final.ncm";
pub const BEST_CHECKPOINT: &str = "model_best.ncm";

/// Seeded mini-batch training.
///
/// Batches are drawn from a seeded shuffle each epoch; the batch gradient
/// is the mean of per-sample gradients (computed concurrently, reduced in
/// sample order so runs are byte-reproducible). A non-finite loss aborts
/// with the offending epoch/batch in the error.
pub fn train(model: Model, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(NcError::Invalid("training set is empty".into()));
    }
    let mut model = model;
    let n_params = model.count_params();
    let mut adam = AdamState::new(n_params, cfg.learning_rate);
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: (f64, Model, usize) = (f64::INFINITY, model.clone(), 0);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut sum_data = 0.0;
        let mut sum_total = 0.0;
        let mut sum_conf = 0.0;
        let mut seen = 0usize;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let per_sample: Vec<Result<(LossReport, Vec<f64>, f64)>> = batch
                .par_iter()
                .map(|&si| {
                    let s = &samples[si];
                    let input = SignalPair::new(s.sparse_depth.clone(), s.input_conf.clone())?;
                    let (out, cache) = model_forward(&model, &input)?;
                    let (report, gz, gc) =
                        conf_loss_with_grad(&out.data, &out.conf, &s.gt_depth, &s.gt_valid, epoch)?;
                    let grads = model_backward(&model, &cache, &gz, &gc)?;
                    let mean_conf =
                        out.conf.values().iter().sum::<f64>() / out.conf.len() as f64;
                    Ok((report, grads.to_vector(), mean_conf))
                })
                .collect();

            let mut batch_grad = vec![0.0f64; n_params];
            for (slot, res) in per_sample.into_iter().enumerate() {
                let (report, grad, mean_conf) = res?;
                if !report.total.is_finite() {
                    return Err(NcError::NonFinite(format!(
                        "loss diverged at epoch {epoch}, batch {batch_idx} (sample index {}): \
                         data {:.6e}, total {:.6e}",
                        batch[slot], report.data_term, report.total
                    )));
                }
                for (acc, g) in batch_grad.iter_mut().zip(&grad) {
                    *acc += g;
                }
                sum_data += report.data_term;
                sum_total += report.total;
                sum_conf += mean_conf;
                seen += 1;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grad.iter_mut() {
                *g *= scale;
            }
            if let Some(bad) = batch_grad.iter().find(|g| !g.is_finite()) {
                return Err(NcError::NonFinite(format!(
                    "gradient diverged at epoch {epoch}, batch {batch_idx}: {bad}"
                )));
            }

            let mut params = model.param_vector();
            adam.step(&mut params, &batch_grad)?;
            model.set_param_vector(&params)?;
        }

        let row = EpochRow {
            epoch,
            mean_data_loss: sum_data / seen as f64,
            mean_total_loss: sum_total / seen as f64,
            mean_output_conf: sum_conf / seen as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        if row.mean_data_loss < best.0 {
            best = (row.mean_data_loss, model.clone(), epoch);
        }
        history.push(row);
    }

    let outcome = TrainOutcome {
        model,
        best_model: best.1,
        best_epoch: best.2,
        history,
    };
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|e| NcError::io(dir, e))?;
        let mut csv = String::from("epoch,mean_data_loss,mean_total_loss,mean_output_conf,seconds\n");
        for r in &outcome.history {
            csv.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.epoch, r.mean_data_loss, r.mean_total_loss, r.mean_output_conf, r.seconds
            ));
        }
        let hist_path = dir.join(HISTORY_FILE);
        fs::write(&hist_path, csv).map_err(|e| NcError::io(&hist_path, e))?;
        save_checkpoint(&outcome.model, &dir.join(FINAL_CHECKPOINT))?;
        save_checkpoint(&outcome.best_model, &dir.join(BEST_CHECKPOINT))?;
    }
    Ok(outcome)
}

/// Worst-case result of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub params_probed: usize,
}

/// Central-difference step mandated for all gradient checks.
pub const FD_STEP: f64 = 1e-6;

/// Relative error with an absolute floor: tiny gradients are compared at
/// the floor scale instead of blowing up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare two gradient vectors; returns (worst relative error, index).
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let mut worst = (0.0f64, 0usize);
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n);
        if e > worst.0 {
            worst = (e, k);
        }
    }
    worst
}

fn probe_vectors(shape: (usize, usize, usize, usize), rng: &mut SeededRng) -> (Tensor4, Tensor4) {
    let (n, c, h, w) = shape;
    let r1 = Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.uniform(-1.0, 1.0)).unwrap();
    let r2 = Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.uniform(-1.0, 1.0)).unwrap();
    (r1, r2)
}

fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

/// Check one layer's raw-weight and bias gradients against central
/// differences of a random linear probe of both outputs.
pub fn gradcheck_layer(
    layer: &NConvLayer,
    h_px: usize,
    w_px: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let in_ch = layer.in_ch();
    let z = Tensor4::from_fn(1, in_ch, h_px, w_px, |_, _, _, _| rng.uniform(0.5, 5.0))?;
    let c = Tensor4::from_fn(1, in_ch, h_px, w_px, |_, _, _, _| rng.uniform(0.05, 0.95))?;
    let (r1, r2) = probe_vectors((1, layer.out_ch(), h_px, w_px), &mut rng);

    let (_, cache) = nconv_forward(&z, &c, layer)?;
    let grads = nconv_backward(&r1, &r2, &cache, layer)?;
    let mut analytic = grads.w_raw.values().to_vec();
    analytic.extend_from_slice(&grads.bias);

    let n_weights = layer.weights.len();
    let total = n_weights + layer.bias.len();
    let numeric: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|k| {
            let eval = |delta: f64| -> f64 {
                let mut l = layer.clone();
                if k < n_weights {
                    l.weights.values_mut()[k] += delta;
                } else {
                    l.bias[k - n_weights] += delta;
                }
                let (out, _) = nconv_forward(&z, &c, &l).expect("probe forward");
                dot(&out.data, &r1) + dot(&out.conf, &r2)
            };
            (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
        })
        .collect();

    let (worst, idx) = compare_gradients(&analytic, &numeric);
    Ok(GradCheckReport {
        worst_rel_err: worst,
        worst_param: if idx < n_weights {
            format!("weight[{idx}]")
        } else {
            format!("bias[{}]", idx - n_weights)
        },
        params_probed: total,
    })
}

/// Check every parameter of a model against central differences on a
/// small random sparse input.
pub fn gradcheck_model(model: &Model, h_px: usize, w_px: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let z = Tensor4::from_fn(1, 1, h_px, w_px, |_, _, _, _| rng.uniform(0.5, 5.0))?;
    let c = Tensor4::from_fn(1, 1, h_px, w_px, |_, _, _, _| rng.uniform(0.05, 0.95))?;
    let input = SignalPair::new(z, c)?;
    let (out, cache) = model_forward(model, &input)?;
    let (r1, r2) = probe_vectors(out.shape(), &mut rng);

    let analytic = model_backward(model, &cache, &r1, &r2)?.to_vector();
    let base_params = model.param_vector();

    let numeric: Vec<f64> = (0..base_params.len())
        .into_par_iter()
        .map(|k| {
            let eval = |delta: f64| -> f64 {
                let mut m = model.clone();
                let mut p = base_params.clone();
                p[k] += delta;
                m.set_param_vector(&p).expect("same length");
                let (out, _) = model_forward(&m, &input).expect("probe forward");
                dot(&out.data, &r1) + dot(&out.conf, &r2)
            };
            (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
        })
        .collect();

    let (worst, idx) = compare_gradients(&analytic, &numeric);
    Ok(GradCheckReport {
        worst_rel_err: worst,
        worst_param: format!("param[{idx}] of {}", model.variant().name()),
        params_probed: base_params.len(),
    })
}
