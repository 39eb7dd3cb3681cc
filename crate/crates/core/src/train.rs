//! Adam, gradient clipping, the training loop and the finite-difference
//! gradient check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QGInstance;
use crate::decode::{decode, DecodeOptions};
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::model::Model;
use crate::tensor::{save_checkpoint, GradStore, ParamStore, Tensor};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero. A
/// non-finite gradient aborts before anything is modified.
pub fn adam_step(params: &mut ParamStore, grads: &GradStore, state: &mut OptimState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::arg(format!(
            "optimizer tracks {} tensors but the model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NanGradient(params.name(id).to_string()));
        }
        if g.shape() != params.value(id).shape() {
            return Err(Error::dim("adam_step", g.shape(), params.value(id).shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).requires_grad {
            continue;
        }
        let i = id.index();
        let g = grads.get(id);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let w = params.value_mut(id).data_mut();
        for k in 0..w.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            w[k] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` to norm `max_norm` when above it. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Decoding used for the per-epoch dev BLEU-4.
    pub eval_beam: usize,
    pub eval_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            clip: 5.0,
            patience: 3,
            seed: 1,
            eval_beam: 1,
            eval_max_len: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub epoch_losses: Vec<f64>,
    pub dev_bleu4: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub steps: u64,
    pub config: serde_json::Value,
    pub seed: u64,
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    epoch: usize,
    loss: f64,
    lr: f64,
    grad_norm: f64,
}

/// One optimizer step on `batch`: mean loss, gradient, clipping, Adam.
/// Returns (loss, pre-clip gradient norm).
pub fn train_step(model: &mut Model, batch: &[QGInstance], opt: &mut OptimState, clip: f64) -> Result<(f64, f64)> {
    let (loss, mut grads) = model.loss_and_grads(batch)?;
    let norm = clip_global_norm(&mut grads, clip);
    adam_step(model.params_mut(), &grads, opt)?;
    Ok((loss, norm))
}

/// Dev BLEU-4 over token ids.
pub fn dev_bleu4(model: &Model, dev: &[QGInstance], opts: &DecodeOptions) -> Result<f64> {
    use rayon::prelude::*;
    let hyps: Vec<Vec<usize>> = dev
        .par_iter()
        .map(|inst| {
            let mut d = model.decoder(inst)?;
            Ok(decode(&mut d, opts)?.output().to_vec())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<usize>> = dev.iter().map(|i| i.question.clone()).collect();
    Ok(bleu(&hyps, &refs, 4)?.score)
}

/// Shuffled minibatch training with per-epoch dev BLEU-4, best-checkpoint
/// retention and early stopping. With `out_dir`, writes `train_log.jsonl`
/// and `best.ckpt` there.
pub fn train(
    model: &mut Model,
    train_set: &[QGInstance],
    dev_set: &[QGInstance],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainRunRecord> {
    if train_set.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let best_path = out_dir.map(|d| d.join("best.ckpt"));
    let mut opt = OptimState::new(model.params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let decode_opts = DecodeOptions {
        beam: cfg.eval_beam,
        max_len: cfg.eval_max_len,
        ..DecodeOptions::default()
    };
    let mut record = TrainRunRecord {
        epoch_losses: Vec::new(),
        dev_bleu4: Vec::new(),
        best_epoch: None,
        best_checkpoint: None,
        steps: 0,
        config: serde_json::json!({ "model": model.config(), "train": cfg }),
        seed: cfg.seed,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<QGInstance> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, norm) = train_step(model, &batch, &mut opt, cfg.clip)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            loss_sum += loss;
            batches += 1;
            if let Some((f, p)) = &mut log {
                let line = LogLine {
                    step: opt.step,
                    epoch,
                    loss,
                    lr: opt.lr,
                    grad_norm: norm,
                };
                let mut text = serde_json::to_string(&line).expect("log line serializes");
                text.push('\n');
                f.write_all(text.as_bytes()).map_err(|e| Error::io(p.as_path(), e))?;
            }
        }
        record.epoch_losses.push(loss_sum / batches as f64);
        let score = if dev_set.is_empty() {
            -record.epoch_losses[epoch]
        } else {
            dev_bleu4(model, dev_set, &decode_opts)?
        };
        record.dev_bleu4.push(if dev_set.is_empty() { f64::NAN } else { score });
        log::info!(
            "epoch {} loss {:.4} dev {:.4}",
            epoch + 1,
            record.epoch_losses[epoch],
            score
        );
        if score > best {
            best = score;
            stale = 0;
            record.best_epoch = Some(epoch);
            if let Some(p) = &best_path {
                save_checkpoint(model.params(), p)?;
                record.best_checkpoint = Some(p.clone());
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {}", epoch + 1);
                break;
            }
        }
    }
    record.steps = opt.step;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per group (all of them if the group is smaller).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-3,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub coordinates: usize,
    pub sampled: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub architecture: String,
    pub groups: Vec<GroupReport>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn total_sampled(&self) -> usize {
        self.groups.iter().map(|g| g.sampled).sum()
    }

    /// The failing group with the largest error, as an error value.
    pub fn failure(&self) -> Option<Error> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error >= self.tol)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|g| Error::GradCheck {
                group: g.group.clone(),
                coordinate: g.worst.clone(),
                error: g.max_rel_error,
            })
    }
}

/// Parameter group of a tensor name: everything before the last `.`.
pub fn param_group(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences on sampled coordinates of every parameter group,
/// compared against the analytic gradient of the mean loss on `batch`.
pub fn gradcheck(model: &mut Model, batch: &[QGInstance], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut groups: Vec<(String, Vec<(crate::tensor::ParamId, usize)>)> = Vec::new();
    for (id, p) in model.params().iter() {
        if !p.requires_grad || p.value.is_empty() {
            continue;
        }
        let group = param_group(&p.name).to_string();
        let coords = (0..p.value.len()).map(|k| (id, k));
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, v)) => v.extend(coords),
            None => groups.push((group, coords.collect())),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(groups.len());
    for (group, coords) in groups {
        let n = coords.len();
        let take = opts.samples.min(n);
        let mut picked: Vec<usize> = index::sample(&mut rng, n, take).into_vec();
        picked.sort_unstable();
        let mut worst = (0.0f64, String::new());
        for i in picked {
            let (id, k) = coords[i];
            let orig = model.params().value(id).data()[k];
            model.params_mut().value_mut(id).data_mut()[k] = orig + opts.eps;
            let up = model.forward_loss(batch);
            model.params_mut().value_mut(id).data_mut()[k] = orig - opts.eps;
            let down = model.forward_loss(batch);
            model.params_mut().value_mut(id).data_mut()[k] = orig;
            let numeric = (up? - down?) / (2.0 * opts.eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(analytic, numeric);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{}[{k}]", model.params().name(id)));
            }
        }
        reports.push(GroupReport {
            group,
            coordinates: n,
            sampled: take,
            max_rel_error: worst.0,
            worst: worst.1,
        });
    }
    let passed = reports.iter().all(|g| g.max_rel_error < opts.tol);
    Ok(GradCheckReport {
        architecture: model.config().arch.name().to_string(),
        groups: reports,
        tol: opts.tol,
        passed,
    })
}
