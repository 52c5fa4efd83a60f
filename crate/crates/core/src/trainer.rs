//! Training loops for the base and extension objectives.
//!
//! Epochs are numbered from 1. Every random draw comes from a stream keyed
//! by the run seed: the shuffle of epoch `e` from `(SHUFFLE, e)` and the two
//! views of training sample `i` in epoch `e` from `(AUGMENT, e, i)`. The
//! history is therefore a function of config, seed and data alone.

use std::path::PathBuf;
use std::time::Instant;

use imoc_diffmath::{par, Adam, AdamConfig, Graph, Real, Tensor};
use rand::seq::SliceRandom;

use crate::augment::make_views;
use crate::checkpoint::checkpoint_save;
use crate::config::RunConfig;
use crate::data::OneClassTask;
use crate::error::{CoreError, Result};
use crate::estimators::{total_loss_base, total_loss_extension, LossBreakdown};
use crate::evaluate::{evaluate_task, ScoreKind, ScoreOptions, ScoreStream};
use crate::models::Encoder;
use crate::rng::{purpose, stream};

/// One evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    /// Batch-mean losses over the epoch; at epoch 0 a forward-only pass
    /// with the initial weights.
    pub loss: LossBreakdown,
    pub auroc: f64,
    pub mean_norm_normal: f64,
    pub mean_norm_anom: f64,
    /// Seconds since training started; 0 unless timing was requested.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Saved after every evaluation, so a failed run leaves the last good
    /// weights on disk.
    pub checkpoint: Option<PathBuf>,
    /// Fill `wall_time_s`; off by default to keep histories reproducible.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Base,
    Extension,
}

/// Trains from a fresh encoder with the base objective.
pub fn train_base<T: Real>(
    cfg: &RunConfig,
    task: &OneClassTask,
    opts: &TrainOptions,
) -> Result<(Encoder<T>, TrainHistory)> {
    if cfg.extension {
        return Err(CoreError::invalid("train_base", "config has extension = true"));
    }
    train(cfg, task, opts, Objective::Base)
}

/// Trains from a fresh encoder with the global-local extension objective.
pub fn train_extension<T: Real>(
    cfg: &RunConfig,
    task: &OneClassTask,
    opts: &TrainOptions,
) -> Result<(Encoder<T>, TrainHistory)> {
    if !cfg.extension {
        return Err(CoreError::invalid("train_extension", "config has extension = false"));
    }
    train(cfg, task, opts, Objective::Extension)
}

/// Dispatches on `cfg.extension`.
pub fn train_run<T: Real>(
    cfg: &RunConfig,
    task: &OneClassTask,
    opts: &TrainOptions,
) -> Result<(Encoder<T>, TrainHistory)> {
    if cfg.extension {
        train_extension(cfg, task, opts)
    } else {
        train_base(cfg, task, opts)
    }
}

/// The paired `[2N, ...]` view batch for training samples `idx` in `epoch`.
pub fn view_batch<T: Real>(cfg: &RunConfig, task: &OneClassTask, epoch: usize, idx: &[usize]) -> Tensor<T> {
    let ds = &task.train;
    let pairs = par::map_slice(idx, |&i| {
        let mut rng = stream(cfg.seed, &[purpose::AUGMENT, epoch as u64, i as u64]);
        make_views(ds.sample(i), ds.shape, &cfg.augment, &mut rng)
    });
    let mut data = Vec::with_capacity(2 * idx.len() * ds.sample_len());
    for (a, b) in pairs {
        data.extend(a.iter().chain(&b).map(|&v| T::from_f64_lossy(v as f64)));
    }
    let [c, h, w] = ds.shape;
    Tensor::from_vec(vec![2 * idx.len(), c, h, w], data).expect("views match the sample shape")
}

/// Shuffled mini-batches of one epoch. A trailing batch with fewer than two
/// samples is dropped because the contrastive loss needs a negative.
pub fn epoch_batches(cfg: &RunConfig, n: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, &[purpose::SHUFFLE, epoch as u64]));
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn batch_loss<T: Real>(
    g: &Graph<T>,
    enc: &Encoder<T>,
    p: &[imoc_diffmath::Var],
    x: Tensor<T>,
    cfg: &RunConfig,
    objective: Objective,
) -> Result<(imoc_diffmath::Var, LossBreakdown)> {
    let x = g.constant(x);
    let out = enc.forward(g, p, x)?;
    let sim = cfg.similarity(enc.global_dim());
    match objective {
        Objective::Base => total_loss_base(g, out.global, cfg.beta, cfg.entropy(), cfg.estimator, sim),
        Objective::Extension => total_loss_extension(
            g,
            out.global,
            out.projected,
            cfg.beta,
            cfg.entropy(),
            cfg.estimator,
            sim,
        ),
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.nce += b.nce;
    acc.entropy += b.entropy;
    acc.gvg += b.gvg;
    acc.gvl += b.gvl;
    acc.total += b.total;
}

fn mean_breakdown(mut acc: LossBreakdown, n: usize) -> LossBreakdown {
    let k = n.max(1) as f64;
    acc.nce /= k;
    acc.entropy /= k;
    acc.gvg /= k;
    acc.gvl /= k;
    acc.total /= k;
    acc
}

fn check_encoder<T: Real>(enc: &Encoder<T>, objective: Objective) -> Result<()> {
    if objective == Objective::Extension {
        let [_, npos] = enc.local_shape();
        let channels = if enc.has_projection() { enc.global_dim() } else { enc.local_shape()[0] };
        if channels != enc.global_dim() || npos == 0 {
            return Err(CoreError::invalid(
                "train_extension",
                "local features must match the global dimension; enable model.projection",
            ));
        }
    }
    Ok(())
}

fn train<T: Real>(
    cfg: &RunConfig,
    task: &OneClassTask,
    opts: &TrainOptions,
    objective: Objective,
) -> Result<(Encoder<T>, TrainHistory)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut enc = Encoder::<T>::build(cfg.encoder_config(task.train.shape), cfg.seed)?;
    check_encoder(&enc, objective)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        enc.params(),
    );
    let score = ScoreOptions {
        kind: match objective {
            Objective::Base => ScoreKind::Ori,
            Objective::Extension => ScoreKind::Extension,
        },
        sim: cfg.similarity(enc.global_dim()),
        policy: cfg.augment,
        mc_h: cfg.mc_h,
        stream: ScoreStream {
            seed: cfg.seed,
            repeat: 0,
        },
    };
    let mut history = TrainHistory::default();
    let mut record = |enc: &Encoder<T>, epoch: usize, loss: LossBreakdown| -> Result<()> {
        let ev = evaluate_task(enc, task, &score)?;
        history.records.push(EvalRecord {
            epoch,
            loss,
            auroc: ev.auroc,
            mean_norm_normal: ev.mean_norm_normal,
            mean_norm_anom: ev.mean_norm_anom,
            wall_time_s: if opts.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        if let Some(path) = &opts.checkpoint {
            checkpoint_save(enc, cfg, path)?;
        }
        Ok(())
    };

    let n = task.train.len();
    if n < 2 {
        return Err(CoreError::invalid("train", "needs at least two training samples"));
    }
    // Epoch 0: forward-only losses of the initial weights.
    let mut acc = LossBreakdown::default();
    let batches = epoch_batches(cfg, n, 0);
    for (b, idx) in batches.iter().enumerate() {
        let g = Graph::new();
        let p = enc.bind_frozen(&g);
        let (_, br) = batch_loss(&g, &enc, &p, view_batch(cfg, task, 0, idx), cfg, objective)?;
        if !br.total.is_finite() {
            return Err(CoreError::NonFinite { epoch: 0, batch: b });
        }
        add_breakdown(&mut acc, &br);
    }
    record(&enc, 0, mean_breakdown(acc, batches.len()))?;

    for epoch in 1..=cfg.epochs {
        let mut acc = LossBreakdown::default();
        let batches = epoch_batches(cfg, n, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let g = Graph::new();
            let p = enc.bind(&g);
            let (loss, br) = batch_loss(&g, &enc, &p, view_batch(cfg, task, epoch, idx), cfg, objective)?;
            if !br.total.is_finite() {
                return Err(CoreError::NonFinite { epoch, batch: b });
            }
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor<T>> = p.iter().map(|&v| grads.grad(v)).collect();
            adam.step(enc.params_mut(), &gs)?;
            add_breakdown(&mut acc, &br);
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            record(&enc, epoch, mean_breakdown(acc, batches.len()))?;
        }
    }
    Ok((enc, history))
}
