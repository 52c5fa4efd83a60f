//! Normal scores and exact AUROC.
//!
//! Higher scores mean "more normal". Scores are computed in `f64` from
//! encoder outputs of either precision.

use std::io::Write;
use std::path::Path;

use imoc_diffmath::{par, Real, Tensor};

use crate::augment::{make_views, AugmentPolicy};
use crate::data::{Dataset, OneClassTask};
use crate::error::{CoreError, Result};
use crate::estimators::{clamp_similarity, SimilarityConfig};
use crate::models::Encoder;
use crate::rng::{purpose, stream};

/// Samples encoded per call when scoring a whole dataset.
pub const EVAL_CHUNK: usize = 256;

/// Header line of the scores CSV.
pub const SCORES_SCHEMA: &str = "# imoc-scores v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Clamped squared norm of the latent of the unaugmented input.
    Ori,
    /// One random view pair.
    Rand,
    /// Sum over `H` random view pairs.
    Mc,
    /// Global-global plus global-local similarity.
    Extension,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Ori => "ori",
            ScoreKind::Rand => "rand",
            ScoreKind::Mc => "mc",
            ScoreKind::Extension => "extension",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ori" => Some(ScoreKind::Ori),
            "rand" => Some(ScoreKind::Rand),
            "mc" => Some(ScoreKind::Mc),
            "extension" => Some(ScoreKind::Extension),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRecord {
    pub score: f64,
    /// `true` for normal samples.
    pub normal: bool,
}

/// Area under the ROC curve of `records`, normals as positives.
///
/// Computed from midranks as the Mann-Whitney statistic, so ties count one
/// half.
pub fn auroc(records: &[ScoreRecord]) -> Result<f64> {
    if let Some(i) = records.iter().position(|r| !r.score.is_finite()) {
        return Err(CoreError::invalid("auroc", format!("score {i} is not finite")));
    }
    let n_pos = records.iter().filter(|r| r.normal).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::invalid(
            "auroc",
            format!("needs both classes, got {n_pos} normal and {n_neg} anomalous"),
        ));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && records[order[end]].score == records[order[start]].score {
            end += 1;
        }
        // Ranks start..end (one-based start+1..=end) share their mean.
        let mid = (start + 1 + end) as f64 / 2.0;
        let pos = order[start..end].iter().filter(|&&i| records[i].normal).count();
        rank_sum += mid * pos as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Pairs scores with the normal flags of a task's test split.
pub fn records(scores: &[f64], normal: &[bool]) -> Vec<ScoreRecord> {
    scores
        .iter()
        .zip(normal)
        .map(|(&score, &normal)| ScoreRecord { score, normal })
        .collect()
}

/// Samples `range` of `ds` as a `[n, C, H, W]` tensor.
pub fn batch_tensor<T: Real>(ds: &Dataset, range: std::ops::Range<usize>) -> Tensor<T> {
    let per = ds.sample_len();
    let [c, h, w] = ds.shape;
    let data: Vec<T> = ds.data[range.start * per..range.end * per]
        .iter()
        .map(|&v| T::from_f64_lossy(v as f64))
        .collect();
    Tensor::from_vec(vec![range.len(), c, h, w], data).expect("range lies inside the dataset")
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy()).sum()
}

/// `clamp(zᵀz)` per row of the batch `x`.
pub fn score_ori<T: Real>(enc: &Encoder<T>, x: &Tensor<T>, sim: SimilarityConfig) -> Result<Vec<f64>> {
    let out = enc.encode(x)?;
    let n = out.global.shape()[0];
    Ok((0..n)
        .map(|i| {
            let z = out.global.row(i);
            clamp_similarity(dot(z, z), sim)
        })
        .collect())
}

/// `clamp(gᵀg + Σ_j gᵀl_j)` per row, with `l` the projected local map.
pub fn score_extension<T: Real>(enc: &Encoder<T>, x: &Tensor<T>, sim: SimilarityConfig) -> Result<Vec<f64>> {
    let out = enc.encode(x)?;
    let gs = out.global.shape().to_vec();
    let ls = out.projected.shape().to_vec();
    if ls.len() != 3 || ls[1] != gs[1] {
        return Err(CoreError::invalid(
            "score_extension",
            format!("encoder has no local features matching the global dimension (locals {ls:?}, globals {gs:?})"),
        ));
    }
    let (d, npos) = (ls[1], ls[2]);
    Ok((0..gs[0])
        .map(|i| {
            let z = out.global.row(i);
            let l = &out.projected.data()[i * d * npos..(i + 1) * d * npos];
            let mut s = dot(z, z);
            for (c, zc) in z.iter().enumerate() {
                let zc = zc.to_f64_lossy();
                s += l[c * npos..(c + 1) * npos]
                    .iter()
                    .map(|v| zc * v.to_f64_lossy())
                    .sum::<f64>();
            }
            clamp_similarity(s, sim)
        })
        .collect())
}

/// Identifies the random streams of one stochastic evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreStream {
    pub seed: u64,
    /// Index of the repeated evaluation.
    pub repeat: u64,
}

/// Sum over `h` view pairs of the clamped similarity of their latents, for
/// samples `range` of `ds`.
///
/// Pair `j` of sample `i` comes from the stream `(seed, repeat, i, j)`, so
/// `h = 1` reproduces [`score_rand`] exactly.
pub fn score_mc<T: Real>(
    enc: &Encoder<T>,
    ds: &Dataset,
    range: std::ops::Range<usize>,
    policy: &AugmentPolicy,
    sim: SimilarityConfig,
    h: usize,
    key: ScoreStream,
) -> Result<Vec<f64>> {
    if h < 1 {
        return Err(CoreError::invalid("score_mc", "needs H >= 1"));
    }
    let per = ds.sample_len();
    let [c, hh, ww] = ds.shape;
    let n = range.len();
    let mut views = Vec::with_capacity(2 * n * h * per);
    for i in range.clone() {
        for j in 0..h {
            let mut rng = stream(key.seed, &[purpose::SCORE, key.repeat, i as u64, j as u64]);
            let (a, b) = make_views(ds.sample(i), ds.shape, policy, &mut rng);
            views.extend(a.iter().chain(&b).map(|&v| T::from_f64_lossy(v as f64)));
        }
    }
    let x = Tensor::from_vec(vec![2 * n * h, c, hh, ww], views)?;
    let z = enc.encode(&x)?.global;
    Ok((0..n)
        .map(|k| {
            (0..h)
                .map(|j| {
                    let r = 2 * (k * h + j);
                    clamp_similarity(dot(z.row(r), z.row(r + 1)), sim)
                })
                .sum()
        })
        .collect())
}

/// One random view pair per sample.
pub fn score_rand<T: Real>(
    enc: &Encoder<T>,
    ds: &Dataset,
    range: std::ops::Range<usize>,
    policy: &AugmentPolicy,
    sim: SimilarityConfig,
    key: ScoreStream,
) -> Result<Vec<f64>> {
    score_mc(enc, ds, range, policy, sim, 1, key)
}

/// Options of a full-dataset scoring pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub kind: ScoreKind,
    pub sim: SimilarityConfig,
    pub policy: AugmentPolicy,
    pub mc_h: usize,
    pub stream: ScoreStream,
}

fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(size))
        .map(|i| i * size..((i + 1) * size).min(n))
        .collect()
}

/// Scores every sample of `ds`, chunk-parallel.
pub fn score_dataset<T: Real>(enc: &Encoder<T>, ds: &Dataset, opts: &ScoreOptions) -> Result<Vec<f64>> {
    let size = match opts.kind {
        ScoreKind::Ori | ScoreKind::Extension => EVAL_CHUNK,
        ScoreKind::Rand => EVAL_CHUNK / 2,
        ScoreKind::Mc => (EVAL_CHUNK / (2 * opts.mc_h.max(1))).max(1),
    };
    let parts = par::map_slice(&chunks(ds.len(), size), |r| match opts.kind {
        ScoreKind::Ori => score_ori(enc, &batch_tensor(ds, r.clone()), opts.sim),
        ScoreKind::Extension => score_extension(enc, &batch_tensor(ds, r.clone()), opts.sim),
        ScoreKind::Rand => score_rand(enc, ds, r.clone(), &opts.policy, opts.sim, opts.stream),
        ScoreKind::Mc => score_mc(enc, ds, r.clone(), &opts.policy, opts.sim, opts.mc_h, opts.stream),
    });
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `‖z‖₂` of the global latent of every sample.
pub fn latent_norms<T: Real>(enc: &Encoder<T>, ds: &Dataset) -> Result<Vec<f64>> {
    let parts = par::map_slice(&chunks(ds.len(), EVAL_CHUNK), |r| {
        enc.encode(&batch_tensor(ds, r.clone())).map(|out| {
            (0..r.len())
                .map(|i| {
                    let z = out.global.row(i);
                    dot(z, z).sqrt()
                })
                .collect::<Vec<_>>()
        })
    });
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Test-split metrics of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub auroc: f64,
    pub mean_norm_normal: f64,
    pub mean_norm_anom: f64,
}

fn mean_where(values: &[f64], mask: &[bool], want: bool) -> f64 {
    let (s, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == want)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    s / n.max(1) as f64
}

/// Scores the task's test split and summarizes it.
pub fn evaluate_task<T: Real>(enc: &Encoder<T>, task: &OneClassTask, opts: &ScoreOptions) -> Result<Evaluation> {
    let scores = score_dataset(enc, &task.test, opts)?;
    let auroc = auroc(&records(&scores, &task.test_normal))?;
    let norms = latent_norms(enc, &task.test)?;
    Ok(Evaluation {
        auroc,
        mean_norm_normal: mean_where(&norms, &task.test_normal, true),
        mean_norm_anom: mean_where(&norms, &task.test_normal, false),
        scores,
    })
}

/// Writes `sample,score,label` rows (label 1 = normal) after the schema line.
pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut text = format!("{SCORES_SCHEMA}\nsample,score,label\n");
    for (i, r) in records.iter().enumerate() {
        text.push_str(&format!("{i},{},{}\n", r.score, u8::from(r.normal)));
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CoreError::io(path, e))
}
