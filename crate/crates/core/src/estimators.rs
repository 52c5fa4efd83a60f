//! Sample-based losses: the contrastive mutual-information terms, the
//! norm-based entropy regularizers, and the base and extension totals.
//!
//! Batches hold two augmented views per sample in paired order: rows `2k`
//! and `2k + 1` (zero-based) are views of sample `k`.

use imoc_diffmath::{Graph, Real, Var};

use crate::error::{CoreError, Result};

/// Saturation level of the similarity clamp used throughout.
pub const DEFAULT_C2: f64 = 20.0;

/// Constants of the similarity clamp `c2 * tanh(s / (c1 * c2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityConfig {
    /// Latent dimension of the vectors being compared.
    pub c1: f64,
    pub c2: f64,
}

impl SimilarityConfig {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0 && c1.is_finite() && c2.is_finite()) {
            return Err(CoreError::invalid(
                "similarity_config",
                format!("c1 and c2 must be positive, got {c1} and {c2}"),
            ));
        }
        Ok(SimilarityConfig { c1, c2 })
    }

    /// `c1` set to the latent dimension, `c2` to [`DEFAULT_C2`].
    pub fn for_latent(dim: usize) -> Self {
        SimilarityConfig {
            c1: dim as f64,
            c2: DEFAULT_C2,
        }
    }
}

/// Which mutual-information surrogate drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Nce,
    Jsd,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Nce => "nce",
            Estimator::Jsd => "jsd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nce" => Some(Estimator::Nce),
            "jsd" => Some(Estimator::Jsd),
            _ => None,
        }
    }
}

/// Norm order and squaring of the entropy regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntropyConfig {
    pub p: u8,
    pub squared: bool,
}

impl EntropyConfig {
    /// Squared for `p = 2`, plain for `p = 1`.
    pub fn with_default_squaring(p: u8) -> Self {
        EntropyConfig { p, squared: p == 2 }
    }
}

/// Scalar loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub nce: f64,
    pub entropy: f64,
    pub gvg: f64,
    pub gvl: f64,
    pub total: f64,
}

pub fn clamp_similarity(s: f64, cfg: SimilarityConfig) -> f64 {
    cfg.c2 * (s / (cfg.c1 * cfg.c2)).tanh()
}

/// [`clamp_similarity`] applied elementwise inside a graph.
pub fn clamp_var<T: Real>(g: &Graph<T>, s: Var, cfg: SimilarityConfig) -> Var {
    let inner = g.scale(s, T::from_f64_lossy(1.0 / (cfg.c1 * cfg.c2)));
    let t = g.tanh(inner);
    g.scale(t, T::from_f64_lossy(cfg.c2))
}

fn paired_rows<T: Real>(g: &Graph<T>, z: Var, op: &'static str) -> Result<usize> {
    let shape = g.shape(z);
    if shape.len() != 2 {
        return Err(CoreError::invalid(op, format!("expects [2N, d], got {shape:?}")));
    }
    let rows = shape[0];
    if !rows.is_multiple_of(2) || rows < 4 {
        return Err(CoreError::invalid(
            op,
            format!("needs an even number of rows with N >= 2 pairs, got {rows} rows"),
        ));
    }
    Ok(rows)
}

/// Clamped similarity matrix of a paired batch, shifted by its global maximum.
fn shifted_similarities<T: Real>(g: &Graph<T>, z: Var, cfg: SimilarityConfig) -> Result<Var> {
    let s = g.matmul_t(z, z, false, true)?;
    let s = clamp_var(g, s, cfg);
    let max = g.value(s).max_value();
    Ok(g.add_scalar(s, -max))
}

fn partner(i: usize) -> usize {
    i ^ 1
}

/// Contrastive pair loss over a `[2N, d]` batch.
///
/// For each anchor the softmax runs over all other rows (positive included,
/// self excluded). The `1/K` constant of the underlying bound is omitted, so
/// the value lies in `[0, 4 c2 + ln(2N - 1)]`.
pub fn nce_pair_loss<T: Real>(g: &Graph<T>, z: Var, cfg: SimilarityConfig) -> Result<Var> {
    let rows = paired_rows(g, z, "nce_pair_loss")?;
    let s = shifted_similarities(g, z, cfg)?;
    let mask: Vec<bool> = (0..rows * rows).map(|k| k / rows != k % rows).collect();
    let lse = g.masked_logsumexp(s, mask)?;
    let pos_idx = (0..rows).map(|i| i * rows + partner(i)).collect();
    let pos = g.take(s, pos_idx, vec![rows])?;
    let per_anchor = g.sub(lse, pos)?;
    Ok(g.mean_all(per_anchor))
}

/// Softplus-based surrogate: `mean softplus(-pos) + mean softplus(neg)`.
pub fn jsd_mi_loss<T: Real>(g: &Graph<T>, pos: Var, neg: Var) -> Result<Var> {
    if g.value(pos).is_empty() || g.value(neg).is_empty() {
        return Err(CoreError::invalid("jsd_mi_loss", "empty score set"));
    }
    let np = g.scale(pos, -T::one());
    let a = g.softplus(np);
    let a = g.mean_all(a);
    let b = g.softplus(neg);
    let b = g.mean_all(b);
    Ok(g.add(a, b)?)
}

/// [`jsd_mi_loss`] with the clamped dot product as critic: positives are the
/// paired views, negatives every other off-diagonal pair.
pub fn jsd_pair_loss<T: Real>(g: &Graph<T>, z: Var, cfg: SimilarityConfig) -> Result<Var> {
    let rows = paired_rows(g, z, "jsd_pair_loss")?;
    let s = g.matmul_t(z, z, false, true)?;
    let s = clamp_var(g, s, cfg);
    let pos_idx = (0..rows).map(|i| i * rows + partner(i)).collect();
    let neg_idx: Vec<usize> = (0..rows * rows)
        .filter(|&k| {
            let (i, j) = (k / rows, k % rows);
            i != j && j != partner(i)
        })
        .collect();
    let nneg = neg_idx.len();
    let pos = g.take(s, pos_idx, vec![rows])?;
    let neg = g.take(s, neg_idx, vec![nneg])?;
    jsd_mi_loss(g, pos, neg)
}

/// Mutual-information term of the chosen estimator on a paired batch.
pub fn mi_pair_loss<T: Real>(
    g: &Graph<T>,
    z: Var,
    estimator: Estimator,
    cfg: SimilarityConfig,
) -> Result<Var> {
    match estimator {
        Estimator::Nce => nce_pair_loss(g, z, cfg),
        Estimator::Jsd => jsd_pair_loss(g, z, cfg),
    }
}

/// Spatial sum of a `[N, d, n]` feature map. Because the map similarity sums
/// every location pair, `Σ_a Σ_b φ_aᵀ ψ_b = (Σ_a φ_a)ᵀ (Σ_b ψ_b)`.
fn spatial_sum<T: Real>(g: &Graph<T>, phi: Var, op: &'static str) -> Result<Var> {
    let shape = g.shape(phi);
    if shape.len() != 3 {
        return Err(CoreError::invalid(op, format!("expects [N, d, n], got {shape:?}")));
    }
    Ok(g.sum(phi, 2)?)
}

/// Interleaves two `[N, d]` sets so that row `2k` is `a[k]` and row `2k + 1`
/// is `b[k]`.
fn interleave<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    let n = g.shape(a)[0];
    let both = g.concat_rows(&[a, b])?;
    let order: Vec<usize> = (0..n).flat_map(|k| [k, n + k]).collect();
    Ok(g.select_rows(both, &order)?)
}

/// Map-level pair loss: sample `k` contributes the pair `(Φ1[k], Φ2[k])`,
/// and all `2N` maps are contrasted with summed location-pair similarities.
pub fn nce_map_loss<T: Real>(g: &Graph<T>, phi1: Var, phi2: Var, cfg: SimilarityConfig) -> Result<Var> {
    map_loss(g, phi1, phi2, Estimator::Nce, cfg)
}

fn map_loss<T: Real>(
    g: &Graph<T>,
    phi1: Var,
    phi2: Var,
    estimator: Estimator,
    cfg: SimilarityConfig,
) -> Result<Var> {
    let (s1, s2) = (g.shape(phi1), g.shape(phi2));
    if s1.len() != 3 || s2.len() != 3 || s1[0] != s2[0] || s1[1] != s2[1] {
        return Err(CoreError::invalid(
            "nce_map_loss",
            format!("incompatible maps {s1:?} and {s2:?}"),
        ));
    }
    let a = spatial_sum(g, phi1, "nce_map_loss")?;
    let b = spatial_sum(g, phi2, "nce_map_loss")?;
    let z = interleave(g, a, b)?;
    mi_pair_loss(g, z, estimator, cfg)
}

/// Mean per-row norm over the last axis: `‖z‖₁`, `‖z‖₂²`, or the
/// alternative squaring given by `ent`.
pub fn entropy_regularizer<T: Real>(g: &Graph<T>, z: Var, ent: EntropyConfig) -> Result<Var> {
    let per_row = row_norms(g, z, ent)?;
    Ok(g.mean_all(per_row))
}

fn row_norms<T: Real>(g: &Graph<T>, z: Var, ent: EntropyConfig) -> Result<Var> {
    if ent.p != 1 && ent.p != 2 {
        return Err(CoreError::invalid(
            "entropy_regularizer",
            format!("p must be 1 or 2, got {}", ent.p),
        ));
    }
    if g.shape(z).len() != 2 {
        return Err(CoreError::invalid(
            "entropy_regularizer",
            format!("expects [M, d], got {:?}", g.shape(z)),
        ));
    }
    Ok(match (ent.p, ent.squared) {
        (2, true) => g.sq_norm(z)?,
        (p, false) => g.pnorm(z, p)?,
        (_, true) => {
            let n = g.pnorm(z, 1)?;
            g.mul(n, n)?
        }
    })
}

fn to_f64<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.item(v).to_f64_lossy()
}

/// `mi + β · entropy` over a paired `[2N, d]` batch.
pub fn total_loss_base<T: Real>(
    g: &Graph<T>,
    z: Var,
    beta: f64,
    ent: EntropyConfig,
    estimator: Estimator,
    cfg: SimilarityConfig,
) -> Result<(Var, LossBreakdown)> {
    check_beta(beta)?;
    let mi = mi_pair_loss(g, z, estimator, cfg)?;
    let h = entropy_regularizer(g, z, ent)?;
    let weighted = g.scale(h, T::from_f64_lossy(beta));
    let total = g.add(mi, weighted)?;
    let breakdown = LossBreakdown {
        nce: to_f64(g, mi),
        entropy: to_f64(g, h),
        gvg: 0.0,
        gvl: 0.0,
        total: to_f64(g, total),
    };
    Ok((total, breakdown))
}

/// `gvg + gvl + β · entropy` for globals `[2N, d]` and projected locals
/// `[2N, d, n]`.
///
/// `gvl` averages the two cross-view map losses (second-view globals against
/// first-view locals and vice versa). The entropy term averages
/// `‖g_i‖ + ‖l_i‖` over rows, with each local map flattened.
pub fn total_loss_extension<T: Real>(
    g: &Graph<T>,
    globals: Var,
    locals: Var,
    beta: f64,
    ent: EntropyConfig,
    estimator: Estimator,
    cfg: SimilarityConfig,
) -> Result<(Var, LossBreakdown)> {
    check_beta(beta)?;
    let rows = paired_rows(g, globals, "total_loss_extension")?;
    let ls = g.shape(locals);
    let d = g.shape(globals)[1];
    if ls.len() != 3 || ls[0] != rows || ls[1] != d {
        return Err(CoreError::invalid(
            "total_loss_extension",
            format!("locals {ls:?} do not match globals [{rows}, {d}]"),
        ));
    }
    let gvg = mi_pair_loss(g, globals, estimator, cfg)?;

    let lsum = spatial_sum(g, locals, "total_loss_extension")?;
    let first: Vec<usize> = (0..rows / 2).map(|k| 2 * k).collect();
    let second: Vec<usize> = (0..rows / 2).map(|k| 2 * k + 1).collect();
    let g_first = g.select_rows(globals, &first)?;
    let g_second = g.select_rows(globals, &second)?;
    let l_first = g.select_rows(lsum, &first)?;
    let l_second = g.select_rows(lsum, &second)?;
    let a = interleave(g, g_second, l_first)?;
    let a = mi_pair_loss(g, a, estimator, cfg)?;
    let b = interleave(g, g_first, l_second)?;
    let b = mi_pair_loss(g, b, estimator, cfg)?;
    let gvl = g.add(a, b)?;
    let gvl = g.scale(gvl, T::from_f64_lossy(0.5));

    let flat = g.reshape(locals, vec![rows, ls[1] * ls[2]])?;
    let hg = row_norms(g, globals, ent)?;
    let hl = row_norms(g, flat, ent)?;
    let h = g.add(hg, hl)?;
    let h = g.mean_all(h);

    let weighted = g.scale(h, T::from_f64_lossy(beta));
    let mi = g.add(gvg, gvl)?;
    let total = g.add(mi, weighted)?;
    let breakdown = LossBreakdown {
        nce: to_f64(g, mi),
        entropy: to_f64(g, h),
        gvg: to_f64(g, gvg),
        gvl: to_f64(g, gvl),
        total: to_f64(g, total),
    };
    Ok((total, breakdown))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(CoreError::invalid("total_loss", format!("beta must be >= 0, got {beta}")));
    }
    Ok(())
}
