//! Exact information quantities on finite alphabets.
//!
//! Everything here is a direct double loop in nats, with `0 ln 0 = 0`.
//! These routines act as ground truth for the relation between the joint
//! divergence of normal and anomalous data and the mutual-information and
//! entropy terms that the training objective optimizes.

use imoc_diffmath::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Largest supported alphabet on either axis.
pub const MAX_ALPHABET: usize = 64;

const SUM_TOL: f64 = 1e-12;

/// A probability table `p(x, z)` stored row-major with `x` as the row.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    nx: usize,
    nz: usize,
    table: Vec<f64>,
}

/// Which entropy [`DiscreteJoint::entropy`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyOf {
    X,
    Z,
    ZGivenX,
}

impl DiscreteJoint {
    pub fn new(nx: usize, nz: usize, table: Vec<f64>) -> Result<Self> {
        if nx == 0 || nz == 0 || nx > MAX_ALPHABET || nz > MAX_ALPHABET {
            return Err(CoreError::invalid(
                "discrete_joint",
                format!("alphabet {nx}x{nz} outside 1..={MAX_ALPHABET}"),
            ));
        }
        if table.len() != nx * nz {
            return Err(CoreError::invalid(
                "discrete_joint",
                format!("{nx}x{nz} table needs {} entries, got {}", nx * nz, table.len()),
            ));
        }
        if let Some(i) = table.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(CoreError::invalid(
                "discrete_joint",
                format!("entry {i} is {}", table[i]),
            ));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(CoreError::invalid(
                "discrete_joint",
                format!("entries sum to {total}"),
            ));
        }
        Ok(DiscreteJoint { nx, nz, table })
    }

    /// Normalizes non-negative weights into a joint.
    pub fn from_weights(nx: usize, nz: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(CoreError::invalid("discrete_joint", "weights sum to zero"));
        }
        Self::new(nx, nz, weights.into_iter().map(|w| w / total).collect())
    }

    /// `p(x) p(z)` for two marginals.
    pub fn product(px: &[f64], pz: &[f64]) -> Result<Self> {
        let table = px
            .iter()
            .flat_map(|&a| pz.iter().map(move |&b| a * b))
            .collect();
        Self::from_weights(px.len(), pz.len(), table)
    }

    /// Builds `p(x) p(z|x)` from a marginal and row-stochastic conditionals.
    pub fn from_conditional(px: &[f64], pz_given_x: &[f64]) -> Result<Self> {
        let nx = px.len();
        if nx == 0 || !pz_given_x.len().is_multiple_of(nx) {
            return Err(CoreError::invalid("discrete_joint", "conditional shape mismatch"));
        }
        let nz = pz_given_x.len() / nx;
        let table = (0..nx * nz).map(|i| px[i / nz] * pz_given_x[i]).collect();
        Self::from_weights(nx, nz, table)
    }

    /// Uniform-Dirichlet draw; every entry strictly positive.
    pub fn random_positive(nx: usize, nz: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = (0..nx * nz).map(|_| exp_draw(rng)).collect();
        Self::from_weights(nx, nz, w)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.table[x * self.nz + z]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.table.chunks(self.nz).map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        let mut pz = vec![0.0; self.nz];
        for row in self.table.chunks(self.nz) {
            pz.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        pz
    }

    /// Row-stochastic `p(z|x)`; rows with `p(x) = 0` are left at zero.
    pub fn conditional_z_given_x(&self) -> Vec<f64> {
        let px = self.marginal_x();
        let mut out = self.table.clone();
        for (row, &m) in out.chunks_mut(self.nz).zip(&px) {
            if m > 0.0 {
                row.iter_mut().for_each(|v| *v /= m);
            }
        }
        out
    }

    pub fn entropy(&self, which: EntropyOf) -> f64 {
        match which {
            EntropyOf::X => entropy(&self.marginal_x()),
            EntropyOf::Z => entropy(&self.marginal_z()),
            EntropyOf::ZGivenX => {
                let cond = self.conditional_z_given_x();
                -self
                    .table
                    .iter()
                    .zip(&cond)
                    .map(|(&p, &c)| if p > 0.0 { p * c.ln() } else { 0.0 })
                    .sum::<f64>()
            }
        }
    }

    fn same_alphabet(&self, other: &Self) -> Result<()> {
        if self.nx != other.nx || self.nz != other.nz {
            return Err(CoreError::invalid(
                "discrete_joint",
                format!(
                    "alphabet mismatch {}x{} vs {}x{}",
                    self.nx, self.nz, other.nx, other.nz
                ),
            ));
        }
        Ok(())
    }
}

fn exp_draw(rng: &mut impl Rng) -> f64 {
    // Exponential(1) via inversion; 1 - u lies in (0, 1].
    -(1.0 - rng.random::<f64>()).ln()
}

/// `Σ p ln(p / q)`, rejecting `p > 0` where `q = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CoreError::invalid(
            "kl_divergence",
            format!("length {} vs {}", p.len(), q.len()),
        ));
    }
    let mut acc = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if !(b > 0.0) {
                return Err(CoreError::AbsoluteContinuity { index: i });
            }
            acc += a * (a / b).ln();
        }
    }
    Ok(acc)
}

/// `-Σ p ln p`. Marginals that round to just above 1 are treated as 1.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&v| if v > 0.0 { v * v.min(1.0).ln() } else { 0.0 })
        .sum::<f64>()
}

/// `Σ p(x,z) ln[p(x,z) / (p(x) p(z))]`.
pub fn mutual_information(p: &DiscreteJoint) -> f64 {
    let (px, pz) = (p.marginal_x(), p.marginal_z());
    let mut acc = 0.0;
    for x in 0..p.nx {
        for z in 0..p.nz {
            let v = p.get(x, z);
            if v > 0.0 {
                acc += v * (v / (px[x] * pz[z])).ln();
            }
        }
    }
    acc
}

/// `E_{p_n(x)} H(p_n(z|x), p_a(z|x)) = -Σ p_n(x,z) ln p_a(z|x)`.
pub fn expected_conditional_cross_entropy(pn: &DiscreteJoint, pa: &DiscreteJoint) -> Result<f64> {
    pn.same_alphabet(pa)?;
    let cond = pa.conditional_z_given_x();
    let mut acc = 0.0;
    for (i, (&p, &q)) in pn.table.iter().zip(&cond).enumerate() {
        if p > 0.0 {
            if !(q > 0.0) {
                return Err(CoreError::AbsoluteContinuity { index: i });
            }
            acc -= p * q.ln();
        }
    }
    Ok(acc)
}

/// Joint divergence minus the sum of its four components: mutual
/// information, negative entropy of `z`, conditional cross-entropy and the
/// divergence between input marginals. Zero up to rounding.
pub fn decomposition_residual(pn: &DiscreteJoint, pa: &DiscreteJoint) -> Result<f64> {
    pn.same_alphabet(pa)?;
    let kl = kl_divergence(&pn.table, &pa.table)?;
    let parts = mutual_information(pn) - pn.entropy(EntropyOf::Z)
        + expected_conditional_cross_entropy(pn, pa)?
        + kl_divergence(&pn.marginal_x(), &pa.marginal_x())?;
    Ok(kl - parts)
}

/// Joint divergence minus (input-marginal divergence + expected conditional
/// divergence).
pub fn chain_rule_residual(pn: &DiscreteJoint, pa: &DiscreteJoint) -> Result<f64> {
    pn.same_alphabet(pa)?;
    let kl = kl_divergence(&pn.table, &pa.table)?;
    let (cn, ca) = (pn.conditional_z_given_x(), pa.conditional_z_given_x());
    let px = pn.marginal_x();
    let mut expected = 0.0;
    for x in 0..pn.nx {
        if px[x] > 0.0 {
            let row = x * pn.nz..(x + 1) * pn.nz;
            expected += px[x] * kl_divergence(&cn[row.clone()], &ca[row])?;
        }
    }
    Ok(kl - (kl_divergence(&px, &pa.marginal_x())? + expected))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerBound {
    /// `p_a(z|x) <= p_n(z)` (and `<= 1`) wherever `p_n(x,z) > 0`.
    pub assumption_holds: bool,
    /// `KL[p_n || p_a] - (I_n(x,z) - H_n(z))`.
    pub gap: f64,
}

pub fn lower_bound_check(pn: &DiscreteJoint, pa: &DiscreteJoint) -> Result<LowerBound> {
    pn.same_alphabet(pa)?;
    let pz = pn.marginal_z();
    let cond = pa.conditional_z_given_x();
    let mut holds = true;
    for x in 0..pn.nx {
        for z in 0..pn.nz {
            let c = cond[x * pn.nz + z];
            if pn.get(x, z) > 0.0 && (c > pz[z] || c > 1.0) {
                holds = false;
            }
        }
    }
    let kl = kl_divergence(&pn.table, &pa.table)?;
    let gap = kl - (mutual_information(pn) - pn.entropy(EntropyOf::Z));
    Ok(LowerBound {
        assumption_holds: holds,
        gap,
    })
}

/// Proposal for pairs that can satisfy the lower-bound premise.
///
/// Since `Σ_z p_a(z|x) = Σ_z p_n(z) = 1`, the premise is only satisfiable
/// when each row of `p_n` leaves some `z` uncovered, so `p_n` gets a sparse
/// support with at least one hole per row while `p_a` stays strictly
/// positive and pushes most of each conditional's mass into the holes.
/// Callers still check the premise and reject failures.
pub fn propose_lower_bound_pair(
    nx: usize,
    nz: usize,
    rng: &mut impl Rng,
) -> Result<(DiscreteJoint, DiscreteJoint)> {
    if nz < 2 {
        return Err(CoreError::invalid("propose_lower_bound_pair", "needs nz >= 2"));
    }
    let mut support = vec![false; nx * nz];
    for row in support.chunks_mut(nz) {
        let hole = rng.random_range(0..nz);
        let mut any = false;
        for (z, s) in row.iter_mut().enumerate() {
            *s = z != hole && rng.random_bool(0.5);
            any |= *s;
        }
        if !any {
            row[(hole + 1) % nz] = true;
        }
    }
    let wn = support
        .iter()
        .map(|&s| if s { exp_draw(rng) } else { 0.0 })
        .collect();
    let pn = DiscreteJoint::from_weights(nx, nz, wn)?;
    let damp: f64 = rng.random_range(1e-4..0.2);
    let mut cond = Vec::with_capacity(nx * nz);
    for row in support.chunks(nz) {
        let w: Vec<f64> = row
            .iter()
            .map(|&s| exp_draw(rng) * if s { damp } else { 1.0 } + 1e-12)
            .collect();
        let t: f64 = w.iter().sum();
        cond.extend(w.into_iter().map(|v| v / t));
    }
    let px: Vec<f64> = (0..nx).map(|_| exp_draw(rng)).collect();
    let pa = DiscreteJoint::from_conditional(&px, &cond)?;
    Ok((pn, pa))
}

/// Settings for [`verify`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyConfig {
    pub pairs: usize,
    pub max_alphabet: usize,
    pub bound_pairs: usize,
    pub max_bound_attempts: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            pairs: 1000,
            max_alphabet: 8,
            bound_pairs: 100,
            max_bound_attempts: 100_000,
            seed: 0,
        }
    }
}

/// Worst cases found by [`verify`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub pairs: usize,
    pub max_decomposition_residual: f64,
    pub max_chain_rule_residual: f64,
    pub bound_pairs_found: usize,
    pub bound_attempts: usize,
    pub min_bound_gap: f64,
}

impl VerifyReport {
    pub fn decomposition_ok(&self) -> bool {
        self.max_decomposition_residual < 1e-10
    }

    pub fn chain_rule_ok(&self) -> bool {
        self.max_chain_rule_residual < 1e-12
    }

    pub fn bound_ok(&self, wanted: usize) -> bool {
        self.bound_pairs_found >= wanted && self.min_bound_gap >= -1e-12
    }
}

fn pair_rng(seed: u64, stream: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(i) << 20);
    rng
}

/// Runs the identity and bound checks over random strictly positive pairs
/// (alphabets drawn up to `max_alphabet` on each side).
pub fn verify(cfg: VerifyConfig) -> Result<VerifyReport> {
    let hi = cfg.max_alphabet.clamp(2, MAX_ALPHABET);
    let residuals = par::map_range(cfg.pairs, |i| -> Result<(f64, f64)> {
        let mut rng = pair_rng(cfg.seed, 1, i as u64);
        let nx = rng.random_range(1..=hi);
        let nz = rng.random_range(1..=hi);
        let pn = DiscreteJoint::random_positive(nx, nz, &mut rng)?;
        let pa = DiscreteJoint::random_positive(nx, nz, &mut rng)?;
        Ok((
            decomposition_residual(&pn, &pa)?.abs(),
            chain_rule_residual(&pn, &pa)?.abs(),
        ))
    });
    let mut max_dec: f64 = 0.0;
    let mut max_chain: f64 = 0.0;
    for r in residuals {
        let (d, c) = r?;
        max_dec = max_dec.max(d);
        max_chain = max_chain.max(c);
    }

    let mut found = 0;
    let mut attempts = 0;
    let mut min_gap = f64::INFINITY;
    while found < cfg.bound_pairs && attempts < cfg.max_bound_attempts {
        let mut rng = pair_rng(cfg.seed, 2, attempts as u64);
        attempts += 1;
        let nx = rng.random_range(1..=hi);
        let nz = rng.random_range(2..=hi);
        let (pn, pa) = propose_lower_bound_pair(nx, nz, &mut rng)?;
        let lb = lower_bound_check(&pn, &pa)?;
        if lb.assumption_holds {
            found += 1;
            min_gap = min_gap.min(lb.gap);
        }
    }
    Ok(VerifyReport {
        pairs: cfg.pairs,
        max_decomposition_residual: max_dec,
        max_chain_rule_residual: max_chain,
        bound_pairs_found: found,
        bound_attempts: attempts,
        min_bound_gap: min_gap,
    })
}
