//! Geometric pessimism: embedding, mean-kNN uncertainty, MAD standardisation
//! and the density-adaptive penalty, precomputed once per dataset into a
//! [`PenaltyTable`] that training reads by row index.
//!
//! `GQP1` sidecar layout (little-endian):
//!
//! ```text
//! magic "GQP1" | version u32 | N u64 | k u32 | alpha f32 | lambda_base f32 | tau f32 | sigma_mad f32
//! u_tilde N f32 | u N f32 | rho N f32 | lambda_adapt N f32 | penalty N f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActionRef, ActionSpace, NormStats, TransitionDataset};
use crate::error::{Error, Result};
pub use crate::knn::{Neighbor, NeighborIndex};

pub const TABLE_MAGIC: &[u8; 4] = b"GQP1";
pub const TABLE_VERSION: u32 = 1;
pub const TABLE_HEADER_BYTES: usize = 36;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// How a discrete action index enters the embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscreteEmbedding {
    /// The index itself as one real coordinate.
    #[default]
    Index,
    /// One coordinate per action.
    OneHot,
}

impl DiscreteEmbedding {
    pub fn action_width(&self, space: ActionSpace) -> usize {
        match (self, space) {
            (_, ActionSpace::Continuous { dim }) => dim,
            (DiscreteEmbedding::Index, ActionSpace::Discrete { .. }) => 1,
            (DiscreteEmbedding::OneHot, ActionSpace::Discrete { count }) => count,
        }
    }
}

/// `[norm(s), a]`: normalised state followed by the raw action.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn embed(state: &[f32], action: ActionRef<'_>, norm: &NormStats) -> Result<Embedding> {
    embed_with(state, action, norm, DiscreteEmbedding::Index, None)
}

pub fn embed_with(
    state: &[f32],
    action: ActionRef<'_>,
    norm: &NormStats,
    scheme: DiscreteEmbedding,
    action_count: Option<usize>,
) -> Result<Embedding> {
    if state.len() != norm.dim() {
        return Err(Error::Dimension { expected: norm.dim(), got: state.len() });
    }
    let mut v: Vec<f64> = norm.normalize_f64(state).collect();
    push_action(&mut v, action, scheme, action_count)?;
    Ok(Embedding(v))
}

fn push_action(
    v: &mut Vec<f64>,
    action: ActionRef<'_>,
    scheme: DiscreteEmbedding,
    action_count: Option<usize>,
) -> Result<()> {
    match (action, scheme) {
        (ActionRef::Continuous(a), _) => v.extend(a.iter().map(|&x| x as f64)),
        (ActionRef::Discrete(a), DiscreteEmbedding::Index) => v.push(a as f64),
        (ActionRef::Discrete(a), DiscreteEmbedding::OneHot) => {
            let count = action_count
                .ok_or_else(|| Error::invalid("one-hot embedding needs the action count"))?;
            if a as usize >= count {
                return Err(Error::invalid(format!("action {a} out of range for {count} actions")));
            }
            v.extend((0..count).map(|j| if j == a as usize { 1.0 } else { 0.0 }));
        }
    }
    Ok(())
}

/// Row-major `N x d_e` embeddings of every `(s_i, a_i)`.
pub fn embed_dataset(ds: &TransitionDataset, norm: &NormStats, scheme: DiscreteEmbedding) -> Result<Vec<f64>> {
    if norm.dim() != ds.state_dim() {
        return Err(Error::Dimension { expected: ds.state_dim(), got: norm.dim() });
    }
    let count = match ds.action_space() {
        ActionSpace::Discrete { count } => Some(count),
        ActionSpace::Continuous { .. } => None,
    };
    let width = ds.state_dim() + scheme.action_width(ds.action_space());
    let mut out = Vec::with_capacity(ds.len() * width);
    for i in 0..ds.len() {
        out.extend(norm.normalize_f64(ds.state(i)));
        push_action(&mut out, ds.action(i), scheme, count)?;
    }
    Ok(out)
}

pub fn build_index(embeddings: Vec<f64>, dim: usize) -> Result<NeighborIndex> {
    NeighborIndex::build(embeddings, dim)
}

/// Mean Euclidean distance from `query` to its `k` nearest indexed points.
pub fn raw_uncertainty(
    query: &[f64],
    index: &NeighborIndex,
    k: usize,
    exclude: Option<usize>,
) -> Result<f64> {
    let nbrs = index.knn(query, k, exclude)?;
    Ok(nbrs.iter().map(|n| n.distance).sum::<f64>() / k as f64)
}

/// 1-based nearest rank `ceil(alpha * n)`, clamped to `[1, n]`.
///
/// Products within a relative 1e-6 of an integer snap to it, so that
/// `0.3 * 10` (and its f32 round trip) resolves to rank 3.
pub fn nearest_rank(alpha: f64, n: usize) -> usize {
    let x = alpha * n as f64;
    let r = x.round();
    let rank = if (x - r).abs() <= 1e-6 * r.max(1.0) { r } else { x.ceil() };
    (rank as usize).clamp(1, n)
}

/// Sorts a copy and returns the median; even lengths average the two central values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Safe threshold `tau` (nearest-rank alpha-quantile) and robust spread
/// `median(|u_tilde - tau|) + epsilon`.
pub fn fit_stats(u_tilde: &[f64], alpha: f64, epsilon: f64) -> Result<(f64, f64)> {
    if u_tilde.is_empty() {
        return Err(Error::invalid("cannot fit geometry statistics on an empty array"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut sorted = u_tilde.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tau = sorted[nearest_rank(alpha, sorted.len()) - 1];
    let dev: Vec<f64> = u_tilde.iter().map(|x| (x - tau).abs()).collect();
    Ok((tau, median(&dev) + epsilon))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryStats {
    pub k: usize,
    pub alpha: f64,
    pub lambda_base: f64,
    pub tau: f64,
    pub sigma_mad: f64,
    pub epsilon: f64,
}

/// Robust z-score `(u_tilde - tau) / sigma_mad`.
pub fn standardize(u_tilde: f64, stats: &GeometryStats) -> f64 {
    (u_tilde - stats.tau) / stats.sigma_mad
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptivePenalty {
    pub rho: f64,
    pub lambda_adapt: f64,
    pub penalty: f64,
}

/// Density factor, adaptive weight and final penalty for a standardised score `u`.
pub fn adaptive_penalty(u: f64, lambda_base: f64) -> AdaptivePenalty {
    let excess = u.max(0.0);
    let rho = 1.0 / (1.0 + excess);
    let lambda_adapt = lambda_base * (2.0 - 1.5 * rho);
    AdaptivePenalty { rho, lambda_adapt, penalty: lambda_adapt * excess }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeConfig {
    pub k: usize,
    pub alpha: f64,
    pub lambda_base: f64,
    pub epsilon: f64,
    pub discrete_embedding: DiscreteEmbedding,
}

impl Default for PrecomputeConfig {
    fn default() -> Self {
        PrecomputeConfig {
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            lambda_base: 1.0,
            epsilon: DEFAULT_EPSILON,
            discrete_embedding: DiscreteEmbedding::Index,
        }
    }
}

/// Per-row lookup table; `penalty[i]` is subtracted from `r_i` in the critic target.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTable {
    pub u_tilde: Vec<f32>,
    pub u: Vec<f32>,
    pub rho: Vec<f32>,
    pub lambda_adapt: Vec<f32>,
    pub penalty: Vec<f32>,
    pub stats: GeometryStats,
}

/// Leave-one-out mean-kNN score of every row against the rest of `index`.
pub fn score_rows(index: &NeighborIndex, k: usize) -> Result<Vec<f64>> {
    let n = index.len();
    (0..n)
        .into_par_iter()
        .map(|i| raw_uncertainty(index.point(i), index, k, Some(i)))
        .collect()
}

pub fn precompute(ds: &TransitionDataset, norm: &NormStats, cfg: &PrecomputeConfig) -> Result<PenaltyTable> {
    let n = ds.len();
    if cfg.k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if n <= cfg.k {
        return Err(Error::invalid(format!(
            "dataset has {n} rows; precompute needs more than k = {}",
            cfg.k
        )));
    }
    if !(cfg.lambda_base >= 0.0 && cfg.lambda_base.is_finite()) {
        return Err(Error::invalid("lambda_base must be a finite non-negative number"));
    }
    let emb = embed_dataset(ds, norm, cfg.discrete_embedding)?;
    let dim = emb.len() / n;
    let index = build_index(emb, dim)?;

    // values are rounded to their stored f32 precision before anything downstream
    // reads them, so a reloaded table reproduces the in-memory one exactly
    let u_tilde: Vec<f32> = score_rows(&index, cfg.k)?.into_iter().map(|x| x as f32).collect();
    let wide: Vec<f64> = u_tilde.iter().map(|&x| x as f64).collect();
    let (tau, sigma) = fit_stats(&wide, cfg.alpha, cfg.epsilon)?;
    let stats = GeometryStats {
        k: cfg.k,
        alpha: cfg.alpha as f32 as f64,
        lambda_base: cfg.lambda_base as f32 as f64,
        tau: tau as f32 as f64,
        sigma_mad: sigma as f32 as f64,
        epsilon: cfg.epsilon,
    };

    let mut table = PenaltyTable {
        u_tilde,
        u: Vec::with_capacity(n),
        rho: Vec::with_capacity(n),
        lambda_adapt: Vec::with_capacity(n),
        penalty: Vec::with_capacity(n),
        stats,
    };
    for &ut in &wide {
        let u = standardize(ut, &table.stats) as f32;
        let p = adaptive_penalty(u as f64, table.stats.lambda_base);
        table.u.push(u);
        table.rho.push(p.rho as f32);
        table.lambda_adapt.push(p.lambda_adapt as f32);
        table.penalty.push(p.penalty as f32);
    }
    Ok(table)
}

impl PenaltyTable {
    pub fn len(&self) -> usize {
        self.penalty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.penalty.is_empty()
    }

    /// O(1) lookup of the precomputed penalty for a batch of dataset rows.
    pub fn penalties_for<'a>(&'a self, rows: &'a [usize]) -> impl Iterator<Item = f32> + 'a {
        rows.iter().map(move |&i| self.penalty[i])
    }

    pub fn zero_penalty_fraction(&self) -> f64 {
        self.penalty.iter().filter(|&&p| p == 0.0).count() as f64 / self.len() as f64
    }

    pub fn check_matches(&self, ds: &TransitionDataset) -> Result<()> {
        if self.len() != ds.len() {
            return Err(Error::validation(format!(
                "penalty table has {} rows but dataset has {}",
                self.len(),
                ds.len()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_u32::<LittleEndian>(TABLE_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.stats.k as u32)?;
        for x in [self.stats.alpha, self.stats.lambda_base, self.stats.tau, self.stats.sigma_mad] {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
        for arr in [&self.u_tilde, &self.u, &self.rho, &self.lambda_adapt, &self.penalty] {
            let mut buf = Vec::with_capacity(arr.len() * 4);
            for x in arr.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("file too short for GQP1 header"))?;
        if &magic != TABLE_MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected GQP1")));
        }
        let short = |_| Error::format("truncated GQP1 header");
        let version = r.read_u32::<LittleEndian>().map_err(short)?;
        if version != TABLE_VERSION {
            return Err(Error::format(format!("unsupported GQP1 version {version}")));
        }
        let n = r.read_u64::<LittleEndian>().map_err(short)? as usize;
        let k = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut head = [0f32; 4];
        r.read_f32_into::<LittleEndian>(&mut head).map_err(short)?;
        let mut arrays: Vec<Vec<f32>> = Vec::with_capacity(5);
        for _ in 0..5 {
            let mut a = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut a)
                .map_err(|_| Error::format("length mismatch: GQP1 payload shorter than N"))?;
            arrays.push(a);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("length mismatch: trailing bytes after GQP1 payload"));
        }
        let penalty = arrays.pop().unwrap();
        let lambda_adapt = arrays.pop().unwrap();
        let rho = arrays.pop().unwrap();
        let u = arrays.pop().unwrap();
        let u_tilde = arrays.pop().unwrap();
        if penalty.iter().chain(&u).chain(&u_tilde).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("penalty table entry".into()));
        }
        Ok(PenaltyTable {
            u_tilde,
            u,
            rho,
            lambda_adapt,
            penalty,
            stats: GeometryStats {
                k,
                alpha: head[0] as f64,
                lambda_base: head[1] as f64,
                tau: head[2] as f64,
                sigma_mad: head[3] as f64,
                epsilon: DEFAULT_EPSILON,
            },
        })
    }
}

pub fn save_table(table: &PenaltyTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    table.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_table(path: impl AsRef<Path>) -> Result<PenaltyTable> {
    PenaltyTable::read_from(BufReader::new(File::open(path.as_ref())?))
}

/// Loads a sidecar and checks it against its companion dataset.
pub fn load_table_for(path: impl AsRef<Path>, ds: &TransitionDataset) -> Result<PenaltyTable> {
    let t = load_table(path)?;
    t.check_matches(ds)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Actions;
    use proptest::prelude::*;

    fn norm1(mean: f32, std: f32) -> NormStats {
        NormStats { state_mean: vec![mean], state_std: vec![std] }
    }

    #[test]
    fn embed_examples() {
        let ns = NormStats { state_mean: vec![1.0, -2.0], state_std: vec![3.0, 0.5] };
        let e = embed(&[1.0, -2.0], ActionRef::Continuous(&[0.7]), &ns).unwrap();
        assert_eq!(e.0, vec![0.0, 0.0, 0.7f32 as f64]);

        let e = embed(&[3.0], ActionRef::Continuous(&[-1.0]), &norm1(1.0, 2.0)).unwrap();
        assert_eq!(e.0, vec![1.0, -1.0]);

        let e = embed(&[3.0], ActionRef::Discrete(4), &norm1(1.0, 2.0)).unwrap();
        assert_eq!(*e.0.last().unwrap(), 4.0);

        assert!(matches!(
            embed(&[1.0, 2.0], ActionRef::Discrete(0), &norm1(0.0, 1.0)),
            Err(Error::Dimension { .. })
        ));

        let e = embed_with(&[3.0], ActionRef::Discrete(2), &norm1(1.0, 2.0), DiscreteEmbedding::OneHot, Some(4))
            .unwrap();
        assert_eq!(e.0, vec![1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn raw_uncertainty_triangle() {
        let idx = build_index(vec![0.0, 0.0, 3.0, 0.0, 0.0, 4.0], 2).unwrap();
        let q = [0.0, 0.0];
        // the stored coincident point is row 0
        assert_eq!(raw_uncertainty(&q, &idx, 2, Some(0)).unwrap(), 3.5);
        assert_eq!(raw_uncertainty(&q, &idx, 3, None).unwrap(), 7.0 / 3.0);
        assert!(raw_uncertainty(&q, &idx, 3, Some(0)).is_err());
    }

    #[test]
    fn raw_uncertainty_zero_on_duplicates() {
        let idx = build_index(vec![1.5; 2 * 12], 2).unwrap();
        assert_eq!(raw_uncertainty(&[1.5, 1.5], &idx, 10, None).unwrap(), 0.0);
    }

    #[test]
    fn fit_stats_one_to_ten() {
        let u: Vec<f64> = (1..=10).map(|x| x as f64).collect();
        let (tau, sigma) = fit_stats(&u, 0.3, 1e-8).unwrap();
        assert_eq!(tau, 3.0);
        assert_eq!(sigma, 2.5 + 1e-8);
        // the f32-rounded alpha lands on the same rank
        assert_eq!(fit_stats(&u, 0.3f32 as f64, 1e-8).unwrap().0, 3.0);
    }

    #[test]
    fn fit_stats_degenerate() {
        assert_eq!(fit_stats(&[4.2; 7], 0.3, 1e-8).unwrap(), (4.2, 1e-8));
        assert_eq!(fit_stats(&[5.0], 0.3, 1e-8).unwrap(), (5.0, 1e-8));
        assert!(fit_stats(&[1.0], 0.0, 1e-8).is_err());
        assert!(fit_stats(&[1.0], 1.0, 1e-8).is_err());
        assert!(fit_stats(&[], 0.5, 1e-8).is_err());
    }

    #[test]
    fn nearest_rank_cases() {
        assert_eq!(nearest_rank(0.3, 10), 3);
        assert_eq!(nearest_rank(0.3, 1000), 300);
        assert_eq!(nearest_rank(0.3f32 as f64, 1000), 300);
        assert_eq!(nearest_rank(0.31, 10), 4);
        assert_eq!(nearest_rank(0.01, 10), 1);
        assert_eq!(nearest_rank(0.3, 1), 1);
    }

    #[test]
    fn standardize_examples() {
        let stats = GeometryStats { k: 10, alpha: 0.3, lambda_base: 1.0, tau: 3.0, sigma_mad: 2.5, epsilon: 0.0 };
        assert_eq!(standardize(3.0, &stats), 0.0);
        assert_eq!(standardize(8.0, &stats), 2.0);
        assert!(standardize(1.0, &stats) < 0.0);
    }

    #[test]
    fn adaptive_penalty_examples() {
        for u in [-3.0, -1e-9, 0.0] {
            let p = adaptive_penalty(u, 2.0);
            assert_eq!(p.rho, 1.0);
            assert_eq!(p.lambda_adapt, 1.0);
            assert_eq!(p.penalty, 0.0);
        }
        let p = adaptive_penalty(2.0, 1.0);
        assert!((p.rho - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.lambda_adapt - 1.5).abs() < 1e-15);
        assert!((p.penalty - 3.0).abs() < 1e-14);

        let mut prev = 0.0;
        for e in 0..12 {
            let l = adaptive_penalty(10f64.powi(e), 1.0).lambda_adapt;
            assert!(l >= prev && l <= 2.0);
            prev = l;
        }
        assert!(2.0 - prev < 1e-9);
    }

    fn repeated(n: usize) -> TransitionDataset {
        TransitionDataset::new(
            2,
            ActionSpace::Continuous { dim: 1 },
            [0.3f32, -1.0].repeat(n),
            Actions::Continuous(vec![0.5; n]),
            vec![1.0; n],
            [0.3f32, -1.0].repeat(n),
            vec![false; n],
            vec![false; n],
        )
        .unwrap()
    }

    #[test]
    fn repeated_transition_has_no_penalty() {
        let ds = repeated(50);
        let ns = crate::dataset::compute_norm_stats(&ds);
        let t = precompute(&ds, &ns, &PrecomputeConfig::default()).unwrap();
        assert!(t.u_tilde.iter().all(|&x| x == 0.0));
        assert!(t.penalty.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn precompute_requires_more_rows_than_k() {
        let ds = repeated(10);
        let ns = crate::dataset::compute_norm_stats(&ds);
        assert!(precompute(&ds, &ns, &PrecomputeConfig::default()).is_err());
        let ds = repeated(11);
        assert!(precompute(&ds, &ns, &PrecomputeConfig::default()).is_ok());
    }

    #[test]
    fn table_roundtrip_and_mismatch() {
        let ds = repeated(20);
        let ns = crate::dataset::compute_norm_stats(&ds);
        let cfg = PrecomputeConfig { k: 3, alpha: 0.25, lambda_base: 0.75, ..Default::default() };
        let t = precompute(&ds, &ns, &cfg).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), TABLE_HEADER_BYTES + 5 * 4 * 20);
        let back = PenaltyTable::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.stats.k, 3);
        assert_eq!(back.stats.alpha, 0.25);
        assert_eq!(back.stats.lambda_base, 0.75);

        let shorter = repeated(19);
        assert!(back.check_matches(&shorter).is_err());

        buf[0] = b'Z';
        assert!(PenaltyTable::read_from(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn penalty_monotone_in_raw_score(a in 0.0f64..50.0, b in 0.0f64..50.0, lb in 0.0f64..5.0) {
            let stats = GeometryStats { k: 10, alpha: 0.3, lambda_base: lb, tau: 3.0, sigma_mad: 1.7, epsilon: 1e-8 };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let plo = adaptive_penalty(standardize(lo, &stats), lb);
            let phi = adaptive_penalty(standardize(hi, &stats), lb);
            prop_assert!(plo.penalty <= phi.penalty);
            prop_assert!(phi.lambda_adapt >= 0.5 * lb - 1e-12 && phi.lambda_adapt <= 2.0 * lb + 1e-12);
        }
    }
}
