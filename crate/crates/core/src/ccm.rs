//! Convergent cross mapping on raw series.
//!
//! A series `x` is delay-embedded into its shadow manifold `M_x`. For every
//! point of `M_x` the `E + 1` nearest other points are found, and a second
//! series `y` is estimated as the exponentially weighted mean of its values at
//! those neighbor times. The Pearson correlation between the estimate and `y`
//! is the cross-map skill; high skill means `y` leaves a recoverable imprint
//! on `x`, i.e. `y` causally influences `x`.

use rayon::prelude::*;

use crate::data::TrafficPanel;
use crate::error::{Error, Result};
use crate::numeric::{pearson, topk_smallest, DenseArray, EPSILON};

/// Lagged coordinate vectors of a single series.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayEmbedding {
    pub dim: usize,
    pub tau: usize,
    /// `L_emb x E`; row `t` is `[X(t + s), X(t + s - tau), ..., X(t)]` with
    /// `s = (E - 1) tau`, i.e. row `t` belongs to series time `t + s`.
    pub points: DenseArray,
}

impl DelayEmbedding {
    /// Series index of embedding row 0.
    pub fn offset(&self) -> usize {
        (self.dim - 1) * self.tau
    }

    pub fn len(&self) -> usize {
        self.points.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn delay_embed(series: &[f64], dim: usize, tau: usize) -> Result<DelayEmbedding> {
    if dim == 0 || tau == 0 {
        return Err(Error::Argument(format!(
            "embedding dimension and lag must be positive (E={dim}, tau={tau})"
        )));
    }
    let span = (dim - 1) * tau;
    if series.len() < span + 1 {
        return Err(Error::Precondition(format!(
            "series of length {} too short for E={dim}, tau={tau}",
            series.len()
        )));
    }
    let rows = series.len() - span;
    let mut data = Vec::with_capacity(rows * dim);
    for t in 0..rows {
        data.extend((0..dim).map(|j| series[t + span - j * tau]));
    }
    Ok(DelayEmbedding {
        dim,
        tau,
        points: DenseArray::new(&[rows, dim], data)?,
    })
}

/// Normalized simplex weights `u_i = exp(-d_i / d_1)`, `w = u / sum(u)`.
///
/// `distances` must be ascending. A zero nearest distance is replaced by
/// [`EPSILON`] in the denominator.
pub fn simplex_weights(distances: &[f64]) -> Vec<f64> {
    let Some(&nearest) = distances.first() else {
        return Vec::new();
    };
    let scale = if nearest > 0.0 { nearest } else { EPSILON };
    let mut u: Vec<f64> = distances.iter().map(|d| (-d / scale).exp()).collect();
    let total: f64 = u.iter().sum();
    u.iter_mut().for_each(|v| *v /= total);
    u
}

/// Nearest-neighbor indices and simplex weights for every point of a shadow
/// manifold (self excluded). Reusable across target series.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    pub offset: usize,
    pub k: usize,
    /// `len x k` embedding row indices, nearest first.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl NeighborTable {
    pub fn build(embedding: &DelayEmbedding) -> Result<Self> {
        let n = embedding.len();
        let k = embedding.dim + 1;
        let d = embedding.dim;
        let pts = embedding.points.data();
        let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let pi = &pts[i * d..(i + 1) * d];
                let dist: Vec<f64> = (0..n)
                    .map(|j| {
                        let pj = &pts[j * d..(j + 1) * d];
                        pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                    })
                    .collect();
                let (idx, nd) = topk_smallest(&dist, k, Some(i))?;
                Ok((idx, simplex_weights(&nd)))
            })
            .collect::<Result<_>>()?;
        let mut indices = Vec::with_capacity(n * k);
        let mut weights = Vec::with_capacity(n * k);
        for (idx, w) in rows {
            indices.extend(idx);
            weights.extend(w);
        }
        Ok(Self {
            offset: embedding.offset(),
            k,
            indices,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Locally weighted estimate of `target` at every embedded time.
    pub fn estimate(&self, target: &[f64]) -> Vec<f64> {
        self.indices
            .chunks(self.k)
            .zip(self.weights.chunks(self.k))
            .map(|(idx, w)| idx.iter().zip(w).map(|(&j, wj)| wj * target[j + self.offset]).sum())
            .collect()
    }

    fn skill(&self, target: &[f64]) -> Result<(f64, bool)> {
        let estimate = self.estimate(target);
        let c = pearson(&estimate, &target[self.offset..self.offset + self.len()])?;
        Ok((c.r, c.degenerate))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossMapDirection {
    /// Series whose shadow manifold supplies the neighbors.
    pub manifold: usize,
    /// Series being estimated.
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcmResult {
    /// Signed Pearson correlation between estimate and truth.
    pub skill: f64,
    pub library_length: usize,
    pub direction: CrossMapDirection,
    /// The estimate or the target had zero variance; `skill` is then 0.
    pub degenerate: bool,
}

/// Shortest series usable with the given embedding.
pub fn min_library_length(dim: usize, tau: usize) -> usize {
    (dim.max(1) - 1) * tau + dim + 3
}

fn check_pair(x: &[f64], y: &[f64], dim: usize, tau: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "series lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if dim == 0 || tau == 0 {
        return Err(Error::Argument("E and tau must be positive".into()));
    }
    let min = min_library_length(dim, tau);
    if x.len() < min {
        return Err(Error::Argument(format!(
            "series length {} below minimum {min} for E={dim}, tau={tau}",
            x.len()
        )));
    }
    Ok(())
}

/// Skill of `M_x` at estimating `y`.
pub fn cross_map_skill(x: &[f64], y: &[f64], dim: usize, tau: usize) -> Result<CcmResult> {
    check_pair(x, y, dim, tau)?;
    let table = NeighborTable::build(&delay_embed(x, dim, tau)?)?;
    let (skill, degenerate) = table.skill(y)?;
    Ok(CcmResult {
        skill,
        library_length: x.len(),
        direction: CrossMapDirection {
            manifold: 0,
            target: 1,
        },
        degenerate,
    })
}

/// Cross-map skill on series prefixes of increasing length.
pub fn convergence_scan(
    x: &[f64],
    y: &[f64],
    dim: usize,
    tau: usize,
    library_lengths: &[usize],
) -> Result<Vec<CcmResult>> {
    if library_lengths.is_empty() {
        return Err(Error::Argument("no library lengths given".into()));
    }
    check_pair(x, y, dim, tau)?;
    let min = min_library_length(dim, tau);
    if let Some(bad) = library_lengths.iter().find(|&&l| l > x.len() || l < min) {
        return Err(Error::Argument(format!(
            "library length {bad} outside [{min}, {}]",
            x.len()
        )));
    }
    library_lengths
        .par_iter()
        .map(|&l| {
            let mut r = cross_map_skill(&x[..l], &y[..l], dim, tau)?;
            r.library_length = l;
            Ok(r)
        })
        .collect()
}

/// Pairwise cross-map skills for a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct CcmMatrix {
    /// `N x N`; entry `(m, n)` is the skill of service `m`'s manifold at
    /// estimating service `n`.
    pub skills: DenseArray,
    /// Entries forced to zero because a series or estimate was constant.
    pub degenerate: Vec<(usize, usize)>,
}

pub fn ccm_matrix(panel: &TrafficPanel, dim: usize, tau: usize) -> Result<CcmMatrix> {
    let n = panel.n_services();
    let min = min_library_length(dim, tau);
    if dim == 0 || tau == 0 {
        return Err(Error::Argument("E and tau must be positive".into()));
    }
    if panel.len() < min {
        return Err(Error::Argument(format!(
            "panel length {} below minimum {min} for E={dim}, tau={tau}",
            panel.len()
        )));
    }
    let rows: Vec<Vec<(f64, bool)>> = (0..n)
        .into_par_iter()
        .map(|m| {
            let table = NeighborTable::build(&delay_embed(panel.series(m), dim, tau)?)?;
            (0..n).map(|t| table.skill(panel.series(t))).collect()
        })
        .collect::<Result<_>>()?;
    let mut skills = Vec::with_capacity(n * n);
    let mut degenerate = Vec::new();
    for (m, row) in rows.into_iter().enumerate() {
        for (t, (s, flag)) in row.into_iter().enumerate() {
            skills.push(s);
            if flag {
                degenerate.push((m, t));
            }
        }
    }
    Ok(CcmMatrix {
        skills: DenseArray::new(&[n, n], skills)?,
        degenerate,
    })
}
