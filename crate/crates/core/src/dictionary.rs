//! Visual dictionary: an online codebook updated by moving averages.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    counts: Vec<u64>,
    gamma: f64,
}

/// Nearest-entry index per token plus the inverse grouping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub indices: Vec<usize>,
    /// Token positions per used entry, keyed by entry index.
    pub inverse: BTreeMap<usize, Vec<usize>>,
}

impl Assignment {
    pub fn from_indices(indices: Vec<usize>) -> Self {
        let mut inverse: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &j) in indices.iter().enumerate() {
            inverse.entry(j).or_default().push(i);
        }
        Assignment { indices, inverse }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Distinct used entry indices, ascending.
    pub fn used(&self) -> Vec<usize> {
        self.inverse.keys().copied().collect()
    }

    /// Restriction to the token range `start..start+len`, re-based at zero.
    pub fn slice(&self, start: usize, len: usize) -> Assignment {
        Assignment::from_indices(self.indices[start..start + len].to_vec())
    }
}

/// Fraction of used entries, per-entry histogram and perplexity.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilizationReport {
    pub fraction: f64,
    pub histogram: Vec<u64>,
    pub perplexity: f64,
}

impl Codebook {
    pub fn new(entries: Tensor, counts: Vec<u64>, gamma: f64) -> Result<Self> {
        if entries.rank() != 2 {
            return Err(Error::dim(format!("codebook entries of shape {:?}", entries.shape())));
        }
        if counts.len() != entries.rows() {
            return Err(Error::dim(format!(
                "{} counts for {} entries",
                counts.len(),
                entries.rows()
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if !entries.all_finite() {
            return Err(Error::contract("codebook entries must be finite"));
        }
        Ok(Codebook {
            entries,
            counts,
            gamma,
        })
    }

    pub fn k(&self) -> usize {
        self.entries.rows()
    }

    pub fn c(&self) -> usize {
        self.entries.cols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn entry(&self, j: usize) -> &[f64] {
        self.entries.row(j)
    }

    /// Binds the entries into `g`. With `track`, the leaf records a gradient
    /// so callers can confirm that task losses never reach the codebook.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Var {
        g.leaf(self.entries.clone(), track)
    }
}

/// `k` entries drawn i.i.d. from `U[-1/sqrt(c), 1/sqrt(c)]`, zero counts.
pub fn init_codebook(k: usize, c: usize, gamma: f64, seed: u64) -> Result<Codebook> {
    if k < 2 || c == 0 {
        return Err(Error::config(format!("codebook needs k >= 2 and c >= 1, got k={k}, c={c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (c as f64).sqrt();
    let data = (0..k * c).map(|_| rng.gen_range(-bound..=bound)).collect();
    Codebook::new(Tensor::from_parts(vec![k, c], data), vec![0; k], gamma)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest entry for every row of `features` (`[l×c]`), lowest index on ties.
///
/// Distances go through `‖v‖² − 2v·d + ‖d‖²` with one GEMM; entries within
/// rounding distance of the best are then re-ranked by the direct sum of
/// squares so the result equals an exact scan.
pub fn assign(features: &Tensor, book: &Codebook) -> Result<Assignment> {
    if features.rank() != 2 || features.cols() != book.c() {
        return Err(Error::dim(format!(
            "features {:?} against codebook of width {}",
            features.shape(),
            book.c()
        )));
    }
    let (l, c, k) = (features.rows(), book.c(), book.k());
    let d_norm: Vec<f64> = (0..k).map(|j| book.entry(j).iter().map(|x| x * x).sum()).collect();
    let d_max = d_norm.iter().fold(0.0_f64, |m, &x| m.max(x));
    let mut dots = vec![0.0; l * k];
    gemm(l, c, k, features.data(), false, book.entries.data(), true, 0.0, &mut dots);

    let mut indices = Vec::with_capacity(l);
    for i in 0..l {
        let v = features.row(i);
        let v_norm: f64 = v.iter().map(|x| x * x).sum();
        let row = &dots[i * k..(i + 1) * k];
        let approx = |j: usize| v_norm - 2.0 * row[j] + d_norm[j];
        let best = (0..k).map(approx).fold(f64::INFINITY, f64::min);
        let slack = 1e-9 * (v_norm + d_max) + f64::MIN_POSITIVE;
        let mut choice = usize::MAX;
        let mut choice_d = f64::INFINITY;
        for j in 0..k {
            if approx(j) <= best + slack {
                let d = sq_dist(v, book.entry(j));
                if d < choice_d {
                    choice = j;
                    choice_d = d;
                }
            }
        }
        if choice == usize::MAX {
            return Err(Error::contract(format!("non-finite distance for token {i}")));
        }
        indices.push(choice);
    }
    Ok(Assignment::from_indices(indices))
}

/// Quantized features: forward `d_{h_i}`, straight-through gradient to `features`.
pub fn embed(g: &mut Graph, features: Var, assignment: &Assignment, entries: Var) -> Result<Var> {
    g.straight_through(features, entries, &assignment.indices)
}

/// Moving-average update `d_j ← γ·d_j + (1−γ)·mean(v_i : h_i = j)` for every
/// entry with a non-empty group; counts grow by the group sizes.
pub fn momentum_update(book: &mut Codebook, features: &Tensor, assignment: &Assignment) -> Result<()> {
    if features.rank() != 2 || features.cols() != book.c() {
        return Err(Error::dim(format!(
            "features {:?} against codebook of width {}",
            features.shape(),
            book.c()
        )));
    }
    if assignment.len() != features.rows() {
        return Err(Error::contract(format!(
            "assignment covers {} tokens, features have {}",
            assignment.len(),
            features.rows()
        )));
    }
    let c = book.c();
    let gamma = book.gamma;
    let mut mean = vec![0.0; c];
    for (&j, members) in &assignment.inverse {
        if j >= book.k() {
            return Err(Error::Index {
                index: j,
                len: book.k(),
            });
        }
        mean.fill(0.0);
        for &i in members {
            for (m, &v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        let n = members.len() as f64;
        for (d, m) in book.entries.row_mut(j).iter_mut().zip(&mean) {
            *d = gamma * *d + (1.0 - gamma) * (m / n);
        }
        book.counts[j] += members.len() as u64;
    }
    Ok(())
}

/// Adds the group sizes of `assignment` to a per-entry histogram.
pub fn accumulate(histogram: &mut [u64], assignment: &Assignment) {
    for (&j, members) in &assignment.inverse {
        histogram[j] += members.len() as u64;
    }
}

/// Utilization and perplexity of an assignment histogram.
pub fn utilization(histogram: &[u64]) -> Result<UtilizationReport> {
    let total: u64 = histogram.iter().sum();
    if total == 0 || histogram.is_empty() {
        return Err(Error::contract("utilization needs at least one assignment"));
    }
    let used = histogram.iter().filter(|&&n| n > 0).count();
    let entropy: f64 = histogram
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(UtilizationReport {
        fraction: used as f64 / histogram.len() as f64,
        histogram: histogram.to_vec(),
        perplexity: entropy.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: &[Vec<f64>], gamma: f64) -> Codebook {
        let t = Tensor::from_rows(rows).unwrap();
        let k = t.rows();
        Codebook::new(t, vec![0; k], gamma).unwrap()
    }

    #[test]
    fn exact_match_and_tie_break() {
        let b = book(
            &[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 2.0], vec![3.0, -1.0]],
            0.9,
        );
        let v = Tensor::from_rows(&[vec![3.0, -1.0], vec![0.0, 0.0]]).unwrap();
        let a = assign(&v, &b).unwrap();
        assert_eq!(a.indices, vec![3, 0]);
    }

    #[test]
    fn nearest_by_hand() {
        let b = book(&[vec![0.9, 0.1], vec![0.0, 0.0], vec![-1.0, 0.0]], 0.9);
        let v = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(assign(&v, &b).unwrap().indices, vec![1]);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let b = book(&[vec![0.0, 0.0], vec![1.0, 1.0]], 0.5);
        let v = Tensor::zeros(&[2, 3]);
        assert!(matches!(assign(&v, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn inverse_partitions_tokens() {
        let a = Assignment::from_indices(vec![5, 5, 7, 9]);
        assert_eq!(a.used(), vec![5, 7, 9]);
        assert_eq!(a.inverse[&5], vec![0, 1]);
        let total: usize = a.inverse.values().map(Vec::len).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn momentum_degenerate_and_hand_cases() {
        let feats = Tensor::from_rows(&[vec![3.0, 3.0], vec![5.0, 5.0]]).unwrap();
        let a = Assignment::from_indices(vec![0, 0]);

        let mut b = book(&[vec![1.0, 1.0], vec![-2.0, 0.5]], 1.0);
        let before = b.clone();
        momentum_update(&mut b, &feats, &a).unwrap();
        assert_eq!(b.entries, before.entries);

        let mut b = book(&[vec![1.0, 1.0], vec![-2.0, 0.5]], 0.0);
        momentum_update(&mut b, &feats, &a).unwrap();
        assert_eq!(b.entry(0), &[4.0, 4.0]);

        let mut b = book(&[vec![1.0, 1.0], vec![-2.0, 0.5]], 0.5);
        momentum_update(&mut b, &feats, &a).unwrap();
        assert_eq!(b.entry(0), &[2.5, 2.5]);
        assert_eq!(b.entry(1), &[-2.0, 0.5]);
        assert_eq!(b.counts(), &[2, 0]);
    }

    #[test]
    fn momentum_rejects_stale_assignment() {
        let mut b = book(&[vec![0.0], vec![1.0]], 0.5);
        let feats = Tensor::zeros(&[3, 1]);
        let a = Assignment::from_indices(vec![0, 1]);
        assert!(matches!(momentum_update(&mut b, &feats, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_codebook(16, 9, 0.99, 3).unwrap();
        let b = init_codebook(16, 9, 0.99, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.entries().max_abs() <= 1.0 / 3.0);
        assert!(a.counts().iter().all(|&n| n == 0));
        assert!(matches!(init_codebook(1, 4, 0.9, 0), Err(Error::Config(_))));
    }

    #[test]
    fn utilization_extremes() {
        let mut h = vec![0; 8];
        h[3] = 100;
        let r = utilization(&h).unwrap();
        assert_eq!(r.fraction, 1.0 / 8.0);
        assert_eq!(r.perplexity, 1.0);

        let r = utilization(&[7; 8]).unwrap();
        assert_eq!(r.fraction, 1.0);
        assert!((r.perplexity - 8.0).abs() < 1e-12);

        assert!(utilization(&[0, 0]).is_err());
    }
}
