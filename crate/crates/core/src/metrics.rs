//! Partition agreement metrics: hard ARI from pair counts, soft pairwise
//! distances, and the differentiable continuous ARI used as the training
//! loss.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Guard below which the continuous-ARI denominator counts as degenerate.
pub const ARI_DENOM_EPS: f64 = 1e-12;

/// Unordered-pair concordance counts between two hard partitions.
///
/// n1: different in both, n2: different in truth / same in prediction,
/// n3: same in truth / different in prediction, n4: same in both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
    pub n4: u64,
}

/// Soft relaxation of [`PairCounts`] where each pair contributes a distance
/// d and its complement 1-d instead of a 0/1 indicator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftPairCounts {
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
    pub n4: f64,
}

/// Which soft distance the relaxation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftDistance {
    TotalVariation,
    Probability,
}

pub fn pair_counts(y_true: &[usize], y_pred: &[usize]) -> Result<PairCounts> {
    let n = y_true.len();
    if n < 2 {
        return Err(Error::Contract(format!("pair_counts requires N >= 2, got {}", n)));
    }
    if y_pred.len() != n {
        return Err(Error::Contract(format!(
            "label lengths differ: {} vs {}",
            n,
            y_pred.len()
        )));
    }
    let mut c = PairCounts { n1: 0, n2: 0, n3: 0, n4: 0 };
    for i in 0..n {
        for j in (i + 1)..n {
            let same_true = y_true[i] == y_true[j];
            let same_pred = y_pred[i] == y_pred[j];
            match (same_true, same_pred) {
                (false, false) => c.n1 += 1,
                (false, true) => c.n2 += 1,
                (true, false) => c.n3 += 1,
                (true, true) => c.n4 += 1,
            }
        }
    }
    Ok(c)
}

/// ARI from pair counts; 0 when the denominator vanishes (degenerate
/// partitions such as a single category on either side).
pub fn ari(c: &PairCounts) -> f64 {
    let (n1, n2, n3, n4) = (c.n1 as f64, c.n2 as f64, c.n3 as f64, c.n4 as f64);
    let num = 2.0 * (n1 * n4 - n2 * n3);
    let den = (n1 + n2) * (n3 + n4) + (n1 + n3) * (n2 + n4);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Convenience: ARI of two hard labelings.
pub fn ari_labels(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    Ok(ari(&pair_counts(y_true, y_pred)?))
}

/// Total variation distance between two simplex rows.
pub fn tv_distance(r: &[f64], rp: &[f64]) -> f64 {
    debug_assert_eq!(r.len(), rp.len());
    0.5 * r.iter().zip(rp).map(|(&a, &b)| (a - b).abs()).sum::<f64>()
}

/// One minus the probability that two instances land in the same cluster.
pub fn prob_distance(r: &[f64], rp: &[f64]) -> f64 {
    debug_assert_eq!(r.len(), rp.len());
    1.0 - r.iter().zip(rp).map(|(&a, &b)| a * b).sum::<f64>()
}

/// Soft pair counts of a soft assignment matrix against hard true labels.
pub fn soft_pair_counts(y_true: &[usize], r: &Tensor, distance: SoftDistance) -> Result<SoftPairCounts> {
    let n = y_true.len();
    if n < 2 {
        return Err(Error::Contract(format!("soft_pair_counts requires N >= 2, got {}", n)));
    }
    if r.shape().len() != 2 || r.rows() != n {
        return Err(Error::Contract(format!(
            "assignment matrix shape {:?} does not match {} labels",
            r.shape(),
            n
        )));
    }
    for i in 0..n {
        let s: f64 = r.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-8 || r.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("row {} is not on the simplex (sum {})", i, s)));
        }
    }
    let mut c = SoftPairCounts { n1: 0.0, n2: 0.0, n3: 0.0, n4: 0.0 };
    for i in 0..n {
        for j in (i + 1)..n {
            let d = match distance {
                SoftDistance::TotalVariation => tv_distance(r.row(i), r.row(j)),
                SoftDistance::Probability => prob_distance(r.row(i), r.row(j)),
            };
            if y_true[i] != y_true[j] {
                c.n1 += d;
                c.n2 += 1.0 - d;
            } else {
                c.n3 += d;
                c.n4 += 1.0 - d;
            }
        }
    }
    Ok(c)
}

/// Continuous ARI over soft pair counts; same rational form as [`ari`] with
/// an epsilon-guarded denominator.
pub fn continuous_ari(c: &SoftPairCounts) -> f64 {
    let num = 2.0 * (c.n1 * c.n4 - c.n2 * c.n3);
    let den = (c.n1 + c.n2) * (c.n3 + c.n4) + (c.n1 + c.n3) * (c.n2 + c.n4);
    if den.abs() < ARI_DENOM_EPS {
        0.0
    } else {
        num / den
    }
}

/// Graph-recorded continuous ARI of a soft assignment node against hard
/// labels; the score is differentiable with respect to `r` unless the
/// episode is degenerate.
pub struct SoftAriOutcome {
    pub score: Var,
    pub counts: SoftPairCounts,
    pub degenerate: bool,
}

pub fn soft_ari_graph(
    g: &mut Graph,
    y_true: &[usize],
    r: Var,
    distance: SoftDistance,
) -> Result<SoftAriOutcome> {
    let n = y_true.len();
    let shape = g.value(r).shape().to_vec();
    if n < 2 {
        return Err(Error::Contract(format!("soft_ari requires N >= 2, got {}", n)));
    }
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::Contract(format!(
            "assignment matrix shape {:?} does not match {} labels",
            shape, n
        )));
    }

    // Strict upper-triangular masks select each unordered pair once.
    let mut diff_mask = vec![0.0; n * n];
    let mut same_mask = vec![0.0; n * n];
    let mut diff_pairs = 0.0;
    let mut same_pairs = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if y_true[i] != y_true[j] {
                diff_mask[i * n + j] = 1.0;
                diff_pairs += 1.0;
            } else {
                same_mask[i * n + j] = 1.0;
                same_pairs += 1.0;
            }
        }
    }

    let dist = match distance {
        SoftDistance::TotalVariation => g.pairwise_tv(r)?,
        SoftDistance::Probability => {
            // 1 - R R^T; diagonal entries are unused by the masks
            let rt = g.transpose(r)?;
            let gram = g.matmul(r, rt)?;
            let ng = g.neg(gram)?;
            g.add_const(ng, 1.0)?
        }
    };

    let diff_mask = g.leaf(Tensor::matrix(n, n, diff_mask)?);
    let same_mask = g.leaf(Tensor::matrix(n, n, same_mask)?);

    let masked_diff = g.mul(diff_mask, dist)?;
    let n1 = g.sum_all(masked_diff)?;
    let diff_total = g.scalar(diff_pairs);
    let n2 = g.sub(diff_total, n1)?;
    let masked_same = g.mul(same_mask, dist)?;
    let n3 = g.sum_all(masked_same)?;
    let same_total = g.scalar(same_pairs);
    let n4 = g.sub(same_total, n3)?;

    let counts = SoftPairCounts {
        n1: g.scalar_value(n1),
        n2: g.scalar_value(n2),
        n3: g.scalar_value(n3),
        n4: g.scalar_value(n4),
    };

    let prod14 = g.mul(n1, n4)?;
    let prod23 = g.mul(n2, n3)?;
    let diff = g.sub(prod14, prod23)?;
    let num = g.scale(diff, 2.0)?;
    let s12 = g.add(n1, n2)?;
    let s34 = g.add(n3, n4)?;
    let s13 = g.add(n1, n3)?;
    let s24 = g.add(n2, n4)?;
    let left = g.mul(s12, s34)?;
    let right = g.mul(s13, s24)?;
    let den = g.add(left, right)?;

    if g.scalar_value(den).abs() < ARI_DENOM_EPS {
        let zero = g.scalar(0.0);
        return Ok(SoftAriOutcome { score: zero, counts, degenerate: true });
    }
    let score = g.div(num, den)?;
    Ok(SoftAriOutcome { score, counts, degenerate: false })
}

/// Contingency-table ARI: (index - expected) / (max - expected).
///
/// Independent oracle route for [`ari`]; returns `None` when the adjustment
/// denominator vanishes.
pub fn contingency_ari(y_true: &[usize], y_pred: &[usize]) -> Option<f64> {
    let n = y_true.len();
    let kt = y_true.iter().max().map_or(0, |&m| m + 1);
    let kp = y_pred.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![0u64; kt * kp];
    let mut row = vec![0u64; kt];
    let mut col = vec![0u64; kp];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        table[t * kp + p] += 1;
        row[t] += 1;
        col[p] += 1;
    }
    let comb2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_table: f64 = table.iter().map(|&c| comb2(c)).sum();
    let sum_row: f64 = row.iter().map(|&c| comb2(c)).sum();
    let sum_col: f64 = col.iter().map(|&c| comb2(c)).sum();
    let total = comb2(n as u64);
    let expected = sum_row * sum_col / total;
    let max_index = 0.5 * (sum_row + sum_col);
    if (max_index - expected).abs() < 1e-12 {
        None
    } else {
        Some((sum_table - expected) / (max_index - expected))
    }
}
