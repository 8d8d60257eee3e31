//! Retrieval metrics over binary relevance vectors (`true` = same label as
//! the query), in rank order.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("cutoff {n} outside 1..={len}")]
    CutoffOutOfRange { n: usize, len: usize },
    #[error("relevance vector has no relevant items")]
    NoRelevant,
    #[error("label entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{0} inputs differ in length")]
    Parallel(&'static str),
}

/// Mean over relevant positions `k` of `(relevant in top k) / k`.
/// Zero when nothing is relevant.
pub fn average_precision(rel: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn mean_average_precision<R: AsRef<[bool]>>(queries: &[R]) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    Ok(queries.iter().map(|q| average_precision(q.as_ref())).sum::<f64>() / queries.len() as f64)
}

pub fn precision_at_n(rel: &[bool], n: usize) -> Result<f64, EvalError> {
    if n == 0 || n > rel.len() {
        return Err(EvalError::CutoffOutOfRange { n, len: rel.len() });
    }
    Ok(rel[..n].iter().filter(|&&r| r).count() as f64 / n as f64)
}

/// One `(recall, precision)` point per rank position.
pub fn pr_curve(rel: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(EvalError::NoRelevant);
    }
    let mut hits = 0usize;
    Ok(rel
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            hits += usize::from(r);
            (hits as f64 / total as f64, hits as f64 / (i + 1) as f64)
        })
        .collect())
}

/// Trapezoidal area under a PR curve, anchored at `(0, p_1)`.
pub fn pr_area(points: &[(f64, f64)]) -> f64 {
    let Some(&(_, p0)) = points.first() else {
        return 0.0;
    };
    let mut prev = (0.0, p0);
    let mut area = 0.0;
    for &pt in points {
        area += (pt.0 - prev.0) * (pt.1 + prev.1) / 2.0;
        prev = pt;
    }
    area
}

/// Mean radius-lookup precision and the fraction of queries with nothing
/// returned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusPrecision {
    pub precision: f64,
    pub empty_rate: f64,
}

/// Per query, the fraction of returned items sharing the query's label.
/// The query's own id is ignored; a query with nothing returned scores 0.
pub fn radius_precision(
    query_ids: &[u32],
    query_labels: &[u16],
    results: &[Vec<u32>],
    label_of: impl Fn(u32) -> u16,
) -> Result<RadiusPrecision, EvalError> {
    if query_ids.len() != query_labels.len() || query_ids.len() != results.len() {
        return Err(EvalError::Parallel("radius precision"));
    }
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut sum = 0.0;
    let mut empty = 0usize;
    for ((&qid, &ql), returned) in query_ids.iter().zip(query_labels).zip(results) {
        let (mut n, mut hits) = (0usize, 0usize);
        for &id in returned.iter().filter(|&&id| id != qid) {
            n += 1;
            hits += usize::from(label_of(id) == ql);
        }
        if n == 0 {
            empty += 1;
        } else {
            sum += hits as f64 / n as f64;
        }
    }
    let q = results.len() as f64;
    Ok(RadiusPrecision {
        precision: sum / q,
        empty_rate: empty as f64 / q,
    })
}

/// Information (bits) carried by one indicator of an `n`-class uniform
/// label: `(1/n) log2 n + ((n-1)/n) log2 (n/(n-1))`.
pub fn label_bit_entropy(n: usize) -> Result<f64, EvalError> {
    if n < 2 {
        return Err(EvalError::TooFewClasses(n));
    }
    let n = n as f64;
    Ok(n.log2() / n + (n - 1.0) / n * (n / (n - 1.0)).log2())
}

/// Evaluation summary for one method at one code length.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub precision_at: Vec<(usize, f64)>,
    /// Query-averaged `(recall, precision)` at the sampled ranks.
    pub pr_points: Vec<(f64, f64)>,
    pub radius2: Option<RadiusPrecision>,
    pub queries: usize,
    pub queries_without_relevant: usize,
    pub per_query_ap: Vec<f64>,
}

/// Streams per-query relevance vectors into MAP, precision@N and a
/// query-averaged PR curve, so full rankings need not be kept.
#[derive(Debug, Clone)]
pub struct RankingAccumulator {
    cutoffs: Vec<usize>,
    pr_ranks: Vec<usize>,
    ap: Vec<f64>,
    no_relevant: usize,
    precision_sums: Vec<f64>,
    recall_sums: Vec<f64>,
    pr_precision_sums: Vec<f64>,
}

impl RankingAccumulator {
    /// `cutoffs` are the precision@N points; `pr_ranks` the ranks at which
    /// the PR curve is sampled. Both are clamped to each ranking's length.
    pub fn new(cutoffs: &[usize], pr_ranks: &[usize]) -> Self {
        RankingAccumulator {
            cutoffs: cutoffs.to_vec(),
            pr_ranks: pr_ranks.to_vec(),
            ap: Vec::new(),
            no_relevant: 0,
            precision_sums: vec![0.0; cutoffs.len()],
            recall_sums: vec![0.0; pr_ranks.len()],
            pr_precision_sums: vec![0.0; pr_ranks.len()],
        }
    }

    pub fn add(&mut self, rel: &[bool]) {
        let mut cum = Vec::with_capacity(rel.len() + 1);
        cum.push(0usize);
        for &r in rel {
            cum.push(cum.last().unwrap() + usize::from(r));
        }
        let total = *cum.last().unwrap();
        self.ap.push(average_precision(rel));
        if total == 0 {
            self.no_relevant += 1;
        }
        for (i, &n) in self.cutoffs.iter().enumerate() {
            let n = n.clamp(1, rel.len().max(1));
            if !rel.is_empty() {
                self.precision_sums[i] += cum[n] as f64 / n as f64;
            }
        }
        for (i, &k) in self.pr_ranks.iter().enumerate() {
            let k = k.clamp(1, rel.len().max(1));
            if !rel.is_empty() {
                if total > 0 {
                    self.recall_sums[i] += cum[k] as f64 / total as f64;
                }
                self.pr_precision_sums[i] += cum[k] as f64 / k as f64;
            }
        }
    }

    pub fn finish(self, radius2: Option<RadiusPrecision>) -> Result<EvalReport, EvalError> {
        let q = self.ap.len();
        if q == 0 {
            return Err(EvalError::NoQueries);
        }
        let qf = q as f64;
        Ok(EvalReport {
            map: self.ap.iter().sum::<f64>() / qf,
            precision_at: self
                .cutoffs
                .iter()
                .zip(&self.precision_sums)
                .map(|(&n, s)| (n, s / qf))
                .collect(),
            pr_points: self
                .recall_sums
                .iter()
                .zip(&self.pr_precision_sums)
                .map(|(r, p)| (r / qf, p / qf))
                .collect(),
            radius2,
            queries: q,
            queries_without_relevant: self.no_relevant,
            per_query_ap: self.ap,
        })
    }
}

/// Ranks at which to sample PR curves over a database of `len` items: dense
/// near the top, then geometric, always ending at `len`.
pub fn pr_sample_ranks(len: usize) -> Vec<usize> {
    let mut ranks: Vec<usize> = (1..=len.min(10)).collect();
    let mut k = 10.0f64;
    while (k as usize) < len {
        k *= 1.15;
        ranks.push((k.round() as usize).min(len));
    }
    ranks.dedup();
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&rel("1010")) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&rel("111")), 1.0);
        assert!((average_precision(&rel("001")) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&rel("000")), 0.0);
    }

    #[test]
    fn map_examples() {
        assert_eq!(mean_average_precision(&[rel("001")]).unwrap(), average_precision(&rel("001")));
        assert_eq!(mean_average_precision(&[rel("11"), rel("01")]).unwrap(), 0.75);
        assert_eq!(mean_average_precision::<Vec<bool>>(&[]), Err(EvalError::NoQueries));
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_n(&rel("1010"), 2), Ok(0.5));
        assert_eq!(precision_at_n(&rel("111"), 3), Ok(1.0));
        assert!(precision_at_n(&rel("111"), 4).is_err());
        assert!(precision_at_n(&rel("111"), 0).is_err());
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_curve(&rel("11")).unwrap(), vec![(0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(pr_curve(&rel("01")).unwrap(), vec![(0.0, 0.0), (1.0, 0.5)]);
        assert_eq!(pr_curve(&rel("00")), Err(EvalError::NoRelevant));
        assert_eq!(pr_area(&pr_curve(&rel("1110000")).unwrap()), 1.0);
    }

    #[test]
    fn radius_examples() {
        let labels = [0u16, 1, 0, 1];
        let r = radius_precision(&[10, 11], &[0, 0], &[vec![0, 1], vec![]], |id| labels[id as usize]).unwrap();
        assert_eq!(r.precision, 0.25);
        assert_eq!(r.empty_rate, 0.5);
        // the query itself never counts
        let r = radius_precision(&[2], &[0], &[vec![2]], |id| labels[id as usize]).unwrap();
        assert_eq!((r.precision, r.empty_rate), (0.0, 1.0));
    }

    #[test]
    fn entropy() {
        assert!((label_bit_entropy(2).unwrap() - 1.0).abs() < 1e-15);
        assert!((label_bit_entropy(10).unwrap() - 0.4690).abs() < 1e-4);
        for n in 2..64 {
            assert!(label_bit_entropy(n + 1).unwrap() < label_bit_entropy(n).unwrap());
        }
        assert_eq!(label_bit_entropy(1), Err(EvalError::TooFewClasses(1)));
    }

    #[test]
    fn accumulator() {
        let mut acc = RankingAccumulator::new(&[1, 2, 10], &[1, 2, 4]);
        acc.add(&rel("1010"));
        acc.add(&rel("0000"));
        let r = acc.finish(None).unwrap();
        assert!((r.map - 5.0 / 12.0).abs() < 1e-15);
        assert_eq!(r.precision_at, vec![(1, 0.5), (2, 0.25), (10, 0.25)]);
        assert_eq!(r.pr_points, vec![(0.25, 0.5), (0.25, 0.25), (0.5, 0.25)]);
        assert_eq!(r.queries_without_relevant, 1);
    }

    #[test]
    fn sample_ranks() {
        let r = pr_sample_ranks(9000);
        assert_eq!(r[..10], [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        assert_eq!(*r.last().unwrap(), 9000);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(pr_sample_ranks(3), vec![1, 2, 3]);
    }
}
