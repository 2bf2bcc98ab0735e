//! Retrieval metrics and channel de-correlation diagnostics.

use log::warn;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 50;

/// Channels whose centered norm falls below this are treated as constant.
pub const CONSTANT_CHANNEL_NORM: f64 = 1e-12;

/// Camera ids of queries and gallery, enabling same-camera exclusion.
#[derive(Debug, Clone, Copy)]
pub struct Cameras<'a> {
    pub query: &'a [usize],
    pub gallery: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// `[Q, G]` Euclidean distances.
    pub distances: Tensor,
    /// Per query, gallery indices by ascending distance then index, excluded entries removed.
    pub order: Vec<Vec<usize>>,
    /// Per query, whether `order[q][r]` has the query's identity.
    pub matches: Vec<Vec<bool>>,
}

impl RankingResult {
    pub fn num_queries(&self) -> usize {
        self.order.len()
    }
}

/// A metric averaged over queries that have at least one true match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMetric {
    pub value: f64,
    /// Queries skipped because no true match remained in the gallery.
    pub excluded: usize,
}

pub fn rank_gallery(
    query: &Tensor,
    gallery: &Tensor,
    query_labels: &[usize],
    gallery_labels: &[usize],
    cameras: Option<Cameras<'_>>,
) -> Result<RankingResult> {
    let qs = query.shape2()?;
    let gs = gallery.shape2()?;
    if qs.cols != gs.cols {
        return Err(Error::Contract(format!("embedding dims differ: query {} vs gallery {}", qs.cols, gs.cols)));
    }
    if query_labels.len() != qs.rows || gallery_labels.len() != gs.rows {
        return dim_err("rank_gallery", "label count differs from embedding count");
    }
    if let Some(c) = cameras {
        if c.query.len() != qs.rows || c.gallery.len() != gs.rows {
            return dim_err("rank_gallery", "camera count differs from embedding count");
        }
    }
    let mut dist = vec![0.0; qs.rows * gs.rows];
    for q in 0..qs.rows {
        for g in 0..gs.rows {
            let sq: f64 = query.row(q).iter().zip(gallery.row(g)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[q * gs.rows + g] = sq.sqrt();
        }
    }
    let distances = Tensor::new(vec![qs.rows, gs.rows], dist)?;
    let mut order = Vec::with_capacity(qs.rows);
    let mut matches = Vec::with_capacity(qs.rows);
    for (q, &ql) in query_labels.iter().enumerate() {
        let row = distances.row(q);
        let mut idx: Vec<usize> = (0..gs.rows)
            .filter(|&g| match cameras {
                Some(c) => !(gallery_labels[g] == ql && c.gallery[g] == c.query[q]),
                None => true,
            })
            .collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        matches.push(idx.iter().map(|&g| gallery_labels[g] == ql).collect());
        order.push(idx);
    }
    Ok(RankingResult { distances, order, matches })
}

fn over_queries(r: &RankingResult, per_query: impl Fn(&[bool]) -> f64) -> Result<QueryMetric> {
    let mut total = 0.0;
    let mut used = 0usize;
    for m in &r.matches {
        if m.iter().any(|&x| x) {
            total += per_query(m);
            used += 1;
        }
    }
    let excluded = r.matches.len() - used;
    if excluded > 0 {
        warn!("{excluded} queries have no true match in the gallery and were excluded");
    }
    if used == 0 {
        return Err(Error::Contract("no query has a true match in the gallery".into()));
    }
    Ok(QueryMetric { value: total / used as f64, excluded })
}

/// Fraction of queries whose first true match is at rank `<= k`.
pub fn cmc_topk(r: &RankingResult, k: usize) -> Result<QueryMetric> {
    over_queries(r, |m| if m.iter().take(k).any(|&x| x) { 1.0 } else { 0.0 })
}

/// Average precision of one ranked match list: mean over matches of `i / rank_i`.
///
/// The sum is kept as a reduced fraction and divided once at the end, so the
/// result depends only on the rational value (5/6 comes out as `5.0 / 6.0`);
/// floats take over only if the fraction would overflow `u128`.
pub fn average_precision(matches: &[bool]) -> f64 {
    let ranks: Vec<u128> = matches.iter().enumerate().filter(|(_, &m)| m).map(|(r, _)| r as u128 + 1).collect();
    if ranks.is_empty() {
        return 0.0;
    }
    let mut frac = Some((0u128, 1u128));
    for (i, &r) in ranks.iter().enumerate() {
        frac = frac.and_then(|f| add_fraction(f, (i as u128 + 1, r)));
    }
    let hits = ranks.len() as u128;
    match frac.and_then(|(n, d)| d.checked_mul(hits).map(|d| reduce(n, d))) {
        Some((n, d)) => n as f64 / d as f64,
        _ => ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / hits as f64,
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn reduce(n: u128, d: u128) -> (u128, u128) {
    let g = gcd(n, d).max(1);
    (n / g, d / g)
}

fn add_fraction((an, ad): (u128, u128), (bn, bd): (u128, u128)) -> Option<(u128, u128)> {
    let g = gcd(ad, bd);
    let l = (ad / g).checked_mul(bd)?;
    let n = an.checked_mul(l / ad)?.checked_add(bn.checked_mul(l / bd)?)?;
    Some(reduce(n, l))
}

pub fn mean_ap(r: &RankingResult) -> Result<QueryMetric> {
    over_queries(r, average_precision)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// `C×C` absolute Pearson coefficients.
    pub matrix: Tensor,
    pub mean_offdiag: f64,
    pub mean_full: f64,
    /// Counts of off-diagonal pairs `i < j` over [0, 1] in [`HISTOGRAM_BINS`] uniform bins.
    pub histogram: Vec<usize>,
    pub constant_channels: usize,
}

/// Lower edge of histogram bin `b`.
pub fn bin_lo(b: usize) -> f64 {
    b as f64 / HISTOGRAM_BINS as f64
}

/// Channel correlation of a `[C, H, W]` or `[C, N]` feature map.
pub fn correlation_report(feature_map: &Tensor) -> Result<CorrelationReport> {
    let f = match feature_map.rank() {
        3 => feature_map.flatten_spatial()?,
        2 => feature_map.clone(),
        _ => return dim_err("correlation_report", format!("expected rank 2 or 3, got {:?}", feature_map.shape())),
    };
    let s = f.shape2()?;
    if s.cols < 2 {
        return Err(Error::Contract(format!("correlation needs N >= 2 positions, got {}", s.cols)));
    }
    let centered: Vec<Vec<f64>> = (0..s.rows)
        .map(|c| {
            let row = f.row(c);
            let mean = row.iter().sum::<f64>() / s.cols as f64;
            row.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let constant: Vec<bool> = norms.iter().map(|&n| n < CONSTANT_CHANNEL_NORM).collect();
    let c = s.rows;
    let mut m = vec![0.0; c * c];
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    let mut off_sum = 0.0;
    for i in 0..c {
        if !constant[i] {
            m[i * c + i] = 1.0;
        }
        for j in i + 1..c {
            let v = if constant[i] || constant[j] {
                0.0
            } else {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).abs().min(1.0)
            };
            m[i * c + j] = v;
            m[j * c + i] = v;
            off_sum += 2.0 * v;
            histogram[((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
    }
    let matrix = Tensor::new(vec![c, c], m)?;
    let mean_full = matrix.sum() / (c * c) as f64;
    let mean_offdiag = if c > 1 { off_sum / (c * (c - 1)) as f64 } else { 0.0 };
    Ok(CorrelationReport {
        matrix,
        mean_offdiag,
        mean_full,
        histogram,
        constant_channels: constant.iter().filter(|&&x| x).count(),
    })
}
