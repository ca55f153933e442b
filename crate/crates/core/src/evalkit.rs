//! Retrieval metrics and dual-softmax post-processing.

use std::fmt::Write as _;

use hnf_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    T2v,
    V2t,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::T2v => "t2v",
            Direction::V2t => "v2t",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "MdR")]
    pub mdr: f64,
    #[serde(rename = "MeanR")]
    pub meanr: f64,
    pub rsum: f64,
}

/// Rank of each query's ground truth: 1 + the number of other gallery items
/// scoring at least as high (ties count against the truth).
pub fn ranks(s: &Tensor, ground_truth: &[usize]) -> Result<Vec<usize>> {
    let [q, gal] = s.shape();
    if ground_truth.len() != q {
        return Err(Error::Invalid(format!("{} ground-truth entries for {q} queries", ground_truth.len())));
    }
    if q == 0 || gal == 0 {
        return Err(Error::Invalid("empty similarity matrix".into()));
    }
    ground_truth
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t >= gal {
                return Err(Error::Invalid(format!("query {i}: ground truth {t} outside a gallery of {gal}")));
            }
            let row = s.row(i);
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSimilarity { row: i, col: j });
            }
            let truth = row[t];
            Ok(1 + row.iter().enumerate().filter(|&(j, &v)| j != t && v >= truth).count())
        })
        .collect()
}

pub fn report_from_ranks(direction: Direction, ranks: &[usize]) -> RetrievalReport {
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mdr = sorted[(sorted.len() - 1) / 2] as f64;
    let meanr = ranks.iter().sum::<usize>() as f64 / n;
    let (r1, r5, r10) = (recall(RECALL_KS[0]), recall(RECALL_KS[1]), recall(RECALL_KS[2]));
    RetrievalReport {
        direction,
        r1,
        r5,
        r10,
        mdr,
        meanr,
        rsum: r1 + r5 + r10,
    }
}

/// R@1/5/10 in percent, lower-median rank, mean rank and rsum.
pub fn rank_metrics(s: &Tensor, ground_truth: &[usize], direction: Direction) -> Result<RetrievalReport> {
    Ok(report_from_ranks(direction, &ranks(s, ground_truth)?))
}

/// `S ∘ softmax_over_queries(scale · S)`.
pub fn dsl(s: &Tensor, scale: f64) -> Tensor {
    let [q, gal] = s.shape();
    let mut out = s.clone();
    for j in 0..gal {
        let max = (0..q).map(|i| s.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..q).map(|i| (scale * (s.get(i, j) - max)).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            out.set(i, j, s.get(i, j) * e / total);
        }
    }
    out
}

/// Ground truth per video for video-to-text retrieval: its first caption.
pub fn video_ground_truth(corpus: &Corpus) -> Result<Vec<usize>> {
    let by_video = corpus.captions_by_video();
    let missing: Vec<String> = by_video
        .iter()
        .zip(&corpus.videos)
        .filter(|(c, _)| c.is_empty())
        .map(|(_, v)| v.video_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    Ok(by_video.iter().map(|c| c[0]).collect())
}

/// Both directions on a `captions × videos` matrix. With `dsl_scale` set, the
/// prior is applied per direction.
pub fn evaluate(s: &Tensor, corpus: &Corpus, dsl_scale: Option<f64>) -> Result<[RetrievalReport; 2]> {
    let [q, gal] = s.shape();
    if q != corpus.captions.len() || gal != corpus.videos.len() {
        return Err(Error::Invalid(format!(
            "similarity is {q}×{gal} but the corpus has {} captions and {} videos",
            corpus.captions.len(),
            corpus.videos.len()
        )));
    }
    let t2v_gt = corpus.caption_targets();
    let v2t_gt = video_ground_truth(corpus)?;
    let st = s.transpose();
    let (t2v_s, v2t_s) = match dsl_scale {
        Some(scale) => (dsl(s, scale), dsl(&st, scale)),
        None => (s.clone(), st),
    };
    Ok([
        rank_metrics(&t2v_s, &t2v_gt, Direction::T2v)?,
        rank_metrics(&v2t_s, &v2t_gt, Direction::V2t)?,
    ])
}

/// Aligned plain-text table.
pub fn format_table(reports: &[RetrievalReport]) -> String {
    let mut out = format!(
        "{:<5} {:>7} {:>7} {:>7} {:>6} {:>7} {:>7}\n",
        "dir", "R@1", "R@5", "R@10", "MdR", "MeanR", "rsum"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<5} {:>7.2} {:>7.2} {:>7.2} {:>6.1} {:>7.2} {:>7.2}",
            r.direction.to_string(),
            r.r1,
            r.r5,
            r.r10,
            r.mdr,
            r.meanr,
            r.rsum
        );
    }
    out
}
