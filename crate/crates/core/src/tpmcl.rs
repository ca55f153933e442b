//! Triplet partial-margin contrastive learning: cross-modal token weight
//! prediction, adaptive masking of the most informative tokens, and the hinge
//! losses that keep masked features strictly less similar than the originals.

use hnf_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::TemporalSource;
use crate::encoder::{temporal_encode, temporal_input, TemporalVars, TextFeatures, VideoFeatures};
use crate::error::{Error, Result};

/// Weight predictor: an alignment matrix that maps the other modality onto
/// this modality's rows, then a one-hidden-layer MLP over `[token ; aligned]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeightParams {
    /// `rows_max × cols_max`; the top-left `rows × cols` block is used.
    pub align: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TokenWeightParams {
    /// `align` starts as a uniform average over the other modality's rows
    /// (`align_init` per entry).
    pub fn init(rows_max: usize, cols_max: usize, align_init: f64, d: usize, rng: &mut impl Rng) -> Self {
        let n1 = Normal::new(0.0, 1.0 / ((2 * d) as f64).sqrt()).expect("finite std");
        let n2 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
        Self {
            align: Tensor::full(rows_max, cols_max, align_init),
            w1: Tensor::from_fn(2 * d, d, |_, _| n1.sample(rng)),
            b1: Tensor::zeros(1, d),
            w2: Tensor::from_fn(d, 1, |_, _| n2.sample(rng)),
            b2: Tensor::zeros(1, 1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TokenWeightVars {
    pub align: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl TokenWeightVars {
    pub fn bind(g: &mut Graph, p: &TokenWeightParams) -> Self {
        Self {
            align: g.leaf(p.align.clone()),
            w1: g.leaf(p.w1.clone()),
            b1: g.leaf(p.b1.clone()),
            w2: g.leaf(p.w2.clone()),
            b2: g.leaf(p.b2.clone()),
        }
    }
}

/// `softmax_rows(MLP([tokens ; align[..R, ..C] · other]))` as a `1×R` row.
fn predict(g: &mut Graph, tokens: Var, other: Var, p: &TokenWeightVars, what: &str) -> Result<Var> {
    let [r, d] = g.shape(tokens);
    let [c, d2] = g.shape(other);
    if r == 0 || c == 0 {
        return Err(Error::Invalid(format!("{what}: {r} tokens against {c} aligned rows")));
    }
    if d != d2 {
        return Err(Error::Invalid(format!("{what}: feature widths {d} and {d2} differ")));
    }
    let [rmax, cmax] = g.shape(p.align);
    if r > rmax || c > cmax {
        return Err(Error::Invalid(format!(
            "{what}: {r}×{c} alignment exceeds the {rmax}×{cmax} parameter"
        )));
    }
    let align = g.slice(p.align, 0..r, 0..c)?;
    let aligned = g.matmul(align, other)?;
    let x = g.concat_cols(&[tokens, aligned])?;
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, p.w2)?;
    let o = g.add_row(o, p.b2)?;
    let w = g.softmax(o, 0)?;
    Ok(g.transpose(w))
}

/// Weights over the `M` text tokens, aligned against the `N` frame features.
pub fn text_token_weights(g: &mut Graph, t_tokens: Var, f_cls: Var, p: &TokenWeightVars) -> Result<Var> {
    predict(g, t_tokens, f_cls, p, "text token weights")
}

/// Weights over the `P` patch tokens, aligned against the sentence feature.
pub fn visual_token_weights(g: &mut Graph, v_tokens: Var, t_cls: Var, p: &TokenWeightVars) -> Result<Var> {
    predict(g, v_tokens, t_cls, p, "visual token weights")
}

/// Keep bits (true = kept). Tokens are ranked by weight, descending with ties
/// to the lower index; a token whose cumulative weight up to and including
/// its rank is strictly below `mask_ratio` is masked.
pub fn adaptive_mask(weights: &[f64], mask_ratio: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Invalid(format!("mask ratio must lie in [0, 1], got {mask_ratio}")));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    let mut keep = vec![true; weights.len()];
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        if cum < mask_ratio {
            keep[i] = false;
        }
    }
    Ok(keep)
}

fn bits(keep: &[bool]) -> Tensor {
    Tensor::column_vector(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
}

/// Original and masked features of one positive pair.
#[derive(Debug, Clone)]
pub struct TripletSample {
    /// `1×D` weighted global text feature.
    pub t_g: Var,
    pub t_g_masked: Var,
    pub v_h: Var,
    pub v_h_masked: Var,
    pub text_keep: Vec<bool>,
    pub visual_keep: Vec<bool>,
    pub all_text_masked: bool,
    pub all_visual_masked: bool,
}

/// Masks text token rows and patch rows, then rebuilds the global features.
/// The masked frame features go through the same temporal encoder as `v_h`.
pub fn build_triplet(
    g: &mut Graph,
    text: &TextFeatures,
    video: &VideoFeatures,
    w_text: Var,
    text_keep: &[bool],
    visual_keep: &[bool],
    source: TemporalSource,
    temporal: &TemporalVars,
) -> Result<TripletSample> {
    let m = text.len();
    if g.shape(w_text) != [1, m] || text_keep.len() != m {
        return Err(Error::Invalid(format!(
            "text weights {:?} and mask of length {} do not fit {m} tokens",
            g.shape(w_text),
            text_keep.len()
        )));
    }
    let t_g = g.matmul(w_text, text.t_tokens)?;
    let b_t = g.constant(bits(text_keep));
    let masked_tokens = g.mul_col(text.t_tokens, b_t)?;
    let t_g_masked = g.matmul(w_text, masked_tokens)?;
    let input = temporal_input(g, video, source, Some(visual_keep))?;
    let v_h_masked = temporal_encode(g, input, temporal)?;
    Ok(TripletSample {
        t_g,
        t_g_masked,
        v_h: video.v_h,
        v_h_masked,
        text_keep: text_keep.to_vec(),
        visual_keep: visual_keep.to_vec(),
        all_text_masked: !text_keep.iter().any(|&k| k),
        all_visual_masked: !visual_keep.iter().any(|&k| k),
    })
}

/// Mean over rows of `b` of `cos(a, b_row)`. Zero rows of `b` contribute a
/// cosine of 0; a zero `a` or an all-zero `b` is an error.
pub fn mean_cosine(g: &mut Graph, a: Var, b: Var, a_name: &str, b_name: &str) -> Result<Var> {
    let av = g.value(a);
    if av.rows() != 1 {
        return Err(Error::Invalid(format!("{a_name} must be a single row")));
    }
    if av.data().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroNorm(a_name.to_string()));
    }
    if g.value(b).data().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroNorm(b_name.to_string()));
    }
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let at = g.transpose(an);
    let cos = g.matmul(bn, at)?;
    Ok(g.mean(cos)?)
}

#[derive(Debug, Clone)]
pub struct TpmOutput {
    pub loss: Var,
    /// Sentence anchor against original vs masked video.
    pub l1: Var,
    /// Weighted text anchor against original vs masked video.
    pub l2: Var,
    /// Original video anchor against original vs masked weighted text.
    pub l3: Var,
    /// Hinge arguments before `max(0, ·)`.
    pub arguments: [f64; 3],
}

fn hinge(g: &mut Graph, original: Var, masked: Var, margin: f64) -> Result<(Var, f64)> {
    let diff = g.sub(masked, original)?;
    let arg = g.add_scalar(diff, margin);
    let value = g.value(arg).item()?;
    Ok((g.relu(arg), value))
}

/// `L1 + L2 + L3` with `L = max(0, −s(original) + s(masked) + δ)`.
pub fn tpm_loss(g: &mut Graph, triplet: &TripletSample, t_cls: Var, margin: f64) -> Result<TpmOutput> {
    let s1 = mean_cosine(g, t_cls, triplet.v_h, "t_cls", "v_h")?;
    let s1p = mean_cosine(g, t_cls, triplet.v_h_masked, "t_cls", "masked v_h")?;
    let s2 = mean_cosine(g, triplet.t_g, triplet.v_h, "t_g", "v_h")?;
    let s2p = mean_cosine(g, triplet.t_g, triplet.v_h_masked, "t_g", "masked v_h")?;
    let s3p = mean_cosine(g, triplet.t_g_masked, triplet.v_h, "masked t_g", "v_h")?;
    let (l1, a1) = hinge(g, s1, s1p, margin)?;
    let (l2, a2) = hinge(g, s2, s2p, margin)?;
    let (l3, a3) = hinge(g, s2, s3p, margin)?;
    let l12 = g.add(l1, l2)?;
    let loss = g.add(l12, l3)?;
    Ok(TpmOutput {
        loss,
        l1,
        l2,
        l3,
        arguments: [a1, a2, a3],
    })
}

/// Token weights and mask bits of one pair, for heatmap export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenWeightDump {
    pub caption_id: String,
    pub tokens: Vec<String>,
    pub text_weights: Vec<f64>,
    pub text_keep: Vec<bool>,
    pub video_id: String,
    pub patch_weights: Vec<f64>,
    pub patch_keep: Vec<bool>,
}
