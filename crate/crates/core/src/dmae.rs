//! Dual-modal attention enhancement: textual attention from PoS/TF-IDF weights,
//! visual attention from top-k frame self-similarity, and the enhanced
//! text-video similarity built from both.

use hnf_autodiff::{Graph, Tensor, Var};
use serde::Serialize;

use crate::config::Reduction;
use crate::encoder::{TextFeatures, VideoFeatures};
use crate::error::{Error, Result};

/// `softmax(w_pos ∘ w_freq)` over valid positions; padded positions get 0.
pub fn textual_attention(w_pos: &[f64], w_freq: &[f64], valid: &[bool]) -> Result<Tensor> {
    if w_pos.len() != w_freq.len() || w_pos.len() != valid.len() {
        return Err(Error::Invalid(format!(
            "textual attention inputs differ in length: {}, {}, {}",
            w_pos.len(),
            w_freq.len(),
            valid.len()
        )));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Invalid("textual attention over a fully padded caption".into()));
    }
    let logits: Vec<f64> = w_pos.iter().zip(w_freq).map(|(a, b)| a * b).collect();
    let max = logits
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(valid)
        .map(|(&x, &v)| if v { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(Tensor::row_vector(out))
}

/// Uniform weights over valid positions, the neutral textual attention.
pub fn uniform_attention(valid: &[bool]) -> Result<Tensor> {
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Invalid("textual attention over a fully padded caption".into()));
    }
    let w = 1.0 / count as f64;
    Ok(Tensor::row_vector(valid.iter().map(|&v| if v { w } else { 0.0 }).collect()))
}

fn check_frames(g: &Graph, v_h: Var) -> Result<()> {
    let x = g.value(v_h);
    for n in 0..x.rows() {
        if x.row(n).iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm(format!("v_h frame {n}")));
        }
    }
    Ok(())
}

/// Frame self-cosine matrix with only the `top_k` largest entries of each
/// column kept (ties to the lower row index). Gradients reach `v_h` through
/// the kept entries.
pub fn visual_attention(g: &mut Graph, v_h: Var, top_k: usize) -> Result<Var> {
    if top_k == 0 {
        return Err(Error::Invalid("top_k must be at least 1".into()));
    }
    check_frames(g, v_h)?;
    let vn = g.normalize_rows(v_h);
    let vt = g.transpose(vn);
    let cos = g.matmul(vn, vt)?;
    Ok(g.topk_select(cos, top_k, 0)?)
}

/// Intermediate matrices of one text-video pair.
#[derive(Debug, Clone)]
pub struct PairSimilarity {
    /// `M×N` token-frame cosines.
    pub s_tokens: Var,
    /// `1×N` sentence-frame cosines.
    pub s_cls: Var,
    /// `1×N`.
    pub s_prime: Var,
}

/// `S' = ½(W_TA · S(t_tokens, v_h) · W_VA + S(t_cls, v_h) · W_VA)`, cosines on
/// row-normalised features.
pub fn enhanced_similarity(g: &mut Graph, text: &TextFeatures, v_h: Var, w_ta: Var, w_va: Var) -> Result<PairSimilarity> {
    let m = g.shape(text.t_tokens)[0];
    let n = g.shape(v_h)[0];
    if g.shape(w_ta) != [1, m] || g.shape(w_va) != [n, n] {
        return Err(Error::Invalid(format!(
            "attention shapes {:?} and {:?} do not fit {m} tokens and {n} frames",
            g.shape(w_ta),
            g.shape(w_va)
        )));
    }
    let tn = g.normalize_rows(text.t_tokens);
    let cn = g.normalize_rows(text.t_cls);
    let vn = g.normalize_rows(v_h);
    let vt = g.transpose(vn);
    let s_tokens = g.matmul(tn, vt)?;
    let s_cls = g.matmul(cn, vt)?;
    let weighted = g.matmul(w_ta, s_tokens)?;
    let a = g.matmul(weighted, w_va)?;
    let b = g.matmul(s_cls, w_va)?;
    let sum = g.add(a, b)?;
    let s_prime = g.scale(sum, 0.5);
    Ok(PairSimilarity {
        s_tokens,
        s_cls,
        s_prime,
    })
}

/// Frame weights of the weighted reduction: `softmax(v_h · gate)` as `N×1`.
pub fn wti_weights(g: &mut Graph, v_h: Var, gate: Var) -> Result<Var> {
    let logits = g.matmul(v_h, gate)?;
    Ok(g.softmax(logits, 0)?)
}

/// Collapses `S'` (`1×N`) to a scalar: the frame mean, or a gate-weighted sum.
pub fn reduce_similarity(g: &mut Graph, s_prime: Var, mode: Reduction, v_h: Var, gate: Var) -> Result<Var> {
    let [r, n] = g.shape(s_prime);
    if r != 1 || n == 0 {
        return Err(Error::Invalid(format!("S' must be 1×N with N ≥ 1, got {r}×{n}")));
    }
    match mode {
        Reduction::Ti => Ok(g.mean(s_prime)?),
        Reduction::Wti => {
            let w = wti_weights(g, v_h, gate)?;
            Ok(g.matmul(s_prime, w)?)
        }
    }
}

/// How the batch similarity is computed.
#[derive(Debug, Clone, Copy)]
pub struct SimilaritySettings {
    /// When false the neutral attentions (uniform `W_TA`, identity `W_VA`) are used.
    pub dmae_on: bool,
    pub top_k: usize,
    pub reduction: Reduction,
}

/// Scalar similarity of one pair, evaluated without any batching tricks.
pub fn pair_similarity(
    g: &mut Graph,
    text: &TextFeatures,
    w_ta: &Tensor,
    video: &VideoFeatures,
    gate: Var,
    settings: SimilaritySettings,
) -> Result<(Var, PairSimilarity, Var)> {
    let (w_ta, w_va) = if settings.dmae_on {
        (g.constant(w_ta.clone()), visual_attention(g, video.v_h, settings.top_k)?)
    } else {
        check_frames(g, video.v_h)?;
        (
            g.constant(uniform_attention(&text.valid_mask)?),
            g.constant(Tensor::eye(video.frames)),
        )
    };
    let pair = enhanced_similarity(g, text, video.v_h, w_ta, w_va)?;
    let sim = reduce_similarity(g, pair.s_prime, settings.reduction, video.v_h, gate)?;
    Ok((sim, pair, w_va))
}

/// `Q×G` similarity matrix of every text against every video.
///
/// Equivalent to calling [`pair_similarity`] for every pair, but shares the
/// token-frame cosines across the batch: all tokens and frames are stacked,
/// the textual attention becomes a block-row matrix and the visual attention a
/// block-diagonal one.
pub fn batch_similarity(
    g: &mut Graph,
    texts: &[TextFeatures],
    w_ta: &[Tensor],
    videos: &[VideoFeatures],
    gate: Var,
    settings: SimilaritySettings,
) -> Result<Var> {
    if texts.is_empty() || videos.is_empty() {
        return Err(Error::Invalid("batch similarity needs at least one text and one video".into()));
    }
    if w_ta.len() != texts.len() {
        return Err(Error::Invalid(format!(
            "{} textual attentions for {} texts",
            w_ta.len(),
            texts.len()
        )));
    }
    let total_m: usize = texts.iter().map(TextFeatures::len).sum();
    let total_n: usize = videos.iter().map(|v| v.frames).sum();

    let mut rows = Tensor::zeros(texts.len(), total_m);
    let mut m0 = 0;
    for (i, (t, w)) in texts.iter().zip(w_ta).enumerate() {
        let w = if settings.dmae_on {
            if w.shape() != [1, t.len()] {
                return Err(Error::Invalid(format!(
                    "textual attention {i} has shape {:?} for {} tokens",
                    w.shape(),
                    t.len()
                )));
            }
            w.clone()
        } else {
            uniform_attention(&t.valid_mask)?
        };
        rows.row_mut(i)[m0..m0 + t.len()].copy_from_slice(w.data());
        m0 += t.len();
    }

    let mut frames = Vec::with_capacity(videos.len());
    let mut w_va = Vec::with_capacity(videos.len());
    for v in videos {
        if settings.dmae_on {
            w_va.push(visual_attention(g, v.v_h, settings.top_k)?);
        } else {
            check_frames(g, v.v_h)?;
        }
        frames.push(g.normalize_rows(v.v_h));
    }
    let tokens: Vec<Var> = texts.iter().map(|t| g.normalize_rows(t.t_tokens)).collect();
    let cls: Vec<Var> = texts.iter().map(|t| g.normalize_rows(t.t_cls)).collect();

    let t_all = g.concat_rows(&tokens)?;
    let c_all = g.concat_rows(&cls)?;
    let v_all = g.concat_rows(&frames)?;
    let vt = g.transpose(v_all);
    let s_tok = g.matmul(t_all, vt)?;
    let w_rows = g.constant(rows);
    let a = g.matmul(w_rows, s_tok)?;
    let c = g.matmul(c_all, vt)?;
    let sum = g.add(a, c)?;
    let x = g.scale(sum, 0.5);
    let s_prime = if settings.dmae_on {
        g.block_diag_matmul(x, &w_va)?
    } else {
        x
    };

    let reduce = match settings.reduction {
        Reduction::Ti => {
            let mut avg = Tensor::zeros(total_n, videos.len());
            let mut n0 = 0;
            for (j, v) in videos.iter().enumerate() {
                for f in 0..v.frames {
                    avg.set(n0 + f, j, 1.0 / v.frames as f64);
                }
                n0 += v.frames;
            }
            g.constant(avg)
        }
        Reduction::Wti => {
            let mut weights = Vec::with_capacity(videos.len());
            for v in videos {
                weights.push(wti_weights(g, v.v_h, gate)?);
            }
            g.block_diag(&weights)?
        }
    };
    debug_assert_eq!(g.shape(s_prime), [texts.len(), total_n]);
    Ok(g.matmul(s_prime, reduce)?)
}

/// Per-pair attention data for heatmap export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionBundle {
    pub caption_id: String,
    pub video_id: String,
    #[serde(rename = "W_TA")]
    pub w_ta: Vec<f64>,
    #[serde(rename = "W_VA")]
    pub w_va: Vec<Vec<f64>>,
    #[serde(rename = "S_raw_tokens")]
    pub s_raw_tokens: Vec<Vec<f64>>,
    #[serde(rename = "S_raw_cls")]
    pub s_raw_cls: Vec<f64>,
    #[serde(rename = "S_prime")]
    pub s_prime: Vec<f64>,
    pub similarity: f64,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

impl AttentionBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn collect(
        g: &mut Graph,
        caption_id: &str,
        video_id: &str,
        text: &TextFeatures,
        w_ta: &Tensor,
        video: &VideoFeatures,
        gate: Var,
        settings: SimilaritySettings,
    ) -> Result<Self> {
        let (sim, pair, w_va) = pair_similarity(g, text, w_ta, video, gate, settings)?;
        let w_ta = if settings.dmae_on {
            w_ta.clone()
        } else {
            uniform_attention(&text.valid_mask)?
        };
        Ok(Self {
            caption_id: caption_id.to_string(),
            video_id: video_id.to_string(),
            w_ta: w_ta.data().to_vec(),
            w_va: rows_of(g.value(w_va)),
            s_raw_tokens: rows_of(g.value(pair.s_tokens)),
            s_raw_cls: g.value(pair.s_cls).data().to_vec(),
            s_prime: g.value(pair.s_prime).data().to_vec(),
            similarity: g.value(sim).item()?,
        })
    }
}
