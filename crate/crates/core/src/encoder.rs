//! Stand-in encoders: linear projections from raw embeddings into the shared
//! space, plus a single-layer self-attention temporal encoder over frames.

use hnf_autodiff::{Graph, Tensor, Var};
use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{EncoderConfig, ProjectionInit, TemporalSource};
use crate::corpus::VideoRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Learned positions, `max_frames × D`.
    pub pos: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub text_proj: Tensor,
    pub video_proj: Tensor,
    pub temporal: TemporalParams,
    /// Frame gate of the weighted token-wise reduction, `D×1`.
    pub wti_gate: Tensor,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn projection(d_raw: usize, d: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Tensor {
    match cfg.init {
        ProjectionInit::Identity if d == d_raw => {
            let mut t = gaussian(d_raw, d, cfg.init_std, rng);
            for i in 0..d {
                let v = t.get(i, i) + 1.0;
                t.set(i, i, v);
            }
            t
        }
        _ => gaussian(d_raw, d, 1.0 / (d_raw as f64).sqrt(), rng),
    }
}

impl EncoderParams {
    pub fn init(d_raw: usize, d: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let text_proj = projection(d_raw, d, cfg, rng);
        let video_proj = projection(d_raw, d, cfg, rng);
        let temporal = TemporalParams {
            wq: gaussian(d, d, cfg.init_std, rng),
            wk: gaussian(d, d, cfg.init_std, rng),
            wv: Tensor::zeros(d, d),
            pos: Tensor::zeros(cfg.max_frames, d),
        };
        Self {
            text_proj,
            video_proj,
            temporal,
            wti_gate: Tensor::zeros(d, 1),
        }
    }

    pub fn d_model(&self) -> usize {
        self.text_proj.cols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub pos: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub text_proj: Var,
    pub video_proj: Var,
    pub temporal: TemporalVars,
    pub wti_gate: Var,
}

#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// Sentence feature, `1×D`.
    pub t_cls: Var,
    /// Token features, `M×D`.
    pub t_tokens: Var,
    pub valid_mask: Vec<bool>,
}

impl TextFeatures {
    pub fn len(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_mask.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct VideoFeatures {
    /// Frame-CLS features, `N×D`.
    pub f_cls: Var,
    /// Patch tokens, `N·(K+1) × D`, frame-major.
    pub v_tokens: Var,
    /// Temporally aggregated frames, `N×D`.
    pub v_h: Var,
    pub frames: usize,
    pub slots: usize,
}

/// Projects raw token embeddings. `t_cls` is the mean of the valid projected
/// tokens; captions longer than `max_len` are truncated.
pub fn encode_text(g: &mut Graph, raw: &Tensor, text_proj: Var, max_len: usize) -> Result<TextFeatures> {
    let mut m = raw.rows();
    if m == 0 {
        return Err(Error::Invalid("caption with no tokens".into()));
    }
    let raw = if m > max_len {
        warn!("caption with {m} tokens truncated to {max_len}");
        m = max_len;
        raw.slice(0..m, 0..raw.cols())?
    } else {
        raw.clone()
    };
    let x = g.constant(raw);
    let t_tokens = g.matmul(x, text_proj)?;
    let t_cls = g.mean_axis(t_tokens, 0)?;
    Ok(TextFeatures {
        t_cls,
        t_tokens,
        valid_mask: vec![true; m],
    })
}

/// Input rows of the temporal encoder. `keep` masks patch tokens: masked
/// patches are left out of the per-frame mean, and with the frame-CLS source a
/// masked slot 0 zeroes its frame.
pub fn temporal_input(
    g: &mut Graph,
    video: &VideoFeatures,
    source: TemporalSource,
    keep: Option<&[bool]>,
) -> Result<Var> {
    let (n, slots) = (video.frames, video.slots);
    if let Some(k) = keep {
        if k.len() != n * slots {
            return Err(Error::Invalid(format!(
                "patch mask has {} entries for {} patches",
                k.len(),
                n * slots
            )));
        }
    }
    let kept = |p: usize| keep.is_none_or(|k| k[p]);
    match source {
        TemporalSource::PatchMean => {
            let mut avg = Tensor::zeros(n, n * slots);
            for f in 0..n {
                let count = (0..slots).filter(|&s| kept(f * slots + s)).count();
                if count == 0 {
                    continue;
                }
                let w = 1.0 / count as f64;
                for s in 0..slots {
                    if kept(f * slots + s) {
                        avg.set(f, f * slots + s, w);
                    }
                }
            }
            let a = g.constant(avg);
            Ok(g.matmul(a, video.v_tokens)?)
        }
        TemporalSource::FCls => match keep {
            None => Ok(video.f_cls),
            Some(_) => {
                let bits = Tensor::column_vector((0..n).map(|f| if kept(f * slots) { 1.0 } else { 0.0 }).collect());
                let b = g.constant(bits);
                Ok(g.mul_col(video.f_cls, b)?)
            }
        },
    }
}

/// One scaled dot-product self-attention layer over frames with learned
/// positions and a residual connection:
/// `x' = x + pos`, `out = x' + softmax(x'Wq (x'Wk)ᵀ / √D) · x'Wv`.
pub fn temporal_encode(g: &mut Graph, input: Var, params: &TemporalVars) -> Result<Var> {
    let [n, d] = g.shape(input);
    if n == 0 {
        return Err(Error::Invalid("temporal encoder needs at least one frame".into()));
    }
    let max = g.shape(params.pos)[0];
    if n > max {
        return Err(Error::Invalid(format!("{n} frames exceed the temporal encoder limit of {max}")));
    }
    let pos = g.slice_rows(params.pos, 0..n)?;
    let x = g.add(input, pos)?;
    let q = g.matmul(x, params.wq)?;
    let k = g.matmul(x, params.wk)?;
    let v = g.matmul(x, params.wv)?;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores, 1)?;
    let mixed = g.matmul(attn, v)?;
    Ok(g.add(x, mixed)?)
}

/// Projects a video's patches and runs the temporal encoder. Frames beyond
/// `max_frames` and patches beyond `max_patches_per_frame` are dropped.
pub fn encode_video(g: &mut Graph, video: &VideoRecord, vars: &EncoderVars, cfg: &EncoderConfig) -> Result<VideoFeatures> {
    let max_frames = cfg.max_frames.min(g.shape(vars.temporal.pos)[0]);
    let n = video.frame_count.min(max_frames);
    if n < video.frame_count {
        warn!(
            "video {}: {} frames truncated to {n}",
            video.video_id, video.frame_count
        );
    }
    let slots_in = video.slots();
    let slots = slots_in.min(cfg.max_patches_per_frame + 1);
    if slots < slots_in {
        warn!(
            "video {}: {} patches per frame truncated to {}",
            video.video_id, video.patches_per_frame, cfg.max_patches_per_frame
        );
    }
    let raw = if n == video.frame_count && slots == slots_in {
        video.patch_embeddings.clone()
    } else {
        let rows: Vec<&[f64]> = (0..n)
            .flat_map(|f| (0..slots).map(move |s| f * slots_in + s))
            .map(|r| video.patch_embeddings.row(r))
            .collect();
        Tensor::from_rows(&rows)?
    };
    let x = g.constant(raw);
    let v_tokens = g.matmul(x, vars.video_proj)?;
    let cls_rows: Vec<usize> = (0..n).map(|f| f * slots).collect();
    let f_cls = g.gather_rows(v_tokens, &cls_rows)?;
    let mut feats = VideoFeatures {
        f_cls,
        v_tokens,
        v_h: f_cls,
        frames: n,
        slots,
    };
    let input = temporal_input(g, &feats, cfg.temporal_source, None)?;
    feats.v_h = temporal_encode(g, input, &vars.temporal)?;
    Ok(feats)
}
