//! All trainable parameters, their checkpoint format, and the corpus-level
//! similarity used for evaluation.

use std::path::Path;

use hnf_autodiff::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bundle::{self, Pending, Role};
use crate::config::Config;
use crate::corpus::linguistic::LinguisticStats;
use crate::corpus::Corpus;
use crate::dmae::{self, SimilaritySettings};
use crate::encoder::{self, EncoderParams, EncoderVars, TemporalParams, TemporalVars, TextFeatures, VideoFeatures};
use crate::error::{Error, Result};
use crate::tpmcl::{TokenWeightParams, TokenWeightVars};

pub const PARAM_NAMES: [&str; 17] = [
    "text_proj",
    "video_proj",
    "temporal.wq",
    "temporal.wk",
    "temporal.wv",
    "temporal.pos",
    "wti_gate",
    "text_weights.align",
    "text_weights.w1",
    "text_weights.b1",
    "text_weights.w2",
    "text_weights.b2",
    "visual_weights.align",
    "visual_weights.w1",
    "visual_weights.b1",
    "visual_weights.w2",
    "visual_weights.b2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub text_weights: TokenWeightParams,
    pub visual_weights: TokenWeightParams,
}

impl ModelParams {
    /// Seeded from `train.seed`.
    pub fn init(d_raw: usize, cfg: &Config) -> Self {
        let e = &cfg.encoder;
        let d = if e.d_model == 0 { d_raw } else { e.d_model };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let encoder = EncoderParams::init(d_raw, d, e, &mut rng);
        let text_weights = TokenWeightParams::init(e.max_text_len, e.max_frames, 1.0 / e.max_frames as f64, d, &mut rng);
        let p_max = e.max_frames * (e.max_patches_per_frame + 1);
        let visual_weights = TokenWeightParams::init(p_max, 1, 1.0, d, &mut rng);
        Self {
            encoder,
            text_weights,
            visual_weights,
        }
    }

    pub fn d_raw(&self) -> usize {
        self.encoder.text_proj.rows()
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 17] {
        let (e, t, v) = (&self.encoder, &self.text_weights, &self.visual_weights);
        [
            &e.text_proj,
            &e.video_proj,
            &e.temporal.wq,
            &e.temporal.wk,
            &e.temporal.wv,
            &e.temporal.pos,
            &e.wti_gate,
            &t.align,
            &t.w1,
            &t.b1,
            &t.w2,
            &t.b2,
            &v.align,
            &v.w1,
            &v.b1,
            &v.w2,
            &v.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 17] {
        let (e, t, v) = (&mut self.encoder, &mut self.text_weights, &mut self.visual_weights);
        [
            &mut e.text_proj,
            &mut e.video_proj,
            &mut e.temporal.wq,
            &mut e.temporal.wk,
            &mut e.temporal.wv,
            &mut e.temporal.pos,
            &mut e.wti_gate,
            &mut t.align,
            &mut t.w1,
            &mut t.b1,
            &mut t.w2,
            &mut t.b2,
            &mut v.align,
            &mut v.w1,
            &mut v.b1,
            &mut v.w2,
            &mut v.b2,
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pending: Vec<Pending> = PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .map(|(name, t)| Pending::new(*name, Role::Param, t.shape().to_vec(), t.data()))
            .collect();
        bundle::write(dir, self.d_raw(), &pending)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, data) = bundle::read(dir)?;
        let mut found: Vec<Option<Tensor>> = vec![None; PARAM_NAMES.len()];
        for (entry, values) in manifest.entries.iter().zip(data) {
            let Some(slot) = PARAM_NAMES.iter().position(|n| *n == entry.id) else {
                return Err(Error::bundle(&entry.id, "not a model parameter"));
            };
            if entry.role != Role::Param || entry.shape.len() != 2 {
                return Err(Error::bundle(&entry.id, "expected a rank-2 parameter tensor"));
            }
            found[slot] = Some(Tensor::new(entry.shape[0], entry.shape[1], values)?);
        }
        let mut it = found.into_iter().zip(PARAM_NAMES);
        let mut next = || -> Result<Tensor> {
            let (t, name) = it.next().expect("one slot per name");
            t.ok_or_else(|| Error::bundle(name, "missing from checkpoint"))
        };
        let params = Self {
            encoder: EncoderParams {
                text_proj: next()?,
                video_proj: next()?,
                temporal: TemporalParams {
                    wq: next()?,
                    wk: next()?,
                    wv: next()?,
                    pos: next()?,
                },
                wti_gate: next()?,
            },
            text_weights: TokenWeightParams {
                align: next()?,
                w1: next()?,
                b1: next()?,
                w2: next()?,
                b2: next()?,
            },
            visual_weights: TokenWeightParams {
                align: next()?,
                w1: next()?,
                b1: next()?,
                w2: next()?,
                b2: next()?,
            },
        };
        if params.d_raw() != manifest.d_raw {
            return Err(Error::bundle("text_proj", "row count disagrees with the manifest D_raw"));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub text_weights: TokenWeightVars,
    pub visual_weights: TokenWeightVars,
}

impl ModelVars {
    /// Leaves for training; with `trainable = false` the parameters enter the
    /// graph as constants.
    pub fn bind(g: &mut Graph, p: &ModelParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let e = &p.encoder;
        let encoder = EncoderVars {
            text_proj: put(&e.text_proj),
            video_proj: put(&e.video_proj),
            temporal: TemporalVars {
                wq: put(&e.temporal.wq),
                wk: put(&e.temporal.wk),
                wv: put(&e.temporal.wv),
                pos: put(&e.temporal.pos),
            },
            wti_gate: put(&e.wti_gate),
        };
        let mut head = |h: &TokenWeightParams| TokenWeightVars {
            align: put(&h.align),
            w1: put(&h.w1),
            b1: put(&h.b1),
            w2: put(&h.w2),
            b2: put(&h.b2),
        };
        let text_weights = head(&p.text_weights);
        let visual_weights = head(&p.visual_weights);
        Self {
            encoder,
            text_weights,
            visual_weights,
        }
    }

    /// Vars in [`PARAM_NAMES`] order.
    pub fn all(&self) -> [Var; 17] {
        let (e, t, v) = (&self.encoder, &self.text_weights, &self.visual_weights);
        [
            e.text_proj,
            e.video_proj,
            e.temporal.wq,
            e.temporal.wk,
            e.temporal.wv,
            e.temporal.pos,
            e.wti_gate,
            t.align,
            t.w1,
            t.b1,
            t.w2,
            t.b2,
            v.align,
            v.w1,
            v.b1,
            v.w2,
            v.b2,
        ]
    }
}

pub fn similarity_settings(cfg: &Config) -> SimilaritySettings {
    SimilaritySettings {
        dmae_on: cfg.train.dmae_on,
        top_k: cfg.dmae.top_k,
        reduction: cfg.dmae.reduction,
    }
}

/// Textual attention of every caption, truncated like the text encoder.
pub fn caption_attention(corpus: &Corpus, cfg: &Config) -> Result<Vec<Tensor>> {
    let stats = LinguisticStats::compute(corpus, cfg.dmae.eta, cfg.dmae.irrelevant_k)?;
    let max = cfg.encoder.max_text_len;
    stats
        .w_pos
        .iter()
        .zip(&stats.w_freq)
        .map(|(p, f)| {
            let m = p.len().min(max);
            dmae::textual_attention(&p[..m], &f[..m], &vec![true; m])
        })
        .collect()
}

/// Projected and temporally encoded features of one video as plain tensors.
#[derive(Debug, Clone)]
pub struct EncodedVideo {
    pub f_cls: Tensor,
    pub v_tokens: Tensor,
    pub v_h: Tensor,
    pub frames: usize,
    pub slots: usize,
}

impl EncodedVideo {
    pub fn to_graph(&self, g: &mut Graph) -> VideoFeatures {
        VideoFeatures {
            f_cls: g.constant(self.f_cls.clone()),
            v_tokens: g.constant(self.v_tokens.clone()),
            v_h: g.constant(self.v_h.clone()),
            frames: self.frames,
            slots: self.slots,
        }
    }
}

pub fn encode_videos(params: &ModelParams, corpus: &Corpus, cfg: &Config) -> Result<Vec<EncodedVideo>> {
    corpus
        .videos
        .par_iter()
        .map(|v| {
            let mut g = Graph::new();
            let vars = ModelVars::bind(&mut g, params, false);
            let f = encoder::encode_video(&mut g, v, &vars.encoder, &cfg.encoder)?;
            Ok(EncodedVideo {
                f_cls: g.value(f.f_cls).clone(),
                v_tokens: g.value(f.v_tokens).clone(),
                v_h: g.value(f.v_h).clone(),
                frames: f.frames,
                slots: f.slots,
            })
        })
        .collect()
}

/// Encodes the given captions into `g` with constant parameters.
pub fn encode_captions(g: &mut Graph, vars: &ModelVars, corpus: &Corpus, index: &[usize], cfg: &Config) -> Result<Vec<TextFeatures>> {
    index
        .iter()
        .map(|&c| {
            encoder::encode_text(
                g,
                &corpus.captions[c].embeddings,
                vars.encoder.text_proj,
                cfg.encoder.max_text_len,
            )
        })
        .collect()
}

/// `captions × videos` similarity of the whole corpus, computed in caption
/// chunks of `eval.chunk_size`. Chunks run in parallel; each is independent,
/// so the result does not depend on the thread count.
pub fn corpus_similarity(params: &ModelParams, corpus: &Corpus, cfg: &Config) -> Result<Tensor> {
    let w_ta = caption_attention(corpus, cfg)?;
    let videos = encode_videos(params, corpus, cfg)?;
    let settings = similarity_settings(cfg);
    let all: Vec<usize> = (0..corpus.captions.len()).collect();
    let chunks: Vec<&[usize]> = all.chunks(cfg.eval.chunk_size).collect();
    let blocks: Vec<Tensor> = chunks
        .par_iter()
        .map(|idx| {
            let mut g = Graph::new();
            let vars = ModelVars::bind(&mut g, params, false);
            let texts = encode_captions(&mut g, &vars, corpus, idx, cfg)?;
            let feats: Vec<VideoFeatures> = videos.iter().map(|v| v.to_graph(&mut g)).collect();
            let w: Vec<Tensor> = idx.iter().map(|&c| w_ta[c].clone()).collect();
            let s = dmae::batch_similarity(&mut g, &texts, &w, &feats, vars.encoder.wti_gate, settings)?;
            Ok(g.value(s).clone())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<&[f64]> = blocks.iter().flat_map(|b| (0..b.rows()).map(move |i| b.row(i))).collect();
    let s = Tensor::from_rows(&rows)?;
    for i in 0..s.rows() {
        if let Some(j) = s.row(i).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSimilarity { row: i, col: j });
        }
    }
    Ok(s)
}
