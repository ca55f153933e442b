//! Shared fixtures, brute-force oracles and gradient families for the
//! integration tests.
#![allow(dead_code)]

pub mod criteria;

use hnf_autodiff::gradcheck;
use hnf_autodiff::{Graph, Tensor, Var};
use hnf_core::config::{Reduction, TemporalSource};
use hnf_core::corpus::synthetic::{generate_synthetic, SyntheticSpec};
use hnf_core::corpus::Corpus;
use hnf_core::dmae::{self, SimilaritySettings};
use hnf_core::encoder::{self, EncoderVars, TemporalVars, TextFeatures, VideoFeatures};
use hnf_core::evalkit::{Direction, RetrievalReport};
use hnf_core::model::{self, ModelParams, ModelVars};
use hnf_core::negnce::{self, HardNegativeSet};
use hnf_core::tpmcl::{self, TokenWeightVars};
use hnf_core::{trainer, Config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_INSTANCES: usize = 50;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// `Σ out ∘ C` for a fixed random `C`, a scalar probe of a matrix output.
pub fn probe(g: &mut Graph, out: Var, rng: &mut impl Rng) -> hnf_autodiff::Result<Var> {
    let [r, c] = g.shape(out);
    let w = g.constant(normal(rng, r, c, 1.0));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Tensor errors pass through; anything else is a broken fixture.
pub fn to_ad(e: hnf_core::Error) -> hnf_autodiff::AutodiffError {
    match e {
        hnf_core::Error::Tensor(inner) => inner,
        other => panic!("fixture error: {other}"),
    }
}

/// Random video features built from raw patch rows in `g`.
pub fn video_features(
    g: &mut Graph,
    v_tokens: Var,
    frames: usize,
    slots: usize,
    source: TemporalSource,
    temporal: &TemporalVars,
) -> hnf_core::Result<VideoFeatures> {
    let cls: Vec<usize> = (0..frames).map(|f| f * slots).collect();
    let f_cls = g.gather_rows(v_tokens, &cls)?;
    let mut v = VideoFeatures {
        f_cls,
        v_tokens,
        v_h: f_cls,
        frames,
        slots,
    };
    let input = encoder::temporal_input(g, &v, source, None)?;
    v.v_h = encoder::temporal_encode(g, input, temporal)?;
    Ok(v)
}

pub fn text_features(g: &mut Graph, t_tokens: Var) -> hnf_core::Result<TextFeatures> {
    let m = g.shape(t_tokens)[0];
    let t_cls = g.mean_axis(t_tokens, 0)?;
    Ok(TextFeatures {
        t_cls,
        t_tokens,
        valid_mask: vec![true; m],
    })
}

/// Temporal weights `[wq, wk, wv, pos]` with non-trivial values.
pub fn temporal_tensors(rng: &mut impl Rng, d: usize, max_frames: usize) -> Vec<Tensor> {
    vec![
        normal(rng, d, d, 0.4),
        normal(rng, d, d, 0.4),
        normal(rng, d, d, 0.4),
        normal(rng, max_frames, d, 0.3),
    ]
}

pub fn temporal_vars(v: &[Var]) -> TemporalVars {
    TemporalVars {
        wq: v[0],
        wk: v[1],
        wv: v[2],
        pos: v[3],
    }
}

pub fn random_weights(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    // Quantised draws so that ties actually occur.
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(1..=8) as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

pub fn random_keep(rng: &mut impl Rng, len: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
    let i = rng.random_range(0..len);
    keep[i] = true;
    keep
}

// ---------------------------------------------------------------- oracles

/// Hard negatives straight from the definition, as a sorted set.
pub fn brute_force_mining(s: &Tensor, xi: f64) -> Vec<((usize, usize), f64)> {
    let b = s.rows();
    let mut out = Vec::new();
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let a = s.get(i, j) - s.get(i, i) + xi;
            let c = s.get(j, i) - s.get(i, i) + xi;
            let m = if a > 0.0 { a } else { 0.0 } + if c > 0.0 { c } else { 0.0 };
            if m > 0.0 {
                out.push(((i, j), m));
            }
        }
    }
    out
}

/// For each token, enumerates every token ranked at or above it (descending
/// weight, ties to the lower index), adds those weights in rank order and
/// masks the token when the sum is below the ratio.
pub fn brute_force_mask(weights: &[f64], ratio: f64) -> Vec<bool> {
    let n = weights.len();
    let ahead = |j: usize, i: usize| weights[j] > weights[i] || (weights[j] == weights[i] && j < i);
    (0..n)
        .map(|i| {
            let mut prefix: Vec<usize> = (0..n).filter(|&j| j == i || ahead(j, i)).collect();
            prefix.sort_by(|&a, &b| {
                if ahead(a, b) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Greater
                }
            });
            let mut cum = 0.0;
            for j in prefix {
                cum += weights[j];
            }
            cum >= ratio
        })
        .collect()
}

/// Fully sorts each row (truth placed after every tie) and reads off the
/// truth's position.
pub fn brute_force_report(s: &Tensor, gt: &[usize], direction: Direction) -> RetrievalReport {
    let mut ranks = Vec::with_capacity(gt.len());
    for (i, &t) in gt.iter().enumerate() {
        let row = s.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap()
                .then_with(|| (a == t).cmp(&(b == t)))
        });
        ranks.push(order.iter().position(|&j| j == t).unwrap() + 1);
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.clone();
    sorted.sort();
    let mdr = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        sorted[sorted.len() / 2 - 1]
    } as f64;
    let (r1, r5, r10) = (recall(1), recall(5), recall(10));
    RetrievalReport {
        direction,
        r1,
        r5,
        r10,
        mdr,
        meanr: ranks.iter().sum::<usize>() as f64 / n,
        rsum: r1 + r5 + r10,
    }
}

/// Plain-float InfoNCE `(t2v, v2t)`.
pub fn infonce_oracle(s: &Tensor, scale: f64) -> (f64, f64) {
    let b = s.rows();
    let lse = |xs: Vec<f64>| {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut t2v = 0.0;
    let mut v2t = 0.0;
    for i in 0..b {
        t2v += lse((0..b).map(|j| scale * s.get(i, j)).collect()) - scale * s.get(i, i);
        v2t += lse((0..b).map(|j| scale * s.get(j, i)).collect()) - scale * s.get(i, i);
    }
    (t2v / b as f64, v2t / b as f64)
}

// ------------------------------------------------------- gradient families

/// `(max relative error, max |analytic gradient|)` of one instance.
pub type Outcome = Result<(f64, f64), String>;

pub type Family = (&'static str, fn(u64) -> Outcome);

/// Every family: the losses, then the encoder-side ops.
pub const FAMILIES: [Family; 12] = [
    ("infonce", grad_infonce),
    ("negnce", grad_negnce),
    ("tpm", grad_tpm),
    ("l_all", grad_l_all),
    ("encode_text", grad_encode_text),
    ("temporal_patch_mean", grad_temporal_patch_mean),
    ("temporal_f_cls_masked", grad_temporal_fcls),
    ("encode_video", grad_encode_video),
    ("visual_attention", grad_visual_attention),
    ("pair_similarity", grad_pair_similarity),
    ("batch_similarity", grad_batch_similarity),
    ("token_weights", grad_token_weights),
];

/// Worst relative error over [`GRAD_INSTANCES`] draws of one family, and the
/// largest gradient seen (a family whose gradients all vanish checks nothing).
pub fn run_family(f: fn(u64) -> Outcome) -> Outcome {
    let (mut worst, mut largest): (f64, f64) = (0.0, 0.0);
    for i in 0..GRAD_INSTANCES as u64 {
        let (e, a) = f(i)?;
        worst = worst.max(e);
        largest = largest.max(a);
    }
    Ok((worst, largest))
}

fn checked<F>(inputs: &[Tensor], f: F) -> Outcome
where
    F: Fn(&mut Graph, &[Var]) -> hnf_autodiff::Result<Var>,
{
    let r = gradcheck::check(inputs, GRAD_STEP, f).map_err(|e| e.to_string())?;
    let largest = r.analytic.iter().flat_map(|t| t.data()).fold(0.0f64, |m, x| m.max(x.abs()));
    Ok((r.max_rel_err, largest))
}

fn grad_infonce(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let b = r.random_range(2..=6);
    let scale = r.random_range(1.0..20.0);
    let s = normal(&mut r, b, b, 0.3);
    checked(&[s], |g, v| {
        let (a, c) = negnce::infonce(g, v[0], scale).map_err(to_ad)?;
        let sum = g.add(a, c)?;
        Ok(g.scale(sum, 0.5))
    })
}

fn grad_negnce(seed: u64) -> Outcome {
    let mut r = rng(100 + seed);
    let b = r.random_range(2..=6);
    let scale = r.random_range(1.0..20.0);
    let s = normal(&mut r, b, b, 0.3);
    // a ξ large enough that the set is never empty
    let set = negnce::marginal_similarity(&s, 2.0).map_err(|e| e.to_string())?;
    let cfg = hnf_core::config::NegNceConfig {
        gamma1: r.random_range(0.5..1.5),
        gamma2: r.random_range(0.1..1.0),
        xi: 2.0,
    };
    checked(&[s], |g, v| Ok(negnce::negnce_loss(g, v[0], &set, &cfg, scale).map_err(to_ad)?.loss))
}

fn grad_tpm(seed: u64) -> Outcome {
    let mut r = rng(200 + seed);
    let d = r.random_range(2..=4);
    let m = r.random_range(2..=4);
    let frames = r.random_range(1..=3);
    let slots = r.random_range(1..=3);
    let source = if seed % 2 == 0 { TemporalSource::PatchMean } else { TemporalSource::FCls };
    let text_keep = random_keep(&mut r, m);
    let mut visual_keep = random_keep(&mut r, frames * slots);
    visual_keep[0] = true;
    let margin = r.random_range(1.0..2.0);
    let mut inputs = vec![normal(&mut r, m, d, 1.0), normal(&mut r, frames * slots, d, 1.0), normal(&mut r, 1, m, 1.0)];
    inputs.extend(temporal_tensors(&mut r, d, frames));
    checked(&inputs, |g, v| {
        let text = text_features(g, v[0]).map_err(to_ad)?;
        let temporal = temporal_vars(&v[3..]);
        let video = video_features(g, v[1], frames, slots, source, &temporal).map_err(to_ad)?;
        let logits = g.transpose(v[2]);
        let w = g.softmax(logits, 0)?;
        let w_text = g.transpose(w);
        let triplet = tpmcl::build_triplet(g, &text, &video, w_text, &text_keep, &visual_keep, source, &temporal)
            .map_err(to_ad)?;
        Ok(tpmcl::tpm_loss(g, &triplet, text.t_cls, margin).map_err(to_ad)?.loss)
    })
}

pub fn tiny_corpus(seed: u64) -> Corpus {
    generate_synthetic(&SyntheticSpec {
        pair_count: 4,
        concept_dim: 3,
        concepts_per_pair: 2,
        noise_sigma: 0.3,
        hard_negative_overlap: 0.5,
        seed,
        frames_per_video: 2,
        patches_per_frame: 1,
        filler_words: 1,
        ..SyntheticSpec::default()
    })
    .expect("valid spec")
}

pub fn tiny_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.encoder.max_text_len = 4;
    cfg.encoder.max_frames = 4;
    cfg.encoder.max_patches_per_frame = 1;
    cfg.encoder.logit_scale = 5.0;
    cfg.encoder.init = hnf_core::config::ProjectionInit::Random;
    cfg.encoder.init_std = 0.3;
    cfg.negnce.xi = 0.5;
    cfg.tpmcl.margin = 1.5;
    cfg.train.batch_size = 4;
    cfg.train.seed = seed;
    cfg.dmae.reduction = if seed % 2 == 0 { Reduction::Ti } else { Reduction::Wti };
    cfg
}

/// `ModelVars` over leaves in [`model::PARAM_NAMES`] order.
pub fn model_vars(v: &[Var]) -> ModelVars {
    let head = |o: usize| TokenWeightVars {
        align: v[o],
        w1: v[o + 1],
        b1: v[o + 2],
        w2: v[o + 3],
        b2: v[o + 4],
    };
    ModelVars {
        encoder: EncoderVars {
            text_proj: v[0],
            video_proj: v[1],
            temporal: temporal_vars(&v[2..6]),
            wti_gate: v[6],
        },
        text_weights: head(7),
        visual_weights: head(12),
    }
}

fn grad_l_all(seed: u64) -> Outcome {
    let corpus = tiny_corpus(seed);
    let cfg = tiny_config(seed);
    let mut params = ModelParams::init(corpus.d_raw, &cfg);
    let mut r = rng(300 + seed);
    // non-zero values everywhere so that no path is trivially flat
    for t in params.tensors_mut() {
        let [rows, cols] = t.shape();
        t.add_assign(&normal(&mut r, rows, cols, 0.2));
    }
    let w_ta = model::caption_attention(&corpus, &cfg).map_err(|e| e.to_string())?;
    let batch: Vec<(usize, usize)> = corpus.caption_targets().into_iter().enumerate().collect();
    let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    checked(&inputs, |g, v| {
        let vars = model_vars(v);
        Ok(trainer::batch_loss(g, &vars, &cfg, &corpus, &w_ta, &batch).map_err(to_ad)?.total)
    })
}

fn grad_encode_text(seed: u64) -> Outcome {
    let mut r = rng(400 + seed);
    let (m, d_raw, d) = (r.random_range(1..=5), r.random_range(2..=4), r.random_range(2..=4));
    let raw = normal(&mut r, m, d_raw, 1.0);
    let max_len = r.random_range(1..=5);
    let c = rng(401 + seed);
    checked(&[normal(&mut r, d_raw, d, 1.0)], |g, v| {
        let t = encoder::encode_text(g, &raw, v[0], max_len).map_err(to_ad)?;
        let mut c = c.clone();
        let a = probe(g, t.t_tokens, &mut c)?;
        let b = probe(g, t.t_cls, &mut c)?;
        g.add(a, b)
    })
}

fn grad_temporal_patch_mean(seed: u64) -> Outcome {
    let mut r = rng(500 + seed);
    let (d, frames, slots) = (r.random_range(2..=4), r.random_range(1..=4), r.random_range(1..=3));
    let keep = if seed % 2 == 0 { None } else { Some(random_keep(&mut r, frames * slots)) };
    let mut inputs = vec![normal(&mut r, frames * slots, d, 1.0)];
    inputs.extend(temporal_tensors(&mut r, d, frames + 1));
    let c = rng(501 + seed);
    checked(&inputs, |g, v| {
        let cls: Vec<usize> = (0..frames).map(|f| f * slots).collect();
        let f_cls = g.gather_rows(v[0], &cls)?;
        let video = VideoFeatures {
            f_cls,
            v_tokens: v[0],
            v_h: f_cls,
            frames,
            slots,
        };
        let input = encoder::temporal_input(g, &video, TemporalSource::PatchMean, keep.as_deref()).map_err(to_ad)?;
        let out = encoder::temporal_encode(g, input, &temporal_vars(&v[1..])).map_err(to_ad)?;
        probe(g, out, &mut c.clone())
    })
}

fn grad_temporal_fcls(seed: u64) -> Outcome {
    let mut r = rng(600 + seed);
    let (d, frames, slots) = (r.random_range(2..=4), r.random_range(1..=4), r.random_range(1..=3));
    let keep = random_keep(&mut r, frames * slots);
    let mut inputs = vec![normal(&mut r, frames * slots, d, 1.0)];
    inputs.extend(temporal_tensors(&mut r, d, frames));
    let c = rng(601 + seed);
    checked(&inputs, |g, v| {
        let cls: Vec<usize> = (0..frames).map(|f| f * slots).collect();
        let f_cls = g.gather_rows(v[0], &cls)?;
        let video = VideoFeatures {
            f_cls,
            v_tokens: v[0],
            v_h: f_cls,
            frames,
            slots,
        };
        let input = encoder::temporal_input(g, &video, TemporalSource::FCls, Some(&keep)).map_err(to_ad)?;
        let out = encoder::temporal_encode(g, input, &temporal_vars(&v[1..])).map_err(to_ad)?;
        probe(g, out, &mut c.clone())
    })
}

fn grad_encode_video(seed: u64) -> Outcome {
    let corpus = tiny_corpus(seed);
    let mut cfg = tiny_config(seed);
    cfg.encoder.max_frames = 2;
    if seed % 2 == 1 {
        cfg.encoder.temporal_source = TemporalSource::FCls;
    }
    let mut r = rng(700 + seed);
    let d = corpus.d_raw;
    let video = corpus.videos[(seed % 4) as usize].clone();
    let mut inputs = vec![normal(&mut r, d, d, 0.6)];
    inputs.extend(temporal_tensors(&mut r, d, 2));
    let c = rng(701 + seed);
    let ecfg = cfg.encoder.clone();
    checked(&inputs, |g, v| {
        let vars = EncoderVars {
            text_proj: v[0],
            video_proj: v[0],
            temporal: temporal_vars(&v[1..]),
            wti_gate: v[0],
        };
        let f = encoder::encode_video(g, &video, &vars, &ecfg).map_err(to_ad)?;
        let mut c = c.clone();
        let a = probe(g, f.v_h, &mut c)?;
        let b = probe(g, f.v_tokens, &mut c)?;
        g.add(a, b)
    })
}

fn grad_visual_attention(seed: u64) -> Outcome {
    let mut r = rng(800 + seed);
    let (n, d) = (r.random_range(1..=5), r.random_range(2..=4));
    let k = r.random_range(1..=4);
    let c = rng(801 + seed);
    checked(&[normal(&mut r, n, d, 1.0)], |g, v| {
        let w = dmae::visual_attention(g, v[0], k).map_err(to_ad)?;
        probe(g, w, &mut c.clone())
    })
}

fn settings(seed: u64) -> SimilaritySettings {
    SimilaritySettings {
        dmae_on: seed % 3 != 2,
        top_k: 1 + (seed as usize % 3),
        reduction: if seed % 2 == 0 { Reduction::Ti } else { Reduction::Wti },
    }
}

fn grad_pair_similarity(seed: u64) -> Outcome {
    let mut r = rng(900 + seed);
    let (m, n, d) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(2..=4));
    let w_ta = Tensor::row_vector(random_weights(&mut r, m));
    let st = settings(seed);
    let inputs = [normal(&mut r, m, d, 1.0), normal(&mut r, n, d, 1.0), normal(&mut r, d, 1, 1.0)];
    checked(&inputs, |g, v| {
        let text = text_features(g, v[0]).map_err(to_ad)?;
        let video = VideoFeatures {
            f_cls: v[1],
            v_tokens: v[1],
            v_h: v[1],
            frames: n,
            slots: 1,
        };
        Ok(dmae::pair_similarity(g, &text, &w_ta, &video, v[2], st).map_err(to_ad)?.0)
    })
}

fn grad_batch_similarity(seed: u64) -> Outcome {
    let mut r = rng(1000 + seed);
    let d = r.random_range(2..=3);
    let (q, gal) = (r.random_range(1..=3), r.random_range(1..=3));
    let ms: Vec<usize> = (0..q).map(|_| r.random_range(1..=3)).collect();
    let ns: Vec<usize> = (0..gal).map(|_| r.random_range(1..=3)).collect();
    let w_ta: Vec<Tensor> = ms.iter().map(|&m| Tensor::row_vector(random_weights(&mut r, m))).collect();
    let mut inputs: Vec<Tensor> = ms.iter().map(|&m| normal(&mut r, m, d, 1.0)).collect();
    inputs.extend(ns.iter().map(|&n| normal(&mut r, n, d, 1.0)));
    inputs.push(normal(&mut r, d, 1, 1.0));
    let st = settings(seed);
    let c = rng(1001 + seed);
    checked(&inputs, |g, v| {
        let texts = v[..q].iter().map(|&t| text_features(g, t)).collect::<hnf_core::Result<Vec<_>>>().map_err(to_ad)?;
        let videos: Vec<VideoFeatures> = v[q..q + gal]
            .iter()
            .zip(&ns)
            .map(|(&x, &n)| VideoFeatures {
                f_cls: x,
                v_tokens: x,
                v_h: x,
                frames: n,
                slots: 1,
            })
            .collect();
        let s = dmae::batch_similarity(g, &texts, &w_ta, &videos, v[q + gal], st).map_err(to_ad)?;
        probe(g, s, &mut c.clone())
    })
}

fn grad_token_weights(seed: u64) -> Outcome {
    let mut r = rng(1100 + seed);
    let (rows, cols, d) = (r.random_range(1..=4), r.random_range(1..=3), r.random_range(2..=3));
    let inputs = [
        normal(&mut r, rows, d, 1.0),
        normal(&mut r, cols, d, 1.0),
        normal(&mut r, rows + 1, cols + 1, 0.5),
        normal(&mut r, 2 * d, d, 0.7),
        normal(&mut r, 1, d, 0.3),
        normal(&mut r, d, 1, 0.7),
        normal(&mut r, 1, 1, 0.3),
    ];
    let c = rng(1101 + seed);
    let visual = seed % 2 == 1;
    checked(&inputs, |g, v| {
        let p = TokenWeightVars {
            align: v[2],
            w1: v[3],
            b1: v[4],
            w2: v[5],
            b2: v[6],
        };
        let w = if visual {
            tpmcl::visual_token_weights(g, v[0], v[1], &p)
        } else {
            tpmcl::text_token_weights(g, v[0], v[1], &p)
        }
        .map_err(to_ad)?;
        probe(g, w, &mut c.clone())
    })
}

/// Recomputes `HardNegativeSet` as a sorted list for set comparisons.
pub fn as_set(set: &HardNegativeSet) -> Vec<((usize, usize), f64)> {
    let mut v: Vec<_> = set.pairs.iter().cloned().zip(set.sim_m.iter().cloned()).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}
