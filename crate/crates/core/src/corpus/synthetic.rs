//! Planted-correspondence corpora for desk-scale checks.
//!
//! Every pair owns `concepts_per_pair` unit concept vectors. Caption tokens are
//! concepts plus noise, frames and patches are concepts plus independent
//! noise, and filler words carry no concept at all. A planted hard negative
//! `(i, j)` inserts one extra frame into video `j` that shows caption `i`'s
//! first concept.
//!
//! Concepts are orthonormalised in groups of whole pairs that fit in
//! `concept_dim`, so with `concept_dim ≥ pair_count · concepts_per_pair` all
//! concepts are mutually orthogonal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use hnf_autodiff::Tensor;

use super::{Caption, CaptionRecord, Corpus, PlantedNegative, VideoRecord};
use crate::error::{Error, Result};

const FILLERS: [(&str, &str); 6] = [
    ("a", "DET"),
    ("the", "DET"),
    ("of", "ADP"),
    ("with", "ADP"),
    ("and", "CCONJ"),
    ("in", "ADP"),
];

const CONCEPT_TAGS: [&str; 3] = ["NOUN", "VERB", "ADJ"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub pair_count: usize,
    /// Raw embedding dimension `D_raw`.
    pub concept_dim: usize,
    pub concepts_per_pair: usize,
    /// Per-coordinate standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Fraction of pairs that receive a planted hard negative.
    pub hard_negative_overlap: f64,
    pub seed: u64,
    /// Seed of the additive noise only. Two specs that differ only here share
    /// concepts, token order and planted frames: a held-out draw of one corpus.
    pub noise_seed: Option<u64>,
    pub frames_per_video: usize,
    pub patches_per_frame: usize,
    /// Trailing patch slots per frame that carry noise only, like filler words.
    pub background_patches: usize,
    pub filler_words: usize,
    pub captions_per_video: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pair_count: 64,
            concept_dim: 32,
            concepts_per_pair: 3,
            noise_sigma: 0.0,
            hard_negative_overlap: 0.0,
            seed: 0,
            noise_seed: None,
            frames_per_video: 4,
            patches_per_frame: 3,
            background_patches: 0,
            filler_words: 2,
            captions_per_video: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Synthetic(msg));
        if self.pair_count == 0 || self.concept_dim == 0 || self.concepts_per_pair == 0 {
            return fail("pair_count, concept_dim and concepts_per_pair must be at least 1".into());
        }
        if self.background_patches > self.patches_per_frame {
            return fail(format!(
                "background_patches {} exceeds patches_per_frame {}",
                self.background_patches, self.patches_per_frame
            ));
        }
        if self.frames_per_video == 0 || self.captions_per_video == 0 {
            return fail("frames_per_video and captions_per_video must be at least 1".into());
        }
        if self.concepts_per_pair > self.concept_dim {
            return fail(format!(
                "concepts_per_pair ({}) exceeds concept_dim ({}); concepts cannot be orthogonal",
                self.concepts_per_pair, self.concept_dim
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_overlap) {
            return fail(format!(
                "hard_negative_overlap must lie in [0, 1], got {}",
                self.hard_negative_overlap
            ));
        }
        if self.hard_negative_overlap > 0.0 && self.pair_count < 2 {
            return fail("planted hard negatives need at least two pairs".into());
        }
        Ok(())
    }

    pub fn planted_count(&self) -> usize {
        (self.hard_negative_overlap * self.pair_count as f64).ceil() as usize
    }
}

fn unit(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-8 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn concepts(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let d = spec.concept_dim;
    let c = spec.concepts_per_pair;
    let group = (d / c).max(1);
    let mut out = Vec::with_capacity(spec.pair_count);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for pair in 0..spec.pair_count {
        if pair % group == 0 {
            basis.clear();
        }
        let mut mine = Vec::with_capacity(c);
        while mine.len() < c {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            if unit(&mut v) {
                basis.push(v.clone());
                mine.push(v);
            }
        }
        out.push(mine);
    }
    out
}

fn noisy(base: &[f64], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter().map(|&x| x + noise.sample(rng)).collect()
}

/// Generates a corpus; identical specs produce bitwise identical corpora.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed.unwrap_or(spec.seed));
    noise_rng.set_stream(1);
    let d = spec.concept_dim;
    let c = spec.concepts_per_pair;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Synthetic(e.to_string()))?;
    let concept_vectors = concepts(spec, &mut rng);
    let zeros = vec![0.0; d];

    // planted (caption pair, video pair) along a random cycle
    let mut order: Vec<usize> = (0..spec.pair_count).collect();
    order.shuffle(&mut rng);
    let planted: Vec<(usize, usize)> = (0..spec.planted_count())
        .map(|k| (order[k], order[(k + 1) % spec.pair_count]))
        .collect();

    let mut captions = Vec::with_capacity(spec.pair_count * spec.captions_per_video);
    let mut videos = Vec::with_capacity(spec.pair_count);
    for (i, mine) in concept_vectors.iter().enumerate() {
        let video_id = format!("v{i}");
        for r in 0..spec.captions_per_video {
            let mut slots: Vec<Option<usize>> = (0..c).map(Some).collect();
            if r > 0 {
                slots.shuffle(&mut rng);
            }
            for _ in 0..spec.filler_words {
                let at = rng.random_range(0..=slots.len());
                slots.insert(at, None);
            }
            let mut tokens = Vec::with_capacity(slots.len());
            let mut tags = Vec::with_capacity(slots.len());
            let mut rows = Vec::with_capacity(slots.len());
            for slot in slots {
                match slot {
                    Some(k) => {
                        let tag = CONCEPT_TAGS[k % CONCEPT_TAGS.len()];
                        tokens.push(format!("{}{}", tag.to_lowercase(), i * c + k));
                        tags.push(tag.to_string());
                        rows.push(noisy(&mine[k], &noise, &mut noise_rng));
                    }
                    None => {
                        let (word, tag) = FILLERS[rng.random_range(0..FILLERS.len())];
                        tokens.push(word.to_string());
                        tags.push(tag.to_string());
                        rows.push(noisy(&zeros, &noise, &mut noise_rng));
                    }
                }
            }
            captions.push(Caption {
                record: CaptionRecord {
                    caption_id: if spec.captions_per_video == 1 {
                        format!("c{i}")
                    } else {
                        format!("c{i}_{r}")
                    },
                    video_id: video_id.clone(),
                    tokens,
                    pos_tags: tags,
                },
                embeddings: Tensor::from_rows(&rows)?,
            });
        }

        let mut frame_concepts: Vec<&[f64]> = (0..spec.frames_per_video).map(|n| mine[n % c].as_slice()).collect();
        for &(ci, vj) in &planted {
            if vj == i {
                let at = rng.random_range(0..=frame_concepts.len());
                frame_concepts.insert(at, concept_vectors[ci][0].as_slice());
            }
        }
        let slots = spec.patches_per_frame + 1;
        let mut rows = Vec::with_capacity(frame_concepts.len() * slots);
        for concept in &frame_concepts {
            for slot in 0..slots {
                let source = if slot + spec.background_patches >= slots { zeros.as_slice() } else { concept };
                rows.push(noisy(source, &noise, &mut noise_rng));
            }
        }
        videos.push(VideoRecord {
            video_id,
            frame_count: frame_concepts.len(),
            patches_per_frame: spec.patches_per_frame,
            patch_embeddings: Tensor::from_rows(&rows)?,
        });
    }

    let caption_id = |i: usize| {
        if spec.captions_per_video == 1 {
            format!("c{i}")
        } else {
            format!("c{i}_0")
        }
    };
    let planted_negatives = planted
        .iter()
        .map(|&(ci, vj)| PlantedNegative {
            caption_id: caption_id(ci),
            video_id: format!("v{vj}"),
        })
        .collect();

    let corpus = Corpus {
        d_raw: d,
        captions,
        videos,
        planted_negatives,
    };
    corpus.validate()?;
    Ok(corpus)
}
