//! Corpus records, the on-disk corpus layout, linguistic statistics and the
//! synthetic generator.
//!
//! A corpus directory contains:
//!
//! - `captions.jsonl`: one [`CaptionRecord`] per line
//! - `pairing.json`: ground truth, caption id → video id
//! - `planted_negatives.json`: planted hard negatives (synthetic corpora only)
//! - `manifest.json` + `tensors.bin`: raw caption token embeddings and video
//!   patch embeddings (see [`crate::bundle`])

pub mod linguistic;
pub mod synthetic;
pub mod tagger;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use hnf_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::bundle::{self, Pending, Role};
use crate::error::{Error, Result};

pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const PAIRING_FILE: &str = "pairing.json";
pub const PLANTED_FILE: &str = "planted_negatives.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub video_id: String,
    pub tokens: Vec<String>,
    /// UPOS tags, one per token. Left empty in the file to use the fallback tagger.
    #[serde(default)]
    pub pos_tags: Vec<String>,
}

/// A caption with its raw token embeddings (`M×D_raw`).
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub record: CaptionRecord,
    pub embeddings: Tensor,
}

/// Raw per-frame patch embeddings, `N·(K+1)` rows of `D_raw`. Row `n·(K+1)`
/// is the frame-CLS slot of frame `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_count: usize,
    pub patches_per_frame: usize,
    pub patch_embeddings: Tensor,
}

impl VideoRecord {
    pub fn slots(&self) -> usize {
        self.patches_per_frame + 1
    }

    /// Frame-level embeddings, `N×D_raw` (slot 0 of every frame).
    pub fn frame_embeddings(&self) -> Tensor {
        let slots = self.slots();
        let d = self.patch_embeddings.cols();
        let mut data = Vec::with_capacity(self.frame_count * d);
        for n in 0..self.frame_count {
            data.extend_from_slice(self.patch_embeddings.row(n * slots));
        }
        Tensor::new(self.frame_count, d, data).expect("frame rows")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlantedNegative {
    pub caption_id: String,
    pub video_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub d_raw: usize,
    pub captions: Vec<Caption>,
    pub videos: Vec<VideoRecord>,
    pub planted_negatives: Vec<PlantedNegative>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.captions.is_empty() || self.videos.is_empty() {
            return Err(Error::Corpus("corpus needs at least one caption and one video".into()));
        }
        let video_index = self.video_index();
        if video_index.len() != self.videos.len() {
            return Err(Error::Corpus("duplicate video ids".into()));
        }
        let mut seen = HashMap::new();
        for c in &self.captions {
            let r = &c.record;
            if seen.insert(r.caption_id.as_str(), ()).is_some() {
                return Err(Error::Corpus(format!("duplicate caption id {}", r.caption_id)));
            }
            if r.tokens.is_empty() {
                return Err(Error::Corpus(format!("caption {} has no tokens", r.caption_id)));
            }
            if r.pos_tags.len() != r.tokens.len() {
                return Err(Error::Corpus(format!(
                    "caption {} has {} tokens but {} tags",
                    r.caption_id,
                    r.tokens.len(),
                    r.pos_tags.len()
                )));
            }
            if c.embeddings.shape() != [r.tokens.len(), self.d_raw] {
                return Err(Error::Corpus(format!(
                    "caption {} embeddings have shape {:?}, expected [{}, {}]",
                    r.caption_id,
                    c.embeddings.shape(),
                    r.tokens.len(),
                    self.d_raw
                )));
            }
            if !video_index.contains_key(r.video_id.as_str()) {
                return Err(Error::Corpus(format!(
                    "caption {} refers to unknown video {}",
                    r.caption_id, r.video_id
                )));
            }
        }
        for v in &self.videos {
            if v.frame_count == 0 {
                return Err(Error::Corpus(format!("video {} has no frames", v.video_id)));
            }
            if v.patch_embeddings.shape() != [v.frame_count * v.slots(), self.d_raw] {
                return Err(Error::Corpus(format!(
                    "video {} embeddings have shape {:?}",
                    v.video_id,
                    v.patch_embeddings.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn video_index(&self) -> HashMap<&str, usize> {
        self.videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.video_id.as_str(), i))
            .collect()
    }

    /// Ground-truth video index for every caption, in caption order.
    pub fn caption_targets(&self) -> Vec<usize> {
        let index = self.video_index();
        self.captions
            .iter()
            .map(|c| index[c.record.video_id.as_str()])
            .collect()
    }

    /// Caption indices grouped by video, in caption order.
    pub fn captions_by_video(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.videos.len()];
        for (ci, v) in self.caption_targets().into_iter().enumerate() {
            out[v].push(ci);
        }
        out
    }

    pub fn pairing(&self) -> BTreeMap<String, String> {
        self.captions
            .iter()
            .map(|c| (c.record.caption_id.clone(), c.record.video_id.clone()))
            .collect()
    }

    /// Fills missing PoS tags with the rule-based tagger.
    pub fn fill_missing_tags(&mut self) {
        for c in &mut self.captions {
            if c.record.pos_tags.is_empty() {
                c.record.pos_tags = tagger::tag(&c.record.tokens);
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let captions_path = dir.join(CAPTIONS_FILE);
        let mut file = fs::File::create(&captions_path).map_err(|e| Error::io(&captions_path, e))?;
        for c in &self.captions {
            let line = serde_json::to_string(&c.record).map_err(|e| Error::json(&captions_path, e))?;
            writeln!(file, "{line}").map_err(|e| Error::io(&captions_path, e))?;
        }

        write_json(&dir.join(PAIRING_FILE), &self.pairing())?;
        write_json(&dir.join(PLANTED_FILE), &self.planted_negatives)?;

        let mut pending = Vec::with_capacity(self.captions.len() + self.videos.len());
        for c in &self.captions {
            let m = c.embeddings.rows();
            let mut p = Pending::new(&c.record.caption_id, Role::Caption, vec![m, self.d_raw], c.embeddings.data());
            p.m = Some(m);
            pending.push(p);
        }
        for v in &self.videos {
            let mut p = Pending::new(
                &v.video_id,
                Role::Video,
                vec![v.frame_count, v.slots(), self.d_raw],
                v.patch_embeddings.data(),
            );
            p.n = Some(v.frame_count);
            p.k = Some(v.patches_per_frame);
            pending.push(p);
        }
        bundle::write(dir, self.d_raw, &pending)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let captions_path = dir.join(CAPTIONS_FILE);
        let file = fs::File::open(&captions_path).map_err(|e| Error::io(&captions_path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&captions_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CaptionRecord = serde_json::from_str(&line).map_err(|e| Error::json(&captions_path, e))?;
            records.push(r);
        }

        let (manifest, payloads) = bundle::read(dir)?;
        let d_raw = manifest.d_raw;
        let mut caption_emb: HashMap<String, Tensor> = HashMap::new();
        let mut videos = Vec::new();
        for (entry, data) in manifest.entries.into_iter().zip(payloads) {
            match entry.role {
                Role::Caption => {
                    let t = Tensor::new(entry.shape[0], d_raw, data)?;
                    caption_emb.insert(entry.id, t);
                }
                Role::Video => {
                    let (n, slots) = (entry.shape[0], entry.shape[1]);
                    videos.push(VideoRecord {
                        video_id: entry.id,
                        frame_count: n,
                        patches_per_frame: slots - 1,
                        patch_embeddings: Tensor::new(n * slots, d_raw, data)?,
                    });
                }
                other => {
                    return Err(Error::bundle(entry.id, format!("unexpected role {other:?} in corpus bundle")));
                }
            }
        }

        let mut captions = Vec::with_capacity(records.len());
        for r in records {
            let embeddings = caption_emb
                .remove(&r.caption_id)
                .ok_or_else(|| Error::bundle(&r.caption_id, "caption has no embedding tensor"))?;
            if embeddings.rows() != r.tokens.len() {
                return Err(Error::bundle(
                    &r.caption_id,
                    format!("{} embedding rows for {} tokens", embeddings.rows(), r.tokens.len()),
                ));
            }
            captions.push(Caption { record: r, embeddings });
        }

        let pairing_path = dir.join(PAIRING_FILE);
        if pairing_path.exists() {
            let pairing: BTreeMap<String, String> = read_json(&pairing_path)?;
            for c in &captions {
                if pairing.get(&c.record.caption_id) != Some(&c.record.video_id) {
                    return Err(Error::Corpus(format!(
                        "pairing.json disagrees with captions.jsonl for {}",
                        c.record.caption_id
                    )));
                }
            }
        }
        let planted_path = dir.join(PLANTED_FILE);
        let planted_negatives = if planted_path.exists() {
            read_json(&planted_path)?
        } else {
            Vec::new()
        };

        let mut corpus = Corpus {
            d_raw,
            captions,
            videos,
            planted_negatives,
        };
        corpus.fill_missing_tags();
        corpus.validate()?;
        Ok(corpus)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
