//! Textual clue statistics: PoS boost weights and the TF-IDF irrelevant-word set.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use serde::Serialize;

use super::tagger::is_known_tag;
use super::{CaptionRecord, Corpus};
use crate::error::{Error, Result};

/// Content-word tags that receive the `eta` boost.
pub const SIGNIFICANT_POS: [&str; 3] = ["NOUN", "VERB", "ADJ"];

fn normalize(word: &str) -> String {
    word.to_lowercase()
}

/// `eta` for NOUN/VERB/ADJ tokens, 1 otherwise. Unknown tags count as non-significant.
pub fn compute_pos_weights(record: &CaptionRecord, eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::Invalid(format!("eta must be positive, got {eta}")));
    }
    if record.pos_tags.len() != record.tokens.len() {
        return Err(Error::Corpus(format!(
            "caption {} has {} tokens but {} tags",
            record.caption_id,
            record.tokens.len(),
            record.pos_tags.len()
        )));
    }
    Ok(record
        .pos_tags
        .iter()
        .map(|tag| {
            if SIGNIFICANT_POS.contains(&tag.as_str()) {
                eta
            } else {
                if !is_known_tag(tag) {
                    warn!("caption {}: unknown PoS tag `{tag}` treated as non-significant", record.caption_id);
                }
                1.0
            }
        })
        .collect())
}

/// Document frequencies over per-video paragraphs.
#[derive(Debug, Clone, Default)]
pub struct DocumentFrequencies {
    pub documents: usize,
    pub df: HashMap<String, usize>,
}

impl DocumentFrequencies {
    /// One document per paragraph; a paragraph is the concatenation of one video's captions.
    pub fn from_paragraphs<'a, I, P>(paragraphs: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: IntoIterator<Item = &'a String>,
    {
        let mut out = Self::default();
        for paragraph in paragraphs {
            out.documents += 1;
            let words: BTreeSet<String> = paragraph.into_iter().map(|w| normalize(w)).collect();
            for w in words {
                *out.df.entry(w).or_insert(0) += 1;
            }
        }
        out
    }

    /// Smoothed inverse document frequency `ln((1 + D) / (1 + df))`.
    pub fn idf(&self, word: &str) -> f64 {
        let df = self.df.get(&normalize(word)).copied().unwrap_or(0);
        ((1.0 + self.documents as f64) / (1.0 + df as f64)).ln()
    }
}

/// Raw term count in the paragraph times the smoothed idf, per distinct word.
pub fn tfidf_scores(paragraph: &[&String], freqs: &DocumentFrequencies) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for w in paragraph {
        *counts.entry(normalize(w)).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .map(|(w, tf)| {
            let score = tf as f64 * freqs.idf(&w);
            (w, score)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreqWeights {
    /// The irrelevant-word set, lowest score first.
    pub irrelevant: Vec<String>,
    /// One 0/1 vector per input caption.
    pub per_caption: Vec<Vec<f64>>,
    /// True when `k` had to be clamped to `vocabulary − 1`.
    pub clamped: bool,
}

/// Picks the `k` lowest tf-idf words of the video's paragraph (ties broken
/// lexicographically) and zeroes them in each caption's frequency weights.
///
/// The set never covers the whole vocabulary: `k` is clamped to `vocab − 1`.
pub fn compute_freq_weights(
    captions_of_video: &[&CaptionRecord],
    freqs: &DocumentFrequencies,
    k: usize,
) -> Result<FreqWeights> {
    if captions_of_video.is_empty() {
        return Err(Error::Invalid("compute_freq_weights needs at least one caption".into()));
    }
    let paragraph: Vec<&String> = captions_of_video.iter().flat_map(|c| c.tokens.iter()).collect();
    let scores = tfidf_scores(&paragraph, freqs);
    let vocab = scores.len();
    let limit = vocab.saturating_sub(1);
    let clamped = k > limit;
    let take = k.min(limit);

    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(w, s)| (w, *s)).collect();
    // BTreeMap iteration is lexicographic, so a stable sort by score keeps that order among ties
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    let irrelevant: Vec<String> = ranked.into_iter().take(take).map(|(w, _)| w.clone()).collect();
    let set: BTreeSet<&str> = irrelevant.iter().map(String::as_str).collect();

    let per_caption = captions_of_video
        .iter()
        .map(|c| {
            c.tokens
                .iter()
                .map(|t| if set.contains(normalize(t).as_str()) { 0.0 } else { 1.0 })
                .collect()
        })
        .collect();
    Ok(FreqWeights {
        irrelevant,
        per_caption,
        clamped,
    })
}

/// Per-caption weight vectors for the whole corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinguisticStats {
    pub eta: f64,
    pub irrelevant_k: usize,
    pub w_pos: Vec<Vec<f64>>,
    pub w_freq: Vec<Vec<f64>>,
    /// Irrelevant-word set per video id.
    pub irrelevant: BTreeMap<String, Vec<String>>,
}

impl LinguisticStats {
    pub fn compute(corpus: &Corpus, eta: f64, k: usize) -> Result<Self> {
        let by_video = corpus.captions_by_video();
        let paragraphs: Vec<Vec<&String>> = by_video
            .iter()
            .map(|idx| idx.iter().flat_map(|&c| corpus.captions[c].record.tokens.iter()).collect())
            .collect();
        let freqs = DocumentFrequencies::from_paragraphs(paragraphs.iter().map(|p| p.iter().copied()));

        let n = corpus.captions.len();
        let mut w_pos = Vec::with_capacity(n);
        for c in &corpus.captions {
            w_pos.push(compute_pos_weights(&c.record, eta)?);
        }
        let mut w_freq = vec![Vec::new(); n];
        let mut irrelevant = BTreeMap::new();
        let mut clamped = 0usize;
        for (vi, idx) in by_video.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let records: Vec<&CaptionRecord> = idx.iter().map(|&c| &corpus.captions[c].record).collect();
            let fw = compute_freq_weights(&records, &freqs, k)?;
            if fw.clamped {
                clamped += 1;
            }
            for (&c, w) in idx.iter().zip(fw.per_caption) {
                w_freq[c] = w;
            }
            irrelevant.insert(corpus.videos[vi].video_id.clone(), fw.irrelevant);
        }
        if clamped > 0 {
            warn!("irrelevant-set size k={k} clamped to vocabulary-1 for {clamped} video paragraph(s)");
        }
        Ok(Self {
            eta,
            irrelevant_k: k,
            w_pos,
            w_freq,
            irrelevant,
        })
    }
}
