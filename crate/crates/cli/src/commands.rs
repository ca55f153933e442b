use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use hnf_autodiff::Graph;
use hnf_core::bundle;
use hnf_core::config::set_dotted;
use hnf_core::corpus::synthetic::{generate_synthetic, SyntheticSpec};
use hnf_core::corpus::{write_json, Corpus};
use hnf_core::dmae::{self, AttentionBundle};
use hnf_core::encoder;
use hnf_core::evalkit::{self, RetrievalReport};
use hnf_core::model::{self, ModelParams, ModelVars};
use hnf_core::negnce::{self, MiningReport};
use hnf_core::tpmcl::{self, TokenWeightDump};
use hnf_core::trainer::{self, BatchSampler};
use log::info;
use serde::Serialize;

use crate::Common;

pub const EVAL_FILE: &str = "eval.json";
pub const SIMILARITY_DIR: &str = "similarity";
pub const MINING_FILE: &str = "mining.json";
pub const TOKEN_WEIGHTS_FILE: &str = "token_weights.json";
pub const ATTENTION_FILE: &str = "attention.json";

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn load_checkpoint(dir: &Path, corpus: &Corpus) -> Result<ModelParams> {
    let params = ModelParams::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if params.d_raw() != corpus.d_raw {
        bail!("checkpoint expects D_raw={} but the corpus has {}", params.d_raw(), corpus.d_raw);
    }
    Ok(params)
}

pub fn gen(c: &Common, spec_path: Option<&Path>) -> Result<()> {
    let out = c.out()?;
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if !c.overrides.is_empty() {
        let mut table = toml::Table::try_from(&spec)?;
        for o in &c.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
            set_dotted(&mut table, k.trim(), v.trim())?;
        }
        spec = table.try_into().context("applying overrides to the spec")?;
    }
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    let corpus = generate_synthetic(&spec)?;
    corpus.save(out)?;
    fs::write(out.join("spec.toml"), toml::to_string(&spec)?)?;
    info!(
        "{} captions, {} videos, {} planted negatives -> {}",
        corpus.captions.len(),
        corpus.videos.len(),
        corpus.planted_negatives.len(),
        out.display()
    );
    Ok(())
}

pub fn train(c: &Common, corpus: &Path, eval_corpus: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out()?;
    let corpus = load_corpus(corpus)?;
    let eval = eval_corpus.map(load_corpus).transpose()?;
    let params = match init {
        Some(dir) => load_checkpoint(dir, &corpus)?,
        None => ModelParams::init(corpus.d_raw, &cfg),
    };
    let outcome = trainer::fit_from(params, &corpus, eval.as_ref().unwrap_or(&corpus), &cfg, Some(out))?;
    if let Some(e) = outcome.final_eval() {
        print!("{}", evalkit::format_table(&[e.t2v.clone(), e.v2t.clone()]));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    t2v: RetrievalReport,
    v2t: RetrievalReport,
    rsum: f64,
}

pub fn eval(c: &Common, corpus: &Path, checkpoint: Option<&Path>, similarity: Option<&Path>) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out()?;
    let corpus = load_corpus(corpus)?;
    let s = match (checkpoint, similarity) {
        (_, Some(dir)) => bundle::read_matrix(dir).with_context(|| format!("reading {}", dir.display()))?,
        (Some(dir), None) => {
            let params = load_checkpoint(dir, &corpus)?;
            let s = model::corpus_similarity(&params, &corpus, &cfg)?;
            bundle::write_matrix(&out.join(SIMILARITY_DIR), "similarity", &s)?;
            s
        }
        (None, None) => bail!("either --checkpoint or --similarity is required"),
    };
    let dsl = cfg.eval.dsl.then_some(cfg.eval.dsl_scale);
    let [t2v, v2t] = evalkit::evaluate(&s, &corpus, dsl)?;
    print!("{}", evalkit::format_table(&[t2v.clone(), v2t.clone()]));
    fs::create_dir_all(out)?;
    let rsum = t2v.rsum + v2t.rsum;
    write_json(&out.join(EVAL_FILE), &EvalOutput { t2v, v2t, rsum })?;
    Ok(())
}

#[derive(Serialize)]
struct MinedPair {
    caption_id: String,
    video_id: String,
    sim_m: f64,
}

#[derive(Serialize)]
struct MinedBatch {
    batch: usize,
    #[serde(flatten)]
    report: MiningReport,
    negatives: Vec<MinedPair>,
}

pub fn mine(c: &Common, corpus: &Path, checkpoint: &Path, batches: Option<usize>) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out()?;
    let corpus = load_corpus(corpus)?;
    let params = load_checkpoint(checkpoint, &corpus)?;
    let w_ta = model::caption_attention(&corpus, &cfg)?;
    let mut sampler = BatchSampler::new(&corpus, cfg.train.batch_size, cfg.train.seed)?;
    let count = batches.unwrap_or_else(|| corpus.videos.len().div_ceil(sampler.batch_size()));
    if count == 0 {
        bail!("--batches must be at least 1");
    }
    let mut mined = Vec::with_capacity(count);
    for k in 0..count {
        let batch = sampler.next_batch();
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &params, false);
        let captions: Vec<usize> = batch.iter().map(|b| b.0).collect();
        let texts = model::encode_captions(&mut g, &vars, &corpus, &captions, &cfg)?;
        let videos = batch
            .iter()
            .map(|&(_, v)| encoder::encode_video(&mut g, &corpus.videos[v], &vars.encoder, &cfg.encoder))
            .collect::<hnf_core::Result<Vec<_>>>()?;
        let attn: Vec<_> = captions.iter().map(|&i| w_ta[i].clone()).collect();
        let s = dmae::batch_similarity(&mut g, &texts, &attn, &videos, vars.encoder.wti_gate, model::similarity_settings(&cfg))?;
        let set = negnce::marginal_similarity(g.value(s), cfg.negnce.xi)?;
        let negatives = set
            .pairs
            .iter()
            .zip(&set.sim_m)
            .map(|(&(i, j), &sim_m)| MinedPair {
                caption_id: corpus.captions[batch[i].0].record.caption_id.clone(),
                video_id: corpus.videos[batch[j].1].video_id.clone(),
                sim_m,
            })
            .collect();
        let report = MiningReport::new(batch.len(), &set);
        info!("batch {k}: H={} mean sim_m={:.4}", report.h, report.mean_sim_m);
        mined.push(MinedBatch { batch: k, report, negatives });
    }
    fs::create_dir_all(out)?;
    write_json(&out.join(MINING_FILE), &mined)?;
    Ok(())
}

pub fn dump_weights(c: &Common, corpus: &Path, checkpoint: &Path, limit: Option<usize>) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out()?;
    let corpus = load_corpus(corpus)?;
    let params = load_checkpoint(checkpoint, &corpus)?;
    let w_ta = model::caption_attention(&corpus, &cfg)?;
    let targets = corpus.caption_targets();
    let n = limit.unwrap_or(corpus.captions.len()).min(corpus.captions.len());
    if n == 0 {
        bail!("nothing to dump: --limit is 0");
    }
    let mut weights = Vec::with_capacity(n);
    let mut attention = Vec::with_capacity(n);
    for ci in 0..n {
        let caption = &corpus.captions[ci];
        let video = &corpus.videos[targets[ci]];
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &params, false);
        let text = encoder::encode_text(&mut g, &caption.embeddings, vars.encoder.text_proj, cfg.encoder.max_text_len)?;
        let v = encoder::encode_video(&mut g, video, &vars.encoder, &cfg.encoder)?;
        let wt = tpmcl::text_token_weights(&mut g, text.t_tokens, v.f_cls, &vars.text_weights)?;
        let wv = tpmcl::visual_token_weights(&mut g, v.v_tokens, text.t_cls, &vars.visual_weights)?;
        let text_weights = g.value(wt).data().to_vec();
        let patch_weights = g.value(wv).data().to_vec();
        weights.push(TokenWeightDump {
            caption_id: caption.record.caption_id.clone(),
            tokens: caption.record.tokens[..text.len()].to_vec(),
            text_keep: tpmcl::adaptive_mask(&text_weights, cfg.tpmcl.mask_ratio)?,
            text_weights,
            video_id: video.video_id.clone(),
            patch_keep: tpmcl::adaptive_mask(&patch_weights, cfg.tpmcl.mask_ratio)?,
            patch_weights,
        });
        attention.push(AttentionBundle::collect(
            &mut g,
            &caption.record.caption_id,
            &video.video_id,
            &text,
            &w_ta[ci],
            &v,
            vars.encoder.wti_gate,
            model::similarity_settings(&cfg),
        )?);
    }
    fs::create_dir_all(out)?;
    write_json(&out.join(TOKEN_WEIGHTS_FILE), &weights)?;
    write_json(&out.join(ATTENTION_FILE), &attention)?;
    info!("{n} pairs dumped to {}", out.display());
    Ok(())
}
