//! Optimisation of the total objective `L_all = L_NegNCE + L_TPM` with Adam and
//! a cosine learning-rate schedule.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use hnf_autodiff::{Graph, Tensor, Var};
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::Corpus;
use crate::dmae;
use crate::encoder::{self, TextFeatures, VideoFeatures};
use crate::error::{Error, Result};
use crate::evalkit::{self, RetrievalReport};
use crate::model::{self, ModelParams, ModelVars};
use crate::negnce::{self, MiningReport, NegNceOutput};
use crate::tpmcl;

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// `base · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Invalid("cosine schedule needs total_steps ≥ 1".into()));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!("step {step} is past total_steps {total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[[usize; 2]], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect(),
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid("optimizer state does not match the parameter list".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::Invalid(format!("gradient {k} has shape {:?} for {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One caption per video, videos drawn without replacement within an epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    by_video: Vec<Vec<usize>>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    pub epoch: usize,
}

impl BatchSampler {
    pub fn new(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<Self> {
        let by_video = corpus.captions_by_video();
        let usable = by_video.iter().filter(|c| !c.is_empty()).count();
        if usable == 0 {
            return Err(Error::Corpus("no video has a caption".into()));
        }
        let batch_size = batch_size.min(usable);
        if batch_size < usable {
            debug!("batch size {batch_size} over {usable} videos");
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            by_video,
            order: Vec::new(),
            pos: 0,
            batch_size,
            epoch: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// `(caption, video)` index pairs.
    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        if self.pos >= self.order.len() {
            self.order = (0..self.by_video.len()).filter(|&v| !self.by_video[v].is_empty()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let videos = self.order[self.pos..end].to_vec();
        self.pos = end;
        videos
            .into_iter()
            .map(|v| {
                let caps = &self.by_video[v];
                let c = caps[self.rng.random_range(0..caps.len())];
                (c, v)
            })
            .collect()
    }
}

/// Loss graph of one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub negnce: Option<NegNceOutput>,
    pub mining: Option<MiningReport>,
    /// Mean over the usable positive pairs.
    pub tpm: Option<Var>,
    pub tpm_components: [f64; 3],
    pub tpm_pairs: usize,
    pub tpm_skipped: usize,
    pub all_text_masked: usize,
    pub all_visual_masked: usize,
}

/// Builds `L_all` for a batch of `(caption, video)` pairs.
pub fn batch_loss(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &Config,
    corpus: &Corpus,
    w_ta: &[Tensor],
    batch: &[(usize, usize)],
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut texts: Vec<TextFeatures> = Vec::with_capacity(batch.len());
    let mut videos: Vec<VideoFeatures> = Vec::with_capacity(batch.len());
    let mut attention = Vec::with_capacity(batch.len());
    for &(c, v) in batch {
        texts.push(encoder::encode_text(
            g,
            &corpus.captions[c].embeddings,
            vars.encoder.text_proj,
            cfg.encoder.max_text_len,
        )?);
        videos.push(encoder::encode_video(g, &corpus.videos[v], &vars.encoder, &cfg.encoder)?);
        attention.push(w_ta[c].clone());
    }

    let mut terms = Vec::new();
    let (negnce, mining) = if cfg.train.negnce_on {
        let s = dmae::batch_similarity(
            g,
            &texts,
            &attention,
            &videos,
            vars.encoder.wti_gate,
            model::similarity_settings(cfg),
        )?;
        let set = negnce::marginal_similarity(g.value(s), cfg.negnce.xi)?;
        let out = negnce::negnce_loss(g, s, &set, &cfg.negnce, cfg.encoder.logit_scale)?;
        terms.push(out.loss);
        (Some(out), Some(MiningReport::new(batch.len(), &set)))
    } else {
        (None, None)
    };

    let mut tpm = None;
    let mut components = [0.0; 3];
    let (mut pairs, mut skipped, mut text_masked, mut visual_masked) = (0, 0, 0, 0);
    if cfg.train.tpmcl_on {
        let mut losses = Vec::with_capacity(batch.len());
        let mut sums = [0.0; 3];
        for (k, (text, video)) in texts.iter().zip(&videos).enumerate() {
            let w_text = tpmcl::text_token_weights(g, text.t_tokens, video.f_cls, &vars.text_weights)?;
            let w_vis = tpmcl::visual_token_weights(g, video.v_tokens, text.t_cls, &vars.visual_weights)?;
            let text_keep = tpmcl::adaptive_mask(g.value(w_text).data(), cfg.tpmcl.mask_ratio)?;
            let visual_keep = tpmcl::adaptive_mask(g.value(w_vis).data(), cfg.tpmcl.mask_ratio)?;
            let triplet = tpmcl::build_triplet(
                g,
                text,
                video,
                w_text,
                &text_keep,
                &visual_keep,
                cfg.encoder.temporal_source,
                &vars.encoder.temporal,
            )?;
            text_masked += triplet.all_text_masked as usize;
            visual_masked += triplet.all_visual_masked as usize;
            match tpmcl::tpm_loss(g, &triplet, text.t_cls, cfg.tpmcl.margin) {
                Ok(out) => {
                    for (s, v) in sums.iter_mut().zip([out.l1, out.l2, out.l3]) {
                        *s += g.value(v).item()?;
                    }
                    losses.push(out.loss);
                }
                Err(Error::ZeroNorm(what)) => {
                    debug!("batch pair {k}: zero-norm {what}, triplet skipped");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        pairs = losses.len();
        if pairs > 0 {
            let stacked = g.concat_rows(&losses)?;
            let mean = g.mean(stacked)?;
            for (c, s) in components.iter_mut().zip(sums) {
                *c = s / pairs as f64;
            }
            terms.push(mean);
            tpm = Some(mean);
        }
    }

    let total = match terms.as_slice() {
        [] => g.constant(Tensor::scalar(0.0)),
        [one] => *one,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!("at most two loss terms"),
    };
    Ok(BatchLoss {
        total,
        negnce,
        mining,
        tpm,
        tpm_components: components,
        tpm_pairs: pairs,
        tpm_skipped: skipped,
        all_text_masked: text_masked,
        all_visual_masked: visual_masked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l_all: f64,
    pub l_negnce: f64,
    pub lp_t2v: f64,
    pub lp_v2t: f64,
    pub ln_t2v: f64,
    pub ln_v2t: f64,
    pub l_tpm: f64,
    pub l_tpm_components: [f64; 3],
    #[serde(rename = "H")]
    pub h: usize,
    pub mean_sim_m: f64,
    pub clamp_count: usize,
    pub tpm_pairs: usize,
    pub tpm_skipped: usize,
    pub all_text_masked: usize,
    pub all_visual_masked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub wall_ms: f64,
}

fn report(g: &Graph, step: usize, lr: f64, batch_size: usize, loss: &BatchLoss) -> Result<StepReport> {
    let val = |v: Var| g.value(v).item();
    let opt = |v: Option<Var>| v.map_or(Ok(0.0), val);
    let n = loss.negnce.as_ref();
    Ok(StepReport {
        step,
        lr,
        batch_size,
        l_all: val(loss.total)?,
        l_negnce: opt(n.map(|n| n.loss))?,
        lp_t2v: opt(n.map(|n| n.lp_t2v))?,
        lp_v2t: opt(n.map(|n| n.lp_v2t))?,
        ln_t2v: opt(n.and_then(|n| n.ln_t2v))?,
        ln_v2t: opt(n.and_then(|n| n.ln_v2t))?,
        l_tpm: opt(loss.tpm)?,
        l_tpm_components: loss.tpm_components,
        h: loss.mining.as_ref().map_or(0, |m| m.h),
        mean_sim_m: loss.mining.as_ref().map_or(0.0, |m| m.mean_sim_m),
        clamp_count: n.map_or(0, |n| n.clamp_count),
        tpm_pairs: loss.tpm_pairs,
        tpm_skipped: loss.tpm_skipped,
        all_text_masked: loss.all_text_masked,
        all_visual_masked: loss.all_visual_masked,
    })
}

/// Optimizer state across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: Adam,
    pub step: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, cfg: &Config) -> Self {
        let shapes: Vec<[usize; 2]> = params.tensors().iter().map(|t| t.shape()).collect();
        let t = &cfg.train;
        Self {
            params,
            adam: Adam::new(&shapes, t.beta1, t.beta2, t.eps),
            step: 0,
        }
    }

    /// Forward, backward and one Adam update at the current cosine rate. A
    /// non-finite loss aborts the step and leaves the parameters untouched.
    pub fn train_step(&mut self, cfg: &Config, corpus: &Corpus, w_ta: &[Tensor], batch: &[(usize, usize)]) -> Result<StepReport> {
        let lr = cosine_lr(self.step, cfg.train.total_steps.max(self.step + 1), cfg.train.lr_heads)?;
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.params, true);
        let loss = batch_loss(&mut g, &vars, cfg, corpus, w_ta, batch)?;
        let rep = report(&g, self.step, lr, batch.len(), &loss)?;
        if !rep.l_all.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!(
                    "L_NegNCE={} (Lp t2v={}, v2t={}; Ln t2v={}, v2t={}), L_TPM={} {:?}",
                    rep.l_negnce, rep.lp_t2v, rep.lp_v2t, rep.ln_t2v, rep.ln_v2t, rep.l_tpm, rep.l_tpm_components
                ),
            });
        }
        let grads = g.backward(loss.total)?;
        let grads: Vec<Tensor> = vars.all().iter().map(|&v| grads.wrt(v)).collect();
        self.adam.step(&mut self.params.tensors_mut(), &grads, lr)?;
        self.step += 1;
        Ok(rep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub t2v: RetrievalReport,
    pub v2t: RetrievalReport,
}

impl EvalRecord {
    pub fn rsum(&self) -> f64 {
        self.t2v.rsum + self.v2t.rsum
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: ModelParams,
    pub reports: Vec<StepReport>,
    pub evals: Vec<EvalRecord>,
}

impl FitOutcome {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

pub fn evaluate(params: &ModelParams, corpus: &Corpus, cfg: &Config, step: usize) -> Result<EvalRecord> {
    let s = model::corpus_similarity(params, corpus, cfg)?;
    let dsl = cfg.eval.dsl.then_some(cfg.eval.dsl_scale);
    let [t2v, v2t] = evalkit::evaluate(&s, corpus, dsl)?;
    Ok(EvalRecord { step, t2v, v2t })
}

struct Outputs {
    reports: BufWriter<File>,
    timings: BufWriter<File>,
    metrics: BufWriter<File>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, value: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains from a fresh initialisation and evaluates on the training corpus.
/// With `out` set, writes the resolved config, per-step reports, wall-clock
/// timings, evaluation history and checkpoints there.
pub fn fit(corpus: &Corpus, cfg: &Config, out: Option<&Path>) -> Result<FitOutcome> {
    fit_from(ModelParams::init(corpus.d_raw, cfg), corpus, corpus, cfg, out)
}

/// Like [`fit`], starting from `params` and evaluating on `eval_corpus`.
pub fn fit_from(
    params: ModelParams,
    corpus: &Corpus,
    eval_corpus: &Corpus,
    cfg: &Config,
    out: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    corpus.validate()?;
    if eval_corpus.d_raw != corpus.d_raw {
        return Err(Error::Invalid(format!(
            "evaluation corpus has D_raw={} but the training corpus has {}",
            eval_corpus.d_raw, corpus.d_raw
        )));
    }
    if params.d_raw() != corpus.d_raw {
        return Err(Error::Invalid(format!(
            "parameters expect D_raw={} but the corpus has {}",
            params.d_raw(),
            corpus.d_raw
        )));
    }
    let w_ta = model::caption_attention(corpus, cfg)?;
    let mut sampler = BatchSampler::new(corpus, cfg.train.batch_size, cfg.train.seed)?;
    let mut trainer = Trainer::new(params, cfg);

    let mut files = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
            Some(Outputs {
                reports: create(&dir.join(REPORTS_FILE))?,
                timings: create(&dir.join(TIMINGS_FILE))?,
                metrics: create(&dir.join(METRICS_FILE))?,
            })
        }
        None => None,
    };

    let total = cfg.train.total_steps;
    let mut reports = Vec::with_capacity(total);
    let mut evals = Vec::new();
    for step in 0..total {
        let batch = sampler.next_batch();
        let started = Instant::now();
        let rep = trainer.train_step(cfg, corpus, &w_ta, &batch)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        debug!("step {step}: L_all={:.6} H={} lr={:.3e}", rep.l_all, rep.h, rep.lr);
        if rep.tpm_skipped > 0 {
            warn!("step {step}: {} triplet(s) skipped for zero-norm features", rep.tpm_skipped);
        }
        let done = step + 1;
        if let (Some(f), Some(dir)) = (files.as_mut(), out) {
            write_line(&mut f.reports, &rep, &dir.join(REPORTS_FILE))?;
            write_line(&mut f.timings, &StepTiming { step, wall_ms }, &dir.join(TIMINGS_FILE))?;
            let every = cfg.train.checkpoint_every;
            if every > 0 && done % every == 0 && done < total {
                trainer.params.save(&dir.join("checkpoints").join(format!("step_{done}")))?;
            }
        }
        reports.push(rep);

        let every = cfg.train.eval_every;
        if done == total || (every > 0 && done % every == 0) {
            let record = evaluate(&trainer.params, eval_corpus, cfg, done)?;
            info!(
                "step {done}: t2v R@1={:.2} rsum={:.2}, v2t R@1={:.2} rsum={:.2}",
                record.t2v.r1, record.t2v.rsum, record.v2t.r1, record.v2t.rsum
            );
            if let (Some(f), Some(dir)) = (files.as_mut(), out) {
                write_line(&mut f.metrics, &record, &dir.join(METRICS_FILE))?;
            }
            evals.push(record);
        }
    }

    if let (Some(mut f), Some(dir)) = (files, out) {
        for (w, name) in [
            (&mut f.reports, REPORTS_FILE),
            (&mut f.timings, TIMINGS_FILE),
            (&mut f.metrics, METRICS_FILE),
        ] {
            w.flush().map_err(|e| Error::io(dir.join(name), e))?;
        }
        trainer.params.save(&dir.join(CHECKPOINT_DIR))?;
    }
    Ok(FitOutcome {
        params: trainer.params,
        reports,
        evals,
    })
}
