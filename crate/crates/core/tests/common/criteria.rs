//! One check per acceptance criterion. Each returns a one-line summary on
//! success and the first discrepancy on failure.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hnf_autodiff::{Graph, Tensor};
use hnf_core::config::{NegNceConfig, TemporalSource};
use hnf_core::corpus::synthetic::{generate_synthetic, SyntheticSpec};
use hnf_core::dmae;
use hnf_core::evalkit::{self, Direction, RetrievalReport};
use hnf_core::negnce;
use hnf_core::tpmcl;
use hnf_core::{trainer, Config};
use rand::Rng;

use super::*;

pub type Check = Result<String, String>;

fn within(elapsed: Duration, budget: Duration, what: &str) -> Result<(), String> {
    if elapsed > budget {
        return Err(format!("{what} took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()));
    }
    Ok(())
}

pub fn gradient_suite() -> Check {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for (name, f) in FAMILIES {
        let (err, largest) = run_family(f).map_err(|e| format!("{name}: {e}"))?;
        if err >= GRAD_TOL {
            return Err(format!("{name}: max relative error {err:e}"));
        }
        if largest <= 1e-3 {
            return Err(format!("{name}: gradients vanish"));
        }
        worst = worst.max(err);
    }
    within(started.elapsed(), Duration::from_secs(120), "gradient suite")?;
    Ok(format!(
        "{} families x {GRAD_INSTANCES} instances, worst rel err {worst:.2e}, {:.1}s",
        FAMILIES.len(),
        started.elapsed().as_secs_f64()
    ))
}

pub fn degeneration_identity() -> Check {
    let mut r = rng(2);
    let mut with_negatives = 0;
    for case in 0..100 {
        let b = r.random_range(1..=64);
        let s = Tensor::from_fn(b, b, |_, _| r.random_range(-1.0..1.0));
        let xi = r.random_range(0.0..0.3);
        let scale = [1.0, 10.0, 100.0][case % 3];
        let set = negnce::marginal_similarity(&s, xi).map_err(|e| e.to_string())?;
        with_negatives += !set.is_empty() as usize;
        let cfg = NegNceConfig {
            gamma1: 1.0,
            gamma2: 0.0,
            xi,
        };
        let mut g = Graph::new();
        let sv = g.leaf(s.clone());
        let out = negnce::negnce_loss(&mut g, sv, &set, &cfg, scale).map_err(|e| e.to_string())?;
        let loss = g.value(out.loss).item().unwrap();
        let t2v = g.value(out.lp_t2v).item().unwrap();
        let v2t = g.value(out.lp_v2t).item().unwrap();
        let expected = 0.5 * (t2v + v2t);
        if loss.to_bits() != expected.to_bits() {
            return Err(format!("case {case}: {loss:e} vs {expected:e}"));
        }
        let (ot, ov) = infonce_oracle(&s, scale);
        if (ot - t2v).abs() > 1e-9 * ot.abs().max(1.0) || (ov - v2t).abs() > 1e-9 * ov.abs().max(1.0) {
            return Err(format!("case {case}: InfoNCE ({t2v}, {v2t}) vs oracle ({ot}, {ov})"));
        }
    }
    Ok(format!("100 matrices bitwise equal ({with_negatives} with mined negatives)"))
}

pub fn mining_oracle() -> Check {
    let mut r = rng(3);
    let mut total = 0;
    for case in 0..100 {
        let b = r.random_range(1..=40);
        // a coarse grid so that boundary ties occur
        let s = Tensor::from_fn(b, b, |_, _| r.random_range(-20..=20) as f64 / 20.0);
        let xi = [0.0, 0.1, r.random_range(0.0..0.5)][case % 3];
        let got = as_set(&negnce::marginal_similarity(&s, xi).map_err(|e| e.to_string())?);
        let want = brute_force_mining(&s, xi);
        if got != want {
            return Err(format!("case {case}: {} mined vs {} brute force", got.len(), want.len()));
        }
        total += want.len();
    }
    Ok(format!("100 matrices, {total} hard negatives, exact"))
}

pub fn masking_oracle() -> Check {
    let mut r = rng(4);
    let ratios: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    for case in 0..1000 {
        let len = r.random_range(1..=32);
        let w = if case % 2 == 0 {
            random_weights(&mut r, len)
        } else {
            let raw: Vec<f64> = (0..len).map(|_| r.random_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|x| x / total).collect()
        };
        let tau = r.random_range(0.0..=1.0);
        let got = tpmcl::adaptive_mask(&w, tau).map_err(|e| e.to_string())?;
        if got != brute_force_mask(&w, tau) {
            return Err(format!("case {case}: mask differs at tau={tau}"));
        }
        let mut last = 0;
        for &t in &ratios {
            let masked = tpmcl::adaptive_mask(&w, t).unwrap().iter().filter(|&&k| !k).count();
            if masked < last {
                return Err(format!("case {case}: masked count drops at tau={t}"));
            }
            last = masked;
        }
    }
    Ok("1000 weight vectors exact, masked count monotone in tau".into())
}

pub fn metrics_oracle() -> Check {
    let mut r = rng(5);
    for case in 0..100 {
        let (q, gal) = (r.random_range(1..=200), r.random_range(1..=200));
        let levels = [4, 50, 1_000_000][case % 3];
        let s = Tensor::from_fn(q, gal, |_, _| r.random_range(0..levels) as f64 / levels as f64);
        let gt: Vec<usize> = (0..q).map(|_| r.random_range(0..gal)).collect();
        let got = evalkit::rank_metrics(&s, &gt, Direction::T2v).map_err(|e| e.to_string())?;
        let want = brute_force_report(&s, &gt, Direction::T2v);
        if got != want {
            return Err(format!("case {case}: {got:?} vs {want:?}"));
        }
    }
    let baseline = RetrievalReport {
        direction: Direction::T2v,
        r1: 45.3,
        r5: 74.2,
        r10: 83.5,
        mdr: 2.0,
        meanr: 13.0,
        rsum: 45.3 + 74.2 + 83.5,
    };
    if (baseline.rsum - 203.0).abs() > 1e-9 {
        return Err(format!("baseline rsum {}", baseline.rsum));
    }
    Ok("100 matrices exact; 45.3+74.2+83.5 = 203.0".into())
}

pub fn perfect_retrieval() -> Check {
    let started = Instant::now();
    let corpus = generate_synthetic(&SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let cfg = Config::default();
    let out = trainer::fit(&corpus, &cfg, None).map_err(|e| e.to_string())?;
    let e = out.final_eval().ok_or("no evaluation")?;
    within(started.elapsed(), Duration::from_secs(180), "training")?;
    if e.t2v.r1 != 100.0 || e.v2t.r1 != 100.0 {
        return Err(format!("R@1 t2v {} v2t {}", e.t2v.r1, e.v2t.r1));
    }
    Ok(format!(
        "64 pairs, {} steps: R@1 100/100, {:.1}s",
        cfg.train.total_steps,
        started.elapsed().as_secs_f64()
    ))
}

pub const ABLATION_SEEDS: u64 = 5;

/// Synthetic corpus of the ablations: noise tuned so that the no-penalty
/// baseline lands mid-range, a third of the pairs with a planted hard
/// negative, and only the frame-CLS slot of each frame carrying content.
pub fn ablation_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        noise_sigma: 0.3,
        hard_negative_overlap: 0.3,
        background_patches: 3,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn ablation_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.train.lr_heads = 3e-4;
    cfg.train.seed = seed;
    cfg
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Arm {
    pub rsum: f64,
    /// Mean of t2v and v2t R@1.
    pub r1: f64,
}

#[derive(Debug, Clone)]
pub struct Ablations {
    /// Defaults: penalty on, triplet loss on.
    pub full: Vec<Arm>,
    pub no_penalty: Vec<Arm>,
    pub no_triplet: Vec<Arm>,
    pub elapsed: Duration,
}

fn arm(seed: u64, edit: fn(&mut Config)) -> Result<Arm, String> {
    let corpus = generate_synthetic(&ablation_spec(seed)).map_err(|e| e.to_string())?;
    let mut cfg = ablation_config(seed);
    edit(&mut cfg);
    let out = trainer::fit(&corpus, &cfg, None).map_err(|e| e.to_string())?;
    let e = out.final_eval().ok_or("no evaluation")?;
    Ok(Arm {
        rsum: e.rsum(),
        r1: (e.t2v.r1 + e.v2t.r1) / 2.0,
    })
}

/// Both ablations share the full arm, so the fifteen runs happen once.
pub fn ablations() -> Result<&'static Ablations, String> {
    static CELL: OnceLock<Result<Ablations, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let edits: [fn(&mut Config); 3] = [|_| {}, |c| c.negnce.gamma2 = 0.0, |c| c.train.tpmcl_on = false];
        let runs: Vec<Result<[Arm; 3], String>> = std::thread::scope(|sc| {
            let handles: Vec<_> = (0..ABLATION_SEEDS)
                .map(|seed| {
                    sc.spawn(move || -> Result<[Arm; 3], String> {
                        Ok([arm(seed, edits[0])?, arm(seed, edits[1])?, arm(seed, edits[2])?])
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation thread")).collect()
        });
        let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(Ablations {
            full: runs.iter().map(|r| r[0]).collect(),
            no_penalty: runs.iter().map(|r| r[1]).collect(),
            no_triplet: runs.iter().map(|r| r[2]).collect(),
            elapsed: started.elapsed(),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn mean(arms: &[Arm], f: impl Fn(&Arm) -> f64) -> f64 {
    arms.iter().map(f).sum::<f64>() / arms.len() as f64
}

pub fn negnce_ablation() -> Check {
    let a = ablations()?;
    within(a.elapsed, Duration::from_secs(600), "ablation runs")?;
    let base_r1 = mean(&a.no_penalty, |x| x.r1);
    if !(40.0..=80.0).contains(&base_r1) {
        return Err(format!("baseline R@1 {base_r1:.1} outside [40, 80]"));
    }
    let (off, on) = (mean(&a.no_penalty, |x| x.rsum), mean(&a.full, |x| x.rsum));
    let line = format!("rsum gamma2=0 {off:.2} (R@1 {base_r1:.1}) vs gamma2=0.5 {on:.2}");
    if on >= off {
        Ok(line)
    } else {
        Err(line)
    }
}

pub fn tpm_ablation() -> Check {
    let a = ablations()?;
    within(a.elapsed, Duration::from_secs(600), "ablation runs")?;
    let (off, on) = (mean(&a.no_triplet, |x| x.rsum), mean(&a.full, |x| x.rsum));
    let line = format!("rsum triplet off {off:.2} vs on {on:.2}");
    if on >= off {
        Ok(line)
    } else {
        Err(line)
    }
}

pub fn attention_invariants() -> Check {
    let mut r = rng(9);
    for case in 0..1000 {
        let m = r.random_range(1..=24);
        let eta = r.random_range(1.0..4.0);
        let w_pos: Vec<f64> = (0..m).map(|_| if r.random_bool(0.5) { eta } else { 1.0 }).collect();
        let w_freq: Vec<f64> = (0..m).map(|_| if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..3.0) }).collect();
        let valid = random_keep(&mut r, m);
        let w_ta = dmae::textual_attention(&w_pos, &w_freq, &valid).map_err(|e| e.to_string())?;
        if (w_ta.sum() - 1.0).abs() > 1e-12 {
            return Err(format!("case {case}: W_TA sums to {}", w_ta.sum()));
        }

        let (n, d, k) = (r.random_range(1..=12), r.random_range(2..=8), r.random_range(1..=8));
        let mut g = Graph::new();
        let v = g.leaf(normal(&mut r, n, d, 1.0));
        let w = dmae::visual_attention(&mut g, v, k).map_err(|e| e.to_string())?;
        let w = g.value(w);
        for col in 0..n {
            let nonzero = (0..n).filter(|&row| w.get(row, col) != 0.0).count();
            if nonzero != k.min(n) || w.get(col, col) == 0.0 {
                return Err(format!("case {case}: column {col} has {nonzero} entries, top_k {k}, N {n}"));
            }
        }
    }
    Ok("1000 feature sets".into())
}

pub fn triplet_identity() -> Check {
    let mut r = rng(10);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let (m, d) = (r.random_range(1..=16), r.random_range(2..=8));
        let (frames, slots) = (r.random_range(1..=4), r.random_range(1..=3));
        let tokens = normal(&mut r, m, d, 1.0);
        let logits = normal(&mut r, m, 1, 1.0);
        let text_keep: Vec<bool> = (0..m).map(|_| r.random_bool(0.5)).collect();
        let all_ones = case % 10 == 0;
        let text_keep = if all_ones { vec![true; m] } else { text_keep };
        let visual_keep = if all_ones { vec![true; frames * slots] } else { random_keep(&mut r, frames * slots) };
        let source = if case % 2 == 0 { TemporalSource::PatchMean } else { TemporalSource::FCls };
        let margin = r.random_range(0.0..1.0);

        let mut g = Graph::new();
        let t = g.leaf(tokens.clone());
        let text = text_features(&mut g, t).map_err(|e| e.to_string())?;
        let tv: Vec<_> = temporal_tensors(&mut r, d, frames).into_iter().map(|x| g.leaf(x)).collect();
        let temporal = temporal_vars(&tv);
        let vt = g.leaf(normal(&mut r, frames * slots, d, 1.0));
        let video = video_features(&mut g, vt, frames, slots, source, &temporal).map_err(|e| e.to_string())?;
        let lv = g.leaf(logits);
        let sm = g.softmax(lv, 0).unwrap();
        let w_text = g.transpose(sm);
        let tri = tpmcl::build_triplet(&mut g, &text, &video, w_text, &text_keep, &visual_keep, source, &temporal)
            .map_err(|e| e.to_string())?;

        let w = g.value(w_text).clone();
        let diff = g.value(tri.t_g).zip_map(g.value(tri.t_g_masked), "sub", |a, b| a - b).unwrap();
        for c in 0..d {
            let want: f64 = (0..m).filter(|&i| !text_keep[i]).map(|i| w.get(0, i) * tokens.get(i, c)).sum();
            worst = worst.max((diff.get(0, c) - want).abs());
        }
        if worst > 1e-12 {
            return Err(format!("case {case}: t_g - t_g^p off by {worst:e}"));
        }
        if all_ones {
            let out = tpmcl::tpm_loss(&mut g, &tri, text.t_cls, margin).map_err(|e| e.to_string())?;
            if out.arguments != [margin; 3] {
                return Err(format!("case {case}: arguments {:?} with margin {margin}", out.arguments));
            }
        }
    }
    Ok(format!("1000 instances, max deviation {worst:.1e}; all-ones masks give exactly delta"))
}

pub const CRITERIA: [(&str, fn() -> Check); 10] = [
    ("gradient suite", gradient_suite),
    ("degeneration identity", degeneration_identity),
    ("mining oracle", mining_oracle),
    ("masking oracle", masking_oracle),
    ("metrics oracle", metrics_oracle),
    ("perfect retrieval", perfect_retrieval),
    ("directional penalty ablation", negnce_ablation),
    ("directional triplet ablation", tpm_ablation),
    ("attention invariants", attention_invariants),
    ("triplet linear identity", triplet_identity),
];
