//! Symmetric InfoNCE, marginal-similarity hard-negative mining and the
//! negative-aware InfoNCE loss.

use hnf_autodiff::{Graph, Tensor, Var};
use serde::Serialize;

use crate::config::NegNceConfig;
use crate::error::{Error, Result};

/// Floor applied to `1 − p` before the log.
pub const CLAMP_FLOOR: f64 = 1e-12;

fn check_square(s: &Tensor) -> Result<usize> {
    let [r, c] = s.shape();
    if r != c || r == 0 {
        return Err(Error::Invalid(format!("similarity matrix must be square and non-empty, got {r}×{c}")));
    }
    Ok(r)
}

fn check_finite(s: &Tensor) -> Result<()> {
    for i in 0..s.rows() {
        for (j, v) in s.row(i).iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteSimilarity { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// `(L_p^{t2v}, L_p^{v2t})`: mean negative log-probability of the diagonal under
/// the row softmax and the column softmax of `scale · S`.
pub fn infonce(g: &mut Graph, s: Var, logit_scale: f64) -> Result<(Var, Var)> {
    let b = check_square(g.value(s))?;
    check_finite(g.value(s))?;
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let z = g.scale(s, logit_scale);
    let mut directional = |axis: usize| -> Result<Var> {
        let ls = g.log_softmax(z, axis)?;
        let picked = g.pick(ls, &diag)?;
        let mean = g.mean(picked)?;
        Ok(g.neg(mean))
    };
    let t2v = directional(1)?;
    let v2t = directional(0)?;
    Ok((t2v, v2t))
}

/// Mined pairs `(i, j)`, `i ≠ j`, with their positive marginal scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardNegativeSet {
    /// Row-major order.
    pub pairs: Vec<(usize, usize)>,
    pub sim_m: Vec<f64>,
}

impl HardNegativeSet {
    pub fn h(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `sim_ij = max(0, S_ij − S_ii + ξ) + max(0, S_ji − S_ii + ξ)`; the pair is hard
/// when the score is positive. The diagonal is never included.
pub fn marginal_similarity(s: &Tensor, xi: f64) -> Result<HardNegativeSet> {
    let b = check_square(s)?;
    let mut pairs = Vec::new();
    let mut sim_m = Vec::new();
    for i in 0..b {
        let sii = s.get(i, i);
        for j in 0..b {
            if i == j {
                continue;
            }
            let m = (s.get(i, j) - sii + xi).max(0.0) + (s.get(j, i) - sii + xi).max(0.0);
            if m > 0.0 {
                pairs.push((i, j));
                sim_m.push(m);
            }
        }
    }
    Ok(HardNegativeSet { pairs, sim_m })
}

#[derive(Debug, Clone)]
pub struct NegNceOutput {
    pub loss: Var,
    pub lp_t2v: Var,
    pub lp_v2t: Var,
    /// Absent when there are no hard negatives.
    pub ln_t2v: Option<Var>,
    pub ln_v2t: Option<Var>,
    /// Entries whose `1 − p` hit [`CLAMP_FLOOR`].
    pub clamp_count: usize,
}

/// `L = ½(L^{t2v} + L^{v2t})` with `L^{dir} = γ1·L_p^{dir} + γ2·L_n^{dir}` and
/// `L_n^{dir} = −(1/H) Σ_N log(1 − p_ij^{dir})`.
///
/// With `γ2 = 0` or an empty set the hard-negative term is left out of the
/// expression entirely, so the loss is bitwise `½(γ1·L_p^{t2v} + γ1·L_p^{v2t})`.
pub fn negnce_loss(
    g: &mut Graph,
    s: Var,
    negatives: &HardNegativeSet,
    cfg: &NegNceConfig,
    logit_scale: f64,
) -> Result<NegNceOutput> {
    let (lp_t2v, lp_v2t) = infonce(g, s, logit_scale)?;
    let b = g.shape(s)[0];
    if let Some(&(i, j)) = negatives.pairs.iter().find(|&&(i, j)| i >= b || j >= b || i == j) {
        return Err(Error::Invalid(format!("hard negative ({i}, {j}) does not fit a {b}×{b} batch")));
    }

    let mut clamp_count = 0;
    let (ln_t2v, ln_v2t) = if negatives.is_empty() {
        (None, None)
    } else {
        let z = g.scale(s, logit_scale);
        let mut directional = |axis: usize| -> Result<Var> {
            let p = g.softmax(z, axis)?;
            let picked = g.pick(p, &negatives.pairs)?;
            let neg = g.neg(picked);
            let one_minus = g.add_scalar(neg, 1.0);
            clamp_count += g.value(one_minus).data().iter().filter(|&&v| v < CLAMP_FLOOR).count();
            let clamped = g.clamp_min(one_minus, CLAMP_FLOOR);
            let logs = g.log(clamped);
            let mean = g.mean(logs)?;
            Ok(g.neg(mean))
        };
        (Some(directional(1)?), Some(directional(0)?))
    };

    let mut combine = |lp: Var, ln: Option<Var>| -> Result<Var> {
        let weighted = g.scale(lp, cfg.gamma1);
        match ln {
            Some(ln) if cfg.gamma2 != 0.0 => {
                let extra = g.scale(ln, cfg.gamma2);
                Ok(g.add(weighted, extra)?)
            }
            _ => Ok(weighted),
        }
    };
    let l_t2v = combine(lp_t2v, ln_t2v)?;
    let l_v2t = combine(lp_v2t, ln_v2t)?;
    let sum = g.add(l_t2v, l_v2t)?;
    let loss = g.scale(sum, 0.5);
    Ok(NegNceOutput {
        loss,
        lp_t2v,
        lp_v2t,
        ln_t2v,
        ln_v2t,
        clamp_count,
    })
}

/// Summary of one mining pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiningReport {
    pub batch_size: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub mean_sim_m: f64,
    pub max_sim_m: f64,
}

impl MiningReport {
    pub fn new(batch_size: usize, set: &HardNegativeSet) -> Self {
        let h = set.h();
        let (mean, max) = if h == 0 {
            (0.0, 0.0)
        } else {
            (
                set.sim_m.iter().sum::<f64>() / h as f64,
                set.sim_m.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        Self {
            batch_size,
            h,
            mean_sim_m: mean,
            max_sim_m: max,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn infonce_examples() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::scalar(0.3));
        let (a, b) = infonce(&mut g, s, 100.0).unwrap();
        assert_eq!(value(&g, a), 0.0);
        assert_eq!(value(&g, b), 0.0);

        let s = g.constant(Tensor::eye(2));
        let (a, b) = infonce(&mut g, s, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((value(&g, a) - expected).abs() < 1e-15);
        assert!((value(&g, b) - 0.3133).abs() < 1e-4);

        let s = g.constant(Tensor::full(5, 5, 0.42));
        let (a, b) = infonce(&mut g, s, 100.0).unwrap();
        assert!((value(&g, a) - 5f64.ln()).abs() < 1e-12);
        assert!((value(&g, b) - 5f64.ln()).abs() < 1e-12);

        let s = g.constant(Tensor::from_rows(&[[1.0, f64::NAN], [0.0, 1.0]]).unwrap());
        assert!(matches!(
            infonce(&mut g, s, 1.0),
            Err(Error::NonFiniteSimilarity { row: 0, col: 1 })
        ));
    }

    #[test]
    fn marginal_similarity_examples() {
        let s = Tensor::from_rows(&[[0.5, 0.8], [0.3, 0.9]]).unwrap();
        let set = marginal_similarity(&s, 0.0).unwrap();
        assert_eq!(set.pairs, vec![(0, 1)]);
        assert!((set.sim_m[0] - 0.3).abs() < 1e-15);

        let s = Tensor::from_rows(&[[0.9, 0.1, 0.2], [0.3, 0.8, 0.1], [0.0, 0.4, 0.7]]).unwrap();
        assert!(marginal_similarity(&s, 0.0).unwrap().is_empty());

        let s = Tensor::full(2, 2, 0.5);
        let set = marginal_similarity(&s, 0.1).unwrap();
        assert!(set.pairs.iter().all(|&(i, j)| i != j));
    }

    #[test]
    fn gamma2_zero_and_empty_set_reduce_to_infonce() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[[0.2, 0.7], [0.1, 0.4]]).unwrap());
        let set = marginal_similarity(g.value(s), 0.0).unwrap();
        assert!(!set.is_empty());
        let cfg = NegNceConfig {
            gamma2: 0.0,
            ..Default::default()
        };
        let out = negnce_loss(&mut g, s, &set, &cfg, 10.0).unwrap();
        let expected = 0.5 * (value(&g, out.lp_t2v) + value(&g, out.lp_v2t));
        assert_eq!(value(&g, out.loss).to_bits(), expected.to_bits());

        let cfg = NegNceConfig {
            gamma1: 2.0,
            ..Default::default()
        };
        let empty = HardNegativeSet {
            pairs: vec![],
            sim_m: vec![],
        };
        let out = negnce_loss(&mut g, s, &empty, &cfg, 10.0).unwrap();
        let expected = 0.5 * (2.0 * value(&g, out.lp_t2v) + 2.0 * value(&g, out.lp_v2t));
        assert!((value(&g, out.loss) - expected).abs() < 1e-15);
        assert!(out.ln_t2v.is_none());
    }

    #[test]
    fn two_by_two_brute_force() {
        let s = [[0.31, 0.74], [0.52, 0.18]];
        let (tau, g1, g2) = (7.0, 1.0, 0.5);
        let e = |x: f64| (tau * x).exp();
        let row = |i: usize, j: usize| e(s[i][j]) / (e(s[i][0]) + e(s[i][1]));
        let col = |i: usize, j: usize| e(s[i][j]) / (e(s[0][j]) + e(s[1][j]));
        let lp_t = -(row(0, 0).ln() + row(1, 1).ln()) / 2.0;
        let lp_v = -(col(0, 0).ln() + col(1, 1).ln()) / 2.0;
        // marginal scores over all four ordered pairs
        let mut hard = vec![];
        for i in 0..2 {
            for j in 0..2 {
                let m = (s[i][j] - s[i][i]).max(0.0) + (s[j][i] - s[i][i]).max(0.0);
                if i != j && m > 0.0 {
                    hard.push((i, j));
                }
            }
        }
        assert_eq!(hard, vec![(0, 1), (1, 0)]);
        let ln_t = -hard.iter().map(|&(i, j)| (1.0 - row(i, j)).ln()).sum::<f64>() / hard.len() as f64;
        let ln_v = -hard.iter().map(|&(i, j)| (1.0 - col(i, j)).ln()).sum::<f64>() / hard.len() as f64;
        let expected = 0.5 * ((g1 * lp_t + g2 * ln_t) + (g1 * lp_v + g2 * ln_v));

        let mut g = Graph::new();
        let sv = g.constant(Tensor::from_rows(&s).unwrap());
        let set = marginal_similarity(g.value(sv), 0.0).unwrap();
        assert_eq!(set.pairs, hard);
        let cfg = NegNceConfig {
            gamma1: g1,
            gamma2: g2,
            xi: 0.0,
        };
        let out = negnce_loss(&mut g, sv, &set, &cfg, tau).unwrap();
        assert!((value(&g, out.loss) - expected).abs() < 1e-12);
        assert_eq!(out.clamp_count, 0);
    }

    #[test]
    fn saturated_probability_is_clamped_and_counted() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        let set = marginal_similarity(g.value(s), 0.0).unwrap();
        let out = negnce_loss(&mut g, s, &set, &NegNceConfig::default(), 1000.0).unwrap();
        assert!(out.clamp_count > 0);
        assert!(value(&g, out.loss).is_finite());
    }
}
