//! Order, proxy-matching, regression and identity objectives.
//!
//! Every loss is recorded on a [`Tape`] and returns a scalar node, so
//! gradients reach features, proxies and (through the encoder) parameters.
//! Pairwise terms are evaluated in batch form: all ordered pairs of one
//! relation are stacked into `[P, d]` matrices and per-anchor sums use
//! `segment_sum`, which reduces in ascending pair order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::proxy::{reference_pairs, BoundBank, LabelPair, ReferencePairs, Relation};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Temperature dividing every similarity inside an exponential.
    pub tau: f64,
    /// Weight of the metric term in the combined loss.
    pub lambda_metric: f64,
    /// Growth rate of the reversal schedule.
    pub gamma: f64,
    /// Weight negatives by normalized age distance.
    pub soft_weights: bool,
    /// Use `log(term)` in the metric loss instead of the raw ratio.
    pub log_ratio: bool,
    /// Add the numerator's own exponential to the order-loss denominator.
    pub include_positive_in_denominator: bool,
    /// Keep the anchor itself in the identity loss (both its positive set
    /// and its softmax denominator).
    pub identity_include_self: bool,
    /// Include the order term in [`contrast_loss`]; off leaves the metric
    /// term alone.
    pub use_order: bool,
    /// Regressive backward reference `v(c_{y_j}, c_{y_i})` exactly as
    /// written. Off uses `v(c_{y_i}, c_{y_j})`, whose sign agrees with the
    /// progressive forward reference of the same pair.
    pub literal_regressive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda_metric: 0.8,
            gamma: 10.0,
            soft_weights: true,
            log_ratio: false,
            include_positive_in_denominator: false,
            identity_include_self: false,
            use_order: true,
            literal_regressive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("loss.tau", "must be > 0"));
        }
        if !(self.lambda_metric >= 0.0 && self.lambda_metric.is_finite()) {
            return Err(Error::config("loss.lambda_metric", "must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("loss.gamma", "must be > 0"));
        }
        Ok(())
    }
}

fn check_batch(tape: &Tape, z: Var, labels: usize, min: usize) -> Result<(usize, usize)> {
    let shape = tape.shape(z);
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "feature batch",
            lhs: shape.to_vec(),
            rhs: vec![labels],
        });
    }
    if shape[0] != labels {
        return Err(Error::LengthMismatch {
            what: "features vs labels",
            left: shape[0],
            right: labels,
        });
    }
    if labels < min {
        return Err(Error::InsufficientData(format!(
            "batch of {labels} samples, need at least {min}"
        )));
    }
    Ok((shape[0], shape[1]))
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// `(z_i - z_j) / ‖z_i - z_j‖`
pub fn direction_vector(tape: &mut Tape, z_i: Var, z_j: Var) -> Result<Var> {
    let d = tape.sub(z_i, z_j)?;
    tape.l2_normalize(d)
}

/// Ordered pairs of one relation, grouped by anchor in ascending order.
struct PairSet {
    first: Vec<usize>,
    second: Vec<usize>,
    /// Compact anchor index per pair.
    segment: Vec<usize>,
    /// `1 / #partners` of each pair's anchor.
    weight: Vec<f64>,
    anchors: usize,
}

fn collect_pairs(labels: &[i64], keep: impl Fn(i64, i64) -> bool) -> PairSet {
    let mut set = PairSet {
        first: Vec::new(),
        second: Vec::new(),
        segment: Vec::new(),
        weight: Vec::new(),
        anchors: 0,
    };
    for (i, &yi) in labels.iter().enumerate() {
        let start = set.first.len();
        for (j, &yj) in labels.iter().enumerate() {
            if i != j && keep(yi, yj) {
                set.first.push(i);
                set.second.push(j);
                set.segment.push(set.anchors);
            }
        }
        let count = set.first.len() - start;
        if count > 0 {
            set.weight
                .extend(std::iter::repeat(1.0 / count as f64).take(count));
            set.anchors += 1;
        }
    }
    set
}

/// `-Σ_p w_p · log(exp(num_p) / den_p)` with per-anchor denominators.
fn anchored_softmax_loss(
    tape: &mut Tape,
    pairs: &PairSet,
    num: Var,
    den_terms: Var,
    include_positive: bool,
) -> Result<Var> {
    let e_den = tape.exp(den_terms);
    let per_anchor = tape.segment_sum(e_den, &pairs.segment, pairs.anchors)?;
    let mut den = tape.gather(per_anchor, &pairs.segment)?;
    if include_positive {
        let e_num = tape.exp(num);
        den = tape.add(den, e_num)?;
    }
    let log_den = tape.log(den)?;
    let log_q = tape.sub(num, log_den)?;
    let w = tape.constant(Tensor::vector(pairs.weight.clone()));
    let weighted = tape.mul(log_q, w)?;
    let s = tape.sum(weighted);
    Ok(tape.neg(s))
}

/// Reference label pairs used by the order loss for one ordered pair.
pub fn order_references(y_i: i64, y_j: i64, rel: Relation, cfg: &LossConfig) -> Result<ReferencePairs> {
    let mut r = reference_pairs(y_i, y_j, rel)?;
    if rel == Relation::Regressive && !cfg.literal_regressive {
        r.backward = (y_i, y_j);
    }
    Ok(r)
}

fn order_term(
    tape: &mut Tape,
    z: Var,
    labels: &[i64],
    bank: &BoundBank,
    cfg: &LossConfig,
    rel: Relation,
) -> Result<Var> {
    check_batch(tape, z, labels.len(), 2)?;
    let pairs = collect_pairs(labels, |a, b| Relation::of(a, b) == rel);
    if pairs.first.is_empty() {
        return Ok(zero(tape));
    }

    let zi = tape.gather(z, &pairs.first)?;
    let zj = tape.gather(z, &pairs.second)?;
    let vd = direction_vector(tape, zi, zj)?;

    // reference directions depend on labels only; evaluate each distinct one once
    let mut unique: Vec<LabelPair> = Vec::new();
    let mut slot: HashMap<LabelPair, usize> = HashMap::new();
    let mut intern = |p: LabelPair| {
        *slot.entry(p).or_insert_with(|| {
            unique.push(p);
            unique.len() - 1
        })
    };
    let mut f_idx = Vec::with_capacity(pairs.first.len());
    let mut b_idx = Vec::with_capacity(pairs.first.len());
    for (&i, &j) in pairs.first.iter().zip(&pairs.second) {
        let r = order_references(labels[i], labels[j], rel, cfg)?;
        f_idx.push(intern(r.forward));
        b_idx.push(intern(r.backward));
    }
    let dirs = bank.directions(tape, &unique)?;
    let vf = tape.gather(dirs, &f_idx)?;
    let vb = tape.gather(dirs, &b_idx)?;

    let inv_tau = 1.0 / cfg.tau;
    let sf = tape.row_dot(vf, vd)?;
    let sf = tape.scale(sf, inv_tau);
    let sb = tape.row_dot(vb, vd)?;
    let sb = tape.scale(sb, inv_tau);

    let (num, den) = match rel {
        Relation::Progressive => (sf, sb),
        _ => (sb, sf),
    };
    anchored_softmax_loss(tape, &pairs, num, den, cfg.include_positive_in_denominator)
}

/// Progressive-relation order loss over all pairs with `y_i < y_j`.
pub fn progressive_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[i64],
    bank: &BoundBank,
    cfg: &LossConfig,
) -> Result<Var> {
    order_term(tape, z, labels, bank, cfg, Relation::Progressive)
}

/// Regressive-relation order loss over all pairs with `y_i > y_j`.
pub fn regressive_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[i64],
    bank: &BoundBank,
    cfg: &LossConfig,
) -> Result<Var> {
    order_term(tape, z, labels, bank, cfg, Relation::Regressive)
}

pub fn order_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[i64],
    bank: &BoundBank,
    cfg: &LossConfig,
) -> Result<Var> {
    let p = progressive_loss(tape, z, labels, bank, cfg)?;
    let r = regressive_loss(tape, z, labels, bank, cfg)?;
    tape.add(p, r)
}

/// Logistic weight of a negative proxy `z` for a sample labelled `y`:
/// `1 / (1 + exp(-|y - z| / max_{z' in negatives} |y - z'|))`.
pub fn soft_weight(y: i64, z: i64, negatives: &[i64]) -> Result<f64> {
    let max = negatives
        .iter()
        .map(|&c| (y - c).abs())
        .max()
        .ok_or(Error::EmptyLabels)?;
    if max == 0 {
        return Err(Error::InsufficientData(
            "soft weight needs a negative label different from the sample label".into(),
        ));
    }
    let ratio = (y - z).abs() as f64 / max as f64;
    Ok(1.0 / (1.0 + (-ratio).exp()))
}

/// Per-sample proxy-matching pieces: the scaled own-proxy similarity and the
/// weighted negative denominator, both `[N]`.
fn proxy_match_parts(
    tape: &mut Tape,
    z: Var,
    labels: &[i64],
    bank: &BoundBank,
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let (n, _) = check_batch(tape, z, labels.len(), 1)?;
    let (lo, hi) = bank.label_range();
    let assignable: Vec<i64> = (lo..=hi).collect();
    let l = assignable.len();
    let rows: Vec<usize> = assignable
        .iter()
        .map(|&a| bank.row(a))
        .collect::<Result<_>>()?;

    let zn = tape.l2_normalize(z)?;
    let c = tape.gather(bank.var, &rows)?;
    let cn = tape.l2_normalize(c)?;
    let cnt = tape.transpose(cn)?;
    let sims = tape.matmul(zn, cnt)?;
    let sims = tape.scale(sims, 1.0 / cfg.tau);

    let mut own = Vec::with_capacity(n);
    let mut weights = vec![0.0; n * l];
    for (i, &y) in labels.iter().enumerate() {
        let col = bank.assign(y)? - 1;
        own.push(i * l + col);
        let negatives: Vec<i64> = assignable.iter().copied().filter(|&a| a != y).collect();
        for (k, &a) in assignable.iter().enumerate() {
            if a == y {
                continue;
            }
            weights[i * l + k] = if cfg.soft_weights {
                soft_weight(y, a, &negatives)?
            } else {
                1.0
            };
        }
    }
    let flat = tape.reshape(sims, vec![n * l])?;
    let s_own = tape.gather(flat, &own)?;
    let e = tape.exp(sims);
    let w = tape.constant(Tensor::matrix(n, l, weights)?);
    let we = tape.mul(e, w)?;
    let den = tape.sum_rows(we)?;
    Ok((s_own, den))
}

/// Proxy-matching ratio `exp(sim(z, c_y)/τ) / Σ_{z'≠y} w · exp(sim(z, c_z')/τ)`
/// for a single `[d]` feature.
pub fn proxy_match_term(
    tape: &mut Tape,
    z: Var,
    y: i64,
    bank: &BoundBank,
    cfg: &LossConfig,
) -> Result<Var> {
    let d = tape.shape(z).to_vec();
    if d.len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "proxy_match_term",
            lhs: d,
            rhs: vec![],
        });
    }
    let row = tape.reshape(z, vec![1, d[0]])?;
    let (s_own, den) = proxy_match_parts(tape, row, &[y], bank, cfg)?;
    let num = tape.exp(s_own);
    let ratio = tape.div(num, den)?;
    Ok(tape.sum(ratio))
}

/// Negative mean of the proxy-matching terms (or of their logarithms when
/// `cfg.log_ratio` is set).
pub fn metric_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[i64],
    bank: &BoundBank,
    cfg: &LossConfig,
) -> Result<Var> {
    let (s_own, den) = proxy_match_parts(tape, z, labels, bank, cfg)?;
    let terms = if cfg.log_ratio {
        let log_den = tape.log(den)?;
        tape.sub(s_own, log_den)?
    } else {
        let num = tape.exp(s_own);
        tape.div(num, den)?
    };
    let m = tape.mean(terms)?;
    Ok(tape.neg(m))
}

/// Recorded pieces of [`contrast_loss`].
#[derive(Clone, Copy, Debug)]
pub struct ContrastParts {
    pub order: Option<Var>,
    pub metric: Option<Var>,
    pub total: Var,
}

/// `order_loss + lambda_metric * metric_loss`; the metric term is skipped
/// entirely when its weight is zero.
pub fn contrast_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[i64],
    bank: &BoundBank,
    cfg: &LossConfig,
) -> Result<Var> {
    Ok(contrast_parts(tape, z, labels, bank, cfg)?.total)
}

pub fn contrast_parts(
    tape: &mut Tape,
    z: Var,
    labels: &[i64],
    bank: &BoundBank,
    cfg: &LossConfig,
) -> Result<ContrastParts> {
    let order = if cfg.use_order {
        Some(order_loss(tape, z, labels, bank, cfg)?)
    } else {
        check_batch(tape, z, labels.len(), 2)?;
        None
    };
    let metric = if cfg.lambda_metric != 0.0 {
        Some(metric_loss(tape, z, labels, bank, cfg)?)
    } else {
        None
    };
    let total = match (order, metric) {
        (Some(o), None) => o,
        (o, Some(m)) => {
            let weighted = tape.scale(m, cfg.lambda_metric);
            match o {
                Some(o) => tape.add(o, weighted)?,
                None => weighted,
            }
        }
        (None, None) => zero(tape),
    };
    Ok(ContrastParts {
        order,
        metric,
        total,
    })
}

/// Mean softmax cross-entropy of `[N, K]` logits against class indices.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad as i64,
            lo: 0,
            hi: k as i64 - 1,
        });
    }
    // subtracting each row's max is exact for the gradient and keeps exp finite
    let lv = tape.value(logits);
    let mut shift = Vec::with_capacity(n * k);
    for i in 0..n {
        let m = lv.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat(m).take(k));
    }
    let shift = tape.constant(Tensor::matrix(n, k, shift)?);
    let shifted = tape.sub(logits, shift)?;
    let e = tape.exp(shifted);
    let den = tape.sum_rows(e)?;
    let log_den = tape.log(den)?;
    let flat = tape.reshape(shifted, vec![n * k])?;
    let picks: Vec<usize> = targets.iter().enumerate().map(|(i, &c)| i * k + c).collect();
    let own = tape.gather(flat, &picks)?;
    let nll = tape.sub(log_den, own)?;
    tape.mean(nll)
}

/// Mean absolute error between a `[N]` prediction node and fixed targets.
pub fn age_l1_loss(tape: &mut Tape, preds: Var, labels: &[f64]) -> Result<Var> {
    let n = tape.value(preds).numel();
    if n != labels.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs labels",
            left: n,
            right: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::InsufficientData("L1 loss of an empty batch".into()));
    }
    let shape = tape.shape(preds).to_vec();
    let t = tape.constant(Tensor::new(shape, labels.to_vec())?);
    let r = tape.sub(preds, t)?;
    let a = tape.abs(r);
    tape.mean(a)
}

/// Multi-positive contrastive loss over identity labels, using raw inner
/// products `z_i · z_j / τ`. Callers normalize features beforehand when
/// cosine behaviour is wanted.
pub fn identity_contrastive_loss(
    tape: &mut Tape,
    z: Var,
    ids: &[i64],
    cfg: &LossConfig,
) -> Result<Var> {
    let (n, _) = check_batch(tape, z, ids.len(), 2)?;
    let zt = tape.transpose(z)?;
    let logits = tape.matmul(z, zt)?;
    let logits = tape.scale(logits, 1.0 / cfg.tau);

    let with_self = cfg.identity_include_self;
    let mut mask = vec![1.0; n * n];
    if !with_self {
        for i in 0..n {
            mask[i * n + i] = 0.0;
        }
    }
    let mut pos = vec![0.0; n * n];
    let mut anchor_weight = vec![0.0; n];
    for i in 0..n {
        let partners: Vec<usize> = (0..n)
            .filter(|&j| (with_self || j != i) && ids[j] == ids[i])
            .collect();
        if partners.is_empty() {
            continue;
        }
        let w = 1.0 / partners.len() as f64;
        for j in partners {
            pos[i * n + j] = w;
        }
        anchor_weight[i] = 1.0;
    }

    let e = tape.exp(logits);
    let m = tape.constant(Tensor::matrix(n, n, mask)?);
    let masked = tape.mul(e, m)?;
    let den = tape.sum_rows(masked)?;
    let log_den = tape.log(den)?;

    let p = tape.constant(Tensor::matrix(n, n, pos)?);
    let pl = tape.mul(logits, p)?;
    let attract = tape.sum(pl);
    let aw = tape.constant(Tensor::vector(anchor_weight));
    let wl = tape.mul(log_den, aw)?;
    let repel = tape.sum(wl);
    tape.sub(repel, attract)
}

/// Reversal strength `2 / (1 + exp(-γ t)) - 1` for normalized progress `t`.
pub fn grl_lambda(t: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config("t", format!("progress {t} outside [0, 1]")));
    }
    if !(gamma > 0.0) {
        return Err(Error::config("loss.gamma", "must be > 0"));
    }
    Ok(2.0 / (1.0 + (-gamma * t).exp()) - 1.0)
}
