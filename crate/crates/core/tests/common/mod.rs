//! Straightforward scalar re-implementations of every loss, written with
//! plain loops over `Vec<f64>` and sharing no code with the library, plus
//! helpers that evaluate the library versions on the same inputs.
#![allow(dead_code)]

use ordcon::objectives::{self, LossConfig};
use ordcon::proxy::ProxyBank;
use ordcon::{Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn unit_diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = norm(&d);
    d.iter().map(|v| v / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Proxy rows for labels `lo - 1 ..= hi + 1`.
#[derive(Clone, Debug)]
pub struct Bank {
    pub lo: i64,
    pub rows: Vec<Vec<f64>>,
}

impl Bank {
    pub fn hi(&self) -> i64 {
        self.lo + self.rows.len() as i64 - 3
    }

    pub fn c(&self, label: i64) -> &[f64] {
        &self.rows[(label - self.lo + 1) as usize]
    }

    pub fn to_lib(&self) -> ProxyBank {
        ProxyBank::from_rows(self.lo, Tensor::from_rows(&self.rows).unwrap()).unwrap()
    }
}

pub fn progressive(z: &[Vec<f64>], y: &[i64], bank: &Bank, cfg: &LossConfig) -> f64 {
    let mut loss = 0.0;
    for i in 0..z.len() {
        let partners: Vec<usize> = (0..z.len()).filter(|&j| y[i] < y[j]).collect();
        if partners.is_empty() {
            continue;
        }
        let vb = unit_diff(bank.c(y[i]), bank.c(y[i] - 1));
        let mut den = 0.0;
        for &k in &partners {
            den += (dot(&vb, &unit_diff(&z[i], &z[k])) / cfg.tau).exp();
        }
        for &j in &partners {
            let vd = unit_diff(&z[i], &z[j]);
            let vf = unit_diff(bank.c(y[i]), bank.c(y[j]));
            let num = dot(&vf, &vd) / cfg.tau;
            let d = if cfg.include_positive_in_denominator { den + num.exp() } else { den };
            loss -= (num.exp() / d).ln() / partners.len() as f64;
        }
    }
    loss
}

pub fn regressive(z: &[Vec<f64>], y: &[i64], bank: &Bank, cfg: &LossConfig) -> f64 {
    let mut loss = 0.0;
    for i in 0..z.len() {
        let partners: Vec<usize> = (0..z.len()).filter(|&j| y[i] > y[j]).collect();
        if partners.is_empty() {
            continue;
        }
        let vf = unit_diff(bank.c(y[i]), bank.c(y[i] + 1));
        let mut den = 0.0;
        for &k in &partners {
            den += (dot(&vf, &unit_diff(&z[i], &z[k])) / cfg.tau).exp();
        }
        for &j in &partners {
            let vd = unit_diff(&z[i], &z[j]);
            let vb = if cfg.literal_regressive {
                unit_diff(bank.c(y[j]), bank.c(y[i]))
            } else {
                unit_diff(bank.c(y[i]), bank.c(y[j]))
            };
            let num = dot(&vb, &vd) / cfg.tau;
            let d = if cfg.include_positive_in_denominator { den + num.exp() } else { den };
            loss -= (num.exp() / d).ln() / partners.len() as f64;
        }
    }
    loss
}

pub fn order(z: &[Vec<f64>], y: &[i64], bank: &Bank, cfg: &LossConfig) -> f64 {
    progressive(z, y, bank, cfg) + regressive(z, y, bank, cfg)
}

pub fn soft_weight(y: i64, z: i64, negatives: &[i64]) -> f64 {
    let max = negatives.iter().map(|&c| (y - c).abs()).max().unwrap() as f64;
    1.0 / (1.0 + (-((y - z).abs() as f64) / max).exp())
}

pub fn proxy_match(z: &[f64], y: i64, bank: &Bank, cfg: &LossConfig) -> f64 {
    let negatives: Vec<i64> = (bank.lo..=bank.hi()).filter(|&a| a != y).collect();
    let num = (cosine(z, bank.c(y)) / cfg.tau).exp();
    let mut den = 0.0;
    for &a in &negatives {
        let w = if cfg.soft_weights { soft_weight(y, a, &negatives) } else { 1.0 };
        den += w * (cosine(z, bank.c(a)) / cfg.tau).exp();
    }
    num / den
}

pub fn metric(z: &[Vec<f64>], y: &[i64], bank: &Bank, cfg: &LossConfig) -> f64 {
    let mut total = 0.0;
    for (zi, &yi) in z.iter().zip(y) {
        let t = proxy_match(zi, yi, bank, cfg);
        total += if cfg.log_ratio { t.ln() } else { t };
    }
    -total / z.len() as f64
}

pub fn contrast(z: &[Vec<f64>], y: &[i64], bank: &Bank, cfg: &LossConfig) -> f64 {
    let o = if cfg.use_order { order(z, y, bank, cfg) } else { 0.0 };
    o + cfg.lambda_metric * metric(z, y, bank, cfg)
}

pub fn identity(z: &[Vec<f64>], ids: &[i64], cfg: &LossConfig) -> f64 {
    let keep = |i: usize, j: usize| cfg.identity_include_self || i != j;
    let mut loss = 0.0;
    for i in 0..z.len() {
        let pos: Vec<usize> = (0..z.len()).filter(|&j| keep(i, j) && ids[i] == ids[j]).collect();
        if pos.is_empty() {
            continue;
        }
        let den: f64 = (0..z.len())
            .filter(|&k| keep(i, k))
            .map(|k| (dot(&z[i], &z[k]) / cfg.tau).exp())
            .sum();
        for &j in &pos {
            loss -= ((dot(&z[i], &z[j]) / cfg.tau).exp() / den).ln() / pos.len() as f64;
        }
    }
    loss
}

pub fn l1(preds: &[f64], labels: &[f64]) -> f64 {
    preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / preds.len() as f64
}

pub fn cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[t].exp() / s).ln();
    }
    total / logits.len() as f64
}

pub fn grl_lambda(t: f64, gamma: f64) -> f64 {
    2.0 / (1.0 + (-gamma * t).exp()) - 1.0
}

/// Which library loss to evaluate.
#[derive(Clone, Copy, Debug)]
pub enum Loss {
    Progressive,
    Regressive,
    Order,
    Metric,
    Contrast,
}

pub const ALL_LOSSES: [Loss; 5] = [
    Loss::Progressive,
    Loss::Regressive,
    Loss::Order,
    Loss::Metric,
    Loss::Contrast,
];

pub fn oracle(loss: Loss, z: &[Vec<f64>], y: &[i64], bank: &Bank, cfg: &LossConfig) -> f64 {
    match loss {
        Loss::Progressive => progressive(z, y, bank, cfg),
        Loss::Regressive => regressive(z, y, bank, cfg),
        Loss::Order => order(z, y, bank, cfg),
        Loss::Metric => metric(z, y, bank, cfg),
        Loss::Contrast => contrast(z, y, bank, cfg),
    }
}

pub fn library(loss: Loss, z: &[Vec<f64>], y: &[i64], bank: &Bank, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::from_rows(z).unwrap());
    let b = bank.to_lib().bind(&mut tape, false);
    let out = match loss {
        Loss::Progressive => objectives::progressive_loss(&mut tape, zv, y, &b, cfg),
        Loss::Regressive => objectives::regressive_loss(&mut tape, zv, y, &b, cfg),
        Loss::Order => objectives::order_loss(&mut tape, zv, y, &b, cfg),
        Loss::Metric => objectives::metric_loss(&mut tape, zv, y, &b, cfg),
        Loss::Contrast => objectives::contrast_loss(&mut tape, zv, y, &b, cfg),
    }
    .unwrap();
    tape.item(out)
}

pub fn library_identity(z: &[Vec<f64>], ids: &[i64], cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::from_rows(z).unwrap());
    let out = objectives::identity_contrastive_loss(&mut tape, zv, ids, cfg).unwrap();
    tape.item(out)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// A random instance: `n` features of width `d`, labels drawn from
/// `lo..=hi` with repeats, and a random bank over that range.
#[derive(Clone, Debug)]
pub struct Instance {
    pub z: Vec<Vec<f64>>,
    pub y: Vec<i64>,
    pub ids: Vec<i64>,
    pub bank: Bank,
    pub cfg: LossConfig,
}

pub fn random_instance(seed: u64, max_n: usize, max_d: usize) -> Instance {
    let mut r = rng(seed);
    let n = r.gen_range(2..=max_n);
    let d = r.gen_range(1..=max_d);
    let (lo, hi) = (20i64, r.gen_range(21..=25i64));
    let y = (0..n).map(|_| r.gen_range(lo..=hi)).collect();
    let ids = (0..n).map(|_| r.gen_range(0..3)).collect();
    let z = normal_rows(&mut r, n, d);
    let rows = normal_rows(&mut r, (hi - lo + 3) as usize, d);
    let log_ratio = r.gen_bool(0.5);
    // the raw ratio reaches ~e^(2/τ); keep it small enough that 1e-9 absolute
    // is above f64 roundoff
    let taus: &[f64] = if log_ratio { &[0.1, 0.25, 0.5, 1.0, 2.0] } else { &[0.25, 0.5, 1.0, 2.0] };
    let cfg = LossConfig {
        tau: taus[r.gen_range(0..taus.len())],
        lambda_metric: r.gen_range(0.0..2.0),
        soft_weights: r.gen_bool(0.5),
        log_ratio,
        include_positive_in_denominator: r.gen_bool(0.5),
        identity_include_self: r.gen_bool(0.5),
        use_order: r.gen_bool(0.8),
        literal_regressive: r.gen_bool(0.5),
        ..LossConfig::default()
    };
    Instance {
        z,
        y,
        ids,
        bank: Bank { lo, rows },
        cfg,
    }
}
