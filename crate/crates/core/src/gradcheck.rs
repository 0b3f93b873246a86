//! Finite-difference verification of every objective and of the encoder and
//! gradient-reversal paths, over many seeded random instances.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{grad_check, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{init_encoder, Activation, EncoderParams, EncoderSpec};
use crate::objectives::{
    age_l1_loss, contrast_loss, identity_contrastive_loss, metric_loss, order_loss,
    progressive_loss, proxy_match_term, regressive_loss, softmax_cross_entropy, LossConfig,
};
use crate::proxy::{init_proxies, ProxyBank};
use crate::seed::{self, Rng as SeedRng};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-5;
pub const EPS: f64 = 1e-5;

const LABEL_LO: i64 = 20;
const LABEL_HI: i64 = 25;
const DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

type CaseFn = fn(u64, bool) -> Result<f64>;

/// Names and runners of every case in the suite.
pub fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("progressive", progressive as CaseFn),
        ("regressive", regressive),
        ("order", order),
        ("proxy_match_hard", proxy_match_hard),
        ("proxy_match_soft", proxy_match_soft),
        ("metric_ratio", metric_ratio),
        ("metric_log", metric_log),
        ("contrast", contrast),
        ("age_l1", age_l1),
        ("identity", identity),
        ("cross_entropy", cross_entropy),
        ("encoder_contrast", encoder_contrast),
        ("encoder_multitask", encoder_multitask),
        ("grl_path", grl_path),
    ]
}

struct Instance {
    rng: SeedRng,
    n: usize,
}

impl Instance {
    fn new(seed: u64) -> Self {
        Instance {
            rng: seed::rng(seed, &[seed::stream::PROBE, 0x6772]),
            n: 4 + (seed % 5) as usize,
        }
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let k: usize = shape.iter().product();
        let data = (0..k).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    /// Random labels with at least two distinct values.
    fn labels(&mut self) -> Vec<i64> {
        let mut y: Vec<i64> = (0..self.n)
            .map(|_| self.rng.gen_range(LABEL_LO..=LABEL_HI))
            .collect();
        if y.iter().all(|&v| v == y[0]) {
            y[0] = LABEL_LO;
            y[1] = LABEL_HI;
        }
        y
    }

    fn bank(&mut self) -> Result<ProxyBank> {
        let s = self.rng.gen();
        init_proxies(&[LABEL_LO, LABEL_HI], DIM, s)
    }
}

fn finish(tape: &mut Tape, loss: Var, flip: bool) -> Result<Var> {
    if flip {
        tape.grad_reverse(loss, 1.0)
    } else {
        Ok(loss)
    }
}

fn cfg(seed: u64) -> LossConfig {
    LossConfig {
        tau: if seed % 2 == 0 { 0.5 } else { 1.0 },
        ..LossConfig::default()
    }
}

type OrderFn = fn(&mut Tape, Var, &[i64], &crate::proxy::BoundBank, &LossConfig) -> Result<Var>;

fn batch_case(seed: u64, flip: bool, loss: OrderFn, c: LossConfig) -> Result<f64> {
    let mut inst = Instance::new(seed);
    let z = inst.normal(&[inst.n, DIM]);
    let y = inst.labels();
    let bank = inst.bank()?;
    grad_check(
        |t, v| {
            let b = bank.attach(v[1]);
            let l = loss(t, v[0], &y, &b, &c)?;
            finish(t, l, flip)
        },
        &[z, bank.tensor().clone()],
        EPS,
    )
}

fn progressive(seed: u64, flip: bool) -> Result<f64> {
    batch_case(seed, flip, progressive_loss, cfg(seed))
}

fn regressive(seed: u64, flip: bool) -> Result<f64> {
    batch_case(seed, flip, regressive_loss, cfg(seed))
}

fn order(seed: u64, flip: bool) -> Result<f64> {
    let c = LossConfig {
        include_positive_in_denominator: seed % 3 == 0,
        ..cfg(seed)
    };
    batch_case(seed, flip, order_loss, c)
}

fn metric_ratio(seed: u64, flip: bool) -> Result<f64> {
    batch_case(seed, flip, metric_loss, cfg(seed))
}

fn metric_log(seed: u64, flip: bool) -> Result<f64> {
    let c = LossConfig {
        log_ratio: true,
        soft_weights: seed % 2 == 1,
        ..cfg(seed)
    };
    batch_case(seed, flip, metric_loss, c)
}

fn contrast(seed: u64, flip: bool) -> Result<f64> {
    batch_case(seed, flip, contrast_loss, cfg(seed))
}

fn proxy_match(seed: u64, flip: bool, soft: bool) -> Result<f64> {
    let mut inst = Instance::new(seed);
    let z = inst.normal(&[DIM]);
    let y = inst.labels()[0];
    let bank = inst.bank()?;
    let c = LossConfig {
        soft_weights: soft,
        ..cfg(seed)
    };
    grad_check(
        |t, v| {
            let b = bank.attach(v[1]);
            let l = proxy_match_term(t, v[0], y, &b, &c)?;
            finish(t, l, flip)
        },
        &[z, bank.tensor().clone()],
        EPS,
    )
}

fn proxy_match_hard(seed: u64, flip: bool) -> Result<f64> {
    proxy_match(seed, flip, false)
}

fn proxy_match_soft(seed: u64, flip: bool) -> Result<f64> {
    proxy_match(seed, flip, true)
}

fn age_l1(seed: u64, flip: bool) -> Result<f64> {
    let mut inst = Instance::new(seed);
    let z = inst.normal(&[inst.n, DIM]);
    let w = inst.normal(&[DIM, 1]);
    let b = inst.normal(&[]);
    // targets well away from the predictions keep the kink out of reach
    let y: Vec<f64> = inst.labels().iter().map(|&v| v as f64).collect();
    grad_check(
        |t, v| {
            let zw = t.matmul(v[0], v[1])?;
            let p = t.reshape(zw, vec![y.len()])?;
            let p = t.add(p, v[2])?;
            let l = age_l1_loss(t, p, &y)?;
            finish(t, l, flip)
        },
        &[z, w, b],
        EPS,
    )
}

fn identity(seed: u64, flip: bool) -> Result<f64> {
    let mut inst = Instance::new(seed);
    let z = inst.normal(&[inst.n, DIM]);
    let ids: Vec<i64> = (0..inst.n).map(|_| inst.rng.gen_range(0..3)).collect();
    let c = LossConfig {
        identity_include_self: seed % 4 == 3,
        ..cfg(seed)
    };
    grad_check(
        |t, v| {
            let zn = t.l2_normalize(v[0])?;
            let l = identity_contrastive_loss(t, zn, &ids, &c)?;
            finish(t, l, flip)
        },
        &[z],
        EPS,
    )
}

fn cross_entropy(seed: u64, flip: bool) -> Result<f64> {
    let mut inst = Instance::new(seed);
    let logits = inst.normal(&[inst.n, 4]);
    let targets: Vec<usize> = (0..inst.n).map(|_| inst.rng.gen_range(0..4)).collect();
    grad_check(
        |t, v| {
            let l = softmax_cross_entropy(t, v[0], &targets)?;
            finish(t, l, flip)
        },
        &[logits],
        EPS,
    )
}

fn small_encoder(inst: &mut Instance, d_id: usize) -> Result<EncoderParams> {
    init_encoder(&EncoderSpec {
        input_dim: 4,
        hidden_dims: vec![5],
        d_age: DIM,
        d_id,
        activation: Activation::Tanh,
        seed: inst.rng.gen(),
    })
}

fn encoder_leaves(enc: &EncoderParams, bank: &ProxyBank) -> Vec<Tensor> {
    let mut leaves: Vec<Tensor> = enc.tensors().into_iter().cloned().collect();
    leaves.push(bank.tensor().clone());
    leaves
}

fn encoder_contrast(seed: u64, flip: bool) -> Result<f64> {
    let mut inst = Instance::new(seed);
    let enc = small_encoder(&mut inst, 0)?;
    let x = inst.normal(&[inst.n, 4]);
    let y = inst.labels();
    let bank = inst.bank()?;
    let c = cfg(seed);
    let k = enc.tensors().len();
    grad_check(
        |t, v| {
            let bound = enc.attach(&v[..k])?;
            let xv = t.constant(x.clone());
            let f = enc.forward(t, &bound, xv, None)?;
            let l = contrast_loss(t, f.z_age, &y, &bank.attach(v[k]), &c)?;
            finish(t, l, flip)
        },
        &encoder_leaves(&enc, &bank),
        EPS,
    )
}

fn multitask(
    t: &mut Tape,
    enc: &EncoderParams,
    v: &[Var],
    x: &Tensor,
    y: &[i64],
    ids: &[i64],
    bank: &ProxyBank,
    c: &LossConfig,
    grl: Option<f64>,
) -> Result<Var> {
    let k = enc.tensors().len();
    let bound = enc.attach(&v[..k])?;
    let xv = t.constant(x.clone());
    let f = enc.forward(t, &bound, xv, grl)?;
    let z_id = f.z_id.expect("identity head");
    let zn = t.l2_normalize(z_id)?;
    let id_loss = identity_contrastive_loss(t, zn, ids, c)?;
    let age = contrast_loss(t, f.z_age, y, &bank.attach(v[k]), c)?;
    t.add(id_loss, age)
}

struct MultitaskInstance {
    enc: EncoderParams,
    x: Tensor,
    y: Vec<i64>,
    ids: Vec<i64>,
    bank: ProxyBank,
    c: LossConfig,
}

fn multitask_instance(seed: u64) -> Result<MultitaskInstance> {
    let mut inst = Instance::new(seed);
    let enc = small_encoder(&mut inst, 2)?;
    let x = inst.normal(&[inst.n, 4]);
    let y = inst.labels();
    let ids = (0..inst.n).map(|_| inst.rng.gen_range(0..2)).collect();
    let bank = inst.bank()?;
    let c = LossConfig {
        log_ratio: true,
        ..cfg(seed)
    };
    Ok(MultitaskInstance {
        enc,
        x,
        y,
        ids,
        bank,
        c,
    })
}

fn encoder_multitask(seed: u64, flip: bool) -> Result<f64> {
    let m = multitask_instance(seed)?;
    grad_check(
        |t, v| {
            let l = multitask(t, &m.enc, v, &m.x, &m.y, &m.ids, &m.bank, &m.c, None)?;
            finish(t, l, flip)
        },
        &encoder_leaves(&m.enc, &m.bank),
        EPS,
    )
}

/// Central-difference gradient of `f` with respect to every leaf entry.
fn numeric_gradient<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };
    let mut inputs = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut g = Tensor::zeros(leaf.shape());
        for k in 0..leaf.numel() {
            let orig = leaf.data()[k];
            inputs[li].data_mut()[k] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[li].data_mut()[k] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[li].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Trunk gradients through the reversal node must equal `-lambda` times the
/// finite-difference gradient of the age objective, while the heads, the
/// proxies and the identity path keep their plain gradients.
fn grl_path(seed: u64, flip: bool) -> Result<f64> {
    let m = multitask_instance(seed)?;
    let lambda = 0.25 + 0.5 * ((seed % 7) as f64 / 6.0);
    let leaves = encoder_leaves(&m.enc, &m.bank);
    let trunk = 2 * m.enc.trunk.len();
    let k = m.enc.tensors().len();

    let analytic = {
        let mut t = Tape::new();
        let v: Vec<Var> = leaves.iter().map(|l| t.param(l.clone())).collect();
        let l = multitask(&mut t, &m.enc, &v, &m.x, &m.y, &m.ids, &m.bank, &m.c, Some(lambda))?;
        let l = finish(&mut t, l, flip)?;
        let g = t.backward(l)?;
        v.iter()
            .zip(&leaves)
            .map(|(&var, leaf)| g.get_or_zeros(var, leaf))
            .collect::<Vec<_>>()
    };

    // split the objective so each part's numeric gradient can be scaled
    let identity_part = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let bound = m.enc.attach(&v[..k])?;
        let xv = t.constant(m.x.clone());
        let f = m.enc.forward(t, &bound, xv, None)?;
        let zn = t.l2_normalize(f.z_id.expect("identity head"))?;
        identity_contrastive_loss(t, zn, &m.ids, &m.c)
    };
    let age_part = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let bound = m.enc.attach(&v[..k])?;
        let xv = t.constant(m.x.clone());
        let f = m.enc.forward(t, &bound, xv, None)?;
        contrast_loss(t, f.z_age, &m.y, &m.bank.attach(v[k]), &m.c)
    };
    let g_id = numeric_gradient(identity_part, &leaves, EPS)?;
    let g_age = numeric_gradient(age_part, &leaves, EPS)?;

    let mut worst = 0.0f64;
    for (li, a) in analytic.iter().enumerate() {
        let age_scale = if li < trunk { -lambda } else { 1.0 };
        for e in 0..a.numel() {
            let expect = g_id[li].data()[e] + age_scale * g_age[li].data()[e];
            let got = a.data()[e];
            let err = (got - expect).abs() / got.abs().max(expect.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Runs `seeds` instances of every case, optionally across `threads` worker
/// threads. Results are merged in seed order, so they do not depend on the
/// thread count. `inject` names a case whose gradient is sign-flipped.
pub fn run_suite(seeds: u64, threads: usize, inject: Option<&str>) -> Result<Vec<CaseReport>> {
    if seeds == 0 {
        return Err(Error::config("seeds", "must be >= 1"));
    }
    if let Some(name) = inject {
        if !cases().iter().any(|(n, _)| *n == name) {
            return Err(Error::config("inject", format!("unknown case `{name}`")));
        }
    }
    let threads = threads.clamp(1, seeds as usize);
    let mut reports = Vec::new();
    for (name, case) in cases() {
        let flip = inject == Some(name);
        let errs: Vec<Result<f64>> = if threads == 1 {
            (0..seeds).map(|s| case(s, flip)).collect()
        } else {
            let mut slots: Vec<Option<Result<f64>>> = (0..seeds).map(|_| None).collect();
            std::thread::scope(|scope| {
                let chunk = (seeds as usize).div_ceil(threads);
                for (w, part) in slots.chunks_mut(chunk).enumerate() {
                    scope.spawn(move || {
                        for (k, slot) in part.iter_mut().enumerate() {
                            *slot = Some(case((w * chunk + k) as u64, flip));
                        }
                    });
                }
            });
            slots.into_iter().map(|s| s.expect("every seed ran")).collect()
        };
        let mut worst = (0.0f64, 0u64);
        for (s, e) in errs.into_iter().enumerate() {
            let e = e?;
            if e > worst.0 || e.is_nan() {
                worst = (e, s as u64);
            }
        }
        reports.push(CaseReport {
            name,
            max_rel_err: worst.0,
            worst_seed: worst.1,
            passed: worst.0 < TOLERANCE,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_seeds() {
        for r in run_suite(3, 1, None).unwrap() {
            assert!(r.passed, "{} failed: {:e} at seed {}", r.name, r.max_rel_err, r.worst_seed);
        }
    }

    #[test]
    fn injected_sign_error_is_caught() {
        let r = run_suite(1, 1, Some("metric_log")).unwrap();
        let bad: Vec<_> = r.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(bad, vec!["metric_log"]);
        assert!(run_suite(1, 1, Some("nope")).is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        assert_eq!(run_suite(4, 1, None).unwrap(), run_suite(4, 3, None).unwrap());
    }
}
