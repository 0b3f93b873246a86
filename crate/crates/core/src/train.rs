//! Training pipelines: contrastive pretraining and L1 fine-tuning for age
//! estimation, multitask identity training with scheduled gradient reversal,
//! and the plain-L1 baseline.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{batch_tensor, init_encoder, EncoderParams, EncoderSpec, RegressionHead};
use crate::objectives::{
    age_l1_loss, contrast_parts, grl_lambda, identity_contrastive_loss, softmax_cross_entropy,
    LossConfig,
};
use crate::proxy::{init_proxies, AgeGroupScheme, ProxyBank};
use crate::seed::{self, stream};
use crate::synth::{assemble_batch, write_atomic, Dataset, Expansion, Generator};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Age,
    Aifr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    /// First epoch trained through the gradient reversal node (identity mode).
    pub grl_start_epoch: usize,
    /// Disables reversal entirely, leaving plain multitask training.
    pub use_grl: bool,
    pub batch_size: usize,
    pub finetune_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub group_scheme: AgeGroupScheme,
    /// Weight of the identity loss in identity mode.
    pub identity_weight: f64,
    /// Weight of the contrastive age loss in identity mode.
    pub age_weight: f64,
    /// Train the encoder together with the regression head when fine-tuning.
    pub unfreeze_encoder: bool,
    /// Joint gradient-norm cap per step; `0` disables clipping.
    pub max_grad_norm: f64,
    pub model: EncoderSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Age,
            epochs_pretrain: 30,
            epochs_finetune: 10,
            grl_start_epoch: 30,
            use_grl: true,
            batch_size: 256,
            finetune_batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossConfig::default(),
            group_scheme: AgeGroupScheme {
                granularity: 6,
                origin: 16,
            },
            identity_weight: 1.0,
            age_weight: 1.0,
            unfreeze_encoder: false,
            max_grad_norm: 0.0,
            model: EncoderSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults for identity-recognition training.
    pub fn aifr() -> Self {
        TrainConfig {
            mode: Mode::Aifr,
            epochs_pretrain: 60,
            grl_start_epoch: 30,
            batch_size: 8,
            max_grad_norm: 1.0,
            loss: LossConfig {
                log_ratio: true,
                ..LossConfig::default()
            },
            model: EncoderSpec {
                d_id: 16,
                ..EncoderSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be >= 2"));
        }
        if self.finetune_batch_size < 1 {
            return Err(Error::config("train.finetune_batch_size", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::config("train.max_grad_norm", "must be >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if self.group_scheme.granularity < 1 {
            return Err(Error::config("train.group_scheme.granularity", "must be >= 1"));
        }
        if self.mode == Mode::Aifr {
            if self.model.d_id == 0 {
                return Err(Error::config("train.model.d_id", "must be >= 1 in aifr mode"));
            }
            if self.use_grl && self.grl_start_epoch >= self.epochs_pretrain && self.epochs_pretrain > 0 {
                return Err(Error::config(
                    "train.grl_start_epoch",
                    "must be below train.epochs_pretrain",
                ));
            }
        }
        Ok(())
    }

    /// Reversal strength for `epoch`, or `None` when the age path is not
    /// reversed at that epoch.
    pub fn grl_at(&self, epoch: usize) -> Result<Option<f64>> {
        if self.mode != Mode::Aifr || !self.use_grl || epoch < self.grl_start_epoch {
            return Ok(None);
        }
        let span = (self.epochs_pretrain - self.grl_start_epoch) as f64;
        let t = (epoch - self.grl_start_epoch) as f64 / span;
        grl_lambda(t.min(1.0), self.loss.gamma).map(Some)
    }
}

/// SGD with classical momentum and L2 weight decay:
/// `v ← μ v + (g + wd·p)`, `p ← p − lr · v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the gradients so their joint L2 norm is at most this value.
    pub max_grad_norm: Option<f64>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            max_grad_norm: None,
            velocity: Vec::new(),
        }
    }

    /// Enables gradient clipping; `0` leaves it off.
    pub fn with_clip(mut self, max_grad_norm: f64) -> Self {
        self.max_grad_norm = (max_grad_norm > 0.0).then_some(max_grad_norm);
        self
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                what: "parameters vs gradients",
                left: params.len(),
                right: grads.len(),
            });
        }
        let grads = grads
            .iter()
            .enumerate()
            .map(|(k, g)| g.ok_or(Error::MissingGradient(k)))
            .collect::<Result<Vec<_>>>()?;
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let gain = match self.max_grad_norm {
            Some(m) if norm > m => m / norm,
            _ => 1.0,
        };
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let v = self.velocity[k].data_mut();
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gain * gi + self.weight_decay * *pi;
                *vi = if self.momentum == 0.0 { d } else { self.momentum * *vi + d };
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Mean per-batch losses of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: String,
    pub epoch: usize,
    pub total: f64,
    pub order: Option<f64>,
    pub metric: Option<f64>,
    pub identity: Option<f64>,
    pub l1: Option<f64>,
    pub lambda_grl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub encoder: EncoderParams,
    pub proxies: ProxyBank,
    pub head: RegressionHead,
    /// Linear identity classifier `[d_id, n_identities]` from identity fine-tuning.
    pub identity_classifier: Option<Tensor>,
    /// Completed pretraining epochs.
    pub epoch: usize,
    pub finetune_epochs: usize,
    pub trace: Vec<EpochLoss>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).expect("checkpoint serializes");
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Incompatible(format!(
                "{}: format version {:?}, expected {CHECKPOINT_VERSION}",
                path.display(),
                version
            )));
        }
        serde_json::from_value(raw).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Labels the proxy bank is indexed by for a given age.
    pub fn order_label(&self, age: i64) -> Result<i64> {
        match self.config.mode {
            Mode::Age => Ok(age),
            Mode::Aifr => self.config.group_scheme.group_of(age),
        }
    }

    /// Checks that `d` can be fed to this checkpoint's encoder.
    pub fn check_compatible(&self, d: &Dataset) -> Result<()> {
        let want = self.encoder.spec.input_dim;
        match d.input_dim() {
            Some(got) if got != want => Err(Error::Incompatible(format!(
                "checkpoint input_dim {want} but data input_dim {got}"
            ))),
            _ => Ok(()),
        }
    }
}

fn age_range(d: &Dataset) -> Result<(i64, i64)> {
    if let Some(spec) = &d.spec {
        return Ok((spec.age_lo, spec.age_hi));
    }
    let ages = d.ages();
    match (ages.iter().min(), ages.iter().max()) {
        (Some(&lo), Some(&hi)) => Ok((lo, hi)),
        _ => Err(Error::InsufficientData("empty dataset".into())),
    }
}

fn init_checkpoint(d: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut spec = cfg.model.clone();
    if let Some(dim) = d.input_dim() {
        if dim != spec.input_dim {
            return Err(Error::DimensionMismatch {
                what: "train.model.input_dim vs data",
                expected: spec.input_dim,
                got: dim,
            });
        }
    }
    if cfg.mode == Mode::Age {
        spec.d_id = 0;
    }
    spec.seed = seed::derive(cfg.seed, &[stream::ENCODER]);
    let encoder = init_encoder(&spec)?;
    let (lo, hi) = age_range(d)?;
    let labels: Vec<i64> = match cfg.mode {
        Mode::Age => vec![lo, hi],
        Mode::Aifr => {
            let g = cfg.group_scheme.groups_in(lo, hi)?;
            vec![*g.start(), *g.end()]
        }
    };
    let proxies = init_proxies(&labels, spec.d_age, seed::derive(cfg.seed, &[stream::PROXIES]))?;
    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        head: RegressionHead::zeros(spec.d_age),
        encoder,
        proxies,
        identity_classifier: None,
        epoch: 0,
        finetune_epochs: 0,
        trace: Vec::new(),
    })
}

/// Shuffled index chunks for one epoch; trailing chunks below `min` are dropped.
fn epoch_batches(n: usize, size: usize, min: usize, seed: u64, tag: &[u64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, tag));
    idx.chunks(size)
        .filter(|c| c.len() >= min)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Default)]
struct Running {
    batches: usize,
    total: f64,
    order: Option<f64>,
    metric: Option<f64>,
    identity: Option<f64>,
    l1: Option<f64>,
}

impl Running {
    fn add(slot: &mut Option<f64>, v: Option<f64>) {
        if let Some(v) = v {
            *slot = Some(slot.unwrap_or(0.0) + v);
        }
    }

    fn finish(self, phase: &str, epoch: usize, lambda_grl: Option<f64>) -> EpochLoss {
        let n = self.batches.max(1) as f64;
        EpochLoss {
            phase: phase.into(),
            epoch,
            total: self.total / n,
            order: self.order.map(|v| v / n),
            metric: self.metric.map(|v| v / n),
            identity: self.identity.map(|v| v / n),
            l1: self.l1.map(|v| v / n),
            lambda_grl,
        }
    }
}

fn finite(v: f64, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalFailure { epoch })
    }
}

/// Contrastive pretraining of the encoder and proxies on age labels.
pub fn pretrain_age(d: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    if cfg.mode != Mode::Age {
        return Err(Error::config("train.mode", "pretrain_age needs mode = age"));
    }
    let mut ckpt = init_checkpoint(d, cfg)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay).with_clip(cfg.max_grad_norm);
    let dim = ckpt.encoder.spec.input_dim;

    for epoch in 0..cfg.epochs_pretrain {
        let mut run = Running::default();
        for idx in epoch_batches(d.len(), cfg.batch_size, 2, cfg.seed, &[stream::SHUFFLE, epoch as u64]) {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| d.samples[i].x.clone()).collect();
            let labels: Vec<i64> = idx.iter().map(|&i| d.samples[i].y_age).collect();

            let mut tape = Tape::new();
            let enc = ckpt.encoder.bind(&mut tape, true);
            let bank = ckpt.proxies.bind(&mut tape, true);
            let x = tape.constant(batch_tensor(&rows, dim)?);
            let f = ckpt.encoder.forward(&mut tape, &enc, x, None)?;
            let parts = contrast_parts(&mut tape, f.z_age, &labels, &bank, &cfg.loss)?;
            let total = finite(tape.item(parts.total), epoch)?;
            let objective = tape.scale(parts.total, 1.0 / labels.len() as f64);
            let grads = tape.backward(objective)?;

            run.batches += 1;
            run.total += total;
            Running::add(&mut run.order, parts.order.map(|v| tape.item(v)));
            Running::add(&mut run.metric, parts.metric.map(|v| tape.item(v)));

            let mut vars = enc.vars();
            vars.push(bank.var);
            apply(&mut opt, &mut ckpt.encoder, &mut ckpt.proxies, None, &vars, &grads)?;
            ckpt.proxies.check_norms()?;
        }
        ckpt.trace.push(run.finish("pretrain", epoch, None));
        ckpt.epoch = epoch + 1;
    }
    Ok(ckpt)
}

fn apply(
    opt: &mut Sgd,
    encoder: &mut EncoderParams,
    proxies: &mut ProxyBank,
    head: Option<&mut RegressionHead>,
    vars: &[Var],
    grads: &crate::autodiff::Gradients,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = encoder.tensors_mut();
    params.push(proxies.tensor_mut());
    if let Some(h) = head {
        params.extend(h.tensors_mut());
    }
    let owned: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    let refs: Vec<Option<&Tensor>> = owned.iter().map(Some).collect();
    opt.step(&mut params, &refs)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Standardizes the columns of `t` in place, returning each column's mean and
/// inverse standard deviation. Constant columns keep unit scale.
fn standardize_columns(t: &mut Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.rows(), t.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let inv: Vec<f64> = var
        .iter()
        .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
        .collect();
    for i in 0..n {
        for ((v, m), s) in t.row_mut(i).iter_mut().zip(&mean).zip(&inv) {
            *v = (*v - m) * s;
        }
    }
    (mean, inv)
}

/// Trains the regression head with L1 loss on top of a pretrained encoder.
/// The encoder stays frozen unless `cfg.unfreeze_encoder` is set. A frozen
/// encoder's features are standardized while fitting and the scaling is
/// folded back into the head afterwards, since the contrastive objectives
/// leave the feature scale free.
pub fn finetune_age(ckpt: &Checkpoint, d: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    ckpt.check_compatible(d)?;
    if d.is_empty() {
        return Err(Error::InsufficientData("fine-tuning on an empty dataset".into()));
    }
    let mut out = ckpt.clone();
    out.config.epochs_finetune = cfg.epochs_finetune;
    out.config.unfreeze_encoder = cfg.unfreeze_encoder;
    let targets: Vec<f64> = d.samples.iter().map(|s| s.y_age as f64).collect();
    // start from the L1-optimal constant predictor
    out.head = RegressionHead::zeros(out.encoder.spec.d_age);
    out.head.bias = Tensor::scalar(median(&mut targets.clone())).with_grad();

    let frozen = if cfg.unfreeze_encoder {
        None
    } else {
        let rows: Vec<Vec<f64>> = d.samples.iter().map(|s| s.x.clone()).collect();
        let mut z = out.encoder.encode(&rows)?.0;
        let stats = standardize_columns(&mut z);
        Some((z, stats))
    };
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay).with_clip(cfg.max_grad_norm);
    let dim = out.encoder.spec.input_dim;
    let first = out.finetune_epochs;

    for epoch in first..first + cfg.epochs_finetune {
        let mut run = Running::default();
        for idx in epoch_batches(d.len(), cfg.finetune_batch_size, 1, cfg.seed, &[stream::HEAD, epoch as u64]) {
            let y: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let (z, enc) = match &frozen {
                Some((feats, _)) => (tape.constant(gather_rows(feats, &idx)?), None),
                None => {
                    let enc = out.encoder.bind(&mut tape, true);
                    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| d.samples[i].x.clone()).collect();
                    let x = tape.constant(batch_tensor(&rows, dim)?);
                    let f = out.encoder.forward(&mut tape, &enc, x, None)?;
                    (f.z_age, Some(enc))
                }
            };
            let wb = out.head.bind(&mut tape, true);
            let preds = RegressionHead::predict_batch(&mut tape, wb, z)?;
            let loss = age_l1_loss(&mut tape, preds, &y)?;
            let value = finite(tape.item(loss), epoch)?;
            let grads = tape.backward(loss)?;
            run.batches += 1;
            run.total += value;
            Running::add(&mut run.l1, Some(value));

            match enc {
                Some(enc) => {
                    let mut params = out.encoder.tensors_mut();
                    params.extend(out.head.tensors_mut());
                    let mut vars = enc.vars();
                    vars.extend([wb.0, wb.1]);
                    step_with(&mut opt, &mut params, &vars, &grads)?;
                }
                None => {
                    let mut params = out.head.tensors_mut();
                    step_with(&mut opt, &mut params, &[wb.0, wb.1], &grads)?;
                }
            }
        }
        out.trace.push(run.finish("finetune", epoch, None));
        out.finetune_epochs = epoch + 1;
    }
    if let Some((_, (mean, inv))) = &frozen {
        // wᵀ((z - m) ⊙ s) + b  =  (w ⊙ s)ᵀ z + (b - Σ w s m)
        let mut shift = 0.0;
        for ((w, m), s) in out.head.weight.data_mut().iter_mut().zip(mean).zip(inv) {
            *w *= s;
            shift += *w * m;
        }
        out.head.bias.data_mut()[0] -= shift;
    }
    Ok(out)
}

fn step_with(
    opt: &mut Sgd,
    params: &mut [&mut Tensor],
    vars: &[Var],
    grads: &crate::autodiff::Gradients,
) -> Result<()> {
    let owned: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    let refs: Vec<Option<&Tensor>> = owned.iter().map(Some).collect();
    opt.step(params, &refs)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let w = t.cols();
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), w, data)
}

/// Baseline with the same schedule as contrastive pretraining followed by
/// [`finetune_age`], but with the L1 loss in both phases: encoder and head
/// are trained end to end for `epochs_pretrain` epochs at `batch_size`, then
/// the head is refit on the frozen encoder.
pub fn train_l1_baseline(d: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    let base = init_checkpoint(d, cfg)?;
    let first = TrainConfig {
        epochs_finetune: cfg.epochs_pretrain,
        finetune_batch_size: cfg.batch_size,
        unfreeze_encoder: true,
        ..cfg.clone()
    };
    let mut pre = finetune_age(&base, d, &first)?;
    for e in &mut pre.trace {
        e.phase = "baseline".into();
    }
    pre.epoch = pre.finetune_epochs;
    pre.finetune_epochs = 0;
    let second = TrainConfig {
        unfreeze_encoder: false,
        ..cfg.clone()
    };
    finetune_age(&pre, d, &second)
}

/// Multitask identity/age training with the reversal schedule on the age path.
pub fn train_aifr(d: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    if cfg.mode != Mode::Aifr {
        return Err(Error::config("train.mode", "train_aifr needs mode = aifr"));
    }
    let spec = d.spec.as_ref().ok_or_else(|| {
        Error::InsufficientData("identity training needs the generating spec (dataset sidecar)".into())
    })?;
    let generator = Generator::new(spec)?;
    let scheme = cfg.group_scheme;
    let mut ckpt = init_checkpoint(d, cfg)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay).with_clip(cfg.max_grad_norm);
    let dim = ckpt.encoder.spec.input_dim;

    for epoch in 0..cfg.epochs_pretrain {
        let lambda = cfg.grl_at(epoch)?;
        let mut run = Running::default();
        let mut aug_rng = seed::rng(cfg.seed, &[stream::SYNTH, epoch as u64]);
        for idx in epoch_batches(d.len(), cfg.batch_size, 2, cfg.seed, &[stream::SHUFFLE, epoch as u64]) {
            let expand = Expansion {
                generator: &generator,
                scheme: &scheme,
            };
            let batch = assemble_batch(d, &idx, Some(expand), &mut aug_rng)?;
            let groups: Vec<i64> = batch
                .y_age
                .iter()
                .map(|&a| scheme.group_of(a))
                .collect::<Result<_>>()?;

            let mut tape = Tape::new();
            let enc = ckpt.encoder.bind(&mut tape, true);
            let bank = ckpt.proxies.bind(&mut tape, true);
            let x = tape.constant(batch_tensor(&batch.x, dim)?);
            let f = ckpt.encoder.forward(&mut tape, &enc, x, lambda)?;
            let z_id = f.z_id.expect("identity head present in aifr mode");
            let z_id = tape.l2_normalize(z_id)?;
            let id_loss = identity_contrastive_loss(&mut tape, z_id, &batch.y_id, &cfg.loss)?;
            let parts = contrast_parts(&mut tape, f.z_age, &groups, &bank, &cfg.loss)?;
            let a = tape.scale(id_loss, cfg.identity_weight);
            let b = tape.scale(parts.total, cfg.age_weight);
            let total = tape.add(a, b)?;
            let value = finite(tape.item(total), epoch)?;
            let objective = tape.scale(total, 1.0 / batch.len() as f64);
            let grads = tape.backward(objective)?;

            run.batches += 1;
            run.total += value;
            Running::add(&mut run.identity, Some(tape.item(id_loss)));
            Running::add(&mut run.order, parts.order.map(|v| tape.item(v)));
            Running::add(&mut run.metric, parts.metric.map(|v| tape.item(v)));

            let mut vars = enc.vars();
            vars.push(bank.var);
            apply(&mut opt, &mut ckpt.encoder, &mut ckpt.proxies, None, &vars, &grads)?;
            ckpt.proxies.check_norms()?;
        }
        ckpt.trace.push(run.finish("aifr", epoch, lambda));
        ckpt.epoch = epoch + 1;
    }
    Ok(ckpt)
}

/// Fits the linear identity classifier with softmax cross-entropy on frozen
/// identity features.
pub fn finetune_identity(ckpt: &Checkpoint, d: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    ckpt.check_compatible(d)?;
    let rows: Vec<Vec<f64>> = d.samples.iter().map(|s| s.x.clone()).collect();
    let (_, z_id) = ckpt.encoder.encode(&rows)?;
    let z_id = z_id.ok_or_else(|| Error::config("train.mode", "checkpoint has no identity head"))?;
    let n_ids = d
        .spec
        .as_ref()
        .map(|s| s.n_identities)
        .unwrap_or_else(|| d.samples.iter().map(|s| s.y_id + 1).max().unwrap_or(1));
    let targets: Vec<usize> = d.samples.iter().map(|s| s.y_id).collect();

    let mut out = ckpt.clone();
    let mut w = Tensor::zeros(&[z_id.cols(), n_ids]).with_grad();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay).with_clip(cfg.max_grad_norm);
    let first = out.finetune_epochs;
    for epoch in first..first + cfg.epochs_finetune {
        let mut run = Running::default();
        for idx in epoch_batches(d.len(), cfg.finetune_batch_size, 1, cfg.seed, &[stream::HEAD, epoch as u64]) {
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let z = tape.constant(gather_rows(&z_id, &idx)?);
            let zn = tape.l2_normalize(z)?;
            let wv = tape.param(w.clone());
            let logits = tape.matmul(zn, wv)?;
            let logits = tape.scale(logits, 1.0 / cfg.loss.tau);
            let loss = softmax_cross_entropy(&mut tape, logits, &y)?;
            let value = finite(tape.item(loss), epoch)?;
            let grads = tape.backward(loss)?;
            run.batches += 1;
            run.total += value;
            Running::add(&mut run.identity, Some(value));
            step_with(&mut opt, &mut [&mut w], &[wv], &grads)?;
        }
        out.trace.push(run.finish("finetune", epoch, None));
        out.finetune_epochs = epoch + 1;
    }
    out.identity_classifier = Some(w);
    Ok(out)
}
