//! Evaluation metrics and exports.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, Tape};
use crate::error::{Error, Result};
use crate::objectives::softmax_cross_entropy;
use crate::proxy::{reference_pairs, AgeGroupScheme, LabelPair, ProxyBank, Relation};
use crate::seed::{self, stream};
use crate::synth::{write_atomic, Dataset};
use crate::tensor::Tensor;
use crate::train::{Checkpoint, EpochLoss, Mode};
use crate::EPS_NORM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub order_consistency: f64,
    /// Spearman correlation between label and the first principal
    /// coordinate of the assignable proxies.
    pub proxy_pca_spearman: f64,
    pub rank1: Option<f64>,
    pub age_probe_acc: Option<f64>,
    pub loss_trace: Vec<EpochLoss>,
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs labels",
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::InsufficientData("mae of an empty set".into()));
    }
    let s: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum();
    Ok(s / preds.len() as f64)
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > EPS_NORM).then(|| v.iter().map(|x| x / n).collect())
}

/// Fraction of progressive pairs `(i, j)`, `y_i < y_j`, whose direction
/// vector `z_i - z_j` is closer in angle to the forward reference direction
/// than to the backward one. Pairs with coincident features count as
/// inconsistent.
pub fn order_consistency(features: &Tensor, labels: &[i64], bank: &ProxyBank) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "features vs labels",
            left: features.rows(),
            right: labels.len(),
        });
    }
    if features.cols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            what: "features vs proxies",
            expected: bank.dim(),
            got: features.cols(),
        });
    }
    let mut refs: HashMap<LabelPair, Vec<f64>> = HashMap::new();
    let mut direction = |p: LabelPair| -> Result<Vec<f64>> {
        if let Some(v) = refs.get(&p) {
            return Ok(v.clone());
        }
        let v = bank.direction(p.0, p.1)?;
        refs.insert(p, v.clone());
        Ok(v)
    };
    let (mut good, mut total) = (0usize, 0usize);
    let mut diff = vec![0.0; features.cols()];
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] >= labels[j] {
                continue;
            }
            let r = reference_pairs(labels[i], labels[j], Relation::Progressive)?;
            let vf = direction(r.forward)?;
            let vb = direction(r.backward)?;
            total += 1;
            for ((d, a), b) in diff.iter_mut().zip(features.row(i)).zip(features.row(j)) {
                *d = a - b;
            }
            if let Some(vd) = unit(&diff) {
                if dot(&vd, &vf) > dot(&vd, &vb) {
                    good += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("no progressive pairs".into()));
    }
    Ok(good as f64 / total as f64)
}

/// Fraction of probes whose cosine-nearest gallery item shares their
/// identity. Ties go to the earliest gallery item.
pub fn rank1_accuracy(gallery: &[(Vec<f64>, usize)], probe: &[(Vec<f64>, usize)]) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::InsufficientData("empty gallery".into()));
    }
    if probe.is_empty() {
        return Err(Error::InsufficientData("empty probe set".into()));
    }
    let known: BTreeSet<usize> = gallery.iter().map(|g| g.1).collect();
    let units = gallery
        .iter()
        .map(|(f, _)| unit(f).ok_or(Error::NearZeroNorm { norm: dot(f, f).sqrt() }))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    for (f, id) in probe {
        if !known.contains(id) {
            return Err(Error::UnknownIdentity {
                id: *id,
                n: known.len(),
            });
        }
        let q = unit(f).ok_or(Error::NearZeroNorm { norm: dot(f, f).sqrt() })?;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (k, g) in units.iter().enumerate() {
            let s = dot(&q, g);
            if s > best.0 {
                best = (s, k);
            }
        }
        if gallery[best.1].1 == *id {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe.len() as f64)
}

/// Gallery: per identity, its sample in the oldest age group (oldest age,
/// then lowest index). Probes: every other sample. Returns index lists.
pub fn gallery_probe_split(
    ages: &[i64],
    ids: &[usize],
    scheme: &AgeGroupScheme,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut best: std::collections::BTreeMap<usize, (i64, i64, usize)> = Default::default();
    for (k, (&age, &id)) in ages.iter().zip(ids).enumerate() {
        let g = scheme.group_of(age)?;
        let e = best.entry(id).or_insert((g, age, k));
        if (g, age) > (e.0, e.1) {
            *e = (g, age, k);
        }
    }
    let gallery: Vec<usize> = best.values().map(|e| e.2).collect();
    let taken: BTreeSet<usize> = gallery.iter().copied().collect();
    let probe = (0..ages.len()).filter(|k| !taken.contains(k)).collect();
    Ok((gallery, probe))
}

const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.5;

/// Held-out accuracy of a linear softmax classifier predicting `labels`
/// from `features`, trained on a seeded half of every group.
pub fn age_probe_accuracy(features: &Tensor, labels: &[i64], seed: u64) -> Result<f64> {
    let n = labels.len();
    if features.rows() != n {
        return Err(Error::LengthMismatch {
            what: "features vs labels",
            left: features.rows(),
            right: n,
        });
    }
    let classes: Vec<i64> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::InsufficientData("age probe needs at least 2 groups".into()));
    }
    if n < 4 {
        return Err(Error::InsufficientData(format!("age probe on {n} samples")));
    }
    let target: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    // stratified halves: each group is shuffled and split separately
    let mut rng = seed::rng(seed, &[stream::PROBE]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes.len() {
        let mut members: Vec<usize> = (0..n).filter(|&i| target[i] == c).collect();
        members.shuffle(&mut rng);
        let half = members.len() / 2;
        train.extend_from_slice(&members[..half]);
        test.extend_from_slice(&members[half..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let (train, test) = (train.as_slice(), test.as_slice());

    // standardize with training statistics; constant columns become zero
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / train.len() as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in train {
        for ((s, v), m) in sd.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    let scale: Vec<f64> = sd
        .iter()
        .map(|s| if s.sqrt() > 1e-12 { 1.0 / s.sqrt() } else { 0.0 })
        .collect();
    let standardize = |rows: &[usize]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            for ((v, m), s) in features.row(i).iter().zip(&mean).zip(&scale) {
                data.push((v - m) * s);
            }
        }
        Tensor::matrix(rows.len(), d, data)
    };
    let x_train = standardize(train)?;
    let y_train: Vec<usize> = train.iter().map(|&i| target[i]).collect();
    let k = classes.len();

    let mut w = Tensor::zeros(&[d, k]);
    let mut b = Tensor::zeros(&[k]);
    for _ in 0..PROBE_STEPS {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let xw = tape.matmul(x, wv)?;
        let logits = tape.add(xw, bv)?;
        let loss = softmax_cross_entropy(&mut tape, logits, &y_train)?;
        let g = tape.backward(loss)?;
        let (gw, gb) = (g.get_or_zeros(wv, &w), g.get_or_zeros(bv, &b));
        for (p, gp) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= PROBE_LR * gp;
        }
        for (p, gp) in b.data_mut().iter_mut().zip(gb.data()) {
            *p -= PROBE_LR * gp;
        }
    }

    let x_test = standardize(test)?;
    let mut hits = 0usize;
    for (r, &i) in test.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..k {
            let mut s = b.data()[c];
            for (f, xv) in x_test.row(r).iter().enumerate() {
                s += xv * w.data()[f * k + c];
            }
            if s > best.0 {
                best = (s, c);
            }
        }
        if best.1 == target[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `[N, k]` coordinates of the centered data.
    pub projected: Tensor,
    /// `[k, d]` unit principal directions; zero rows past the data rank.
    pub components: Tensor,
    /// Fraction of total variance per component.
    pub explained: Vec<f64>,
}

/// Top-`k` principal components. Each direction is signed so that its
/// largest-magnitude coordinate is positive.
pub fn pca_project(features: &Tensor, k: usize) -> Result<Pca> {
    let (n, d) = (features.rows(), features.cols());
    if k > d {
        return Err(Error::DimensionMismatch {
            what: "pca components vs feature dim",
            expected: d,
            got: k,
        });
    }
    if n < k + 1 {
        return Err(Error::InsufficientData(format!(
            "pca with k = {k} needs at least {} samples, got {n}",
            k + 1
        )));
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-12 * d as f64;

    let mut components = vec![0.0; k * d];
    let mut explained = vec![0.0; k];
    for (c, &e) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[e];
        if !(lambda > tol) {
            continue;
        }
        let v = eig.eigenvectors.column(e);
        let pivot = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[c * d + i] = sign * v[i];
        }
        explained[c] = lambda / total;
    }
    let comp = DMatrix::from_row_slice(k, d, &components);
    let proj = &centered * comp.transpose();
    let mut projected = Vec::with_capacity(n * k);
    for i in 0..n {
        for c in 0..k {
            projected.push(proj[(i, c)]);
        }
    }
    Ok(Pca {
        projected: Tensor::matrix(n, k, projected)?,
        components: Tensor::matrix(k, d, components)?,
        explained,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0 + 1.0;
        for &i in &idx[s..=e] {
            r[i] = avg;
        }
        s = e + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "spearman inputs",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("spearman needs 2 points".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let m = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - m) * (y - m);
        da += (x - m) * (x - m);
        db += (y - m) * (y - m);
    }
    if da == 0.0 || db == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (da * db).sqrt())
}

/// Spearman correlation between each assignable proxy's label and its
/// first principal coordinate.
pub fn proxy_pca_spearman(bank: &ProxyBank) -> Result<f64> {
    let labels: Vec<i64> = bank.assignable_labels().collect();
    let mut rows = Vec::with_capacity(labels.len() * bank.dim());
    for &l in &labels {
        rows.extend_from_slice(bank.proxy(l)?);
    }
    let t = Tensor::matrix(labels.len(), bank.dim(), rows)?;
    let p = pca_project(&t, 1)?;
    let ys: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    spearman(&ys, p.projected.data())
}

/// Recomputes every metric of `ckpt` on `d`.
pub fn evaluate(ckpt: &Checkpoint, d: &Dataset) -> Result<Metrics> {
    ckpt.check_compatible(d)?;
    if d.is_empty() {
        return Err(Error::InsufficientData("evaluation on an empty dataset".into()));
    }
    let rows: Vec<Vec<f64>> = d.samples.iter().map(|s| s.x.clone()).collect();
    let (z_age, z_id) = ckpt.encoder.encode(&rows)?;
    let preds = (0..z_age.rows())
        .map(|i| ckpt.head.predict_age(z_age.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let ages: Vec<f64> = d.samples.iter().map(|s| s.y_age as f64).collect();
    let order_labels = d
        .samples
        .iter()
        .map(|s| ckpt.order_label(s.y_age))
        .collect::<Result<Vec<_>>>()?;

    let (rank1, age_probe_acc) = match (&z_id, ckpt.config.mode) {
        (Some(z), Mode::Aifr) => {
            let scheme = &ckpt.config.group_scheme;
            let ids: Vec<usize> = d.samples.iter().map(|s| s.y_id).collect();
            let y: Vec<i64> = d.samples.iter().map(|s| s.y_age).collect();
            let (g, p) = gallery_probe_split(&y, &ids, scheme)?;
            let pick = |idx: &[usize]| -> Vec<(Vec<f64>, usize)> {
                idx.iter().map(|&i| (z.row(i).to_vec(), ids[i])).collect()
            };
            let rank1 = rank1_accuracy(&pick(&g), &pick(&p))?;
            let seed = seed::derive(ckpt.config.seed, &[stream::PROBE]);
            let probe = age_probe_accuracy(z, &order_labels, seed)?;
            (Some(rank1), Some(probe))
        }
        _ => (None, None),
    };

    Ok(Metrics {
        mae: mae(&preds, &ages)?,
        order_consistency: order_consistency(&z_age, &order_labels, &ckpt.proxies)?,
        proxy_pca_spearman: proxy_pca_spearman(&ckpt.proxies)?,
        rank1,
        age_probe_acc,
        loss_trace: ckpt.trace.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    Age,
    Id,
}

/// Writes `y_age, y_id, z_0, ...` per sample.
pub fn export_features(ckpt: &Checkpoint, d: &Dataset, space: FeatureSpace, path: &Path) -> Result<()> {
    ckpt.check_compatible(d)?;
    let rows: Vec<Vec<f64>> = d.samples.iter().map(|s| s.x.clone()).collect();
    let dim = match space {
        FeatureSpace::Age => ckpt.encoder.spec.d_age,
        FeatureSpace::Id => ckpt.encoder.spec.d_id,
    };
    if space == FeatureSpace::Id && dim == 0 {
        return Err(Error::Incompatible("checkpoint has no identity head".into()));
    }
    let feats = if rows.is_empty() {
        Tensor::zeros(&[0, dim])
    } else {
        let (za, zi) = ckpt.encoder.encode(&rows)?;
        match space {
            FeatureSpace::Age => za,
            FeatureSpace::Id => zi.expect("identity head checked above"),
        }
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["y_age".to_string(), "y_id".to_string()];
    header.extend((0..dim).map(|k| format!("z_{k}")));
    w.write_record(&header).expect("in-memory write");
    for (i, s) in d.samples.iter().enumerate() {
        let mut rec = vec![s.y_age.to_string(), s.y_id.to_string()];
        rec.extend(feats.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).expect("in-memory write");
    }
    write_atomic(path, &w.into_inner().expect("in-memory flush"))
}

/// Reads a features CSV back as `(y_age, y_id, features)`.
pub fn load_features(path: &Path) -> Result<(Vec<i64>, Vec<usize>, Tensor)> {
    let malformed = |line: u64, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => malformed(1, format!("{other:?}")),
    })?;
    let dim = r
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .len()
        .saturating_sub(2);
    let (mut ages, mut ids, mut data) = (Vec::new(), Vec::new(), Vec::new());
    for (k, rec) in r.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| malformed(line, e.to_string()))?;
        let field = |c: usize| rec.get(c).ok_or_else(|| malformed(line, format!("missing column {c}")));
        ages.push(field(0)?.parse().map_err(|e| malformed(line, format!("y_age: {e}")))?);
        ids.push(field(1)?.parse().map_err(|e| malformed(line, format!("y_id: {e}")))?);
        for c in 0..dim {
            data.push(field(c + 2)?.parse().map_err(|e| malformed(line, format!("z_{c}: {e}")))?);
        }
    }
    let n = ages.len();
    Ok((ages, ids, Tensor::matrix(n, dim, data)?))
}

pub fn metrics_json(m: &Metrics) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn export_metrics(m: &Metrics, path: &Path) -> Result<()> {
    write_atomic(path, metrics_json(m).as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// One row per epoch: `phase, epoch, total, order, metric, identity, l1, lambda_grl`.
pub fn export_trace(trace: &[EpochLoss], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "phase,epoch,total,order,metric,identity,l1,lambda_grl").expect("in-memory write");
    for e in trace {
        writeln!(
            out,
            "{},{},{:?},{},{},{},{},{}",
            e.phase,
            e.epoch,
            e.total,
            opt(e.order),
            opt(e.metric),
            opt(e.identity),
            opt(e.l1),
            opt(e.lambda_grl)
        )
        .expect("in-memory write");
    }
    write_atomic(path, &out)
}
