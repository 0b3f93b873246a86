//! Seeded synthetic ordinal data.
//!
//! Each sample carries a latent age and identity mapped through a fixed
//! two-layer tanh warp, `x = W2 · tanh(W1 · [age_scaled; id_embed] + b1) + ε`.
//! The warp is drawn once from `warp_seed`; labels and noise come from
//! `sample_seed` with one counter-derived stream per sample, so the output does
//! not depend on generation order.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proxy::AgeGroupScheme;
use crate::seed::{self, stream};

/// Width of the latent identity embedding.
const ID_LATENT: usize = 4;
/// Hidden width of the warp.
const WARP_HIDDEN: usize = 16;
/// Standard deviation of the age column of the first warp layer.
const AGE_GAIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_identities: usize,
    pub age_lo: i64,
    pub age_hi: i64,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub warp_seed: u64,
    pub sample_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 2000,
            n_identities: 50,
            age_lo: 16,
            age_hi: 77,
            input_dim: 32,
            noise_sigma: 0.05,
            warp_seed: 0,
            sample_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.age_lo >= self.age_hi {
            return Err(Error::config("data.age_lo", "must be below data.age_hi"));
        }
        if self.n_identities == 0 {
            return Err(Error::config("data.n_identities", "must be >= 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("data.input_dim", "must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("data.noise_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y_age: i64,
    pub y_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Generating spec, when known.
    pub spec: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }

    pub fn ages(&self) -> Vec<i64> {
        self.samples.iter().map(|s| s.y_age).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            spec: self.spec.clone(),
        }
    }

    /// Deterministic train / held-out split.
    pub fn split(&self, holdout: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout) {
            return Err(Error::config("eval.holdout_fraction", "must lie in [0, 1)"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::rng(seed, &[stream::SPLIT]));
        let n_test = (self.len() as f64 * holdout).round() as usize;
        let (test, train) = idx.split_at(n_test);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// The fixed nonlinear map from latent (age, identity) to input space.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: SyntheticSpec,
    w1: Vec<[f64; 1 + ID_LATENT]>,
    b1: Vec<f64>,
    w2: Vec<[f64; WARP_HIDDEN]>,
    id_embed: Vec<[f64; ID_LATENT]>,
}

impl Generator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(spec.warp_seed, &[stream::WARP]);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let id_scale = 1.0 / (ID_LATENT as f64).sqrt();
        let w1 = (0..WARP_HIDDEN)
            .map(|_| {
                let mut row = [0.0; 1 + ID_LATENT];
                row[0] = AGE_GAIN * normal();
                for v in &mut row[1..] {
                    *v = id_scale * normal();
                }
                row
            })
            .collect();
        let b1 = (0..WARP_HIDDEN).map(|_| 0.5 * normal()).collect();
        let out_scale = 1.0 / (WARP_HIDDEN as f64).sqrt();
        let w2 = (0..spec.input_dim)
            .map(|_| {
                let mut row = [0.0; WARP_HIDDEN];
                row.iter_mut().for_each(|v| *v = out_scale * normal());
                row
            })
            .collect();
        let id_embed = (0..spec.n_identities)
            .map(|_| {
                let mut e = [0.0; ID_LATENT];
                e.iter_mut().for_each(|v| *v = normal());
                e
            })
            .collect();
        Ok(Generator {
            spec: spec.clone(),
            w1,
            b1,
            w2,
            id_embed,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Noise-free input for a latent (age, identity).
    pub fn clean(&self, age: i64, id: usize) -> Result<Vec<f64>> {
        let embed = self.id_embed.get(id).ok_or(Error::UnknownIdentity {
            id,
            n: self.spec.n_identities,
        })?;
        let span = (self.spec.age_hi - self.spec.age_lo) as f64;
        let age_scaled = (age - self.spec.age_lo) as f64 / span;
        let hidden: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| {
                let pre = row[0] * age_scaled
                    + row[1..].iter().zip(embed).map(|(w, e)| w * e).sum::<f64>()
                    + b;
                pre.tanh()
            })
            .collect();
        Ok(self
            .w2
            .iter()
            .map(|row| row.iter().zip(&hidden).map(|(w, h)| w * h).sum())
            .collect())
    }

    /// Input for (age, identity) with fresh noise drawn from `rng`.
    pub fn render(&self, age: i64, id: usize, rng: &mut seed::Rng) -> Result<Vec<f64>> {
        let mut x = self.clean(age, id)?;
        if self.spec.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.spec.noise_sigma).expect("sigma checked");
            x.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        Ok(x)
    }

    /// One sample of the same identity in every age group other than the
    /// input's, placed at the (clipped) group centre.
    pub fn synth_across_groups(
        &self,
        s: &Sample,
        scheme: &AgeGroupScheme,
        rng: &mut seed::Rng,
    ) -> Result<Vec<Sample>> {
        if s.y_id >= self.spec.n_identities {
            return Err(Error::UnknownIdentity {
                id: s.y_id,
                n: self.spec.n_identities,
            });
        }
        let own = scheme.group_of(s.y_age)?;
        let (lo, hi) = (self.spec.age_lo, self.spec.age_hi);
        scheme
            .groups_in(lo, hi)?
            .filter(|&g| g != own)
            .map(|g| {
                let age = scheme.center_age(g, lo, hi);
                Ok(Sample {
                    x: self.render(age, s.y_id, rng)?,
                    y_age: age,
                    y_id: s.y_id,
                })
            })
            .collect()
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    let gen = Generator::new(spec)?;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut rng = seed::rng(spec.sample_seed, &[stream::SAMPLES, i as u64]);
            let y_age = rng.gen_range(spec.age_lo..=spec.age_hi);
            let y_id = rng.gen_range(0..spec.n_identities);
            Ok(Sample {
                x: gen.render(y_age, y_id, &mut rng)?,
                y_age,
                y_id,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        samples,
        spec: Some(spec.clone()),
    })
}

/// Inputs and labels of one training batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledBatch {
    pub x: Vec<Vec<f64>>,
    pub y_age: Vec<i64>,
    pub y_id: Vec<i64>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn push(&mut self, s: Sample) {
        self.x.push(s.x);
        self.y_age.push(s.y_age);
        self.y_id.push(s.y_id as i64);
    }
}

/// Cross-group expansion used in identity-recognition mode.
#[derive(Clone, Copy)]
pub struct Expansion<'a> {
    pub generator: &'a Generator,
    pub scheme: &'a AgeGroupScheme,
}

/// Gathers the given samples into a batch, appending each sample's
/// cross-group expansion after it when `expand` is set.
pub fn assemble_batch(
    d: &Dataset,
    idx: &[usize],
    expand: Option<Expansion<'_>>,
    rng: &mut seed::Rng,
) -> Result<LabeledBatch> {
    let mut batch = LabeledBatch::default();
    for &i in idx {
        let s = &d.samples[i];
        batch.push(s.clone());
        if let Some(e) = expand {
            for extra in e.generator.synth_across_groups(s, e.scheme, rng)? {
                batch.push(extra);
            }
        }
    }
    Ok(batch)
}

/// Uniform draw of `size` distinct samples.
pub fn sample_batch(
    d: &Dataset,
    size: usize,
    seed: u64,
    expand: Option<Expansion<'_>>,
) -> Result<LabeledBatch> {
    if size < 2 {
        return Err(Error::config("train.batch_size", "must be >= 2"));
    }
    if size > d.len() {
        return Err(Error::InsufficientData(format!(
            "batch of {size} from a dataset of {}",
            d.len()
        )));
    }
    let mut rng = seed::rng(seed, &[stream::SHUFFLE]);
    let idx = rand::seq::index::sample(&mut rng, d.len(), size).into_vec();
    assemble_batch(d, &idx, expand, &mut rng)
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `y_age,y_id,x_0..` rows plus the spec sidecar when known.
pub fn save_csv(d: &Dataset, path: &Path) -> Result<()> {
    let dim = d
        .input_dim()
        .or_else(|| d.spec.as_ref().map(|s| s.input_dim))
        .unwrap_or(0);
    let mut out = String::new();
    out.push_str("y_age,y_id");
    for k in 0..dim {
        out.push_str(&format!(",x_{k}"));
    }
    out.push('\n');
    for s in &d.samples {
        out.push_str(&format!("{},{}", s.y_age, s.y_id));
        for v in &s.x {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    if let Some(spec) = &d.spec {
        let json = serde_json::to_string_pretty(spec).expect("spec serializes");
        write_atomic(&sidecar(path), json.as_bytes())?;
    }
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() < 2 || &headers[0] != "y_age" || &headers[1] != "y_id" {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line: 1,
            msg: "header must start with y_age,y_id".into(),
        });
    }
    let dim = headers.len() - 2;
    let mut samples = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if rec.len() != headers.len() {
            return Err(bad(format!(
                "expected {} columns, found {}",
                headers.len(),
                rec.len()
            )));
        }
        let y_age = rec[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad y_age `{}`", &rec[0])))?;
        let y_id = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad y_id `{}`", &rec[1])))?;
        let x = (0..dim)
            .map(|k| {
                rec[k + 2]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad value `{}` in x_{k}", &rec[k + 2])))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample { x, y_age, y_id });
    }
    let side = sidecar(path);
    let spec = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: side.clone(),
            msg: e.to_string(),
        })?;
        if spec.input_dim != dim && !samples.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "dataset sidecar input_dim",
                expected: spec.input_dim,
                got: dim,
            });
        }
        Some(spec)
    } else {
        None
    };
    Ok(Dataset { samples, spec })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 40,
            n_identities: 5,
            input_dim: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let mut other = small();
        other.sample_seed = 1;
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn zero_noise_is_a_function_of_latents() {
        let spec = SyntheticSpec { noise_sigma: 0.0, ..small() };
        let gen = Generator::new(&spec).unwrap();
        let mut r1 = seed::rng(1, &[]);
        let mut r2 = seed::rng(2, &[]);
        assert_eq!(gen.render(30, 2, &mut r1).unwrap(), gen.render(30, 2, &mut r2).unwrap());
    }

    #[test]
    fn labels_stay_in_range() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.len(), 40);
        for s in &d.samples {
            assert!((16..=77).contains(&s.y_age));
            assert!(s.y_id < 5);
            assert_eq!(s.x.len(), 6);
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = SyntheticSpec { age_lo: 50, age_hi: 50, ..small() };
        match generate(&bad) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "data.age_lo"),
            other => panic!("{other:?}"),
        }
        assert!(generate(&SyntheticSpec { n_identities: 0, ..small() }).is_err());
        assert!(generate(&SyntheticSpec { noise_sigma: -1.0, ..small() }).is_err());
    }

    #[test]
    fn cross_group_expansion() {
        let spec = SyntheticSpec { noise_sigma: 0.0, age_lo: 16, age_hi: 45, ..small() };
        let gen = Generator::new(&spec).unwrap();
        let scheme = AgeGroupScheme::new(6, 16).unwrap();
        let s = Sample { x: gen.clean(20, 3).unwrap(), y_age: 20, y_id: 3 };
        let mut rng = seed::rng(0, &[]);
        let out = gen.synth_across_groups(&s, &scheme, &mut rng).unwrap();
        // ages 16..=45 span groups 0..=4
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|o| o.y_id == 3));
        assert!(out.iter().all(|o| scheme.group_of(o.y_age).unwrap() != 0));
        let neighbour = &out[0];
        assert_eq!(scheme.group_of(neighbour.y_age).unwrap(), 1);
        assert_eq!(neighbour.x, gen.clean(neighbour.y_age, 3).unwrap());

        let stranger = Sample { y_id: 99, ..s };
        assert!(matches!(
            gen.synth_across_groups(&stranger, &scheme, &mut rng),
            Err(Error::UnknownIdentity { .. })
        ));
    }

    #[test]
    fn batch_sampling() {
        let spec = SyntheticSpec { age_lo: 16, age_hi: 45, ..small() };
        let d = generate(&spec).unwrap();
        let b = sample_batch(&d, 4, 3, None).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b, sample_batch(&d, 4, 3, None).unwrap());

        let gen = Generator::new(&spec).unwrap();
        let scheme = AgeGroupScheme::new(6, 16).unwrap();
        let e = Expansion { generator: &gen, scheme: &scheme };
        let b = sample_batch(&d, 4, 3, Some(e)).unwrap();
        assert_eq!(b.len(), 20);

        assert!(sample_batch(&d, 41, 0, None).is_err());
        assert!(sample_batch(&d, 1, 0, None).is_err());
    }

    #[test]
    fn split_partitions_the_data() {
        let d = generate(&small()).unwrap();
        let (train, test) = d.split(0.25, 4).unwrap();
        assert_eq!(train.len() + test.len(), d.len());
        assert_eq!(test.len(), 10);
        assert_eq!(d.split(0.25, 4).unwrap().1, test);
    }
}
