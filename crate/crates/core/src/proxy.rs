//! Learnable per-label proxies with static assignment, and the reference
//! directions derived from them.
//!
//! The bank stores one row per integer label in `[lo - 1, hi + 1]`. The two
//! sentinel rows exist so that the neighbour proxies `c_{y-1}` and `c_{y+1}`
//! are defined at both ends of the label range. They are never assigned to a
//! sample but are trained through the reference directions that use them.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, EPS_NORM};
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    /// `y_i < y_j`
    Progressive,
    /// `y_i > y_j`
    Regressive,
    Equal,
}

impl Relation {
    pub fn of(y_i: i64, y_j: i64) -> Self {
        match y_i.cmp(&y_j) {
            std::cmp::Ordering::Less => Relation::Progressive,
            std::cmp::Ordering::Greater => Relation::Regressive,
            std::cmp::Ordering::Equal => Relation::Equal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyBank {
    /// Smallest assignable label.
    lo: i64,
    /// Largest assignable label.
    hi: i64,
    /// `[hi - lo + 3, d]`, row 0 is the `lo - 1` sentinel.
    proxies: Tensor,
    seed: u64,
}

/// A fixed sample-to-proxy assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProxyRef {
    pub label: i64,
    pub row: usize,
}

/// Directions `v(c_a, c_b)` given as label pairs `(a, b)`.
pub type LabelPair = (i64, i64);

/// Forward and backward reference directions of one ordered pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferencePairs {
    pub forward: LabelPair,
    pub backward: LabelPair,
}

/// Label pairs whose proxy differences give the reference directions of a
/// pair with labels `(y_i, y_j)`.
pub fn reference_pairs(y_i: i64, y_j: i64, rel: Relation) -> Result<ReferencePairs> {
    match rel {
        Relation::Progressive => Ok(ReferencePairs {
            forward: (y_i, y_j),
            backward: (y_i, y_i - 1),
        }),
        Relation::Regressive => Ok(ReferencePairs {
            forward: (y_i, y_i + 1),
            backward: (y_j, y_i),
        }),
        Relation::Equal => Err(Error::EqualRelation),
    }
}

pub fn init_proxies(labels: &[i64], d_age: usize, seed: u64) -> Result<ProxyBank> {
    let lo = *labels.iter().min().ok_or(Error::EmptyLabels)?;
    let hi = *labels.iter().max().ok_or(Error::EmptyLabels)?;
    if d_age == 0 {
        return Err(Error::config("model.d_age", "must be >= 1"));
    }
    let rows = (hi - lo + 3) as usize;
    let mut rng = seed::rng(seed, &[stream::PROXIES]);
    let mut data = Vec::with_capacity(rows * d_age);
    for _ in 0..rows {
        // redraw the (measure-zero) degenerate case instead of clamping
        let row = loop {
            let r: Vec<f64> = (0..d_age).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > EPS_NORM {
                break r.into_iter().map(|v| v / n).collect::<Vec<_>>();
            }
        };
        data.extend(row);
    }
    Ok(ProxyBank {
        lo,
        hi,
        proxies: Tensor::matrix(rows, d_age, data)?.with_grad(),
        seed,
    })
}

impl ProxyBank {
    /// Builds a bank from explicit rows covering `[lo - 1, hi + 1]`.
    pub fn from_rows(lo: i64, rows: Tensor) -> Result<Self> {
        if rows.shape().len() != 2 || rows.rows() < 3 {
            return Err(Error::ShapeMismatch {
                op: "proxy bank",
                lhs: rows.shape().to_vec(),
                rhs: vec![3],
            });
        }
        let hi = lo + rows.rows() as i64 - 3;
        Ok(ProxyBank {
            lo,
            hi,
            proxies: rows.with_grad(),
            seed: 0,
        })
    }

    /// Assignable label range.
    pub fn label_range(&self) -> (i64, i64) {
        (self.lo, self.hi)
    }

    pub fn assignable_labels(&self) -> impl Iterator<Item = i64> {
        self.lo..=self.hi
    }

    pub fn len(&self) -> usize {
        self.proxies.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.proxies.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensor(&self) -> &Tensor {
        &self.proxies
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.proxies
    }

    /// Row index of any label in the extended range, sentinels included.
    pub fn row(&self, label: i64) -> Result<usize> {
        if label < self.lo - 1 || label > self.hi + 1 {
            return Err(Error::LabelOutOfRange {
                label,
                lo: self.lo - 1,
                hi: self.hi + 1,
            });
        }
        Ok((label - self.lo + 1) as usize)
    }

    pub fn label_of_row(&self, row: usize) -> i64 {
        self.lo - 1 + row as i64
    }

    /// Static assignment of a sample label to its proxy. Sentinels are not
    /// assignable.
    pub fn assign(&self, y: i64) -> Result<ProxyRef> {
        if y < self.lo || y > self.hi {
            return Err(Error::LabelOutOfRange {
                label: y,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(ProxyRef {
            label: y,
            row: self.row(y)?,
        })
    }

    pub fn proxy(&self, label: i64) -> Result<&[f64]> {
        Ok(self.proxies.row(self.row(label)?))
    }

    /// Every proxy must stay above the norm floor.
    pub fn check_norms(&self) -> Result<()> {
        for r in 0..self.len() {
            let row = self.proxies.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > EPS_NORM) {
                return Err(Error::NearZeroNorm { norm: n });
            }
        }
        Ok(())
    }

    /// `v(c_a, c_b) = (c_a - c_b) / ‖c_a - c_b‖` without recording gradients.
    pub fn direction(&self, a: i64, b: i64) -> Result<Vec<f64>> {
        let (ca, cb) = (self.proxy(a)?, self.proxy(b)?);
        let diff: Vec<f64> = ca.iter().zip(cb).map(|(x, y)| x - y).collect();
        let n = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > EPS_NORM) {
            return Err(Error::NearZeroNorm { norm: n });
        }
        Ok(diff.into_iter().map(|v| v / n).collect())
    }

    /// Wraps an existing tape node holding this bank's rows.
    pub fn attach(&self, var: Var) -> BoundBank {
        BoundBank {
            var,
            lo: self.lo,
            hi: self.hi,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBank {
        let var = if trainable {
            tape.param(self.proxies.clone())
        } else {
            tape.constant(self.proxies.clone())
        };
        BoundBank {
            var,
            lo: self.lo,
            hi: self.hi,
        }
    }
}

/// A bank registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundBank {
    pub var: Var,
    lo: i64,
    hi: i64,
}

impl BoundBank {
    pub fn label_range(&self) -> (i64, i64) {
        (self.lo, self.hi)
    }

    pub fn row(&self, label: i64) -> Result<usize> {
        if label < self.lo - 1 || label > self.hi + 1 {
            return Err(Error::LabelOutOfRange {
                label,
                lo: self.lo - 1,
                hi: self.hi + 1,
            });
        }
        Ok((label - self.lo + 1) as usize)
    }

    pub fn assign(&self, y: i64) -> Result<usize> {
        if y < self.lo || y > self.hi {
            return Err(Error::LabelOutOfRange {
                label: y,
                lo: self.lo,
                hi: self.hi,
            });
        }
        self.row(y)
    }

    /// Unit directions `v(c_a, c_b)` for a list of label pairs, as `[P, d]`.
    pub fn directions(&self, tape: &mut Tape, pairs: &[LabelPair]) -> Result<Var> {
        let mut ra = Vec::with_capacity(pairs.len());
        let mut rb = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if a == b {
                return Err(Error::EqualRelation);
            }
            ra.push(self.row(a)?);
            rb.push(self.row(b)?);
        }
        let ca = tape.gather(self.var, &ra)?;
        let cb = tape.gather(self.var, &rb)?;
        let diff = tape.sub(ca, cb)?;
        tape.l2_normalize(diff)
    }

    /// `v(c_a, c_b)` as a `[d]` vector.
    pub fn proxy_direction(&self, tape: &mut Tape, a: i64, b: i64) -> Result<Var> {
        let m = self.directions(tape, &[(a, b)])?;
        let d = tape.shape(m)[1];
        tape.reshape(m, vec![d])
    }

    /// `(v_f, v_b)` for the pair `(y_i, y_j)`.
    pub fn reference_directions(
        &self,
        tape: &mut Tape,
        y_i: i64,
        y_j: i64,
        rel: Relation,
    ) -> Result<(Var, Var)> {
        let r = reference_pairs(y_i, y_j, rel)?;
        let vf = self.proxy_direction(tape, r.forward.0, r.forward.1)?;
        let vb = self.proxy_direction(tape, r.backward.0, r.backward.1)?;
        Ok((vf, vb))
    }
}

/// Fixed-width age groups: group `k` covers `[origin + k*g, origin + (k+1)*g - 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeGroupScheme {
    pub granularity: i64,
    pub origin: i64,
}

impl AgeGroupScheme {
    pub fn new(granularity: i64, origin: i64) -> Result<Self> {
        if granularity < 1 {
            return Err(Error::config("group_scheme.granularity", "must be >= 1"));
        }
        Ok(AgeGroupScheme {
            granularity,
            origin,
        })
    }

    pub fn group_of(&self, age: i64) -> Result<i64> {
        if age < self.origin {
            return Err(Error::AgeBelowOrigin {
                age,
                origin: self.origin,
            });
        }
        Ok((age - self.origin).div_euclid(self.granularity))
    }

    /// Groups touched by the closed age range.
    pub fn groups_in(&self, age_lo: i64, age_hi: i64) -> Result<std::ops::RangeInclusive<i64>> {
        Ok(self.group_of(age_lo)?..=self.group_of(age_hi)?)
    }

    /// Centre age of `group`, after clipping the group to `[age_lo, age_hi]`.
    pub fn center_age(&self, group: i64, age_lo: i64, age_hi: i64) -> i64 {
        let start = (self.origin + group * self.granularity).max(age_lo);
        let end = (self.origin + (group + 1) * self.granularity - 1).min(age_hi);
        (start + end).div_euclid(2)
    }
}
