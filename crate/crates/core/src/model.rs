//! Encoder trunk with parallel age/identity projection heads, and the scalar
//! regression head used for age estimation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub d_age: usize,
    /// Zero disables the identity head (age-estimation mode).
    pub d_id: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            d_age: 16,
            d_id: 0,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.d_age == 0 {
            return Err(Error::config("model.d_age", "must be >= 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden_dims", "every width must be >= 1"));
        }
        Ok(())
    }

    pub fn trunk_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub trunk: Vec<Linear>,
    pub age_head: Tensor,
    pub id_head: Option<Tensor>,
}

fn uniform(rng: &mut seed::Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("shape")
        .with_grad()
}

/// Draws parameters with a uniform fan-in scheme, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_encoder(spec: &EncoderSpec) -> Result<EncoderParams> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[stream::ENCODER]);
    let mut trunk = Vec::with_capacity(spec.hidden_dims.len());
    let mut fan_in = spec.input_dim;
    for &width in &spec.hidden_dims {
        let bound = 1.0 / (fan_in as f64).sqrt();
        trunk.push(Linear {
            weight: uniform(&mut rng, &[fan_in, width], bound),
            bias: uniform(&mut rng, &[width], bound),
        });
        fan_in = width;
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let age_head = uniform(&mut rng, &[fan_in, spec.d_age], bound);
    let id_head = (spec.d_id > 0).then(|| uniform(&mut rng, &[fan_in, spec.d_id], bound));
    Ok(EncoderParams {
        spec: spec.clone(),
        trunk,
        age_head,
        id_head,
    })
}

/// Tape handles for every encoder parameter, in [`EncoderParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    trunk: Vec<(Var, Var)>,
    age_head: Var,
    id_head: Option<Var>,
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.trunk.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.push(self.age_head);
        v.extend(self.id_head);
        v
    }

    /// Handles of the trunk parameters only.
    pub fn trunk_vars(&self) -> Vec<Var> {
        self.trunk.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn age_head(&self) -> Var {
        self.age_head
    }

    pub fn id_head(&self) -> Option<Var> {
        self.id_head
    }
}

/// Output of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub trunk: Var,
    pub z_age: Var,
    pub z_id: Option<Var>,
}

impl EncoderParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self
            .trunk
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        v.push(&self.age_head);
        v.extend(self.id_head.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .trunk
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        v.push(&mut self.age_head);
        v.extend(self.id_head.as_mut());
        v
    }

    /// Registers the parameters on `tape`; `trainable = false` freezes them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let trunk = self
            .trunk
            .iter()
            .map(|l| (reg(&l.weight), reg(&l.bias)))
            .collect();
        let age_head = reg(&self.age_head);
        let id_head = self.id_head.as_ref().map(reg);
        BoundEncoder {
            trunk,
            age_head,
            id_head,
        }
    }

    /// Wraps handles already on a tape, given in [`EncoderParams::tensors`] order.
    pub fn attach(&self, vars: &[Var]) -> Result<BoundEncoder> {
        let want = self.tensors().len();
        if vars.len() != want {
            return Err(Error::LengthMismatch {
                what: "encoder handles",
                left: vars.len(),
                right: want,
            });
        }
        let n = self.trunk.len();
        Ok(BoundEncoder {
            trunk: (0..n).map(|k| (vars[2 * k], vars[2 * k + 1])).collect(),
            age_head: vars[2 * n],
            id_head: self.id_head.as_ref().map(|_| vars[2 * n + 1]),
        })
    }

    /// Encodes a `[B, input_dim]` batch. With `grl = Some(lambda)` a gradient
    /// reversal node sits between the trunk output and the age head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        x: Var,
        grl: Option<f64>,
    ) -> Result<Features> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                what: "encoder input",
                expected: self.spec.input_dim,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let mut h = x;
        for &(w, b) in &bound.trunk {
            let lin = tape.matmul(h, w)?;
            let pre = tape.add(lin, b)?;
            h = match self.spec.activation {
                Activation::Tanh => tape.tanh(pre),
                Activation::Identity => pre,
            };
        }
        let age_in = match grl {
            Some(lambda) => tape.grad_reverse(h, lambda)?,
            None => h,
        };
        let z_age = tape.matmul(age_in, bound.age_head)?;
        let z_id = match bound.id_head {
            Some(w) => Some(tape.matmul(h, w)?),
            None => None,
        };
        Ok(Features {
            trunk: h,
            z_age,
            z_id,
        })
    }

    /// Encodes plain rows without recording gradients.
    pub fn encode(&self, rows: &[Vec<f64>]) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch_tensor(rows, self.spec.input_dim)?);
        let f = self.forward(&mut tape, &bound, x, None)?;
        let z_age = tape.value(f.z_age).clone();
        let z_id = f.z_id.map(|v| tape.value(v).clone());
        Ok((z_age, z_id))
    }
}

/// Stacks rows into a `[B, dim]` tensor, rejecting rows of the wrong width.
pub fn batch_tensor(rows: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "input row",
                expected: dim,
                got: r.len(),
            });
        }
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), dim, data)
}

/// Linear map `wᵀz + b` from an age feature to a scalar age.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionHead {
    /// `[d_age, 1]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl RegressionHead {
    pub fn zeros(d_age: usize) -> Self {
        RegressionHead {
            weight: Tensor::zeros(&[d_age, 1]).with_grad(),
            bias: Tensor::scalar(0.0).with_grad(),
        }
    }

    pub fn d_age(&self) -> usize {
        self.weight.rows()
    }

    pub fn predict_age(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.d_age() {
            return Err(Error::DimensionMismatch {
                what: "regression head",
                expected: self.d_age(),
                got: z.len(),
            });
        }
        Ok(crate::autodiff::dot(self.weight.data(), z) + self.bias.item())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        }
    }

    /// Predictions for a `[N, d_age]` feature batch, as a `[N]` vector.
    pub fn predict_batch(tape: &mut Tape, (w, b): (Var, Var), z: Var) -> Result<Var> {
        let n = tape.shape(z)[0];
        let lin = tape.matmul(z, w)?;
        let flat = tape.reshape(lin, vec![n])?;
        tape.add(flat, b)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}
