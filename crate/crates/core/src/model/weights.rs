// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::config::ModelConfig;
use crate::scalar::Scalar;

/// Query/key/value/output projections of one attention head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead<T> {
    /// `head_dim x d_model`
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    /// `d_model x head_dim`
    pub output: Matrix<T>,
}

/// Two-layer feed-forward expert `W2 φ(W1 u + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert<T> {
    /// `hidden x d_model`
    pub w_in: Matrix<T>,
    pub b_in: Vec<T>,
    /// `d_model x hidden`
    pub w_out: Matrix<T>,
}

impl<T: Scalar> Expert<T> {
    pub fn zeros(hidden: usize, d_model: usize) -> Self {
        Self {
            w_in: Matrix::zeros(hidden, d_model),
            b_in: vec![T::zero(); hidden],
            w_out: Matrix::zeros(d_model, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_in.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub heads: Vec<AttentionHead<T>>,
    /// `(num_experts [+1 shared]) x d_model`; the shared row is last.
    pub gate: Matrix<T>,
    pub gate_bias: Vec<T>,
    pub experts: Vec<Expert<T>>,
    pub shared: Option<Expert<T>>,
}

/// All parameters of the model. No layer norm; biases only in the
/// gate and in the first expert layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    /// `vocab_size x d_model`
    pub token_embedding: Matrix<T>,
    /// `max_positions x d_model`
    pub position_embedding: Matrix<T>,
    /// `d_model x vocab_size`
    pub unembedding: Matrix<T>,
    pub layers: Vec<Layer<T>>,
}

fn expect_shape<T: Scalar>(name: &str, m: &Matrix<T>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{name}: expected {rows}x{cols}, found {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric(format!("{name}: non-finite entry")));
    }
    Ok(())
}

fn expect_len<T: Scalar>(name: &str, v: &[T], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Shape(format!("{name}: expected length {len}, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{name}: non-finite entry")));
    }
    Ok(())
}

impl<T: Scalar> ModelWeights<T> {
    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let layers = (0..c.num_layers)
            .map(|_| Layer {
                heads: (0..c.num_heads)
                    .map(|_| AttentionHead {
                        query: Matrix::zeros(c.head_dim, c.d_model),
                        key: Matrix::zeros(c.head_dim, c.d_model),
                        value: Matrix::zeros(c.head_dim, c.d_model),
                        output: Matrix::zeros(c.d_model, c.head_dim),
                    })
                    .collect(),
                gate: Matrix::zeros(c.gate_rows(), c.d_model),
                gate_bias: vec![T::zero(); c.gate_rows()],
                experts: (0..c.num_experts)
                    .map(|_| Expert::zeros(c.expert_hidden, c.d_model))
                    .collect(),
                shared: c
                    .has_shared_expert
                    .then(|| Expert::zeros(c.shared_hidden, c.d_model)),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding: Matrix::zeros(c.vocab_size, c.d_model),
            position_embedding: Matrix::zeros(c.max_positions, c.d_model),
            unembedding: Matrix::zeros(c.d_model, c.vocab_size),
            layers,
        })
    }

    /// Checks every tensor against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        expect_shape("token_embedding", &self.token_embedding, c.vocab_size, c.d_model)?;
        expect_shape("position_embedding", &self.position_embedding, c.max_positions, c.d_model)?;
        expect_shape("unembedding", &self.unembedding, c.d_model, c.vocab_size)?;
        if self.layers.len() != c.num_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                c.num_layers,
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != c.num_heads {
                return Err(Error::Shape(format!("layer {l}: wrong head count")));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                let n = |t: &str| format!("layer {l} head {h} {t}");
                expect_shape(&n("query"), &head.query, c.head_dim, c.d_model)?;
                expect_shape(&n("key"), &head.key, c.head_dim, c.d_model)?;
                expect_shape(&n("value"), &head.value, c.head_dim, c.d_model)?;
                expect_shape(&n("output"), &head.output, c.d_model, c.head_dim)?;
            }
            expect_shape(&format!("layer {l} gate"), &layer.gate, c.gate_rows(), c.d_model)?;
            expect_len(&format!("layer {l} gate bias"), &layer.gate_bias, c.gate_rows())?;
            if layer.experts.len() != c.num_experts {
                return Err(Error::Shape(format!("layer {l}: wrong expert count")));
            }
            let check_expert = |name: String, e: &Expert<T>, hidden: usize| -> Result<()> {
                expect_shape(&format!("{name} w_in"), &e.w_in, hidden, c.d_model)?;
                expect_len(&format!("{name} b_in"), &e.b_in, hidden)?;
                expect_shape(&format!("{name} w_out"), &e.w_out, c.d_model, hidden)
            };
            for (j, e) in layer.experts.iter().enumerate() {
                check_expert(format!("layer {l} expert {j}"), e, c.expert_hidden)?;
            }
            match (&layer.shared, c.has_shared_expert) {
                (Some(s), true) => check_expert(format!("layer {l} shared"), s, c.shared_hidden)?,
                (None, false) => {}
                _ => return Err(Error::Shape(format!("layer {l}: shared expert presence disagrees with config"))),
            }
        }
        Ok(())
    }

    /// Visits every parameter in file declaration order.
    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut T)) {
        let mut visit = |m: &mut [T]| m.iter_mut().for_each(&mut f);
        visit(self.token_embedding.as_mut_slice());
        visit(self.position_embedding.as_mut_slice());
        visit(self.unembedding.as_mut_slice());
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                visit(head.query.as_mut_slice());
                visit(head.key.as_mut_slice());
                visit(head.value.as_mut_slice());
                visit(head.output.as_mut_slice());
            }
            visit(layer.gate.as_mut_slice());
            visit(&mut layer.gate_bias);
            for e in layer.experts.iter_mut().chain(layer.shared.iter_mut()) {
                visit(e.w_in.as_mut_slice());
                visit(&mut e.b_in);
                visit(e.w_out.as_mut_slice());
            }
        }
    }

    /// Rounds every parameter to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        self.for_each_param_mut(|v| {
            *v = T::c(f64::from(v.to_f64_lossy() as f32));
        });
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::c(x.to_f64_lossy())).collect::<Vec<U>>();
        let ce = |e: &Expert<T>| Expert {
            w_in: e.w_in.cast(),
            b_in: cv(&e.b_in),
            w_out: e.w_out.cast(),
        };
        ModelWeights {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            unembedding: self.unembedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| AttentionHead {
                            query: h.query.cast(),
                            key: h.key.cast(),
                            value: h.value.cast(),
                            output: h.output.cast(),
                        })
                        .collect(),
                    gate: l.gate.cast(),
                    gate_bias: cv(&l.gate_bias),
                    experts: l.experts.iter().map(ce).collect(),
                    shared: l.shared.as_ref().map(ce),
                })
                .collect(),
        }
    }
}

/// Random baseline weights: standard normal entries scaled by
/// `1/sqrt(d_model)`, drawn from ChaCha8 seeded with `config.seed`.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ModelWeights<T>> {
    let mut weights = ModelWeights::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 1.0 / (config.d_model as f64).sqrt();
    weights.for_each_param_mut(|v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = T::c(z * scale);
    });
    weights.round_to_f32();
    Ok(weights)
}
