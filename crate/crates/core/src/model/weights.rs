use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NormParams {
    pub fn unit(d: usize) -> Self {
        NormParams {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln_attn: NormParams,
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_o: Tensor2,
    pub ln_mlp: NormParams,
    pub w_in: Tensor2,
    pub b_in: Vec<f64>,
    pub w_out: Tensor2,
    pub b_out: Vec<f64>,
}

impl BlockWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        BlockWeights {
            ln_attn: NormParams::unit(d),
            w_q: Tensor2::zeros(d, d),
            w_k: Tensor2::zeros(d, d),
            w_v: Tensor2::zeros(d, d),
            w_o: Tensor2::zeros(d, d),
            ln_mlp: NormParams::unit(d),
            w_in: Tensor2::zeros(d, config.d_ff),
            b_in: vec![0.0; config.d_ff],
            w_out: Tensor2::zeros(config.d_ff, d),
            b_out: vec![0.0; d],
        }
    }
}

/// All parameters of the model. `blocks[b]` holds block `b + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Tensor2,
    pub pos_embedding: Tensor2,
    pub audio_projection: Tensor2,
    pub audio_bias: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: NormParams,
    pub unembedding: Tensor2,
}

/// Shape of a stored parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn dims(self) -> Vec<usize> {
        match self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    pub fn numel(self) -> usize {
        match self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
}

impl ModelWeights {
    /// All-zero weights with unit norms.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        ModelWeights {
            token_embedding: Tensor2::zeros(config.vocab_size, d),
            pos_embedding: Tensor2::zeros(config.max_seq_len, d),
            audio_projection: Tensor2::zeros(config.d_audio, d),
            audio_bias: vec![0.0; d],
            blocks: (0..config.n_layers)
                .map(|_| BlockWeights::zeros(config))
                .collect(),
            final_norm: NormParams::unit(d),
            unembedding: Tensor2::zeros(d, config.vocab_size),
        }
    }

    /// Uniform random init in `[-scale/sqrt(fan_in), scale/sqrt(fan_in))`,
    /// with norm gains jittered around 1. Deterministic in `seed`.
    pub fn random(config: &ModelConfig, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = scale / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor2::from_vec(rows, cols, data).expect("finite by construction")
        };
        let vec_around = |n: usize, center: f64, spread: f64, rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| center + rng.random_range(-spread..spread))
                .collect::<Vec<f64>>()
        };
        let d = config.d_model;
        let norm = |rng: &mut ChaCha8Rng| NormParams {
            gamma: vec_around(d, 1.0, 0.2, rng),
            beta: vec_around(d, 0.0, 0.1, rng),
        };
        let token_embedding = mat(config.vocab_size, d, &mut rng);
        let pos_embedding = mat(config.max_seq_len, d, &mut rng);
        let audio_projection = mat(config.d_audio, d, &mut rng);
        let audio_bias = vec_around(d, 0.0, 0.1, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights {
                ln_attn: norm(&mut rng),
                w_q: mat(d, d, &mut rng),
                w_k: mat(d, d, &mut rng),
                w_v: mat(d, d, &mut rng),
                w_o: mat(d, d, &mut rng),
                ln_mlp: norm(&mut rng),
                w_in: mat(d, config.d_ff, &mut rng),
                b_in: vec_around(config.d_ff, 0.0, 0.1, &mut rng),
                w_out: mat(config.d_ff, d, &mut rng),
                b_out: vec_around(d, 0.0, 0.1, &mut rng),
            })
            .collect();
        let final_norm = norm(&mut rng);
        let unembedding = mat(d, config.vocab_size, &mut rng);
        ModelWeights {
            token_embedding,
            pos_embedding,
            audio_projection,
            audio_bias,
            blocks,
            final_norm,
            unembedding,
        }
    }

    /// Parameters in container order. Block names are 1-based
    /// (`block.1.w_q` is the first block).
    pub fn named_tensors(&self) -> Vec<(String, Shape, &[f64])> {
        let m = |t: &Tensor2| Shape::Matrix(t.rows(), t.cols());
        let v = |x: &Vec<f64>| Shape::Vector(x.len());
        let mut out: Vec<(String, Shape, &[f64])> = vec![
            ("token_embedding".into(), m(&self.token_embedding), self.token_embedding.data()),
            ("pos_embedding".into(), m(&self.pos_embedding), self.pos_embedding.data()),
            ("audio_projection".into(), m(&self.audio_projection), self.audio_projection.data()),
            ("audio_bias".into(), v(&self.audio_bias), &self.audio_bias),
        ];
        for (idx, b) in self.blocks.iter().enumerate() {
            let p = format!("block.{}", idx + 1);
            out.push((format!("{p}.ln_attn.gamma"), v(&b.ln_attn.gamma), &b.ln_attn.gamma));
            out.push((format!("{p}.ln_attn.beta"), v(&b.ln_attn.beta), &b.ln_attn.beta));
            out.push((format!("{p}.w_q"), m(&b.w_q), b.w_q.data()));
            out.push((format!("{p}.w_k"), m(&b.w_k), b.w_k.data()));
            out.push((format!("{p}.w_v"), m(&b.w_v), b.w_v.data()));
            out.push((format!("{p}.w_o"), m(&b.w_o), b.w_o.data()));
            out.push((format!("{p}.ln_mlp.gamma"), v(&b.ln_mlp.gamma), &b.ln_mlp.gamma));
            out.push((format!("{p}.ln_mlp.beta"), v(&b.ln_mlp.beta), &b.ln_mlp.beta));
            out.push((format!("{p}.w_in"), m(&b.w_in), b.w_in.data()));
            out.push((format!("{p}.b_in"), v(&b.b_in), &b.b_in));
            out.push((format!("{p}.w_out"), m(&b.w_out), b.w_out.data()));
            out.push((format!("{p}.b_out"), v(&b.b_out), &b.b_out));
        }
        out.push(("final_norm.gamma".into(), v(&self.final_norm.gamma), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), v(&self.final_norm.beta), &self.final_norm.beta));
        out.push(("unembedding".into(), m(&self.unembedding), self.unembedding.data()));
        out
    }

    /// Expected `(name, shape)` list for a config, in container order.
    pub fn expected_layout(config: &ModelConfig) -> Vec<(String, Shape)> {
        ModelWeights::zeros(config)
            .named_tensors()
            .into_iter()
            .map(|(name, shape, _)| (name, shape))
            .collect()
    }

    /// Check every shape against `config` and every entry for finiteness.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.blocks.len() != config.n_layers {
            return Err(Error::Config(format!(
                "expected {} blocks, found {}",
                config.n_layers,
                self.blocks.len()
            )));
        }
        let expected = ModelWeights::expected_layout(config);
        for ((name, shape, data), (_, want)) in self.named_tensors().into_iter().zip(expected) {
            if shape != want || data.len() != want.numel() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    shape.dims(),
                    want.dims()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("tensor {name} has non-finite entries")));
            }
        }
        Ok(())
    }
}
