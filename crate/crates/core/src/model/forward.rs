//! Forward pass with a full residual-stream cache and mid-pass patching.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{
    BlockWeights, ModelConfig, ModelWeights, MultiModalSequence, NormKind, NormParams,
    SequenceElement, LAYER_NORM_EPS,
};
use crate::tensor::{self, matmul_unchecked, Tensor2};

/// Residual stream at every site: `hidden[s]` is an `n x d_model` matrix,
/// site 0 being the embeddings and site `s >= 1` the output of block `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    hidden: Vec<Tensor2>,
}

impl ActivationCache {
    pub fn n_sites(&self) -> usize {
        self.hidden.len()
    }

    pub fn seq_len(&self) -> usize {
        self.hidden.first().map_or(0, Tensor2::rows)
    }

    pub fn d_model(&self) -> usize {
        self.hidden.first().map_or(0, Tensor2::cols)
    }

    pub fn get(&self, site: usize, position: usize) -> &[f64] {
        self.hidden[site].row(position)
    }

    pub fn site(&self, site: usize) -> &Tensor2 {
        &self.hidden[site]
    }
}

/// Set of `(site, position)` hidden states to overwrite with donor values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterventionSpec {
    patches: BTreeSet<(usize, usize)>,
}

impl InterventionSpec {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build from explicit pairs; duplicates are rejected.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut patches = BTreeSet::new();
        for pair in pairs {
            if !patches.insert(pair) {
                return Err(Error::Intervention(format!(
                    "duplicate patch (site {}, position {})",
                    pair.0, pair.1
                )));
            }
        }
        Ok(InterventionSpec { patches })
    }

    pub fn single(site: usize, position: usize) -> Self {
        InterventionSpec {
            patches: BTreeSet::from([(site, position)]),
        }
    }

    /// Every listed position at one site.
    pub fn at_site(site: usize, positions: &[usize]) -> Self {
        InterventionSpec {
            patches: positions.iter().map(|&p| (site, p)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.patches.iter().copied()
    }

    pub fn validate(&self, n_sites: usize, seq_len: usize) -> Result<()> {
        for &(site, position) in &self.patches {
            if site >= n_sites {
                return Err(Error::OutOfRange {
                    what: "patch site",
                    index: site,
                    limit: n_sites,
                });
            }
            if position >= seq_len {
                return Err(Error::OutOfRange {
                    what: "patch position",
                    index: position,
                    limit: seq_len,
                });
            }
        }
        Ok(())
    }

    fn positions_at(&self, site: usize) -> impl Iterator<Item = usize> + '_ {
        self.patches
            .range((site, 0)..=(site, usize::MAX))
            .map(|&(_, p)| p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub cache: ActivationCache,
}

/// Immutable model: validated config plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Model { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Input embeddings, one row per position.
    pub fn embed(&self, seq: &MultiModalSequence) -> Result<Tensor2> {
        seq.validate_for(&self.config)?;
        let w = &self.weights;
        let mut out = Tensor2::zeros(seq.len(), self.config.d_model);
        for (i, el) in seq.elements().iter().enumerate() {
            let base = match el {
                SequenceElement::Text { token, .. } => w.token_embedding.row(*token).to_vec(),
                SequenceElement::Audio { features } => {
                    let mut v = tensor::vecmat(features, &w.audio_projection)?;
                    for (x, b) in v.iter_mut().zip(&w.audio_bias) {
                        *x += b;
                    }
                    v
                }
            };
            for ((o, b), p) in out
                .row_mut(i)
                .iter_mut()
                .zip(base)
                .zip(w.pos_embedding.row(i))
            {
                *o = b + p;
            }
        }
        Ok(out)
    }

    /// Run the model. After each site is computed, every patch at that site
    /// overwrites the corresponding row with the donor's value, and later
    /// blocks read the patched stream.
    pub fn forward(
        &self,
        seq: &MultiModalSequence,
        donor: Option<&ActivationCache>,
        patches: &InterventionSpec,
    ) -> Result<ForwardOutput> {
        let n = seq.len();
        let n_sites = self.config.n_sites();
        patches.validate(n_sites, n)?;
        if !patches.is_empty() {
            let donor = donor.ok_or_else(|| {
                Error::Intervention("patches given without a donor cache".into())
            })?;
            if donor.n_sites() != n_sites
                || donor.seq_len() != n
                || donor.d_model() != self.config.d_model
            {
                return Err(Error::Shape {
                    op: "donor cache",
                    left: (donor.n_sites(), donor.seq_len()),
                    right: (n_sites, n),
                });
            }
        }

        let mut hidden = Vec::with_capacity(n_sites);
        let mut x = self.embed(seq)?;
        apply_patches(&mut x, 0, donor, patches);
        check_finite(&x, 0)?;
        hidden.push(x.clone());

        for (idx, block) in self.weights.blocks.iter().enumerate() {
            let site = idx + 1;
            x = self.block_forward(block, &x)?;
            apply_patches(&mut x, site, donor, patches);
            check_finite(&x, site)?;
            hidden.push(x.clone());
        }

        let cache = ActivationCache { hidden };
        let logits = self.logits_at(&cache, n - 1)?;
        Ok(ForwardOutput { logits, cache })
    }

    /// Unembed the final-site residual at `position` (after the final norm).
    pub fn logits_at(&self, cache: &ActivationCache, position: usize) -> Result<Vec<f64>> {
        let h = cache.get(cache.n_sites() - 1, position);
        let normed = self.norm(h, &self.weights.final_norm)?;
        let logits = tensor::vecmat(&normed, &self.weights.unembedding)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                site: cache.n_sites() - 1,
                position,
            });
        }
        Ok(logits)
    }

    fn norm(&self, x: &[f64], params: &NormParams) -> Result<Vec<f64>> {
        match self.config.norm_kind {
            NormKind::Identity => Ok(x.to_vec()),
            NormKind::LayerNorm => tensor::layer_norm(x, &params.gamma, &params.beta, LAYER_NORM_EPS),
        }
    }

    fn norm_rows(&self, x: &Tensor2, params: &NormParams) -> Result<Tensor2> {
        if self.config.norm_kind == NormKind::Identity {
            return Ok(x.clone());
        }
        let mut out = Tensor2::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.norm(x.row(r), params)?);
        }
        Ok(out)
    }

    /// Pre-norm block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
    fn block_forward(&self, block: &BlockWeights, x: &Tensor2) -> Result<Tensor2> {
        let n = x.rows();
        let d_head = self.config.d_head;
        let scale = 1.0 / (d_head as f64).sqrt();

        let h = self.norm_rows(x, &block.ln_attn)?;
        let q = matmul_unchecked(&h, &block.w_q)?;
        let k = matmul_unchecked(&h, &block.w_k)?;
        let v = matmul_unchecked(&h, &block.w_v)?;

        let mut heads = Tensor2::zeros(n, self.config.d_model);
        let mut scores = Vec::with_capacity(n);
        for head in 0..self.config.n_heads {
            let cols = head * d_head..(head + 1) * d_head;
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                // causal: keys 0..=i only
                scores.clear();
                scores.extend((0..=i).map(|j| {
                    let kj = &k.row(j)[cols.clone()];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                }));
                let weights = tensor::softmax(&scores);
                let out = &mut heads.row_mut(i)[cols.clone()];
                for (j, wj) in weights.iter().enumerate() {
                    for (o, vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += wj * vj;
                    }
                }
            }
        }
        let attn = matmul_unchecked(&heads, &block.w_o)?;
        let mut resid = x.clone();
        add_in_place(&mut resid, &attn);

        let h2 = self.norm_rows(&resid, &block.ln_mlp)?;
        let mut pre = matmul_unchecked(&h2, &block.w_in)?;
        for r in 0..n {
            for (p, b) in pre.row_mut(r).iter_mut().zip(&block.b_in) {
                *p = tensor::gelu_scalar(*p + b);
            }
        }
        let mut mlp = matmul_unchecked(&pre, &block.w_out)?;
        for r in 0..n {
            for (m, b) in mlp.row_mut(r).iter_mut().zip(&block.b_out) {
                *m += b;
            }
        }
        add_in_place(&mut resid, &mlp);
        Ok(resid)
    }
}

fn add_in_place(acc: &mut Tensor2, other: &Tensor2) {
    for r in 0..acc.rows() {
        for (a, b) in acc.row_mut(r).iter_mut().zip(other.row(r)) {
            *a += b;
        }
    }
}

fn apply_patches(
    x: &mut Tensor2,
    site: usize,
    donor: Option<&ActivationCache>,
    patches: &InterventionSpec,
) {
    if let Some(donor) = donor {
        for pos in patches.positions_at(site) {
            x.row_mut(pos).copy_from_slice(donor.get(site, pos));
        }
    }
}

fn check_finite(x: &Tensor2, site: usize) -> Result<()> {
    match x.first_non_finite_row() {
        Some(position) => Err(Error::NonFinite { site, position }),
        None => Ok(()),
    }
}

/// Probability of `target` under the softmax of `logits`.
pub fn target_probability(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::OutOfRange {
            what: "target token",
            index: target,
            limit: logits.len(),
        });
    }
    Ok(tensor::softmax(logits)[target])
}
