//! Analytic copy-circuit model with a known causal map.
//!
//! Residual layout (`d_model = 2 + K`): dim 0 is a query marker set only by
//! the final prompt token, dim 1 is an audio marker set by the audio bias,
//! dims `2..2+K` hold the attribute one-hot carried by the audio frames.
//!
//! Every block is zero except the copy block `c`, whose single head attends
//! from query-marked positions to audio-marked positions with logit `beta`
//! and copies the content dims. The unembedding reads content dim `k` into
//! answer token `k` with gain `gamma`. With identity norms and zero position
//! embeddings:
//!
//! - clean: the last token's content after block `c` is ~one-hot(k), so the
//!   answer logit is ~`gamma` and `p_clean ~= e^gamma / (e^gamma + V - 1)`;
//! - silence: content is zero everywhere, all logits are 0, `p = 1/V`;
//! - patching textual states before site `c` changes nothing (no textual
//!   state differs between clean and corrupted runs there), while patching
//!   the last token at any site `>= c` restores the clean logits exactly.
//!
//! Vocabulary: ids `0..PROMPT_VOCAB` are prompt words (so an all-zero logit
//! vector argmaxes to a prompt word, never to an answer) and ids
//! `PROMPT_VOCAB..PROMPT_VOCAB + K` are the answer tokens, which double as
//! the object (option) tokens of the prompt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Model, ModelConfig, ModelWeights, MultiModalSequence, NormKind, Segment, SequenceElement,
};
use crate::tensor::Tensor2;
use crate::tracing::TraceSample;

/// Early-prompt word ids.
pub const EARLY_PROMPT: [usize; 3] = [0, 1, 2];
/// Late-prompt word ids.
pub const LATE_PROMPT: [usize; 2] = [3, 4];
/// The final query word.
pub const QUERY_TOKEN: usize = 5;
pub const PROMPT_VOCAB: usize = 6;

const QUERY_DIM: usize = 0;
const AUDIO_DIM: usize = 1;
const CONTENT_OFFSET: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub n_layers: usize,
    /// 1-based block holding the copy head.
    pub copy_block: usize,
    pub n_attributes: usize,
    pub attention_gain: f64,
    pub readout_gain: f64,
    pub n_audio_frames: usize,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            n_layers: 4,
            copy_block: 2,
            n_attributes: 4,
            attention_gain: 30.0,
            readout_gain: 10.0,
            n_audio_frames: 1,
            seed: 0,
        }
    }
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("oracle needs at least one layer".into()));
        }
        if self.copy_block == 0 || self.copy_block > self.n_layers {
            return Err(Error::Config(format!(
                "copy block {} outside 1..={}",
                self.copy_block, self.n_layers
            )));
        }
        if self.n_attributes < 2 {
            return Err(Error::Config("oracle needs at least 2 attributes".into()));
        }
        if self.attention_gain.is_nan() || self.attention_gain < 10.0 {
            return Err(Error::Config(format!(
                "attention gain must be >= 10, got {}",
                self.attention_gain
            )));
        }
        if self.readout_gain.is_nan() || self.readout_gain < 5.0 {
            return Err(Error::Config(format!(
                "readout gain must be >= 5, got {}",
                self.readout_gain
            )));
        }
        if self.n_audio_frames == 0 {
            return Err(Error::Config("oracle needs at least one audio frame".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        PROMPT_VOCAB + self.n_attributes
    }

    pub fn answer_token(&self, attribute: usize) -> usize {
        PROMPT_VOCAB + attribute
    }

    pub fn seq_len(&self) -> usize {
        self.n_audio_frames + EARLY_PROMPT.len() + self.n_attributes + LATE_PROMPT.len() + 1
    }

    /// Positions of the textual tokens (everything after the audio).
    pub fn textual_positions(&self) -> Vec<usize> {
        (self.n_audio_frames..self.seq_len()).collect()
    }

    pub fn last_position(&self) -> usize {
        self.seq_len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub clean_sequence: MultiModalSequence,
    pub target: usize,
    pub attribute: usize,
}

/// Construct the copy-circuit model.
pub fn build_oracle(spec: &OracleSpec) -> Result<Model> {
    spec.validate()?;
    let k = spec.n_attributes;
    let d_model = CONTENT_OFFSET + k;
    let config = ModelConfig {
        n_layers: spec.n_layers,
        d_model,
        n_heads: 1,
        d_head: d_model,
        d_ff: 1,
        vocab_size: spec.vocab_size(),
        d_audio: k,
        max_seq_len: spec.seq_len(),
        norm_kind: NormKind::Identity,
    };
    let mut w = ModelWeights::zeros(&config);

    w.token_embedding.set(QUERY_TOKEN, QUERY_DIM, 1.0);
    for a in 0..k {
        w.audio_projection.set(a, CONTENT_OFFSET + a, 1.0);
    }
    w.audio_bias[AUDIO_DIM] = 1.0;

    // Scores are divided by sqrt(d_head) in the forward pass; pre-scale so the
    // query-to-audio logit is exactly `attention_gain`.
    let block = &mut w.blocks[spec.copy_block - 1];
    block.w_q.set(
        QUERY_DIM,
        AUDIO_DIM,
        spec.attention_gain * (d_model as f64).sqrt(),
    );
    block.w_k.set(AUDIO_DIM, AUDIO_DIM, 1.0);
    for a in 0..k {
        let dim = CONTENT_OFFSET + a;
        block.w_v.set(dim, dim, 1.0);
        block.w_o.set(dim, dim, 1.0);
    }

    let mut unembed = Tensor2::zeros(d_model, config.vocab_size);
    for a in 0..k {
        unembed.set(CONTENT_OFFSET + a, spec.answer_token(a), spec.readout_gain);
    }
    w.unembedding = unembed;

    Model::new(config, w)
}

/// The prompt for one attribute: audio frames, early prompt, the K options,
/// late prompt, and the query token.
pub fn oracle_sequence(spec: &OracleSpec, attribute: usize) -> Result<MultiModalSequence> {
    let k = spec.n_attributes;
    let mut els = Vec::with_capacity(spec.seq_len());
    for _ in 0..spec.n_audio_frames {
        let mut features = vec![0.0; k];
        features[attribute] = 1.0;
        els.push(SequenceElement::audio(features));
    }
    els.extend(EARLY_PROMPT.iter().map(|&t| SequenceElement::text(t, Segment::EarlyPrompt)));
    els.extend((0..k).map(|a| SequenceElement::text(spec.answer_token(a), Segment::Object)));
    els.extend(LATE_PROMPT.iter().map(|&t| SequenceElement::text(t, Segment::LatePrompt)));
    els.push(SequenceElement::text(QUERY_TOKEN, Segment::Last));
    MultiModalSequence::new(els)
}

/// Seeded synthetic dataset. Each sample draws its attribute from a PRNG
/// stream keyed by the sample index, so the output does not depend on how
/// generation is scheduled. With `stratified`, sample `i` gets attribute
/// `i mod K` instead.
pub fn gen_dataset(spec: &OracleSpec, n_samples: usize, stratified: bool) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    (0..n_samples)
        .map(|i| {
            let attribute = if stratified {
                i % spec.n_attributes
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i as u64);
                rng.random_range(0..spec.n_attributes)
            };
            Ok(SyntheticSample {
                clean_sequence: oracle_sequence(spec, attribute)?,
                target: spec.answer_token(attribute),
                attribute,
            })
        })
        .collect()
}

/// Samples in tracing form, with ids `oracle-{seed}-{index}`.
pub fn trace_samples(spec: &OracleSpec, samples: &[SyntheticSample]) -> Vec<TraceSample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| TraceSample {
            id: format!("oracle-{}-{:05}", spec.seed, i),
            sequence: s.clean_sequence.clone(),
            target: s.target,
        })
        .collect()
}

/// Expected layer-wise RR over sites `0..=L` when all textual positions are
/// patched: 0 before the copy block, 1 from it on.
pub fn expected_layer_map(spec: &OracleSpec) -> Vec<f64> {
    (0..=spec.n_layers)
        .map(|s| if s >= spec.copy_block { 1.0 } else { 0.0 })
        .collect()
}

/// Expected token-wise RR on a `(site, textual position)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMap {
    pub positions: Vec<usize>,
    /// `values[site][j]` is the RR for patching `positions[j]` at `site`.
    pub values: Vec<Vec<f64>>,
}

/// 1 at `(site >= c, last)`, 0 elsewhere.
pub fn expected_token_map(spec: &OracleSpec) -> TokenMap {
    let positions = spec.textual_positions();
    let last = spec.last_position();
    let values = (0..=spec.n_layers)
        .map(|s| {
            positions
                .iter()
                .map(|&p| if s >= spec.copy_block && p == last { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    TokenMap { positions, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{target_probability, InterventionSpec};
    use crate::tensor::argmax;

    // Closed forms, evaluated independently of the engine:
    //   attention onto the single audio frame, n = 11: e^30 / (e^30 + 10)
    //   p_clean with V = 10: e^10 / (e^10 + 9)
    const ATTN_N11_BETA30: f64 = 0.9999999999990642;
    const P_CLEAN_V10_GAMMA10: f64 = 0.9995915675173919;

    #[test]
    fn default_layout() {
        let spec = OracleSpec::default();
        assert_eq!(spec.vocab_size(), 10);
        assert_eq!(spec.seq_len(), 11);
        let m = build_oracle(&spec).unwrap();
        assert_eq!(m.config().d_model, 6);
    }

    #[test]
    fn clean_run_matches_closed_form() {
        let spec = OracleSpec::default();
        let m = build_oracle(&spec).unwrap();
        let seq = oracle_sequence(&spec, 2).unwrap();
        let out = m.forward(&seq, None, &InterventionSpec::empty()).unwrap();
        let last = spec.last_position();
        let content = out.cache.get(spec.copy_block, last)[CONTENT_OFFSET + 2];
        assert!((content - ATTN_N11_BETA30).abs() < 1e-9);
        assert!(content > 1.0 - 1e-9);
        let p = target_probability(&out.logits, spec.answer_token(2)).unwrap();
        assert!((p - P_CLEAN_V10_GAMMA10).abs() < 1e-9);
        assert!(p > 0.999);
    }

    #[test]
    fn silence_gives_uniform() {
        let spec = OracleSpec::default();
        let m = build_oracle(&spec).unwrap();
        let seq = oracle_sequence(&spec, 1)
            .unwrap()
            .map_audio(|f| vec![0.0; f.len()]);
        let out = m.forward(&seq, None, &InterventionSpec::empty()).unwrap();
        for t in 0..spec.vocab_size() {
            let p = target_probability(&out.logits, t).unwrap();
            assert!((p - 0.1).abs() < 1e-12);
        }
        assert!(argmax(&out.logits).unwrap() < PROMPT_VOCAB);
    }

    #[test]
    fn every_attribute_is_decoded() {
        for k in [2, 4, 6] {
            let spec = OracleSpec {
                n_attributes: k,
                ..OracleSpec::default()
            };
            let m = build_oracle(&spec).unwrap();
            for a in 0..k {
                let seq = oracle_sequence(&spec, a).unwrap();
                let out = m.forward(&seq, None, &InterventionSpec::empty()).unwrap();
                assert_eq!(argmax(&out.logits).unwrap(), spec.answer_token(a));
            }
        }
    }

    #[test]
    fn dataset_determinism_and_stratification() {
        let spec = OracleSpec {
            seed: 7,
            ..OracleSpec::default()
        };
        let a = gen_dataset(&spec, 40, false).unwrap();
        let b = gen_dataset(&spec, 40, false).unwrap();
        assert_eq!(a, b);
        let prefix = gen_dataset(&spec, 10, false).unwrap();
        assert_eq!(&a[..10], &prefix[..]);
        let other = gen_dataset(&OracleSpec { seed: 8, ..spec.clone() }, 40, false).unwrap();
        assert_ne!(a, other);

        let strat = gen_dataset(&spec, 4 * 5, true).unwrap();
        for attr in 0..4 {
            assert_eq!(strat.iter().filter(|s| s.attribute == attr).count(), 5);
        }
        for s in &strat {
            let segs = s.clean_sequence.segments();
            assert_eq!(*segs.last().unwrap(), Segment::Last);
            for seg in Segment::TEXTUAL {
                assert!(segs.contains(&seg));
            }
            assert_eq!(segs.iter().filter(|&&g| g == Segment::Last).count(), 1);
            assert_eq!(s.target, spec.answer_token(s.attribute));
        }
        assert!(gen_dataset(&spec, 0, false).is_err());
    }

    #[test]
    fn expected_maps() {
        let s = |l, c| OracleSpec {
            n_layers: l,
            copy_block: c,
            ..OracleSpec::default()
        };
        assert_eq!(expected_layer_map(&s(4, 2)), vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(expected_layer_map(&s(4, 1)), vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(expected_layer_map(&s(4, 4)), vec![0.0, 0.0, 0.0, 0.0, 1.0]);

        let spec = s(4, 2);
        let map = expected_token_map(&spec);
        let last_col = map.positions.len() - 1;
        assert_eq!(map.values[2][last_col], 1.0);
        assert_eq!(map.values[1][last_col], 0.0);
        assert_eq!(map.values[2][0], 0.0);
        assert_eq!(map.values.len(), 5);
    }

    #[test]
    fn spec_validation() {
        let bad = [
            OracleSpec { copy_block: 5, ..OracleSpec::default() },
            OracleSpec { copy_block: 0, ..OracleSpec::default() },
            OracleSpec { n_attributes: 1, ..OracleSpec::default() },
            OracleSpec { attention_gain: 9.0, ..OracleSpec::default() },
            OracleSpec { readout_gain: 4.0, ..OracleSpec::default() },
            OracleSpec { n_audio_frames: 0, ..OracleSpec::default() },
        ];
        for spec in bad {
            assert!(build_oracle(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn one_clean_frame_of_many_recovers_its_share() {
        // With a audio frames, patching a single clean frame before the copy
        // block puts 1/a of the attribute into the last token's content.
        let spec = OracleSpec {
            n_audio_frames: 4,
            ..OracleSpec::default()
        };
        let m = build_oracle(&spec).unwrap();
        let clean_seq = oracle_sequence(&spec, 3).unwrap();
        let clean = m.forward(&clean_seq, None, &InterventionSpec::empty()).unwrap();
        let silent = clean_seq.map_audio(|f| vec![0.0; f.len()]);
        let patched = m
            .forward(&silent, Some(&clean.cache), &InterventionSpec::single(0, 1))
            .unwrap();
        let content = patched.cache.get(spec.copy_block, spec.last_position())[CONTENT_OFFSET + 3];
        assert!((content - 0.25).abs() < 1e-9, "{content}");
    }
}
