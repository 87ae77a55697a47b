#![allow(dead_code)]

use causal_trace::model::target_probability;
use causal_trace::{
    InterventionSpec, Model, ModelConfig, ModelWeights, MultiModalSequence, NormKind, Segment,
    SequenceElement,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random small model: `L <= 6`, `d_model <= 32`.
pub fn random_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heads = [1usize, 2, 4][rng.random_range(0..3)];
    let d_head = rng.random_range(1..=32 / n_heads);
    let config = ModelConfig {
        n_layers: rng.random_range(1..=6),
        d_model: n_heads * d_head,
        n_heads,
        d_head,
        d_ff: rng.random_range(1..=48),
        vocab_size: rng.random_range(2..=24),
        d_audio: rng.random_range(1..=6),
        max_seq_len: 16,
        norm_kind: if rng.random_bool(0.5) {
            NormKind::LayerNorm
        } else {
            NormKind::Identity
        },
    };
    let weights = ModelWeights::random(&config, rng.random(), 1.5);
    Model::new(config, weights).unwrap()
}

/// Random sequence with at least one audio frame and the last token at the
/// end.
pub fn random_sequence(config: &ModelConfig, rng: &mut ChaCha8Rng) -> MultiModalSequence {
    let len = rng.random_range(2..=config.max_seq_len);
    let mut els = Vec::with_capacity(len);
    let mut has_audio = false;
    for i in 0..len - 1 {
        let audio = (i == 0 && rng.random_bool(0.5)) || rng.random_bool(0.35);
        if audio || (i == len - 2 && !has_audio) {
            has_audio = true;
            let features = (0..config.d_audio).map(|_| rng.random_range(-2.0..2.0)).collect();
            els.push(SequenceElement::audio(features));
        } else {
            let seg = [Segment::EarlyPrompt, Segment::Object, Segment::LatePrompt]
                [rng.random_range(0..3)];
            els.push(SequenceElement::text(rng.random_range(0..config.vocab_size), seg));
        }
    }
    els.push(SequenceElement::text(
        rng.random_range(0..config.vocab_size),
        Segment::Last,
    ));
    MultiModalSequence::new(els).unwrap()
}

pub fn silence(seq: &MultiModalSequence, d_audio: usize) -> MultiModalSequence {
    let els = seq
        .elements()
        .iter()
        .map(|e| match e {
            SequenceElement::Audio { .. } => SequenceElement::audio(vec![0.0; d_audio]),
            other => other.clone(),
        })
        .collect();
    MultiModalSequence::new(els).unwrap()
}

/// Token whose probability rises the most from corrupted to clean.
pub fn best_target(clean: &[f64], corrupted: &[f64]) -> (usize, f64, f64) {
    (0..clean.len())
        .map(|t| {
            (
                t,
                target_probability(clean, t).unwrap(),
                target_probability(corrupted, t).unwrap(),
            )
        })
        .max_by(|a, b| (a.1 - a.2).total_cmp(&(b.1 - b.2)))
        .unwrap()
}

pub fn patched_probability(
    model: &Model,
    corrupted: &MultiModalSequence,
    clean_cache: &causal_trace::ActivationCache,
    patches: &InterventionSpec,
    target: usize,
) -> f64 {
    let out = model.forward(corrupted, Some(clean_cache), patches).unwrap();
    target_probability(&out.logits, target).unwrap()
}
