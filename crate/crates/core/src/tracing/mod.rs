//! Clean, corrupted and patched runs for one sample, and the recovery rate
//! that compares them.
//!
//! For a sample with target token `y`:
//!
//! - the clean run sees the original audio and gives `p_clean = P(y)`;
//! - the corrupted run sees every audio frame replaced by the silence vector
//!   and gives `p_corrupted`;
//! - the patched run is the corrupted run with selected residual states
//!   overwritten by the clean run's cached values, giving `p_patched`.
//!
//! `rr = (p_patched - p_corrupted) / (p_clean - p_corrupted)`, reported
//! unclamped. Patching more states does not necessarily raise `rr`; no
//! monotonicity is assumed anywhere.

pub mod dataset;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    target_probability, ActivationCache, InterventionSpec, Model, MultiModalSequence,
};
use crate::tensor::argmax;

pub use dataset::{Dataset, DatasetHeader};

/// Minimum `p_clean - p_corrupted` for a sample to count as valid.
pub const DEFAULT_EPSILON_GAP: f64 = 1e-6;

/// Replacement features for every audio frame in the corrupted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub silence_vector: Vec<f64>,
}

impl CorruptionSpec {
    pub fn zeros(d_audio: usize) -> Self {
        CorruptionSpec {
            silence_vector: vec![0.0; d_audio],
        }
    }

    pub fn validate(&self, d_audio: usize) -> Result<()> {
        if self.silence_vector.len() != d_audio {
            return Err(Error::Length {
                op: "silence vector",
                expected: d_audio,
                got: self.silence_vector.len(),
            });
        }
        if self.silence_vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("silence vector has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub id: String,
    pub sequence: MultiModalSequence,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    ExcludedCleanWrong,
    ExcludedCorruptRight,
    ExcludedNoGap,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Valid => "valid",
            Verdict::ExcludedCleanWrong => "excluded_clean_wrong",
            Verdict::ExcludedCorruptRight => "excluded_corrupt_right",
            Verdict::ExcludedNoGap => "excluded_no_gap",
        }
    }

    pub fn is_valid(self) -> bool {
        self == Verdict::Valid
    }
}

/// Tally of verdicts over a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub valid: usize,
    pub excluded_clean_wrong: usize,
    pub excluded_corrupt_right: usize,
    pub excluded_no_gap: usize,
}

impl ExclusionCounts {
    pub fn from_verdicts(verdicts: impl IntoIterator<Item = Verdict>) -> Self {
        let mut c = ExclusionCounts::default();
        for v in verdicts {
            c.add(v);
        }
        c
    }

    pub fn add(&mut self, verdict: Verdict) {
        match verdict {
            Verdict::Valid => self.valid += 1,
            Verdict::ExcludedCleanWrong => self.excluded_clean_wrong += 1,
            Verdict::ExcludedCorruptRight => self.excluded_corrupt_right += 1,
            Verdict::ExcludedNoGap => self.excluded_no_gap += 1,
        }
    }

    pub fn excluded(&self) -> usize {
        self.excluded_clean_wrong + self.excluded_corrupt_right + self.excluded_no_gap
    }

    pub fn total(&self) -> usize {
        self.valid + self.excluded()
    }
}

impl fmt::Display for ExclusionCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "valid {}, clean_wrong {}, corrupt_right {}, no_gap {}",
            self.valid, self.excluded_clean_wrong, self.excluded_corrupt_right, self.excluded_no_gap
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub p_clean: f64,
    pub p_corrupted: f64,
    pub p_patched: f64,
    /// `None` unless the verdict is valid.
    pub rr: Option<f64>,
    pub verdict: Verdict,
}

/// Output of [`corrupt`].
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub sequence: MultiModalSequence,
    pub frames_replaced: usize,
}

impl Corrupted {
    /// True when the input had no audio, so corruption changed nothing.
    pub fn is_vacuous(&self) -> bool {
        self.frames_replaced == 0
    }
}

/// Replace every audio frame's features with the silence vector. Text,
/// ordering, segment labels and length are untouched.
pub fn corrupt(seq: &MultiModalSequence, corruption: &CorruptionSpec) -> Result<Corrupted> {
    let audio = seq.audio_positions();
    for &pos in &audio {
        if let crate::model::SequenceElement::Audio { features } = &seq.elements()[pos] {
            if features.len() != corruption.silence_vector.len() {
                return Err(Error::Length {
                    op: "corrupt",
                    expected: features.len(),
                    got: corruption.silence_vector.len(),
                });
            }
        }
    }
    if audio.is_empty() {
        log::warn!("corrupting a sequence with no audio frames; corrupted run equals clean run");
    }
    Ok(Corrupted {
        sequence: seq.map_audio(|_| corruption.silence_vector.clone()),
        frames_replaced: audio.len(),
    })
}

/// `(p_patched - p_corrupted) / (p_clean - p_corrupted)`, unclamped. Fails
/// when the clean-minus-corrupted gap is not above `epsilon_gap`.
pub fn recovery_rate(p_clean: f64, p_corrupted: f64, p_patched: f64, epsilon_gap: f64) -> Result<f64> {
    let gap = p_clean - p_corrupted;
    if gap.is_nan() || gap <= epsilon_gap {
        return Err(Error::NoGap {
            gap,
            epsilon: epsilon_gap,
        });
    }
    Ok((p_patched - p_corrupted) / gap)
}

/// Validity filter. Rules are checked in order and the first failure names
/// the verdict: clean prediction wrong, corrupted prediction right, gap too
/// small.
pub fn validate(
    p_clean: f64,
    p_corrupted: f64,
    clean_argmax: usize,
    corrupt_argmax: usize,
    target: usize,
    epsilon_gap: f64,
) -> Verdict {
    if clean_argmax != target {
        Verdict::ExcludedCleanWrong
    } else if corrupt_argmax == target {
        Verdict::ExcludedCorruptRight
    } else if (p_clean - p_corrupted).is_nan() || p_clean - p_corrupted <= epsilon_gap {
        Verdict::ExcludedNoGap
    } else {
        Verdict::Valid
    }
}

/// Clean and corrupted runs for one sample, computed once and reused by
/// every intervention on that sample.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub clean_cache: ActivationCache,
    pub corrupted_sequence: MultiModalSequence,
    pub target: usize,
    pub p_clean: f64,
    pub p_corrupted: f64,
    pub clean_argmax: usize,
    pub corrupt_argmax: usize,
    pub verdict: Verdict,
}

impl Baseline {
    pub fn compute(
        model: &Model,
        sample: &TraceSample,
        corruption: &CorruptionSpec,
        epsilon_gap: f64,
    ) -> Result<Self> {
        let cfg = model.config();
        if sample.target >= cfg.vocab_size {
            return Err(Error::OutOfRange {
                what: "target token",
                index: sample.target,
                limit: cfg.vocab_size,
            });
        }
        corruption.validate(cfg.d_audio)?;
        let clean = model.forward(&sample.sequence, None, &InterventionSpec::empty())?;
        let corrupted_sequence = corrupt(&sample.sequence, corruption)?.sequence;
        let corrupted = model.forward(&corrupted_sequence, None, &InterventionSpec::empty())?;
        let p_clean = target_probability(&clean.logits, sample.target)?;
        let p_corrupted = target_probability(&corrupted.logits, sample.target)?;
        let clean_argmax = argmax(&clean.logits)?;
        let corrupt_argmax = argmax(&corrupted.logits)?;
        let verdict = validate(
            p_clean,
            p_corrupted,
            clean_argmax,
            corrupt_argmax,
            sample.target,
            epsilon_gap,
        );
        Ok(Baseline {
            clean_cache: clean.cache,
            corrupted_sequence,
            target: sample.target,
            p_clean,
            p_corrupted,
            clean_argmax,
            corrupt_argmax,
            verdict,
        })
    }

    /// Target probability of the corrupted run with `patches` taken from the
    /// clean cache.
    pub fn patched_probability(&self, model: &Model, patches: &InterventionSpec) -> Result<f64> {
        let out = model.forward(&self.corrupted_sequence, Some(&self.clean_cache), patches)?;
        target_probability(&out.logits, self.target)
    }

    /// Recovery rate of `patches`, or `None` for an excluded sample (no
    /// patched run is made in that case).
    pub fn recovery(&self, model: &Model, patches: &InterventionSpec) -> Result<Option<f64>> {
        if !self.verdict.is_valid() {
            return Ok(None);
        }
        let p = self.patched_probability(model, patches)?;
        Ok(Some((p - self.p_corrupted) / (self.p_clean - self.p_corrupted)))
    }

    pub fn trace(&self, model: &Model, patches: &InterventionSpec) -> Result<TraceResult> {
        let p_patched = self.patched_probability(model, patches)?;
        let rr = if self.verdict.is_valid() {
            Some((p_patched - self.p_corrupted) / (self.p_clean - self.p_corrupted))
        } else {
            None
        };
        Ok(TraceResult {
            p_clean: self.p_clean,
            p_corrupted: self.p_corrupted,
            p_patched,
            rr,
            verdict: self.verdict,
        })
    }
}

/// All three runs for one sample and one intervention.
pub fn trace_one(
    model: &Model,
    sample: &TraceSample,
    corruption: &CorruptionSpec,
    patches: &InterventionSpec,
    epsilon_gap: f64,
) -> Result<TraceResult> {
    patches.validate(model.config().n_sites(), sample.sequence.len())?;
    Baseline::compute(model, sample, corruption, epsilon_gap)?.trace(model, patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelWeights, NormKind, Segment, SequenceElement};

    fn seq(frames: &[[f64; 2]]) -> MultiModalSequence {
        let mut els: Vec<_> = frames
            .iter()
            .map(|f| SequenceElement::audio(f.to_vec()))
            .collect();
        els.push(SequenceElement::text(0, Segment::EarlyPrompt));
        els.push(SequenceElement::text(1, Segment::Last));
        MultiModalSequence::new(els).unwrap()
    }

    #[test]
    fn corrupt_examples() {
        let s = seq(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let silence = CorruptionSpec::zeros(2);
        let c = corrupt(&s, &silence).unwrap();
        assert_eq!(c.sequence, seq(&[[0.0, 0.0]; 3]));
        assert_eq!(c.frames_replaced, 3);
        assert_eq!(c.sequence.segments(), s.segments());

        let again = corrupt(&c.sequence, &silence).unwrap();
        assert_eq!(again.sequence, c.sequence);

        let text_only = seq(&[]);
        let c = corrupt(&text_only, &silence).unwrap();
        assert!(c.is_vacuous());
        assert_eq!(c.sequence, text_only);

        assert!(corrupt(&s, &CorruptionSpec::zeros(3)).is_err());
    }

    #[test]
    fn recovery_rate_examples() {
        let eps = DEFAULT_EPSILON_GAP;
        assert!((recovery_rate(0.9, 0.1, 0.5, eps).unwrap() - 0.5).abs() < 1e-12);
        assert!((recovery_rate(0.9, 0.1, 0.9, eps).unwrap() - 1.0).abs() < 1e-12);
        assert!(recovery_rate(0.9, 0.1, 0.1, eps).unwrap().abs() < 1e-12);
        assert!(matches!(recovery_rate(0.2, 0.3, 0.25, eps), Err(Error::NoGap { .. })));
        assert!(recovery_rate(0.3, 0.3, 0.3, eps).is_err());
        // unclamped
        assert!(recovery_rate(0.9, 0.1, 1.0, eps).unwrap() > 1.0);
        assert!(recovery_rate(0.9, 0.1, 0.0, eps).unwrap() < 0.0);
    }

    #[test]
    fn validate_rule_order() {
        let eps = DEFAULT_EPSILON_GAP;
        assert_eq!(validate(0.9, 0.1, 2, 0, 1, eps), Verdict::ExcludedCleanWrong);
        // clean wrong wins over corrupt right
        assert_eq!(validate(0.9, 0.1, 2, 1, 1, eps), Verdict::ExcludedCleanWrong);
        assert_eq!(validate(0.9, 0.1, 1, 1, 1, eps), Verdict::ExcludedCorruptRight);
        assert_eq!(validate(0.4, 0.4, 1, 0, 1, eps), Verdict::ExcludedNoGap);
        assert_eq!(validate(0.4, 0.5, 1, 0, 1, eps), Verdict::ExcludedNoGap);
        assert_eq!(validate(0.9, 0.1, 1, 0, 1, eps), Verdict::Valid);
    }

    fn random_model() -> Model {
        let config = ModelConfig {
            n_layers: 3,
            d_model: 6,
            n_heads: 2,
            d_head: 3,
            d_ff: 8,
            vocab_size: 5,
            d_audio: 2,
            max_seq_len: 8,
            norm_kind: NormKind::LayerNorm,
        };
        Model::new(config.clone(), ModelWeights::random(&config, 5, 2.0)).unwrap()
    }

    #[test]
    fn trace_one_endpoints() {
        let model = random_model();
        let s = seq(&[[2.0, -1.5], [0.5, 3.0]]);
        let clean = model.forward(&s, None, &InterventionSpec::empty()).unwrap();
        let target = argmax(&clean.logits).unwrap();
        let sample = TraceSample {
            id: "a".into(),
            sequence: s.clone(),
            target,
        };
        let silence = CorruptionSpec::zeros(2);
        let eps = 0.0;

        let none = trace_one(&model, &sample, &silence, &InterventionSpec::empty(), eps).unwrap();
        assert_eq!(none.p_patched.to_bits(), none.p_corrupted.to_bits());

        let root = InterventionSpec::at_site(0, &(0..s.len()).collect::<Vec<_>>());
        let full = trace_one(&model, &sample, &silence, &root, eps).unwrap();
        assert_eq!(full.p_patched.to_bits(), full.p_clean.to_bits());

        if none.verdict.is_valid() {
            assert_eq!(none.rr, Some(0.0));
            assert_eq!(full.rr, Some(1.0));
        }

        let bad = InterventionSpec::single(9, 0);
        assert!(trace_one(&model, &sample, &silence, &bad, eps).is_err());
    }

    #[test]
    fn excluded_sample_has_no_rr() {
        let model = random_model();
        let s = seq(&[[2.0, -1.5]]);
        let clean = model.forward(&s, None, &InterventionSpec::empty()).unwrap();
        let wrong = (argmax(&clean.logits).unwrap() + 1) % 5;
        let sample = TraceSample {
            id: "w".into(),
            sequence: s,
            target: wrong,
        };
        let r = trace_one(
            &model,
            &sample,
            &CorruptionSpec::zeros(2),
            &InterventionSpec::empty(),
            DEFAULT_EPSILON_GAP,
        )
        .unwrap();
        assert_eq!(r.verdict, Verdict::ExcludedCleanWrong);
        assert_eq!(r.rr, None);
    }
}
