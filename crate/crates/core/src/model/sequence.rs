//! Interleaved audio/text input sequences and their segment labels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Functional region of an input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Audio,
    EarlyPrompt,
    Object,
    LatePrompt,
    Last,
}

impl Segment {
    pub const TEXTUAL: [Segment; 4] = [
        Segment::EarlyPrompt,
        Segment::Object,
        Segment::LatePrompt,
        Segment::Last,
    ];

    pub const ALL: [Segment; 5] = [
        Segment::Audio,
        Segment::EarlyPrompt,
        Segment::Object,
        Segment::LatePrompt,
        Segment::Last,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Audio => "audio",
            Segment::EarlyPrompt => "early_prompt",
            Segment::Object => "object",
            Segment::LatePrompt => "late_prompt",
            Segment::Last => "last",
        }
    }

    pub fn is_textual(self) -> bool {
        self != Segment::Audio
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SequenceElement {
    Text { token: usize, segment: Segment },
    Audio { features: Vec<f64> },
}

impl SequenceElement {
    pub fn text(token: usize, segment: Segment) -> Self {
        SequenceElement::Text { token, segment }
    }

    pub fn audio(features: Vec<f64>) -> Self {
        SequenceElement::Audio { features }
    }

    pub fn segment(&self) -> Segment {
        match self {
            SequenceElement::Text { segment, .. } => *segment,
            SequenceElement::Audio { .. } => Segment::Audio,
        }
    }

    pub fn is_audio(&self) -> bool {
        matches!(self, SequenceElement::Audio { .. })
    }
}

/// A validated input: nonempty, with exactly one `last` text token, placed at
/// the end.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSequence {
    elements: Vec<SequenceElement>,
}

impl MultiModalSequence {
    pub fn new(elements: Vec<SequenceElement>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Sequence("sequence is empty".into()));
        }
        for (i, el) in elements.iter().enumerate() {
            if let SequenceElement::Text { segment, .. } = el {
                if *segment == Segment::Audio {
                    return Err(Error::Sequence(format!(
                        "text token at position {i} labelled as audio"
                    )));
                }
            }
        }
        let lasts = elements
            .iter()
            .filter(|e| e.segment() == Segment::Last)
            .count();
        if lasts != 1 {
            return Err(Error::Sequence(format!(
                "expected exactly one `last` element, found {lasts}"
            )));
        }
        match elements.last() {
            Some(SequenceElement::Text {
                segment: Segment::Last,
                ..
            }) => {}
            _ => {
                return Err(Error::Sequence(
                    "final element must be the `last` text token".into(),
                ))
            }
        }
        Ok(MultiModalSequence { elements })
    }

    /// Check token ids, feature widths and length against a model.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        if self.len() > config.max_seq_len {
            return Err(Error::Sequence(format!(
                "length {} exceeds max_seq_len {}",
                self.len(),
                config.max_seq_len
            )));
        }
        for el in &self.elements {
            match el {
                SequenceElement::Text { token, .. } if *token >= config.vocab_size => {
                    return Err(Error::OutOfRange {
                        what: "token id",
                        index: *token,
                        limit: config.vocab_size,
                    })
                }
                SequenceElement::Audio { features } if features.len() != config.d_audio => {
                    return Err(Error::Length {
                        op: "audio features",
                        expected: config.d_audio,
                        got: features.len(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn elements(&self) -> &[SequenceElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn last_position(&self) -> usize {
        self.elements.len() - 1
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.elements.iter().map(SequenceElement::segment).collect()
    }

    pub fn textual_positions(&self) -> Vec<usize> {
        self.positions_where(|e| !e.is_audio())
    }

    pub fn audio_positions(&self) -> Vec<usize> {
        self.positions_where(SequenceElement::is_audio)
    }

    fn positions_where(&self, pred: impl Fn(&SequenceElement) -> bool) -> Vec<usize> {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| pred(e))
            .map(|(i, _)| i)
            .collect()
    }

    /// Replace every audio frame's features, keeping everything else.
    pub(crate) fn map_audio(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let elements = self
            .elements
            .iter()
            .map(|e| match e {
                SequenceElement::Audio { features } => SequenceElement::Audio {
                    features: f(features),
                },
                other => other.clone(),
            })
            .collect();
        MultiModalSequence { elements }
    }

    /// Layout with audio content erased: two sequences with equal skeletons
    /// share a prompt template position-for-position.
    pub fn skeleton(&self) -> Vec<Option<(usize, Segment)>> {
        self.elements
            .iter()
            .map(|e| match e {
                SequenceElement::Text { token, segment } => Some((*token, *segment)),
                SequenceElement::Audio { .. } => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enforces_unique_trailing_last() {
        let ok = MultiModalSequence::new(vec![
            SequenceElement::audio(vec![0.0]),
            SequenceElement::text(1, Segment::EarlyPrompt),
            SequenceElement::text(2, Segment::Last),
        ])
        .unwrap();
        assert_eq!(ok.textual_positions(), vec![1, 2]);
        assert_eq!(ok.audio_positions(), vec![0]);

        assert!(MultiModalSequence::new(vec![]).is_err());
        assert!(MultiModalSequence::new(vec![SequenceElement::audio(vec![0.0])]).is_err());
        assert!(MultiModalSequence::new(vec![
            SequenceElement::text(2, Segment::Last),
            SequenceElement::text(1, Segment::EarlyPrompt),
        ])
        .is_err());
        assert!(MultiModalSequence::new(vec![
            SequenceElement::text(2, Segment::Last),
            SequenceElement::text(2, Segment::Last),
        ])
        .is_err());
        assert!(MultiModalSequence::new(vec![SequenceElement::text(0, Segment::Audio)]).is_err());
    }
}
