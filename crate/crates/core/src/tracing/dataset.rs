//! JSONL dataset format.
//!
//! The first line is a header:
//!
//! ```json
//! {"kind":"header","d_audio":4,"silence_vector":[0.0,0.0,0.0,0.0],"description":"..."}
//! ```
//!
//! (`silence_vector` is optional.) Every following non-empty line is one
//! sample:
//!
//! ```json
//! {"id":"s0","target_token":7,"elements":[{"kind":"audio","features":[1.0,0.0,0.0,0.0]},{"kind":"text","token":0,"segment":"early_prompt"},{"kind":"text","token":5,"segment":"last"}]}
//! ```
//!
//! Text segments are `early_prompt`, `object`, `late_prompt` or `last`; audio
//! elements are always in the `audio` segment.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{MultiModalSequence, Segment, SequenceElement};
use crate::tracing::{CorruptionSpec, TraceSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d_audio: usize,
    pub silence_vector: Option<Vec<f64>>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<TraceSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    kind: String,
    d_audio: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    silence_vector: Option<Vec<f64>>,
    #[serde(default)]
    description: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    id: String,
    target_token: usize,
    elements: Vec<ElementLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ElementLine {
    Text { token: usize, segment: TextSegment },
    Audio { features: Vec<f64> },
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TextSegment {
    EarlyPrompt,
    Object,
    LatePrompt,
    Last,
}

impl From<TextSegment> for Segment {
    fn from(s: TextSegment) -> Self {
        match s {
            TextSegment::EarlyPrompt => Segment::EarlyPrompt,
            TextSegment::Object => Segment::Object,
            TextSegment::LatePrompt => Segment::LatePrompt,
            TextSegment::Last => Segment::Last,
        }
    }
}

fn text_segment(s: Segment) -> TextSegment {
    match s {
        Segment::EarlyPrompt => TextSegment::EarlyPrompt,
        Segment::Object => TextSegment::Object,
        Segment::LatePrompt => TextSegment::LatePrompt,
        Segment::Last => TextSegment::Last,
        Segment::Audio => unreachable!("text elements never carry the audio segment"),
    }
}

impl Dataset {
    /// Parse JSONL text. When `vocab_size` is given, token ids and targets
    /// are range-checked against it.
    pub fn parse(text: &str, origin: &str, vocab_size: Option<usize>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::format(origin, "empty dataset file (no header line)"))?;
        let header: HeaderLine = serde_json::from_str(first)
            .map_err(|e| Error::format(origin, format!("line 1: bad header: {e}")))?;
        if header.kind != "header" {
            return Err(Error::format(
                origin,
                format!("line 1: expected kind \"header\", got {:?}", header.kind),
            ));
        }
        if let Some(s) = &header.silence_vector {
            CorruptionSpec {
                silence_vector: s.clone(),
            }
            .validate(header.d_audio)
            .map_err(|e| Error::format(origin, format!("line 1: {e}")))?;
        }

        let mut samples = Vec::new();
        let mut ids = HashSet::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let fail = |msg: String| Error::format(origin, format!("line {lineno}: {msg}"));
            let raw: SampleLine = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
            let mut elements = Vec::with_capacity(raw.elements.len());
            for el in raw.elements {
                match el {
                    ElementLine::Text { token, segment } => {
                        if let Some(v) = vocab_size.filter(|&v| token >= v) {
                            return Err(fail(format!("token id {token} >= vocab size {v}")));
                        }
                        elements.push(SequenceElement::text(token, segment.into()));
                    }
                    ElementLine::Audio { features } => {
                        if features.len() != header.d_audio {
                            return Err(fail(format!(
                                "audio frame has {} features, header says d_audio = {}",
                                features.len(),
                                header.d_audio
                            )));
                        }
                        if features.iter().any(|v| !v.is_finite()) {
                            return Err(fail("non-finite audio feature".into()));
                        }
                        elements.push(SequenceElement::audio(features));
                    }
                }
            }
            let sequence = MultiModalSequence::new(elements).map_err(|e| fail(e.to_string()))?;
            if let Some(v) = vocab_size.filter(|&v| raw.target_token >= v) {
                return Err(fail(format!(
                    "target token {} >= vocab size {v}",
                    raw.target_token
                )));
            }
            if !ids.insert(raw.id.clone()) {
                return Err(fail(format!("duplicate sample id {:?}", raw.id)));
            }
            samples.push(TraceSample {
                id: raw.id,
                sequence,
                target: raw.target_token,
            });
        }
        Ok(Dataset {
            header: DatasetHeader {
                d_audio: header.d_audio,
                silence_vector: header.silence_vector,
                description: header.description,
            },
            samples,
        })
    }

    pub fn load(path: &Path, vocab_size: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::parse(&text, &path.display().to_string(), vocab_size)
    }

    /// Canonical JSONL serialization: header first, one sample per line,
    /// trailing newline.
    pub fn to_jsonl(&self) -> String {
        let header = HeaderLine {
            kind: "header".into(),
            d_audio: self.header.d_audio,
            silence_vector: self.header.silence_vector.clone(),
            description: self.header.description.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            let line = SampleLine {
                id: s.id.clone(),
                target_token: s.target,
                elements: s
                    .sequence
                    .elements()
                    .iter()
                    .map(|e| match e {
                        SequenceElement::Text { token, segment } => ElementLine::Text {
                            token: *token,
                            segment: text_segment(*segment),
                        },
                        SequenceElement::Audio { features } => ElementLine::Audio {
                            features: features.clone(),
                        },
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    /// Silence from the header, or zeros.
    pub fn default_corruption(&self) -> CorruptionSpec {
        match &self.header.silence_vector {
            Some(v) => CorruptionSpec {
                silence_vector: v.clone(),
            },
            None => CorruptionSpec::zeros(self.header.d_audio),
        }
    }
}
