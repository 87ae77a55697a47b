//! Results documents, CSV rows and figure rendering.
//!
//! A sweep produces one [`ResultsDocument`] (written as `results.json`).
//! Everything else, `results.csv` and the SVG figures, is a pure function of
//! that document, so `trace report` can regenerate it without re-running.

pub mod svg;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Segment};
use crate::sweep::{LayerSweepResult, SingleSweepResult, TokenSweepResult};
use crate::tracing::CorruptionSpec;

pub use svg::{color_for, render_heatmap, render_line_plot, Heatmap};

pub const RESULTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Layers,
    Tokens,
    Single,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Layers => "layers",
            SweepKind::Tokens => "tokens",
            SweepKind::Single => "single",
        }
    }
}

/// Settings that affect results. The worker count is deliberately absent:
/// output must not depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub epsilon_gap: f64,
    pub clamp: bool,
    pub include_audio_positions: bool,
    pub sites: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum SweepResults {
    Layers(LayerSweepResult),
    Tokens(TokenSweepResult),
    Single(SingleSweepResult),
}

impl SweepResults {
    pub fn kind(&self) -> SweepKind {
        match self {
            SweepResults::Layers(_) => SweepKind::Layers,
            SweepResults::Tokens(_) => SweepKind::Tokens,
            SweepResults::Single(_) => SweepKind::Single,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub format_version: u32,
    pub settings: RunSettings,
    pub model_config: ModelConfig,
    /// SHA-256 of the weight container bytes.
    pub model_digest: String,
    pub corruption: CorruptionSpec,
    /// SHA-256 of the canonical dataset JSONL.
    pub dataset_digest: String,
    pub dataset_description: String,
    pub results: SweepResults,
}

impl ResultsDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let doc: ResultsDocument =
            serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if doc.format_version != RESULTS_FORMAT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported format_version {}", doc.format_version),
            ));
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ResultsDocument::from_json(&text, &path.display().to_string())
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub sweep_kind: SweepKind,
    pub site: Option<usize>,
    pub position_or_segment: String,
    pub stat: String,
    pub value: f64,
    pub n_valid: usize,
}

pub const CSV_HEADER: [&str; 6] = [
    "sweep_kind",
    "site",
    "position_or_segment",
    "stat",
    "value",
    "n_valid",
];

/// Flatten a document into CSV rows. Every sweep starts with the verdict
/// counts (`position_or_segment = "dataset"`, empty site).
pub fn report_rows(doc: &ResultsDocument) -> Vec<ReportRow> {
    let kind = doc.results.kind();
    let counts = match &doc.results {
        SweepResults::Layers(r) => r.counts,
        SweepResults::Tokens(r) => r.counts,
        SweepResults::Single(r) => r.counts,
    };
    let mut rows: Vec<ReportRow> = [
        ("valid", counts.valid),
        ("excluded_clean_wrong", counts.excluded_clean_wrong),
        ("excluded_corrupt_right", counts.excluded_corrupt_right),
        ("excluded_no_gap", counts.excluded_no_gap),
    ]
    .into_iter()
    .map(|(stat, n)| ReportRow {
        sweep_kind: kind,
        site: None,
        position_or_segment: "dataset".into(),
        stat: stat.into(),
        value: n as f64,
        n_valid: counts.valid,
    })
    .collect();

    match &doc.results {
        SweepResults::Layers(r) => {
            let scope = if doc.settings.include_audio_positions {
                "all_positions"
            } else {
                "all_textual"
            };
            rows.extend(r.sites.iter().map(|s| ReportRow {
                sweep_kind: kind,
                site: Some(s.site),
                position_or_segment: scope.into(),
                stat: "mean_rr".into(),
                value: s.mean_rr,
                n_valid: s.n_valid,
            }));
        }
        SweepResults::Tokens(r) => {
            for s in &r.segments {
                for (stat, value) in [("mean_rr", s.mean_rr), ("max_rr", s.max_rr)] {
                    rows.push(ReportRow {
                        sweep_kind: kind,
                        site: Some(s.site),
                        position_or_segment: s.segment.as_str().into(),
                        stat: stat.into(),
                        value,
                        n_valid: s.n_valid,
                    });
                }
            }
            if let Some(g) = &r.position_grid {
                for (i, &site) in g.sites.iter().enumerate() {
                    for (j, &p) in g.positions.iter().enumerate() {
                        rows.push(ReportRow {
                            sweep_kind: kind,
                            site: Some(site),
                            position_or_segment: format!("pos_{p}"),
                            stat: "mean_rr".into(),
                            value: g.mean_rr[i][j],
                            n_valid: g.n_valid,
                        });
                    }
                }
            }
        }
        SweepResults::Single(r) => {
            let desc = r
                .patches
                .iter()
                .map(|(s, p)| format!("{s}:{p}"))
                .collect::<Vec<_>>()
                .join(";");
            rows.push(ReportRow {
                sweep_kind: kind,
                site: None,
                position_or_segment: desc,
                stat: "mean_rr".into(),
                value: r.mean_rr,
                n_valid: r.n_valid,
            });
        }
    }
    rows
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.sweep_kind.as_str().to_string(),
            r.site.map(|s| s.to_string()).unwrap_or_default(),
            r.position_or_segment.clone(),
            r.stat.clone(),
            r.value.to_string(),
            r.n_valid.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("utf-8 csv")
}

/// Every file derived from a document, as `(file name, contents)`.
pub fn render_artifacts(doc: &ResultsDocument) -> Result<Vec<(String, String)>> {
    let mut out = vec![("results.csv".to_string(), rows_to_csv(&report_rows(doc)))];
    match &doc.results {
        SweepResults::Layers(r) => {
            let points: Vec<(usize, f64)> = r.sites.iter().map(|s| (s.site, s.mean_rr)).collect();
            out.push((
                "layer_rr.svg".into(),
                render_line_plot("Layer-wise recovery rate", &points)?,
            ));
            out.push((
                "layer_rr_heatmap.svg".into(),
                render_heatmap(&Heatmap {
                    title: "Layer-wise recovery rate".into(),
                    x_label: "patched positions".into(),
                    y_label: "site".into(),
                    rows: r.sites.iter().map(|s| s.site.to_string()).collect(),
                    cols: vec!["all textual".into()],
                    values: r.sites.iter().map(|s| vec![s.mean_rr]).collect(),
                })?,
            ));
        }
        SweepResults::Tokens(r) => {
            let segments: Vec<Segment> = Segment::ALL
                .into_iter()
                .filter(|seg| r.segments.iter().any(|s| s.segment == *seg))
                .collect();
            for (name, title, pick) in [
                ("token_segments_mean.svg", "Token-wise RR (segment mean)", true),
                ("token_segments_max.svg", "Token-wise RR (segment max)", false),
            ] {
                let values = r
                    .sites
                    .iter()
                    .map(|&site| {
                        segments
                            .iter()
                            .map(|seg| {
                                r.segments
                                    .iter()
                                    .find(|s| s.site == site && s.segment == *seg)
                                    .map_or(0.0, |s| if pick { s.mean_rr } else { s.max_rr })
                            })
                            .collect()
                    })
                    .collect();
                out.push((
                    name.into(),
                    render_heatmap(&Heatmap {
                        title: title.into(),
                        x_label: "segment".into(),
                        y_label: "site".into(),
                        rows: r.sites.iter().map(usize::to_string).collect(),
                        cols: segments.iter().map(|s| s.as_str().to_string()).collect(),
                        values,
                    })?,
                ));
            }
            if let Some(g) = &r.position_grid {
                out.push((
                    "token_positions.svg".into(),
                    render_heatmap(&Heatmap {
                        title: "Token-wise RR per position".into(),
                        x_label: "position".into(),
                        y_label: "site".into(),
                        rows: g.sites.iter().map(usize::to_string).collect(),
                        cols: g
                            .positions
                            .iter()
                            .zip(&g.segments)
                            .map(|(p, s)| format!("{p} {s}"))
                            .collect(),
                        values: g.mean_rr.clone(),
                    })?,
                ));
            }
        }
        SweepResults::Single(_) => {}
    }
    Ok(out)
}

/// Write the document and every derived artifact into `dir`.
pub fn write_all(doc: &ResultsDocument, dir: &Path, include_json: bool) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = render_artifacts(doc)?;
    if include_json {
        files.insert(0, ("results.json".into(), doc.to_json()));
    }
    let mut names = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(&name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        names.push(name);
    }
    Ok(names)
}
