//! Layer-wise and token-wise tracing over a dataset.
//!
//! A layer-wise sweep patches every textual position of a sample at one site
//! and reports the mean RR per site. A token-wise sweep patches one
//! `(site, position)` at a time and summarizes the resulting grid by segment.
//!
//! Clean and corrupted runs (and hence verdicts) are computed once per
//! sample. Cells are evaluated through [`crate::par::map_indexed`] and stored
//! by index, and every mean is reduced in a fixed order, so results are
//! bit-identical for any worker count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InterventionSpec, Model, Segment};
use crate::par::map_indexed;
use crate::tracing::{
    Baseline, CorruptionSpec, ExclusionCounts, TraceSample, Verdict, DEFAULT_EPSILON_GAP,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub epsilon_gap: f64,
    /// Clamp each per-sample RR to `[0, 1]` before averaging.
    pub clamp: bool,
    /// Also patch audio positions (ablation; off by default).
    pub include_audio_positions: bool,
    pub workers: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            epsilon_gap: DEFAULT_EPSILON_GAP,
            clamp: false,
            include_audio_positions: false,
            workers: 1,
        }
    }
}

/// Per-sample clean/corrupted outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    pub verdict: Verdict,
    pub p_clean: f64,
    pub p_corrupted: f64,
}

/// Mean of a set of per-sample values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub n_valid: usize,
}

/// Mean RR, optionally clamping each value to `[0, 1]` first. Values are
/// summed in ascending order, so the result does not depend on the order
/// of `rrs`. `None` for empty input.
pub fn aggregate(rrs: &[f64], clamp: bool) -> Option<Aggregate> {
    if rrs.is_empty() {
        return None;
    }
    let mut vals: Vec<f64> = rrs
        .iter()
        .map(|&v| if clamp { v.clamp(0.0, 1.0) } else { v })
        .collect();
    vals.sort_by(f64::total_cmp);
    let sum: f64 = vals.iter().sum();
    Some(Aggregate {
        mean: sum / vals.len() as f64,
        n_valid: vals.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSite {
    pub site: usize,
    pub mean_rr: f64,
    pub n_valid: usize,
    /// One entry per sample, `None` for excluded samples.
    pub per_sample: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepResult {
    pub samples: Vec<SampleSummary>,
    pub counts: ExclusionCounts,
    pub sites: Vec<LayerSite>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCell {
    pub site: usize,
    pub sample: usize,
    pub position: usize,
    pub segment: Segment,
    pub rr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub site: usize,
    pub segment: Segment,
    /// Across samples, the average of each sample's within-segment mean.
    pub mean_rr: f64,
    /// Across samples, the average of each sample's within-segment max.
    pub max_rr: f64,
    pub n_valid: usize,
}

/// Mean RR per `(site, position)`, present only when every sample shares
/// one prompt template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionGrid {
    pub sites: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// `mean_rr[i][j]` for `sites[i]`, `positions[j]`.
    pub mean_rr: Vec<Vec<f64>>,
    pub n_valid: usize,
}

impl PositionGrid {
    pub fn get(&self, site: usize, position: usize) -> Option<f64> {
        let i = self.sites.iter().position(|&s| s == site)?;
        let j = self.positions.iter().position(|&p| p == position)?;
        Some(self.mean_rr[i][j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSweepResult {
    pub samples: Vec<SampleSummary>,
    pub counts: ExclusionCounts,
    pub sites: Vec<usize>,
    pub cells: Vec<TokenCell>,
    pub segments: Vec<SegmentSummary>,
    pub position_grid: Option<PositionGrid>,
}

/// One fixed intervention applied to every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleSweepResult {
    pub samples: Vec<SampleSummary>,
    pub counts: ExclusionCounts,
    pub patches: Vec<(usize, usize)>,
    pub p_patched: Vec<Option<f64>>,
    pub per_sample: Vec<Option<f64>>,
    pub mean_rr: f64,
    pub n_valid: usize,
}

/// Every site of the model, `0..=n_layers`.
pub fn all_sites(model: &Model) -> Vec<usize> {
    (0..model.config().n_sites()).collect()
}

struct Prepared {
    baselines: Vec<Baseline>,
    samples: Vec<SampleSummary>,
    counts: ExclusionCounts,
}

fn prepare(
    model: &Model,
    samples: &[TraceSample],
    corruption: &CorruptionSpec,
    sites: &[usize],
    opts: &SweepOptions,
) -> Result<Prepared> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_sites = model.config().n_sites();
    if let Some(&bad) = sites.iter().find(|&&s| s >= n_sites) {
        return Err(Error::OutOfRange {
            what: "sweep site",
            index: bad,
            limit: n_sites,
        });
    }
    corruption.validate(model.config().d_audio)?;
    let baselines = map_indexed(samples.len(), opts.workers, |i| {
        Baseline::compute(model, &samples[i], corruption, opts.epsilon_gap)
    })?;
    let counts = ExclusionCounts::from_verdicts(baselines.iter().map(|b| b.verdict));
    if counts.valid == 0 {
        return Err(Error::NoValidSamples(counts));
    }
    let summaries = samples
        .iter()
        .zip(&baselines)
        .map(|(s, b)| SampleSummary {
            id: s.id.clone(),
            verdict: b.verdict,
            p_clean: b.p_clean,
            p_corrupted: b.p_corrupted,
        })
        .collect();
    Ok(Prepared {
        baselines,
        samples: summaries,
        counts,
    })
}

fn swept_positions(sample: &TraceSample, opts: &SweepOptions) -> Vec<usize> {
    if opts.include_audio_positions {
        (0..sample.sequence.len()).collect()
    } else {
        sample.sequence.textual_positions()
    }
}

/// Layer-wise tracing: at each site, patch all textual positions at once.
pub fn layer_sweep(
    model: &Model,
    samples: &[TraceSample],
    corruption: &CorruptionSpec,
    sites: &[usize],
    opts: &SweepOptions,
) -> Result<LayerSweepResult> {
    let prep = prepare(model, samples, corruption, sites, opts)?;
    let positions: Vec<Vec<usize>> = samples.iter().map(|s| swept_positions(s, opts)).collect();
    let n = samples.len();
    let rrs = map_indexed(sites.len() * n, opts.workers, |idx| {
        let (si, sample) = (idx / n, idx % n);
        let patches = InterventionSpec::at_site(sites[si], &positions[sample]);
        prep.baselines[sample].recovery(model, &patches)
    })?;
    let sites = sites
        .iter()
        .enumerate()
        .map(|(si, &site)| {
            let per_sample = rrs[si * n..(si + 1) * n].to_vec();
            let valid: Vec<f64> = per_sample.iter().flatten().copied().collect();
            let agg = aggregate(&valid, opts.clamp).expect("at least one valid sample");
            LayerSite {
                site,
                mean_rr: agg.mean,
                n_valid: agg.n_valid,
                per_sample,
            }
        })
        .collect();
    Ok(LayerSweepResult {
        samples: prep.samples,
        counts: prep.counts,
        sites,
    })
}

/// Token-wise tracing: patch one `(site, position)` at a time.
pub fn token_sweep(
    model: &Model,
    samples: &[TraceSample],
    corruption: &CorruptionSpec,
    sites: &[usize],
    opts: &SweepOptions,
) -> Result<TokenSweepResult> {
    let prep = prepare(model, samples, corruption, sites, opts)?;

    let mut layout = Vec::new();
    for &site in sites {
        for (sample, s) in samples.iter().enumerate() {
            let segs = s.sequence.segments();
            for position in swept_positions(s, opts) {
                layout.push((site, sample, position, segs[position]));
            }
        }
    }
    let rrs = map_indexed(layout.len(), opts.workers, |idx| {
        let (site, sample, position, _) = layout[idx];
        prep.baselines[sample].recovery(model, &InterventionSpec::single(site, position))
    })?;
    let cells: Vec<TokenCell> = layout
        .iter()
        .zip(rrs)
        .map(|(&(site, sample, position, segment), rr)| TokenCell {
            site,
            sample,
            position,
            segment,
            rr,
        })
        .collect();

    let segments = summarize_segments(&cells, sites, samples.len(), opts.clamp);
    let position_grid = position_grid(&cells, samples, sites, opts);
    Ok(TokenSweepResult {
        samples: prep.samples,
        counts: prep.counts,
        sites: sites.to_vec(),
        cells,
        segments,
        position_grid,
    })
}

fn summarize_segments(
    cells: &[TokenCell],
    sites: &[usize],
    n_samples: usize,
    clamp: bool,
) -> Vec<SegmentSummary> {
    let fix = |v: f64| if clamp { v.clamp(0.0, 1.0) } else { v };
    let mut out = Vec::new();
    for &site in sites {
        for segment in Segment::ALL {
            let mut means = Vec::new();
            let mut maxes = Vec::new();
            for sample in 0..n_samples {
                let vals: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.site == site && c.sample == sample && c.segment == segment)
                    .filter_map(|c| c.rr.map(fix))
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                means.push(vals.iter().sum::<f64>() / vals.len() as f64);
                maxes.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            if let (Some(mean), Some(max)) = (aggregate(&means, false), aggregate(&maxes, false)) {
                out.push(SegmentSummary {
                    site,
                    segment,
                    mean_rr: mean.mean,
                    max_rr: max.mean,
                    n_valid: mean.n_valid,
                });
            }
        }
    }
    out
}

fn position_grid(
    cells: &[TokenCell],
    samples: &[TraceSample],
    sites: &[usize],
    opts: &SweepOptions,
) -> Option<PositionGrid> {
    let skeleton = samples[0].sequence.skeleton();
    if samples.iter().any(|s| s.sequence.skeleton() != skeleton) {
        return None;
    }
    let positions = swept_positions(&samples[0], opts);
    let segs = samples[0].sequence.segments();
    let mut mean_rr = Vec::with_capacity(sites.len());
    let mut n_valid = 0;
    for &site in sites {
        let row = positions
            .iter()
            .map(|&p| {
                let vals: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.site == site && c.position == p)
                    .filter_map(|c| c.rr)
                    .collect();
                let agg = aggregate(&vals, opts.clamp).expect("at least one valid sample");
                n_valid = agg.n_valid;
                agg.mean
            })
            .collect();
        mean_rr.push(row);
    }
    Some(PositionGrid {
        sites: sites.to_vec(),
        segments: positions.iter().map(|&p| segs[p]).collect(),
        positions,
        mean_rr,
        n_valid,
    })
}

/// Apply one intervention to every sample.
pub fn single_sweep(
    model: &Model,
    samples: &[TraceSample],
    corruption: &CorruptionSpec,
    patches: &InterventionSpec,
    opts: &SweepOptions,
) -> Result<SingleSweepResult> {
    let n_sites = model.config().n_sites();
    for s in samples {
        patches.validate(n_sites, s.sequence.len())?;
    }
    let prep = prepare(model, samples, corruption, &[], opts)?;
    let results = map_indexed(samples.len(), opts.workers, |i| {
        let b = &prep.baselines[i];
        if !b.verdict.is_valid() {
            return Ok((None, None));
        }
        let p = b.patched_probability(model, patches)?;
        Ok((Some(p), Some((p - b.p_corrupted) / (b.p_clean - b.p_corrupted))))
    })?;
    let (p_patched, per_sample): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let valid: Vec<f64> = per_sample.iter().flatten().copied().collect();
    let agg = aggregate(&valid, opts.clamp).expect("at least one valid sample");
    Ok(SingleSweepResult {
        samples: prep.samples,
        counts: prep.counts,
        patches: patches.iter().collect(),
        p_patched,
        per_sample,
        mean_rr: agg.mean,
        n_valid: agg.n_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{build_oracle, gen_dataset, trace_samples, OracleSpec};

    fn oracle_setup(spec: &OracleSpec, n: usize) -> (Model, Vec<TraceSample>, CorruptionSpec) {
        let model = build_oracle(spec).unwrap();
        let samples = trace_samples(spec, &gen_dataset(spec, n, false).unwrap());
        let silence = CorruptionSpec::zeros(spec.n_attributes);
        (model, samples, silence)
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[0.0, 1.0], false).unwrap().mean, 0.5);
        assert_eq!(aggregate(&[-0.5, 1.5], true).unwrap().mean, 0.5);
        assert_eq!(aggregate(&[-0.5, 1.5], false).unwrap().mean, 0.5);
        assert_eq!(aggregate(&[-0.5, 0.5], true).unwrap().mean, 0.25);
        assert_eq!(aggregate(&[-0.5, 0.5], false).unwrap().mean, 0.0);
        assert!(aggregate(&[], false).is_none());
        let a = [0.1, 0.7, 1e-17, 0.3333, -2.0, 5.5];
        let mut b = a;
        b.reverse();
        b.swap(0, 3);
        assert_eq!(
            aggregate(&a, false).unwrap().mean.to_bits(),
            aggregate(&b, false).unwrap().mean.to_bits()
        );
    }

    #[test]
    fn oracle_layer_step() {
        let spec = OracleSpec::default();
        let (model, samples, silence) = oracle_setup(&spec, 64);
        let r = layer_sweep(&model, &samples, &silence, &all_sites(&model), &SweepOptions::default())
            .unwrap();
        let means: Vec<f64> = r.sites.iter().map(|s| s.mean_rr).collect();
        let expected = [0.0, 0.0, 1.0, 1.0, 1.0];
        for (m, e) in means.iter().zip(expected) {
            assert!((m - e).abs() < 0.01, "{means:?}");
        }
        assert_eq!(r.counts.valid, 64);
        assert!((means[4] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_token_bottleneck() {
        let spec = OracleSpec::default();
        let (model, samples, silence) = oracle_setup(&spec, 16);
        let sites = all_sites(&model);
        let r = token_sweep(&model, &samples, &silence, &sites, &SweepOptions::default()).unwrap();
        let grid = r.position_grid.as_ref().unwrap();
        let last = spec.last_position();
        for &s in &sites {
            for &p in &grid.positions {
                let v = grid.get(s, p).unwrap();
                if p == last && s >= spec.copy_block {
                    assert!((v - 1.0).abs() < 0.01);
                } else {
                    assert!(v.abs() < 0.01, "site {s} pos {p}: {v}");
                }
            }
        }
        let textual: usize = samples.iter().map(|s| s.sequence.textual_positions().len()).sum();
        assert_eq!(r.cells.len(), sites.len() * textual);
        let last_seg = r
            .segments
            .iter()
            .find(|s| s.site == spec.copy_block && s.segment == Segment::Last)
            .unwrap();
        assert!((last_seg.mean_rr - 1.0).abs() < 0.01);
    }

    #[test]
    fn single_sample_segment_mean_is_within_segment_mean() {
        let spec = OracleSpec::default();
        let (model, samples, silence) = oracle_setup(&spec, 1);
        let r = token_sweep(&model, &samples, &silence, &[2], &SweepOptions::default()).unwrap();
        for seg in &r.segments {
            let vals: Vec<f64> = r
                .cells
                .iter()
                .filter(|c| c.segment == seg.segment)
                .map(|c| c.rr.unwrap())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert_eq!(seg.mean_rr, mean);
        }
    }

    #[test]
    fn audio_positions_only_with_flag() {
        let spec = OracleSpec::default();
        let (model, samples, silence) = oracle_setup(&spec, 4);
        let opts = SweepOptions {
            include_audio_positions: true,
            ..SweepOptions::default()
        };
        let r = token_sweep(&model, &samples, &silence, &[0], &opts).unwrap();
        let audio = r
            .segments
            .iter()
            .find(|s| s.segment == Segment::Audio)
            .unwrap();
        // restoring the lone audio frame before the copy block restores everything
        assert!((audio.mean_rr - 1.0).abs() < 1e-6);
        let layers = layer_sweep(&model, &samples, &silence, &[0], &opts).unwrap();
        assert!((layers.sites[0].mean_rr - 1.0).abs() < 1e-6);

        let plain = token_sweep(&model, &samples, &silence, &[0], &SweepOptions::default()).unwrap();
        assert!(plain.segments.iter().all(|s| s.segment != Segment::Audio));
    }

    #[test]
    fn all_excluded_is_an_error() {
        let spec = OracleSpec::default();
        let (model, mut samples, silence) = oracle_setup(&spec, 5);
        for s in &mut samples {
            s.target = 0;
        }
        let err = layer_sweep(&model, &samples, &silence, &[0], &SweepOptions::default()).unwrap_err();
        match err {
            Error::NoValidSamples(c) => assert_eq!(c.excluded_clean_wrong, 5),
            other => panic!("{other}"),
        }
        assert!(matches!(
            layer_sweep(&model, &[], &silence, &[0], &SweepOptions::default()),
            Err(Error::EmptyDataset)
        ));
        let (_, samples, _) = oracle_setup(&spec, 2);
        assert!(layer_sweep(&model, &samples, &silence, &[9], &SweepOptions::default()).is_err());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let spec = OracleSpec {
            n_layers: 3,
            copy_block: 2,
            ..OracleSpec::default()
        };
        let (model, samples, silence) = oracle_setup(&spec, 12);
        let sites = all_sites(&model);
        let one = SweepOptions::default();
        let many = SweepOptions {
            workers: 4,
            ..SweepOptions::default()
        };
        assert_eq!(
            token_sweep(&model, &samples, &silence, &sites, &one).unwrap(),
            token_sweep(&model, &samples, &silence, &sites, &many).unwrap()
        );
        assert_eq!(
            layer_sweep(&model, &samples, &silence, &sites, &one).unwrap(),
            layer_sweep(&model, &samples, &silence, &sites, &many).unwrap()
        );
    }

    #[test]
    fn single_sweep_last_token() {
        let spec = OracleSpec::default();
        let (model, samples, silence) = oracle_setup(&spec, 8);
        let patches = InterventionSpec::single(spec.copy_block, spec.last_position());
        let r = single_sweep(&model, &samples, &silence, &patches, &SweepOptions::default()).unwrap();
        assert!((r.mean_rr - 1.0).abs() < 1e-6);
        assert_eq!(r.n_valid, 8);
        let bad = InterventionSpec::single(0, 99);
        assert!(single_sweep(&model, &samples, &silence, &bad, &SweepOptions::default()).is_err());
    }
}
