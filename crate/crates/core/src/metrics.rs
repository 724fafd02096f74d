//! Accuracy summaries, accuracy-gain histograms, resource accounting and the
//! layer-sensitivity harness, with their CSV/JSON forms.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation::run_experiment;
use crate::model::{count_flops, ModelConfig};
use crate::params::LayerTag;
use crate::plugins::plugin_catalog;
use crate::strategies::{PluginOverrides, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub client_ids: Vec<usize>,
    pub per_client: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and population standard deviation of per-client accuracies; client
/// ids are taken as `0..n`.
pub fn summarize(per_client: &[f64]) -> Result<AccuracySummary> {
    summarize_clients(&(0..per_client.len()).collect::<Vec<_>>(), per_client)
}

pub fn summarize_clients(client_ids: &[usize], per_client: &[f64]) -> Result<AccuracySummary> {
    if per_client.is_empty() {
        return Err(Error::Input("no accuracies to summarize".into()));
    }
    if client_ids.len() != per_client.len() {
        return Err(Error::Input("client id and accuracy counts differ".into()));
    }
    let n = per_client.len() as f64;
    let mean = per_client.iter().sum::<f64>() / n;
    let var = per_client.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(AccuracySummary {
        client_ids: client_ids.to_vec(),
        per_client: per_client.to_vec(),
        mean,
        std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainDensity {
    /// `(client_id, method - baseline)`.
    pub gains: Vec<(usize, f64)>,
    pub bins: Vec<GainBin>,
    pub min: f64,
    pub max: f64,
}

/// Histogram of per-client accuracy gains over a baseline, with bins
/// `[k·w, (k+1)·w)` from the lowest to the highest occupied bin.
pub fn gain_density(method: &AccuracySummary, baseline: &AccuracySummary, bin_width: f64) -> Result<GainDensity> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::Input("bin width must be positive".into()));
    }
    let base: BTreeMap<usize, f64> = baseline
        .client_ids
        .iter()
        .copied()
        .zip(baseline.per_client.iter().copied())
        .collect();
    let mine: BTreeMap<usize, f64> = method
        .client_ids
        .iter()
        .copied()
        .zip(method.per_client.iter().copied())
        .collect();
    if base.keys().ne(mine.keys()) || base.len() != baseline.client_ids.len() {
        return Err(Error::Input("method and baseline cover different clients".into()));
    }
    if mine.is_empty() {
        return Err(Error::Input("no clients".into()));
    }
    let gains: Vec<(usize, f64)> = mine.iter().map(|(&id, &a)| (id, a - base[&id])).collect();
    // small slack so values like 0.1/0.05 land in their nominal bin
    let bin_of = |g: f64| (g / bin_width + 1e-9).floor() as i64;
    let lo = gains.iter().map(|&(_, g)| bin_of(g)).min().expect("non-empty");
    let hi = gains.iter().map(|&(_, g)| bin_of(g)).max().expect("non-empty");
    let mut bins: Vec<GainBin> = (lo..=hi)
        .map(|k| GainBin {
            lower: k as f64 * bin_width,
            upper: (k + 1) as f64 * bin_width,
            count: 0,
        })
        .collect();
    for &(_, g) in &gains {
        bins[(bin_of(g) - lo) as usize].count += 1;
    }
    let min = gains.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
    let max = gains.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(GainDensity { gains, bins, min, max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub strategy: String,
    pub storage: usize,
    pub storage_pct: f64,
    pub flops: u64,
    pub flops_pct: f64,
    pub comm: usize,
    pub comm_pct: f64,
}

/// Training FLOPs multiplier relative to one forward pass of the model the
/// strategy runs: APFL trains two full models, first-order Per-FedAvg
/// evaluates two gradients per step.
fn flops_multiplier(strategy: &Strategy) -> u64 {
    match strategy {
        Strategy::Apfl | Strategy::PerFedavg => 2,
        _ => 1,
    }
}

/// Storage, compute and per-round communication of each strategy, with
/// percentages against FedAvg on the same model.
///
/// Storage counts everything resident on a client (APFL keeps a second full
/// model), compute is an analytic forward pass times the strategy
/// multiplier, and communication is the element count of the global part.
pub fn resource_report(
    strategies: &[Strategy],
    config: &ModelConfig,
    overrides: &PluginOverrides,
) -> Result<Vec<ResourceRow>> {
    config.validate()?;
    let raw = |s: &Strategy| -> Result<(String, usize, u64, usize)> {
        let mut catalog = config.catalog();
        let spec = s.plugin_spec(overrides);
        if let Some(spec) = &spec {
            spec.validate(config)?;
            catalog.extend(plugin_catalog(spec, config));
        }
        let part = s.partition_catalog(config, &catalog)?;
        let mut storage = catalog.total();
        if *s == Strategy::Apfl {
            storage *= 2;
        }
        let specs: Vec<_> = spec.iter().collect();
        let flops = count_flops(config, &specs, 1).total() * flops_multiplier(s);
        let comm = catalog.count_ids(&part.global);
        Ok((s.to_string(), storage, flops, comm))
    };
    let (_, s0, f0, c0) = raw(&Strategy::Fedavg)?;
    let pct = |x: f64, base: f64| if base == 0.0 { 0.0 } else { 100.0 * x / base };
    strategies
        .iter()
        .map(|s| {
            let (name, storage, flops, comm) = raw(s)?;
            Ok(ResourceRow {
                strategy: name,
                storage,
                storage_pct: pct(storage as f64, s0 as f64),
                flops,
                flops_pct: pct(flops as f64, f0 as f64),
                comm,
                comm_pct: pct(comm as f64, c0 as f64),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    /// A layer tag, or `all_local` / `all_global` / `classification_head`
    /// for the reference rows.
    pub layer_type: String,
    pub standalone: AccuracySummary,
    pub combined: Option<AccuracySummary>,
    pub overall: Option<f64>,
}

impl SensitivityRow {
    pub fn new(layer_type: impl Into<String>, standalone: AccuracySummary, combined: Option<AccuracySummary>) -> Self {
        let overall = combined.as_ref().map(|c| overall_of(standalone.mean, c.mean));
        SensitivityRow {
            layer_type: layer_type.into(),
            standalone,
            combined,
            overall,
        }
    }
}

/// Overall sensitivity score: the mean of the stand-alone and combined means.
pub fn overall_of(standalone_mean: f64, combined_mean: f64) -> f64 {
    (standalone_mean + combined_mean) / 2.0
}

/// For each tag: one run with the tag local and one with the tag and the
/// classification head local. Followed by the all-local, all-global and
/// head-only reference rows.
pub fn sensitivity_suite(tags: &[LayerTag], base: &ExperimentConfig, jobs: usize) -> Result<Vec<SensitivityRow>> {
    let run = |strategy: Strategy| -> Result<AccuracySummary> {
        let mut cfg = base.clone();
        cfg.strategy = strategy;
        Ok(run_experiment(&cfg, jobs)?.accuracy)
    };
    let mut rows = Vec::new();
    for &tag in tags {
        let standalone = run(Strategy::LayerTypeLocal {
            tags: vec![tag],
            with_head: false,
        })?;
        let combined = run(Strategy::LayerTypeLocal {
            tags: vec![tag],
            with_head: true,
        })?;
        log::info!("sensitivity {tag}: {:.4} / {:.4}", standalone.mean, combined.mean);
        rows.push(SensitivityRow::new(tag.as_str(), standalone, Some(combined)));
    }
    rows.push(SensitivityRow::new("all_local", run(Strategy::Local)?, None));
    rows.push(SensitivityRow::new("all_global", run(Strategy::Fedavg)?, None));
    rows.push(SensitivityRow::new(
        "classification_head",
        run(Strategy::LayerTypeLocal {
            tags: vec![LayerTag::ClassificationHead],
            with_head: false,
        })?,
        None,
    ));
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `client_id,accuracy`
pub fn write_accuracy_csv<W: Write>(summary: &AccuracySummary, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["client_id", "accuracy"]).map_err(csv_error)?;
    for (id, acc) in summary.client_ids.iter().zip(&summary.per_client) {
        out.write_record([id.to_string(), acc.to_string()]).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Parse an accuracy CSV back into a summary.
pub fn read_accuracy_csv<R: std::io::Read>(r: R) -> Result<AccuracySummary> {
    #[derive(Deserialize)]
    struct Row {
        client_id: usize,
        accuracy: f64,
    }
    let mut ids = Vec::new();
    let mut accs = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize::<Row>() {
        let row = row.map_err(csv_error)?;
        ids.push(row.client_id);
        accs.push(row.accuracy);
    }
    summarize_clients(&ids, &accs)
}

/// `strategy,storage,storage_pct,flops,flops_pct,comm,comm_pct`
pub fn write_resources_csv<W: Write>(rows: &[ResourceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// `layer_type,standalone_mean,standalone_std,combined_mean,combined_std,overall`;
/// combined and overall are empty for reference rows.
pub fn write_sensitivity_csv<W: Write>(rows: &[SensitivityRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "layer_type",
        "standalone_mean",
        "standalone_std",
        "combined_mean",
        "combined_std",
        "overall",
    ])
    .map_err(csv_error)?;
    for r in rows {
        out.write_record([
            r.layer_type.clone(),
            r.standalone.mean.to_string(),
            r.standalone.std.to_string(),
            opt(r.combined.as_ref().map(|c| c.mean)),
            opt(r.combined.as_ref().map(|c| c.std)),
            opt(r.overall),
        ])
        .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// `bin_lower,bin_upper,count`
pub fn write_gain_csv<W: Write>(density: &GainDensity, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_lower", "bin_upper", "count"])
        .map_err(csv_error)?;
    for b in &density.bins {
        out.write_record([b.lower.to_string(), b.upper.to_string(), b.count.to_string()])
            .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}
