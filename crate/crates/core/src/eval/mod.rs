//! Criterion protocols and the gated pipeline.
//!
//! Every protocol maps a per-case function over the dataset with an
//! [`Executor`], keeps the records in case order and aggregates them per
//! (variant, metric). A provider fault does not discard the cases that
//! already succeeded: the run is returned with status
//! [`RunStatus::Invalid`] and the partial records.

mod consistency;
mod fidelity;
mod pipeline;
mod plausibility;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use consistency::{run_consistency, DoseMode};
pub use fidelity::{
    incremental_deletion_case, run_fidelity_incremental_deletion, run_fidelity_randomization,
    run_fidelity_single_deletion, run_fidelity_whitebox, DeletionOptions, DeletionOrder, FillMode, IncrementalOptions,
    RandomizationOptions,
};
pub use pipeline::{required_capabilities, run_pipeline, Gate, GateConfig, PipelineConfig, PipelineReport};
pub use plausibility::run_plausibility;

use crate::cam::CamMethod;
use crate::error::{Error, ProviderError, Result};
use crate::exec::Executor;
use crate::grid::{GroundTruth, MetricParams, Roi};
use crate::metrics::{aggregate, AggregateRow, Criterion, Metric, MetricRecord};
use crate::phantom::Case;
use crate::provider::Provider;
use crate::refmodel::Prediction;

/// What the protocols run against.
pub struct Harness<'a, E: Executor> {
    pub provider: &'a dyn Provider,
    pub exec: &'a E,
    pub metric: MetricParams,
}

impl<'a, E: Executor> Harness<'a, E> {
    pub fn new(provider: &'a dyn Provider, exec: &'a E) -> Self {
        Self {
            provider,
            exec,
            metric: MetricParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    /// The provider lacks a capability the protocol needs; no records.
    NotSupported,
    /// A provider fault stopped the run; records cover the cases before it.
    Invalid,
}

/// Aggregated outcome of one protocol for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub protocol: String,
    pub criterion: Criterion,
    pub method: CamMethod,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub model_id: String,
    pub rows: Vec<AggregateRow>,
    /// Scalar compared against the fidelity gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_value: Option<f64>,
    /// Present iff a gate applies to this run.
    pub pass: Option<bool>,
    pub seeds: BTreeMap<String, u64>,
    pub params: BTreeMap<String, String>,
}

impl RunResult {
    /// Mean of `metric` pooled over every row whose variant passes `keep`,
    /// weighted by row size.
    pub fn pooled_mean(&self, metric: Metric, keep: impl Fn(&str) -> bool) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in self.rows.iter().filter(|r| r.metric == metric && keep(&r.variant)) {
            sum += r.mean * r.n as f64;
            n += r.n;
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn row(&self, variant: &str, metric: Metric) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.variant == variant && r.metric == metric)
    }
}

/// A run together with the per-case records behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub run: RunResult,
    pub records: Vec<MetricRecord>,
}

impl Evaluation {
    pub fn not_supported(
        protocol: &str,
        criterion: Criterion,
        method: CamMethod,
        provider: &dyn Provider,
        reason: &str,
    ) -> Self {
        Self {
            run: RunResult {
                protocol: protocol.into(),
                criterion,
                method,
                status: RunStatus::NotSupported,
                error: Some(reason.into()),
                model_id: provider.model_id(),
                rows: Vec::new(),
                gate_value: None,
                pass: None,
                seeds: BTreeMap::new(),
                params: BTreeMap::new(),
            },
            records: Vec::new(),
        }
    }
}

/// Appends records for one case.
pub(crate) struct Recorder<'a> {
    case_id: &'a str,
    method: CamMethod,
    criterion: Criterion,
    pub(crate) records: Vec<MetricRecord>,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(case: &'a Case, method: CamMethod, criterion: Criterion) -> Self {
        Self {
            case_id: &case.id,
            method,
            criterion,
            records: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, variant: &str, metric: Metric, value: Option<f64>) {
        self.records.push(MetricRecord {
            case_id: self.case_id.to_string(),
            method: self.method,
            criterion: self.criterion,
            variant: variant.into(),
            metric,
            value,
        });
    }

    pub(crate) fn value(&mut self, variant: &str, metric: Metric, value: f64) {
        self.push(variant, metric, Some(value));
    }
}

/// Undefined metric values become missing records; other errors propagate.
pub(crate) fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub(crate) fn bool_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn roi_center(r: &Roi) -> (f64, f64) {
    ((r.row0 + r.row1 - 1) as f64 / 2.0, (r.col0 + r.col1 - 1) as f64 / 2.0)
}

/// Classification correctness and localization hit of a prediction. The
/// predicted box centre is first mapped to the truth frame by `back`; the
/// hit needs IoU >= 0.5 between an equal-size box there and the truth box.
pub(crate) fn accuracy_pair(
    pred: &Prediction,
    has_lesion: bool,
    truth: Option<&GroundTruth>,
    dims: (usize, usize),
    back: impl Fn((f64, f64)) -> (f64, f64),
) -> (f64, f64) {
    let correct = pred.present == has_lesion;
    let located = match (has_lesion, pred.bbox, truth) {
        (false, _, _) => correct,
        (true, Some(b), Some(t)) => {
            let (r, c) = back(roi_center(&b));
            let clamp = |v: f64, n: usize| libm::round(v).clamp(0.0, (n - 1) as f64) as usize;
            Roi::centered(
                (clamp(r, dims.0), clamp(c, dims.1)),
                b.height(),
                b.width(),
                dims.0,
                dims.1,
            )
            .map(|moved| crate::metrics::iou_box(&moved, &t.bbox) >= 0.5)
            .unwrap_or(false)
        }
        _ => false,
    };
    (bool_value(correct), bool_value(located))
}

pub(crate) struct RunHeader<'a> {
    pub protocol: &'a str,
    pub criterion: Criterion,
    pub method: CamMethod,
    pub seeds: BTreeMap<String, u64>,
    pub params: BTreeMap<String, String>,
}

/// Collects per-case outcomes in case order. Non-provider errors abort the
/// run; the first provider fault marks it invalid.
pub(crate) fn finish(
    provider: &dyn Provider,
    header: RunHeader<'_>,
    per_case: Vec<Result<Vec<MetricRecord>>>,
    gate_value: impl FnOnce(&[AggregateRow]) -> Option<f64>,
) -> Result<Evaluation> {
    let mut records = Vec::new();
    let mut fault: Option<ProviderError> = None;
    for outcome in per_case {
        match outcome {
            Ok(r) if fault.is_none() => records.extend(r),
            Ok(_) => {}
            Err(Error::Provider(e)) => {
                fault.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    let rows = aggregate(&records);
    let gate_value = if fault.is_none() { gate_value(&rows) } else { None };
    Ok(Evaluation {
        run: RunResult {
            protocol: header.protocol.into(),
            criterion: header.criterion,
            method: header.method,
            status: if fault.is_some() {
                RunStatus::Invalid
            } else {
                RunStatus::Complete
            },
            error: fault.map(|e| format!("{e}")),
            model_id: provider.model_id(),
            rows,
            gate_value,
            pass: None,
            seeds: header.seeds,
            params: header.params,
        },
        records,
    })
}

pub(crate) fn mean_of(rows: &[AggregateRow], variant: &str, metric: Metric) -> Option<f64> {
    rows.iter()
        .find(|r| r.variant == variant && r.metric == metric)
        .map(|r| r.mean)
}

pub(crate) fn list<T: core::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}
