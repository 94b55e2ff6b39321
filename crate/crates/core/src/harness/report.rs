use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{HarnessError, Result};

pub const REPORT_SCHEMA: &str = "xstage.report";
pub const REPORT_SCHEMA_VERSION: u32 = 1;

const METRIC_FAMILIES: &[&str] = &[
    "instability",
    "pos_count",
    "loss.cls",
    "loss.l1",
    "loss.giou",
    "loss.total",
    "flops.mix",
    "flops.gen",
    "flops.ratio",
    "flops.stage",
    "params.adapter",
    "params.generator",
    "params.static",
    "params.static_bound",
    "nms.pre",
    "nms.post",
    "gradcheck.max",
    "gradcheck.tolerance",
    "gradcheck.step",
    "gradcheck.seeds",
];

/// Machine-readable result of one command. Metric names are a family from
/// a fixed list with an optional `[stage]` suffix, or `gradcheck.<block>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub schema_version: u32,
    pub command: String,
    pub metrics: BTreeMap<String, f64>,
    pub details: Value,
}

fn known_metric(name: &str) -> bool {
    let family = match name.find('[') {
        Some(open) => {
            let index = &name[open + 1..];
            match index.strip_suffix(']') {
                Some(n) if !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) => &name[..open],
                _ => return name.starts_with("gradcheck."),
            }
        }
        None => name,
    };
    METRIC_FAMILIES.contains(&family) || (family.starts_with("gradcheck.") && family.len() > "gradcheck.".len())
}

impl Report {
    pub fn new(command: &str) -> Self {
        Report {
            schema: REPORT_SCHEMA.to_string(),
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.to_string(),
            metrics: BTreeMap::new(),
            details: Value::Null,
        }
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn set_staged(&mut self, family: &str, stage: usize, value: f64) {
        self.metrics.insert(format!("{family}[{stage}]"), value);
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != REPORT_SCHEMA {
            return Err(HarnessError::Report(format!("unknown schema {:?}", self.schema)));
        }
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(HarnessError::Report(format!(
                "schema version {} is not {REPORT_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        for (name, value) in &self.metrics {
            if !known_metric(name) {
                return Err(HarnessError::Report(format!("unknown metric {name:?}")));
            }
            if !value.is_finite() {
                return Err(HarnessError::Report(format!("metric {name} is {value}")));
            }
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline. Floats are written in shortest
    /// round-trip form, so parsing the text gives back the same bits.
    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Report(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Report> {
        let report: Report = serde_json::from_str(text).map_err(|e| HarnessError::Report(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }
}
