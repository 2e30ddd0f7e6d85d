//! Plot-ready experiment reports.
//!
//! Reports are long-format tables with one measurement per row:
//!
//! ```text
//! # seed=7
//! experiment,model,param_name,param,metric,value
//! noise_sweep,ae,sigma,1.0000000000000001e-1,psnr_db,2.6104...e1
//! ```
//!
//! Reals are written with 17 significant digits, lines end in `\n`, and the
//! leading `# key=value` lines record the seed and configuration. The JSON
//! form carries the same content.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 6] = ["experiment", "model", "param_name", "param", "metric", "value"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub experiment: String,
    pub model: String,
    /// What `param` measures: `sigma`, `alpha`, `x`, ...
    pub param_name: String,
    pub param: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub meta: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
}

fn check_field(s: &str) -> Result<()> {
    if s.is_empty() || s.contains([',', '\n', '\r', '"']) {
        return Err(Error::InvalidArgument(format!("report field {s:?} is empty or contains a separator")));
    }
    Ok(())
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.push((key.to_string(), value.to_string().replace('\n', " ")));
        self
    }

    /// Appends a row. Values must be finite.
    pub fn push(
        &mut self,
        experiment: &str,
        model: &str,
        param_name: &str,
        param: f64,
        metric: &str,
        value: f64,
    ) -> Result<()> {
        for f in [experiment, model, param_name, metric] {
            check_field(f)?;
        }
        if !value.is_finite() || !param.is_finite() {
            return Err(Error::NonFinite(format!("{experiment}/{model}/{metric} at {param_name}={param}: {value}")));
        }
        self.rows.push(ReportRow {
            experiment: experiment.into(),
            model: model.into(),
            param_name: param_name.into(),
            param,
            metric: metric.into(),
            value,
        });
        Ok(())
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    /// Rows matching the given model and metric, in insertion order.
    pub fn select<'a>(&'a self, model: &'a str, metric: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.model == model && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&CSV_COLUMNS.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.16e},{},{:.16e}\n",
                r.experiment, r.model, r.param_name, r.param, r.metric, r.value
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let meta: serde_json::Map<String, serde_json::Value> = self
            .meta
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        let doc = serde_json::json!({ "meta": meta, "rows": self.rows });
        let mut s = serde_json::to_string_pretty(&doc).expect("report rows serialize");
        s.push('\n');
        s
    }

    pub fn render(&self, json: bool) -> String {
        if json {
            self.to_json()
        } else {
            self.to_csv()
        }
    }

    pub fn write(&self, path: impl AsRef<Path>, json: bool) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render(json)).map_err(|e| Error::io(path, e))
    }
}
