use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 9] = ["experiment_id", "scope", "bits", "rank", "seed", "module", "layer", "metric", "value"];

/// The closed set of reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RelErrorHead,
    RelErrorLayer,
    WDiscrepancy,
    MinRank,
    SvMeanMag,
    Ppl,
    PplSigma,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::RelErrorHead,
        Metric::RelErrorLayer,
        Metric::WDiscrepancy,
        Metric::MinRank,
        Metric::SvMeanMag,
        Metric::Ppl,
        Metric::PplSigma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RelErrorHead => "rel_error_head",
            Metric::RelErrorLayer => "rel_error_layer",
            Metric::WDiscrepancy => "w_discrepancy",
            Metric::MinRank => "min_rank",
            Metric::SvMeanMag => "sv_mean_mag",
            Metric::Ppl => "ppl",
            Metric::PplSigma => "ppl_sigma",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            Error::Config(format!("unknown metric {s:?}; known metrics: {}", names.join(", ")))
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One measurement. Fields that do not apply are left empty in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment_id: String,
    pub scope: Option<String>,
    pub bits: Option<u8>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
    pub module: Option<String>,
    pub layer: Option<usize>,
    pub metric: Metric,
    pub value: f64,
}

impl ReportRow {
    pub fn new(experiment_id: impl Into<String>, metric: Metric, value: f64) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            scope: None,
            bits: None,
            rank: None,
            seed: None,
            module: None,
            layer: None,
            metric,
            value,
        }
    }

    pub fn scope(mut self, scope: impl Into<String>) -> Self {
        self.scope = Some(scope.into());
        self
    }

    pub fn bits(mut self, bits: u8) -> Self {
        self.bits = Some(bits);
        self
    }

    pub fn rank(mut self, rank: usize) -> Self {
        self.rank = Some(rank);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn module(mut self, module: impl Into<String>) -> Self {
        self.module = Some(module.into());
        self
    }

    pub fn layer(mut self, layer: usize) -> Self {
        self.layer = Some(layer);
        self
    }

    fn fields(&self) -> [String; 9] {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or(String::new(), T::to_string)
        }
        [
            self.experiment_id.clone(),
            opt(&self.scope),
            opt(&self.bits),
            opt(&self.rank),
            opt(&self.seed),
            opt(&self.module),
            opt(&self.layer),
            self.metric.to_string(),
            // Shortest representation that round-trips exactly.
            format!("{:?}", self.value),
        ]
    }
}

/// Everything about a report that is not a measurement; the wall-clock
/// timestamp lives only here so CSVs of identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// SHA-256 of the model configuration's JSON.
    pub model_config_hash: Option<String>,
    pub quant_config: Option<serde_json::Value>,
    /// Seconds since the Unix epoch when the report was written.
    pub timestamp: u64,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

impl Default for AnalysisReport {
    fn default() -> Self {
        Self::new()
    }
}

impl AnalysisReport {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            metadata: ReportMetadata {
                model_config_hash: None,
                quant_config: None,
                timestamp: 0,
                extra: serde_json::Map::new(),
            },
        }
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if !row.value.is_finite() {
            return Err(Error::domain(
                "report",
                format!("{} value {} is not finite", row.metric, row.value),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: AnalysisReport) {
        self.rows.extend(other.rows);
    }

    pub fn rows_for(&self, metric: Metric) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.metric == metric)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Input(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r.fields()).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Parses a CSV written by [`AnalysisReport::to_csv`], checking the header
    /// and every row against the schema.
    pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let bad = |m: String| Error::Input(format!("report csv: {m}"));
        let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(bad(format!("header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let f = |k: usize| rec.get(k).unwrap_or("");
            fn opt<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, ()> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| ())
                }
            }
            let row_err = || bad(format!("row {}: {:?}", i + 1, rec.iter().collect::<Vec<_>>()));
            let value: f64 = f(8).parse().map_err(|_| row_err())?;
            if !value.is_finite() {
                return Err(row_err());
            }
            rows.push(ReportRow {
                experiment_id: f(0).to_string(),
                scope: opt(f(1)).map_err(|_| row_err())?,
                bits: opt(f(2)).map_err(|_| row_err())?,
                rank: opt(f(3)).map_err(|_| row_err())?,
                seed: opt(f(4)).map_err(|_| row_err())?,
                module: opt(f(5)).map_err(|_| row_err())?,
                layer: opt(f(6)).map_err(|_| row_err())?,
                metric: Metric::parse(f(7)).map_err(|_| row_err())?,
                value,
            });
        }
        Ok(rows)
    }

    /// Writes `<stem>.csv` and `<stem>.json` (metadata) into `dir`, stamping
    /// the metadata with the current time.
    pub fn write(&mut self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        self.metadata.timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let meta = serde_json::to_string_pretty(&self.metadata)?;
        std::fs::write(&json_path, meta).map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}
