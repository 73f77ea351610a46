//! Run configuration and self-contained run reports.
//!
//! Configs are flat key=value text files; CLI flags override file values and
//! the merged snapshot is embedded in every report, so a report plus the code
//! regenerates every table of the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{DeltaStats, QueryLedger};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Flat key=value configuration with typed, field-named validation errors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<RunConfig> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    field: format!("line {}", lineno + 1),
                    reason: "expected key=value".into(),
                });
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    /// CLI flags win over file values.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Config {
                    field: key.to_string(),
                    reason: format!("`{v}` is not a number"),
                })
            })
            .transpose()
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| Error::Config {
                    field: key.to_string(),
                    reason: format!("`{v}` is not a non-negative integer"),
                })
            })
            .transpose()
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.get_u64(key)?.map(|v| v as usize))
    }

    pub fn require_positive_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get_f64(key)? {
            Some(v) if v <= 0.0 => Err(Error::Config {
                field: key.to_string(),
                reason: format!("must be > 0, got {v}"),
            }),
            other => Ok(other),
        }
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }
}

/// Everything a run produced, in one schema-versioned document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub kind: String,
    pub model_id: String,
    pub dataset_id: String,
    pub config: BTreeMap<String, String>,
    pub pre: Option<MetricsReport>,
    pub post: Option<MetricsReport>,
    pub ledger: Option<QueryLedger>,
    pub delta_stats: Option<DeltaStats>,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
    /// artifact path -> sha256 hex digest
    pub artifacts: BTreeMap<String, String>,
}

impl RunReport {
    pub fn new(kind: &str, model_id: &str, dataset_id: &str, config: &RunConfig) -> RunReport {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: kind.to_string(),
            model_id: model_id.to_string(),
            dataset_id: dataset_id.to_string(),
            config: config.snapshot(),
            pre: None,
            post: None,
            ledger: None,
            delta_stats: None,
            warnings: Vec::new(),
            wall_clock_secs: 0.0,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record_artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunReport> {
        let f = std::fs::File::open(path)?;
        let report: RunReport = serde_json::from_reader(std::io::BufReader::new(f))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Renders the aggregate tables from every `*.report.json` under the
/// directory: a pre/post metrics table and a query-complexity table, rows
/// sorted by model id then dataset id.
pub fn render_tables(report_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut reports = Vec::new();
    for entry in std::fs::read_dir(report_dir)? {
        let path = entry?.path();
        if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(".report.json"))
        {
            reports.push(RunReport::load(&path)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::invalid("report_dir", "no *.report.json files found"));
    }
    reports.sort_by(|a, b| (&a.model_id, &a.dataset_id).cmp(&(&b.model_id, &b.dataset_id)));

    let tables_dir = report_dir.join("tables");
    std::fs::create_dir_all(&tables_dir)?;
    let mut written = Vec::new();

    let mut pre_post = String::from(
        "model,dataset,pre_nmi,pre_ari,pre_acc,post_nmi,post_ari,post_acc\n",
    );
    for r in &reports {
        let (pre, post) = match (&r.pre, &r.post) {
            (Some(pre), Some(post)) => (pre, post),
            _ => {
                return Err(Error::Config {
                    field: "pre/post".into(),
                    reason: format!("report for model `{}` is missing metrics", r.model_id),
                })
            }
        };
        pre_post.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.model_id, r.dataset_id, pre.nmi, pre.ari, pre.acc, post.nmi, post.ari, post.acc
        ));
    }
    let pre_post_path = tables_dir.join("pre_post.csv");
    std::fs::write(&pre_post_path, pre_post)?;
    written.push(pre_post_path);

    let mut queries = String::from("model,dataset,batch_queries,batch_size,image_queries\n");
    for r in &reports {
        if let Some(l) = &r.ledger {
            queries.push_str(&format!(
                "{},{},{},{},{}\n",
                r.model_id,
                r.dataset_id,
                l.batch_queries,
                l.batch_size,
                l.batch_queries * l.batch_size as u64
            ));
        }
    }
    let queries_path = tables_dir.join("queries.csv");
    std::fs::write(&queries_path, queries)?;
    written.push(queries_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_overrides_and_typed_errors() {
        let mut config = RunConfig::from_str_content(
            "# comment\nepsilon = 1.5\nseed=7\n\nbatch_size=32\n",
        )
        .unwrap();
        assert_eq!(config.get_f64("epsilon").unwrap(), Some(1.5));
        assert_eq!(config.get_u64("seed").unwrap(), Some(7));
        config.set("epsilon", "2.0"); // flag override wins
        assert_eq!(config.get_f64("epsilon").unwrap(), Some(2.0));
        config.set("epsilon", "abc");
        match config.get_f64("epsilon") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "epsilon"),
            other => panic!("expected config error, got {other:?}"),
        }
        config.set("epsilon", "-3");
        match config.require_positive_f64("epsilon") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "epsilon"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(RunConfig::from_str_content("not a pair\n").is_err());
    }

    #[test]
    fn report_round_trip_and_artifact_hashing() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("table.csv");
        std::fs::write(&artifact, "a,b\n1,2\n").unwrap();
        let config = RunConfig::from_str_content("seed=0\n").unwrap();
        let mut report = RunReport::new("attack", "toy", "synth", &config);
        report.record_artifact(&artifact).unwrap();
        let path = dir.path().join("run.report.json");
        report.save(&path).unwrap();
        let loaded = RunReport::load(&path).unwrap();
        assert_eq!(loaded.kind, "attack");
        assert_eq!(loaded.config.get("seed").map(String::as_str), Some("0"));
        let digest = loaded.artifacts.values().next().unwrap();
        assert_eq!(digest, &sha256_file(&artifact).unwrap());
        assert_eq!(digest.len(), 64);
    }

    #[test]
    fn tables_render_sorted_with_one_row_per_report() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::default();
        for (model, nmi) in [("zeta", 0.5), ("alpha", 0.9)] {
            let mut r = RunReport::new("attack", model, "synth", &config);
            let m = crate::metrics::report(&[0, 1], &[0, 1]).unwrap();
            let mut post = m.clone();
            post.nmi = nmi;
            r.pre = Some(m);
            r.post = Some(post);
            r.ledger = Some(QueryLedger { batch_queries: 4, batch_size: 8, cache_hits: 1 });
            r.save(&dir.path().join(format!("{model}.report.json"))).unwrap();
        }
        let written = render_tables(dir.path()).unwrap();
        let table = std::fs::read_to_string(&written[0]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("alpha,"));
        assert!(lines[2].starts_with("zeta,"));
        let queries = std::fs::read_to_string(&written[1]).unwrap();
        assert!(queries.contains("alpha,synth,4,8,32"));
    }

    #[test]
    fn empty_report_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_tables(dir.path()).is_err());
    }
}
