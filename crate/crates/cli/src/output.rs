//! CSV emission and all-or-nothing writes into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use metaover::experiments::{CellSummary, Metric, SweepRecord};
use metaover::stats::fmt_f64;
use metaover::MetaMethod;

use crate::error::{CliError, CliResult};

pub const RECORDS_SCHEMA: &str = "metaover-records/1";
pub const SUMMARY_SCHEMA: &str = "metaover-summary/1";

/// First line of every output file.
pub fn header_line(schema: &str, seed: u64) -> String {
    format!("# schema={schema} seed={seed}\n")
}

/// Files are written into a hidden directory inside `dir` and renamed into
/// place only after every one of them was written successfully.
pub struct Staging {
    dir: PathBuf,
    tmp: tempfile::TempDir,
    files: Vec<String>,
}

impl Staging {
    /// `dir` must already exist; it is never created.
    pub fn new(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::user("io", format!("output directory {} does not exist", dir.display())));
        }
        let tmp = tempfile::Builder::new()
            .prefix(".metaover-")
            .tempdir_in(dir)
            .map_err(|e| CliError::user("io", format!("output directory {} is not writable: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), tmp, files: Vec::new() })
    }

    pub fn add(&mut self, name: &str, contents: &str) -> CliResult<()> {
        fs::write(self.tmp.path().join(name), contents)
            .map_err(|e| CliError::internal("io", format!("writing {name}: {e}")))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn commit(self) -> CliResult<Vec<PathBuf>> {
        let mut out = Vec::new();
        for name in &self.files {
            let dest = self.dir.join(name);
            fs::rename(self.tmp.path().join(name), &dest)
                .map_err(|e| CliError::internal("io", format!("moving {name} into place: {e}")))?;
            out.push(dest);
        }
        Ok(out)
    }
}

fn csv_text(header: &str, rows: Vec<Vec<String>>) -> CliResult<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::internal("io", e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| CliError::internal("io", e.to_string()))?;
    Ok(header.to_string() + &String::from_utf8(body).expect("csv output is UTF-8"))
}

pub fn method_name(m: MetaMethod) -> &'static str {
    match m {
        MetaMethod::Erm => "erm",
        MetaMethod::Maml { .. } => "maml",
        MetaMethod::Imaml { .. } => "imaml",
    }
}

fn hyper(m: MetaMethod) -> String {
    m.hyperparameter().map(fmt_f64).unwrap_or_default()
}

const CELL_COLUMNS: [&str; 9] = ["cell", "grid", "method", "hyperparameter", "beta", "sigma_omega", "d", "M", "N"];

fn cell_fields(c: &metaover::experiments::Cell) -> Vec<String> {
    vec![
        c.index.to_string(),
        c.grid.to_string(),
        method_name(c.method).into(),
        hyper(c.method),
        fmt_f64(c.beta),
        fmt_f64(c.sigma_omega),
        c.d.to_string(),
        c.m.to_string(),
        c.n.to_string(),
    ]
}

/// One row per (cell, seed). Wall time is left out so the file depends only
/// on the configuration.
pub fn records_csv(records: &[SweepRecord], seed: u64) -> CliResult<String> {
    let mut head: Vec<String> = CELL_COLUMNS.iter().map(|s| s.to_string()).collect();
    head.extend(
        [
            "seed_index",
            "seed",
            "rank",
            "excess_risk",
            "excess_mc",
            "mc_stderr",
            "population_risk",
            "cross_task_variance",
            "bias",
            "per_task_variance",
            "trace_c1",
            "trace_c2",
            "bound",
            "r0",
            "k_star",
            "big_r_kstar",
            "heterogeneity_q",
            "heterogeneity_w",
            "status",
        ]
        .map(String::from),
    );
    let mut rows = vec![head];
    for r in records {
        let mut row = cell_fields(&r.cell);
        row.extend([r.seed_index.to_string(), r.seed.to_string(), r.rank.to_string()]);
        row.extend(
            [
                r.excess_risk,
                r.excess_mc,
                r.mc_stderr,
                r.population_risk,
                r.cross_task_variance,
                r.bias,
                r.per_task_variance,
                r.trace_c1,
                r.trace_c2,
                r.bound,
                r.r0,
            ]
            .map(fmt_f64),
        );
        row.push(r.k_star.map(|k| k.to_string()).unwrap_or_default());
        row.extend([r.big_r_kstar, r.heterogeneity_q, r.heterogeneity_w].map(fmt_f64));
        row.push(r.status.clone());
        rows.push(row);
    }
    csv_text(&header_line(RECORDS_SCHEMA, seed), rows)
}

/// Per-cell mean, stderr, median and count of every metric.
pub fn summary_csv(summaries: &[CellSummary], seed: u64) -> CliResult<String> {
    let mut head: Vec<String> = CELL_COLUMNS.iter().map(|s| s.to_string()).collect();
    head.extend(["records", "failed"].map(String::from));
    for m in Metric::ALL {
        for stat in ["mean", "stderr", "median", "n"] {
            head.push(format!("{}_{stat}", m.name()));
        }
    }
    let mut rows = vec![head];
    for s in summaries {
        let mut row = cell_fields(&s.cell);
        row.extend([s.records.to_string(), s.failed.to_string()]);
        for m in Metric::ALL {
            let st = s.get(m);
            row.extend([fmt_f64(st.mean), fmt_f64(st.stderr), fmt_f64(st.median), st.n.to_string()]);
        }
        rows.push(row);
    }
    csv_text(&header_line(SUMMARY_SCHEMA, seed), rows)
}

/// Generic table with the standard header line.
pub fn table_csv(schema: &str, seed: u64, rows: Vec<Vec<String>>) -> CliResult<String> {
    csv_text(&header_line(schema, seed), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting_and_header() {
        let text = table_csv("t/1", 3, vec![vec!["a".into(), "b".into()], vec!["x,y".into(), "q\"z".into()]]).unwrap();
        assert_eq!(text, "# schema=t/1 seed=3\na,b\r\n\"x,y\",\"q\"\"z\"\r\n");
    }

    #[test]
    fn staging_is_all_or_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Staging::new(dir.path()).unwrap();
        s.add("a.csv", "1").unwrap();
        assert!(!dir.path().join("a.csv").exists());
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("a.csv")).unwrap(), "1");
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);

        let missing = dir.path().join("nope");
        assert_eq!(Staging::new(&missing).err().unwrap().code, 2);
    }
}
