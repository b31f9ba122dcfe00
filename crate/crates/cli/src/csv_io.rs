//! `metrics.csv` and `scores.csv`.
//!
//! `metrics.csv` starts with a `# config_hash=<sha256>` comment line, then a
//! header and one row per (policy, seed, round):
//!
//! ```text
//! policy,seed,round,labels_used,test_dsc,val_dsc,mean_pool_score,spearman_score_vs_rdsc
//! ```
//!
//! Rows of policy `full` hold the model trained on the whole annotated pool
//! (round 0). Undefined values are written as `NA`. `scores.csv` lists every
//! pool score behind those rows:
//!
//! ```text
//! policy,seed,round,sample_id,l_dsc,m_dsc,mean_score,r_dsc
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::CliError;

pub const METRICS_HEADER: [&str; 8] = [
    "policy",
    "seed",
    "round",
    "labels_used",
    "test_dsc",
    "val_dsc",
    "mean_pool_score",
    "spearman_score_vs_rdsc",
];

pub const SCORES_HEADER: [&str; 8] = [
    "policy",
    "seed",
    "round",
    "sample_id",
    "l_dsc",
    "m_dsc",
    "mean_score",
    "r_dsc",
];

pub const FULL_POLICY: &str = "full";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub policy: String,
    pub seed: u64,
    pub round: usize,
    pub labels_used: usize,
    pub test_dsc: f64,
    pub val_dsc: f64,
    pub mean_pool_score: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub policy: String,
    pub seed: u64,
    pub round: usize,
    pub sample_id: String,
    pub l_dsc: f64,
    pub m_dsc: f64,
    pub mean_score: f64,
    pub r_dsc: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| x.to_string())
}

impl MetricsRow {
    pub fn fields(&self) -> [String; 8] {
        [
            self.policy.clone(),
            self.seed.to_string(),
            self.round.to_string(),
            self.labels_used.to_string(),
            self.test_dsc.to_string(),
            self.val_dsc.to_string(),
            opt(self.mean_pool_score),
            opt(self.spearman),
        ]
    }
}

impl ScoreRow {
    pub fn fields(&self) -> [String; 8] {
        [
            self.policy.clone(),
            self.seed.to_string(),
            self.round.to_string(),
            self.sample_id.clone(),
            self.l_dsc.to_string(),
            self.m_dsc.to_string(),
            self.mean_score.to_string(),
            opt(self.r_dsc),
        ]
    }
}

/// A CSV file written row by row and flushed after every write, so a
/// failed run leaves every completed row on disk.
pub struct CsvSink {
    writer: csv::Writer<BufWriter<File>>,
    path: String,
}

impl CsvSink {
    pub fn create(path: &Path, comment: Option<&str>, header: &[&str]) -> Result<Self, CliError> {
        let name = path.display().to_string();
        let mut file = BufWriter::new(File::create(path).map_err(CliError::io(&name))?);
        if let Some(c) = comment {
            writeln!(file, "# {c}").map_err(CliError::io(&name))?;
        }
        let mut writer = csv::WriterBuilder::new().from_writer(file);
        writer.write_record(header).map_err(|e| CliError::Other(format!("{name}: {e}")))?;
        let mut sink = Self { writer, path: name };
        sink.flush()?;
        Ok(sink)
    }

    pub fn write(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.writer
            .write_record(fields)
            .map_err(|e| CliError::Other(format!("{}: {e}", self.path)))
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.writer.flush().map_err(CliError::io(&self.path))
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    let file = File::open(path).map_err(CliError::io(path.display()))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

fn csv_error(path: &Path, line: u64, reason: impl Into<String>) -> CliError {
    CliError::Csv {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<T, CliError> {
    raw.parse()
        .map_err(|_| csv_error(path, line, format!("{name}: cannot parse {raw:?}")))
}

fn parse_opt(path: &Path, line: u64, name: &str, raw: &str) -> Result<Option<f64>, CliError> {
    if raw == "NA" {
        Ok(None)
    } else {
        parse_field(path, line, name, raw).map(Some)
    }
}

/// Line of the header: the first line that is not a `#` comment.
fn header_line(path: &Path) -> u64 {
    std::fs::read_to_string(path).map_or(1, |text| {
        1 + text.lines().take_while(|l| l.starts_with('#')).count() as u64
    })
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<(), CliError> {
    let header = rdr.headers().map_err(|e| csv_error(path, 1, e.to_string()))?.clone();
    if header.iter().ne(expected.iter().copied()) {
        return Err(csv_error(path, header_line(path), format!("expected header {}", expected.join(","))));
    }
    Ok(())
}

fn records(path: &Path, rdr: &mut csv::Reader<File>) -> Result<Vec<(u64, csv::StringRecord)>, CliError> {
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 8 {
            return Err(csv_error(path, line, format!("expected 8 fields, found {}", rec.len())));
        }
        out.push((line, rec));
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &METRICS_HEADER)?;
    let rows = records(path, &mut rdr)?
        .into_iter()
        .map(|(line, r)| {
            let unit = |name: &str, raw: &str| -> Result<f64, CliError> {
                let v: f64 = parse_field(path, line, name, raw)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(csv_error(path, line, format!("{name} {v} outside [0, 1]")));
                }
                Ok(v)
            };
            Ok(MetricsRow {
                policy: r[0].to_owned(),
                seed: parse_field(path, line, "seed", &r[1])?,
                round: parse_field(path, line, "round", &r[2])?,
                labels_used: parse_field(path, line, "labels_used", &r[3])?,
                test_dsc: unit("test_dsc", &r[4])?,
                val_dsc: unit("val_dsc", &r[5])?,
                mean_pool_score: parse_opt(path, line, "mean_pool_score", &r[6])?,
                spearman: parse_opt(path, line, "spearman_score_vs_rdsc", &r[7])?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if rows.is_empty() {
        return Err(csv_error(path, 2, "no data rows"));
    }
    Ok(rows)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>, CliError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &SCORES_HEADER)?;
    records(path, &mut rdr)?
        .into_iter()
        .map(|(line, r)| {
            Ok(ScoreRow {
                policy: r[0].to_owned(),
                seed: parse_field(path, line, "seed", &r[1])?,
                round: parse_field(path, line, "round", &r[2])?,
                sample_id: r[3].to_owned(),
                l_dsc: parse_field(path, line, "l_dsc", &r[4])?,
                m_dsc: parse_field(path, line, "m_dsc", &r[5])?,
                mean_score: parse_field(path, line, "mean_score", &r[6])?,
                r_dsc: parse_opt(path, line, "r_dsc", &r[7])?,
            })
        })
        .collect()
}
