use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::segmentation::MetricRow;

use super::histogram::{HistogramReport, Region};
use super::ExperimentError;

/// Ordered metric rows, unique per (train source, test source).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<MetricRow>,
}

impl ResultTable {
    pub fn push(&mut self, row: MetricRow) -> Result<(), ExperimentError> {
        if self.get(&row.train_source, &row.test_source).is_some() {
            return Err(ExperimentError::Plan(format!(
                "duplicate result row {} -> {}",
                row.train_source, row.test_source
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, train: &str, test: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.train_source == train && r.test_source == test)
    }

    pub fn dice(&self, train: &str, test: &str) -> Option<f64> {
        self.get(train, test).map(|r| r.dice)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tsv" => Some(ReportFormat::Tsv),
            "markdown" | "md" => Some(ReportFormat::Markdown),
            _ => None,
        }
    }
}

pub const MARKDOWN_HEADER: &str = "| Train Data Source | Test Data Source | DICE |";

pub fn table_markdown(table: &ResultTable) -> String {
    let mut out = format!("{MARKDOWN_HEADER}\n|---|---|---|\n");
    for r in &table.rows {
        writeln!(
            out,
            "| {} | {} | {:.3} |",
            r.train_source, r.test_source, r.dice
        )
        .unwrap();
    }
    out
}

/// One line per row; dice is written in shortest round-trip form.
pub fn table_tsv(table: &ResultTable) -> String {
    let mut out = String::from("train_source\ttest_source\tdice\tslices\n");
    for r in &table.rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.train_source,
            r.test_source,
            r.dice,
            r.per_slice.len()
        )
        .unwrap();
    }
    out
}

pub fn parse_table_tsv(text: &str) -> Result<Vec<(String, String, f64)>, ExperimentError> {
    let mut lines = text.lines();
    if lines.next() != Some("train_source\ttest_source\tdice\tslices") {
        return Err(ExperimentError::Report("missing table header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let dice = f.get(2).and_then(|d| d.parse().ok());
            match (f.len(), dice) {
                (4, Some(d)) => Ok((f[0].to_string(), f[1].to_string(), d)),
                _ => Err(ExperimentError::Report(format!(
                    "malformed table line {l:?}"
                ))),
            }
        })
        .collect()
}

pub fn per_slice_tsv(table: &ResultTable) -> String {
    let mut out = String::from("train_source\ttest_source\tslice\tdice\n");
    for r in &table.rows {
        for (i, d) in r.per_slice.iter().enumerate() {
            writeln!(out, "{}\t{}\t{i}\t{d}", r.train_source, r.test_source).unwrap();
        }
    }
    out
}

pub fn histograms_tsv(h: &HistogramReport) -> String {
    let mut out = String::from("dataset\tregion\tbin\tlow\thigh\tfraction\n");
    for (i, name) in h.names.iter().enumerate() {
        for (region, hist) in [
            (Region::WholeImage, &h.whole[i]),
            (Region::Myocardium, &h.myocardium[i]),
        ] {
            for (b, v) in hist.iter().enumerate() {
                let lo = b as f64 / h.bins as f64;
                let hi = (b + 1) as f64 / h.bins as f64;
                writeln!(out, "{name}\t{}\t{b}\t{lo}\t{hi}\t{v}", region.as_str()).unwrap();
            }
        }
    }
    out
}

pub fn distances_tsv(h: &HistogramReport) -> String {
    let mut out = String::from("region\ta\tb\tl1\n");
    for (region, m) in [
        (Region::WholeImage, &h.l1_whole),
        (Region::Myocardium, &h.l1_myocardium),
    ] {
        for (i, a) in h.names.iter().enumerate() {
            for (j, b) in h.names.iter().enumerate() {
                writeln!(out, "{}\t{a}\t{b}\t{}", region.as_str(), m[i][j]).unwrap();
            }
        }
    }
    out
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, ExperimentError> {
    fs::write(&path, text).map_err(|e| ExperimentError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

/// Writes `<stem>.md` or `<stem>.tsv` plus `<stem>_per_slice.tsv`, and the
/// histogram tables when given. Returns the written paths.
pub fn emit_report(
    dir: &Path,
    stem: &str,
    table: &ResultTable,
    histograms: Option<&HistogramReport>,
    format: ReportFormat,
) -> Result<Vec<PathBuf>, ExperimentError> {
    if table.is_empty() {
        return Err(ExperimentError::Report("result table is empty".into()));
    }
    fs::create_dir_all(dir).map_err(|e| ExperimentError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Markdown => written.push(write(
            dir.join(format!("{stem}.md")),
            &table_markdown(table),
        )?),
        ReportFormat::Tsv => {
            written.push(write(dir.join(format!("{stem}.tsv")), &table_tsv(table))?)
        }
    }
    written.push(write(
        dir.join(format!("{stem}_per_slice.tsv")),
        &per_slice_tsv(table),
    )?);
    if let Some(h) = histograms {
        written.push(write(dir.join("histograms.tsv"), &histograms_tsv(h))?);
        written.push(write(
            dir.join("histogram_distances.tsv"),
            &distances_tsv(h),
        )?);
    }
    Ok(written)
}
