use crate::phantom::Sample;

use super::ExperimentError;

/// Image region a histogram pools over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    WholeImage,
    Myocardium,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::WholeImage => "whole",
            Region::Myocardium => "myocardium",
        }
    }
}

/// Normalized intensity histograms over `[0, 1]` for named datasets, with
/// pairwise L1 distances per region.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramReport {
    pub bins: usize,
    pub names: Vec<String>,
    pub whole: Vec<Vec<f64>>,
    pub myocardium: Vec<Vec<f64>>,
    pub l1_whole: Vec<Vec<f64>>,
    pub l1_myocardium: Vec<Vec<f64>>,
}

impl HistogramReport {
    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn histogram(&self, name: &str, region: Region) -> Option<&[f64]> {
        let i = self.position(name)?;
        Some(match region {
            Region::WholeImage => &self.whole[i],
            Region::Myocardium => &self.myocardium[i],
        })
    }

    pub fn distance(&self, a: &str, b: &str, region: Region) -> Option<f64> {
        let (i, j) = (self.position(a)?, self.position(b)?);
        Some(match region {
            Region::WholeImage => self.l1_whole[i][j],
            Region::Myocardium => self.l1_myocardium[i][j],
        })
    }
}

pub fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1)
}

fn pooled(
    name: &str,
    samples: &[&Sample],
    bins: usize,
    region: Region,
) -> Result<Vec<f64>, ExperimentError> {
    let mut counts = vec![0u64; bins];
    for s in samples {
        for (&v, &m) in s.image.iter().zip(&s.mask) {
            if region == Region::WholeImage || m == 1 {
                counts[bin_of(v, bins)] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(ExperimentError::Histogram(format!(
            "dataset {name:?} has no pixels in the {} region",
            region.as_str()
        )));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn distances(h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..h.len())
        .map(|i| {
            (0..h.len())
                .map(|j| if i == j { 0.0 } else { l1(&h[i], &h[j]) })
                .collect()
        })
        .collect()
}

pub fn compute_histograms(
    datasets: &[(&str, Vec<&Sample>)],
    bins: usize,
) -> Result<HistogramReport, ExperimentError> {
    if bins == 0 {
        return Err(ExperimentError::Histogram(
            "bin count must be positive".into(),
        ));
    }
    let mut report = HistogramReport {
        bins,
        names: Vec::new(),
        whole: Vec::new(),
        myocardium: Vec::new(),
        l1_whole: Vec::new(),
        l1_myocardium: Vec::new(),
    };
    for (name, samples) in datasets {
        if samples.is_empty() {
            return Err(ExperimentError::Histogram(format!(
                "dataset {name:?} is empty"
            )));
        }
        report.names.push(name.to_string());
        report
            .whole
            .push(pooled(name, samples, bins, Region::WholeImage)?);
        report
            .myocardium
            .push(pooled(name, samples, bins, Region::Myocardium)?);
    }
    report.l1_whole = distances(&report.whole);
    report.l1_myocardium = distances(&report.myocardium);
    Ok(report)
}
