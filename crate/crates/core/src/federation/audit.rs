//! Privacy audit: an artifact may carry weights and bounded metadata, nothing else.

use std::collections::HashMap;
use std::fmt;

use crate::nn::encoded_len;
use crate::phantom::SiteDataset;

use super::artifact::{is_known_key, parse_artifact, ArtifactKind, ArtifactMetadata, METADATA_CAP};
use super::FederationError;

/// Window length of the verbatim-leak scan, in bytes.
pub const LEAK_WINDOW: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AuditRule {
    /// Only declared sections and metadata keys.
    Schema = 1,
    MetadataCap = 2,
    /// No payload window equals a window of a raw image.
    VerbatimLeak = 3,
    /// Payload length matches the declared architecture.
    PayloadLength = 4,
}

impl AuditRule {
    pub fn id(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditFinding {
    pub rule: AuditRule,
    /// Byte offset into the artifact.
    pub offset: usize,
    pub description: String,
}

impl fmt::Display for AuditFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rule {} at byte {}: {}",
            self.rule.id(),
            self.offset,
            self.description
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub findings: Vec<AuditFinding>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    fn add(&mut self, rule: AuditRule, offset: usize, description: impl Into<String>) {
        self.findings.push(AuditFinding {
            rule,
            offset,
            description: description.into(),
        });
    }
}

const BASE: u64 = 0x100_0000_01b3;

fn window_hash(w: &[u8]) -> u64 {
    w.iter()
        .fold(0u64, |h, &b| h.wrapping_mul(BASE).wrapping_add(b as u64))
}

/// Rolling hashes of every `LEAK_WINDOW`-byte window of `bytes`.
fn rolling_hashes(bytes: &[u8]) -> impl Iterator<Item = (usize, u64)> + '_ {
    let top = (0..LEAK_WINDOW - 1).fold(1u64, |p, _| p.wrapping_mul(BASE));
    let mut h = if bytes.len() >= LEAK_WINDOW {
        window_hash(&bytes[..LEAK_WINDOW])
    } else {
        0
    };
    (0..(bytes.len() + 1).saturating_sub(LEAK_WINDOW)).map(move |i| {
        if i > 0 {
            h = h
                .wrapping_sub((bytes[i - 1] as u64).wrapping_mul(top))
                .wrapping_mul(BASE)
                .wrapping_add(bytes[i + LEAK_WINDOW - 1] as u64);
        }
        (i, h)
    })
}

/// A window that repeats one 4-byte value (a constant run of floats) says
/// nothing about any particular image, so it never counts as a leak.
fn is_repetitive(w: &[u8]) -> bool {
    w[4..].iter().zip(w).all(|(a, b)| a == b)
}

fn raw_image(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn scan_leaks(
    report: &mut AuditReport,
    payload: &[u8],
    payload_offset: usize,
    dataset: &SiteDataset,
) {
    let images: Vec<Vec<u8>> = dataset
        .samples()
        .iter()
        .map(|s| raw_image(&s.image))
        .collect();
    let mut index: HashMap<u64, (usize, usize)> = HashMap::new();
    for (si, img) in images.iter().enumerate() {
        for (off, h) in rolling_hashes(img) {
            if !is_repetitive(&img[off..off + LEAK_WINDOW]) {
                index.entry(h).or_insert((si, off));
            }
        }
    }
    let mut run_end = 0usize;
    for (off, h) in rolling_hashes(payload) {
        let Some(&(si, img_off)) = index.get(&h) else {
            continue;
        };
        let window = &payload[off..off + LEAK_WINDOW];
        if window != &images[si][img_off..img_off + LEAK_WINDOW] {
            continue;
        }
        if off < run_end {
            run_end = off + LEAK_WINDOW;
            continue;
        }
        run_end = off + LEAK_WINDOW;
        let s = &dataset.samples()[si];
        report.add(
            AuditRule::VerbatimLeak,
            payload_offset + off,
            format!(
                "payload bytes match raw image of patient {} slice {} at image byte {}",
                s.patient_id, s.slice_index, img_off
            ),
        );
    }
}

/// Checks an artifact against the privacy contract using `dataset` as the
/// reference for verbatim leaks. Fails only when the artifact cannot be framed.
pub fn privacy_audit(
    artifact: &[u8],
    dataset: &SiteDataset,
) -> Result<AuditReport, FederationError> {
    let raw = parse_artifact(artifact)?;
    let mut report = AuditReport::default();

    if ArtifactKind::from_code(raw.kind).is_none() {
        report.add(
            AuditRule::Schema,
            5,
            format!("unknown artifact kind {}", raw.kind),
        );
    }
    if !raw.trailing.is_empty() {
        report.add(
            AuditRule::Schema,
            raw.trailing_offset,
            format!(
                "{} bytes in an undeclared section after the payload",
                raw.trailing.len()
            ),
        );
    }
    let mut meta = None;
    match std::str::from_utf8(raw.metadata) {
        Err(e) => report.add(
            AuditRule::Schema,
            raw.metadata_offset + e.valid_up_to(),
            "metadata is not UTF-8",
        ),
        Ok(text) => {
            let mut line_start = raw.metadata_offset;
            let mut schema_ok = true;
            for line in text.split_inclusive('\n') {
                let key = line.trim_end_matches('\n').split_once('=').map(|(k, _)| k);
                match key {
                    Some(k) if is_known_key(k) => {}
                    Some(k) => {
                        schema_ok = false;
                        report.add(
                            AuditRule::Schema,
                            line_start,
                            format!("undeclared metadata key {k:?}"),
                        );
                    }
                    None => {
                        schema_ok = false;
                        report.add(
                            AuditRule::Schema,
                            line_start,
                            "metadata line is not key=value",
                        );
                    }
                }
                line_start += line.len();
            }
            if schema_ok {
                match ArtifactMetadata::from_text(text) {
                    Ok(m) => meta = Some(m),
                    Err(e) => report.add(AuditRule::Schema, raw.metadata_offset, e.to_string()),
                }
            }
        }
    }
    if raw.metadata.len() > METADATA_CAP {
        report.add(
            AuditRule::MetadataCap,
            6,
            format!(
                "metadata is {} bytes, cap is {METADATA_CAP}",
                raw.metadata.len()
            ),
        );
    }

    scan_leaks(&mut report, raw.payload, raw.payload_offset, dataset);

    let len_at = raw.payload_offset - 4;
    match meta.as_ref().and_then(|m| m.declared_signature()) {
        Some(sig) => {
            let want = encoded_len(&sig);
            if raw.payload.len() != want {
                report.add(
                    AuditRule::PayloadLength,
                    len_at,
                    format!(
                        "payload is {} bytes, declared architecture needs {want}",
                        raw.payload.len()
                    ),
                );
            }
        }
        None => report.add(
            AuditRule::PayloadLength,
            len_at,
            "payload length cannot be checked: no known architecture",
        ),
    }
    report.findings.sort_by_key(|f| (f.rule, f.offset));
    Ok(report)
}
