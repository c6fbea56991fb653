//! Dataset directories: one `.fds` file per sample plus `manifest.tsv`.
//!
//! Sample file layout (little-endian): `"FDS1"`, `u16` height, `u16` width,
//! `f32` image, `u8` mask, `u8` provenance tag, `u32` patient id, `u32` slice
//! index, CRC32 over all preceding bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DataError, Provenance, Sample, SiteDataset, Split};

pub const SAMPLE_MAGIC: &[u8; 4] = b"FDS1";
pub const MANIFEST_NAME: &str = "manifest.tsv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sample_file_name(s: &Sample) -> String {
    format!("p{:04}_s{:02}.fds", s.patient_id, s.slice_index)
}

pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let n = s.height * s.width;
    let mut out = Vec::with_capacity(8 + 5 * n + 13);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&(s.height as u16).to_le_bytes());
    out.extend_from_slice(&(s.width as u16).to_le_bytes());
    for v in &s.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.mask);
    out.push(s.provenance.to_tag());
    out.extend_from_slice(&s.patient_id.to_le_bytes());
    out.extend_from_slice(&s.slice_index.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_sample(bytes: &[u8], file: &str) -> Result<Sample, DataError> {
    let fmt = |reason: &str| DataError::Format {
        file: file.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 + 13 || &bytes[..4] != SAMPLE_MAGIC {
        return Err(fmt("bad magic or truncated header"));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let n = h * w;
    let expected = 8 + 5 * n + 1 + 4 + 4 + 4;
    if bytes.len() != expected {
        return Err(fmt(&format!(
            "expected {expected} bytes for {h}x{w}, got {}",
            bytes.len()
        )));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(fmt("checksum mismatch"));
    }
    let image = body[8..8 + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask = body[8 + 4 * n..8 + 5 * n].to_vec();
    let mut at = 8 + 5 * n;
    let provenance = Provenance::from_tag(body[at]).ok_or_else(|| fmt("unknown provenance tag"))?;
    at += 1;
    let patient_id = u32::from_le_bytes(body[at..at + 4].try_into().unwrap());
    let slice_index = u32::from_le_bytes(body[at + 4..at + 8].try_into().unwrap());
    Ok(Sample {
        height: h,
        width: w,
        image,
        mask,
        patient_id,
        slice_index,
        provenance,
    })
}

pub fn write_sample_file(path: &Path, s: &Sample) -> Result<(), DataError> {
    fs::write(path, encode_sample(s)).map_err(io_err(path))
}

pub fn read_sample_file(path: &Path) -> Result<Sample, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_sample(&bytes, &path.display().to_string())
}

/// Writes every sample and a manifest; split column is `none` when unsplit.
pub fn write_dataset(dir: &Path, ds: &SiteDataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from("file\tpatient\tsplit\tprovenance\n");
    for s in ds.samples() {
        let name = sample_file_name(s);
        write_sample_file(&dir.join(&name), s)?;
        let split = ds.split_of(s.patient_id).map_or("none", Split::as_str);
        manifest.push_str(&format!(
            "{name}\t{}\t{split}\t{}\n",
            s.patient_id, s.provenance
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(io_err(&path))
}

/// Reads a dataset directory through its manifest.
pub fn read_dataset(dir: &Path) -> Result<SiteDataset, DataError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest = path.display().to_string();
    let fmt = |reason: String| DataError::Format {
        file: manifest.clone(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some("file\tpatient\tsplit\tprovenance") {
        return Err(fmt("missing or wrong header".into()));
    }
    let mut samples = Vec::new();
    let mut splits = BTreeMap::new();
    let mut site: Option<String> = None;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(fmt(format!("line {} has {} columns", i + 2, cols.len())));
        }
        let sample = read_sample_file(&dir.join(cols[0]))?;
        let patient: u32 = cols[1]
            .parse()
            .map_err(|_| fmt(format!("line {}: bad patient id", i + 2)))?;
        if patient != sample.patient_id {
            return Err(fmt(format!(
                "line {}: patient id disagrees with {}",
                i + 2,
                cols[0]
            )));
        }
        if cols[3] != sample.provenance.to_string() {
            return Err(fmt(format!(
                "line {}: provenance disagrees with {}",
                i + 2,
                cols[0]
            )));
        }
        if cols[2] != "none" {
            let split = Split::parse(cols[2])
                .ok_or_else(|| fmt(format!("line {}: bad split {}", i + 2, cols[2])))?;
            if let Some(prev) = splits.insert(patient, split) {
                if prev != split {
                    return Err(fmt(format!("patient {patient} appears in two splits")));
                }
            }
        }
        site.get_or_insert_with(|| sample.provenance.site().to_string());
        samples.push(sample);
    }
    let site = site.ok_or_else(|| fmt("manifest lists no samples".into()))?;
    let mut ds = SiteDataset::new(site, None, samples);
    if !splits.is_empty() {
        ds.set_splits(splits)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_site_dataset, split_dataset, SiteProfile};

    #[test]
    fn directory_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = generate_site_dataset(&SiteProfile::hospital_b(), 5, 2, 1).unwrap();
        let ds = split_dataset(&ds, (0.6, 0.2, 0.2), 2).unwrap();
        write_dataset(tmp.path(), &ds).unwrap();
        assert!(tmp.path().join("p0003_s01.fds").exists());
        let back = read_dataset(tmp.path()).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.splits(), ds.splits());
        assert_eq!(back.site_id, "B");
    }

    #[test]
    fn corrupt_sample_detected() {
        let ds = generate_site_dataset(&SiteProfile::hospital_a(), 5, 1, 1).unwrap();
        let mut bytes = encode_sample(&ds.samples()[0]);
        assert_eq!(bytes.len(), 8 + 5 * 32 * 32 + 13);
        bytes[100] ^= 1;
        assert!(decode_sample(&bytes, "x").is_err());
    }
}
