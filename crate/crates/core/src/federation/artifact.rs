//! `.fdma` artifact: `"FDMA"`, `u8` version, `u8` kind, `u32` metadata length,
//! `key=value` metadata lines, `u32` payload length, weight stream, CRC32 over
//! everything before it. All integers little-endian.

use crate::diffusion::EpsilonNet;
use crate::diffusion::EpsilonNetSpec;
use crate::nn::{decode_weights, encode_weights, NnError, ParamTree};
use crate::segmentation::{SegNet, SegNetSpec};

use super::FederationError;

pub const ARTIFACT_MAGIC: &[u8; 4] = b"FDMA";
pub const ARTIFACT_VERSION: u8 = 1;
pub const ARTIFACT_EXTENSION: &str = "fdma";
/// Upper bound on the metadata section, in bytes.
pub const METADATA_CAP: usize = 16 * 1024;
/// Magic, version, kind and the two section lengths.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArtifactKind {
    Diffusion,
    Segmentation,
}

impl ArtifactKind {
    pub fn code(self) -> u8 {
        match self {
            ArtifactKind::Diffusion => 1,
            ArtifactKind::Segmentation => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ArtifactKind::Diffusion),
            2 => Some(ArtifactKind::Segmentation),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Diffusion => "diffusion",
            ArtifactKind::Segmentation => "segmentation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diffusion" => Some(ArtifactKind::Diffusion),
            "segmentation" => Some(ArtifactKind::Segmentation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleMeta {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// Everything an artifact says about itself. No field carries image data.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactMetadata {
    pub name: String,
    pub kind: ArtifactKind,
    pub origin_site: String,
    /// Canonical architecture descriptor; `arch_hash` is its SHA-256.
    pub arch: String,
    pub arch_hash: String,
    /// Present exactly when `kind` is diffusion.
    pub schedule: Option<ScheduleMeta>,
    pub config_digest: String,
    /// Seconds since the Unix epoch.
    pub created: u64,
}

const KEYS: [&str; 10] = [
    "name",
    "kind",
    "origin",
    "arch",
    "arch_hash",
    "steps",
    "beta_min",
    "beta_max",
    "config_digest",
    "created",
];

/// Keys a metadata section may contain.
pub(crate) fn is_known_key(key: &str) -> bool {
    KEYS.contains(&key)
}

impl ArtifactMetadata {
    pub fn for_diffusion(
        name: &str,
        origin_site: &str,
        spec: &EpsilonNetSpec,
        schedule: ScheduleMeta,
        config_digest: &str,
        created: u64,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ArtifactKind::Diffusion,
            origin_site: origin_site.into(),
            arch: spec.descriptor(),
            arch_hash: spec.arch_hash(),
            schedule: Some(schedule),
            config_digest: config_digest.into(),
            created,
        }
    }

    pub fn for_segmentation(
        name: &str,
        origin_site: &str,
        spec: &SegNetSpec,
        config_digest: &str,
        created: u64,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ArtifactKind::Segmentation,
            origin_site: origin_site.into(),
            arch: spec.descriptor(),
            arch_hash: spec.arch_hash(),
            schedule: None,
            config_digest: config_digest.into(),
            created,
        }
    }

    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: String| Err(FederationError::Metadata(m));
        for (k, v) in [
            ("name", &self.name),
            ("origin", &self.origin_site),
            ("arch", &self.arch),
            ("config_digest", &self.config_digest),
        ] {
            if v.is_empty() || v.contains(['\n', '\r']) {
                return bad(format!("{k} must be a non-empty single line"));
            }
        }
        if crate::diffusion::hex_digest(self.arch.as_bytes()) != self.arch_hash {
            return bad(format!(
                "arch_hash {} is not the digest of {:?}",
                self.arch_hash, self.arch
            ));
        }
        match (self.kind, &self.schedule) {
            (ArtifactKind::Diffusion, None) => bad("diffusion artifact without schedule".into()),
            (ArtifactKind::Segmentation, Some(_)) => {
                bad("segmentation artifact with a schedule".into())
            }
            _ => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &str| {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        };
        line("name", &self.name);
        line("kind", self.kind.as_str());
        line("origin", &self.origin_site);
        line("arch", &self.arch);
        line("arch_hash", &self.arch_hash);
        if let Some(s) = &self.schedule {
            line("steps", &s.steps.to_string());
            line("beta_min", &s.beta_min.to_string());
            line("beta_max", &s.beta_max.to_string());
        }
        line("config_digest", &self.config_digest);
        line("created", &self.created.to_string());
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FederationError> {
        let bad = |m: String| FederationError::Metadata(m);
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {line:?} is not key=value")))?;
            if !is_known_key(k) {
                return Err(bad(format!("unknown key {k:?}")));
            }
            if fields.insert(k, v).is_some() {
                return Err(bad(format!("duplicate key {k:?}")));
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| bad(format!("missing key {k:?}")))
        };
        let kind = ArtifactKind::parse(get("kind")?).ok_or_else(|| bad("unknown kind".into()))?;
        let schedule = match kind {
            ArtifactKind::Diffusion => Some(ScheduleMeta {
                steps: get("steps")?
                    .parse()
                    .map_err(|_| bad("steps is not an integer".into()))?,
                beta_min: get("beta_min")?
                    .parse()
                    .map_err(|_| bad("beta_min is not a number".into()))?,
                beta_max: get("beta_max")?
                    .parse()
                    .map_err(|_| bad("beta_max is not a number".into()))?,
            }),
            ArtifactKind::Segmentation => None,
        };
        let meta = Self {
            name: get("name")?.into(),
            kind,
            origin_site: get("origin")?.into(),
            arch: get("arch")?.into(),
            arch_hash: get("arch_hash")?.into(),
            schedule,
            config_digest: get("config_digest")?.into(),
            created: get("created")?
                .parse()
                .map_err(|_| bad("created is not an integer".into()))?,
        };
        if meta.to_text() != text {
            return Err(bad("metadata is not in canonical form".into()));
        }
        meta.validate()?;
        Ok(meta)
    }

    /// `(path, shape)` list the declared architecture produces.
    pub fn declared_signature(&self) -> Option<Vec<(String, Vec<usize>)>> {
        match self.kind {
            ArtifactKind::Diffusion => {
                EpsilonNetSpec::parse_descriptor(&self.arch).map(|s| EpsilonNet::new(s).signature())
            }
            ArtifactKind::Segmentation => {
                SegNetSpec::parse_descriptor(&self.arch).map(|s| SegNet::new(s).signature())
            }
        }
    }
}

/// Section boundaries of an artifact whose framing and checksum are valid.
#[derive(Debug, Clone)]
pub struct RawArtifact<'a> {
    pub version: u8,
    pub kind: u8,
    pub metadata: &'a [u8],
    pub metadata_offset: usize,
    pub payload: &'a [u8],
    pub payload_offset: usize,
    /// Bytes between the end of the payload and the checksum.
    pub trailing: &'a [u8],
    pub trailing_offset: usize,
}

fn corrupt(offset: usize, reason: impl Into<String>) -> FederationError {
    FederationError::Corrupt {
        offset,
        reason: reason.into(),
    }
}

/// Checks magic, checksum and section lengths, without interpreting sections.
pub fn parse_artifact(bytes: &[u8]) -> Result<RawArtifact<'_>, FederationError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(corrupt(bytes.len(), "shorter than the fixed header"));
    }
    if &bytes[..4] != ARTIFACT_MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(corrupt(
            body_end,
            format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}"),
        ));
    }
    let version = bytes[4];
    if version != ARTIFACT_VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let kind = bytes[5];
    let meta_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let metadata_offset = 10;
    if metadata_offset + meta_len + 4 > body_end {
        return Err(corrupt(
            6,
            format!("metadata length {meta_len} runs past the end"),
        ));
    }
    let len_at = metadata_offset + meta_len;
    let payload_len = u32::from_le_bytes(bytes[len_at..len_at + 4].try_into().unwrap()) as usize;
    let payload_offset = len_at + 4;
    if payload_offset + payload_len > body_end {
        return Err(corrupt(
            len_at,
            format!("payload length {payload_len} runs past the end"),
        ));
    }
    let trailing_offset = payload_offset + payload_len;
    Ok(RawArtifact {
        version,
        kind,
        metadata: &bytes[metadata_offset..len_at],
        metadata_offset,
        payload: &bytes[payload_offset..trailing_offset],
        payload_offset,
        trailing: &bytes[trailing_offset..body_end],
        trailing_offset,
    })
}

/// Frames arbitrary sections without validating them (tests and fault injection).
pub fn encode_raw_artifact(kind: u8, metadata: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + metadata.len() + payload.len() + 4);
    out.extend_from_slice(ARTIFACT_MAGIC);
    out.push(ARTIFACT_VERSION);
    out.push(kind);
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Artifact bytes whose framing and checksum have been verified. This is the
/// only type that crosses a site boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactBytes(Vec<u8>);

impl ArtifactBytes {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn checksum(&self) -> u32 {
        u32::from_le_bytes(self.0[self.0.len() - 4..].try_into().unwrap())
    }
}

impl TryFrom<Vec<u8>> for ArtifactBytes {
    type Error = FederationError;

    fn try_from(bytes: Vec<u8>) -> Result<Self, FederationError> {
        parse_artifact(&bytes)?;
        Ok(ArtifactBytes(bytes))
    }
}

impl AsRef<[u8]> for ArtifactBytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

pub fn export_artifact(
    params: &ParamTree,
    metadata: &ArtifactMetadata,
) -> Result<ArtifactBytes, FederationError> {
    metadata.validate()?;
    let text = metadata.to_text();
    if text.len() > METADATA_CAP {
        return Err(FederationError::MetadataTooLarge {
            len: text.len(),
            cap: METADATA_CAP,
        });
    }
    let sig = metadata.declared_signature().ok_or_else(|| {
        FederationError::Metadata(format!("unknown architecture {:?}", metadata.arch))
    })?;
    if params.signature() != sig {
        return Err(FederationError::Payload(NnError::Structure(format!(
            "parameters do not match architecture {:?}",
            metadata.arch
        ))));
    }
    Ok(ArtifactBytes(encode_raw_artifact(
        metadata.kind.code(),
        text.as_bytes(),
        &encode_weights(params),
    )))
}

/// Verifies and unpacks an artifact built for the architecture `expected_arch_hash`.
pub fn import_artifact(
    bytes: &[u8],
    expected_arch_hash: &str,
) -> Result<(ParamTree, ArtifactMetadata), FederationError> {
    let raw = parse_artifact(bytes)?;
    if raw.metadata.len() > METADATA_CAP {
        return Err(FederationError::MetadataTooLarge {
            len: raw.metadata.len(),
            cap: METADATA_CAP,
        });
    }
    if !raw.trailing.is_empty() {
        return Err(corrupt(
            raw.trailing_offset,
            format!("{} undeclared bytes after the payload", raw.trailing.len()),
        ));
    }
    let text = std::str::from_utf8(raw.metadata)
        .map_err(|_| corrupt(raw.metadata_offset, "metadata is not UTF-8"))?;
    let meta = ArtifactMetadata::from_text(text)?;
    if meta.kind.code() != raw.kind {
        return Err(corrupt(
            5,
            format!(
                "header kind {} disagrees with metadata kind {}",
                raw.kind,
                meta.kind.as_str()
            ),
        ));
    }
    if meta.arch_hash != expected_arch_hash {
        return Err(FederationError::Incompatible {
            expected: expected_arch_hash.into(),
            found: meta.arch_hash,
        });
    }
    let params = decode_weights(raw.payload)?;
    let sig = meta.declared_signature().ok_or_else(|| {
        FederationError::Metadata(format!("unknown architecture {:?}", meta.arch))
    })?;
    if params.signature() != sig {
        return Err(FederationError::Payload(NnError::Structure(
            "payload does not match the declared architecture".into(),
        )));
    }
    Ok((params, meta))
}
