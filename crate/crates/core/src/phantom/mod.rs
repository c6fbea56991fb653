//! Two-hospital cardiac phantoms.
//!
//! Each image is a background, a bright blood pool and an annular myocardium
//! whose intensities, noise level and shading depend on the site profile. The
//! mask is the exact annulus used to paint the image.

mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::nn::{stream_id, RngStream};

pub use io::{
    read_dataset, read_sample_file, write_dataset, write_sample_file, MANIFEST_NAME, SAMPLE_MAGIC,
};

/// Phantom image side length in pixels.
pub const IMAGE_SIZE: usize = 32;

const PURPOSE_PATIENT: u32 = 1;
const PURPOSE_SPLIT: u32 = 2;

const PATIENT_CENTER_JITTER: f32 = 2.0;
const SLICE_CENTER_JITTER: f32 = 2.0;
const SLICE_RADIUS_JITTER: f32 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid site profile {site}: {reason}")]
    Profile { site: String, reason: String },
    #[error("invalid sample (patient {patient}, slice {slice}): {reason}")]
    Sample {
        patient: u32,
        slice: u32,
        reason: String,
    },
    #[error("dataset request invalid: {0}")]
    Request(String),
    #[error("cannot split {patients} patients into non-empty train/val/test sets")]
    TooFewPatients { patients: usize },
    #[error("malformed sample file {file}: {reason}")]
    Format { file: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Intensity and geometry statistics of one simulated hospital.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteProfile {
    pub site_id: String,
    pub myo_mean: f32,
    pub blood_mean: f32,
    pub background_mean: f32,
    pub noise_sigma: f32,
    /// Outer ring radius as a fraction of image width.
    pub ring_outer_radius_range: (f32, f32),
    /// Ring thickness as a fraction of image width.
    pub ring_thickness_range: (f32, f32),
    pub bias_field_strength: f32,
}

impl SiteProfile {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: String| {
            Err(DataError::Profile {
                site: self.site_id.clone(),
                reason,
            })
        };
        if let Err(e) = validate_site_id(&self.site_id) {
            return bad(e);
        }
        let means = [
            ("myo", self.myo_mean),
            ("blood", self.blood_mean),
            ("background", self.background_mean),
        ];
        for (name, v) in means {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name}_mean {v} outside [0, 1]"));
            }
        }
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                if (means[i].1 - means[j].1).abs() < 0.05 - 1e-6 {
                    return bad(format!(
                        "{} and {} means closer than 0.05",
                        means[i].0, means[j].0
                    ));
                }
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be non-negative",
                self.noise_sigma
            ));
        }
        if !(0.0..=0.5).contains(&self.bias_field_strength) {
            return bad(format!(
                "bias_field_strength {} outside [0, 0.5]",
                self.bias_field_strength
            ));
        }
        let size = IMAGE_SIZE as f32;
        let (ro_lo, ro_hi) = self.ring_outer_radius_range;
        let (th_lo, th_hi) = self.ring_thickness_range;
        if !(ro_lo > 0.0 && ro_lo <= ro_hi && th_lo > 0.0 && th_lo <= th_hi) {
            return bad("radius/thickness ranges must be positive and ordered".into());
        }
        let max_extent =
            ro_hi * size + SLICE_RADIUS_JITTER + PATIENT_CENTER_JITTER + SLICE_CENTER_JITTER;
        if max_extent > size / 2.0 {
            return bad(format!(
                "annulus can reach {max_extent:.1} px from centre, beyond the image"
            ));
        }
        if th_lo * size < 1.0 {
            return bad("ring thinner than one pixel".into());
        }
        if th_hi * size + 1.0 > ro_lo * size - SLICE_RADIUS_JITTER {
            return bad("ring thickness leaves no blood pool".into());
        }
        Ok(())
    }

    /// Hospital A: darker myocardium, low noise, no shading.
    pub fn hospital_a() -> Self {
        Self {
            site_id: "A".into(),
            myo_mean: 0.55,
            blood_mean: 0.85,
            background_mean: 0.15,
            noise_sigma: 0.03,
            ring_outer_radius_range: (0.22, 0.28),
            ring_thickness_range: (0.07, 0.10),
            bias_field_strength: 0.0,
        }
    }

    /// Hospital B: brighter myocardium, twice the noise, shading ramp.
    pub fn hospital_b() -> Self {
        Self {
            site_id: "B".into(),
            myo_mean: 0.75,
            blood_mean: 0.45,
            background_mean: 0.2,
            noise_sigma: 0.06,
            ring_outer_radius_range: (0.22, 0.28),
            ring_thickness_range: (0.07, 0.10),
            bias_field_strength: 0.2,
        }
    }
}

pub fn default_profiles() -> (SiteProfile, SiteProfile) {
    (SiteProfile::hospital_a(), SiteProfile::hospital_b())
}

pub(crate) fn validate_site_id(id: &str) -> Result<(), String> {
    let mut chars = id.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphanumeric() => Ok(()),
        _ => Err(format!(
            "site id {id:?} must be a single ASCII letter or digit"
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Real(String),
    /// Generated by the diffusion model trained at the named site.
    Synthetic(String),
}

impl Provenance {
    pub fn site(&self) -> &str {
        match self {
            Provenance::Real(s) | Provenance::Synthetic(s) => s,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, Provenance::Synthetic(_))
    }

    pub fn to_tag(&self) -> u8 {
        let c = self.site().as_bytes()[0] & 0x7f;
        if self.is_synthetic() {
            0x80 | c
        } else {
            c
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        let c = (tag & 0x7f) as char;
        if !c.is_ascii_alphanumeric() {
            return None;
        }
        Some(if tag & 0x80 != 0 {
            Provenance::Synthetic(c.to_string())
        } else {
            Provenance::Real(c.to_string())
        })
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (kind, site) = s.split_once(':')?;
        validate_site_id(site).ok()?;
        match kind {
            "real" => Some(Provenance::Real(site.into())),
            "synthetic" => Some(Provenance::Synthetic(site.into())),
            _ => None,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Real(s) => write!(f, "real:{s}"),
            Provenance::Synthetic(s) => write!(f, "synthetic:{s}"),
        }
    }
}

/// One image slice with its myocardium mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub patient_id: u32,
    pub slice_index: u32,
    pub provenance: Provenance,
}

impl Sample {
    pub fn foreground_fraction(&self) -> f32 {
        self.mask.iter().filter(|&&m| m == 1).count() as f32 / self.mask.len() as f32
    }

    pub fn mask_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&m| m as f32).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |reason: String| {
            Err(DataError::Sample {
                patient: self.patient_id,
                slice: self.slice_index,
                reason,
            })
        };
        let n = self.height * self.width;
        if n == 0 || self.image.len() != n || self.mask.len() != n {
            return err(format!(
                "image/mask sizes do not match {}x{}",
                self.height, self.width
            ));
        }
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return err(format!("image value {v} outside [0, 1]"));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return err("mask is not binary".into());
        }
        let f = self.foreground_fraction();
        if !(0.02..=0.30).contains(&f) {
            return err(format!(
                "mask foreground fraction {f:.3} outside [0.02, 0.30]"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Patient-grouped samples from one site, optionally split by patient.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub site_id: String,
    pub profile: Option<SiteProfile>,
    samples: Vec<Sample>,
    splits: BTreeMap<u32, Split>,
}

impl SiteDataset {
    /// Builds a dataset; samples are ordered by `(patient, slice)`.
    pub fn new(
        site_id: impl Into<String>,
        profile: Option<SiteProfile>,
        mut samples: Vec<Sample>,
    ) -> Self {
        samples.sort_by_key(|s| (s.patient_id, s.slice_index));
        Self {
            site_id: site_id.into(),
            profile,
            samples,
            splits: BTreeMap::new(),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn patients(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.patient_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn split_of(&self, patient: u32) -> Option<Split> {
        self.splits.get(&patient).copied()
    }

    pub fn is_split(&self) -> bool {
        !self.splits.is_empty()
    }

    pub fn splits(&self) -> &BTreeMap<u32, Split> {
        &self.splits
    }

    /// Assigns split tags; every patient in the dataset must receive one.
    pub fn set_splits(&mut self, splits: BTreeMap<u32, Split>) -> Result<(), DataError> {
        let patients = self.patients();
        if let Some(p) = patients.iter().find(|p| !splits.contains_key(p)) {
            return Err(DataError::Request(format!("patient {p} has no split tag")));
        }
        self.splits = splits
            .into_iter()
            .filter(|(p, _)| patients.binary_search(p).is_ok())
            .collect();
        Ok(())
    }

    pub fn samples_in(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| self.split_of(s.patient_id) == Some(split))
            .collect()
    }

    /// New dataset holding only the samples of `split`, tags preserved.
    pub fn subset(&self, split: Split) -> SiteDataset {
        let samples = self.samples_in(split).into_iter().cloned().collect();
        let mut out = SiteDataset::new(self.site_id.clone(), self.profile.clone(), samples);
        let patients: BTreeSet<u32> = out.samples.iter().map(|s| s.patient_id).collect();
        out.splits = self
            .splits
            .iter()
            .filter(|(p, _)| patients.contains(p))
            .map(|(&p, &s)| (p, s))
            .collect();
        out
    }

    pub fn patients_in(&self, split: Split) -> Vec<u32> {
        self.splits
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(&p, _)| p)
            .collect()
    }
}

fn pixel_class(dx: f32, dy: f32, outer: f32, inner: f32) -> u8 {
    let d = (dx * dx + dy * dy).sqrt();
    if d <= outer && d >= inner {
        1
    } else if d < inner {
        2
    } else {
        0
    }
}

/// Generates a dataset whose content is a pure function of its arguments.
pub fn generate_site_dataset(
    profile: &SiteProfile,
    n_patients: usize,
    slices_per_patient: usize,
    seed: u64,
) -> Result<SiteDataset, DataError> {
    profile.validate()?;
    if n_patients < 5 {
        return Err(DataError::Request(format!(
            "need at least 5 patients, got {n_patients}"
        )));
    }
    if slices_per_patient == 0 {
        return Err(DataError::Request(
            "need at least one slice per patient".into(),
        ));
    }
    let size = IMAGE_SIZE;
    let half = size as f32 / 2.0;
    let mut samples = Vec::with_capacity(n_patients * slices_per_patient);
    for pid in 0..n_patients as u32 {
        let mut rng = RngStream::new(seed, stream_id(PURPOSE_PATIENT, pid));
        let cx = half + rng.uniform_range(-PATIENT_CENTER_JITTER, PATIENT_CENTER_JITTER);
        let cy = half + rng.uniform_range(-PATIENT_CENTER_JITTER, PATIENT_CENTER_JITTER);
        let outer = size as f32
            * rng.uniform_range(
                profile.ring_outer_radius_range.0,
                profile.ring_outer_radius_range.1,
            );
        let thickness = size as f32
            * rng.uniform_range(
                profile.ring_thickness_range.0,
                profile.ring_thickness_range.1,
            );
        let theta = rng.uniform_range(0.0, std::f32::consts::TAU);
        let (ct, st) = (theta.cos(), theta.sin());
        for slice in 0..slices_per_patient as u32 {
            let sx = cx + rng.uniform_range(-SLICE_CENTER_JITTER, SLICE_CENTER_JITTER);
            let sy = cy + rng.uniform_range(-SLICE_CENTER_JITTER, SLICE_CENTER_JITTER);
            let so = outer + rng.uniform_range(-SLICE_RADIUS_JITTER, SLICE_RADIUS_JITTER);
            let si = so - thickness;
            let mut image = vec![0.0f32; size * size];
            let mut mask = vec![0u8; size * size];
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    let class = pixel_class(px - sx, py - sy, so, si);
                    let base = match class {
                        1 => profile.myo_mean,
                        2 => profile.blood_mean,
                        _ => profile.background_mean,
                    };
                    let ramp = ((px - half) / half) * ct + ((py - half) / half) * st;
                    let shaded = base * (1.0 + profile.bias_field_strength * ramp);
                    let v = shaded + profile.noise_sigma * rng.next_gaussian();
                    image[y * size + x] = v.clamp(0.0, 1.0);
                    mask[y * size + x] = (class == 1) as u8;
                }
            }
            let sample = Sample {
                height: size,
                width: size,
                image,
                mask,
                patient_id: pid,
                slice_index: slice,
                provenance: Provenance::Real(profile.site_id.clone()),
            };
            sample.validate()?;
            samples.push(sample);
        }
    }
    Ok(SiteDataset::new(
        profile.site_id.clone(),
        Some(profile.clone()),
        samples,
    ))
}

/// Patient counts per split for `n` patients, by largest remainder.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let total: f64 = r.iter().sum();
    let exact: Vec<f64> = r.iter().map(|x| x / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Shuffles patients with a seeded RNG and tags them train/val/test.
pub fn split_dataset(
    ds: &SiteDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SiteDataset, DataError> {
    if [ratios.0, ratios.1, ratios.2].iter().any(|r| !(*r > 0.0)) {
        return Err(DataError::Request("split ratios must be positive".into()));
    }
    let mut patients = ds.patients();
    let counts = split_counts(patients.len(), ratios);
    if counts.iter().any(|&c| c == 0) {
        return Err(DataError::TooFewPatients {
            patients: patients.len(),
        });
    }
    RngStream::new(seed, stream_id(PURPOSE_SPLIT, 0)).shuffle(&mut patients);
    let mut tags = BTreeMap::new();
    for (i, p) in patients.into_iter().enumerate() {
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        tags.insert(p, split);
    }
    let mut out = ds.clone();
    out.set_splits(tags)?;
    Ok(out)
}
