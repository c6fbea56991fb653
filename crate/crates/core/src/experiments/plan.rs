//! TOML experiment plan. Every seed, count and hyperparameter is explicit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionTrainConfig;
use crate::phantom::SiteProfile;
use crate::segmentation::SegTrainConfig;

use super::ExperimentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Output directory, relative to the working directory.
    pub output: String,
    /// Creation time stamped into exported artifacts, seconds since the Unix epoch.
    pub created: u64,
    /// Registry address for artifact exchange; artifacts are dropped as files when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
    pub histogram_bins: usize,
    pub synthesis: SynthesisPlan,
    pub sites: BTreeMap<String, SitePlan>,
    pub rows: Vec<RowPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisPlan {
    pub seed: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SitePlan {
    pub patients: usize,
    pub slices: usize,
    pub data_seed: u64,
    pub split_seed: u64,
    pub profile: ProfilePlan,
    pub diffusion: DiffusionPlan,
    pub segmentation: SegPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilePlan {
    pub myo_mean: f32,
    pub blood_mean: f32,
    pub background_mean: f32,
    pub noise_sigma: f32,
    pub ring_outer_radius_range: (f32, f32),
    pub ring_thickness_range: (f32, f32),
    pub bias_field_strength: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub patience: usize,
    pub threshold: f32,
}

/// One result row: train sources are site ids (`"A"`) or synthetic sources
/// (`"syn.B"`); the test source is a site id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowPlan {
    pub train: Vec<String>,
    pub test: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub supplementary: bool,
}

/// How a row's segmentation model is trained.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainSource {
    Local(String),
    Augmented { local: String, generator: String },
}

impl TrainSource {
    pub fn label(&self) -> String {
        match self {
            TrainSource::Local(x) => format!("Hospital {x}"),
            TrainSource::Augmented { local, generator } => {
                format!("Hospital {local} + syn.{generator}")
            }
        }
    }

    /// Artifact-safe identifier.
    pub fn slug(&self) -> String {
        match self {
            TrainSource::Local(x) => x.clone(),
            TrainSource::Augmented { local, generator } => format!("{local}_syn-{generator}"),
        }
    }

    pub fn local(&self) -> &str {
        match self {
            TrainSource::Local(x) | TrainSource::Augmented { local: x, .. } => x,
        }
    }
}

impl RowPlan {
    pub fn source(&self) -> Result<TrainSource, ExperimentError> {
        let bad = || ExperimentError::Plan(format!("unsupported train sources {:?}", self.train));
        let (real, syn): (Vec<&String>, Vec<&String>) =
            self.train.iter().partition(|s| !s.starts_with("syn."));
        match (real.as_slice(), syn.as_slice()) {
            ([x], []) => Ok(TrainSource::Local((*x).clone())),
            ([x], [y]) => {
                let generator = y.strip_prefix("syn.").unwrap().to_string();
                if generator == **x {
                    return Err(bad());
                }
                Ok(TrainSource::Augmented {
                    local: (*x).clone(),
                    generator,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl SitePlan {
    pub fn profile(&self, id: &str) -> SiteProfile {
        let p = &self.profile;
        SiteProfile {
            site_id: id.to_string(),
            myo_mean: p.myo_mean,
            blood_mean: p.blood_mean,
            background_mean: p.background_mean,
            noise_sigma: p.noise_sigma,
            ring_outer_radius_range: p.ring_outer_radius_range,
            ring_thickness_range: p.ring_thickness_range,
            bias_field_strength: p.bias_field_strength,
        }
    }

    pub fn diffusion_config(&self) -> DiffusionTrainConfig {
        let d = &self.diffusion;
        DiffusionTrainConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            seed: d.seed,
            steps: d.steps,
            beta_min: d.beta_min,
            beta_max: d.beta_max,
        }
    }

    pub fn seg_config(&self) -> SegTrainConfig {
        let s = &self.segmentation;
        SegTrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            seed: s.seed,
            patience: s.patience,
            threshold: s.threshold,
        }
    }
}

fn profile_plan(p: &SiteProfile) -> ProfilePlan {
    ProfilePlan {
        myo_mean: p.myo_mean,
        blood_mean: p.blood_mean,
        background_mean: p.background_mean,
        noise_sigma: p.noise_sigma,
        ring_outer_radius_range: p.ring_outer_radius_range,
        ring_thickness_range: p.ring_thickness_range,
        bias_field_strength: p.bias_field_strength,
    }
}

fn diffusion_plan(seed: u64) -> DiffusionPlan {
    let d = DiffusionTrainConfig::default();
    DiffusionPlan {
        epochs: d.epochs,
        batch_size: d.batch_size,
        lr: d.lr,
        seed,
        steps: d.steps,
        beta_min: d.beta_min,
        beta_max: d.beta_max,
    }
}

fn seg_plan(seed: u64) -> SegPlan {
    let s = SegTrainConfig::default();
    SegPlan {
        epochs: s.epochs,
        batch_size: s.batch_size,
        lr: s.lr,
        seed,
        patience: s.patience,
        threshold: s.threshold,
    }
}

fn row(train: &[&str], test: &str, supplementary: bool) -> RowPlan {
    RowPlan {
        train: train.iter().map(|s| s.to_string()).collect(),
        test: test.into(),
        supplementary,
    }
}

impl ExperimentPlan {
    /// Two sites; the A-side rows in table order, then the mirrored B-side rows.
    pub fn default_plan() -> Self {
        let (a, b) = crate::phantom::default_profiles();
        let mut sites = BTreeMap::new();
        sites.insert(
            "A".to_string(),
            SitePlan {
                patients: 40,
                slices: 4,
                data_seed: 7,
                split_seed: 7,
                profile: profile_plan(&a),
                diffusion: diffusion_plan(11),
                segmentation: seg_plan(21),
            },
        );
        sites.insert(
            "B".to_string(),
            SitePlan {
                patients: 50,
                slices: 6,
                data_seed: 8,
                split_seed: 8,
                profile: profile_plan(&b),
                diffusion: diffusion_plan(12),
                segmentation: seg_plan(22),
            },
        );
        Self {
            output: "fdm-out".into(),
            created: 1_700_000_000,
            registry: None,
            histogram_bins: 64,
            synthesis: SynthesisPlan {
                seed: 5,
                batch_size: 16,
            },
            sites,
            rows: vec![
                row(&["A"], "A", false),
                row(&["A"], "B", false),
                row(&["A", "syn.B"], "B", false),
                row(&["A", "syn.B"], "A", false),
                row(&["B"], "B", true),
                row(&["B"], "A", true),
                row(&["B", "syn.A"], "A", true),
                row(&["B", "syn.A"], "B", true),
            ],
        }
    }

    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let plan: Self = toml::from_str(text).map_err(|e| ExperimentError::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Plan(m));
        if self.sites.is_empty() || self.rows.is_empty() {
            return bad("plan needs at least one site and one row".into());
        }
        if self.histogram_bins == 0 || self.synthesis.batch_size == 0 {
            return bad("histogram bins and synthesis batch size must be positive".into());
        }
        for (id, site) in &self.sites {
            site.profile(id)
                .validate()
                .map_err(|e| ExperimentError::Plan(format!("site {id}: {e}")))?;
            site.diffusion_config()
                .validate()
                .map_err(|e| ExperimentError::Plan(format!("site {id}: {e}")))?;
            site.seg_config()
                .validate()
                .map_err(|e| ExperimentError::Plan(format!("site {id}: {e}")))?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.rows {
            let src = r.source()?;
            let mut referenced = vec![src.local().to_string(), r.test.clone()];
            if let TrainSource::Augmented { generator, .. } = &src {
                referenced.push(generator.clone());
            }
            if let Some(missing) = referenced.iter().find(|s| !self.sites.contains_key(*s)) {
                return bad(format!("row references undefined site {missing:?}"));
            }
            if !seen.insert((src.label(), r.test.clone())) {
                return bad(format!("duplicate row {} -> {}", src.label(), r.test));
            }
        }
        Ok(())
    }
}
