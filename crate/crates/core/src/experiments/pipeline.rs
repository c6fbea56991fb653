use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::diffusion::{
    build_schedule, synthesize_dataset, train_diffusion, worker_threads, EpsilonNet,
    EpsilonNetSpec, TrainedEpsilonNet, TrainingLog,
};
use crate::federation::{
    export_artifact, import_artifact, privacy_audit, pull_artifact, push_artifact, ArtifactBytes,
    ArtifactMetadata, AuditReport, ScheduleMeta, ARTIFACT_EXTENSION,
};
use crate::phantom::{
    generate_site_dataset, split_dataset, write_dataset, Sample, SiteDataset, Split,
};
use crate::segmentation::{
    evaluate, train_segmentation, MetricRow, SegNet, SegNetSpec, SegTrainConfig, TrainedSegNet,
};

use super::histogram::{compute_histograms, HistogramReport};
use super::plan::{ExperimentPlan, SynthesisPlan, TrainSource};
use super::report::{emit_report, ReportFormat, ResultTable};
use super::ExperimentError;

/// The only path between sites: it carries verified artifact bytes and nothing else.
pub trait ArtifactChannel {
    fn send(&self, name: &str, artifact: &ArtifactBytes) -> Result<(), ExperimentError>;
    fn receive(&self, name: &str) -> Result<ArtifactBytes, ExperimentError>;
}

/// Exchange through a shared directory of `.fdma` files.
pub struct FileDrop {
    dir: PathBuf,
}

impl FileDrop {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_of(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.{ARTIFACT_EXTENSION}"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl ArtifactChannel for FileDrop {
    fn send(&self, name: &str, artifact: &ArtifactBytes) -> Result<(), ExperimentError> {
        crate::federation::validate_name(name)?;
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, artifact.as_bytes()).map_err(io_err(&tmp))?;
        let dst = self.path_of(name);
        fs::rename(&tmp, &dst).map_err(io_err(&dst))
    }

    fn receive(&self, name: &str) -> Result<ArtifactBytes, ExperimentError> {
        let path = self.path_of(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(ArtifactBytes::try_from(bytes)?)
    }
}

/// Exchange through a running registry service.
pub struct RegistryChannel {
    addr: String,
}

impl RegistryChannel {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into() }
    }
}

impl ArtifactChannel for RegistryChannel {
    fn send(&self, name: &str, artifact: &ArtifactBytes) -> Result<(), ExperimentError> {
        Ok(push_artifact(self.addr.as_str(), name, artifact)?)
    }

    fn receive(&self, name: &str) -> Result<ArtifactBytes, ExperimentError> {
        Ok(pull_artifact(self.addr.as_str(), name)?)
    }
}

pub struct LocalOutcome {
    pub rows: Vec<MetricRow>,
    pub model: TrainedSegNet,
    pub log: TrainingLog,
}

fn require_split(ds: &SiteDataset) -> Result<(), ExperimentError> {
    if !ds.is_split() {
        return Err(ExperimentError::Plan(format!(
            "dataset of site {} has no train/val/test split",
            ds.site_id
        )));
    }
    Ok(())
}

fn test_rows(
    model: &TrainedSegNet,
    label: &str,
    threshold: f32,
    sets: &[&SiteDataset],
) -> Result<Vec<MetricRow>, ExperimentError> {
    sets.iter()
        .map(|ds| {
            Ok(evaluate(
                model,
                &ds.samples_in(Split::Test),
                threshold,
                label,
            )?)
        })
        .collect()
}

/// Trains on the local train split and evaluates on the local test split, then
/// on every other site's test split with the same checkpoint.
pub fn run_local_experiment(
    local: &SiteDataset,
    others: &[&SiteDataset],
    cfg: &SegTrainConfig,
) -> Result<LocalOutcome, ExperimentError> {
    require_split(local)?;
    let net = SegNet::new(SegNetSpec::default());
    let (params, log) = train_segmentation(
        &net,
        &local.samples_in(Split::Train),
        &local.samples_in(Split::Val),
        cfg,
    )?;
    let model = TrainedSegNet { net, params };
    let label = TrainSource::Local(local.site_id.clone()).label();
    let mut sets = vec![local];
    sets.extend_from_slice(others);
    let rows = test_rows(&model, &label, cfg.threshold, &sets)?;
    Ok(LocalOutcome { rows, model, log })
}

pub struct AugmentOutcome {
    pub rows: Vec<MetricRow>,
    pub model: TrainedSegNet,
    pub log: TrainingLog,
    pub synthetic: SiteDataset,
    pub audit: AuditReport,
    pub metadata: ArtifactMetadata,
}

/// Audits and imports a remote diffusion artifact, synthesizes one image per
/// local train mask, trains on local real plus synthetic data, and evaluates
/// on the generator site's test split, then the local one, then any others.
pub fn run_remote_augment(
    local: &SiteDataset,
    artifact: &ArtifactBytes,
    others: &[&SiteDataset],
    cfg: &SegTrainConfig,
    synthesis: &SynthesisPlan,
) -> Result<AugmentOutcome, ExperimentError> {
    require_split(local)?;
    let audit = privacy_audit(artifact.as_bytes(), local)?;
    let spec = EpsilonNetSpec::default();
    let (params, metadata) = import_artifact(artifact.as_bytes(), &spec.arch_hash())?;
    if !audit.passed() {
        return Err(ExperimentError::AuditFailed {
            artifact: metadata.name,
            site: local.site_id.clone(),
            findings: audit.findings,
        });
    }
    let ScheduleMeta {
        steps,
        beta_min,
        beta_max,
    } = metadata
        .schedule
        .ok_or_else(|| ExperimentError::Plan("diffusion artifact without a schedule".into()))?;
    let sched = build_schedule(steps, beta_min, beta_max)?;
    let generator = TrainedEpsilonNet {
        net: EpsilonNet::new(spec),
        params,
    };
    let synthetic = synthesize_dataset(
        &generator,
        &metadata.origin_site,
        local,
        &sched,
        synthesis.seed,
        synthesis.batch_size,
        worker_threads(),
    )?;

    let mut train: Vec<&Sample> = local.samples_in(Split::Train);
    train.extend(synthetic.samples());
    let net = SegNet::new(SegNetSpec::default());
    let (seg_params, log) = train_segmentation(&net, &train, &local.samples_in(Split::Val), cfg)?;
    let model = TrainedSegNet {
        net,
        params: seg_params,
    };

    let label = TrainSource::Augmented {
        local: local.site_id.clone(),
        generator: metadata.origin_site.clone(),
    }
    .label();
    let mut sets: Vec<&SiteDataset> = others
        .iter()
        .copied()
        .filter(|d| d.site_id == metadata.origin_site)
        .collect();
    sets.push(local);
    sets.extend(
        others
            .iter()
            .copied()
            .filter(|d| d.site_id != metadata.origin_site),
    );
    let rows = test_rows(&model, &label, cfg.threshold, &sets)?;
    Ok(AugmentOutcome {
        rows,
        model,
        log,
        synthetic,
        audit,
        metadata,
    })
}

/// Everything a plan run produces besides the files it writes.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOutcome {
    pub table: ResultTable,
    pub supplementary: ResultTable,
    pub histograms: HistogramReport,
    /// CRC32 of every exported artifact, by name.
    pub artifact_checksums: BTreeMap<String, u32>,
    /// `(artifact, auditing site, report)` for every audit that ran.
    pub audits: Vec<(String, String, AuditReport)>,
}

struct StageLog {
    path: PathBuf,
}

impl StageLog {
    fn line(&self, text: &str) {
        if let Ok(mut f) = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
        {
            let _ = writeln!(f, "{text}");
        }
    }

    fn run<T>(
        &self,
        stage: &str,
        f: impl FnOnce() -> Result<T, ExperimentError>,
    ) -> Result<T, ExperimentError> {
        log::info!("stage {stage}");
        self.line(&format!("start\t{stage}"));
        let t0 = Instant::now();
        match f() {
            Ok(v) => {
                self.line(&format!(
                    "done\t{stage}\t{:.1}s",
                    t0.elapsed().as_secs_f64()
                ));
                Ok(v)
            }
            Err(e) => {
                self.line(&format!("failed\t{stage}\t{e}"));
                Err(ExperimentError::Stage {
                    stage: stage.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }
}

fn write_training_log(path: &Path, log: &TrainingLog) -> Result<(), ExperimentError> {
    let mut out = String::from("epoch\tloss\tval_dice\n");
    for (i, l) in log.epoch_losses.iter().enumerate() {
        let v = log
            .epoch_val
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!("{i}\t{l}\t{v}\n"));
    }
    fs::write(path, out).map_err(io_err(path))
}

fn write_audit(path: &Path, report: &AuditReport) -> Result<(), ExperimentError> {
    let mut out = format!("passed\t{}\n", report.passed());
    for f in &report.findings {
        out.push_str(&format!("{f}\n"));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Runs a plan end to end under `out`: data generation, diffusion training and
/// export, artifact exchange with audits, both experiments, histograms, reports.
pub fn run_full_matrix(
    plan: &ExperimentPlan,
    out: &Path,
) -> Result<MatrixOutcome, ExperimentError> {
    plan.validate()?;
    let dirs: Vec<PathBuf> = ["artifacts", "reports", "logs", "datasets"]
        .iter()
        .map(|d| out.join(d))
        .collect();
    for d in &dirs {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let (artifacts, reports, logs, datasets) = (&dirs[0], &dirs[1], &dirs[2], &dirs[3]);
    let stages = StageLog {
        path: logs.join("pipeline.log"),
    };
    let _ = fs::remove_file(&stages.path);

    let mut sites: BTreeMap<String, SiteDataset> = BTreeMap::new();
    for (id, sp) in &plan.sites {
        let ds = stages.run(&format!("data:{id}"), || {
            let raw = generate_site_dataset(&sp.profile(id), sp.patients, sp.slices, sp.data_seed)?;
            let ds = split_dataset(&raw, (0.6, 0.2, 0.2), sp.split_seed)?;
            write_dataset(&datasets.join(id), &ds)?;
            Ok(ds)
        })?;
        sites.insert(id.clone(), ds);
    }

    let sources: Vec<TrainSource> = {
        let mut v: Vec<TrainSource> = Vec::new();
        for r in &plan.rows {
            let s = r.source()?;
            if !v.contains(&s) {
                v.push(s);
            }
        }
        v
    };
    let mut generators: Vec<String> = Vec::new();
    for s in &sources {
        if let TrainSource::Augmented { generator, .. } = s {
            if !generators.contains(generator) {
                generators.push(generator.clone());
            }
        }
    }

    let drop_box = FileDrop::new(artifacts);
    let registry = plan.registry.as_ref().map(RegistryChannel::new);
    let exchange: &dyn ArtifactChannel = match &registry {
        Some(r) => r,
        None => &drop_box,
    };
    let mut checksums = BTreeMap::new();
    let mut audits = Vec::new();

    for y in &generators {
        let name = format!("diffusion-{y}");
        let sp = &plan.sites[y];
        let ds = &sites[y];
        let artifact = stages.run(&format!("diffusion:{y}"), || {
            let cfg = sp.diffusion_config();
            let net = EpsilonNet::new(EpsilonNetSpec::default());
            let (params, log) = train_diffusion(&ds.samples_in(Split::Train), &net, &cfg)?;
            write_training_log(&logs.join(format!("{name}.tsv")), &log)?;
            let meta = ArtifactMetadata::for_diffusion(
                &name,
                y,
                net.spec(),
                ScheduleMeta {
                    steps: cfg.steps,
                    beta_min: cfg.beta_min,
                    beta_max: cfg.beta_max,
                },
                &cfg.digest(),
                plan.created,
            );
            Ok(export_artifact(&params, &meta)?)
        })?;
        stages.run(&format!("audit:{name}@{y}"), || {
            let report = privacy_audit(artifact.as_bytes(), ds)?;
            write_audit(&reports.join(format!("audit_{name}_{y}.txt")), &report)?;
            let passed = report.passed();
            audits.push((name.clone(), y.clone(), report.clone()));
            if !passed {
                return Err(ExperimentError::AuditFailed {
                    artifact: name.clone(),
                    site: y.clone(),
                    findings: report.findings,
                });
            }
            Ok(())
        })?;
        stages.run(&format!("share:{name}"), || {
            drop_box.send(&name, &artifact)?;
            if let Some(r) = &registry {
                r.send(&name, &artifact)?;
            }
            Ok(())
        })?;
        checksums.insert(name, artifact.checksum());
    }

    let mut rows: BTreeMap<(String, String), MetricRow> = BTreeMap::new();
    let mut synthetic: Vec<(String, SiteDataset)> = Vec::new();
    for src in &sources {
        let x = src.local();
        let local = &sites[x];
        let others: Vec<&SiteDataset> = sites.values().filter(|d| d.site_id != x).collect();
        let cfg = plan.sites[x].seg_config();
        let (outcome_rows, model, log) = match src {
            TrainSource::Local(_) => {
                let o = stages.run(&format!("local:{}", src.slug()), || {
                    run_local_experiment(local, &others, &cfg)
                })?;
                (o.rows, o.model, o.log)
            }
            TrainSource::Augmented { generator, .. } => {
                let name = format!("diffusion-{generator}");
                let artifact =
                    stages.run(&format!("receive:{name}@{x}"), || exchange.receive(&name))?;
                let o = stages.run(&format!("remote-augment:{}", src.slug()), || {
                    run_remote_augment(local, &artifact, &others, &cfg, &plan.synthesis)
                })?;
                write_audit(&reports.join(format!("audit_{name}_{x}.txt")), &o.audit)?;
                audits.push((name, x.to_string(), o.audit));
                let dir = datasets.join(format!("syn-{generator}-for-{x}"));
                write_dataset(&dir, &o.synthetic)?;
                synthetic.push((format!("syn.{generator}"), o.synthetic));
                (o.rows, o.model, o.log)
            }
        };
        let seg_name = format!("segmentation-{}", src.slug());
        write_training_log(&logs.join(format!("{seg_name}.tsv")), &log)?;
        let meta = ArtifactMetadata::for_segmentation(
            &seg_name,
            x,
            model.net.spec(),
            &cfg.digest(),
            plan.created,
        );
        let artifact = export_artifact(&model.params, &meta)?;
        drop_box.send(&seg_name, &artifact)?;
        checksums.insert(seg_name, artifact.checksum());
        for r in outcome_rows {
            rows.insert((r.train_source.clone(), r.test_source.clone()), r);
        }
    }

    let mut table = ResultTable::default();
    let mut supplementary = ResultTable::default();
    for r in &plan.rows {
        let key = (r.source()?.label(), format!("Hospital {}", r.test));
        let row = rows
            .get(&key)
            .cloned()
            .expect("every planned row was evaluated");
        if r.supplementary {
            supplementary.push(row)?;
        } else {
            table.push(row)?;
        }
    }

    let histograms = stages.run("histograms", || {
        let mut named: Vec<(String, Vec<&Sample>)> = sites
            .iter()
            .map(|(id, d)| (id.clone(), d.samples().iter().collect()))
            .collect();
        for (name, d) in &synthetic {
            let mut n = name.clone();
            while named.iter().any(|(m, _)| *m == n) {
                n.push('\'');
            }
            named.push((n, d.samples().iter().collect()));
        }
        let borrowed: Vec<(&str, Vec<&Sample>)> =
            named.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        compute_histograms(&borrowed, plan.histogram_bins)
    })?;

    stages.run("reports", || {
        for format in [ReportFormat::Markdown, ReportFormat::Tsv] {
            emit_report(reports, "results", &table, Some(&histograms), format)?;
            if !supplementary.is_empty() {
                emit_report(reports, "supplementary", &supplementary, None, format)?;
            }
        }
        let mut sums = String::from("artifact\tcrc32\n");
        for (n, c) in &checksums {
            sums.push_str(&format!("{n}\t{c:08x}\n"));
        }
        let p = reports.join("artifact_checksums.tsv");
        fs::write(&p, sums).map_err(io_err(&p))?;
        Ok(())
    })?;

    Ok(MatrixOutcome {
        table,
        supplementary,
        histograms,
        artifact_checksums: checksums,
        audits,
    })
}
