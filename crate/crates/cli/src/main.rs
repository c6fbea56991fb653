//! `fdm`: every pipeline stage as a subcommand, plus `run` for a whole plan.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 audit or
//! verification failure. Progress goes to stderr; results go to files (and
//! `run` also prints the result table on stdout).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdm_core::diffusion::{
    build_schedule, sample_batch, synthesis_stream, synthesize_dataset, train_diffusion,
    worker_threads, DiffusionError, DiffusionTrainConfig, EpsilonNet, EpsilonNetSpec,
    TrainedEpsilonNet,
};
use fdm_core::experiments::{
    compute_histograms, emit_report, run_full_matrix, table_markdown, ExperimentError,
    ExperimentPlan, ReportFormat, ResultTable,
};
use fdm_core::federation::{
    export_artifact, import_artifact, parse_artifact, privacy_audit, pull_artifact, push_artifact,
    ArtifactBytes, ArtifactKind, ArtifactMetadata, FederationError, RegistryServer, ScheduleMeta,
};
use fdm_core::nn::{decode_weights, encode_weights};
use fdm_core::phantom::{
    generate_site_dataset, read_dataset, split_dataset, write_dataset, DataError, Sample,
    SiteDataset, SiteProfile, Split,
};
use fdm_core::segmentation::{
    evaluate, site_label, train_segmentation, SegError, SegNet, SegNetSpec, SegTrainConfig,
    TrainedSegNet,
};

#[derive(Parser)]
#[command(
    name = "fdm",
    version,
    about = "Federated data model: share diffusion generators between sites, not data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset for one site.
    GenData(GenData),
    /// Tag a dataset's patients train/val/test.
    Split(SplitArgs),
    /// Train a mask-conditioned diffusion model and export it as an artifact.
    TrainDiffusion(TrainDiffusion),
    /// Draw synthetic images for a few masks and write PGM previews.
    Sample(SampleArgs),
    /// Synthesize one image per train-split mask of a dataset.
    Synthesize(Synthesize),
    /// Train a segmentation model and export it as an artifact.
    TrainSeg(TrainSeg),
    /// Dice of a segmentation artifact on a dataset's test split.
    Evaluate(EvaluateArgs),
    /// Wrap a raw weight stream into an artifact.
    Export(ExportArgs),
    /// Verify an artifact and unpack its weights and metadata.
    Import(ImportArgs),
    /// Check an artifact against the privacy contract.
    Audit(AuditArgs),
    /// Run the artifact registry.
    Serve(ServeArgs),
    /// Upload an artifact to a registry.
    Push(PushArgs),
    /// Download an artifact from a registry.
    Pull(PullArgs),
    /// Intensity histograms and their L1 distances.
    Histograms(HistogramArgs),
    /// Run a whole experiment plan.
    Run(RunArgs),
}

#[derive(Args)]
struct GenData {
    /// Site id; A and B have built-in profiles, others need --plan.
    #[arg(long)]
    site: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    slices: Option<usize>,
    /// Take the site's profile and counts from this plan.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainDiffusion {
    /// Split dataset; the train split is used.
    #[arg(long)]
    dataset: PathBuf,
    /// Output artifact; its file stem becomes the artifact name.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    /// Diffusion steps T.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f32,
    /// Creation time recorded in the artifact, seconds since the Unix epoch.
    #[arg(long, default_value_t = 0)]
    created: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    artifact: PathBuf,
    /// Dataset whose masks condition the samples.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    count: usize,
}

#[derive(Args)]
struct Synthesize {
    #[arg(long)]
    artifact: PathBuf,
    /// Split dataset whose train-split masks condition the samples.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct TrainSeg {
    /// Split dataset; its train split trains and its val split selects the checkpoint.
    #[arg(long)]
    dataset: PathBuf,
    /// Extra synthetic datasets added to the training set.
    #[arg(long)]
    synthetic: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    patience: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    created: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    artifact: PathBuf,
    /// Split dataset; the test split is scored.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_format, default_value = "markdown")]
    format: ReportFormat,
    /// Train-source label; defaults to the artifact's origin site.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct ExportArgs {
    /// Raw weight stream.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// diffusion or segmentation.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    site: String,
    #[arg(long, default_value = "unspecified")]
    config_digest: String,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    created: u64,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    artifact: PathBuf,
    /// Directory receiving `weights.fdmw` and `metadata.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    artifact: PathBuf,
    /// Dataset whose raw images the payload must not contain.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    addr: String,
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args)]
struct PushArgs {
    #[arg(long)]
    addr: String,
    #[arg(long)]
    artifact: PathBuf,
    /// Registry name; defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct PullArgs {
    #[arg(long)]
    addr: String,
    #[arg(long)]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HistogramArgs {
    /// `name=dir` pairs.
    #[arg(long = "dataset", required = true)]
    datasets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    bins: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Overrides the plan's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the plan's registry address.
    #[arg(long)]
    addr: Option<String>,
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    ReportFormat::parse(s).ok_or_else(|| format!("unknown format {s:?} (expected tsv or markdown)"))
}

enum Failure {
    Usage(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Verification(m) => m,
        }
    }
}

fn is_verification(e: &FederationError) -> bool {
    matches!(
        e,
        FederationError::Corrupt { .. }
            | FederationError::Incompatible { .. }
            | FederationError::Transfer(_)
    )
}

impl From<FederationError> for Failure {
    fn from(e: FederationError) -> Self {
        if is_verification(&e) {
            Failure::Verification(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let mut inner = &e;
        while let ExperimentError::Stage { source, .. } = inner {
            inner = source;
        }
        match inner {
            ExperimentError::AuditFailed { .. } => Failure::Verification(e.to_string()),
            ExperimentError::Federation(f) if is_verification(f) => {
                Failure::Verification(e.to_string())
            }
            ExperimentError::Plan(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(DataError, DiffusionError, SegError, fdm_core::nn::NnError);

type CliResult = Result<(), Failure>;

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn artifact_name(path: &Path) -> Result<String, Failure> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    fdm_core::federation::validate_name(&stem).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(stem)
}

fn read_split(dir: &Path) -> Result<SiteDataset, Failure> {
    let ds = read_dataset(dir)?;
    if !ds.is_split() {
        return Err(Failure::Usage(format!(
            "{} has no train/val/test split; run `fdm split` first",
            dir.display()
        )));
    }
    Ok(ds)
}

fn load_generator(path: &Path) -> Result<(TrainedEpsilonNet, ArtifactMetadata), Failure> {
    let spec = EpsilonNetSpec::default();
    let (params, meta) = import_artifact(&read_file(path)?, &spec.arch_hash())?;
    Ok((
        TrainedEpsilonNet {
            net: EpsilonNet::new(spec),
            params,
        },
        meta,
    ))
}

fn gen_data(a: GenData) -> CliResult {
    let (profile, mut patients, mut slices) = match &a.plan {
        Some(p) => {
            let plan = ExperimentPlan::load(p)?;
            let sp = plan
                .sites
                .get(&a.site)
                .ok_or_else(|| Failure::Usage(format!("plan has no site {:?}", a.site)))?;
            (sp.profile(&a.site), sp.patients, sp.slices)
        }
        None => match a.site.as_str() {
            "A" => (SiteProfile::hospital_a(), 40, 4),
            "B" => (SiteProfile::hospital_b(), 50, 6),
            other => {
                return Err(Failure::Usage(format!(
                    "no built-in profile for site {other:?}; pass --plan"
                )))
            }
        },
    };
    patients = a.patients.unwrap_or(patients);
    slices = a.slices.unwrap_or(slices);
    let ds = generate_site_dataset(&profile, patients, slices, a.seed)?;
    write_dataset(&a.out, &ds)?;
    log::info!(
        "wrote {} samples from {patients} patients to {}",
        ds.len(),
        a.out.display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> CliResult {
    let ds = read_dataset(&a.dataset)?;
    let tagged = split_dataset(&ds, (0.6, 0.2, 0.2), a.seed)?;
    write_dataset(&a.out, &tagged)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        log::info!("{}: {} patients", s.as_str(), tagged.patients_in(s).len());
    }
    Ok(())
}

fn train_diffusion_cmd(a: TrainDiffusion) -> CliResult {
    let name = artifact_name(&a.out)?;
    let ds = read_split(&a.dataset)?;
    let cfg = DiffusionTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        steps: a.steps,
        ..DiffusionTrainConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let net = EpsilonNet::new(EpsilonNetSpec::default());
    let (params, log) = train_diffusion(&ds.samples_in(Split::Train), &net, &cfg)?;
    log::info!(
        "final epoch loss {:.5}",
        log.epoch_losses.last().copied().unwrap_or(f32::NAN)
    );
    let meta = ArtifactMetadata::for_diffusion(
        &name,
        &ds.site_id,
        net.spec(),
        ScheduleMeta {
            steps: cfg.steps,
            beta_min: cfg.beta_min,
            beta_max: cfg.beta_max,
        },
        &cfg.digest(),
        a.created,
    );
    write_file(&a.out, export_artifact(&params, &meta)?.as_bytes())
}

fn pgm(s: &Sample) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(
        s.image
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

fn sample_cmd(a: SampleArgs) -> CliResult {
    let (model, meta) = load_generator(&a.artifact)?;
    let sched = meta
        .schedule
        .map(|s| build_schedule(s.steps, s.beta_min, s.beta_max))
        .transpose()?
        .expect("diffusion schedule");
    let ds = read_dataset(&a.dataset)?;
    let sources: Vec<&Sample> = ds.samples().iter().take(a.count.max(1)).collect();
    let (h, w) = (sources[0].height, sources[0].width);
    let masks: Vec<&[u8]> = sources.iter().map(|s| s.mask.as_slice()).collect();
    let mut streams: Vec<_> = sources
        .iter()
        .map(|s| synthesis_stream(a.seed, s.patient_id, s.slice_index))
        .collect();
    let images = sample_batch(&model, &masks, h, w, &sched, &mut streams)?;
    fs::create_dir_all(&a.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    let samples: Vec<Sample> = sources
        .iter()
        .zip(images)
        .map(|(src, image)| Sample {
            image,
            provenance: fdm_core::phantom::Provenance::Synthetic(meta.origin_site.clone()),
            ..(*src).clone()
        })
        .collect();
    for s in &samples {
        write_file(
            &a.out
                .join(format!("p{:04}_s{:02}.pgm", s.patient_id, s.slice_index)),
            &pgm(s),
        )?;
    }
    write_dataset(
        &a.out,
        &SiteDataset::new(meta.origin_site.clone(), None, samples),
    )?;
    Ok(())
}

fn synthesize_cmd(a: Synthesize) -> CliResult {
    let (model, meta) = load_generator(&a.artifact)?;
    let s = meta.schedule.expect("diffusion schedule");
    let sched = build_schedule(s.steps, s.beta_min, s.beta_max)?;
    let local = read_split(&a.dataset)?;
    let syn = synthesize_dataset(
        &model,
        &meta.origin_site,
        &local,
        &sched,
        a.seed,
        a.batch_size,
        worker_threads(),
    )?;
    write_dataset(&a.out, &syn)?;
    log::info!(
        "synthesized {} images with the generator from site {}",
        syn.len(),
        meta.origin_site
    );
    Ok(())
}

fn train_seg_cmd(a: TrainSeg) -> CliResult {
    let name = artifact_name(&a.out)?;
    let ds = read_split(&a.dataset)?;
    let extra: Vec<SiteDataset> = a
        .synthetic
        .iter()
        .map(|p| read_dataset(p))
        .collect::<Result<_, _>>()?;
    let mut train = ds.samples_in(Split::Train);
    for e in &extra {
        train.extend(e.samples());
    }
    let cfg = SegTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        patience: a.patience,
        ..SegTrainConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let net = SegNet::new(SegNetSpec::default());
    let (params, log) = train_segmentation(&net, &train, &ds.samples_in(Split::Val), &cfg)?;
    log::info!(
        "best val dice {:.4}",
        log.epoch_val.iter().copied().fold(0.0, f32::max)
    );
    let meta = ArtifactMetadata::for_segmentation(
        &name,
        &ds.site_id,
        net.spec(),
        &cfg.digest(),
        a.created,
    );
    write_file(&a.out, export_artifact(&params, &meta)?.as_bytes())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let spec = SegNetSpec::default();
    let (params, meta) = import_artifact(&read_file(&a.artifact)?, &spec.arch_hash())?;
    let ds = read_split(&a.dataset)?;
    let model = TrainedSegNet {
        net: SegNet::new(spec),
        params,
    };
    let label = a.label.unwrap_or_else(|| site_label(&meta.origin_site));
    let row = evaluate(&model, &ds.samples_in(Split::Test), a.threshold, &label)?;
    log::info!(
        "{} -> {}: dice {:.4}",
        row.train_source,
        row.test_source,
        row.dice
    );
    let table = ResultTable { rows: vec![row] };
    emit_report(&a.out, "evaluation", &table, None, a.format)?;
    Ok(())
}

fn export_cmd(a: ExportArgs) -> CliResult {
    let name = artifact_name(&a.out)?;
    let params = decode_weights(&read_file(&a.weights)?)?;
    let meta = match ArtifactKind::parse(&a.kind) {
        Some(ArtifactKind::Diffusion) => {
            let d = DiffusionTrainConfig::default();
            ArtifactMetadata::for_diffusion(
                &name,
                &a.site,
                &EpsilonNetSpec::default(),
                ScheduleMeta {
                    steps: a.steps,
                    beta_min: d.beta_min,
                    beta_max: d.beta_max,
                },
                &a.config_digest,
                a.created,
            )
        }
        Some(ArtifactKind::Segmentation) => ArtifactMetadata::for_segmentation(
            &name,
            &a.site,
            &SegNetSpec::default(),
            &a.config_digest,
            a.created,
        ),
        None => {
            return Err(Failure::Usage(format!(
                "unknown kind {:?} (expected diffusion or segmentation)",
                a.kind
            )))
        }
    };
    write_file(&a.out, export_artifact(&params, &meta)?.as_bytes())
}

fn import_cmd(a: ImportArgs) -> CliResult {
    let bytes = read_file(&a.artifact)?;
    let raw = parse_artifact(&bytes)?;
    let expected = match ArtifactKind::from_code(raw.kind) {
        Some(ArtifactKind::Diffusion) => EpsilonNetSpec::default().arch_hash(),
        Some(ArtifactKind::Segmentation) => SegNetSpec::default().arch_hash(),
        None => {
            return Err(Failure::Verification(format!(
                "unknown artifact kind {}",
                raw.kind
            )))
        }
    };
    let (params, meta) = import_artifact(&bytes, &expected)?;
    write_file(&a.out.join("weights.fdmw"), &encode_weights(&params))?;
    write_file(&a.out.join("metadata.txt"), meta.to_text().as_bytes())?;
    log::info!(
        "{} ({}) from site {}: {} tensors",
        meta.name,
        meta.kind.as_str(),
        meta.origin_site,
        params.len()
    );
    Ok(())
}

fn audit_cmd(a: AuditArgs) -> CliResult {
    let bytes = read_file(&a.artifact)?;
    let ds = read_dataset(&a.dataset)?;
    let report = privacy_audit(&bytes, &ds)?;
    if report.passed() {
        log::info!("audit passed");
        return Ok(());
    }
    for f in &report.findings {
        eprintln!("{f}");
    }
    Err(Failure::Verification(format!(
        "audit failed with {} finding(s)",
        report.findings.len()
    )))
}

fn serve_cmd(a: ServeArgs) -> CliResult {
    let server = RegistryServer::bind(&a.addr, &a.store)?;
    log::info!(
        "registry on {} with {} artifact(s)",
        server.local_addr(),
        server.index().entries.len()
    );
    server.serve();
    Ok(())
}

fn push_cmd(a: PushArgs) -> CliResult {
    let name = match a.name {
        Some(n) => n,
        None => artifact_name(&a.artifact)?,
    };
    let artifact = ArtifactBytes::try_from(read_file(&a.artifact)?)?;
    push_artifact(a.addr.as_str(), &name, &artifact)?;
    log::info!("pushed {name} ({} bytes)", artifact.len());
    Ok(())
}

fn pull_cmd(a: PullArgs) -> CliResult {
    let artifact = pull_artifact(a.addr.as_str(), &a.name)?;
    write_file(&a.out, artifact.as_bytes())
}

fn histograms_cmd(a: HistogramArgs) -> CliResult {
    let mut loaded: Vec<(String, SiteDataset)> = Vec::new();
    for spec in &a.datasets {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--dataset expects name=dir, got {spec:?}")))?;
        loaded.push((name.to_string(), read_dataset(Path::new(dir))?));
    }
    let named: Vec<(&str, Vec<&Sample>)> = loaded
        .iter()
        .map(|(n, d)| (n.as_str(), d.samples().iter().collect()))
        .collect();
    let report = compute_histograms(&named, a.bins)?;
    fs::create_dir_all(&a.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    write_file(
        &a.out.join("histograms.tsv"),
        fdm_core::experiments::histograms_tsv(&report).as_bytes(),
    )?;
    write_file(
        &a.out.join("histogram_distances.tsv"),
        fdm_core::experiments::distances_tsv(&report).as_bytes(),
    )
}

fn run_cmd(a: RunArgs) -> CliResult {
    let mut plan = ExperimentPlan::load(&a.plan)?;
    if a.addr.is_some() {
        plan.registry = a.addr;
    }
    let out = a.out.unwrap_or_else(|| PathBuf::from(&plan.output));
    let outcome = run_full_matrix(&plan, &out)?;
    print!("{}", table_markdown(&outcome.table));
    if !outcome.supplementary.is_empty() {
        println!();
        print!("{}", table_markdown(&outcome.supplementary));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split(a),
        Command::TrainDiffusion(a) => train_diffusion_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::TrainSeg(a) => train_seg_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Export(a) => export_cmd(a),
        Command::Import(a) => import_cmd(a),
        Command::Audit(a) => audit_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Push(a) => push_cmd(a),
        Command::Pull(a) => pull_cmd(a),
        Command::Histograms(a) => histograms_cmd(a),
        Command::Run(a) => run_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
