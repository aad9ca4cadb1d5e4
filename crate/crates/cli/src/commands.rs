//! Subcommand arguments and their implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::Serialize;
use voxsynth_core::inference::synthesize_ct;
use voxsynth_core::io::{load_manifest, read_volume, save_manifest, write_volume, DatasetManifest, ManifestEntry, Region, Task};
use voxsynth_core::losses::AfpConfig;
use voxsynth_core::metrics::{evaluate_case, MetricReport, SegmentationEvaluator};
use voxsynth_core::network::{HeadKind, Network};
use voxsynth_core::preprocess::{compute_fingerprint, normalize_ct, normalize_input, split_dataset, Fingerprint, SplitAssignment};
use voxsynth_core::suite::run_suite;
use voxsynth_core::synth::{generate_dataset, PhantomSpec};
use voxsynth_core::tensor::checkpoint::Checkpoint;
use voxsynth_core::tensor::gradcheck::GradcheckConfig;
use voxsynth_core::train::{self, Case, TrainIo, TrainOutcome, BEST_CHECKPOINT};

use crate::config::{check_step, task_from_number, task_number, Arch, LossKind, Overrides, Resolved, RunConfig, Upsample};
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CT_FINGERPRINT_FILE: &str = "ct_fingerprint.toml";
pub const INPUT_FINGERPRINT_FILE: &str = "input_fingerprint.toml";
pub const CONFIG_COPY: &str = "config.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SCT_SUFFIX: &str = "_sct.vox";

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom cases and their manifest.
    GenSynth(GenSynthArgs),
    /// Compute an intensity fingerprint over a manifest.
    Fingerprint(FingerprintArgs),
    /// Split a dataset, compute fingerprints on the training split and write normalized volumes.
    Preprocess(PreprocessArgs),
    /// Train a translation network with the L1 loss (optionally followed by feature-loss fine-tuning).
    Train(TrainArgs),
    /// Fine-tune a translation checkpoint with L1 plus the anatomical feature loss.
    FinetuneAfp(FinetuneArgs),
    /// Train the segmentation network used as feature extractor and for evaluation.
    SegTrain(SegTrainArgs),
    /// Synthesize CT volumes with a trained checkpoint.
    Infer(InferArgs),
    /// Compute intensity and segmentation metrics.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

fn parse_task(s: &str) -> std::result::Result<u8, String> {
    let n: u8 = s.parse().map_err(|_| format!("task must be 1 or 2, got {s:?}"))?;
    task_from_number(n).map(|_| n)
}

fn parse_step(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    check_step(v).map(|_| v)
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad dims {s:?}, expected Z,Y,X")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [z, y, x] if *z > 0 && *y > 0 && *x > 0 => Ok([*z, *y, *x]),
        _ => Err(format!("bad dims {s:?}, expected three positive integers Z,Y,X")),
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_task, default_value = "1")]
    pub task: u8,
    #[arg(long, default_value = "AB")]
    pub region: Region,
    /// Volume size as Z,Y,X.
    #[arg(long, value_parser = parse_dims, default_value = "32,32,32")]
    pub dims: [usize; 3],
    /// Source noise standard deviation in unit intensities.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FingerprintOf {
    Target,
    Input,
}

#[derive(Debug, Args)]
pub struct FingerprintArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which volumes of each case enter the statistics.
    #[arg(long, value_enum, default_value_t = FingerprintOf::Target)]
    pub of: FingerprintOf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Raw dataset directory containing manifest.json, or the manifest itself.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags shared by the training commands.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preprocessed dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub region: Option<Region>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<u8>,
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long, value_enum)]
    pub upsample: Option<Upsample>,
    #[arg(long, value_parser = parse_step)]
    pub step: Option<f64>,
    /// Print the resolved configuration and exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

impl RunArgs {
    fn overrides(&self, loss: Option<LossKind>) -> Overrides {
        Overrides {
            seed: self.seed,
            region: self.region,
            task: self.task,
            arch: self.arch,
            upsample: self.upsample,
            loss,
            step: self.step,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    /// Frozen segmentation checkpoint for `--loss l1afp`; trained first when absent.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Translation checkpoint to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Segmentation checkpoint used as frozen feature extractor.
    #[arg(long)]
    pub extractor: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegTrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Single input volume; `--out` is then the output file.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub input: Option<PathBuf>,
    /// Dataset manifest; `--out` is then a directory receiving `<case>_sct.vox`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ct_fingerprint: PathBuf,
    /// Dataset fingerprint of CBCT inputs (task 2).
    #[arg(long)]
    pub input_fingerprint: Option<PathBuf>,
    /// Defaults to the manifest task, or 1 for a single input.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<u8>,
    #[arg(long, value_parser = parse_step, default_value_t = voxsynth_core::patching::DEFAULT_INFER_STEP)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted CT; used with `--ref`.
    #[arg(long, requires = "reference", conflicts_with_all = ["manifest", "pred_dir"])]
    pub pred: Option<PathBuf>,
    /// Reference CT; used with `--pred`.
    #[arg(long = "ref", requires = "pred")]
    pub reference: Option<PathBuf>,
    /// Dataset manifest whose targets are the references; used with `--pred-dir`.
    #[arg(long, requires = "pred_dir", required_unless_present = "pred")]
    pub manifest: Option<PathBuf>,
    /// Directory holding `<case>_sct.vox` predictions.
    #[arg(long, requires = "manifest")]
    pub pred_dir: Option<PathBuf>,
    /// Output directory for metrics.json and metrics.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Segmentation checkpoint for Dice and HD95.
    #[arg(long, requires = "ct_fingerprint")]
    pub seg_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub ct_fingerprint: Option<PathBuf>,
    #[arg(long, value_parser = parse_step, default_value_t = voxsynth_core::patching::DEFAULT_INFER_STEP)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a),
        Command::Fingerprint(a) => fingerprint(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a),
        Command::FinetuneAfp(a) => finetune_cmd(a),
        Command::SegTrain(a) => seg_train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    require_file(path, what)?;
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Creates `dir`, refusing one that already has entries.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() {
            return Err(CliError::Validation(format!(
                "output directory {} is not empty",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_fingerprint(path: &Path, what: &str) -> Result<Fingerprint> {
    require_file(path, what)?;
    Ok(Fingerprint::load(path)?)
}

fn load_network(path: &Path, what: &str) -> Result<Network> {
    require_file(path, what)?;
    Ok(Network::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_dataset_manifest(data: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(data);
    require_file(&path, "manifest")?;
    Ok(load_manifest(&path)?)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    if a.cases == 0 {
        return Err(CliError::Validation("--cases must be at least 1".into()));
    }
    fresh_dir(&a.out)?;
    let template = PhantomSpec {
        dims: a.dims,
        noise_std: a.noise.unwrap_or(PhantomSpec::default().noise_std),
        ..PhantomSpec::default()
    };
    let task = task_from_number(a.task).map_err(CliError::Validation)?;
    let m = generate_dataset(&a.out, a.cases, &template, a.seed, task, a.region)?;
    println!("wrote {} cases to {}", m.len(), a.out.display());
    Ok(())
}

fn fingerprint(a: FingerprintArgs) -> Result<()> {
    let m = load_dataset_manifest(&a.manifest)?;
    let fp = fingerprint_of(&m, a.of)?;
    fp.save(&a.out)?;
    println!("{}", fp.to_toml().trim_end());
    Ok(())
}

fn fingerprint_of(m: &DatasetManifest, of: FingerprintOf) -> Result<Fingerprint> {
    let volumes = m
        .entries
        .iter()
        .map(|e| {
            read_volume(match of {
                FingerprintOf::Target => &e.target_path,
                FingerprintOf::Input => &e.input_path,
            })
        })
        .collect::<voxsynth_core::Result<Vec<_>>>()?;
    Ok(compute_fingerprint(&volumes)?)
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let m = load_dataset_manifest(&a.data)?;
    let split = split_dataset(&m, a.seed)?;
    let train_m = m.select(&split.train_ids)?;
    let ct_fp = fingerprint_of(&train_m, FingerprintOf::Target)?;
    let input_fp = match m.task {
        Task::Mr2ct => None,
        Task::Cbct2ct => Some(fingerprint_of(&train_m, FingerprintOf::Input)?),
    };
    fresh_dir(&a.out)?;

    let mut entries = Vec::with_capacity(m.len());
    for e in &m.entries {
        let name = |kind: &str| format!("{}_{kind}.vox", e.case_id);
        let input = normalize_input(&read_volume(&e.input_path)?, m.task, input_fp.as_ref())?;
        let target = normalize_ct(&read_volume(&e.target_path)?, &ct_fp)?;
        write_volume(&input, a.out.join(name("input")))?;
        write_volume(&target, a.out.join(name("target")))?;
        let label_path = match &e.label_path {
            Some(p) => {
                write_volume(&read_volume(p)?, a.out.join(name("labels")))?;
                Some(PathBuf::from(name("labels")))
            }
            None => None,
        };
        entries.push(ManifestEntry {
            case_id: e.case_id.clone(),
            input_path: PathBuf::from(name("input")),
            target_path: PathBuf::from(name("target")),
            label_path,
            region: e.region,
        });
    }
    save_manifest(&DatasetManifest { task: m.task, entries }, a.out.join(MANIFEST_FILE))?;
    write_text(&a.out.join(SPLIT_FILE), &(serde_json::to_string_pretty(&split).expect("split serializes") + "\n"))?;
    ct_fp.save(a.out.join(CT_FINGERPRINT_FILE))?;
    if let Some(fp) = input_fp {
        fp.save(a.out.join(INPUT_FINGERPRINT_FILE))?;
    }
    println!(
        "preprocessed {} cases ({} train, {} val) into {}",
        m.len(),
        split.train_ids.len(),
        split.val_ids.len(),
        a.out.display()
    );
    Ok(())
}

/// A preprocessed dataset directory.
struct Prepared {
    dir: PathBuf,
    manifest: DatasetManifest,
    split: SplitAssignment,
    ct_fp: Fingerprint,
}

impl Prepared {
    fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(CliError::Validation(format!("data directory {} does not exist", dir.display())));
        }
        let manifest = load_dataset_manifest(dir)?;
        let split_path = dir.join(SPLIT_FILE);
        let split: SplitAssignment = serde_json::from_str(&read_text(&split_path, "split file")?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", split_path.display())))?;
        let ct_fp = load_fingerprint(&dir.join(CT_FINGERPRINT_FILE), "CT fingerprint")?;
        Ok(Prepared {
            dir: dir.to_path_buf(),
            manifest,
            split,
            ct_fp,
        })
    }

    fn cases(&self, ids: &[String], segmentation: bool) -> Result<Vec<Case>> {
        let subset = self.manifest.select(ids)?;
        subset
            .entries
            .iter()
            .map(|e| {
                let target = read_volume(&e.target_path)?;
                let (input, target) = if segmentation {
                    let labels = e.label_path.as_ref().ok_or_else(|| {
                        CliError::Validation(format!("case {} has no label volume", e.case_id))
                    })?;
                    (target, read_volume(labels)?)
                } else {
                    (read_volume(&e.input_path)?, target)
                };
                if input.dims() != target.dims() {
                    return Err(CliError::Validation(format!(
                        "case {}: input dims {:?} differ from target dims {:?}",
                        e.case_id,
                        input.dims(),
                        target.dims()
                    )));
                }
                Ok(Case {
                    id: e.case_id.clone(),
                    input,
                    target,
                })
            })
            .collect()
    }

    fn split_cases(&self, segmentation: bool) -> Result<(Vec<Case>, Vec<Case>)> {
        Ok((
            self.cases(&self.split.train_ids, segmentation)?,
            self.cases(&self.split.val_ids, segmentation)?,
        ))
    }

    /// Copies the fingerprints and split next to the run artifacts.
    fn copy_into(&self, out: &Path) -> Result<()> {
        for name in [CT_FINGERPRINT_FILE, INPUT_FINGERPRINT_FILE, SPLIT_FILE] {
            let src = self.dir.join(name);
            if src.is_file() {
                fs::copy(&src, out.join(name)).map_err(|e| CliError::io(&src, e))?;
            }
        }
        Ok(())
    }
}

/// Loaded config text (verbatim) and its resolution.
struct Setup {
    text: String,
    resolved: Resolved,
}

fn setup(run: &RunArgs, loss: Option<LossKind>) -> Result<Setup> {
    let (text, cfg) = match &run.config {
        Some(p) => {
            let text = read_text(p, "config file")?;
            let cfg = RunConfig::parse(&text)?;
            (text, cfg)
        }
        None => {
            let cfg = RunConfig::default();
            (cfg.to_json() + "\n", cfg)
        }
    };
    let resolved = cfg.resolve(&run.overrides(loss))?;
    Ok(Setup { text, resolved })
}

/// Validates inputs, then creates the experiment directory with the config
/// copy, resolved config, fingerprints and split.
fn start_run(run: &RunArgs, s: &Setup) -> Result<Option<Prepared>> {
    let data = Prepared::load(&run.data)?;
    let task = s.resolved.task();
    if data.manifest.task != task {
        return Err(CliError::Validation(format!(
            "dataset is task {} but the configuration selects task {}",
            task_number(data.manifest.task),
            s.resolved.task
        )));
    }
    if run.dry_run {
        println!("{}", s.resolved.to_json());
        return Ok(None);
    }
    fresh_dir(&run.out)?;
    write_text(&run.out.join(CONFIG_COPY), &s.text)?;
    write_text(&run.out.join(RESOLVED_CONFIG), &(s.resolved.to_json() + "\n"))?;
    data.copy_into(&run.out)?;
    Ok(Some(data))
}

#[derive(Serialize)]
struct StageSummary {
    stage: String,
    best_epoch: usize,
    best_val_loss: f64,
    final_val_mae_hu: Option<f64>,
    checkpoint: PathBuf,
}

fn summarize(stage: &str, dir: &Path, out: &TrainOutcome) -> StageSummary {
    let best = out.log.records.iter().find(|r| r.epoch == out.best_epoch);
    let s = StageSummary {
        stage: stage.to_string(),
        best_epoch: out.best_epoch,
        best_val_loss: best.map_or(f64::NAN, |r| r.val_loss),
        final_val_mae_hu: out.log.records.last().and_then(|r| r.val_mae_hu),
        checkpoint: dir.join(BEST_CHECKPOINT),
    };
    println!(
        "{stage}: best epoch {} (val loss {:.6}), checkpoint {}",
        s.best_epoch,
        s.best_val_loss,
        s.checkpoint.display()
    );
    s
}

fn write_summary(out: &Path, stages: &[StageSummary]) -> Result<()> {
    let text = serde_json::to_string_pretty(stages).expect("summary serializes") + "\n";
    write_text(&out.join(SUMMARY_FILE), &text)
}

fn io_for(dir: PathBuf, data: &Prepared) -> TrainIo {
    TrainIo {
        out_dir: Some(dir),
        ct_fingerprint: Some(data.ct_fp),
    }
}

fn seg_extractor(
    r: &Resolved,
    data: &Prepared,
    dir: PathBuf,
    stages: &mut Vec<StageSummary>,
) -> Result<Network> {
    let (tr, va) = data.split_cases(true)?;
    let net = Network::build(&r.segmentation_network)?;
    let out = train::seg_train(net, &tr, &va, &r.seg_train, &TrainIo {
        out_dir: Some(dir.clone()),
        ct_fingerprint: None,
    })?;
    stages.push(summarize("segmentation", &dir, &out));
    Ok(out.best)
}

fn afp_config<'a>(r: &Resolved, extractor: &'a Network) -> Result<AfpConfig<'a, Network>> {
    let mut afp = AfpConfig::all_taps::<f32>(extractor);
    if let Some(taps) = &r.afp.taps {
        afp.tap_indices = taps.clone();
    }
    afp.lambda_l1 = r.afp.lambda_l1;
    Ok(afp)
}

fn frozen_extractor(mut net: Network) -> Result<Network> {
    if net.spec().head != HeadKind::Segmentation {
        return Err(CliError::Validation("extractor checkpoint is not a segmentation network".into()));
    }
    net.freeze();
    Ok(net)
}

fn finetune_stage(
    r: &Resolved,
    data: &Prepared,
    start: Network,
    extractor: &Network,
    dir: PathBuf,
    stages: &mut Vec<StageSummary>,
) -> Result<()> {
    let (tr, va) = data.split_cases(false)?;
    let afp = afp_config(r, extractor)?;
    let out = train::finetune_afp(start, &afp, &tr, &va, &r.finetune, &io_for(dir.clone(), data))?;
    stages.push(summarize("finetune", &dir, &out));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let s = setup(&a.run, a.loss)?;
    let r = &s.resolved;
    if r.loss == LossKind::L1 && a.extractor.is_some() {
        return Err(CliError::Validation("--extractor only applies to --loss l1afp".into()));
    }
    let extractor = match &a.extractor {
        Some(p) => Some(frozen_extractor(load_network(p, "extractor checkpoint")?)?),
        None => None,
    };
    let Some(data) = start_run(&a.run, &s)? else {
        return Ok(());
    };
    let out = &a.run.out;
    let mut stages = Vec::new();
    let (tr, va) = data.split_cases(false)?;
    let phase1_dir = match r.loss {
        LossKind::L1 => out.clone(),
        LossKind::L1afp => out.join("phase1"),
    };
    let phase1 = train::train(Network::build(&r.network)?, &tr, &va, &r.train, &io_for(phase1_dir.clone(), &data))?;
    stages.push(summarize("phase1", &phase1_dir, &phase1));
    drop((tr, va));

    if r.loss == LossKind::L1afp {
        let extractor = match extractor {
            Some(e) => e,
            None => frozen_extractor(seg_extractor(r, &data, out.join("segmentation"), &mut stages)?)?,
        };
        finetune_stage(r, &data, phase1.best, &extractor, out.join("finetune"), &mut stages)?;
    }
    write_summary(out, &stages)
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let s = setup(&a.run, Some(LossKind::L1afp))?;
    let start = load_network(&a.checkpoint, "checkpoint")?;
    if start.spec().head != HeadKind::Regression {
        return Err(CliError::Validation("checkpoint is not a translation network".into()));
    }
    let extractor = frozen_extractor(load_network(&a.extractor, "extractor checkpoint")?)?;
    let Some(data) = start_run(&a.run, &s)? else {
        return Ok(());
    };
    let mut stages = Vec::new();
    finetune_stage(&s.resolved, &data, start, &extractor, a.run.out.clone(), &mut stages)?;
    write_summary(&a.run.out, &stages)
}

fn seg_train_cmd(a: SegTrainArgs) -> Result<()> {
    let s = setup(&a.run, None)?;
    let Some(data) = start_run(&a.run, &s)? else {
        return Ok(());
    };
    let mut stages = Vec::new();
    seg_extractor(&s.resolved, &data, a.run.out.clone(), &mut stages)?;
    write_summary(&a.run.out, &stages)
}

fn infer(a: InferArgs) -> Result<()> {
    let net = load_network(&a.checkpoint, "checkpoint")?;
    if net.spec().head != HeadKind::Regression {
        return Err(CliError::Validation("checkpoint is not a translation network".into()));
    }
    let ct_fp = load_fingerprint(&a.ct_fingerprint, "CT fingerprint")?;
    let input_fp = match &a.input_fingerprint {
        Some(p) => Some(load_fingerprint(p, "input fingerprint")?),
        None => None,
    };
    let manifest = match &a.manifest {
        Some(p) => Some(load_dataset_manifest(p)?),
        None => None,
    };
    let task = match (a.task, &manifest) {
        (Some(t), _) => task_from_number(t).map_err(CliError::Validation)?,
        (None, Some(m)) => m.task,
        (None, None) => Task::Mr2ct,
    };
    if task == Task::Cbct2ct && input_fp.is_none() {
        return Err(CliError::Validation("task 2 needs --input-fingerprint".into()));
    }
    let run_one = |input: &Path, out: &Path| -> Result<()> {
        let raw = read_volume(input)?;
        let sct = synthesize_ct(&net, &raw, task, input_fp.as_ref(), &ct_fp, a.step)?;
        write_volume(&sct, out)?;
        Ok(())
    };
    match (&a.input, &manifest) {
        (Some(input), _) => {
            require_file(input, "input volume")?;
            run_one(input, &a.out)?;
            println!("wrote {}", a.out.display());
        }
        (None, Some(m)) => {
            ensure_dir(&a.out)?;
            for e in &m.entries {
                run_one(&e.input_path, &a.out.join(format!("{}{SCT_SUFFIX}", e.case_id)))?;
            }
            println!("wrote {} volumes to {}", m.len(), a.out.display());
        }
        (None, None) => unreachable!("clap requires --input or --manifest"),
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let seg_net = match &a.seg_checkpoint {
        Some(p) => {
            let net = load_network(p, "segmentation checkpoint")?;
            if net.spec().head != HeadKind::Segmentation {
                return Err(CliError::Validation("--seg-checkpoint is not a segmentation network".into()));
            }
            Some(net)
        }
        None => None,
    };
    let ct_fp = match (&a.ct_fingerprint, &seg_net) {
        (Some(p), Some(_)) => Some(load_fingerprint(p, "CT fingerprint")?),
        _ => None,
    };
    let seg = match (&seg_net, &ct_fp) {
        (Some(net), Some(fp)) => Some(SegmentationEvaluator {
            net,
            ct_fingerprint: fp,
            step_fraction: a.step,
        }),
        _ => None,
    };

    let pairs: Vec<(String, PathBuf, PathBuf)> = match (&a.pred, &a.reference, &a.manifest, &a.pred_dir) {
        (Some(p), Some(r), _, _) => {
            require_file(p, "prediction")?;
            require_file(r, "reference")?;
            let id = p.file_stem().map_or_else(|| "case".to_string(), |s| s.to_string_lossy().into_owned());
            vec![(id, p.clone(), r.clone())]
        }
        (_, _, Some(m), Some(dir)) => {
            let m = load_dataset_manifest(m)?;
            m.entries
                .iter()
                .map(|e| {
                    let p = dir.join(format!("{}{SCT_SUFFIX}", e.case_id));
                    require_file(&p, "prediction")?;
                    Ok((e.case_id.clone(), p, e.target_path.clone()))
                })
                .collect::<Result<_>>()?
        }
        _ => unreachable!("clap enforces one evaluation mode"),
    };

    let mut report = MetricReport::default();
    for (id, pred, reference) in &pairs {
        let m = evaluate_case(&read_volume(pred)?, &read_volume(reference)?, seg.as_ref())?;
        report.insert(id.clone(), m);
    }
    ensure_dir(&a.out)?;
    write_text(&a.out.join(METRICS_JSON), &(report.to_json() + "\n"))?;
    write_text(&a.out.join(METRICS_TSV), &report.to_tsv())?;
    for (k, v) in &report.aggregate {
        println!("{k}\t{}\t{}", v.mean, v.std);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let report = run_suite(&cfg)?;
    print!("{report}");
    println!(
        "{} checks, max relative error {:.3e}: {}",
        report.reports.len(),
        report.max_rel_err(),
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}
