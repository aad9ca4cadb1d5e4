//! Training loops: L1 pre-training, L1+AFP fine-tuning and segmentation
//! training of the frozen feature extractor.
//!
//! Every loop samples `batch` random patches per iteration from cases picked
//! by a seeded generator, so the sequence of batches depends only on the seed.
//! No augmentation is applied. Validation runs full-volume sliding-window
//! inference on held-out cases.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::predict_normalized;
use crate::io::Task;
use crate::losses::{afp_distance, combined_loss, l1_loss, AfpConfig};
use crate::metrics::mae;
use crate::network::{softmax_channels, BlockKind, HeadKind, Network};
use crate::optim::{poly_lr, Sgd, DEFAULT_POLY_EXPONENT};
use crate::parallel::with_threads;
use crate::patching::{sample_training_patch, sliding_window, DEFAULT_VAL_STEP};
use crate::preprocess::{invert_to_hu, normalize_ct, normalize_input, Fingerprint};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const LOG_FILE: &str = "train_log.tsv";
pub const BEST_CHECKPOINT: &str = "best.vxck";
pub const LAST_CHECKPOINT: &str = "last.vxck";
pub const OPTIMIZER_CHECKPOINT: &str = "optimizer.vxck";
pub const NAN_DUMP: &str = "nan_dump.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub poly_exponent: f64,
    pub seed: u64,
    /// Validate after epoch 1, every `val_interval` epochs and after the last.
    pub val_interval: usize,
    pub nesterov: bool,
    pub val_step: f64,
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.99,
            epochs: 1000,
            iters_per_epoch: 150,
            batch: 4,
            poly_exponent: DEFAULT_POLY_EXPONENT,
            seed: 0,
            val_interval: 1,
            nesterov: false,
            val_step: DEFAULT_VAL_STEP,
            threads: None,
        }
    }
}

impl TrainConfig {
    /// Phase-1 defaults for an architecture: 1000 epochs plain, 1500 residual.
    pub fn phase1(block: BlockKind) -> Self {
        TrainConfig {
            epochs: match block {
                BlockKind::Plain => 1000,
                BlockKind::Residual => 1500,
            },
            ..TrainConfig::default()
        }
    }

    /// Fine-tuning defaults: lr 0.001, 500 epochs, batch 2.
    pub fn afp_phase() -> Self {
        TrainConfig {
            lr0: 0.001,
            epochs: 500,
            batch: 2,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("train config: {what}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.poly_exponent > 0.0 && self.poly_exponent.is_finite()) {
            return bad("poly_exponent must be positive");
        }
        if self.epochs == 0 || self.iters_per_epoch == 0 || self.batch == 0 || self.val_interval == 0 {
            return bad("epochs, iters_per_epoch, batch and val_interval must be >= 1");
        }
        if !(self.val_step > 0.0 && self.val_step <= 1.0) {
            return bad("val_step must be in (0, 1]");
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1");
        }
        Ok(())
    }

    fn validates_at(&self, epoch: usize) -> bool {
        epoch == 1 || epoch == self.epochs || epoch % self.val_interval == 0
    }
}

/// A normalized input with its normalized CT target, or a CT with labels
/// for segmentation training.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub input: Volume,
    pub target: Volume,
}

impl Case {
    /// Translation case: task-specific input normalization, CT target
    /// normalized with the CT fingerprint.
    pub fn translation(
        id: impl Into<String>,
        raw_input: &Volume,
        task: Task,
        input_fp: Option<&Fingerprint>,
        ct_hu: &Volume,
        ct_fp: &Fingerprint,
    ) -> Result<Self> {
        Self::checked(id.into(), normalize_input(raw_input, task, input_fp)?, normalize_ct(ct_hu, ct_fp)?)
    }

    /// Segmentation case: normalized CT with its label volume.
    pub fn segmentation(id: impl Into<String>, ct_hu: &Volume, labels: &Volume, ct_fp: &Fingerprint) -> Result<Self> {
        labels.label_values()?;
        Self::checked(id.into(), normalize_ct(ct_hu, ct_fp)?, labels.clone())
    }

    fn checked(id: String, input: Volume, target: Volume) -> Result<Self> {
        if input.dims() != target.dims() {
            return Err(Error::Shape(format!(
                "case {id}: input dims {:?} differ from target dims {:?}",
                input.dims(),
                target.dims()
            )));
        }
        Ok(Case { id, input, target })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN on epochs without validation.
    pub val_loss: f64,
    /// Validation MAE in HU, when a CT fingerprint was given.
    pub val_mae_hu: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_loss\tval_loss\twall_seconds";

impl TrainLog {
    fn row(r: &EpochRecord, with_time: bool) -> String {
        let mut s = format!("{}\t{:e}\t{:e}\t{:e}", r.epoch, r.lr, r.train_loss, r.val_loss);
        if with_time {
            write!(s, "\t{:.3}", r.wall_seconds).unwrap();
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.records {
            out.push_str(&Self::row(r, true));
            out.push('\n');
        }
        out
    }

    /// The log without the wall-clock column, for reproducibility checks.
    pub fn loss_curve(&self) -> String {
        self.records.iter().map(|r| Self::row(r, false) + "\n").collect()
    }

    /// Validation losses in epoch order, skipping epochs without validation.
    pub fn validations(&self) -> Vec<&EpochRecord> {
        self.records.iter().filter(|r| !r.val_loss.is_nan()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Network,
    pub best_epoch: usize,
    pub last: Network,
    pub optimizer: Sgd,
    pub log: TrainLog,
}

/// Where loop artifacts go. Without a directory nothing is written.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    pub out_dir: Option<PathBuf>,
    /// Fingerprint for reporting validation MAE in HU.
    pub ct_fingerprint: Option<Fingerprint>,
}

enum Objective<'a> {
    L1,
    Combined(&'a AfpConfig<'a, Network>),
    CrossEntropy,
}

impl Objective<'_> {
    fn name(&self) -> &'static str {
        match self {
            Objective::L1 => "l1",
            Objective::Combined(_) => "l1afp",
            Objective::CrossEntropy => "cross_entropy",
        }
    }
}

/// Phase-1 training with the L1 loss.
pub fn train(net: Network, train_set: &[Case], val_set: &[Case], cfg: &TrainConfig, io: &TrainIo) -> Result<TrainOutcome> {
    fit(net, train_set, val_set, cfg, Objective::L1, io)
}

/// Fine-tuning with `lambda_l1 * L1 + AFP`. The optimizer starts from zero
/// velocity and the schedule restarts at `cfg.lr0`. The extractor must be
/// frozen and is checked to be unchanged afterwards.
pub fn finetune_afp(
    net: Network,
    afp: &AfpConfig<'_, Network>,
    train_set: &[Case],
    val_set: &[Case],
    cfg: &TrainConfig,
    io: &TrainIo,
) -> Result<TrainOutcome> {
    if afp.extractor.params().iter().any(|p| p.requires_grad) {
        return Err(Error::Precondition("feature extractor must be frozen".into()));
    }
    if afp.extractor.spec().head != HeadKind::Segmentation {
        return Err(Error::Precondition("feature extractor must be a segmentation network".into()));
    }
    let before = afp.extractor.checksum();
    let out = fit(net, train_set, val_set, cfg, Objective::Combined(afp), io)?;
    if afp.extractor.checksum() != before {
        return Err(Error::Invariant("feature extractor changed during fine-tuning".into()));
    }
    Ok(out)
}

/// Segmentation training with softmax cross-entropy; `target` holds labels.
pub fn seg_train(net: Network, train_set: &[Case], val_set: &[Case], cfg: &TrainConfig, io: &TrainIo) -> Result<TrainOutcome> {
    if net.spec().head != HeadKind::Segmentation {
        return Err(Error::Spec("segmentation training needs a segmentation head".into()));
    }
    fit(net, train_set, val_set, cfg, Objective::CrossEntropy, io)
}

fn fit(
    net: Network,
    train_set: &[Case],
    val_set: &[Case],
    cfg: &TrainConfig,
    objective: Objective<'_>,
    io: &TrainIo,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Precondition("training needs at least one training and one validation case".into()));
    }
    let regression = !matches!(objective, Objective::CrossEntropy);
    if regression != (net.spec().head == HeadKind::Regression) {
        return Err(Error::Spec(format!("{} objective does not match the network head", objective.name())));
    }
    if let Some(dir) = &io.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(LOG_FILE), &format!("{LOG_HEADER}\n"))?;
    }
    with_threads(cfg.threads, || run(net, train_set, val_set, cfg, &objective, io))
}

fn run(
    mut net: Network,
    train_set: &[Case],
    val_set: &[Case],
    cfg: &TrainConfig,
    objective: &Objective<'_>,
    io: &TrainIo,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let patch = net.spec().patch_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(net.params(), cfg.momentum, cfg.nesterov);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Network)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = poly_lr(epoch - 1, cfg.epochs, cfg.lr0, cfg.poly_exponent);
        let mut epoch_loss = 0.0;
        for iter in 0..cfg.iters_per_epoch {
            let mut picked = Vec::with_capacity(cfg.batch);
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for _ in 0..cfg.batch {
                let case = &train_set[rng.random_range(0..train_set.len())];
                let (x, y) = sample_training_patch(&case.input, &case.target, patch, &mut rng)?;
                picked.push(case.id.as_str());
                xs.push(x);
                ys.push(y);
            }
            let (x, y) = (stack(&xs)?, stack(&ys)?);
            net.zero_grad();
            let pass = net.forward_train(&x)?;
            let (loss, grad) = match objective {
                Objective::L1 => l1_loss(pass.output(), &y)?,
                Objective::Combined(afp) => {
                    let c = combined_loss(pass.output(), &y, afp)?;
                    (c.total, c.grad)
                }
                Objective::CrossEntropy => crate::losses::softmax_cross_entropy(pass.output(), &y)?,
            };
            if !loss.is_finite() || !grad.all_finite() {
                return Err(nan_abort(&net, io, epoch, iter, lr, loss, &picked));
            }
            net.backward(&pass, &grad)?;
            opt.step(net.params_mut(), lr)?;
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / cfg.iters_per_epoch as f64;

        let (val_loss, val_mae_hu) = if cfg.validates_at(epoch) {
            let v = if regression_head(&net) {
                validate_regression(&net, val_set, cfg.val_step, io.ct_fingerprint.as_ref())?
            } else {
                (validate_segmentation(&net, val_set, cfg.val_step)?, None)
            };
            if !v.0.is_finite() {
                return Err(nan_abort(&net, io, epoch, cfg.iters_per_epoch, lr, v.0, &[]));
            }
            v
        } else {
            (f64::NAN, None)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_mae_hu,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log.records.push(record);

        let improved = !val_loss.is_nan() && best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, net.clone()));
        }
        if let Some(dir) = &io.out_dir {
            append_line(&dir.join(LOG_FILE), &TrainLog::row(&record, true))?;
            if improved {
                checkpoint(&net, objective, cfg, epoch, val_loss).save(dir.join(BEST_CHECKPOINT))?;
            }
        }
    }

    let (_, best_epoch, best_net) = best.expect("last epoch always validates");
    if let Some(dir) = &io.out_dir {
        let last_val = log.records.last().map_or(f64::NAN, |r| r.val_loss);
        checkpoint(&net, objective, cfg, cfg.epochs, last_val).save(dir.join(LAST_CHECKPOINT))?;
        opt.to_checkpoint(net.param_names(), cfg.seed)
            .with_meta("epoch", cfg.epochs)
            .save(dir.join(OPTIMIZER_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        best: best_net,
        best_epoch,
        last: net,
        optimizer: opt,
        log,
    })
}

fn regression_head(net: &Network) -> bool {
    net.spec().head == HeadKind::Regression
}

fn checkpoint(net: &Network, objective: &Objective<'_>, cfg: &TrainConfig, epoch: usize, val_loss: f64) -> Checkpoint {
    net.to_checkpoint()
        .with_meta("objective", objective.name())
        .with_meta("epoch", epoch)
        .with_meta("val_loss", format!("{val_loss:e}"))
        .with_meta("lr0", cfg.lr0)
        .with_meta("momentum", cfg.momentum)
        .with_meta("nesterov", cfg.nesterov)
        .with_meta("train_seed", cfg.seed)
}

/// Concatenates `(1, c, z, y, x)` patches along the batch axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Precondition("empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        first.check_same_shape(t)?;
        data.extend_from_slice(t.data());
    }
    shape[0] *= items.len();
    Tensor::new(shape, data)
}

/// Mean full-volume L1 in normalized units and, with a fingerprint, mean MAE in HU.
pub fn validate_regression(net: &Network, cases: &[Case], step: f64, ct_fp: Option<&Fingerprint>) -> Result<(f64, Option<f64>)> {
    let (mut l1, mut hu) = (0.0, 0.0);
    for c in cases {
        let pred = predict_normalized(net, &c.input, step)?;
        l1 += mae(&pred, &c.target, None)?;
        if let Some(fp) = ct_fp {
            hu += mae(&invert_to_hu(&pred, fp)?, &invert_to_hu(&c.target, fp)?, None)?;
        }
    }
    let n = cases.len() as f64;
    Ok((l1 / n, ct_fp.map(|_| hu / n)))
}

/// Mean negative log of the aggregated probability of the true class.
pub fn validate_segmentation(net: &Network, cases: &[Case], step: f64) -> Result<f64> {
    let channels = net.spec().head.out_channels();
    let mut total = 0.0;
    for c in cases {
        let probs = sliding_window(&c.input, net.spec().patch_dims, step, channels, |t| {
            softmax_channels(&net.forward(t, false)?.0)
        })?;
        let labels = c.target.label_values()?;
        let inner = labels.len();
        let p = probs.data();
        let nll: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &k)| -(p[k as usize * inner + i] as f64).max(1e-12).ln())
            .sum();
        total += nll / inner as f64;
    }
    Ok(total / cases.len() as f64)
}

/// Mean feature distance between predictions and targets over whole volumes.
pub fn validation_afp_distance(net: &Network, afp: &AfpConfig<'_, Network>, cases: &[Case], step: f64) -> Result<f64> {
    let mut total = 0.0;
    for c in cases {
        let pred = predict_normalized(net, &c.input, step)?;
        let shape = |v: &Volume| {
            let [z, y, x] = v.dims();
            vec![1, 1, z, y, x]
        };
        let px = Tensor::new(shape(&pred), pred.scalars()?.to_vec())?;
        let ty = Tensor::new(shape(&c.target), c.target.scalars()?.to_vec())?;
        total += afp_distance(&px, &ty, afp)?;
    }
    Ok(total / cases.len() as f64)
}

fn nan_abort(net: &Network, io: &TrainIo, epoch: usize, iter: usize, lr: f64, loss: f64, cases: &[&str]) -> Error {
    let mut msg = format!("non-finite loss {loss} at epoch {epoch} iteration {iter} (lr {lr:e}, cases {cases:?})");
    if let Some(dir) = &io.out_dir {
        let mut dump = format!("{msg}\nparameter\tmax_abs_value\tmax_abs_grad\tfinite\n");
        for (name, p) in net.param_names().iter().zip(net.params()) {
            writeln!(
                dump,
                "{name}\t{:e}\t{:e}\t{}",
                p.value.max_abs(),
                p.grad.max_abs(),
                p.value.all_finite() && p.grad.all_finite()
            )
            .unwrap();
        }
        let path = dir.join(NAN_DUMP);
        match write_file(&path, &dump) {
            Ok(()) => write!(msg, "; diagnostics in {}", path.display()).unwrap(),
            Err(e) => write!(msg, "; writing diagnostics failed: {e}").unwrap(),
        }
    }
    Error::NonFinite(msg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
