//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL`
//! line with its measurements, then asserts the criterion.
//!
//! Criteria 7-9 share the synthetic training runs (about half an hour on a
//! single core), so they are computed once and reused.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use voxsynth_core::io::Task;
use voxsynth_core::losses::{afp_loss, combined_loss, AfpConfig};
use voxsynth_core::metrics::{dice, hd95_masks, mae, psnr, ssim};
use voxsynth_core::network::{BlockKind, HeadKind, Network, NetworkSpec, UpsampleMode};
use voxsynth_core::optim::poly_lr;
use voxsynth_core::patching::{compute_tile_origins, sliding_window_volume};
use voxsynth_core::preprocess::{compute_fingerprint, invert_to_hu, normalize_ct, Fingerprint};
use voxsynth_core::suite::run_suite;
use voxsynth_core::synth::{case_seeds, generate_pair, PhantomPair, PhantomSpec};
use voxsynth_core::tensor::checkpoint::Checkpoint;
use voxsynth_core::tensor::gradcheck::GradcheckConfig;
use voxsynth_core::tensor::Tensor;
use voxsynth_core::train::{
    finetune_afp, seg_train, train, validate_regression, validation_afp_distance, Case, TrainConfig, TrainIo,
    TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE,
};
use voxsynth_core::volume::Volume;

fn report(n: usize, pass: bool, detail: impl std::fmt::Display) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" }).unwrap();
    out.flush().unwrap();
}

#[test]
fn criterion_1_gradcheck_suite() {
    let start = Instant::now();
    let suite = run_suite(&GradcheckConfig::default()).unwrap();
    let elapsed = start.elapsed();
    for r in suite.reports.iter().filter(|r| !r.passed()) {
        eprintln!("{r}");
    }
    let pass = suite.passed() && elapsed < Duration::from_secs(300);
    report(
        1,
        pass,
        format!(
            "{} checks, max rel err {:.2e} (< 1e-4), {:.1}s (< 300s)",
            suite.reports.len(),
            suite.max_rel_err(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_aggregation_identity() {
    let patch = [16, 16, 16];
    let mut net = Network::<f32>::build(&NetworkSpec {
        levels: 2,
        base_channels: 2,
        block: BlockKind::Residual,
        global_skip: true,
        patch_dims: patch,
        ..NetworkSpec::default()
    })
    .unwrap();
    net.zero_head();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut grid_ok) = (0.0f64, true);
    for _ in 0..10 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(24..=64));
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.random_range(-1000.0..2000.0f32))
            .collect();
        let v = Volume::scalar(dims, data).unwrap();
        for step in [0.3, 0.5, 1.0] {
            let out = sliding_window_volume(&v, patch, step, |t| Ok(net.forward(t, false)?.0)).unwrap();
            let err = out
                .scalars()
                .unwrap()
                .iter()
                .zip(v.scalars().unwrap())
                .map(|(a, b)| (a - b).abs() as f64)
                .fold(0.0, f64::max);
            worst = worst.max(err);
        }
        let fine = compute_tile_origins(dims, patch, 0.3).unwrap().len();
        let coarse = compute_tile_origins(dims, patch, 0.5).unwrap().len();
        grid_ok &= fine >= coarse;
    }
    let pass = worst <= 1e-6 && grid_ok;
    report(
        2,
        pass,
        format!("max abs err {worst:.2e} (<= 1e-6) over 10 volumes x 3 steps, tiles(0.3) >= tiles(0.5): {grid_ok}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_normalization_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(4..=16));
        let data: Vec<f32> = (0..dims.iter().product::<usize>())
            .map(|_| rng.random_range(-2000.0..4500.0f32))
            .collect();
        let v = Volume::scalar(dims, data).unwrap();
        let fp = Fingerprint::new(rng.random_range(-500.0..500.0), rng.random_range(100.0..1000.0)).unwrap();
        let back = invert_to_hu(&normalize_ct(&v, &fp).unwrap(), &fp).unwrap();
        for (b, &x) in back.scalars().unwrap().iter().zip(v.scalars().unwrap()) {
            worst = worst.max((*b as f64 - fp.clip(x as f64)).abs());
        }
    }
    let pass = worst <= 1e-4;
    report(3, pass, format!("max |invert(normalize(v)) - clip(v)| = {worst:.3e} HU (<= 1e-4) on 100 volumes"));
    assert!(pass);
}

fn tensor(shape: [usize; 5], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0f32))
}

fn mean_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.numel() as f64
}

fn tiny_phantom_cases(n: usize, seed: u64) -> (Vec<Case>, Fingerprint) {
    let pairs: Vec<PhantomPair> = (0..n)
        .map(|i| {
            generate_pair(&PhantomSpec {
                dims: [12, 12, 12],
                seed: seed + i as u64,
                ..PhantomSpec::default()
            })
            .unwrap()
        })
        .collect();
    let fp = compute_fingerprint(pairs.iter().map(|p| &p.target)).unwrap();
    let cases = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| Case::translation(format!("t{i}"), &p.source, Task::Mr2ct, None, &p.target, &fp).unwrap())
        .collect();
    (cases, fp)
}

#[test]
fn criterion_4_afp_identities() {
    let mut extractor = Network::<f32>::build(&NetworkSpec {
        levels: 2,
        base_channels: 4,
        head: HeadKind::Segmentation,
        patch_dims: [8, 8, 8],
        seed: 4,
        ..NetworkSpec::default()
    })
    .unwrap();
    extractor.freeze();
    let cfg = AfpConfig::all_taps::<f32>(&extractor);

    let x = tensor([1, 1, 8, 8, 8], 40);
    let y = tensor([1, 1, 8, 8, 8], 41);
    let self_loss = afp_loss(&x, &x, &cfg).unwrap().0;

    let l1_hand = mean_abs(&x, &y);
    let (_, fx) = extractor.forward(&x, true).unwrap();
    let (_, fy) = extractor.forward(&y, true).unwrap();
    let afp_hand = fx.iter().zip(&fy).map(|(a, b)| mean_abs(a, b)).sum::<f64>() / fx.len() as f64;
    let hand = 5.0 * l1_hand + afp_hand;
    let c = combined_loss(&x, &y, &cfg).unwrap();
    // The hand value subtracts in f64, the loss in f32.
    let combined_err = (c.total - hand).abs() / hand;
    let composed = c.total == 5.0 * c.l1 + c.afp;

    let before = extractor.checksum();
    let (cases, fp) = tiny_phantom_cases(3, 400);
    let net = Network::<f32>::build(&NetworkSpec {
        levels: 2,
        base_channels: 4,
        block: BlockKind::Residual,
        patch_dims: [8, 8, 8],
        seed: 5,
        ..NetworkSpec::default()
    })
    .unwrap();
    let ft = TrainConfig {
        lr0: 0.001,
        epochs: 2,
        iters_per_epoch: 3,
        batch: 2,
        threads: Some(1),
        ..TrainConfig::default()
    };
    let io = TrainIo {
        out_dir: None,
        ct_fingerprint: Some(fp),
    };
    finetune_afp(net, &cfg, &cases[..2], &cases[2..], &ft, &io).unwrap();
    let frozen = extractor.checksum() == before
        && extractor.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0));

    let pass = self_loss == 0.0 && composed && combined_err < 1e-9 && frozen && cfg.lambda_l1 == 5.0;
    report(
        4,
        pass,
        format!(
            "afp(x,x) = {self_loss}, combined {:.9} vs 5*{l1_hand:.9}+{afp_hand:.9} (rel err {combined_err:.1e} < 1e-9, total == 5*l1+afp exactly: {composed}), extractor unchanged by fine-tuning: {frozen}",
            c.total
        ),
    );
    assert!(pass);
}

fn oracle_boundary(mask: &[bool], d: [usize; 3]) -> Vec<[i64; 3]> {
    let d = d.map(|v| v as i64);
    let inside = |p: [i64; 3]| {
        (0..3).all(|a| p[a] >= 0 && p[a] < d[a]) && mask[((p[0] * d[1] + p[1]) * d[2] + p[2]) as usize]
    };
    let faces = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    let mut out = Vec::new();
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let p = [z, y, x];
                if inside(p) && faces.iter().any(|f| !inside([z + f[0], y + f[1], x + f[2]])) {
                    out.push(p);
                }
            }
        }
    }
    out
}

fn oracle_hd95(a: &[bool], b: &[bool], dims: [usize; 3], s: [f64; 3]) -> f64 {
    let (pa, pb) = (oracle_boundary(a, dims), oracle_boundary(b, dims));
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let dist = |p: &[i64; 3], q: &[i64; 3]| (0..3).map(|k| ((p[k] - q[k]) as f64 * s[k]).powi(2)).sum::<f64>().sqrt();
    let mut all = Vec::new();
    for (from, to) in [(&pa, &pb), (&pb, &pa)] {
        all.extend(from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)));
    }
    all.sort_by(f64::total_cmp);
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(all.len() - 1);
    all[lo] + (pos - lo as f64) * (all[hi] - all[lo])
}

fn random_mask(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n: usize = dims.iter().product();
    let mut m = vec![false; n];
    for _ in 0..rng.random_range(0..4) {
        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..dims[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..dims[a]) + 1);
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    m[(z * dims[1] + y) * dims[2] + x] = true;
                }
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        let i = rng.random_range(0..n);
        m[i] = !m[i];
    }
    m
}

#[test]
fn criterion_5_metric_oracles() {
    let spacings = [0.5, 0.75, 1.0, 1.5, 2.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hd_mismatch = 0;
    for _ in 0..100 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=12));
        let s: [f64; 3] = std::array::from_fn(|_| spacings[rng.random_range(0..spacings.len())]);
        let (a, b) = (random_mask(dims, &mut rng), random_mask(dims, &mut rng));
        if hd95_masks(&a, &b, dims, s).to_bits() != oracle_hd95(&a, &b, dims, s).to_bits() {
            hd_mismatch += 1;
        }
    }

    let mut table: Vec<(&str, f64, f64, f64)> = Vec::new();
    let dims = [1, 4, 4];
    let mut la = vec![0u8; 16];
    let mut lb = vec![0u8; 16];
    la[..8].fill(1);
    lb[4..12].fill(1);
    let (va, vb) = (Volume::labels(dims, la.clone()).unwrap(), Volume::labels(dims, lb).unwrap());
    table.push(("dice |A|=|B|=8, overlap 4", dice(&va, &vb).unwrap()[&1], 0.5, 0.0));
    table.push(("dice identical", dice(&va, &va).unwrap()[&1], 1.0, 0.0));
    let mut lc = vec![0u8; 16];
    lc[8..].fill(1);
    table.push(("dice disjoint", dice(&va, &Volume::labels(dims, lc).unwrap()).unwrap()[&1], 0.0, 0.0));
    let p = Volume::scalar([1, 1, 2], vec![0.0, 0.0]).unwrap();
    let r = Volume::scalar([1, 1, 2], vec![1.0, 3.0]).unwrap();
    table.push(("mae {0,0} vs {1,3}", mae(&p, &r, None).unwrap(), 2.0, 0.0));
    let base = Volume::scalar([4, 4, 4], (0..64).map(|i| i as f32 * 7.0 - 200.0).collect()).unwrap();
    table.push(("mae offset 10", mae(&base.map_scalars(|v| v + 10.0).unwrap(), &base, None).unwrap(), 10.0, 1e-9));
    let zero = Volume::filled([4, 4, 4], 0.0).unwrap();
    table.push(("psnr uniform error 40.95", psnr(&Volume::filled([4, 4, 4], 40.95).unwrap(), &zero).unwrap(), 40.0, 1e-5));
    table.push(("psnr mse = R^2", psnr(&Volume::filled([4, 4, 4], 4095.0).unwrap(), &zero).unwrap(), 0.0, 1e-9));
    let psnr_same = psnr(&base, &base).unwrap();
    let big = Volume::scalar(
        [16, 16, 16],
        (0..4096).map(|_| rng.random_range(-1000.0..2000.0f32)).collect(),
    )
    .unwrap();
    table.push(("ssim(x, x)", ssim(&big, &big).unwrap(), 1.0, 1e-9));

    let mut all_ok = hd_mismatch == 0 && psnr_same == f64::INFINITY;
    let mut rows = Vec::new();
    for (name, got, want, tol) in &table {
        let ok = (got - want).abs() <= *tol;
        all_ok &= ok;
        rows.push(format!("{name}: {got} (want {want})"));
    }
    report(
        5,
        all_ok,
        format!(
            "hd95 mismatches vs brute force {hd_mismatch}/100; psnr(x,x) = {psnr_same}; {}",
            rows.join("; ")
        ),
    );
    assert!(all_ok);
}

#[test]
fn criterion_6_poly_lr() {
    let (e0, end, mid) = (poly_lr(0, 1000, 0.01, 0.9), poly_lr(1000, 1000, 0.01, 0.9), poly_lr(500, 1000, 0.01, 0.9));
    let pass = e0 == 0.01 && end == 0.0 && (mid - 0.005359).abs() <= 1e-6;
    report(6, pass, format!("epoch 0 -> {e0}, epoch 1000 -> {end}, epoch 500 -> {mid:.7}"));
    assert!(pass);
}

// Criteria 7-9: synthetic end-to-end training.

const PATCH: [usize; 3] = [16, 16, 16];
const TRAIN_SEED: u64 = 7;

struct Data {
    train: Vec<Case>,
    val: Vec<Case>,
    seg_train: Vec<Case>,
    seg_val: Vec<Case>,
    fp: Fingerprint,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let pairs: Vec<PhantomPair> = case_seeds(2025, 24)
            .into_iter()
            .map(|seed| {
                generate_pair(&PhantomSpec {
                    dims: [32, 32, 32],
                    seed,
                    ..PhantomSpec::default()
                })
                .unwrap()
            })
            .collect();
        let (tr, va) = pairs.split_at(20);
        let fp = compute_fingerprint(tr.iter().map(|p| &p.target)).unwrap();
        let translation = |ps: &[PhantomPair], tag: &str| -> Vec<Case> {
            ps.iter()
                .enumerate()
                .map(|(i, p)| Case::translation(format!("{tag}{i:02}"), &p.source, Task::Mr2ct, None, &p.target, &fp).unwrap())
                .collect()
        };
        let segmentation = |ps: &[PhantomPair], tag: &str| -> Vec<Case> {
            ps.iter()
                .enumerate()
                .map(|(i, p)| Case::segmentation(format!("{tag}{i:02}"), &p.target, &p.labels, &fp).unwrap())
                .collect()
        };
        Data {
            train: translation(tr, "train"),
            val: translation(va, "val"),
            seg_train: segmentation(tr, "train"),
            seg_val: segmentation(va, "val"),
            fp,
        }
    })
}

fn phase1_config() -> TrainConfig {
    TrainConfig {
        lr0: 0.01,
        momentum: 0.99,
        epochs: 200,
        iters_per_epoch: 20,
        batch: 2,
        seed: TRAIN_SEED,
        val_interval: 10,
        threads: Some(1),
        ..TrainConfig::default()
    }
}

fn arch(block: BlockKind) -> NetworkSpec {
    NetworkSpec {
        levels: 3,
        base_channels: 8,
        block,
        upsample: UpsampleMode::TransposedConv,
        patch_dims: PATCH,
        seed: 1,
        ..NetworkSpec::default()
    }
}

struct Run {
    outcome: TrainOutcome,
    dir: TempDir,
    seconds: f64,
}

fn run_phase1(block: BlockKind) -> Run {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let io = TrainIo {
        out_dir: Some(dir.path().to_path_buf()),
        ct_fingerprint: Some(d.fp),
    };
    let start = Instant::now();
    let outcome = train(Network::build(&arch(block)).unwrap(), &d.train, &d.val, &phase1_config(), &io).unwrap();
    Run {
        outcome,
        dir,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn residual_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| run_phase1(BlockKind::Residual))
}

fn val_mae_hu(run: &Run, which: usize) -> f64 {
    let v = run.outcome.log.validations();
    let r = if which == 0 { v[0] } else { *v.last().unwrap() };
    r.val_mae_hu.unwrap()
}

#[test]
fn criterion_7_synthetic_end_to_end() {
    let res = residual_run();
    let plain = run_phase1(BlockKind::Plain);
    let (first, last) = (val_mae_hu(res, 0), val_mae_hu(res, 1));
    let ratio = last / first;
    let plain_last = val_mae_hu(&plain, 1);
    let pass = ratio <= 0.20;
    report(
        7,
        pass,
        format!(
            "ResU-Net val MAE epoch 1 {first:.2} HU -> epoch 200 {last:.2} HU (ratio {ratio:.3}, <= 0.20) in {:.0}s; \
             plain U-Net epoch 200 {plain_last:.2} HU (ResU-Net {} plain, not gated)",
            res.seconds,
            if last < plain_last { "below" } else { "not below" }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_afp_finetune_effect() {
    let d = data();
    let res = residual_run();
    let seg_cfg = TrainConfig {
        lr0: 0.01,
        epochs: 30,
        iters_per_epoch: 20,
        batch: 2,
        seed: 11,
        val_interval: 10,
        threads: Some(1),
        ..TrainConfig::default()
    };
    let seg_spec = NetworkSpec {
        head: HeadKind::Segmentation,
        block: BlockKind::Plain,
        seed: 2,
        ..arch(BlockKind::Plain)
    };
    let seg = seg_train(Network::build(&seg_spec).unwrap(), &d.seg_train, &d.seg_val, &seg_cfg, &TrainIo::default()).unwrap();
    let mut extractor = seg.last;
    extractor.freeze();
    let checksum = extractor.checksum();
    let afp = AfpConfig::all_taps::<f32>(&extractor);

    let l1_net = &res.outcome.best;
    let ft_cfg = TrainConfig {
        epochs: 50,
        iters_per_epoch: 20,
        seed: 8,
        val_interval: 10,
        threads: Some(1),
        ..TrainConfig::afp_phase()
    };
    let io = TrainIo {
        out_dir: None,
        ct_fingerprint: Some(d.fp),
    };
    let ft = finetune_afp(l1_net.clone(), &afp, &d.train, &d.val, &ft_cfg, &io).unwrap();

    let step = 0.5;
    let afp_before = validation_afp_distance(l1_net, &afp, &d.val, step).unwrap();
    let afp_after = validation_afp_distance(&ft.last, &afp, &d.val, step).unwrap();
    let mae_before = validate_regression(l1_net, &d.val, step, Some(&d.fp)).unwrap().1.unwrap();
    let mae_after = validate_regression(&ft.last, &d.val, step, Some(&d.fp)).unwrap().1.unwrap();
    let afp_drop = 1.0 - afp_after / afp_before;
    let mae_rise = mae_after / mae_before - 1.0;
    let pass = afp_drop >= 0.30 && mae_rise <= 0.25 && extractor.checksum() == checksum;
    report(
        8,
        pass,
        format!(
            "val feature distance {afp_before:.4} -> {afp_after:.4} (drop {:.1}%, >= 30%), val MAE {mae_before:.2} -> {mae_after:.2} HU (change {:+.1}%, <= +25%)",
            100.0 * afp_drop,
            100.0 * mae_rise
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let a = residual_run();
    let b = run_phase1(BlockKind::Residual);
    let curve = |r: &Run| {
        std::fs::read_to_string(r.dir.path().join(LOG_FILE))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once('\t').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    let bytes = |r: &Run, f: &str| std::fs::read(r.dir.path().join(f)).unwrap();
    let logs_equal = curve(a) == curve(&b) && a.outcome.log.loss_curve() == b.outcome.log.loss_curve();
    let ckpt_equal = [BEST_CHECKPOINT, LAST_CHECKPOINT].iter().all(|f| bytes(a, f) == bytes(&b, f));
    let reload = Network::<f32>::from_checkpoint(&Checkpoint::load(b.dir.path().join(LAST_CHECKPOINT)).unwrap()).unwrap();
    let pass = logs_equal && ckpt_equal && reload.checksum() == a.outcome.last.checksum();
    report(
        9,
        pass,
        format!(
            "loss logs identical: {logs_equal}, best/last checkpoints byte-identical: {ckpt_equal} ({} epochs, 1 thread)",
            a.outcome.log.records.len()
        ),
    );
    assert!(pass);
}
