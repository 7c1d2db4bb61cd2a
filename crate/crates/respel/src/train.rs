//! Training loop, evaluation metrics and checkpointing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BnMode;
use crate::error::RespelError;
use crate::model::{infer, Model, ModelConfig};
use crate::params::{AdamOutcome, ParamStore};
use crate::preprocess::{
    augment, normalize_box, sample_points, view_normalize, AugmentRanges, PointCloud, PoseVector,
};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::voting::Variant;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of epochs (from the end) run at lr / 10.
    pub final_lr_frac: f64,
    /// Point count for the first `curriculum_frac` of epochs, then after.
    pub points_early: usize,
    pub points_late: usize,
    pub curriculum_frac: f64,
    pub augment: bool,
    pub augment_ranges: AugmentRanges,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            final_lr_frac: 0.1,
            points_early: 256,
            points_late: 512,
            curriculum_frac: 0.5,
            augment: false,
            augment_ranges: AugmentRanges::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RespelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(RespelError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(RespelError::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.curriculum_frac)
            || !(0.0..=1.0).contains(&self.final_lr_frac)
        {
            return Err(RespelError::Config(
                "curriculum_frac and final_lr_frac must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let cutoff = (self.epochs as f64 * (1.0 - self.final_lr_frac)).ceil() as usize;
        if epoch >= cutoff {
            self.lr / 10.0
        } else {
            self.lr
        }
    }

    pub fn points_at(&self, epoch: usize) -> usize {
        let cutoff = (self.epochs as f64 * self.curriculum_frac).ceil() as usize;
        if epoch < cutoff {
            self.points_early
        } else {
            self.points_late
        }
    }
}

/// One training sample: camera-frame cloud and flattened joints (mm).
pub struct Sample {
    pub cloud: PointCloud,
    pub pose: PoseVector,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_mje_mm: f64,
    pub lr: f64,
    pub points: usize,
}

/// Preprocesses one sample into the unit frame: resample, view-normalize,
/// optional augmentation, box-normalize.
fn prepare(
    sample: &Sample,
    model: &Model,
    n_points: usize,
    aug: Option<(&AugmentRanges, u64)>,
    seed: u64,
) -> Result<(Vec<f64>, PoseVector), RespelError> {
    let cloud = sample_points(&sample.cloud, n_points, seed);
    let (view_cloud, view_pose, mut record) = view_normalize(&cloud, &sample.pose)?;
    let (view_cloud, view_pose) = match aug {
        Some((ranges, aug_seed)) => augment(&view_cloud, &view_pose, ranges, aug_seed),
        None => (view_cloud, view_pose),
    };
    let (unit_cloud, unit_pose) =
        normalize_box(&view_cloud, &view_pose, model.config.r_norm, &mut record);
    let flat = unit_cloud.points.iter().flatten().copied().collect();
    Ok((flat, unit_pose))
}

fn batch_tensors<F: Real>(
    model: &Model,
    samples: &[(Vec<f64>, PoseVector)],
    n_points: usize,
) -> Result<(Tensor<F>, Tensor<F>, usize), RespelError> {
    let s = samples.len();
    let mut clouds = Vec::with_capacity(s * n_points * 3);
    for (flat, _) in samples {
        clouds.extend_from_slice(flat);
    }
    let x = Tensor::from_f64_slice(vec![s, n_points, 3], &clouds).map_err(RespelError::from)?;
    let mut clamped = 0;
    let targets = match model.config.variant {
        Variant::Detection => {
            let jb = model.config.pose_dims * model.config.bin_spec.bins;
            let mut t = Vec::with_capacity(s * jb);
            for (_, pose) in samples {
                let (d, c) = model.detection_target(pose);
                clamped += c;
                t.extend_from_slice(&d);
            }
            Tensor::from_f64_slice(vec![s, 1, jb], &t).map_err(RespelError::from)?
        }
        Variant::Regression => {
            let j = model.config.pose_dims;
            let mut t = Vec::with_capacity(s * j);
            for (_, pose) in samples {
                t.extend_from_slice(pose);
            }
            Tensor::from_f64_slice(vec![s, 1, j], &t).map_err(RespelError::from)?
        }
    };
    Ok((x, targets, clamped))
}

/// Mean joint error (mm) and per-threshold correct-frame proportions.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub mje_mm: f64,
    /// (threshold_mm, fraction of frames with every joint under it).
    pub proportions: Vec<(f64, f64)>,
}

/// Per-joint Euclidean distances between two flattened poses.
pub fn joint_errors(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    pred.chunks(3)
        .zip(gt.chunks(3))
        .map(|(p, g)| {
            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
        })
        .collect()
}

/// Frozen-statistics evaluation at an arbitrary point count.
pub fn evaluate<F: Real>(
    model: &mut Model,
    store: &ParamStore<F>,
    dataset: &[Sample],
    n_points: usize,
    thresholds: &[f64],
    seed: u64,
) -> Result<Metrics, RespelError> {
    if dataset.is_empty() {
        return Err(RespelError::Config("empty evaluation set".into()));
    }
    let mut err_sum = 0.0;
    let mut err_count = 0usize;
    let mut correct = vec![0usize; thresholds.len()];
    for (i, sample) in dataset.iter().enumerate() {
        let out = infer(model, store, &sample.cloud, n_points, seed.wrapping_add(i as u64))?;
        let errs = joint_errors(&out.pose, &sample.pose);
        err_sum += errs.iter().sum::<f64>();
        err_count += errs.len();
        let worst = errs.iter().cloned().fold(0.0f64, f64::max);
        for (c, &t) in correct.iter_mut().zip(thresholds) {
            if worst < t {
                *c += 1;
            }
        }
    }
    Ok(Metrics {
        mje_mm: err_sum / err_count as f64,
        proportions: thresholds
            .iter()
            .zip(correct)
            .map(|(&t, c)| (t, c as f64 / dataset.len() as f64))
            .collect(),
    })
}

/// Runs the full schedule; writes one tab-separated line per epoch
/// (`epoch loss val_mje_mm lr points`) to `log` and returns the stats.
/// Deterministic for a fixed seed (single-threaded).
pub fn train<F: Real>(
    model: &mut Model,
    store: &mut ParamStore<F>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    log: &mut dyn std::io::Write,
) -> Result<Vec<EpochStats>, RespelError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(RespelError::Config("empty training set".into()));
    }
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut clamped_total = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let n_points = cfg.points_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut prepared = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let aug = cfg
                    .augment
                    .then(|| (&cfg.augment_ranges, rng.gen::<u64>()));
                prepared.push(prepare(&train_set[idx], model, n_points, aug, rng.gen())?);
            }
            let (x, targets, clamped) = batch_tensors::<F>(model, &prepared, n_points)?;
            clamped_total += clamped;

            let mut tape = Tape::<F>::new();
            let xid = tape.constant(x);
            let out = model.forward(
                &mut tape,
                store,
                xid,
                BnMode::Batch {
                    update_running: true,
                },
            )?;
            let loss_id = model.loss(&mut tape, out.merged, &targets)?;
            let loss = tape.value(loss_id).scalar_value().as_f64();
            if !loss.is_finite() {
                return Err(RespelError::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch} batch {batches} \
                     (samples {chunk:?}, {n_points} points, lr {lr})"
                )));
            }
            store.zero_grads();
            tape.backward_into(loss_id, store)?;
            if store.adam_step(lr, 0.9, 0.999, 1e-8) == AdamOutcome::SkippedNonFinite {
                writeln!(log, "# epoch {epoch} batch {batches}: non-finite gradients, step skipped")
                    .map_err(|e| RespelError::Io(e.to_string()))?;
            }
            loss_sum += loss;
            batches += 1;
        }

        let val_mje = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(model, store, val_set, n_points, &[], cfg.seed ^ 0x5eed)?.mje_mm
        };
        let epoch_loss = loss_sum / batches as f64;
        writeln!(log, "{epoch}\t{epoch_loss:.6}\t{val_mje:.4}\t{lr}\t{n_points}")
            .map_err(|e| RespelError::Io(e.to_string()))?;
        stats.push(EpochStats {
            epoch,
            loss: epoch_loss,
            val_mje_mm: val_mje,
            lr,
            points: n_points,
        });
    }
    if clamped_total > 0 {
        writeln!(
            log,
            "# warning: {clamped_total} pose values fell outside the bin range and were clamped"
        )
        .map_err(|e| RespelError::Io(e.to_string()))?;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"PELV";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn push_entry(out: &mut Vec<u8>, name: &str, data: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(data);
}

fn f64s_to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>, RespelError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(RespelError::Checkpoint(format!(
            "array byte length {} not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("len")))
        .collect())
}

/// Serializes the model configuration, every parameter (with optimizer
/// moments), the normalization running statistics and the training
/// position. The RNG state is the (seed, epoch) pair: every random
/// stream is derived from them.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &Model,
    store: &ParamStore<F>,
    epoch: u64,
    seed: u64,
) -> Result<(), RespelError> {
    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());

    let config =
        serde_json::to_vec(&model.config).map_err(|e| RespelError::Checkpoint(e.to_string()))?;
    push_entry(&mut body, "config", &config);
    push_entry(&mut body, "epoch", &epoch.to_le_bytes());
    push_entry(&mut body, "seed", &seed.to_le_bytes());
    push_entry(&mut body, "step", &store.step.to_le_bytes());

    for (_, p) in store.iter() {
        push_entry(
            &mut body,
            &format!("param.{}", p.name),
            &f64s_to_bytes(p.value.data().iter().map(|v| v.as_f64())),
        );
        push_entry(
            &mut body,
            &format!("m1.{}", p.name),
            &f64s_to_bytes(p.moment1.data().iter().map(|v| v.as_f64())),
        );
        push_entry(
            &mut body,
            &format!("m2.{}", p.name),
            &f64s_to_bytes(p.moment2.data().iter().map(|v| v.as_f64())),
        );
    }
    for (i, bn) in model.backbone.bn_layers().iter().enumerate() {
        push_entry(
            &mut body,
            &format!("bn{i}.mean"),
            &f64s_to_bytes(bn.running_mean.iter().copied()),
        );
        push_entry(
            &mut body,
            &format!("bn{i}.var"),
            &f64s_to_bytes(bn.running_var.iter().copied()),
        );
    }

    body.extend_from_slice(&fnv1a(&body).to_le_bytes());
    std::fs::write(path, body).map_err(|e| RespelError::Io(format!("{}: {e}", path.display())))
}

pub struct LoadedCheckpoint<F: Real> {
    pub model: Model,
    pub store: ParamStore<F>,
    pub epoch: u64,
    pub seed: u64,
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<LoadedCheckpoint<F>, RespelError> {
    let bytes =
        std::fs::read(path).map_err(|e| RespelError::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() < 16 {
        return Err(RespelError::Checkpoint(format!(
            "{}: truncated (only {} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(RespelError::Checkpoint(format!(
            "{}: bad magic (not a checkpoint)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("len"));
    if version != VERSION {
        return Err(RespelError::Checkpoint(format!(
            "{}: version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("len"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(RespelError::Checkpoint(format!(
            "{}: checksum mismatch (stored {stored:016x}, computed {computed:016x})",
            path.display()
        )));
    }

    let mut entries = std::collections::HashMap::new();
    let mut cur = &body[8..];
    while !cur.is_empty() {
        let fail = || RespelError::Checkpoint(format!("{}: truncated entry", path.display()));
        if cur.len() < 4 {
            return Err(fail());
        }
        let name_len = u32::from_le_bytes(cur[..4].try_into().expect("len")) as usize;
        cur = &cur[4..];
        if cur.len() < name_len + 8 {
            return Err(fail());
        }
        let name = std::str::from_utf8(&cur[..name_len])
            .map_err(|_| RespelError::Checkpoint(format!("{}: bad entry name", path.display())))?
            .to_string();
        cur = &cur[name_len..];
        let data_len = u64::from_le_bytes(cur[..8].try_into().expect("len")) as usize;
        cur = &cur[8..];
        if cur.len() < data_len {
            return Err(fail());
        }
        entries.insert(name, cur[..data_len].to_vec());
        cur = &cur[data_len..];
    }

    let take = |entries: &mut std::collections::HashMap<String, Vec<u8>>,
                name: &str|
     -> Result<Vec<u8>, RespelError> {
        entries
            .remove(name)
            .ok_or_else(|| RespelError::Checkpoint(format!("missing entry '{name}'")))
    };
    let take_u64 = |entries: &mut std::collections::HashMap<String, Vec<u8>>,
                    name: &str|
     -> Result<u64, RespelError> {
        let b = take(entries, name)?;
        let arr: [u8; 8] = b
            .as_slice()
            .try_into()
            .map_err(|_| RespelError::Checkpoint(format!("entry '{name}' is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    };

    let config: ModelConfig = serde_json::from_slice(&take(&mut entries, "config")?)
        .map_err(|e| RespelError::Checkpoint(format!("bad config entry: {e}")))?;
    let epoch = take_u64(&mut entries, "epoch")?;
    let seed = take_u64(&mut entries, "seed")?;
    let step = take_u64(&mut entries, "step")?;

    // rebuild the structure from config, then overwrite every array
    let mut store = ParamStore::<F>::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::init(&mut store, config, &mut init_rng);
    store.step = step;
    for (_, p) in store.iter_mut() {
        for (kind, tensor) in [
            ("param", &mut p.value),
            ("m1", &mut p.moment1),
            ("m2", &mut p.moment2),
        ] {
            let name = format!("{kind}.{}", p.name);
            let values = bytes_to_f64s(&take(&mut entries, &name)?)?;
            if values.len() != tensor.numel() {
                return Err(RespelError::Checkpoint(format!(
                    "entry '{name}': {} values, model expects {}",
                    values.len(),
                    tensor.numel()
                )));
            }
            for (dst, v) in tensor.data_mut().iter_mut().zip(values) {
                *dst = F::from_f64(v);
            }
        }
    }
    for (i, bn) in model.backbone.bn_layers_mut().into_iter().enumerate() {
        let mean = bytes_to_f64s(&take(&mut entries, &format!("bn{i}.mean"))?)?;
        let var = bytes_to_f64s(&take(&mut entries, &format!("bn{i}.var"))?)?;
        if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
            return Err(RespelError::Checkpoint(format!(
                "bn{i}: stat length mismatch"
            )));
        }
        bn.running_mean = mean;
        bn.running_var = var;
    }
    if !entries.is_empty() {
        let mut names: Vec<_> = entries.keys().cloned().collect();
        names.sort();
        return Err(RespelError::Checkpoint(format!(
            "unrecognized entries: {}",
            names.join(", ")
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        store,
        epoch,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::preprocess::Frame;
    use crate::synth::{generate_sample, SkeletonSpec, POSE_DIMS};
    use crate::voting::BinSpec;

    fn tiny_model_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                widths: vec![8, 8, 8],
                ..BackboneConfig::default()
            },
            variant,
            pose_dims: POSE_DIMS,
            bin_spec: BinSpec::new(90.0, 24).unwrap(),
            r_norm: 150.0,
            literal_log_loss: false,
        }
    }

    fn synth_samples(count: usize, seed: u64) -> Vec<Sample> {
        let spec = SkeletonSpec::default();
        (0..count)
            .map(|i| {
                let s = generate_sample(&spec, 128, seed + i as u64);
                Sample {
                    cloud: s.cloud,
                    pose: s.pose,
                }
            })
            .collect()
    }

    #[test]
    fn lr_and_curriculum_schedule() {
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(26), 1e-3);
        assert_eq!(cfg.lr_at(27), 1e-4);
        assert_eq!(cfg.lr_at(29), 1e-4);
        assert_eq!(cfg.points_at(0), 256);
        assert_eq!(cfg.points_at(14), 256);
        assert_eq!(cfg.points_at(15), 512);
    }

    #[test]
    fn metrics_basics() {
        let gt = vec![0.0, 0.0, 0.0, 10.0, 0.0, 0.0];
        let off: Vec<f64> = gt.iter().map(|v| v + 5.0 / 3.0f64.sqrt()).collect();
        let errs = joint_errors(&off, &gt);
        for e in &errs {
            assert!((e - 5.0).abs() < 1e-12);
        }
        let exact = joint_errors(&gt, &gt);
        assert!(exact.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn evaluate_perfect_prediction_by_loops() {
        // hand-checked 3-frame metric computation
        let preds = [
            vec![0.0, 0.0, 0.0, 3.0, 4.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ];
        let gts = [
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ];
        let mut sum = 0.0;
        let mut n = 0;
        let thresholds = [2.0, 6.0];
        let mut correct = [0usize; 2];
        for (p, g) in preds.iter().zip(&gts) {
            let errs = joint_errors(p, g);
            sum += errs.iter().sum::<f64>();
            n += errs.len();
            let worst = errs.iter().cloned().fold(0.0f64, f64::max);
            for (c, t) in correct.iter_mut().zip(thresholds) {
                if worst < t {
                    *c += 1;
                }
            }
        }
        assert!((sum / n as f64 - 1.0).abs() < 1e-12);
        assert_eq!(correct, [2, 3]);
    }

    #[test]
    fn one_epoch_smoke_and_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mut model = Model::init(&mut store, tiny_model_config(Variant::Regression), &mut rng);
        let data = synth_samples(10, 100);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            points_early: 32,
            points_late: 32,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let stats = train(&mut model, &mut store, &data[..8], &data[8..], &cfg, &mut log).unwrap();
        assert_eq!(stats.len(), 1);
        assert!(stats[0].loss.is_finite());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &store, 1, cfg.seed).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.epoch, 1);

        // forward after load is bit-identical to before save
        let mut m2 = loaded.model;
        let out_a = infer(&mut model, &store, &data[0].cloud, 32, 7).unwrap();
        let out_b = infer(&mut m2, &loaded.store, &data[0].cloud, 32, 7).unwrap();
        assert_eq!(out_a.pose, out_b.pose);
        assert_eq!(out_a.importance, out_b.importance);

        // save -> load -> save is byte-identical
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &m2, &loaded.store, 1, cfg.seed).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_checkpoint_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let model = Model::init(&mut store, tiny_model_config(Variant::Regression), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &store, 0, 0).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f64>(&path).err().expect("load should fail") {
            RespelError::Checkpoint(msg) => assert!(msg.contains("checksum")),
            other => panic!("expected checksum failure, got {other:?}"),
        }

        // version mismatch reported distinctly
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[mid] ^= 0xff;
        bytes[4] = 99;
        let tail = bytes.len() - 8;
        let sum = fnv1a(&bytes[..tail]).to_le_bytes();
        bytes[tail..].copy_from_slice(&sum);
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f64>(&path).err().expect("load should fail") {
            RespelError::Checkpoint(msg) => assert!(msg.contains("version")),
            other => panic!("expected version failure, got {other:?}"),
        }

        // truncation reported distinctly
        std::fs::write(&path, b"PELV").unwrap();
        match load_checkpoint::<f64>(&path).err().expect("load should fail") {
            RespelError::Checkpoint(msg) => assert!(msg.contains("truncated")),
            other => panic!("expected truncation failure, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_identical_loss_curves() {
        let data = synth_samples(12, 200);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::<f64>::new();
            let mut model =
                Model::init(&mut store, tiny_model_config(Variant::Regression), &mut rng);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 6,
                points_early: 24,
                points_late: 24,
                seed: 5,
                augment: true,
                ..TrainConfig::default()
            };
            let mut log = Vec::new();
            train(&mut model, &mut store, &data[..10], &data[10..], &cfg, &mut log).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.val_mje_mm, y.val_mje_mm);
        }
    }

    #[test]
    fn checkpoint_trained_small_runs_at_large_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let mut model = Model::init(&mut store, tiny_model_config(Variant::Detection), &mut rng);
        let data = synth_samples(6, 300);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            points_early: 32,
            points_late: 32,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        train(&mut model, &mut store, &data, &data, &cfg, &mut log).unwrap();
        let out = infer(&mut model, &store, &data[0].cloud, 1024, 7).unwrap();
        assert_eq!(out.n_points, 1024);
        assert!(out.pose.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_training_set_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let mut model = Model::init(&mut store, tiny_model_config(Variant::Regression), &mut rng);
        let mut log = Vec::new();
        let r = train(
            &mut model,
            &mut store,
            &[],
            &[],
            &TrainConfig::default(),
            &mut log,
        );
        assert!(matches!(r, Err(RespelError::Config(_))));
        let _ = PointCloud::new(vec![[0.0, 0.0, 1.0]], Frame::CameraMm).unwrap();
    }
}
