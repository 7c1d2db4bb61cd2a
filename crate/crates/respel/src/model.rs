//! Full model: backbone features into the voting heads, plus the two
//! training losses and the camera-frame inference path.
//!
//! Unit conventions: the network sees unit-normalized clouds (centroid
//! subtracted, divided by the box radius `r_norm`). The regression head
//! votes in normalized units. The detection head votes over binned
//! offsets in mm-equivalent units (normalized value times `r_norm`) so
//! the bin half-range keeps its metric meaning.

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, BnMode};
use crate::error::RespelError;
use crate::params::ParamStore;
use crate::preprocess::{
    denormalize_pose, normalize_box, sample_points, view_normalize, PointCloud, PoseVector,
};
use crate::tape::{Tape, ValId};
use crate::tensor::{Real, Tensor};
use crate::voting::{gt_distribution, integrate_distribution, BinSpec, Variant, VotingHeads};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: Variant,
    /// Pose vector length J (3 coordinates per joint).
    pub pose_dims: usize,
    /// Detection bin layout; ignored by the regression variant.
    pub bin_spec: BinSpec,
    /// Normalization box radius (mm).
    pub r_norm: f64,
    /// Use the non-standard printed log-loss form instead of binary
    /// cross-entropy (ablation only).
    pub literal_log_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            variant: Variant::Regression,
            pose_dims: 57,
            bin_spec: BinSpec::default(),
            r_norm: 150.0,
            literal_log_loss: false,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub heads: VotingHeads,
}

pub struct ModelOutput {
    /// Backbone features [S, N, K_feat].
    pub features: ValId,
    /// Importance G [S, N, J].
    pub importance: ValId,
    /// Per-point votes [S, N, J*B] or [S, N, J].
    pub votes: ValId,
    /// Importance-weighted merge [S, 1, J*B] or [S, 1, J].
    pub merged: ValId,
}

impl Model {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        config: ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let backbone = Backbone::init(store, config.backbone.clone(), rng);
        let heads = VotingHeads::init(
            store,
            config.variant,
            backbone.feature_width(),
            config.pose_dims,
            config.bin_spec.bins,
            rng,
        );
        Self {
            config,
            backbone,
            heads,
        }
    }

    /// x: unit-normalized clouds [S, N, 3].
    pub fn forward<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
        mode: BnMode,
    ) -> Result<ModelOutput, RespelError> {
        let features = self.backbone.forward(tape, store, x, mode)?;
        let heads = self.heads.forward(tape, store, features)?;
        let merged = self.heads.merge(tape, &heads)?;
        Ok(ModelOutput {
            features,
            importance: heads.importance,
            votes: heads.votes,
            merged,
        })
    }

    /// Mm-equivalent binned target for one normalized pose vector.
    pub fn detection_target(&self, pose_normalized: &[f64]) -> (Vec<f64>, usize) {
        let mm: Vec<f64> = pose_normalized.iter().map(|v| v * self.config.r_norm).collect();
        gt_distribution(&mm, &self.config.bin_spec)
    }

    /// Batch loss on the tape. `targets` is the flattened per-sample
    /// target, [S, 1, J*B] (detection) or [S, 1, J] (regression, in
    /// normalized units); the scalar is averaged over the batch.
    pub fn loss<F: Real>(
        &self,
        tape: &mut Tape<F>,
        merged: ValId,
        targets: &Tensor<F>,
    ) -> Result<ValId, RespelError> {
        let batch = targets.shape()[0] as f64;
        let loss = match self.config.variant {
            Variant::Detection => {
                let log_p = {
                    let shifted = tape.affine(merged, 1.0, BCE_EPS)?;
                    tape.log(shifted)?
                };
                let pos = tape.mul_const(log_p, targets)?;
                let mut inv_targets = targets.clone();
                for v in inv_targets.data_mut() {
                    *v = F::one() - *v;
                }
                let neg = if self.config.literal_log_loss {
                    // printed form: (1 - gt) * (1 - log(D + eps))
                    let one_minus_log = tape.affine(log_p, -1.0, 1.0)?;
                    tape.mul_const(one_minus_log, &inv_targets)?
                } else {
                    let one_minus = tape.affine(merged, -1.0, 1.0 + BCE_EPS)?;
                    let log_q = tape.log(one_minus)?;
                    tape.mul_const(log_q, &inv_targets)?
                };
                let both = tape.add(pos, neg)?;
                let total = tape.sum_all(both)?;
                tape.affine(total, -1.0 / batch, 0.0)?
            }
            Variant::Regression => {
                let mut neg_t = targets.clone();
                for v in neg_t.data_mut() {
                    *v = -*v;
                }
                let diff = tape.add_const(merged, &neg_t)?;
                let sq = tape.square(diff)?;
                let total = tape.sum_all(sq)?;
                tape.affine(total, 0.5 / batch, 0.0)?
            }
        };
        Ok(loss)
    }

    /// Converts one sample's merged head output (f64 values) to a pose in
    /// normalized units.
    pub fn merged_to_normalized_pose(&self, merged: &[f64]) -> Result<PoseVector, RespelError> {
        match self.config.variant {
            Variant::Regression => Ok(merged.to_vec()),
            Variant::Detection => {
                let mm = integrate_distribution(merged, &self.config.bin_spec)?;
                Ok(mm.iter().map(|v| v / self.config.r_norm).collect())
            }
        }
    }
}

pub struct Inference {
    /// Pose in camera-frame mm.
    pub pose: PoseVector,
    /// The resampled camera-frame cloud the pose was computed from.
    pub cloud: PointCloud,
    /// Importance matrix G, row-major N x J, aligned with `cloud`.
    pub importance: Vec<f64>,
    pub n_points: usize,
}

/// Camera-frame inference: resample to `n_points`, view-normalize, box-
/// normalize, run the frozen network, merge and map the pose back to
/// camera mm.
pub fn infer<F: Real>(
    model: &mut Model,
    store: &ParamStore<F>,
    cloud: &PointCloud,
    n_points: usize,
    seed: u64,
) -> Result<Inference, RespelError> {
    let sampled = sample_points(cloud, n_points, seed);
    let (view_cloud, _, mut record) = view_normalize(&sampled, &[])?;
    let (unit_cloud, _) = normalize_box(&view_cloud, &[], model.config.r_norm, &mut record);

    let n = unit_cloud.len();
    let flat: Vec<f64> = unit_cloud.points.iter().flatten().copied().collect();
    let x = Tensor::from_f64_slice(vec![1, n, 3], &flat).map_err(RespelError::from)?;

    let mut tape = Tape::<F>::new();
    let xid = tape.constant(x);
    let out = model.forward(&mut tape, store, xid, BnMode::Running)?;
    let merged = tape.value(out.merged).to_f64_vec();
    if !merged.iter().all(|v| v.is_finite()) {
        return Err(RespelError::Numeric("non-finite merged head output".into()));
    }
    let normalized = model.merged_to_normalized_pose(&merged)?;
    let pose = denormalize_pose(&normalized, &record);
    let importance = tape.value(out.importance).to_f64_vec();
    Ok(Inference {
        pose,
        cloud: sampled,
        importance,
        n_points: n,
    })
}

/// Finite-difference verification of the whole pipeline at toy size
/// (8 points, 6 pose dims, 8 bins, widths [4,4,4]) for one variant.
pub fn gradcheck_pipeline(variant: Variant, seed: u64) -> crate::gradcheck::GradCheckReport {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        backbone: BackboneConfig {
            widths: vec![4, 4, 4],
            ..BackboneConfig::default()
        },
        variant,
        pose_dims: 6,
        bin_spec: BinSpec::new(15.0, 8).expect("valid"),
        r_norm: 150.0,
        literal_log_loss: false,
    };
    let mut store = ParamStore::<f64>::new();
    let mut model = Model::init(&mut store, config, &mut rng);
    // move zero-initialized biases off the relu kinks in the head MLPs
    // so central differences stay on one side
    for (_, p) in store.iter_mut() {
        if p.name.starts_with("heads.") && p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v += rng.gen_range(0.05..0.2);
            }
        }
    }

    let n = 8;
    let cloud: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let pose: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let targets = match variant {
        Variant::Detection => {
            let (d, _) = model.detection_target(&pose);
            Tensor::from_f64_slice(vec![1, 1, d.len()], &d).expect("shape")
        }
        Variant::Regression => {
            Tensor::from_f64_slice(vec![1, 1, pose.len()], &pose).expect("shape")
        }
    };

    // training-mode statistics (without running-average updates) so the
    // loss is a pure function of the parameters and gradients reach the
    // normalization scale/shift
    let mode = BnMode::Batch {
        update_running: false,
    };
    let run = |model: &mut Model, store: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64_slice(vec![1, n, 3], &cloud).expect("shape"));
        let out = model.forward(&mut tape, store, x, mode).expect("forward");
        let loss = model.loss(&mut tape, out.merged, &targets).expect("loss");
        tape.value(loss).scalar_value()
    };

    {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64_slice(vec![1, n, 3], &cloud).expect("shape"));
        let out = model.forward(&mut tape, &store, x, mode).expect("forward");
        let loss = model.loss(&mut tape, out.merged, &targets).expect("loss");
        tape.backward_into(loss, &mut store).expect("backward");
    }
    crate::gradcheck::check_against_fd(&mut store, |s| run(&mut model, s), 1e-5, 1e-4)
}
