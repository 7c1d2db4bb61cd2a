//! Point-to-pose voting: per-point importance weights and per-point pose
//! predictions merged into the final pose.
//!
//! Detection variant: each point emits a binned distribution per pose
//! dimension (a 1D heat vector over [-r, r]); the merged distribution is
//! integrated with a soft argmax over bin centers. Regression variant:
//! each point emits the pose directly and the merge is the importance-
//! weighted average.

use rand::Rng;

use crate::error::RespelError;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, ValId};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    Detection,
    Regression,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "detection" => Ok(Variant::Detection),
            "regression" => Ok(Variant::Regression),
            other => Err(format!("unknown variant '{other}' (detection|regression)")),
        }
    }
}

/// Binning of one pose dimension over [-r, +r] with B bins.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BinSpec {
    /// Half-range (mm, or normalized units scaled to mm-equivalent).
    pub r: f64,
    /// Bin count.
    pub bins: usize,
}

impl BinSpec {
    pub fn new(r: f64, bins: usize) -> Result<Self, RespelError> {
        if bins < 2 || r <= 0.0 {
            return Err(RespelError::Config(format!(
                "bin spec needs r > 0 and B >= 2, got r={r}, B={bins}"
            )));
        }
        Ok(Self { r, bins })
    }

    /// Bin width: 2r / B.
    pub fn delta(&self) -> f64 {
        2.0 * self.r / self.bins as f64
    }

    /// Center of 1-indexed bin b in pose units: (b - 0.5) * delta - r.
    pub fn bin_center(&self, b: usize) -> f64 {
        (b as f64 - 0.5) * self.delta() - self.r
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        Self { r: 15.0, bins: 60 }
    }
}

/// Ground-truth binned distribution: bin index ceil((y + r) / delta),
/// clamped to [2, B-1] so the 3-bin window always fits; the window bins
/// are set to one, everything else zero.
///
/// Returns the J x B distribution (flattened row-major) plus the number
/// of out-of-range values that had to be clamped — outlier labels warn
/// rather than crash training.
pub fn gt_distribution(pose: &[f64], spec: &BinSpec) -> (Vec<f64>, usize) {
    let b = spec.bins;
    let delta = spec.delta();
    let mut out = vec![0.0; pose.len() * b];
    let mut clamped = 0;
    for (j, &y) in pose.iter().enumerate() {
        let raw = ((y + spec.r) / delta).ceil() as i64;
        let idx = raw.clamp(2, b as i64 - 1);
        if idx != raw {
            clamped += 1;
        }
        for bin in idx - 1..=idx + 1 {
            out[j * b + (bin - 1) as usize] = 1.0;
        }
    }
    (out, clamped)
}

/// Soft argmax over bin centers: y_bin = sum_b (b - 0.5) D_b / sum_b D_b,
/// converted to pose units via y = y_bin * delta - r.
pub fn integrate_distribution(d: &[f64], spec: &BinSpec) -> Result<Vec<f64>, RespelError> {
    let b = spec.bins;
    if !d.len().is_multiple_of(b) {
        return Err(RespelError::Numeric(format!(
            "distribution length {} not divisible by B={b}",
            d.len()
        )));
    }
    let mut pose = Vec::with_capacity(d.len() / b);
    for (j, row) in d.chunks(b).enumerate() {
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(RespelError::Numeric(format!(
                "distribution row {j} has non-positive sum {sum}"
            )));
        }
        let weighted: f64 = row
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64 - 0.5) * v)
            .sum();
        pose.push(weighted / sum * spec.delta() - spec.r);
    }
    Ok(pose)
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        k_in: usize,
        k_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (k_in + k_out) as f64).sqrt();
        let w: Vec<f64> = (0..k_in * k_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::from_f64_slice(vec![k_in, k_out], &w).expect("shape"),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![k_out])),
        }
    }

    fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
    ) -> Result<ValId, RespelError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        Ok(tape.add_row(h, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FinalAct {
    Sigmoid,
    Linear,
}

/// Per-point MLP applied row-wise with shared weights: permuting input
/// rows permutes outputs by construction.
#[derive(Debug, Clone)]
struct PointMlp {
    layers: Vec<Linear>,
    final_act: FinalAct,
}

impl PointMlp {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        final_act: FinalAct,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(store, &format!("{name}.fc{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, final_act }
    }

    fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
    ) -> Result<ValId, RespelError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(match self.final_act {
            FinalAct::Sigmoid => tape.sigmoid(h)?,
            FinalAct::Linear => h,
        })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// The two fully connected modules of the voting scheme: importance
/// weights G (always sigmoid-bounded) and per-point votes (sigmoid-bounded
/// bin distributions for detection, linear pose values for regression).
#[derive(Debug, Clone)]
pub struct VotingHeads {
    pub variant: Variant,
    pub pose_dims: usize,
    /// Bins per pose dimension; 1 for the regression variant.
    pub bins: usize,
    importance: PointMlp,
    votes: PointMlp,
}

pub struct HeadOutput {
    /// Importance matrix G: [S, N, J], entries in [0, 1].
    pub importance: ValId,
    /// Votes: [S, N, J*B] (detection) or [S, N, J] (regression).
    pub votes: ValId,
}

impl VotingHeads {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        variant: Variant,
        feature_width: usize,
        pose_dims: usize,
        bins: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = [feature_width, feature_width, feature_width / 2];
        let g_dims = [&hidden[..], &[pose_dims]].concat();
        let bins = match variant {
            Variant::Detection => bins,
            Variant::Regression => 1,
        };
        let v_dims = [&hidden[..], &[pose_dims * bins]].concat();
        let votes_act = match variant {
            Variant::Detection => FinalAct::Sigmoid,
            Variant::Regression => FinalAct::Linear,
        };
        Self {
            variant,
            pose_dims,
            bins,
            importance: PointMlp::init(store, "heads.importance", &g_dims, FinalAct::Sigmoid, rng),
            votes: PointMlp::init(store, "heads.votes", &v_dims, votes_act, rng),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        features: ValId,
    ) -> Result<HeadOutput, RespelError> {
        Ok(HeadOutput {
            importance: self.importance.forward(tape, store, features)?,
            votes: self.votes.forward(tape, store, features)?,
        })
    }

    /// Importance-weighted merge on the tape: [S, 1, J*B].
    pub fn merge<F: Real>(
        &self,
        tape: &mut Tape<F>,
        out: &HeadOutput,
    ) -> Result<ValId, RespelError> {
        Ok(tape.vote_merge(out.importance, out.votes, self.bins)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.importance.param_ids();
        ids.extend(self.votes.param_ids());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_bin_spec_matches_training_constants() {
        let spec = BinSpec::default();
        assert_eq!(spec.r, 15.0);
        assert_eq!(spec.bins, 60);
        assert_eq!(spec.delta(), 0.5);
    }

    #[test]
    fn gt_distribution_center_window() {
        // r=15, B=60 (delta 0.5), y=0 -> index 30, bins {29,30,31} set
        let spec = BinSpec::default();
        let (d, clamped) = gt_distribution(&[0.0], &spec);
        assert_eq!(clamped, 0);
        let ones: Vec<usize> = d
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(ones, vec![29, 30, 31]);
    }

    #[test]
    fn gt_distribution_boundary_clamp() {
        let spec = BinSpec::default();
        // first interior bin center: y = -r + delta/2 -> raw index 1,
        // clamped to 2 so the window {1,2,3} fits
        let y = -spec.r + spec.delta() / 2.0;
        let (d, clamped) = gt_distribution(&[y], &spec);
        assert_eq!(clamped, 1);
        let ones: Vec<usize> = d
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(ones, vec![1, 2, 3]);
    }

    #[test]
    fn gt_distribution_always_three_ones() {
        let spec = BinSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose: Vec<f64> = (0..57).map(|_| rng.gen_range(-40.0..40.0)).collect();
        let (d, _) = gt_distribution(&pose, &spec);
        for row in d.chunks(spec.bins) {
            assert_eq!(row.iter().sum::<f64>(), 3.0);
        }
    }

    #[test]
    fn quantization_round_trip_within_half_bin() {
        // integrating the gt window recovers the value up to delta/2:
        // the symmetric 3-bin window centers on the hit bin
        let spec = BinSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let half_bin = spec.delta() / 2.0;
        for _ in 0..500 {
            let y = rng.gen_range(-spec.r + 2.0 * spec.delta()..spec.r - spec.delta());
            let (d, clamped) = gt_distribution(&[y], &spec);
            assert_eq!(clamped, 0);
            let back = integrate_distribution(&d, &spec).unwrap()[0];
            assert!((back - y).abs() <= half_bin + 1e-12, "y={y}, back={back}");
        }
    }

    #[test]
    fn integrate_single_bin_center() {
        let spec = BinSpec::default();
        let mut d = vec![0.0; spec.bins];
        d[0] = 1.0; // bin b=1
        let pose = integrate_distribution(&d, &spec).unwrap();
        assert!((pose[0] + 14.75).abs() < 1e-12);
    }

    #[test]
    fn integrate_uniform_row_is_midpoint() {
        let spec = BinSpec::default();
        let d = vec![0.3; spec.bins];
        let pose = integrate_distribution(&d, &spec).unwrap();
        assert!(pose[0].abs() < 1e-12);
    }

    #[test]
    fn integrate_rejects_zero_row() {
        let spec = BinSpec::default();
        let d = vec![0.0; spec.bins];
        assert!(integrate_distribution(&d, &spec).is_err());
    }

    #[test]
    fn integration_output_stays_in_range() {
        let spec = BinSpec::new(20.0, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d: Vec<f64> = (0..spec.bins).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
            if d.iter().sum::<f64>() <= 0.0 {
                continue;
            }
            let y = integrate_distribution(&d, &spec).unwrap()[0];
            let half_bin = spec.delta() / 2.0;
            assert!(y >= -spec.r + half_bin - 1e-12 && y <= spec.r - half_bin + 1e-12);
        }
    }

    fn merged_by_loops(g: &[f64], d: &[f64], n: usize, j: usize, b: usize) -> Vec<f64> {
        // direct double-loop evaluation of the weighted merge
        let mut out = vec![0.0; j * b];
        for ji in 0..j {
            let mut sum_g = 0.0;
            for ni in 0..n {
                sum_g += g[ni * j + ji];
            }
            for bi in 0..b {
                let mut acc = 0.0;
                for ni in 0..n {
                    acc += g[ni * j + ji] * d[ni * j * b + ji * b + bi];
                }
                out[ji * b + bi] = acc / sum_g;
            }
        }
        out
    }

    fn run_merge(g: &[f64], d: &[f64], n: usize, j: usize, b: usize) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let gid = tape.constant(Tensor::from_f64_slice(vec![1, n, j], g).unwrap());
        let did = tape.constant(Tensor::from_f64_slice(vec![1, n, j * b], d).unwrap());
        let m = tape.vote_merge(gid, did, b).unwrap();
        tape.value(m).to_f64_vec()
    }

    #[test]
    fn uniform_weights_average_votes() {
        let (n, j, b) = (2, 1, 3);
        let g = vec![0.4; n * j];
        let d = vec![1.0, 0.0, 0.5, 0.0, 1.0, 0.5];
        let m = run_merge(&g, &d, n, j, b);
        assert_eq!(m, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn delta_weights_select_single_point() {
        let (n, j, b) = (2, 2, 2);
        let g = vec![1.0, 1.0, 0.0, 0.0];
        let d = vec![0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4];
        let m = run_merge(&g, &d, n, j, b);
        assert_eq!(m, vec![0.9, 0.8, 0.7, 0.6]);
    }

    #[test]
    fn merge_matches_loop_oracle() {
        let (n, j, b) = (3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let g: Vec<f64> = (0..n * j).map(|_| rng.gen_range(0.01..1.0)).collect();
            let d: Vec<f64> = (0..n * j * b).map(|_| rng.gen_range(0.0..1.0)).collect();
            let m = run_merge(&g, &d, n, j, b);
            let oracle = merged_by_loops(&g, &d, n, j, b);
            for (a, o) in m.iter().zip(&oracle) {
                assert!(rel_err(*a, *o) < 1e-12);
            }
        }
    }

    #[test]
    fn regression_merge_matches_loop_oracle() {
        // Eq-style weighted average with B = 1
        let (n, j) = (5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: Vec<f64> = (0..n * j).map(|_| rng.gen_range(0.01..1.0)).collect();
        let y: Vec<f64> = (0..n * j).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = run_merge(&g, &y, n, j, 1);
        let oracle = merged_by_loops(&g, &y, n, j, 1);
        for (a, o) in m.iter().zip(&oracle) {
            assert!(rel_err(*a, *o) < 1e-12);
        }
        // convex combination: min vote <= merged <= max vote per dimension
        for ji in 0..j {
            let col: Vec<f64> = (0..n).map(|ni| y[ni * j + ji]).collect();
            let lo = col.iter().cloned().fold(f64::MAX, f64::min);
            let hi = col.iter().cloned().fold(f64::MIN, f64::max);
            assert!(m[ji] >= lo - 1e-12 && m[ji] <= hi + 1e-12);
        }
    }

    #[test]
    fn constant_votes_pass_through_any_weights() {
        let (n, j) = (4, 2);
        let g = vec![0.9, 0.01, 0.5, 0.3, 0.2, 0.8, 0.6, 0.7];
        let y = [1.5, -2.0].repeat(n);
        let m = run_merge(&g, &y, n, j, 1);
        assert!((m[0] - 1.5).abs() < 1e-12 && (m[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn near_zero_weights_fall_back_to_mean() {
        let (n, j, b) = (2, 1, 2);
        let g = vec![1e-12, 1e-12];
        let d = vec![1.0, 0.0, 0.0, 1.0];
        let m = run_merge(&g, &d, n, j, b);
        assert_eq!(m, vec![0.5, 0.5]);
    }

    #[test]
    fn heads_are_rowwise_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let heads = VotingHeads::init(&mut store, Variant::Detection, 8, 6, 4, &mut rng);
        let n = 5;
        let feats: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [4usize, 2, 0, 3, 1];
        let mut permuted = vec![0.0; feats.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&feats[src * 8..(src + 1) * 8]);
        }
        let run = |data: &[f64]| {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::from_f64_slice(vec![1, n, 8], data).unwrap());
            let out = heads.forward(&mut tape, &store, f).unwrap();
            (
                tape.value(out.importance).to_f64_vec(),
                tape.value(out.votes).to_f64_vec(),
            )
        };
        let (g0, v0) = run(&feats);
        let (g1, v1) = run(&permuted);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&g1[dst * 6..(dst + 1) * 6], &g0[src * 6..(src + 1) * 6]);
            assert_eq!(&v1[dst * 24..(dst + 1) * 24], &v0[src * 24..(src + 1) * 24]);
        }
    }

    #[test]
    fn zero_hidden_weights_give_constant_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let heads = VotingHeads::init(&mut store, Variant::Regression, 4, 3, 1, &mut rng);
        for &id in &heads.param_ids() {
            let p = store.get_mut(id);
            if p.name.starts_with("heads.importance") && p.name.contains("weight") {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::new();
        let f = tape.constant(
            Tensor::from_f64_slice(vec![1, 3, 4], &(0..12).map(|i| i as f64).collect::<Vec<_>>())
                .unwrap(),
        );
        let out = heads.forward(&mut tape, &store, f).unwrap();
        let g = tape.value(out.importance).to_f64_vec();
        // all rows equal sigmoid(bias) = sigmoid(0) = 0.5
        assert!(g.iter().all(|&v| v == 0.5));
    }


    #[test]
    fn head_gradients_match_finite_differences() {
        // 4 points, J=6, B=8 detection head against the fd oracle
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let heads = VotingHeads::init(&mut store, Variant::Detection, 5, 6, 8, &mut rng);
        // nudge biases off zero so no relu preactivation sits exactly on
        // the kink (finite differences straddle it otherwise)
        for (_, p) in store.iter_mut() {
            if p.name.ends_with(".bias") {
                for v in p.value.data_mut() {
                    *v += rng.gen_range(0.05..0.2);
                }
            }
        }
        let feats: Vec<f64> = (0..4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::from_f64_slice(vec![1, 4, 5], &feats).unwrap());
            let out = heads.forward(&mut tape, store, f).unwrap();
            let merged = heads.merge(&mut tape, &out).unwrap();
            let sq = tape.square(merged).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            tape.value(loss).scalar_value()
        };
        {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::from_f64_slice(vec![1, 4, 5], &feats).unwrap());
            let out = heads.forward(&mut tape, &store, f).unwrap();
            let merged = heads.merge(&mut tape, &out).unwrap();
            let sq = tape.square(merged).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            tape.backward_into(loss, &mut store).unwrap();
        }
        let report = crate::gradcheck::check_against_fd(&mut store, run, 1e-5, 1e-4);
        assert!(
            report.passed(),
            "max rel err {} at {}; {} failures: {:#?}",
            report.max_rel_err,
            report.worst_param,
            report.failures.len(),
            &report.failures[..report.failures.len().min(40)]
        );
    }
}
