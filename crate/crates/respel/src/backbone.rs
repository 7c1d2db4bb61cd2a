//! Residual permutation-equivariant feature extractor.
//!
//! The basic element computes, per point, an affine mix of the point's
//! own feature and the per-column maximum over the whole set:
//!
//! ```text
//! x' = sigma(beta + (x . diag(lambda) + 1 . x_max^T . diag(gamma)) . W)
//! ```
//!
//! Permuting input rows permutes outputs identically because the column
//! maximum is order-free. Layers are stacked into residual blocks of 9,
//! with an additive shortcut across each group of 3 consecutive layers
//! and batch normalization between the affine part and the activation.

use rand::Rng;

use crate::error::RespelError;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, ValId};
use crate::tensor::{Real, Tensor};

pub const LAYERS_PER_BLOCK: usize = 9;
pub const LAYERS_PER_GROUP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Channel count per residual block; the initial lifting layer maps
    /// the 3 input coordinates to the first width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![128, 256, 512],
            activation: Activation::Sigmoid,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

/// Trainable parameter count of one PEL: K_out + (K_out + 2) * K_in.
pub fn pel_param_count(k_in: usize, k_out: usize) -> usize {
    k_out + (k_out + 2) * k_in
}

#[derive(Debug, Clone)]
pub struct PelLayerParams {
    pub lambda: ParamId,
    pub gamma: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub k_in: usize,
    pub k_out: usize,
}

impl PelLayerParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        k_in: usize,
        k_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Xavier-uniform weight; self-feature weighting starts at 1 and the
        // global-maximum weighting at 0.5 so both paths carry signal from
        // the first step.
        let bound = (6.0 / (k_in + k_out) as f64).sqrt();
        let w: Vec<f64> = (0..k_in * k_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let lambda = store.add(
            format!("{name}.lambda"),
            Tensor::full(vec![k_in], F::one()),
        );
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::full(vec![k_in], F::from_f64(0.5)),
        );
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_f64_slice(vec![k_in, k_out], &w).expect("shape"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![k_out]));
        Self {
            lambda,
            gamma,
            weight,
            bias,
            k_in,
            k_out,
        }
    }

    pub fn stored_len<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.lambda).value.numel()
            + store.get(self.gamma).value.numel()
            + store.get(self.weight).value.numel()
            + store.get(self.bias).value.numel()
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.lambda, self.gamma, self.weight, self.bias]
    }

    /// Pre-activation PEL: beta + (x.diag(lambda) + 1.x_max^T.diag(gamma)).W
    pub fn affine<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
    ) -> Result<ValId, RespelError> {
        if tape.value(x).cols() != self.k_in {
            return Err(RespelError::Numeric(format!(
                "PEL expects {} input channels, got {:?}",
                self.k_in,
                tape.value(x).shape()
            )));
        }
        let lambda = tape.param(store, self.lambda);
        let gamma = tape.param(store, self.gamma);
        let weight = tape.param(store, self.weight);
        let bias = tape.param(store, self.bias);
        let own = tape.col_scale(x, lambda)?;
        let xmax = tape.col_max(x)?;
        let global = tape.col_scale(xmax, gamma)?;
        let mixed = tape.add_bcast_rows(own, global)?;
        let projected = tape.matmul(mixed, weight)?;
        Ok(tape.add_row(projected, bias)?)
    }

    /// Standalone PEL as defined: sigmoid of the affine part.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
    ) -> Result<ValId, RespelError> {
        let a = self.affine(tape, store, x)?;
        Ok(tape.sigmoid(a)?)
    }
}

/// How batch statistics are obtained during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Use batch statistics; optionally fold them into the running averages.
    Batch { update_running: bool },
    /// Use stored running averages (inference).
    Running,
}

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        momentum: f64,
        eps: f64,
    ) -> Self {
        let scale = store.add(format!("{name}.bn_scale"), Tensor::full(vec![channels], F::one()));
        let shift = store.add(format!("{name}.bn_shift"), Tensor::zeros(vec![channels]));
        Self {
            scale,
            shift,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.scale, self.shift]
    }

    pub fn forward<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
        mode: BnMode,
    ) -> Result<ValId, RespelError> {
        match mode {
            BnMode::Batch { update_running } => {
                let scale = tape.param(store, self.scale);
                let shift = tape.param(store, self.shift);
                let (y, mean, var) = tape.batch_norm(x, scale, shift, self.eps)?;
                if update_running {
                    let m = self.momentum;
                    for (r, b) in self.running_mean.iter_mut().zip(&mean) {
                        *r = m * *r + (1.0 - m) * b.as_f64();
                    }
                    for (r, b) in self.running_var.iter_mut().zip(&var) {
                        *r = m * *r + (1.0 - m) * b.as_f64();
                    }
                }
                Ok(y)
            }
            BnMode::Running => {
                let scale: Vec<F> = store.get(self.scale).value.data().to_vec();
                let shift: Vec<F> = store.get(self.shift).value.data().to_vec();
                let rm: Vec<F> = self.running_mean.iter().map(|&v| F::from_f64(v)).collect();
                let rv: Vec<F> = self.running_var.iter().map(|&v| F::from_f64(v)).collect();
                Ok(tape.batch_norm_frozen(x, &scale, &shift, &rm, &rv, self.eps)?)
            }
        }
    }
}

/// PEL affine -> batch norm -> activation.
#[derive(Debug, Clone)]
pub struct PelBnLayer {
    pub pel: PelLayerParams,
    pub bn: BatchNormParams,
}

impl PelBnLayer {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        k_in: usize,
        k_out: usize,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            pel: PelLayerParams::init(store, name, k_in, k_out, rng),
            bn: BatchNormParams::init(store, name, k_out, cfg.bn_momentum, cfg.bn_eps),
        }
    }

    fn forward<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
        mode: BnMode,
        activation: Activation,
    ) -> Result<ValId, RespelError> {
        let a = self.pel.affine(tape, store, x)?;
        let n = self.bn.forward(tape, store, a, mode)?;
        Ok(match activation {
            Activation::Sigmoid => tape.sigmoid(n)?,
            Activation::Relu => tape.relu(n)?,
        })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.pel.param_ids().to_vec();
        ids.extend(self.bn.param_ids());
        ids
    }
}

/// Three PEL+BN layers with an additive shortcut from the group input to
/// the group output; a learned linear projection bridges width changes.
#[derive(Debug, Clone)]
pub struct ShortcutGroup {
    pub layers: Vec<PelBnLayer>,
    pub projection: Option<ParamId>,
}

impl ShortcutGroup {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        k_in: usize,
        width: usize,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(LAYERS_PER_GROUP);
        let mut cur = k_in;
        for l in 0..LAYERS_PER_GROUP {
            layers.push(PelBnLayer::init(
                store,
                &format!("{name}.pel{l}"),
                cur,
                width,
                cfg,
                rng,
            ));
            cur = width;
        }
        let projection = (k_in != width).then(|| {
            let bound = (6.0 / (k_in + width) as f64).sqrt();
            let w: Vec<f64> = (0..k_in * width).map(|_| rng.gen_range(-bound..bound)).collect();
            store.add(
                format!("{name}.proj"),
                Tensor::from_f64_slice(vec![k_in, width], &w).expect("shape"),
            )
        });
        Self { layers, projection }
    }

    fn forward<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
        mode: BnMode,
        activation: Activation,
    ) -> Result<ValId, RespelError> {
        let mut h = x;
        for layer in &mut self.layers {
            h = layer.forward(tape, store, h, mode, activation)?;
        }
        let skip = match self.projection {
            Some(p) => {
                let w = tape.param(store, p);
                tape.matmul(x, w)?
            }
            None => x,
        };
        Ok(tape.add(h, skip)?)
    }

    fn param_ids<F: Real>(&self, _store: &ParamStore<F>) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(|l| l.param_ids()).collect();
        ids.extend(self.projection);
        ids
    }
}

/// 9 PEL+BN layers as three shortcut groups.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub groups: Vec<ShortcutGroup>,
}

impl ResidualBlock {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        k_in: usize,
        width: usize,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let n_groups = LAYERS_PER_BLOCK / LAYERS_PER_GROUP;
        let mut groups = Vec::with_capacity(n_groups);
        let mut cur = k_in;
        for g in 0..n_groups {
            groups.push(ShortcutGroup::init(
                store,
                &format!("{name}.group{g}"),
                cur,
                width,
                cfg,
                rng,
            ));
            cur = width;
        }
        Self { groups }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub lift: PelBnLayer,
    pub blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        config: BackboneConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let lift = PelBnLayer::init(store, "backbone.lift", 3, config.widths[0], &config, rng);
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut cur = config.widths[0];
        for (b, &w) in config.widths.iter().enumerate() {
            blocks.push(ResidualBlock::init(
                store,
                &format!("backbone.block{b}"),
                cur,
                w,
                &config,
                rng,
            ));
            cur = w;
        }
        Self {
            config,
            lift,
            blocks,
        }
    }

    /// Output feature width.
    pub fn feature_width(&self) -> usize {
        *self.config.widths.last().expect("non-empty widths")
    }

    /// cloud: [S, N, 3] (or [N, 3]) -> features [S, N, K_feat].
    pub fn forward<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ValId,
        mode: BnMode,
    ) -> Result<ValId, RespelError> {
        let act = self.config.activation;
        let mut h = self.lift.forward(tape, store, x, mode, act)?;
        for block in &mut self.blocks {
            for group in &mut block.groups {
                h = group.forward(tape, store, h, mode, act)?;
            }
        }
        Ok(h)
    }

    /// All normalization layers in a fixed order (lift, then blocks /
    /// groups / layers); checkpointing relies on this order.
    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormParams> {
        let mut out = vec![&mut self.lift.bn];
        for b in &mut self.blocks {
            for g in &mut b.groups {
                for l in &mut g.layers {
                    out.push(&mut l.bn);
                }
            }
        }
        out
    }

    pub fn bn_layers(&self) -> Vec<&BatchNormParams> {
        let mut out = vec![&self.lift.bn];
        for b in &self.blocks {
            for g in &b.groups {
                for l in &g.layers {
                    out.push(&l.bn);
                }
            }
        }
        out
    }

    pub fn param_ids<F: Real>(&self, store: &ParamStore<F>) -> Vec<ParamId> {
        let mut ids = self.lift.param_ids();
        for b in &self.blocks {
            for g in &b.groups {
                ids.extend(g.param_ids(store));
            }
        }
        ids
    }

    /// Itemized parameter count from the layer formula (independent from
    /// the stored array lengths, which the audit test compares against).
    pub fn param_count(config: &BackboneConfig) -> ParamCountBreakdown {
        let mut out = ParamCountBreakdown::default();
        let mut add_layer = |k_in: usize, k_out: usize| {
            out.pel += pel_param_count(k_in, k_out);
            out.batch_norm += 2 * k_out;
        };
        add_layer(3, config.widths[0]);
        let mut cur = config.widths[0];
        for &w in &config.widths {
            for l in 0..LAYERS_PER_BLOCK {
                let k_in = if l == 0 { cur } else { w };
                add_layer(k_in, w);
                if l % LAYERS_PER_GROUP == 0 && k_in != w {
                    out.projection += k_in * w;
                }
            }
            cur = w;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParamCountBreakdown {
    pub pel: usize,
    pub batch_norm: usize,
    pub projection: usize,
}

impl ParamCountBreakdown {
    pub fn total(&self) -> usize {
        self.pel + self.batch_norm + self.projection
    }
}
