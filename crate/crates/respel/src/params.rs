//! Trainable parameter storage and the Adam update.

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Adam first/second moment accumulators, same shape as the value.
    pub moment1: Tensor<F>,
    pub moment2: Tensor<F>,
}

/// All trainable values of a model, addressed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    /// Adam step counter, shared across parameters.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// A non-finite gradient was seen; the whole step was skipped.
    SkippedNonFinite,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape.clone()),
            moment1: Tensor::zeros(shape.clone()),
            moment2: Tensor::zeros(shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of stored scalar values.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = F::zero();
            }
        }
    }

    /// One Adam update over every parameter with populated gradients.
    ///
    /// Standard bias-corrected first/second moment update. If any gradient
    /// entry is non-finite the step is skipped entirely (the caller gets
    /// [`AdamOutcome::SkippedNonFinite`] to surface a warning); gradients
    /// are zeroed in both cases.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> AdamOutcome {
        if self.params.iter().any(|p| !p.grad.all_finite()) {
            self.zero_grads();
            return AdamOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(beta1);
        let b2 = F::from_f64(beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - beta1.powi(t));
        let corr2 = F::from_f64(1.0 - beta2.powi(t));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(eps);
        for p in &mut self.params {
            let g = p.grad.data();
            let m = p.moment1.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = p.moment2.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m1, m2) = (p.moment1.data(), p.moment2.data());
            for ((value, &m), &v) in p.value.data_mut().iter_mut().zip(m1).zip(m2) {
                let m_hat = m / corr1;
                let v_hat = v / corr2;
                *value = *value - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.zero_grads();
        AdamOutcome::Applied
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}
