use super::params::ParamStore;
use crate::scalar::Scalar;

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: AdamState { m: zeros(), v: zeros(), step: 0 } }
    }

    /// One update from the gradients stored on `store`. Entries whose `keep`
    /// flag is false are held at exactly zero, as are their moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, keep: Option<&[Option<Vec<bool>>]>) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (i, p) in store.iter_mut().enumerate() {
            let Some(grad) = p.grad.as_ref() else { continue };
            let mask = keep.and_then(|k| k.get(i)).and_then(|m| m.as_deref());
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                if mask.is_some_and(|mk| !mk[j]) {
                    *w = T::zero();
                    m[j] = T::zero();
                    v[j] = T::zero();
                    continue;
                }
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Clears moment buffers at masked positions.
    pub fn zero_moments(&mut self, keep: &[Option<Vec<bool>>]) {
        for (i, mask) in keep.iter().enumerate() {
            let Some(mask) = mask else { continue };
            for (j, &k) in mask.iter().enumerate() {
                if !k {
                    self.state.m[i][j] = T::zero();
                    self.state.v[i][j] = T::zero();
                }
            }
        }
    }
}
