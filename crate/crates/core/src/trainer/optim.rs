use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with constant learning rate and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.ids().map(|id| vec![T::zero(); store.peek(id).numel()]).collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores moments saved by a checkpoint.
    pub fn with_state(store: &ParamStore<T>, lr: f64, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        let fits = |s: &[Vec<T>]| {
            s.len() == store.len() && store.ids().zip(s).all(|(id, x)| x.len() == store.peek(id).numel())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Version("optimizer moments do not match the parameters".into()));
        }
        Ok(Self { lr, step, m, v })
    }

    /// One update from the gradients held in `store`; parameters without a
    /// gradient see a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(BETA1), T::c(BETA2));
        let c1 = T::c(1.0 - BETA1.powi(t));
        let c2 = T::c(1.0 - BETA2.powi(t));
        let (lr, eps) = (T::c(self.lr), T::c(ADAM_EPS));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let tensor = store.get_mut(id);
            let grad = tensor.grad.take();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.1);
        store.add_grad(id, &[3.0, -0.5]);
        adam.update(&mut store);
        let w = store.peek(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
        assert!(store.peek(id).grad.is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64([1], &[5.0]).unwrap());
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let w = store.peek(id).data()[0];
            store.add_grad(id, &[2.0 * (w - 2.0)]);
            adam.update(&mut store);
        }
        assert!((store.peek(id).data()[0] - 2.0).abs() < 1e-2);
    }
}
