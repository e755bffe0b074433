//! Trainable parameters and the SGD-with-momentum optimizer.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Dims, Elem, Tensor};
use crate::error::{Error, Result};

struct ParamInner<E: Elem> {
    value: Tensor<E>,
    grad: Vec<E>,
    momentum: Vec<E>,
    grad_populated: bool,
    trainable: bool,
}

/// A trainable tensor with gradient and momentum buffers.
///
/// `Parameter` is a shared handle: clones refer to the same storage, which is
/// how weight sharing (siamese encoder, shared attention blocks) works. Use
/// [`Parameter::deep_clone`] for an independent copy.
#[derive(Clone)]
pub struct Parameter<E: Elem> {
    inner: Rc<RefCell<ParamInner<E>>>,
}

impl<E: Elem> Parameter<E> {
    pub fn new(value: Tensor<E>) -> Self {
        let len = value.dims().count();
        Parameter {
            inner: Rc::new(RefCell::new(ParamInner {
                value,
                grad: vec![E::zero(); len],
                momentum: vec![E::zero(); len],
                grad_populated: false,
                trainable: true,
            })),
        }
    }

    /// Stable identity of the underlying storage; equal for shared handles.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn dims(&self) -> Dims {
        self.inner.borrow().value.dims()
    }

    pub fn count(&self) -> usize {
        self.dims().count()
    }

    /// The current value (cheap: shares the buffer).
    pub fn value(&self) -> Tensor<E> {
        self.inner.borrow().value.clone()
    }

    pub fn set_value(&self, value: Tensor<E>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.value.dims(), value.dims(), "parameter shape is fixed");
        inner.value = value.detach();
    }

    /// Copy of the gradient buffer.
    pub fn grad(&self) -> Vec<E> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grad.iter_mut().for_each(|g| *g = E::zero());
        inner.grad_populated = false;
    }

    pub fn trainable(&self) -> bool {
        self.inner.borrow().trainable
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.inner.borrow_mut().trainable = trainable;
    }

    /// Independent copy of the value (fresh gradient/momentum state).
    pub fn deep_clone(&self) -> Self {
        let inner = self.inner.borrow();
        let value = Tensor::new(inner.value.dims(), inner.value.data().to_vec())
            .expect("dims match data");
        let p = Parameter::new(value);
        p.set_trainable(inner.trainable);
        p
    }

    /// Read one scalar; used by the finite-difference checker.
    pub fn get(&self, i: usize) -> E {
        self.inner.borrow().value.data()[i]
    }

    /// Overwrite one scalar; used by the finite-difference checker so the
    /// original value restores bitwise.
    pub fn set_index(&self, i: usize, v: E) {
        let mut inner = self.inner.borrow_mut();
        let dims = inner.value.dims();
        let mut data = inner.value.data().to_vec();
        data[i] = v;
        inner.value = Tensor::new(dims, data).expect("dims match data");
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[E]) {
        let mut inner = self.inner.borrow_mut();
        for (g, c) in inner.grad.iter_mut().zip(contribution) {
            *g = *g + *c;
        }
        inner.grad_populated = true;
    }

    pub(crate) fn mark_grad_populated(&self) {
        self.inner.borrow_mut().grad_populated = true;
    }

    fn grad_is_populated(&self) -> bool {
        self.inner.borrow().grad_populated
    }
}

impl<E: Elem> std::fmt::Debug for Parameter<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Parameter(dims={}, trainable={})", inner.value.dims(), inner.trainable)
    }
}

/// Hyperparameters for [`sgd_step`].
#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD update: `v <- momentum * v + (grad + weight_decay * value)`,
/// `value <- value - lr * v`. Non-trainable parameters are untouched.
pub fn sgd_step<E: Elem>(params: &[Parameter<E>], cfg: &SgdConfig) -> Result<()> {
    let lr = E::from_f(cfg.lr);
    let mu = E::from_f(cfg.momentum);
    let wd = E::from_f(cfg.weight_decay);
    for param in params {
        if !param.trainable() {
            continue;
        }
        if !param.grad_is_populated() {
            return Err(Error::MissingGradient);
        }
        let mut inner = param.inner.borrow_mut();
        let dims = inner.value.dims();
        let mut value = inner.value.data().to_vec();
        for i in 0..value.len() {
            let g = inner.grad[i] + wd * value[i];
            let v = mu * inner.momentum[i] + g;
            inner.momentum[i] = v;
            value[i] = value[i] - lr * v;
        }
        inner.value = Tensor::new(dims, value).expect("dims match data");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Parameter<f64> {
        Parameter::new(Tensor::new(Dims::new(1, 1, 1, values.len()), values.to_vec()).unwrap())
    }

    #[test]
    fn plain_step_decreases_by_lr_times_grad() {
        let p = param(&[1.0, 2.0]);
        p.accumulate_grad(&[0.5, -1.0]);
        sgd_step(&[p.clone()], &SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        let v = p.value();
        assert_eq!(v.data(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn frozen_parameter_is_bitwise_unchanged() {
        let p = param(&[0.25, -0.75]);
        p.set_trainable(false);
        p.accumulate_grad(&[10.0, 10.0]);
        sgd_step(&[p.clone()], &SgdConfig { lr: 1.0, momentum: 0.9, weight_decay: 1e-4 }).unwrap();
        assert_eq!(p.value().data(), &[0.25, -0.75]);
    }

    #[test]
    fn two_momentum_steps_match_hand_expansion() {
        // Constant gradient g, momentum 0.9, no weight decay:
        //   step 1: v1 = g,          x1 = x0 - lr * g
        //   step 2: v2 = 0.9 g + g,  x2 = x1 - lr * 1.9 g
        let g = 2.0;
        let lr = 0.1;
        let p = param(&[1.0]);
        let cfg = SgdConfig { lr, momentum: 0.9, weight_decay: 0.0 };

        p.zero_grad();
        p.accumulate_grad(&[g]);
        sgd_step(&[p.clone()], &cfg).unwrap();
        p.zero_grad();
        p.accumulate_grad(&[g]);
        sgd_step(&[p.clone()], &cfg).unwrap();

        let expected = 1.0 - lr * g - lr * 1.9 * g;
        assert!((p.value().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let p = param(&[1.0]);
        let err = sgd_step(&[p], &SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 });
        assert!(matches!(err, Err(Error::MissingGradient)));
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let p = param(&[4.0]);
        p.accumulate_grad(&[0.0]);
        sgd_step(&[p.clone()], &SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.1 }).unwrap();
        assert!((p.value().data()[0] - (4.0 - 0.5 * 0.4)).abs() < 1e-12);
    }
}
