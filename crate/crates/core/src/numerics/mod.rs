//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Just enough machinery for recurrent encoders, attention and
//! cross-entropy training: a contiguous [`Tensor`], a tape-style
//! [`Graph`](graph::Graph) of forward ops with backward rules, SGD with
//! global-norm clipping, and a binary checkpoint format.

pub mod checkpoint;
pub mod graph;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use graph::{Graph, NodeId};

/// Dense tensor: a shape plus a contiguous value buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Build from an explicit shape and buffer; the value count must equal
    /// the product of dimensions.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension {
                op: "tensor",
                detail: format!(
                    "shape {:?} wants {} values, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform initialization in `[-range, range]`, the convention for all
    /// learnable parameters here.
    pub fn uniform(shape: Vec<usize>, range: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64c(rng.random_range(-range..=range)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

/// Gradients keyed by parameter name; ordered so that reductions over the
/// map are deterministic.
#[derive(Clone, Debug, Default)]
pub struct GradMap<F>(BTreeMap<String, Tensor<F>>);

impl<F: Scalar> GradMap<F> {
    pub fn new() -> Self {
        GradMap(BTreeMap::new())
    }

    /// Add `grad` into the accumulated gradient for `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor<F>) -> Result<()> {
        match self.0.get_mut(name) {
            Some(acc) => {
                if acc.shape() != grad.shape() {
                    return Err(Error::Dimension {
                        op: "grad-accumulate",
                        detail: format!(
                            "{name}: {:?} vs {:?}",
                            acc.shape(),
                            grad.shape()
                        ),
                    });
                }
                for (a, g) in acc.data.iter_mut().zip(grad.data.iter()) {
                    *a += *g;
                }
            }
            None => {
                self.0.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.0.iter()
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.0.values_mut() {
            for v in t.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// L2 norm over every value in every gradient.
    pub fn global_norm(&self) -> F {
        self.0
            .values()
            .flat_map(|t| t.data.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Rescale all gradients so the global norm is at most `clip`.
    pub fn clip_global_norm(&mut self, clip: F) {
        if clip <= F::zero() {
            return;
        }
        let norm = self.global_norm();
        if norm > clip {
            self.scale(clip / norm);
        }
    }
}

/// One SGD update for a single parameter: `p <- p - lr * g`.
pub fn sgd_update<F: Scalar>(param: &mut Tensor<F>, grad: &Tensor<F>, lr: F) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Dimension {
            op: "sgd_update",
            detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        });
    }
    for (p, g) in param.data.iter_mut().zip(grad.data.iter()) {
        *p -= lr * *g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_count_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn sgd_single_step() {
        let mut p = Tensor::from_vec(vec![1.0f64]);
        let g = Tensor::from_vec(vec![0.5]);
        sgd_update(&mut p, &g, 1.0).unwrap();
        assert_eq!(p.data(), &[0.5]);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut p = Tensor::from_vec(vec![3.0f64, -2.0]);
        let g = Tensor::zeros(vec![2]);
        sgd_update(&mut p, &g, 1.0).unwrap();
        assert_eq!(p.data(), &[3.0, -2.0]);
    }

    #[test]
    fn sgd_shape_mismatch_is_error() {
        let mut p = Tensor::from_vec(vec![1.0f64, 2.0]);
        let g = Tensor::from_vec(vec![1.0]);
        assert!(sgd_update(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn clip_scales_to_target_norm() {
        // two grads with global norm 10 and clip 5 are scaled by 0.5
        let mut grads = GradMap::new();
        grads
            .accumulate("a", &Tensor::from_vec(vec![6.0f64]))
            .unwrap();
        grads
            .accumulate("b", &Tensor::from_vec(vec![8.0f64]))
            .unwrap();
        assert!((grads.global_norm() - 10.0).abs() < 1e-12);
        grads.clip_global_norm(5.0);
        assert!((grads.get("a").unwrap().data()[0] - 3.0).abs() < 1e-12);
        assert!((grads.get("b").unwrap().data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_grads_alone() {
        let mut grads = GradMap::new();
        grads
            .accumulate("a", &Tensor::from_vec(vec![1.0f64]))
            .unwrap();
        grads.clip_global_norm(5.0);
        assert_eq!(grads.get("a").unwrap().data()[0], 1.0);
    }

    #[test]
    fn grad_accumulate_adds() {
        let mut grads = GradMap::new();
        grads
            .accumulate("w", &Tensor::from_vec(vec![1.0f64, 2.0]))
            .unwrap();
        grads
            .accumulate("w", &Tensor::from_vec(vec![0.5, -1.0]))
            .unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.5, 1.0]);
    }
}
