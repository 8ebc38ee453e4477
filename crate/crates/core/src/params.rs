//! Flat views over parameter containers.
//!
//! Gradients and optimizer velocities have the same structure as the
//! parameters they belong to, so one trait covers all three.

use crate::numerics::Real;

pub trait Params<T: Real> {
    /// Every parameter tensor in a fixed, structure-defined order.
    fn tensors(&self) -> Vec<&[T]>;

    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Euclidean norm over all tensors, accumulated in f64 in tensor order.
    fn l2_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for t in self.tensors() {
            for &v in t {
                let v = v.as_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality of all tensors.
    fn bit_eq(&self, other: &Self) -> bool
    where
        Self: Sized,
    {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.len() == y.len()
                    && x
                        .iter()
                        .zip(y.iter())
                        .all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
            })
    }
}

impl<T: Real, P: Params<T>> Params<T> for Vec<P> {
    fn tensors(&self) -> Vec<&[T]> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}
