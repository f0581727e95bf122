use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered, named set of trainable tensors (encoder followed by decoder).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

/// Tape handles for every entry of a [`ModelParams`], in order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        ModelParams { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_layout(&self, other: &ModelParams<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total_count());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Copy of `self` with values taken from `flat` (layout from `self`).
    pub fn unflatten(&self, flat: &[T]) -> Result<ModelParams<T>> {
        if flat.len() != self.total_count() {
            return Err(Error::shape("unflatten", format!("expected {} values, got {}", self.total_count(), flat.len())));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let n = t.len();
                let tensor = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())
                    .expect("layout taken from self")
                    .with_requires_grad(t.requires_grad());
                offset += n;
                (name.clone(), tensor)
            })
            .collect();
        Ok(ModelParams { entries })
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        *self = self.unflatten(flat)?;
        Ok(())
    }

    pub fn flat_grads(&self) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.total_count());
        for (name, t) in &self.entries {
            let g = t.grad().ok_or_else(|| Error::Usage(format!("no gradient for {name}")))?;
            out.extend_from_slice(g);
        }
        Ok(out)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.entries.iter_mut().for_each(|(_, t)| t.set_requires_grad(on));
    }

    /// Records every entry on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients computed on a tape into each entry's grad buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            let g = grads.get_or_zeros(v, t.len());
            t.accumulate_grad(&g);
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v.f64() * v.f64())
            .sum()
    }

    /// Plain gradient step `p <- p - lr * grad(p)`, then clears grads.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
        }
        if let Some((name, _)) = self.entries.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Usage(format!("sgd step without gradient for {name}")));
        }
        let rate = T::lit(lr);
        for (_, t) in &mut self.entries {
            let grad = t.grad().expect("checked above").to_vec();
            for (p, g) in t.data_mut().iter_mut().zip(grad) {
                *p = *p - rate * g;
            }
            t.zero_grad();
        }
        Ok(())
    }

    /// `sum_i w_i * params_i`, accumulated in `f64` in the given order.
    pub fn weighted_sum(items: &[(&ModelParams<T>, f64)]) -> Result<ModelParams<T>> {
        let flat = Self::weighted_sum_f64(items)?;
        let values: Vec<T> = flat.into_iter().map(T::lit).collect();
        items[0].0.unflatten(&values)
    }

    pub(crate) fn weighted_sum_f64(items: &[(&ModelParams<T>, f64)]) -> Result<Vec<f64>> {
        let (first, _) = items.first().ok_or_else(|| Error::Usage("weighted sum of no models".into()))?;
        let mut acc = vec![0.0f64; first.total_count()];
        for (p, w) in items {
            if !first.same_layout(p) {
                return Err(Error::shape("weighted_sum", "parameter layouts differ"));
            }
            let mut i = 0;
            for (_, t) in &p.entries {
                for v in t.data() {
                    acc[i] += w * v.f64();
                    i += 1;
                }
            }
        }
        Ok(acc)
    }

    /// Euclidean distance between two parameter sets of equal layout.
    pub fn distance(&self, other: &ModelParams<T>) -> f64 {
        self.sq_distance(other).sqrt()
    }

    pub fn sq_distance(&self, other: &ModelParams<T>) -> f64 {
        assert!(self.same_layout(other), "parameter layouts differ");
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()))
            .map(|(x, y)| {
                let d = x.f64() - y.f64();
                d * d
            })
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ModelParams<f64> {
        ModelParams::new(vec![("p".into(), Tensor::from_slice(&[v]).with_requires_grad(true))])
    }

    #[test]
    fn sgd_step_examples() {
        let mut p = single(1.0);
        p.get_mut("p").unwrap().accumulate_grad(&[2.0]);
        p.sgd_step(0.5).unwrap();
        assert_eq!(p.flatten(), vec![0.0]);
        assert!(p.get("p").unwrap().grad().is_none());

        let mut q = single(1.5);
        q.get_mut("p").unwrap().accumulate_grad(&[0.0]);
        q.sgd_step(0.1).unwrap();
        assert_eq!(q.flatten(), vec![1.5]);
    }

    #[test]
    fn sgd_on_quadratic_follows_hand_recursion() {
        let mut p = single(0.0);
        let mut hand = 0.0f64;
        for _ in 0..2 {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, true);
            let three = tape.constant(&Tensor::from_slice(&[3.0]));
            let d = tape.sub(bound.var(0), three).unwrap();
            let l = tape.mul(d, d).unwrap();
            let g = tape.backward(l).unwrap();
            p.accumulate_grads(&bound, &g);
            p.sgd_step(0.1).unwrap();
            hand -= 0.1 * 2.0 * (hand - 3.0);
        }
        assert!((p.flatten()[0] - hand).abs() < 1e-15);
        assert!((hand - 1.08).abs() < 1e-12);
    }

    #[test]
    fn sgd_without_grads_is_usage_error() {
        let mut p = single(1.0);
        assert!(matches!(p.sgd_step(0.1), Err(Error::Usage(_))));
        p.get_mut("p").unwrap().accumulate_grad(&[1.0]);
        assert!(matches!(p.sgd_step(0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn weighted_sum_is_elementwise() {
        let a = single(0.0);
        let b = single(4.0);
        let s = ModelParams::weighted_sum(&[(&a, 0.25), (&b, 0.75)]).unwrap();
        assert_eq!(s.flatten(), vec![3.0]);
    }
}
