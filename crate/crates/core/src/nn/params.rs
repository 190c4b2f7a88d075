use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::array::Array;
use crate::scalar::Scalar;

/// Named parameter tensors, iterated in sorted name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<S> {
    tensors: BTreeMap<String, Array<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: &str, value: Array<S>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<S>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Array::all_finite)
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|a| a.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: S) {
        for a in self.tensors.values_mut() {
            a.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += other`, requiring identical names and shapes.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_aligned(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|((ka, va), (kb, vb))| ka != kb || va.shape() != vb.shape())
        {
            return Err(Error::shape(
                "parameter sets do not have matching names and shapes",
            ));
        }
        Ok(())
    }

    /// Scalar at flat position `index` of tensor `name`.
    pub fn scalar_at(&self, name: &str, index: usize) -> Option<S> {
        self.tensors
            .get(name)
            .and_then(|a| a.data().get(index).copied())
    }

    pub fn set_scalar(&mut self, name: &str, index: usize, value: S) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .and_then(|a| a.data_mut().get_mut(index))
            .ok_or_else(|| Error::arg(format!("no scalar {name}[{index}]")))?;
        *slot = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(a: &[f64], b: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("b", Array::new(vec![b.len()], b.to_vec()).unwrap());
        p.insert("a", Array::new(vec![a.len()], a.to_vec()).unwrap());
        p
    }

    #[test]
    fn sorted_names_and_counts() {
        let p = set(&[1.0, 2.0], &[3.0]);
        assert_eq!(p.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(p.num_scalars(), 3);
        assert_eq!(p.global_norm(), 14f64.sqrt());
    }

    #[test]
    fn arithmetic_requires_alignment() {
        let mut p = set(&[1.0, 2.0], &[3.0]);
        p.add_assign(&set(&[1.0, 1.0], &[1.0])).unwrap();
        p.scale(0.5);
        assert_eq!(p.get("a").unwrap().data(), &[1.0, 1.5]);
        assert!(p.add_assign(&set(&[1.0], &[1.0])).is_err());
        assert_eq!(p.zeros_like().global_norm(), 0.0);
    }

    #[test]
    fn scalar_access() {
        let mut p = set(&[1.0, 2.0], &[3.0]);
        p.set_scalar("a", 1, 7.0).unwrap();
        assert_eq!(p.scalar_at("a", 1), Some(7.0));
        assert!(p.set_scalar("a", 2, 0.0).is_err());
        assert!(p.set_scalar("c", 0, 0.0).is_err());
        assert_eq!(p.scalar_at("c", 0), None);
    }
}
