//! Named parameter storage.
//!
//! A [`ParamStore`] owns every weight of a model in insertion order. Frozen
//! parameters still collect gradients (similarity needs gradients with
//! respect to the frozen backbone) but the optimizer never moves them.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    pub grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen,
            grad: None,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `g` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => p.grad = Some(g.to_vec()),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over the names and bit patterns of the parameters matched by
    /// `filter`.
    pub fn hash_values(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(&p.name)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Concatenates the gradients of the parameters selected by `filter`, in
/// store order, each row-major.
pub fn flatten_gradients(store: &ParamStore, filter: impl Fn(&str) -> bool) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for p in store.params.iter().filter(|p| filter(&p.name)) {
        let g = p.grad.as_ref().ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
        out.extend_from_slice(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(order: &[(&str, usize)]) -> ParamStore {
        let mut s = ParamStore::new();
        for &(name, n) in order {
            let base = if name == "a" { 0.0 } else { 100.0 };
            let id = s
                .insert(name, Tensor::new(vec![n], vec![0.0; n]).unwrap(), false)
                .unwrap();
            let g: Vec<f64> = (0..n).map(|i| base + i as f64).collect();
            s.accumulate_grad(id, &g);
        }
        s
    }

    #[test]
    fn flatten_length_is_sum_of_sizes() {
        let s = store_with(&[("a", 4), ("b", 6)]);
        assert_eq!(flatten_gradients(&s, |_| true).unwrap().len(), 10);
    }

    #[test]
    fn flatten_is_deterministic() {
        let s = store_with(&[("a", 4), ("b", 6)]);
        let x = flatten_gradients(&s, |_| true).unwrap();
        let y = flatten_gradients(&s, |_| true).unwrap();
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn construction_order_permutes_but_keeps_values() {
        let mut x = flatten_gradients(&store_with(&[("a", 4), ("b", 6)]), |_| true).unwrap();
        let mut y = flatten_gradients(&store_with(&[("b", 6), ("a", 4)]), |_| true).unwrap();
        assert_ne!(x, y);
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        assert_eq!(x, y);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        let err = flatten_gradients(&s, |_| true).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2]), true).is_err());
    }
}
