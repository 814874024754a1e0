//! Named parameter storage and per-tape binding.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Trainable tensors addressed by hierarchical dotted names, kept in
/// registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        self.index.insert(name.to_string(), i);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.values[self.index_of(name)?])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub(crate) fn shared(&self, i: usize) -> Rc<Tensor<T>> {
        self.values[i].clone()
    }

    /// Mutable access; copies the tensor if a tape still holds it.
    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[i])
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self.index_of(name)?;
        if value.shape() != self.values[i].shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = Rc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            out.insert(n, v.cast()).expect("names are unique");
        }
        out
    }
}

/// Registers parameters with their initial values during model construction.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

impl<T: Scalar> Init<'_, T> {
    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.store.insert(name, value).map(|_| ())
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let v = rng::trunc_normal(shape, INIT_STD, &mut rng::stream(self.seed, name));
        self.tensor(name, v)
    }

    /// Weight `[cin, cout]` under `{prefix}.w`, plus a zero bias `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, cin: usize, cout: usize, bias: bool) -> Result<()> {
        self.trunc_normal(&format!("{prefix}.w"), &[cin, cout])?;
        if bias {
            self.tensor(&format!("{prefix}.b"), Tensor::zeros(&[cout]))?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.tensor(&format!("{prefix}.g"), Tensor::ones(&[c]))?;
        self.tensor(&format!("{prefix}.b"), Tensor::zeros(&[c]))
    }
}

/// A [`ParamStore`] attached to one tape. Each parameter becomes a node the
/// first time it is used; trainable binds create leaves, frozen binds constants.
pub struct Bound<'g, 'p, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'p ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'g, T>>>>,
    trainable: bool,
}

impl<'g, 'p, T: Scalar> Bound<'g, 'p, T> {
    pub fn new(graph: &'g Graph<T>, store: &'p ParamStore<T>, trainable: bool) -> Self {
        Bound {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        let i = self.store.index_of(name)?;
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[i] {
            return Ok(v);
        }
        let t = self.store.shared(i);
        let v = if self.trainable {
            self.graph.leaf_shared(t)
        } else {
            self.graph.constant_shared(t)
        };
        vars[i] = Some(v);
        Ok(v)
    }

    /// Uses `v` for parameter `name` instead of the stored tensor.
    pub fn set_var(&self, name: &str, v: Var<'g, T>) -> Result<()> {
        let i = self.store.index_of(name)?;
        if v.shape() != self.store.value(i).shape() {
            return Err(Error::shape(format!(
                "override for `{name}` has shape {:?}, expected {:?}",
                v.shape(),
                self.store.value(i).shape()
            )));
        }
        self.vars.borrow_mut()[i] = Some(v);
        Ok(())
    }

    /// `{prefix}.{name}`
    pub fn param(&self, prefix: &str, name: &str) -> Result<Var<'g, T>> {
        self.get(&format!("{prefix}.{name}"))
    }

    /// Gradient per store index; `None` for parameters this tape never used.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.as_ref().and_then(|v| grads.take(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        assert!(s.get("b").is_err());
    }

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        Init { store: &mut a, seed: 3 }.linear("x", 4, 4, true).unwrap();
        let mut ib = Init { store: &mut b, seed: 3 };
        ib.linear("y", 2, 2, false).unwrap();
        ib.linear("x", 4, 4, true).unwrap();
        assert_eq!(a.get("x.w").unwrap(), b.get("x.w").unwrap());
        assert!(a.get("x.w").unwrap().max_abs() <= 2.0 * INIT_STD);
    }

    #[test]
    fn bound_reuses_nodes_and_collects_grads() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        s.insert("unused", Tensor::zeros(&[1])).unwrap();
        let g = Graph::new();
        let b = Bound::new(&g, &s, true);
        let w = b.get("w").unwrap();
        assert_eq!(w.id(), b.get("w").unwrap().id());
        let y = w.mul(w).unwrap().sum().unwrap();
        let mut grads = g.backward(y).unwrap();
        let per = b.gradients(&mut grads);
        assert_eq!(per[0].as_ref().unwrap().data(), &[2.0, 4.0]);
        assert!(per[1].is_none());
    }
}
