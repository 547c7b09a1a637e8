use std::collections::HashMap;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::scalar::Scalar;

use super::{Activation, MdeqParams};

/// A graph together with lazily bound model parameters.
///
/// Each parameter is introduced into the graph the first time a layer asks
/// for it; [`Net::bound`] lists the resulting handles in binding order.
pub struct Net<'p, T: Scalar, G: Graph<T>> {
    pub graph: G,
    params: &'p MdeqParams<T>,
    bound: Vec<(String, G::Value)>,
    lookup: HashMap<String, usize>,
}

impl<'p, T: Scalar, G: Graph<T>> Net<'p, T, G> {
    pub fn new(graph: G, params: &'p MdeqParams<T>) -> Self {
        Self {
            graph,
            params,
            bound: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p MdeqParams<T> {
        self.params
    }

    pub fn bound(&self) -> &[(String, G::Value)] {
        &self.bound
    }

    pub fn into_parts(self) -> (G, Vec<(String, G::Value)>) {
        (self.graph, self.bound)
    }

    pub fn param(&mut self, name: &str) -> Result<G::Value> {
        if let Some(&i) = self.lookup.get(name) {
            return Ok(self.bound[i].1.clone());
        }
        let v = self.graph.constant(self.params.require(name)?.clone());
        self.lookup.insert(name.to_string(), self.bound.len());
        self.bound.push((name.to_string(), v.clone()));
        Ok(v)
    }

    /// Weight-normalized convolution `<name>`, with bias when `<name>.b` exists.
    pub fn conv(&mut self, x: &G::Value, name: &str, stride: usize, padding: usize) -> Result<G::Value> {
        let v = self.param(&format!("{name}.v"))?;
        let g = self.param(&format!("{name}.g"))?;
        let w = self.graph.weight_norm(&v, &g)?;
        let bias_name = format!("{name}.b");
        let b = if self.params.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.graph.conv2d(x, &w, b.as_ref(), stride, padding)
    }

    pub fn norm(&mut self, x: &G::Value, name: &str, groups: usize) -> Result<G::Value> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        self.graph.group_norm(x, groups, &gamma, &beta)
    }

    pub fn activate(&mut self, x: &G::Value, act: Activation) -> Result<G::Value> {
        match act {
            Activation::Relu => self.graph.relu(x),
            Activation::Softplus { beta } => self.graph.softplus(x, beta),
        }
    }

    pub fn dense(&mut self, x: &G::Value, name: &str) -> Result<G::Value> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.graph.dense(x, &w, Some(&b))
    }
}
