//! Task-grouped low-rank adapter layer.
//!
//! One frozen linear map `W[d×k]` (plus frozen bias) shared by every task
//! group, and one trainable low-rank pair `(A_π[r_π×k], B_π[d×r_π])` per
//! group. The layer takes one input stream per group and returns one output
//! stream per group:
//!
//! ```text
//! y_π = W x_π + b + (α_π / r_π) · B_π A_π x_π
//! ```
//!
//! With a single group this is an ordinary LoRA linear layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{normal_vec, Rng};
use crate::tensor::Tensor;

/// Default adapter scaling numerator.
pub const DEFAULT_ALPHA: f64 = 4.0;
/// Default adapter dropout during training.
pub const DEFAULT_ADAPTER_DROPOUT: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct AdapterModule {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterModule {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone)]
pub struct TgLoraLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub out_dim: usize,
    pub in_dim: usize,
    pub modules: Vec<AdapterModule>,
}

/// Per-forward options shared by every layer of a network.
pub struct ForwardCtx<'a> {
    /// Adapter-branch dropout rate and its random stream; `None` disables it.
    pub dropout: Option<(f64, &'a mut Rng)>,
    /// Bind frozen weights as differentiable leaves so they collect
    /// gradients. Training leaves this off; similarity turns it on.
    pub track_frozen: bool,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: None,
            track_frozen: false,
        }
    }

    pub fn with_frozen_grads() -> Self {
        ForwardCtx {
            dropout: None,
            track_frozen: true,
        }
    }

    pub(crate) fn bind(&self, g: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        if store.get(id).frozen && !self.track_frozen {
            g.constant(store.value(id).clone())
        } else {
            g.param(store, id)
        }
    }
}

impl TgLoraLayer {
    /// Registers a layer under `name` in `store`. `A_π` entries are drawn
    /// from N(0, 1/r_π) using `rng_for(π)` and `B_π` starts at zero, so a
    /// fresh layer computes exactly the frozen map.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Option<Tensor>,
        ranks: &[usize],
        alphas: &[f64],
        mut rng_for: impl FnMut(usize) -> Rng,
    ) -> Result<Self> {
        let (d, k) = weight.dims2().ok_or_else(|| {
            Error::Config(format!("{name}: base weight must be a matrix, got {:?}", weight.shape()))
        })?;
        if ranks.len() != alphas.len() {
            return Err(Error::Config(format!(
                "{name}: {} ranks but {} alphas",
                ranks.len(),
                alphas.len()
            )));
        }
        if ranks.is_empty() {
            return Err(Error::Config(format!("{name}: no task groups")));
        }
        for (&r, &alpha) in ranks.iter().zip(alphas) {
            if r == 0 || r > d.min(k) {
                return Err(Error::Config(format!(
                    "{name}: rank {r} outside 1..={} for a {d}×{k} layer",
                    d.min(k)
                )));
            }
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::Config(format!("{name}: alpha {alpha} must be positive")));
            }
        }
        if let Some(b) = &bias {
            if b.shape() != [d] {
                return Err(Error::Config(format!("{name}: bias shape {:?} != [{d}]", b.shape())));
            }
        }
        let weight_id = store.insert(format!("{name}.weight"), weight, true)?;
        let bias_id = bias
            .map(|b| store.insert(format!("{name}.bias"), b, true))
            .transpose()?;
        let mut modules = Vec::with_capacity(ranks.len());
        for (gi, (&r, &alpha)) in ranks.iter().zip(alphas).enumerate() {
            let a = Tensor::new(
                vec![r, k],
                normal_vec(&mut rng_for(gi), r * k, (1.0 / r as f64).sqrt()),
            )?;
            let a = store.insert(format!("{name}.g{gi}.lora_a"), a, false)?;
            let b = store.insert(format!("{name}.g{gi}.lora_b"), Tensor::zeros(&[d, r]), false)?;
            modules.push(AdapterModule { a, b, rank: r, alpha });
        }
        Ok(Self {
            name: name.to_string(),
            weight: weight_id,
            bias: bias_id,
            out_dim: d,
            in_dim: k,
            modules,
        })
    }

    pub fn group_count(&self) -> usize {
        self.modules.len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.rank).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.alpha).collect()
    }

    /// `Σ r_π (d + k)`
    pub fn trainable_count(&self) -> usize {
        self.modules
            .iter()
            .map(|m| m.rank * (self.out_dim + self.in_dim))
            .sum()
    }

    /// Applies the layer to one `[n×k]` stream per group.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[NodeId],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<NodeId>> {
        if inputs.len() != self.modules.len() {
            return Err(Error::Routing(format!(
                "{}: {} input streams for {} task groups",
                self.name,
                inputs.len(),
                self.modules.len()
            )));
        }
        let w = ctx.bind(g, store, self.weight);
        let bias = self.bias.map(|b| ctx.bind(g, store, b));
        let mut outputs = Vec::with_capacity(inputs.len());
        for (m, &x) in self.modules.iter().zip(inputs) {
            let base = g.matmul_t(x, w)?;
            let base = match bias {
                Some(b) => g.add(base, b)?,
                None => base,
            };
            let xa = match ctx.dropout.as_mut() {
                Some((rate, rng)) => g.dropout(x, *rate, rng)?,
                None => x,
            };
            let a = ctx.bind(g, store, m.a);
            let b = ctx.bind(g, store, m.b);
            let down = g.matmul_t(xa, a)?;
            let up = g.matmul_t(down, b)?;
            let delta = g.scale(up, m.scaling());
            outputs.push(g.add(base, delta)?);
        }
        Ok(outputs)
    }

    /// `W + γ_π B_π A_π`, the merged inference weight of `group`.
    pub fn merge(&self, store: &ParamStore, group: usize) -> Result<Tensor> {
        let m = self.modules.get(group).ok_or_else(|| {
            Error::Contract(format!(
                "{}: group {group} out of range 0..{}",
                self.name,
                self.modules.len()
            ))
        })?;
        let delta = store.value(m.b).matmul(store.value(m.a))?.scale(m.scaling());
        store.value(self.weight).add(&delta)
    }

    pub fn manifest(&self, store: &ParamStore) -> LayerManifest {
        LayerManifest {
            name: self.name.clone(),
            group_ranks: self.ranks(),
            alphas: self.alphas(),
            shapes: self
                .modules
                .iter()
                .map(|m| AdapterShapes {
                    a: store.value(m.a).shape().to_vec(),
                    b: store.value(m.b).shape().to_vec(),
                })
                .collect(),
        }
    }
}

/// Serialized description of one layer's adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerManifest {
    pub name: String,
    pub group_ranks: Vec<usize>,
    pub alphas: Vec<f64>,
    pub shapes: Vec<AdapterShapes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterShapes {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// Plain single-adapter LoRA linear map, evaluated directly on tensors.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraLinear {
    /// Rows of `x[n×k]` mapped to `[n×d]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, k) = x
            .dims2()
            .ok_or_else(|| Error::Contract("LoRA input must be a matrix".into()))?;
        let (d, wk) = self.weight.dims2().expect("matrix weight");
        let r = self.a.shape()[0];
        if wk != k {
            return Err(Error::Dimension {
                op: "lora",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let xi = x.row(i);
            let down: Vec<f64> = (0..r).map(|j| dot(xi, self.a.row(j))).collect();
            for o in 0..d {
                let mut y = dot(xi, self.weight.row(o));
                if let Some(b) = &self.bias {
                    y += b.data()[o];
                }
                y += dot(&down, self.b.row(o)) * self.scaling;
                out.push(y);
            }
        }
        Tensor::new(vec![n, d], out)
    }
}

/// Splits `total_rank` over groups in proportion to their sizes.
///
/// Each group first gets `⌊r·|π|/T⌋`; the remainder goes one unit at a time
/// to groups in descending size (lower index first on ties). Groups left at
/// zero then take one unit each from the current largest allocation.
pub fn allocate_ranks(total_rank: usize, group_sizes: &[usize]) -> Result<Vec<usize>> {
    if group_sizes.is_empty() || group_sizes.contains(&0) {
        return Err(Error::Config(format!("invalid group sizes {group_sizes:?}")));
    }
    if total_rank < group_sizes.len() {
        return Err(Error::Config(format!(
            "total rank {total_rank} cannot give {} groups at least rank 1",
            group_sizes.len()
        )));
    }
    let tasks: usize = group_sizes.iter().sum();
    let mut ranks: Vec<usize> = group_sizes.iter().map(|&s| total_rank * s / tasks).collect();
    let mut order: Vec<usize> = (0..group_sizes.len()).collect();
    order.sort_by(|&i, &j| group_sizes[j].cmp(&group_sizes[i]).then(i.cmp(&j)));
    let mut remainder = total_rank - ranks.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        ranks[i] += 1;
        remainder -= 1;
    }
    while let Some(z) = ranks.iter().position(|&r| r == 0) {
        let donor = (0..ranks.len())
            .max_by(|&i, &j| ranks[i].cmp(&ranks[j]).then(j.cmp(&i)))
            .expect("non-empty");
        ranks[donor] -= 1;
        ranks[z] += 1;
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), normal_vec(&mut rng_from(seed, "t"), n, 1.0)).unwrap()
    }

    fn layer(ranks: &[usize], alpha: f64) -> (ParamStore, TgLoraLayer) {
        let mut store = ParamStore::new();
        let alphas = vec![alpha; ranks.len()];
        let l = TgLoraLayer::init(
            &mut store,
            "l",
            random(&[5, 4], 1),
            Some(random(&[5], 2)),
            ranks,
            &alphas,
            |gi| rng_from(3, &format!("g{gi}")),
        )
        .unwrap();
        (store, l)
    }

    #[test]
    fn scaling_four_over_four_is_one() {
        let (_, l) = layer(&[4], 4.0);
        assert_eq!(l.modules[0].scaling(), 1.0);
    }

    #[test]
    fn fresh_layer_is_frozen_map() {
        let (store, l) = layer(&[2, 3], 4.0);
        let x = random(&[3, 4], 9);
        let mut g = Graph::new();
        let xs: Vec<NodeId> = (0..2).map(|_| g.constant(x.clone())).collect();
        let ys = l.forward(&mut g, &store, &xs, &mut ForwardCtx::eval()).unwrap();
        let mut g2 = Graph::new();
        let xn = g2.constant(x);
        let w = g2.constant(store.value(l.weight).clone());
        let b = g2.constant(store.value(l.bias.unwrap()).clone());
        let base = g2.matmul_t(xn, w).unwrap();
        let base = g2.add(base, b).unwrap();
        for y in ys {
            assert_eq!(g.value(y), g2.value(base));
        }
    }

    #[test]
    fn same_seed_same_adapters() {
        let (s1, l1) = layer(&[2, 3], 4.0);
        let (s2, l2) = layer(&[2, 3], 4.0);
        for (m1, m2) in l1.modules.iter().zip(&l2.modules) {
            assert_eq!(s1.value(m1.a), s2.value(m2.a));
        }
    }

    #[test]
    fn rank_bounds_enforced() {
        let mut store = ParamStore::new();
        let rng = |_| rng_from(0, "x");
        let w = random(&[5, 4], 1);
        assert!(TgLoraLayer::init(&mut store, "a", w.clone(), None, &[0], &[4.0], rng).is_err());
        assert!(TgLoraLayer::init(&mut store, "b", w.clone(), None, &[5], &[4.0], rng).is_err());
        assert!(TgLoraLayer::init(&mut store, "c", w, None, &[4], &[4.0], rng).is_ok());
    }

    #[test]
    fn stream_count_mismatch_is_routing_error() {
        let (store, l) = layer(&[2, 2], 4.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let err = l.forward(&mut g, &store, &[x], &mut ForwardCtx::eval()).unwrap_err();
        assert!(matches!(err, Error::Routing(_)));
    }

    #[test]
    fn merge_of_zero_b_is_base_weight() {
        let (store, l) = layer(&[2, 3], 4.0);
        assert_eq!(l.merge(&store, 1).unwrap(), *store.value(l.weight));
        assert_eq!(l.merge(&store, 0).unwrap().shape(), &[5, 4]);
        assert!(l.merge(&store, 2).is_err());
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_ranks(8, &[2, 2]).unwrap(), vec![4, 4]);
        assert_eq!(allocate_ranks(8, &[3, 1]).unwrap(), vec![6, 2]);
        assert_eq!(allocate_ranks(8, &[2, 1, 1]).unwrap(), vec![4, 2, 2]);
        assert_eq!(allocate_ranks(5, &[1, 1, 1, 1]).unwrap(), vec![2, 1, 1, 1]);
        // floor gives [2, 0], remainder to the larger group, then a steal
        assert_eq!(allocate_ranks(3, &[5, 1]).unwrap(), vec![2, 1]);
        assert!(allocate_ranks(1, &[1, 1]).is_err());
    }
}
