use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Per-head projections plus the output projection of one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T> {
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub output: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T> {
    pub attn: AttentionWeights<T>,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ff_w1: T,
    pub ff_b1: T,
    pub ff_w2: T,
    pub ff_b2: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateWeights<T> {
    pub weight: T,
    pub bias: T,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights<T> {
    pub intermediate: Option<IntermediateWeights<T>>,
    pub out_weight: T,
    pub out_bias: T,
}

/// Every learnable slot of the encoder. `T` is a [`Tensor`] for stored
/// parameters and gradients, or a tape `Var` during a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights<T> {
    pub time_embedding: T,
    pub feature_weight: T,
    pub feature_bias: T,
    pub layers: Vec<LayerWeights<T>>,
    pub head: HeadWeights<T>,
}

impl<T> Weights<T> {
    /// Applies `f` to every slot in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        let mut f = |name: String, t: &T| f(&name, t);
        Weights {
            time_embedding: f("time_embedding".into(), &self.time_embedding),
            feature_weight: f("feature.weight".into(), &self.feature_weight),
            feature_bias: f("feature.bias".into(), &self.feature_bias),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let p = format!("layers.{i}");
                    let heads = |f: &mut dyn FnMut(String, &T) -> U, kind: &str, v: &[T]| {
                        v.iter()
                            .enumerate()
                            .map(|(h, t)| f(format!("{p}.attn.{kind}.{h}"), t))
                            .collect::<Vec<U>>()
                    };
                    let attn = AttentionWeights {
                        query: heads(&mut f, "query", &l.attn.query),
                        key: heads(&mut f, "key", &l.attn.key),
                        value: heads(&mut f, "value", &l.attn.value),
                        output: f(format!("{p}.attn.output"), &l.attn.output),
                    };
                    LayerWeights {
                        attn,
                        ln1_gain: f(format!("{p}.ln1.gain"), &l.ln1_gain),
                        ln1_bias: f(format!("{p}.ln1.bias"), &l.ln1_bias),
                        ff_w1: f(format!("{p}.ffn.w1"), &l.ff_w1),
                        ff_b1: f(format!("{p}.ffn.b1"), &l.ff_b1),
                        ff_w2: f(format!("{p}.ffn.w2"), &l.ff_w2),
                        ff_b2: f(format!("{p}.ffn.b2"), &l.ff_b2),
                        ln2_gain: f(format!("{p}.ln2.gain"), &l.ln2_gain),
                        ln2_bias: f(format!("{p}.ln2.bias"), &l.ln2_bias),
                    }
                })
                .collect(),
            head: HeadWeights {
                intermediate: self.head.intermediate.as_ref().map(|i| IntermediateWeights {
                    weight: f("head.dense.weight".into(), &i.weight),
                    bias: f("head.dense.bias".into(), &i.bias),
                    ln_gain: f("head.ln.gain".into(), &i.ln_gain),
                    ln_bias: f("head.ln.bias".into(), &i.ln_bias),
                }),
                out_weight: f("head.out.weight".into(), &self.head.out_weight),
                out_bias: f("head.out.bias".into(), &self.head.out_bias),
            },
        }
    }

    /// `(name, slot)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        // Names come from `map`; pointers are collected in the same traversal order.
        let names = self.map(|n, _| n.to_owned());
        names.for_each_pair(self, &mut |n, t| out.push((n.clone(), t)));
        out
    }

    /// Mutable slots in canonical order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![
            &mut self.time_embedding,
            &mut self.feature_weight,
            &mut self.feature_bias,
        ];
        for l in &mut self.layers {
            out.extend(l.attn.query.iter_mut());
            out.extend(l.attn.key.iter_mut());
            out.extend(l.attn.value.iter_mut());
            out.push(&mut l.attn.output);
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ff_w1,
                &mut l.ff_b1,
                &mut l.ff_w2,
                &mut l.ff_b2,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        if let Some(i) = &mut self.head.intermediate {
            out.extend([&mut i.weight, &mut i.bias, &mut i.ln_gain, &mut i.ln_bias]);
        }
        out.push(&mut self.head.out_weight);
        out.push(&mut self.head.out_bias);
        out
    }
}

impl Weights<String> {
    fn for_each_pair<'a, T>(&self, other: &'a Weights<T>, f: &mut impl FnMut(&String, &'a T)) {
        f(&self.time_embedding, &other.time_embedding);
        f(&self.feature_weight, &other.feature_weight);
        f(&self.feature_bias, &other.feature_bias);
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.attn.query.iter().zip(&b.attn.query) {
                f(x, y);
            }
            for (x, y) in a.attn.key.iter().zip(&b.attn.key) {
                f(x, y);
            }
            for (x, y) in a.attn.value.iter().zip(&b.attn.value) {
                f(x, y);
            }
            f(&a.attn.output, &b.attn.output);
            f(&a.ln1_gain, &b.ln1_gain);
            f(&a.ln1_bias, &b.ln1_bias);
            f(&a.ff_w1, &b.ff_w1);
            f(&a.ff_b1, &b.ff_b1);
            f(&a.ff_w2, &b.ff_w2);
            f(&a.ff_b2, &b.ff_b2);
            f(&a.ln2_gain, &b.ln2_gain);
            f(&a.ln2_bias, &b.ln2_bias);
        }
        if let (Some(a), Some(b)) = (&self.head.intermediate, &other.head.intermediate) {
            f(&a.weight, &b.weight);
            f(&a.bias, &b.bias);
            f(&a.ln_gain, &b.ln_gain);
            f(&a.ln_bias, &b.ln_bias);
        }
        f(&self.head.out_weight, &other.head.out_weight);
        f(&self.head.out_bias, &other.head.out_bias);
    }
}

impl Weights<Tensor> {
    /// Overwrites every slot from a name-keyed list, checking names and shapes.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut by_name: HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if by_name.len() != names.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors stored, model has {}", by_name.len(), names.len()),
            ));
        }
        for (name, slot) in names.iter().zip(self.values_mut()) {
            let t = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}
