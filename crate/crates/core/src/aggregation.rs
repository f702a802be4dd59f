//! Mean-aggregation layers and the two coupled multimodal paradigms:
//! joint (fuse, then propagate) and independent (propagate, then fuse).

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Linear, ParamId, ParamSet, Session};
use crate::sparse::CsrMatrix;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Self-retention weight, strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::Config(format!("alpha {alpha} must lie strictly inside (0, 1)")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// `alpha h + (1 - alpha) A h`.
pub fn mean_aggregate(tape: &Tape, h: &Tensor, adj: &Arc<CsrMatrix>, alpha: Alpha) -> Result<Tensor> {
    let a = alpha.get();
    let neighbors = tape.spmm(adj, h)?;
    Ok(tape.add(&tape.scale(h, a)?, &tape.scale(&neighbors, 1.0 - a)?)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackVariant {
    /// `alpha h + (1 - alpha) mean_N(h)`, then the optional transform.
    #[default]
    MeanMix,
    /// `W [h || mean_N(h)]` (SAGE-style); always weighted.
    EgoConcat,
}

#[derive(Clone, Debug)]
pub struct MeanAggLayer {
    pub alpha: Alpha,
    pub weight: Option<Linear>,
}

impl MeanAggLayer {
    fn forward(&self, sess: &Session<'_>, adj: &Arc<CsrMatrix>, h: &Tensor, variant: StackVariant) -> Result<Tensor> {
        let tape = sess.tape();
        match variant {
            StackVariant::MeanMix => {
                let mixed = mean_aggregate(tape, h, adj, self.alpha)?;
                match &self.weight {
                    Some(w) => Ok(w.forward(sess, &mixed)?),
                    None => Ok(mixed),
                }
            }
            StackVariant::EgoConcat => {
                let neighbors = tape.spmm(adj, h)?;
                let both = tape.concat_cols(&[h, &neighbors])?;
                let w = self.weight.as_ref().expect("ego-concat layers are weighted");
                Ok(w.forward(sess, &both)?)
            }
        }
    }
}

/// `L >= 1` aggregation layers with ReLU between layers (not after the last).
#[derive(Clone, Debug)]
pub struct GnnStack {
    layers: Vec<MeanAggLayer>,
    variant: StackVariant,
    out_dim: Option<usize>,
}

impl GnnStack {
    /// Weighted stack mapping `in_dim` to `hidden` in the first layer and
    /// `hidden` to `hidden` afterwards.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        variant: StackVariant,
        alpha: Alpha,
        layers: usize,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("a GNN stack needs at least one layer".into()));
        }
        let width = match variant {
            StackVariant::MeanMix => 1,
            StackVariant::EgoConcat => 2,
        };
        let layers = (0..layers)
            .map(|l| {
                let d_in = if l == 0 { in_dim } else { hidden };
                MeanAggLayer {
                    alpha,
                    weight: Some(Linear::new(params, &format!("{name}.{l}"), width * d_in, hidden, rng)),
                }
            })
            .collect();
        Ok(Self {
            layers,
            variant,
            out_dim: Some(hidden),
        })
    }

    /// Weightless mean-mix stack; with no transforms the ReLUs are omitted
    /// too, so the whole stack is the linear map `(alpha I + (1-alpha) A)^L`.
    pub fn linear(alpha: Alpha, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("a GNN stack needs at least one layer".into()));
        }
        Ok(Self {
            layers: vec![MeanAggLayer { alpha, weight: None }; layers],
            variant: StackVariant::MeanMix,
            out_dim: None,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn variant(&self) -> StackVariant {
        self.variant
    }

    /// Output width, or `None` for a weightless stack (width preserved).
    pub fn out_dim(&self) -> Option<usize> {
        self.out_dim
    }

    /// Width entering the first transform: the input width, doubled for
    /// ego-concat.
    pub fn first_transform_width(&self) -> Option<usize> {
        self.layers[0].weight.as_ref().map(|w| w.in_dim)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| l.weight.as_ref())
            .flat_map(|w| w.params())
            .collect()
    }

    /// Dropout (rate `dropout`) is applied to the input of every layer after
    /// the first.
    pub fn forward(&self, sess: &mut Session<'_>, adj: &Arc<CsrMatrix>, h: &Tensor, dropout: f64) -> Result<Tensor> {
        let mut x = h.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 && layer.weight.is_some() {
                x = sess.tape().relu(&x)?;
                x = sess.dropout(&x, dropout)?;
            }
            x = layer.forward(sess, adj, &x, self.variant)?;
        }
        Ok(x)
    }
}

/// Diagonal entry `(node, node)` of `(alpha I + (1 - alpha) A)^L`, computed by
/// `L` sparse products on the basis vector `e_node`.
pub fn ego_jacobian_diag(adj: &CsrMatrix, alpha: f64, layers: usize, node: usize) -> Result<f64> {
    let alpha = Alpha::new(alpha)?.get();
    let n = adj.num_rows();
    if node >= n {
        return Err(Error::NodeOutOfRange { node, nodes: n });
    }
    let mut v = vec![0.0; n];
    v[node] = 1.0;
    for _ in 0..layers {
        let av = adj.matvec(&v);
        for (x, a) in v.iter_mut().zip(av) {
            *x = alpha * *x + (1.0 - alpha) * a;
        }
    }
    Ok(v[node])
}

/// Projector `ReLU(x W + b)`.
pub(crate) fn project(sess: &Session<'_>, proj: &Linear, x: &Tensor) -> Result<Tensor> {
    Ok(sess.tape().relu(&proj.forward(sess, x)?)?)
}

/// Fuse-then-propagate: concat -> projector -> stack -> linear head.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub projector: Linear,
    pub stack: GnnStack,
    pub head: Linear,
    pub dropout: f64,
}

impl JointModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        variant: StackVariant,
        alpha: Alpha,
        layers: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let projector = Linear::new(params, "joint.proj", in_dim, hidden, rng);
        let stack = GnnStack::new(params, "joint.gnn", variant, alpha, layers, hidden, hidden, rng)?;
        let head = Linear::new(params, "joint.head", hidden, classes, rng);
        Ok(Self {
            projector,
            stack,
            head,
            dropout,
        })
    }

    pub fn forward(&self, sess: &mut Session<'_>, adj: &Arc<CsrMatrix>, features: &[&Tensor]) -> Result<Tensor> {
        let x = sess.tape().concat_cols(features)?;
        let x = sess.dropout(&x, self.dropout)?;
        let h = project(sess, &self.projector, &x)?;
        let h = sess.dropout(&h, self.dropout)?;
        let z = self.stack.forward(sess, adj, &h, self.dropout)?;
        Ok(self.head.forward(sess, &z)?)
    }
}

/// Propagate-then-fuse: one projector + stack per modality, outputs
/// concatenated into a shared linear head.
#[derive(Clone, Debug)]
pub struct IndependentModel {
    pub projectors: Vec<Linear>,
    pub stacks: Vec<GnnStack>,
    pub head: Linear,
    pub dropout: f64,
}

impl IndependentModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        dims: &[(String, usize)],
        hidden: usize,
        classes: usize,
        alpha: Alpha,
        layers: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut projectors = Vec::new();
        let mut stacks = Vec::new();
        for (name, dim) in dims {
            projectors.push(Linear::new(params, &format!("proj.{name}"), *dim, hidden, rng));
            stacks.push(GnnStack::new(
                params,
                &format!("gnn.{name}"),
                StackVariant::MeanMix,
                alpha,
                layers,
                hidden,
                hidden,
                rng,
            )?);
        }
        let head = Linear::new(params, "indep.head", hidden * dims.len(), classes, rng);
        Ok(Self {
            projectors,
            stacks,
            head,
            dropout,
        })
    }

    /// Per-modality branch outputs `Z^(m)`.
    pub fn branches(&self, sess: &mut Session<'_>, adj: &Arc<CsrMatrix>, features: &[&Tensor]) -> Result<Vec<Tensor>> {
        if features.len() != self.stacks.len() {
            return Err(Error::Config(format!(
                "{} feature matrices for {} branches",
                features.len(),
                self.stacks.len()
            )));
        }
        let mut out = Vec::with_capacity(features.len());
        for ((proj, stack), x) in self.projectors.iter().zip(&self.stacks).zip(features) {
            let x = sess.dropout(x, self.dropout)?;
            let h = project(sess, proj, &x)?;
            let h = sess.dropout(&h, self.dropout)?;
            out.push(stack.forward(sess, adj, &h, self.dropout)?);
        }
        Ok(out)
    }

    pub fn forward(&self, sess: &mut Session<'_>, adj: &Arc<CsrMatrix>, features: &[&Tensor]) -> Result<Tensor> {
        let branches = self.branches(sess, adj, features)?;
        let refs: Vec<&Tensor> = branches.iter().collect();
        let z = sess.tape().concat_cols(&refs)?;
        Ok(self.head.forward(sess, &z)?)
    }
}
