//! Decoupled dual-pathway model.
//!
//! Each modality `m` has a projector `f_m` (linear + ReLU) whose output
//! `Z^(U_m)` feeds two places: its own linear head `Head_m` (the unique
//! stream, never touched by the graph) and, concatenated with the other
//! projections, a single mean-aggregation stack whose output `Z^(S)` feeds
//! `Head_S` (the synergy stream). The prediction pools all heads equally:
//!
//! ```text
//! y = (Head_S(Z^(S)) + sum_m Head_m(Z^(U_m))) / (|M| + 1)
//! ```
//!
//! The auxiliary loss applies cross-entropy to every `Head_m(Z^(U_m))`
//! directly, giving each projector a gradient path that bypasses the stack.

use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{project, Alpha, GnnStack, StackVariant};
use crate::error::{Error, Result};
use crate::params::{Linear, ParamId, ParamSet, Session};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupraVariant {
    /// Pooled prediction plus auxiliary loss weighted by `lambda_aux`.
    #[default]
    Full,
    /// Pooled prediction, no auxiliary loss.
    Base,
    /// Synergy head only, no auxiliary loss.
    SynergyOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupraConfig {
    pub proj_dim: usize,
    pub layers: usize,
    pub alpha: f64,
    pub lambda_aux: f64,
    pub dropout: f64,
    pub smoothing: f64,
    pub variant: SupraVariant,
}

impl Default for SupraConfig {
    fn default() -> Self {
        Self {
            proj_dim: 64,
            layers: 2,
            alpha: 0.5,
            lambda_aux: 0.7,
            dropout: 0.3,
            smoothing: 0.1,
            variant: SupraVariant::Full,
        }
    }
}

impl SupraConfig {
    /// The auxiliary weight actually applied: zero unless the variant is
    /// [`SupraVariant::Full`].
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            SupraVariant::Full => self.lambda_aux,
            SupraVariant::Base | SupraVariant::SynergyOnly => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_aux < 0.0 || !self.lambda_aux.is_finite() {
            return Err(Error::Config(format!("lambda_aux {} must be >= 0", self.lambda_aux)));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} is outside [0, 1)", self.smoothing)));
        }
        Alpha::new(self.alpha)?;
        if self.layers == 0 {
            return Err(Error::Config("a GNN stack needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SupraModel {
    config: SupraConfig,
    modalities: Vec<(String, usize)>,
    projectors: Vec<Linear>,
    synergy: GnnStack,
    heads: Vec<Linear>,
    head_s: Linear,
}

/// Everything one forward pass produces, over all nodes.
#[derive(Clone, Debug)]
pub struct SupraOutput {
    pub unique: Vec<Tensor>,
    pub unique_logits: Vec<Tensor>,
    pub synergy: Tensor,
    pub synergy_logits: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct SupraLoss {
    /// `task + lambda * sum(aux)`, recorded on the tape.
    pub total: Tensor,
    pub task: f64,
    pub aux: Vec<f64>,
}

/// Parameter-name prefix of the synergy stack.
pub const SYNERGY_PREFIX: &str = "synergy.";

impl SupraModel {
    /// `modalities` lists `(name, raw dim)` in prediction order.
    pub fn new(
        params: &mut ParamSet,
        modalities: &[(String, usize)],
        classes: usize,
        config: SupraConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if modalities.is_empty() {
            return Err(Error::Config("SUPRA needs at least one modality".into()));
        }
        let p = config.proj_dim;
        let projectors = modalities
            .iter()
            .map(|(name, dim)| Linear::new(params, &format!("proj.{name}"), *dim, p, rng))
            .collect();
        let synergy = GnnStack::new(
            params,
            "synergy",
            StackVariant::MeanMix,
            Alpha::new(config.alpha)?,
            config.layers,
            p * modalities.len(),
            p,
            rng,
        )?;
        let heads = modalities
            .iter()
            .map(|(name, _)| Linear::new(params, &format!("head.{name}"), p, classes, rng))
            .collect();
        let head_s = Linear::new(params, "head.synergy", p, classes, rng);
        Ok(Self {
            config,
            modalities: modalities.to_vec(),
            projectors,
            synergy,
            heads,
            head_s,
        })
    }

    pub fn config(&self) -> &SupraConfig {
        &self.config
    }

    pub fn modalities(&self) -> &[(String, usize)] {
        &self.modalities
    }

    /// Width of the representation entering the synergy stack.
    pub fn synergy_input_width(&self) -> usize {
        self.synergy.first_transform_width().expect("weighted stack")
    }

    pub fn synergy_params(&self) -> Vec<ParamId> {
        let mut ids = self.synergy.params();
        ids.extend(self.head_s.params());
        ids
    }

    pub fn projector_params(&self, modality: usize) -> [ParamId; 2] {
        self.projectors[modality].params()
    }

    pub fn head_params(&self, modality: usize) -> [ParamId; 2] {
        self.heads[modality].params()
    }

    pub fn forward(&self, sess: &mut Session<'_>, adj: &Arc<CsrMatrix>, features: &[&Tensor]) -> Result<SupraOutput> {
        if features.len() != self.projectors.len() {
            return Err(Error::Config(format!(
                "{} feature matrices for {} modalities",
                features.len(),
                self.projectors.len()
            )));
        }
        let rate = self.config.dropout;
        let mut unique = Vec::with_capacity(features.len());
        let mut unique_logits = Vec::with_capacity(features.len());
        for ((proj, head), x) in self.projectors.iter().zip(&self.heads).zip(features) {
            let x = sess.dropout(x, rate)?;
            let z = project(sess, proj, &x)?;
            let z = sess.dropout(&z, rate)?;
            unique_logits.push(head.forward(sess, &z)?);
            unique.push(z);
        }
        let refs: Vec<&Tensor> = unique.iter().collect();
        let h_s = sess.tape().concat_cols(&refs)?;
        let synergy = self.synergy.forward(sess, adj, &h_s, rate)?;
        let synergy_logits = self.head_s.forward(sess, &synergy)?;
        let logits = match self.config.variant {
            SupraVariant::SynergyOnly => synergy_logits.clone(),
            SupraVariant::Full | SupraVariant::Base => pool(sess, &synergy_logits, &unique_logits)?,
        };
        Ok(SupraOutput {
            unique,
            unique_logits,
            synergy,
            synergy_logits,
            logits,
        })
    }

    /// Task and auxiliary losses on `rows`.
    pub fn loss(
        &self,
        sess: &Session<'_>,
        out: &SupraOutput,
        rows: &[usize],
        labels: &[usize],
    ) -> Result<SupraLoss> {
        supra_loss(
            sess,
            &out.logits,
            &out.unique_logits,
            rows,
            labels,
            self.config.effective_lambda(),
            self.config.smoothing,
        )
    }

    /// Gradient L2 norm of each projector (`projector:<name>`) and of the
    /// synergy stack (`synergy`), from flattened per-parameter gradients.
    pub fn branch_grad_norms(&self, grads: Option<&[Vec<f64>]>) -> Result<Vec<(String, f64)>> {
        let grads = grads.ok_or(Error::NoBackward)?;
        let norm = |ids: &[ParamId]| {
            ids.iter()
                .flat_map(|id| grads[id.index()].iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt()
        };
        let mut out: Vec<(String, f64)> = self
            .modalities
            .iter()
            .zip(&self.projectors)
            .map(|((name, _), p)| (format!("projector:{name}"), norm(&p.params())))
            .collect();
        out.push(("synergy".into(), norm(&self.synergy.params())));
        Ok(out)
    }

    pub fn save(&self, params: &ParamSet, path: &Path) -> Result<()> {
        params.save_checkpoint(path)
    }
}

/// `(synergy + sum(unique)) / (|unique| + 1)`.
pub fn pool(sess: &Session<'_>, synergy_logits: &Tensor, unique_logits: &[Tensor]) -> Result<Tensor> {
    let tape = sess.tape();
    let mut acc = synergy_logits.clone();
    for u in unique_logits {
        acc = tape.add(&acc, u)?;
    }
    Ok(tape.scale(&acc, 1.0 / (unique_logits.len() + 1) as f64)?)
}

/// `CE(logits) + lambda * sum_m CE(unique_logits_m)` on `rows`.
pub fn supra_loss(
    sess: &Session<'_>,
    logits: &Tensor,
    unique_logits: &[Tensor],
    rows: &[usize],
    labels: &[usize],
    lambda_aux: f64,
    smoothing: f64,
) -> Result<SupraLoss> {
    if lambda_aux < 0.0 || !lambda_aux.is_finite() {
        return Err(Error::Config(format!("lambda_aux {lambda_aux} must be >= 0")));
    }
    let tape = sess.tape();
    let task = tape.cross_entropy_smoothed(&tape.row_select(logits, rows)?, labels, smoothing)?;
    let mut total = task.clone();
    let mut aux = Vec::with_capacity(unique_logits.len());
    for u in unique_logits {
        let l = tape.cross_entropy_smoothed(&tape.row_select(u, rows)?, labels, smoothing)?;
        aux.push(l.item());
        if lambda_aux > 0.0 {
            total = tape.add(&total, &tape.scale(&l, lambda_aux)?)?;
        }
    }
    Ok(SupraLoss {
        task: task.item(),
        total,
        aux,
    })
}
