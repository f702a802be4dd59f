//! Full-batch training with early stopping on validation accuracy.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, macro_f1};
use crate::aggregation::{project, Alpha, IndependentModel, JointModel, StackVariant};
use crate::error::{Error, Result};
use crate::graph::Mag;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Linear, ParamSet, Session};
use crate::seed;
use crate::sparse::CsrMatrix;
use crate::supra::{supra_loss, SupraConfig, SupraModel, SupraVariant, SYNERGY_PREFIX};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// MLP on the first modality.
    TextMlp,
    /// MLP on the second modality.
    VisualMlp,
    /// MLP on all modalities concatenated (early fusion).
    #[default]
    EfMlp,
    GcnJoint,
    SageConcat,
    IndepAgg,
    SupraBase,
    SupraAux,
    SupraSynergyOnly,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::TextMlp,
        ModelKind::VisualMlp,
        ModelKind::EfMlp,
        ModelKind::GcnJoint,
        ModelKind::SageConcat,
        ModelKind::IndepAgg,
        ModelKind::SupraBase,
        ModelKind::SupraAux,
        ModelKind::SupraSynergyOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TextMlp => "text-mlp",
            ModelKind::VisualMlp => "visual-mlp",
            ModelKind::EfMlp => "ef-mlp",
            ModelKind::GcnJoint => "gcn-joint",
            ModelKind::SageConcat => "sage-concat",
            ModelKind::IndepAgg => "indep-agg",
            ModelKind::SupraBase => "supra-base",
            ModelKind::SupraAux => "supra-aux",
            ModelKind::SupraSynergyOnly => "supra-synergy-only",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub smoothing: f64,
    pub weight_decay: f64,
    /// Auxiliary weight for `supra-aux`; other kinds ignore it.
    pub lambda_aux: f64,
    /// Use `D^-1/2 A D^-1/2` instead of the neighbor mean.
    pub sym_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::EfMlp,
            lr: 1e-3,
            max_epochs: 300,
            patience: 40,
            seed: 0,
            hidden: 64,
            layers: 2,
            alpha: 0.5,
            dropout: 0.3,
            smoothing: 0.1,
            weight_decay: 1e-4,
            lambda_aux: 0.7,
            sym_norm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be a finite value >= 0", self.lr));
        }
        if self.patience == 0 {
            return fail("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be >= 1".into());
        }
        if self.hidden == 0 {
            return fail("hidden must be >= 1".into());
        }
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return fail(format!("smoothing {} is outside [0, 1)", self.smoothing));
        }
        if self.weight_decay < 0.0 {
            return fail(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.lambda_aux < 0.0 {
            return fail(format!("lambda_aux {} must be >= 0", self.lambda_aux));
        }
        Alpha::new(self.alpha)?;
        Ok(())
    }

    pub fn supra_config(&self) -> Option<SupraConfig> {
        let variant = match self.kind {
            ModelKind::SupraBase => SupraVariant::Base,
            ModelKind::SupraAux => SupraVariant::Full,
            ModelKind::SupraSynergyOnly => SupraVariant::SynergyOnly,
            _ => return None,
        };
        Some(SupraConfig {
            proj_dim: self.hidden,
            layers: self.layers,
            alpha: self.alpha,
            lambda_aux: self.lambda_aux,
            dropout: self.dropout,
            smoothing: self.smoothing,
            variant,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchNorm {
    pub branch: String,
    pub grad_l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_task: f64,
    /// Per-modality auxiliary losses (SUPRA kinds only).
    pub loss_aux: Vec<f64>,
    pub val_acc: f64,
    pub grad_norms: Vec<BranchNorm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: ModelKind,
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub test_f1: f64,
    pub num_params: usize,
    /// Wall-clock time; excluded from the JSON so reports are reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

impl TrainReport {
    pub fn epochs_trained(&self) -> usize {
        self.epochs.len()
    }
}

/// Options outside the serialized config, used by the diagnostic protocols.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Train exactly `max_epochs` epochs, still reporting the best-val
    /// checkpoint.
    pub fixed_epochs: bool,
    /// Bind the synergy stack detached so it never receives gradient.
    pub freeze_synergy: bool,
}

#[derive(Clone, Debug)]
enum Net {
    Mlp {
        modalities: Vec<usize>,
        projector: Linear,
        head: Linear,
        dropout: f64,
    },
    Joint(JointModel),
    Indep(IndependentModel),
    Supra(SupraModel),
}

struct Forward {
    logits: Tensor,
    unique_logits: Vec<Tensor>,
}

/// A built model plus the parameters it reads.
#[derive(Clone, Debug)]
pub struct Trained {
    net: Net,
    pub params: ParamSet,
    adjacency: Arc<CsrMatrix>,
    pub report: TrainReport,
}

fn build(mag: &Mag, cfg: &TrainConfig, params: &mut ParamSet) -> Result<Net> {
    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::tag("init")]));
    let classes = mag.num_classes();
    let dims = |ms: &[usize]| ms.iter().map(|&m| mag.modalities()[m].dim).sum::<usize>();
    let alpha = Alpha::new(cfg.alpha)?;
    let all: Vec<usize> = (0..mag.num_modalities()).collect();
    let mlp = |modalities: Vec<usize>, params: &mut ParamSet, rng: &mut _| -> Result<Net> {
        if let Some(&m) = modalities.iter().find(|&&m| m >= mag.num_modalities()) {
            return Err(Error::Config(format!(
                "{} needs modality #{m}, graph has {}",
                cfg.kind,
                mag.num_modalities()
            )));
        }
        let projector = Linear::new(params, "mlp.proj", dims(&modalities), cfg.hidden, rng);
        let head = Linear::new(params, "mlp.head", cfg.hidden, classes, rng);
        Ok(Net::Mlp {
            modalities,
            projector,
            head,
            dropout: cfg.dropout,
        })
    };
    match cfg.kind {
        ModelKind::TextMlp => mlp(vec![0], params, &mut rng),
        ModelKind::VisualMlp => mlp(vec![1], params, &mut rng),
        ModelKind::EfMlp => mlp(all, params, &mut rng),
        ModelKind::GcnJoint | ModelKind::SageConcat => {
            let variant = if cfg.kind == ModelKind::GcnJoint {
                StackVariant::MeanMix
            } else {
                StackVariant::EgoConcat
            };
            Ok(Net::Joint(JointModel::new(
                params,
                dims(&all),
                cfg.hidden,
                classes,
                variant,
                alpha,
                cfg.layers,
                cfg.dropout,
                &mut rng,
            )?))
        }
        ModelKind::IndepAgg => {
            let named: Vec<(String, usize)> = mag.modalities().iter().map(|m| (m.name.clone(), m.dim)).collect();
            Ok(Net::Indep(IndependentModel::new(
                params,
                &named,
                cfg.hidden,
                classes,
                alpha,
                cfg.layers,
                cfg.dropout,
                &mut rng,
            )?))
        }
        ModelKind::SupraBase | ModelKind::SupraAux | ModelKind::SupraSynergyOnly => {
            let named: Vec<(String, usize)> = mag.modalities().iter().map(|m| (m.name.clone(), m.dim)).collect();
            let sc = cfg.supra_config().expect("supra kind");
            Ok(Net::Supra(SupraModel::new(params, &named, classes, sc, &mut rng)?))
        }
    }
}

impl Net {
    fn forward(&self, sess: &mut Session<'_>, adj: &Arc<CsrMatrix>, features: &[Tensor]) -> Result<Forward> {
        let all: Vec<&Tensor> = features.iter().collect();
        match self {
            Net::Mlp {
                modalities,
                projector,
                head,
                dropout,
            } => {
                let parts: Vec<&Tensor> = modalities.iter().map(|&m| &features[m]).collect();
                let x = sess.tape().concat_cols(&parts)?;
                let x = sess.dropout(&x, *dropout)?;
                let h = project(sess, projector, &x)?;
                let h = sess.dropout(&h, *dropout)?;
                Ok(Forward {
                    logits: head.forward(sess, &h)?,
                    unique_logits: Vec::new(),
                })
            }
            Net::Joint(model) => Ok(Forward {
                logits: model.forward(sess, adj, &all)?,
                unique_logits: Vec::new(),
            }),
            Net::Indep(model) => Ok(Forward {
                logits: model.forward(sess, adj, &all)?,
                unique_logits: Vec::new(),
            }),
            Net::Supra(model) => {
                let out = model.forward(sess, adj, &all)?;
                Ok(Forward {
                    logits: out.logits,
                    unique_logits: out.unique_logits,
                })
            }
        }
    }
}

/// Tracked branch of a parameter, from its name.
fn branch_of(name: &str) -> Option<String> {
    let mut parts = name.split('.');
    match (parts.next()?, parts.next()?) {
        ("proj", m) => Some(format!("projector:{m}")),
        ("synergy", _) => Some("synergy".into()),
        ("gnn", m) => Some(format!("gnn:{m}")),
        ("joint", "proj") => Some("projector:joint".into()),
        ("joint", "gnn") => Some("gnn".into()),
        ("mlp", "proj") => Some("projector:mlp".into()),
        _ => None,
    }
}

fn branch_norms(params: &ParamSet, grads: &[Vec<f64>]) -> Vec<BranchNorm> {
    let mut out: Vec<BranchNorm> = Vec::new();
    for ((name, _), g) in params.iter().zip(grads) {
        let Some(branch) = branch_of(name) else {
            continue;
        };
        let sq: f64 = g.iter().map(|v| v * v).sum();
        match out.iter_mut().find(|b| b.branch == branch) {
            Some(b) => b.grad_l2 += sq,
            None => out.push(BranchNorm { branch, grad_l2: sq }),
        }
    }
    for b in &mut out {
        b.grad_l2 = b.grad_l2.sqrt();
    }
    out
}

fn adjacency_for(mag: &Mag, cfg: &TrainConfig) -> Arc<CsrMatrix> {
    if cfg.sym_norm {
        Arc::new(mag.adjacency().sym_normalized())
    } else {
        Arc::clone(mag.adjacency())
    }
}

impl Trained {
    /// Class predictions for every node of `mag`, which must share the
    /// training graph's structure and modality layout.
    pub fn predict(&self, mag: &Mag) -> Result<Vec<usize>> {
        predict_with(&self.net, &self.params, &self.adjacency, mag.all_features())
    }
}

fn predict_with(net: &Net, params: &ParamSet, adj: &Arc<CsrMatrix>, features: &[Tensor]) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let mut sess = Session::eval(&tape, params);
    Ok(net.forward(&mut sess, adj, features)?.logits.argmax_rows())
}

/// Trains `cfg.kind` on `mag` with early stopping.
pub fn train(mag: &Mag, cfg: &TrainConfig) -> Result<TrainReport> {
    Ok(fit(mag, cfg, TrainOptions::default())?.report)
}

/// Trains and keeps the best-validation parameters.
pub fn fit(mag: &Mag, cfg: &TrainConfig, opts: TrainOptions) -> Result<Trained> {
    cfg.validate()?;
    let started = Instant::now();
    let mut params = ParamSet::new();
    let net = build(mag, cfg, &mut params)?;
    let adj = adjacency_for(mag, cfg);
    let features = mag.all_features();
    let splits = mag.splits();
    let train_labels = mag.labels_of(&splits.train);
    let val_labels = mag.labels_of(&splits.val);
    let lambda = match &net {
        Net::Supra(m) => m.config().effective_lambda(),
        _ => 0.0,
    };
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });

    let mut epochs = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, params.clone());
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let tape = Tape::new();
        let dropout_seed = seed::derive(cfg.seed, &[seed::tag("dropout"), epoch as u64]);
        let mut sess = Session::train_with(&tape, &params, dropout_seed, |name| {
            opts.freeze_synergy && name.starts_with(SYNERGY_PREFIX)
        });
        let fwd = net.forward(&mut sess, &adj, features)?;
        let (total, task, aux) = if let Net::Supra(_) = &net {
            let l = supra_loss(
                &sess,
                &fwd.logits,
                &fwd.unique_logits,
                &splits.train, &train_labels,
                lambda,
                cfg.smoothing,
            )?;
            (l.total, l.task, l.aux)
        } else {
            let logits = tape.row_select(&fwd.logits, &splits.train)?;
            let l = tape.cross_entropy_smoothed(&logits, &train_labels, cfg.smoothing)?;
            let task = l.item();
            (l, task, Vec::new())
        };
        let loss = total.item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, loss });
        }
        let grads = tape.backward(&total)?;
        let flat = sess.param_grads(&grads);
        let grad_norms = branch_norms(&params, &flat);
        adam.step(&mut params, &flat);

        let preds = predict_with(&net, &params, &adj, features)?;
        let val_preds: Vec<usize> = splits.val.iter().map(|&v| preds[v]).collect();
        let val_acc = accuracy(&val_preds, &val_labels)?;
        epochs.push(EpochRecord {
            epoch,
            loss_total: loss,
            loss_task: task,
            loss_aux: aux,
            val_acc,
            grad_norms,
        });
        // Ties move the checkpoint forward (more-trained weights at equal
        // validation accuracy) but do not reset the patience counter.
        if val_acc >= best.1 {
            let improved = val_acc > best.1;
            best = (epoch, val_acc, params.clone());
            if improved {
                since_best = 0;
                continue;
            }
        }
        {
            since_best += 1;
            if !opts.fixed_epochs && since_best >= cfg.patience {
                log::debug!("{}: early stop at epoch {epoch}", cfg.kind);
                break;
            }
        }
    }

    let (best_epoch, best_val_acc, best_params) = best;
    let preds = predict_with(&net, &best_params, &adj, features)?;
    let test_preds: Vec<usize> = splits.test.iter().map(|&v| preds[v]).collect();
    let test_labels = mag.labels_of(&splits.test);
    let report = TrainReport {
        kind: cfg.kind,
        seed: cfg.seed,
        config: cfg.clone(),
        epochs,
        best_epoch,
        best_val_acc,
        test_acc: accuracy(&test_preds, &test_labels)?,
        test_f1: macro_f1(&test_preds, &test_labels, mag.num_classes())?,
        num_params: best_params.num_scalars(),
        seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "{} seed {}: acc {:.4} f1 {:.4} after {} epochs",
        cfg.kind,
        cfg.seed,
        report.test_acc,
        report.test_f1,
        report.epochs_trained()
    );
    Ok(Trained {
        net,
        params: best_params,
        adjacency: adj,
        report,
    })
}
