//! Named parameter storage, per-pass bindings, and checkpoints.
//!
//! Models keep [`ParamId`]s into a [`ParamSet`]. Each forward pass opens a
//! [`Session`] that binds every parameter either as a tape leaf (trainable)
//! or as a detached constant (frozen or evaluation).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tape::{Gradients, Tape};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value.detach());
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform initialized `rows x cols` weight.
    pub fn glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "ParamSet::set",
                lhs: old.shape(),
                rhs: value.shape(),
            });
        }
        self.values[id.0] = value.detach();
        Ok(())
    }

    pub(crate) fn update(&mut self, index: usize, f: impl FnOnce(&mut [f64])) {
        let t = &self.values[index];
        let mut data = t.to_vec();
        f(&mut data);
        self.values[index] = Tensor::from_vec(t.rows(), t.cols(), data);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.data().len()).sum()
    }

    /// Scalar count over the given ids.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.values[id.0].data().len()).sum()
    }

    /// Writes the checkpoint format: `MAGCKPT1`, a little-endian `u64`
    /// manifest length, the JSON shape manifest, then every parameter as
    /// little-endian `f64` in manifest order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            params: self
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut bytes = Vec::with_capacity(16 + json.len() + 8 * self.num_scalars());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for t in &self.values {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing header"));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds file size"))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&bytes[16..json_end]).map_err(|e| bad(&e.to_string()))?;
        let mut blob = bytes[json_end..].chunks_exact(8);
        let expected: usize = manifest.params.iter().map(|p| p.rows * p.cols).sum();
        if blob.len() != expected || !blob.remainder().is_empty() {
            return Err(bad("parameter blob size does not match manifest"));
        }
        let mut set = ParamSet::new();
        for entry in manifest.params {
            let data = blob
                .by_ref()
                .take(entry.rows * entry.cols)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.add(entry.name, Tensor::from_vec(entry.rows, entry.cols, data));
        }
        Ok(set)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MAGCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Parameters bound to a tape for one forward pass, plus the dropout stream.
pub struct Session<'a> {
    tape: &'a Tape,
    vars: Vec<Tensor>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    /// Every parameter becomes a leaf; dropout is active.
    pub fn train(tape: &'a Tape, params: &ParamSet, dropout_seed: u64) -> Self {
        Self::train_with(tape, params, dropout_seed, |_| false)
    }

    /// Like [`train`](Self::train), but parameters whose name satisfies
    /// `frozen` are bound detached and receive no gradient.
    pub fn train_with(
        tape: &'a Tape,
        params: &ParamSet,
        dropout_seed: u64,
        frozen: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| if frozen(name) { t.detach() } else { tape.leaf(t) })
            .collect();
        Self {
            tape,
            vars,
            training: true,
            rng: seed::rng(dropout_seed),
        }
    }

    /// Detached parameters, dropout off; records nothing on the tape.
    pub fn eval(tape: &'a Tape, params: &ParamSet) -> Self {
        Self {
            tape,
            vars: params.iter().map(|(_, t)| t.detach()).collect(),
            training: false,
            rng: seed::rng(0),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn var(&self, id: ParamId) -> &Tensor {
        &self.vars[id.0]
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if !self.training {
            return Ok(x.clone());
        }
        self.tape.dropout(x, rate, &mut self.rng)
    }

    /// Flattened gradient of every parameter; zeros for detached ones.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars.iter().map(|v| grads.wrt(v).to_vec()).collect()
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = params.glorot(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = params.zeros(format!("{name}.bias"), 1, out_dim);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, sess: &Session<'_>, x: &Tensor) -> Result<Tensor, TensorError> {
        let tape = sess.tape();
        let xw = tape.matmul(x, sess.var(self.weight))?;
        tape.add_row(&xw, sess.var(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet {
        let mut rng = seed::rng(11);
        let mut p = ParamSet::new();
        p.glorot("a.weight", 3, 4, &mut rng);
        p.zeros("a.bias", 1, 4);
        p.add("odd", Tensor::new(1, 3, vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]).unwrap());
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = sample_set();
        p.save_checkpoint(&path).unwrap();
        let q = ParamSet::load_checkpoint(&path).unwrap();
        assert_eq!(p.len(), q.len());
        for ((na, ta), (nb, tb)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_set().save_checkpoint(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            ParamSet::load_checkpoint(&path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn frozen_parameters_get_zero_gradient() {
        let p = sample_set();
        let tape = Tape::new();
        let sess = Session::train_with(&tape, &p, 0, |n| n.starts_with("a."));
        let ids: Vec<_> = p.ids().collect();
        let s1 = tape.sum(sess.var(ids[0])).unwrap();
        let s2 = tape.sum(sess.var(ids[2])).unwrap();
        let total = tape.add(&s1, &s2).unwrap();
        let grads = tape.backward(&total).unwrap();
        let g = sess.param_grads(&grads);
        assert!(g[0].iter().all(|&v| v == 0.0));
        assert_eq!(g[2], vec![1.0; 3]);
    }

    #[test]
    fn eval_session_records_nothing() {
        let mut rng = seed::rng(1);
        let mut p = ParamSet::new();
        let lin = Linear::new(&mut p, "lin", 3, 2, &mut rng);
        let tape = Tape::new();
        let mut sess = Session::eval(&tape, &p);
        let x = Tensor::new(4, 3, vec![0.5; 12]).unwrap();
        let y = lin.forward(&sess, &x).unwrap();
        let y = sess.dropout(&y, 0.3).unwrap();
        assert_eq!(y.shape(), (4, 2));
        assert!(tape.is_empty());
    }
}
