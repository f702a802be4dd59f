//! Dataset directory format.
//!
//! ```text
//! meta.json          {"num_nodes","num_classes","modalities":[{"name","dim"}],
//!                     "splits":{"train","val","test"},"labels"}
//! edges.csv          one "src,dst" line per undirected edge, src < dst
//! feat_<name>.f32    little-endian f32, row-major, num_nodes x dim
//! signals_<name>.f32 optional, little-endian f32, num_classes x dim
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Mag, Modality, Splits};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    num_nodes: usize,
    num_classes: usize,
    modalities: Vec<MetaModality>,
    splits: MetaSplits,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaModality {
    name: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaSplits {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (rows * cols * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(DataError::FeatureSize {
            path: path.to_path_buf(),
            expected,
            got: bytes.len() as u64,
        }
        .into());
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(rows, cols, data).expect("size checked"))
}

/// Writes `mag` into `dir` (created if missing).
pub fn save(mag: &Mag, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        num_nodes: mag.num_nodes(),
        num_classes: mag.num_classes(),
        modalities: mag
            .modalities()
            .iter()
            .map(|m| MetaModality {
                name: m.name.clone(),
                dim: m.dim,
            })
            .collect(),
        splits: MetaSplits {
            train: mag.splits().train.clone(),
            val: mag.splits().val.clone(),
            test: mag.splits().test.clone(),
        },
        labels: mag.labels().to_vec(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_vec(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

    let edges_path = dir.join("edges.csv");
    let file = fs::File::create(&edges_path).map_err(|e| Error::io(&edges_path, e))?;
    let mut w = BufWriter::new(file);
    for (u, v) in mag.adjacency().upper_edges() {
        writeln!(w, "{u},{v}").map_err(|e| Error::io(&edges_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&edges_path, e))?;

    for (m, modality) in mag.modalities().iter().enumerate() {
        write_f32(&dir.join(format!("feat_{}.f32", modality.name)), mag.features(m))?;
        if let Ok(signals) = mag.signals(m) {
            write_f32(&dir.join(format!("signals_{}.f32", modality.name)), signals)?;
        }
    }
    Ok(())
}

/// Reads a dataset directory written by [`save`] (or by hand).
pub fn load(dir: &Path) -> Result<Mag> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_slice(&raw).map_err(|e| DataError::MalformedMeta {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.labels.len() != meta.num_nodes {
        return Err(DataError::MalformedMeta {
            path: meta_path,
            reason: format!(
                "{} labels for num_nodes = {}",
                meta.labels.len(),
                meta.num_nodes
            ),
        }
        .into());
    }
    for m in &meta.modalities {
        if !super::valid_name(&m.name) {
            return Err(DataError::InvalidName(m.name.clone()).into());
        }
    }

    let edges_path = dir.join("edges.csv");
    let file = fs::File::open(&edges_path).map_err(|e| Error::io(&edges_path, e))?;
    let mut edges = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&edges_path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: String| DataError::MalformedEdges {
            path: edges_path.clone(),
            line: i + 1,
            reason,
        };
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| malformed("expected \"src,dst\"".into()))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| malformed(format!("{s:?}: {e}")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= v || v >= meta.num_nodes {
            return Err(malformed(format!(
                "edge {u},{v} must satisfy src < dst < {}",
                meta.num_nodes
            ))
            .into());
        }
        edges.push((u, v));
    }
    let adjacency = CsrMatrix::from_undirected_edges(meta.num_nodes, &edges).expect("range checked");

    let mut modalities = Vec::with_capacity(meta.modalities.len());
    let mut features = Vec::with_capacity(meta.modalities.len());
    let mut signals = Vec::new();
    for m in &meta.modalities {
        features.push(read_f32(
            &dir.join(format!("feat_{}.f32", m.name)),
            meta.num_nodes,
            m.dim,
        )?);
        let sig_path = dir.join(format!("signals_{}.f32", m.name));
        if sig_path.exists() {
            signals.push(read_f32(&sig_path, meta.num_classes, m.dim)?);
        }
        modalities.push(Modality {
            name: m.name.clone(),
            dim: m.dim,
        });
    }
    let signals = if !signals.is_empty() && signals.len() == modalities.len() {
        Some(signals)
    } else {
        None
    };
    let splits = Splits {
        train: meta.splits.train,
        val: meta.splits.val,
        test: meta.splits.test,
    };
    Ok(Mag::new(
        meta.num_classes,
        modalities,
        features,
        meta.labels,
        splits,
        &adjacency,
        signals,
    )?)
}
