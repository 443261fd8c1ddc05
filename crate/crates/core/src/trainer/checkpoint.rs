//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding `manifest.json`, one raw
//! little-endian f32 file per named tensor (row-major, `<name>.f32`), and
//! `ids.tsv` with the assignments frozen so far (doc_id TAB comma-separated
//! codes). Writes go to a temporary sibling directory first and are moved
//! into place at the end, so a crashed save never leaves a half-written
//! checkpoint behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Param, ParamStore, SemanticId};
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    /// Opaque echo of the run configuration that produced this artifact.
    #[serde(default)]
    pub run_config: serde_json::Value,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorInfo>,
    /// Completed ID positions (resume point).
    pub positions_done: usize,
    /// Whether ids.tsv carries a disambiguation suffix position.
    pub disambiguated: bool,
}

/// Everything needed to continue training or serve retrieval.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocabulary: Vocabulary,
    pub manifest: Manifest,
    /// `(doc_id, id)` in file order.
    pub assignments: Vec<(String, SemanticId)>,
}

/// State handed to [`save_checkpoint`].
pub struct CheckpointState<'a> {
    pub model: &'a Model,
    pub vocabulary: &'a Vocabulary,
    pub train_config: Option<&'a TrainConfig>,
    pub run_config: serde_json::Value,
    pub positions_done: usize,
    pub disambiguated: bool,
    pub assignments: &'a [(String, SemanticId)],
}

fn write_tensor(path: &Path, p: &Param) -> Result<()> {
    let mut buf = Vec::with_capacity(p.data.len() * 4);
    for v in &p.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_tensor(path: &Path, rows: usize, cols: usize) -> Result<Param> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::checkpoint(format!("missing tensor file {path:?}: {e}")))?
        .read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::checkpoint(format!(
            "tensor file {path:?} has {} bytes, expected {}",
            bytes.len(),
            rows * cols * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Param { rows, cols, data })
}

fn ids_line(doc_id: &str, id: &SemanticId) -> String {
    let codes: Vec<String> = id.full_codes().iter().map(|c| c.to_string()).collect();
    format!("{doc_id}\t{}", codes.join(","))
}

fn parse_ids_line(line: &str, line_no: usize, id_len: usize, disambiguated: bool) -> Result<(String, SemanticId)> {
    let mut parts = line.splitn(2, '\t');
    let doc_id = parts
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Parse {
            line: line_no,
            message: "missing doc_id".to_string(),
        })?;
    let codes_str = parts.next().ok_or_else(|| Error::Parse {
        line: line_no,
        message: "missing code column".to_string(),
    })?;
    let mut codes: Vec<u32> = Vec::new();
    for c in codes_str.split(',') {
        codes.push(c.trim().parse::<u32>().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad code {c:?}: {e}"),
        })?);
    }
    let id = if disambiguated {
        if codes.len() != id_len + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected {} codes (with suffix), got {}",
                    id_len + 1,
                    codes.len()
                ),
            });
        }
        let suffix = codes.pop().expect("nonempty");
        SemanticId::with_suffix(codes, suffix)
    } else {
        SemanticId::new(codes)
    };
    Ok((doc_id.to_string(), id))
}

/// Serializes the full training state into `dir`, replacing any existing
/// checkpoint there.
pub fn save_checkpoint(dir: &Path, state: &CheckpointState) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let stem = dir
        .file_name()
        .ok_or_else(|| Error::validation(format!("bad checkpoint path {dir:?}")))?
        .to_string_lossy()
        .to_string();
    let tmp: PathBuf = parent.join(format!(".{stem}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let tensors: Vec<TensorInfo> = state
        .model
        .params
        .iter()
        .map(|(name, p)| TensorInfo {
            name: name.to_string(),
            rows: p.rows,
            cols: p.cols,
        })
        .collect();
    for (name, p) in state.model.params.iter() {
        write_tensor(&tmp.join(format!("{name}.f32")), p)?;
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: state.model.cfg.clone(),
        train_config: state.train_config.cloned(),
        run_config: state.run_config.clone(),
        vocabulary: state.vocabulary.tokens().to_vec(),
        tensors,
        positions_done: state.positions_done,
        disambiguated: state.disambiguated,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::checkpoint(format!("manifest serialization: {e}")))?;
    fs::write(tmp.join("manifest.json"), manifest_json)?;

    let mut ids = fs::File::create(tmp.join("ids.tsv"))?;
    for (doc_id, id) in state.assignments {
        writeln!(ids, "{}", ids_line(doc_id, id))?;
    }
    ids.sync_all()?;
    drop(ids);

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Loads a checkpoint directory; fails without touching the filesystem
/// state if anything is missing, malformed or version-incompatible.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::checkpoint(format!("cannot read {manifest_path:?}: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::checkpoint(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.model_config.validate()?;

    let mut params = ParamStore::new();
    for info in &manifest.tensors {
        let p = read_tensor(&dir.join(format!("{}.f32", info.name)), info.rows, info.cols)?;
        params.insert(info.name.clone(), p);
    }
    let model = Model {
        cfg: manifest.model_config.clone(),
        params,
    };

    let vocabulary = Vocabulary::from_token_list(manifest.vocabulary.clone());

    let ids_path = dir.join("ids.tsv");
    let mut assignments = Vec::new();
    if ids_path.exists() {
        for (i, line) in fs::read_to_string(&ids_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            assignments.push(parse_ids_line(
                line,
                i + 1,
                manifest.positions_done,
                manifest.disambiguated,
            )?);
        }
    }

    Ok(Checkpoint {
        model,
        vocabulary,
        manifest,
        assignments,
    })
}

/// Writes an ids.tsv to an arbitrary path (the `assign` command's output).
pub fn write_ids_tsv(path: &Path, assignments: &[(String, SemanticId)]) -> Result<()> {
    let mut out = String::new();
    for (doc_id, id) in assignments {
        out.push_str(&ids_line(doc_id, id));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads an ids.tsv written by [`write_ids_tsv`]; code lengths are not
/// constrained here.
pub fn read_ids_tsv(path: &Path) -> Result<Vec<(String, Vec<u32>)>> {
    let mut out = Vec::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let doc_id = parts.next().unwrap_or_default().to_string();
        let codes_str = parts.next().ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "missing code column".to_string(),
        })?;
        let mut codes = Vec::new();
        for c in codes_str.split(',') {
            codes.push(c.trim().parse::<u32>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad code {c:?}: {e}"),
            })?);
        }
        out.push((doc_id, codes));
    }
    Ok(out)
}

/// Bitwise equality of two parameter stores, for resume verification.
pub fn params_identical(a: &ParamStore, b: &ParamStore) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b.iter()).all(|((na, pa), (nb, pb))| {
        na == nb
            && pa.rows == pb.rows
            && pa.cols == pb.cols
            && pa
                .data
                .iter()
                .zip(pb.data.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

/// Map view of assignments for joins against a corpus.
pub fn assignments_map(assignments: &[(String, SemanticId)]) -> BTreeMap<&str, &SemanticId> {
    assignments
        .iter()
        .map(|(id, sem)| (id.as_str(), sem))
        .collect()
}
