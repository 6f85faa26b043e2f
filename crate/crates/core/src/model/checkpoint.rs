//! Checkpoint serialization.
//!
//! Layout: one JSON header line (format tag, model config, step, master
//! seed, tensor manifest), a newline, then raw little-endian f32 tensor
//! payloads in manifest order — parameters first, then optimizer first and
//! second moments when present. Context extension rewrites only the header
//! line and copies the payload bytes verbatim, so weights survive the
//! operation bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{scaling_factor, NtkMode, RopeConfig, ScalingReport};

use super::{ModelConfig, Parameters};

/// Format tag carried in every checkpoint header.
pub const CHECKPOINT_FORMAT: &str = "longwave-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    step: u64,
    seed: u64,
    optimizer: bool,
    tensors: Vec<TensorMeta>,
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub config: ModelConfig,
    pub params: Parameters<f32>,
    /// AdamW first and second moments, if the checkpoint was saved mid-run.
    pub optim: Option<(Parameters<f32>, Parameters<f32>)>,
    pub step: u64,
    /// Master seed of the run; all randomness re-derives from (seed, step),
    /// so this is the complete sampler state.
    pub seed: u64,
}

fn manifest_of(params: &Parameters<f32>) -> Vec<TensorMeta> {
    params
        .tensors()
        .into_iter()
        .map(|(name, t)| TensorMeta { name, len: t.len() as u64 })
        .collect()
}

fn check_same_shapes(a: &Parameters<f32>, b: &Parameters<f32>, what: &str) -> Result<()> {
    let am = manifest_of(a);
    let bm = manifest_of(b);
    if am.len() != bm.len() || am.iter().zip(&bm).any(|(x, y)| x.len != y.len) {
        return Err(Error::config(format!("{what} shapes do not match the parameters")));
    }
    Ok(())
}

fn write_tensors(w: &mut impl Write, params: &Parameters<f32>) -> Result<()> {
    for (_, t) in params.tensors() {
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for &v in t {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read, params: &mut Parameters<f32>) -> Result<()> {
    for (name, t) in params.tensors_mut() {
        let mut bytes = vec![0u8; t.len() * 4];
        r.read_exact(&mut bytes).map_err(|e| {
            Error::format(format!("checkpoint truncated while reading '{name}': {e}"))
        })?;
        for (dst, chunk) in t.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    Ok(())
}

/// Write a checkpoint. `optim` carries the AdamW (m, v) moments for resumable
/// training; omit it for final or pre-training-only artifacts.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &Parameters<f32>,
    optim: Option<(&Parameters<f32>, &Parameters<f32>)>,
    step: u64,
    seed: u64,
) -> Result<()> {
    config.validate()?;
    let reference = Parameters::<f32>::zeros(config)?;
    check_same_shapes(params, &reference, "parameter")?;
    if let Some((m, v)) = optim {
        check_same_shapes(m, &reference, "first-moment")?;
        check_same_shapes(v, &reference, "second-moment")?;
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        step,
        seed,
        optimizer: optim.is_some(),
        tensors: manifest_of(params),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    write_tensors(&mut w, params)?;
    if let Some((m, v)) = optim {
        write_tensors(&mut w, m)?;
        write_tensors(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl BufRead) -> Result<(Header, usize)> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Err(Error::format("empty checkpoint file"));
    }
    let header: Header = serde_json::from_str(line.trim_end_matches('\n'))
        .map_err(|e| Error::format(format!("unreadable checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::format(format!(
            "unsupported checkpoint format '{}' (expected '{CHECKPOINT_FORMAT}')",
            header.format
        )));
    }
    header.config.validate()?;
    Ok((header, n))
}

/// Read and validate a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, _) = read_header(&mut r)?;
    let mut params = Parameters::<f32>::zeros(&header.config)?;
    let expected = manifest_of(&params);
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|(e, h)| e.name != h.name || e.len != h.len)
    {
        return Err(Error::format(
            "checkpoint tensor manifest does not match the declared model config",
        ));
    }
    read_tensors(&mut r, &mut params)?;
    let optim = if header.optimizer {
        let mut m = Parameters::<f32>::zeros(&header.config)?;
        let mut v = Parameters::<f32>::zeros(&header.config)?;
        read_tensors(&mut r, &mut m)?;
        read_tensors(&mut r, &mut v)?;
        Some((m, v))
    } else {
        None
    };
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("checkpoint has trailing bytes after the declared tensors"));
    }
    Ok(LoadedCheckpoint {
        config: header.config,
        params,
        optim,
        step: header.step,
        seed: header.seed,
    })
}

/// Rewrite a checkpoint's rotary configuration for a longer target context.
///
/// Only the header changes: the new scaling mode and target are recorded and
/// `max_positions` grows to match, while every payload byte is copied
/// verbatim. Returns the scaling reports before and after the rewrite.
pub fn extend_checkpoint(
    src: &Path,
    dst: &Path,
    target_context: usize,
    mode: NtkMode,
) -> Result<(ScalingReport, ScalingReport)> {
    let src_size = std::fs::metadata(src)?.len();
    let mut r = BufReader::new(File::open(src)?);
    let (mut header, header_bytes) = read_header(&mut r)?;
    if target_context < header.config.rope.train_context {
        return Err(Error::config(format!(
            "target context {target_context} is below the trained context {}",
            header.config.rope.train_context
        )));
    }
    let before = scaling_factor(&header.config.rope)?;
    let new_rope = RopeConfig {
        base: header.config.rope.base,
        head_dim: header.config.rope.head_dim,
        train_context: header.config.rope.train_context,
        target_context,
        mode,
    };
    let after = scaling_factor(&new_rope)?;
    header.config.rope = new_rope;
    header.config.max_positions = target_context;

    let payload: u64 = src_size - header_bytes as u64;
    let per_pass: u64 = header.tensors.iter().map(|t| t.len * 4).sum();
    let passes = if header.optimizer { 3 } else { 1 };
    if payload != per_pass * passes {
        return Err(Error::format(format!(
            "checkpoint payload is {payload} bytes but the manifest declares {}",
            per_pass * passes
        )));
    }

    let mut w = BufWriter::new(File::create(dst)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let copied = std::io::copy(&mut r, &mut w)?;
    w.flush()?;
    if copied != payload {
        return Err(Error::format("payload copy came up short"));
    }
    Ok((before, after))
}
