//! On-disk formats: token corpora (raw little-endian u32 ids plus a JSON
//! sidecar of document offsets) and packed sequence files (sequence-major ids
//! plus a sidecar carrying segment runs and provenance).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{PackStrategy, PackedSequence, ProvenanceSpan};
use crate::tokenizer;

/// Sidecar path convention: `<file>.json` appended to the data file's name.
pub fn sidecar_path(data_path: &Path) -> PathBuf {
    let mut name = data_path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    data_path.with_file_name(name)
}

fn tokens_to_bytes(tokens: &[u32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    bytes
}

fn bytes_to_tokens(bytes: &[u8], context: &str) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(format!(
            "{context}: byte length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusSidecar {
    docs: Vec<CorpusDocMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusDocMeta {
    id: String,
    offset: usize,
    len: usize,
}

/// Write a token corpus: concatenated ids with a sidecar of document extents.
pub fn write_corpus(path: &Path, docs: &[crate::packing::Document]) -> Result<()> {
    let mut all = Vec::new();
    let mut metas = Vec::with_capacity(docs.len());
    for d in docs {
        metas.push(CorpusDocMeta {
            id: d.doc_id.clone(),
            offset: all.len(),
            len: d.tokens.len(),
        });
        all.extend_from_slice(&d.tokens);
    }
    fs::write(path, tokens_to_bytes(&all))?;
    let sidecar = CorpusSidecar { docs: metas };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(())
}

/// Read a token corpus written by [`write_corpus`].
pub fn read_corpus(path: &Path) -> Result<Vec<crate::packing::Document>> {
    let bytes = fs::read(path)?;
    let tokens = bytes_to_tokens(&bytes, &path.display().to_string())?;
    let sidecar_text = fs::read_to_string(sidecar_path(path))?;
    let sidecar: CorpusSidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::format(format!("corpus sidecar: {e}")))?;
    let mut docs = Vec::with_capacity(sidecar.docs.len());
    for m in &sidecar.docs {
        let end = m.offset.checked_add(m.len).filter(|&e| e <= tokens.len());
        let end = end.ok_or_else(|| {
            Error::format(format!(
                "corpus sidecar: document {:?} extent {}..+{} exceeds {} tokens",
                m.id,
                m.offset,
                m.len,
                tokens.len()
            ))
        })?;
        docs.push(crate::packing::Document {
            doc_id: m.id.clone(),
            tokens: tokens[m.offset..end].to_vec(),
        });
    }
    Ok(docs)
}

/// Read a plain text or binary file as a single byte-tokenized document.
pub fn read_text_document(path: &Path) -> Result<crate::packing::Document> {
    let bytes = fs::read(path)?;
    let doc_id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(crate::packing::Document {
        doc_id,
        tokens: tokenizer::encode_bytes(&bytes),
    })
}

#[derive(Deserialize)]
struct JsonlRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
}

/// Read a JSON-lines corpus: one `{"id": ..., "text": ...}` object per line,
/// text byte-tokenized. Missing ids default to the line number.
pub fn read_jsonl_corpus(path: &Path) -> Result<Vec<crate::packing::Document>> {
    let text = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| {
            Error::format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        docs.push(crate::packing::Document {
            doc_id: rec.id.unwrap_or_else(|| format!("line{}", lineno + 1)),
            tokens: tokenizer::encode(&rec.text),
        });
    }
    Ok(docs)
}

#[derive(Debug, Serialize, Deserialize)]
struct PackedSidecar {
    target_len: usize,
    strategy: PackStrategy,
    num_sequences: usize,
    sequences: Vec<PackedSeqMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PackedSeqMeta {
    /// Run lengths of the canonical segment ids (0,0,..,1,1,..,2,..).
    segment_runs: Vec<usize>,
    provenance: Vec<ProvenanceSpan>,
}

/// Write packed sequences: sequence-major ids plus a sidecar with segment
/// runs and provenance.
pub fn write_packed(path: &Path, seqs: &[PackedSequence]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::input("refusing to write an empty packed corpus"));
    }
    let target_len = seqs[0].len();
    let strategy = seqs[0].strategy;
    let mut all = Vec::with_capacity(seqs.len() * target_len);
    let mut metas = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.len() != target_len || s.strategy != strategy {
            return Err(Error::input(
                "packed sequences must share one length and strategy",
            ));
        }
        all.extend_from_slice(&s.tokens);
        let mut runs = Vec::new();
        for (i, &g) in s.segment_ids.iter().enumerate() {
            if i == 0 || g != s.segment_ids[i - 1] {
                runs.push(0usize);
            }
            *runs.last_mut().expect("non-empty") += 1;
        }
        metas.push(PackedSeqMeta {
            segment_runs: runs,
            provenance: s.provenance.clone(),
        });
    }
    fs::write(path, tokens_to_bytes(&all))?;
    let sidecar = PackedSidecar {
        target_len,
        strategy,
        num_sequences: seqs.len(),
        sequences: metas,
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(())
}

/// Read a packed corpus written by [`write_packed`].
pub fn read_packed(path: &Path) -> Result<Vec<PackedSequence>> {
    let bytes = fs::read(path)?;
    let tokens = bytes_to_tokens(&bytes, &path.display().to_string())?;
    let sidecar_text = fs::read_to_string(sidecar_path(path))?;
    let sidecar: PackedSidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::format(format!("packed sidecar: {e}")))?;
    if sidecar.num_sequences != sidecar.sequences.len() {
        return Err(Error::format(format!(
            "packed sidecar: num_sequences {} does not match {} sequence entries",
            sidecar.num_sequences,
            sidecar.sequences.len()
        )));
    }
    if tokens.len() != sidecar.num_sequences * sidecar.target_len {
        return Err(Error::format(format!(
            "packed data holds {} tokens but sidecar promises {} sequences of {}",
            tokens.len(),
            sidecar.num_sequences,
            sidecar.target_len
        )));
    }
    let mut seqs = Vec::with_capacity(sidecar.num_sequences);
    for (i, meta) in sidecar.sequences.iter().enumerate() {
        let run_total: usize = meta.segment_runs.iter().sum();
        if run_total != sidecar.target_len || meta.segment_runs.iter().any(|&r| r == 0) {
            return Err(Error::format(format!(
                "packed sidecar: sequence {i} segment runs sum to {run_total}, \
                 expected {}",
                sidecar.target_len
            )));
        }
        let mut segment_ids = Vec::with_capacity(sidecar.target_len);
        for (seg, &run) in meta.segment_runs.iter().enumerate() {
            segment_ids.extend(std::iter::repeat(seg as u32).take(run));
        }
        seqs.push(PackedSequence {
            tokens: tokens[i * sidecar.target_len..(i + 1) * sidecar.target_len].to_vec(),
            segment_ids,
            strategy: sidecar.strategy,
            provenance: meta.provenance.clone(),
        });
    }
    Ok(seqs)
}
