//! Plain-directory model format: a JSON manifest plus one little-endian
//! binary blob per tensor. Full-precision tensors are stored as f32 (the
//! model generator only ever produces f32-representable values, so the
//! round trip is lossless); quantized tensors are stored as i32 codes
//! with f64 scale and i32 zero-point vectors and dequantized on load,
//! which reproduces the exact in-memory floats.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use loaq_core::matrix::{CodeMatrix, DenseMatrix};
use loaq_core::model::{ModelDims, QuantizedWeight, SubLayer, SubLayerKind, ToyModel, Weight};
use loaq_core::quant::{QuantAxis, QuantParams};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dims: ModelDims,
    norm_eps: f64,
    hadamard: bool,
    act_bits: Option<u32>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: [usize; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    axis: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Float,
    Quant,
}

/// Writes `bytes` to `path` atomically (temp file, then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension()
            .map(|e| e.to_string_lossy() + ".")
            .unwrap_or_default()
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} into place", tmp.display()))?;
    Ok(())
}

fn f32_bytes(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.as_slice().len() * 4);
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn i32_bytes(values: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn tensor_names(dims: &ModelDims) -> Vec<(String, SubLayerKind, &'static str)> {
    let mut names = Vec::new();
    for pair in 0..dims.layers {
        for (kind, kname) in [(SubLayerKind::Attn, "attn"), (SubLayerKind::Mlp, "mlp")] {
            for slot in ["w_in", "w_out"] {
                names.push((format!("layers.{pair}.{kname}.{slot}"), kind, slot));
            }
        }
    }
    names
}

/// Serializes a model into `dir` (manifest + per-tensor blobs).
pub fn save_model(model: &ToyModel, dir: &Path) -> Result<()> {
    let tensors_dir = dir.join("tensors");
    fs::create_dir_all(&tensors_dir)
        .with_context(|| format!("creating {}", tensors_dir.display()))?;

    let mut entries = Vec::new();
    let write_full = |name: &str, m: &DenseMatrix| -> Result<TensorEntry> {
        atomic_write(&tensors_dir.join(format!("{name}.bin")), &f32_bytes(m))?;
        Ok(TensorEntry {
            name: name.to_string(),
            kind: TensorKind::Float,
            shape: [m.rows(), m.cols()],
            bits: None,
            axis: None,
        })
    };

    entries.push(write_full("embed", &model.embed)?);
    for (idx, (name, _, slot)) in tensor_names(&model.dims).iter().enumerate() {
        let sublayer = &model.layers[idx / 2];
        let weight = if *slot == "w_in" {
            &sublayer.w_in
        } else {
            &sublayer.w_out
        };
        match weight {
            Weight::Full(m) => entries.push(write_full(name, m)?),
            Weight::Quantized { quant, dequant } => {
                atomic_write(
                    &tensors_dir.join(format!("{name}.codes.bin")),
                    &i32_bytes(quant.codes.as_slice()),
                )?;
                atomic_write(
                    &tensors_dir.join(format!("{name}.scale.bin")),
                    &f64_bytes(quant.params.scale()),
                )?;
                atomic_write(
                    &tensors_dir.join(format!("{name}.zp.bin")),
                    &i32_bytes(quant.params.zero_point()),
                )?;
                entries.push(TensorEntry {
                    name: name.clone(),
                    kind: TensorKind::Quant,
                    shape: [dequant.rows(), dequant.cols()],
                    bits: Some(quant.params.bits()),
                    axis: Some("per_output_channel".to_string()),
                });
            }
        }
    }
    entries.push(write_full("head", &model.head)?);

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dims: model.dims,
        norm_eps: model.norm_eps,
        hadamard: model.hadamard,
        act_bits: model.act_bits,
        dtype: "f32".to_string(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    atomic_write(&dir.join("manifest.json"), format!("{json}\n").as_bytes())?;
    Ok(())
}

fn read_blob(dir: &Path, file: &str, expected_bytes: usize, tensor: &str) -> Result<Vec<u8>> {
    let path = dir.join("tensors").join(file);
    let bytes = fs::read(&path)
        .with_context(|| format!("tensor '{tensor}': reading {}", path.display()))?;
    if bytes.len() != expected_bytes {
        bail!(
            "tensor '{tensor}': blob {} has {} bytes, manifest shape needs {}",
            path.display(),
            bytes.len(),
            expected_bytes
        );
    }
    Ok(bytes)
}

fn read_f32_matrix(dir: &Path, entry: &TensorEntry) -> Result<DenseMatrix> {
    let [rows, cols] = entry.shape;
    let bytes = read_blob(
        dir,
        &format!("{}.bin", entry.name),
        rows * cols * 4,
        &entry.name,
    )?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DenseMatrix::from_vec(rows, cols, data)
        .map_err(|e| anyhow::anyhow!("tensor '{}': {e}", entry.name))
}

fn read_quant_weight(dir: &Path, entry: &TensorEntry) -> Result<Weight> {
    let [rows, cols] = entry.shape;
    let bits = entry
        .bits
        .with_context(|| format!("tensor '{}': quant entry missing bits", entry.name))?;
    let code_bytes = read_blob(
        dir,
        &format!("{}.codes.bin", entry.name),
        rows * cols * 4,
        &entry.name,
    )?;
    let codes: Vec<i32> = code_bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let scale_bytes = read_blob(
        dir,
        &format!("{}.scale.bin", entry.name),
        cols * 8,
        &entry.name,
    )?;
    let scale: Vec<f64> = scale_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let zp_bytes = read_blob(
        dir,
        &format!("{}.zp.bin", entry.name),
        cols * 4,
        &entry.name,
    )?;
    let zero_point: Vec<i32> = zp_bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let params = QuantParams::new(bits, QuantAxis::PerOutputChannel, scale, zero_point)
        .map_err(|e| anyhow::anyhow!("tensor '{}': {e}", entry.name))?;
    let qmax = params.qmax();
    if codes.iter().any(|&c| c < 0 || c > qmax) {
        bail!("tensor '{}': code outside [0, {qmax}]", entry.name);
    }
    let codes = CodeMatrix::from_vec(rows, cols, codes)
        .map_err(|e| anyhow::anyhow!("tensor '{}': {e}", entry.name))?;
    Ok(Weight::quantized(QuantizedWeight { codes, params }))
}

/// Loads a model directory, validating shapes against the manifest and
/// dequantizing code tensors.
pub fn load_model(dir: &Path) -> Result<ToyModel> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    if manifest.format_version != FORMAT_VERSION {
        bail!("unsupported format version {}", manifest.format_version);
    }
    let dims = manifest.dims;
    dims.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    let find = |name: &str| -> Result<&TensorEntry> {
        manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .with_context(|| format!("tensor '{name}' missing from manifest"))
    };
    let expect_shape = |entry: &TensorEntry, rows: usize, cols: usize| -> Result<()> {
        if entry.shape != [rows, cols] {
            bail!(
                "tensor '{}': manifest shape {:?} does not match model dims [{rows}, {cols}]",
                entry.name,
                entry.shape
            );
        }
        Ok(())
    };

    let n = dims.d_model;
    let embed_entry = find("embed")?;
    expect_shape(embed_entry, dims.vocab, n)?;
    let embed = read_f32_matrix(dir, embed_entry)?;

    let mut layers = Vec::with_capacity(dims.sublayers());
    let names = tensor_names(&dims);
    for pair in names.chunks(2) {
        let (in_name, kind, _) = &pair[0];
        let (out_name, _, _) = &pair[1];
        let (in_rows, in_cols, out_rows) = match kind {
            SubLayerKind::Attn => (n, 3 * n, n),
            SubLayerKind::Mlp => (n, 2 * dims.d_ff, dims.d_ff),
        };
        let in_entry = find(in_name)?;
        expect_shape(in_entry, in_rows, in_cols)?;
        let out_entry = find(out_name)?;
        expect_shape(out_entry, out_rows, n)?;
        let read_weight = |entry: &TensorEntry| -> Result<Weight> {
            match entry.kind {
                TensorKind::Float => Ok(Weight::Full(read_f32_matrix(dir, entry)?)),
                TensorKind::Quant => read_quant_weight(dir, entry),
            }
        };
        layers.push(SubLayer {
            kind: *kind,
            w_in: read_weight(in_entry)?,
            w_out: read_weight(out_entry)?,
        });
    }

    let head_entry = find("head")?;
    expect_shape(head_entry, n, dims.vocab)?;
    let head = read_f32_matrix(dir, head_entry)?;

    Ok(ToyModel {
        dims,
        norm_eps: manifest.norm_eps,
        hadamard: manifest.hadamard,
        act_bits: manifest.act_bits,
        embed,
        layers,
        head,
    })
}
