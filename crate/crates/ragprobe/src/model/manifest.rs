// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk model format: a human-readable manifest plus a raw weight blob.
//!
//! A saved model is a directory holding two files:
//!
//! * `model.manifest` — text. A magic line, `key = value` config lines, then
//!   one `tensor <name> <dims> f32 <file> <byte-offset>` line per tensor.
//! * `weights.bin` — every tensor's data, little-endian `f32`, row-major,
//!   concatenated in manifest order.
//!
//! The manifest is the source of truth for shapes; loading verifies every
//! tensor against the declared config and fails closed on anything missing,
//! malformed, or out of range.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::{LayerWeights, ModelConfig, PositionalScheme, TransformerModel};
use crate::error::{Error, Result};

const MAGIC: &str = "ragprobe-manifest v1";
const MANIFEST_FILE: &str = "model.manifest";
const WEIGHTS_FILE: &str = "weights.bin";

enum TensorRef<'a> {
    Mat(&'a Array2<f32>),
    Vec(&'a Array1<f32>),
}

impl TensorRef<'_> {
    fn dims(&self) -> Vec<usize> {
        match self {
            TensorRef::Mat(m) => vec![m.nrows(), m.ncols()],
            TensorRef::Vec(v) => vec![v.len()],
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        match self {
            TensorRef::Mat(m) => {
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        out.extend_from_slice(&m[[r, c]].to_le_bytes());
                    }
                }
            }
            TensorRef::Vec(v) => {
                for x in v.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
}

/// The canonical tensor order: embeddings, per-layer weights, readout.
fn catalog(model: &TransformerModel) -> Vec<(String, TensorRef<'_>)> {
    let mut list: Vec<(String, TensorRef)> = Vec::new();
    list.push(("embed.tokens".into(), TensorRef::Mat(&model.embed_tokens)));
    if let Some(pos) = &model.embed_pos {
        list.push(("embed.pos".into(), TensorRef::Mat(pos)));
    }
    for (i, lw) in model.layers.iter().enumerate() {
        list.push((format!("layers.{i}.ln1.scale"), TensorRef::Vec(&lw.ln1_scale)));
        list.push((format!("layers.{i}.ln1.bias"), TensorRef::Vec(&lw.ln1_bias)));
        list.push((format!("layers.{i}.attn.w_q"), TensorRef::Mat(&lw.w_q)));
        list.push((format!("layers.{i}.attn.w_k"), TensorRef::Mat(&lw.w_k)));
        list.push((format!("layers.{i}.attn.w_v"), TensorRef::Mat(&lw.w_v)));
        list.push((format!("layers.{i}.attn.w_o"), TensorRef::Mat(&lw.w_o)));
        list.push((format!("layers.{i}.attn.b_o"), TensorRef::Vec(&lw.b_o)));
        list.push((format!("layers.{i}.ln2.scale"), TensorRef::Vec(&lw.ln2_scale)));
        list.push((format!("layers.{i}.ln2.bias"), TensorRef::Vec(&lw.ln2_bias)));
        list.push((format!("layers.{i}.mlp.w_in"), TensorRef::Mat(&lw.w_in)));
        list.push((format!("layers.{i}.mlp.w_out"), TensorRef::Mat(&lw.w_out)));
    }
    list.push(("final_ln.scale".into(), TensorRef::Vec(&model.final_ln_scale)));
    list.push(("final_ln.bias".into(), TensorRef::Vec(&model.final_ln_bias)));
    list.push(("unembed.w".into(), TensorRef::Mat(&model.unembed)));
    list
}

/// Write `model` into `dir` (created if absent) as manifest + weight blob.
/// Saving the same model twice produces byte-identical files.
pub fn save_model(model: &TransformerModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &model.config;

    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("n_layers = {}\n", c.n_layers));
    manifest.push_str(&format!("n_heads = {}\n", c.n_heads));
    manifest.push_str(&format!("d_model = {}\n", c.d_model));
    manifest.push_str(&format!("d_head = {}\n", c.d_head));
    manifest.push_str(&format!("d_mlp = {}\n", c.d_mlp));
    manifest.push_str(&format!("vocab_size = {}\n", c.vocab_size));
    manifest.push_str(&format!("max_seq_len = {}\n", c.max_seq_len));
    manifest.push_str(&format!("positional_scheme = {}\n", c.positional_scheme));

    for (name, tensor) in catalog(model) {
        let offset = blob.len();
        tensor.write_to(&mut blob);
        let dims = tensor
            .dims()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("tensor {name} {dims} f32 {WEIGHTS_FILE} {offset}\n"));
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let mut f = fs::File::create(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(&weights_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

struct TensorEntry {
    dims: Vec<usize>,
    file: String,
    offset: usize,
    line: usize,
}

/// Load a model from a directory written by [`save_model`] (or from a direct
/// path to a manifest file).
pub fn load_model(path: &Path) -> Result<TransformerModel> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let err = |line: usize, message: String| Error::Manifest {
        path: manifest_path.clone(),
        line,
        message,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == MAGIC => {}
        Some((_, first)) => {
            return Err(err(1, format!("expected `{MAGIC}`, found `{}`", first.trim())))
        }
        None => return Err(err(1, "empty manifest".into())),
    }

    let mut keys: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut tensors: BTreeMap<String, TensorEntry> = BTreeMap::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(err(
                    lineno,
                    "tensor line needs: tensor <name> <dims> f32 <file> <offset>".into(),
                ));
            }
            if parts[2] != "f32" {
                return Err(err(lineno, format!("unsupported dtype `{}`", parts[2])));
            }
            let dims: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(lineno, format!("bad dims `{}`", parts[1])))?;
            if dims.is_empty() || dims.len() > 2 {
                return Err(err(lineno, format!("bad dims `{}`", parts[1])));
            }
            let offset = parts[4]
                .parse::<usize>()
                .map_err(|_| err(lineno, format!("bad offset `{}`", parts[4])))?;
            if tensors
                .insert(
                    parts[0].to_string(),
                    TensorEntry {
                        dims,
                        file: parts[3].to_string(),
                        offset,
                        line: lineno,
                    },
                )
                .is_some()
            {
                return Err(err(lineno, format!("duplicate tensor `{}`", parts[0])));
            }
        } else if let Some((key, value)) = line.split_once('=') {
            let key = key.trim().to_string();
            if keys
                .insert(key.clone(), (lineno, value.trim().to_string()))
                .is_some()
            {
                return Err(err(lineno, format!("duplicate key `{key}`")));
            }
        } else {
            return Err(err(lineno, format!("unparseable line `{line}`")));
        }
    }

    let mut take = |key: &str| -> Result<(usize, String)> {
        keys.remove(key)
            .ok_or_else(|| err(0, format!("missing config key `{key}`")))
    };
    let parse_dim = |key: &str, pair: (usize, String)| -> Result<usize> {
        pair.1
            .parse::<usize>()
            .map_err(|_| err(pair.0, format!("bad value for `{key}`: `{}`", pair.1)))
    };
    let config = ModelConfig {
        n_layers: parse_dim("n_layers", take("n_layers")?)?,
        n_heads: parse_dim("n_heads", take("n_heads")?)?,
        d_model: parse_dim("d_model", take("d_model")?)?,
        d_head: parse_dim("d_head", take("d_head")?)?,
        d_mlp: parse_dim("d_mlp", take("d_mlp")?)?,
        vocab_size: parse_dim("vocab_size", take("vocab_size")?)?,
        max_seq_len: parse_dim("max_seq_len", take("max_seq_len")?)?,
        positional_scheme: {
            let (lineno, value) = take("positional_scheme")?;
            value
                .parse::<PositionalScheme>()
                .map_err(|e| err(lineno, e.to_string()))?
        },
    };
    if let Some((key, (lineno, _))) = keys.into_iter().next() {
        return Err(err(lineno, format!("unknown config key `{key}`")));
    }
    config.validate()?;

    // Read each referenced blob file once.
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in tensors.values() {
        if !blobs.contains_key(&entry.file) {
            let p: PathBuf = base.join(&entry.file);
            blobs.insert(entry.file.clone(), fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }

    let fetch = |name: &str, expect: &[usize]| -> Result<Vec<f32>> {
        let entry = tensors.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })?;
        if entry.dims != expect {
            return Err(Error::ShapeMismatch {
                tensor: name.to_string(),
                expected: expect.to_vec(),
                actual: entry.dims.clone(),
            });
        }
        let numel: usize = entry.dims.iter().product();
        let bytes = &blobs[&entry.file];
        let endpoint = entry
            .offset
            .checked_add(numel * 4)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| err(entry.line, format!("tensor `{name}` data out of range")))?;
        Ok(bytes[entry.offset..endpoint]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let mat = |name: &str, rows: usize, cols: usize| -> Result<Array2<f32>> {
        let data = fetch(name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("numel checked"))
    };
    let vec1 = |name: &str, len: usize| -> Result<Array1<f32>> {
        Ok(Array1::from_vec(fetch(name, &[len])?))
    };

    let d = config.d_model;
    let embed_tokens = mat("embed.tokens", config.vocab_size, d)?;
    let embed_pos = match config.positional_scheme {
        PositionalScheme::LearnedAbsolute => Some(mat("embed.pos", config.max_seq_len, d)?),
        PositionalScheme::Rotary => None,
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerWeights {
            ln1_scale: vec1(&format!("layers.{i}.ln1.scale"), d)?,
            ln1_bias: vec1(&format!("layers.{i}.ln1.bias"), d)?,
            w_q: mat(&format!("layers.{i}.attn.w_q"), d, d)?,
            w_k: mat(&format!("layers.{i}.attn.w_k"), d, d)?,
            w_v: mat(&format!("layers.{i}.attn.w_v"), d, d)?,
            w_o: mat(&format!("layers.{i}.attn.w_o"), d, d)?,
            b_o: vec1(&format!("layers.{i}.attn.b_o"), d)?,
            ln2_scale: vec1(&format!("layers.{i}.ln2.scale"), d)?,
            ln2_bias: vec1(&format!("layers.{i}.ln2.bias"), d)?,
            w_in: mat(&format!("layers.{i}.mlp.w_in"), d, config.d_mlp)?,
            w_out: mat(&format!("layers.{i}.mlp.w_out"), config.d_mlp, d)?,
        });
    }
    let final_ln_scale = vec1("final_ln.scale", d)?;
    let final_ln_bias = vec1("final_ln.bias", d)?;
    let unembed = mat("unembed.w", d, config.vocab_size)?;

    TransformerModel::from_parts(
        config,
        embed_tokens,
        embed_pos,
        layers,
        final_ln_scale,
        final_ln_bias,
        unembed,
    )
}
