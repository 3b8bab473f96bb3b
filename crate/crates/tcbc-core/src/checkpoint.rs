//! Checkpoint persistence: all training-state arrays in one flat binary
//! file of little-endian f64 values, described by a JSON manifest with
//! names, shapes and offsets.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};
use crate::trainer::TrainerSnapshot;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the binary file, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed_hex: String,
    word_pos: String,
    stream: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    iteration: u64,
    arch: Architecture,
    config_sha256: String,
    bias_initialized: bool,
    rng: RngState,
    arrays: Vec<ArrayEntry>,
}

struct BinWriter {
    data: Vec<f64>,
    entries: Vec<ArrayEntry>,
}

impl BinWriter {
    fn new() -> Self {
        Self { data: Vec::new(), entries: Vec::new() }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.entries.push(ArrayEntry {
            name,
            shape,
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend_from_slice(values);
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Format("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|e| Error::Format(format!("bad hex: {e}")))
        })
        .collect()
}

/// Writes `<stem>.bin` and `<stem>.json` for a snapshot. Returns both paths.
pub fn write_checkpoint(
    snapshot: &TrainerSnapshot,
    stem: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let mut writer = BinWriter::new();
    for (name, shape, values) in snapshot.params.named_arrays() {
        writer.push(format!("params.{name}"), shape, &values);
    }
    for (name, shape, values) in snapshot.ema_params.named_arrays() {
        writer.push(format!("ema.{name}"), shape, &values);
    }
    let k = snapshot.bias_d.len();
    let window_flat: Vec<f64> =
        snapshot.counter_window.iter().flat_map(|row| row.iter().copied()).collect();
    writer.push(
        "counter_window".into(),
        vec![snapshot.counter_window.len(), k],
        &window_flat,
    );
    writer.push("bias_d".into(), vec![k], &snapshot.bias_d);

    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        iteration: snapshot.iteration,
        arch: snapshot.params.arch(),
        config_sha256: snapshot.config_sha256.clone(),
        bias_initialized: snapshot.bias_initialized,
        rng: RngState {
            seed_hex: hex_encode(&snapshot.rng_seed),
            word_pos: snapshot.rng_word_pos.to_string(),
            stream: snapshot.rng_stream,
        },
        arrays: writer.entries,
    };

    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");

    let mut bytes = Vec::with_capacity(writer.data.len() * 8);
    for v in &writer.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes)?;

    let mut file = fs::File::create(&json_path)?;
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n")?;
    Ok((bin_path, json_path))
}

/// Reads a checkpoint written by [`write_checkpoint`] from its stem path.
pub fn read_checkpoint(stem: &Path) -> Result<TrainerSnapshot> {
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");
    let manifest: CheckpointManifest = serde_json::from_reader(fs::File::open(&json_path)?)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint schema version {}",
            manifest.schema_version
        )));
    }

    let bytes = fs::read(&bin_path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("checkpoint binary is not a multiple of 8 bytes".into()));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut arrays: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for entry in &manifest.arrays {
        let end = entry.offset + entry.len;
        if end > data.len() {
            return Err(Error::Format(format!(
                "array {} extends past the end of the binary",
                entry.name
            )));
        }
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Format(format!("array {} shape/len mismatch", entry.name)));
        }
        arrays.insert(entry.name.clone(), (entry.shape.clone(), data[entry.offset..end].to_vec()));
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing array {name}")))
    };

    let param_names: &[&str] =
        if manifest.arch.is_linear() { &["w", "b"] } else { &["w1", "b1", "w2", "b2"] };
    let mut params_map = HashMap::new();
    let mut ema_map = HashMap::new();
    for name in param_names {
        params_map.insert(name.to_string(), take(&format!("params.{name}"))?);
        ema_map.insert(name.to_string(), take(&format!("ema.{name}"))?);
    }
    let params = ModelParams::from_named_arrays(manifest.arch, params_map)?;
    let ema_params = ModelParams::from_named_arrays(manifest.arch, ema_map)?;

    let (window_shape, window_flat) = take("counter_window")?;
    if window_shape.len() != 2 {
        return Err(Error::Format("counter_window must be two-dimensional".into()));
    }
    let (rows, k) = (window_shape[0], window_shape[1]);
    let counter_window: Vec<Vec<f64>> =
        (0..rows).map(|r| window_flat[r * k..(r + 1) * k].to_vec()).collect();

    let (bias_shape, bias_d) = take("bias_d")?;
    if bias_shape != [manifest.arch.num_classes] {
        return Err(Error::Format("bias_d shape mismatch".into()));
    }

    let seed_bytes = hex_decode(&manifest.rng.seed_hex)?;
    let rng_seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
    let rng_word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|e| Error::Format(format!("bad rng word position: {e}")))?;

    Ok(TrainerSnapshot {
        iteration: manifest.iteration,
        params,
        ema_params,
        counter_window,
        bias_d,
        bias_initialized: manifest.bias_initialized,
        rng_seed,
        rng_word_pos,
        rng_stream: manifest.rng.stream,
        config_sha256: manifest.config_sha256,
    })
}
