//! Versioned binary checkpoint container.
//!
//! Layout: 4-byte magic `NCAL`, little-endian u32 format version, a
//! little-endian u32 header byte length, a UTF-8 header block, then the
//! payload of little-endian f64 arrays.
//!
//! The header holds `key = value` metadata lines plus one
//! `array <name> <rows> <cols>` line per payload array, in payload order;
//! the declared sizes must account for the payload exactly. Floats in
//! metadata are written with 17 significant digits so the round trip is
//! bit-exact.

use crate::{CliError, CliResult};
use ncal_core::model::{Adapter, FrozenDecoder, LinearAdapter, LinearBackbone, ResidualAdapter};
use ncal_core::numerics::DenseMatrix;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"NCAL";
pub const FORMAT_VERSION: u32 = 1;

/// In-memory checkpoint: ordered named arrays plus metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, DenseMatrix)>,
}

impl Checkpoint {
    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_f64(&self, key: &str) -> CliResult<f64> {
        self.meta
            .get(key)
            .ok_or_else(|| CliError::Io(format!("checkpoint missing metadata '{key}'")))?
            .parse::<f64>()
            .map_err(|_| CliError::Io(format!("checkpoint metadata '{key}' is not a number")))
    }

    pub fn push_array(&mut self, name: &str, m: &DenseMatrix) {
        self.arrays.push((name.to_string(), m.clone()));
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) {
        self.arrays.push((
            name.to_string(),
            DenseMatrix::from_vec(1, v.len(), v.to_vec()).expect("finite vector"),
        ));
    }

    pub fn array(&self, name: &str) -> CliResult<&DenseMatrix> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CliError::Io(format!("checkpoint missing array '{name}'")))
    }

    pub fn vector(&self, name: &str) -> CliResult<Vec<f64>> {
        Ok(self.array(name)?.data().to_vec())
    }

    /// Serializes to the container byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str(&format!("{k} = {v}\n"));
        }
        for (name, m) in &self.arrays {
            header.push_str(&format!("array {name} {} {}\n", m.rows(), m.cols()));
        }
        let header_bytes = header.as_bytes();

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(header_bytes);
        for (_, m) in &self.arrays {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out
    }

    /// Parses the container byte format, enforcing magic, version and the
    /// header/payload length agreement.
    pub fn from_bytes(bytes: &[u8]) -> CliResult<Checkpoint> {
        if bytes.len() < 12 {
            return Err(CliError::Io("checkpoint truncated: missing header".to_string()));
        }
        if bytes[0..4] != MAGIC {
            return Err(CliError::Io(format!(
                "bad checkpoint magic {:?}, expected {:?}",
                &bytes[0..4],
                MAGIC
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CliError::Io(format!(
                "checkpoint format version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(CliError::Io("checkpoint truncated: incomplete header".to_string()));
        }
        let header = std::str::from_utf8(&bytes[12..12 + header_len])
            .map_err(|_| CliError::Io("checkpoint header is not valid UTF-8".to_string()))?;

        let mut meta = BTreeMap::new();
        let mut layout: Vec<(String, usize, usize)> = Vec::new();
        for line in header.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("array ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(CliError::Io(format!("bad array declaration '{line}'")));
                }
                let rows = parts[1]
                    .parse::<usize>()
                    .map_err(|_| CliError::Io(format!("bad array rows in '{line}'")))?;
                let cols = parts[2]
                    .parse::<usize>()
                    .map_err(|_| CliError::Io(format!("bad array cols in '{line}'")))?;
                layout.push((parts[0].to_string(), rows, cols));
            } else if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(CliError::Io(format!("bad header line '{line}'")));
            }
        }

        let declared: usize = layout.iter().map(|(_, r, c)| r * c * 8).sum();
        let payload = &bytes[12 + header_len..];
        if payload.len() != declared {
            return Err(CliError::Io(format!(
                "checkpoint payload is {} bytes but the header declares {declared}",
                payload.len()
            )));
        }

        let mut arrays = Vec::with_capacity(layout.len());
        let mut off = 0;
        for (name, rows, cols) in layout {
            let n = rows * cols;
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let b: [u8; 8] = payload[off + i * 8..off + i * 8 + 8].try_into().unwrap();
                data.push(f64::from_le_bytes(b));
            }
            off += n * 8;
            let m = DenseMatrix::from_vec(rows, cols, data)
                .map_err(|e| CliError::Io(format!("array '{name}': {e}")))?;
            arrays.push((name, m));
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes backbone, adapter and decoder into a checkpoint.
pub fn pack_models(
    ckpt: &mut Checkpoint,
    backbone: &LinearBackbone,
    adapter: &Adapter,
    decoder: &FrozenDecoder,
) {
    ckpt.push_array("backbone.w", &backbone.w);
    ckpt.push_vector("backbone.b", &backbone.b);
    match adapter {
        Adapter::Mlp(a) => {
            ckpt.set_meta("adapter.kind", "mlp");
            ckpt.push_array("adapter.w1", &a.w1);
            ckpt.push_vector("adapter.b1", &a.b1);
            ckpt.push_array("adapter.w2", &a.w2);
            ckpt.push_vector("adapter.b2", &a.b2);
            ckpt.push_array("adapter.w3", &a.w3);
            ckpt.push_vector("adapter.b3", &a.b3);
        }
        Adapter::Linear(a) => {
            ckpt.set_meta("adapter.kind", "linear");
            ckpt.push_array("adapter.w", &a.w);
            ckpt.push_vector("adapter.b", &a.b);
        }
    }
    ckpt.push_array("decoder.w1", &decoder.w1);
    ckpt.push_vector("decoder.b1", &decoder.b1);
    ckpt.push_array("decoder.w2", &decoder.w2);
    ckpt.push_vector("decoder.b2", &decoder.b2);
}

/// Reads backbone, adapter and decoder back out of a checkpoint.
pub fn unpack_models(ckpt: &Checkpoint) -> CliResult<(LinearBackbone, Adapter, FrozenDecoder)> {
    let backbone = LinearBackbone::new(
        ckpt.array("backbone.w")?.clone(),
        ckpt.vector("backbone.b")?,
    )
    .map_err(|e| CliError::Io(e.to_string()))?;

    let kind = ckpt
        .meta
        .get("adapter.kind")
        .map(String::as_str)
        .unwrap_or("mlp");
    let adapter = match kind {
        "mlp" => Adapter::Mlp(ResidualAdapter {
            w1: ckpt.array("adapter.w1")?.clone(),
            b1: ckpt.vector("adapter.b1")?,
            w2: ckpt.array("adapter.w2")?.clone(),
            b2: ckpt.vector("adapter.b2")?,
            w3: ckpt.array("adapter.w3")?.clone(),
            b3: ckpt.vector("adapter.b3")?,
        }),
        "linear" => Adapter::Linear(LinearAdapter {
            w: ckpt.array("adapter.w")?.clone(),
            b: ckpt.vector("adapter.b")?,
        }),
        other => return Err(CliError::Io(format!("unknown adapter.kind '{other}'"))),
    };

    let decoder = FrozenDecoder::new(
        ckpt.array("decoder.w1")?.clone(),
        ckpt.vector("decoder.b1")?,
        ckpt.array("decoder.w2")?.clone(),
        ckpt.vector("decoder.b2")?,
    )
    .map_err(|e| CliError::Io(e.to_string()))?;

    Ok((backbone, adapter, decoder))
}

/// 17-significant-digit float formatting; parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}
