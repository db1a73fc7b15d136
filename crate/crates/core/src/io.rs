//! Artifact output: canonical hashing, atomic writes, CSV/PGM dumps and the
//! JSONL run ledger.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::mesh::Mesh;

/// JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Map is ordered by key unless preserve_order is enabled
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// SHA-256 of the canonical JSON, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = canonical_json(value)?;
    Ok(hex_digest(text.as_bytes()))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Rows `x,y,u` in node order.
pub fn field_csv(mesh: &Mesh, u: &[f64]) -> String {
    let mut out = String::from("x,y,u\n");
    for (x, v) in mesh.nodes().iter().zip(u) {
        out.push_str(&format!("{},{},{}\n", x.x, x.y, v));
    }
    out
}

/// Binary 8-bit PGM of a nodal field, `lo..hi` mapped to `0..255`, top row
/// of the image at `y = L`.
pub fn field_pgm(mesh: &Mesh, u: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let side = mesh.n() + 1;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for j in (0..side).rev() {
        for i in 0..side {
            let t = ((u[mesh.node_index(i, j)] - lo) / span).clamp(0.0, 1.0);
            out.push((t * 255.0).round() as u8);
        }
    }
    out
}

/// Mask image of a node set (members white).
pub fn mask_pgm(mesh: &Mesh, mask: &[bool]) -> Vec<u8> {
    let u: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    field_pgm(mesh, &u, 0.0, 1.0)
}

/// Appends one JSON object as a line.
pub fn append_ledger<T: Serialize>(path: &Path, entry: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut line = serde_json::to_string(entry)?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    Ok(())
}
