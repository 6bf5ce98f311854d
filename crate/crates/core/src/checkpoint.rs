//! Single-file parameter archives.
//!
//! Layout: `DDADCKPT` magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as little-endian `f32` in header order. The
//! header carries the SHA-256 of the payload so truncation and bit rot are
//! both detected on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{UNetConfig, UNetDenoiser};
use crate::error::{DdadError, Result};
use crate::nn::{ParamStore, Tensor};
use crate::schedule::ScheduleConfig;

pub const MAGIC: &[u8; 8] = b"DDADCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// `"denoiser"` or `"feature_extractor"`.
    pub kind: String,
    /// Kind-specific metadata (architecture, schedule, layer sets, ...).
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_archive(path: &Path, kind: &str, meta: serde_json::Value, params: &ParamStore<f32>) -> Result<()> {
    let mut payload = Vec::with_capacity(params.num_elements() * 4);
    let mut entries = Vec::new();
    for (_, name, t) in params.iter() {
        entries.push(ParamEntry { name: name.to_string(), shape: t.shape.clone() });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        params: entries,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&payload)?;
    f.sync_all()?;
    Ok(())
}

/// Reads and verifies an archive. Returns the header and the tensors in
/// stored order.
pub fn read_archive(path: &Path, expected_kind: &str) -> Result<(Header, Vec<Tensor<f32>>)> {
    let bytes = fs::read(path)?;
    let corrupt = |m: String| DdadError::CorruptCheckpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(corrupt("header truncated".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.kind != expected_kind {
        return Err(corrupt(format!("holds a {}, expected a {expected_kind}", header.kind)));
    }
    let payload = &body[hlen..];
    let want: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != want {
        return Err(corrupt(format!("payload truncated: expected {want} bytes, found {}", payload.len())));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch".into()));
    }
    let mut tensors = Vec::with_capacity(header.params.len());
    let mut off = 0;
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let data = payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        off += 4 * n;
        tensors.push(Tensor::new(p.shape.clone(), data));
    }
    Ok((header, tensors))
}

/// Copies archived tensors into a freshly built store, checking that names
/// and shapes line up one to one.
pub fn restore_params(store: &mut ParamStore<f32>, header: &Header, tensors: Vec<Tensor<f32>>) -> Result<()> {
    if header.params.len() != store.len() {
        return Err(DdadError::CorruptCheckpoint(format!(
            "archive has {} tensors, architecture expects {}",
            header.params.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for ((id, entry), t) in ids.into_iter().zip(&header.params).zip(tensors) {
        if store.name(id) != entry.name || store.get(id).shape != entry.shape {
            return Err(DdadError::CorruptCheckpoint(format!(
                "tensor {} {:?} does not match architecture slot {} {:?}",
                entry.name,
                entry.shape,
                store.name(id),
                store.get(id).shape
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    architecture: UNetConfig,
    schedule: ScheduleConfig,
}

impl UNetDenoiser<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(DenoiserMeta { architecture: self.config().clone(), schedule: *self.schedule() })?;
        write_archive(path, "denoiser", meta, self.params())
    }

    /// Loads a denoiser and checks it was trained under `runtime` schedule.
    pub fn load(path: &Path, runtime: &ScheduleConfig) -> Result<Self> {
        let (header, tensors) = read_archive(path, "denoiser")?;
        let meta: DenoiserMeta = serde_json::from_value(header.meta.clone())
            .map_err(|e| DdadError::CorruptCheckpoint(format!("denoiser metadata: {e}")))?;
        if meta.schedule != *runtime {
            return Err(DdadError::ScheduleMismatch { expected: runtime.to_string(), found: meta.schedule.to_string() });
        }
        let mut model = Self::new(meta.architecture, meta.schedule, 0)?;
        restore_params(model.params_mut(), &header, tensors)?;
        Ok(model)
    }

    /// Loads whatever schedule the checkpoint was trained with.
    pub fn load_any(path: &Path) -> Result<Self> {
        let (header, _) = read_archive(path, "denoiser")?;
        let meta: DenoiserMeta = serde_json::from_value(header.meta)
            .map_err(|e| DdadError::CorruptCheckpoint(format!("denoiser metadata: {e}")))?;
        Self::load(path, &meta.schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Denoiser;
    use crate::image::ImageTensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn denoiser_roundtrip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let sched = ScheduleConfig::default();
        let mut net = UNetDenoiser::<f32>::new(UNetConfig::tiny(), sched, 1).unwrap();
        // make the zero-initialised output layers non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in net.params().ids().collect::<Vec<_>>() {
            for v in net.params_mut().get_mut(id).data.iter_mut() {
                *v += rand::Rng::random_range(&mut rng, -0.1..0.1);
            }
        }
        net.save(&path).unwrap();
        let back = UNetDenoiser::load(&path, &sched).unwrap();
        let probe: Vec<_> = (0..3).map(|_| ImageTensor::randn(3, 4, 4, &mut rng)).collect();
        let a = net.predict_noise_batch(&probe, &[1, 500, 1000]).unwrap();
        let b = back.predict_noise_batch(&probe, &[1, 500, 1000]).unwrap();
        assert_eq!(a, b);

        let wrong = ScheduleConfig { timesteps: 500, ..sched };
        assert!(matches!(UNetDenoiser::load(&path, &wrong), Err(DdadError::ScheduleMismatch { .. })));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = UNetDenoiser::load(&path, &sched).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(UNetDenoiser::load(&path, &sched), Err(DdadError::CorruptCheckpoint(_))));
    }
}
