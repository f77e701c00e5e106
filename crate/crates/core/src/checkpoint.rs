//! Checkpoint container.
//!
//! A checkpoint is a safetensors file whose header metadata carries the format
//! id, format version, payload id, the model config as JSON, and the identity
//! hashes of any checkpoints it was trained against. Parameter blobs are the
//! tensors themselves.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::hex;

pub const FORMAT_ID: &str = "afford-ckpt";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    Vqvae,
    Prior,
    Cvae,
    Policy,
}

impl Payload {
    pub fn as_str(self) -> &'static str {
        match self {
            Payload::Vqvae => "vqvae",
            Payload::Prior => "prior",
            Payload::Cvae => "cvae",
            Payload::Policy => "policy",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Payload::Vqvae, Payload::Prior, Payload::Cvae, Payload::Policy].into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Header-level description of a checkpoint on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub version: u32,
    pub payload: Payload,
    pub config_hash: String,
    /// Hash over config and every parameter blob.
    pub identity: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub payload: Payload,
    /// Canonical JSON of the model config.
    pub config: String,
    /// Identity hashes of upstream checkpoints, keyed by role (e.g. "vqvae").
    pub parents: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of a config's canonical JSON form.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(config)?.as_bytes()))
}

fn tensor_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (StDtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::U32 => (StDtype::U32, flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            StDtype::F32,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

fn tensor_from_view(view: &TensorView<'_>, device: &Device) -> std::result::Result<Tensor, String> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)
        }
        StDtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)
        }
        StDtype::U32 => {
            let v: Vec<u32> = data.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)
        }
        other => return Err(format!("unsupported tensor dtype {other:?}")),
    };
    t.map_err(|e| e.to_string())
}

impl Checkpoint {
    pub fn new<C: Serialize>(payload: Payload, config: &C) -> Result<Self> {
        Ok(Self {
            payload,
            config: serde_json::to_string(config)?,
            parents: BTreeMap::new(),
            tensors: BTreeMap::new(),
        })
    }

    pub fn with_parent(mut self, role: &str, identity: &str) -> Self {
        self.parents.insert(role.to_string(), identity.to_string());
        self
    }

    /// Copies every variable of `vars` into the checkpoint under `prefix`.
    pub fn add_vars(&mut self, prefix: &str, vars: &VarMap) {
        let data = vars.data().lock().unwrap();
        for (name, var) in data.iter() {
            self.tensors.insert(format!("{prefix}{name}"), var.as_tensor().clone());
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Invalid(format!("{} checkpoint has no tensor {name}", self.payload)))
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_str(&self.config)?)
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.config.as_bytes())
    }

    pub fn identity(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.payload.as_str());
        h.update(self.config.as_bytes());
        for (name, t) in &self.tensors {
            let (dtype, bytes) = tensor_bytes(t)?;
            h.update(name.as_bytes());
            h.update(format!("{dtype:?}{:?}", t.dims()));
            h.update(&bytes);
        }
        Ok(hex(&h.finalize()))
    }

    /// Loads every variable of `vars` from tensors stored under `prefix`,
    /// converting to each variable's dtype.
    pub fn load_vars(&self, prefix: &str, vars: &VarMap) -> Result<()> {
        let data = vars.data().lock().unwrap();
        for (name, var) in data.iter() {
            let key = format!("{prefix}{name}");
            let t = self.tensor(&key)?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!("{key} {:?}", var.dims()), format!("{:?}", t.dims())));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<CheckpointRef> {
        let mut blobs = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let (dtype, bytes) = tensor_bytes(t)?;
            blobs.push((name.clone(), dtype, t.dims().to_vec(), bytes));
        }
        let views = blobs
            .iter()
            .map(|(n, d, s, b)| Ok((n.clone(), TensorView::new(*d, s.clone(), b).map_err(|e| Error::file(path, e))?)))
            .collect::<Result<Vec<_>>>()?;
        let identity = self.identity()?;
        let config_hash = self.config_hash();
        let meta = HashMap::from([
            ("format".to_string(), FORMAT_ID.to_string()),
            ("version".to_string(), FORMAT_VERSION.to_string()),
            ("payload".to_string(), self.payload.as_str().to_string()),
            ("config".to_string(), self.config.clone()),
            ("config_hash".to_string(), config_hash.clone()),
            ("parents".to_string(), serde_json::to_string(&self.parents)?),
            ("identity".to_string(), identity.clone()),
        ]);
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::file(path, e))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))?;
        Ok(CheckpointRef {
            path: path.to_path_buf(),
            version: FORMAT_VERSION,
            payload: self.payload,
            config_hash,
            identity,
        })
    }

    /// Reads the header only.
    pub fn inspect(path: &Path) -> Result<CheckpointRef> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        let (_, meta) = read_meta(path, &bytes)?;
        Ok(meta.0)
    }

    /// Loads a checkpoint and verifies its payload id and version.
    pub fn load(path: &Path, expected: Payload, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        let (st, (r, config, parents)) = read_meta(path, &bytes)?;
        if r.payload != expected {
            return Err(Error::Incompatible(format!(
                "{} holds a {} payload, expected {expected}",
                path.display(),
                r.payload
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = tensor_from_view(&view, device).map_err(|m| ckpt_err(path, m))?;
            tensors.insert(name, t);
        }
        let ckpt = Checkpoint { payload: r.payload, config, parents, tensors };
        if ckpt.identity()? != r.identity {
            return Err(ckpt_err(path, "identity hash does not match contents"));
        }
        Ok(ckpt)
    }

    /// Errors unless the parent recorded under `role` is `identity`.
    pub fn require_parent(&self, role: &str, identity: &str) -> Result<()> {
        match self.parents.get(role) {
            Some(h) if h == identity => Ok(()),
            Some(h) => Err(Error::Incompatible(format!(
                "{} checkpoint was trained against {role} {}, but {role} {} was supplied",
                self.payload,
                short(h),
                short(identity)
            ))),
            None => Err(Error::Incompatible(format!("{} checkpoint records no {role} parent", self.payload))),
        }
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn ckpt_err(path: &Path, message: impl ToString) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.to_string() }
}

type Header = (CheckpointRef, String, BTreeMap<String, String>);

fn read_meta<'a>(path: &Path, bytes: &'a [u8]) -> Result<(SafeTensors<'a>, Header)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(path, format!("not a checkpoint container: {e}")))?;
    let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = metadata.metadata().clone().unwrap_or_default();
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| ckpt_err(path, format!("missing header field {k}")));
    if get("format")? != FORMAT_ID {
        return Err(ckpt_err(path, "unknown format id"));
    }
    let version: u32 = get("version")?.parse().map_err(|_| ckpt_err(path, "bad version field"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "{} has format version {version}, this build reads version {FORMAT_VERSION}",
            path.display()
        )));
    }
    let payload_s = get("payload")?;
    let payload = Payload::parse(&payload_s).ok_or_else(|| ckpt_err(path, format!("unknown payload id {payload_s}")))?;
    let config = get("config")?;
    let parents: BTreeMap<String, String> = serde_json::from_str(&get("parents")?).map_err(|e| ckpt_err(path, e))?;
    let r = CheckpointRef {
        path: path.to_path_buf(),
        version,
        payload,
        config_hash: get("config_hash")?,
        identity: get("identity")?,
    };
    Ok((st, (r, config, parents)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let dev = Device::Cpu;
        let mut c = Checkpoint::new(Payload::Vqvae, &serde_json::json!({"k": 8})).unwrap();
        c.insert("a", Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &dev).unwrap());
        c.insert("b", Tensor::new(&[0.5f64, -1.0], &dev).unwrap());
        c
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let c = sample().with_parent("data", "abc");
        let r = c.save(&path).unwrap();
        assert_eq!(Checkpoint::inspect(&path).unwrap(), r);
        let back = Checkpoint::load(&path, Payload::Vqvae, &Device::Cpu).unwrap();
        assert_eq!(back.identity().unwrap(), r.identity);
        assert_eq!(back.tensor("a").unwrap().to_vec2::<f32>().unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(back.tensor("b").unwrap().dtype(), DType::F64);
        assert_eq!(back.parents["data"], "abc");
    }

    #[test]
    fn wrong_payload_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        sample().save(&path).unwrap();
        let err = Checkpoint::load(&path, Payload::Prior, &Device::Cpu).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path, Payload::Vqvae, &Device::Cpu), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn parent_mismatch_is_reported() {
        let c = sample().with_parent("vqvae", "1111");
        assert!(c.require_parent("vqvae", "1111").is_ok());
        assert!(matches!(c.require_parent("vqvae", "2222"), Err(Error::Incompatible(_))));
        assert!(c.require_parent("prior", "1111").is_err());
    }

    #[test]
    fn identity_tracks_parameters() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.identity().unwrap(), b.identity().unwrap());
        b.insert("b", Tensor::new(&[0.5f64, -1.5], &Device::Cpu).unwrap());
        assert_ne!(a.identity().unwrap(), b.identity().unwrap());
    }
}
