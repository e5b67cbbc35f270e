//! Checkpoint container: a safetensors file whose header metadata carries the
//! format tag, version, architecture and any caller-provided fields.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use super::config::VfeConfig;
use super::network::SrModel;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "flowsr-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Prefix of model parameter entries; other prefixes hold auxiliary state.
pub const PARAM_PREFIX: &str = "param/";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: VfeConfig,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.with_prefix(PARAM_PREFIX)
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }
}

fn ckpt_err(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes to a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Saves the model parameters plus `extra` tensors and metadata.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &SrModel,
    extra: &[(String, Tensor)],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let mut info: HashMap<String, String> = meta.clone().into_iter().collect();
    info.insert("format".into(), FORMAT_TAG.into());
    info.insert("version".into(), FORMAT_VERSION.to_string());
    info.insert("vfe_config".into(), serde_json::to_string(model.config())?);
    info.insert("dtype".into(), format!("{:?}", model.dtype()));
    let mut entries: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|(n, v)| (format!("{PARAM_PREFIX}{n}"), v.as_tensor().clone()))
        .collect();
    entries.extend(extra.iter().cloned());
    let bytes = safetensors::serialize(entries, Some(info)).map_err(|e| ckpt_err(path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let info = SafeTensors::read_metadata(&bytes)
        .map_err(|e| ckpt_err(path, e))?
        .1
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing header metadata"))?;
    if info.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(ckpt_err(path, "not a flowsr checkpoint"));
    }
    let version: u32 = info
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ckpt_err(path, "missing version"))?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("version {version} unsupported (expected {FORMAT_VERSION})"),
        ));
    }
    let config: VfeConfig = serde_json::from_str(
        info.get("vfe_config")
            .ok_or_else(|| ckpt_err(path, "missing vfe_config"))?,
    )?;
    let mut tensors = BTreeMap::new();
    for (name, _) in st.tensors() {
        let t = candle_core::safetensors::Load::load(
            &st.tensor(&name).map_err(|e| ckpt_err(path, e))?,
            device,
        )?;
        tensors.insert(name, t);
    }
    let meta = info
        .into_iter()
        .filter(|(k, _)| !matches!(k.as_str(), "format" | "version" | "vfe_config"))
        .collect();
    Ok(Checkpoint {
        config,
        meta,
        tensors,
    })
}

/// Rebuilds a model from a checkpoint, validating every parameter shape.
pub fn model_from_checkpoint(ckpt: &Checkpoint, dtype: DType, device: &Device) -> Result<SrModel> {
    let model = SrModel::new(ckpt.config.clone(), 0, dtype, device)?;
    model.params().load(&ckpt.params())?;
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>, device: &Device) -> Result<SrModel> {
    let ckpt = read_checkpoint(path.as_ref(), device)?;
    model_from_checkpoint(&ckpt, DType::F32, device).map_err(|e| ckpt_err(path.as_ref(), e))
}
