//! Self-describing JSON container for meta-parameters and optimizer state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use npbml_ad::{Precision, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MetaModel;
use crate::outer::AdamState;
use crate::params::MetaParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for NamedArray {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl NamedArray {
    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone(), Precision::Double)
            .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))
    }
}

pub fn encode_map(map: &BTreeMap<String, Tensor>) -> BTreeMap<String, NamedArray> {
    map.iter().map(|(k, v)| (k.clone(), v.into())).collect()
}

pub fn decode_map(map: &BTreeMap<String, NamedArray>) -> Result<BTreeMap<String, Tensor>> {
    map.iter().map(|(k, v)| Ok((k.clone(), v.to_tensor(k)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub t: u64,
    pub m: BTreeMap<String, NamedArray>,
    pub v: BTreeMap<String, NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub step: usize,
    pub score: f64,
    pub params: BTreeMap<String, NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    /// Meta-steps completed when the checkpoint was written.
    pub step: usize,
    pub model: MetaModel,
    pub params: BTreeMap<String, NamedArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<BestSnapshot>,
}

impl Checkpoint {
    pub fn new(model: &MetaModel, params: &MetaParams, seed: u64, step: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed,
            step,
            model: model.clone(),
            params: params.iter().map(|(k, v)| (k.clone(), v.into())).collect(),
            adam: None,
            best: None,
        }
    }

    pub fn params(&self) -> Result<MetaParams> {
        let p = MetaParams::from_map(decode_map(&self.params)?)?;
        self.model.check_params(&p)?;
        Ok(p)
    }

    pub fn adam(&self) -> Result<Option<AdamState>> {
        self.adam
            .as_ref()
            .map(|a| Ok(AdamState::from_parts(a.t, decode_map(&a.m)?, decode_map(&a.v)?)))
            .transpose()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported format version {v}"))),
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderSpec, TaskShape};
    use crate::params::Variant;
    use crate::tasks::TaskKind;

    #[test]
    fn round_trip_is_exact() {
        let model = MetaModel::new(
            EncoderSpec::toy(3, 5),
            TaskShape {
                kind: TaskKind::Classification,
                n_way: 4,
            },
            Variant::full(),
        )
        .unwrap();
        let params = model.init_meta_params(None, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::new(&model, &params, 17, 0).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params().unwrap(), params);
        assert_eq!(back.model, model);
    }

    #[test]
    fn foreign_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        fs::write(&path, r#"{"format_version": 99}"#).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
