//! Checkpoints: a directory of MCT1 tensor files plus a plain-text
//! `key=value` manifest of the model config. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::encoder::Params;
use crate::error::{MctError, Result};
use crate::mct1;

pub const MANIFEST: &str = "manifest.txt";

pub fn save(dir: impl AsRef<Path>, cfg: &ModelConfig, params: &Params) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), cfg.to_kv())?;
    for (name, tensor) in params.named() {
        mct1::write_file(dir.join(format!("{name}.mct1")), &tensor)?;
    }
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<(ModelConfig, Params)> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| {
        MctError::format(format!("cannot read {}: {e}", dir.join(MANIFEST).display()))
    })?;
    let cfg = ModelConfig::from_kv(&manifest)?;
    // template params provide the expected tensor names and shapes
    let template = Params::init(&cfg, 0)?;
    let mut tensors = Vec::new();
    for (name, expect) in template.named() {
        let t = mct1::read_file(dir.join(format!("{name}.mct1")))?;
        if t.shape() != expect.shape() {
            return Err(MctError::format(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                expect.shape()
            )));
        }
        tensors.push(t);
    }
    let params = Params::from_ordered(&cfg, &tensors)?;
    Ok((cfg, params))
}
