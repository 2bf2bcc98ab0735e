//! Checkpoints: concatenated tensor blobs plus a plain-text manifest.
//!
//! Manifest lines are `name shape offset`, with `shape` as `d0xd1x...` (`scalar`
//! for rank 0) and `offset` the byte position of the tensor's blob. Running
//! statistics are stored as `<layer>.running_mean` and `<layer>.running_var`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::config::Config;
use super::model::Model;
use crate::error::{Error, Result};
use crate::layers::RunningStats;
use crate::tensor::Tensor;

pub const BLOB_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "checkpoint.manifest";
pub const CONFIG_FILE: &str = "config.txt";

fn entries(model: &Model) -> Result<Vec<(String, Tensor)>> {
    let mut out: Vec<(String, Tensor)> = model.store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for (layer, r) in &model.store.running {
        out.push((format!("{layer}.running_mean"), Tensor::vector(&r.mean)?));
        out.push((format!("{layer}.running_var"), Tensor::vector(&r.var)?));
    }
    Ok(out)
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

/// Blob bytes and manifest text.
pub fn encode(model: &Model) -> Result<(Vec<u8>, String)> {
    let mut blob = Vec::new();
    let mut manifest = format!("# num_ids {}\n", model.num_ids);
    for (name, t) in entries(model)? {
        manifest.push_str(&format!("{name} {} {}\n", shape_text(t.shape()), blob.len()));
        t.write_to(&mut blob)?;
    }
    Ok((blob, manifest))
}

/// Rebuilds a model with `config`'s architecture from blob and manifest.
pub fn decode(config: &Config, blob: &[u8], manifest: &str) -> Result<Model> {
    let num_ids = manifest
        .lines()
        .find_map(|l| l.strip_prefix("# num_ids "))
        .ok_or_else(|| Error::Format("manifest lacks num_ids".into()))?
        .trim()
        .parse()
        .map_err(|_| Error::Format("bad num_ids".into()))?;
    let mut model = Model::init(config, num_ids, 0)?;
    let mut seen = 0;
    for line in manifest.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let &[name, shape, offset] = parts.as_slice() else {
            return Err(Error::Format(format!("manifest line `{line}`")));
        };
        let offset: usize = offset.parse().map_err(|_| Error::Format(format!("offset in `{line}`")))?;
        if offset > blob.len() {
            return Err(Error::Format(format!("offset {offset} beyond blob of {} bytes", blob.len())));
        }
        let t = Tensor::read_from(&mut Cursor::new(&blob[offset..]))?;
        if shape_text(t.shape()) != shape {
            return Err(Error::Format(format!("{name}: manifest shape {shape}, blob shape {:?}", t.shape())));
        }
        if let Some(layer) = name.strip_suffix(".running_mean") {
            running(&mut model, layer)?.mean = t.into_data();
        } else if let Some(layer) = name.strip_suffix(".running_var") {
            running(&mut model, layer)?.var = t.into_data();
        } else {
            model.store.set(name, t)?;
        }
        seen += 1;
    }
    let expected = model.store.len() + 2 * model.store.running.len();
    if seen != expected {
        return Err(Error::Format(format!("manifest has {seen} entries, model needs {expected}")));
    }
    Ok(model)
}

fn running<'m>(model: &'m mut Model, layer: &str) -> Result<&'m mut RunningStats> {
    model.store.running.get_mut(layer).ok_or_else(|| Error::Format(format!("unknown batch-norm layer {layer}")))
}

/// Writes blob, manifest and the config text into `dir`.
pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (blob, manifest) = encode(model)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(CONFIG_FILE), model.config.to_text())?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Model> {
    let config = Config::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    decode(&config, &blob, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Config::default();
        c.backbone.widths = [4, 4, 4, 8];
        c.backbone.branch_width = 8;
        c.embedding.k_a = 4;
        c.embedding.k_g = 4;
        let mut m = Model::init(&c, 3, 5).unwrap();
        m.store.set("pam.gamma", Tensor::scalar(0.25)).unwrap();
        m.store.running.get_mut("block2.bn").unwrap().mean[1] = 0.5;
        let dir = tempfile::tempdir().unwrap();
        save(&m, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), m);
        let (blob, manifest) = encode(&m).unwrap();
        assert!(decode(&c, &blob[..blob.len() - 1], &manifest).is_err());
        let short: String = manifest.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(decode(&c, &blob, &short).is_err());
    }
}
