//! Checkpoint directories: `manifest.json` plus one tensor file per
//! parameter under `tensors/`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineConfig;
use crate::error::{invalid, Error, Result};
use crate::model::{Model, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT: &str = "boxmask-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
/// Subdirectory of a training run that holds its latest checkpoint.
pub const RUN_SUBDIR: &str = "checkpoint";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub iteration: usize,
    pub config: PipelineConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub params: ParamStore,
    pub iteration: usize,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.model.clone())
    }

    /// Writes the checkpoint to a sibling temporary directory and renames it
    /// over `dir`, so readers see either the old or the new checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| invalid!("checkpoint path {} has no final component", dir.display()))?
            .to_string_lossy()
            .into_owned();
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let tensor_dir = tmp.join("tensors");
        fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

        let mut entries = Vec::with_capacity(self.params.len());
        for (pname, t) in self.params.iter() {
            let file = format!("tensors/{pname}.bin");
            let path = tmp.join(&file);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            t.write_binary(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
            entries.push(TensorEntry { name: pname.clone(), shape: t.shape().to_vec(), file });
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            iteration: self.iteration,
            config: self.config.clone(),
            tensors: entries,
        };
        let mpath = tmp.join(MANIFEST);
        fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        let had_old = dir.exists();
        if had_old {
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if had_old {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    /// Reads a checkpoint directory, or the latest checkpoint of a training
    /// run directory.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = resolve(path)?;
        let mpath = dir.join(MANIFEST);
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!("{}: unsupported format `{}`", mpath.display(), manifest.format)));
        }
        manifest.config.validate()?;
        let mut params = ParamStore::new();
        for entry in &manifest.tensors {
            let path = dir.join(&entry.file);
            let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let t = Tensor::read_binary(BufReader::new(f))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Data(format!(
                    "{}: shape {:?} disagrees with manifest {:?}",
                    path.display(),
                    t.shape(),
                    entry.shape
                )));
            }
            params.insert(entry.name.clone(), t);
        }
        let model = Model::new(manifest.config.model.clone())?;
        params.validate(model.specs())?;
        Ok(Self { config: manifest.config, params, iteration: manifest.iteration })
    }
}

fn resolve(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join(RUN_SUBDIR);
    if nested.join(MANIFEST).is_file() {
        return Ok(nested);
    }
    Err(Error::Data(format!("{}: no checkpoint manifest found", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.model.feature_dim = 4;
        cfg.model.hidden_dim = 4;
        cfg
    }

    #[test]
    fn round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let model = Model::new(cfg.model.clone()).unwrap();
        let ck = Checkpoint { config: cfg.clone(), params: model.init_params(1), iteration: 7 };
        let path = dir.path().join("run").join(RUN_SUBDIR);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(Checkpoint::load(&dir.path().join("run")).unwrap(), ck);

        let newer = Checkpoint { params: model.init_params(2), iteration: 9, ..ck };
        newer.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), newer);
        let leftovers: Vec<_> = fs::read_dir(dir.path().join("run"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(leftovers, vec![RUN_SUBDIR.to_string()]);
    }

    #[test]
    fn load_rejects_tampered_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let model = Model::new(cfg.model.clone()).unwrap();
        let mut params = model.init_params(1);
        params.insert("decoder.out.bias", Tensor::zeros(&[3]));
        let ck = Checkpoint { config: cfg, params, iteration: 0 };
        let path = dir.path().join("ck");
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
