use std::path::Path;

use anyhow::{bail, Context, Result};
use maldi_core::maldiffusion::{self, DiffusionModel};
use maldi_core::maldigan::{self, GanModel};
use maldi_core::maldivae::{self, VaeModel};
use maldi_core::tensor::ModelFile;
use maldi_core::train::ConditionalGenerator;

/// Any trained generator, dispatched on the file's `model_kind`.
pub fn load_generator(path: &Path) -> Result<Box<dyn ConditionalGenerator>> {
    let file = ModelFile::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match file.model_kind.as_str() {
        maldivae::MODEL_KIND => Box::new(VaeModel::from_file(&file)?),
        maldigan::MODEL_KIND => Box::new(GanModel::from_file(&file)?),
        maldiffusion::MODEL_KIND => Box::new(DiffusionModel::from_file(&file)?),
        other => bail!(maldi_core::Error::Model(format!(
            "{}: `{other}` is not a generator",
            path.display()
        ))),
    })
}
