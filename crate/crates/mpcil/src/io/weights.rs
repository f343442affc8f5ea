use std::path::Path;

use mpcil_core::policy::MlpPolicy;

use super::{read_text, write_text};
use crate::error::{Error, Result};

pub fn save_weights(policy: &MlpPolicy, path: &Path) -> Result<()> {
    write_text(path, &policy.to_text())
}

pub fn load_weights(path: &Path) -> Result<MlpPolicy> {
    MlpPolicy::from_text(&read_text(path)?).map_err(|e| match e {
        mpcil_core::Error::Parse { line, msg } => Error::format(path, line, msg),
        other => other.into(),
    })
}
