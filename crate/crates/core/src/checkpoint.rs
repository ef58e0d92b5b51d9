//! JSON checkpoints. Floats are written in shortest round-trip form, so
//! loading reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::optim::Adam;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelState,
    /// Epochs completed when this was written.
    pub epoch: usize,
    #[serde(default)]
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(model: ModelState, epoch: usize, optimizer: Option<Adam>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model,
            epoch,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        for (name, a) in self.model.params.iter().chain(self.model.teacher.iter()) {
            if !a.is_finite() {
                return Err(Error::Input(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.model.config.validate()?;
        if !ck.model.params.same_layout(&ck.model.teacher) {
            return Err(Error::Input("checkpoint teacher and student layouts differ".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
