//! Config files and structure resolution.
//!
//! A config file is a JSON object with optional top-level `structure`,
//! `seed` and `out`, plus one section per command:
//!
//! ```json
//! {
//!   "structure": "heisenberg",
//!   "seed": 7,
//!   "diameter": { "radii": [0.1, 0.05], "delta_fraction": 0.001 }
//! }
//! ```
//!
//! `structure` is a builtin name, a path to a definition file, or an inline
//! definition object. Command-line flags win over the file.

use std::path::{Path, PathBuf};

use cclab::structures::{StructureDef, BUILTIN_NAMES};
use cclab::{builtin, SRStructure};
use serde::{Deserialize, Serialize};

use crate::commands::{CalibrateArgs, DiameterArgs, DistanceArgs, ExtremalArgs, QuasiArgs, VerifyArgs};
use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StructureSpec {
    Name(String),
    Inline(StructureDef),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub structure: Option<StructureSpec>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub extremal: Option<ExtremalArgs>,
    pub calibrate: Option<CalibrateArgs>,
    #[serde(rename = "quasi-calibrate")]
    pub quasi_calibrate: Option<QuasiArgs>,
    pub verify: Option<VerifyArgs>,
    pub distance: Option<DistanceArgs>,
    pub diameter: Option<DiameterArgs>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))
    }
}

/// Resolved structure together with its source description (echoed in manifests).
pub fn resolve_structure(spec: &StructureSpec) -> Result<(SRStructure, serde_json::Value), Failure> {
    match spec {
        StructureSpec::Name(name) if BUILTIN_NAMES.contains(&name.as_str()) => {
            let s = builtin(name).map_err(Failure::from_core)?;
            Ok((s, serde_json::json!({ "builtin": name })))
        }
        StructureSpec::Name(path) => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(Failure::Config(format!(
                    "unknown structure '{path}' (not a builtin and no such file); builtins: {}",
                    BUILTIN_NAMES.join(", ")
                )));
            }
            let def = StructureDef::load(p).map_err(|e| Failure::Config(format!("{path}: {e}")))?;
            let s = def.build().map_err(|e| Failure::Config(format!("{path}: {e}")))?;
            Ok((s, serde_json::json!({ "definition": def })))
        }
        StructureSpec::Inline(def) => {
            let s = def.build().map_err(|e| Failure::Config(e.to_string()))?;
            Ok((s, serde_json::json!({ "definition": def })))
        }
    }
}

/// Fills every `None` field of the first argument from the second.
macro_rules! merge_from {
    ($cli:expr, $file:expr; $($field:ident),* $(,)?) => {
        if let Some(file) = $file {
            $(
                if $cli.$field.is_none() {
                    $cli.$field = file.$field.clone();
                }
            )*
        }
    };
}
pub(crate) use merge_from;
