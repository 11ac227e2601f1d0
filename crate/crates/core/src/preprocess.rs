//! Intensity normalization, channel fusion and the external
//! bias-correction/denoising adapter.

use std::path::Path;
use std::process::Command;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Contrast, MultiModalVolume, ScalarVolume};

/// Settings for the external bias-correction / denoising stage.
///
/// `external_stage_command` is a shell command template in which `{in}` and
/// `{out}` are replaced with the (quoted) input and output paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub external_stage_command: Option<String>,
    #[serde(default = "default_skip")]
    pub skip_external: bool,
}

fn default_skip() -> bool {
    true
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::passthrough()
    }
}

impl PreprocessConfig {
    pub fn passthrough() -> Self {
        Self {
            external_stage_command: None,
            skip_external: true,
        }
    }

    pub fn with_command(command: impl Into<String>) -> Self {
        Self {
            external_stage_command: Some(command.into()),
            skip_external: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.skip_external
            && self
                .external_stage_command
                .as_deref()
                .is_none_or(|c| c.trim().is_empty())
        {
            return Err(Error::InvalidConfig(
                "external stage enabled but no command template given".into(),
            ));
        }
        Ok(())
    }
}

/// Rescales a volume to `[0, 1]` by its own min and range.
pub fn minmax_normalize(volume: &ScalarVolume) -> Result<ScalarVolume> {
    let (min, max) = volume
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(max > min) {
        return Err(Error::DegenerateRange(min as f64));
    }
    let (min, range) = (min as f64, max as f64 - min as f64);
    let data = volume
        .data
        .mapv(|v| ((v as f64 - min) / range).clamp(0.0, 1.0) as f32);
    Ok(ScalarVolume {
        data,
        contrast: volume.contrast,
    })
}

/// Stacks four normalized contrasts into a `(D, H, W, 4)` volume in the
/// channel order `[T1, T1Gd, T2, FLAIR]`.
pub fn fuse_contrasts(
    t1: &ScalarVolume,
    t1gd: &ScalarVolume,
    t2: &ScalarVolume,
    flair: &ScalarVolume,
) -> Result<MultiModalVolume> {
    let inputs = [t1, t1gd, t2, flair];
    let shape = t1.shape();
    for v in inputs {
        if v.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "{} has shape {:?}, {} has shape {:?}",
                Contrast::T1,
                shape,
                v.contrast,
                v.shape()
            )));
        }
        if let Some(bad) = v.data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::NotNormalized(format!(
                "{} contains value {bad}",
                v.contrast
            )));
        }
    }
    let mut data = Array4::<f32>::zeros((shape[0], shape[1], shape[2], 4));
    for (c, v) in inputs.iter().enumerate() {
        data.index_axis_mut(Axis(3), c).assign(&v.data);
    }
    MultiModalVolume::new(data)
}

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', r"'\''"))
}

/// Runs the configured external tool on one file, or copies it through
/// unchanged when the stage is skipped.
pub fn run_external_stage(
    config: &PreprocessConfig,
    in_path: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
) -> Result<()> {
    let (in_path, out_path) = (in_path.as_ref(), out_path.as_ref());
    config.validate()?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let template = match (&config.external_stage_command, config.skip_external) {
        (Some(t), false) => t,
        _ => {
            std::fs::copy(in_path, out_path).map_err(|e| Error::io(in_path, e))?;
            return Ok(());
        }
    };
    let command = template
        .replace("{in}", &shell_quote(in_path))
        .replace("{out}", &shell_quote(out_path));
    log::debug!("external stage: {command}");
    let output = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .output()
        .map_err(|e| Error::io(in_path, e))?;
    if !output.status.success() {
        let mut text = String::from_utf8_lossy(&output.stdout).into_owned();
        text.push_str(&String::from_utf8_lossy(&output.stderr));
        return Err(Error::ExternalStage {
            command,
            status: output.status.to_string(),
            output: text,
        });
    }
    if !out_path.exists() {
        return Err(Error::ExternalStage {
            command,
            status: output.status.to_string(),
            output: format!("tool did not create {}", out_path.display()),
        });
    }
    Ok(())
}
