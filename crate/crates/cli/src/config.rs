//! The experiment file: one TOML document that drives every subcommand.

use std::path::{Path, PathBuf};

use adagp_core::costmodel::CostParams;
use adagp_core::energy::EnergyParams;
use adagp_core::pipesim::PipelineConfig;
use adagp_core::scheduler::PhaseFractions;
use adagp_core::trainer::RunConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Output directory used when neither the flag, the environment nor the file names one.
pub const DEFAULT_OUTPUT_DIR: &str = "adagp-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub train: RunConfig,
    pub timeline: CostParams,
    pub pipeline: PipelineConfig,
    pub energy: EnergyParams,
    pub mix: MixSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
            train: RunConfig::default(),
            timeline: CostParams::default(),
            pipeline: PipelineConfig::default(),
            energy: EnergyParams::default(),
            mix: MixSection::default(),
        }
    }
}

/// The BP/GP batch mix that `timeline` and `energy` evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    /// Share of GP batches; the rest are BP batches.
    pub gp_fraction: f64,
}

impl Default for MixSection {
    fn default() -> Self {
        Self { gp_fraction: 0.5 }
    }
}

impl MixSection {
    pub fn fractions(&self) -> adagp_core::Result<PhaseFractions> {
        PhaseFractions::new(0.0, 1.0 - self.gp_fraction, self.gp_fraction)
    }

    fn validate(&self) -> adagp_core::Result<()> {
        if !(0.0..=1.0).contains(&self.gp_fraction) {
            return Err(adagp_core::Error::Config(format!("gp_fraction must lie in [0, 1], got {}", self.gp_fraction)));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Checks every section; errors name the section and, when `source` is
    /// given, the line of the offending key.
    pub fn validate(&self, source: Option<&str>) -> Result<(), CliError> {
        let checks: [(&str, adagp_core::Result<()>); 5] = [
            ("train", self.train.validate()),
            ("timeline", self.timeline.validate()),
            ("pipeline", self.pipeline.validate()),
            ("energy", self.energy.validate()),
            ("mix", self.mix.validate()),
        ];
        for (section, result) in checks {
            if let Err(e) = result {
                let message = e.to_string();
                let line = source.and_then(|s| locate(s, section, &message));
                return Err(CliError::Config { file: None, section: section.into(), line, message });
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Other(format!("cannot serialize config: {e}")))
    }
}

/// Parses and validates a config document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    cfg.validate(Some(text))?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Other(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| e.in_file(path))
}

/// 1-based line of the first key inside `section` (or its subtables) whose
/// name appears as a word in `message`, else the section header's line.
fn locate(text: &str, section: &str, message: &str) -> Option<usize> {
    // byte offset of `key` as a whole word in the message
    let mentioned = |key: &str| {
        message.match_indices(key).map(|(i, _)| i).find(|&i| {
            let word = |c: char| c.is_alphanumeric() || c == '_';
            !message[..i].ends_with(word) && !message[i + key.len()..].starts_with(word)
        })
    };
    let mut current = String::new();
    let mut header = None;
    let mut hits: Vec<(usize, usize)> = Vec::new(); // (position in message, line)
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = name.trim().to_string();
            if current == section && header.is_none() {
                header = Some(i + 1);
            }
            continue;
        }
        let in_section = current == section || current.starts_with(&format!("{section}."));
        let key = line.split('=').next().unwrap_or("").trim();
        let key = key.rsplit('.').next().unwrap_or(key).trim_matches('"');
        if !key.is_empty() && line.contains('=') {
            let top_level_dotted = current.is_empty() && line.starts_with(&format!("{section}."));
            if let (true, Some(at)) = (in_section || top_level_dotted, mentioned(key)) {
                hits.push((at, i + 1));
            }
        }
    }
    hits.sort();
    hits.first().map(|h| h.1).or(header)
}
