//! Pipeline configuration: one TOML file, one section per module, plus
//! dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::PpoConfig;
use crate::calibrate::CalibConfig;
use crate::corpus::IndexConfig;
use crate::error::{PgtError, Result};
use crate::filter::FilterConfig;
use crate::lmclient::{ClientConfig, Fallback, LiveConfig};
use crate::nn::Arch;
use crate::retriever::ict::IctConfig;
use crate::retriever::Bm25Params;
use crate::retriever::RetrieverConfig;
use crate::reward::RewardConfig;
use crate::sft::SftConfig;
use crate::synthgen::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub seed: u64,
    pub outer_iterations: usize,
    pub work_dir: PathBuf,
    /// Directory of plain-text documents, one per file.
    pub corpus_dir: PathBuf,
    pub threads: usize,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self { seed: 0, outer_iterations: 1, work_dir: "work".into(), corpus_dir: "corpus".into(), threads: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Stub,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub backend: BackendKind,
    /// Scripted replies; unset means every prompt goes to the fallback.
    pub stub_path: Option<PathBuf>,
    pub fallback: Fallback,
    /// Relative paths are taken from the work directory.
    pub cache_path: PathBuf,
    pub client: ClientConfig,
    pub live: LiveConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Stub,
            stub_path: None,
            fallback: Fallback::Template,
            cache_path: "teacher_cache.jsonl".into(),
            client: ClientConfig::default(),
            live: LiveConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverSection {
    pub dim: usize,
    pub lexical_weight: f64,
    pub bm25: Bm25Params,
    pub ict: IctConfig,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let m = RetrieverConfig::default();
        Self { dim: m.dim, lexical_weight: m.lexical_weight, bm25: m.bm25, ict: IctConfig::default() }
    }
}

impl RetrieverSection {
    pub fn model(&self) -> RetrieverConfig {
        RetrieverConfig { dim: self.dim, lexical_weight: self.lexical_weight, bm25: self.bm25.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub arch: Arch,
    pub max_answer_tokens: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self { arch: Arch::default(), max_answer_tokens: 24 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Share of matching tuples held out for evaluation.
    pub eval: f64,
    /// Share of matching tuples reserved for calibration.
    pub calib: f64,
    /// Non-matching passage length cap in tokens.
    pub nonmatch_budget: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { eval: 0.15, calib: 0.15, nonmatch_budget: 48 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Depth for retrieval recall.
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub global: GlobalConfig,
    pub corpus: IndexConfig,
    pub retriever: RetrieverSection,
    pub generator: GeneratorSection,
    pub lmclient: LmConfig,
    pub synthgen: SynthConfig,
    pub filter: FilterConfig,
    pub split: SplitConfig,
    pub sft: SftConfig,
    pub reward: RewardConfig,
    pub align: PpoConfig,
    pub calibrate: CalibConfig,
    pub eval: EvalConfig,
}

/// Parses an override value as a TOML literal, or as a bare string.
fn override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| PgtError::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(PgtError::Config(format!("override key `{path}` has an empty component")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| PgtError::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text with overrides applied; errors name the key path.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| PgtError::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            PgtError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`; relative `corpus_dir`, `work_dir` and `stub_path` are
    /// resolved against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PgtError::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.global.corpus_dir);
        rebase(&mut cfg.global.work_dir);
        if let Some(s) = cfg.lmclient.stub_path.as_mut() {
            rebase(s);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.global.outer_iterations == 0 {
            return Err(PgtError::Config("global.outer_iterations must be >= 1".into()));
        }
        if !(self.split.eval >= 0.0 && self.split.calib >= 0.0 && self.split.eval + self.split.calib < 1.0) {
            return Err(PgtError::Config("split.eval and split.calib must be >= 0 and sum to less than 1".into()));
        }
        self.synthgen.validate()?;
        self.filter.validate()?;
        self.sft.validate()?;
        self.align.validate()?;
        self.calibrate.validate()?;
        Ok(())
    }

    /// Canonical TOML of the resolved config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PgtError::Serde(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Named sub-seed derived from the global seed.
    pub fn sub_seed(&self, name: &str) -> u64 {
        sub_seed(self.global.seed, name)
    }
}

pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let d = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("", &[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = PipelineConfig::from_toml("[sft]\nstrid = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("sft"), "{err}");
        assert!(err.contains("strid"), "{err}");
        let err = PipelineConfig::from_toml("", &["reward.arch.dimm=3".into()]).unwrap_err().to_string();
        assert!(err.contains("reward.arch"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = PipelineConfig::from_toml(
            "[sft]\nstride = 3\n",
            &["sft.stride=5".into(), "global.work_dir=/tmp/x".into(), "filter.overlap_min=0.5".into(), "retriever.ict.steps=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.sft.stride, 5);
        assert_eq!(cfg.global.work_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.filter.overlap_min, Some(0.5));
        assert_eq!(cfg.retriever.ict.steps, 7);
        assert!(PipelineConfig::from_toml("", &["sft.stride".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = PipelineConfig::from_toml("[global]\nseed = 9\n", &[]).unwrap();
        let again = PipelineConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
        assert_ne!(sub_seed(1, "sft"), sub_seed(1, "reward"));
    }
}
