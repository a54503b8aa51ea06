//! Run configuration, method definitions and the shared pretrained backbone.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::AdaptationConfig;
use crate::error::{DmeaError, Result};
use crate::expansion::{CoefficientInit, ExpansionConfig};
use crate::model::pretrain::{default_corpus, pretrain_backbone, PretrainConfig, CORPUS_VERSION};
use crate::model::{checkpoint, BackboneConfig, ModelState};
use crate::selection::SelectionConfig;
use crate::taskgen::TaskgenConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BackboneSection {
    #[serde(flatten)]
    pub architecture: BackboneConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    /// Seeds used by batch commands when none are given explicitly.
    pub seeds: Vec<u64>,
    /// Where pretrained backbones are cached; falls back to `DMEA_CACHE_DIR`
    /// and then the system temp directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seeds: (0..5).collect(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub expansion: ExpansionConfig,
    pub selection: SelectionConfig,
    pub adaptation: AdaptationConfig,
    pub taskgen: TaskgenConfig,
    pub harness: HarnessConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| DmeaError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.architecture.validate()?;
        self.expansion.validate()?;
        self.selection.validate()?;
        self.adaptation.validate()?;
        if self.taskgen.train_size == 0 || self.taskgen.test_size == 0 {
            return Err(DmeaError::Config("taskgen train_size and test_size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Total epochs a task's own modules train for in a DMEA run; baselines
    /// get the same budget.
    pub fn task_epochs(&self) -> usize {
        self.expansion.epochs + self.adaptation.epochs
    }
}

/// How a method lays out modules across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Expansion search, subspace selection and fused adaptation.
    Search,
    /// One set of modules shared by every task.
    Shared,
    /// Fresh modules per task, never shared.
    Isolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dmea,
    DmeaNoTransfer,
    DmeaNoScaling,
    DmeaNoInit,
    /// All three DMEA mechanisms switched off.
    Acm,
    SeqFinetune,
    PerTaskAdapters,
    AdapterReplay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub architecture: Architecture,
    pub transfer: bool,
    pub scaling: bool,
    pub init: CoefficientInit,
    pub replay: bool,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Dmea,
        Method::DmeaNoTransfer,
        Method::DmeaNoScaling,
        Method::DmeaNoInit,
        Method::Acm,
        Method::SeqFinetune,
        Method::PerTaskAdapters,
        Method::AdapterReplay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dmea => "dmea",
            Method::DmeaNoTransfer => "dmea-no-transfer",
            Method::DmeaNoScaling => "dmea-no-scaling",
            Method::DmeaNoInit => "dmea-no-init",
            Method::Acm => "acm",
            Method::SeqFinetune => "seq-finetune",
            Method::PerTaskAdapters => "per-task-adapters",
            Method::AdapterReplay => "adapter-replay",
        }
    }

    pub fn spec(self) -> MethodSpec {
        let search = |transfer, scaling, init| MethodSpec {
            method: self,
            architecture: Architecture::Search,
            transfer,
            scaling,
            init,
            replay: true,
        };
        let simple = |architecture, replay| MethodSpec {
            method: self,
            architecture,
            transfer: false,
            scaling: false,
            init: CoefficientInit::Uniform,
            replay,
        };
        use CoefficientInit::{Similarity, Uniform};
        match self {
            Method::Dmea => search(true, true, Similarity),
            Method::DmeaNoTransfer => search(false, true, Similarity),
            Method::DmeaNoScaling => search(true, false, Similarity),
            Method::DmeaNoInit => search(true, true, Uniform),
            Method::Acm => search(false, false, Uniform),
            Method::SeqFinetune => simple(Architecture::Shared, false),
            Method::PerTaskAdapters => simple(Architecture::Isolated, false),
            Method::AdapterReplay => simple(Architecture::Shared, true),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = DmeaError;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DmeaError::Config(format!("unknown method `{s}`")))
    }
}

fn cache_dir(cfg: &HarnessConfig) -> PathBuf {
    cfg.cache_dir
        .clone()
        .or_else(|| std::env::var_os("DMEA_CACHE_DIR").map(PathBuf::from))
        .unwrap_or_else(|| std::env::temp_dir().join("dmea-cache"))
}

/// The pretrained backbone for `section`, trained once and cached on disk
/// under a key derived from the configuration.
pub fn load_or_pretrain(section: &BackboneSection, harness: &HarnessConfig) -> Result<ModelState> {
    let key = {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(section)?);
        h.update(checkpoint::FORMAT_VERSION.to_le_bytes());
        h.update(CORPUS_VERSION.to_le_bytes());
        let d = h.finalize();
        d.iter().take(8).map(|b| format!("{b:02x}")).collect::<String>()
    };
    let dir = cache_dir(harness);
    let path = dir.join(format!("backbone-{key}.ckpt"));
    if path.exists() {
        match checkpoint::load(&path) {
            Ok(state) if state.config() == &section.architecture && state.adapters.is_empty() => return Ok(state),
            Ok(_) => log::warn!("cached backbone {} does not match; retraining", path.display()),
            Err(e) => log::warn!("cached backbone {} unreadable ({e}); retraining", path.display()),
        }
    }
    log::info!("pretraining backbone ({} steps)", section.pretrain.steps);
    let corpus = default_corpus(section.pretrain.corpus_size, section.pretrain.seed);
    let state = pretrain_backbone(section.architecture, &corpus, &section.pretrain)?;
    std::fs::create_dir_all(&dir)?;
    let tmp = dir.join(format!("backbone-{key}.{}.tmp", std::process::id()));
    checkpoint::save(&state, &tmp)?;
    std::fs::rename(&tmp, &path)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn ablations_switch_exactly_one_mechanism() {
        let full = Method::Dmea.spec();
        let diff = |s: MethodSpec| {
            [s.transfer != full.transfer, s.scaling != full.scaling, s.init != full.init]
                .iter()
                .filter(|d| **d)
                .count()
        };
        assert_eq!(diff(Method::DmeaNoTransfer.spec()), 1);
        assert_eq!(diff(Method::DmeaNoScaling.spec()), 1);
        assert_eq!(diff(Method::DmeaNoInit.spec()), 1);
        assert_eq!(diff(Method::Acm.spec()), 3);
    }

    #[test]
    fn config_sections_parse_with_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"adaptation": {"pseudo_ratio": 0.0}, "backbone": {"num_layers": 3}}"#).unwrap();
        assert_eq!(cfg.adaptation.pseudo_ratio, 0.0);
        assert_eq!(cfg.adaptation.epochs, 20);
        assert_eq!(cfg.backbone.architecture.num_layers, 3);
        assert_eq!(cfg.backbone.architecture.hidden_width, 64);
        cfg.validate().unwrap();
    }
}
