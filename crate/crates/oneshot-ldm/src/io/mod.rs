//! On-disk formats: npy arrays for importance maps and the shared
//! checkpoint container for every trainable stage, plus the stage-level
//! save and load helpers built on it.
//!
//! Resumability works at epoch granularity: training derives every RNG
//! stream from (base seed, epoch index), so a checkpoint only needs those
//! two numbers besides the tensors to continue bit-identically.

pub mod checkpoint;
pub mod npy;
#[cfg(test)]
mod tests;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentationConfig, DatasetSplit};
use crate::diffusion::{DiffusionConfig, LdmTrainer};
use crate::error::{Error, Result};
use crate::eval::{CriticClassifier, CriticConfig, CriticEmbedder};
use crate::nn::Linear;
use crate::rae::{RAEConfig, RAEModel, RaeTrainer};
use crate::regularizers::{RegularizerKind, RegularizerSpec};

pub use checkpoint::{capture_params, AdamState, Checkpoint};
pub use npy::{read_npy, write_npy};

pub const SECTION_RAE: &str = "rae";
pub const SECTION_LDM: &str = "ldm";
pub const SECTION_CRITIC_CLASSIFIER: &str = "critic-classifier";
pub const SECTION_CRITIC_EMBEDDER: &str = "critic-embedder";

pub const CLASSIFIER_FILE: &str = "critic_classifier.ckpt";
pub const EMBEDDER_FILE: &str = "critic_embedder.ckpt";

fn check_section(ckpt: &Checkpoint, expected: &str, path: &Path) -> Result<()> {
    if ckpt.section != expected {
        return Err(Error::parse(
            path,
            format!("expected a `{expected}` checkpoint, found `{}`", ckpt.section),
        ));
    }
    Ok(())
}

fn echo_to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("config cannot be serialized: {e}")))
}

fn echo_from_toml<T: for<'a> Deserialize<'a>>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::parse(path, format!("bad config echo: {e}")))
}

fn stats_to_arrays(stats: Vec<(String, Vec<f64>)>) -> Vec<(String, ndarray::ArrayD<f64>)> {
    stats
        .into_iter()
        .map(|(name, values)| (name, ndarray::Array1::from_vec(values).into_dyn()))
        .collect()
}

fn arrays_to_stats(state: &[(String, ndarray::ArrayD<f64>)]) -> Vec<(String, Vec<f64>)> {
    state
        .iter()
        .map(|(name, array)| (name.clone(), array.iter().copied().collect()))
        .collect()
}

/// Configuration echoed into an autoencoder checkpoint: everything needed
/// to rebuild the trainer except the dataset itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaeEcho {
    pub config: RAEConfig,
    pub specs: Vec<RegularizerSpec>,
    pub augmentation: AugmentationConfig,
}

pub fn save_rae_trainer(path: &Path, trainer: &mut RaeTrainer) -> Result<()> {
    let echo = RaeEcho {
        config: trainer.config.clone(),
        specs: trainer.bank.specs.clone(),
        augmentation: trainer.augmentation.clone(),
    };
    let config_toml = echo_to_toml(&echo)?;
    let mut params = trainer.model.params();
    params.extend(trainer.bank.params());
    let params = capture_params(&mut params);
    let ckpt = Checkpoint {
        section: SECTION_RAE.to_string(),
        config_toml,
        epoch: trainer.epochs_done as u64,
        base_seed: trainer.base_seed,
        meta: Vec::new(),
        params,
        state: stats_to_arrays(trainer.model.running_stats()),
        optimizer: Some(AdamState::capture(&trainer.opt)),
    };
    ckpt.save(path)
}

/// Rebuilds a resumable trainer. `split` must be the split the run was
/// started on: the classification head's label table is derived from it,
/// and a different category set fails the parameter shape checks.
pub fn load_rae_trainer(path: &Path, split: &DatasetSplit) -> Result<RaeTrainer> {
    let ckpt = Checkpoint::load(path)?;
    check_section(&ckpt, SECTION_RAE, path)?;
    let echo: RaeEcho = echo_from_toml(&ckpt.config_toml, path)?;
    let mut trainer = RaeTrainer::new(
        &echo.config,
        &echo.specs,
        split,
        &echo.augmentation,
        ckpt.base_seed,
    )?;
    let mut params = trainer.model.params();
    params.extend(trainer.bank.params());
    ckpt.apply_params(&mut params)?;
    trainer.model.set_running_stats(&arrays_to_stats(&ckpt.state))?;
    if let Some(opt) = &ckpt.optimizer {
        trainer.opt = opt.restore();
    }
    trainer.epochs_done = ckpt.epoch as usize;
    Ok(trainer)
}

/// Loads just the autoencoder network from an RAE checkpoint, for stages
/// that only encode or decode (LDM training, sampling, attribution).
pub fn load_rae_model(path: &Path) -> Result<(RAEModel, RaeEcho)> {
    let ckpt = Checkpoint::load(path)?;
    check_section(&ckpt, SECTION_RAE, path)?;
    let echo: RaeEcho = echo_from_toml(&ckpt.config_toml, path)?;
    let gaussian = echo.specs.iter().any(|s| s.kind == RegularizerKind::Kl);
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut model = RAEModel::new(&mut rng, &echo.config, gaussian)?;
    ckpt.apply_params_subset(&mut model.params())?;
    model.set_running_stats(&arrays_to_stats(&ckpt.state))?;
    Ok((model, echo))
}

pub fn save_ldm_trainer(path: &Path, trainer: &mut LdmTrainer) -> Result<()> {
    let config_toml = echo_to_toml(&trainer.config)?;
    let params = capture_params(&mut trainer.predictor.params());
    let ckpt = Checkpoint {
        section: SECTION_LDM.to_string(),
        config_toml,
        epoch: trainer.epochs_done as u64,
        base_seed: trainer.base_seed,
        meta: Vec::new(),
        params,
        state: Vec::new(),
        optimizer: Some(AdamState::capture(&trainer.opt)),
    };
    ckpt.save(path)
}

pub fn load_ldm_trainer(path: &Path) -> Result<LdmTrainer> {
    let ckpt = Checkpoint::load(path)?;
    check_section(&ckpt, SECTION_LDM, path)?;
    let config: DiffusionConfig = echo_from_toml(&ckpt.config_toml, path)?;
    let mut trainer = LdmTrainer::new(&config, ckpt.base_seed)?;
    ckpt.apply_params(&mut trainer.predictor.params())?;
    if let Some(opt) = &ckpt.optimizer {
        trainer.opt = opt.restore();
    }
    trainer.epochs_done = ckpt.epoch as usize;
    Ok(trainer)
}

/// Saves both critics into `dir` as `critic_classifier.ckpt` and
/// `critic_embedder.ckpt`. The embedding width is recorded in each file's
/// metadata next to the config echo.
pub fn save_critics(
    dir: &Path,
    classifier: &CriticClassifier,
    embedder: &CriticEmbedder,
    config: &CriticConfig,
) -> Result<()> {
    use crate::eval::ImageEmbedder;
    let config_toml = echo_to_toml(config)?;

    let mut cls = classifier.clone();
    let mut params = crate::nn::with_prefix("net", cls.net.params());
    params.extend(crate::nn::with_prefix("head", cls.head.params()));
    let ckpt = Checkpoint {
        section: SECTION_CRITIC_CLASSIFIER.to_string(),
        config_toml: config_toml.clone(),
        epoch: 0,
        base_seed: 0,
        meta: vec![
            ("gate_accuracy".to_string(), classifier.gate_accuracy),
            ("embed_dim".to_string(), classifier.embed_dim() as f64),
        ],
        params: capture_params(&mut params),
        state: stats_to_arrays(prefixed_stats("net", cls.net.running_stats())),
        optimizer: None,
    };
    ckpt.save(&dir.join(CLASSIFIER_FILE))?;

    let mut emb = embedder.clone();
    let ckpt = Checkpoint {
        section: SECTION_CRITIC_EMBEDDER.to_string(),
        config_toml,
        epoch: 0,
        base_seed: 0,
        meta: vec![("embed_dim".to_string(), embedder.embed_dim() as f64)],
        params: capture_params(&mut crate::nn::with_prefix("net", emb.net.params())),
        state: stats_to_arrays(prefixed_stats("net", emb.net.running_stats())),
        optimizer: None,
    };
    ckpt.save(&dir.join(EMBEDDER_FILE))
}

fn prefixed_stats(prefix: &str, stats: Vec<(String, Vec<f64>)>) -> Vec<(String, Vec<f64>)> {
    stats
        .into_iter()
        .map(|(name, values)| (format!("{prefix}.{name}"), values))
        .collect()
}

fn strip_stat_prefix(
    prefix: &str,
    state: &[(String, ndarray::ArrayD<f64>)],
) -> Vec<(String, Vec<f64>)> {
    state
        .iter()
        .filter_map(|(name, array)| {
            name.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('.'))
                .map(|rest| (rest.to_string(), array.iter().copied().collect()))
        })
        .collect()
}

pub fn load_critics(dir: &Path) -> Result<(CriticClassifier, CriticEmbedder)> {
    let cls_path = dir.join(CLASSIFIER_FILE);
    let ckpt = Checkpoint::load(&cls_path)?;
    check_section(&ckpt, SECTION_CRITIC_CLASSIFIER, &cls_path)?;
    let config: CriticConfig = echo_from_toml(&ckpt.config_toml, &cls_path)?;
    let backbone = config.backbone_config();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut net = RAEModel::new(&mut rng, &backbone, false)?;
    let mut head = Linear::new(&mut rng, config.embed_dim, config.head_dim, true);
    {
        let mut params = crate::nn::with_prefix("net", net.params());
        params.extend(crate::nn::with_prefix("head", head.params()));
        ckpt.apply_params(&mut params)?;
    }
    net.set_running_stats(&strip_stat_prefix("net", &ckpt.state))?;
    let classifier = CriticClassifier {
        net,
        head,
        gate_accuracy: ckpt.meta_value("gate_accuracy").unwrap_or(0.0),
    };

    let emb_path = dir.join(EMBEDDER_FILE);
    let ckpt = Checkpoint::load(&emb_path)?;
    check_section(&ckpt, SECTION_CRITIC_EMBEDDER, &emb_path)?;
    let config: CriticConfig = echo_from_toml(&ckpt.config_toml, &emb_path)?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut net = RAEModel::new(&mut rng, &config.backbone_config(), false)?;
    ckpt.apply_params(&mut crate::nn::with_prefix("net", net.params()))?;
    net.set_running_stats(&strip_stat_prefix("net", &ckpt.state))?;
    Ok((classifier, CriticEmbedder { net }))
}
