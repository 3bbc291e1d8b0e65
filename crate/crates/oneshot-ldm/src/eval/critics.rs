//! The two frozen judge networks used by the evaluation framework.
//!
//! Both share the autoencoder's convolutional encoder backbone. The
//! classifier is trained with the prototype objective and scores
//! recognizability as one-shot nearest-exemplar accuracy; the embedder is
//! trained contrastively and its feature distances score originality.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::two_views;
use crate::data::{AugmentationConfig, BatchIter, DatasetSplit, Episode};
use crate::error::{Error, Result};
use crate::nn::{zero_grads, Adam, Linear};
use crate::rae::{RAEConfig, RAEModel};
use crate::regularizers::{prototype_loss_grad, simclr_loss_grad};
use crate::seeds::derive_seed;

/// Anything that maps image batches to fixed-length embeddings.
/// Embedding is read-only: critics stay frozen during evaluation.
pub trait ImageEmbedder {
    fn embed(&self, images: &Array4<f64>) -> Result<Array2<f64>>;
    fn embed_dim(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub embed_dim: usize,
    pub channels: [usize; 4],
    pub head_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each category's variations held out for the gate.
    pub holdout_fraction: f64,
    /// Minimum one-shot holdout accuracy the classifier must reach.
    pub accuracy_gate: f64,
    pub temperature: f64,
    pub augmentation: AugmentationConfig,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            embed_dim: 128,
            channels: [16, 32, 64, 128],
            head_dim: 128,
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            holdout_fraction: 0.2,
            accuracy_gate: 0.9,
            temperature: 1.0,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.accuracy_gate) {
            return Err(Error::Config(format!(
                "accuracy_gate {} outside [0, 1]",
                self.accuracy_gate
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        self.backbone_config().validate()?;
        self.augmentation.validate()
    }

    pub(crate) fn backbone_config(&self) -> RAEConfig {
        RAEConfig {
            latent_dim: self.embed_dim,
            channels: self.channels,
            learning_rate: self.learning_rate,
            ..RAEConfig::default()
        }
    }
}

/// One-shot classifier: encoder backbone plus the prototype projection
/// it was trained with. Classification is nearest exemplar in projected
/// space, i.e. the argmax of a softmax over negated squared distances.
#[derive(Debug, Clone)]
pub struct CriticClassifier {
    pub net: RAEModel,
    pub head: Linear,
    /// Holdout accuracy reached when the gate was passed.
    pub gate_accuracy: f64,
}

impl CriticClassifier {
    fn project(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let z = self.net.encode(images)?;
        Ok(self.head.forward(z.point()))
    }

    /// Index of the nearest exemplar row for every query row.
    pub fn classify(&self, queries: &Array4<f64>, exemplars: &Array4<f64>) -> Result<Vec<usize>> {
        if exemplars.dim().0 == 0 {
            return Err(Error::Validation("classify: no exemplars".into()));
        }
        let q = self.project(queries)?;
        let e = self.project(exemplars)?;
        let mut out = Vec::with_capacity(q.nrows());
        for qi in q.outer_iter() {
            let mut best = (0usize, f64::INFINITY);
            for (j, ej) in e.outer_iter().enumerate() {
                let d = (&qi - &ej).mapv(|v| v * v).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            out.push(best.0);
        }
        Ok(out)
    }
}

impl ImageEmbedder for CriticClassifier {
    fn embed(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        self.project(images)
    }

    fn embed_dim(&self) -> usize {
        self.head.weight.value.shape()[0]
    }
}

/// Contrastive feature extractor. The SimCLR projection head is dropped
/// after training; embeddings are the backbone codes.
#[derive(Debug, Clone)]
pub struct CriticEmbedder {
    pub net: RAEModel,
}

impl ImageEmbedder for CriticEmbedder {
    fn embed(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.net.encode(images)?.point().clone())
    }

    fn embed_dim(&self) -> usize {
        self.net.config.latent_dim
    }
}

fn stack_images(images: &[&Array3<f64>]) -> Array4<f64> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out
}

/// Splits every episode's variations into critic-train and holdout
/// pools. At least one variation stays on each side when possible.
fn split_for_gate(split: &DatasetSplit, fraction: f64) -> (DatasetSplit, DatasetSplit) {
    let mut train_eps = Vec::new();
    let mut hold_eps = Vec::new();
    for ep in &split.episodes {
        let n = ep.variations.len();
        let n_hold = ((n as f64 * fraction).ceil() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
        let (hold, train) = ep.variations.split_at(n_hold);
        train_eps.push(Episode {
            variations: train.to_vec(),
            ..ep.clone()
        });
        hold_eps.push(Episode {
            variations: hold.to_vec(),
            ..ep.clone()
        });
    }
    let make = |eps: Vec<Episode>| DatasetSplit {
        episodes: eps,
        split_name: split.split_name,
        image_size: split.image_size,
    };
    (make(train_eps), make(hold_eps))
}

/// One-shot accuracy of `classifier` on every variation of `split`,
/// N-way over the split's exemplars.
pub fn one_shot_accuracy(classifier: &CriticClassifier, split: &DatasetSplit) -> Result<f64> {
    let exemplars: Vec<&Array3<f64>> = split.episodes.iter().map(|e| &e.exemplar).collect();
    if exemplars.is_empty() {
        return Err(Error::Validation("accuracy over empty split".into()));
    }
    let support = stack_images(&exemplars);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (idx, ep) in split.episodes.iter().enumerate() {
        if ep.variations.is_empty() {
            continue;
        }
        let queries = stack_images(&ep.variations.iter().collect::<Vec<_>>());
        for pred in classifier.classify(&queries, &support)? {
            correct += usize::from(pred == idx);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("accuracy over empty query set".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn classifier_step(
    net: &mut RAEModel,
    head: &mut Linear,
    opt: &mut Adam,
    images: &Array4<f64>,
    labels: &[usize],
    exemplars: &Array4<f64>,
) -> Result<f64> {
    let mut params = net.params();
    params.extend(head.params());
    zero_grads(&mut params);

    let (z, cache) = net.encode_train(images)?;
    let z = z.point().clone();
    let (z_y, cache_y) = net.encode_train(exemplars)?;
    let z_y = z_y.point().clone();
    let (loss, gz, gz_y) = prototype_loss_grad(&z, &z_y, labels, head)?;
    if !loss.is_finite() {
        return Err(Error::Training {
            message: "non-finite critic classifier loss".into(),
            diagnostics: vec![format!("loss = {loss}")],
        });
    }
    net.encoder_backward(&cache, &gz);
    net.encoder_backward(&cache_y, &gz_y);

    let mut params = net.params();
    params.extend(head.params());
    opt.step(&mut params);
    Ok(loss)
}

fn embedder_step(
    net: &mut RAEModel,
    head: &mut Linear,
    opt: &mut Adam,
    images: &Array4<f64>,
    aug: &AugmentationConfig,
    temperature: f64,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let mut params = net.params();
    params.extend(head.params());
    zero_grads(&mut params);

    let b = images.dim().0;
    let mut views_a = images.clone();
    let mut views_b = images.clone();
    for i in 0..b {
        let img = images.index_axis(Axis(0), i).to_owned();
        let (va, vb) = two_views(&img, aug, rng);
        views_a.index_axis_mut(Axis(0), i).assign(&va);
        views_b.index_axis_mut(Axis(0), i).assign(&vb);
    }
    let (za, cache_a) = net.encode_train(&views_a)?;
    let za = za.point().clone();
    let (zb, cache_b) = net.encode_train(&views_b)?;
    let zb = zb.point().clone();
    let (loss, gza, gzb) = simclr_loss_grad(&za, &zb, head, temperature)?;
    if !loss.is_finite() {
        return Err(Error::Training {
            message: "non-finite critic embedder loss".into(),
            diagnostics: vec![format!("loss = {loss}")],
        });
    }
    net.encoder_backward(&cache_a, &gza);
    net.encoder_backward(&cache_b, &gzb);

    let mut params = net.params();
    params.extend(head.params());
    opt.step(&mut params);
    Ok(loss)
}

/// Trains both critics on the train split. The classifier must clear
/// the one-shot accuracy gate on held-out variations of the training
/// categories; training stops early once it does.
pub fn train_critics(
    split: &DatasetSplit,
    config: &CriticConfig,
    seed: u64,
) -> Result<(CriticClassifier, CriticEmbedder)> {
    config.validate()?;
    if split.episodes.is_empty() {
        return Err(Error::Validation("critic training needs categories".into()));
    }
    let backbone = config.backbone_config();
    let (gate_train, gate_hold) = split_for_gate(split, config.holdout_fraction);

    // Classifier.
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "critic/cls/init"));
    let mut net = RAEModel::new(&mut rng, &backbone, false)?;
    let mut head = Linear::new(&mut rng, config.embed_dim, config.head_dim, true);
    let mut opt = Adam::new(config.learning_rate);
    let label_of = |cid: usize| -> usize {
        split
            .episodes
            .iter()
            .position(|e| e.category_id == cid)
            .expect("category from its own split")
    };
    let mut accuracy_curve = Vec::new();
    let mut passed = None;
    for epoch in 0..config.epochs {
        let bs = config.batch_size.min(gate_train.n_variations());
        let mut batches = BatchIter::new(
            &gate_train,
            bs,
            derive_seed(seed, &format!("critic/cls/data/{epoch}")),
        )?;
        while let Some(batch) = batches.next_batch() {
            let labels: Vec<usize> = batch.labels.iter().map(|&c| label_of(c)).collect();
            classifier_step(
                &mut net,
                &mut head,
                &mut opt,
                &batch.images,
                &labels,
                &batch.exemplars,
            )?;
        }
        let probe = CriticClassifier {
            net: net.clone(),
            head: head.clone(),
            gate_accuracy: 0.0,
        };
        let acc = one_shot_accuracy(&probe, &gate_hold)?;
        accuracy_curve.push(acc);
        if acc >= config.accuracy_gate {
            passed = Some(acc);
            break;
        }
    }
    let gate_accuracy = match passed {
        Some(acc) => acc,
        None => {
            return Err(Error::Training {
                message: format!(
                    "critic classifier missed the {:.0}% one-shot gate",
                    config.accuracy_gate * 100.0
                ),
                diagnostics: accuracy_curve
                    .iter()
                    .enumerate()
                    .map(|(e, a)| format!("epoch {e}: holdout accuracy {a:.4}"))
                    .collect(),
            })
        }
    };
    let classifier = CriticClassifier {
        net,
        head,
        gate_accuracy,
    };

    // Embedder.
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "critic/emb/init"));
    let mut net = RAEModel::new(&mut rng, &backbone, false)?;
    let mut head = Linear::new(&mut rng, config.embed_dim, config.head_dim, true);
    let mut opt = Adam::new(config.learning_rate);
    for epoch in 0..config.epochs {
        let bs = config.batch_size.min(split.n_variations()).max(2);
        let mut batches = BatchIter::new(
            split,
            bs,
            derive_seed(seed, &format!("critic/emb/data/{epoch}")),
        )?;
        let mut step_rng =
            ChaCha12Rng::seed_from_u64(derive_seed(seed, &format!("critic/emb/step/{epoch}")));
        while let Some(batch) = batches.next_batch() {
            if batch.images.dim().0 < 2 {
                continue;
            }
            embedder_step(
                &mut net,
                &mut head,
                &mut opt,
                &batch.images,
                &config.augmentation,
                config.temperature,
                &mut step_rng,
            )?;
        }
    }
    let embedder = CriticEmbedder { net };
    Ok((classifier, embedder))
}

/// Byte-level digest of every parameter, for freeze checks.
pub fn param_checksum(params: &mut crate::nn::ParamRefs<'_>) -> u64 {
    let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, p) in params.iter() {
        for b in name.bytes() {
            acc = (acc ^ b as u64).wrapping_mul(0x1000_0000_01b3);
        }
        for v in p.value.iter() {
            acc = (acc ^ v.to_bits()).wrapping_mul(0x1000_0000_01b3);
        }
    }
    acc
}

