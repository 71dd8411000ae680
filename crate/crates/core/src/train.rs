//! Adam and the end-to-end training loop.

use std::collections::BTreeMap;

use jers_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::evaluate::{evaluate_case, CaseScores};
use crate::losses::{total_loss, LossValues, LossWeights};
use crate::networks::{Networks, Parameters};
use crate::phantom::{augment, AugmentationRanges, Phantom};
use crate::pipeline::{forward, JersModel, Variant};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(CoreError::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    /// One bias-corrected update of every parameter that received a gradient.
    /// Parameters are replaced by fresh leaves, which also drops their gradients.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<f32>)>) -> Result<()> {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = c.lr as f32;
        let eps = c.eps as f32;
        let bc1 = 1.0 - (c.beta1).powi(self.t as i32) as f32;
        let bc2 = 1.0 - (c.beta2).powi(self.t as i32) as f32;
        for (name, p) in params {
            let Some(grad) = p.grad().map(|g| g.clone()) else {
                continue;
            };
            let st = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let g = grad[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            let shape = p.shape().to_vec();
            *p = Tensor::param(&shape, data)?;
        }
        Ok(())
    }
}

/// Loss weights with the variant's overrides applied.
pub fn effective_weights(weights: &LossWeights, variant: Variant) -> LossWeights {
    let mut w = weights.clone();
    if variant == Variant::NoSmooth {
        w.eta = 0.0;
    }
    w
}

/// Forward, objective, backward and one optimizer update on a single image.
pub fn train_step(
    model: &mut JersModel<f32>,
    s: &Volume,
    weights: &LossWeights,
    opt: &mut Adam,
) -> Result<LossValues> {
    let weights = effective_weights(weights, model.variant);
    let art = forward(model, &s.batched::<f32>()?, true)?;
    let terms = total_loss(&art, &model.atlas.image, &weights)?;
    let values = terms.values();
    terms.total.backward().map_err(|e| match e {
        source @ jers_tensor::TensorError::NumericFault { .. } => CoreError::NumericTerm {
            term: "backward",
            source,
        },
        other => other.into(),
    })?;
    drop(art);
    opt.step(model.nets.params_mut())?;
    Ok(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub seed: u64,
    /// Validation cadence in steps; 0 disables validation.
    pub val_every: usize,
    pub augmentation: AugmentationRanges,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 3000,
            seed: 0,
            val_every: 100,
            augmentation: AugmentationRanges::LPBA,
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

/// One optimizer step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub subject: usize,
    pub similarity: f64,
    pub segmentation: f64,
    pub smoothness: f64,
    pub total: f64,
}

/// Mean validation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub dice_ext: f64,
    pub mi_reg: f64,
    /// Segmentation-network prediction against the reference.
    pub dice_seg_pred: f64,
    /// Warped atlas labels against the reference.
    pub dice_seg_warped: f64,
    /// Score used for model selection.
    pub selection: f64,
}

/// Stateful loop: model, optimizer, step counter and the best snapshot.
pub struct Trainer {
    pub model: JersModel<f32>,
    pub opt: Adam,
    pub settings: TrainSettings,
    /// Steps completed.
    pub step: usize,
    pub best: Option<(ValRecord, Networks<f32>)>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Trainer {
    pub fn new(model: JersModel<f32>, settings: TrainSettings) -> Result<Self> {
        settings.weights.validate()?;
        settings.augmentation.validate()?;
        let opt = Adam::new(settings.optimizer.clone())?;
        Ok(Self {
            model,
            opt,
            settings,
            step: 0,
            best: None,
        })
    }

    /// Subject index and augmentation seed for the given step; depends only
    /// on the run seed so resumed runs see the same data.
    pub fn draw(&self, step: usize, subjects: usize) -> (usize, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.settings.seed, step));
        (rng.gen_range(0..subjects), rng.gen())
    }

    /// Performs the next step on an augmented training subject.
    pub fn advance(&mut self, train: &[Volume]) -> Result<StepRecord> {
        if train.is_empty() {
            return Err(CoreError::Config("no training images".into()));
        }
        let (subject, aug_seed) = self.draw(self.step, train.len());
        let image = augment(&train[subject], &self.settings.augmentation, aug_seed)?;
        let v = train_step(
            &mut self.model,
            &image,
            &self.settings.weights,
            &mut self.opt,
        )?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            subject,
            similarity: v.similarity,
            segmentation: v.segmentation,
            smoothness: v.smoothness,
            total: v.total,
        })
    }

    pub fn validate(&self, val: &[Phantom]) -> Result<ValRecord> {
        validate(&self.model, val, self.step)
    }

    /// Validates and keeps a snapshot when the selection score improves.
    pub fn validate_and_keep_best(&mut self, val: &[Phantom]) -> Result<ValRecord> {
        let rec = self.validate(val)?;
        if self
            .best
            .as_ref()
            .map_or(true, |(b, _)| rec.selection > b.selection)
        {
            self.best = Some((rec.clone(), self.model.nets.clone()));
        }
        Ok(rec)
    }

    /// The model with the best validated weights (or the current ones).
    pub fn best_model(&self) -> JersModel<f32> {
        let mut m = self.model.clone();
        if let Some((_, nets)) = &self.best {
            m.nets = nets.clone();
        }
        m
    }

    /// Runs until `settings.steps`, validating on the configured cadence.
    /// `on_val` also receives whether the record became the new best.
    pub fn run(
        &mut self,
        train: &[Volume],
        val: &[Phantom],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
        mut on_val: impl FnMut(&Trainer, &ValRecord, bool) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.settings.steps {
            let rec = self.advance(train)?;
            on_step(&rec)?;
            let every = self.settings.val_every;
            let due = (every > 0 && self.step % every == 0) || self.step == self.settings.steps;
            if due && !val.is_empty() {
                let before = self.best.as_ref().map(|(b, _)| b.step);
                let v = self.validate_and_keep_best(val)?;
                let improved = self.best.as_ref().map(|(b, _)| b.step) != before;
                on_val(self, &v, improved)?;
            }
        }
        Ok(())
    }
}

/// Mean scores of `model` over a validation split.
pub fn validate(model: &JersModel<f32>, val: &[Phantom], step: usize) -> Result<ValRecord> {
    let mut acc = CaseScores::default();
    for (i, p) in val.iter().enumerate() {
        let (s, _) = evaluate_case(model, p, &format!("val_{i}"))?;
        acc.add(&s);
    }
    let n = val.len().max(1) as f64;
    let seg_pred = acc.dice_seg_pred / n;
    let seg_warped = acc.dice_seg_warped / n;
    Ok(ValRecord {
        step,
        dice_ext: acc.dice_ext / n,
        mi_reg: acc.mi_reg / n,
        dice_seg_pred: seg_pred,
        dice_seg_warped: seg_warped,
        selection: if model.variant == Variant::NoSeg {
            seg_warped
        } else {
            seg_pred
        },
    })
}
