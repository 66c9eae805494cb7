//! Three-stage training: warmup with a frozen backbone, prototype
//! projection, then fine-tuning of the whole network with periodic
//! re-projection.

use crate::autodiff::Graph;
use crate::classes::MarginClass;
use crate::config::RunConfig;
use crate::data::{sample_rng, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, LossTargets, LossValues};
use crate::model::{Model, PROTOTYPES};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamGroup;
use crate::projection::{project_prototypes, ProjectionReport, ProjectionSet};
use crate::tensor::{Real, Tensor};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Used in fine-tuning only; the backbone is frozen during warmup.
    pub backbone: Real,
    pub fpn_prototypes: Real,
    pub last_layer: Real,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            backbone: 1e-5,
            fpn_prototypes: 1e-3,
            last_layer: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds model initialization and batch order.
    pub seed: u64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub finetune_epochs: usize,
    /// Re-project after every this many fine-tuning epochs; 0 disables.
    pub project_every: usize,
    /// Negative patches drawn from the pool for each epoch.
    pub negatives_per_epoch: usize,
    /// Keep the projected state with the best validation AUROC instead of
    /// the last one.
    pub select_best: bool,
    pub learning_rates: LearningRates,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            batch_size: 16,
            warmup_epochs: 4,
            finetune_epochs: 8,
            project_every: 4,
            negatives_per_epoch: 200,
            select_best: true,
            learning_rates: LearningRates::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let lr = &self.learning_rates;
        for (field, v) in [
            ("train.learning_rates.backbone", lr.backbone),
            ("train.learning_rates.fpn_prototypes", lr.fpn_prototypes),
            ("train.learning_rates.last_layer", lr.last_layer),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        self.optimizer.validate()
    }
}

/// Position in the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Projection,
    Finetune,
    Done,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "a",
            Stage::Projection => "b",
            Stage::Finetune => "c",
            Stage::Done => "done",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    /// Epochs finished within the current stage.
    pub stage_epochs: usize,
    /// Epochs finished overall.
    pub epochs: usize,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            stage: Stage::Warmup,
            stage_epochs: 0,
            epochs: 0,
        }
    }
}

/// One line of the metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Overall epoch count at the time of the record.
    pub epoch: usize,
    pub stage: Stage,
    /// Set on records written right after a projection.
    pub projected: bool,
    /// Mean training objective over the epoch's batches; absent for
    /// projection records.
    pub train_loss: Option<LossValues>,
    pub val_cross_entropy: Option<Real>,
    pub val_macro_auroc: Option<Real>,
    pub max_displacement: Option<Real>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub val_macro_auroc: Real,
    pub model: Model,
}

/// Loss values and batch composition of a step that went non-finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub epoch: usize,
    pub batch: usize,
    pub sample_ids: Vec<String>,
    pub loss: LossValues,
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Train(usize),
    Negative(usize),
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub data: &'a Dataset,
    pub model: Model,
    pub optimizer: Adam,
    pub progress: Progress,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestModel>,
    /// Filled in when a step produced a non-finite loss.
    pub diagnostic: Option<Diagnostic>,
    last_loss: Option<LossValues>,
}

/// Checks that every margin class is present before any training.
pub fn check_dataset(data: &Dataset, image_size: usize) -> Result<()> {
    let counts = data.train.class_counts();
    for c in MarginClass::MARGINS {
        if counts[c.index()] == 0 {
            return Err(Error::Data(format!("training split has no {c} samples")));
        }
    }
    if data.negatives.is_empty() {
        return Err(Error::Data("negative pool is empty".into()));
    }
    if data.config.image_size != image_size {
        return Err(Error::Data(format!(
            "dataset images are {0}x{0}, model expects {1}x{1}",
            data.config.image_size, image_size
        )));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        check_dataset(data, config.backbone.input_size)?;
        let model = Model::new(
            config.backbone.clone(),
            config.prototypes.clone(),
            config.train.seed,
        )?;
        let optimizer = Adam::new(config.train.optimizer);
        Ok(Self {
            config,
            data,
            model,
            optimizer,
            progress: Progress::default(),
            history: Vec::new(),
            best: None,
            diagnostic: None,
            last_loss: None,
        })
    }

    /// Learning rate of `group` in `stage`; `None` means frozen.
    pub fn learning_rate(&self, stage: Stage, group: ParamGroup) -> Option<Real> {
        let lr = &self.config.train.learning_rates;
        let rate = match (stage, group) {
            (Stage::Warmup, ParamGroup::Backbone) => return None,
            (Stage::Finetune, ParamGroup::Backbone) => lr.backbone,
            (Stage::Warmup | Stage::Finetune, ParamGroup::Fpn | ParamGroup::Prototypes) => {
                lr.fpn_prototypes
            }
            (Stage::Warmup | Stage::Finetune, ParamGroup::LastLayer) => lr.last_layer,
            (Stage::Projection | Stage::Done, _) => return None,
        };
        (rate > 0.0).then_some(rate)
    }

    fn epoch_plan(&self, epoch: usize) -> Vec<Source> {
        let mut rng = sample_rng(self.config.train.seed, "epoch", epoch);
        let pool = self.data.negatives.len();
        let k = self.config.train.negatives_per_epoch.min(pool);
        let mut plan: Vec<Source> = (0..self.data.train.len()).map(Source::Train).collect();
        let mut negs: Vec<usize> = index::sample(&mut rng, pool, k).into_vec();
        negs.sort_unstable();
        plan.extend(negs.into_iter().map(Source::Negative));
        plan.shuffle(&mut rng);
        plan
    }

    fn gather(&self, items: &[Source]) -> Result<(Tensor, Tensor, Vec<MarginClass>, Vec<String>)> {
        let mut images = Vec::with_capacity(items.len());
        let mut masks = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        let mut ids = Vec::with_capacity(items.len());
        for it in items {
            let s = match *it {
                Source::Train(i) => self.data.train.sample(i)?,
                Source::Negative(i) => self.data.negatives.sample(i)?,
            };
            images.push(s.image.clone().reshape(&[1, 1, s.image.shape()[1], s.image.shape()[2]])?);
            masks.push(s.mask.clone().reshape(&[1, s.mask.shape()[0], s.mask.shape()[1]])?);
            labels.push(s.label);
            ids.push(s.id.clone());
        }
        let cat = |v: Vec<Tensor>| Tensor::concat_batch(&v.iter().collect::<Vec<_>>());
        Ok((cat(images)?, cat(masks)?, labels, ids))
    }

    /// One optimizer step in `stage` on the given batch.
    pub fn train_step(
        &mut self,
        stage: Stage,
        images: &Tensor,
        masks: &Tensor,
        labels: &[MarginClass],
    ) -> Result<LossValues> {
        let lr = |g: ParamGroup| self.learning_rate(stage, g);
        let mut g = Graph::new();
        let f = self.model.forward(&mut g, images, |grp| lr(grp).is_some())?;
        let annotated = vec![true; labels.len()];
        let terms = losses::total_loss(
            &mut g,
            f.logits,
            f.scores,
            &f.levels,
            f.params.get(PROTOTYPES)?,
            &self.model.prototypes,
            &LossTargets {
                labels,
                masks,
                annotated: &annotated,
            },
            &self.config.loss,
            &self.config.fine_annotation,
        )?;
        let values = terms.values(&g);
        self.last_loss = Some(values);
        if !values.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {values:?}")));
        }
        g.backward(terms.total)?;
        let grads = f.params.gradients(&g);
        let rates: Vec<(ParamGroup, Option<Real>)> = [
            ParamGroup::Backbone,
            ParamGroup::Fpn,
            ParamGroup::Prototypes,
            ParamGroup::LastLayer,
        ]
        .iter()
        .map(|&grp| (grp, self.learning_rate(stage, grp)))
        .collect();
        self.optimizer.step(&mut self.model.params, &grads, |grp| {
            rates.iter().find(|(g, _)| *g == grp).and_then(|(_, r)| *r)
        })?;
        Ok(values)
    }

    fn run_epoch(&mut self, stage: Stage) -> Result<LossValues> {
        let epoch = self.progress.epochs;
        let plan = self.epoch_plan(epoch);
        let mut sum = LossValues::default();
        let mut batches = 0;
        for (b, items) in plan.chunks(self.config.train.batch_size).enumerate() {
            let (images, masks, labels, ids) = self.gather(items)?;
            let v = match self.train_step(stage, &images, &masks, &labels) {
                Ok(v) => v,
                Err(e @ Error::NonFinite(_)) => {
                    self.diagnostic = Some(Diagnostic {
                        epoch,
                        batch: b,
                        sample_ids: ids,
                        loss: self.last_loss.unwrap_or_default(),
                    });
                    log::error!("non-finite loss at epoch {epoch}, batch {b}");
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            sum.cross_entropy += v.cross_entropy;
            sum.cluster += v.cluster;
            sum.separation += v.separation;
            sum.orthogonality += v.orthogonality;
            sum.fine_annotation += v.fine_annotation;
            sum.total += v.total;
            batches += 1;
        }
        let n = batches.max(1) as Real;
        Ok(LossValues {
            cross_entropy: sum.cross_entropy / n,
            cluster: sum.cluster / n,
            separation: sum.separation / n,
            orthogonality: sum.orthogonality / n,
            fine_annotation: sum.fine_annotation / n,
            total: sum.total / n,
        })
    }

    /// Validation cross-entropy and macro AUROC, when a validation split
    /// with every margin class exists.
    pub fn validate_model(&self, model: &Model) -> Result<(Option<Real>, Option<Real>)> {
        let val = &self.data.val;
        let counts = val.class_counts();
        if MarginClass::MARGINS.iter().any(|c| counts[c.index()] == 0) {
            return Ok((None, None));
        }
        let images = val.all_images()?;
        let labels = val.labels();
        let inf = model.infer(&images, self.config.train.batch_size.max(32))?;
        let probs = inf.probabilities();
        let (_, c) = probs.dims2()?;
        let ce = labels
            .iter()
            .enumerate()
            .map(|(i, l)| -probs.data()[i * c + l.index()].max(Real::MIN_POSITIVE).ln())
            .sum::<Real>()
            / labels.len() as Real;
        let report = eval::report("val", &probs, &labels)?;
        Ok((Some(ce), Some(report.macro_auroc)))
    }

    fn record(&mut self, stage: Stage, train_loss: Option<LossValues>, projection: Option<&ProjectionReport>) -> Result<()> {
        let (ce, auroc) = self.validate_model(&self.model)?;
        let rec = EpochRecord {
            epoch: self.progress.epochs,
            stage,
            projected: projection.is_some(),
            train_loss,
            val_cross_entropy: ce,
            val_macro_auroc: auroc,
            max_displacement: projection.map(|p| p.max_displacement()),
        };
        log::info!(
            "stage {stage} epoch {}: loss {:?} val ce {:?} val auroc {:?}{}",
            rec.epoch,
            rec.train_loss.map(|l| l.total),
            ce,
            auroc,
            if rec.projected { " (projected)" } else { "" }
        );
        if projection.is_some() {
            if let Some(a) = auroc {
                if self.best.as_ref().is_none_or(|b| a > b.val_macro_auroc) {
                    self.best = Some(BestModel {
                        epoch: self.progress.epochs,
                        val_macro_auroc: a,
                        model: self.model.clone(),
                    });
                }
            }
        }
        self.history.push(rec);
        Ok(())
    }

    /// Projects every prototype onto its nearest same-class training patch.
    pub fn project(&mut self) -> Result<ProjectionReport> {
        let train = &self.data.train;
        let neg = &self.data.negatives;
        let images = Tensor::concat_batch(&[&train.all_images()?, &neg.all_images()?])?;
        let mut labels = train.labels();
        labels.extend(neg.labels());
        let mut ids = train.ids();
        ids.extend(neg.ids());
        let set = ProjectionSet {
            images: &images,
            labels: &labels,
            ids: &ids,
        };
        project_prototypes(&mut self.model, &set, self.config.train.batch_size.max(32))
    }

    /// Runs the remaining warmup epochs.
    pub fn stage_a_warmup(&mut self) -> Result<()> {
        self.expect_stage(Stage::Warmup)?;
        while self.progress.stage_epochs < self.config.train.warmup_epochs {
            let loss = self.run_epoch(Stage::Warmup)?;
            self.progress.stage_epochs += 1;
            self.progress.epochs += 1;
            self.record(Stage::Warmup, Some(loss), None)?;
        }
        self.advance(Stage::Projection);
        Ok(())
    }

    pub fn stage_b_project(&mut self) -> Result<ProjectionReport> {
        self.expect_stage(Stage::Projection)?;
        let report = self.project()?;
        self.record(Stage::Projection, None, Some(&report))?;
        self.advance(Stage::Finetune);
        Ok(report)
    }

    /// Runs the remaining fine-tuning epochs, re-projecting on schedule,
    /// then projects a final time.
    pub fn stage_c_finetune(&mut self) -> Result<()> {
        self.expect_stage(Stage::Finetune)?;
        let total = self.config.train.finetune_epochs;
        let every = self.config.train.project_every;
        while self.progress.stage_epochs < total {
            let loss = self.run_epoch(Stage::Finetune)?;
            self.progress.stage_epochs += 1;
            self.progress.epochs += 1;
            self.record(Stage::Finetune, Some(loss), None)?;
            let e = self.progress.stage_epochs;
            if every > 0 && e % every == 0 && e < total {
                let report = self.project()?;
                self.record(Stage::Finetune, None, Some(&report))?;
            }
        }
        if total > 0 {
            let report = self.project()?;
            self.record(Stage::Finetune, None, Some(&report))?;
        }
        if self.config.train.select_best {
            if let Some(best) = &self.best {
                log::info!(
                    "keeping epoch {} model (val macro AUROC {:.4})",
                    best.epoch,
                    best.val_macro_auroc
                );
                self.model = best.model.clone();
            }
        }
        self.advance(Stage::Done);
        Ok(())
    }

    /// Runs whatever is left of the schedule. With zero epochs in total
    /// nothing is trained and no projection happens.
    pub fn run(&mut self) -> Result<()> {
        let t = &self.config.train;
        if t.warmup_epochs + t.finetune_epochs == 0 {
            self.advance(Stage::Done);
            return Ok(());
        }
        loop {
            match self.progress.stage {
                Stage::Warmup => self.stage_a_warmup()?,
                Stage::Projection => {
                    self.stage_b_project()?;
                }
                Stage::Finetune => self.stage_c_finetune()?,
                Stage::Done => return Ok(()),
            }
        }
    }

    /// Runs only `stage`, which must be the current one.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Warmup => self.stage_a_warmup(),
            Stage::Projection => self.stage_b_project().map(|_| ()),
            Stage::Finetune => self.stage_c_finetune(),
            Stage::Done => Ok(()),
        }
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.progress.stage != stage {
            return Err(Error::invalid(format!(
                "cannot run stage {stage}: training is at stage {}",
                self.progress.stage
            )));
        }
        Ok(())
    }

    fn advance(&mut self, stage: Stage) {
        self.progress.stage = stage;
        self.progress.stage_epochs = 0;
    }
}
