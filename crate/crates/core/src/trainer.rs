//! Two-stage alternating training: adaptation first, then content transfer.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Graph, ParamId, Sgd, Tensor, Var};
use crate::content_transfer::{
    gate_transfer, input_transfer, output_transfer, transfer_mask, TransferPolicy,
};
use crate::datamodel::{
    argmax_class, ClassCatalog, Domain, DomainTag, Image, LabelMap, ProbabilityMap,
};
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialRole, LossTerms, LossWeights};
use crate::metrics::ConfusionMatrix;
use crate::networks::{
    Discriminator, Networks, GENERATOR_GROUP, IMAGE_DISC_GROUP, OUTPUT_DISC_GROUP,
    SEGMENTATION_GROUP,
};
use crate::pseudolabel::generate_pseudo_label;
use crate::synthdata::{compute_stats, DatasetStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Full adaptation objective.
    Adapt,
    /// Segmentation on labeled source images only.
    SourceOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Adapt,
    Transfer,
}

/// Learning rates and moment coefficients for the four parameter groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub gen_lr: f64,
    pub gen_betas: [f64; 2],
    pub disc_image_lr: f64,
    pub disc_image_betas: [f64; 2],
    pub disc_output_lr: f64,
    pub disc_output_betas: [f64; 2],
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            seg_lr: 1e-2,
            seg_momentum: 0.9,
            gen_lr: 1e-3,
            gen_betas: [0.5, 0.999],
            disc_image_lr: 1e-3,
            disc_image_betas: [0.5, 0.999],
            disc_output_lr: 1e-4,
            disc_output_betas: [0.9, 0.99],
            poly_power: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    /// Crop size as `[height, width]`.
    pub crop: [usize; 2],
    pub seed: u64,
    pub mode: TrainMode,
    pub self_training: bool,
    /// First step at which the pseudo-label cross-entropy is applied.
    pub self_training_start: usize,
    /// Stage 2 adds content transfer when true; otherwise it continues stage 1.
    pub content_transfer: bool,
    pub pseudo_refresh_every: usize,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 2000,
            stage2_iters: 2000,
            batch_size: 2,
            crop: [32, 64],
            seed: 0,
            mode: TrainMode::Adapt,
            self_training: true,
            self_training_start: 1000,
            content_transfer: true,
            pseudo_refresh_every: 200,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("trainer.{key} {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.crop.iter().any(|&c| c < 8 || c % 2 != 0) {
            return bad("crop", "entries must be even and at least 8");
        }
        if self.pseudo_refresh_every == 0 {
            return bad("pseudo_refresh_every", "must be positive");
        }
        let o = &self.optim;
        for (key, lr) in [
            ("optim.seg_lr", o.seg_lr),
            ("optim.gen_lr", o.gen_lr),
            ("optim.disc_image_lr", o.disc_image_lr),
            ("optim.disc_output_lr", o.disc_output_lr),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(key, "must be finite and non-negative");
            }
        }
        for (key, b) in [
            ("optim.gen_betas", o.gen_betas),
            ("optim.disc_image_betas", o.disc_image_betas),
            ("optim.disc_output_betas", o.disc_output_betas),
        ] {
            if b.iter().any(|v| !(0.0..1.0).contains(v)) {
                return bad(key, "must lie in [0, 1)");
            }
        }
        if !(0.0..1.0).contains(&o.seg_momentum) {
            return bad("optim.seg_momentum", "must lie in [0, 1)");
        }
        if !(o.poly_power.is_finite() && o.poly_power >= 0.0) {
            return bad("optim.poly_power", "must be finite and non-negative");
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }
}

/// Polynomial decay `lr0 * (1 - step / total)^power`.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub stage: Stage,
    pub terms: LossTerms,
    pub disc_image: f64,
    pub disc_output: f64,
    /// Weighted generator-side objective.
    pub total: f64,
    /// Content-transfer gate decision; `None` outside stage 2.
    pub gate: Option<bool>,
}

impl StepReport {
    /// `(term, value)` pairs in log order.
    pub fn log_entries(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = self.terms.named().to_vec();
        out.push(("disc_image", self.disc_image));
        out.push(("disc_output", self.disc_output));
        out.push(("total", self.total));
        if let Some(g) = self.gate {
            out.push(("gate", f64::from(u8::from(g))));
        }
        out
    }
}

/// Labeled source images plus unlabeled target images.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub source: Vec<(Image, LabelMap)>,
    pub target: Vec<Image>,
}

impl TrainingData {
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::Config(
                "training needs at least one source and one target image".into(),
            ));
        }
        Ok(())
    }

    pub fn source_stats(&self, catalog: &ClassCatalog) -> Result<DatasetStats> {
        compute_stats(self.source.iter().map(|(_, y)| y), catalog)
    }
}

/// One sampled mini-batch of crops.
#[derive(Clone, Debug)]
pub struct Batch {
    pub source_index: Vec<usize>,
    pub source: Vec<Image>,
    pub labels: Vec<LabelMap>,
    pub target_index: Vec<usize>,
    pub target: Vec<Image>,
    /// Cached pseudo labels cropped like `target`.
    pub pseudo: Vec<LabelMap>,
}

fn concat_labels(labels: &[LabelMap]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|y| y.indices().iter().copied())
        .collect()
}

fn image_batch(images: &[Image]) -> Tensor {
    Image::stack(&images.iter().collect::<Vec<_>>())
}

/// Predicts class probabilities for every image, one at a time.
pub fn predict_all(nets: &Networks, images: &[Image]) -> Result<Vec<ProbabilityMap>> {
    images.iter().map(|i| nets.predict(i)).collect()
}

/// Confusion matrix of argmax predictions over a labeled set.
pub fn evaluate(nets: &Networks, data: &[(Image, LabelMap)]) -> Result<ConfusionMatrix> {
    let classes = nets.config().num_classes;
    let mut cm = ConfusionMatrix::new(classes);
    for (img, y) in data {
        let p = nets.predict(img)?;
        cm.accumulate(&argmax_class(&p), &y.to_index_map())?;
    }
    Ok(cm)
}

/// Optimizer state and sampling RNG for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub nets: Networks,
    config: TrainConfig,
    weights: LossWeights,
    class_weights: Vec<f64>,
    catalog: ClassCatalog,
    policy: TransferPolicy,
    data: Arc<TrainingData>,
    groups: Groups,
    seg_opt: Sgd,
    gen_opt: Adam,
    disc_image_opt: Adam,
    disc_output_opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
    pseudo: Vec<LabelMap>,
    pseudo_step: Option<usize>,
}

#[derive(Clone, Debug)]
struct Groups {
    seg: Vec<ParamId>,
    gen: Vec<ParamId>,
    disc_image: Vec<ParamId>,
    disc_output: Vec<ParamId>,
    disc: BTreeSet<ParamId>,
}

impl Trainer {
    /// `policy.min_tail_instances` is replaced by the source median.
    pub fn new(
        nets: Networks,
        config: TrainConfig,
        weights: LossWeights,
        data: Arc<TrainingData>,
        catalog: ClassCatalog,
        policy: TransferPolicy,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        data.validate()?;
        let k = catalog.num_classes();
        if nets.config().num_classes != k {
            return Err(Error::Config(format!(
                "networks.num_classes is {} but the catalog has {k} classes",
                nets.config().num_classes
            )));
        }
        let [ch, cw] = config.crop;
        for img in data.source.iter().map(|(i, _)| i).chain(&data.target) {
            if img.height() < ch || img.width() < cw {
                return Err(Error::Config(format!(
                    "trainer.crop {ch}x{cw} exceeds image size {}x{}",
                    img.height(),
                    img.width()
                )));
            }
        }
        let stats = data.source_stats(&catalog)?;
        let class_weights = if weights.class_weights.is_empty() {
            losses::class_balanced_weights(&stats.pixel_counts, weights.class_balance_beta)
        } else if weights.class_weights.len() == k {
            weights.class_weights.clone()
        } else {
            return Err(Error::Config(format!(
                "losses.class_weights has {} entries for {k} classes",
                weights.class_weights.len()
            )));
        };
        let policy = policy.with_min_tail_instances(stats.tail_instance_median);
        let disc_image = nets.group(&IMAGE_DISC_GROUP);
        let disc_output = nets.group(&OUTPUT_DISC_GROUP);
        let groups = Groups {
            seg: nets.group(&SEGMENTATION_GROUP),
            gen: nets.group(&GENERATOR_GROUP),
            disc: disc_image.iter().chain(&disc_output).copied().collect(),
            disc_image,
            disc_output,
        };
        let o = &config.optim;
        Ok(Self {
            seg_opt: Sgd::new(o.seg_momentum),
            gen_opt: Adam::new(o.gen_betas[0], o.gen_betas[1]),
            disc_image_opt: Adam::new(o.disc_image_betas[0], o.disc_image_betas[1]),
            disc_output_opt: Adam::new(o.disc_output_betas[0], o.disc_output_betas[1]),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            nets,
            config,
            weights,
            class_weights,
            catalog,
            policy,
            data,
            groups,
            step: 0,
            pseudo: Vec::new(),
            pseudo_step: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut LossWeights {
        &mut self.weights
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn policy(&self) -> &TransferPolicy {
        &self.policy
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn stage_at(&self, step: usize) -> Stage {
        if step < self.config.stage1_iters {
            Stage::Adapt
        } else {
            Stage::Transfer
        }
    }

    fn self_training_active(&self) -> bool {
        self.config.mode == TrainMode::Adapt
            && self.config.self_training
            && self.step >= self.config.self_training_start
    }

    fn lr(&self, lr0: f64) -> f64 {
        poly_lr(
            lr0,
            self.step,
            self.config.total_iters(),
            self.config.optim.poly_power,
        )
    }

    /// Recomputes target pseudo labels from the current networks.
    pub fn refresh_pseudo_labels(&mut self) -> Result<()> {
        self.pseudo = predict_all(&self.nets, &self.data.target)?
            .iter()
            .map(generate_pseudo_label)
            .collect();
        self.pseudo_step = Some(self.step);
        Ok(())
    }

    fn pseudo_due(&self) -> bool {
        let needs_pseudo = self.self_training_active()
            || (self.config.content_transfer && self.stage_at(self.step) == Stage::Transfer);
        needs_pseudo
            && match self.pseudo_step {
                None => true,
                Some(last) => self.step - last >= self.config.pseudo_refresh_every,
            }
    }

    /// Draws a batch of random crops with the trainer's RNG.
    pub fn sample_batch(&mut self) -> Result<Batch> {
        let [ch, cw] = self.config.crop;
        let data = Arc::clone(&self.data);
        let mut b = Batch {
            source_index: Vec::new(),
            source: Vec::new(),
            labels: Vec::new(),
            target_index: Vec::new(),
            target: Vec::new(),
            pseudo: Vec::new(),
        };
        for _ in 0..self.config.batch_size {
            let si = self.rng.gen_range(0..data.source.len());
            let (img, y) = &data.source[si];
            let (top, left) = self.crop_origin(img);
            b.source_index.push(si);
            b.source.push(img.crop(top, left, ch, cw)?);
            b.labels.push(y.crop(top, left, ch, cw)?);

            let ti = self.rng.gen_range(0..data.target.len());
            let img = &data.target[ti];
            let (top, left) = self.crop_origin(img);
            b.target_index.push(ti);
            b.target.push(img.crop(top, left, ch, cw)?);
            if let Some(p) = self.pseudo.get(ti) {
                b.pseudo.push(p.crop(top, left, ch, cw)?);
            }
        }
        Ok(b)
    }

    fn crop_origin(&mut self, img: &Image) -> (usize, usize) {
        let [ch, cw] = self.config.crop;
        let top = self.rng.gen_range(0..=img.height() - ch);
        let left = self.rng.gen_range(0..=img.width() - cw);
        (top, left)
    }

    /// Samples a batch and runs the step appropriate for the current stage.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.pseudo_due() {
            self.refresh_pseudo_labels()?;
        }
        let batch = self.sample_batch()?;
        let report = match (self.config.mode, self.stage_at(self.step)) {
            (TrainMode::SourceOnly, stage) => self.train_step_source_only(&batch, stage)?,
            (TrainMode::Adapt, Stage::Transfer) if self.config.content_transfer => {
                self.train_step_ct(&batch)?
            }
            (TrainMode::Adapt, stage) => self.train_step_uda(&batch, stage)?,
        };
        Ok(report)
    }

    fn finish(&mut self, mut report: StepReport) -> Result<StepReport> {
        for (name, v) in report.log_entries() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss term {name} ({v}) at step {}",
                    self.step
                )));
            }
        }
        report.step = self.step;
        self.step += 1;
        Ok(report)
    }

    fn source_only_loss(&self, g: &mut Graph, batch: &Batch) -> (Var, f64) {
        let [h, w] = self.config.crop;
        let xs = g.constant(image_batch(&batch.source));
        let c = self.nets.content_forward(g, xs);
        let p = self.nets.segment_forward(g, c, h, w);
        let labels = concat_labels(&batch.labels);
        let ce = losses::weighted_ce_var(g, p, &labels, &self.class_weights);
        let v = g.value(ce).item();
        (ce, v)
    }

    /// Supervised segmentation step on source crops only.
    pub fn train_step_source_only(&mut self, batch: &Batch, stage: Stage) -> Result<StepReport> {
        let frozen: BTreeSet<ParamId> = self
            .groups
            .gen
            .iter()
            .chain(&self.groups.disc)
            .copied()
            .collect();
        let mut g = Graph::with_frozen(&self.nets.params, |id| frozen.contains(&id));
        let (loss, seg) = self.source_only_loss(&mut g, batch);
        let grads = g.backward(loss);
        let lr = self.lr(self.config.optim.seg_lr);
        self.seg_opt
            .step(&mut self.nets.params, &grads, &self.groups.seg, lr);
        let terms = LossTerms {
            seg,
            ..LossTerms::default()
        };
        self.finish(StepReport {
            step: 0,
            stage,
            total: self.weights.seg * seg,
            terms,
            disc_image: 0.0,
            disc_output: 0.0,
            gate: None,
        })
    }

    /// Adaptation step: discriminator update, then encoder/generator/segmenter update.
    pub fn train_step_uda(&mut self, batch: &Batch, stage: Stage) -> Result<StepReport> {
        self.adapt_step(batch, stage, None)
    }

    /// Adaptation step plus the content-transfer term when the source image passes the gate.
    pub fn train_step_ct(&mut self, batch: &Batch) -> Result<StepReport> {
        let gate = batch
            .source_index
            .iter()
            .any(|&i| gate_transfer(&self.data.source[i].1, &self.policy));
        let plan = gate.then(|| self.gated_pairs(batch)).transpose()?;
        let mut report = self.adapt_step(batch, Stage::Transfer, plan.filter(|p| !p.is_empty()))?;
        report.gate = Some(gate);
        Ok(report)
    }

    /// Indices of batch items whose full source image passes the gate.
    fn gated_pairs(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(batch
            .source_index
            .iter()
            .enumerate()
            .filter(|(_, &i)| gate_transfer(&self.data.source[i].1, &self.policy))
            .map(|(b, _)| b)
            .collect())
    }

    fn adapt_step(
        &mut self,
        batch: &Batch,
        stage: Stage,
        transfer: Option<Vec<usize>>,
    ) -> Result<StepReport> {
        let [h, w] = self.config.crop;
        let n = batch.source.len();
        let nets = &self.nets;
        let frozen = &self.groups.disc;
        let mut g = Graph::with_frozen(&nets.params, |id| frozen.contains(&id));
        let xs = g.constant(image_batch(&batch.source));
        let xt = g.constant(image_batch(&batch.target));

        let stem_s = nets.stem_forward(&mut g, xs);
        let stem_t = nets.stem_forward(&mut g, xt);
        let c_s = nets.content_from_stem(&mut g, stem_s);
        let c_t = nets.content_from_stem(&mut g, stem_t);
        let style_ss = nets.style_from_stem(&mut g, stem_s, Domain::Source);
        let style_ts = nets.style_from_stem(&mut g, stem_s, Domain::Target);
        let style_st = nets.style_from_stem(&mut g, stem_t, Domain::Source);
        let style_tt = nets.style_from_stem(&mut g, stem_t, Domain::Target);

        let x_s2t = nets.generate_forward(&mut g, style_tt, c_s, Domain::Target);
        let x_t2s = nets.generate_forward(&mut g, style_ss, c_t, Domain::Source);
        let x_s2s = nets.generate_forward(&mut g, style_ss, c_s, Domain::Source);
        let x_t2t = nets.generate_forward(&mut g, style_tt, c_t, Domain::Target);

        let stem_s2t = nets.stem_forward(&mut g, x_s2t);
        let stem_t2s = nets.stem_forward(&mut g, x_t2s);
        let c_s2t = nets.content_from_stem(&mut g, stem_s2t);
        let c_t2s = nets.content_from_stem(&mut g, stem_t2s);
        let style_s_of_s2t = nets.style_from_stem(&mut g, stem_s2t, Domain::Source);
        let style_t_of_s2t = nets.style_from_stem(&mut g, stem_s2t, Domain::Target);
        let style_s_of_t2s = nets.style_from_stem(&mut g, stem_t2s, Domain::Source);
        let style_t_of_t2s = nets.style_from_stem(&mut g, stem_t2s, Domain::Target);
        let x_s2t2s = nets.generate_forward(&mut g, style_s_of_t2s, c_s2t, Domain::Source);
        let x_t2s2t = nets.generate_forward(&mut g, style_t_of_s2t, c_t2s, Domain::Target);

        let p_s = nets.segment_forward(&mut g, c_s, h, w);
        let p_s2t = nets.segment_forward(&mut g, c_s2t, h, w);
        let p_t = nets.segment_forward(&mut g, c_t, h, w);

        // Discriminator phase on detached fakes.
        let fakes = (
            g.value(x_s2t).clone(),
            g.value(x_t2s).clone(),
            g.value(p_s).clone(),
            g.value(p_t).clone(),
        );
        let (disc_image, disc_output) = self.discriminator_phase(batch, fakes)?;

        // Generator phase: discriminators read their freshly updated parameters.
        let nets = &self.nets;
        let cw = &self.class_weights;
        let labels = &batch.labels;
        let y_s2t = labels;
        for (a, b) in labels.iter().zip(y_s2t) {
            losses::ensure_same_labels(a, b)?;
        }
        let y = concat_labels(labels);
        let l1 = |g: &mut Graph, v| losses::l1_zero_var(g, v);
        let z1 = l1(&mut g, style_ts);
        let z2 = l1(&mut g, style_st);
        let zero = g.add(z1, z2);
        let z3 = l1(&mut g, style_s_of_s2t);
        let z4 = l1(&mut g, style_t_of_t2s);
        let zero_trans = g.add(z3, z4);
        let ce1 = losses::weighted_ce_var(&mut g, p_s, &y, cw);
        let ce2 = losses::weighted_ce_var(&mut g, p_s2t, &y, cw);
        let seg = g.add(ce1, ce2);
        let r1 = losses::l1_image_var(&mut g, x_s2s, xs);
        let r2 = losses::l1_image_var(&mut g, x_t2t, xt);
        let rec = g.add(r1, r2);
        let cy1 = losses::l1_image_var(&mut g, x_s2t2s, xs);
        let cy2 = losses::l1_image_var(&mut g, x_t2s2t, xt);
        let cycle = g.add(cy1, cy2);
        let d_t = nets.discriminate_forward(&mut g, x_s2t, Discriminator::ImageTarget);
        let d_s = nets.discriminate_forward(&mut g, x_t2s, Discriminator::ImageSource);
        let a1 = losses::adversarial_var(&mut g, None, d_t, AdversarialRole::Generator);
        let a2 = losses::adversarial_var(&mut g, None, d_s, AdversarialRole::Generator);
        let adv_image = g.add(a1, a2);
        let d_out = nets.discriminate_forward(&mut g, p_t, Discriminator::Output);
        let adv_output = losses::adversarial_var(&mut g, None, d_out, AdversarialRole::Generator);

        let wts = &self.weights;
        let mut parts = vec![
            (wts.zero, zero),
            (wts.zero_trans, zero_trans),
            (wts.seg, seg),
            (wts.rec, rec),
            (wts.cycle, cycle),
            (wts.adv_image, adv_image),
            (wts.adv_output, adv_output),
        ];
        let self_training = if self.self_training_active() && batch.pseudo.len() == n {
            let yt = concat_labels(&batch.pseudo);
            let st = losses::weighted_ce_var(&mut g, p_t, &yt, cw);
            parts.push((wts.self_training, st));
            Some(st)
        } else {
            None
        };
        let seg_ct = match &transfer {
            Some(items) if stage == Stage::Transfer => {
                let s2t = g.value(x_s2t).clone();
                let v = self.content_transfer_term(&mut g, batch, &s2t, items)?;
                parts.push((wts.seg_ct, v));
                Some(v)
            }
            _ => None,
        };
        let total = g.weighted_sum(&parts);

        let val = |g: &Graph, v: Var| g.value(v).item();
        let terms = LossTerms {
            rec: val(&g, rec),
            adv_image: val(&g, adv_image),
            adv_output: val(&g, adv_output),
            zero: val(&g, zero),
            zero_trans: val(&g, zero_trans),
            seg: val(&g, seg),
            cycle: val(&g, cycle),
            seg_ct: seg_ct.map_or(0.0, |v| val(&g, v)),
            self_training: self_training.map_or(0.0, |v| val(&g, v)),
        };
        let total_value = val(&g, total);
        if !total_value.is_finite() {
            let name = terms
                .named()
                .into_iter()
                .find(|(_, v)| !v.is_finite())
                .map_or("total", |(n, _)| n);
            return Err(Error::Numeric(format!(
                "non-finite loss term {name} at step {}",
                self.step
            )));
        }
        let grads = g.backward(total);
        let seg_lr = self.lr(self.config.optim.seg_lr);
        let gen_lr = self.lr(self.config.optim.gen_lr);
        self.seg_opt
            .step(&mut self.nets.params, &grads, &self.groups.seg, seg_lr);
        self.gen_opt
            .step(&mut self.nets.params, &grads, &self.groups.gen, gen_lr);
        self.finish(StepReport {
            step: 0,
            stage,
            terms,
            disc_image,
            disc_output,
            total: total_value,
            gate: None,
        })
    }

    /// Builds `I_t_ct` from detached translations, labels it, and returns the CE var.
    fn content_transfer_term(
        &self,
        g: &mut Graph,
        batch: &Batch,
        s2t: &Tensor,
        items: &[usize],
    ) -> Result<Var> {
        let [h, w] = self.config.crop;
        let mut images = Vec::with_capacity(items.len());
        let mut refined = Vec::with_capacity(items.len());
        for &b in items {
            let donor = Image::from_batch(s2t, b, DomainTag::TranslatedTarget)?;
            let y_t = match batch.pseudo.get(b) {
                Some(y) => y.clone(),
                None => generate_pseudo_label(&self.nets.predict(&batch.target[b])?),
            };
            let m = transfer_mask(&batch.labels[b], &y_t, &self.catalog, &self.policy)?;
            let i_t_ct = input_transfer(&donor, &batch.target[b], &m)?;
            let y_t_ct = generate_pseudo_label(&self.nets.predict(&i_t_ct)?);
            refined.push(output_transfer(&batch.labels[b], &y_t_ct, &m)?);
            images.push(i_t_ct);
        }
        let x = g.constant(image_batch(&images));
        let c = self.nets.content_forward(g, x);
        let p = self.nets.segment_forward(g, c, h, w);
        Ok(losses::weighted_ce_var(
            g,
            p,
            &concat_labels(&refined),
            &self.class_weights,
        ))
    }

    fn discriminator_phase(
        &mut self,
        batch: &Batch,
        fakes: (Tensor, Tensor, Tensor, Tensor),
    ) -> Result<(f64, f64)> {
        let (s2t, t2s, p_s, p_t) = fakes;
        let disc = &self.groups.disc;
        let nets = &self.nets;
        let mut g = Graph::with_frozen(&nets.params, |id| !disc.contains(&id));
        let real_s = g.constant(image_batch(&batch.source));
        let real_t = g.constant(image_batch(&batch.target));
        let fake_s2t = g.constant(s2t);
        let fake_t2s = g.constant(t2s);
        let real_p = g.constant(p_s);
        let fake_p = g.constant(p_t);
        let scores = |g: &mut Graph, real: Var, fake: Var, which| {
            let r = nets.discriminate_forward(g, real, which);
            let f = nets.discriminate_forward(g, fake, which);
            losses::adversarial_var(g, Some(r), f, AdversarialRole::Discriminator)
        };
        let lt = scores(&mut g, real_t, fake_s2t, Discriminator::ImageTarget);
        let ls = scores(&mut g, real_s, fake_t2s, Discriminator::ImageSource);
        let image = g.add(lt, ls);
        let output = scores(&mut g, real_p, fake_p, Discriminator::Output);
        let total = g.weighted_sum(&[
            (self.weights.adv_image, image),
            (self.weights.adv_output, output),
        ]);
        let (vi, vo) = (g.value(image).item(), g.value(output).item());
        if !(vi.is_finite() && vo.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite discriminator loss at step {}",
                self.step
            )));
        }
        let grads = g.backward(total);
        let lr_i = self.lr(self.config.optim.disc_image_lr);
        let lr_o = self.lr(self.config.optim.disc_output_lr);
        self.disc_image_opt
            .step(&mut self.nets.params, &grads, &self.groups.disc_image, lr_i);
        self.disc_output_opt.step(
            &mut self.nets.params,
            &grads,
            &self.groups.disc_output,
            lr_o,
        );
        Ok((vi, vo))
    }

    /// Runs steps until the configured total, reporting each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport) -> Result<()>) -> Result<()> {
        while self.step < self.config.total_iters() {
            let r = self.step()?;
            on_step(&r)?;
        }
        Ok(())
    }

    /// Runs until `until` steps have been taken in total.
    pub fn run_until(
        &mut self,
        until: usize,
        mut on_step: impl FnMut(&StepReport) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.config.total_iters());
        while self.step < until {
            let r = self.step()?;
            on_step(&r)?;
        }
        Ok(())
    }
}

mod run;

pub use run::{
    run_training, write_log_lines, MetricsEntry, RunSummary, CHECKPOINT_FILE, CONFIG_SNAPSHOT_FILE,
    LOG_FILE, METRICS_FILE,
};
