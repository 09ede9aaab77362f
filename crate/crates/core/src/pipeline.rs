//! Four-stage training (ERM, detector, target bank, adapters), evaluation,
//! ablation variants, sweeps and checkpoint bundles.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{
    build_target_bank_with, class_group_gaps, Composite, LossWeights, NegativeStrategy, TargetBank,
    TaskScope, Trainable, TriggerRule,
};
use crate::data::{
    generate_synthetic, inject_label_noise, load_csv, mask_sensitive, randomize_labels,
    stratified_split, Dataset, Sensitive, Split, SynthConfig,
};
use crate::detector::{
    as_sequences, evaluate_rates, lof_scores, pseudo_label, train_detector, DetectorHyper,
    DetectorRates, Gate,
};
use crate::error::{dim, invalid, FairNetError, Result};
use crate::fairlora::{init_adapter, triggered, AdapterGrad, AdapterUnit, LoraAdapter};
use crate::metrics::{fairness_report, FairnessReport};
use crate::model::{argmax, count_overhead, train_erm, BaseModel, ErmHyper, ErmLog, Overhead};
use crate::rng::SplitMix64;
use crate::theory::{
    empirical_theory_bridge, monte_carlo_validate, BridgeSample, MonteCarlo, TheoryBridge,
};

// Fixed offsets expanding the master seed into per-stage streams.
const SEED_SPLIT: u64 = 1;
const SEED_MASK: u64 = 2;
const SEED_NOISE: u64 = 3;
const SEED_ERM: u64 = 4;
const SEED_DETECTOR: u64 = 5;
const SEED_ADAPTER: u64 = 6;
const SEED_STAGE4: u64 = 7;
const SEED_MC: u64 = 9;

/// Sensitive attribute id used for the single-attribute pipeline.
pub const ATTRIBUTE: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV file to load; when absent the synthetic generator is used.
    pub csv: Option<PathBuf>,
    pub synthetic: SynthConfig,
    /// Train / validation / test proportions.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            csv: None,
            synthetic: SynthConfig::default(),
            split: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Switch in full mode, trained scorer otherwise.
    Auto,
    Switch,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    /// 1-based layer whose output the detector reads.
    pub layer: usize,
    pub threshold: f64,
    pub gate: GateKind,
    pub lof_k: usize,
    pub training: DetectorHyper,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            layer: 2,
            threshold: 0.5,
            gate: GateKind::Auto,
            lof_k: 20,
            training: DetectorHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub layer: usize,
    pub rank: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives: NegativeStrategy,
    /// Task cross-entropy in stage 4 (`off` trains on the contrastive term only).
    pub task: TaskScope,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            layer: 2,
            rank: 4,
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 100,
            negatives: NegativeStrategy::Hard,
            task: TaskScope::Off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Partial,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullMethod,
    NoDetector,
    NoContrastive,
    Neither,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::FullMethod,
        Variant::NoDetector,
        Variant::NoContrastive,
        Variant::Neither,
    ];

    pub fn gated(self) -> bool {
        matches!(self, Variant::FullMethod | Variant::NoContrastive)
    }

    pub fn contrastive(self) -> bool {
        matches!(self, Variant::FullMethod | Variant::NoDetector)
    }

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| invalid(format!("unknown variant '{name}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullMethod => "full_method",
            Variant::NoDetector => "no_detector",
            Variant::NoContrastive => "no_contrastive",
            Variant::Neither => "neither",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Each hit label is replaced by a fair coin.
    Randomize,
    /// Each hit label is inverted.
    Flip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub mode: Mode,
    /// Kept fraction of training sensitive labels in partial mode.
    pub label_fraction: f64,
    /// Pseudo-label share in unlabeled mode.
    pub contamination: f64,
    pub noise_rate: f64,
    pub noise_kind: NoiseKind,
    pub variant: Variant,
    pub seed: u64,
    pub monte_carlo_samples: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            label_fraction: 0.1,
            contamination: 0.1,
            noise_rate: 0.0,
            noise_kind: NoiseKind::Randomize,
            variant: Variant::FullMethod,
            seed: 0,
            monte_carlo_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub model: ErmHyper,
    pub detector: DetectorSection,
    pub adapter: AdapterSection,
    pub loss: LossWeights,
    pub pipeline: PipelineSection,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Overrides both the training seed and the synthetic data seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pipeline.seed = seed;
        self.data.synthetic.seed = seed;
        self
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.csv.is_none() {
            self.data.synthetic.validate()?;
        }
        let sp = self.data.split;
        if sp.iter().any(|v| !(*v >= 0.0))
            || sp[0] <= 0.0
            || sp[2] <= 0.0
            || (sp.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(invalid(
                "split must be non-negative, sum to 1, and give train and test a share",
            ));
        }
        self.model.validate()?;
        self.loss.validate()?;
        let depth = self.model.hidden.len() + 1;
        for (name, layer) in [
            ("detector.layer", self.detector.layer),
            ("adapter.layer", self.adapter.layer),
        ] {
            if layer == 0 || layer > depth {
                return Err(invalid(format!("{name} = {layer} outside 1..={depth}")));
            }
        }
        if !(0.0..=1.0).contains(&self.detector.threshold) {
            return Err(invalid("detector.threshold outside [0, 1]"));
        }
        if self.detector.lof_k == 0 {
            return Err(invalid("detector.lof_k must be >= 1"));
        }
        if self.adapter.rank == 0
            || self.adapter.batch_size == 0
            || !(self.adapter.learning_rate > 0.0)
        {
            return Err(invalid(
                "adapter rank, batch_size and learning_rate must be positive",
            ));
        }
        let p = &self.pipeline;
        if !(p.label_fraction > 0.0 && p.label_fraction <= 1.0) {
            return Err(invalid("pipeline.label_fraction outside (0, 1]"));
        }
        if !(p.contamination > 0.0 && p.contamination < 1.0) {
            return Err(invalid("pipeline.contamination outside (0, 1)"));
        }
        if !(0.0..=1.0).contains(&p.noise_rate) {
            return Err(invalid("pipeline.noise_rate outside [0, 1]"));
        }
        if p.mode == Mode::Full && self.detector.gate == GateKind::Switch && p.noise_rate > 0.0 {
            return Err(invalid("label noise needs a trained detector"));
        }
        if p.mode != Mode::Full && self.detector.gate == GateKind::Switch {
            return Err(invalid("a switch gate needs full sensitive labels"));
        }
        Ok(())
    }

    fn seed(&self, offset: u64) -> u64 {
        SplitMix64::derive(self.pipeline.seed, offset).next_u64()
    }

    fn resolved_gate(&self) -> GateKind {
        match (self.detector.gate, self.pipeline.mode) {
            (GateKind::Auto, Mode::Full) if self.pipeline.noise_rate == 0.0 => GateKind::Switch,
            (GateKind::Auto, _) => GateKind::Trained,
            (g, _) => g,
        }
    }
}

/// Loads or generates the dataset and assigns train/val/test splits.
pub fn load_split_data(cfg: &PipelineConfig) -> Result<Dataset> {
    let raw = match &cfg.data.csv {
        Some(path) => load_csv(path)?,
        None => generate_synthetic(&cfg.data.synthetic)?,
    };
    stratified_split(&raw, cfg.data.split, cfg.seed(SEED_SPLIT))
}

/// Applies the label-availability regime of `cfg` to the training split
/// (and hides validation labels outside full mode). Test labels stay
/// intact for evaluation.
pub fn apply_label_regime(cfg: &PipelineConfig, split: &Dataset) -> Result<Dataset> {
    let train = split.indices(Split::Train);
    if train.iter().any(|&i| !split.s()[i].is_labeled()) && cfg.pipeline.mode != Mode::Unlabeled {
        return Err(invalid(
            "training split has unlabeled sensitive values; use partial or unlabeled mode",
        ));
    }
    let mut ds = match cfg.pipeline.mode {
        Mode::Full => split.clone(),
        Mode::Partial => mask_sensitive(split, cfg.pipeline.label_fraction, cfg.seed(SEED_MASK))?
            .unlabel_split(Split::Val),
        Mode::Unlabeled => split.unlabel_split(Split::Train).unlabel_split(Split::Val),
    };
    if cfg.pipeline.noise_rate > 0.0 {
        ds = match cfg.pipeline.noise_kind {
            NoiseKind::Randomize => {
                randomize_labels(&ds, cfg.pipeline.noise_rate, cfg.seed(SEED_NOISE))?
            }
            NoiseKind::Flip => {
                inject_label_noise(&ds, cfg.pipeline.noise_rate, cfg.seed(SEED_NOISE))?
            }
        };
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageLosses {
    pub erm: Vec<f64>,
    pub erm_best_epoch: usize,
    pub detector: Vec<f64>,
    pub adapter: Vec<f64>,
}

/// Trained components of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub model: BaseModel,
    pub gate: Gate,
    pub bank: TargetBank,
    pub units: Vec<AdapterUnit>,
}

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Bundle {
    format_version: u32,
    artifacts: Artifacts,
}

impl Artifacts {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Bundle {
            format_version: BUNDLE_VERSION,
            artifacts: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Bundle = serde_json::from_str(text)?;
        if b.format_version != BUNDLE_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint version {}",
                b.format_version
            )));
        }
        let a = b.artifacts;
        BaseModel::from_layers(a.model.layers().to_vec())?;
        for u in &a.units {
            u.adapter.check_against(&a.model)?;
        }
        Ok(a)
    }

    pub fn adapters(&self) -> Vec<LoraAdapter> {
        self.units.iter().map(|u| u.adapter.clone()).collect()
    }

    pub fn overhead(&self) -> Overhead {
        let detectors: Vec<_> = self.gate.detector().into_iter().cloned().collect();
        count_overhead(&self.model, &self.adapters(), &detectors)
    }
}

/// Staged runner. Each stage needs the previous stage's artifact and fails
/// with `MissingArtifact` otherwise.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    data: Dataset,
    model: Option<BaseModel>,
    gate: Option<Gate>,
    bank: Option<TargetBank>,
    units: Option<Vec<AdapterUnit>>,
    losses: StageLosses,
}

fn missing(what: &str) -> FairNetError {
    FairNetError::MissingArtifact(format!("{what} has not been produced"))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let split = load_split_data(&cfg)?;
        let data = apply_label_regime(&cfg, &split)?;
        Ok(Self::with_data(cfg, data))
    }

    /// Runner over an already prepared dataset.
    pub fn with_data(cfg: PipelineConfig, data: Dataset) -> Self {
        Self {
            cfg,
            data,
            model: None,
            gate: None,
            bank: None,
            units: None,
            losses: StageLosses::default(),
        }
    }

    /// Runner that starts after stage 1 with a shared base model.
    pub fn with_stage1(cfg: PipelineConfig, data: Dataset, model: BaseModel, log: &ErmLog) -> Self {
        let mut p = Self::with_data(cfg, data);
        p.model = Some(model);
        p.losses.erm.clone_from(&log.epoch_losses);
        p.losses.erm_best_epoch = log.best_epoch;
        p
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn losses(&self) -> &StageLosses {
        &self.losses
    }

    pub fn model(&self) -> Option<&BaseModel> {
        self.model.as_ref()
    }

    pub fn gate(&self) -> Option<&Gate> {
        self.gate.as_ref()
    }

    pub fn bank(&self) -> Option<&TargetBank> {
        self.bank.as_ref()
    }

    pub fn units(&self) -> Option<&[AdapterUnit]> {
        self.units.as_deref()
    }

    /// ERM on the training split, then frozen.
    pub fn run_stage1(&mut self) -> Result<&BaseModel> {
        let (mut model, log) = train_erm(&self.data, &self.cfg.model, self.cfg.seed(SEED_ERM))?;
        model.freeze();
        self.losses.erm = log.epoch_losses;
        self.losses.erm_best_epoch = log.best_epoch;
        self.model = Some(model);
        self.gate = None;
        self.bank = None;
        self.units = None;
        Ok(self.model.as_ref().expect("just set"))
    }

    /// Switch gate on known labels, or a scorer trained on the labeled
    /// (partial) or LOF pseudo-labeled (unlabeled) training samples.
    pub fn run_stage2(&mut self) -> Result<&Gate> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| missing("stage 1 base model"))?;
        let layer = self.cfg.detector.layer;
        model.check_layer(layer)?;
        let train = self.data.indices(Split::Train);
        let gate = match self.cfg.resolved_gate() {
            GateKind::Switch => {
                if train.iter().any(|&i| !self.data.s()[i].is_labeled()) {
                    return Err(invalid("switch gate needs every training sensitive label"));
                }
                self.losses.detector.clear();
                Gate::Switch {
                    attribute: ATTRIBUTE,
                    layer,
                }
            }
            _ => {
                let reps = representations(model, &self.data, &train, layer)?;
                let labels: Vec<Option<bool>> = match self.cfg.pipeline.mode {
                    Mode::Unlabeled => {
                        let lof = lof_scores(&reps, self.cfg.detector.lof_k)?;
                        pseudo_label(&lof, self.cfg.pipeline.contamination)?
                            .into_iter()
                            .map(Some)
                            .collect()
                    }
                    _ => train.iter().map(|&i| self.data.s()[i].label()).collect(),
                };
                let (det, losses) = train_detector(
                    &as_sequences(&reps),
                    &labels,
                    &self.cfg.detector.training,
                    ATTRIBUTE,
                    layer,
                    self.cfg.detector.threshold,
                    self.cfg.seed(SEED_DETECTOR),
                )?;
                self.losses.detector = losses;
                Gate::Trained(det)
            }
        };
        self.gate = Some(gate);
        self.bank = None;
        self.units = None;
        Ok(self.gate.as_ref().expect("just set"))
    }

    /// Whether the gate fires on training sample `i` at the configured τ.
    fn fires(&self, model: &BaseModel, gate: &Gate, i: usize) -> Result<bool> {
        let trace = model.forward(self.data.x(i))?;
        Ok(
            gate.score(trace.representation(gate.layer()), self.data.s()[i])?
                > self.cfg.detector.threshold,
        )
    }

    /// Target bank from stage-1 representations. Samples without a
    /// sensitive label take the detector's decision as their group.
    pub fn run_stage3(&mut self) -> Result<&TargetBank> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| missing("stage 1 base model"))?;
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| missing("stage 2 detector"))?;
        let train = self.data.indices(Split::Train);
        let mut groups = vec![None; self.data.len()];
        for &i in &train {
            groups[i] = match self.data.s()[i].label() {
                Some(b) => Some(b),
                None => Some(self.fires(model, gate, i)?),
            };
        }
        let bank =
            build_target_bank_with(model, &self.data, self.cfg.adapter.layer, &train, &groups)?;
        self.bank = Some(bank);
        self.units = None;
        Ok(self.bank.as_ref().expect("just set"))
    }

    /// Trains the adapter with θ and φ frozen. Anchors are the known
    /// minority in full mode and detector-flagged samples otherwise.
    pub fn run_stage4(&mut self, variant: Variant) -> Result<&[AdapterUnit]> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| missing("stage 1 base model"))?;
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| missing("stage 2 detector"))?;
        let bank = self
            .bank
            .as_ref()
            .ok_or_else(|| missing("stage 3 target bank"))?;
        let a = &self.cfg.adapter;
        let spec = model.layer(a.layer).spec;
        let mut adapter = init_adapter(
            a.layer,
            (spec.out_dim, spec.in_dim),
            a.rank,
            self.cfg.seed(SEED_ADAPTER),
        )?;

        let train = self.data.indices(Split::Train);
        let full = self.cfg.pipeline.mode == Mode::Full;
        let mut anchors = Vec::new();
        for &i in &train {
            let hit = if full {
                self.data.s()[i] == Sensitive::One
            } else {
                self.fires(model, gate, i)?
            };
            if hit {
                anchors.push(i);
            }
        }
        let (task, lambda_c) = if variant.contrastive() {
            (a.task, self.cfg.loss.lambda_c)
        } else {
            (TaskScope::Triggered, 0.0)
        };
        let trigger = if full {
            TriggerRule::GroundTruth
        } else {
            TriggerRule::Detector {
                tau: self.cfg.detector.threshold,
            }
        };

        let mut order_rng = SplitMix64::derive(self.cfg.pipeline.seed, SEED_STAGE4);
        let mut neg_rng = SplitMix64::derive(self.cfg.pipeline.seed, SEED_STAGE4 + 1);
        let mut losses = Vec::with_capacity(a.epochs);
        if !anchors.is_empty() {
            for epoch in 1..=a.epochs {
                order_rng.shuffle(&mut anchors);
                let mut sum = 0.0;
                for batch in anchors.chunks(a.batch_size) {
                    let ctx = Composite {
                        model,
                        adapter: &adapter,
                        detector: gate.detector(),
                        bank,
                        weights: LossWeights {
                            lambda_d: 0.0,
                            lambda_c,
                            margin: self.cfg.loss.margin,
                        },
                        class_weights: (1.0, 1.0),
                        trigger,
                        task,
                        negatives: a.negatives,
                    };
                    let (parts, grad) = ctx.evaluate(
                        &self.data,
                        batch,
                        Trainable {
                            adapter: true,
                            ..Trainable::default()
                        },
                        &mut neg_rng,
                    )?;
                    sum += parts.total * batch.len() as f64;
                    let g: AdapterGrad = grad.adapter.expect("adapter is trainable");
                    adapter.step(a.learning_rate, &g);
                }
                if !adapter.params_flat().iter().all(|v| v.is_finite()) {
                    return Err(FairNetError::Diverged {
                        epoch,
                        msg: "non-finite adapter weights".into(),
                    });
                }
                losses.push(sum / anchors.len() as f64);
            }
        }
        self.losses.adapter = losses;
        self.units = Some(vec![AdapterUnit {
            attribute: gate.attribute(),
            adapter,
        }]);
        Ok(self.units.as_deref().expect("just set"))
    }

    pub fn artifacts(&self) -> Result<Artifacts> {
        Ok(Artifacts {
            model: self
                .model
                .clone()
                .ok_or_else(|| missing("stage 1 base model"))?,
            gate: self
                .gate
                .clone()
                .ok_or_else(|| missing("stage 2 detector"))?,
            bank: self
                .bank
                .clone()
                .ok_or_else(|| missing("stage 3 target bank"))?,
            units: self
                .units
                .clone()
                .ok_or_else(|| missing("stage 4 adapters"))?,
        })
    }

    pub fn run_all(&mut self, variant: Variant) -> Result<Artifacts> {
        if self.model.is_none() {
            self.run_stage1()?;
        }
        self.run_stage2()?;
        self.run_stage3()?;
        self.run_stage4(variant)?;
        self.artifacts()
    }
}

pub fn representations(
    model: &BaseModel,
    ds: &Dataset,
    idx: &[usize],
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    idx.iter()
        .map(|&i| Ok(model.forward(ds.x(i))?.representation(layer).to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub layer: usize,
    pub before: BTreeMap<usize, f64>,
    pub after: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryBlock {
    pub bridge: TheoryBridge,
    pub monte_carlo: Option<MonteCarlo>,
}

/// Test-split evaluation of one set of artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub threshold: f64,
    pub variant: Variant,
    pub detector_rates: DetectorRates,
    pub base: FairnessReport,
    pub fairnet: FairnessReport,
    pub triggered: usize,
    pub changed_untriggered: usize,
    pub theory: TheoryBlock,
    pub alignment: Alignment,
}

/// Evaluates base and gated predictions on the test split. Samples the
/// gate does not fire on use the base model unchanged.
pub fn evaluate(
    art: &Artifacts,
    data: &Dataset,
    tau: f64,
    variant: Variant,
    mc_samples: usize,
    mc_seed: u64,
) -> Result<Evaluation> {
    let test = data.indices(Split::Test);
    if test.is_empty() {
        return Err(FairNetError::InsufficientData("empty test split".into()));
    }
    let layer = art.bank.layer;
    let adapters: Vec<&LoraAdapter> = art.units.iter().map(|u| &u.adapter).collect();
    let mut base_pred = Vec::with_capacity(test.len());
    let mut gated_pred = Vec::with_capacity(test.len());
    let mut scores = Vec::with_capacity(test.len());
    let mut minority = Vec::with_capacity(test.len());
    let mut y = Vec::with_capacity(test.len());
    let mut bridge = Vec::with_capacity(test.len());
    let mut before = Vec::with_capacity(test.len());
    let mut after = Vec::with_capacity(test.len());
    let mut fired_count = 0;
    let mut changed_untriggered = 0;
    for &i in &test {
        let s = data.s()[i];
        let m = s.label().ok_or_else(|| {
            FairNetError::InsufficientData("test split needs sensitive labels".into())
        })?;
        let x = data.x(i);
        let base = art.model.forward(x)?;
        let score = art.gate.score(base.representation(art.gate.layer()), s)?;
        let mut score_map = BTreeMap::new();
        score_map.insert(art.gate.attribute(), score);
        let active = if variant.gated() {
            triggered(&art.units, &score_map, tau)?
        } else {
            adapters.clone()
        };
        let fired = !active.is_empty();
        let lora = art.model.forward_adapted(x, &adapters)?;
        let gated = if fired {
            art.model.forward_adapted(x, &active)?
        } else {
            art.model.forward_adapted(x, &[])?
        };
        let (bp, lp, gp) = (
            argmax(base.logits()),
            argmax(lora.logits()),
            argmax(gated.logits()),
        );
        if !fired && gp != bp {
            changed_untriggered += 1;
        }
        fired_count += usize::from(fired);
        base_pred.push(bp);
        gated_pred.push(gp);
        scores.push(score);
        minority.push(m);
        y.push(data.y()[i]);
        bridge.push(BridgeSample {
            minority: m,
            fired,
            base_correct: bp == data.y()[i],
            lora_correct: lp == data.y()[i],
        });
        before.push(base.representation(layer).to_vec());
        after.push(gated.representation(layer).to_vec());
    }
    let bridge = empirical_theory_bridge(&bridge)?;
    let monte_carlo = if mc_samples > 0 && bridge.inputs.validate().is_ok() {
        Some(monte_carlo_validate(&bridge.inputs, mc_samples, mc_seed)?)
    } else {
        None
    };
    Ok(Evaluation {
        threshold: tau,
        variant,
        detector_rates: evaluate_rates(&scores, &minority, tau)?,
        base: fairness_report(&base_pred, &y, &minority, 1)?,
        fairnet: fairness_report(&gated_pred, &y, &minority, 1)?,
        triggered: fired_count,
        changed_untriggered,
        theory: TheoryBlock {
            bridge,
            monte_carlo,
        },
        alignment: Alignment {
            layer,
            before: class_group_gaps(&before, &y, &minority)?,
            after: class_group_gaps(&after, &y, &minority)?,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub train_labeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub counts: DataCounts,
    pub losses: StageLosses,
    pub evaluation: Evaluation,
    pub overhead: Overhead,
}

impl RunReport {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn counts(data: &Dataset) -> DataCounts {
    let train = data.indices(Split::Train);
    DataCounts {
        train_labeled: train.iter().filter(|&&i| data.s()[i].is_labeled()).count(),
        train: train.len(),
        val: data.indices(Split::Val).len(),
        test: data.indices(Split::Test).len(),
    }
}

fn report(p: &Pipeline, art: &Artifacts, variant: Variant) -> Result<RunReport> {
    let mut cfg = p.cfg.clone();
    cfg.pipeline.variant = variant;
    let evaluation = evaluate(
        art,
        &p.data,
        cfg.detector.threshold,
        variant,
        cfg.pipeline.monte_carlo_samples,
        cfg.seed(SEED_MC),
    )?;
    Ok(RunReport {
        config_hash: cfg.hash()?,
        seed: cfg.pipeline.seed,
        mode: cfg.pipeline.mode,
        counts: counts(&p.data),
        losses: p.losses.clone(),
        evaluation,
        overhead: art.overhead(),
        config: cfg,
    })
}

/// Re-evaluates stored artifacts on the test split the config describes,
/// with the same threshold, variant and Monte Carlo seed a run report uses.
pub fn evaluate_artifacts(cfg: &PipelineConfig, art: &Artifacts) -> Result<Evaluation> {
    cfg.validate()?;
    let data = apply_label_regime(cfg, &load_split_data(cfg)?)?;
    if art.model.input_dim() != data.dim() {
        return Err(dim(format!(
            "checkpoint expects {} features, data has {}",
            art.model.input_dim(),
            data.dim()
        )));
    }
    let variant = cfg.pipeline.variant;
    evaluate(
        art,
        &data,
        cfg.detector.threshold,
        variant,
        cfg.pipeline.monte_carlo_samples,
        cfg.seed(SEED_MC),
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// All four stages for the configured variant.
pub fn run_experiment(cfg: &PipelineConfig) -> Result<(RunReport, Artifacts)> {
    let mut p = Pipeline::new(cfg.clone())?;
    let variant = cfg.pipeline.variant;
    let art = p.run_all(variant)?;
    Ok((report(&p, &art, variant)?, art))
}

pub fn run_ablation(cfg: &PipelineConfig, variant: Variant) -> Result<RunReport> {
    let mut c = cfg.clone();
    c.pipeline.variant = variant;
    Ok(run_experiment(&c)?.0)
}

/// Several variants sharing stages 1–3; variants that train the adapter
/// the same way also share stage 4. Reports come back in input order.
pub fn run_variants(cfg: &PipelineConfig, variants: &[Variant]) -> Result<Vec<RunReport>> {
    let mut p = Pipeline::new(cfg.clone())?;
    p.run_stage1()?;
    p.run_stage2()?;
    p.run_stage3()?;
    let mut trained: BTreeMap<bool, (Artifacts, StageLosses)> = BTreeMap::new();
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let key = v.contrastive();
        if let Entry::Vacant(slot) = trained.entry(key) {
            p.run_stage4(v)?;
            slot.insert((p.artifacts()?, p.losses.clone()));
        }
        let (art, losses) = &trained[&key];
        p.losses = losses.clone();
        out.push(report(&p, art, v)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Threshold,
    LabelFraction,
    NoiseRate,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "threshold" | "tau" => Ok(SweepAxis::Threshold),
            "label_fraction" | "label-fraction" | "k" => Ok(SweepAxis::LabelFraction),
            "noise_rate" | "noise-rate" | "noise" => Ok(SweepAxis::NoiseRate),
            other => Err(invalid(format!("unknown sweep axis '{other}'"))),
        }
    }

    fn check(self, v: f64) -> Result<()> {
        let ok = match self {
            SweepAxis::Threshold | SweepAxis::NoiseRate => (0.0..=1.0).contains(&v),
            SweepAxis::LabelFraction => v > 0.0 && v <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("{self:?} value {v} outside its domain")))
        }
    }
}

/// One CSV row; column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub ratio: Option<f64>,
    pub acc: f64,
    pub wga: f64,
    pub eod: Option<f64>,
}

impl SweepRow {
    fn from_eval(value: f64, e: &Evaluation) -> Self {
        Self {
            value,
            tpr: e.detector_rates.tpr,
            fpr: e.detector_rates.fpr,
            ratio: e.detector_rates.ratio,
            acc: e.fairnet.acc,
            wga: e.fairnet.wga,
            eod: e.fairnet.eod,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub evaluations: Vec<Evaluation>,
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| invalid(e.to_string()))
}

/// One evaluation per value. The threshold axis reuses every trained
/// artifact; the label-fraction and noise axes share the stage-1 model and
/// retrain stages 2–4 in partial mode. Results do not depend on `jobs`.
pub fn sweep(
    cfg: &PipelineConfig,
    axis: SweepAxis,
    values: &[f64],
    jobs: usize,
) -> Result<SweepResult> {
    for &v in values {
        axis.check(v)?;
    }
    let mut base_cfg = cfg.clone();
    match axis {
        SweepAxis::Threshold => {
            if base_cfg.resolved_gate() == GateKind::Switch {
                base_cfg.detector.gate = GateKind::Trained;
            }
        }
        SweepAxis::LabelFraction | SweepAxis::NoiseRate => {
            base_cfg.pipeline.mode = Mode::Partial;
            base_cfg.detector.gate = GateKind::Trained;
        }
    }
    base_cfg.validate()?;
    let split = load_split_data(&base_cfg)?;
    let variant = base_cfg.pipeline.variant;
    let mc = base_cfg.pipeline.monte_carlo_samples;
    let mc_seed = base_cfg.seed(SEED_MC);
    let pool = pool(jobs)?;

    let evaluations: Vec<Evaluation> = match axis {
        SweepAxis::Threshold => {
            let mut p =
                Pipeline::with_data(base_cfg.clone(), apply_label_regime(&base_cfg, &split)?);
            let art = p.run_all(variant)?;
            pool.install(|| {
                values
                    .par_iter()
                    .map(|&tau| evaluate(&art, p.data(), tau, variant, mc, mc_seed))
                    .collect::<Result<Vec<_>>>()
            })?
        }
        SweepAxis::LabelFraction | SweepAxis::NoiseRate => {
            let mut first = Pipeline::with_data(base_cfg.clone(), split.clone());
            first.run_stage1()?;
            let model = first.model().expect("stage 1 ran").clone();
            let log = ErmLog {
                epoch_losses: first.losses.erm.clone(),
                best_epoch: first.losses.erm_best_epoch,
                best_val_accuracy: 0.0,
            };
            pool.install(|| {
                values
                    .par_iter()
                    .map(|&v| {
                        let mut c = base_cfg.clone();
                        match axis {
                            SweepAxis::LabelFraction => c.pipeline.label_fraction = v,
                            _ => c.pipeline.noise_rate = v,
                        }
                        let data = apply_label_regime(&c, &split)?;
                        let mut p = Pipeline::with_stage1(c.clone(), data, model.clone(), &log);
                        let art = p.run_all(variant)?;
                        evaluate(&art, p.data(), c.detector.threshold, variant, mc, mc_seed)
                    })
                    .collect::<Result<Vec<_>>>()
            })?
        }
    };
    let rows = values
        .iter()
        .zip(&evaluations)
        .map(|(&v, e)| SweepRow::from_eval(v, e))
        .collect();
    Ok(SweepResult {
        axis,
        rows,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(mode: Mode) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.data.synthetic.n = 600;
        cfg.data.synthetic.p = 0.2;
        cfg.model.epochs = 15;
        cfg.model.hidden = vec![8, 8];
        cfg.detector.training.epochs = 10;
        cfg.detector.lof_k = 10;
        cfg.adapter.epochs = 10;
        cfg.pipeline.mode = mode;
        cfg.pipeline.label_fraction = 0.5;
        cfg.pipeline.monte_carlo_samples = 1000;
        cfg
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_json(r#"{"pipeline": {"mdoe": "full"}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"detector": {"threshold": 1.5}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"adapter": {"layer": 7}}"#).is_err());
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        let round = PipelineConfig::from_json(&cfg.to_json_pretty().unwrap()).unwrap();
        assert_eq!(round, cfg);
        assert_eq!(cfg.hash().unwrap(), round.hash().unwrap());
        assert_eq!(Variant::parse("no_detector").unwrap(), Variant::NoDetector);
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn stages_enforce_order() {
        let mut p = Pipeline::new(tiny(Mode::Full)).unwrap();
        assert!(matches!(
            p.run_stage2(),
            Err(FairNetError::MissingArtifact(_))
        ));
        assert!(matches!(
            p.run_stage3(),
            Err(FairNetError::MissingArtifact(_))
        ));
        assert!(matches!(
            p.run_stage4(Variant::FullMethod),
            Err(FairNetError::MissingArtifact(_))
        ));
        p.run_stage1().unwrap();
        assert!(matches!(
            p.run_stage3(),
            Err(FairNetError::MissingArtifact(_))
        ));
        let before = p.model().unwrap().clone();
        assert!(matches!(p.run_stage2().unwrap(), Gate::Switch { .. }));
        p.run_stage3().unwrap();
        p.run_stage4(Variant::FullMethod).unwrap();
        assert_eq!(p.model().unwrap(), &before);
        assert!(p.model().unwrap().is_frozen());
    }

    #[test]
    fn zero_adapter_epochs_leave_predictions_unchanged() {
        let mut cfg = tiny(Mode::Partial);
        cfg.adapter.epochs = 0;
        let (r, art) = run_experiment(&cfg).unwrap();
        assert!(art.units[0].adapter.b().values().iter().all(|v| *v == 0.0));
        assert_eq!(r.evaluation.base, r.evaluation.fairnet);
    }

    #[test]
    fn unit_threshold_is_identity() {
        let mut cfg = tiny(Mode::Unlabeled);
        cfg.detector.threshold = 1.0;
        let (r, _) = run_experiment(&cfg).unwrap();
        assert_eq!(r.evaluation.triggered, 0);
        assert_eq!(r.evaluation.base, r.evaluation.fairnet);
    }

    #[test]
    fn reports_are_reproducible_and_bundles_round_trip() {
        let cfg = tiny(Mode::Full);
        let (a, art) = run_experiment(&cfg).unwrap();
        let (b, _) = run_experiment(&cfg).unwrap();
        assert_eq!(a.to_json_pretty().unwrap(), b.to_json_pretty().unwrap());
        assert_eq!(a.evaluation.changed_untriggered, 0);
        let text = art.to_json().unwrap();
        assert_eq!(Artifacts::from_json(&text).unwrap(), art);
        let full = run_variants(&cfg, &[Variant::FullMethod]).unwrap();
        assert_eq!(
            full[0].to_json_pretty().unwrap(),
            a.to_json_pretty().unwrap()
        );
    }

    #[test]
    fn sweep_is_independent_of_jobs() {
        let cfg = tiny(Mode::Partial);
        let values = [0.0, 0.5, 1.0];
        let one = sweep(&cfg, SweepAxis::Threshold, &values, 1).unwrap();
        let many = sweep(&cfg, SweepAxis::Threshold, &values, 3).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.rows[0].tpr, 1.0);
        assert_eq!(one.rows[0].fpr, 1.0);
        assert_eq!(one.rows[2].tpr, 0.0);
        assert_eq!(one.rows[2].ratio, None);
        assert_eq!(one.evaluations[2].fairnet, one.evaluations[2].base);
        let csv = one.to_csv().unwrap();
        assert!(csv.starts_with("value,tpr,fpr,ratio,acc,wga,eod\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(sweep(&cfg, SweepAxis::LabelFraction, &[0.0], 1).is_err());
    }
}
