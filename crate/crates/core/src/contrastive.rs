//! Class-conditional target bank, triplet loss and the composite training
//! objective over base model, detector and adapter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sensitive, Split};
use crate::detector::{BiasDetector, DetectorGrad};
use crate::error::{dim, invalid, FairNetError, Result};
use crate::fairlora::{AdapterGrad, LoraAdapter};
use crate::model::BaseModel;
use crate::numerics::{squared_distance, stable_softmax_ce, weighted_bce_with_logit, GradientTape};
use crate::rng::SplitMix64;

/// Frozen per-class means of stage-1 representations at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBank {
    pub layer: usize,
    /// Class → mean over majority-group samples.
    pub positive: BTreeMap<usize, Vec<f64>>,
    /// Class → mean over all samples of the class.
    pub negative: BTreeMap<usize, Vec<f64>>,
}

impl TargetBank {
    pub fn dim(&self) -> usize {
        self.negative.values().next().map_or(0, Vec::len)
    }

    pub fn positive_for(&self, class: usize) -> Result<&[f64]> {
        self.positive.get(&class).map(Vec::as_slice).ok_or_else(|| {
            FairNetError::MissingArtifact(format!("no positive target for class {class}"))
        })
    }
}

/// Bank over the training split using the dataset's own sensitive labels.
pub fn build_target_bank(model: &BaseModel, dataset: &Dataset, layer: usize) -> Result<TargetBank> {
    let idx = dataset.indices(Split::Train);
    let groups: Vec<Option<bool>> = dataset.s().iter().map(|s| s.label()).collect();
    build_target_bank_with(model, dataset, layer, &idx, &groups)
}

/// Bank over `indices`, where `groups[i]` is the (true or pseudo) minority
/// flag of sample `i`. Unlabeled samples count toward negatives only.
pub fn build_target_bank_with(
    model: &BaseModel,
    dataset: &Dataset,
    layer: usize,
    indices: &[usize],
    groups: &[Option<bool>],
) -> Result<TargetBank> {
    model.check_layer(layer)?;
    if groups.len() != dataset.len() {
        return Err(dim("one group slot per sample"));
    }
    let width = model.layer(layer).spec.out_dim;
    let classes = model.num_classes();
    let mut pos_sum = vec![vec![0.0; width]; classes];
    let mut all_sum = vec![vec![0.0; width]; classes];
    let mut pos_n = vec![0usize; classes];
    let mut all_n = vec![0usize; classes];
    for &i in indices {
        let trace = model.forward(dataset.x(i))?;
        let h = trace.representation(layer);
        let y = dataset.y()[i];
        for (acc, v) in all_sum[y].iter_mut().zip(h) {
            *acc += v;
        }
        all_n[y] += 1;
        if groups[i] == Some(false) {
            for (acc, v) in pos_sum[y].iter_mut().zip(h) {
                *acc += v;
            }
            pos_n[y] += 1;
        }
    }
    let mut positive = BTreeMap::new();
    let mut negative = BTreeMap::new();
    for y in 0..classes {
        if pos_n[y] == 0 {
            return Err(FairNetError::InsufficientData(format!(
                "class {y} has no majority-group samples"
            )));
        }
        positive.insert(y, pos_sum[y].iter().map(|v| v / pos_n[y] as f64).collect());
        negative.insert(y, all_sum[y].iter().map(|v| v / all_n[y] as f64).collect());
    }
    Ok(TargetBank {
        layer,
        positive,
        negative,
    })
}

/// `max(0, ‖z − t_p‖² − ‖z − t_n‖² + margin)` and its gradient in `z`.
pub fn triplet_loss(z: &[f64], t_p: &[f64], t_n: &[f64], margin: f64) -> (f64, Vec<f64>) {
    let value = squared_distance(z, t_p) - squared_distance(z, t_n) + margin;
    if value > 0.0 {
        (
            value,
            t_n.iter().zip(t_p).map(|(n, p)| 2.0 * (n - p)).collect(),
        )
    } else {
        (0.0, vec![0.0; z.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    Hard,
    Random,
}

/// Negative target for an anchor of class `class`: the closest other class
/// mean (ties to the lower class) or a uniform draw among other classes.
pub fn select_negative<'a>(
    bank: &'a TargetBank,
    class: usize,
    z: &[f64],
    strategy: NegativeStrategy,
    rng: &mut SplitMix64,
) -> Result<(usize, &'a [f64])> {
    let others: Vec<(usize, &Vec<f64>)> = bank
        .negative
        .iter()
        .filter(|(c, _)| **c != class)
        .map(|(c, v)| (*c, v))
        .collect();
    if others.is_empty() {
        return Err(invalid("negative selection needs at least two classes"));
    }
    let (c, t) = match strategy {
        NegativeStrategy::Hard => {
            let mut best = others[0];
            let mut best_d = squared_distance(z, best.1);
            for &(c, t) in &others[1..] {
                let d = squared_distance(z, t);
                if d < best_d {
                    best = (c, t);
                    best_d = d;
                }
            }
            best
        }
        NegativeStrategy::Random => others[rng.below(others.len())],
    };
    Ok((c, t.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_c: 1.0,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_d >= 0.0 && self.lambda_c >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.margin > 0.0) {
            return Err(invalid("margin must be positive"));
        }
        Ok(())
    }
}

/// Which samples contribute task cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskScope {
    All,
    Triggered,
    Off,
}

/// How the per-sample trigger indicator is decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TriggerRule {
    /// The known minority (`s = 1`).
    GroundTruth,
    /// Detector score on the base representation strictly above `tau`.
    Detector { tau: f64 },
    /// Every sample.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub base: bool,
    pub detector: bool,
    pub adapter: bool,
}

/// Components the composite objective reads. The detector is optional so a
/// switch gate can be used with ground-truth triggers.
#[derive(Debug, Clone, Copy)]
pub struct Composite<'a> {
    pub model: &'a BaseModel,
    pub adapter: &'a LoraAdapter,
    pub detector: Option<&'a BiasDetector>,
    pub bank: &'a TargetBank,
    pub weights: LossWeights,
    /// `(majority, minority)` detector BCE weights.
    pub class_weights: (f64, f64),
    pub trigger: TriggerRule,
    pub task: TaskScope,
    pub negatives: NegativeStrategy,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossParts {
    pub task: f64,
    pub detector: f64,
    pub contrastive: f64,
    pub total: f64,
    pub anchors: usize,
}

#[derive(Debug, Clone)]
pub struct CompositeGrad {
    pub base: Option<GradientTape>,
    pub detector: Option<DetectorGrad>,
    pub adapter: Option<AdapterGrad>,
}

impl<'a> Composite<'a> {
    fn triggered(&self, dataset: &Dataset, i: usize) -> Result<bool> {
        match self.trigger {
            TriggerRule::GroundTruth => Ok(dataset.s()[i] == Sensitive::One),
            TriggerRule::Always => Ok(true),
            TriggerRule::Detector { tau } => {
                let det = self.detector.ok_or_else(|| {
                    FairNetError::MissingArtifact("detector trigger without a detector".into())
                })?;
                let trace = self.model.forward(dataset.x(i))?;
                Ok(det.score(trace.representation(det.layer))? > tau)
            }
        }
    }

    /// `task + λ_D · detector BCE + λ_C · mean triplet over triggered anchors`
    /// over `batch`, with gradients for the parameter sets in `trainable`.
    /// Trigger decisions and negative choices are constants of the pass.
    pub fn evaluate(
        &self,
        dataset: &Dataset,
        batch: &[usize],
        trainable: Trainable,
        rng: &mut SplitMix64,
    ) -> Result<(LossParts, CompositeGrad)> {
        if batch.is_empty() {
            return Err(invalid("composite loss over an empty batch"));
        }
        self.weights.validate()?;
        self.adapter.check_against(self.model)?;
        if self.bank.layer != self.adapter.target_layer() {
            return Err(invalid("target bank and adapter must share a layer"));
        }
        let j = self.bank.layer;

        let flags: Vec<bool> = batch
            .iter()
            .map(|&i| self.triggered(dataset, i))
            .collect::<Result<_>>()?;
        let n_task = match self.task {
            TaskScope::All => batch.len(),
            TaskScope::Triggered => flags.iter().filter(|f| **f).count(),
            TaskScope::Off => 0,
        };
        let anchors = if self.weights.lambda_c > 0.0 {
            flags.iter().filter(|f| **f).count()
        } else {
            0
        };
        let use_detector = self.weights.lambda_d > 0.0 && self.detector.is_some();
        let n_labeled = if use_detector {
            batch
                .iter()
                .filter(|&&i| dataset.s()[i].is_labeled())
                .count()
        } else {
            0
        };

        let mut grad = CompositeGrad {
            base: trainable.base.then(|| self.model.new_tape()),
            detector: match (trainable.detector, self.detector) {
                (true, Some(d)) => Some(d.zero_grad()),
                _ => None,
            },
            adapter: trainable
                .adapter
                .then(|| AdapterGrad::for_adapter(self.adapter)),
        };
        let mut scratch_tape = self.model.new_tape();
        let mut parts = LossParts {
            anchors,
            ..LossParts::default()
        };

        for (&i, &fired) in batch.iter().zip(&flags) {
            let active: Vec<&LoraAdapter> = if fired {
                vec![self.adapter]
            } else {
                Vec::new()
            };
            let trace = self.model.forward_adapted(dataset.x(i), &active)?;
            let y = dataset.y()[i];
            let mut dlogits = vec![0.0; self.model.num_classes()];
            let mut extra = BTreeMap::new();

            let in_task = match self.task {
                TaskScope::All => true,
                TaskScope::Triggered => fired,
                TaskScope::Off => false,
            };
            if in_task {
                let (l, g) = stable_softmax_ce(trace.logits(), y)?;
                parts.task += l / n_task as f64;
                for (d, gv) in dlogits.iter_mut().zip(g) {
                    *d = gv / n_task as f64;
                }
            }
            if fired && anchors > 0 {
                let z = trace.representation(j);
                let tp = self.bank.positive_for(y)?;
                let (_, tn) = select_negative(self.bank, y, z, self.negatives, rng)?;
                let (l, g) = triplet_loss(z, tp, tn, self.weights.margin);
                let scale = self.weights.lambda_c / anchors as f64;
                parts.contrastive += l / anchors as f64;
                extra.insert(j, g.iter().map(|v| v * scale).collect::<Vec<f64>>());
            }
            if in_task || !extra.is_empty() {
                let mut adapter_bufs: Vec<AdapterGrad> =
                    active.iter().map(|a| AdapterGrad::for_adapter(a)).collect();
                let tape = grad.base.as_mut().unwrap_or(&mut scratch_tape);
                self.model
                    .backward(&trace, &dlogits, &extra, &active, tape, &mut adapter_bufs)?;
                if let (Some(acc), Some(g)) = (grad.adapter.as_mut(), adapter_bufs.first()) {
                    acc.add_assign(g);
                }
            }

            if use_detector {
                let Some(label) = dataset.s()[i].label() else {
                    continue;
                };
                let det = self.detector.expect("checked");
                let base_trace = if fired {
                    self.model.forward(dataset.x(i))?
                } else {
                    trace.clone()
                };
                let h = base_trace.representation(det.layer);
                let logit = det.logit_sequence(&[h])?;
                let w = if label {
                    self.class_weights.1
                } else {
                    self.class_weights.0
                };
                let (l, dl) = weighted_bce_with_logit(logit, f64::from(u8::from(label)), w);
                parts.detector += l / n_labeled as f64;
                let scale = self.weights.lambda_d * dl / n_labeled as f64;
                let dh = match grad.detector.as_mut() {
                    Some(g) => det.backward_sequence(&[h], scale, g)?,
                    None => det.backward_sequence(&[h], scale, &mut det.zero_grad())?,
                };
                if let Some(tape) = grad.base.as_mut() {
                    let mut extra = BTreeMap::new();
                    extra.insert(det.layer, dh.into_iter().next().expect("one vector"));
                    let zeros = vec![0.0; self.model.num_classes()];
                    self.model
                        .backward(&base_trace, &zeros, &extra, &[], tape, &mut [])?;
                }
            }
        }
        parts.total = parts.task
            + self.weights.lambda_d * parts.detector
            + self.weights.lambda_c * parts.contrastive;
        if !parts.total.is_finite() {
            return Err(FairNetError::NonFinite("composite loss".into()));
        }
        Ok((parts, grad))
    }
}

/// Per-class distance between minority and majority mean representations.
/// Classes missing either group are skipped.
pub fn class_group_gaps(
    reps: &[Vec<f64>],
    y: &[usize],
    minority: &[bool],
) -> Result<BTreeMap<usize, f64>> {
    if reps.len() != y.len() || y.len() != minority.len() {
        return Err(dim("representation, label and group lengths differ"));
    }
    let width = reps.first().map_or(0, Vec::len);
    let mut sums: BTreeMap<(usize, bool), (Vec<f64>, usize)> = BTreeMap::new();
    for ((h, &c), &m) in reps.iter().zip(y).zip(minority) {
        let e = sums.entry((c, m)).or_insert_with(|| (vec![0.0; width], 0));
        for (a, v) in e.0.iter_mut().zip(h) {
            *a += v;
        }
        e.1 += 1;
    }
    let mean = |k: (usize, bool)| {
        sums.get(&k)
            .map(|(s, n)| s.iter().map(|v| v / *n as f64).collect::<Vec<f64>>())
    };
    let classes: Vec<usize> = sums.keys().map(|k| k.0).collect();
    let mut out = BTreeMap::new();
    for c in classes {
        if let (Some(a), Some(b)) = (mean((c, true)), mean((c, false))) {
            out.insert(c, squared_distance(&a, &b).sqrt());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::PoolingKind;
    use crate::fairlora::init_adapter;
    use crate::numerics::{finite_difference_gradient, max_relative_error, Activation, Matrix};

    #[test]
    fn triplet_examples() {
        let (l, g) = triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], 0.5);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (l, g) = triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], 3.5);
        assert!((l - 0.5).abs() < 1e-15);
        assert_eq!(g, vec![-2.0, 4.0]);
        let (l, _) = triplet_loss(&[3.0, -1.0], &[1.0, 1.0], &[1.0, 1.0], 0.7);
        assert!((l - 0.7).abs() < 1e-15);
    }

    #[test]
    fn triplet_invariants() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..500 {
            let v = |rng: &mut SplitMix64| (0..4).map(|_| rng.normal() * 2.0).collect::<Vec<f64>>();
            let (z, tp, tn, shift) = (v(&mut rng), v(&mut rng), v(&mut rng), v(&mut rng));
            let m = rng.uniform(0.1, 2.0);
            let (l, g) = triplet_loss(&z, &tp, &tn, m);
            assert!(l >= 0.0);
            if squared_distance(&z, &tn) >= squared_distance(&z, &tp) + m {
                assert_eq!(l, 0.0);
            }
            let add = |a: &[f64]| {
                a.iter()
                    .zip(&shift)
                    .map(|(x, s)| x + s)
                    .collect::<Vec<f64>>()
            };
            let (l2, _) = triplet_loss(&add(&z), &add(&tp), &add(&tn), m);
            assert!((l - l2).abs() <= 1e-9 * (1.0 + l.abs()));
            if l > 1e-3 {
                let fd = finite_difference_gradient(|p| triplet_loss(p, &tp, &tn, m).0, &z, 1e-6)
                    .unwrap();
                assert!(max_relative_error(&g, &fd) <= 1e-4);
            }
        }
    }

    fn bank3() -> TargetBank {
        let mut negative = BTreeMap::new();
        negative.insert(0, vec![0.0, 0.0]);
        negative.insert(1, vec![2.0, 0.0]);
        negative.insert(2, vec![0.0, 1.0]);
        TargetBank {
            layer: 1,
            positive: negative.clone(),
            negative,
        }
    }

    #[test]
    fn negative_selection() {
        let mut rng = SplitMix64::new(1);
        let bank = bank3();
        assert_eq!(
            select_negative(&bank, 0, &[0.0, 0.0], NegativeStrategy::Hard, &mut rng)
                .unwrap()
                .0,
            2
        );
        // Equidistant from classes 0 and 2.
        assert_eq!(
            select_negative(&bank, 1, &[0.0, 0.5], NegativeStrategy::Hard, &mut rng)
                .unwrap()
                .0,
            0
        );
        let mut two = bank.clone();
        two.negative.remove(&2);
        for s in [NegativeStrategy::Hard, NegativeStrategy::Random] {
            assert_eq!(
                select_negative(&two, 0, &[5.0, 5.0], s, &mut rng)
                    .unwrap()
                    .0,
                1
            );
        }
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[select_negative(&bank, 1, &[0.0, 0.0], NegativeStrategy::Random, &mut rng)
                .unwrap()
                .0] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!(counts[0] > 1300 && counts[2] > 1300);
        let mut one = bank;
        one.negative.retain(|c, _| *c == 0);
        assert!(select_negative(&one, 0, &[0.0, 0.0], NegativeStrategy::Hard, &mut rng).is_err());
    }

    fn identity_model() -> BaseModel {
        use crate::model::DenseLayer;
        use crate::numerics::LayerSpec;
        let layer = DenseLayer {
            spec: LayerSpec::new(2, 2, Activation::Identity).unwrap(),
            weight: Matrix::identity(2),
            bias: vec![0.0; 2],
        };
        BaseModel::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn bank_means_and_errors() {
        let model = identity_model();
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![2.0, 2.0],
            vec![5.0, 5.0],
            vec![1.0, -1.0],
        ])
        .unwrap();
        let ds = Dataset::new(
            x,
            vec![0, 0, 0, 1],
            vec![
                Sensitive::Zero,
                Sensitive::Zero,
                Sensitive::One,
                Sensitive::Zero,
            ],
            vec![Split::Train; 4],
        )
        .unwrap();
        let bank = build_target_bank(&model, &ds, 1).unwrap();
        assert_eq!(bank.positive[&0], vec![1.0, 1.0]);
        assert_eq!(bank.positive[&1], vec![1.0, -1.0]);
        assert_eq!(bank.negative[&0], vec![7.0 / 3.0, 7.0 / 3.0]);
        assert_eq!(build_target_bank(&model, &ds, 1).unwrap(), bank);

        let mut s = ds.s().to_vec();
        s[3] = Sensitive::One;
        let mut bad = ds.clone();
        bad.set_sensitive(s).unwrap();
        let err = build_target_bank(&model, &bad, 1).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    struct Fixture {
        model: BaseModel,
        adapter: LoraAdapter,
        detector: BiasDetector,
        bank: TargetBank,
        ds: Dataset,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = SplitMix64::new(seed);
        let model = BaseModel::init(3, &[5, 4], 3, Activation::Tanh, rng.next_u64()).unwrap();
        let mut adapter = init_adapter(2, (4, 5), 2, rng.next_u64()).unwrap();
        let mut params = adapter.params_flat();
        for v in &mut params[10..] {
            *v = rng.normal() * 0.5;
        }
        adapter.set_params_flat(&params).unwrap();
        let n = 10;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.normal()).collect())
            .collect();
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let s: Vec<Sensitive> = (0..n)
            .map(|i| match i % 4 {
                0 => Sensitive::One,
                3 => Sensitive::Unlabeled,
                _ => Sensitive::Zero,
            })
            .collect();
        let ds = Dataset::new(Matrix::from_rows(&x).unwrap(), y, s, vec![Split::Train; n]).unwrap();
        let bank = build_target_bank(&model, &ds, 2).unwrap();
        let detector =
            BiasDetector::init(0, 1, 5, 4, PoolingKind::None, 1, 0.5, rng.next_u64()).unwrap();
        Fixture {
            model,
            adapter,
            detector,
            bank,
            ds,
        }
    }

    fn ctx<'a>(
        f: &'a Fixture,
        model: &'a BaseModel,
        adapter: &'a LoraAdapter,
        det: &'a BiasDetector,
    ) -> Composite<'a> {
        Composite {
            model,
            adapter,
            detector: Some(det),
            bank: &f.bank,
            weights: LossWeights {
                lambda_d: 0.7,
                lambda_c: 1.3,
                margin: 5.0,
            },
            class_weights: (0.8, 1.6),
            trigger: TriggerRule::GroundTruth,
            task: TaskScope::All,
            negatives: NegativeStrategy::Hard,
        }
    }

    #[test]
    fn composite_gradients_match_fd() {
        for seed in 0..20 {
            let f = fixture(seed);
            let batch: Vec<usize> = (0..f.ds.len()).collect();
            let all = Trainable {
                base: true,
                detector: true,
                adapter: true,
            };
            let c = ctx(&f, &f.model, &f.adapter, &f.detector);
            let (parts, grad) = c
                .evaluate(&f.ds, &batch, all, &mut SplitMix64::new(0))
                .unwrap();
            assert!(parts.contrastive > 0.0);

            let total_with = |m: &BaseModel, a: &LoraAdapter, d: &BiasDetector| {
                ctx(&f, m, a, d)
                    .evaluate(&f.ds, &batch, Trainable::default(), &mut SplitMix64::new(0))
                    .unwrap()
                    .0
                    .total
            };
            let fd_base = finite_difference_gradient(
                |p| {
                    let mut m = f.model.clone();
                    m.set_params_flat(p).unwrap();
                    total_with(&m, &f.adapter, &f.detector)
                },
                &f.model.params_flat(),
                1e-5,
            )
            .unwrap();
            assert!(
                max_relative_error(&grad.base.unwrap().flatten(), &fd_base) <= 1e-4,
                "seed {seed} base"
            );

            let fd_det = finite_difference_gradient(
                |p| {
                    let mut d = f.detector.clone();
                    d.set_params_flat(p).unwrap();
                    total_with(&f.model, &f.adapter, &d)
                },
                &f.detector.params_flat(),
                1e-5,
            )
            .unwrap();
            assert!(
                max_relative_error(&grad.detector.unwrap().0, &fd_det) <= 1e-4,
                "seed {seed} detector"
            );

            let fd_ad = finite_difference_gradient(
                |p| {
                    let mut a = f.adapter.clone();
                    a.set_params_flat(p).unwrap();
                    total_with(&f.model, &a, &f.detector)
                },
                &f.adapter.params_flat(),
                1e-5,
            )
            .unwrap();
            assert!(
                max_relative_error(&grad.adapter.unwrap().flatten(), &fd_ad) <= 1e-4,
                "seed {seed} adapter"
            );
        }
    }

    #[test]
    fn degenerate_weights_leave_task_loss() {
        let f = fixture(4);
        let batch: Vec<usize> = (0..f.ds.len()).collect();
        let mut c = ctx(&f, &f.model, &f.adapter, &f.detector);
        c.weights = LossWeights {
            lambda_d: 0.0,
            lambda_c: 0.0,
            margin: 0.5,
        };
        c.trigger = TriggerRule::Detector { tau: 1.0 };
        let (parts, grad) = c
            .evaluate(
                &f.ds,
                &batch,
                Trainable {
                    base: true,
                    ..Trainable::default()
                },
                &mut SplitMix64::new(0),
            )
            .unwrap();
        let mut tape = f.model.new_tape();
        let plain = f.model.batch_loss(&f.ds, &batch, &mut tape).unwrap();
        assert!((parts.total - plain).abs() < 1e-12);
        assert!(max_relative_error(&grad.base.unwrap().flatten(), &tape.flatten()) < 1e-12);
        assert_eq!(parts.anchors, 0);
    }

    #[test]
    fn no_anchors_means_no_contrastive_term() {
        let f = fixture(2);
        let batch: Vec<usize> = (0..f.ds.len())
            .filter(|&i| f.ds.s()[i] != Sensitive::One)
            .collect();
        let c = ctx(&f, &f.model, &f.adapter, &f.detector);
        let (parts, grad) = c
            .evaluate(
                &f.ds,
                &batch,
                Trainable {
                    adapter: true,
                    ..Trainable::default()
                },
                &mut SplitMix64::new(0),
            )
            .unwrap();
        assert_eq!(parts.contrastive, 0.0);
        assert!(grad.adapter.unwrap().flatten().iter().all(|g| *g == 0.0));
        assert!(c
            .evaluate(&f.ds, &[], Trainable::default(), &mut SplitMix64::new(0))
            .is_err());
    }

    #[test]
    fn group_gaps() {
        let reps = vec![
            vec![0.0, 0.0],
            vec![3.0, 4.0],
            vec![1.0, 1.0],
            vec![9.0, 9.0],
        ];
        let gaps = class_group_gaps(&reps, &[0, 0, 1, 1], &[false, true, false, false]).unwrap();
        assert_eq!(gaps.len(), 1);
        assert_eq!(gaps[&0], 5.0);
    }
}
