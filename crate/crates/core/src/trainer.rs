//! One incremental phase at a time: classifier expansion, hierarchy refresh,
//! imbalanced training with the combined loss, optional decoupled classifier
//! retraining, exemplar admission and evaluation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::hierarchy::{
    build_semantic_hierarchy, build_visual_hierarchy, ClassHierarchy, ClassSamples, HierarchySource,
};
use crate::losses::{
    combined, ClassCounts, ClassificationLoss, CombineWeights, CombinedInputs, LambdaAssignment, LossTerms,
};
use crate::memory::{BalancedSet, Budget, ClassPool, ExemplarMemory};
use crate::network::{backward_and_step, Network, Sgd, SgdConfig, TeacherSnapshot, UpdateScope};
use crate::numerics::{argmax, Matrix, Rng};
use crate::ClassId;

/// Switches for the components of the method; the named presets are the
/// rows of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_cb: bool,
    pub use_kd: bool,
    pub use_mg: bool,
    pub use_decoupling: bool,
    pub hierarchy_mode: HierarchySource,
}

pub const ABLATION_VARIANTS: [&str; 7] = ["baseline", "RW", "MGRW", "RS", "MGRS", "RB", "MGRB"];

impl AblationFlags {
    /// Everything off except distillation.
    pub fn baseline() -> Self {
        AblationFlags {
            use_cb: false,
            use_kd: true,
            use_mg: false,
            use_decoupling: false,
            hierarchy_mode: HierarchySource::None,
        }
    }

    /// Preset by ablation name; `mode` is the hierarchy used by MG variants.
    pub fn variant(name: &str, mode: HierarchySource) -> Result<Self> {
        let (use_cb, use_mg, use_decoupling) = match name {
            "baseline" => (false, false, false),
            "RW" => (true, false, false),
            "MGRW" => (true, true, false),
            "RS" => (false, false, true),
            "MGRS" => (false, true, true),
            "RB" => (true, false, true),
            "MGRB" => (true, true, true),
            other => {
                return Err(Error::invalid(format!(
                    "unknown ablation variant `{other}`; expected one of {}",
                    ABLATION_VARIANTS.join(", ")
                )))
            }
        };
        if use_mg && mode == HierarchySource::None {
            return Err(Error::invalid(format!("variant {name} needs a hierarchy mode")));
        }
        Ok(AblationFlags {
            use_cb,
            use_kd: true,
            use_mg,
            use_decoupling,
            hierarchy_mode: if use_mg { mode } else { HierarchySource::None },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_mg && self.hierarchy_mode == HierarchySource::None {
            return Err(Error::invalid("use_mg requires a hierarchy_mode other than none"));
        }
        Ok(())
    }

    pub fn loss_terms(&self) -> LossTerms {
        LossTerms {
            classification: if self.use_cb {
                ClassificationLoss::ClassBalanced
            } else {
                ClassificationLoss::CrossEntropy
            },
            distillation: self.use_kd,
            multi_granularity: self.use_mg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    PerClass,
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub mode: BudgetMode,
    pub size: usize,
    /// Share of each class kept for training; the rest forms the balanced set.
    pub retrain_ratio: f64,
}

impl MemoryConfig {
    pub fn budget(&self) -> Budget {
        match self.mode {
            BudgetMode::PerClass => Budget::PerClass(self.size),
            BudgetMode::Total => Budget::Total(self.size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub alpha: f64,
    pub temperature: f64,
    /// Fixed λ for every incremental phase instead of `N_old / (N_old + N_new)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Put λ on the distillation term and `1 − λ` on classification.
    #[serde(default)]
    pub swap_lambda: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    /// K-means cluster count for semantic and visual hierarchies.
    pub clusters: usize,
    /// CE epochs on a scratch copy of the initial model before the first
    /// visual hierarchy, which has no previous extractor to borrow.
    pub visual_warmup_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub network: NetworkConfig,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
    pub hierarchy: HierarchyConfig,
    pub train: SgdConfig,
    pub retrain: SgdConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            network: NetworkConfig { hidden: vec![64, 32] },
            memory: MemoryConfig {
                mode: BudgetMode::PerClass,
                size: 20,
                retrain_ratio: 0.9,
            },
            loss: LossConfig {
                beta: 20.0,
                alpha: 1.0,
                temperature: 2.0,
                lambda: None,
                swap_lambda: false,
            },
            ablation: AblationFlags::baseline(),
            hierarchy: HierarchyConfig {
                clusters: 4,
                visual_warmup_epochs: 10,
            },
            train: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 2e-4,
                epochs: 60,
                batch_size: 64,
                lr_decay_epochs: vec![40, 50],
            },
            retrain: SgdConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 2e-4,
                epochs: 10,
                batch_size: 16,
                lr_decay_epochs: Vec::new(),
            },
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(Error::Config("network.hidden must list positive layer widths".into()));
        }
        self.memory.budget().validate()?;
        let ratio = self.memory.retrain_ratio;
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("memory.retrain_ratio must be in (0, 1), got {ratio}")));
        }
        self.combine_weights(0.5).validate()?;
        if let Some(l) = self.loss.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("loss.lambda must be in [0, 1], got {l}")));
            }
        }
        self.ablation.validate()?;
        if self.hierarchy.clusters == 0 {
            return Err(Error::Config("hierarchy.clusters must be positive".into()));
        }
        self.train.validate()?;
        self.retrain.validate()?;
        Ok(())
    }

    fn combine_weights(&self, lambda: f64) -> CombineWeights {
        CombineWeights {
            lambda,
            alpha: self.loss.alpha,
            temperature: self.loss.temperature,
            beta: self.loss.beta,
            assignment: if self.loss.swap_lambda {
                LambdaAssignment::DistillationLambda
            } else {
                LambdaAssignment::ClassificationLambda
            },
        }
    }
}

/// Everything carried from one phase to the next.
#[derive(Clone, Debug)]
pub struct PhaseState {
    /// Index of the phase that runs next.
    pub phase: usize,
    /// Seen classes; position = classifier column.
    pub classes: Vec<ClassId>,
    pub network: Network,
    pub teacher: Option<TeacherSnapshot>,
    pub memory: ExemplarMemory,
    pub hierarchy: Option<ClassHierarchy>,
    pub counts: Option<ClassCounts>,
    pub weights: Option<CombineWeights>,
    seed: u64,
}

// rng stream purposes; stream = (phase + 1) · 16 + purpose
const INIT: u64 = 0;
const EXPAND: u64 = 1;
const HIERARCHY: u64 = 2;
const WARMUP: u64 = 3;
const SPLIT: u64 = 4;
const TRAIN: u64 = 5;
const RETRAIN: u64 = 6;
const MEMORY: u64 = 7;

impl PhaseState {
    pub fn new(input_dim: usize, config: &TrainerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).derive(stream(0, INIT));
        Ok(PhaseState {
            phase: 0,
            classes: Vec::new(),
            network: Network::new(input_dim, &config.network.hidden, 0, &mut rng)?,
            teacher: None,
            memory: ExemplarMemory::new(config.memory.budget())?,
            hierarchy: None,
            counts: None,
            weights: None,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_old(&self) -> usize {
        self.classes.len()
    }

    fn rng(&self, purpose: u64) -> Rng {
        Rng::new(self.seed).derive(stream(self.phase, purpose))
    }
}

fn stream(phase: usize, purpose: u64) -> u64 {
    (phase as u64 + 1) * 16 + purpose
}

/// Per-phase accuracy record. Accuracies are fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Class of each confusion row/column.
    pub classes: Vec<ClassId>,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn test_counts(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Accuracy over the test samples whose class is in the leading `n`
    /// (`old = true`) or the remaining columns.
    pub fn group_accuracy(&self, n: usize, old: bool) -> Option<f64> {
        let range = if old { 0..n } else { n..self.classes.len() };
        let (mut hit, mut total) = (0, 0);
        for i in range {
            hit += self.confusion[i][i];
            total += self.confusion[i].iter().sum::<usize>();
        }
        (total > 0).then(|| hit as f64 / total as f64)
    }
}

/// Top-1 evaluation over `classes`, whose order fixes the network's columns
/// and the confusion layout. Ties go to the lowest column.
pub fn evaluate(net: &Network, test: &Split, classes: &[ClassId]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if net.num_classes() != classes.len() {
        return Err(Error::invalid(format!(
            "network has {} outputs for {} classes",
            net.num_classes(),
            classes.len()
        )));
    }
    let column: HashMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = classes.len();
    let mut confusion = vec![vec![0usize; n]; n];
    let rows: Vec<usize> = (0..test.len()).collect();
    for chunk in rows.chunks(1024) {
        let logits = net.forward(&test.features().select_rows(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            let label = test.labels()[i];
            let truth = *column
                .get(&label)
                .ok_or_else(|| Error::invalid(format!("test label {label} is not among the seen classes")))?;
            confusion[truth][argmax(logits.row(r))] += 1;
        }
    }
    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 { 0.0 } else { row[i] as f64 / total as f64 }
        })
        .collect();
    Ok(Evaluation {
        classes: classes.to_vec(),
        accuracy: correct as f64 / test.len() as f64,
        per_class_accuracy,
        confusion,
    })
}

/// Mean of the per-phase accuracies, including the initial phase.
pub fn average_incremental_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("no phase accuracies to average"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// Checks made during the retraining stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainAudit {
    pub extractor_unchanged: bool,
    pub classifier_changed: bool,
    pub balanced_per_class: Vec<usize>,
    /// Train split and balanced set together equal the phase data exactly.
    pub partition_exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: usize,
    pub new_classes: Vec<ClassId>,
    pub n_old: usize,
    pub n_new: usize,
    /// λ used in the combined loss; absent when there was no teacher.
    pub lambda: Option<f64>,
    /// Training samples per classifier column.
    pub train_counts: Vec<usize>,
    pub final_train_loss: f64,
    pub evaluation: Evaluation,
    pub old_accuracy: Option<f64>,
    pub new_accuracy: f64,
    pub hierarchy_groups: Option<usize>,
    pub teacher_unchanged: bool,
    pub retrain: Option<RetrainAudit>,
}

impl PhaseReport {
    pub fn accuracy(&self) -> f64 {
        self.evaluation.accuracy
    }
}

/// Runs one phase on `roster` and returns the next state with its report.
/// Errors carry the phase index.
pub fn run_phase(
    state: PhaseState,
    roster: &[ClassId],
    dataset: &Dataset,
    config: &TrainerConfig,
) -> Result<(PhaseState, PhaseReport)> {
    let phase = state.phase;
    run_phase_inner(state, roster, dataset, config).map_err(|e| e.in_phase(phase))
}

fn run_phase_inner(
    mut state: PhaseState,
    roster: &[ClassId],
    dataset: &Dataset,
    config: &TrainerConfig,
) -> Result<(PhaseState, PhaseReport)> {
    config.validate()?;
    if roster.is_empty() {
        return Err(Error::invalid("empty class roster"));
    }
    for c in roster {
        if state.classes.contains(c) || roster.iter().filter(|&r| r == c).count() > 1 {
            return Err(Error::invalid(format!("class {c} appears twice")));
        }
    }
    let flags = config.ablation;
    let n_old = state.n_old();
    let n_new = roster.len();

    // 1. classifier expansion
    state.network.expand_classifier(n_new, &mut state.rng(EXPAND))?;
    state.classes.extend_from_slice(roster);
    let column: HashMap<ClassId, usize> = state.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let new_pools: Vec<ClassPool> = roster.iter().map(|&c| dataset.train.pool(c)).collect();
    if let Some(p) = new_pools.iter().find(|p| p.samples.is_empty()) {
        return Err(Error::invalid(format!("class {} has no training samples", p.class)));
    }
    let old_pools = state.memory.pools();

    // 3. data split (before hierarchy so the visual warm-up trains on D_t)
    let decouple = flags.use_decoupling && state.teacher.is_some();
    let (train_pools, balanced) = if decouple {
        let (train, balanced) =
            state
                .memory
                .build_balanced_set(&new_pools, config.memory.retrain_ratio, &mut state.rng(SPLIT))?;
        (train, Some(balanced))
    } else {
        (old_pools.iter().chain(&new_pools).cloned().collect(), None)
    };
    let (train_x, train_y) = stack(&train_pools, &column, dataset.dim())?;
    let mut counts = vec![0usize; state.classes.len()];
    for &t in &train_y {
        counts[t] += 1;
    }
    let class_counts = ClassCounts::new(counts.clone())?;

    // 2. hierarchy refresh
    state.hierarchy = refresh_hierarchy(&state, &old_pools, &new_pools, (&train_x, &train_y), dataset, config)?;
    let soft_table = match (&state.hierarchy, flags.use_mg) {
        (Some(h), true) => Some(h.soft_label_table(config.loss.beta, &state.classes)?),
        _ => None,
    };

    // 4. imbalanced training on D_t
    let lambda = state
        .teacher
        .as_ref()
        .map(|_| config.loss.lambda.unwrap_or_else(|| CombineWeights::default_lambda(n_old, n_new)));
    let weights = config.combine_weights(lambda.unwrap_or(0.0));
    let teacher_logits = match (&state.teacher, flags.use_kd) {
        (Some(t), true) => Some(t.forward(&train_x)?),
        _ => None,
    };
    let teacher_before = state.teacher.as_ref().map(|t| t.network().parameters());
    let mut train_rng = state.rng(TRAIN);
    let final_train_loss = train_stage(
        &mut state.network,
        Stage {
            x: &train_x,
            targets: &train_y,
            teacher_logits: teacher_logits.as_ref(),
            soft_table: soft_table.as_ref(),
            counts: &class_counts,
            weights: &weights,
            terms: &flags.loss_terms(),
            sgd: &config.train,
            scope: UpdateScope::All,
        },
        &mut train_rng,
    )?;
    let teacher_unchanged = match (&state.teacher, &teacher_before) {
        (Some(t), Some(before)) => bits_equal(&t.network().parameters(), before),
        _ => true,
    };

    // 5. decoupled classifier retraining
    let mut retrain_rng = state.rng(RETRAIN);
    let retrain = match balanced {
        Some(balanced) => Some(retrain_classifier(
            &mut state.network,
            &balanced,
            &column,
            soft_table.as_ref(),
            config,
            &mut retrain_rng,
            PartitionCheck {
                sources: old_pools.iter().chain(&new_pools),
                train: &train_pools,
            },
        )?),
        None => None,
    };

    // 6. memory admission and teacher snapshot
    state.memory.admit_new_classes(&new_pools, &mut state.rng(MEMORY))?;
    state.teacher = Some(TeacherSnapshot::capture(&state.network));

    // 7. evaluation over all seen classes
    let test = dataset.test.restrict_to(&state.classes);
    let evaluation = evaluate(&state.network, &test, &state.classes)?;
    let report = PhaseReport {
        phase: state.phase,
        new_classes: roster.to_vec(),
        n_old,
        n_new,
        lambda,
        train_counts: counts,
        final_train_loss,
        old_accuracy: evaluation.group_accuracy(n_old, true),
        new_accuracy: evaluation.group_accuracy(n_old, false).unwrap_or(0.0),
        evaluation,
        hierarchy_groups: state.hierarchy.as_ref().map(|h| h.coarse_nodes().len()),
        teacher_unchanged,
        retrain,
    };
    state.counts = Some(class_counts);
    state.weights = lambda.map(|_| weights);
    state.phase += 1;
    Ok((state, report))
}

fn stack(pools: &[ClassPool], column: &HashMap<ClassId, usize>, dim: usize) -> Result<(Matrix, Vec<usize>)> {
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for pool in pools {
        let col = column[&pool.class];
        for s in &pool.samples {
            data.extend_from_slice(&s.features);
            targets.push(col);
        }
    }
    Ok((Matrix::from_vec(targets.len(), dim, data)?, targets))
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn refresh_hierarchy(
    state: &PhaseState,
    old_pools: &[ClassPool],
    new_pools: &[ClassPool],
    train: (&Matrix, &[usize]),
    dataset: &Dataset,
    config: &TrainerConfig,
) -> Result<Option<ClassHierarchy>> {
    let labeled = dataset.labeled(&state.classes);
    let k = config.hierarchy.clusters.min(state.classes.len());
    match config.ablation.hierarchy_mode {
        HierarchySource::None => Ok(None),
        HierarchySource::Ontology => {
            let ontology = dataset
                .ontology
                .as_ref()
                .ok_or_else(|| Error::Config("hierarchy_mode ontology needs an ontology file".into()))?;
            let mut h = state
                .hierarchy
                .clone()
                .filter(|h| h.source() == HierarchySource::Ontology)
                .unwrap_or_else(|| ClassHierarchy::new(HierarchySource::Ontology));
            h.merge_ontology(ontology, labeled.iter().map(|(c, l)| (*c, l.as_str())))?;
            Ok(Some(h))
        }
        HierarchySource::Semantic => {
            let table = dataset
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Config("hierarchy_mode semantic needs an embedding file".into()))?;
            Ok(Some(build_semantic_hierarchy(&labeled, table, k, &mut state.rng(HIERARCHY))?))
        }
        HierarchySource::Visual => {
            let matrices: Vec<Matrix> = old_pools
                .iter()
                .chain(new_pools)
                .map(|p| {
                    let rows: Vec<&[f64]> = p.samples.iter().map(|s| s.features.as_slice()).collect();
                    Matrix::from_rows(&rows)
                })
                .collect::<Result<_>>()?;
            let samples: Vec<ClassSamples<'_>> = labeled
                .iter()
                .zip(&matrices)
                .map(|((class, label), m)| ClassSamples {
                    class: *class,
                    label,
                    samples: m,
                })
                .collect();
            let mut rng = state.rng(HIERARCHY);
            let h = match &state.teacher {
                Some(teacher) => build_visual_hierarchy(teacher, &samples, k, &mut rng)?,
                None => {
                    let scratch = warm_up(&state.network, train, config, &mut state.rng(WARMUP))?;
                    build_visual_hierarchy(&scratch, &samples, k, &mut rng)?
                }
            };
            Ok(Some(h))
        }
    }
}

/// CE training of a scratch copy, used only to produce visual features.
fn warm_up(net: &Network, train: (&Matrix, &[usize]), config: &TrainerConfig, rng: &mut Rng) -> Result<Network> {
    let mut scratch = net.clone();
    let sgd = SgdConfig {
        epochs: config.hierarchy.visual_warmup_epochs,
        lr_decay_epochs: Vec::new(),
        ..config.train.clone()
    };
    let counts = ClassCounts::new(vec![1; net.num_classes()])?;
    train_stage(
        &mut scratch,
        Stage {
            x: train.0,
            targets: train.1,
            teacher_logits: None,
            soft_table: None,
            counts: &counts,
            weights: &config.combine_weights(0.0),
            terms: &LossTerms {
                classification: ClassificationLoss::CrossEntropy,
                distillation: false,
                multi_granularity: false,
            },
            sgd: &sgd,
            scope: UpdateScope::All,
        },
        rng,
    )?;
    Ok(scratch)
}

struct Stage<'a> {
    x: &'a Matrix,
    targets: &'a [usize],
    teacher_logits: Option<&'a Matrix>,
    /// Soft label rows indexed by target column.
    soft_table: Option<&'a Matrix>,
    counts: &'a ClassCounts,
    weights: &'a CombineWeights,
    terms: &'a LossTerms,
    sgd: &'a SgdConfig,
    scope: UpdateScope,
}

/// Minibatch SGD over shuffled data; returns the mean loss of the last epoch.
fn train_stage(net: &mut Network, stage: Stage<'_>, rng: &mut Rng) -> Result<f64> {
    let mut optimizer = Sgd::new(stage.sgd.clone())?;
    let mut order: Vec<usize> = (0..stage.targets.len()).collect();
    let mut last = f64::NAN;
    for epoch in 0..stage.sgd.epochs {
        rng.shuffle(&mut order);
        let lr = stage.sgd.learning_rate_at(epoch);
        let (mut sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(stage.sgd.batch_size) {
            let x = stage.x.select_rows(batch);
            let targets: Vec<usize> = batch.iter().map(|&i| stage.targets[i]).collect();
            let teacher = stage.teacher_logits.map(|t| t.select_rows(batch));
            let soft = stage.soft_table.map(|t| t.select_rows(&targets));
            let pass = net.forward_pass(&x)?;
            let loss = combined(
                &CombinedInputs {
                    logits: &pass.logits,
                    teacher_logits: teacher.as_ref(),
                    targets: &targets,
                    counts: stage.counts,
                    soft_targets: soft.as_ref(),
                },
                stage.weights,
                stage.terms,
            )?;
            if !loss.value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            sum += loss.value * batch.len() as f64;
            seen += batch.len();
            backward_and_step(net, &pass, &loss.grad, &mut optimizer, lr, stage.scope)?;
        }
        last = sum / seen.max(1) as f64;
    }
    Ok(last)
}

struct PartitionCheck<'a, I> {
    sources: I,
    train: &'a [ClassPool],
}

/// Classifier-only CE (+ MG) training on the balanced set with a fresh optimizer.
fn retrain_classifier<'a, I: Iterator<Item = &'a ClassPool>>(
    net: &mut Network,
    balanced: &BalancedSet,
    column: &HashMap<ClassId, usize>,
    soft_table: Option<&Matrix>,
    config: &TrainerConfig,
    rng: &mut Rng,
    check: PartitionCheck<'a, I>,
) -> Result<RetrainAudit> {
    let pools: Vec<ClassPool> = balanced.per_class.iter().map(|(p, _)| p.clone()).collect();
    let (x, targets) = stack(&pools, column, net.input_dim())?;
    let extractor_before = net.extractor_parameters();
    let classifier_before = net.parameters()[extractor_before.len()..].to_vec();
    let counts = ClassCounts::new(vec![1; net.num_classes()])?;
    train_stage(
        net,
        Stage {
            x: &x,
            targets: &targets,
            teacher_logits: None,
            soft_table,
            counts: &counts,
            weights: &config.combine_weights(0.0),
            terms: &LossTerms {
                classification: ClassificationLoss::CrossEntropy,
                distillation: false,
                multi_granularity: config.ablation.use_mg,
            },
            sgd: &config.retrain,
            scope: UpdateScope::ClassifierOnly,
        },
        rng,
    )?;
    let after = net.parameters();
    let (extractor_after, classifier_after) = after.split_at(extractor_before.len());
    Ok(RetrainAudit {
        extractor_unchanged: bits_equal(extractor_after, &extractor_before),
        classifier_changed: !bits_equal(classifier_after, &classifier_before),
        balanced_per_class: pools.iter().map(|p| p.samples.len()).collect(),
        partition_exact: partition_exact(check.sources, check.train, balanced),
    })
}

/// Multiset equality of (class, sample id) between the sources and
/// train ∪ balanced, with no sample on both sides.
fn partition_exact<'a>(
    sources: impl Iterator<Item = &'a ClassPool>,
    train: &[ClassPool],
    balanced: &BalancedSet,
) -> bool {
    let key = |p: &ClassPool| p.samples.iter().map(|s| (p.class, s.id)).collect::<Vec<_>>();
    let mut expected: BTreeMap<(ClassId, usize), usize> = BTreeMap::new();
    for p in sources {
        for k in key(p) {
            *expected.entry(k).or_insert(0) += 1;
        }
    }
    let mut held: BTreeMap<(ClassId, usize), usize> = BTreeMap::new();
    for (p, _) in &balanced.per_class {
        for k in key(p) {
            *held.entry(k).or_insert(0) += 1;
        }
    }
    let mut got = held.clone();
    for p in train {
        for k in key(p) {
            if held.contains_key(&k) {
                return false;
            }
            *got.entry(k).or_insert(0) += 1;
        }
    }
    got == expected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_dataset() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            coarse_groups: 2,
            fine_per_group: 2,
            dim: 6,
            train_counts: vec![40, 20],
            test_per_class: 10,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .dataset
    }

    fn fast_config(flags: AblationFlags) -> TrainerConfig {
        let mut c = TrainerConfig::default();
        c.network.hidden = vec![8, 6];
        c.train.epochs = 3;
        c.train.lr_decay_epochs.clear();
        c.retrain.epochs = 2;
        c.memory.size = 10;
        c.hierarchy.clusters = 2;
        c.hierarchy.visual_warmup_epochs = 1;
        c.ablation = flags;
        c
    }

    fn run_all(flags: AblationFlags, seed: u64) -> Vec<PhaseReport> {
        let d = tiny_dataset();
        let config = fast_config(flags);
        let mut state = PhaseState::new(d.dim(), &config, seed).unwrap();
        let mut reports = Vec::new();
        for roster in [[ClassId(0), ClassId(1)], [ClassId(2), ClassId(3)]] {
            let (next, report) = run_phase(state, &roster, &d, &config).unwrap();
            state = next;
            reports.push(report);
        }
        reports
    }

    #[test]
    fn constant_predictor_scores_half() {
        // zero network: all logits tie, so class 0 always wins
        let net = Network::zeros(2, &[3], 2);
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        let test = Split::new(x, vec![ClassId(0), ClassId(1), ClassId(0), ClassId(1)]).unwrap();
        let e = evaluate(&net, &test, &[ClassId(0), ClassId(1)]).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(e.confusion, vec![vec![2, 0], vec![2, 0]]);
        assert_eq!(e.test_counts(), vec![2, 2]);
        assert!(evaluate(&net, &Split::empty(2), &[ClassId(0), ClassId(1)]).is_err());
    }

    #[test]
    fn table_four_baseline_average() {
        let row = [90.40, 65.40, 52.40, 42.55, 38.74, 34.78, 33.03, 29.03, 28.18, 26.80];
        let avg = average_incremental_accuracy(&row).unwrap();
        assert!((avg - 44.13).abs() <= 0.005, "{avg}");
        assert!(average_incremental_accuracy(&[]).is_err());
    }

    #[test]
    fn variants_follow_the_grid() {
        let mgrb = AblationFlags::variant("MGRB", HierarchySource::Ontology).unwrap();
        assert!(mgrb.use_cb && mgrb.use_kd && mgrb.use_mg && mgrb.use_decoupling);
        let rs = AblationFlags::variant("RS", HierarchySource::Ontology).unwrap();
        assert!(!rs.use_cb && rs.use_decoupling && !rs.use_mg);
        assert_eq!(rs.hierarchy_mode, HierarchySource::None);
        assert_eq!(AblationFlags::variant("baseline", HierarchySource::Visual).unwrap(), AblationFlags::baseline());
        assert!(AblationFlags::variant("MGRW", HierarchySource::None).is_err());
        assert!(AblationFlags::variant("bogus", HierarchySource::None).is_err());
    }

    #[test]
    fn phase_zero_has_no_teacher_or_lambda() {
        let reports = run_all(AblationFlags::baseline(), 3);
        assert_eq!(reports[0].lambda, None);
        assert_eq!(reports[0].old_accuracy, None);
        assert_eq!(reports[1].lambda, Some(0.5));
        assert_eq!(reports[1].n_old, 2);
        assert!(reports.iter().all(|r| r.teacher_unchanged));
        // memory holds 10 per old class; new classes bring everything
        assert_eq!(reports[1].train_counts, vec![10, 10, 40, 20]);
    }

    #[test]
    fn phases_are_deterministic() {
        let flags = AblationFlags::variant("MGRB", HierarchySource::Visual).unwrap();
        assert_eq!(run_all(flags, 9), run_all(flags, 9));
    }

    #[test]
    fn decoupling_freezes_extractor_and_balances() {
        for mode in [HierarchySource::Ontology, HierarchySource::Semantic, HierarchySource::Visual] {
            let reports = run_all(AblationFlags::variant("MGRB", mode).unwrap(), 4);
            assert!(reports[0].retrain.is_none());
            let audit = reports[1].retrain.as_ref().unwrap();
            assert!(audit.extractor_unchanged && audit.classifier_changed && audit.partition_exact);
            // 10 exemplars at 0.9 hold out 1 each
            assert_eq!(audit.balanced_per_class, vec![1, 1, 1, 1]);
            assert_eq!(reports[1].train_counts, vec![9, 9, 39, 19]);
            if mode == HierarchySource::Ontology {
                assert_eq!(reports[1].hierarchy_groups, Some(2));
            }
        }
    }

    #[test]
    fn unused_hierarchy_leaves_trajectory_alone() {
        let reference = run_all(AblationFlags::baseline(), 5);
        let with_tree = AblationFlags {
            hierarchy_mode: HierarchySource::Visual,
            ..AblationFlags::baseline()
        };
        let mut other = run_all(with_tree, 5);
        for r in &mut other {
            r.hierarchy_groups = None;
        }
        assert_eq!(reference, other);
    }

    #[test]
    fn errors_name_the_phase() {
        let d = tiny_dataset();
        let config = fast_config(AblationFlags::baseline());
        let state = PhaseState::new(d.dim(), &config, 0).unwrap();
        let err = run_phase(state.clone(), &[], &d, &config).unwrap_err();
        assert!(err.to_string().starts_with("phase 0:"), "{err}");
        let (state, _) = run_phase(state, &[ClassId(0)], &d, &config).unwrap();
        let err = run_phase(state, &[ClassId(0)], &d, &config).unwrap_err();
        assert!(err.to_string().contains("phase 1:") && err.to_string().contains("twice"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainerConfig::default();
        assert!(c.validate().is_ok());
        c.ablation.use_mg = true;
        assert!(c.validate().is_err());
        let mut c = TrainerConfig::default();
        c.memory.retrain_ratio = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainerConfig::default();
        c.loss.lambda = Some(1.5);
        assert!(c.validate().is_err());
    }
}
