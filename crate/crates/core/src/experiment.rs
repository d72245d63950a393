//! Experiment configuration, protocol runs, ablation grids, artifact files and
//! report tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_csv_files, make_split_plan, CsvSchema, Dataset, SplitPlan, Standardizer, SyntheticSpec};
use crate::error::{Error, Result};
use crate::hierarchy::{EmbeddingTable, HierarchySource, Ontology};
use crate::memory::ExemplarMemory;
use crate::network::{Checkpoint, SgdConfig};
use crate::trainer::{
    average_incremental_accuracy, run_phase, AblationFlags, HierarchyConfig, LossConfig, MemoryConfig, NetworkConfig,
    PhaseReport, PhaseState, TrainerConfig, ABLATION_VARIANTS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// TOML schema file; see [`CsvSchema`].
    pub schema: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ontology: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Classes in the initial phase.
    pub initial: usize,
    /// Classes in each later phase.
    pub increment: usize,
}

fn default_name() -> String {
    "run".into()
}

fn default_true() -> bool {
    true
}

/// Full description of one run. Serialized verbatim into every metric file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// z-score features with statistics of the initial phase's training rows.
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Write a model checkpoint and memory snapshot after every phase.
    #[serde(default = "default_true")]
    pub checkpoints: bool,
    pub split: SplitConfig,
    pub dataset: DatasetSource,
    pub network: NetworkConfig,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
    pub hierarchy: HierarchyConfig,
    pub train: SgdConfig,
    pub retrain: SgdConfig,
}

impl Default for ExperimentConfig {
    /// The reference synthetic protocol: 12 classes, 6/3 split, full method.
    fn default() -> Self {
        let t = TrainerConfig::default();
        ExperimentConfig {
            name: "MGRB".into(),
            seed: 1993,
            output_dir: PathBuf::from("runs/reference"),
            standardize: true,
            checkpoints: true,
            split: SplitConfig {
                initial: 6,
                increment: 3,
            },
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            network: t.network,
            memory: t.memory,
            loss: t.loss,
            ablation: AblationFlags::variant("MGRB", HierarchySource::Ontology).expect("preset exists"),
            hierarchy: t.hierarchy,
            train: t.train,
            retrain: t.retrain,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides with dotted keys, then
    /// validates. Values use TOML syntax; bare words are taken as strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Re-applies overrides to an already parsed config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides(&self.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            network: self.network.clone(),
            memory: self.memory.clone(),
            loss: self.loss.clone(),
            ablation: self.ablation,
            hierarchy: self.hierarchy.clone(),
            train: self.train.clone(),
            retrain: self.retrain.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name `{}` must be a non-empty file name", self.name)));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            let classes = spec.num_classes();
            SplitPlan::new(classes, self.split.initial, self.split.increment, self.seed)?;
        }
        self.trainer().validate()
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// Loads or generates the dataset named by `config`.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetSource::Synthetic(spec) => Ok(generate_synthetic(spec)?.dataset),
        DatasetSource::Csv(src) => {
            let schema = CsvSchema::load(&src.schema)?;
            let mut d = load_csv_files(&src.train, src.test.as_deref(), &schema)?;
            if let Some(p) = &src.ontology {
                d.ontology = Some(Ontology::load(p)?);
            }
            if let Some(p) = &src.embeddings {
                d.embeddings = Some(EmbeddingTable::load(p)?);
            }
            Ok(d)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub flags: AblationFlags,
    pub plan: SplitPlan,
    pub class_names: Vec<String>,
    pub accuracies: Vec<f64>,
    pub last_accuracy: f64,
    pub average_incremental_accuracy: f64,
    /// Mean over incremental phases of old-class accuracy.
    pub old_class_average: Option<f64>,
    /// Mean over incremental phases of new-class accuracy.
    pub new_class_average: Option<f64>,
    pub config: String,
}

impl Summary {
    fn from_reports(config: &ExperimentConfig, plan: &SplitPlan, dataset: &Dataset, reports: &[PhaseReport]) -> Result<Self> {
        let accuracies: Vec<f64> = reports.iter().map(PhaseReport::accuracy).collect();
        let incremental = &reports[1.min(reports.len())..];
        let mean = |v: Vec<f64>| average_incremental_accuracy(&v).ok();
        Ok(Summary {
            name: config.name.clone(),
            seed: config.seed,
            flags: config.ablation,
            plan: plan.clone(),
            class_names: dataset.class_names().to_vec(),
            last_accuracy: *accuracies.last().ok_or_else(|| Error::invalid("run produced no phases"))?,
            average_incremental_accuracy: average_incremental_accuracy(&accuracies)?,
            old_class_average: mean(incremental.iter().filter_map(|r| r.old_accuracy).collect()),
            new_class_average: mean(incremental.iter().map(|r| r.new_accuracy).collect()),
            accuracies,
            config: config.to_toml()?,
        })
    }
}

/// In-memory result of one run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub reports: Vec<PhaseReport>,
    pub checkpoints: Vec<(Checkpoint, ExemplarMemory)>,
}

/// Executes the whole protocol without touching the file system.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let mut dataset = load_dataset(config)?;
    run_on(config, &mut dataset)
}

/// Like [`run`] on a dataset that is already loaded; standardization, if
/// enabled, is applied to `dataset` in place.
pub fn run_on(config: &ExperimentConfig, dataset: &mut Dataset) -> Result<RunArtifacts> {
    config.validate()?;
    let trainer = config.trainer();
    let plan = make_split_plan(dataset, config.split.initial, config.split.increment, config.seed)?;
    if config.standardize {
        let rows: Vec<usize> = (0..dataset.train.len())
            .filter(|&i| plan.rosters[0].contains(&dataset.train.labels()[i]))
            .collect();
        Standardizer::fit_and_apply(dataset, &rows)?;
    }
    let mut state = PhaseState::new(dataset.dim(), &trainer, config.seed)?;
    let mut reports = Vec::with_capacity(plan.phases());
    let mut checkpoints = Vec::new();
    for roster in &plan.rosters {
        let (next, report) = run_phase(state, roster, dataset, &trainer)?;
        state = next;
        reports.push(report);
        if config.checkpoints {
            checkpoints.push((Checkpoint::new(&state.network, &state.classes)?, state.memory.clone()));
        }
    }
    let summary = Summary::from_reports(config, &plan, dataset, &reports)?;
    Ok(RunArtifacts {
        config: config.clone(),
        summary,
        reports,
        checkpoints,
    })
}

#[derive(Serialize, Deserialize)]
struct PhaseRecord {
    run: String,
    seed: u64,
    config: String,
    report: PhaseReport,
}

fn commented(config: &str) -> String {
    config.lines().map(|l| format!("# {l}\n")).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_text(comment: &str, rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(format!("{comment}{}", String::from_utf8(bytes).expect("utf-8")))
}

/// Writes every artifact of `run` into `dir`.
pub fn write_artifacts(run: &RunArtifacts, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = &run.summary;
    let header = commented(&s.config);
    std::fs::write(dir.join("resolved_config.toml"), &s.config)?;

    let mut rows = vec![[
        "phase",
        "classes_seen",
        "new_classes",
        "accuracy",
        "old_accuracy",
        "new_accuracy",
        "lambda",
        "train_samples",
        "final_train_loss",
    ]
    .map(String::from)
    .to_vec()];
    for r in &run.reports {
        rows.push(vec![
            r.phase.to_string(),
            (r.n_old + r.n_new).to_string(),
            r.n_new.to_string(),
            r.accuracy().to_string(),
            opt(r.old_accuracy),
            r.new_accuracy.to_string(),
            opt(r.lambda),
            r.train_counts.iter().sum::<usize>().to_string(),
            r.final_train_loss.to_string(),
        ]);
    }
    std::fs::write(dir.join("phase_metrics.csv"), csv_text(&header, rows)?)?;

    for r in &run.reports {
        let e = &r.evaluation;
        let names: Vec<String> = e.classes.iter().map(|c| s.class_names[c.0].clone()).collect();
        let mut rows = vec![std::iter::once("true\\predicted".to_string()).chain(names.clone()).collect::<Vec<_>>()];
        for (name, row) in names.iter().zip(&e.confusion) {
            rows.push(std::iter::once(name.clone()).chain(row.iter().map(usize::to_string)).collect());
        }
        std::fs::write(dir.join(format!("confusion_phase{}.csv", r.phase)), csv_text(&header, rows)?)?;
    }

    let mut jsonl = String::new();
    for r in &run.reports {
        let record = PhaseRecord {
            run: s.name.clone(),
            seed: s.seed,
            config: s.config.clone(),
            report: r.clone(),
        };
        jsonl.push_str(&serde_json::to_string(&record)?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("phase_records.jsonl"), jsonl)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(s)? + "\n")?;

    if let DatasetSource::Synthetic(spec) = &run.config.dataset {
        let data = generate_synthetic(spec)?.dataset;
        if let Some(o) = &data.ontology {
            std::fs::write(dir.join("ontology.txt"), o.to_text())?;
        }
        if let Some(e) = &data.embeddings {
            std::fs::write(dir.join("embeddings.txt"), e.to_text())?;
        }
    }
    if !run.checkpoints.is_empty() {
        let cp = dir.join("checkpoints");
        std::fs::create_dir_all(&cp)?;
        for (phase, (model, memory)) in run.checkpoints.iter().enumerate() {
            model.save(&cp.join(format!("phase{phase}.json")))?;
            memory.save(&cp.join(format!("memory_phase{phase}.json")))?;
        }
    }
    Ok(())
}

/// Runs `config` and writes its artifacts into `config.output_dir`.
pub fn run_and_write(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let artifacts = run(config)?;
    write_artifacts(&artifacts, &config.output_dir)?;
    Ok(artifacts)
}

/// The seven ablation runs of the variation table, derived from `base`. MG
/// variants use the base hierarchy mode, or the ontology when none is set.
pub fn ablation_configs(base: &ExperimentConfig, grid: &str) -> Result<Vec<ExperimentConfig>> {
    if grid != "table4" {
        return Err(Error::Config(format!("unknown ablation grid `{grid}`; expected table4")));
    }
    let mode = match base.ablation.hierarchy_mode {
        HierarchySource::None => HierarchySource::Ontology,
        m => m,
    };
    ABLATION_VARIANTS
        .iter()
        .map(|&name| {
            let mut c = base.clone();
            c.name = name.to_string();
            c.ablation = AblationFlags::variant(name, mode)?;
            c.output_dir = base.output_dir.join(name);
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Runs every variant of `grid` into subdirectories of `base.output_dir` and
/// writes the combined table next to them.
pub fn run_ablation(base: &ExperimentConfig, grid: &str) -> Result<Vec<RunArtifacts>> {
    let configs = ablation_configs(base, grid)?;
    let mut runs = Vec::with_capacity(configs.len());
    for c in &configs {
        runs.push(run_and_write(c)?);
    }
    let summaries: Vec<Summary> = runs.iter().map(|r| r.summary.clone()).collect();
    std::fs::write(base.output_dir.join(format!("{grid}.txt")), render_grid(&summaries)?)?;
    Ok(runs)
}

/// A finished run read back from its directory.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub summary: Summary,
    pub reports: Vec<PhaseReport>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json"))?)?;
    let mut reports = Vec::new();
    let records = dir.join("phase_records.jsonl");
    for (i, line) in std::fs::read_to_string(&records)?.lines().enumerate() {
        let record: PhaseRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(records.display().to_string(), i + 1, e.to_string()))?;
        reports.push(record.report);
    }
    let recomputed = average_incremental_accuracy(&reports.iter().map(PhaseReport::accuracy).collect::<Vec<_>>())?;
    if (recomputed - summary.average_incremental_accuracy).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "{}: summary average {} disagrees with phase records ({recomputed})",
            dir.display(),
            summary.average_incremental_accuracy
        )));
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        summary,
        reports,
    })
}

/// Run directories directly under `dir` (or `dir` itself), sorted by the
/// ablation order and then by name.
pub fn discover_runs(dir: &Path) -> Result<Vec<LoadedRun>> {
    if dir.join("summary.json").is_file() {
        return Ok(vec![load_run(dir)?]);
    }
    let mut runs = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.join("summary.json").is_file() {
            runs.push(load_run(&path)?);
        }
    }
    if runs.is_empty() {
        return Err(Error::invalid(format!("no runs found in {}", dir.display())));
    }
    let rank = |name: &str| ABLATION_VARIANTS.iter().position(|v| *v == name).unwrap_or(usize::MAX);
    runs.sort_by(|a, b| {
        (rank(&a.summary.name), &a.summary.name).cmp(&(rank(&b.summary.name), &b.summary.name))
    });
    Ok(runs)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn pct_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), pct)
}

fn render_rows(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// One row per phase plus the average, accuracies in percent.
pub fn render_run(run: &LoadedRun) -> String {
    let mut rows = vec![["phase", "classes", "acc", "old", "new"].map(String::from).to_vec()];
    for r in &run.reports {
        rows.push(vec![
            r.phase.to_string(),
            (r.n_old + r.n_new).to_string(),
            pct(r.accuracy()),
            pct_opt(r.old_accuracy),
            pct(r.new_accuracy),
        ]);
    }
    let s = &run.summary;
    rows.push(vec![
        "Avg".into(),
        String::new(),
        pct(s.average_incremental_accuracy),
        pct_opt(s.old_class_average),
        pct_opt(s.new_class_average),
    ]);
    let mut out = format!("run {} (seed {})\n", s.name, s.seed);
    out.push_str(&render_rows(&rows));
    out
}

/// Variation table: component marks, accuracy at each phase labeled by the
/// number of classes seen, and the average incremental accuracy.
pub fn render_grid(runs: &[Summary]) -> Result<String> {
    let first = runs.first().ok_or_else(|| Error::invalid("no runs to tabulate"))?;
    let mut header: Vec<String> = ["Variation", "CE", "CB", "KD", "MG", "Decoupling"].map(String::from).to_vec();
    let mut seen = 0;
    for (i, roster) in first.plan.rosters.iter().enumerate() {
        seen += roster.len();
        header.push(if i == 0 { "init".to_string() } else { seen.to_string() });
    }
    header.push("Avg acc".into());
    let mark = |b: bool| if b { "x".to_string() } else { String::new() };
    let mut rows = vec![header];
    for s in runs {
        if s.plan.phase_sizes() != first.plan.phase_sizes() {
            return Err(Error::invalid(format!("run {} uses a different split", s.name)));
        }
        let f = s.flags;
        let mut row = vec![
            s.name.clone(),
            mark(!f.use_cb),
            mark(f.use_cb),
            mark(f.use_kd),
            mark(f.use_mg),
            mark(f.use_decoupling),
        ];
        row.extend(s.accuracies.iter().map(|&a| pct(a)));
        row.push(pct(s.average_incremental_accuracy));
        rows.push(row);
    }
    Ok(render_rows(&rows))
}

/// Per-class accuracy differences `a − b` at every phase, as CSV.
pub fn per_class_diff(a: &LoadedRun, b: &LoadedRun) -> Result<String> {
    if a.summary.plan != b.summary.plan || a.summary.class_names != b.summary.class_names {
        return Err(Error::invalid(format!(
            "runs {} and {} use different splits",
            a.summary.name, b.summary.name
        )));
    }
    let mut out = String::new();
    writeln!(out, "phase,class,name,{},{},delta", a.summary.name, b.summary.name).expect("string write");
    for (ra, rb) in a.reports.iter().zip(&b.reports) {
        for ((class, x), y) in ra
            .evaluation
            .classes
            .iter()
            .zip(&ra.evaluation.per_class_accuracy)
            .zip(&rb.evaluation.per_class_accuracy)
        {
            writeln!(
                out,
                "{},{},{},{x},{y},{}",
                ra.phase,
                class,
                a.summary.class_names[class.0],
                x - y
            )
            .expect("string write");
        }
    }
    Ok(out)
}
