//! Datasets, CSV ingestion, synthetic hierarchical data and n/m split plans.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{EmbeddingTable, Ontology};
use crate::memory::{ClassPool, Sample};
use crate::numerics::{Matrix, Rng};
use crate::ClassId;

/// Feature rows with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    features: Matrix,
    labels: Vec<ClassId>,
}

impl Split {
    pub fn new(features: Matrix, labels: Vec<ClassId>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Split { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Split {
            features: Matrix::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub(crate) fn features_mut(&mut self) -> &mut Matrix {
        &mut self.features
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    /// Row indices of `class`, ascending.
    pub fn indices_of(&self, class: ClassId) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Split {
        Split {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn restrict_to(&self, classes: &[ClassId]) -> Split {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&keep)
    }

    /// All samples of `class` as a memory pool; sample ids are row indices.
    pub fn pool(&self, class: ClassId) -> ClassPool {
        ClassPool {
            class,
            samples: self
                .indices_of(class)
                .into_iter()
                .map(|i| Sample {
                    id: i,
                    class,
                    features: self.features.row(i).to_vec(),
                })
                .collect(),
        }
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }
}

/// Labeled train and test splits over a registered set of class names. The
/// ontology and embeddings travel with the data when the source provides them.
#[derive(Clone, Debug)]
pub struct Dataset {
    class_names: Vec<String>,
    pub train: Split,
    pub test: Split,
    pub ontology: Option<Ontology>,
    pub embeddings: Option<EmbeddingTable>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, train: Split, test: Split) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::invalid("dataset has no classes"));
        }
        if train.dim() != test.dim() {
            return Err(Error::invalid(format!(
                "train has {} features but test has {}",
                train.dim(),
                test.dim()
            )));
        }
        let mut seen = HashMap::new();
        for (i, name) in class_names.iter().enumerate() {
            if let Some(prev) = seen.insert(name.as_str(), i) {
                return Err(Error::invalid(format!("class name `{name}` registered twice ({prev} and {i})")));
            }
        }
        for l in train.labels().iter().chain(test.labels()) {
            if l.0 >= class_names.len() {
                return Err(Error::invalid(format!("label {l} is not a registered class")));
            }
        }
        Ok(Dataset {
            class_names,
            train,
            test,
            ontology: None,
            embeddings: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_name(&self, class: ClassId) -> &str {
        &self.class_names[class.0]
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.class_names.iter().position(|n| n == name).map(ClassId)
    }

    pub fn labeled(&self, classes: &[ClassId]) -> Vec<(ClassId, String)> {
        classes.iter().map(|&c| (c, self.class_name(c).to_string())).collect()
    }

    /// CSV with columns `label,split,f0…`; readable again with [`CsvSchema::exported`].
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string(), "split".to_string()];
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            for (row, label) in split.features().row_iter().zip(split.labels()) {
                let mut record = vec![self.class_name(*label).to_string(), name.to_string()];
                record.extend(row.iter().map(f64::to_string));
                w.write_record(&record)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

/// Per-column z-score parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation of each column; constant
    /// columns get scale 1.
    pub fn fit(data: &Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::invalid("cannot fit standardization on zero rows"));
        }
        let means = data.column_means();
        let n = data.rows() as f64;
        let mut var = vec![0.0; data.cols()];
        for row in data.row_iter() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&means) {
                *v += (x - m) * (x - m);
            }
        }
        let scales = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Standardizer { means, scales })
    }

    pub fn apply(&self, data: &mut Matrix) -> Result<()> {
        if data.cols() != self.means.len() {
            return Err(Error::invalid(format!(
                "standardizer fitted on {} columns, applied to {}",
                self.means.len(),
                data.cols()
            )));
        }
        for r in 0..data.rows() {
            for ((x, m), s) in data.row_mut(r).iter_mut().zip(&self.means).zip(&self.scales) {
                *x = (*x - m) / s;
            }
        }
        Ok(())
    }

    /// Fits on the given train rows and rescales both splits.
    pub fn fit_and_apply(dataset: &mut Dataset, fit_rows: &[usize]) -> Result<Self> {
        let s = Standardizer::fit(&dataset.train.features().select_rows(fit_rows))?;
        s.apply(dataset.train.features_mut())?;
        s.apply(dataset.test.features_mut())?;
        Ok(s)
    }
}

fn default_true() -> bool {
    true
}

/// Column layout of a CSV dataset, usually read from a small TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    /// Defaults to every column other than the label and split columns.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    /// Column holding `train` or `test`; without it every row is training data.
    #[serde(default)]
    pub split_column: Option<String>,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl CsvSchema {
    /// Schema of files written by [`Dataset::write_csv`].
    pub fn exported() -> Self {
        CsvSchema {
            label_column: "label".into(),
            feature_columns: None,
            split_column: Some("split".into()),
            standardize: false,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("csv schema: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        CsvSchema::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Train,
    Test,
}

struct Row {
    label: String,
    part: Part,
    features: Vec<f64>,
    line: usize,
}

fn read_rows(path: &Path, schema: &CsvSchema, default_part: Part) -> Result<Vec<Row>> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let column = |col: &str| {
        header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::parse(&name, 1, format!("missing column `{col}`")))
    };
    let label_col = column(&schema.label_column)?;
    let split_col = schema.split_column.as_deref().map(column).transpose()?;
    let feature_cols = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?,
        None => (0..header.len()).filter(|&i| i != label_col && Some(i) != split_col).collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::parse(&name, 1, "no feature columns"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::parse(
                &name,
                line,
                format!("ragged row: expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let part = match split_col {
            None => default_part,
            Some(c) => match record[c].to_ascii_lowercase().as_str() {
                "train" => Part::Train,
                "test" => Part::Test,
                other => {
                    return Err(Error::parse(&name, line, format!("split must be `train` or `test`, found `{other}`")));
                }
            },
        };
        let features = feature_cols
            .iter()
            .map(|&c| {
                let raw = &record[c];
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(&name, line, format!("non-numeric value `{raw}` in column `{}`", header[c])))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row {
            label: record[label_col].to_string(),
            part,
            features,
            line,
        });
    }
    Ok(rows)
}

/// Reads one CSV file; rows are split by the schema's split column, if any.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    load_csv_files(path, None, schema)
}

/// Reads a training file and an optional separate test file. Class ids follow
/// the sorted training label names. When the schema asks for it, features are
/// z-scored with statistics from the training rows only.
pub fn load_csv_files(train_path: &Path, test_path: Option<&Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut rows = read_rows(train_path, schema, Part::Train)?;
    let mut sources = vec![train_path.display().to_string(); rows.len()];
    if let Some(tp) = test_path {
        let extra = read_rows(tp, schema, Part::Test)?;
        sources.extend(std::iter::repeat_n(tp.display().to_string(), extra.len()));
        rows.extend(extra);
    }
    let mut names: Vec<String> = rows.iter().filter(|r| r.part == Part::Train).map(|r| r.label.clone()).collect();
    names.sort();
    names.dedup();
    if names.is_empty() {
        return Err(Error::invalid(format!("{} has no training rows", train_path.display())));
    }
    let ids: HashMap<&str, ClassId> = names.iter().enumerate().map(|(i, n)| (n.as_str(), ClassId(i))).collect();
    let dim = rows[0].features.len();
    let mut parts = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for (row, source) in rows.iter().zip(&sources) {
        if row.features.len() != dim {
            return Err(Error::parse(source, row.line, format!("expected {dim} features, found {}", row.features.len())));
        }
        let Some(&id) = ids.get(row.label.as_str()) else {
            return Err(Error::parse(
                source,
                row.line,
                format!("label `{}` appears in test data but not in training data", row.label),
            ));
        };
        let slot = &mut parts[usize::from(row.part == Part::Test)];
        slot.0.extend_from_slice(&row.features);
        slot.1.push(id);
    }
    let [(train_x, train_y), (test_x, test_y)] = parts;
    let train = Split::new(Matrix::from_vec(train_y.len(), dim, train_x)?, train_y)?;
    let test = Split::new(Matrix::from_vec(test_y.len(), dim, test_x)?, test_y)?;
    let mut dataset = Dataset::new(names, train, test)?;
    if schema.standardize {
        let all: Vec<usize> = (0..dataset.train.len()).collect();
        Standardizer::fit_and_apply(&mut dataset, &all)?;
    }
    Ok(dataset)
}

/// Gaussian class clusters nested in coarse groups: each coarse center is drawn
/// per dimension from N(0, inter_spread²), each fine center from
/// N(coarse, intra_spread²), each sample from N(fine, noise²).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub coarse_groups: usize,
    pub fine_per_group: usize,
    pub dim: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
    /// Training samples per class, assigned cyclically in class order.
    pub train_counts: Vec<usize>,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            coarse_groups: 4,
            fine_per_group: 3,
            dim: 60,
            intra_spread: 0.35,
            inter_spread: 0.6,
            train_counts: vec![300, 150, 75],
            test_per_class: 100,
            noise: 1.0,
            seed: 1993,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_groups == 0 || self.fine_per_group == 0 || self.dim == 0 {
            return Err(Error::invalid("synthetic group, class and dimension counts must be positive"));
        }
        if self.train_counts.is_empty() || self.train_counts.contains(&0) {
            return Err(Error::invalid("synthetic train counts must be non-empty and positive"));
        }
        if self.test_per_class == 0 {
            return Err(Error::invalid("synthetic test_per_class must be positive"));
        }
        for (name, v) in [
            ("intra_spread", self.intra_spread),
            ("inter_spread", self.inter_spread),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("synthetic {name} must be positive, got {v}")));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid(format!("synthetic noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.coarse_groups * self.fine_per_group
    }

    pub fn class_name(group: usize, fine: usize) -> String {
        format!("g{group}c{fine}")
    }

    pub fn group_name(group: usize) -> String {
        format!("group{group}")
    }
}

/// Generated data with its ground-truth ontology and the fine class centers
/// as label embeddings.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub centers: Matrix,
}

fn gaussian_around(center: &[f64], scale: f64, rng: &mut Rng) -> Vec<f64> {
    center.iter().map(|c| c + scale * rng.standard_normal()).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut center_rng = root.derive(0);
    let mut train_rng = root.derive(1);
    let mut test_rng = root.derive(2);
    let zero = vec![0.0; spec.dim];
    let classes = spec.num_classes();
    let mut names = Vec::with_capacity(classes);
    let mut ontology_text = String::new();
    let mut centers = Vec::with_capacity(classes);
    for g in 0..spec.coarse_groups {
        let coarse = gaussian_around(&zero, spec.inter_spread, &mut center_rng);
        for f in 0..spec.fine_per_group {
            let name = SyntheticSpec::class_name(g, f);
            ontology_text.push_str(&format!("{}/{name}\n", SyntheticSpec::group_name(g)));
            names.push(name);
            centers.push(gaussian_around(&coarse, spec.intra_spread, &mut center_rng));
        }
    }
    let draw = |per_class: &dyn Fn(usize) -> usize, rng: &mut Rng| -> Result<Split> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class(c) {
                data.extend(gaussian_around(center, spec.noise, rng));
                labels.push(ClassId(c));
            }
        }
        Split::new(Matrix::from_vec(labels.len(), spec.dim, data)?, labels)
    };
    let train = draw(&|c| spec.train_counts[c % spec.train_counts.len()], &mut train_rng)?;
    let test = draw(&|_| spec.test_per_class, &mut test_rng)?;
    let mut embeddings = EmbeddingTable::new(spec.dim);
    for (name, center) in names.iter().zip(&centers) {
        embeddings.insert(name, center.clone())?;
    }
    let mut dataset = Dataset::new(names, train, test)?;
    dataset.ontology = Some(Ontology::parse(&ontology_text, "synthetic")?);
    dataset.embeddings = Some(embeddings);
    Ok(SyntheticData {
        dataset,
        centers: Matrix::from_rows(&centers)?,
    })
}

/// Seeded class order sliced into an initial roster of `n` classes followed
/// by rosters of `m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub class_order: Vec<ClassId>,
    pub rosters: Vec<Vec<ClassId>>,
}

impl SplitPlan {
    pub fn new(num_classes: usize, n: usize, m: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > num_classes {
            return Err(Error::invalid(format!(
                "initial class count must be in 1..={num_classes}, got {n}"
            )));
        }
        let rest = num_classes - n;
        if rest > 0 && (m == 0 || !rest.is_multiple_of(m)) {
            let valid: Vec<String> = (1..=rest).filter(|d| rest.is_multiple_of(*d)).map(|d| d.to_string()).collect();
            return Err(Error::invalid(format!(
                "{rest} classes remain after the initial {n}, which is not a multiple of m={m}; valid m: {}",
                valid.join(", ")
            )));
        }
        let mut class_order: Vec<ClassId> = (0..num_classes).map(ClassId).collect();
        Rng::new(seed).shuffle(&mut class_order);
        let mut rosters = vec![class_order[..n].to_vec()];
        if rest > 0 {
            rosters.extend(class_order[n..].chunks(m).map(<[ClassId]>::to_vec));
        }
        Ok(SplitPlan {
            n,
            m,
            seed,
            class_order,
            rosters,
        })
    }

    pub fn phases(&self) -> usize {
        self.rosters.len()
    }

    pub fn phase_sizes(&self) -> Vec<usize> {
        self.rosters.iter().map(Vec::len).collect()
    }

    /// Classes seen up to and including `phase`, in class order.
    pub fn seen_through(&self, phase: usize) -> &[ClassId] {
        let count: usize = self.rosters[..=phase].iter().map(Vec::len).sum();
        &self.class_order[..count]
    }
}

pub fn make_split_plan(dataset: &Dataset, n: usize, m: usize, seed: u64) -> Result<SplitPlan> {
    SplitPlan::new(dataset.num_classes(), n, m, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{argmax, squared_distance};
    use std::io::Write;

    fn csv_file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn schema() -> CsvSchema {
        CsvSchema {
            label_column: "y".into(),
            feature_columns: None,
            split_column: None,
            standardize: false,
        }
    }

    #[test]
    fn loads_toy_csv() {
        let f = csv_file("a,y,b\n1,cat,2\n3,dog,4\n5,cat,6\n");
        let d = load_csv(f.path(), &schema()).unwrap();
        assert_eq!(d.train.len(), 3);
        assert_eq!(d.class_names(), ["cat", "dog"]);
        assert_eq!(d.train.labels(), [ClassId(0), ClassId(1), ClassId(0)]);
        assert_eq!(d.train.features().row(1), [3.0, 4.0]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let ragged = csv_file("y,a,b\ncat,1,2\ndog,3\n");
        let err = load_csv(ragged.path(), &schema()).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("ragged"), "{err}");
        let bad = csv_file("y,a\ncat,1\ndog,x\n");
        let err = load_csv(bad.path(), &schema()).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("non-numeric"), "{err}");
        let test_only = csv_file("y,s,a\ncat,train,1\nfox,test,2\n");
        let mut s = schema();
        s.split_column = Some("s".into());
        let err = load_csv(test_only.path(), &s).unwrap_err().to_string();
        assert!(err.contains("fox") && err.contains(":3:"), "{err}");
    }

    #[test]
    fn standardized_train_columns() {
        let f = csv_file("y,s,a,b\nx,train,1,10\nx,train,2,30\nz,train,4,20\nz,test,100,0\n");
        let mut s = schema();
        s.split_column = Some("s".into());
        s.standardize = true;
        let d = load_csv(f.path(), &s).unwrap();
        assert_eq!(d.test.len(), 1);
        let x = d.train.features();
        for (j, mean) in x.column_means().into_iter().enumerate() {
            assert!(mean.abs() < 1e-9);
            let var: f64 = (0..x.rows()).map(|i| x.get(i, j).powi(2)).sum::<f64>() / x.rows() as f64;
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn schema_from_toml() {
        let s = CsvSchema::parse("label_column = \"y\"\nsplit_column = \"part\"\n").unwrap();
        assert_eq!(s.split_column.as_deref(), Some("part"));
        assert!(s.standardize);
        assert!(CsvSchema::parse("label_column = \"y\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn noiseless_samples_equal_centers() {
        let spec = SyntheticSpec {
            noise: 0.0,
            dim: 5,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for (row, label) in data.dataset.train.features().row_iter().zip(data.dataset.train.labels()) {
            assert_eq!(row, data.centers.row(label.0));
        }
        assert_eq!(data.dataset.num_classes(), 12);
        let counts: Vec<usize> = data.dataset.train.class_counts().into_values().collect();
        assert_eq!(&counts[..3], [300, 150, 75]);
        let h = data.dataset.ontology.as_ref().unwrap().to_hierarchy().unwrap();
        assert_eq!(h.lcs_distance(ClassId(0), ClassId(1)).unwrap(), 0.5);
        assert_eq!(h.lcs_distance(ClassId(0), ClassId(3)).unwrap(), 1.0);
    }

    #[test]
    fn separated_groups_are_nearest_centroid_separable() {
        let spec = SyntheticSpec {
            coarse_groups: 2,
            fine_per_group: 2,
            dim: 10,
            inter_spread: 10.0,
            intra_spread: 3.0,
            noise: 0.3,
            train_counts: vec![50],
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap().dataset;
        let means: Vec<Vec<f64>> = (0..4)
            .map(|c| d.train.features().select_rows(&d.train.indices_of(ClassId(c))).column_means())
            .collect();
        for (row, label) in d.train.features().row_iter().zip(d.train.labels()) {
            let scores: Vec<f64> = means.iter().map(|m| -squared_distance(row, m)).collect();
            assert_eq!(argmax(&scores), label.0);
        }
    }

    #[test]
    fn synthetic_is_byte_identical_per_seed() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap().dataset.to_csv_string().unwrap();
        let b = generate_synthetic(&spec).unwrap().dataset.to_csv_string().unwrap();
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 7, ..spec };
        assert_ne!(a, generate_synthetic(&other).unwrap().dataset.to_csv_string().unwrap());
    }

    #[test]
    fn exported_csv_round_trips() {
        let spec = SyntheticSpec {
            dim: 4,
            train_counts: vec![5],
            test_per_class: 2,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap().dataset;
        let f = csv_file(&d.to_csv_string().unwrap());
        let back = load_csv(f.path(), &CsvSchema::exported()).unwrap();
        assert_eq!(back.train.features(), d.train.features());
        assert_eq!(back.test.len(), d.test.len());
        // sorted names coincide with generation order for g{g}c{f}
        assert_eq!(back.class_names(), d.class_names());
    }

    #[test]
    fn split_plans() {
        assert_eq!(SplitPlan::new(10, 2, 2, 1993).unwrap().phase_sizes(), [2, 2, 2, 2, 2]);
        assert_eq!(SplitPlan::new(100, 50, 10, 1993).unwrap().phase_sizes(), [50, 10, 10, 10, 10, 10]);
        assert_eq!(SplitPlan::new(12, 12, 0, 1).unwrap().phase_sizes(), [12]);
        let err = SplitPlan::new(12, 6, 4, 1).unwrap_err().to_string();
        assert!(err.contains("valid m: 1, 2, 3, 6"), "{err}");
        assert!(SplitPlan::new(12, 0, 3, 1).is_err());
        assert!(SplitPlan::new(12, 13, 3, 1).is_err());
    }

    #[test]
    fn split_plan_partitions_and_is_deterministic() {
        let p = SplitPlan::new(12, 6, 3, 1993).unwrap();
        assert_eq!(p, SplitPlan::new(12, 6, 3, 1993).unwrap());
        let mut all: Vec<ClassId> = p.rosters.concat();
        all.sort();
        assert_eq!(all, (0..12).map(ClassId).collect::<Vec<_>>());
        assert_eq!(p.seen_through(1).len(), 9);
        assert_ne!(p.class_order, SplitPlan::new(12, 6, 3, 1994).unwrap().class_order);
    }
}
