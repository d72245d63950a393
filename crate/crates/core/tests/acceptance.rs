//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mgrb_core::experiment::{run, run_and_write, ExperimentConfig};
use mgrb_core::hierarchy::{kmeans, nearest_centroid, ClassHierarchy, HierarchySource};
use mgrb_core::losses::{
    class_balanced, class_balanced_weight, combined, cross_entropy, distillation, multi_granularity, ClassCounts,
    ClassificationLoss, CombineWeights, CombinedInputs, LambdaAssignment, LossBundle, LossTerms,
};
use mgrb_core::network::{Network, UpdateScope};
use mgrb_core::numerics::{finite_difference_grad, max_relative_error, softmax, squared_distance};
use mgrb_core::trainer::{average_incremental_accuracy, AblationFlags};
use mgrb_core::{ClassId, Matrix, Rng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform(-scale, scale)).collect()).unwrap()
}

fn random_distributions(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    let mut m = random_matrix(rng, r, c, 2.0);
    for i in 0..r {
        let p = softmax(m.row(i)).unwrap();
        m.row_mut(i).copy_from_slice(&p);
    }
    m
}

/// Worst relative error between backpropagated and central-difference
/// parameter gradients of `loss` through `net` at `x`.
fn network_gradient_error(net: &Network, x: &Matrix, loss: &dyn Fn(&Matrix) -> LossBundle) -> f64 {
    let pass = net.forward_pass(x).unwrap();
    let analytic = net.backward(&pass, &loss(&pass.logits).grad, UpdateScope::All).unwrap().flatten();
    let mut probe = net.clone();
    let numeric = finite_difference_grad(
        |p| {
            probe.set_parameters(p).unwrap();
            loss(&probe.forward(x).unwrap()).value
        },
        &net.parameters(),
        1e-5,
    )
    .unwrap();
    max_relative_error(&analytic, &numeric, 1e-6)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (classes, n_old, batch) = (5, 3, 4);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let mut net = Network::new(6, &[8, 7], classes, &mut rng).unwrap();
        // nonzero biases keep instances off the ReLU kink at exactly 0
        let jitter: Vec<f64> = net.parameters().iter().map(|w| w + rng.uniform(-0.2, 0.2)).collect();
        net.set_parameters(&jitter).unwrap();
        let x = random_matrix(&mut rng, batch, 6, 1.5);
        let targets: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();
        let counts = ClassCounts::new((0..classes).map(|_| 1 + rng.below(300)).collect()).unwrap();
        let teacher = random_matrix(&mut rng, batch, n_old, 3.0);
        let soft = random_distributions(&mut rng, batch, classes);
        let weights = CombineWeights {
            lambda: 0.6,
            alpha: 1.0,
            temperature: 2.0,
            beta: 20.0,
            assignment: LambdaAssignment::ClassificationLambda,
        };
        let terms = LossTerms {
            classification: ClassificationLoss::ClassBalanced,
            distillation: true,
            multi_granularity: true,
        };
        let cases: Vec<(&str, Box<dyn Fn(&Matrix) -> LossBundle>)> = vec![
            ("CE", Box::new(|z: &Matrix| cross_entropy(z, &targets).unwrap())),
            ("CB", Box::new(|z: &Matrix| class_balanced(z, &targets, &counts).unwrap())),
            ("KD T=1", Box::new(|z: &Matrix| distillation(z, &teacher, 1.0, n_old).unwrap())),
            ("KD T=2", Box::new(|z: &Matrix| distillation(z, &teacher, 2.0, n_old).unwrap())),
            ("KD T=4", Box::new(|z: &Matrix| distillation(z, &teacher, 4.0, n_old).unwrap())),
            ("MG", Box::new(|z: &Matrix| multi_granularity(z, &soft).unwrap())),
            (
                "combined",
                Box::new(|z: &Matrix| {
                    combined(
                        &CombinedInputs {
                            logits: z,
                            teacher_logits: Some(&teacher),
                            targets: &targets,
                            counts: &counts,
                            soft_targets: Some(&soft),
                        },
                        &weights,
                        &terms,
                    )
                    .unwrap()
                }),
            ),
        ];
        for (name, f) in &cases {
            let e = network_gradient_error(&net, &x, f.as_ref());
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    ensure(max <= 1e-4, || format!("max relative error {max:.3e} > 1e-4 ({worst:?})"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("20 seeds x 7 losses, max rel err {max:.2e}, {:.2}s", elapsed.as_secs_f64()))
}

fn soft_label_oracle() -> Outcome {
    let (a, b, c) = (ClassId(0), ClassId(1), ClassId(2));
    let mut h = ClassHierarchy::new(HierarchySource::Ontology);
    h.insert_path(&["P1".into()], a, "A").unwrap();
    h.insert_path(&["P2".into()], b, "B").unwrap();
    h.insert_path(&["P1".into()], c, "C").unwrap();
    let label = h.soft_label(c, 1.0, &[a, b, c]).unwrap();
    // d(C,C)=0, d(A,C)=1/2, d(B,C)=1 → exp(−d) normalized
    let z = 1.0 + (-0.5f64).exp() + (-1.0f64).exp();
    let oracle = [1.0 / z, (-0.5f64).exp() / z, (-1.0f64).exp() / z];
    let got = [label.value_of(c).unwrap(), label.value_of(a).unwrap(), label.value_of(b).unwrap()];
    for (g, (o, paper)) in got.iter().zip(oracle.iter().zip([0.5065, 0.3072, 0.1863])) {
        ensure((g - o).abs() <= 1e-4 && (g - paper).abs() <= 1e-4, || {
            format!("soft label {got:?} vs oracle {oracle:?}")
        })?;
    }
    let sharp = h.soft_label(c, 1e3, &[a, b, c]).unwrap();
    let off = (sharp.value_of(c).unwrap() - 1.0)
        .abs()
        .max(sharp.value_of(a).unwrap())
        .max(sharp.value_of(b).unwrap());
    ensure(off <= 1e-6, || format!("beta=1e3 deviates from one-hot by {off:e}"))?;
    Ok(format!("(C, A, B) = ({:.4}, {:.4}, {:.4}); beta=1e3 one-hot within {off:.1e}", got[0], got[1], got[2]))
}

fn cb_weight_oracle() -> Outcome {
    for n_classes in [2, 5, 100] {
        ensure(class_balanced_weight(1, n_classes) == 1.0, || format!("weight(1, {n_classes}) != 1"))?;
    }
    let w = class_balanced_weight(2, 2);
    ensure((w - 2.0 / 3.0).abs() <= 1e-12, || format!("weight(2, 2) = {w}"))?;
    for n_classes in [2usize, 10, 100] {
        let gamma = (n_classes as f64 - 1.0) / n_classes as f64;
        // beyond γ^n ≈ 1e-12 the weight rounds to 1 − γ in f64
        for n in (1..2000).take_while(|&n| gamma.powi(n as i32) > 1e-12) {
            let (w0, w1) = (class_balanced_weight(n, n_classes), class_balanced_weight(n + 1, n_classes));
            ensure(w1 < w0, || format!("weight not decreasing at n={n}, N={n_classes}: {w0} -> {w1}"))?;
        }
    }
    let mut rng = Rng::new(11);
    let mut constants = Vec::new();
    for _ in 0..10 {
        let z = random_matrix(&mut rng, 6, 4, 2.0);
        let targets: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
        let counts = ClassCounts::new(vec![37; 4]).unwrap();
        let ce = cross_entropy(&z, &targets).unwrap().grad;
        let cb = class_balanced(&z, &targets, &counts).unwrap().grad;
        for (x, y) in cb.as_slice().iter().zip(ce.as_slice()) {
            if y.abs() > 1e-3 {
                constants.push(x / y);
            }
        }
    }
    let k = constants[0];
    let spread = constants.iter().map(|c| (c - k).abs()).fold(0.0, f64::max);
    ensure(spread <= 1e-12, || format!("CB/CE ratio varies by {spread:e}"))?;
    let expected = class_balanced_weight(37, 4);
    ensure((k - expected).abs() <= 1e-12, || format!("ratio {k} != weight {expected}"))?;
    Ok(format!("w(1)=1, w(2;N=2)={w:.15}, equal-count CB = {k:.6} x CE (spread {spread:.1e})"))
}

fn kd_stationarity() -> Outcome {
    let mut rng = Rng::new(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let student = random_matrix(&mut rng, 5, 7, 4.0);
        let teacher = student.leading_columns(4).unwrap();
        for t in [0.1, 0.5, 1.0, 2.0, 4.0, 20.0] {
            let g = distillation(&student, &teacher, t, 4).unwrap().grad;
            worst = worst.max(g.frobenius_norm());
        }
    }
    ensure(worst <= 1e-12, || format!("gradient norm {worst:e}"))?;
    Ok(format!("max gradient norm {worst:.1e} over T in {{0.1..20}}"))
}

fn mg_gradient_identity() -> Outcome {
    let mut rng = Rng::new(8);
    let (mut worst, mut min_kl, mut self_kl): (f64, f64, f64) = (0.0, f64::INFINITY, 0.0);
    for _ in 0..50 {
        let (b, c) = (1 + rng.below(6), 2 + rng.below(6));
        let z = random_matrix(&mut rng, b, c, 3.0);
        let y = random_distributions(&mut rng, b, c);
        let loss = multi_granularity(&z, &y).unwrap();
        for r in 0..b {
            let q = softmax(z.row(r)).unwrap();
            for j in 0..c {
                worst = worst.max((loss.grad.get(r, j) * b as f64 - (q[j] - y.get(r, j))).abs());
            }
        }
        min_kl = min_kl.min(loss.value);
        let mut q = z.clone();
        for r in 0..b {
            let p = softmax(z.row(r)).unwrap();
            q.row_mut(r).copy_from_slice(&p);
        }
        self_kl = self_kl.max(multi_granularity(&z, &q).unwrap().value.abs());
    }
    ensure(worst <= 1e-12, || format!("gradient deviates from softmax − Y by {worst:e}"))?;
    ensure(min_kl > 0.0, || format!("KL({min_kl}) not positive for Y != q"))?;
    ensure(self_kl <= 1e-12, || format!("KL(q‖q) = {self_kl:e}"))?;
    Ok(format!("grad err {worst:.1e}, min KL {min_kl:.2e} (Y!=q), KL(q||q) {self_kl:.1e}"))
}

fn hierarchy_metrics() -> Outcome {
    let mut rng = Rng::new(21);
    // random three-level trees
    for _ in 0..20 {
        let mut h = ClassHierarchy::new(HierarchySource::Ontology);
        let n = 3 + rng.below(10);
        for i in 0..n {
            let path = [format!("a{}", rng.below(3)), format!("b{}", rng.below(2))];
            let path = vec![path[0].clone(), format!("{}{}", path[0], path[1])];
            h.insert_path(&path, ClassId(i), &format!("leaf{i}")).unwrap();
        }
        for i in 0..n {
            let (a, _) = (ClassId(i), ());
            ensure(h.lcs_distance(a, a).unwrap() == 0.0, || "d(a,a) != 0".into())?;
            for j in 0..n {
                let d = h.lcs_distance(a, ClassId(j)).unwrap();
                ensure((0.0..=1.0).contains(&d), || format!("d = {d} outside [0,1]"))?;
                ensure(d == h.lcs_distance(ClassId(j), a).unwrap(), || "asymmetric distance".into())?;
            }
        }
    }
    let mut h = ClassHierarchy::new(HierarchySource::Ontology);
    for i in 0..6 {
        h.insert_path(&[format!("g{}", i / 3)], ClassId(i), &format!("c{i}")).unwrap();
    }
    let mut values: Vec<f64> = (0..6)
        .flat_map(|i| (0..6).map(move |j| (i, j)))
        .map(|(i, j)| h.lcs_distance(ClassId(i), ClassId(j)).unwrap())
        .collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    ensure(values == [0.0, 0.5, 1.0], || format!("two-level distances {values:?}"))?;
    for instance in 0..100u64 {
        let mut rng = Rng::new(1000 + instance);
        let n = 5 + rng.below(40);
        let dim = 1 + rng.below(5);
        let k = 1 + rng.below(n.min(6));
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.uniform(-5.0, 5.0)).collect()).collect();
        let r = kmeans(&points, k, &mut rng).unwrap();
        for w in r.inertia_history.windows(2) {
            ensure(w[1] <= w[0] + 1e-12, || format!("instance {instance}: inertia rose {} -> {}", w[0], w[1]))?;
        }
        for (p, &a) in points.iter().zip(&r.assignments) {
            let (best, d) = nearest_centroid(p, &r.centroids);
            ensure(
                best == a || (d - squared_distance(p, &r.centroids[a])).abs() == 0.0,
                || format!("instance {instance}: point not assigned to its nearest centroid"),
            )?;
        }
    }
    Ok("distance axioms on 20 random trees; two-level {0, 0.5, 1}; 100 k-means instances".into())
}

/// Small but complete protocol used where only plumbing matters.
fn quick_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train.epochs = 8;
    c.train.lr_decay_epochs = vec![6];
    c.output_dir = dir.to_path_buf();
    c
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn protocol_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = quick_config(&tmp.path().join("run"));
    let a = run_and_write(&config).map_err(|e| e.to_string())?;
    let ta = read_tree(&config.output_dir);
    std::fs::remove_dir_all(&config.output_dir).map_err(|e| e.to_string())?;
    run_and_write(&config).map_err(|e| e.to_string())?;
    let tb = read_tree(&config.output_dir);
    ensure(ta.len() > 5 && ta == tb, || {
        let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
        format!("artifacts differ: {differing:?}")
    })?;

    // baseline flags against a reference with every MGRB component disabled
    // and their unused knobs moved
    let mut base = quick_config(tmp.path());
    base.checkpoints = false;
    base.ablation = AblationFlags::baseline();
    let mut reference = base.clone();
    reference.ablation = AblationFlags {
        use_cb: false,
        use_kd: true,
        use_mg: false,
        use_decoupling: false,
        hierarchy_mode: HierarchySource::Ontology,
    };
    reference.loss.beta = 3.0;
    reference.hierarchy.clusters = 2;
    reference.retrain.epochs = 1;
    reference.memory.retrain_ratio = 0.5;
    let rb = run(&base).map_err(|e| e.to_string())?;
    let rr = run(&reference).map_err(|e| e.to_string())?;
    let strip = |reports: &[mgrb_core::trainer::PhaseReport]| {
        reports
            .iter()
            .cloned()
            .map(|mut r| {
                r.hierarchy_groups = None;
                r
            })
            .collect::<Vec<_>>()
    };
    ensure(strip(&rb.reports) == strip(&rr.reports), || "baseline trajectory changed".into())?;
    Ok(format!(
        "{} artifact files byte-identical; baseline == reference over {} phases",
        ta.len(),
        a.reports.len()
    ))
}

fn decoupling_freeze() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for mode in [HierarchySource::Ontology, HierarchySource::Semantic, HierarchySource::Visual] {
        let mut c = quick_config(tmp.path());
        c.checkpoints = false;
        c.ablation = AblationFlags::variant("MGRB", mode).unwrap();
        let a = run(&c).map_err(|e| e.to_string())?;
        for r in &a.reports[1..] {
            let audit = r.retrain.as_ref().ok_or("no retraining stage in an incremental phase")?;
            ensure(audit.extractor_unchanged, || format!("phase {}: extractor moved", r.phase))?;
            ensure(audit.classifier_changed, || format!("phase {}: classifier did not change", r.phase))?;
            let first = audit.balanced_per_class[0];
            ensure(first > 0 && audit.balanced_per_class.iter().all(|&n| n == first), || {
                format!("phase {}: unbalanced {:?}", r.phase, audit.balanced_per_class)
            })?;
            ensure(audit.partition_exact, || format!("phase {}: train/balanced overlap", r.phase))?;
            checked += 1;
        }
        ensure(a.reports[0].retrain.is_none(), || "phase 0 was retrained".into())?;
    }
    Ok(format!("{checked} retraining stages: extractor bit-identical, balanced, exact partition"))
}

fn directional_end_to_end() -> Outcome {
    let start = Instant::now();
    let mut old_better = 0;
    let mut new_not_better = 0;
    let mut mg_recovers = 0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let mut results = BTreeMap::new();
        for name in ["baseline", "RB", "MGRB"] {
            let mut c = ExperimentConfig::default();
            c.seed = seed;
            c.name = name.into();
            c.checkpoints = false;
            c.ablation = AblationFlags::variant(name, HierarchySource::Ontology).unwrap();
            results.insert(name, run(&c).map_err(|e| e.to_string())?.summary);
        }
        let (b, rb, mg) = (&results["baseline"], &results["RB"], &results["MGRB"]);
        old_better += usize::from(rb.old_class_average > b.old_class_average);
        new_not_better += usize::from(rb.new_class_average <= b.new_class_average);
        mg_recovers += usize::from(mg.average_incremental_accuracy >= rb.average_incremental_accuracy);
        lines.push(format!(
            "seed {seed}: old {:.3}->{:.3} new {:.3}->{:.3} avg RB {:.4} MGRB {:.4}",
            b.old_class_average.unwrap(),
            rb.old_class_average.unwrap(),
            b.new_class_average.unwrap(),
            rb.new_class_average.unwrap(),
            rb.average_incremental_accuracy,
            mg.average_incremental_accuracy
        ));
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "RB old-class gain {old_better}/5, new-class drop/stall {new_not_better}/5, MGRB >= RB {mg_recovers}/5, {:.1}s",
        elapsed.as_secs_f64()
    );
    ensure(old_better >= 4 && new_not_better >= 3 && mg_recovers >= 4, || format!("{detail}\n    {}", lines.join("\n    ")))?;
    ensure(elapsed < Duration::from_secs(30 * 60), || format!("took {elapsed:?}"))?;
    Ok(detail)
}

fn metric_arithmetic() -> Outcome {
    let row = [90.40, 65.40, 52.40, 42.55, 38.74, 34.78, 33.03, 29.03, 28.18, 26.80];
    let avg = average_incremental_accuracy(&row).map_err(|e| e.to_string())?;
    ensure((avg - 44.13).abs() <= 0.005, || format!("average {avg}"))?;
    Ok(format!("average of the baseline row = {avg:.4}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("soft-label oracle", soft_label_oracle),
        ("class-balanced weight oracle", cb_weight_oracle),
        ("distillation stationarity", kd_stationarity),
        ("multi-granularity gradient identity", mg_gradient_identity),
        ("hierarchy metrics", hierarchy_metrics),
        ("protocol determinism", protocol_determinism),
        ("decoupling freeze", decoupling_freeze),
        ("directional end-to-end", directional_end_to_end),
        ("metric arithmetic", metric_arithmetic),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
