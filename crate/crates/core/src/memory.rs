//! Exemplar memory for old classes and the balanced held-out set used for
//! decoupled classifier retraining.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::ClassId;

/// One stored sample; `id` is its row in the originating dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub class: ClassId,
    pub features: Vec<f64>,
}

/// All available samples of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPool {
    pub class: ClassId,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "size")]
pub enum Budget {
    /// At most this many exemplars per class.
    PerClass(usize),
    /// At most this many exemplars overall, shared evenly.
    Total(usize),
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Budget::PerClass(0) | Budget::Total(0) => Err(Error::invalid("memory budget must be positive")),
            _ => Ok(()),
        }
    }
}

/// Record of one selection decision, kept for reproducibility audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub class: ClassId,
    pub kept: Vec<usize>,
    pub evicted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    budget: Budget,
    /// Classes in admission order.
    order: Vec<ClassId>,
    store: BTreeMap<ClassId, Vec<Sample>>,
    trace: Vec<SelectionEvent>,
}

impl ExemplarMemory {
    pub fn new(budget: Budget) -> Result<Self> {
        budget.validate()?;
        Ok(ExemplarMemory {
            budget,
            order: Vec::new(),
            store: BTreeMap::new(),
            trace: Vec::new(),
        })
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.order
    }

    pub fn exemplars(&self, class: ClassId) -> Option<&[Sample]> {
        self.store.get(&class).map(Vec::as_slice)
    }

    pub fn total(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn trace(&self) -> &[SelectionEvent] {
        &self.trace
    }

    /// Stored exemplars as pools, in admission order.
    pub fn pools(&self) -> Vec<ClassPool> {
        self.order
            .iter()
            .map(|c| ClassPool {
                class: *c,
                samples: self.store[c].clone(),
            })
            .collect()
    }

    /// Per-class quotas for `classes` under the current budget, in order.
    fn quotas(&self, classes: usize) -> Vec<usize> {
        match self.budget {
            Budget::PerClass(n) => vec![n; classes],
            Budget::Total(k) => {
                let base = k / classes;
                let extra = k % classes;
                (0..classes).map(|i| base + usize::from(i < extra)).collect()
            }
        }
    }

    /// Stores a uniformly random subset of each new class and, under a total
    /// budget, down-samples older classes to the new quota.
    pub fn admit_new_classes(&mut self, new_data: &[ClassPool], rng: &mut Rng) -> Result<()> {
        for pool in new_data {
            if pool.samples.is_empty() {
                return Err(Error::invalid(format!("class {} has no samples to admit", pool.class)));
            }
            if self.store.contains_key(&pool.class) {
                return Err(Error::invalid(format!("class {} is already in memory", pool.class)));
            }
        }
        let quotas = self.quotas(self.order.len() + new_data.len());
        for (i, class) in self.order.clone().into_iter().enumerate() {
            let stored = self.store.get_mut(&class).expect("ordered class is stored");
            if stored.len() > quotas[i] {
                let mut keep = rng.sample_indices(stored.len(), quotas[i]);
                keep.sort_unstable();
                let kept: Vec<Sample> = keep.iter().map(|&j| stored[j].clone()).collect();
                let evicted = stored
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| keep.binary_search(j).is_err())
                    .map(|(_, s)| s.id)
                    .collect();
                self.trace.push(SelectionEvent {
                    class,
                    kept: kept.iter().map(|s| s.id).collect(),
                    evicted,
                });
                *stored = kept;
            }
        }
        let offset = self.order.len();
        for (i, pool) in new_data.iter().enumerate() {
            let mut pick = rng.sample_indices(pool.samples.len(), quotas[offset + i]);
            pick.sort_unstable();
            let chosen: Vec<Sample> = pick.iter().map(|&j| pool.samples[j].clone()).collect();
            self.trace.push(SelectionEvent {
                class: pool.class,
                kept: chosen.iter().map(|s| s.id).collect(),
                evicted: Vec::new(),
            });
            self.order.push(pool.class);
            self.store.insert(pool.class, chosen);
        }
        Ok(())
    }

    /// Splits memory plus `new_data` into a training split and a class-balanced
    /// held-out set; see [`split_balanced`].
    pub fn build_balanced_set(
        &self,
        new_data: &[ClassPool],
        ratio: f64,
        rng: &mut Rng,
    ) -> Result<(Vec<ClassPool>, BalancedSet)> {
        let mut sources: Vec<(ClassPool, Provenance)> =
            self.pools().into_iter().map(|p| (p, Provenance::Memory)).collect();
        sources.extend(new_data.iter().cloned().map(|p| (p, Provenance::NewData)));
        split_balanced(sources, ratio, rng)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExemplarMemory::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Memory,
    NewData,
}

/// Equal number of held-out samples per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedSet {
    pub per_class: Vec<(ClassPool, Provenance)>,
}

impl BalancedSet {
    pub fn per_class_count(&self) -> usize {
        self.per_class.first().map_or(0, |(p, _)| p.samples.len())
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(|(p, _)| p.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.per_class.iter().flat_map(|(p, _)| p.samples.iter())
    }
}

/// Held-out count for `n` samples when `ratio` of them go to training.
pub fn held_out_count(n: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error, e.g. (1 − 0.9)·20 = 1.999…
    ((1.0 - ratio) * n as f64 + 1e-9).floor() as usize
}

/// For each class, reserves a random `1 − ratio` share before training, then
/// truncates every reservation to the smallest one so the held-out set is
/// balanced. Reserved samples beyond that minimum go back to training.
pub fn split_balanced(
    sources: Vec<(ClassPool, Provenance)>,
    ratio: f64,
    rng: &mut Rng,
) -> Result<(Vec<ClassPool>, BalancedSet)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("train/retrain ratio must be in (0, 1), got {ratio}")));
    }
    let mut min_held = usize::MAX;
    for (pool, _) in &sources {
        if pool.samples.is_empty() {
            return Err(Error::invalid(format!("class {} has no samples", pool.class)));
        }
        let held = held_out_count(pool.samples.len(), ratio);
        if held == 0 {
            return Err(Error::invalid(format!(
                "class {} has {} samples, too few to hold out any at ratio {ratio}; \
                 use a larger class or a smaller ratio",
                pool.class,
                pool.samples.len()
            )));
        }
        min_held = min_held.min(held);
    }
    let mut train = Vec::with_capacity(sources.len());
    let mut balanced = Vec::with_capacity(sources.len());
    for (pool, provenance) in sources {
        let mut order: Vec<usize> = (0..pool.samples.len()).collect();
        rng.shuffle(&mut order);
        let (held, rest) = order.split_at(min_held);
        let mut held = held.to_vec();
        let mut rest = rest.to_vec();
        held.sort_unstable();
        rest.sort_unstable();
        balanced.push((
            ClassPool {
                class: pool.class,
                samples: held.iter().map(|&i| pool.samples[i].clone()).collect(),
            },
            provenance,
        ));
        train.push(ClassPool {
            class: pool.class,
            samples: rest.iter().map(|&i| pool.samples[i].clone()).collect(),
        });
    }
    Ok((train, BalancedSet { per_class: balanced }))
}
