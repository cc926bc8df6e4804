//! m-way k-shot continual benchmark construction over an annotated corpus.
//!
//! Types are ranked by trigger frequency (ties broken lexicographically),
//! the top `n_tasks * way` are partitioned into tasks in rank order, and
//! per-type train/dev/test candidates are sampled through the "split"
//! stream, so a manifest fully reproduces its benchmark.

use super::{corpus_canonical_bytes, Candidate, Instance, NA_LABEL};
use crate::checksum::fnv1a_hex;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_tasks: usize,
    pub way: usize,
    pub base_shots: usize,
    pub shots: usize,
    pub na_ratio: usize,
    pub dev_per_type: usize,
    pub test_per_type: usize,
    pub corpus_checksum: String,
    pub task_labels: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub label_set: Vec<String>,
    pub train: Vec<Candidate>,
    pub dev: Vec<Candidate>,
    pub test: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub manifest: Manifest,
    pub tasks: Vec<TaskSplit>,
    pub instances: BTreeMap<String, Instance>,
}

#[derive(Debug, Clone)]
pub struct BuildParams {
    pub n_tasks: usize,
    pub way: usize,
    pub base_shots: usize,
    pub shots: usize,
    pub na_ratio: usize,
    pub dev_per_type: usize,
    pub test_per_type: usize,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            n_tasks: 5,
            way: 2,
            base_shots: 100,
            shots: 5,
            na_ratio: 1,
            dev_per_type: 10,
            test_per_type: 20,
            seed: 1,
        }
    }
}

pub fn build_benchmark(corpus: &[Instance], params: &BuildParams) -> Result<Benchmark> {
    if params.n_tasks == 0 || params.way == 0 {
        return Err(Error::InvalidArgument(
            "build_benchmark: n_tasks and way must be positive".to_string(),
        ));
    }
    if params.base_shots < params.shots {
        return Err(Error::InvalidArgument(format!(
            "build_benchmark: base_shots {} below shots {}",
            params.base_shots, params.shots
        )));
    }
    for inst in corpus {
        inst.validate()?;
    }

    // Rank types by trigger frequency, ties lexicographic.
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in corpus {
        for t in &inst.triggers {
            *freq.entry(t.label.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let needed = params.n_tasks * params.way;
    if ranked.len() < needed {
        return Err(Error::Build(format!(
            "corpus has {} event types, benchmark needs {needed}",
            ranked.len()
        )));
    }
    let selected: Vec<String> = ranked[..needed]
        .iter()
        .map(|(l, _)| l.to_string())
        .collect();
    let task_labels: Vec<Vec<String>> = selected.chunks(params.way).map(|c| c.to_vec()).collect();

    // Candidate pool per selected type, in corpus order.
    let selected_set: BTreeSet<&str> = selected.iter().map(|s| s.as_str()).collect();
    let mut pool: BTreeMap<&str, Vec<Candidate>> = BTreeMap::new();
    let by_id: BTreeMap<&str, &Instance> = corpus.iter().map(|i| (i.id.as_str(), i)).collect();
    if by_id.len() != corpus.len() {
        return Err(Error::Build("duplicate instance ids in corpus".to_string()));
    }
    for inst in corpus {
        for t in &inst.triggers {
            if selected_set.contains(t.label.as_str()) {
                pool.entry(t.label.as_str()).or_default().push(Candidate {
                    instance_id: inst.id.clone(),
                    start: t.start,
                    end: t.end,
                    gold: t.label.clone(),
                });
            }
        }
    }

    let mut rng = RngStream::new(params.seed, "split");
    let mut tasks = Vec::with_capacity(params.n_tasks);
    let mut used_ids: BTreeSet<String> = BTreeSet::new();

    for (ti, labels) in task_labels.iter().enumerate() {
        let train_n = if ti == 0 {
            params.base_shots
        } else {
            params.shots
        };
        let mut split = TaskSplit {
            label_set: labels.clone(),
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for label in labels {
            let cands = pool.get(label.as_str()).cloned().unwrap_or_default();
            let need = train_n + params.dev_per_type + params.test_per_type;
            if cands.len() < need {
                return Err(Error::Build(format!(
                    "type {label} has {} candidates, needs {need}",
                    cands.len()
                )));
            }
            let mut cands = cands;
            rng.shuffle(&mut cands);
            split.train.extend(cands[..train_n].iter().cloned());
            split.dev.extend(
                cands[train_n..train_n + params.dev_per_type]
                    .iter()
                    .cloned(),
            );
            split
                .test
                .extend(cands[train_n + params.dev_per_type..need].iter().cloned());
        }
        if params.na_ratio > 0 {
            add_na_candidates(&mut split, &by_id, params.na_ratio, &mut rng)?;
        }
        for c in split.train.iter().chain(&split.dev).chain(&split.test) {
            used_ids.insert(c.instance_id.clone());
        }
        tasks.push(split);
    }

    let instances: BTreeMap<String, Instance> = used_ids
        .into_iter()
        .map(|id| {
            let inst = (*by_id.get(id.as_str()).expect("candidate references corpus")).clone();
            (id, inst)
        })
        .collect();

    let manifest = Manifest {
        seed: params.seed,
        n_tasks: params.n_tasks,
        way: params.way,
        base_shots: params.base_shots,
        shots: params.shots,
        na_ratio: params.na_ratio,
        dev_per_type: params.dev_per_type,
        test_per_type: params.test_per_type,
        corpus_checksum: fnv1a_hex(&corpus_canonical_bytes(corpus)),
        task_labels,
    };
    let bench = Benchmark {
        manifest,
        tasks,
        instances,
    };
    bench.validate()?;
    Ok(bench)
}

/// Per distinct sentence of each split, sample `na_ratio` single-token spans
/// that overlap no gold trigger and collide with nothing already used in the
/// task.
fn add_na_candidates(
    split: &mut TaskSplit,
    by_id: &BTreeMap<&str, &Instance>,
    na_ratio: usize,
    rng: &mut RngStream,
) -> Result<()> {
    let mut used: BTreeSet<(String, usize, usize)> = split
        .train
        .iter()
        .chain(&split.dev)
        .chain(&split.test)
        .map(Candidate::span_key)
        .collect();

    let extend = |cands: &[Candidate],
                  used: &mut BTreeSet<(String, usize, usize)>,
                  rng: &mut RngStream|
     -> Vec<Candidate> {
        let mut seen_ids = BTreeSet::new();
        let mut out = Vec::new();
        for c in cands {
            if !seen_ids.insert(c.instance_id.clone()) {
                continue;
            }
            let inst = by_id[c.instance_id.as_str()];
            let mut eligible: Vec<usize> = (0..inst.tokens.len())
                .filter(|&p| !inst.position_in_trigger(p))
                .filter(|&p| !used.contains(&(inst.id.clone(), p, p + 1)))
                .collect();
            rng.shuffle(&mut eligible);
            for &p in eligible.iter().take(na_ratio) {
                used.insert((inst.id.clone(), p, p + 1));
                out.push(Candidate {
                    instance_id: inst.id.clone(),
                    start: p,
                    end: p + 1,
                    gold: NA_LABEL.to_string(),
                });
            }
        }
        out
    };

    let extra = extend(&split.train, &mut used, rng);
    split.train.extend(extra);
    let extra = extend(&split.dev, &mut used, rng);
    split.dev.extend(extra);
    let extra = extend(&split.test, &mut used, rng);
    split.test.extend(extra);
    Ok(())
}

/// Union of test candidates of tasks 1..t (1-based), task order then file
/// order, duplicates (possible only among NA spans shared across tasks)
/// dropped on first-wins.
pub fn accumulate_test(bench: &Benchmark, t: usize) -> Result<Vec<Candidate>> {
    if t == 0 || t > bench.tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "accumulate_test: stage {t} outside 1..={}",
            bench.tasks.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for task in &bench.tasks[..t] {
        for c in &task.test {
            if seen.insert(c.span_key()) {
                out.push(c.clone());
            }
        }
    }
    Ok(out)
}

impl Benchmark {
    pub fn accumulate_test(&self, t: usize) -> Result<Vec<Candidate>> {
        accumulate_test(self, t)
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn instance(&self, id: &str) -> Result<&Instance> {
        self.instances.get(id).ok_or_else(|| {
            Error::MemoryIntegrity(format!("instance {id} not present in benchmark"))
        })
    }

    /// Checksum of the manifest in canonical serialization; identifies the
    /// benchmark in run manifests and reports.
    pub fn checksum(&self) -> String {
        fnv1a_hex(&serde_json::to_vec(&self.manifest).expect("manifest serializes"))
    }

    /// Sorted union of all labels observed up to task t (1-based), NA
    /// excluded; label order is task order then rank order within a task.
    pub fn labels_through(&self, t: usize) -> Vec<String> {
        self.tasks[..t.min(self.tasks.len())]
            .iter()
            .flat_map(|task| task.label_set.iter().cloned())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.len() != self.manifest.n_tasks {
            return Err(Error::Build(
                "task count disagrees with manifest".to_string(),
            ));
        }
        let mut seen_labels: BTreeSet<&str> = BTreeSet::new();
        for (ti, task) in self.tasks.iter().enumerate() {
            if task.label_set.len() != self.manifest.way {
                return Err(Error::Build(format!("task {} has wrong way", ti + 1)));
            }
            for l in &task.label_set {
                if !seen_labels.insert(l.as_str()) {
                    return Err(Error::Build(format!(
                        "label {l} appears in more than one task"
                    )));
                }
            }
            let in_set: BTreeSet<&str> = task.label_set.iter().map(|s| s.as_str()).collect();
            let mut split_keys: BTreeSet<(String, usize, usize)> = BTreeSet::new();
            for c in task.train.iter().chain(&task.dev).chain(&task.test) {
                let inst = self.instance(&c.instance_id)?;
                if c.start >= c.end || c.end > inst.tokens.len() {
                    return Err(Error::Build(format!(
                        "candidate span ({}, {}) invalid for instance {}",
                        c.start, c.end, c.instance_id
                    )));
                }
                if c.gold != NA_LABEL && !in_set.contains(c.gold.as_str()) {
                    return Err(Error::Build(format!(
                        "candidate gold {} outside task {} label set",
                        c.gold,
                        ti + 1
                    )));
                }
                if c.is_na() {
                    let overlaps = inst
                        .triggers
                        .iter()
                        .any(|t| c.start < t.end && t.start < c.end);
                    if overlaps {
                        return Err(Error::Build(format!(
                            "NA candidate overlaps a gold trigger in {}",
                            c.instance_id
                        )));
                    }
                }
                if !split_keys.insert(c.span_key()) {
                    return Err(Error::Build(format!(
                        "duplicate candidate {:?} within task {}",
                        c.span_key(),
                        ti + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("instances.jsonl"))?);
        for inst in self.instances.values() {
            serde_json::to_writer(&mut f, inst)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        for (ti, task) in self.tasks.iter().enumerate() {
            write_json(&dir.join(format!("task_{:02}.json", ti + 1)), task)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Benchmark> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let instances = super::load_corpus(&dir.join("instances.jsonl"))?
            .into_iter()
            .map(|i| (i.id.clone(), i))
            .collect();
        let mut tasks = Vec::with_capacity(manifest.n_tasks);
        for ti in 0..manifest.n_tasks {
            tasks.push(read_json(&dir.join(format!("task_{:02}.json", ti + 1)))?);
        }
        let bench = Benchmark {
            manifest,
            tasks,
            instances,
        };
        bench.validate()?;
        Ok(bench)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    std::fs::write(path, buf)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{gen_synthetic_corpus, GenParams};

    fn small_corpus() -> Vec<Instance> {
        gen_synthetic_corpus(
            &GenParams {
                n_types: 10,
                instances_per_type: 60,
                vocab_size: 60,
                sentence_len: 6,
                signal_strength: 1.0,
            },
            5,
        )
        .unwrap()
    }

    fn small_params() -> BuildParams {
        BuildParams {
            n_tasks: 5,
            way: 2,
            base_shots: 20,
            shots: 5,
            na_ratio: 1,
            dev_per_type: 5,
            test_per_type: 10,
            seed: 7,
        }
    }

    #[test]
    fn ten_types_make_five_disjoint_two_way_tasks() {
        let bench = build_benchmark(&small_corpus(), &small_params()).unwrap();
        assert_eq!(bench.tasks.len(), 5);
        let mut all: Vec<&str> = Vec::new();
        for task in &bench.tasks {
            assert_eq!(task.label_set.len(), 2);
            all.extend(task.label_set.iter().map(|s| s.as_str()));
        }
        let dedup: BTreeSet<&&str> = all.iter().collect();
        assert_eq!(dedup.len(), all.len());
    }

    #[test]
    fn same_seed_rebuild_is_identical() {
        let corpus = small_corpus();
        let a = build_benchmark(&corpus, &small_params()).unwrap();
        let b = build_benchmark(&corpus, &small_params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_vec(&a.manifest).unwrap(),
            serde_json::to_vec(&b.manifest).unwrap()
        );
    }

    #[test]
    fn zero_na_ratio_emits_no_na_candidates() {
        let mut p = small_params();
        p.na_ratio = 0;
        let bench = build_benchmark(&small_corpus(), &p).unwrap();
        for task in &bench.tasks {
            assert!(task
                .train
                .iter()
                .chain(&task.dev)
                .chain(&task.test)
                .all(|c| !c.is_na()));
        }
    }

    #[test]
    fn shot_counts_match_manifest() {
        let bench = build_benchmark(&small_corpus(), &small_params()).unwrap();
        for (ti, task) in bench.tasks.iter().enumerate() {
            let per_type = if ti == 0 { 20 } else { 5 };
            let gold: Vec<&Candidate> = task.train.iter().filter(|c| !c.is_na()).collect();
            assert_eq!(gold.len(), per_type * 2);
            // na_ratio=1 per distinct selected sentence
            let na = task.train.iter().filter(|c| c.is_na()).count();
            let distinct: BTreeSet<&str> = gold.iter().map(|c| c.instance_id.as_str()).collect();
            assert_eq!(na, distinct.len());
        }
    }

    #[test]
    fn accumulated_test_sizes_add_up() {
        let bench = build_benchmark(&small_corpus(), &small_params()).unwrap();
        let c1 = bench.accumulate_test(1).unwrap();
        let c3 = bench.accumulate_test(3).unwrap();
        assert_eq!(c1.len(), bench.tasks[0].test.len());
        let expect: usize = bench.tasks[..3].iter().map(|t| t.test.len()).sum();
        assert_eq!(c3.len(), expect);
        let full = bench.accumulate_test(5).unwrap();
        let uniq: BTreeSet<(String, usize, usize)> = full.iter().map(Candidate::span_key).collect();
        assert_eq!(uniq.len(), full.len());
        assert!(bench.accumulate_test(0).is_err());
        assert!(bench.accumulate_test(6).is_err());
    }

    #[test]
    fn insufficient_instances_name_the_type() {
        let corpus = gen_synthetic_corpus(
            &GenParams {
                n_types: 4,
                instances_per_type: 10,
                vocab_size: 30,
                sentence_len: 5,
                signal_strength: 1.0,
            },
            2,
        )
        .unwrap();
        let p = BuildParams {
            n_tasks: 2,
            way: 2,
            base_shots: 9,
            shots: 5,
            na_ratio: 0,
            dev_per_type: 2,
            test_per_type: 2,
            seed: 1,
        };
        match build_benchmark(&corpus, &p).unwrap_err() {
            Error::Build(msg) => assert!(msg.contains("E0"), "{msg}"),
            other => panic!("expected build error, got {other}"),
        }
    }

    #[test]
    fn na_candidates_never_touch_triggers() {
        let bench = build_benchmark(&small_corpus(), &small_params()).unwrap();
        for task in &bench.tasks {
            for c in task.train.iter().chain(&task.dev).chain(&task.test) {
                if c.is_na() {
                    let inst = bench.instance(&c.instance_id).unwrap();
                    assert!(!inst
                        .triggers
                        .iter()
                        .any(|t| c.start < t.end && t.start < c.end));
                }
            }
        }
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let bench = build_benchmark(&small_corpus(), &small_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bench.save_dir(dir.path()).unwrap();
        let back = Benchmark::load_dir(dir.path()).unwrap();
        assert_eq!(bench, back);
        assert_eq!(bench.checksum(), back.checksum());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn built_benchmarks_always_satisfy_their_invariants(
            corpus_seed in 0u64..1000,
            split_seed in 0u64..1000,
            na_ratio in 0usize..3,
        ) {
            let corpus = gen_synthetic_corpus(
                &GenParams {
                    n_types: 6,
                    instances_per_type: 20,
                    vocab_size: 40,
                    sentence_len: 5,
                    signal_strength: 0.8,
                },
                corpus_seed,
            )
            .unwrap();
            let bench = build_benchmark(
                &corpus,
                &BuildParams {
                    n_tasks: 3,
                    way: 2,
                    base_shots: 6,
                    shots: 2,
                    na_ratio,
                    dev_per_type: 2,
                    test_per_type: 4,
                    seed: split_seed,
                },
            )
            .unwrap();
            // validate() enforces disjoint label sets, split disjointness by
            // (id, span), gold membership and NA non-overlap
            bench.validate().unwrap();
            let rebuilt = build_benchmark(
                &corpus,
                &BuildParams {
                    n_tasks: 3,
                    way: 2,
                    base_shots: 6,
                    shots: 2,
                    na_ratio,
                    dev_per_type: 2,
                    test_per_type: 4,
                    seed: split_seed,
                },
            )
            .unwrap();
            proptest::prop_assert_eq!(bench, rebuilt);
        }
    }
}
