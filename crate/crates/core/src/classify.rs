//! Continual classification over pre-extracted embeddings.
//!
//! An embedding corpus is a directory holding one labelled dataset file per
//! task and split, a file of class embeddings (one labelled row per class) and
//! `manifest.json` describing the class-to-task partition. Task `t` owns the
//! classes `(t−1)·classes_per_task .. t·classes_per_task`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_dataset, write_dataset, Split, TaskDataset};
use crate::error::{IconError, Result};
use crate::numerics::{mean, stream_id, streams, Matrix, RngStream};
use crate::objectives::{class_similarities, normalize_embeddings};
use crate::trainer::{run_sequence, ClassContext, FlowConfig, RunState, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASS_FILE: &str = "classes.bin";

/// File pair of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingTask {
    pub task: usize,
    pub train_file: String,
    pub test_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingManifest {
    pub n_classes: usize,
    pub classes_per_task: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub embedding_source: String,
    pub tasks: Vec<EmbeddingTask>,
    pub class_embeddings: String,
}

impl EmbeddingManifest {
    /// Task owning `class`.
    pub fn task_of(&self, class: usize) -> usize {
        class / self.classes_per_task + 1
    }
}

/// A validated corpus with unit-norm class embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub manifest: EmbeddingManifest,
    pub train: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
    pub class_emb: Matrix,
}

impl EmbeddingDataset {
    pub fn dim(&self) -> usize {
        self.class_emb.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let bad = |record: String, message: String| Err(IconError::Ingestion { record, message });
        if m.classes_per_task == 0 || m.n_classes == 0 {
            return bad(MANIFEST_FILE.into(), "class counts must be positive".into());
        }
        if m.n_classes != m.classes_per_task * m.tasks.len() {
            return bad(
                MANIFEST_FILE.into(),
                format!("{} classes cannot be split into {} tasks of {}", m.n_classes, m.tasks.len(), m.classes_per_task),
            );
        }
        if m.class_names.as_ref().is_some_and(|n| n.len() != m.n_classes) {
            return bad(MANIFEST_FILE.into(), "one class name per class required".into());
        }
        if self.class_emb.rows() != m.n_classes {
            return bad(m.class_embeddings.clone(), format!("expected {} class embeddings", m.n_classes));
        }
        if self.train.len() != m.tasks.len() || self.test.len() != m.tasks.len() {
            return bad(MANIFEST_FILE.into(), "one train and one test file per task required".into());
        }
        let files = m.tasks.iter().flat_map(|t| [&t.train_file, &t.test_file]);
        let sets = self.train.iter().zip(&self.test).flat_map(|(a, b)| [a, b]);
        for (file, d) in files.zip(sets) {
            if d.x.cols() != self.dim() {
                return bad(file.clone(), format!("feature dimension {} differs from {}", d.x.cols(), self.dim()));
            }
            let Some(labels) = &d.labels else {
                return bad(file.clone(), "labels missing".into());
            };
            for (row, &y) in labels.iter().enumerate() {
                if y >= m.n_classes {
                    return bad(format!("{file} row {row}"), format!("label {y} out of range for {} classes", m.n_classes));
                }
                if m.task_of(y) != d.task_id {
                    return bad(
                        format!("{file} row {row}"),
                        format!("class {y} belongs to task {}, not task {}", m.task_of(y), d.task_id),
                    );
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a corpus directory.
pub fn load_embeddings(dir: &Path) -> Result<EmbeddingDataset> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: EmbeddingManifest = serde_json::from_str(&text).map_err(|e| IconError::Ingestion {
        record: MANIFEST_FILE.into(),
        message: e.to_string(),
    })?;
    for (i, t) in manifest.tasks.iter().enumerate() {
        if t.task != i + 1 {
            return Err(IconError::Ingestion {
                record: MANIFEST_FILE.into(),
                message: "tasks must be listed in order 1..=T".into(),
            });
        }
    }
    let classes = read_dataset(&dir.join(&manifest.class_embeddings), 1)?;
    let in_order = classes.labels.as_ref().is_some_and(|l| l.iter().enumerate().all(|(i, &c)| i == c));
    if !in_order {
        return Err(IconError::Ingestion {
            record: manifest.class_embeddings.clone(),
            message: "class embedding rows must be labelled 0..C in order".into(),
        });
    }
    let class_emb = normalize_embeddings(&classes.x).map_err(|e| IconError::Ingestion {
        record: manifest.class_embeddings.clone(),
        message: e.to_string(),
    })?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for t in &manifest.tasks {
        train.push(read_dataset(&dir.join(&t.train_file), t.task)?);
        test.push(read_dataset(&dir.join(&t.test_file), t.task)?);
    }
    let ds = EmbeddingDataset {
        manifest,
        train,
        test,
        class_emb,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_embeddings(ds: &EmbeddingDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    let classes = TaskDataset::new(
        1,
        ds.class_emb.clone(),
        None,
        Some((0..ds.class_emb.rows()).collect()),
        Split::Train,
    )?;
    write_dataset(&classes, &dir.join(&ds.manifest.class_embeddings))?;
    for (t, (tr, te)) in ds.manifest.tasks.iter().zip(ds.train.iter().zip(&ds.test)) {
        write_dataset(tr, &dir.join(&t.train_file))?;
        write_dataset(te, &dir.join(&t.test_file))?;
    }
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&ds.manifest)? + "\n")?;
    Ok(())
}

/// Synthetic stand-in for image features and class text embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthEmbedSpec {
    pub n_classes: usize,
    pub classes_per_task: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub dim: usize,
    /// Spread of class directions around a shared direction; pairwise cosine
    /// between class means is about `1 / (1 + sep²)`.
    pub sep: f64,
    /// Expected norm of the isotropic feature noise.
    pub noise: f64,
}

impl Default for SynthEmbedSpec {
    fn default() -> Self {
        SynthEmbedSpec {
            n_classes: 20,
            classes_per_task: 5,
            per_class_train: 100,
            per_class_test: 50,
            dim: 512,
            sep: 1.0,
            noise: 4.0,
        }
    }
}

impl SynthEmbedSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IconError::Config(m.into()));
        if self.classes_per_task == 0 || !self.n_classes.is_multiple_of(self.classes_per_task) || self.n_classes == 0 {
            return bad("n_classes must be a positive multiple of classes_per_task");
        }
        if self.per_class_train == 0 || self.per_class_test == 0 || self.dim == 0 {
            return bad("per-class counts and dim must be positive");
        }
        if !(self.sep > 0.0) || !(self.noise >= 0.0) {
            return bad("sep must be positive and noise non-negative");
        }
        Ok(())
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Class means `normalize(b + sep·g_c)` around a shared unit direction `b`
/// (`g_c` with unit expected norm); features are a class mean plus isotropic
/// noise; class embeddings are the unit means.
pub fn synth_embeddings(spec: &SynthEmbedSpec, seed: u64) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let d = spec.dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = RngStream::new(seed, stream_id(streams::EMBEDDINGS, 0));
    let base = unit((0..d).map(|_| rng.normal()).collect());
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| unit(base.iter().map(|b| b + spec.sep * scale * rng.normal()).collect()))
        .collect();
    let class_emb = Matrix::from_rows(&means)?;
    let n_tasks = spec.n_classes / spec.classes_per_task;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut tasks = Vec::new();
    for t in 1..=n_tasks {
        let mut task_rng = RngStream::new(seed, stream_id(streams::EMBEDDINGS, t as u64));
        let classes: Vec<usize> = ((t - 1) * spec.classes_per_task..t * spec.classes_per_task).collect();
        for (split, per_class) in [(Split::Train, spec.per_class_train), (Split::Test, spec.per_class_test)] {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for i in 0..per_class * classes.len() {
                let c = classes[i % classes.len()];
                rows.push(means[c].iter().map(|m| m + spec.noise * scale * task_rng.normal()).collect::<Vec<_>>());
                labels.push(c);
            }
            // Stored at f32 precision, as written to disk.
            let x = Matrix::from_rows(&rows)?.map(|v| f64::from(v as f32));
            let ds = TaskDataset::new(t, x, None, Some(labels), split)?;
            match split {
                Split::Train => train.push(ds),
                Split::Test => test.push(ds),
            }
        }
        tasks.push(EmbeddingTask {
            task: t,
            train_file: format!("task{t}_train.bin"),
            test_file: format!("task{t}_test.bin"),
        });
    }
    let class_emb = normalize_embeddings(&class_emb.map(|v| f64::from(v as f32)))?;
    Ok(EmbeddingDataset {
        manifest: EmbeddingManifest {
            n_classes: spec.n_classes,
            classes_per_task: spec.classes_per_task,
            class_names: None,
            embedding_source: format!("synthetic (sep {}, noise {}, seed {seed})", spec.sep, spec.noise),
            tasks,
            class_embeddings: CLASS_FILE.into(),
        },
        train,
        test,
        class_emb,
    })
}

/// Index of the largest entry in each row (lowest index on ties).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Accuracy of assigning each feature row to the class embedding with the
/// highest cosine similarity.
pub fn nearest_embedding_accuracy(x: &Matrix, labels: &[usize], unit_emb: &Matrix) -> Result<f64> {
    let sims = normalize_embeddings(x)?.gemm(false, unit_emb, true)?;
    Ok(accuracy_of(&argmax_rows(&sims), labels))
}

/// Class predictions of the all-task flow and head, over all classes.
pub fn predict(state: &RunState, x: &Matrix, unit_emb: &Matrix) -> Result<Vec<usize>> {
    let Some(head) = &state.head else {
        return crate::error::contract("run was trained without a classification head");
    };
    let z = state.bank.ata.posterior(x)?.mu;
    Ok(argmax_rows(&class_similarities(head, &z, unit_emb)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    /// Test accuracy (fraction) of each task after the last task.
    pub per_task: Vec<f64>,
    pub average: f64,
}

pub fn evaluate_accuracy(state: &RunState, ds: &EmbeddingDataset) -> Result<ClassifyReport> {
    let mut per_task = Vec::new();
    for d in &ds.test {
        let labels = d.labels.as_ref().ok_or_else(|| IconError::Contract("test labels missing".into()))?;
        per_task.push(accuracy_of(&predict(state, &d.x, &ds.class_emb)?, labels));
    }
    Ok(ClassifyReport {
        average: mean(&per_task),
        per_task,
    })
}

/// Trains the flows and head over the task sequence and reports the final
/// test accuracy on every task.
pub fn continual_classify(
    ds: &EmbeddingDataset,
    cfg: &TrainConfig,
    flow: &FlowConfig,
    seed: u64,
) -> Result<(ClassifyReport, RunState)> {
    ds.validate()?;
    let cls = ClassContext {
        unit_emb: ds.class_emb.clone(),
    };
    let state = run_sequence(&ds.train, cfg, flow, Some(&cls), seed)?;
    Ok((evaluate_accuracy(&state, ds)?, state))
}
