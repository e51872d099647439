use serde::{Deserialize, Serialize};

use crate::dataset::TaskDataset;
use crate::numerics::RngStream;

/// Exemplar indices kept for one past task, grouped by class (a single
/// group when the task carries no labels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSlot {
    pub task_id: usize,
    pub groups: Vec<Vec<usize>>,
}

impl TaskSlot {
    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }
}

/// Fixed-capacity exemplar store, balanced across tasks and, within a task,
/// across classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub slots: Vec<TaskSlot>,
}

/// `total` split into `parts` shares differing by at most one.
fn shares(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            slots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(TaskSlot::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds exemplars of a finished task and shrinks older slots so that
    /// every task holds an equal share of the capacity (±1). Each slot's
    /// group lists are kept in random order, so truncating them keeps a
    /// uniform sample.
    pub fn add_task(&mut self, data: &TaskDataset, rng: &mut RngStream) {
        let quotas = shares(self.capacity, self.slots.len() + 1);
        for (slot, &q) in self.slots.iter_mut().zip(&quotas) {
            let group_quotas = shares(q, slot.groups.len());
            for (g, gq) in slot.groups.iter_mut().zip(group_quotas) {
                g.truncate(gq);
            }
        }
        let mut by_class: Vec<Vec<usize>> = match &data.labels {
            None => vec![(0..data.len()).collect()],
            Some(labels) => {
                let mut classes: Vec<usize> = labels.clone();
                classes.sort_unstable();
                classes.dedup();
                classes
                    .iter()
                    .map(|c| (0..data.len()).filter(|&i| labels[i] == *c).collect())
                    .collect()
            }
        };
        let quota = *quotas.last().unwrap_or(&0);
        let group_quotas = shares(quota, by_class.len());
        for (rows, gq) in by_class.iter_mut().zip(group_quotas) {
            let picks = rng.sample_without_replacement(rows.len(), gq);
            *rows = picks.into_iter().map(|i| rows[i]).collect();
        }
        self.slots.push(TaskSlot {
            task_id: data.task_id,
            groups: by_class,
        });
    }

    /// Stored exemplars of each past task as datasets.
    pub fn datasets(&self, train: &[TaskDataset]) -> Vec<TaskDataset> {
        self.slots
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| {
                train
                    .iter()
                    .find(|d| d.task_id == s.task_id)
                    .map(|d| d.subset(&s.indices()))
            })
            .collect()
    }
}
