use super::Dataset;
use crate::error::{Error, Result};

/// Train / validation / test fractions applied per class.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// Position of this task in the unpermuted split.
    pub origin: usize,
    /// Global class ids; local label `i` is `classes[i]`.
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub tasks: Vec<Task>,
}

impl TaskSplit {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn order(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.origin).collect()
    }
}

/// Contiguous class blocks: task `t` owns classes `t·k .. (t+1)·k`.
///
/// Within each class, samples keep dataset order and are cut 70/10/20 into
/// train, validation and test.
pub fn split_by_class(ds: &Dataset, tasks: usize, classes_per_task: usize) -> Result<TaskSplit> {
    if tasks == 0 || classes_per_task == 0 {
        return Err(Error::Config("tasks and classes_per_task must be at least 1".into()));
    }
    if tasks * classes_per_task > ds.n_classes {
        return Err(Error::Config(format!(
            "{tasks} tasks x {classes_per_task} classes exceeds {} available classes",
            ds.n_classes
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let classes: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
        let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
        for &c in &classes {
            let idx = &by_class[c];
            let n = idx.len();
            let n_train = (n as f64 * SPLIT_RATIOS.0).floor() as usize;
            let n_val = (n as f64 * SPLIT_RATIOS.1).floor() as usize;
            tr.extend_from_slice(&idx[..n_train]);
            va.extend_from_slice(&idx[n_train..n_train + n_val]);
            te.extend_from_slice(&idx[n_train + n_val..]);
        }
        if tr.is_empty() || te.is_empty() {
            return Err(Error::Data(format!("task {t} has an empty train or test set")));
        }
        out.push(Task {
            origin: t,
            train: ds.select(&tr, &classes)?,
            val: ds.select(&va, &classes)?,
            test: ds.select(&te, &classes)?,
            classes,
        });
    }
    Ok(TaskSplit { tasks: out })
}

/// Parses a task order such as `"41230"` (single digits) or `"4,1,2,3,0"`.
pub fn parse_order(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    let parsed: Option<Vec<usize>> = if s.contains(',') {
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    } else {
        s.chars().map(|c| c.to_digit(10).map(|d| d as usize)).collect()
    };
    parsed
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Config(format!("invalid task order {s:?}")))
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Config(format!(
            "task order {perm:?} has {} entries for {n} tasks",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Config(format!("task order {perm:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Reorders the task stream: position `i` of the result is task `perm[i]`.
pub fn apply_task_order(split: &TaskSplit, perm: &[usize]) -> Result<TaskSplit> {
    check_permutation(perm, split.len())?;
    Ok(TaskSplit {
        tasks: perm.iter().map(|&p| split.tasks[p].clone()).collect(),
    })
}
