//! Bootstrap-aggregated CART trees.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{FitData, FitReport, Prediction, Targets, Task};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features tried per split; `None` uses √d for classification and d/3 for regression.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 16,
            min_samples_split: 2,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Class distribution of the leaf's samples, or `[mean]` for regression.
    Leaf { value: Vec<f64> },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_value(&self, input: &[f64]) -> &[f64] {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if input[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Majority class of the reached leaf (lowest index on ties).
    pub fn vote(&self, input: &[f64]) -> usize {
        argmax(self.leaf_value(input))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub task: Task,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl RandomForest {
    /// Classification: fraction of tree votes per class. Regression: mean of leaf means.
    pub fn predict(&self, input: &[f64]) -> Result<Prediction> {
        if input.len() != self.n_features {
            return Err(Error::Input(format!(
                "forest expects {} inputs, got {}",
                self.n_features,
                input.len()
            )));
        }
        let n = self.trees.len() as f64;
        Ok(match self.task {
            Task::Classify { classes } => {
                let mut votes = vec![0.0; classes];
                for tree in &self.trees {
                    votes[tree.vote(input)] += 1.0;
                }
                Prediction::Probabilities(votes.into_iter().map(|v| v / n).collect())
            }
            Task::Regress => Prediction::Value(self.trees.iter().map(|t| t.leaf_value(input)[0]).sum::<f64>() / n),
        })
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(|t| t.nodes.len()).sum()
    }
}

struct Builder<'a> {
    inputs: &'a [Vec<f64>],
    targets: &'a Targets,
    classes: usize,
    max_depth: usize,
    min_samples_split: usize,
    max_features: usize,
}

impl Builder<'_> {
    fn leaf(&self, idx: &[usize]) -> Node {
        let value = match self.targets {
            Targets::Classes(labels) => {
                let mut dist = vec![0.0; self.classes];
                for &i in idx {
                    dist[labels[i]] += 1.0;
                }
                dist.iter_mut().for_each(|d| *d /= idx.len() as f64);
                dist
            }
            Targets::Values(values) => vec![idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64],
        };
        Node::Leaf { value }
    }

    /// Gini impurity times count, or sum of squared deviations.
    fn impurity(&self, idx: &[usize]) -> f64 {
        match self.targets {
            Targets::Classes(labels) => {
                let mut counts = vec![0usize; self.classes];
                for &i in idx {
                    counts[labels[i]] += 1;
                }
                let n = idx.len() as f64;
                n * (1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>())
            }
            Targets::Values(values) => {
                let n = idx.len() as f64;
                let mean = idx.iter().map(|&i| values[i]).sum::<f64>() / n;
                idx.iter().map(|&i| (values[i] - mean).powi(2)).sum()
            }
        }
    }

    /// Best `(feature, threshold, gain)` over a random feature subset.
    fn best_split(&self, idx: &[usize], rng: &mut crate::rng::Rng) -> Option<(usize, f64, f64)> {
        let d = self.inputs[0].len();
        let parent = self.impurity(idx);
        let mut best: Option<(usize, f64, f64)> = None;
        for feature in sample(rng, d, self.max_features.min(d)) {
            let mut sorted = idx.to_vec();
            sorted.sort_by(|&a, &b| self.inputs[a][feature].total_cmp(&self.inputs[b][feature]).then(a.cmp(&b)));
            let scorer = SplitScorer::new(self, &sorted);
            for cut in 1..sorted.len() {
                let lo = self.inputs[sorted[cut - 1]][feature];
                let hi = self.inputs[sorted[cut]][feature];
                if lo == hi {
                    continue;
                }
                let gain = parent - scorer.children(cut);
                if gain > 1e-12 && best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((feature, lo + (hi - lo) / 2.0, gain));
                }
            }
        }
        best
    }

    fn grow(&self, idx: &[usize], depth: usize, nodes: &mut Vec<Node>, rng: &mut crate::rng::Rng) -> usize {
        let at = nodes.len();
        nodes.push(self.leaf(idx));
        if depth >= self.max_depth || idx.len() < self.min_samples_split || self.impurity(idx) <= 1e-12 {
            return at;
        }
        let Some((feature, threshold, _)) = self.best_split(idx, rng) else {
            return at;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.inputs[i][feature] <= threshold);
        let left = self.grow(&left_idx, depth + 1, nodes, rng);
        let right = self.grow(&right_idx, depth + 1, nodes, rng);
        nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

/// Prefix statistics over samples sorted by one feature, giving the summed
/// child impurity of every cut in O(classes).
struct SplitScorer {
    n: usize,
    class_prefix: Vec<Vec<usize>>,
    sum_prefix: Vec<f64>,
    sq_prefix: Vec<f64>,
}

impl SplitScorer {
    fn new(b: &Builder<'_>, sorted: &[usize]) -> Self {
        let n = sorted.len();
        match b.targets {
            Targets::Classes(labels) => {
                let mut class_prefix = vec![vec![0usize; b.classes]; n + 1];
                for (k, &i) in sorted.iter().enumerate() {
                    class_prefix[k + 1] = class_prefix[k].clone();
                    class_prefix[k + 1][labels[i]] += 1;
                }
                Self {
                    n,
                    class_prefix,
                    sum_prefix: Vec::new(),
                    sq_prefix: Vec::new(),
                }
            }
            Targets::Values(values) => {
                let mut sum_prefix = vec![0.0; n + 1];
                let mut sq_prefix = vec![0.0; n + 1];
                for (k, &i) in sorted.iter().enumerate() {
                    sum_prefix[k + 1] = sum_prefix[k] + values[i];
                    sq_prefix[k + 1] = sq_prefix[k] + values[i] * values[i];
                }
                Self {
                    n,
                    class_prefix: Vec::new(),
                    sum_prefix,
                    sq_prefix,
                }
            }
        }
    }

    fn children(&self, cut: usize) -> f64 {
        if self.class_prefix.is_empty() {
            let side = |s: f64, q: f64, m: usize| (q - s * s / m as f64).max(0.0);
            let (s_all, q_all) = (self.sum_prefix[self.n], self.sq_prefix[self.n]);
            let (s_l, q_l) = (self.sum_prefix[cut], self.sq_prefix[cut]);
            side(s_l, q_l, cut) + side(s_all - s_l, q_all - q_l, self.n - cut)
        } else {
            let total = &self.class_prefix[self.n];
            let left = &self.class_prefix[cut];
            let gini = |counts: &mut dyn Iterator<Item = usize>, m: usize| {
                let m = m as f64;
                m * (1.0 - counts.map(|c| (c as f64 / m).powi(2)).sum::<f64>())
            };
            gini(&mut left.iter().copied(), cut)
                + gini(&mut total.iter().zip(left).map(|(t, l)| t - l), self.n - cut)
        }
    }
}

/// Each tree draws a bootstrap sample and its split features from its own
/// stream `(seed, tree index)`.
pub fn fit_random_forest(data: &FitData, task: Task, config: &ForestConfig) -> Result<(RandomForest, FitReport)> {
    data.validate(task)?;
    if config.trees == 0 || config.max_depth == 0 {
        return Err(Error::Config("forest needs at least one tree and depth".into()));
    }
    let d = data.inputs[0].len();
    let max_features = config.max_features.unwrap_or(match task {
        Task::Classify { .. } => (d as f64).sqrt().round() as usize,
        Task::Regress => d / 3,
    });
    let builder = Builder {
        inputs: &data.inputs,
        targets: &data.targets,
        classes: task.outputs(),
        max_depth: config.max_depth,
        min_samples_split: config.min_samples_split.max(2),
        max_features: max_features.clamp(1, d),
    };
    let n = data.len();
    let trees = (0..config.trees)
        .map(|t| {
            let mut rng = stream(config.seed, t as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut nodes = Vec::new();
            builder.grow(&idx, 0, &mut nodes, &mut rng);
            Tree { nodes }
        })
        .collect();
    let forest = RandomForest {
        task,
        n_features: d,
        trees,
    };
    let report = FitReport::new(0, forest.node_count());
    Ok((forest, report))
}
