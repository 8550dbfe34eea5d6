//! Comparison forecasters over the same lag windows as the LSTM: seasonal
//! persistence and a bagged CART random forest.

use serde::{Deserialize, Serialize};

use crate::numeric::Rng;
use crate::timeseries::{SeriesError, WindowedDataset};

/// Prediction for index `t >= season` is the value at `t - season`.
/// Returns one prediction per index in `season..len`.
pub fn seasonal_naive(series: &[f64], season: usize) -> Result<Vec<f64>, SeriesError> {
    if season == 0 || series.len() <= season {
        return Err(SeriesError::Window {
            len: series.len(),
            timesteps: season,
            horizon: 1,
        });
    }
    Ok(series[..series.len() - season].to_vec())
}

/// Seasonal-naive forecasts for specific target indices of `series`.
pub fn seasonal_naive_at(series: &[f64], targets: &[usize], season: usize) -> Result<Vec<f64>, SeriesError> {
    targets
        .iter()
        .map(|&t| {
            t.checked_sub(season)
                .map(|i| series[i])
                .ok_or(SeriesError::Window {
                    len: t,
                    timesteps: season,
                    horizon: 1,
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features examined per split; `None` examines all of them.
    pub max_features: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 10,
            min_samples_leaf: 5,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    config: TreeConfig,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

/// Best variance-reduction split of a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    /// Reduction in the sum of squared errors.
    pub gain: f64,
}

/// Exhaustive search over features and midpoints between consecutive
/// distinct values. Features are scanned in ascending order and thresholds
/// ascending; the first strictly best split wins.
pub fn best_split(
    windows: &WindowedDataset,
    samples: &[usize],
    features: &[usize],
    min_samples_leaf: usize,
) -> Option<SplitChoice> {
    let n = samples.len();
    if n < 2 * min_samples_leaf.max(1) {
        return None;
    }
    let total: f64 = samples.iter().map(|&i| windows.target(i)).sum();
    let total_sq: f64 = samples.iter().map(|&i| windows.target(i).powi(2)).sum();
    let parent_sse = total_sq - total * total / n as f64;
    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &f in features {
        order.clear();
        order.extend(samples.iter().map(|&i| (windows.input(i)[f], windows.target(i))));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for k in 0..n - 1 {
            left_sum += order[k].1;
            left_sq += order[k].1 * order[k].1;
            let nl = k + 1;
            let nr = n - nl;
            if order[k].0 == order[k + 1].0 || nl < min_samples_leaf || nr < min_samples_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let right_sq = total_sq - left_sq;
            let sse = (left_sq - left_sum * left_sum / nl as f64) + (right_sq - right_sum * right_sum / nr as f64);
            let gain = parent_sse - sse;
            if gain > 1e-12 && best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: 0.5 * (order[k].0 + order[k + 1].0),
                    gain,
                });
            }
        }
    }
    best
}

fn mean_target(windows: &WindowedDataset, samples: &[usize]) -> f64 {
    samples.iter().map(|&i| windows.target(i)).sum::<f64>() / samples.len() as f64
}

/// Greedy CART regression tree over all windows.
pub fn fit_tree(windows: &WindowedDataset, config: &TreeConfig, rng: &mut Rng) -> RegressionTree {
    let samples: Vec<usize> = (0..windows.len()).collect();
    fit_tree_on(windows, samples, config, rng)
}

/// Tree over the given sample indices (repeats allowed, as in bootstrap
/// resamples).
pub fn fit_tree_on(windows: &WindowedDataset, samples: Vec<usize>, config: &TreeConfig, rng: &mut Rng) -> RegressionTree {
    assert!(!samples.is_empty(), "tree needs at least one sample");
    let mut nodes = vec![Node::Leaf(0.0)];
    // (node slot, samples, depth)
    let mut stack = vec![(0usize, samples, 0usize)];
    let n_features = windows.timesteps();
    let all_features: Vec<usize> = (0..n_features).collect();
    while let Some((slot, samples, depth)) = stack.pop() {
        let leaf = mean_target(windows, &samples);
        nodes[slot] = Node::Leaf(leaf);
        if depth >= config.max_depth {
            continue;
        }
        let features = match config.max_features {
            Some(k) if k < n_features => {
                let mut f = all_features.clone();
                rng.shuffle(&mut f);
                f.truncate(k.max(1));
                f.sort_unstable();
                f
            }
            _ => all_features.clone(),
        };
        let Some(split) = best_split(windows, &samples, &features, config.min_samples_leaf) else {
            continue;
        };
        let (left, right): (Vec<usize>, Vec<usize>) = samples
            .iter()
            .partition(|&&i| windows.input(i)[split.feature] <= split.threshold);
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf(0.0));
        nodes.push(Node::Leaf(0.0));
        nodes[slot] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        stack.push((r, right, depth + 1));
        stack.push((l, left, depth + 1));
    }
    RegressionTree {
        nodes,
        config: *config,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
    pub bootstrap_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub tree: TreeConfig,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            tree: TreeConfig::default(),
            bootstrap: true,
        }
    }
}

/// Bagged trees; tree `k` draws its bootstrap resample from the stream
/// `seed ^ k`, where `seed` is taken from `rng`.
pub fn fit_forest(windows: &WindowedDataset, config: &ForestConfig, rng: &mut Rng) -> Forest {
    assert!(!windows.is_empty(), "forest needs at least one sample");
    let seed = rng.next_u64();
    let base = Rng::new(seed);
    let n = windows.len();
    let trees = (0..config.n_trees)
        .map(|k| {
            let mut tree_rng = base.stream(k as u64);
            let samples = if config.bootstrap {
                (0..n).map(|_| tree_rng.below(n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree_on(windows, samples, &config.tree, &mut tree_rng)
        })
        .collect();
    Forest {
        trees,
        bootstrap_seed: seed,
    }
}

impl Forest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_all(&self, windows: &WindowedDataset) -> Vec<f64> {
        windows.inputs().map(|x| self.predict(x)).collect()
    }
}
