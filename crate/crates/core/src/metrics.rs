//! Evaluation against the truth ledger, byte accounting, and 2-D projections.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::client::Handle;
use crate::data::{TaskId, TaskPool};
use crate::error::{Error, Result};
use crate::model::{loss, Adapter, BaseModel, LossKind};
use crate::numeric::Rng;

/// Metrics for one committed round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub per_task_eval_loss: BTreeMap<TaskId, f64>,
    /// `None` when the method does no clustering.
    pub cluster_accuracy: Option<f64>,
    pub purity: Option<f64>,
    pub inertia: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub cumulative_bytes: u64,
}

impl RoundRecord {
    pub fn mean_eval_loss(&self) -> f64 {
        self.per_task_eval_loss.values().sum::<f64>() / self.per_task_eval_loss.len().max(1) as f64
    }
}

/// Cluster by task count table; rows are clusters, columns tasks in
/// ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Contingency {
    pub tasks: Vec<TaskId>,
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
}

pub fn contingency(assignment: &BTreeMap<Handle, usize>, truth: &BTreeMap<Handle, TaskId>, n: usize) -> Result<Contingency> {
    if assignment.len() != truth.len() || assignment.keys().zip(truth.keys()).any(|(a, b)| a != b) {
        return Err(Error::Input("assignment and truth cover different handles".into()));
    }
    if assignment.is_empty() {
        return Err(Error::Input("nothing to score".into()));
    }
    let tasks: Vec<TaskId> = truth.values().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if tasks.len() > n {
        return Err(Error::Input(format!("{} distinct tasks but only {n} allowed", tasks.len())));
    }
    let mut counts = vec![vec![0usize; n]; n];
    for (handle, &cluster) in assignment {
        if cluster >= n {
            return Err(Error::Input(format!("cluster {cluster} out of range for {n} clusters")));
        }
        let t = tasks.binary_search(&truth[handle]).expect("task collected above");
        counts[cluster][t] += 1;
    }
    Ok(Contingency { tasks, counts, total: assignment.len() })
}

/// Best cluster to task-column bijection by trying all `n!` permutations.
pub fn best_mapping_exhaustive(counts: &[Vec<usize>]) -> (Vec<usize>, usize) {
    fn go(row: usize, counts: &[Vec<usize>], used: &mut [bool], current: &mut Vec<usize>, score: usize, best: &mut (Vec<usize>, usize)) {
        if row == counts.len() {
            if score > best.1 || best.0.is_empty() {
                *best = (current.clone(), score);
            }
            return;
        }
        for col in 0..counts.len() {
            if !used[col] {
                used[col] = true;
                current.push(col);
                go(row + 1, counts, used, current, score + counts[row][col], best);
                current.pop();
                used[col] = false;
            }
        }
    }
    let mut best = (Vec::new(), 0);
    go(0, counts, &mut vec![false; counts.len()], &mut Vec::new(), 0, &mut best);
    best
}

/// Maximum-weight perfect matching on a square table (Hungarian method with
/// potentials, O(n^3)).
pub fn best_mapping_hungarian(counts: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let n = counts.len();
    let max = counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost = |i: usize, j: usize| max - counts[i][j] as i64;
    // One-based arrays; row 0 and column 0 are sentinels.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            mapping[p[j] - 1] = j - 1;
        }
    }
    let score = mapping.iter().enumerate().map(|(i, &j)| counts[i][j]).sum();
    (mapping, score)
}

/// Best bijection for the table, exhaustive up to 8 clusters.
pub fn best_mapping(counts: &[Vec<usize>]) -> (Vec<usize>, usize) {
    if counts.len() <= 8 {
        best_mapping_exhaustive(counts)
    } else {
        best_mapping_hungarian(counts)
    }
}

/// Fraction of handles whose cluster maps to their task under the best
/// bijection between clusters and tasks.
pub fn cluster_accuracy(assignment: &BTreeMap<Handle, usize>, truth: &BTreeMap<Handle, TaskId>, n: usize) -> Result<f64> {
    let table = contingency(assignment, truth, n)?;
    Ok(best_mapping(&table.counts).1 as f64 / table.total as f64)
}

/// Task each cluster is matched to, or `None` for a cluster matched to an
/// unused task column.
pub fn cluster_to_task(assignment: &BTreeMap<Handle, usize>, truth: &BTreeMap<Handle, TaskId>, n: usize) -> Result<Vec<Option<TaskId>>> {
    let table = contingency(assignment, truth, n)?;
    let (mapping, _) = best_mapping(&table.counts);
    Ok(mapping.into_iter().map(|col| table.tasks.get(col).copied()).collect())
}

pub fn purity(assignment: &BTreeMap<Handle, usize>, truth: &BTreeMap<Handle, TaskId>) -> Result<f64> {
    let n = assignment.values().max().map_or(0, |m| m + 1).max(truth.values().collect::<BTreeSet<_>>().len());
    let table = contingency(assignment, truth, n)?;
    let majority: usize = table.counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / table.total as f64)
}

/// Bytes to move one adapter per (client, task) pair:
/// `sum(adapters_per_client) * param_count * bytes_per_param`.
/// Uploads and write-backs move the same amount.
pub fn comm_bytes(adapters_per_client: &[usize], param_count: usize, bytes_per_param: usize) -> u64 {
    adapters_per_client.iter().map(|&n| (n * param_count * bytes_per_param) as u64).sum()
}

/// Mean loss of `adapter` on held-out data.
pub fn eval_task_loss(model: &BaseModel, adapter: &Adapter, heldout: &TaskPool, kind: LossKind) -> Result<f64> {
    loss(model, adapter, &heldout.x, &heldout.y, kind)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn sym_mul(g: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    g.iter().map(|row| dot(row, v)).collect()
}

/// Orthonormalizes `b` against `a` and itself.
fn gram_schmidt(a: &[f64], b: &mut [f64]) -> f64 {
    let proj = dot(a, b);
    b.iter_mut().zip(a).for_each(|(x, y)| *x -= proj * y);
    normalize(b)
}

/// Eigenpairs of a symmetric 2x2 matrix, larger eigenvalue first.
fn eig2(a: f64, b: f64, c: f64) -> [(f64, [f64; 2]); 2] {
    let mean = 0.5 * (a + c);
    let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mean + radius, mean - radius);
    let v1 = if b.abs() > 0.0 {
        let (x, y) = (l1 - c, b);
        let n = (x * x + y * y).sqrt();
        [x / n, y / n]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    [(l1, v1), (l2, [-v1[1], v1[0]])]
}

fn orient(scores: &mut [f64]) {
    let mut lead = 0.0f64;
    for &s in scores.iter() {
        if s.abs() > lead.abs() {
            lead = s;
        }
    }
    if lead < 0.0 {
        scores.iter_mut().for_each(|s| *s = -*s);
    }
}

/// Scores on the top two principal components.
///
/// Runs block power iteration on the centered Gram matrix followed by a
/// Rayleigh-Ritz step. Each component is flipped so its largest-magnitude
/// score is positive; a component with no variance is all zeros.
pub fn project_2d(vectors: &[&[f64]]) -> Result<Vec<(f64, f64)>> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 vectors to project, got {n}")));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("vectors of different lengths".into()));
    }
    let mut mean = vec![0.0; dim];
    for v in vectors {
        mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let gram: Vec<Vec<f64>> = centered.iter().map(|a| centered.iter().map(|b| dot(a, b)).collect()).collect();
    let trace: f64 = (0..n).map(|i| gram[i][i]).sum();
    if trace == 0.0 {
        return Ok(vec![(0.0, 0.0); n]);
    }

    let mut rng = Rng::new(0x5eed);
    let mut q1: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let mut q2: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    normalize(&mut q1);
    gram_schmidt(&q1, &mut q2);
    for _ in 0..10_000 {
        let mut p1 = sym_mul(&gram, &q1);
        let mut p2 = sym_mul(&gram, &q2);
        normalize(&mut p1);
        if gram_schmidt(&p1, &mut p2) <= 1e-300 {
            p2 = vec![0.0; n];
        }
        let change = squared_distance_pair(&q1, &p1).max(span_residual(&p1, &p2, &q2));
        q1 = p1;
        q2 = p2;
        if change < 1e-26 {
            break;
        }
    }

    let gq1 = sym_mul(&gram, &q1);
    let gq2 = sym_mul(&gram, &q2);
    let [(l1, r1), (l2, r2)] = eig2(dot(&q1, &gq1), dot(&q1, &gq2), dot(&q2, &gq2));
    let floor = 1e-12 * trace;
    let component = |l: f64, r: [f64; 2]| -> Vec<f64> {
        if l <= floor {
            return vec![0.0; n];
        }
        let s = l.sqrt();
        let mut scores: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| s * (r[0] * a + r[1] * b)).collect();
        orient(&mut scores);
        scores
    };
    let x = component(l1, r1);
    let y = component(l2, r2);
    Ok(x.into_iter().zip(y).collect())
}

/// Distance between the lines spanned by two unit vectors.
fn squared_distance_pair(a: &[f64], b: &[f64]) -> f64 {
    let c = dot(a, b).abs();
    (1.0 - c * c).max(0.0)
}

/// Component of `v` outside span(a, b).
fn span_residual(a: &[f64], b: &[f64], v: &[f64]) -> f64 {
    let (pa, pb) = (dot(a, v), dot(b, v));
    let r: Vec<f64> = v.iter().zip(a).zip(b).map(|((x, y), z)| x - pa * y - pb * z).collect();
    dot(&r, &r)
}
