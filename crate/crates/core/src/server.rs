//! Server side of a round: client selection, K-means over uploaded adapter
//! vectors, and per-cluster averaging.
//!
//! Nothing in this module takes a task label. The server only sees client
//! ids, opaque handles, sample counts, and flat vectors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::client::{Handle, Upload};
use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::model::{Adapter, AdapterLayout};
use crate::numeric::{squared_distance, Rng};

/// All uploads of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct UploadSet {
    round: u32,
    entries: Vec<Upload>,
}

impl UploadSet {
    pub fn new(round: u32, entries: Vec<Upload>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Protocol(format!("round {round}: no uploads")));
        }
        let len = entries[0].vector.len();
        let mut handles = BTreeSet::new();
        for e in &entries {
            if e.vector.len() != len {
                return Err(Error::Protocol(format!(
                    "round {round}: upload {} has {} values, expected {len}",
                    e.handle,
                    e.vector.len()
                )));
            }
            if !handles.insert(e.handle) {
                return Err(Error::Protocol(format!("round {round}: duplicate handle {}", e.handle)));
            }
        }
        Ok(Self { round, entries })
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn entries(&self) -> &[Upload] {
        &self.entries
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.entries.iter().map(|e| e.vector.as_slice()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Result of K-means over a list of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Cluster index of each input point, in input order.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning run.
    pub trace: Vec<f64>,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ starts; the lowest final inertia wins.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6, restarts: 10 }
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, squared_distance(point, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point, centroid);
        // Strict comparison keeps ties on the lowest index.
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = points
        .iter()
        .map(|p| {
            let (c, d) = nearest(p, centroids);
            inertia += d;
            c
        })
        .collect();
    (assignment, inertia)
}

/// Draws an index with probability proportional to `weights`.
fn weighted_pick(weights: &[f64], total: f64, rng: &mut Rng) -> usize {
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > target && *w > 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Greedy k-means++: each new centroid is the best of `2 + ln k` candidates
/// drawn proportionally to squared distance, judged by the potential it leaves.
fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = vec![points[rng.below(points.len())].to_vec()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            centroids.push(points[rng.below(points.len())].to_vec());
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = weighted_pick(&dist, total, rng);
            let next: Vec<f64> = dist.iter().zip(points).map(|(d, p)| d.min(squared_distance(p, points[pick]))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| potential < *b) {
                best = Some((potential, pick, next));
            }
        }
        let (_, pick, next) = best.expect("at least one trial");
        dist = next;
        centroids.push(points[pick].to_vec());
    }
    centroids
}

/// Means of the assigned points. An empty cluster takes over the point that
/// is farthest from its current centroid, as long as that point's cluster
/// keeps at least one member.
fn update(points: &[&[f64]], assignment: &mut [usize], centroids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = centroids.len();
    let dim = points[0].len();
    let mut sizes = vec![0usize; k];
    for &c in assignment.iter() {
        sizes[c] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .map(|i| (i, squared_distance(points[i], &centroids[assignment[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = donor {
            sizes[assignment[i]] -= 1;
            assignment[i] = empty;
            sizes[empty] = 1;
        }
    }
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &c) in points.iter().zip(assignment.iter()) {
        for (s, v) in sums[c].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(&sizes)
        .zip(centroids)
        .map(|((s, &n), old)| if n == 0 { old.clone() } else { s.into_iter().map(|v| v / n as f64).collect() })
        .collect()
}

/// Single-point moves that lower the objective, applied until none is left.
/// Returns whether any point moved.
fn hartigan(points: &[&[f64]], assignment: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &c in assignment.iter() {
        sizes[c] += 1;
    }
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = assignment[i];
            let n_from = sizes[from];
            if n_from < 2 {
                continue;
            }
            let removal = n_from as f64 / (n_from - 1) as f64 * squared_distance(p, &centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for to in (0..k).filter(|&to| to != from) {
                let n_to = sizes[to] as f64;
                let cost = n_to / (n_to + 1.0) * squared_distance(p, &centroids[to]);
                if best.is_none_or(|(_, b)| cost < b) {
                    best = Some((to, cost));
                }
            }
            let Some((to, cost)) = best else { continue };
            if cost >= removal * (1.0 - 1e-12) {
                continue;
            }
            let (nf, nt) = (n_from as f64, sizes[to] as f64);
            for (c, v) in centroids[from].iter_mut().zip(p.iter()) {
                *c = (*c * nf - v) / (nf - 1.0);
            }
            for (c, v) in centroids[to].iter_mut().zip(p.iter()) {
                *c = (*c * nt + v) / (nt + 1.0);
            }
            sizes[from] -= 1;
            sizes[to] += 1;
            assignment[i] = to;
            moved = true;
            moved_any = true;
        }
        if !moved {
            break;
        }
    }
    if moved_any {
        let fresh = update(points, assignment, centroids);
        centroids.clone_from_slice(&fresh);
    }
    moved_any
}

fn inertia_of(points: &[&[f64]], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignment).map(|(p, &c)| squared_distance(p, &centroids[c])).sum()
}

/// Lloyd's algorithm from one k-means++ start, followed by single-point
/// moves that still lower the inertia.
pub fn kmeans(points: &[&[f64]], k: usize, rng: &mut Rng, max_iters: usize, tol: f64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::Infeasible(format!("cannot form {k} clusters from {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points of different lengths".into()));
    }

    let mut centroids = kmeans_plus_plus(points, k, rng);
    let (mut assignment, first) = assign(points, &centroids);
    let mut trace = vec![first];
    for _ in 0..max_iters {
        let next = update(points, &mut assignment, &centroids);
        let shift = centroids.iter().zip(&next).map(|(a, b)| squared_distance(a, b)).fold(0.0, f64::max).sqrt();
        centroids = next;
        let (a, inertia) = assign(points, &centroids);
        assignment = a;
        trace.push(inertia);
        if shift < tol {
            break;
        }
    }
    // Make the reported centroids the means of the reported assignment.
    centroids = update(points, &mut assignment, &centroids);
    let inertia = inertia_of(points, &assignment, &centroids);
    trace.push(inertia);
    if hartigan(points, &mut assignment, &mut centroids) {
        trace.push(inertia_of(points, &assignment, &centroids));
    }
    let inertia = *trace.last().expect("nonempty trace");
    Ok(Clustering { k, assignment, centroids, inertia, trace })
}

/// Best of `params.restarts` independent runs (first minimum wins).
pub fn kmeans_best_of(points: &[&[f64]], k: usize, rng: &mut Rng, params: &KMeansParams) -> Result<Clustering> {
    let mut best: Option<Clustering> = None;
    for _ in 0..params.restarts.max(1) {
        let run = kmeans(points, k, rng, params.max_iters, params.tol)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Uniform sample without replacement of `max(1, round(fraction * m))`
/// clients, returned in ascending order.
pub fn select_clients(all: &[ClientId], fraction: f64, rng: &mut Rng) -> Result<Vec<ClientId>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("participation fraction must be in (0, 1], got {fraction}")));
    }
    if all.is_empty() {
        return Err(Error::Parameter("no clients to select from".into()));
    }
    let count = ((fraction * all.len() as f64).round() as usize).clamp(1, all.len());
    let mut picked: Vec<ClientId> = rng.sample_indices(all.len(), count).into_iter().map(|i| all[i]).collect();
    picked.sort();
    Ok(picked)
}

/// Per-cluster aggregates and the adapter each upload is replaced with.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation {
    pub globals: Vec<Adapter>,
    pub writebacks: BTreeMap<Handle, Adapter>,
}

/// Averages the members of every cluster. Unweighted by default; with
/// `weighted` each member counts in proportion to its shard size.
pub fn aggregate(uploads: &UploadSet, clustering: &Clustering, layout: &AdapterLayout, weighted: bool) -> Result<Aggregation> {
    if clustering.assignment.len() != uploads.len() {
        return Err(Error::Protocol(format!(
            "clustering covers {} uploads, round has {}",
            clustering.assignment.len(),
            uploads.len()
        )));
    }
    let dim = layout.param_count();
    let mut sums = vec![vec![0.0; dim]; clustering.k];
    let mut weights = vec![0.0; clustering.k];
    for (upload, &c) in uploads.entries().iter().zip(&clustering.assignment) {
        if upload.vector.len() != dim {
            return Err(Error::Shape(format!("upload has {} values, layout needs {dim}", upload.vector.len())));
        }
        let w = if weighted { upload.sample_count as f64 } else { 1.0 };
        for (s, v) in sums[c].iter_mut().zip(&upload.vector) {
            *s += if weighted { w * v } else { *v };
        }
        weights[c] += w;
    }
    let globals = sums
        .into_iter()
        .zip(&weights)
        .enumerate()
        .map(|(c, (s, &w))| {
            if w == 0.0 {
                return Err(Error::Protocol(format!("cluster {c} has no members")));
            }
            Adapter::unflatten(layout, &s.into_iter().map(|v| v / w).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let writebacks = uploads
        .entries()
        .iter()
        .zip(&clustering.assignment)
        .map(|(u, &c)| (u.handle, globals[c].clone()))
        .collect();
    Ok(Aggregation { globals, writebacks })
}

/// Server state carried across rounds.
#[derive(Clone, Debug)]
pub struct Server {
    layout: AdapterLayout,
    clusters: usize,
    kmeans: KMeansParams,
    weighted: bool,
    globals: Vec<Adapter>,
}

impl Server {
    pub fn new(layout: AdapterLayout, clusters: usize, kmeans: KMeansParams, weighted: bool) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::Config("the server needs at least one cluster".into()));
        }
        Ok(Self { layout, clusters, kmeans, weighted, globals: Vec::new() })
    }

    pub fn layout(&self) -> &AdapterLayout {
        &self.layout
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    /// Global per-cluster adapters from the most recent committed round.
    pub fn globals(&self) -> &[Adapter] {
        &self.globals
    }

    /// Clusters one round's uploads; pure with respect to server state.
    pub fn cluster(&self, uploads: &UploadSet, rng: &mut Rng) -> Result<Clustering> {
        kmeans_best_of(&uploads.vectors(), self.clusters, rng, &self.kmeans)
    }

    pub fn aggregate(&self, uploads: &UploadSet, clustering: &Clustering) -> Result<Aggregation> {
        aggregate(uploads, clustering, &self.layout, self.weighted)
    }

    /// Keeps the round's aggregates once the whole round has succeeded.
    pub fn commit(&mut self, globals: Vec<Adapter>) {
        self.globals = globals;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerShape;

    fn pts(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    fn upload(handle: u64, vector: Vec<f64>) -> Upload {
        Upload { client_id: ClientId(0), handle: Handle(handle), sample_count: 1, vector }
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let mut rng = Rng::new(1);
        let points: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.standard_normal(), rng.standard_normal()]).collect();
        let c = kmeans(&pts(&points), 6, &mut rng, 100, 1e-6).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut a = c.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let points = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 6.0]];
        let c = kmeans(&pts(&points), 1, &mut Rng::new(2), 100, 1e-6).unwrap();
        assert_eq!(c.centroids[0], vec![3.0, 2.0]);
    }

    #[test]
    fn too_few_points_is_infeasible() {
        let points = vec![vec![1.0]];
        assert!(matches!(kmeans(&pts(&points), 2, &mut Rng::new(3), 10, 1e-6), Err(Error::Infeasible(_))));
    }

    #[test]
    fn separated_blobs_recovered() {
        let mut rng = Rng::new(4);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for i in 0..10 {
            let center = if i % 2 == 0 { 0.0 } else { 10.0 };
            points.push(vec![center + rng.standard_normal() * 0.5, rng.standard_normal() * 0.5]);
            truth.push(i % 2);
        }
        let c = kmeans(&pts(&points), 2, &mut rng, 100, 1e-6).unwrap();
        let flip = c.assignment[0] != truth[0];
        assert!(c.assignment.iter().zip(&truth).all(|(&a, &t)| (a == t) != flip));
        assert!(c.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
    }

    #[test]
    fn duplicates_repair_empty_clusters() {
        let points = vec![vec![1.0, 1.0]; 4];
        let c = kmeans(&pts(&points), 3, &mut Rng::new(5), 100, 1e-6).unwrap();
        assert!(c.sizes().iter().all(|&s| s >= 1));
        assert_eq!(c.inertia, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let centroids = vec![vec![0.0], vec![2.0], vec![0.0]];
        assert_eq!(nearest(&[1.0], &centroids).0, 0);
        assert_eq!(nearest(&[0.0], &centroids).0, 0);
    }

    #[test]
    fn selection_cases() {
        let ids: Vec<ClientId> = (0..10).map(ClientId).collect();
        let mut rng = Rng::new(6);
        assert_eq!(select_clients(&ids, 1.0, &mut rng).unwrap(), ids);
        let half = select_clients(&ids, 0.5, &mut rng).unwrap();
        assert_eq!(half.len(), 5);
        assert!(half.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_clients(&ids, 0.01, &mut rng).unwrap().len(), 1);
        assert!(select_clients(&ids, 0.0, &mut rng).is_err());
        assert!(select_clients(&ids, 1.5, &mut rng).is_err());

        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            for c in select_clients(&ids, 0.5, &mut rng).unwrap() {
                counts[c.0 as usize] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.03, "{freq}");
        }
    }

    fn layout(n: usize) -> AdapterLayout {
        AdapterLayout(vec![LayerShape { d: n, k: 1, r: 1 }])
    }

    #[test]
    fn aggregation_cases() {
        // Layout with d=2, k=1, r=1 holds 3 values.
        let l = layout(2);
        let single = UploadSet::new(1, vec![upload(7, vec![1.0, 2.0, 3.0])]).unwrap();
        let c = Clustering { k: 1, assignment: vec![0], centroids: vec![vec![]], inertia: 0.0, trace: vec![] };
        let agg = aggregate(&single, &c, &l, false).unwrap();
        assert_eq!(agg.globals[0].flatten(), vec![1.0, 2.0, 3.0]);
        assert_eq!(agg.writebacks[&Handle(7)], agg.globals[0]);

        let pair = UploadSet::new(1, vec![upload(1, vec![1.0, -2.0, 0.5]), upload(2, vec![-1.0, 2.0, -0.5])]).unwrap();
        let c2 = Clustering { assignment: vec![0, 0], ..c.clone() };
        assert!(aggregate(&pair, &c2, &l, false).unwrap().globals[0].flatten().iter().all(|&v| v == 0.0));

        let same = UploadSet::new(1, (0..5).map(|h| upload(h, vec![0.1, 0.7, 1.3])).collect()).unwrap();
        let c3 = Clustering { assignment: vec![0; 5], ..c.clone() };
        assert_eq!(aggregate(&same, &c3, &l, false).unwrap().globals[0].flatten(), vec![0.1, 0.7, 1.3]);
    }

    #[test]
    fn aggregate_matches_loop_oracle() {
        let mut rng = Rng::new(8);
        let l = layout(3);
        let vectors: Vec<Vec<f64>> = (0..7).map(|_| (0..4).map(|_| rng.standard_normal()).collect()).collect();
        let set = UploadSet::new(1, vectors.iter().enumerate().map(|(i, v)| upload(i as u64, v.clone())).collect()).unwrap();
        let c = Clustering { k: 1, assignment: vec![0; 7], centroids: vec![], inertia: 0.0, trace: vec![] };
        let got = aggregate(&set, &c, &l, false).unwrap().globals[0].flatten();
        for j in 0..4 {
            let mut s = 0.0;
            for v in &vectors {
                s += v[j];
            }
            assert!((got[j] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_aggregation_uses_sample_counts() {
        let l = layout(1);
        let mut a = upload(1, vec![0.0, 0.0]);
        a.sample_count = 3;
        let mut b = upload(2, vec![4.0, 8.0]);
        b.sample_count = 1;
        let set = UploadSet::new(1, vec![a, b]).unwrap();
        let c = Clustering { k: 1, assignment: vec![0, 0], centroids: vec![], inertia: 0.0, trace: vec![] };
        assert_eq!(aggregate(&set, &c, &l, true).unwrap().globals[0].flatten(), vec![1.0, 2.0]);
        assert_eq!(aggregate(&set, &c, &l, false).unwrap().globals[0].flatten(), vec![2.0, 4.0]);
    }

    #[test]
    fn upload_set_validation() {
        assert!(UploadSet::new(1, vec![]).is_err());
        assert!(UploadSet::new(1, vec![upload(1, vec![1.0]), upload(1, vec![2.0])]).is_err());
        assert!(UploadSet::new(1, vec![upload(1, vec![1.0]), upload(2, vec![2.0, 3.0])]).is_err());
    }

    #[test]
    fn uploads_carry_no_task_label() {
        let json = serde_json::to_value(upload(1, vec![1.0])).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["client_id", "handle", "sample_count", "vector"]);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn kmeans_reaches_a_single_move_optimum(
            seed in any::<u64>(),
            raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 3..20),
            k in 1usize..4,
        ) {
            prop_assume!(raw.len() >= k);
            let points: Vec<&[f64]> = raw.iter().map(Vec::as_slice).collect();
            let c = kmeans(&points, k, &mut Rng::new(seed), 100, 1e-6).unwrap();
            prop_assert!(c.trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
            prop_assert!((c.inertia - inertia_of(&points, &c.assignment, &c.centroids)).abs() <= 1e-9 * c.inertia.max(1.0));
            let sizes = c.sizes();
            prop_assert!(sizes.iter().all(|&s| s > 0));
            for (i, p) in points.iter().enumerate() {
                let from = c.assignment[i];
                let own = squared_distance(p, &c.centroids[from]);
                for to in 0..k {
                    let d = squared_distance(p, &c.centroids[to]);
                    prop_assert!(own <= d + 1e-9, "point {i} closer to cluster {to}");
                    if to != from && sizes[from] > 1 {
                        let gain = sizes[from] as f64 / (sizes[from] - 1) as f64 * own;
                        let cost = sizes[to] as f64 / (sizes[to] + 1) as f64 * d;
                        prop_assert!(cost >= gain - 1e-9, "moving point {i} to {to} lowers inertia");
                    }
                }
            }
        }
    }
}
