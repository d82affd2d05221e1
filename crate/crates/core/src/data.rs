//! Synthetic tasks and non-IID Dirichlet partitioning into client shards.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossKind;
use crate::numeric::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// `y = amplitude * sin(2 pi (x + phase)) + noise`, `x ~ U[-1, 1]`.
    /// The fixed `context` values are appended to every input, giving a
    /// model a way to tell tasks apart when they share one adapter.
    SinusoidRegression {
        #[serde(default = "one")]
        amplitude: f64,
        phase: f64,
        noise_std: f64,
        #[serde(default)]
        context: Vec<f64>,
    },
    /// Gaussian blobs around `separation * e_c`. Label `l` is drawn around
    /// the center of class `(l + label_shift) mod classes`, so tasks with
    /// different shifts disagree on every input.
    GaussianBlobClassification {
        classes: usize,
        input_dim: usize,
        separation: f64,
        noise_std: f64,
        #[serde(default)]
        label_shift: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub sample_count: usize,
}

impl TaskSpec {
    pub fn sinusoid(task_id: u32, phase: f64, noise_std: f64, sample_count: usize) -> Self {
        Self {
            task_id: TaskId(task_id),
            kind: TaskKind::SinusoidRegression { amplitude: 1.0, phase, noise_std, context: Vec::new() },
            sample_count,
        }
    }

    pub fn blobs(task_id: u32, classes: usize, input_dim: usize, separation: f64, noise_std: f64, label_shift: usize, sample_count: usize) -> Self {
        Self {
            task_id: TaskId(task_id),
            kind: TaskKind::GaussianBlobClassification { classes, input_dim, separation, noise_std, label_shift },
            sample_count,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            TaskKind::SinusoidRegression { context, .. } => 1 + context.len(),
            TaskKind::GaussianBlobClassification { input_dim, .. } => *input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            TaskKind::SinusoidRegression { .. } => 1,
            TaskKind::GaussianBlobClassification { classes, .. } => *classes,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match &self.kind {
            TaskKind::SinusoidRegression { .. } => LossKind::Mse,
            TaskKind::GaussianBlobClassification { .. } => LossKind::SoftmaxCe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task {}: {msg}", self.task_id)));
        if self.sample_count == 0 {
            return bad("sample_count must be at least 1".into());
        }
        match &self.kind {
            TaskKind::SinusoidRegression { amplitude, phase, noise_std, context } => {
                if !(*noise_std >= 0.0) {
                    return bad(format!("noise_std must be >= 0, got {noise_std}"));
                }
                if !amplitude.is_finite() || !phase.is_finite() || context.iter().any(|c| !c.is_finite()) {
                    return bad("non-finite sinusoid parameter".into());
                }
            }
            TaskKind::GaussianBlobClassification { classes, input_dim, separation, noise_std, .. } => {
                if !(*noise_std >= 0.0) {
                    return bad(format!("noise_std must be >= 0, got {noise_std}"));
                }
                if *classes < 2 || classes > input_dim {
                    return bad(format!("need 2 <= classes <= input_dim, got {classes} classes in {input_dim} dims"));
                }
                if !separation.is_finite() {
                    return bad("non-finite separation".into());
                }
            }
        }
        Ok(())
    }
}

/// Draws `spec.sample_count` samples; columns are samples.
pub fn generate_task(spec: &TaskSpec, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    spec.validate()?;
    let n = spec.sample_count;
    let mut x = Matrix::zeros(spec.input_dim(), n);
    let mut y = Matrix::zeros(spec.output_dim(), n);
    match &spec.kind {
        TaskKind::SinusoidRegression { amplitude, phase, noise_std, context } => {
            for s in 0..n {
                let xv = rng.uniform_range(-1.0, 1.0);
                let noise = noise_std * rng.standard_normal();
                x.set(0, s, xv);
                for (i, c) in context.iter().enumerate() {
                    x.set(i + 1, s, *c);
                }
                y.set(0, s, amplitude * (std::f64::consts::TAU * (xv + phase)).sin() + noise);
            }
        }
        TaskKind::GaussianBlobClassification { classes, input_dim, separation, noise_std, label_shift } => {
            for s in 0..n {
                let label = rng.below(*classes);
                let center = (label + label_shift) % classes;
                for d in 0..*input_dim {
                    let mean = if d == center { *separation } else { 0.0 };
                    x.set(d, s, mean + noise_std * rng.standard_normal());
                }
                y.set(label, s, 1.0);
            }
        }
    }
    Ok((x, y))
}

/// All samples of one task before partitioning.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub task_id: TaskId,
    pub x: Matrix,
    pub y: Matrix,
}

impl TaskPool {
    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One client's slice of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub client_id: ClientId,
    pub task_id: TaskId,
    pub x: Matrix,
    pub y: Matrix,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of a Dirichlet split.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    /// Sorted by `(client_id, task_id)`; never contains an empty shard.
    pub shards: Vec<Shard>,
    /// `proportions[t][c]`: share of task `t` assigned to client `c` after
    /// thresholding and renormalization.
    pub proportions: Vec<Vec<f64>>,
}

const MAX_REDRAWS: usize = 100;

/// One thresholded, renormalized draw from `Dir(alpha * 1_m)`.
pub fn dirichlet_proportions(clients: usize, alpha: f64, threshold: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if clients == 0 {
        return Err(Error::Parameter("need at least one client".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    for _ in 0..MAX_REDRAWS {
        let draws: Vec<f64> = (0..clients).map(|_| rng.gamma(alpha)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            continue;
        }
        let kept: Vec<f64> = draws.iter().map(|g| g / total).map(|p| if p < threshold { 0.0 } else { p }).collect();
        let kept_total: f64 = kept.iter().sum();
        if kept_total > 0.0 {
            return Ok(kept.into_iter().map(|p| p / kept_total).collect());
        }
    }
    Err(Error::Infeasible(format!(
        "every client fell below the threshold in {MAX_REDRAWS} Dirichlet draws (alpha={alpha}, m={clients})"
    )))
}

/// Splits `total` into integer counts proportional to `shares` using
/// largest-remainder rounding; counts always sum to `total`.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = shares.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).filter(|&i| shares[i] > 0.0).collect();
    // Largest fractional part first; ties go to the lower index.
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits each task's pool across `clients` with proportions drawn from
/// `Dir(alpha)`. Shares below `threshold` are dropped before
/// renormalization; samples are shuffled, then cut into contiguous blocks.
pub fn dirichlet_partition(pools: &[TaskPool], clients: usize, alpha: f64, threshold: f64, rng: &mut Rng) -> Result<Partition> {
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = pools.iter().find(|p| !seen.insert(p.task_id)) {
        return Err(Error::Parameter(format!("task {} appears twice", dup.task_id)));
    }
    let mut shards = Vec::new();
    let mut proportions = Vec::with_capacity(pools.len());
    for pool in pools {
        let p = dirichlet_proportions(clients, alpha, threshold, rng)?;
        let counts = largest_remainder(pool.len(), &p);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        rng.shuffle(&mut order);
        let mut start = 0;
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let cols = &order[start..start + count];
            start += count;
            shards.push(Shard {
                client_id: ClientId(c as u32),
                task_id: pool.task_id,
                x: pool.x.select_columns(cols),
                y: pool.y.select_columns(cols),
            });
        }
        proportions.push(p);
    }
    shards.sort_by_key(|s| (s.client_id, s.task_id));
    Ok(Partition { shards, proportions })
}

/// Uniform minibatch: without replacement when `batch_size <= n`, with
/// replacement otherwise.
pub fn minibatch(shard: &Shard, batch_size: usize, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let n = shard.len();
    let cols = if batch_size <= n {
        rng.sample_indices(n, batch_size)
    } else {
        (0..batch_size).map(|_| rng.below(n)).collect()
    };
    Ok((shard.x.select_columns(&cols), shard.y.select_columns(&cols)))
}

/// Writes shards as CSV with header `client_id,task_id,x0..,y0..`.
pub fn write_shards_csv(shards: &[Shard], mut out: impl Write) -> Result<()> {
    let Some(first) = shards.first() else {
        writeln!(out, "client_id,task_id")?;
        return Ok(());
    };
    let (dx, dy) = (first.x.rows(), first.y.rows());
    if shards.iter().any(|s| s.x.rows() != dx || s.y.rows() != dy) {
        return Err(Error::Shape("shards with different dimensions cannot share one CSV".into()));
    }
    let mut header = vec!["client_id".to_string(), "task_id".to_string()];
    header.extend((0..dx).map(|i| format!("x{i}")));
    header.extend((0..dy).map(|i| format!("y{i}")));
    writeln!(out, "{}", header.join(","))?;
    for s in shards {
        for c in 0..s.len() {
            let mut row = vec![s.client_id.to_string(), s.task_id.to_string()];
            row.extend((0..dx).map(|r| s.x.get(r, c).to_string()));
            row.extend((0..dy).map(|r| s.y.get(r, c).to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Inverse of [`write_shards_csv`]. Rows sharing `(client_id, task_id)` are
/// regrouped into one shard, in first-appearance order.
pub fn read_shards_csv(input: impl BufRead) -> Result<Vec<Shard>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty shard CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "client_id" || cols[1] != "task_id" {
        return Err(Error::Format(format!("unexpected shard CSV header {header:?}")));
    }
    let dx = cols.iter().filter(|c| c.starts_with('x')).count();
    let dy = cols.iter().filter(|c| c.starts_with('y')).count();
    let mut groups: Vec<((ClientId, TaskId), Vec<Vec<f64>>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + dx + dy {
            return Err(Error::Format(format!("row {}: expected {} fields", lineno + 2, 2 + dx + dy)));
        }
        let parse_err = |f: &str| Error::Format(format!("row {}: bad value {f:?}", lineno + 2));
        let client = ClientId(fields[0].parse().map_err(|_| parse_err(fields[0]))?);
        let task = TaskId(fields[1].parse().map_err(|_| parse_err(fields[1]))?);
        let values = fields[2..].iter().map(|f| f.parse::<f64>().map_err(|_| parse_err(f))).collect::<Result<Vec<_>>>()?;
        match groups.iter_mut().find(|(k, _)| *k == (client, task)) {
            Some((_, rows)) => rows.push(values),
            None => groups.push(((client, task), vec![values])),
        }
    }
    groups
        .into_iter()
        .map(|((client_id, task_id), rows)| {
            let n = rows.len();
            let mut x = Matrix::zeros(dx, n);
            let mut y = Matrix::zeros(dy, n);
            for (c, row) in rows.iter().enumerate() {
                for r in 0..dx {
                    x.set(r, c, row[r]);
                }
                for r in 0..dy {
                    y.set(r, c, row[dx + r]);
                }
            }
            Ok(Shard { client_id, task_id, x, y })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools(tasks: u32, samples: usize, rng: &mut Rng) -> Vec<TaskPool> {
        (1..=tasks)
            .map(|t| {
                let spec = TaskSpec::sinusoid(t, 0.1 * t as f64, 0.05, samples);
                let (x, y) = generate_task(&spec, rng).unwrap();
                TaskPool { task_id: spec.task_id, x, y }
            })
            .collect()
    }

    #[test]
    fn noiseless_sinusoid_is_exact() {
        let spec = TaskSpec {
            task_id: TaskId(1),
            kind: TaskKind::SinusoidRegression { amplitude: 2.0, phase: 0.0, noise_std: 0.0, context: vec![] },
            sample_count: 50,
        };
        let (x, y) = generate_task(&spec, &mut Rng::new(1)).unwrap();
        for s in 0..50 {
            let xv = x.get(0, s);
            assert!((-1.0..=1.0).contains(&xv));
            assert_eq!(y.get(0, s), 2.0 * (std::f64::consts::TAU * xv).sin());
        }
    }

    #[test]
    fn context_is_appended() {
        let mut spec = TaskSpec::sinusoid(2, 0.5, 0.15, 4);
        spec.kind = TaskKind::SinusoidRegression { amplitude: 1.0, phase: 0.5, noise_std: 0.15, context: vec![0.0, 1.0] };
        let (x, _) = generate_task(&spec, &mut Rng::new(2)).unwrap();
        assert_eq!(x.rows(), 3);
        assert!((0..4).all(|s| x.get(1, s) == 0.0 && x.get(2, s) == 1.0));
    }

    #[test]
    fn noiseless_blobs_sit_on_centers() {
        let spec = TaskSpec::blobs(1, 3, 4, 2.0, 0.0, 1, 60);
        let (x, y) = generate_task(&spec, &mut Rng::new(3)).unwrap();
        let mut correct = 0;
        for s in 0..60 {
            let label = (0..3).find(|&c| y.get(c, s) == 1.0).unwrap();
            let point = x.column(s);
            // Nearest center among separation * e_((c + shift) mod classes).
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = (0..4).map(|d| (point[d] - if d == (a + 1) % 3 { 2.0 } else { 0.0 }).powi(2)).sum();
                    let db: f64 = (0..4).map(|d| (point[d] - if d == (b + 1) % 3 { 2.0 } else { 0.0 }).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(point.iter().filter(|&&v| v != 0.0).count(), 1);
            correct += usize::from(nearest == label);
        }
        assert_eq!(correct, 60);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(TaskSpec::sinusoid(1, 0.0, -0.1, 10).validate().is_err());
        assert!(TaskSpec::blobs(1, 5, 4, 1.0, 0.1, 0, 10).validate().is_err());
        assert!(TaskSpec::sinusoid(1, 0.0, 0.1, 0).validate().is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let mut rng = Rng::new(4);
        let pools = pools(3, 40, &mut rng);
        let part = dirichlet_partition(&pools, 1, 0.5, 0.01, &mut rng).unwrap();
        assert_eq!(part.shards.len(), 3);
        assert!(part.shards.iter().all(|s| s.len() == 40 && s.client_id == ClientId(0)));
    }

    #[test]
    fn huge_alpha_is_near_uniform() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let p = dirichlet_proportions(10, 1e6, 0.01, &mut rng).unwrap();
            assert!(p.iter().all(|v| (v - 0.1).abs() < 0.02 * 0.1), "{p:?}");
        }
        let pools = pools(2, 10_000, &mut rng);
        let part = dirichlet_partition(&pools, 10, 1e6, 0.01, &mut rng).unwrap();
        assert_eq!(part.shards.len(), 20);
        for s in &part.shards {
            let share = s.len() as f64 / 10_000.0;
            assert!((share - 0.1).abs() < 0.02 * 0.1, "{share}");
        }
    }

    #[test]
    fn tiny_alpha_with_many_clients_can_fail() {
        // With 500 clients every share is far below 0.5 unless one dominates.
        let mut rng = Rng::new(6);
        assert!(matches!(dirichlet_proportions(500, 1e6, 0.5, &mut rng), Err(Error::Infeasible(_))));
        assert!(dirichlet_proportions(0, 1.0, 0.01, &mut rng).is_err());
        assert!(dirichlet_proportions(3, 0.0, 0.01, &mut rng).is_err());
        assert!(dirichlet_proportions(3, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn partition_is_reproducible() {
        let make = || {
            let mut rng = Rng::new(7);
            let pools = pools(2, 30, &mut rng);
            dirichlet_partition(&pools, 10, 0.5, 0.01, &mut rng).unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(10, &[0.55, 0.45]), vec![6, 4]);
        assert_eq!(largest_remainder(3, &[1.0 / 3.0; 3]), vec![1, 1, 1]);
        assert_eq!(largest_remainder(7, &[0.0, 1.0]), vec![0, 7]);
    }

    #[test]
    fn minibatch_cases() {
        let mut rng = Rng::new(8);
        let spec = TaskSpec::sinusoid(1, 0.0, 0.1, 25);
        let (x, y) = generate_task(&spec, &mut rng).unwrap();
        let shard = Shard { client_id: ClientId(0), task_id: TaskId(1), x, y };

        let (bx, _) = minibatch(&shard, 25, &mut rng).unwrap();
        let mut got = bx.row(0).to_vec();
        let mut want = shard.x.row(0).to_vec();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);

        let a = minibatch(&shard, 5, &mut Rng::new(1)).unwrap();
        let b = minibatch(&shard, 5, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(minibatch(&shard, 40, &mut rng).unwrap().0.cols(), 40);
        assert!(minibatch(&shard, 0, &mut rng).is_err());

        let shard_mean = shard.x.row(0).iter().sum::<f64>() / 25.0;
        let draws = 4000;
        let mut total = 0.0;
        for _ in 0..draws {
            let (bx, _) = minibatch(&shard, 5, &mut rng).unwrap();
            total += bx.row(0).iter().sum::<f64>() / 5.0;
        }
        let spread = shard.x.row(0).iter().map(|v| (v - shard_mean).powi(2)).sum::<f64>() / 25.0;
        let se = (spread / 5.0 / draws as f64).sqrt();
        assert!((total / draws as f64 - shard_mean).abs() < 5.0 * se);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = Rng::new(9);
        let pools = pools(2, 12, &mut rng);
        let part = dirichlet_partition(&pools, 3, 1.0, 0.01, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_shards_csv(&part.shards, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("client_id,task_id,x0,y0\n"));
        let back = read_shards_csv(buf.as_slice()).unwrap();
        assert_eq!(back, part.shards);
    }
}
