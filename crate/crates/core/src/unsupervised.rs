//! Metric k-means, the iterative label/metric loop, Rand score, and
//! metric-aware Isomap.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::generative::{fit_gaussian_models_lenient, DEFAULT_LAMBDA_COV};
use crate::global_metric::{metric_sqrt_transform, uniform_combination};
use crate::linalg::{self, matrix_serde, Rows};
use crate::local_metric::{
    compute_all_local_metrics, interpolate_with_euclidean, MetricMatrix, Provenance, DEFAULT_EPS_REL,
};
use crate::par;

const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    /// Cluster means in the original coordinates, one row per cluster.
    #[serde(with = "matrix_serde")]
    pub centers: DMatrix<f64>,
    /// Sum of squared metric distances to the assigned centres.
    pub inertia: f64,
    pub metric: MetricMatrix,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

impl ClusteringResult {
    pub fn k(&self) -> usize {
        self.centers.nrows()
    }
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = linalg::sq_dist(center, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(rows: &Rows, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centers = vec![rows.row(rng.random_range(0..n)).to_vec()];
    let mut closest: Vec<f64> = (0..n).map(|i| linalg::sq_dist(rows.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = rows.row(pick).to_vec();
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(linalg::sq_dist(rows.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

struct LloydRun {
    assignments: Vec<usize>,
    inertia: f64,
    history: Vec<f64>,
}

fn lloyd(rows: &Rows, mut centers: Vec<Vec<f64>>) -> LloydRun {
    let n = rows.len();
    let k = centers.len();
    let dim = rows.dim();
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(&centers, rows.row(i));
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        // Empty clusters take the point farthest from its centre.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[assignments[i]] -= 1;
                    assignments[i] = c;
                    counts[c] = 1;
                    dists[i] = 0.0;
                    centers[c] = rows.row(i).to_vec();
                    changed = true;
                }
            }
        }
        let inertia: f64 = dists.iter().sum();
        history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        for i in 0..n {
            for (s, v) in sums[assignments[i]].iter_mut().zip(rows.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n).map(|i| linalg::sq_dist(rows.row(i), &centers[assignments[i]])).sum();
    history.push(inertia);
    LloydRun {
        assignments,
        inertia,
        history,
    }
}

/// Lloyd's algorithm under `metric`, run in the coordinates `Lx`. Each of
/// the `restarts` runs starts from k-means++ seeds drawn from one stream
/// seeded by `seed`; the lowest final inertia wins (earlier run on ties).
pub fn kmeans(
    x: &DMatrix<f64>,
    k: usize,
    metric: &MetricMatrix,
    seed: u64,
    restarts: usize,
) -> Result<ClusteringResult> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("k = {k} must lie in 1..={n}")));
    }
    if metric.dim() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: metric.dim(),
        });
    }
    let l = metric_sqrt_transform(metric)?.l;
    let rows = Rows::transformed(x, &l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(&rows, plus_plus_seeds(&rows, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let mut centers = DMatrix::zeros(k, x.ncols());
    let mut counts = vec![0usize; k];
    for (i, &a) in best.assignments.iter().enumerate() {
        counts[a] += 1;
        let mut row = centers.row_mut(a);
        row += x.row(i);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mut row = centers.row_mut(c);
            row /= counts[c] as f64;
        }
    }
    Ok(ClusteringResult {
        assignments: best.assignments,
        centers,
        inertia: best.inertia,
        metric: metric.clone(),
        inertia_history: best.history,
    })
}

/// Index of the nearest centre under `metric` for every row of `x`.
pub fn assign_to_centers(x: &DMatrix<f64>, centers: &DMatrix<f64>, metric: &MetricMatrix) -> Result<Vec<usize>> {
    if centers.ncols() != x.ncols() || metric.dim() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: centers.ncols(),
        });
    }
    if centers.nrows() == 0 {
        return Err(Error::EmptyInput("centers"));
    }
    let l = metric_sqrt_transform(metric)?.l;
    let rows = Rows::transformed(x, &l);
    let c_rows = Rows::transformed(centers, &l);
    let centers: Vec<Vec<f64>> = (0..c_rows.len()).map(|c| c_rows.row(c).to_vec()).collect();
    Ok((0..rows.len()).map(|i| nearest(&centers, rows.row(i)).0).collect())
}

/// Fraction of point pairs on which two labelings agree.
pub fn rand_score(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidParameter("the Rand score needs at least two points".into()));
    }
    let pairs = |c: u128| c * c.saturating_sub(1) / 2;
    let mut joint: BTreeMap<(usize, usize), u128> = BTreeMap::new();
    let mut ca: BTreeMap<usize, u128> = BTreeMap::new();
    let mut cb: BTreeMap<usize, u128> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let both: u128 = joint.values().map(|&c| pairs(c)).sum();
    let in_a: u128 = ca.values().map(|&c| pairs(c)).sum();
    let in_b: u128 = cb.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u128);
    let agree = total + 2 * both - in_a - in_b;
    Ok(agree as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterativeKmeansConfig {
    pub k: usize,
    pub outer_iters: usize,
    pub lambda_cov: f64,
    pub lambda_int: f64,
    /// Blend local metrics with the identity before averaging them.
    pub interpolate_locals: bool,
    pub eps_rel: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl IterativeKmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            outer_iters: 10,
            lambda_cov: DEFAULT_LAMBDA_COV,
            lambda_int: 0.0,
            interpolate_locals: true,
            eps_rel: DEFAULT_EPS_REL,
            seed,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterativeKmeansResult {
    pub clustering: ClusteringResult,
    pub metric: MetricMatrix,
    /// Metric-learning rounds run after the initial Euclidean clustering.
    pub rounds: usize,
    pub converged: bool,
}

/// Alternates clustering and metric learning: cluster labels stand in for
/// classes, Gaussians are fitted per cluster, and the mean local metric
/// drives the next clustering. Stops when labels repeat exactly.
pub fn iterative_metric_kmeans(x: &DMatrix<f64>, config: &IterativeKmeansConfig) -> Result<IterativeKmeansResult> {
    if config.outer_iters < 1 {
        return Err(Error::InvalidParameter("outer_iters must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.lambda_int) {
        return Err(Error::InvalidParameter("lambda_int must lie in [0, 1]".into()));
    }
    let dim = x.ncols();
    let identity = MetricMatrix::identity(dim);
    let mut clustering = kmeans(x, config.k, &identity, config.seed, config.restarts)?;
    if config.k == 1 {
        return Ok(IterativeKmeansResult {
            clustering,
            metric: identity.mark_degenerate(),
            rounds: 0,
            converged: true,
        });
    }
    let mut metric = identity;
    let mut rounds = 0;
    let mut converged = false;
    for round in 0..config.outer_iters {
        let ds = LabeledDataset::new(x.clone(), clustering.assignments.clone(), config.k)?;
        let (ms, skipped) = fit_gaussian_models_lenient(&ds, config.lambda_cov, 2)?;
        if !skipped.is_empty() {
            log::info!("round {round}: clusters {skipped:?} too small to fit");
        }
        if ms.class_count() < 2 {
            log::warn!("fewer than two usable clusters; keeping the current metric");
            break;
        }
        let mut locals = compute_all_local_metrics(&ds, &ms, config.eps_rel)?;
        if config.interpolate_locals && config.lambda_int > 0.0 {
            locals = locals
                .iter()
                .map(|m| interpolate_with_euclidean(m, config.lambda_int))
                .collect::<Result<_>>()?;
        }
        metric = uniform_combination(&locals)?.with_provenance(Provenance::Global {
            method: "UNI-cluster".into(),
        });
        if !config.interpolate_locals && config.lambda_int > 0.0 {
            metric = interpolate_with_euclidean(&metric, config.lambda_int)?;
        }
        let next = kmeans(x, config.k, &metric, config.seed, config.restarts)?;
        rounds = round + 1;
        let same = rand_score(&next.assignments, &clustering.assignments)? == 1.0;
        clustering = next;
        if same {
            converged = true;
            break;
        }
    }
    Ok(IterativeKmeansResult {
        clustering,
        metric,
        rounds,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEntry {
    pub lambda_cov: f64,
    pub lambda_int: f64,
    pub validation_rand: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferTuneResult {
    pub best: TransferEntry,
    pub grid: Vec<TransferEntry>,
    pub result: IterativeKmeansResult,
}

/// For every `(λ_cov, λ_int)`: cluster `train`, assign `validation` to the
/// nearest learned centre, and score against the validation labels. The
/// highest Rand wins; ties go to smaller `λ_int`, then smaller `λ_cov`.
pub fn cluster_transfer_tune(
    train: &LabeledDataset,
    validation: &LabeledDataset,
    grid: &[(f64, f64)],
    base: &IterativeKmeansConfig,
) -> Result<TransferTuneResult> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("parameter grid is empty".into()));
    }
    let mut order = grid.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    let mut entries = Vec::new();
    let mut best: Option<(TransferEntry, IterativeKmeansResult)> = None;
    for (lambda_cov, lambda_int) in order {
        let cfg = IterativeKmeansConfig {
            lambda_cov,
            lambda_int,
            ..base.clone()
        };
        let res = iterative_metric_kmeans(train.features(), &cfg)?;
        let assigned = assign_to_centers(validation.features(), &res.clustering.centers, &res.metric)?;
        let entry = TransferEntry {
            lambda_cov,
            lambda_int,
            validation_rand: rand_score(&assigned, validation.labels())?,
        };
        entries.push(entry.clone());
        if best.as_ref().is_none_or(|b| entry.validation_rand > b.0.validation_rand) {
            best = Some((entry, res));
        }
    }
    let (best, result) = best.expect("grid is non-empty");
    Ok(TransferTuneResult {
        best,
        grid: entries,
        result,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    /// One row per embedded point.
    #[serde(with = "matrix_serde")]
    pub coordinates: DMatrix<f64>,
    /// `1 − r²` between geodesic and embedded distances.
    pub residual_variance: f64,
    pub neighbor_count: usize,
    /// Original indices of the embedded points (the largest connected
    /// component of the neighbour graph).
    pub indices: Vec<usize>,
    pub excluded: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapItem(0.0, source));
    while let Some(HeapItem(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapItem(nd, v));
            }
        }
    }
    dist
}

/// Shortest-path distances on the symmetrised k-NN graph whose edges have
/// length `√((x − x')ᵀM(x − x'))`, restricted to the largest connected
/// component. Returns the distances and the component's original indices.
pub fn geodesic_distances(
    x: &DMatrix<f64>,
    metric: &MetricMatrix,
    n_neighbors: usize,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two points".into()));
    }
    if n_neighbors == 0 {
        return Err(Error::InvalidParameter("n_neighbors must be positive".into()));
    }
    if metric.dim() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: metric.dim(),
        });
    }
    let l = metric_sqrt_transform(metric)?.l;
    let rows = Rows::transformed(x, &l);
    let k = n_neighbors.min(n - 1);
    let knn = par::map_range(n, |i| {
        let dists = (0..n)
            .filter(|&j| j != i)
            .map(|j| (linalg::sq_dist(rows.row(i), rows.row(j)), j))
            .collect();
        crate::classify::k_smallest(dists, k)
    });
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, list) in knn.iter().enumerate() {
        for &(d, j) in list {
            let w = d.sqrt();
            if !adj[i].iter().any(|e| e.0 == j) {
                adj[i].push((j, w));
            }
            if !adj[j].iter().any(|e| e.0 == i) {
                adj[j].push((i, w));
            }
        }
    }
    // largest connected component, lowest index on ties
    let mut comp = vec![usize::MAX; n];
    let mut best: Vec<usize> = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let mut members = vec![s];
        comp[s] = s;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = s;
                    members.push(v);
                    queue.push_back(v);
                }
            }
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    best.sort_unstable();
    let m = best.len();
    let mut local = vec![usize::MAX; n];
    for (a, &i) in best.iter().enumerate() {
        local[i] = a;
    }
    let sub_adj: Vec<Vec<(usize, f64)>> = best
        .iter()
        .map(|&i| adj[i].iter().map(|&(j, w)| (local[j], w)).collect())
        .collect();
    let rows_out = par::map_range(m, |s| dijkstra(&sub_adj, s));
    let mut g = DMatrix::zeros(m, m);
    for (s, row) in rows_out.iter().enumerate() {
        for (t, &d) in row.iter().enumerate() {
            g[(s, t)] = d;
        }
    }
    // average the two directions to remove summation-order noise
    Ok((linalg::symmetrize(&g), best))
}

/// Classical MDS of a distance matrix: top `d` eigenpairs of the doubly
/// centred `−½D²`, coordinates `v·√λ`, each axis signed so its
/// largest-magnitude entry is positive.
pub fn classical_mds(dist: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let n = dist.nrows();
    let sq = dist.map(|v| v * v);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).mean()).collect();
    let total = sq.mean();
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + total);
        }
    }
    let (values, vectors) = linalg::sym_eigen_desc(&linalg::symmetrize(&b));
    let top = values.first().copied().unwrap_or(0.0);
    let positive = values.iter().filter(|&&v| v > 1e-12 * top.max(f64::MIN_POSITIVE)).count();
    if d == 0 || d > positive {
        return Err(Error::EmbeddingDimension {
            requested: d,
            available: positive,
        });
    }
    let mut coords = DMatrix::zeros(n, d);
    for a in 0..d {
        let mut col = vectors.column(a).clone_owned();
        let pivot = col.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        coords.set_column(a, &(col * values[a].sqrt()));
    }
    Ok(coords)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if saa == sbb { 1.0 } else { 0.0 };
    }
    sab / (saa * sbb).sqrt()
}

/// Isomap under a Mahalanobis metric.
pub fn isomap_embed(x: &DMatrix<f64>, metric: &MetricMatrix, n_neighbors: usize, d: usize) -> Result<Embedding> {
    let (geo, indices) = geodesic_distances(x, metric, n_neighbors)?;
    let excluded = x.nrows() - indices.len();
    if excluded > 0 {
        log::warn!("neighbour graph is disconnected; embedding {} of {} points", indices.len(), x.nrows());
    }
    let coords = classical_mds(&geo, d)?;
    let m = indices.len();
    let mut g = Vec::with_capacity(m * (m - 1) / 2);
    let mut e = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            g.push(geo[(i, j)]);
            let diff = coords.row(i) - coords.row(j);
            e.push(diff.norm());
        }
    }
    let r = correlation(&g, &e);
    Ok(Embedding {
        coordinates: coords,
        residual_variance: 1.0 - r * r,
        neighbor_count: n_neighbors,
        indices,
        excluded,
    })
}

/// Writes `id,x1,…,xd[,label]` rows.
pub fn write_points_csv<W: Write>(
    writer: W,
    ids: &[usize],
    coordinates: &DMatrix<f64>,
    labels: Option<&[usize]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend((1..=coordinates.ncols()).map(|j| format!("x{j}")));
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for (r, &id) in ids.iter().enumerate() {
        let mut rec = vec![id.to_string()];
        rec.extend(coordinates.row(r).iter().map(|v| format!("{v}")));
        if let Some(l) = labels {
            rec.push(l[r].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv writer>".into(),
        source: e,
    })?;
    Ok(())
}
