//! Datasets, known/agnostic class splitting and the two non-IID partitioners.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Real};
use crate::rng::{self, SimRng};

/// Labelled samples with features in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f32>,
    pub labels: Vec<usize>,
    pub class_ids: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Array2<f32>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::contract("inputs and labels disagree in length"));
        }
        let class_ids = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self { inputs, labels, class_ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Width of the label space, `max label + 1`.
    pub fn label_space(&self) -> usize {
        self.class_ids.last().map_or(0, |c| c + 1)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset::new(self.inputs.select(Axis(0), idx), idx.iter().map(|&i| self.labels[i]).collect())
            .expect("selection keeps rows and labels aligned")
    }

    /// Indices of samples whose label is in `classes`, in dataset order.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        let set: BTreeSet<usize> = classes.iter().copied().collect();
        (0..self.len()).filter(|&i| set.contains(&self.labels[i])).collect()
    }

    pub fn batch<T: Real>(&self, idx: &[usize]) -> Batch<T> {
        let rows = self.inputs.select(Axis(0), idx).mapv(|v| T::lit(f64::from(v)));
        Batch { inputs: rows, labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

/// `num_classes` Gaussian clusters, unit isotropic noise around means on a sphere of
/// radius 3, globally min-max scaled into `[0, 1]`. Samples are grouped by class.
pub fn make_synthetic(num_classes: usize, per_class: usize, input_dim: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || per_class < 1 || input_dim < 1 {
        return Err(Error::contract("synthetic data needs C >= 2, m >= 1, d >= 1"));
    }
    let mut r = rng::stream(seed, "synthetic", 0);
    let mut means = Array2::<f64>::zeros((num_classes, input_dim));
    for mut row in means.rows_mut() {
        loop {
            row.mapv_inplace(|_| r.sample(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| 3.0 * v / norm);
                break;
            }
        }
    }
    let n = num_classes * per_class;
    let mut x = Array2::<f64>::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for k in 0..per_class {
            let mut row = x.row_mut(c * per_class + k);
            for (v, &m) in row.iter_mut().zip(means.row(c)) {
                let e: f64 = r.sample(StandardNormal);
                *v = m + e;
            }
            labels.push(c);
        }
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Dataset::new(x.mapv(|v| ((v - lo) / span) as f32), labels)
}

/// Splits `class_ids` into disjoint known and agnostic sets with
/// `|known| = round(fraction_known · C)`, kept within `[1, C − 1]`.
pub fn split_known_agnostic(class_ids: &[usize], fraction_known: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let c = class_ids.len();
    if c < 2 {
        return Err(Error::contract("need at least two classes to split"));
    }
    if !(fraction_known > 0.0 && fraction_known < 1.0) {
        return Err(Error::contract("fraction_known must lie in (0, 1)"));
    }
    let n_known = ((fraction_known * c as f64).round() as usize).clamp(1, c - 1);
    let mut shuffled = class_ids.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut rng::stream(seed, "class-split", 0));
    let mut known = shuffled[..n_known].to_vec();
    let mut agnostic = shuffled[n_known..].to_vec();
    known.sort_unstable();
    agnostic.sort_unstable();
    Ok((known, agnostic))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Each client holds exactly `s` classes.
    Sharding { s: usize },
    /// Per-class proportions drawn from `Dir(beta · 1_N)`.
    Dirichlet { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub strategy: Strategy,
    pub num_clients: usize,
    pub seed: u64,
}

/// One client's portion of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub owner_id: usize,
    pub indices: Vec<usize>,
    pub present_classes: BTreeSet<usize>,
}

impl Shard {
    fn build(owner_id: usize, mut indices: Vec<usize>, data: &Dataset) -> Self {
        indices.sort_unstable();
        let present_classes = indices.iter().map(|&i| data.labels[i]).collect();
        Self { owner_id, indices, present_classes }
    }
}

pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Shard>> {
    match spec.strategy {
        Strategy::Sharding { .. } => partition_sharding(data, spec),
        Strategy::Dirichlet { .. } => partition_dirichlet(data, spec),
    }
}

fn class_members(data: &Dataset) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in data.labels.iter().enumerate() {
        m.entry(y).or_default().push(i);
    }
    m
}

/// Class holders for sharding: after a seeded shuffle of the classes, client `i`
/// takes the `s` consecutive classes starting at position `i·s` (cyclically).
pub fn sharding_holders(classes: &[usize], s: usize, num_clients: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = classes.to_vec();
    order.shuffle(&mut rng::stream(seed, "sharding", 0));
    let c = order.len();
    (0..num_clients)
        .map(|i| (0..s).map(|j| order[(i * s + j) % c]).collect())
        .collect()
}

/// Sharding: every client receives exactly `s` classes; each class's samples are
/// cut into contiguous, near-equal blocks, one per holder in client order.
pub fn partition_sharding(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Shard>> {
    let Strategy::Sharding { s } = spec.strategy else {
        return Err(Error::contract("expected a sharding spec"));
    };
    let classes = &data.class_ids;
    if s == 0 || s > classes.len() {
        return Err(Error::contract(format!("s = {s} but only {} classes are available", classes.len())));
    }
    if spec.num_clients == 0 {
        return Err(Error::contract("need at least one client"));
    }
    let holders = sharding_holders(classes, s, spec.num_clients, spec.seed);
    let members = class_members(data);
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clients];
    for (&class, idx) in &members {
        let owners: Vec<usize> = (0..spec.num_clients).filter(|&i| holders[i].contains(&class)).collect();
        if owners.is_empty() {
            continue;
        }
        if idx.len() < owners.len() {
            return Err(Error::contract(format!(
                "class {class} has {} samples for {} holders",
                idx.len(),
                owners.len()
            )));
        }
        let (q, rem) = (idx.len() / owners.len(), idx.len() % owners.len());
        let mut start = 0;
        for (k, &owner) in owners.iter().enumerate() {
            let len = q + usize::from(k < rem);
            per_client[owner].extend_from_slice(&idx[start..start + len]);
            start += len;
        }
    }
    Ok(per_client.into_iter().enumerate().map(|(i, idx)| Shard::build(i, idx, data)).collect())
}

/// One draw from `Dir(beta · 1_n)` by normalizing independent `Gamma(beta, 1)`
/// variates.
pub fn sample_dirichlet(rng: &mut SimRng, beta: f64, n: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::contract(format!("Dirichlet beta {beta}: {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        Ok(draws.into_iter().map(|g| g / sum).collect())
    } else {
        // every variate underflowed
        Ok(vec![1.0 / n as f64; n])
    }
}

/// Dirichlet allocation: for each class (ascending) draw `p_c`, then hand the
/// class's samples out in order by cumulative quota. Empty shards take one sample
/// from the currently largest shard.
pub fn partition_dirichlet(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Shard>> {
    let Strategy::Dirichlet { beta } = spec.strategy else {
        return Err(Error::contract("expected a Dirichlet spec"));
    };
    if !(beta > 0.0) {
        return Err(Error::contract("beta must be > 0"));
    }
    let n = spec.num_clients;
    if n == 0 || data.len() < n {
        return Err(Error::contract(format!("{} samples cannot fill {n} shards", data.len())));
    }
    let mut r = rng::stream(spec.seed, "dirichlet", 0);
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); n];
    for idx in class_members(data).values() {
        let p = sample_dirichlet(&mut r, beta, n)?;
        let total = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (i, &pi) in p.iter().enumerate() {
            cum += pi;
            let end = if i + 1 == n { total } else { ((cum * total as f64).round() as usize).min(total) };
            let end = end.max(start);
            per_client[i].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = per_client.iter().position(Vec::is_empty) {
        let donor = (0..n)
            .max_by(|&a, &b| per_client[a].len().cmp(&per_client[b].len()).then(b.cmp(&a)))
            .unwrap();
        per_client[donor].sort_unstable();
        let moved = per_client[donor].pop().unwrap();
        per_client[empty].push(moved);
    }
    Ok(per_client.into_iter().enumerate().map(|(i, idx)| Shard::build(i, idx, data)).collect())
}

/// Stratified hold-out: per class, `round(test_fraction · n)` samples (at most
/// `n − 1`) go to the test side. Returns `(train, test)` index lists, sorted.
pub fn stratified_split(data: &Dataset, indices: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(data.labels[i]).or_default().push(i);
    }
    let mut r = rng::stream(seed, "holdout", 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut r);
        let n_test = ((test_fraction * idx.len() as f64).round() as usize).min(idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Reads `label,f_1,…,f_d` rows after a header line. Features are clamped to
/// `[0, 1]`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { path: path.into(), line: 1, msg: e.to_string() })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Csv { path: path.into(), line: 1, msg: "header needs a label and at least one feature".into() });
    }
    let width = headers.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Csv { path: path.into(), line, msg };
        if rec.len() != width {
            return Err(bad(format!("expected {width} columns, found {}", rec.len())));
        }
        let label: usize = rec[0].trim().parse().map_err(|_| bad(format!("label `{}` is not a class id", &rec[0])))?;
        labels.push(label);
        for field in rec.iter().skip(1) {
            let v: f32 = field.trim().parse().map_err(|_| bad(format!("feature `{field}` is not numeric")))?;
            if !v.is_finite() {
                return Err(bad(format!("feature `{field}` is not finite")));
            }
            values.push(v.clamp(0.0, 1.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Csv { path: path.into(), line: 1, msg: "no data rows".into() });
    }
    let inputs = Array2::from_shape_vec((labels.len(), width - 1), values).expect("row widths checked");
    Dataset::new(inputs, labels)
}

pub fn export_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((1..=data.input_dim()).map(|j| format!("f_{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (row, y) in data.inputs.rows().into_iter().zip(&data.labels) {
        write!(out, "{y}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Audit record of a partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub spec: PartitionSpec,
    pub clients: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub client_id: usize,
    /// Indices into the full dataset.
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
}
