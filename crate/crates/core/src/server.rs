//! Server side: SVD signatures, one-shot clustering of known clients, cluster
//! learnGene aggregation, and routing/initialization of agnostic clients.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genecraft::{GeneOrigin, LearnGene};
use crate::nn::{Layer, LayeredParams, MlpSpec};
use crate::rng;

/// Flattened top-`d` left singular vectors of an `m0 × input_dim` subsample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub u: Vec<f64>,
    pub d: usize,
    pub m0: usize,
    /// Set when the input had rank below `d` and zero columns were padded in.
    pub rank_deficient: bool,
}

impl Signature {
    /// Column `j` of `U_d`.
    pub fn column(&self, j: usize) -> &[f64] {
        &self.u[j * self.m0..(j + 1) * self.m0]
    }

    pub fn distance(&self, other: &[f64]) -> Result<f64> {
        if self.u.len() != other.len() {
            return Err(Error::contract(format!("signature lengths {} and {}", self.u.len(), other.len())));
        }
        Ok(self.u.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    /// Bytes on the wire at `bits` per value.
    pub fn param_count(&self) -> usize {
        self.u.len()
    }
}

/// A seeded subsample of `m0` rows from `indices` (all rows plus zero padding when
/// the shard is smaller).
pub fn signature_input(data: &Dataset, indices: &[usize], m0: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "signature-rows", 0);
    let picked: Vec<usize> = if indices.len() > m0 {
        index::sample(&mut r, indices.len(), m0).into_iter().map(|k| indices[k]).collect()
    } else {
        indices.to_vec()
    };
    let mut x = Array2::<f64>::zeros((m0, data.input_dim()));
    for (row, &i) in x.rows_mut().into_iter().zip(&picked) {
        for (dst, &v) in row.into_iter().zip(data.inputs.row(i)) {
            *dst = f64::from(v);
        }
    }
    x
}

/// Thin SVD by one-sided Jacobi rotations: returns `(U, σ)` with columns sorted by
/// decreasing singular value. `U` has `min(m, n)` columns; columns for zero singular
/// values are zero.
pub fn jacobi_svd(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let (m, n) = x.dim();
    let mut a = x.clone();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (a.column(p), a.column(q));
                let alpha = cp.dot(&cp);
                let beta = cq.dot(&cq);
                let gamma = cp.dot(&cq);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (ap, aq) = (a[[i, p]], a[[i, q]]);
                    a[[i, p]] = c * ap - s * aq;
                    a[[i, q]] = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = a.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let k = m.min(n);
    let top = norms.iter().copied().fold(0.0, f64::max);
    let mut u = Array2::<f64>::zeros((m, k));
    let mut sigma = vec![0.0; k];
    for (dst, &src) in order.iter().take(k).enumerate() {
        if norms[src] > top * 1e-12 && norms[src] > 0.0 {
            sigma[dst] = norms[src];
            u.column_mut(dst).assign(&(&a.column(src) / norms[src]));
        }
    }
    // one modified Gram-Schmidt pass to polish orthogonality
    for j in 0..k {
        if sigma[j] == 0.0 {
            continue;
        }
        for i in 0..j {
            if sigma[i] == 0.0 {
                continue;
            }
            let proj = u.column(i).dot(&u.column(j));
            let ui = u.column(i).to_owned();
            u.column_mut(j).scaled_add(-proj, &ui);
        }
        let nrm = u.column(j).dot(&u.column(j)).sqrt();
        u.column_mut(j).mapv_inplace(|v| v / nrm);
    }
    (u, sigma)
}

/// Signature of `x`: the top `d` left singular vectors, each column's
/// largest-magnitude entry made positive, flattened column-major.
pub fn svd_signature(x: &Array2<f64>, d: usize) -> Result<Signature> {
    let (m0, n) = x.dim();
    if d == 0 || d > m0.min(n) {
        return Err(Error::contract(format!("d = {d} exceeds min({m0}, {n})")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("signature input".into()));
    }
    let (u, sigma) = jacobi_svd(x);
    let mut out = Vec::with_capacity(m0 * d);
    let mut rank_deficient = false;
    for j in 0..d {
        if sigma[j] == 0.0 {
            rank_deficient = true;
            out.extend(std::iter::repeat_n(0.0, m0));
            continue;
        }
        let col = u.column(j);
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        out.extend(col.iter().map(|v| sign * v));
    }
    Ok(Signature { u: out, d, m0, rank_deficient })
}

/// Client → cluster assignment plus the cluster means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub assignments: BTreeMap<usize, usize>,
    pub means: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

fn mean_of(points: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    for p in points {
        for (a, v) in m.iter_mut().zip(*p) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= points.len() as f64);
    m
}

/// K-means with k-means++ seeding. `ids[i]` names the client owning
/// `signatures[i]`. Clusters are numbered by their lowest-indexed member.
pub fn cluster_known(ids: &[usize], signatures: &[Signature], k: usize, seed: u64) -> Result<RoutingTable> {
    let n = signatures.len();
    if ids.len() != n {
        return Err(Error::contract("one id per signature"));
    }
    if k == 0 || k > n {
        return Err(Error::contract(format!("K = {k} with {n} clients")));
    }
    let pts: Vec<&[f64]> = signatures.iter().map(|s| s.u.as_slice()).collect();
    if pts.iter().any(|p| p.len() != pts[0].len()) {
        return Err(Error::contract("signature lengths differ"));
    }
    let mut r = rng::stream(seed, "kmeans", 0);
    let mut centers: Vec<Vec<f64>> = vec![pts[r.random_range(0..n)].to_vec()];
    while centers.len() < k {
        let d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centers[nearest(p, &centers)])).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = r.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            r.random_range(0..n)
        };
        centers.push(pts[pick].to_vec());
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        for (a, p) in assign.iter_mut().zip(&pts) {
            *a = nearest(p, &centers);
        }
        for c in 0..k {
            if !assign.contains(&c) {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(pts[i], &centers[assign[i]]);
                        let dj = sq_dist(pts[j], &centers[assign[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap();
                assign[far] = c;
                centers[c] = pts[far].to_vec();
            }
        }
        let mut shift: f64 = 0.0;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64]> = (0..n).filter(|&i| assign[i] == c).map(|i| pts[i]).collect();
            if members.is_empty() {
                continue;
            }
            let m = mean_of(&members);
            shift = shift.max(sq_dist(&m, center).sqrt());
            *center = m;
        }
        if shift < 1e-6 {
            break;
        }
    }

    // canonical numbering: order clusters by their first member
    let mut relabel: Vec<Option<usize>> = vec![None; k];
    let mut next = 0;
    for &a in &assign {
        if relabel[a].is_none() {
            relabel[a] = Some(next);
            next += 1;
        }
    }
    let mut means = vec![Vec::new(); next];
    for c in 0..k {
        if let Some(new) = relabel[c] {
            let members: Vec<&[f64]> = (0..n).filter(|&i| assign[i] == c).map(|i| pts[i]).collect();
            means[new] = mean_of(&members);
        }
    }
    let assignments = ids.iter().zip(&assign).map(|(&id, &a)| (id, relabel[a].unwrap())).collect();
    Ok(RoutingTable { assignments, means })
}

/// Server-held state of one cluster.
#[derive(Clone, Debug)]
pub struct ClusterState {
    pub cluster_id: usize,
    pub model: LayeredParams,
    pub gene: LearnGene,
    pub mean: Vec<f64>,
    pub members: usize,
}

impl ClusterState {
    /// A cluster whose gene initially spans the whole model.
    pub fn new(cluster_id: usize, model: LayeredParams, mean: Vec<f64>, members: usize) -> Result<Self> {
        let gene = LearnGene::from_model(&model, &vec![true; model.len()], GeneOrigin { owner: cluster_id, round: 0 })?;
        Ok(Self { cluster_id, model, gene, mean, members })
    }
}

/// Per-layer unweighted mean over the genes covering that layer (summed in
/// client-id order); uncovered layers keep the previous cluster model.
pub fn aggregate_learngene(genes: &[LearnGene], prev: &ClusterState, round: usize) -> Result<ClusterState> {
    if genes.is_empty() {
        return Ok(prev.clone());
    }
    let mut sorted: Vec<&LearnGene> = genes.iter().collect();
    sorted.sort_by_key(|g| g.origin.owner);
    for g in &sorted {
        for l in g.tensors().layers() {
            let want = prev.model.get(&l.id).ok_or_else(|| {
                Error::contract(format!("client {}: layer `{}` is not in the architecture", g.origin.owner, l.id))
            })?;
            if want.shape() != l.tensor.shape() {
                return Err(Error::contract(format!(
                    "client {}: layer `{}` has shape {:?}, expected {:?}",
                    g.origin.owner,
                    l.id,
                    l.tensor.shape(),
                    want.shape()
                )));
            }
        }
    }
    let mut model = prev.model.clone();
    let mut covered = vec![false; model.len()];
    for (li, layer) in model.layers_mut().iter_mut().enumerate() {
        let cover: Vec<_> = sorted.iter().filter_map(|g| g.tensors().get(&layer.id)).collect();
        if cover.is_empty() {
            continue;
        }
        let mut acc = cover[0].clone();
        for t in &cover[1..] {
            acc += *t;
        }
        let count = cover.len() as f32;
        acc.mapv_inplace(|v| v / count);
        layer.tensor = acc;
        covered[li] = true;
    }
    let gene = LearnGene::from_model(&model, &covered, GeneOrigin { owner: prev.cluster_id, round })?;
    Ok(ClusterState { model, gene, ..prev.clone() })
}

/// `argmin_k ‖u − u_k‖`, ties to the lowest cluster id.
pub fn nearest_cluster(u: &Signature, clusters: &[ClusterState]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for c in clusters {
        let d = u.distance(&c.mean)?;
        best = match best {
            Some((id, bd)) if bd < d || (bd == d && id < c.cluster_id) => Some((id, bd)),
            _ => Some((c.cluster_id, d)),
        };
    }
    best.ok_or_else(|| Error::contract("no clusters to route to"))
}

/// Routes `u`, folds it into the cluster's running mean, and returns the cluster id
/// with the gene handed to the newcomer.
pub fn admit_agnostic(u: &Signature, clusters: &mut [ClusterState]) -> Result<(usize, LearnGene)> {
    let (id, _) = nearest_cluster(u, clusters)?;
    let c = clusters.iter_mut().find(|c| c.cluster_id == id).unwrap();
    let n = c.members as f64;
    for (m, &v) in c.mean.iter_mut().zip(&u.u) {
        *m = (n * *m + v) / (n + 1.0);
    }
    c.members += 1;
    Ok((id, c.gene.clone()))
}

/// `[θ₀ ; Θ_G]`: gene layers copied, the rest drawn from the fan-in initializer.
pub fn init_agnostic(gene: &LearnGene, arch: &MlpSpec, seed: u64) -> Result<LayeredParams> {
    let shapes = arch.layer_shapes();
    for id in gene.layer_ids() {
        if !shapes.iter().any(|(sid, _)| *sid == id) {
            return Err(Error::contract(format!("gene layer `{id}` is not in the architecture")));
        }
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, (id, shape)) in shapes.iter().enumerate() {
        match gene.tensors().get(id) {
            Some(t) if t.shape() == shape.as_slice() => layers.push(Layer::new(id.clone(), t.clone())),
            Some(t) => {
                return Err(Error::shape(id.clone(), format!("gene has {:?}, architecture {:?}", t.shape(), shape)));
            }
            None => layers.push(Layer::new(id.clone(), arch.init_unit(i, seed))),
        }
    }
    LayeredParams::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn sig(v: &[f64]) -> Signature {
        Signature { u: v.to_vec(), d: 1, m0: v.len(), rank_deficient: false }
    }

    fn cluster(id: usize, mean: &[f64], members: usize) -> ClusterState {
        let model = MlpSpec::new(2, vec![], 2).init(id as u64);
        ClusterState::new(id, model, mean.to_vec(), members).unwrap()
    }

    #[test]
    fn identity_spectrum() {
        let s = svd_signature(&Array2::eye(5), 2).unwrap();
        for j in 0..2 {
            let col = s.column(j);
            assert_eq!(col.iter().filter(|v| (**v - 1.0).abs() < 1e-12).count(), 1);
            assert_eq!(col.iter().filter(|v| v.abs() < 1e-12).count(), 4);
        }
        assert!(!s.rank_deficient);
    }

    #[test]
    fn rank_deficiency_pads_and_flags() {
        let mut x = Array2::<f64>::zeros((4, 3));
        x[[0, 0]] = 2.0;
        let s = svd_signature(&x, 2).unwrap();
        assert!(s.rank_deficient);
        assert!(s.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(s.column(0), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn singleton_clusters() {
        let sigs: Vec<Signature> = (0..4).map(|i| sig(&[i as f64, (i * i) as f64])).collect();
        let t = cluster_known(&[10, 11, 12, 13], &sigs, 4, 3).unwrap();
        let mut seen: Vec<usize> = t.assignments.values().copied().collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        for (i, s) in sigs.iter().enumerate() {
            assert_eq!(t.means[t.assignments[&(10 + i)]], s.u);
        }
    }

    #[test]
    fn duplicate_signatures_still_fill_every_cluster() {
        let sigs = vec![sig(&[1.0]), sig(&[1.0]), sig(&[1.0])];
        let t = cluster_known(&[0, 1, 2], &sigs, 2, 0).unwrap();
        assert_eq!(t.means.len(), 2);
    }

    #[test]
    fn aggregation_examples() {
        let prev = cluster(0, &[0.0], 1);
        assert_eq!(aggregate_learngene(&[], &prev, 1).unwrap().model, prev.model);

        let mk = |owner: usize, v: f32| {
            let mut m = prev.model.clone();
            m.set("fc1.bias", arr1(&[v, v]).into_dyn()).unwrap();
            LearnGene::from_model(&m, &[false, true], GeneOrigin { owner, round: 1 }).unwrap()
        };
        let out = aggregate_learngene(&[mk(1, 3.0), mk(0, 1.0)], &prev, 1).unwrap();
        assert_eq!(out.model.get("fc1.bias").unwrap().as_slice().unwrap(), &[2.0, 2.0]);
        assert_eq!(out.model.get("fc1.weight"), prev.model.get("fc1.weight"));
        assert_eq!(out.gene.layer_ids(), vec!["fc1.bias".to_string()]);
    }

    #[test]
    fn aggregation_rejects_foreign_shapes() {
        let prev = cluster(0, &[0.0], 1);
        let other = MlpSpec::new(3, vec![], 2).init::<f32>(0);
        let g = LearnGene::from_model(&other, &[true, false], GeneOrigin { owner: 4, round: 1 }).unwrap();
        let msg = aggregate_learngene(&[g], &prev, 1).unwrap_err().to_string();
        assert!(msg.contains("client 4") && msg.contains("fc1.weight"), "{msg}");
    }

    #[test]
    fn routing_examples() {
        let cs = vec![cluster(0, &[0.0], 1), cluster(1, &[2.0], 1), cluster(2, &[5.0], 1)];
        assert_eq!(nearest_cluster(&sig(&[5.0]), &cs).unwrap(), (2, 0.0));
        assert_eq!(nearest_cluster(&sig(&[1.0]), &cs).unwrap().0, 0);
        let rev: Vec<ClusterState> = cs.iter().rev().cloned().collect();
        assert_eq!(nearest_cluster(&sig(&[1.0]), &rev).unwrap().0, 0);
        assert!(nearest_cluster(&sig(&[1.0, 2.0]), &cs).is_err());
    }

    #[test]
    fn admission_updates_running_mean() {
        let mut cs = vec![cluster(0, &[0.0], 1)];
        admit_agnostic(&sig(&[2.0]), &mut cs).unwrap();
        assert_eq!((cs[0].mean.clone(), cs[0].members), (vec![1.0], 2));
        admit_agnostic(&sig(&[1.0]), &mut cs).unwrap();
        assert_eq!((cs[0].mean.clone(), cs[0].members), (vec![1.0], 3));
    }

    #[test]
    fn init_agnostic_isolates_seeds() {
        let arch = MlpSpec::new(4, vec![3], 2);
        let base = arch.init::<f32>(1);
        let full = LearnGene::from_model(&base, &[true; 4], GeneOrigin { owner: 0, round: 0 }).unwrap();
        assert_eq!(init_agnostic(&full, &arch, 99).unwrap(), base);

        let g = LearnGene::from_model(&base, &[false, false, false, true], GeneOrigin { owner: 0, round: 0 }).unwrap();
        let a = init_agnostic(&g, &arch, 5).unwrap();
        let b = init_agnostic(&g, &arch, 6).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            if la.id == "fc2.bias" {
                assert_eq!(la.tensor, lb.tensor);
                assert_eq!(&la.tensor, base.get("fc2.bias").unwrap());
            } else {
                assert_ne!(la.tensor, lb.tensor);
            }
        }
    }
}
