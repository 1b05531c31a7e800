//! LearnGene mathematics: empirical Fisher diagonal, global min-max normalization,
//! the elastic keep-local mask, per-layer update-similarity scores and top-γ gene
//! extraction.

use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, LayeredParams, ParamMask, Real, Regularizer};

/// Diagonal of the empirical Fisher information, one entry per scalar parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag<T> {
    pub values: LayeredParams<T>,
}

/// Fisher values mapped to `[0, 1]` by a single global min-max.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFisher<T> {
    pub values: LayeredParams<T>,
}

/// `keep_local[j]` is true where the normalized Fisher value is `<= epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticMask {
    pub keep_local: ParamMask,
    pub epsilon: f64,
}

/// Empirical Fisher: the mean over every sample of the squared per-sample gradient
/// of `log p(y | x; θ)`. Each sample is differentiated alone.
pub fn fisher_diag<T: Real>(model: &LayeredParams<T>, batches: &[Batch<T>]) -> Result<FisherDiag<T>> {
    let total: usize = batches.iter().map(Batch::len).sum();
    if total == 0 {
        return Err(Error::contract("Fisher estimate needs at least one sample"));
    }
    let mut acc = model.zeros_like();
    let none = Regularizer::none();
    for batch in batches {
        for i in 0..batch.len() {
            let one = batch.select(&[i]);
            let (_, g) = nn::loss_and_grad(model, &one, &none)?;
            for (a, g) in acc.layers_mut().iter_mut().zip(g.layers()) {
                a.tensor.zip_mut_with(&g.tensor, |a, &g| *a += g * g);
            }
        }
    }
    let n = T::from_usize(total).unwrap();
    for a in acc.layers_mut() {
        a.tensor.mapv_inplace(|v| v / n);
    }
    Ok(FisherDiag { values: acc })
}

/// `(F − min F) / (max F − min F)` over all scalars of all layers. A constant input
/// maps to all zeros.
pub fn normalize_fisher<T: Real>(fisher: &FisherDiag<T>) -> Result<NormalizedFisher<T>> {
    if !fisher.values.all_finite() {
        return Err(Error::NonFinite("Fisher diagonal".into()));
    }
    let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
    for l in fisher.values.layers() {
        for &v in l.tensor.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let mut values = fisher.values.clone();
    let span = hi - lo;
    for l in values.layers_mut() {
        if span > T::zero() {
            l.tensor.mapv_inplace(|v| ((v - lo) / span).min(T::one()));
        } else {
            l.tensor.fill(T::zero());
        }
    }
    Ok(NormalizedFisher { values })
}

pub fn elastic_mask<T: Real>(fhat: &NormalizedFisher<T>, epsilon: f64) -> Result<ElasticMask> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let flat: Vec<Vec<f64>> = fhat
        .values
        .layers()
        .iter()
        .map(|l| l.tensor.iter().map(|v| v.as_f64()).collect())
        .collect();
    let keep_local = ParamMask::from_fn(&fhat.values, |li, j| flat[li][j] <= epsilon);
    Ok(ElasticMask { keep_local, epsilon })
}

/// The elastic composition θ′: `previous` where the mask keeps local, `cluster`
/// everywhere else.
pub fn compose_elastic<T: Real>(
    previous: &LayeredParams<T>,
    cluster: &LayeredParams<T>,
    mask: &ElasticMask,
) -> Result<LayeredParams<T>> {
    previous.ensure_congruent(cluster)?;
    mask.keep_local.ensure_congruent(previous)?;
    let mut out = cluster.clone();
    for ((o, p), (_, bits)) in out.layers_mut().iter_mut().zip(previous.layers()).zip(mask.keep_local.layers()) {
        for ((o, &p), &keep) in o.tensor.iter_mut().zip(p.tensor.iter()).zip(bits) {
            if keep {
                *o = p;
            }
        }
    }
    Ok(out)
}

/// Normalized per-layer scores; `scores` sums to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl LayerScores {
    pub fn from_values(ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::contract("one score per layer required"));
        }
        Ok(Self { ids, scores })
    }

    /// Reverses the ranking: `max − ξ`, renormalized.
    pub fn inverted(&self) -> Self {
        let max = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { ids: self.ids.clone(), scores: normalize_to_unit_sum(self.scores.iter().map(|s| max - s).collect()) }
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|i| i == id).map(|i| self.scores[i])
    }
}

fn normalize_to_unit_sum(raw: Vec<f64>) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = -min.min(0.0);
    let shifted: Vec<f64> = raw.iter().map(|r| r + shift).collect();
    let sum: f64 = shifted.iter().sum();
    if sum > 0.0 {
        shifted.iter().map(|s| s / sum).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

pub fn cosine(id: &str, a: ArrayViewD<'_, f64>, b: ArrayViewD<'_, f64>) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateCosine(id.to_string()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-layer score `cos(θ_l, θ̃_l) / dim(θ_l)`, shifted to be nonnegative and
/// normalized to sum to one.
pub fn layer_scores<T: Real>(current: &LayeredParams<T>, previous: &LayeredParams<T>) -> Result<LayerScores> {
    layer_scores_with(current, previous, cosine)
}

/// As [`layer_scores`] with a caller-supplied similarity in place of cosine.
pub fn layer_scores_with<T: Real>(
    current: &LayeredParams<T>,
    previous: &LayeredParams<T>,
    similarity: impl Fn(&str, ArrayViewD<'_, f64>, ArrayViewD<'_, f64>) -> Result<f64>,
) -> Result<LayerScores> {
    current.ensure_congruent(previous)?;
    let mut raw = Vec::with_capacity(current.len());
    for (c, p) in current.layers().iter().zip(previous.layers()) {
        let a = c.tensor.mapv(|v| v.as_f64());
        let b = p.tensor.mapv(|v| v.as_f64());
        raw.push(similarity(&c.id, a.view(), b.view())? / c.dim() as f64);
    }
    Ok(LayerScores { ids: current.ids().map(String::from).collect(), scores: normalize_to_unit_sum(raw) })
}

/// Where a gene came from: the uploading client (or cluster, for aggregated genes)
/// and the round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneOrigin {
    pub owner: usize,
    pub round: usize,
}

/// A subset of layer units retained for exchange or inheritance.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnGene<T = f32> {
    mask: Vec<(String, bool)>,
    tensors: LayeredParams<T>,
    pub origin: GeneOrigin,
}

impl<T: Real> LearnGene<T> {
    pub fn from_parts(mask: Vec<(String, bool)>, tensors: LayeredParams<T>, origin: GeneOrigin) -> Result<Self> {
        let kept: Vec<&str> = mask.iter().filter(|(_, b)| *b).map(|(id, _)| id.as_str()).collect();
        let have: Vec<&str> = tensors.ids().collect();
        if kept != have {
            return Err(Error::contract(format!("gene tensors {have:?} disagree with mask {kept:?}")));
        }
        if kept.is_empty() {
            return Err(Error::contract("gene must retain at least one layer"));
        }
        Ok(Self { mask, tensors, origin })
    }

    /// Copies the layers of `model` whose bit is set.
    pub fn from_model(model: &LayeredParams<T>, keep: &[bool], origin: GeneOrigin) -> Result<Self> {
        if keep.len() != model.len() {
            return Err(Error::contract("mask length differs from layer count"));
        }
        let mask = model.ids().map(String::from).zip(keep.iter().copied()).collect();
        let layers = model
            .layers()
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(l, _)| l.clone())
            .collect();
        Self::from_parts(mask, LayeredParams::new(layers)?, origin)
    }

    pub fn mask(&self) -> &[(String, bool)] {
        &self.mask
    }

    pub fn bits(&self) -> Vec<bool> {
        self.mask.iter().map(|(_, b)| *b).collect()
    }

    pub fn tensors(&self) -> &LayeredParams<T> {
        &self.tensors
    }

    pub fn gamma(&self) -> usize {
        self.tensors.len()
    }

    pub fn covers(&self, id: &str) -> bool {
        self.tensors.index_of(id).is_some()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.tensors.ids().map(String::from).collect()
    }

    /// Scalars carried by the gene.
    pub fn param_count(&self) -> usize {
        self.tensors.param_count()
    }

    /// Overwrites the covered layers of `model` with the gene's tensors.
    pub fn write_into(&self, model: &mut LayeredParams<T>) -> Result<()> {
        for l in self.tensors.layers() {
            model.set(&l.id, l.tensor.clone())?;
        }
        Ok(())
    }
}

/// Keeps the `gamma` layers with the largest score; ties go to the lower index.
pub fn select_learngene<T: Real>(
    model: &LayeredParams<T>,
    scores: &LayerScores,
    gamma: usize,
    origin: GeneOrigin,
) -> Result<LearnGene<T>> {
    let l = model.len();
    if gamma == 0 || gamma > l {
        return Err(Error::contract(format!("gamma {gamma} outside [1, {l}]")));
    }
    if scores.scores.len() != l || !model.ids().eq(scores.ids.iter().map(String::as_str)) {
        return Err(Error::contract("scores do not match the model's layers"));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; l];
    for &i in &order[..gamma] {
        keep[i] = true;
    }
    LearnGene::from_model(model, &keep, origin)
}

/// Linear integer ramp from `num_layers` at round 0 down to `gamma_min` at
/// `warmup`, rounding the interpolated value down.
pub fn gamma_schedule(round: usize, num_layers: usize, gamma_min: usize, warmup: usize) -> usize {
    assert!(gamma_min >= 1 && gamma_min <= num_layers && warmup >= 1);
    if round >= warmup {
        return gamma_min;
    }
    let drop = num_layers - gamma_min;
    num_layers - (drop * round).div_ceil(warmup)
}

/// Gene-size controller: follows [`gamma_schedule`] but, when `hold_delta` is set,
/// freezes γ for a round in which accuracy fell by more than `hold_delta`.
#[derive(Clone, Debug)]
pub struct GammaController {
    num_layers: usize,
    gamma_min: usize,
    warmup: usize,
    hold_delta: Option<f64>,
    current: Option<usize>,
}

impl GammaController {
    pub fn new(num_layers: usize, gamma_min: usize, warmup: usize, hold_delta: Option<f64>) -> Self {
        Self { num_layers, gamma_min, warmup, hold_delta, current: None }
    }

    /// γ for `round` given the accuracies of the two preceding evaluations.
    pub fn next(&mut self, round: usize, prev_acc: Option<f64>, last_acc: Option<f64>) -> usize {
        let scheduled = gamma_schedule(round, self.num_layers, self.gamma_min, self.warmup);
        let hold = match (self.hold_delta, prev_acc, last_acc, self.current) {
            (Some(delta), Some(p), Some(l), Some(_)) => p - l > delta,
            _ => false,
        };
        let g = match self.current {
            Some(cur) if hold => cur,
            _ => scheduled,
        };
        self.current = Some(g);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, MlpSpec};
    use ndarray::{arr1, arr2};

    fn single(id: &str, vals: &[f64]) -> LayeredParams<f64> {
        LayeredParams::new(vec![Layer::new(id, arr1(vals).into_dyn())]).unwrap()
    }

    #[test]
    fn fisher_single_logistic_unit() {
        // two-class softmax with logits [0, θ] ≡ logistic unit; at θ = 0, x = 1, y = 1:
        // d log p / dθ = 1 − σ(0) = 0.5 → F = 0.25
        let model: LayeredParams<f64> = LayeredParams::new(vec![
            Layer::new("fc1.weight", arr2(&[[0.0, 0.0]]).into_dyn()),
            Layer::new("fc1.bias", arr1(&[0.0, 0.0]).into_dyn()),
        ])
        .unwrap();
        let batch = Batch::new(arr2(&[[1.0]]), vec![1]).unwrap();
        let f = fisher_diag(&model, &[batch.clone()]).unwrap();
        let w = f.values.get("fc1.weight").unwrap();
        assert!((w[[0, 1]] - 0.25).abs() < 1e-12);

        // finite-difference oracle on log p(y=1|x=1) = -ln(1 + e^{-θ})
        let logp = |t: f64| -(1.0 + (-t).exp()).ln();
        let h = 1e-6;
        let d = (logp(h) - logp(-h)) / (2.0 * h);
        assert!((d * d - w[[0, 1]]).abs() < 1e-9);
    }

    #[test]
    fn fisher_is_zero_on_dead_relu_path() {
        let spec = MlpSpec::new(2, vec![2], 2);
        let mut model: LayeredParams<f64> = spec.init(3);
        // hidden unit 1 never activates for nonnegative inputs
        let mut w1 = model.get("fc1.weight").unwrap().clone();
        w1[[0, 1]] = -1.0;
        w1[[1, 1]] = -1.0;
        model.set("fc1.weight", w1).unwrap();
        let mut b1 = model.get("fc1.bias").unwrap().clone();
        b1[[1]] = -0.5;
        model.set("fc1.bias", b1).unwrap();
        let batch = Batch::new(arr2(&[[0.2, 0.9], [0.7, 0.1]]), vec![0, 1]).unwrap();
        let f = fisher_diag(&model, &[batch]).unwrap();
        let w2 = f.values.get("fc2.weight").unwrap();
        assert_eq!(w2[[1, 0]], 0.0);
        assert_eq!(w2[[1, 1]], 0.0);
        assert_eq!(f.values.get("fc1.bias").unwrap()[[1]], 0.0);
    }

    #[test]
    fn fisher_rejects_empty_shard() {
        let model: LayeredParams<f64> = MlpSpec::new(2, vec![], 2).init(0);
        assert!(fisher_diag(&model, &[]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let f = FisherDiag { values: single("a", &[0.0, 1.0, 2.0]) };
        let n = normalize_fisher(&f).unwrap();
        assert_eq!(n.values.flatten(), vec![0.0, 0.5, 1.0]);
        let c = FisherDiag { values: single("a", &[3.0, 3.0]) };
        assert_eq!(normalize_fisher(&c).unwrap().values.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn mask_examples() {
        let n = NormalizedFisher { values: single("a", &[0.0, 0.5, 1.0]) };
        let m = elastic_mask(&n, 0.5).unwrap();
        assert_eq!(m.keep_local.layers()[0].1, vec![true, true, false]);
        assert_eq!(elastic_mask(&n, 1.0).unwrap().keep_local.count(), 3);
        assert!(elastic_mask(&n, 1.5).is_err());

        let prev = single("a", &[10.0, 20.0, 30.0]);
        let clus = single("a", &[1.0, 2.0, 3.0]);
        assert_eq!(compose_elastic(&prev, &clus, &m).unwrap().flatten(), vec![10.0, 20.0, 3.0]);
    }

    #[test]
    fn identical_models_score_by_inverse_dim() {
        let spec = MlpSpec::new(3, vec![4], 2);
        let m: LayeredParams<f64> = spec.init(1);
        let s = layer_scores(&m, &m).unwrap();
        let inv: Vec<f64> = m.layers().iter().map(|l| 1.0 / l.dim() as f64).collect();
        let total: f64 = inv.iter().sum();
        for (got, want) in s.scores.iter().zip(inv) {
            assert!((got - want / total).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_update_scores_lowest() {
        let prev = LayeredParams::new(vec![
            Layer::new("a", arr1(&[1.0, 0.0]).into_dyn()),
            Layer::new("b", arr1(&[1.0, 0.0]).into_dyn()),
        ])
        .unwrap();
        let cur = LayeredParams::new(vec![
            Layer::new("a", arr1(&[0.0, 1.0]).into_dyn()),
            Layer::new("b", arr1(&[1.0, 0.1]).into_dyn()),
        ])
        .unwrap();
        let s = layer_scores(&cur, &prev).unwrap();
        assert_eq!(s.scores[0], 0.0);
        assert!((s.scores[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_layer_is_an_error() {
        let prev = single("w", &[0.0, 0.0]);
        let cur = single("w", &[1.0, 0.0]);
        assert!(matches!(layer_scores(&cur, &prev), Err(Error::DegenerateCosine(id)) if id == "w"));
    }

    #[test]
    fn selection_examples() {
        let m = LayeredParams::new(vec![
            Layer::new("a", arr1(&[1.0f64]).into_dyn()),
            Layer::new("b", arr1(&[2.0]).into_dyn()),
            Layer::new("c", arr1(&[3.0]).into_dyn()),
        ])
        .unwrap();
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let o = GeneOrigin { owner: 0, round: 0 };
        let s = LayerScores::from_values(ids.clone(), vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(select_learngene(&m, &s, 1, o).unwrap().layer_ids(), vec!["a"]);
        assert_eq!(select_learngene(&m, &s, 3, o).unwrap().tensors(), &m);
        let tied = LayerScores::from_values(ids, vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(select_learngene(&m, &tied, 1, o).unwrap().layer_ids(), vec!["b"]);
        assert!(select_learngene(&m, &s, 0, o).is_err());
        assert!(select_learngene(&m, &s, 4, o).is_err());
    }

    #[test]
    fn schedule_anchors() {
        assert_eq!(gamma_schedule(0, 6, 2, 8), 6);
        assert_eq!(gamma_schedule(8, 6, 2, 8), 2);
        assert_eq!(gamma_schedule(50, 6, 2, 8), 2);
        // table oracle: floor(6 - 4 r / 8)
        let table = [6, 5, 5, 4, 4, 3, 3, 2, 2];
        for (r, &want) in table.iter().enumerate() {
            let exact = 6.0 - 4.0 * r as f64 / 8.0;
            assert_eq!(want, exact.floor() as usize);
            assert_eq!(gamma_schedule(r, 6, 2, 8), want, "round {r}");
        }
    }

    #[test]
    fn controller_holds_on_accuracy_drop() {
        let mut c = GammaController::new(6, 2, 4, Some(0.05));
        assert_eq!(c.next(0, None, None), 6);
        assert_eq!(c.next(1, None, Some(0.5)), 5);
        // drop of 0.1 > 0.05 → hold at 5
        assert_eq!(c.next(2, Some(0.5), Some(0.4)), 5);
        assert_eq!(c.next(3, Some(0.4), Some(0.45)), 3);
        let mut free = GammaController::new(6, 2, 4, None);
        free.next(0, None, None);
        free.next(1, None, Some(0.5));
        assert_eq!(free.next(2, Some(0.5), Some(0.1)), 4);
    }
}
