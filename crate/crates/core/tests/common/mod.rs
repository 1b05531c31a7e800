//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use genefl::genecraft::LearnGene;
use genefl::nn::{self, Batch, Layer, LayeredParams, MlpSpec, ParamMask, Regularizer};
use genefl::server::ClusterState;
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random 64-bit MLP, batch, anchor and elastic mask.
pub struct GradInstance {
    pub model: LayeredParams<f64>,
    pub anchor: LayeredParams<f64>,
    pub mask: ParamMask,
    pub batch: Batch<f64>,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut r = rng(seed);
    let d = r.random_range(2..6);
    let h = r.random_range(2..6);
    let c = r.random_range(2..5);
    let spec = MlpSpec::new(d, vec![h, r.random_range(2..5)], c);
    let model: LayeredParams<f64> = spec.init(seed.wrapping_mul(31));
    let mut anchor = model.clone();
    for l in anchor.layers_mut() {
        l.tensor.mapv_inplace(|v| v + r.random_range(-0.5..0.5));
    }
    let mask = ParamMask::from_fn(&model, |_, _| r.random_bool(0.5));
    let n = r.random_range(1..7);
    let inputs = Array2::from_shape_fn((n, d), |_| r.random_range(0.0..1.0));
    let labels = (0..n).map(|_| r.random_range(0..c)).collect();
    GradInstance { model, anchor, mask, batch: Batch::new(inputs, labels).unwrap() }
}

fn perturbed(model: &LayeredParams<f64>, li: usize, j: usize, delta: f64) -> LayeredParams<f64> {
    let mut m = model.clone();
    let t = &mut m.layers_mut()[li].tensor;
    let v = t.as_slice_mut().unwrap();
    v[j] += delta;
    m
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` between an analytic gradient and central differences
/// of `f`.
pub fn fd_relative_error(
    model: &LayeredParams<f64>,
    analytic: &LayeredParams<f64>,
    f: &dyn Fn(&LayeredParams<f64>) -> f64,
) -> f64 {
    let h = 1e-6;
    let (mut diff, mut na, mut nn_) = (0.0, 0.0, 0.0);
    for (li, layer) in model.layers().iter().enumerate() {
        let a = analytic.layers()[li].tensor.as_slice().unwrap();
        for j in 0..layer.tensor.len() {
            let num = (f(&perturbed(model, li, j, h)) - f(&perturbed(model, li, j, -h))) / (2.0 * h);
            diff += (a[j] - num).powi(2);
            na += a[j] * a[j];
            nn_ += num * num;
        }
    }
    let scale = na.sqrt().max(nn_.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Worst relative error of the three loss terms' gradients on one instance.
pub fn gradient_errors(inst: &GradInstance) -> [f64; 3] {
    let none = Regularizer::none();
    let (_, g_cls) = nn::loss_and_grad(&inst.model, &inst.batch, &none).unwrap();
    let cls = |m: &LayeredParams<f64>| nn::loss_and_grad(m, &inst.batch, &none).unwrap().0.cls;
    let e_cls = fd_relative_error(&inst.model, &g_cls, &cls);

    let gen_reg = Regularizer { lambda_gen: 1.0, lambda_elg: 0.0, anchor: Some(&inst.anchor), elastic: None };
    let (_, g_tot) = nn::loss_and_grad(&inst.model, &inst.batch, &gen_reg).unwrap();
    let g_gen = difference(&g_tot, &g_cls);
    let gen = |m: &LayeredParams<f64>| -> f64 {
        m.layers()
            .iter()
            .zip(inst.anchor.layers())
            .flat_map(|(a, b)| a.tensor.iter().zip(b.tensor.iter()).map(|(x, y)| 0.5 * (x - y) * (x - y)).collect::<Vec<_>>())
            .sum()
    };
    let e_gen = fd_relative_error(&inst.model, &g_gen, &gen);

    let elg_reg = Regularizer { lambda_gen: 0.0, lambda_elg: 1.0, anchor: Some(&inst.anchor), elastic: Some(&inst.mask) };
    let (_, g_tot) = nn::loss_and_grad(&inst.model, &inst.batch, &elg_reg).unwrap();
    let g_elg = difference(&g_tot, &g_cls);
    let elg = |m: &LayeredParams<f64>| -> f64 {
        let mut s = 0.0;
        for ((a, b), (_, bits)) in m.layers().iter().zip(inst.anchor.layers()).zip(inst.mask.layers()) {
            for ((x, y), &k) in a.tensor.iter().zip(b.tensor.iter()).zip(bits) {
                if k {
                    s += 0.5 * (x - y) * (x - y);
                }
            }
        }
        s
    };
    let e_elg = fd_relative_error(&inst.model, &g_elg, &elg);
    [e_cls, e_gen, e_elg]
}

fn difference(a: &LayeredParams<f64>, b: &LayeredParams<f64>) -> LayeredParams<f64> {
    let layers = a
        .layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| Layer::new(x.id.clone(), &x.tensor - &y.tensor))
        .collect();
    LayeredParams::new(layers).unwrap()
}

/// Per-layer mean of covering genes (summed in ascending owner order) or the
/// previous value, written out by hand.
pub fn brute_aggregate(genes: &[LearnGene], prev: &LayeredParams) -> LayeredParams {
    let mut order: Vec<&LearnGene> = genes.iter().collect();
    order.sort_by_key(|g| g.origin.owner);
    let mut layers = Vec::new();
    for layer in prev.layers() {
        let covering: Vec<&ArrayD<f32>> = order
            .iter()
            .filter(|g| g.mask().iter().any(|(id, bit)| *bit && *id == layer.id))
            .map(|g| g.tensors().get(&layer.id).unwrap())
            .collect();
        if covering.is_empty() {
            layers.push(layer.clone());
            continue;
        }
        let n = covering[0].len();
        let mut out = vec![0.0f32; n];
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = covering[0].as_slice().unwrap()[j];
            for t in &covering[1..] {
                s += t.as_slice().unwrap()[j];
            }
            *o = s / covering.len() as f32;
        }
        layers.push(Layer::new(layer.id.clone(), ArrayD::from_shape_vec(IxDyn(layer.tensor.shape()), out).unwrap()));
    }
    LayeredParams::new(layers).unwrap()
}

/// Top-`d` eigenvectors of `X Xᵀ` from nalgebra's symmetric eigensolver.
pub fn gram_basis(x: &Array2<f64>, d: usize) -> DMatrix<f64> {
    let (m, n) = x.dim();
    let xm = DMatrix::from_fn(m, n, |i, j| x[[i, j]]);
    let gram = &xm * xm.transpose();
    let eig = gram.symmetric_eigen();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(m, d, |i, j| eig.eigenvectors[(i, idx[j])])
}

/// Largest principal angle between the column spans of two orthonormal bases,
/// from `‖(I − B Bᵀ) A‖₂` (spectral norm = sine of the largest angle).
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.nrows();
    let resid = (DMatrix::<f64>::identity(m, m) - b * b.transpose()) * a;
    let s = resid.singular_values().max();
    s.clamp(0.0, 1.0).asin()
}

pub fn cluster_with(id: usize, model: LayeredParams, mean: Vec<f64>, members: usize) -> ClusterState {
    ClusterState::new(id, model, mean, members).unwrap()
}

/// One seeded attack on a fresh 2-layer model with 64-dim inputs. Returns the
/// PSNR of the reconstruction when the attacker sees every layer (`full`) or
/// only the output layer.
pub fn desk_attack_psnr(seed: u64, full: bool) -> f64 {
    use genefl::privacy::{self, AttackConfig, AttackObservation};
    let data = genefl::data::make_synthetic(4, 4, 64, seed).unwrap();
    let model: LayeredParams<f64> = MlpSpec::new(64, vec![32], 4).init(seed);
    let i = (seed as usize * 5) % data.len();
    let x: Vec<f64> = data.inputs.row(i).iter().map(|&v| f64::from(v)).collect();
    let shared: Vec<String> = model.ids().filter(|id| full || !id.starts_with("fc1.")).map(String::from).collect();
    let obs = AttackObservation::observe(&model, model.clone(), &shared, &x, data.labels[i]).unwrap();
    let rec = privacy::idlg_reconstruct(&obs, &AttackConfig::default(), seed).unwrap();
    privacy::psnr(&x, &rec.x).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A config small enough to run both phases in well under a second.
pub fn tiny_config() -> genefl::harness::ExperimentConfig {
    use genefl::client::LocalConfig;
    use genefl::data::Strategy;
    use genefl::harness::{DataSource, ExperimentConfig};
    ExperimentConfig {
        num_known: 6,
        num_agnostic: 3,
        num_clusters: 2,
        rounds_known: 4,
        rounds_agnostic: 2,
        clients_per_round: 4,
        admit_per_round: 2,
        data: DataSource::Synthetic { num_classes: 6, per_class: 40, input_dim: 8 },
        partition: Strategy::Sharding { s: 2 },
        hidden: vec![6, 5],
        gamma_min: 2,
        warmup: 3,
        signature_rows: 8,
        signature_dim: 2,
        local: LocalConfig { epochs: 2, batch_size: 16, ..Default::default() },
        ..Default::default()
    }
}
