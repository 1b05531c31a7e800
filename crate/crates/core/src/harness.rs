//! Experiment orchestration: configuration, the two-phase round loop, the
//! baselines, communication ledger and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::client::{self, ClientState, LocalConfig, LocalReport};
use crate::data::{self, Dataset, ManifestEntry, PartitionManifest, PartitionSpec, Shard, Strategy};
use crate::error::{Error, Result};
use crate::genecraft::{GammaController, GeneOrigin, LearnGene};
use crate::nn::{LayeredParams, MlpSpec};
use crate::rng::{self, derive_seed};
use crate::server::{self, ClusterState, RoutingTable, Signature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// learnGene exchange with both regularizers.
    Genefl,
    /// Full-model exchange, per-cluster unweighted mean.
    FedavgFull,
    /// A fixed set of the lowest-index `gamma_min` layers is exchanged.
    PartialFixed,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Genefl => "genefl",
            Mode::FedavgFull => "fedavg_full",
            Mode::PartialFixed => "partial_fixed",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genefl" => Ok(Mode::Genefl),
            "fedavg_full" => Ok(Mode::FedavgFull),
            "partial_fixed" => Ok(Mode::PartialFixed),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// How agnostic clients in genefl mode build their first model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgnosticInit {
    /// Routed cluster gene plus fan-in random layers.
    Gene,
    /// Fan-in random everywhere; the gene is still downloaded but ignored.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { num_classes: usize, per_class: usize, input_dim: usize },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub num_known: usize,
    pub num_agnostic: usize,
    pub num_clusters: usize,
    pub rounds_known: usize,
    pub rounds_agnostic: usize,
    pub clients_per_round: usize,
    /// Agnostic clients admitted per phase-2 round.
    pub admit_per_round: usize,
    pub local: LocalConfig,
    pub data: DataSource,
    pub fraction_known: f64,
    pub test_fraction: f64,
    pub partition: Strategy,
    /// Partition of the agnostic pool; `None` reuses `partition`.
    pub agnostic_partition: Option<Strategy>,
    pub hidden: Vec<usize>,
    pub gamma_min: usize,
    pub warmup: usize,
    /// Freeze γ for a round after accuracy falls by more than this.
    pub gamma_hold_delta: Option<f64>,
    pub bits: usize,
    pub signature_rows: usize,
    pub signature_dim: usize,
    pub seed: u64,
    pub mode: Mode,
    pub agnostic_init: AgnosticInit,
    pub agnostic_joins_training: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_known: 12,
            num_agnostic: 4,
            num_clusters: 2,
            rounds_known: 30,
            rounds_agnostic: 10,
            clients_per_round: 10,
            admit_per_round: 10,
            local: LocalConfig::default(),
            data: DataSource::Synthetic { num_classes: 8, per_class: 600, input_dim: 32 },
            fraction_known: 0.5,
            test_fraction: 0.2,
            partition: Strategy::Sharding { s: 4 },
            agnostic_partition: None,
            hidden: vec![64, 32],
            gamma_min: 2,
            warmup: 8,
            gamma_hold_delta: None,
            bits: 32,
            signature_rows: 32,
            signature_dim: 5,
            seed: 0,
            mode: Mode::Genefl,
            agnostic_init: AgnosticInit::Gene,
            agnostic_joins_training: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_known == 0 || self.num_clusters == 0 || self.clients_per_round == 0 || self.admit_per_round == 0 {
            return bad("client, cluster and per-round counts must be positive");
        }
        if self.clients_per_round > self.num_known {
            return bad("clients_per_round exceeds the number of known clients");
        }
        if self.num_clusters > self.num_known {
            return bad("more clusters than known clients");
        }
        if self.bits == 0 || !self.bits.is_multiple_of(8) {
            return bad("bits must be a positive multiple of 8");
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in [0, 1)");
        }
        let units = 2 * (self.hidden.len() + 1);
        if self.gamma_min == 0 || self.gamma_min > units {
            return bad("gamma_min must lie in [1, number of layers]");
        }
        if self.warmup == 0 {
            return bad("warmup must be positive");
        }
        if self.signature_dim == 0 || self.signature_dim > self.signature_rows {
            return bad("signature_dim must lie in [1, signature_rows]");
        }
        if let DataSource::Synthetic { num_classes, per_class, input_dim } = self.data {
            if num_classes < 2 || per_class == 0 || input_dim == 0 {
                return bad("synthetic data needs >= 2 classes, >= 1 sample per class, >= 1 feature");
            }
            if self.signature_dim > input_dim {
                return bad("signature_dim exceeds input_dim");
            }
        }
        self.local.validate()
    }

    pub fn num_layers(&self) -> usize {
        2 * (self.hidden.len() + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Gene,
    Model,
    Partial,
    Signature,
    ClusterModel,
    ClusterGene,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub client_id: usize,
    pub direction: Direction,
    pub payload: Payload,
    pub param_count: usize,
    pub bytes: u64,
}

/// Append-only log of every simulated transfer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommLedger {
    bits: usize,
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new(bits: usize) -> Self {
        Self { bits, entries: Vec::new() }
    }

    pub fn record(&mut self, round: usize, client_id: usize, direction: Direction, payload: Payload, param_count: usize) {
        let bytes = (param_count * self.bits / 8) as u64;
        self.entries.push(LedgerEntry { round, client_id, direction, payload, param_count, bytes });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn uplink_bytes(&self) -> u64 {
        self.entries.iter().filter(|e| e.direction == Direction::Up).map(|e| e.bytes).sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for e in &self.entries {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Measured uplink bytes and the closed-form cost `R · B · W · 2` in bits.
pub fn comm_cost(ledger: &CommLedger, rounds: u64, bits: u64, params: u64) -> (u64, u128) {
    (ledger.uplink_bytes(), u128::from(rounds) * u128::from(bits) * u128::from(params) * 2)
}

/// Unweighted elementwise mean.
pub fn fedavg_aggregate(models: &[&LayeredParams]) -> Result<LayeredParams> {
    let first = models.first().ok_or_else(|| Error::contract("nothing to average"))?;
    let mut acc = (*first).clone();
    for m in &models[1..] {
        acc.ensure_congruent(*m)?;
        for (a, l) in acc.layers_mut().iter_mut().zip(m.layers()) {
            a.tensor += &l.tensor;
        }
    }
    let n = models.len() as f32;
    for a in acc.layers_mut() {
        a.tensor.mapv_inplace(|v| v / n);
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    /// `known` or `agnostic`.
    pub phase: String,
    pub mode: String,
    pub mean_test_accuracy: f64,
    /// `cluster:accuracy` pairs separated by `;`, for clusters with evaluated members.
    pub cluster_accuracy: String,
    pub cumulative_uplink_bytes: u64,
    pub mean_gamma: f64,
}

/// Per-client record of one local update.
#[derive(Clone, Debug, Serialize)]
pub struct TraceLine {
    pub round: usize,
    pub client_id: usize,
    pub l_cls: f64,
    pub l_gen: f64,
    pub l_elg: f64,
    pub gamma: usize,
    pub gene_layers: Vec<String>,
    pub uplink_bytes: u64,
}

/// Everything the simulation mutates.
#[derive(Clone, Debug)]
pub struct World {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub arch: MlpSpec,
    pub known_classes: Vec<usize>,
    pub agnostic_classes: Vec<usize>,
    pub theta0: LayeredParams,
    pub clients: BTreeMap<usize, ClientState>,
    /// Train/test indices of agnostic clients not yet admitted.
    pub pending: BTreeMap<usize, (Vec<usize>, Vec<usize>)>,
    /// Admitted agnostic clients, in admission order.
    pub admitted: Vec<usize>,
    /// Agnostic clients whose next update is their first.
    fresh: BTreeSet<usize>,
    pub clusters: Vec<ClusterState>,
    pub routing: RoutingTable,
    pub ledger: CommLedger,
    pub metrics: Vec<MetricsRow>,
    pub trace: Vec<TraceLine>,
    pub manifests: (PartitionManifest, PartitionManifest),
    gamma: GammaController,
    round: usize,
}

fn seed(cfg: &ExperimentConfig, stream: &str, idx: u64) -> u64 {
    derive_seed(cfg.seed, stream, idx)
}

fn manifest(spec: PartitionSpec, shards: &[Shard], pool: &[usize], id_offset: usize) -> PartitionManifest {
    PartitionManifest {
        spec,
        clients: shards
            .iter()
            .map(|s| ManifestEntry {
                client_id: s.owner_id + id_offset,
                indices: s.indices.iter().map(|&i| pool[i]).collect(),
                classes: s.present_classes.iter().copied().collect(),
            })
            .collect(),
    }
}

impl World {
    /// Data, partitions, signatures, one-shot clustering and the round-0 row.
    pub fn setup(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = match &cfg.data {
            DataSource::Synthetic { num_classes, per_class, input_dim } => {
                data::make_synthetic(*num_classes, *per_class, *input_dim, seed(&cfg, "data", 0))?
            }
            DataSource::Csv { path } => data::load_csv(path)?,
        };
        if cfg.signature_dim > data.input_dim() {
            return Err(Error::Config("signature_dim exceeds input_dim".into()));
        }
        let arch = MlpSpec::new(data.input_dim(), cfg.hidden.clone(), data.label_space());
        let (known_classes, agnostic_classes) =
            data::split_known_agnostic(&data.class_ids, cfg.fraction_known, seed(&cfg, "classes", 0))?;

        let known_pool = data.indices_of(&known_classes);
        let agn_pool = data.indices_of(&agnostic_classes);
        let known_spec = PartitionSpec {
            strategy: cfg.partition,
            num_clients: cfg.num_known,
            seed: seed(&cfg, "partition", 0),
        };
        let agn_spec = PartitionSpec {
            strategy: cfg.agnostic_partition.unwrap_or(cfg.partition),
            num_clients: cfg.num_agnostic,
            seed: seed(&cfg, "partition", 1),
        };
        let known_shards = data::partition(&data.select(&known_pool), &known_spec)?;
        let agn_shards = if cfg.num_agnostic > 0 {
            data::partition(&data.select(&agn_pool), &agn_spec)?
        } else {
            Vec::new()
        };
        let manifests = (
            manifest(known_spec, &known_shards, &known_pool, 0),
            manifest(agn_spec, &agn_shards, &agn_pool, cfg.num_known),
        );

        let split = |entry: &ManifestEntry| {
            data::stratified_split(&data, &entry.indices, cfg.test_fraction, seed(&cfg, "holdout", entry.client_id as u64))
        };
        let theta0: LayeredParams = arch.init(seed(&cfg, "theta0", 0));
        let mut ledger = CommLedger::new(cfg.bits);

        let mut sigs = Vec::with_capacity(cfg.num_known);
        let mut known = Vec::with_capacity(cfg.num_known);
        for entry in &manifests.0.clients {
            let (train, test) = split(entry);
            let sig = client_signature(&cfg, &data, entry.client_id, &train)?;
            ledger.record(0, entry.client_id, Direction::Up, Payload::Signature, sig.param_count());
            sigs.push(sig);
            known.push((entry.client_id, train, test));
        }
        let ids: Vec<usize> = known.iter().map(|k| k.0).collect();
        let routing = server::cluster_known(&ids, &sigs, cfg.num_clusters, seed(&cfg, "kmeans", 0))?;
        let mut clusters = Vec::with_capacity(routing.means.len());
        for (k, mean) in routing.means.iter().enumerate() {
            let members = routing.assignments.values().filter(|&&c| c == k).count();
            clusters.push(ClusterState::new(k, theta0.clone(), mean.clone(), members)?);
        }
        let mut clients = BTreeMap::new();
        for (id, train, test) in known {
            let k = routing.assignments[&id];
            clients.insert(id, ClientState::new(id, k, theta0.clone(), train, test, &cfg.local)?);
        }
        let pending = manifests.1.clients.iter().map(|e| (e.client_id, split(e))).collect();
        let gamma = GammaController::new(cfg.num_layers(), cfg.gamma_min, cfg.warmup, cfg.gamma_hold_delta);

        let mut world = Self {
            data,
            arch,
            known_classes,
            agnostic_classes,
            theta0,
            clients,
            pending,
            admitted: Vec::new(),
            fresh: BTreeSet::new(),
            clusters,
            routing,
            ledger,
            metrics: Vec::new(),
            trace: Vec::new(),
            manifests,
            gamma,
            round: 0,
            cfg,
        };
        let row = world.evaluate(0, "known", 0.0)?;
        world.metrics.push(row);
        Ok(world)
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Known clients in id order.
    pub fn known_ids(&self) -> Vec<usize> {
        self.clients.values().filter(|c| !c.is_agnostic).map(|c| c.client_id).collect()
    }

    /// The parameters a client would start its next round from.
    pub fn evaluation_model(&self, c: &ClientState) -> Result<LayeredParams> {
        let cluster = &self.clusters[c.cluster_id];
        match self.cfg.mode {
            Mode::Genefl => Ok(c.model.clone()),
            Mode::FedavgFull => Ok(cluster.model.clone()),
            Mode::PartialFixed => {
                let mut m = c.model.clone();
                self.fixed_gene(cluster, 0)?.write_into(&mut m)?;
                Ok(m)
            }
        }
    }

    fn evaluate(&self, round: usize, phase: &str, mean_gamma: f64) -> Result<MetricsRow> {
        let ids: Vec<usize> = if phase == "known" { self.known_ids() } else { self.admitted.clone() };
        let mut per_cluster: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut all = Vec::with_capacity(ids.len());
        for id in ids {
            let c = &self.clients[&id];
            if c.test.is_empty() {
                continue;
            }
            let m = self.evaluation_model(c)?;
            let acc = crate::nn::accuracy(&m, &self.data.batch(&c.test))?;
            all.push(acc);
            per_cluster.entry(c.cluster_id).or_default().push(acc);
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let mut cluster_accuracy = String::new();
        for (k, v) in &per_cluster {
            if !cluster_accuracy.is_empty() {
                cluster_accuracy.push(';');
            }
            write!(cluster_accuracy, "{k}:{:.6}", mean(v)).unwrap();
        }
        Ok(MetricsRow {
            round,
            phase: phase.into(),
            mode: self.cfg.mode.as_str().into(),
            mean_test_accuracy: mean(&all),
            cluster_accuracy,
            cumulative_uplink_bytes: self.ledger.uplink_bytes(),
            mean_gamma,
        })
    }

    /// The lowest-index `gamma_min` layers of a cluster model, as exchanged by the
    /// `partial_fixed` baseline.
    fn fixed_gene(&self, cluster: &ClusterState, round: usize) -> Result<LearnGene> {
        let keep: Vec<bool> = (0..self.cfg.num_layers()).map(|i| i < self.cfg.gamma_min).collect();
        LearnGene::from_model(&cluster.model, &keep, GeneOrigin { owner: cluster.cluster_id, round })
    }

    fn local_seed(&self, round: usize, id: usize) -> u64 {
        seed(&self.cfg, "local", ((round as u64) << 24) | id as u64)
    }

    /// Downlink at round start, local training and upload for `participants`
    /// (sorted), then per-cluster aggregation. Returns the mean γ uploaded.
    fn train_participants(&mut self, round: usize, participants: &[usize], gamma: usize) -> Result<f64> {
        let mode = self.cfg.mode;
        let full = self.arch.param_count();
        let local_cfg = LocalConfig { gamma, ..self.cfg.local.clone() };
        let plain_cfg = local_cfg.plain();
        let mut genes: BTreeMap<usize, Vec<LearnGene>> = BTreeMap::new();
        let mut models: BTreeMap<usize, Vec<LayeredParams>> = BTreeMap::new();
        let mut gammas = Vec::new();
        for &id in participants {
            let mut state = self.clients.remove(&id).expect("participant exists");
            let fresh = self.fresh.remove(&id);
            let k = state.cluster_id;
            let s = self.local_seed(round, id);
            if state.is_agnostic && !self.cfg.agnostic_joins_training {
                let (st, rep) = client::plain_update(state, &self.data, &plain_cfg, round, s)?;
                self.push_trace(round, id, &rep, 0);
                self.clients.insert(id, st);
                continue;
            }
            let (st, rep, up) = match mode {
                Mode::Genefl => {
                    let reference = if fresh {
                        state.model.clone()
                    } else {
                        self.ledger.record(round, id, Direction::Down, Payload::ClusterModel, full);
                        self.clusters[k].gene.write_into(&mut state.model)?;
                        self.clusters[k].model.clone()
                    };
                    let (st, gene, rep) = client::local_update(state, &reference, &self.data, &local_cfg, round, s)?;
                    let n = gene.param_count();
                    self.ledger.record(round, id, Direction::Up, Payload::Gene, n);
                    gammas.push(gene.gamma() as f64);
                    genes.entry(k).or_default().push(gene);
                    (st, rep, n)
                }
                Mode::FedavgFull => {
                    if !fresh {
                        self.ledger.record(round, id, Direction::Down, Payload::ClusterModel, full);
                        state.model = self.clusters[k].model.clone();
                    }
                    let (st, rep) = client::plain_update(state, &self.data, &plain_cfg, round, s)?;
                    self.ledger.record(round, id, Direction::Up, Payload::Model, full);
                    gammas.push(self.cfg.num_layers() as f64);
                    models.entry(k).or_default().push(st.model.clone());
                    (st, rep, full)
                }
                Mode::PartialFixed => {
                    if !fresh {
                        let g = self.fixed_gene(&self.clusters[k], round)?;
                        self.ledger.record(round, id, Direction::Down, Payload::Partial, g.param_count());
                        g.write_into(&mut state.model)?;
                    }
                    let (st, rep) = client::plain_update(state, &self.data, &plain_cfg, round, s)?;
                    let keep: Vec<bool> = (0..self.cfg.num_layers()).map(|i| i < self.cfg.gamma_min).collect();
                    let gene = LearnGene::from_model(&st.model, &keep, GeneOrigin { owner: id, round })?;
                    let n = gene.param_count();
                    self.ledger.record(round, id, Direction::Up, Payload::Partial, n);
                    gammas.push(self.cfg.gamma_min as f64);
                    genes.entry(k).or_default().push(gene);
                    (st, rep, n)
                }
            };
            self.push_trace(round, id, &rep, up);
            self.clients.insert(id, st);
        }
        for (k, gs) in genes {
            self.clusters[k] = server::aggregate_learngene(&gs, &self.clusters[k], round)?;
        }
        for (k, ms) in models {
            let refs: Vec<&LayeredParams> = ms.iter().collect();
            let model = fedavg_aggregate(&refs)?;
            let all = vec![true; model.len()];
            let gene = LearnGene::from_model(&model, &all, GeneOrigin { owner: k, round })?;
            self.clusters[k].model = model;
            self.clusters[k].gene = gene;
        }
        Ok(if gammas.is_empty() { 0.0 } else { gammas.iter().sum::<f64>() / gammas.len() as f64 })
    }

    fn push_trace(&mut self, round: usize, client_id: usize, rep: &LocalReport, up: usize) {
        let last = rep.epoch_losses.last().copied().unwrap_or_default();
        self.trace.push(TraceLine {
            round,
            client_id,
            l_cls: last.cls,
            l_gen: last.gen,
            l_elg: last.elg,
            gamma: rep.gamma,
            gene_layers: rep.gene_layers.clone(),
            uplink_bytes: (up * self.cfg.bits / 8) as u64,
        });
    }

    fn gamma_for(&mut self, round: usize) -> usize {
        let n = self.metrics.len();
        let last = self.metrics.last().map(|r| r.mean_test_accuracy);
        let prev = if n >= 2 { Some(self.metrics[n - 2].mean_test_accuracy) } else { None };
        self.gamma.next(round - 1, prev, last)
    }

    /// One collaborative round over a seeded sample of known clients.
    pub fn run_round(&mut self) -> Result<MetricsRow> {
        let round = self.round + 1;
        let known = self.known_ids();
        let picks = index::sample(&mut rng::stream(self.cfg.seed, "sample", round as u64), known.len(), self.cfg.clients_per_round);
        let mut participants: Vec<usize> = picks.into_iter().map(|i| known[i]).collect();
        participants.sort_unstable();
        let gamma = self.gamma_for(round);
        let mean_gamma = self.train_participants(round, &participants, gamma)?;
        self.round = round;
        let row = self.evaluate(round, "known", mean_gamma)?;
        self.metrics.push(row.clone());
        Ok(row)
    }

    fn init_model_for(&self, cluster: usize, id: usize, init: AgnosticInit) -> Result<(LayeredParams, Payload, usize)> {
        let s = seed(&self.cfg, "agnostic-init", id as u64);
        let c = &self.clusters[cluster];
        match self.cfg.mode {
            Mode::Genefl => {
                let model = match init {
                    AgnosticInit::Gene => server::init_agnostic(&c.gene, &self.arch, s)?,
                    AgnosticInit::Random => self.arch.init(s),
                };
                Ok((model, Payload::ClusterGene, c.gene.param_count()))
            }
            Mode::FedavgFull => Ok((c.model.clone(), Payload::ClusterModel, self.arch.param_count())),
            Mode::PartialFixed => {
                let g = self.fixed_gene(c, self.round)?;
                Ok((server::init_agnostic(&g, &self.arch, s)?, Payload::Partial, g.param_count()))
            }
        }
    }

    /// Routes and initializes the next batch of pending agnostic clients.
    pub fn admit_next(&mut self, round: usize, init: AgnosticInit) -> Result<Vec<usize>> {
        let batch: Vec<usize> = self.pending.keys().copied().take(self.cfg.admit_per_round).collect();
        for &id in &batch {
            let (train, test) = self.pending.remove(&id).unwrap();
            let sig = client_signature(&self.cfg, &self.data, id, &train)?;
            self.ledger.record(round, id, Direction::Up, Payload::Signature, sig.param_count());
            let (k, _) = server::admit_agnostic(&sig, &mut self.clusters)?;
            self.routing.assignments.insert(id, k);
            let (model, payload, count) = self.init_model_for(k, id, init)?;
            self.ledger.record(round, id, Direction::Down, payload, count);
            let mut st = ClientState::new(id, k, model, train, test, &self.cfg.local)?;
            st.is_agnostic = true;
            self.clients.insert(id, st);
            self.admitted.push(id);
            self.fresh.insert(id);
        }
        for c in &self.clusters {
            self.routing.means[c.cluster_id] = c.mean.clone();
        }
        Ok(batch)
    }

    /// One phase-2 round: admit a batch, then train it together with a seeded
    /// sample of earlier admissions.
    pub fn run_agnostic_round(&mut self) -> Result<MetricsRow> {
        let round = self.round + 1;
        let before: Vec<usize> = self.admitted.clone();
        let new = self.admit_next(round, self.cfg.agnostic_init)?;
        let room = self.cfg.clients_per_round.saturating_sub(new.len()).min(before.len());
        let picks = index::sample(&mut rng::stream(self.cfg.seed, "sample-agnostic", round as u64), before.len(), room);
        let mut participants: Vec<usize> = new.into_iter().chain(picks.into_iter().map(|i| before[i])).collect();
        participants.sort_unstable();
        let gamma = self.gamma_for(round);
        let mean_gamma = self.train_participants(round, &participants, gamma)?;
        self.round = round;
        let row = self.evaluate(round, "agnostic", mean_gamma)?;
        self.metrics.push(row.clone());
        Ok(row)
    }

    pub fn run_all(&mut self) -> Result<()> {
        for _ in 0..self.cfg.rounds_known {
            self.run_round()?;
        }
        for _ in 0..self.cfg.rounds_agnostic {
            self.run_agnostic_round()?;
        }
        Ok(())
    }

    /// Mean test accuracy of the first admission batch after its first local
    /// update, with the given initialization. Leaves `self` untouched.
    pub fn agnostic_round0_accuracy(&self, init: AgnosticInit) -> Result<f64> {
        let mut w = self.clone();
        w.cfg.agnostic_init = init;
        Ok(w.run_agnostic_round()?.mean_test_accuracy)
    }

    pub fn write_outputs(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("metrics.csv")).map_err(csv_err)?;
        for row in &self.metrics {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        self.ledger.write_csv(out.join("ledger.csv"))?;
        fs::write(out.join("config_echo.json"), serde_json::to_string_pretty(&self.cfg)? + "\n")?;
        let mut trace = String::new();
        for t in &self.trace {
            trace.push_str(&serde_json::to_string(t)?);
            trace.push('\n');
        }
        fs::write(out.join("trace.jsonl"), trace)?;
        fs::write(out.join("partition_known.json"), serde_json::to_string_pretty(&self.manifests.0)?)?;
        fs::write(out.join("partition_agnostic.json"), serde_json::to_string_pretty(&self.manifests.1)?)?;
        fs::write(out.join("routing.json"), serde_json::to_string_pretty(&self.routing)?)?;
        let ck = out.join("checkpoints");
        fs::create_dir_all(&ck)?;
        for c in &self.clusters {
            checkpoint::save(ck.join(format!("cluster_{}.ckpt", c.cluster_id)), &c.model)?;
            checkpoint::save_gene(ck.join(format!("cluster_{}_gene.ckpt", c.cluster_id)), &c.gene)?;
        }
        Ok(())
    }
}

fn client_signature(cfg: &ExperimentConfig, data: &Dataset, id: usize, train: &[usize]) -> Result<Signature> {
    let x = server::signature_input(data, train, cfg.signature_rows, seed(cfg, "signature", id as u64));
    server::svd_signature(&x, cfg.signature_dim)
}

/// Runs both phases and writes every output file into `out`.
pub fn run_experiment(cfg: ExperimentConfig, out: &Path) -> Result<World> {
    let mut world = World::setup(cfg)?;
    world.run_all()?;
    world.write_outputs(out)?;
    Ok(world)
}
