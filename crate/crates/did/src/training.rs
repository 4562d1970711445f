//! The training loop: mini-batch sampling, the six-group descent/ascent
//! update, beta scheduling, ablation switches, and checkpointing.
//!
//! The min-max game is realized with a single backward pass: the minimized
//! scalar contains `-lambda_dec * MI` and a gradient-reversal layer (factor
//! `-beta`) sits between the decomposed features and the statistic network T.
//! Plain descent on that scalar therefore ascends the MI bound over phi_t
//! while theta and psi descend it scaled by beta; all other groups follow
//! plain descent on their terms.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, LoadedDataset, Sample};
use crate::error::{DidError, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{self, LossBreakdown, LossConfig, TotalLossInputs};
use crate::model::{
    classify_df, classify_domain, decompose, domain_extract, mi_statistic, AttentionNodes,
    BackboneNodes, Group, HeadNodes, ModelConfig, ParameterGroups, StatisticNodes,
};
use crate::nn::Ledger;
use crate::seed::{derive_seed, fnv1a};
use crate::tensor::Tensor;

const SEED_INIT: u64 = 0x01;
const SEED_BATCHES: u64 = 0x02;
const SEED_MARGINALS: u64 = 0x03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub loss: LossConfig,
    /// Backbone learning rate (eta_theta).
    pub base_lr: f64,
    /// Attention, statistic, and head groups train at base_lr times this.
    pub head_lr_multiplier: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// None derives floor(n / batch_size) from the training set.
    pub iterations_per_epoch: Option<usize>,
    pub max_epochs: usize,
    pub seed: u64,
    pub disable_domain_branch: bool,
    pub disable_decorrelation: bool,
    pub alpha_override: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            loss: LossConfig::default(),
            base_lr: 1e-5,
            head_lr_multiplier: 10.0,
            weight_decay: 5e-4,
            batch_size: 15,
            iterations_per_epoch: None,
            max_epochs: 10,
            seed: 0,
            disable_domain_branch: false,
            disable_decorrelation: false,
            alpha_override: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.effective_loss().validate()?;
        if !(self.base_lr > 0.0) || !(self.head_lr_multiplier > 0.0) {
            return Err(DidError::Config("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DidError::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size < 2 {
            return Err(DidError::Config("batch_size must be at least 2".into()));
        }
        if self.max_epochs < 1 {
            return Err(DidError::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Loss config with the alpha override applied.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss;
        if let Some(alpha) = self.alpha_override {
            loss.alpha = alpha;
        }
        loss
    }

    pub fn active_branches(&self) -> ActiveBranches {
        ActiveBranches {
            domain: !self.disable_domain_branch,
            decorrelation: !self.disable_decorrelation,
        }
    }

    pub fn group_lr(&self, group: Group) -> f64 {
        match group {
            Group::Theta => self.base_lr,
            _ => self.base_lr * self.head_lr_multiplier,
        }
    }
}

/// Which optional branches participate in the training graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveBranches {
    pub domain: bool,
    pub decorrelation: bool,
}

impl ActiveBranches {
    pub fn all() -> Self {
        ActiveBranches {
            domain: true,
            decorrelation: true,
        }
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut groups = vec![Group::Theta, Group::Psi, Group::Omega];
        if self.domain {
            groups.push(Group::PhiDom);
            groups.push(Group::OmegaBar);
        }
        if self.decorrelation {
            groups.push(Group::PhiT);
        }
        groups
    }
}

/// Warm-up schedule for the reversal strength: 2 / (1 + e^(-5 e/E)) - 1.
pub fn beta_schedule(epoch: usize, max_epochs: usize) -> f64 {
    assert!(max_epochs >= 1, "max_epochs must be at least 1");
    assert!(epoch <= max_epochs, "epoch {epoch} beyond max {max_epochs}");
    let p = epoch as f64 / max_epochs as f64;
    2.0 / (1.0 + (-5.0 * p).exp()) - 1.0
}

// ---- registered model -------------------------------------------------------

pub struct ModelNodes {
    pub theta: BackboneNodes,
    pub psi: AttentionNodes,
    pub omega: HeadNodes,
    pub phi_dom: Option<AttentionNodes>,
    pub omega_bar: Option<HeadNodes>,
    pub phi_t: Option<StatisticNodes>,
}

/// Registers the parameter groups the active branches need on a fresh graph.
pub fn register_model(
    g: &mut Graph,
    params: &ParameterGroups,
    active: ActiveBranches,
) -> (ModelNodes, Ledger) {
    let mut ledger = Ledger::new();
    let theta = params.theta.register(g, &mut ledger);
    let psi = params.psi.register(g, "psi", &mut ledger);
    let omega = params.omega.register(g, "omega", &mut ledger);
    let phi_dom = active
        .domain
        .then(|| params.phi_dom.register(g, "phi_dom", &mut ledger));
    let omega_bar = active
        .domain
        .then(|| params.omega_bar.register(g, "omega_bar", &mut ledger));
    let phi_t = active
        .decorrelation
        .then(|| params.phi_t.register(g, &mut ledger));
    (
        ModelNodes {
            theta,
            psi,
            omega,
            phi_dom,
            omega_bar,
            phi_t,
        },
        ledger,
    )
}

// ---- batch assembly ---------------------------------------------------------

pub struct BatchData {
    /// [n, 1, S, S]
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub domain_targets: Vec<usize>,
}

impl BatchData {
    pub fn gather(dataset: &LoadedDataset, indices: &[usize]) -> Self {
        let samples: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
        BatchData::from_samples(&samples)
    }

    pub fn from_samples(samples: &[&Sample]) -> Self {
        assert!(!samples.is_empty(), "empty batch");
        let (h, w) = (samples[0].image.shape()[0], samples[0].image.shape()[1]);
        let mut data = Vec::with_capacity(samples.len() * h * w);
        let mut labels = Vec::with_capacity(samples.len());
        let mut domain_targets = Vec::with_capacity(samples.len());
        for s in samples {
            assert_eq!(s.image.shape(), &[h, w], "mixed image sizes in batch");
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
            domain_targets.push(s.domain_index());
        }
        BatchData {
            images: Tensor::from_vec(&[samples.len(), 1, h, w], data),
            labels,
            domain_targets,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---- loss graph ---------------------------------------------------------------

/// How the decorrelation term enters the minimized scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecorrelationPath {
    /// Training: the scalar contains -lambda_dec * MI and a GRL with the given
    /// beta sits between (I_df, I_os) and T.
    GrlTraining { beta: f64 },
    /// Gradient checking: the scalar is the plain weighted sum with
    /// +lambda_dec * MI and no GRL, so it is a true function of the parameters.
    PlainScalar,
}

pub struct LossGraph {
    pub total: NodeId,
    pub scores: NodeId,
    pub breakdown: LossBreakdown,
}

/// Single forward pass through every active branch, producing the minimized
/// scalar. `marginal_perm` permutes I_os within the batch for the MI marginal
/// statistics.
pub fn build_loss_graph(
    g: &mut Graph,
    nodes: &ModelNodes,
    batch: &BatchData,
    loss: &LossConfig,
    path: DecorrelationPath,
    marginal_perm: &[usize],
) -> Result<LossGraph> {
    let images = g.constant(batch.images.clone());
    let i_x = crate::model::backbone_forward(g, &nodes.theta, images);
    let (_m_df, i_df, i_os) = decompose(g, &nodes.psi, i_x);

    let scores = classify_df(g, &nodes.omega, i_df);
    let bce = g.bce_loss(scores, batch.labels.clone())?;
    let auc = g.auc_loss(scores, batch.labels.clone(), loss.gamma, loss.p)?;
    let mut terms = vec![
        (bce, loss.lambda_cls * loss.alpha),
        (auc, loss.lambda_cls * (1.0 - loss.alpha)),
    ];

    let mut l_dom = None;
    if let (Some(phi_dom), Some(omega_bar)) = (&nodes.phi_dom, &nodes.omega_bar) {
        let (_m_dom, i_dom) = domain_extract(g, phi_dom, i_os);
        let dlogits = classify_domain(g, omega_bar, i_dom);
        let ce = g.ce_loss(dlogits, batch.domain_targets.to_vec());
        terms.push((ce, loss.lambda_dom));
        l_dom = Some(g.value(ce).item());
    }

    let mut mi_estimate = None;
    if let Some(phi_t) = &nodes.phi_t {
        assert_eq!(
            marginal_perm.len(),
            batch.len(),
            "marginal permutation must cover the batch"
        );
        let (t_in_df, t_in_os, coeff) = match path {
            DecorrelationPath::GrlTraining { beta } => {
                (g.grl(i_df, beta), g.grl(i_os, beta), -loss.lambda_dec)
            }
            DecorrelationPath::PlainScalar => (i_df, i_os, loss.lambda_dec),
        };
        let t_joint = mi_statistic(g, phi_t, t_in_df, t_in_os);
        let os_shuffled = g.permute_batch(t_in_os, marginal_perm.to_vec());
        let t_marginal = mi_statistic(g, phi_t, t_in_df, os_shuffled);
        let mi = g.mi_jsd(t_joint, t_marginal)?;
        terms.push((mi, coeff));
        mi_estimate = Some(g.value(mi).item());
    }

    let total = g.weighted_sum(&terms);
    let breakdown = losses::total_loss(
        TotalLossInputs {
            l_bce: g.value(bce).item(),
            l_auc: g.value(auc).item(),
            l_dom,
            mi_estimate,
        },
        loss,
    );
    Ok(LossGraph {
        total,
        scores,
        breakdown,
    })
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    let checks = [
        ("l_bce", Some(b.l_bce)),
        ("l_auc", Some(b.l_auc)),
        ("l_cls", Some(b.l_cls)),
        ("l_dom", b.l_dom),
        ("mi_estimate", b.mi_estimate),
        ("l_total", Some(b.l_total)),
    ];
    for (name, v) in checks {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(DidError::Numeric(format!(
                    "non-finite loss term {name} = {v}"
                )));
            }
        }
    }
    Ok(())
}

// ---- optimizer -----------------------------------------------------------------

/// Adaptive-moment optimizer with decoupled weight decay and per-group
/// learning rates.
#[derive(Clone)]
pub struct AdamOptimizer {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    slots: BTreeMap<String, AdamSlot>,
}

#[derive(Clone)]
struct AdamSlot {
    m: Tensor,
    v: Tensor,
}

impl Default for AdamOptimizer {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamOptimizer {
    pub fn new() -> Self {
        AdamOptimizer {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// One update over the active groups. `grads` is keyed by parameter name.
    pub fn apply(
        &mut self,
        params: &mut ParameterGroups,
        grads: &BTreeMap<String, Tensor>,
        config: &TrainingConfig,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for group in config.active_branches().groups() {
            let lr = config.group_lr(group);
            for (name, tensor) in params.named_tensors_mut(group) {
                let Some(grad) = grads.get(&name) else {
                    continue;
                };
                let slot = self.slots.entry(name).or_insert_with(|| AdamSlot {
                    m: Tensor::zeros(tensor.shape()),
                    v: Tensor::zeros(tensor.shape()),
                });
                for i in 0..tensor.len() {
                    let g = grad.data()[i];
                    let m = &mut slot.m.data_mut()[i];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    let v = &mut slot.v.data_mut()[i];
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    let p = &mut tensor.data_mut()[i];
                    *p -= lr * (m_hat / (v_hat.sqrt() + self.eps))
                        + lr * config.weight_decay * *p;
                }
            }
        }
    }
}

// ---- train step and loop --------------------------------------------------------

/// Collects gradients out of the graph keyed by parameter name.
pub fn collect_grads(g: &Graph, ledger: &Ledger) -> BTreeMap<String, Tensor> {
    ledger
        .iter()
        .map(|(name, id)| (name.clone(), g.grad_or_zeros(*id)))
        .collect()
}

/// One forward/backward/update on a mixed-class batch.
pub fn train_step(
    params: &mut ParameterGroups,
    optimizer: &mut AdamOptimizer,
    batch: &BatchData,
    beta: f64,
    config: &TrainingConfig,
    marginal_perm: &[usize],
) -> Result<LossBreakdown> {
    let loss = config.effective_loss();
    let mut g = Graph::new();
    let (nodes, ledger) = register_model(&mut g, params, config.active_branches());
    let built = build_loss_graph(
        &mut g,
        &nodes,
        batch,
        &loss,
        DecorrelationPath::GrlTraining { beta },
        marginal_perm,
    )?;
    check_finite(&built.breakdown)?;
    g.backward(built.total);
    let grads = collect_grads(&g, &ledger);
    optimizer.apply(params, &grads, config);
    Ok(built.breakdown)
}

/// Per-epoch history entry: the mean loss breakdown over the epoch's steps
/// plus the validation AUC when a validation set is supplied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    #[serde(flatten)]
    pub mean_loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_auc: Option<f64>,
}

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len() as f64;
    let mean = |f: &dyn Fn(&LossBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| {
        steps
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|vs| vs.iter().sum::<f64>() / n)
    };
    LossBreakdown {
        l_auc: mean(&|b| b.l_auc),
        l_bce: mean(&|b| b.l_bce),
        l_cls: mean(&|b| b.l_cls),
        l_dom: mean_opt(&|b| b.l_dom),
        mi_estimate: mean_opt(&|b| b.mi_estimate),
        l_total: mean(&|b| b.l_total),
    }
}

/// Runs `max_epochs` over the training set, updating beta once per epoch.
/// Returns the final parameters and the per-epoch history.
pub fn train(
    model_config: &ModelConfig,
    train_set: &LoadedDataset,
    val_set: Option<&LoadedDataset>,
    config: &TrainingConfig,
) -> Result<(ParameterGroups, Vec<EpochRecord>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(DidError::Data("training set is empty".into()));
    }
    if config.batch_size < 4 && !config.disable_decorrelation {
        eprintln!(
            "warning: batch_size {} < 4 makes MI marginal permutations degenerate",
            config.batch_size
        );
    }
    let mut params = init_params(model_config, config)?;
    let mut optimizer = AdamOptimizer::new();
    let history = train_in_place(
        &mut params,
        &mut optimizer,
        model_config,
        train_set,
        val_set,
        config,
        &mut |_, _, _| Ok(()),
    )?;
    Ok((params, history))
}

/// Seeds fresh parameters the same way [`train`] does.
pub fn init_params(model_config: &ModelConfig, config: &TrainingConfig) -> Result<ParameterGroups> {
    ParameterGroups::init(model_config, derive_seed(config.seed, SEED_INIT))
}

/// Training loop over caller-owned parameters and optimizer state.
/// `on_epoch_end` sees the epoch record and the current state after each
/// epoch (the CLI uses it to write rolling checkpoints).
#[allow(clippy::too_many_arguments)]
pub fn train_in_place(
    params: &mut ParameterGroups,
    optimizer: &mut AdamOptimizer,
    model_config: &ModelConfig,
    train_set: &LoadedDataset,
    val_set: Option<&LoadedDataset>,
    config: &TrainingConfig,
    on_epoch_end: &mut dyn FnMut(&EpochRecord, &ParameterGroups, &AdamOptimizer) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let labels: Vec<u8> = train_set.samples.iter().map(|s| s.label).collect();
    let stream = BatchStream::new(
        labels,
        config.batch_size,
        derive_seed(config.seed, SEED_BATCHES),
    )?;
    let iterations = config
        .iterations_per_epoch
        .unwrap_or(train_set.len() / config.batch_size)
        .max(1);
    let mut perm_rng =
        ChaCha12Rng::seed_from_u64(derive_seed(config.seed, SEED_MARGINALS));
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut pass = 0u64;
    let mut queued: Vec<Vec<usize>> = Vec::new();

    for epoch in 0..config.max_epochs {
        let beta = beta_schedule(epoch, config.max_epochs);
        let mut step_records = Vec::with_capacity(iterations);
        for step in 0..iterations {
            if queued.is_empty() {
                queued = stream.epoch_batches(pass)?;
                queued.reverse(); // pop() consumes in shuffle order
                pass += 1;
            }
            let indices = queued.pop().expect("epoch_batches is never empty");
            let batch = BatchData::gather(train_set, &indices);
            let mut perm: Vec<usize> = (0..batch.len()).collect();
            perm.shuffle(&mut perm_rng);
            let breakdown = train_step(params, optimizer, &batch, beta, config, &perm)
                .map_err(|e| match e {
                    DidError::Numeric(msg) => DidError::Numeric(format!(
                        "{msg} (epoch {epoch}, step {step})"
                    )),
                    other => other,
                })?;
            step_records.push(breakdown);
        }
        let val_auc = match val_set {
            Some(val) => Some(validation_auc(model_config, params, val)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            beta,
            mean_loss: mean_breakdown(&step_records),
            val_auc,
        };
        on_epoch_end(&record, params, optimizer)?;
        history.push(record);
    }
    Ok(history)
}

fn validation_auc(
    model_config: &ModelConfig,
    params: &ParameterGroups,
    val: &LoadedDataset,
) -> Result<f64> {
    let scored = crate::eval::score_dataset(model_config, params, val)?;
    crate::eval::compute_auc(&scored.scores, &scored.labels)
}

// ---- checkpointing ---------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DIDC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
pub struct CheckpointState {
    pub model_config: ModelConfig,
    pub disable_domain_branch: bool,
    pub disable_decorrelation: bool,
    pub epoch: u64,
    pub beta: f64,
    pub config_hash: u64,
    pub params: ParameterGroups,
    pub optimizer: AdamOptimizer,
}

/// Hash of everything that must match between a checkpoint and the evaluating
/// configuration: model shape and ablation flags.
pub fn config_hash(
    model_config: &ModelConfig,
    disable_domain_branch: bool,
    disable_decorrelation: bool,
) -> u64 {
    #[derive(Serialize)]
    struct Hashed<'a> {
        model: &'a ModelConfig,
        no_domain: bool,
        no_decorrelation: bool,
    }
    let canon = serde_json::to_string(&Hashed {
        model: model_config,
        no_domain: disable_domain_branch,
        no_decorrelation: disable_decorrelation,
    })
    .expect("config serializes");
    fnv1a(canon.as_bytes())
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.iter() {
            self.f64(v);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DidError::Corrupt(
                "checkpoint truncated mid-record".into(),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(DidError::Corrupt(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        if len > (1 << 28) {
            return Err(DidError::Corrupt("implausible tensor volume".into()));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Ok(Tensor::from_vec(&shape, data))
    }
}

/// Serializes parameters and optimizer state behind a magic/version header.
/// The write is atomic (temp file + rename).
pub fn save_checkpoint(state: &CheckpointState, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(state.config_hash);
    let model_json = serde_json::to_vec(&state.model_config).expect("config serializes");
    w.bytes(&model_json);
    w.u32(u32::from(state.disable_domain_branch));
    w.u32(u32::from(state.disable_decorrelation));
    w.u64(state.epoch);
    w.f64(state.beta);
    w.u64(state.optimizer.step);

    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for group in Group::ALL {
        entries.extend(state.params.named_tensors(group));
    }
    w.u64(entries.len() as u64);
    for (name, tensor) in entries {
        w.bytes(name.as_bytes());
        w.tensor(tensor);
        match state.optimizer.slots.get(&name) {
            Some(slot) => {
                w.u32(1);
                w.tensor(&slot.m);
                w.tensor(&slot.v);
            }
            None => w.u32(0),
        }
    }

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &w.buf)
        .map_err(|e| DidError::io(format!("writing checkpoint {}", tmp.display()), e))?;
    fs::rename(&tmp, path)
        .map_err(|e| DidError::io(format!("renaming checkpoint into {}", path.display()), e))
}

/// Loads and validates a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| DidError::io(format!("opening checkpoint {}", path.display()), e))?
        .read_to_end(&mut buf)
        .map_err(|e| DidError::io(format!("reading checkpoint {}", path.display()), e))?;
    let mut r = ByteReader::new(&buf);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DidError::Corrupt(format!(
            "bad checkpoint magic {magic:02x?}; expected DIDC"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DidError::Corrupt(format!(
            "unsupported checkpoint format version {version}; this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let config_hash = r.u64()?;
    let model_config: ModelConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| DidError::Corrupt(format!("bad embedded model config: {e}")))?;
    let disable_domain_branch = r.u32()? != 0;
    let disable_decorrelation = r.u32()? != 0;
    let epoch = r.u64()?;
    let beta = r.f64()?;
    let adam_step = r.u64()?;

    let expected = config_hash_state(&model_config, disable_domain_branch, disable_decorrelation);
    if expected != config_hash {
        return Err(DidError::Corrupt(
            "checkpoint config hash does not match its own embedded config".into(),
        ));
    }

    // Template parameters give the authoritative shapes and names.
    let mut params = ParameterGroups::init(&model_config, 0)?;
    let mut optimizer = AdamOptimizer::new();
    optimizer.step = adam_step;
    let n_entries = r.u64()? as usize;
    let mut loaded: BTreeMap<String, (Tensor, Option<(Tensor, Tensor)>)> = BTreeMap::new();
    for _ in 0..n_entries {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|e| DidError::Corrupt(format!("non-UTF8 parameter name: {e}")))?;
        let tensor = r.tensor()?;
        let has_slot = r.u32()? != 0;
        let slot = if has_slot {
            Some((r.tensor()?, r.tensor()?))
        } else {
            None
        };
        loaded.insert(name, (tensor, slot));
    }
    if r.pos != buf.len() {
        return Err(DidError::Corrupt(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }
    for group in Group::ALL {
        for (name, tensor) in params.named_tensors_mut(group) {
            let Some((value, slot)) = loaded.remove(&name) else {
                return Err(DidError::Corrupt(format!(
                    "checkpoint is missing parameter {name}"
                )));
            };
            if value.shape() != tensor.shape() {
                return Err(DidError::Corrupt(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    tensor.shape()
                )));
            }
            *tensor = value;
            if let Some((m, v)) = slot {
                optimizer.slots.insert(name, AdamSlot { m, v });
            }
        }
    }
    if !loaded.is_empty() {
        return Err(DidError::Corrupt(format!(
            "checkpoint contains {} unknown parameters",
            loaded.len()
        )));
    }
    Ok(CheckpointState {
        model_config,
        disable_domain_branch,
        disable_decorrelation,
        epoch,
        beta,
        config_hash,
        params,
        optimizer,
    })
}

// Alias so load_checkpoint can call the hash without shadowing issues.
fn config_hash_state(model: &ModelConfig, no_dom: bool, no_dec: bool) -> u64 {
    config_hash(model, no_dom, no_dec)
}
