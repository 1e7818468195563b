//! Epoch loop: batching, AdamW, momentum updates, the negative queue,
//! λ scheduling, early stopping and diagnostics. Also model evaluation.

mod checkpoint;
mod optim;

use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{Dataset, DD, FF, GFF};
use crate::encoder::{masked_window, Encoder, GraphContext, PropagatedFrames, WindowInput};
use crate::error::{Error, Result};
use crate::features::{decode_targets, make_windows, FeatureStore, NormStats, TARGETS_PER_LEAD};
use crate::geo_graph::NodeSet;
use crate::metrics::{angular_error, EvalReport, Variable};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::objectives::{
    info_nce, info_nce_in_window, pair_distances, supervised_mse, total_loss, ContrastiveConfig, LambdaSchedule,
    MoCoQueue, PairDistances, Strategy,
};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWConfig, PlateauScheduler};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_MASK: u64 = 3;
const DIVERGENCE_EPOCHS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    /// Width of the node embeddings.
    pub embed_dim: usize,
    /// Step between consecutive training window anchors.
    pub stride: usize,
    /// Trailing share of the time axis used for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 200,
            early_stop_patience: 15,
            plateau_patience: 5,
            plateau_factor: 0.5,
            seed: 0,
            embed_dim: 64,
            stride: 1,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.stride == 0 || self.embed_dim == 0 {
            return Err(Error::Config("batch_size, stride and embed_dim must be at least 1".into()));
        }
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub train_sup_loss: f64,
    pub train_contrast_loss: f64,
    pub lambda: f64,
    pub train_mae_dd: f64,
    pub train_mae_ff: f64,
    pub train_mae_gff: f64,
    pub lr: f64,
    pub pos_dist: f64,
    pub neg_dist: f64,
    pub val_loss: f64,
    pub skipped_steps: u64,
}

impl EpochDiagnostics {
    /// Mean of the three training MAEs, the quantity gating λ.
    pub fn mean_mae(&self) -> f64 {
        (self.train_mae_dd + self.train_mae_ff + self.train_mae_gff) / 3.0
    }
}

pub fn write_diagnostics_csv<W: std::io::Write>(rows: &[EpochDiagnostics], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Everything prepared from data and graph that training and evaluation read.
pub struct ModelData {
    pub store: FeatureStore,
    pub frames: PropagatedFrames<f64>,
    pub graph: GraphContext<f64>,
    pub nodes: NodeSet,
    pub stats: NormStats,
    /// Nearest real node of every virtual node, in `graph.virtual_nodes` order.
    pub pairing: Arc<[usize]>,
    /// Position of each paired node within `graph.real`.
    pub pairing_pos: Arc<[usize]>,
}

impl ModelData {
    pub fn new(store: FeatureStore, frames: PropagatedFrames<f64>, graph: GraphContext<f64>, nodes: NodeSet, stats: NormStats) -> Result<Self> {
        let mut pairing = Vec::with_capacity(graph.virtual_nodes.len());
        let mut pairing_pos = Vec::with_capacity(graph.virtual_nodes.len());
        for &v in graph.virtual_nodes.iter() {
            let (r, _) = *nodes
                .nearest_real(&nodes.node(v).location, 1, None)
                .first()
                .ok_or_else(|| Error::Data("no real node to pair with".into()))?;
            pairing.push(r);
            pairing_pos.push(graph.real.iter().position(|&x| x == r).expect("real node"));
        }
        Ok(Self { store, frames, graph, nodes, stats, pairing: pairing.into(), pairing_pos: pairing_pos.into() })
    }

    pub fn input(&self, anchor: usize) -> Result<WindowInput<f64>> {
        Ok(WindowInput { propagated: self.frames.window(anchor)?, lag: self.store.lag_matrix(anchor)?, static_mask: None })
    }

    /// Anchor splitting the time axis into training and validation parts.
    pub fn validation_start(&self, val_fraction: f64) -> usize {
        let n = self.store.n_steps();
        n - (n as f64 * val_fraction).floor() as usize
    }

    /// Node origins, used to check that a checkpoint matches the data.
    pub fn signature(&self) -> Vec<String> {
        self.nodes.nodes().iter().map(|n| n.origin.to_string()).collect()
    }
}

/// Parameters and settings of one learned configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub params: ParamStore<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub diagnostics: Vec<EpochDiagnostics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Default)]
struct EpochAccum {
    sup: f64,
    contrast: f64,
    n_windows: usize,
    n_contrast: usize,
    abs_err: [f64; 3],
    n_err: [usize; 3],
    pairs: PairDistances,
}

struct WindowStep {
    sup: f64,
    contrast: Option<f64>,
    keys: Option<Matrix<f64>>,
}

struct Trainer<'a> {
    data: &'a ModelData,
    contrastive: &'a ContrastiveConfig,
    encoder: Encoder,
    queue: Option<MoCoQueue<f64>>,
    key_params: Option<ParamStore<f64>>,
    mask_rng: ChaCha8Rng,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adds the decoded absolute errors of `pred` against `target` (both
/// `|V_r| × (t_out·4)` encoded) to `acc`.
fn add_errors(pred: &Matrix<f64>, target: &Matrix<f64>, stats: &NormStats, acc: &mut EpochAccum) {
    for (p, y) in pred.as_slice().chunks(TARGETS_PER_LEAD).zip(target.as_slice().chunks(TARGETS_PER_LEAD)) {
        let (p, y) = (decode_targets(p, stats), decode_targets(y, stats));
        if !y.direction_undefined {
            acc.abs_err[0] += angular_error(p.dd, y.dd);
            acc.n_err[0] += 1;
        }
        acc.abs_err[1] += (p.ff - y.ff).abs();
        acc.abs_err[2] += (p.gff - y.gff).abs();
        acc.n_err[1] += 1;
        acc.n_err[2] += 1;
    }
}

/// Pair distances when every query row `i` has `keys[positive[i]]` as its
/// positive and all other key rows as negatives.
fn in_window_distances(q: &Matrix<f64>, keys: &Matrix<f64>, positive: &[usize]) -> PairDistances {
    let mut total = PairDistances::default();
    for (i, &p) in positive.iter().enumerate() {
        let qi = q.select_rows(&[i]);
        let negs: Vec<usize> = (0..keys.rows()).filter(|&j| j != p).collect();
        total.merge(&pair_distances(&qi, &keys.select_rows(&[p]), &keys.select_rows(&negs)));
    }
    total
}

impl<'a> Trainer<'a> {
    fn augmented_key_input(&mut self, anchor: usize, lag: &Matrix<f64>) -> Result<WindowInput<f64>> {
        let store = &self.data.store;
        let (n, w) = (store.n_nodes(), store.layout.width());
        let keep = 1.0 - self.contrastive.mask_ratio;
        let mask_data: Vec<f64> = (0..n * w).map(|_| if self.mask_rng.gen_bool(keep) { 1.0 } else { 0.0 }).collect();
        let mask = Matrix::from_vec(n, w, mask_data)?;
        let sw = store.layout.step_width();
        let static_cols: Vec<f64> = (0..n).flat_map(|i| mask.row(i)[sw..].to_vec()).collect();
        Ok(WindowInput {
            propagated: masked_window(&self.data.graph.s, store, anchor, &mask)?,
            lag: lag.clone(),
            static_mask: Some(Matrix::from_vec(n, w - sw, static_cols)?),
        })
    }

    /// Contrastive branch of one window. Returns the loss variable, the key
    /// rows to enqueue and the pair distances.
    fn contrast(
        &mut self,
        tape: &mut Tape<f64>,
        params: &ParamStore<f64>,
        anchor: usize,
        input: &WindowInput<f64>,
        h: Var,
    ) -> Result<Option<(Var, Option<Matrix<f64>>, PairDistances)>> {
        let c = self.contrastive;
        let data = self.data;
        let g = &data.graph;
        let tau = c.tau;
        match c.strategy {
            Strategy::None => Ok(None),
            Strategy::Augmented => {
                let key_input = self.augmented_key_input(anchor, &input.lag)?;
                if let (Some(queue), Some(kp)) = (&self.queue, &self.key_params) {
                    let k = self.encoder.embed_constant(kp, g, &key_input)?;
                    let negatives = queue.to_matrix();
                    let pairs = pair_distances(tape.value(h), &k, &negatives);
                    let kv = tape.constant(k.clone());
                    let loss = info_nce(tape, h, kv, &negatives, tau, c.denominator)?;
                    Ok(Some((loss, Some(k), pairs)))
                } else {
                    let kh = self.encoder.forward(tape, params, g, &key_input, false)?.h;
                    let identity: Arc<[usize]> = (0..g.n()).collect();
                    let pairs = in_window_distances(tape.value(h), tape.value(kh), &identity);
                    let loss = info_nce_in_window(tape, h, kh, &identity, tau, c.denominator)?;
                    Ok(Some((loss, None, pairs)))
                }
            }
            Strategy::Multistep => {
                let later = anchor + c.offset;
                if !data.store.window_valid(later, false) {
                    return Ok(None);
                }
                let key_input = data.input(later)?;
                let q = tape.gather_rows(h, &g.virtual_nodes)?;
                if let (Some(queue), Some(kp)) = (&self.queue, &self.key_params) {
                    let k_all = self.encoder.embed_constant(kp, g, &key_input)?;
                    let k = k_all.select_rows(&data.pairing);
                    let negatives = queue.to_matrix();
                    let pairs = pair_distances(tape.value(q), &k, &negatives);
                    let kv = tape.constant(k);
                    let loss = info_nce(tape, q, kv, &negatives, tau, c.denominator)?;
                    Ok(Some((loss, Some(k_all), pairs)))
                } else {
                    let kh = self.encoder.forward(tape, params, g, &key_input, false)?.h;
                    let keys = tape.gather_rows(kh, &g.real)?;
                    let pairs = in_window_distances(tape.value(q), tape.value(keys), &data.pairing_pos);
                    let loss = info_nce_in_window(tape, q, keys, &data.pairing_pos, tau, c.denominator)?;
                    Ok(Some((loss, None, pairs)))
                }
            }
        }
    }

    /// Forward and backward pass of one window; gradients are accumulated
    /// into `params`.
    fn window_step(&mut self, params: &mut ParamStore<f64>, anchor: usize, lambda: f64, acc: &mut EpochAccum) -> Result<WindowStep> {
        let data = self.data;
        let input = data.input(anchor)?;
        let target = data.store.targets(anchor)?;
        let mut tape = Tape::new();
        let out = self.encoder.forward(&mut tape, params, &data.graph, &input, true)?;
        let pred = tape.gather_rows(out.out.expect("prediction head"), &data.graph.real)?;
        let sup = supervised_mse(&mut tape, pred, &target)?;
        add_errors(tape.value(pred), &target, &data.stats, acc);
        let contrast = self.contrast(&mut tape, params, anchor, &input, out.h)?;
        let (cvar, keys) = match contrast {
            Some((v, keys, pairs)) => {
                acc.pairs.merge(&pairs);
                (Some(v), keys)
            }
            None => (None, None),
        };
        let loss = total_loss(&mut tape, sup, cvar, lambda)?;
        tape.backward(loss)?.accumulate_into(params)?;
        Ok(WindowStep {
            sup: tape.value(sup).item()?,
            contrast: cvar.map(|v| tape.value(v).item()).transpose()?,
            keys,
        })
    }
}

/// Mean supervised loss over the validation windows.
pub fn validation_loss(model: &Model, data: &ModelData, anchors: &[usize]) -> Result<f64> {
    if anchors.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &t in anchors {
        let pred = model.encoder.predict(&model.params, &data.graph, &data.input(t)?)?;
        let pred = pred.select_rows(&data.graph.real);
        let target = data.store.targets(t)?;
        let diff = pred.zip_map(&target, "validation", |a, b| (a - b) * (a - b))?;
        total += diff.sum() / target.rows() as f64;
    }
    Ok(total / anchors.len() as f64)
}

/// Fresh parameters for `data` with the given embedding width.
pub fn init_model(data: &ModelData, embed_dim: usize, seed: u64) -> Result<Model> {
    let mut rng = seeded(seed, STREAM_INIT);
    let mut params = ParamStore::new();
    let encoder = Encoder::init(&mut params, data.store.layout, embed_dim, data.graph.virtual_nodes.len(), &mut rng)?;
    Ok(Model { encoder, params })
}

pub fn train(
    data: &ModelData,
    config: &TrainConfig,
    contrastive: &ContrastiveConfig,
    schedule: &LambdaSchedule,
) -> Result<TrainOutcome> {
    train_with(data, config, contrastive, schedule, |_| {})
}

/// Runs the epoch loop, calling `on_epoch` after every completed epoch.
pub fn train_with(
    data: &ModelData,
    config: &TrainConfig,
    contrastive: &ContrastiveConfig,
    schedule: &LambdaSchedule,
    mut on_epoch: impl FnMut(&EpochDiagnostics),
) -> Result<TrainOutcome> {
    config.validate()?;
    contrastive.validate()?;
    schedule.validate()?;
    let val_start = data.validation_start(config.val_fraction);
    let mut windows: Vec<usize> = make_windows(&data.store, 0..val_start, config.stride).into_iter().map(|w| w.anchor).collect();
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let val_windows: Vec<usize> =
        make_windows(&data.store, val_start..data.store.n_steps(), config.stride).into_iter().map(|w| w.anchor).collect();
    if val_windows.is_empty() {
        warn!("no validation windows; early stopping monitors the training loss");
    }
    info!("{} training and {} validation windows", windows.len(), val_windows.len());

    let mut model = init_model(data, config.embed_dim, config.seed)?;
    let moco = contrastive.use_moco && contrastive.strategy != Strategy::None;
    let mut trainer = Trainer {
        data,
        contrastive,
        encoder: model.encoder,
        queue: moco.then(|| MoCoQueue::new(contrastive.queue_size, config.embed_dim)),
        key_params: moco.then(|| model.params.clone()),
        mask_rng: seeded(config.seed, STREAM_MASK),
    };
    let mut shuffle_rng = seeded(config.seed, STREAM_SHUFFLE);
    let mut opt = AdamW::new(config.adamw(), &model.params);
    let mut plateau = PlateauScheduler::new(config.plateau_factor, config.plateau_patience);
    let mut diagnostics: Vec<EpochDiagnostics> = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since_best = 0;
    let mut non_finite = 0;
    let momentum = contrastive.momentum;

    for epoch in 0..config.max_epochs {
        let prev_mae = diagnostics.last().map_or(f64::NAN, EpochDiagnostics::mean_mae);
        let lambda = schedule.value(epoch, prev_mae);
        windows.shuffle(&mut shuffle_rng);
        let mut acc = EpochAccum::default();
        for batch in windows.chunks(config.batch_size) {
            model.params.zero_grad();
            let mut keys = Vec::new();
            for &t in batch {
                let step = trainer.window_step(&mut model.params, t, lambda, &mut acc)?;
                acc.sup += step.sup;
                acc.n_windows += 1;
                if let Some(c) = step.contrast {
                    acc.contrast += c;
                    acc.n_contrast += 1;
                }
                keys.extend(step.keys);
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            opt.step(&mut model.params)?;
            if let Some(kp) = trainer.key_params.as_mut() {
                crate::encoder::momentum_update(&model.params, kp, momentum)?;
            }
            if let Some(queue) = trainer.queue.as_mut() {
                for k in &keys {
                    queue.push(k)?;
                }
            }
        }
        model.params.zero_grad();
        let sup = acc.sup / acc.n_windows as f64;
        let val_loss = validation_loss(&model, data, &val_windows)?;
        let mae = |i: usize| acc.abs_err[i] / acc.n_err[i].max(1) as f64;
        let record = EpochDiagnostics {
            epoch,
            train_sup_loss: sup,
            train_contrast_loss: if acc.n_contrast > 0 { acc.contrast / acc.n_contrast as f64 } else { 0.0 },
            lambda,
            train_mae_dd: mae(0),
            train_mae_ff: mae(1),
            train_mae_gff: mae(2),
            lr: opt.lr(),
            pos_dist: acc.pairs.pos_dist,
            neg_dist: acc.pairs.neg_dist,
            val_loss,
            skipped_steps: opt.skipped_steps,
        };
        info!(
            "epoch {epoch}: sup {:.5} contrast {:.5} lambda {:.4} lr {:.2e} val {:.5}",
            record.train_sup_loss, record.train_contrast_loss, lambda, record.lr, val_loss
        );
        on_epoch(&record);
        diagnostics.push(record);

        let total = sup + lambda * acc.contrast / acc.n_contrast.max(1) as f64;
        if !total.is_finite() {
            non_finite += 1;
            if non_finite >= DIVERGENCE_EPOCHS {
                return Err(Error::Numerical(format!("loss non-finite for {DIVERGENCE_EPOCHS} consecutive epochs")));
            }
            continue;
        }
        non_finite = 0;
        let monitored = if val_windows.is_empty() { sup } else { val_loss };
        if monitored < best.0 {
            best = (monitored, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                info!("early stop at epoch {epoch}; best epoch {}", best.1);
                break;
            }
        }
        let lr = plateau.observe(total, opt.lr());
        opt.set_lr(lr);
    }
    let (best_val_loss, best_epoch, params) = best;
    if best_val_loss.is_finite() {
        model.params = params;
    }
    Ok(TrainOutcome { model, diagnostics, best_epoch, best_val_loss })
}

/// Anchors at which every method is evaluated: complete inputs at all real
/// nodes and all leads inside the record.
pub fn eval_anchors(store: &FeatureStore, stride: usize) -> Vec<usize> {
    let (t_in, t_out) = (store.layout.t_in, store.layout.t_out);
    let n = store.n_steps();
    if n < t_in + t_out {
        return Vec::new();
    }
    (t_in - 1..n - t_out).step_by(stride.max(1)).filter(|&t| store.window_valid(t, false)).collect()
}

/// Raw observation of `station` at step `t` for `variable`.
pub fn observed(dataset: &Dataset, station: &str, t: usize, variable: Variable) -> Option<f64> {
    let idx = match variable {
        Variable::Direction => DD,
        Variable::Speed => FF,
        Variable::Gust => GFF,
    };
    dataset.station(station)?.get(t, idx)
}

/// Decodes predictions at the test-replacement nodes and scores them
/// against the withheld observations.
pub fn evaluate_model(model: &Model, data: &ModelData, dataset: &Dataset, anchors: &[usize], method: &str) -> Result<EvalReport> {
    if model.encoder.layout != data.store.layout {
        return Err(Error::Contract("model layout does not match the feature layout".into()));
    }
    let tests = data.nodes.test_nodes();
    if tests.is_empty() {
        return Err(Error::Contract("no withheld stations to evaluate".into()));
    }
    for (_, id) in &tests {
        if dataset.station(id).is_none() {
            return Err(Error::Contract(format!("withheld station {id} not in dataset")));
        }
    }
    let t_out = data.store.layout.t_out;
    let mut report = EvalReport::new();
    for &t in anchors {
        let pred = model.encoder.predict(&model.params, &data.graph, &data.input(t)?)?;
        for &(node, station) in &tests {
            let row = pred.row(node);
            for l in 0..t_out {
                let d = decode_targets(&row[l * TARGETS_PER_LEAD..(l + 1) * TARGETS_PER_LEAD], &data.stats);
                let at = t + 1 + l;
                let time = dataset.timestamp(at);
                for v in Variable::ALL {
                    if let Some(truth) = observed(dataset, station, at, v) {
                        report.add(method, v, l + 1, station, time, crate::baselines::pick(&d, v), truth);
                    }
                }
            }
        }
    }
    Ok(report)
}
