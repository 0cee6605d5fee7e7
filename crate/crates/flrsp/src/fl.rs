//! The federated learning engine: per-client local training, Bernoulli
//! parameter selection, FedSGD and FedAvg aggregation with mask-aware
//! normalization, and the update-ratio analysis.
//!
//! Sharing is always mask-shaped: a client update carries both its payload
//! and the binary selection pattern it was produced under, with an all-ones
//! mask standing in for "everything shared" (no defense, DP, fixed
//! position). Aggregation then has a single rule: sum the payloads, divide
//! by the per-coordinate count of contributing clients, and leave
//! coordinates nobody shared untouched. Division is by the mask count, never
//! by the client count, which is what keeps a realized update an unbiased
//! step and reduces the whole scheme to standard federated learning when
//! masking is off.

use serde::{Deserialize, Serialize};

use crate::data::{sample_indices, Dataset};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::params::ParamSet;
use crate::privacy::{dp_noise_stream, DpConfig};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Clients share one mini-batch gradient per round; the server applies
    /// the mask-normalized mean gradient step.
    FedSgd,
    /// Clients share locally trained parameters once per epoch; the server
    /// takes the mask-normalized mean.
    FedAvg,
}

/// Defense applied to every shared update, client-side, before sending.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defense {
    None,
    /// Random parameter selection: each scalar withheld (zeroed) with
    /// probability `r`, independently per client and round.
    Flrsp {
        r: f64,
    },
    /// Gaussian noise N(0, (sensitivity * sigma)^2) on every shared scalar.
    Dp {
        epsilon: f64,
        delta: f64,
        sensitivity: f64,
    },
    /// Freeze the ViT positional embedding by nulling its shared update.
    FixedPosition,
}

impl Defense {
    pub fn name(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Flrsp { .. } => "flrsp",
            Defense::Dp { .. } => "dp",
            Defense::FixedPosition => "fixed_position",
        }
    }
}

/// Per-(client, round) binary selection pattern over every scalar parameter.
/// Bits are stored as 0.0/1.0 in a `ParamSet` shaped like the model, so
/// masking and aggregation reuse the elementwise machinery.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub bits: ParamSet,
    pub zero_prob: f64,
    pub client: usize,
    pub round: usize,
}

impl Mask {
    /// The no-defense pattern: every bit set.
    pub fn all_ones(shape_of: &ParamSet, client: usize, round: usize) -> Mask {
        Mask {
            bits: shape_of.filled_like(1.0),
            zero_prob: 0.0,
            client,
            round,
        }
    }

    /// Fraction of bits that are zero.
    pub fn zero_fraction(&self) -> f64 {
        let zeros = self.bits.scalars().filter(|&b| b == 0.0).count();
        zeros as f64 / self.bits.num_scalars() as f64
    }
}

/// Draw the selection pattern for one client and round: each bit is 0 with
/// probability `r`, independently, on the stream (seed, "mask", client,
/// round) — regeneratable without storage and independent of every other
/// stream.
pub fn sample_mask(
    r: f64,
    shape_of: &ParamSet,
    client: usize,
    round: usize,
    root_seed: u64,
) -> Result<Mask> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!(
            "zero probability R must lie in [0,1], got {r}"
        )));
    }
    let mut rng = seed::rng(root_seed, "mask", &[client as u64, round as u64]);
    let mut bits = shape_of.zeros_like();
    for (_, t) in bits.iter_mut() {
        for b in t.data_mut() {
            *b = if rand::Rng::random::<f64>(&mut rng) < r {
                0.0
            } else {
                1.0
            };
        }
    }
    Ok(Mask {
        bits,
        zero_prob: r,
        client,
        round,
    })
}

/// Elementwise product of an update with the mask bits.
pub fn mask_update(update: &ParamSet, mask: &Mask) -> Result<ParamSet> {
    update.zip_with(&mask.bits, |v, b| v * b)
}

/// What one client sends for one round: masked payload plus the mask it was
/// produced under. The payload is gradients under FedSGD and parameters
/// under FedAvg.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub payload: ParamSet,
    pub mask: Mask,
}

/// Order updates by client id so aggregation sums never depend on arrival
/// order, then fold payloads and mask counts.
fn sum_updates(updates: &[ClientUpdate]) -> Result<(ParamSet, ParamSet)> {
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client);
    let mut payload_sum = updates[order[0]].payload.zeros_like();
    let mut bit_sum = payload_sum.clone();
    for &i in &order {
        let u = &updates[i];
        payload_sum = payload_sum.zip_with(&u.payload, |a, b| a + b)?;
        bit_sum = bit_sum.zip_with(&u.mask.bits, |a, b| a + b)?;
    }
    Ok((payload_sum, bit_sum))
}

/// Three-way elementwise map over same-shaped sets (current value, payload
/// sum, bit sum), used by both aggregation rules.
fn compose3(
    w: &ParamSet,
    a: &ParamSet,
    b: &ParamSet,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<ParamSet> {
    let mut out = w.clone();
    for (name, tw) in out.iter_mut() {
        let ta = a.tensor(name)?;
        let tb = b.tensor(name)?;
        if ta.shape() != tw.shape() || tb.shape() != tw.shape() {
            return Err(Error::shape(
                format!("aggregation at {name}"),
                format!("{:?}", tw.shape()),
                format!("{:?}", ta.shape()),
            ));
        }
        for ((vw, va), vb) in tw.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
            *vw = f(*vw, *va, *vb);
        }
    }
    Ok(out)
}

/// One FedSGD aggregation step: per scalar, if any client shared the
/// coordinate, w moves by -eta times the mean of the shared gradients (mean
/// over the sharing clients, not over all clients); otherwise w is
/// bit-identical to before.
pub fn aggregate_fedsgd(w: &ParamSet, updates: &[ClientUpdate], eta: f64) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::Config(
            "aggregate_fedsgd needs at least one update".into(),
        ));
    }
    let (payload_sum, bit_sum) = sum_updates(updates)?;
    compose3(w, &payload_sum, &bit_sum, |wv, p, b| {
        if b > 0.0 {
            wv - eta * (p / b)
        } else {
            wv
        }
    })
}

/// One FedAvg aggregation step: per scalar, the mean of the shared parameter
/// values over the sharing clients, or the previous global value if nobody
/// shared the coordinate.
pub fn aggregate_fedavg(updates: &[ClientUpdate], prev: &ParamSet) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::Config(
            "aggregate_fedavg needs at least one update".into(),
        ));
    }
    let (payload_sum, bit_sum) = sum_updates(updates)?;
    compose3(prev, &payload_sum, &bit_sum, |wv, p, b| {
        if b > 0.0 {
            p / b
        } else {
            wv
        }
    })
}

/// Expected step scaling under random selection: eta' = eta (1 - R^N).
pub fn effective_lr(eta: f64, r: f64, n: usize) -> f64 {
    eta * (1.0 - r.powi(n as i32))
}

/// G(f): the probability that a given scalar parameter is updated in exactly
/// `f` of `M` rounds when each of `N` clients independently withholds it
/// with probability `R` per round — Binomial(M, 1 - R^N).
pub fn update_ratio(m: usize, n: usize, r: f64, f: usize) -> f64 {
    assert!(f <= m, "update count {f} exceeds round count {m}");
    let p_update = 1.0 - r.powi(n as i32);
    binomial(m, f) * p_update.powi(f as i32) * (1.0 - p_update).powi((m - f) as i32)
}

/// Update-count distribution when every client reuses one fixed mask in all
/// rounds: a parameter is either never updated (probability R) or updated in
/// every round (probability 1 - R).
pub fn frozen_weights_ratio(m: usize, _n: usize, r: f64, f: usize) -> f64 {
    assert!(f <= m, "update count {f} exceeds round count {m}");
    if f == 0 {
        r
    } else if f == m {
        1.0 - r
    } else {
        0.0
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 1..=k {
        acc = acc * (n - k + i) as f64 / i as f64;
    }
    acc
}

/// Empirical histogram of per-parameter update counts over `trials`
/// independent scalars, produced by the real mask-sampling path: for each of
/// `m` rounds, a parameter counts as updated if any of the `n` clients kept
/// it. Returns counts indexed by f = 0..=m.
pub fn simulate_update_counts(
    m: usize,
    n: usize,
    r: f64,
    trials: usize,
    root_seed: u64,
) -> Result<Vec<usize>> {
    let mut proto = ParamSet::new();
    proto.push("p", Tensor::zeros(&[trials]))?;
    let mut updated = vec![0usize; trials];
    for round in 0..m {
        let mut any = vec![false; trials];
        for client in 0..n {
            let mask = sample_mask(r, &proto, client, round, root_seed)?;
            for (slot, &bit) in any.iter_mut().zip(mask.bits.tensor("p")?.data()) {
                *slot |= bit == 1.0;
            }
        }
        for (count, hit) in updated.iter_mut().zip(&any) {
            *count += usize::from(*hit);
        }
    }
    let mut hist = vec![0usize; m + 1];
    for f in updated {
        hist[f] += 1;
    }
    Ok(hist)
}

// ── training loop ────────────────────────────────────────────────────────

/// Everything the training loop needs; the experiment harness builds this
/// from its JSON config.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub aggregation: Aggregation,
    pub defense: Defense,
    pub clients: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Root seed; init, batches, masks, and noise draw from independent
    /// streams derived from it.
    pub seed: u64,
    /// Keep a global-parameter snapshot every this many rounds.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

/// Per-round trace of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_losses: Vec<f64>,
    pub accuracy: f64,
    /// Fraction of withheld bits across all client updates this round.
    pub masked_fraction: f64,
}

/// Full trace of a training run: per-round records, parameter snapshots,
/// and per-scalar update counters for the G(f) analysis.
#[derive(Clone, Debug)]
pub struct RoundHistory {
    pub records: Vec<RoundRecord>,
    pub snapshots: Vec<(usize, ParamSet)>,
    pub init_params: ParamSet,
    pub final_params: ParamSet,
    /// Number of rounds in which each scalar received an update.
    pub update_counts: ParamSet,
}

impl RoundHistory {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map(|r| r.accuracy).unwrap_or(0.0)
    }

    /// First round index reaching the accuracy threshold, if any.
    pub fn rounds_to_accuracy(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.accuracy >= threshold)
            .map(|r| r.round)
    }
}

/// Divergence guard bounds.
const LOSS_ABORT: f64 = 1e6;

/// The six-step loop: distribute the global model, train locally, select
/// parameters, send, aggregate, repeat. One aggregation round per epoch:
/// FedSGD shares one seeded mini-batch gradient per client per round,
/// FedAvg shares parameters after one local epoch of mini-batch SGD.
/// `eval` is the dataset accuracy is reported on.
pub fn run_training(cfg: &TrainConfig, shards: &[Dataset], eval: &Dataset) -> Result<RoundHistory> {
    if shards.len() != cfg.clients || cfg.clients == 0 {
        return Err(Error::Config(format!(
            "expected {} client shards, got {}",
            cfg.clients,
            shards.len()
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    if let Defense::Flrsp { r } = cfg.defense {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!(
                "zero probability R must lie in [0,1], got {r}"
            )));
        }
    }
    if matches!(cfg.defense, Defense::FixedPosition) && cfg.model.as_vit().is_none() {
        return Err(Error::Config(
            "fixed-position defense requires a ViT model".into(),
        ));
    }

    let model = Model::build(&cfg.model, cfg.seed)?;
    let mut w = model.init_params();
    let init_params = w.clone();
    let mut update_counts = w.zeros_like();
    let mut history = RoundHistory {
        records: Vec::with_capacity(cfg.epochs),
        snapshots: Vec::new(),
        init_params: init_params.clone(),
        final_params: w.clone(),
        update_counts: update_counts.clone(),
    };

    let eval_samples: Vec<(&Tensor, usize)> = eval.samples().collect();

    for round in 0..cfg.epochs {
        let mut updates = Vec::with_capacity(cfg.clients);
        let mut losses = Vec::with_capacity(cfg.clients);
        for (client, shard) in shards.iter().enumerate() {
            let (loss, payload) = match cfg.aggregation {
                Aggregation::FedSgd => client_gradient(&model, &w, shard, cfg, client, round)?,
                Aggregation::FedAvg => client_local_epoch(&model, &w, shard, cfg, client, round)?,
            };
            if !loss.is_finite() || loss > LOSS_ABORT {
                return Err(Error::Numerical {
                    round,
                    detail: format!("client {client} loss {loss} beyond abort bound"),
                });
            }
            losses.push(loss);
            updates.push(apply_defense(payload, cfg, &w, client, round)?);
        }

        let new_w = match cfg.aggregation {
            Aggregation::FedSgd => aggregate_fedsgd(&w, &updates, cfg.learning_rate)?,
            Aggregation::FedAvg => aggregate_fedavg(&updates, &w)?,
        };
        if !new_w.is_finite() {
            return Err(Error::Numerical {
                round,
                detail: "aggregated parameters are not finite".into(),
            });
        }
        w = new_w;

        // Track per-scalar update counts: a coordinate counts when any
        // client's mask kept it this round.
        let (_, bit_sum) = sum_updates(&updates)?;
        update_counts = update_counts.zip_with(&bit_sum, |c, b| c + f64::from(b > 0.0))?;

        let masked_total: f64 = updates.iter().map(|u| u.mask.zero_fraction()).sum();
        let accuracy = model.accuracy_on(&w, &eval_samples)?;
        history.records.push(RoundRecord {
            round,
            client_losses: losses,
            accuracy,
            masked_fraction: masked_total / cfg.clients as f64,
        });
        if let Some(every) = cfg.snapshot_every {
            if every > 0 && (round + 1) % every == 0 {
                history.snapshots.push((round, w.clone()));
            }
        }
    }

    history.final_params = w;
    history.update_counts = update_counts;
    Ok(history)
}

/// FedSGD client step: gradient of one seeded mini-batch at the current
/// global parameters.
fn client_gradient(
    model: &Model,
    w: &ParamSet,
    shard: &Dataset,
    cfg: &TrainConfig,
    client: usize,
    round: usize,
) -> Result<(f64, ParamSet)> {
    let mut rng = seed::rng(cfg.seed, "batch", &[client as u64, round as u64]);
    let indices = sample_indices(shard.len(), cfg.batch_size, &mut rng);
    let batch: Vec<(&Tensor, usize)> = indices
        .iter()
        .map(|&i| (shard.image(i), shard.label(i)))
        .collect();
    model.batch_loss_and_grads(w, &batch)
}

/// FedAvg client step: one local epoch of mini-batch SGD starting from the
/// global parameters; returns mean batch loss and the trained parameters.
fn client_local_epoch(
    model: &Model,
    w: &ParamSet,
    shard: &Dataset,
    cfg: &TrainConfig,
    client: usize,
    round: usize,
) -> Result<(f64, ParamSet)> {
    let mut rng = seed::rng(cfg.seed, "batch", &[client as u64, round as u64]);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut local = w.clone();
    let mut losses = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<(&Tensor, usize)> = chunk
            .iter()
            .map(|&i| (shard.image(i), shard.label(i)))
            .collect();
        let (loss, grads) = model.batch_loss_and_grads(&local, &batch)?;
        losses.push(loss);
        local = local.zip_with(&grads, |p, g| p - cfg.learning_rate * g)?;
    }
    Ok((losses.iter().sum::<f64>() / losses.len() as f64, local))
}

/// Client-side defense stage between local training and send.
fn apply_defense(
    payload: ParamSet,
    cfg: &TrainConfig,
    global: &ParamSet,
    client: usize,
    round: usize,
) -> Result<ClientUpdate> {
    match &cfg.defense {
        Defense::None => Ok(ClientUpdate {
            client,
            mask: Mask::all_ones(&payload, client, round),
            payload,
        }),
        Defense::Flrsp { r } => {
            let mask = sample_mask(*r, &payload, client, round, cfg.seed)?;
            let payload = mask_update(&payload, &mask)?;
            Ok(ClientUpdate {
                client,
                payload,
                mask,
            })
        }
        Defense::Dp {
            epsilon,
            delta,
            sensitivity,
        } => {
            let dp = DpConfig {
                epsilon: *epsilon,
                delta: *delta,
                sensitivity: *sensitivity,
                seed: cfg.seed,
            };
            let noisy = dp_noise_stream(&payload, &dp, &[client as u64, round as u64])?;
            Ok(ClientUpdate {
                client,
                mask: Mask::all_ones(&noisy, client, round),
                payload: noisy,
            })
        }
        Defense::FixedPosition => {
            // Null the positional-embedding share: zero its gradient under
            // FedSGD; return the received global values under FedAvg so the
            // parameter delta is zero either way.
            let mut payload = payload;
            match cfg.aggregation {
                Aggregation::FedSgd => {
                    payload = crate::privacy::fixed_position_filter(&payload, &cfg.model)?;
                }
                Aggregation::FedAvg => {
                    payload.set("E_pos", global.tensor("E_pos")?.clone())?;
                }
            }
            Ok(ClientUpdate {
                client,
                mask: Mask::all_ones(&payload, client, round),
                payload,
            })
        }
    }
}
