//! In-process simulation of the federated protocol with byte accounting.
//!
//! One round:
//!
//! 1. The server broadcasts `theta_global` to every client.
//! 2. Each client runs `local_epochs` full-batch SGD steps from
//!    `theta_global` and reports `(theta_global - theta_local) / eta`. On FIM
//!    exchange rounds it also uploads its Fisher estimate at `theta_global`.
//! 3. The server averages the client reports with weights `n_k / N`, on
//!    exchange rounds replaces `I_G` by the weighted average of the uploaded
//!    estimates, and steps `theta -= eta * (I + lambda I_G) * g_agg`.
//!
//! Client results are always combined in client-id order, so the outcome
//! does not depend on which client finishes first.

use std::fmt::Write as _;

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::batchfire::{fmt_real, initial_params};
use crate::error::{check_dim, FireError, Result};
use crate::fisher::{aggregate_fims, apply_preconditioner, empirical_fim, mix_fim, payload_bytes, FisherConfig, FisherEstimate};
use crate::model::{accuracy, loss, loss_and_grad, Fragment, ModelSpec, Provenance};
use crate::numkernel::{axpy, ParamVec, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Partition {
    Iid,
    /// Per-class client proportions from a symmetric Dirichlet with this concentration.
    Dirichlet(f64),
    /// Sort by label and deal this many contiguous shards to each client.
    Shard(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub eta: f64,
    pub lambda: f64,
    pub fim_exchange_period: usize,
    /// When false no Fisher estimate is ever exchanged and `I_G` stays zero.
    pub exchange_fim: bool,
    pub fisher: FisherConfig,
    pub partition: Partition,
    /// Server computes the validation FIM and mixes it in after aggregation;
    /// clients then upload estimates computed on their local data only.
    pub server_side_val_fim: bool,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 5,
            rounds: 50,
            local_epochs: 1,
            eta: 0.001,
            lambda: 0.1,
            fim_exchange_period: 5,
            exchange_fim: true,
            fisher: FisherConfig::default(),
            partition: Partition::Iid,
            server_side_val_fim: false,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(FireError::invalid("num_clients must be >= 1"));
        }
        if self.fim_exchange_period == 0 {
            return Err(FireError::invalid("fim_exchange_period must be >= 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(FireError::invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FireError::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        match self.partition {
            Partition::Dirichlet(b) if !(b > 0.0 && b.is_finite()) => {
                return Err(FireError::invalid(format!("dirichlet concentration must be > 0, got {b}")))
            }
            Partition::Shard(0) => return Err(FireError::invalid("shards per client must be >= 1")),
            _ => {}
        }
        self.fisher.validate()
    }

    pub fn is_exchange_round(&self, round: usize) -> bool {
        self.exchange_fim && round.is_multiple_of(self.fim_exchange_period)
    }
}

#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub id: usize,
    pub data: Fragment,
    pub n_k: usize,
    pub theta_local: ParamVec,
    pub i_local: Option<FisherEstimate>,
    /// Validation estimate and the round it was computed in (shared-validation mode).
    i_val: Option<(usize, FisherEstimate)>,
}

impl ClientRecord {
    pub fn new(id: usize, data: Fragment, d: usize) -> Self {
        let n_k = data.n();
        ClientRecord { id, data, n_k, theta_local: ParamVec::zeros(d), i_local: None, i_val: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Content {
    Params,
    Fim,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommRecord {
    pub round: usize,
    pub direction: Direction,
    pub client_id: usize,
    pub content: Content,
    pub payload_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta_global: ParamVec,
    pub i_global: FisherEstimate,
    pub round: usize,
    pub comm_log: Vec<CommRecord>,
    i_val: Option<(usize, FisherEstimate)>,
}

impl ServerState {
    pub fn new(theta0: ParamVec, fisher: &FisherConfig) -> Self {
        let d = theta0.len();
        let i_global = FisherEstimate::zeros(fisher.variant_kind, d, fisher.effective_rank(d));
        ServerState { theta_global: theta0, i_global, round: 0, comm_log: Vec::new(), i_val: None }
    }
}

/// What a client sends back after its local work.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta_grad: ParamVec,
    pub i_local: Option<FisherEstimate>,
    pub bytes_up: usize,
}

fn params_bytes(d: usize) -> usize {
    8 * d
}

fn refresh_due(fisher: &FisherConfig, cached_round: usize, round: usize) -> bool {
    let every = fisher.refresh_every_batches;
    every > 0 && round / every > cached_round / every
}

fn cached_val_fim<'c>(
    cache: &'c mut Option<(usize, FisherEstimate)>,
    spec: &ModelSpec,
    theta: &ParamVec,
    val: &Fragment,
    fisher: &FisherConfig,
    round: usize,
) -> Result<&'c FisherEstimate> {
    let stale = match cache {
        None => true,
        Some((r, _)) => refresh_due(fisher, *r, round),
    };
    if stale {
        *cache = Some((round, empirical_fim(spec, theta, val, fisher)?));
    }
    Ok(&cache.as_ref().expect("filled above").1)
}

/// Local work of one client in `round`.
pub fn client_local_update(
    client: &mut ClientRecord,
    spec: &ModelSpec,
    theta_global: &ParamVec,
    round: usize,
    cfg: &FedConfig,
    val: &Fragment,
) -> Result<ClientUpdate> {
    check_dim(spec.param_count(), theta_global.len())?;
    let d = theta_global.len();
    let i_local = if cfg.is_exchange_round(round) {
        let local = empirical_fim(spec, theta_global, &client.data, &cfg.fisher)?;
        if cfg.server_side_val_fim {
            Some(local)
        } else {
            let i_val = cached_val_fim(&mut client.i_val, spec, theta_global, val, &cfg.fisher, round)?;
            Some(mix_fim(&local, i_val, cfg.fisher.mix_mu)?)
        }
    } else {
        None
    };

    let mut theta = theta_global.clone();
    for e in 0..cfg.local_epochs {
        let (l, g) = loss_and_grad(spec, &theta, &client.data)?;
        if !l.is_finite() || !g.is_finite() {
            return Err(FireError::NonFinite { step: round * cfg.local_epochs + e, what: format!("client {}", client.id) });
        }
        theta = axpy(-cfg.eta, &g, &theta)?;
    }
    let delta = theta_global.sub(&theta)?.scaled(1.0 / cfg.eta);
    if !delta.is_finite() {
        return Err(FireError::NonFinite { step: round, what: format!("client {} update", client.id) });
    }
    let bytes_up = params_bytes(d) + i_local.as_ref().map_or(0, |f| f.payload_bytes());
    client.theta_local = theta;
    client.i_local = i_local.clone();
    Ok(ClientUpdate { client_id: client.id, delta_grad: delta, i_local, bytes_up })
}

/// Reduced fractions `n_k / N`.
pub fn client_weights(ns: &[usize]) -> Vec<(u64, u64)> {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let total: u64 = ns.iter().map(|&n| n as u64).sum();
    ns.iter()
        .map(|&n| {
            let g = gcd(n as u64, total).max(1);
            (n as u64 / g, total / g)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub val_acc: f64,
    pub global_loss: f64,
    pub bytes_up_total: usize,
    pub bytes_down_total: usize,
}

pub const ROUNDS_HEADER: &str = "round,val_acc,global_loss,bytes_up_total,bytes_down_total";

/// One protocol round; client order in `clients` is the aggregation order.
pub fn server_round(
    server: &ServerState,
    clients: &mut [ClientRecord],
    spec: &ModelSpec,
    cfg: &FedConfig,
    val: &Fragment,
) -> Result<(ServerState, RoundMetrics)> {
    if clients.is_empty() {
        return Err(FireError::invalid("server round with no clients"));
    }
    let d = server.theta_global.len();
    check_dim(spec.param_count(), d)?;
    let round = server.round;
    let exchange = cfg.is_exchange_round(round);
    let mut next = server.clone();

    let theta_g = &server.theta_global;
    let mut updates: Vec<ClientUpdate> = clients
        .par_iter_mut()
        .map(|c| client_local_update(c, spec, theta_g, round, cfg, val))
        .collect::<Result<_>>()?;
    updates.sort_by_key(|u| u.client_id);
    for u in &updates {
        check_dim(d, u.delta_grad.len())?;
    }
    let ns: Vec<usize> = {
        let mut by_id: Vec<(usize, usize)> = clients.iter().map(|c| (c.id, c.n_k)).collect();
        by_id.sort_unstable();
        by_id.into_iter().map(|(_, n)| n).collect()
    };
    let weights: Vec<f64> = client_weights(&ns).iter().map(|&(a, b)| a as f64 / b as f64).collect();

    for u in &updates {
        next.comm_log.push(CommRecord {
            round,
            direction: Direction::Up,
            client_id: u.client_id,
            content: Content::Params,
            payload_bytes: params_bytes(d),
        });
        if let Some(f) = &u.i_local {
            next.comm_log.push(CommRecord {
                round,
                direction: Direction::Up,
                client_id: u.client_id,
                content: Content::Fim,
                payload_bytes: f.payload_bytes(),
            });
        }
    }

    let mut agg = vec![0.0; d];
    for (u, w) in updates.iter().zip(&weights) {
        for (a, g) in agg.iter_mut().zip(u.delta_grad.iter()) {
            *a += w * g;
        }
    }
    let agg = ParamVec::new(agg);

    if exchange {
        let locals: Vec<(FisherEstimate, usize)> = updates
            .iter()
            .zip(&ns)
            .map(|(u, &n)| (u.i_local.clone().expect("exchange round carries a client FIM"), n))
            .collect();
        let pooled = aggregate_fims(&locals)?;
        next.i_global = if cfg.server_side_val_fim {
            let i_val = cached_val_fim(&mut next.i_val, spec, theta_g, val, &cfg.fisher, round)?;
            mix_fim(&pooled, i_val, cfg.fisher.mix_mu)?
        } else {
            pooled
        };
    }

    let step = apply_preconditioner(&next.i_global, &agg, cfg.lambda)?;
    next.theta_global = axpy(-cfg.eta, &step, theta_g)?;
    if !next.theta_global.is_finite() {
        return Err(FireError::NonFinite { step: round, what: "global parameters".into() });
    }

    let fim_down = if exchange { next.i_global.payload_bytes() } else { 0 };
    for u in &updates {
        next.comm_log.push(CommRecord {
            round,
            direction: Direction::Down,
            client_id: u.client_id,
            content: Content::Params,
            payload_bytes: params_bytes(d),
        });
        if exchange {
            next.comm_log.push(CommRecord {
                round,
                direction: Direction::Down,
                client_id: u.client_id,
                content: Content::Fim,
                payload_bytes: fim_down,
            });
        }
    }
    next.round += 1;

    let mut global_loss = 0.0;
    let mut sorted: Vec<&ClientRecord> = clients.iter().collect();
    sorted.sort_by_key(|c| c.id);
    for (c, w) in sorted.iter().zip(&weights) {
        global_loss += w * loss(spec, &next.theta_global, &c.data)?;
    }
    let (up, down) = next.comm_log.iter().filter(|r| r.round == round).fold((0, 0), |(u, dn), r| match r.direction {
        Direction::Up => (u + r.payload_bytes, dn),
        Direction::Down => (u, dn + r.payload_bytes),
    });
    let metrics = RoundMetrics {
        round,
        val_acc: accuracy(spec, &next.theta_global, val)?,
        global_loss,
        bytes_up_total: up,
        bytes_down_total: down,
    };
    Ok((next, metrics))
}

/// Splits `full` into `cfg.num_clients` non-empty client fragments.
pub fn partition_dataset(full: &Fragment, cfg: &FedConfig, rng: &mut Rng) -> Result<Vec<Fragment>> {
    const MAX_RETRIES: usize = 100;
    let k = cfg.num_clients;
    if k == 0 {
        return Err(FireError::invalid("num_clients must be >= 1"));
    }
    if full.n() < k {
        return Err(FireError::Infeasible(format!("{} examples cannot fill {k} clients", full.n())));
    }
    let n = full.n();
    let assignment: Vec<Vec<usize>> = match cfg.partition {
        Partition::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            (0..k).map(|c| idx[c * n / k..(c + 1) * n / k].to_vec()).collect()
        }
        Partition::Shard(per_client) => {
            let shards = k * per_client;
            if n < shards {
                return Err(FireError::Infeasible(format!("{n} examples cannot form {shards} shards")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| full.examples[i].y);
            let mut order: Vec<usize> = (0..shards).collect();
            rng.shuffle(&mut order);
            (0..k)
                .map(|c| {
                    let mut own: Vec<usize> = order[c * per_client..(c + 1) * per_client]
                        .iter()
                        .flat_map(|&s| idx[s * n / shards..(s + 1) * n / shards].iter().copied())
                        .collect();
                    own.sort_unstable();
                    own
                })
                .collect()
        }
        Partition::Dirichlet(beta) => {
            let gamma = Gamma::new(beta, 1.0).map_err(|e| FireError::invalid(e.to_string()))?;
            let num_classes = full.examples.iter().map(|e| e.y).max().unwrap_or(0) + 1;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (i, e) in full.examples.iter().enumerate() {
                by_class[e.y].push(i);
            }
            let mut found = None;
            for _ in 0..MAX_RETRIES {
                let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
                for members in &by_class {
                    let mut members = members.clone();
                    rng.shuffle(&mut members);
                    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
                    let total: f64 = draws.iter().sum();
                    let props: Vec<f64> = if total > 0.0 {
                        draws.iter().map(|g| g / total).collect()
                    } else {
                        vec![1.0 / k as f64; k]
                    };
                    let m = members.len();
                    let mut cum = 0.0;
                    let mut start = 0;
                    for (c, p) in props.iter().enumerate() {
                        cum += p;
                        let end = if c + 1 == k { m } else { ((cum * m as f64).round() as usize).min(m) };
                        clients[c].extend_from_slice(&members[start..end.max(start)]);
                        start = end.max(start);
                    }
                }
                if clients.iter().all(|c| !c.is_empty()) {
                    clients.iter_mut().for_each(|c| c.sort_unstable());
                    found = Some(clients);
                    break;
                }
            }
            found.ok_or_else(|| {
                FireError::Infeasible(format!("dirichlet({beta}) left a client empty after {MAX_RETRIES} draws"))
            })?
        }
    };
    assignment
        .into_iter()
        .enumerate()
        .map(|(c, idx)| {
            let examples = idx.into_iter().map(|i| full.examples[i].clone()).collect();
            Fragment::new(format!("client{c}"), examples, Provenance::Client(c))
        })
        .collect()
}

/// A federated run that can be advanced one round at a time.
#[derive(Debug, Clone)]
pub struct FedSim<'a> {
    spec: &'a ModelSpec,
    val: &'a Fragment,
    cfg: FedConfig,
    pub server: ServerState,
    pub clients: Vec<ClientRecord>,
    pub metrics: Vec<RoundMetrics>,
}

impl<'a> FedSim<'a> {
    pub fn new(spec: &'a ModelSpec, client_data: Vec<Fragment>, val: &'a Fragment, cfg: FedConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if client_data.is_empty() {
            return Err(FireError::invalid("no client data"));
        }
        for f in &client_data {
            f.check_against(spec)?;
        }
        val.check_against(spec)?;
        let theta0 = initial_params(spec, cfg.seed);
        let d = theta0.len();
        let clients = client_data.into_iter().enumerate().map(|(i, f)| ClientRecord::new(i, f, d)).collect();
        let server = ServerState::new(theta0, &cfg.fisher);
        Ok(FedSim { spec, val, cfg, server, clients, metrics: Vec::new() })
    }

    /// Partitions `pool` with the configured scheme before building the run.
    pub fn from_pool(spec: &'a ModelSpec, pool: &Fragment, val: &'a Fragment, cfg: FedConfig) -> Result<Self> {
        let mut rng = Rng::substream(cfg.seed, "partition", 0);
        let parts = partition_dataset(pool, &cfg, &mut rng)?;
        Self::new(spec, parts, val, cfg)
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn round(&mut self) -> Result<&RoundMetrics> {
        let (next, m) = server_round(&self.server, &mut self.clients, self.spec, &self.cfg, self.val)?;
        self.server = next;
        self.metrics.push(m);
        Ok(self.metrics.last().expect("just pushed"))
    }

    pub fn run(&mut self) -> Result<()> {
        for _ in 0..self.cfg.rounds {
            self.round()?;
        }
        Ok(())
    }

    pub fn rounds_csv(&self) -> String {
        rounds_csv(&self.metrics)
    }
}

pub fn rounds_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.round,
            fmt_real(m.val_acc),
            fmt_real(m.global_loss),
            m.bytes_up_total,
            m.bytes_down_total
        );
    }
    out
}

pub fn comm_log_csv(log: &[CommRecord]) -> String {
    let mut out = String::from("round,direction,client_id,content,payload_bytes\n");
    for r in log {
        let dir = match r.direction {
            Direction::Up => "up",
            Direction::Down => "down",
        };
        let content = match r.content {
            Content::Params => "params",
            Content::Fim => "fim",
        };
        let _ = writeln!(out, "{},{dir},{},{content},{}", r.round, r.client_id, r.payload_bytes);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommReport {
    pub params_bytes: usize,
    /// Mean uploaded FIM payload over exchange uploads (0 when none happened).
    pub fim_payload_bytes_measured: f64,
    pub fim_payload_bytes_analytic: usize,
    /// Mean upload per client per round.
    pub bytes_per_client_round: f64,
    pub relative_to_fedavg: f64,
    pub relative_to_fedavg_analytic: f64,
}

/// Upload cost relative to sending parameters alone.
pub fn comm_cost_report(server: &ServerState, d: usize, cfg: &FedConfig) -> Result<CommReport> {
    if server.comm_log.is_empty() || server.round == 0 {
        return Err(FireError::invalid("no completed rounds to report on"));
    }
    let ups: Vec<&CommRecord> = server.comm_log.iter().filter(|r| r.direction == Direction::Up).collect();
    let client_rounds = ups.iter().filter(|r| r.content == Content::Params).count();
    let total_up: usize = ups.iter().map(|r| r.payload_bytes).sum();
    let fim_ups: Vec<usize> = ups.iter().filter(|r| r.content == Content::Fim).map(|r| r.payload_bytes).collect();
    let params = params_bytes(d);
    let fim_measured =
        if fim_ups.is_empty() { 0.0 } else { fim_ups.iter().sum::<usize>() as f64 / fim_ups.len() as f64 };
    let fim_analytic = payload_bytes(cfg.fisher.variant_kind, d, cfg.fisher.effective_rank(d));
    let per_client_round = total_up as f64 / client_rounds as f64;
    let relative_analytic = if cfg.exchange_fim {
        1.0 + fim_analytic as f64 / (cfg.fim_exchange_period as f64 * params as f64)
    } else {
        1.0
    };
    Ok(CommReport {
        params_bytes: params,
        fim_payload_bytes_measured: fim_measured,
        fim_payload_bytes_analytic: fim_analytic,
        bytes_per_client_round: per_client_round,
        relative_to_fedavg: per_client_round / params as f64,
        relative_to_fedavg_analytic: relative_analytic,
    })
}
