use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    derive_seed, effective_rank, run_round, streams, ClientRngs, ClientState, FederationError,
    Schedule, ServerState,
};
use crate::adapters::{init_adapter_with, FactorPair};
use crate::aggregation::{AggregationConfig, Broadcast, PayloadScope, StrategyRegistry};
use crate::config::ExperimentConfig;
use crate::privacy::{account, DpParams};
use crate::tasks::{
    apply_client_shift, client_std, dirichlet_partition, make_synthetic, random_backbone, Dataset,
    PartitionSpec, SyntheticSpec, ToyModel,
};
use crate::tensor::Matrix;

/// Fixed leading columns of `metrics.csv`; per-client `acc_<k>` columns follow.
pub const METRICS_COLUMNS: [&str; 8] = [
    "round",
    "strategy",
    "mean_acc",
    "client_std",
    "global_acc",
    "eff_rank",
    "epsilon",
    "wall_ms",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub strategy: String,
    /// Mean personalised (shared + private) test accuracy.
    pub mean_acc: f64,
    pub client_std: f64,
    /// Mean accuracy with on-device-only parameters zeroed.
    pub global_acc: f64,
    /// Largest numerical rank of the broadcast delta over layers; 0 before the first round.
    pub eff_rank: usize,
    /// Largest per-client ε; infinite when DP is disabled.
    pub epsilon: f64,
    pub wall_ms: u64,
    pub client_accs: Vec<f64>,
}

/// One serialized broadcast.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub round: usize,
    pub broadcast: Broadcast,
}

impl TraceRecord {
    const SHARED: u8 = 0;
    const MONOLITHIC: u8 = 1;
    const MERGED: u8 = 2;

    /// Tag byte, round and layer count as u64, then each layer: factor pairs in their own
    /// encoding, dense matrices as `rows, cols` u64 plus row-major f64, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let (tag, layers) = match &self.broadcast {
            Broadcast::Shared(p) => (Self::SHARED, p.len()),
            Broadcast::Monolithic(p) => (Self::MONOLITHIC, p.len()),
            Broadcast::Merged(m) => (Self::MERGED, m.len()),
        };
        out.push(tag);
        out.extend_from_slice(&(self.round as u64).to_le_bytes());
        out.extend_from_slice(&(layers as u64).to_le_bytes());
        match &self.broadcast {
            Broadcast::Shared(p) | Broadcast::Monolithic(p) => {
                for pair in p {
                    out.extend_from_slice(&pair.to_bytes());
                }
            }
            Broadcast::Merged(m) => {
                for mat in m {
                    out.extend_from_slice(&(mat.rows() as u64).to_le_bytes());
                    out.extend_from_slice(&(mat.cols() as u64).to_le_bytes());
                    for v in mat.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Decodes a whole trace file.
    pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<TraceRecord>, FederationError> {
        let bad = || FederationError::Invalid("truncated or malformed trace".into());
        fn take_u64(b: &mut &[u8]) -> Option<usize> {
            let (head, rest) = b.split_first_chunk::<8>()?;
            *b = rest;
            usize::try_from(u64::from_le_bytes(*head)).ok()
        }
        let mut out = Vec::new();
        while let Some((&tag, rest)) = bytes.split_first() {
            bytes = rest;
            let round = take_u64(&mut bytes).ok_or_else(bad)?;
            let layers = take_u64(&mut bytes).ok_or_else(bad)?;
            let broadcast = match tag {
                Self::SHARED | Self::MONOLITHIC => {
                    let mut pairs = Vec::with_capacity(layers);
                    for _ in 0..layers {
                        let (p, used) = FactorPair::from_bytes(bytes)?;
                        bytes = &bytes[used..];
                        pairs.push(p);
                    }
                    if tag == Self::SHARED {
                        Broadcast::Shared(pairs)
                    } else {
                        Broadcast::Monolithic(pairs)
                    }
                }
                Self::MERGED => {
                    let mut mats = Vec::with_capacity(layers);
                    for _ in 0..layers {
                        let rows = take_u64(&mut bytes).ok_or_else(bad)?;
                        let cols = take_u64(&mut bytes).ok_or_else(bad)?;
                        let len = rows.checked_mul(cols).ok_or_else(bad)?;
                        if bytes.len() < len * 8 {
                            return Err(bad());
                        }
                        let data = bytes[..len * 8]
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                            .collect();
                        bytes = &bytes[len * 8..];
                        mats.push(Matrix::from_vec(rows, cols, data)?);
                    }
                    Broadcast::Merged(mats)
                }
                _ => return Err(bad()),
            };
            out.push(TraceRecord { round, broadcast });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub trace: Vec<TraceRecord>,
}

impl ExperimentOutput {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("round 0 is always evaluated")
    }

    pub fn metrics_csv(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.client_accs.len());
        let mut out = METRICS_COLUMNS.join(",");
        for i in 0..k {
            let _ = write!(out, ",acc_{i}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.round,
                r.strategy,
                r.mean_acc,
                r.client_std,
                r.global_acc,
                r.eff_rank,
                r.epsilon,
                r.wall_ms
            );
            for a in &r.client_accs {
                let _ = write!(out, ",{a}");
            }
            out.push('\n');
        }
        out
    }
}

fn split_shard(shard: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), FederationError> {
    let n = shard.len();
    if test_fraction == 0.0 || n == 1 {
        return Ok((shard.clone(), shard.clone()));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((shard.subset(&train)?, shard.subset(&test)?))
}

/// Generates data, partitions it and builds every client with its initial adapters.
pub fn build_clients(cfg: &ExperimentConfig) -> Result<Vec<ClientState>, FederationError> {
    let seed = cfg.seed;
    let t = &cfg.task;
    let data = make_synthetic(&SyntheticSpec {
        num_classes: t.num_classes,
        d_in: t.d_in,
        n: t.n,
        class_sep: t.class_sep,
        noise_std: t.noise_std,
        client_shift: t.client_shift,
        seed: derive_seed(seed, streams::DATASET, 0),
    })?;
    let mut shards = dirichlet_partition(
        &data,
        &PartitionSpec {
            num_clients: cfg.partition.num_clients,
            dirichlet_alpha: cfg.partition.dirichlet_alpha,
            seed: derive_seed(seed, streams::PARTITION, 0),
        },
    )?;
    apply_client_shift(&mut shards, t.client_shift, derive_seed(seed, streams::SHIFT, 0));
    let backbone = random_backbone(
        cfg.model.arch,
        t.d_in,
        t.num_classes,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::BACKBONE, 0)),
    );
    let private_ranks = cfg.private_ranks();

    shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            let kk = k as u64;
            let (train, test) =
                split_shard(shard, t.test_fraction, derive_seed(seed, streams::SPLIT, kk))?;
            let mut rngs = ClientRngs::from_seeds(
                derive_seed(seed, streams::CLIENT_DATA, kk),
                derive_seed(seed, streams::CLIENT_INIT, kk),
                derive_seed(seed, streams::CLIENT_NOISE, kk),
            );
            let adapters = backbone
                .iter()
                .enumerate()
                .map(|(l, w)| {
                    init_adapter_with(
                        l,
                        w.rows(),
                        w.cols(),
                        cfg.ranks.shared[k],
                        private_ranks[k],
                        &mut rngs.init,
                    )
                })
                .collect();
            let mut model = ToyModel::new(backbone.clone(), adapters)?;
            for layer in model.layers.iter_mut() {
                layer.scale = cfg.model.adapter_scale;
            }
            ClientState::new(k, train, test, model, cfg.round.optimizer, rngs)
        })
        .collect()
}

fn evaluate_row(
    round: usize,
    strategy: &str,
    clients: &[ClientState],
    scope: PayloadScope,
    broadcast: Option<&Broadcast>,
    dp: &DpParams,
    delta: f64,
    wall_ms: u64,
) -> Result<MetricsRow, FederationError> {
    let accs: Vec<(f64, f64)> = clients
        .par_iter()
        .map(|c| Ok((c.personalized_accuracy()?, c.global_accuracy(scope)?)))
        .collect::<Result<_, FederationError>>()?;
    let client_accs: Vec<f64> = accs.iter().map(|a| a.0).collect();
    let k = clients.len() as f64;
    let epsilon = if dp.enabled {
        let mut worst: f64 = 0.0;
        for c in clients {
            worst = worst.max(account(dp, c.dp_steps, delta)?.epsilon);
        }
        worst
    } else {
        f64::INFINITY
    };
    Ok(MetricsRow {
        round,
        strategy: strategy.to_string(),
        mean_acc: client_accs.iter().sum::<f64>() / k,
        client_std: client_std(&client_accs),
        global_acc: accs.iter().map(|a| a.1).sum::<f64>() / k,
        eff_rank: broadcast.map(effective_rank).transpose()?.unwrap_or(0),
        epsilon,
        wall_ms,
        client_accs,
    })
}

/// Runs a whole experiment with the parallel schedule.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, FederationError> {
    run_experiment_with(cfg, &Schedule::Parallel, |_, _| {})
}

/// Runs a whole experiment; `observe` sees the clients after round-0 evaluation and after every
/// round.
pub fn run_experiment_with<F>(
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    mut observe: F,
) -> Result<ExperimentOutput, FederationError>
where
    F: FnMut(usize, &[ClientState]),
{
    cfg.validate()
        .map_err(|e| FederationError::Invalid(e.to_string()))?;
    let registry = StrategyRegistry::with_builtin();
    let strategy = registry.build(&cfg.aggregation.strategy)?;
    let scope = strategy.payload_scope();
    let mut agg = AggregationConfig::new(
        cfg.aggregation.strategy.clone(),
        Vec::new(),
        cfg.aggregation.rank_budget,
    );
    agg.recompress = cfg.aggregation.recompress;
    let mut server = ServerState::new(
        strategy,
        agg,
        derive_seed(cfg.seed, streams::PARTICIPATION, 0),
    );
    server.weight_override = cfg.aggregation.weights.clone();

    let dp = cfg.dp.params;
    let mut clients = build_clients(cfg)?;
    let name = cfg.aggregation.strategy.as_str();
    let mut rows = vec![evaluate_row(0, name, &clients, scope, None, &dp, cfg.dp.delta, 0)?];
    observe(0, &clients);
    let mut trace = Vec::new();

    for t in 1..=cfg.round.total_rounds {
        let start = Instant::now();
        let broadcast = run_round(&mut server, &mut clients, &cfg.round, &dp, schedule)?;
        let wall_ms = if cfg.output.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        rows.push(evaluate_row(
            t,
            name,
            &clients,
            scope,
            Some(&broadcast),
            &dp,
            cfg.dp.delta,
            wall_ms,
        )?);
        observe(t, &clients);
        if cfg.output.trace {
            trace.push(TraceRecord {
                round: t,
                broadcast,
            });
        }
    }
    Ok(ExperimentOutput { rows, trace })
}

/// Writes `metrics.csv`, `config.echo` and (if enabled) `trace.bin` into `cfg.output.dir`.
pub fn write_outputs(cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<(), FederationError> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), out.metrics_csv())?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    if cfg.output.trace {
        let mut f = fs::File::create(dir.join("trace.bin"))?;
        for r in &out.trace {
            f.write_all(&r.to_bytes())?;
        }
    }
    Ok(())
}
