//! Splitting a training set across clients.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{ClientState, FlError, TAG_PARTITION};
use crate::nn::Batch;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Partition {
    /// Shuffled, near-equal shards.
    #[default]
    Iid,
    /// Per-class client proportions drawn from `Dirichlet(alpha)`.
    Dirichlet { alpha: f64 },
}

/// Disjoint client shards covering every sample of `train` exactly once.
pub fn partition(train: &Batch, clients: usize, how: &Partition, seed: u64) -> Result<Vec<ClientState>, FlError> {
    if clients == 0 {
        return Err(FlError::Config("clients must be >= 1".into()));
    }
    let mut r = rng::stream(seed, &[TAG_PARTITION]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut r);
    let shards: Vec<Vec<usize>> = match how {
        Partition::Iid => {
            let (base, extra) = (order.len() / clients, order.len() % clients);
            let mut start = 0;
            (0..clients)
                .map(|c| {
                    let len = base + usize::from(c < extra);
                    let s = order[start..start + len].to_vec();
                    start += len;
                    s
                })
                .collect()
        }
        Partition::Dirichlet { alpha } => {
            let gamma = Gamma::new(*alpha, 1.0)
                .map_err(|e| FlError::Config(format!("dirichlet alpha {alpha}: {e}")))?;
            let classes = train.labels.iter().max().map_or(0, |&m| m + 1);
            let mut shards = vec![Vec::new(); clients];
            for class in 0..classes {
                let members: Vec<usize> = order.iter().copied().filter(|&i| train.labels[i] == class).collect();
                let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut r)).collect();
                let total: f64 = draws.iter().sum();
                let mut cum = 0.0;
                let mut start = 0;
                for (c, d) in draws.iter().enumerate() {
                    cum += d / total;
                    let end = if c + 1 == clients {
                        members.len()
                    } else {
                        ((cum * members.len() as f64).round() as usize).clamp(start, members.len())
                    };
                    shards[c].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            shards
        }
    };
    shards
        .into_iter()
        .enumerate()
        .map(|(id, mut idx)| {
            if idx.is_empty() {
                return Err(FlError::EmptyDataset { client: id });
            }
            idx.sort_unstable();
            Ok(ClientState {
                id,
                data: train.select(&idx),
            })
        })
        .collect()
}
