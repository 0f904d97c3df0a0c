use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FederationError, OptimizerKind, OptimizerState, RoundConfig};
use crate::adapters::{init_adapter_with, FactorPair};
use crate::aggregation::{Broadcast, PayloadScope};
use crate::privacy::{clip_and_noise, DpParams, DpScope};
use crate::tasks::{evaluate, Dataset, Module, ToyModel};

/// Independent random streams owned by one client.
#[derive(Clone, Debug)]
pub struct ClientRngs {
    /// Mini-batch order.
    pub data: ChaCha8Rng,
    /// Adapter (re-)initialisation.
    pub init: ChaCha8Rng,
    /// DP noise. Only consumed when noised gradients are produced.
    pub noise: ChaCha8Rng,
}

impl ClientRngs {
    pub fn from_seeds(data: u64, init: u64, noise: u64) -> Self {
        Self {
            data: ChaCha8Rng::seed_from_u64(data),
            init: ChaCha8Rng::seed_from_u64(init),
            noise: ChaCha8Rng::seed_from_u64(noise),
        }
    }
}

/// One simulated client: its data, model (with persistent private module) and optimiser state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub model: ToyModel,
    /// Declared shared rank `r_k^(g)`; governs round-0 initialisation and re-initialisation.
    pub shared_rank: usize,
    pub private_rank: usize,
    opt_shared: OptimizerState,
    opt_private: OptimizerState,
    rngs: ClientRngs,
    order: Vec<usize>,
    cursor: usize,
    /// Number of DP-SGD steps taken so far.
    pub dp_steps: usize,
}

impl ClientState {
    pub fn new(
        id: usize,
        train: Dataset,
        test: Dataset,
        model: ToyModel,
        optimizer: OptimizerKind,
        rngs: ClientRngs,
    ) -> Result<Self, FederationError> {
        if train.is_empty() {
            return Err(FederationError::EmptyShard(id));
        }
        let shared_rank = model.layers[0].adapter.shared.rank();
        let private_rank = model.layers[0].adapter.private.rank();
        Ok(Self {
            id,
            train,
            test,
            model,
            shared_rank,
            private_rank,
            opt_shared: OptimizerState::new(optimizer),
            opt_private: OptimizerState::new(optimizer),
            rngs,
            order: Vec::new(),
            cursor: 0,
            dp_steps: 0,
        })
    }

    /// Current shared factors, one per layer.
    pub fn shared_factors(&self) -> Vec<FactorPair> {
        self.model.module(Module::Shared).into_iter().cloned().collect()
    }

    pub fn private_factors(&self) -> Vec<FactorPair> {
        self.model.module(Module::Private).into_iter().cloned().collect()
    }

    /// What this client sends to the server under `scope`.
    pub fn payload(&self, scope: PayloadScope) -> Vec<FactorPair> {
        match scope {
            PayloadScope::SharedOnly => self.shared_factors(),
            PayloadScope::FullAdapter => self.model.adapters().map(|a| a.monolithic()).collect(),
        }
    }

    /// Applies a server broadcast.
    ///
    /// `Shared` replaces the shared module wholesale and leaves the private module untouched.
    /// `Monolithic` keeps the leading `shared_rank + private_rank` components and splits them
    /// back into the two slots. `Merged` folds the dense aggregate into the layer offset and
    /// re-initialises both modules at the declared ranks.
    pub fn receive(&mut self, broadcast: &Broadcast) -> Result<(), FederationError> {
        let layers = self.model.layers.len();
        match broadcast {
            Broadcast::Shared(pairs) => {
                check_layers(pairs.len(), layers)?;
                for (layer, pair) in self.model.layers.iter_mut().zip(pairs) {
                    if pair.layer_shape() != layer.adapter.layer_shape() {
                        return Err(FederationError::BroadcastShape { client: self.id });
                    }
                    layer.adapter.shared = pair.clone();
                }
                self.opt_shared.reset();
            }
            Broadcast::Monolithic(pairs) => {
                check_layers(pairs.len(), layers)?;
                let total = self.shared_rank + self.private_rank;
                for (layer, pair) in self.model.layers.iter_mut().zip(pairs) {
                    if pair.layer_shape() != layer.adapter.layer_shape() {
                        return Err(FederationError::BroadcastShape { client: self.id });
                    }
                    let padded = if pair.rank() < total {
                        pair.pad_to_rank(total)
                    } else {
                        pair.clone()
                    };
                    layer.adapter.shared = padded.rank_slice(0, self.shared_rank);
                    layer.adapter.private = padded.rank_slice(self.shared_rank, total);
                }
                self.opt_shared.reset();
                self.opt_private.reset();
            }
            Broadcast::Merged(deltas) => {
                check_layers(deltas.len(), layers)?;
                for (l, (layer, delta)) in self.model.layers.iter_mut().zip(deltas).enumerate() {
                    if delta.shape() != layer.adapter.layer_shape() {
                        return Err(FederationError::BroadcastShape { client: self.id });
                    }
                    layer.merged = delta.clone();
                    let (d_out, d_in) = layer.adapter.layer_shape();
                    layer.adapter = init_adapter_with(
                        l,
                        d_out,
                        d_in,
                        self.shared_rank,
                        self.private_rank,
                        &mut self.rngs.init,
                    );
                }
                self.opt_shared.reset();
                self.opt_private.reset();
            }
        }
        Ok(())
    }

    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let n = self.train.len();
        let size = batch_size.min(n);
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rngs.data);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Runs `E` optimiser steps jointly over shared and private factors and returns the payload.
    ///
    /// With DP enabled, shared gradients are clipped and noised per sample. Private gradients are
    /// only noised when they leave the device (`FullAdapter`) or when `dp.scope` is `Full`; in that
    /// case clipping applies to the concatenated shared+private gradient.
    pub fn local_train(
        &mut self,
        rc: &RoundConfig,
        dp: &DpParams,
        scope: PayloadScope,
    ) -> Result<Vec<FactorPair>, FederationError> {
        let noise_private = dp.enabled && (dp.scope == DpScope::Full || scope == PayloadScope::FullAdapter);
        let n_shared = self.model.num_params(Module::Shared);
        for _ in 0..rc.local_steps {
            let batch = self.next_batch(rc.batch_size);
            let grads = self.model.grads(&self.train, &batch)?;

            let (shared_grad, private_grad) = if noise_private {
                let joint: Vec<Vec<f64>> = grads
                    .iter()
                    .map(|g| {
                        let mut v = g.shared.clone();
                        v.extend_from_slice(&g.private);
                        v
                    })
                    .collect();
                let mut noised = clip_and_noise(&joint, dp, &mut self.rngs.noise)?;
                let private = noised.split_off(n_shared);
                (noised, private)
            } else {
                let shared: Vec<Vec<f64>> = grads.iter().map(|g| g.shared.clone()).collect();
                let private: Vec<Vec<f64>> = grads.iter().map(|g| g.private.clone()).collect();
                let shared = clip_and_noise(&shared, dp, &mut self.rngs.noise)?;
                let private = clip_and_noise(&private, &DpParams::disabled(), &mut self.rngs.noise)?;
                (shared, private)
            };
            if dp.enabled {
                self.dp_steps += 1;
            }

            let mut shared = self.model.params(Module::Shared);
            self.opt_shared.step(&mut shared, &shared_grad, rc.learning_rate);
            let mut private = self.model.params(Module::Private);
            self.opt_private.step(&mut private, &private_grad, rc.learning_rate);
            self.model.set_params(Module::Shared, &shared)?;
            self.model.set_params(Module::Private, &private)?;
        }
        Ok(self.payload(scope))
    }

    /// Accuracy of the composite (shared + private) model on this client's test split.
    pub fn personalized_accuracy(&self) -> Result<f64, FederationError> {
        Ok(evaluate(&self.model, &self.test)?)
    }

    /// Accuracy with every parameter that never leaves the device zeroed.
    pub fn global_accuracy(&self, scope: PayloadScope) -> Result<f64, FederationError> {
        match scope {
            PayloadScope::FullAdapter => self.personalized_accuracy(),
            PayloadScope::SharedOnly => {
                let mut m = self.model.clone();
                for layer in m.layers.iter_mut() {
                    let (d_out, d_in) = layer.adapter.layer_shape();
                    layer.adapter.private = FactorPair::zeros(d_out, d_in, layer.adapter.private.rank());
                }
                Ok(evaluate(&m, &self.test)?)
            }
        }
    }
}

fn check_layers(got: usize, expected: usize) -> Result<(), FederationError> {
    if got != expected {
        return Err(FederationError::LayerCount { got, expected });
    }
    Ok(())
}
