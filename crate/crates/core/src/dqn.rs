//! Q-learning with experience replay.
//!
//! Every decision step stores one transition and then runs one minibatch
//! update against `r + gamma * max_valid Q(s', a)`, computed with the live
//! network. The position flag is not a network input; it only selects which
//! actions are eligible.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::games::{self, valid_actions, Action, EpisodeData, GameConfig};
use crate::nnkit::{OptimizerConfig, OptimizerState, Tensor2};
use crate::qnets::{NetSpec, QNetwork, N_ACTIONS};

/// Linear decay from `start` to `end` over the first `decay_episodes`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_episodes: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
            decay_episodes: 500,
        }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, episode: usize) -> f64 {
        if self.decay_episodes == 0 {
            return self.end;
        }
        let frac = (episode as f64 / self.decay_episodes as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub train_episodes: usize,
    pub test_episodes: usize,
    /// Training episodes replayed greedily for the in-sample split (capped
    /// at `train_episodes`).
    pub in_sample_episodes: usize,
    pub epsilon: EpsilonSchedule,
    pub batch_size: usize,
    pub memory_capacity: usize,
    /// Minimum stored transitions before updates begin.
    pub learn_start: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            train_episodes: 1000,
            test_episodes: 100,
            in_sample_episodes: 100,
            epsilon: EpsilonSchedule::default(),
            batch_size: 64,
            memory_capacity: 10_000,
            learn_start: 500,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) {
            return Err(Error::Config(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if !unit(self.epsilon.start) || !unit(self.epsilon.end) {
            return Err(Error::Config("epsilon values must be in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.memory_capacity == 0 {
            return Err(Error::Config(
                "batch_size and memory_capacity must be at least 1".into(),
            ));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Tensor2,
    pub holding: bool,
    pub action: Action,
    pub reward: f64,
    pub next_state: Tensor2,
    pub next_holding: bool,
    pub done: bool,
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    items: Vec<Transition>,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay memory capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        let slot = (self.inserted % self.capacity as u64) as usize;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total pushes since creation, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Up to `n` distinct transitions, uniformly at random.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        let n = n.min(self.items.len());
        sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// ε-greedy over the valid actions, given precomputed Q-values.
pub fn choose_action<R: Rng + ?Sized>(
    q: &[f64; N_ACTIONS],
    holding: bool,
    epsilon: f64,
    rng: &mut R,
) -> Action {
    let valid = valid_actions(holding);
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        valid.actions()[rng.random_range(0..valid.len())]
    } else {
        valid.argmax(q)
    }
}

pub fn select_action<R: Rng + ?Sized>(
    net: &QNetwork,
    state: &Tensor2,
    holding: bool,
    epsilon: f64,
    rng: &mut R,
) -> Result<Action> {
    Ok(choose_action(&net.q_values(state)?, holding, epsilon, rng))
}

/// `r` at the end of the game, otherwise `r + gamma * max_valid Q(s', a)`.
pub fn q_target(t: &Transition, net: &QNetwork, gamma: f64) -> Result<f64> {
    if t.done {
        return Ok(t.reward);
    }
    let q_next = net.q_values(&t.next_state)?;
    Ok(t.reward + gamma * valid_actions(t.next_holding).max(&q_next))
}

/// One minibatch update on squared error of the taken action's Q-value.
/// Returns the mean of `(Q - target)^2 / 2`, or `None` while the memory is
/// below the learn-start threshold.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut QNetwork,
    opt: &mut OptimizerState,
    memory: &ReplayMemory,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<Option<f64>> {
    if memory.len() < hyper.learn_start.max(1) {
        return Ok(None);
    }
    let batch = memory.sample(hyper.batch_size, rng);
    let targets = batch
        .iter()
        .map(|t| q_target(t, net, hyper.gamma))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let network = net.network_mut();
    network.params_mut().zero_grad();
    let mut loss = 0.0;
    for (t, target) in batch.iter().zip(targets) {
        let (q, cache) = network.forward(&t.state)?;
        let diff = q[t.action.index()] - target;
        loss += 0.5 * diff * diff;
        let mut grad = [0.0; N_ACTIONS];
        grad[t.action.index()] = diff * scale;
        network.backward(&cache, &grad)?;
    }
    opt.step(network.params_mut())?;
    Ok(Some(loss * scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Greedy,
}

/// One decision of a played episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Raw series index of the decision.
    pub t: usize,
    pub price: f64,
    pub action: Action,
    pub reward: f64,
    pub q: [f64; N_ACTIONS],
    /// Position before the action.
    pub holding: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeRun {
    pub rewards: Vec<f64>,
    pub trace: Vec<TraceRow>,
    /// Minibatch losses of updates made during the episode.
    pub losses: Vec<f64>,
}

impl EpisodeRun {
    pub fn pnl(&self) -> f64 {
        games::episode_pnl(&self.rewards)
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (!self.losses.is_empty())
            .then(|| self.losses.iter().sum::<f64>() / self.losses.len() as f64)
    }
}

/// Plays `episode` with ε = 0, leaving the network untouched.
pub fn play_greedy(net: &QNetwork, game: &GameConfig, episode: &EpisodeData) -> Result<EpisodeRun> {
    let mut run = EpisodeRun::default();
    let mut holding = false;
    for t in game.decisions() {
        let state = games::observe(game, episode, t)?;
        let q = net.q_values(&state)?;
        let action = valid_actions(holding).argmax(&q);
        let out = games::step(game, episode, t, holding, action)?;
        run.rewards.push(out.reward);
        run.trace.push(TraceRow {
            t,
            price: episode.price[t],
            action,
            reward: out.reward,
            q,
            holding,
        });
        holding = out.next_holding;
    }
    Ok(run)
}

/// A learning agent: network, optimizer, replay memory and its own RNG.
#[derive(Clone, Debug)]
pub struct Agent {
    pub net: QNetwork,
    pub optimizer: OptimizerState,
    pub memory: ReplayMemory,
    pub hyper: Hyperparams,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(net: QNetwork, hyper: Hyperparams, seed: u64) -> Self {
        let optimizer = OptimizerState::new(hyper.optimizer, net.network().params());
        Self {
            optimizer,
            memory: ReplayMemory::new(hyper.memory_capacity),
            net,
            hyper,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn train_step(&mut self) -> Result<Option<f64>> {
        train_step(
            &mut self.net,
            &mut self.optimizer,
            &self.memory,
            &self.hyper,
            &mut self.rng,
        )
    }

    /// Walks every decision of `episode`. In train mode each step is stored
    /// and followed by one update; greedy mode defers to [`play_greedy`].
    pub fn run_episode(
        &mut self,
        game: &GameConfig,
        episode: &EpisodeData,
        mode: Mode,
        epsilon: f64,
    ) -> Result<EpisodeRun> {
        if mode == Mode::Greedy {
            return play_greedy(&self.net, game, episode);
        }
        let mut run = EpisodeRun::default();
        let mut holding = false;
        let mut state = games::observe(game, episode, game.first_decision())?;
        for t in game.decisions() {
            let q = self.net.q_values(&state)?;
            let action = choose_action(&q, holding, epsilon, &mut self.rng);
            let out = games::step(game, episode, t, holding, action)?;
            let next_state = games::observe(game, episode, t + 1)?;
            self.memory.push(Transition {
                state: state.clone(),
                holding,
                action,
                reward: out.reward,
                next_state: next_state.clone(),
                next_holding: out.next_holding,
                done: out.done,
            });
            if let Some(loss) = self.train_step()? {
                run.losses.push(loss);
            }
            run.rewards.push(out.reward);
            run.trace.push(TraceRow {
                t,
                price: episode.price[t],
                action,
                reward: out.reward,
                q,
                holding,
            });
            holding = out.next_holding;
            state = next_state;
        }
        Ok(run)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub seed: u64,
    pub pnl: f64,
    pub epsilon: f64,
    pub mean_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: QNetwork,
    pub log: Vec<EpisodeLog>,
}

/// Seeds for network initialization and the agent's exploration/sampling
/// stream, both derived from one training seed.
pub fn derived_seeds(seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.random(), rng.random())
}

/// Trains a fresh `spec` network on the episodes generated from
/// `episode_seeds`, in order. `on_episode` sees each log record as it is
/// produced.
pub fn train(
    spec: NetSpec,
    hyper: &Hyperparams,
    game: &GameConfig,
    episode_seeds: &[u64],
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeLog),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    game.validate()?;
    if spec.channels != game.channels() || spec.window != game.window {
        return Err(Error::Config(format!(
            "{} expects a {}x{} input but the {} game provides {}x{}",
            spec,
            spec.window,
            spec.channels,
            game.kind,
            game.window,
            game.channels()
        )));
    }
    let (init_seed, agent_seed) = derived_seeds(seed);
    let mut agent = Agent::new(QNetwork::new(spec, init_seed)?, hyper.clone(), agent_seed);
    let mut log = Vec::with_capacity(episode_seeds.len());
    for (i, &ep_seed) in episode_seeds.iter().enumerate() {
        let episode = games::generate(game, ep_seed);
        let epsilon = hyper.epsilon.at(i);
        let run = agent
            .run_episode(game, &episode, Mode::Train, epsilon)
            .map_err(|e| match e {
                Error::NumericOverflow { .. } | Error::NonFiniteGradient(_) => Error::Diverged {
                    episode: i,
                    step: agent.optimizer.steps() as usize,
                },
                other => other,
            })?;
        if let Some(step) = run.losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::Diverged { episode: i, step });
        }
        let record = EpisodeLog {
            episode: i,
            seed: ep_seed,
            pnl: run.pnl(),
            epsilon,
            mean_loss: run.mean_loss(),
        };
        on_episode(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        net: agent.net,
        log,
    })
}
