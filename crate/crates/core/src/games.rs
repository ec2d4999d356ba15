//! The two trading games and the episode rules.
//!
//! An episode holds `window + steps + 1` raw values. Decisions are taken at
//! raw indices `window - 1 ..= window + steps - 2`, each seeing the trailing
//! `window` values and earning `p[t+1] - p[t]` (minus the cost when buying)
//! while long.

use std::f64::consts::TAU;
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::Tensor2;

/// Lower clamp applied to every emitted price and signal value.
pub const MIN_VALUE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameKind {
    Univariate,
    Bivariate,
}

impl GameKind {
    pub fn channels(self) -> usize {
        match self {
            GameKind::Univariate => 1,
            GameKind::Bivariate => 2,
        }
    }
}

impl fmt::Display for GameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GameKind::Univariate => "univariate",
            GameKind::Bivariate => "bivariate",
        })
    }
}

/// Closed real interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        self.0 + (self.1 - self.0) * rng.random::<f64>()
    }

    fn check(self, what: &str) -> Result<()> {
        if self.0.is_finite() && self.1.is_finite() && self.0 <= self.1 {
            Ok(())
        } else {
            Err(Error::Config(format!("{what}: empty range {self:?}")))
        }
    }
}

/// Closed integer interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntSpan(pub usize, pub usize);

impl IntSpan {
    fn sample<R: Rng>(self, rng: &mut R) -> usize {
        rng.random_range(self.0..=self.1)
    }

    fn check(self, what: &str) -> Result<()> {
        if self.0 <= self.1 {
            Ok(())
        } else {
            Err(Error::Config(format!("{what}: empty range {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnivariateParams {
    pub n_short_waves: usize,
    pub short_period: Span,
    pub short_amplitude: Span,
    pub long_period: Span,
    pub long_amplitude: Span,
    pub base: f64,
    pub noise_sigma: f64,
}

impl Default for UnivariateParams {
    fn default() -> Self {
        Self {
            n_short_waves: 2,
            short_period: Span(10.0, 40.0),
            short_amplitude: Span(5.0, 80.0),
            long_period: Span(80.0, 200.0),
            long_amplitude: Span(20.0, 80.0),
            base: 200.0,
            noise_sigma: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BivariateParams {
    pub jump_gap: IntSpan,
    pub jump_amplitude: Span,
    pub lead: IntSpan,
    pub signal_noise_sigma: f64,
    pub start_price: Span,
    pub price_floor: f64,
}

impl Default for BivariateParams {
    fn default() -> Self {
        Self {
            jump_gap: IntSpan(15, 30),
            jump_amplitude: Span(-30.0, 30.0),
            lead: IntSpan(10, 30),
            signal_noise_sigma: 5.0,
            start_price: Span(100.0, 200.0),
            price_floor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConfig {
    pub kind: GameKind,
    /// Decisions per episode.
    pub steps: usize,
    /// Observation window length.
    pub window: usize,
    /// Cost charged on BUY.
    pub cost: f64,
    pub univariate: UnivariateParams,
    pub bivariate: BivariateParams,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            kind: GameKind::Univariate,
            steps: 180,
            window: 40,
            cost: 3.3,
            univariate: UnivariateParams::default(),
            bivariate: BivariateParams::default(),
        }
    }
}

impl GameConfig {
    pub fn new(kind: GameKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn series_len(&self) -> usize {
        self.window + self.steps + 1
    }

    pub fn first_decision(&self) -> usize {
        self.window - 1
    }

    pub fn last_decision(&self) -> usize {
        self.window + self.steps - 2
    }

    pub fn decisions(&self) -> std::ops::RangeInclusive<usize> {
        self.first_decision()..=self.last_decision()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.window == 0 {
            return Err(Error::Config("steps and window must be at least 1".into()));
        }
        if !(self.cost.is_finite() && self.cost >= 0.0) {
            return Err(Error::Config(format!(
                "cost must be >= 0, got {}",
                self.cost
            )));
        }
        let u = &self.univariate;
        u.short_period.check("univariate.short_period")?;
        u.short_amplitude.check("univariate.short_amplitude")?;
        u.long_period.check("univariate.long_period")?;
        u.long_amplitude.check("univariate.long_amplitude")?;
        if u.short_period.0 <= 0.0 || u.long_period.0 <= 0.0 {
            return Err(Error::Config("wave periods must be positive".into()));
        }
        if !(u.noise_sigma >= 0.0 && u.base.is_finite()) {
            return Err(Error::Config("univariate noise_sigma must be >= 0".into()));
        }
        let b = &self.bivariate;
        b.jump_gap.check("bivariate.jump_gap")?;
        b.jump_amplitude.check("bivariate.jump_amplitude")?;
        b.lead.check("bivariate.lead")?;
        b.start_price.check("bivariate.start_price")?;
        if b.jump_gap.0 == 0 {
            return Err(Error::Config(
                "bivariate.jump_gap must start at 1 or more".into(),
            ));
        }
        if !(b.signal_noise_sigma >= 0.0 && b.price_floor > 0.0) {
            return Err(Error::Config(
                "bivariate signal_noise_sigma must be >= 0 and price_floor > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub period: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Wave {
    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (TAU * t / self.period + self.phase).sin()
    }
}

/// The random draws behind one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "game", rename_all = "lowercase")]
pub enum GenerationParams {
    Univariate {
        short_waves: Vec<Wave>,
        long_wave: Wave,
    },
    Bivariate {
        start_price: f64,
        lead: usize,
        jump_indices: Vec<usize>,
        jump_sizes: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeData {
    pub seed: u64,
    pub price: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<Vec<f64>>,
    pub params: GenerationParams,
}

impl EpisodeData {
    pub fn kind(&self) -> GameKind {
        match self.params {
            GenerationParams::Univariate { .. } => GameKind::Univariate,
            GenerationParams::Bivariate { .. } => GameKind::Bivariate,
        }
    }

    pub fn len(&self) -> usize {
        self.price.len()
    }

    pub fn is_empty(&self) -> bool {
        self.price.is_empty()
    }

    /// Channel `c` of the observed series: 0 is price, 1 is signal.
    pub fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.price,
            _ => self
                .signal
                .as_deref()
                .expect("signal channel on univariate episode"),
        }
    }
}

/// Generates one episode of the configured game.
pub fn generate(config: &GameConfig, seed: u64) -> EpisodeData {
    match config.kind {
        GameKind::Univariate => generate_univariate(config, seed),
        GameKind::Bivariate => generate_bivariate(config, seed),
    }
}

/// Base level plus short waves, one long wave and Gaussian noise.
pub fn generate_univariate(config: &GameConfig, seed: u64) -> EpisodeData {
    let p = &config.univariate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw_wave = |period: Span, amplitude: Span| Wave {
        period: period.sample(&mut rng),
        amplitude: amplitude.sample(&mut rng),
        phase: TAU * rng.random::<f64>(),
    };
    let short_waves: Vec<Wave> = (0..p.n_short_waves)
        .map(|_| draw_wave(p.short_period, p.short_amplitude))
        .collect();
    let long_wave = draw_wave(p.long_period, p.long_amplitude);
    let price = (0..config.series_len())
        .map(|t| {
            let tf = t as f64;
            let waves: f64 = short_waves.iter().map(|w| w.at(tf)).sum();
            let noise: f64 = rng.sample(StandardNormal);
            (p.base + waves + long_wave.at(tf) + p.noise_sigma * noise).max(MIN_VALUE)
        })
        .collect();
    EpisodeData {
        seed,
        price,
        signal: None,
        params: GenerationParams::Univariate {
            short_waves,
            long_wave,
        },
    }
}

/// Random step price plus a noisy copy of it shifted `lead` steps ahead.
pub fn generate_bivariate(config: &GameConfig, seed: u64) -> EpisodeData {
    let p = &config.bivariate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lead = p.lead.sample(&mut rng);
    let start_price = p.start_price.sample(&mut rng);
    let full_len = config.series_len() + lead;

    let mut full = Vec::with_capacity(full_len);
    let mut jump_indices = Vec::new();
    let mut jump_sizes = Vec::new();
    let mut next_jump = p.jump_gap.sample(&mut rng);
    let mut level = start_price;
    for t in 0..full_len {
        if t == next_jump {
            let size = p.jump_amplitude.sample(&mut rng);
            level = (level + size).max(p.price_floor);
            jump_indices.push(t);
            jump_sizes.push(size);
            next_jump += p.jump_gap.sample(&mut rng);
        }
        full.push(level.max(MIN_VALUE));
    }

    let signal = (0..config.series_len())
        .map(|t| {
            let noise: f64 = rng.sample(StandardNormal);
            (full[t + lead] + p.signal_noise_sigma * noise).max(MIN_VALUE)
        })
        .collect();
    full.truncate(config.series_len());
    EpisodeData {
        seed,
        price: full,
        signal: Some(signal),
        params: GenerationParams::Bivariate {
            start_price,
            lead,
            jump_indices,
            jump_sizes,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Cash = 0,
    Buy = 1,
    Hold = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Cash, Action::Buy, Action::Hold];

    /// Position in the network output vector.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Cash => "CASH",
            Action::Buy => "BUY",
            Action::Hold => "HOLD",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the two valid-action sets: `{CASH, BUY}` when flat, `{CASH, HOLD}`
/// when long.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActionSet {
    holding: bool,
}

impl ActionSet {
    pub fn contains(self, a: Action) -> bool {
        match a {
            Action::Cash => true,
            Action::Buy => !self.holding,
            Action::Hold => self.holding,
        }
    }

    /// Members in ascending action index.
    pub fn actions(self) -> [Action; 2] {
        if self.holding {
            [Action::Cash, Action::Hold]
        } else {
            [Action::Cash, Action::Buy]
        }
    }

    pub fn len(self) -> usize {
        2
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// The valid action with the largest value, lowest index on ties.
    pub fn argmax(self, q: &[f64]) -> Action {
        let [a, b] = self.actions();
        if q[b.index()] > q[a.index()] {
            b
        } else {
            a
        }
    }

    pub fn max(self, q: &[f64]) -> f64 {
        q[self.argmax(q).index()]
    }
}

pub fn valid_actions(holding: bool) -> ActionSet {
    ActionSet { holding }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_holding: bool,
    pub next_valid: ActionSet,
    pub done: bool,
}

/// Applies `action` at decision index `t`. CASH while long closes the
/// position at `p[t]`; the gain was already credited step by step.
pub fn step(
    config: &GameConfig,
    episode: &EpisodeData,
    t: usize,
    holding: bool,
    action: Action,
) -> Result<StepOutcome> {
    if !config.decisions().contains(&t) || t + 1 >= episode.price.len() {
        return Err(Error::Usage(format!(
            "decision index {t} outside {:?}",
            config.decisions()
        )));
    }
    if !valid_actions(holding).contains(action) {
        return Err(Error::InvalidAction {
            action: action.to_string(),
            holding,
        });
    }
    let delta = episode.price[t + 1] - episode.price[t];
    let reward = match action {
        Action::Cash => 0.0,
        Action::Buy => delta - config.cost,
        Action::Hold => delta,
    };
    let next_holding = action != Action::Cash;
    Ok(StepOutcome {
        reward,
        next_holding,
        next_valid: valid_actions(next_holding),
        done: t == config.last_decision(),
    })
}

/// `x / mean(x) - 1` in place.
pub fn normalize_by_mean(xs: &mut [f64]) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    for x in xs {
        *x = *x / mean - 1.0;
    }
}

/// The `window x channels` observation ending at raw index `t`, each channel
/// normalized by its own mean over the window.
pub fn observe(config: &GameConfig, episode: &EpisodeData, t: usize) -> Result<Tensor2> {
    let w = config.window;
    if t + 1 < w || t >= episode.price.len() {
        return Err(Error::Usage(format!(
            "cannot observe index {t}: need {} <= t < {}",
            w - 1,
            episode.price.len()
        )));
    }
    let channels = config.channels();
    let mut out = Tensor2::zeros(w, channels);
    let mut buf = vec![0.0; w];
    for c in 0..channels {
        buf.copy_from_slice(&episode.channel(c)[t + 1 - w..=t]);
        normalize_by_mean(&mut buf);
        for (r, v) in buf.iter().enumerate() {
            out.set(r, c, *v);
        }
    }
    Ok(out)
}

/// Profit and loss of an episode: the sum of its step rewards.
pub fn episode_pnl(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

/// Writes episodes as JSON lines, one record per episode.
pub fn write_episodes<W: Write>(mut out: W, episodes: &[EpisodeData]) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")
            .map_err(|err| Error::io("<episode dump>", err))?;
    }
    Ok(())
}

pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<EpisodeData>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<episode dump>", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_wave_config() -> GameConfig {
        GameConfig {
            univariate: UnivariateParams {
                n_short_waves: 1,
                short_period: Span(20.0, 20.0),
                short_amplitude: Span(10.0, 10.0),
                long_amplitude: Span(0.0, 0.0),
                noise_sigma: 0.0,
                ..UnivariateParams::default()
            },
            ..GameConfig::default()
        }
    }

    #[test]
    fn degenerate_univariate_is_a_pure_sine() {
        let cfg = single_wave_config();
        let ep = generate_univariate(&cfg, 11);
        let GenerationParams::Univariate { short_waves, .. } = &ep.params else {
            panic!("wrong params");
        };
        let phi = short_waves[0].phase;
        assert_eq!(ep.price.len(), 221);
        for (t, p) in ep.price.iter().enumerate() {
            let want = 10.0 * (TAU * t as f64 / 20.0 + phi).sin();
            assert!((p - 200.0 - want).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_series() {
        for kind in [GameKind::Univariate, GameKind::Bivariate] {
            let cfg = GameConfig::new(kind);
            assert_eq!(generate(&cfg, 5), generate(&cfg, 5));
            assert_ne!(generate(&cfg, 5).price, generate(&cfg, 6).price);
        }
    }

    #[test]
    fn noiseless_signal_leads_price_exactly() {
        let mut cfg = GameConfig::new(GameKind::Bivariate);
        cfg.bivariate.signal_noise_sigma = 0.0;
        for seed in 0..50 {
            let ep = generate_bivariate(&cfg, seed);
            let GenerationParams::Bivariate { lead, .. } = ep.params else {
                panic!();
            };
            let signal = ep.signal.as_ref().unwrap();
            for (s, p) in signal.iter().zip(&ep.price[lead..]) {
                assert_eq!(s, p);
            }
        }
    }

    #[test]
    fn jump_gaps_within_bounds() {
        let cfg = GameConfig::new(GameKind::Bivariate);
        for seed in 0..200 {
            let ep = generate_bivariate(&cfg, seed);
            let GenerationParams::Bivariate { jump_indices, .. } = &ep.params else {
                panic!();
            };
            assert!((15..=30).contains(&jump_indices[0]));
            for pair in jump_indices.windows(2) {
                assert!((15..=30).contains(&(pair[1] - pair[0])));
            }
        }
    }

    #[test]
    fn validity_sets() {
        assert_eq!(valid_actions(false).actions(), [Action::Cash, Action::Buy]);
        assert_eq!(valid_actions(true).actions(), [Action::Cash, Action::Hold]);
        assert!(!valid_actions(true).contains(Action::Buy));
        assert!(!valid_actions(false).contains(Action::Hold));
    }

    fn toy_episode(prices: &[f64]) -> (GameConfig, EpisodeData) {
        let cfg = GameConfig {
            window: 1,
            steps: prices.len() - 1,
            ..GameConfig::default()
        };
        let ep = EpisodeData {
            seed: 0,
            price: prices.to_vec(),
            signal: None,
            params: GenerationParams::Univariate {
                short_waves: vec![],
                long_wave: Wave {
                    period: 1.0,
                    amplitude: 0.0,
                    phase: 0.0,
                },
            },
        };
        (cfg, ep)
    }

    #[test]
    fn rewards_by_substitution() {
        let (cfg, ep) = toy_episode(&[100.0, 105.0]);
        let buy = step(&cfg, &ep, 0, false, Action::Buy).unwrap();
        assert!((buy.reward - 1.7).abs() < 1e-12);
        assert!(buy.next_holding && buy.done);
        assert_eq!(step(&cfg, &ep, 0, true, Action::Hold).unwrap().reward, 5.0);
        assert_eq!(step(&cfg, &ep, 0, true, Action::Cash).unwrap().reward, 0.0);
        assert_eq!(step(&cfg, &ep, 0, false, Action::Cash).unwrap().reward, 0.0);
    }

    #[test]
    fn invalid_action_is_rejected() {
        let (cfg, ep) = toy_episode(&[100.0, 105.0]);
        assert!(matches!(
            step(&cfg, &ep, 0, true, Action::Buy),
            Err(Error::InvalidAction { .. })
        ));
        assert!(matches!(
            step(&cfg, &ep, 1, false, Action::Cash),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn normalization_cases() {
        let mut two = [90.0, 110.0];
        normalize_by_mean(&mut two);
        assert!((two[0] + 0.1).abs() < 1e-15 && (two[1] - 0.1).abs() < 1e-15);
        let mut flat = [50.0; 40];
        normalize_by_mean(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn observe_bounds_and_shape() {
        let cfg = GameConfig::new(GameKind::Bivariate);
        let ep = generate(&cfg, 1);
        assert!(observe(&cfg, &ep, 38).is_err());
        assert!(observe(&cfg, &ep, 221).is_err());
        let s = observe(&cfg, &ep, 39).unwrap();
        assert_eq!(s.shape(), (40, 2));
        assert!(observe(&cfg, &ep, 220).is_ok());
    }

    #[test]
    fn decision_range_is_180_steps() {
        let cfg = GameConfig::default();
        assert_eq!(cfg.series_len(), 221);
        assert_eq!(cfg.decisions(), 39..=218);
        assert_eq!(cfg.decisions().count(), 180);
    }

    #[test]
    fn dump_round_trip() {
        let cfg = GameConfig::new(GameKind::Bivariate);
        let eps: Vec<_> = (0..3).map(|s| generate(&cfg, s)).collect();
        let mut buf = Vec::new();
        write_episodes(&mut buf, &eps).unwrap();
        assert_eq!(read_episodes(&buf[..]).unwrap(), eps);
    }
}
