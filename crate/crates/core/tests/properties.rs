use proptest::prelude::*;
use qlab_core::dqn::{choose_action, ReplayMemory, Transition};
use qlab_core::evalkit::optimal_plan;
use qlab_core::games::{self, normalize_by_mean, valid_actions, Action, GameConfig, GameKind};
use qlab_core::Tensor2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kind() -> impl Strategy<Value = GameKind> {
    prop_oneof![Just(GameKind::Univariate), Just(GameKind::Bivariate)]
}

/// Round-trip trade accounting: each BUY opens at `p[t]` and pays the cost,
/// a later CASH closes at `p[t]`, an open position is marked at the final price.
fn ledger_pnl(prices: &[f64], actions: &[Action], cost: f64) -> f64 {
    let mut total = 0.0;
    let mut entry: Option<f64> = None;
    for (t, a) in actions.iter().enumerate() {
        match a {
            Action::Buy => entry = Some(prices[t]),
            Action::Cash => {
                if let Some(e) = entry.take() {
                    total += prices[t] - e - cost;
                }
            }
            Action::Hold => {}
        }
    }
    if let Some(e) = entry {
        total += prices[actions.len()] - e - cost;
    }
    total
}

/// Every valid action sequence, scored by summing rewards from the back.
fn brute_force_best(prices: &[f64], cost: f64) -> f64 {
    let n = prices.len() - 1;
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        // bit t: position held after decision t
        let mut rewards = Vec::with_capacity(n);
        let mut holding = false;
        for t in 0..n {
            let want = mask >> t & 1 == 1;
            let delta = prices[t + 1] - prices[t];
            rewards.push(match (holding, want) {
                (_, false) => 0.0,
                (false, true) => delta - cost,
                (true, true) => delta,
            });
            holding = want;
        }
        let v = rewards.iter().rev().fold(0.0, |acc, r| r + acc);
        best = best.max(v);
    }
    best
}

fn dummy_transition(reward: f64) -> Transition {
    Transition {
        state: Tensor2::zeros(1, 1),
        holding: false,
        action: Action::Cash,
        reward,
        next_state: Tensor2::zeros(1, 1),
        next_holding: false,
        done: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_rewards_match_trade_ledger(kind in kind(), seed in any::<u64>(), policy in any::<u64>()) {
        let game = GameConfig::new(kind);
        let ep = games::generate(&game, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(policy);
        let mut holding = false;
        let mut rewards = Vec::new();
        let mut actions = Vec::new();
        for t in game.decisions() {
            let valid = valid_actions(holding).actions();
            let a = valid[rng.random_range(0..2)];
            let out = games::step(&game, &ep, t, holding, a).unwrap();
            rewards.push(out.reward);
            actions.push(a);
            holding = out.next_holding;
        }
        let span = &ep.price[game.first_decision()..=game.last_decision() + 1];
        let ledger = ledger_pnl(span, &actions, game.cost);
        prop_assert!((games::episode_pnl(&rewards) - ledger).abs() < 1e-9);
    }

    #[test]
    fn oracle_equals_exhaustive_search(
        prices in prop::collection::vec(1.0f64..400.0, 2..=13),
        cost in 0.0f64..10.0,
    ) {
        let plan = optimal_plan(&prices, cost);
        prop_assert_eq!(plan.pnl, brute_force_best(&prices, cost));
        prop_assert_eq!(plan.actions.len(), prices.len() - 1);
        let replayed = ledger_pnl(&prices, &plan.actions, cost);
        prop_assert!((replayed - plan.pnl).abs() < 1e-9);
    }

    #[test]
    fn oracle_bounds_any_policy(kind in kind(), seed in any::<u64>(), policy in any::<u64>()) {
        let game = GameConfig::new(kind);
        let ep = games::generate(&game, seed);
        let span = &ep.price[game.first_decision()..=game.last_decision() + 1];
        let best = optimal_plan(span, game.cost).pnl;
        prop_assert!(best >= 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(policy);
        let mut holding = false;
        let mut actions = Vec::new();
        for _ in 0..span.len() - 1 {
            let a = valid_actions(holding).actions()[rng.random_range(0..2)];
            holding = a != Action::Cash;
            actions.push(a);
        }
        prop_assert!(ledger_pnl(span, &actions, game.cost) <= best + 1e-9);
    }

    #[test]
    fn normalized_window_has_zero_mean_and_is_scale_free(
        xs in prop::collection::vec(1.0f64..1000.0, 1..64),
        scale in 0.01f64..100.0,
    ) {
        let mut a = xs.clone();
        normalize_by_mean(&mut a);
        let mut b: Vec<f64> = xs.iter().map(|x| x * scale).collect();
        normalize_by_mean(&mut b);
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn observation_shape_and_mean(kind in kind(), seed in any::<u64>(), offset in 0usize..181) {
        let game = GameConfig::new(kind);
        let ep = games::generate(&game, seed);
        let t = game.first_decision() + offset;
        let obs = games::observe(&game, &ep, t).unwrap();
        prop_assert_eq!(obs.shape(), (game.window, game.channels()));
        for c in 0..game.channels() {
            let mean = (0..game.window).map(|r| obs.get(r, c)).sum::<f64>() / game.window as f64;
            prop_assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn episodes_stay_positive(kind in kind(), seed in any::<u64>()) {
        let game = GameConfig::new(kind);
        let ep = games::generate(&game, seed);
        prop_assert_eq!(ep.len(), game.series_len());
        prop_assert!(ep.price.iter().all(|&p| p > 0.0));
        if let Some(s) = &ep.signal {
            prop_assert!(s.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn memory_never_exceeds_capacity(capacity in 1usize..50, pushes in 0usize..200) {
        let mut mem = ReplayMemory::new(capacity);
        for i in 0..pushes {
            mem.push(dummy_transition(i as f64));
            prop_assert!(mem.len() <= capacity);
        }
        prop_assert_eq!(mem.len(), pushes.min(capacity));
        let mut kept: Vec<f64> = mem.iter().map(|t| t.reward).collect();
        kept.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (pushes.saturating_sub(capacity)..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn minibatch_draws_are_distinct(capacity in 1usize..80, n in 1usize..100, seed in any::<u64>()) {
        let mut mem = ReplayMemory::new(capacity);
        for i in 0..capacity {
            mem.push(dummy_transition(i as f64));
        }
        let batch = mem.sample(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        prop_assert_eq!(seen.len(), n.min(capacity));
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        prop_assert_eq!(seen.len(), n.min(capacity));
    }

    #[test]
    fn chosen_action_is_always_valid(
        q in prop::array::uniform3(-1e6f64..1e6),
        holding in any::<bool>(),
        epsilon in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..16 {
            let a = choose_action(&q, holding, epsilon, &mut rng);
            prop_assert!(valid_actions(holding).contains(a));
        }
    }

    #[test]
    fn greedy_choice_ignores_invalid_q(q in prop::array::uniform3(-1e3f64..1e3), holding in any::<bool>()) {
        let invalid = if holding { Action::Buy } else { Action::Hold };
        let mut boosted = q;
        boosted[invalid.index()] = 1e12;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        prop_assert_eq!(
            choose_action(&q, holding, 0.0, &mut rng),
            choose_action(&boosted, holding, 0.0, &mut rng)
        );
    }
}
