//! Scoring: perfect-foresight optimum, greedy evaluation, report tables and
//! trace files.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dqn::{self, TraceRow};
use crate::error::{Error, Result};
use crate::games::{self, valid_actions, Action, EpisodeData, GameConfig, GameKind};
use crate::qnets::{QNetwork, REFERENCE_PARAM_COUNTS};

#[derive(Clone, Debug, PartialEq)]
pub struct OraclePlan {
    pub pnl: f64,
    pub actions: Vec<Action>,
}

/// Best achievable total reward over `prices.len() - 1` decisions, starting
/// flat, by backward induction over (decision, holding).
///
/// Ties prefer the lower action index, so the plan never trades for nothing.
pub fn optimal_plan(prices: &[f64], cost: f64) -> OraclePlan {
    let n = prices.len().saturating_sub(1);
    // value[t][h]: best reward from decision t onward with position h
    let mut value = vec![[0.0f64; 2]; n + 1];
    let mut best = vec![[Action::Cash; 2]; n];
    for t in (0..n).rev() {
        let delta = prices[t + 1] - prices[t];
        for holding in [false, true] {
            let mut choice = Action::Cash;
            let mut v = value[t + 1][0];
            for a in valid_actions(holding).actions() {
                let r = match a {
                    Action::Cash => continue,
                    Action::Buy => delta - cost,
                    Action::Hold => delta,
                };
                let cand = r + value[t + 1][1];
                if cand > v {
                    v = cand;
                    choice = a;
                }
            }
            value[t][holding as usize] = v;
            best[t][holding as usize] = choice;
        }
    }
    let mut actions = Vec::with_capacity(n);
    let mut holding = false;
    for b in &best {
        let a = b[holding as usize];
        actions.push(a);
        holding = a != Action::Cash;
    }
    OraclePlan {
        pnl: value[0][0],
        actions,
    }
}

/// Optimum over an episode's decision range.
pub fn oracle_pnl(game: &GameConfig, episode: &EpisodeData) -> OraclePlan {
    let span = &episode.price[game.first_decision()..=game.last_decision() + 1];
    optimal_plan(span, game.cost)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InSample,
    OutOfSample,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InSample => "in_sample",
            Split::OutOfSample => "out_of_sample",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub kind: GameKind,
    pub split: Split,
    pub seeds: Vec<u64>,
}

/// The three splits shared by every agent of a comparison. Training seeds
/// are `base..base+n_train`, out-of-sample seeds follow them, and the
/// in-sample split is the first `n_in_sample` training seeds.
pub fn standard_datasets(
    kind: GameKind,
    base: u64,
    n_train: usize,
    n_in_sample: usize,
    n_test: usize,
) -> [Dataset; 3] {
    let train: Vec<u64> = (0..n_train as u64).map(|i| base + i).collect();
    let in_sample = train[..n_in_sample.min(n_train)].to_vec();
    let test = (0..n_test as u64)
        .map(|i| base + n_train as u64 + i)
        .collect();
    let make = |split: Split, seeds| Dataset {
        name: format!("{kind}-{}", split.name()),
        kind,
        split,
        seeds,
    };
    [
        make(Split::Train, train),
        make(Split::InSample, in_sample),
        make(Split::OutOfSample, test),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: String,
    pub game: GameKind,
    pub param_count: usize,
    pub split: Split,
    pub mean_pnl: f64,
    /// Share of episodes with P&L strictly above zero.
    pub frac_positive: f64,
    /// Mean of agent/oracle P&L over episodes where the oracle is positive.
    pub mean_oracle_ratio: Option<f64>,
    pub mean_oracle_pnl: f64,
    pub episode_pnl: Vec<f64>,
    pub oracle_pnl: Vec<f64>,
}

/// Summary statistics for per-episode results.
pub fn summarize(
    spec: &str,
    game: GameKind,
    param_count: usize,
    split: Split,
    episode_pnl: Vec<f64>,
    oracle_pnl: Vec<f64>,
) -> EvalReport {
    let n = episode_pnl.len().max(1) as f64;
    let mean_pnl = episode_pnl.iter().sum::<f64>() / n;
    let frac_positive = episode_pnl.iter().filter(|&&p| p > 0.0).count() as f64 / n;
    let ratios: Vec<f64> = episode_pnl
        .iter()
        .zip(&oracle_pnl)
        .filter(|(_, &o)| o > 0.0)
        .map(|(a, o)| a / o)
        .collect();
    let mean_oracle_ratio =
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    let mean_oracle_pnl = oracle_pnl.iter().sum::<f64>() / oracle_pnl.len().max(1) as f64;
    EvalReport {
        spec: spec.to_string(),
        game,
        param_count,
        split,
        mean_pnl,
        frac_positive,
        mean_oracle_ratio,
        mean_oracle_pnl,
        episode_pnl,
        oracle_pnl,
    }
}

/// Scores an arbitrary policy: `play` maps an episode to its step rewards.
pub fn evaluate_with(
    spec: &str,
    param_count: usize,
    game: &GameConfig,
    dataset: &Dataset,
    mut play: impl FnMut(&EpisodeData) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let mut pnl = Vec::with_capacity(dataset.seeds.len());
    let mut oracle = Vec::with_capacity(dataset.seeds.len());
    for &seed in &dataset.seeds {
        let episode = games::generate(game, seed);
        pnl.push(games::episode_pnl(&play(&episode)?));
        oracle.push(oracle_pnl(game, &episode).pnl);
    }
    Ok(summarize(
        spec,
        game.kind,
        param_count,
        dataset.split,
        pnl,
        oracle,
    ))
}

/// Plays every episode of `dataset` greedily.
pub fn evaluate(net: &QNetwork, game: &GameConfig, dataset: &Dataset) -> Result<EvalReport> {
    evaluate_with(
        &net.spec().to_string(),
        net.count_params(),
        game,
        dataset,
        |ep| Ok(dqn::play_greedy(net, game, ep)?.rewards),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCell {
    pub mean_pnl: f64,
    pub frac_positive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub spec: String,
    pub param_count: Option<usize>,
    pub in_sample: Option<SplitCell>,
    pub out_of_sample: Option<SplitCell>,
    /// Set when a split has no report.
    pub missing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub game: GameKind,
    pub rows: Vec<TableRow>,
}

/// One row per entry of `specs`, in that order, filled from `reports`.
pub fn comparison_table(
    game: GameKind,
    specs: &[String],
    reports: &[EvalReport],
) -> ComparisonTable {
    let rows = specs
        .iter()
        .map(|spec| {
            let find = |split| {
                reports
                    .iter()
                    .find(|r| &r.spec == spec && r.game == game && r.split == split)
            };
            let cell = |r: &EvalReport| SplitCell {
                mean_pnl: r.mean_pnl,
                frac_positive: r.frac_positive,
            };
            let ins = find(Split::InSample);
            let oos = find(Split::OutOfSample);
            TableRow {
                spec: spec.clone(),
                param_count: ins.or(oos).map(|r| r.param_count),
                in_sample: ins.map(cell),
                out_of_sample: oos.map(cell),
                missing: ins.is_none() || oos.is_none(),
            }
        })
        .collect();
    ComparisonTable { game, rows }
}

impl ComparisonTable {
    /// Aligned plain-text rendering.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} game", self.game);
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>12} {:>8} {:>12} {:>8}",
            "spec", "#param", "in:mean", "in:>0", "out:mean", "out:>0"
        );
        let fmt_cell = |c: &Option<SplitCell>| match c {
            Some(c) => (
                format!("{:.1}", c.mean_pnl),
                format!("{:.0}%", 100.0 * c.frac_positive),
            ),
            None => ("-".to_string(), "-".to_string()),
        };
        for r in &self.rows {
            let (im, ip) = fmt_cell(&r.in_sample);
            let (om, op) = fmt_cell(&r.out_of_sample);
            let params = r.param_count.map_or("-".to_string(), |p| p.to_string());
            let flag = if r.missing { "  MISSING" } else { "" };
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>12} {:>8} {:>12} {:>8}{flag}",
                r.spec, params, im, ip, om, op
            );
        }
        s
    }

    /// Rows whose parameter count disagrees with the reference fixture.
    pub fn param_mismatches(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter_map(|r| {
                let reference = REFERENCE_PARAM_COUNTS.iter().find(|f| f.0 == r.spec)?;
                let want = match self.game {
                    GameKind::Univariate => reference.1,
                    GameKind::Bivariate => reference.2,
                };
                (r.param_count.is_some_and(|p| p != want)).then(|| r.spec.clone())
            })
            .collect()
    }
}

/// Column order of trace files.
pub const TRACE_HEADER: [&str; 8] = [
    "t", "price", "action", "reward", "q_cash", "q_buy", "q_hold", "holding",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TraceRecord {
    t: usize,
    price: f64,
    action: Action,
    reward: f64,
    q_cash: f64,
    q_buy: f64,
    q_hold: f64,
    holding: u8,
}

/// Writes a played episode as CSV with [`TRACE_HEADER`] columns; `holding`
/// is the position before the action, as 0 or 1.
pub fn trace_export<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(TraceRecord {
            t: r.t,
            price: r.price,
            action: r.action,
            reward: r.reward,
            q_cash: r.q[0],
            q_buy: r.q[1],
            q_hold: r.q[2],
            holding: r.holding as u8,
        })?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

pub fn parse_trace<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::Usage(format!("unexpected trace header {header:?}")));
    }
    rdr.deserialize::<TraceRecord>()
        .map(|rec| {
            let r = rec?;
            if r.holding > 1 {
                return Err(Error::Usage(format!("holding must be 0 or 1 at t={}", r.t)));
            }
            Ok(TraceRow {
                t: r.t,
                price: r.price,
                action: r.action,
                reward: r.reward,
                q: [r.q_cash, r.q_buy, r.q_hold],
                holding: r.holding == 1,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_price_is_never_traded() {
        let plan = optimal_plan(&[50.0; 30], 3.3);
        assert_eq!(plan.pnl, 0.0);
        assert!(plan.actions.iter().all(|&a| a == Action::Cash));
    }

    #[test]
    fn toy_optima() {
        // enumerated by hand: BUY,CASH = 6.7; BUY,HOLD = 1.7; CASH,BUY = -8.3; CASH,CASH = 0
        let p = optimal_plan(&[10.0, 20.0, 15.0], 3.3);
        assert!((p.pnl - 6.7).abs() < 1e-12);
        assert_eq!(p.actions, vec![Action::Buy, Action::Cash]);
        let m = optimal_plan(&[10.0, 20.0, 30.0, 40.0], 3.3);
        assert!((m.pnl - 26.7).abs() < 1e-12);
        assert_eq!(m.actions, vec![Action::Buy, Action::Hold, Action::Hold]);
    }

    #[test]
    fn summary_metrics() {
        let r = summarize(
            "X",
            GameKind::Univariate,
            1,
            Split::OutOfSample,
            vec![0.0, 2.0, -1.0, 3.0],
            vec![0.0, 4.0, 2.0, 3.0],
        );
        assert_eq!(r.mean_pnl, 1.0);
        assert_eq!(r.frac_positive, 0.5);
        assert!((r.mean_oracle_ratio.unwrap() - (0.5 - 0.5 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn datasets_are_disjoint() {
        let [train, ins, oos] = standard_datasets(GameKind::Bivariate, 1000, 50, 10, 20);
        assert_eq!(train.seeds.len(), 50);
        assert!(ins.seeds.iter().all(|s| train.seeds.contains(s)));
        assert!(oos.seeds.iter().all(|s| !train.seeds.contains(s)));
        assert_eq!(oos.split, Split::OutOfSample);
    }

    #[test]
    fn table_flags_missing_rows() {
        let r = summarize(
            "MLP-16x4",
            GameKind::Univariate,
            1523,
            Split::InSample,
            vec![1.0],
            vec![2.0],
        );
        let mut r2 = r.clone();
        r2.split = Split::OutOfSample;
        let specs = vec!["MLP-16x4".to_string(), "GRU-8x3".to_string()];
        let table = comparison_table(GameKind::Univariate, &specs, &[r, r2]);
        assert!(!table.rows[0].missing);
        assert!(table.rows[1].missing);
        assert!(table.render().contains("MISSING"));
        assert!(table.param_mismatches().is_empty());
    }

    #[test]
    fn trace_round_trip() {
        let rows = vec![
            TraceRow {
                t: 39,
                price: 101.25,
                action: Action::Buy,
                reward: -1.5,
                q: [0.1, 0.2, -0.3],
                holding: false,
            },
            TraceRow {
                t: 40,
                price: 99.0,
                action: Action::Hold,
                reward: 2.0,
                q: [1.0 / 3.0, 2.0, 1e-17],
                holding: true,
            },
        ];
        let mut buf = Vec::new();
        trace_export(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,price,action,reward,q_cash,q_buy,q_hold,holding\n"));
        assert_eq!(parse_trace(&buf[..]).unwrap(), rows);
    }
}
