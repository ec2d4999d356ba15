use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use qlab_core::dqn::{self, EpisodeLog};
use qlab_core::evalkit::{self, comparison_table, ComparisonTable, EvalReport};
use qlab_core::games;
use qlab_core::qnets::{param_table, ParamRow, REFERENCE_PARAM_COUNTS};
use qlab_core::{NetSpec, QNetwork};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{artifact_stem, RunConfig};
use crate::CliError;

pub const EPISODES_DIR: &str = "episodes";
pub const WEIGHTS_DIR: &str = "weights";
pub const LOGS_DIR: &str = "logs";
pub const REPORTS_DIR: &str = "reports";
pub const TRACES_DIR: &str = "reports/traces";

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(qlab_core::Error::from)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} jobs: {e}")))
}

pub fn weights_path(config: &RunConfig, spec: &NetSpec) -> PathBuf {
    config
        .dir(WEIGHTS_DIR)
        .join(format!("{}.weights", artifact_stem(config, spec)))
}

/// Writes `count` episodes, seeded from `data.base_seed` upward, as JSON
/// lines to `episodes/<game>.jsonl`.
pub fn cmd_generate(config: &RunConfig, count: usize) -> Result<PathBuf, CliError> {
    config.game.validate()?;
    let dir = config.dir(EPISODES_DIR);
    create_dir(&dir)?;
    let path = dir.join(format!("{}.jsonl", config.game.kind));
    let episodes: Vec<_> = (0..count as u64)
        .map(|i| games::generate(&config.game, config.data.base_seed + i))
        .collect();
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut out = BufWriter::new(file);
    games::write_episodes(&mut out, &episodes)?;
    out.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub spec: String,
    pub weights: PathBuf,
    pub log: PathBuf,
    pub episodes: usize,
    pub final_epsilon: Option<f64>,
}

/// Trains every configured network and persists its weights and
/// per-episode log. All names are validated before any training starts.
pub fn cmd_train(config: &RunConfig, jobs: usize) -> Result<Vec<TrainSummary>, CliError> {
    let specs = config.validate()?;
    create_dir(&config.dir(WEIGHTS_DIR))?;
    create_dir(&config.dir(LOGS_DIR))?;
    let [train_set, _, _] = config.datasets();
    let results: Vec<Result<TrainSummary, CliError>> = pool(jobs)?.install(|| {
        specs
            .par_iter()
            .map(|spec| train_one(config, *spec, &train_set.seeds))
            .collect()
    });
    results.into_iter().collect()
}

fn train_one(config: &RunConfig, spec: NetSpec, seeds: &[u64]) -> Result<TrainSummary, CliError> {
    let stem = artifact_stem(config, &spec);
    let log_path = config.dir(LOGS_DIR).join(format!("{stem}.jsonl"));
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let started = Instant::now();
    let mut write_err = None;
    let every = (seeds.len() / 10).max(1);
    let outcome = dqn::train(
        spec,
        &config.hyper,
        &config.game,
        seeds,
        config.seed,
        |rec: &EpisodeLog| {
            if write_err.is_none() {
                let line = serde_json::to_string(rec).expect("log records serialize");
                if let Err(e) = writeln!(log, "{line}") {
                    write_err = Some(e);
                }
            }
            if (rec.episode + 1).is_multiple_of(every) {
                eprintln!(
                    "[{stem}] episode {}/{} pnl {:.1} epsilon {:.2} ({:.0}s)",
                    rec.episode + 1,
                    seeds.len(),
                    rec.pnl,
                    rec.epsilon,
                    started.elapsed().as_secs_f64()
                );
            }
        },
    );
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let outcome = outcome?;
    let weights = weights_path(config, &spec);
    outcome.net.save(&weights)?;
    Ok(TrainSummary {
        spec: spec.to_string(),
        weights,
        log: log_path,
        episodes: outcome.log.len(),
        final_epsilon: outcome.log.last().map(|r| r.epsilon),
    })
}

/// Loads the weights of `spec`, or `None` when the file does not exist.
pub fn load_trained(config: &RunConfig, spec: NetSpec) -> Result<Option<QNetwork>, CliError> {
    let path = weights_path(config, &spec);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(QNetwork::load(spec, &path)?))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub table: ComparisonTable,
    pub missing: Vec<String>,
}

/// Greedy evaluation of every configured network on the in-sample and
/// out-of-sample splits. A network without a weight file is reported as a
/// flagged table row. With `trace`, the first out-of-sample episode of each
/// network is also written as a trace file.
pub fn cmd_eval(config: &RunConfig, jobs: usize, trace: bool) -> Result<EvalOutcome, CliError> {
    let specs = config.validate()?;
    create_dir(&config.dir(REPORTS_DIR))?;
    if trace {
        create_dir(&config.dir(TRACES_DIR))?;
    }
    let [_, in_sample, out_of_sample] = config.datasets();
    let per_spec: Vec<Result<Vec<EvalReport>, CliError>> = pool(jobs)?.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let Some(net) = load_trained(config, *spec)? else {
                    return Ok(Vec::new());
                };
                let reports = vec![
                    evalkit::evaluate(&net, &config.game, &in_sample)?,
                    evalkit::evaluate(&net, &config.game, &out_of_sample)?,
                ];
                let stem = artifact_stem(config, spec);
                write_json(
                    &config.dir(REPORTS_DIR).join(format!("{stem}.json")),
                    &reports,
                )?;
                if trace {
                    if let Some(&seed) = out_of_sample.seeds.first() {
                        write_trace(
                            config,
                            &net,
                            seed,
                            &config.dir(TRACES_DIR).join(format!("{stem}-{seed}.csv")),
                        )?;
                    }
                }
                Ok(reports)
            })
            .collect()
    });
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for (spec, r) in specs.iter().zip(per_spec) {
        let r = r?;
        if r.is_empty() {
            missing.push(spec.to_string());
        }
        reports.extend(r);
    }
    let names: Vec<String> = specs.iter().map(|s| s.to_string()).collect();
    let table = comparison_table(config.game.kind, &names, &reports);
    let stem = format!("{}-table", config.game.kind);
    write_json(
        &config.dir(REPORTS_DIR).join(format!("{stem}.json")),
        &table,
    )?;
    write_file(
        &config.dir(REPORTS_DIR).join(format!("{stem}.txt")),
        table.render().as_bytes(),
    )?;
    Ok(EvalOutcome { table, missing })
}

fn write_trace(config: &RunConfig, net: &QNetwork, seed: u64, path: &Path) -> Result<(), CliError> {
    let episode = games::generate(&config.game, seed);
    let run = dqn::play_greedy(net, &config.game, &episode)?;
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    evalkit::trace_export(&run.trace, BufWriter::new(file))?;
    Ok(())
}

/// Greedy trace of the first configured network on the episode `seed`.
pub fn cmd_trace(config: &RunConfig, seed: u64, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let specs = config.validate()?;
    let spec = specs[0];
    let net = load_trained(config, spec)?.ok_or_else(|| {
        CliError::Config(format!(
            "no weights for {spec} at {}",
            weights_path(config, &spec).display()
        ))
    })?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            create_dir(&config.dir(TRACES_DIR))?;
            config
                .dir(TRACES_DIR)
                .join(format!("{}-{seed}.csv", artifact_stem(config, &spec)))
        }
    };
    write_trace(config, &net, seed, &path)?;
    Ok(path)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub rows: Vec<ParamCheckRow>,
    pub matched: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheckRow {
    pub name: String,
    pub univariate: usize,
    pub bivariate: usize,
    pub expected_univariate: Option<usize>,
    pub expected_bivariate: Option<usize>,
}

impl ParamCheckRow {
    fn mismatches(&self) -> usize {
        usize::from(self.expected_univariate != Some(self.univariate))
            + usize::from(self.expected_bivariate != Some(self.bivariate))
    }
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.matched == self.total
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<10} {:>9} {:>9}\n", "spec", "1-channel", "2-channel");
        for r in &self.rows {
            let mark = |got: usize, want: Option<usize>| match want {
                Some(w) if w == got => format!("{got}"),
                Some(w) => format!("{got}!={w}"),
                None => format!("{got}?"),
            };
            s.push_str(&format!(
                "{:<10} {:>9} {:>9}\n",
                r.name,
                mark(r.univariate, r.expected_univariate),
                mark(r.bivariate, r.expected_bivariate)
            ));
        }
        s.push_str(&format!("{}/{} match\n", self.matched, self.total));
        s
    }

    pub fn offending_rows(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.mismatches() > 0)
            .map(|r| r.name.as_str())
            .collect()
    }
}

/// The embedded reference counts as [`ParamRow`]s.
pub fn reference_rows() -> Vec<ParamRow> {
    REFERENCE_PARAM_COUNTS
        .iter()
        .map(|&(name, univariate, bivariate)| ParamRow {
            name: name.to_string(),
            univariate,
            bivariate,
        })
        .collect()
}

/// Computes all parameter counts and compares them against `expected`.
pub fn check_params(expected: &[ParamRow]) -> ParamCheck {
    let rows: Vec<ParamCheckRow> = param_table()
        .into_iter()
        .map(|row| {
            let want = expected.iter().find(|e| e.name == row.name);
            ParamCheckRow {
                expected_univariate: want.map(|w| w.univariate),
                expected_bivariate: want.map(|w| w.bivariate),
                name: row.name,
                univariate: row.univariate,
                bivariate: row.bivariate,
            }
        })
        .collect();
    let total = 2 * rows.len();
    let matched = total - rows.iter().map(ParamCheckRow::mismatches).sum::<usize>();
    ParamCheck {
        rows,
        matched,
        total,
    }
}

/// Loads a JSON array of `{name, univariate, bivariate}` rows.
pub fn load_fixture(path: &Path) -> Result<Vec<ParamRow>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
