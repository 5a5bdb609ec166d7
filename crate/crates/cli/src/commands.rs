use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use cag_core::backends::{Backends, Cassette, HttpChatClient, HttpSearchClient, MockFixtures};
use cag_core::calibration::{
    adversarial_regret_sweep, auc, bucket_trace, derive_seed, flip_labels, grid_search_threshold,
    simulate_regret, BucketScheme, DecisionConfig, InterventionConfig,
};
use cag_core::curation::projection::project_traces;
use cag_core::curation::{curate_prompts, emit_cass_dataset, project_answer};
use cag_core::io::{read_jsonl, write_json, write_jsonl};
use cag_core::metrics::{
    count_claims, efficiency_stats, evaluate, EvalItem, EvalReport, KPolicy, PROJECTED_SYSTEM,
};
use cag_core::rewards::{attach_advantages, GroupRollout};
use cag_core::text::whitespace_tokens;
use cag_core::verification::score_traces;
use cag_core::{AnnotatedTrace, Exec, Query, ReliabilityLabel, TrainingTuple};

use crate::args::{Analysis, BucketArgs, Cli, Command, EvalArgs, GlobalArgs};
use crate::config::PipelineConfig;
use crate::inputs::{read_traces, AucRecord};

pub const CURATED: &str = "curated.jsonl";
pub const KEPT: &str = "kept.jsonl";
pub const SCORED: &str = "scored.jsonl";
pub const LABELED: &str = "labeled.jsonl";
pub const GRID: &str = "grid.json";
pub const PROJECTED: &str = "projected.jsonl";
pub const REPORTS: &str = "projection_reports.jsonl";
pub const DATASET: &str = "dataset.jsonl";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const REWARDS: &str = "rewards.jsonl";
pub const REGRET: &str = "regret.json";
pub const AUC: &str = "auc.json";
pub const INTERVENE: &str = "intervene.jsonl";
pub const INTERVENE_SUMMARY: &str = "intervene.json";
pub const EFFICIENCY: &str = "efficiency.json";

struct Session {
    cfg: PipelineConfig,
    global: GlobalArgs,
    exec: Exec,
    cassette: Option<Arc<Cassette>>,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::resolve(&cli.global)?;
    let exec = configure_workers(cfg.workers);
    let mut session = Session {
        cfg,
        global: cli.global,
        exec,
        cassette: None,
    };
    let outcome = session.dispatch(cli.command);
    if let Some(cassette) = &session.cassette {
        cassette.save()?;
    }
    outcome
}

fn configure_workers(workers: usize) -> Exec {
    if workers == 1 {
        return Exec::Sequential;
    }
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
    {
        log::debug!("worker pool already configured: {e}");
    }
    Exec::default()
}

impl Session {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir().join(name)
    }

    fn input_or(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.out(default))
    }

    fn top_k(&self, given: Option<usize>) -> Result<usize> {
        match given.unwrap_or(self.cfg.backend.top_k) {
            0 => bail!("--top-k must be at least 1"),
            k => Ok(k),
        }
    }

    fn backends(&mut self) -> Result<Backends> {
        let models = self.cfg.models.clone();
        if let Some(path) = &self.global.replay {
            let cassette = Cassette::replay(path).context("--replay")?;
            return Ok(Backends::via_cassette(Arc::new(cassette), models));
        }
        let live = if self.global.mock {
            let dir = self.cfg.paths.fixtures.clone().ok_or_else(|| {
                anyhow!("--mock needs --fixtures (or paths.fixtures in the config)")
            })?;
            let fixtures = MockFixtures::load(&dir).context("--fixtures")?;
            Backends {
                models: models.clone(),
                ..Backends::mock(fixtures)
            }
        } else {
            self.http_backends()?
        };
        match &self.global.record {
            Some(path) => {
                let cassette = Arc::new(Cassette::record(live, path).context("--record")?);
                self.cassette = Some(cassette.clone());
                Ok(Backends::via_cassette(cassette, models))
            }
            None => Ok(live),
        }
    }

    fn http_backends(&self) -> Result<Backends> {
        let env = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let base = self
            .cfg
            .backend
            .endpoint
            .clone()
            .or_else(|| env("CAG_API_BASE"))
            .ok_or_else(|| {
                anyhow!("no backend configured: pass --mock or --replay, or set CAG_API_BASE")
            })?;
        let search = self
            .cfg
            .backend
            .search_endpoint
            .clone()
            .or_else(|| env("CAG_SEARCH_URL"))
            .unwrap_or_else(|| format!("{}/search", base.trim_end_matches('/')));
        let key = env("CAG_API_KEY");
        let policy = self.cfg.backend.policy;
        Ok(Backends::http(
            HttpChatClient::new(&base, key.clone(), policy.timeout_ms),
            HttpSearchClient::new(&search, key, policy.timeout_ms),
            self.cfg.models.clone(),
            policy,
        ))
    }

    fn dispatch(&mut self, command: Command) -> Result<()> {
        match command {
            Command::Curate {
                prompts,
                keep_threshold,
            } => self.curate(prompts, keep_threshold),
            Command::Score { traces, top_k } => self.score(&traces, top_k),
            Command::Bucket(args) => self.bucket(args),
            Command::Project { input, top_k } => self.project(input, top_k),
            Command::Dataset { input } => self.dataset(input),
            Command::Eval(args) => self.eval(args),
            Command::Rewards { rollouts } => self.rewards(&rollouts),
            Command::SimulateRegret {
                u1,
                u2,
                epsilon,
                trials,
                sweep,
            } => self.simulate_regret(u1, u2, epsilon, trials, sweep),
            Command::Analyze(Analysis::Auc { input }) => self.auc(&input),
            Command::Analyze(Analysis::Intervene {
                input,
                lambda,
                direction,
            }) => self.intervene(
                input,
                InterventionConfig::new(lambda, direction, self.cfg.seed)?,
            ),
            Command::Analyze(Analysis::Efficiency { baseline, treated }) => {
                self.efficiency(&baseline, &treated)
            }
        }
    }

    fn curate(&mut self, prompts: Option<PathBuf>, keep_threshold: Option<u8>) -> Result<()> {
        let path = prompts
            .or_else(|| self.cfg.paths.prompts.clone())
            .ok_or_else(|| anyhow!("--prompts is required (or paths.prompts in the config)"))?;
        let keep = keep_threshold.unwrap_or(self.cfg.keep_threshold);
        if keep > 5 {
            bail!("--keep-threshold must be in 0..=5");
        }
        let queries: Vec<Query> = read_jsonl(&path)?;
        for q in &queries {
            q.validate()
                .with_context(|| format!("--prompts: {}", path.display()))?;
        }
        let backends = self.backends()?;
        let results = curate_prompts(
            &queries,
            backends.chat.as_ref(),
            &backends.models.judge,
            keep,
            self.exec,
        )?;
        let kept: Vec<&Query> = results
            .iter()
            .filter(|r| r.keep)
            .map(|r| &r.query)
            .collect();
        write_jsonl(&self.out(CURATED), &results)?;
        write_jsonl(&self.out(KEPT), &kept)?;
        print_json(&json!({ "prompts": results.len(), "kept": kept.len() }))
    }

    fn score(&mut self, traces: &Path, top_k: Option<usize>) -> Result<()> {
        let top_k = self.top_k(top_k)?;
        let traces = read_traces(traces).context("--traces")?;
        let backends = self.backends()?;
        let scored = score_traces(&traces, &backends, top_k, self.exec)?;
        write_jsonl(&self.out(SCORED), &scored)?;
        let steps: usize = scored.iter().map(|t| t.steps.len()).sum();
        let verifiable = scored
            .iter()
            .flat_map(|t| &t.steps)
            .filter(|s| s.score.is_some())
            .count();
        print_json(&json!({ "traces": scored.len(), "steps": steps, "scored_steps": verifiable }))
    }

    fn bucket(&mut self, args: BucketArgs) -> Result<()> {
        let input = self.input_or(args.input, SCORED);
        let traces = read_traces(&input).context("--input")?;
        if !traces
            .iter()
            .flat_map(|t| &t.steps)
            .any(|s| !s.claims.is_empty())
        {
            log::warn!(
                "{} has no scored claims; every step will be nonverifiable",
                input.display()
            );
        }
        let scheme = if let Some(tau) = args.tau {
            BucketScheme::binary(tau).context("--tau")?
        } else if let Some(thresholds) = args.thresholds {
            let labels = args
                .labels
                .unwrap_or_default()
                .iter()
                .map(|l| l.parse::<ReliabilityLabel>())
                .collect::<Result<Vec<_>, _>>()
                .context("--labels")?;
            BucketScheme::new(thresholds, labels).context("--thresholds")?
        } else if let Some(grid) = args.grid {
            let top_k = self.top_k(args.top_k)?;
            self.grid_search(&traces, &grid, top_k)?
        } else {
            self.cfg.bucket.scheme()?
        };
        let labeled = traces
            .iter()
            .map(|t| bucket_trace(t, &scheme))
            .collect::<Result<Vec<_>, _>>()?;
        write_jsonl(&self.out(LABELED), &labeled)?;
        let count = |label| {
            labeled
                .iter()
                .flat_map(|t| &t.steps)
                .filter(|s| s.label == Some(label))
                .count()
        };
        print_json(&json!({
            "thresholds": scheme.thresholds(),
            "reliable": count(ReliabilityLabel::Reliable),
            "unreliable": count(ReliabilityLabel::Unreliable),
            "nonverifiable": count(ReliabilityLabel::Nonverifiable),
        }))
    }

    /// Picks the threshold whose projected answers score the highest mean F1.
    fn grid_search(
        &mut self,
        traces: &[AnnotatedTrace],
        grid: &[f64],
        top_k: usize,
    ) -> Result<BucketScheme> {
        for tau in grid {
            BucketScheme::binary(*tau).context("--grid")?;
        }
        let backends = self.backends()?;
        let exec = self.exec;
        let result = grid_search_threshold(grid, |tau| -> Result<f64> {
            let scheme = BucketScheme::binary(tau)?;
            let projected = exec.try_map(traces, |t| -> Result<AnnotatedTrace> {
                let mut labeled = bucket_trace(t, &scheme)?;
                labeled.projected_answer = Some(project_answer(
                    &labeled,
                    backends.chat.as_ref(),
                    &backends.models.projector,
                )?);
                Ok(labeled)
            })?;
            let items: Vec<EvalItem> = projected
                .iter()
                .flat_map(|t| EvalItem::from_trace(t, "default"))
                .collect();
            let report = evaluate(
                &count_claims(&items, &backends, top_k, exec)?,
                &KPolicy::default(),
            )?;
            Ok(mean_f1(&report, PROJECTED_SYSTEM))
        })?;
        write_json(&self.out(GRID), &result)?;
        Ok(BucketScheme::binary(result.best_tau)?)
    }

    fn project(&mut self, input: Option<PathBuf>, top_k: Option<usize>) -> Result<()> {
        let top_k = self.top_k(top_k)?;
        let input = self.input_or(input, LABELED);
        let traces = read_traces(&input).context("--input")?;
        let backends = self.backends()?;
        let projected = project_traces(&traces, &backends, top_k, self.exec)?;
        let reports: Vec<_> = projected
            .iter()
            .map(|p| json!({ "id": p.trace.query.id, "report": p.report }))
            .collect();
        let traces: Vec<&AnnotatedTrace> = projected.iter().map(|p| &p.trace).collect();
        write_jsonl(&self.out(PROJECTED), &traces)?;
        write_jsonl(&self.out(REPORTS), &reports)?;
        let checked: Vec<_> = projected.iter().filter_map(|p| p.report.as_ref()).collect();
        let n = checked.len().max(1) as f64;
        print_json(&json!({
            "traces": projected.len(),
            "empty_projections": projected.len() - checked.len(),
            "mean_pre_factuality": checked.iter().map(|r| r.pre_factuality).sum::<f64>() / n,
            "mean_post_factuality": checked.iter().map(|r| r.post_factuality).sum::<f64>() / n,
            "fully_supported": checked.iter().filter(|r| r.fully_supported).count(),
            "unreliable_leakage": checked.iter().map(|r| r.unreliable_leakage).sum::<usize>(),
        }))
    }

    fn dataset(&mut self, input: Option<PathBuf>) -> Result<()> {
        let input = self.input_or(input, PROJECTED);
        let traces = read_traces(&input).context("--input")?;
        let mut tuples = Vec::new();
        let mut skipped = 0;
        for trace in &traces {
            match trace.projected_answer.as_deref() {
                None => bail!(
                    "--input: trace `{}` has no projected answer; run `project` first",
                    trace.query.id
                ),
                Some(p) if p.trim().is_empty() => {
                    log::warn!(
                        "skipping `{}`: projection removed the whole answer",
                        trace.query.id
                    );
                    skipped += 1;
                }
                Some(_) => tuples.push(TrainingTuple::from_trace(trace)?),
            }
        }
        let written = emit_cass_dataset(&tuples, &self.out(DATASET))?;
        print_json(&json!({ "written": written, "skipped_empty": skipped }))
    }

    fn eval(&mut self, args: EvalArgs) -> Result<()> {
        let top_k = self.top_k(args.top_k)?;
        let items: Vec<EvalItem> = match args.responses {
            Some(path) => read_jsonl(&path).context("--responses")?,
            None => {
                let path = self.input_or(args.traces, PROJECTED);
                read_traces(&path)
                    .context("--traces")?
                    .iter()
                    .flat_map(|t| EvalItem::from_trace(t, &args.domain))
                    .collect()
            }
        };
        if items.is_empty() {
            bail!("nothing to evaluate");
        }
        let policy = match (args.k, args.k_from.as_deref()) {
            (Some(k), _) if k.is_nan() || k <= 0.0 => bail!("--k must be positive"),
            (Some(k), _) => KPolicy::Fixed(k),
            (None, Some("pooled")) => KPolicy::Pooled,
            (None, Some(system)) => KPolicy::FromSystem(system.to_string()),
            (None, None) => KPolicy::default(),
        };
        let backends = self.backends()?;
        let counts = count_claims(&items, &backends, top_k, self.exec)?;
        let report = evaluate(&counts, &policy)?;
        write_json(&self.out(EVAL_JSON), &report)?;
        let csv = report.to_csv();
        std::fs::write(self.out(EVAL_CSV), &csv)
            .with_context(|| format!("writing {}", self.out(EVAL_CSV).display()))?;
        print_json(&report.summaries)
    }

    fn rewards(&mut self, rollouts: &Path) -> Result<()> {
        let groups: Vec<GroupRollout> = read_jsonl(rollouts).context("--rollouts")?;
        let with_advantages = attach_advantages(&groups, self.exec)?;
        let written = write_jsonl(&self.out(REWARDS), &with_advantages)?;
        print_json(&json!({ "groups": written }))
    }

    fn simulate_regret(
        &mut self,
        u1: Option<f64>,
        u2: Option<f64>,
        epsilon: Option<f64>,
        trials: u64,
        sweep: Option<usize>,
    ) -> Result<()> {
        let base = self.cfg.decision;
        let cfg = DecisionConfig::new(
            u1.unwrap_or(base.u1),
            u2.unwrap_or(base.u2),
            epsilon.unwrap_or(base.epsilon),
        )
        .context("--u1/--u2/--epsilon")?;
        let report = match sweep {
            Some(points) => adversarial_regret_sweep(&cfg, points).context("--sweep")?,
            None => simulate_regret(&cfg, trials, self.cfg.seed, self.exec).context("--trials")?,
        };
        if report.violations > 0 {
            log::warn!("{} trials exceeded the regret bound", report.violations);
        }
        write_json(&self.out(REGRET), &report)?;
        print_json(&report)
    }

    fn auc(&mut self, input: &Path) -> Result<()> {
        let records: Vec<AucRecord> = read_jsonl(input).context("--input")?;
        let pairs: Vec<(f64, bool)> = records.iter().map(|r| (r.predicted, r.correct)).collect();
        let value = auc(&pairs).context("--input")?;
        let positives = pairs.iter().filter(|p| p.1).count();
        let summary = json!({
            "auc": value,
            "n": pairs.len(),
            "positives": positives,
            "negatives": pairs.len() - positives,
        });
        write_json(&self.out(AUC), &summary)?;
        print_json(&summary)
    }

    fn intervene(&mut self, input: Option<PathBuf>, cfg: InterventionConfig) -> Result<()> {
        let input = self.input_or(input, LABELED);
        let traces = read_traces(&input).context("--input")?;
        let backends = self.backends()?;
        let flipped = traces
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let per_trace = InterventionConfig {
                    seed: derive_seed(cfg.seed, i as u64),
                    ..cfg
                };
                flip_labels(t, &per_trace)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let projected = self.exec.try_map(&flipped, |t| -> Result<AnnotatedTrace> {
            let mut t = t.clone();
            t.projected_answer = Some(project_answer(
                &t,
                backends.chat.as_ref(),
                &backends.models.projector,
            )?);
            Ok(t)
        })?;
        write_jsonl(&self.out(INTERVENE), &projected)?;
        let changed: usize = traces
            .iter()
            .zip(&flipped)
            .map(|(a, b)| {
                a.steps
                    .iter()
                    .zip(&b.steps)
                    .filter(|(x, y)| x.label != y.label)
                    .count()
            })
            .sum();
        let words: u64 = projected
            .iter()
            .map(|t| whitespace_tokens(t.final_answer()))
            .sum();
        let summary = json!({
            "lambda": cfg.lambda,
            "direction": cfg.direction,
            "seed": cfg.seed,
            "traces": projected.len(),
            "flipped_steps": changed,
            "mean_answer_words": words as f64 / projected.len().max(1) as f64,
        });
        write_json(&self.out(INTERVENE_SUMMARY), &summary)?;
        print_json(&summary)
    }

    fn efficiency(&mut self, baseline: &Path, treated: &Path) -> Result<()> {
        let b = read_traces(baseline).context("--baseline")?;
        let t = read_traces(treated).context("--treated")?;
        let report = efficiency_stats(&b, &t)?;
        write_json(&self.out(EFFICIENCY), &report)?;
        print_json(&report)
    }
}

fn mean_f1(report: &EvalReport, system: &str) -> f64 {
    let rows: Vec<_> = report.rows.iter().filter(|r| r.system == system).collect();
    rows.iter().map(|r| r.score.f1).sum::<f64>() / rows.len().max(1) as f64
}

fn print_json<T: Serialize + ?Sized>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}
