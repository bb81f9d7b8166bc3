use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use prefqrels_core::aggregate::{self, build_preference_qrels, Mode, Resolution};
use prefqrels_core::corpus::{load_collection, Collection};
use prefqrels_core::judgment_log::{LogEvent, PairKind, PreferenceJudgment};
use prefqrels_core::pooling::{self, build_pools, pool_stats, QrelSelector};
use prefqrels_core::tasking::{
    assemble_tasks, category_pairs, enumerate_pairs, ingest_answers, read_answers, read_pairs, read_tasks,
    replicate, ExclusionList, ExportedTask, JudgmentPair, QcBank, TaskConfig, TaskingError,
};
use serde_json::json;

use super::FormatArg;
use crate::artifact::{self, Ctx};

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Items taken from the top of every run.
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn pool(ctx: &Ctx, a: PoolArgs) -> Result<()> {
    let runs = artifact::load_runs(&a.runs, a.format.resolve(), None)?;
    let qrels = artifact::load_qrel_set(&a.qrels)?;
    let pools = build_pools(&runs, &qrels, a.depth)?;
    let stats = pool_stats(&pools).context("no queries to pool")?;
    let mut inputs: Vec<&std::path::Path> = a.runs.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.qrels);
    let prov = ctx.provenance(&inputs, json!({ "depth": a.depth }))?;
    artifact::write_jsonl(&a.out_dir.join("pools.jsonl"), &prov, &pools.values().collect::<Vec<_>>())?;
    artifact::write_json(&a.out_dir.join("stats.json"), &prov, &stats)?;
    println!(
        "{} pools, mean size {:.2}, {} pairs, {} qrel-only",
        stats.n_pools,
        stats.mean_size,
        stats.total_pairs,
        stats.qrel_only.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub pools: PathBuf,
    /// Only pools with at least this many members are eligible.
    #[arg(long, default_value_t = 1)]
    pub min_size: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn sample(ctx: &Ctx, a: SampleArgs) -> Result<()> {
    let pools = artifact::load_pools(&a.pools)?;
    let queries = pooling::sample_queries(&pools, a.min_size, a.n, a.seed)?;
    let prov = ctx.provenance(&[&a.pools], json!({ "min_size": a.min_size, "n": a.n, "seed": a.seed }))?;
    artifact::write_query_list(&a.out, &prov, &queries)?;
    println!("sampled {} queries", queries.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Judge every pair within each pool.
    #[arg(long, conflicts_with = "category_run", required_unless_present = "category_run")]
    pub pools: Option<PathBuf>,
    /// Instead of pools, build the category check pairs for this run.
    #[arg(long, requires = "qrels")]
    pub category_run: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Restrict to the queries listed in this file.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// `id \t text` passages.
    #[arg(long)]
    pub items: PathBuf,
    /// `id \t text` queries.
    #[arg(long)]
    pub topics: PathBuf,
    /// Independent judgments per pair.
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
    #[arg(long)]
    pub out: PathBuf,
}

fn check_texts(pairs: &[JudgmentPair], collection: &Collection) -> Result<(), TaskingError> {
    for p in pairs {
        if collection.query_text(&p.query).is_none() {
            return Err(TaskingError::MissingQueryText(p.query.clone()));
        }
        for item in [&p.left, &p.right] {
            if collection.item_text(item).is_none() {
                return Err(TaskingError::MissingItemText {
                    query: p.query.clone(),
                    item: item.clone(),
                });
            }
        }
    }
    Ok(())
}

pub fn pairs(ctx: &Ctx, a: PairsArgs) -> Result<()> {
    if a.replicas == 0 {
        bail!("--replicas must be at least 1");
    }
    let collection = load_collection(&a.items, &a.topics)?;
    let restrict = a.queries.as_deref().map(artifact::load_query_list).transpose()?;
    let keep = |q: &prefqrels_core::ids::QueryId| restrict.as_ref().is_none_or(|r| r.contains(q));
    let mut inputs = vec![a.items.as_path(), a.topics.as_path()];
    let base = if let Some(path) = &a.pools {
        inputs.push(path);
        let mut pools = artifact::load_pools(path)?;
        pools.retain(|q, _| keep(q));
        enumerate_pairs(&pools, &collection)?
    } else {
        let run_path = a.category_run.as_ref().expect("clap enforces pools or category run");
        let qrels_path = a.qrels.as_ref().expect("clap requires qrels");
        inputs.push(run_path);
        inputs.push(qrels_path);
        let run = artifact::load_runs(std::slice::from_ref(run_path), a.format.resolve(), None)?.remove(0);
        let qrels = artifact::load_qrel_set(qrels_path)?;
        let split = pooling::split_categories(&run, &qrels, QrelSelector::FirstInFile);
        println!(
            "category A {}, category B {}, excluded {}",
            split.category_a.len(),
            split.category_b.len(),
            split.excluded.len()
        );
        let pairs: Vec<JudgmentPair> = category_pairs(&run, &qrels, &split, QrelSelector::FirstInFile)
            .into_iter()
            .filter(|p| keep(&p.query))
            .collect();
        check_texts(&pairs, &collection)?;
        pairs
    };
    if let Some(path) = &a.queries {
        inputs.push(path);
    }
    let pairs = replicate(&base, a.replicas);
    let prov = ctx.provenance(&inputs, json!({ "replicas": a.replicas }))?;
    artifact::write_jsonl(&a.out, &prov, &pairs)?;
    println!("{} pairs ({} unique)", pairs.len(), base.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TasksArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// `qid \t relevant \t distractor` QC bank.
    #[arg(long)]
    pub qc: PathBuf,
    /// Check that every QC relevant item is a qrel.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub topics: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub real_per_task: usize,
    #[arg(long, default_value_t = 3, env = "PREFQRELS_QC_PER_TASK")]
    pub qc_per_task: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn tasks(ctx: &Ctx, a: TasksArgs) -> Result<()> {
    let pairs = read_pairs(artifact::open(&a.pairs)?, &a.pairs.display().to_string())?;
    let bank = QcBank::load(&a.qc)?;
    let mut inputs = vec![a.pairs.as_path(), a.qc.as_path(), a.items.as_path(), a.topics.as_path()];
    if let Some(path) = &a.qrels {
        bank.validate(&artifact::load_qrel_set(path)?)?;
        inputs.push(path);
    }
    let collection = load_collection(&a.items, &a.topics)?;
    let config = TaskConfig {
        real_per_task: a.real_per_task,
        qc_per_task: a.qc_per_task,
        seed: a.seed,
    };
    let tasks = assemble_tasks(&pairs, &bank, &config, Some(ctx.now()))?;
    let exported = tasks
        .iter()
        .map(|t| ExportedTask::from_task(t, &collection))
        .collect::<Result<Vec<_>, _>>()?;
    let prov = ctx.provenance(&inputs, serde_json::to_value(config)?)?;
    artifact::write_jsonl(&a.out, &prov, &exported)?;
    println!("{} tasks from {} pairs", exported.len(), pairs.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    /// JSON Lines of `{task_id, assessor, answers: {pair_id: left|right}}`.
    #[arg(long)]
    pub answers: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub exclusions: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
    /// Where to write re-randomized copies of rejected tasks.
    #[arg(long)]
    pub requeue_out: Option<PathBuf>,
}

pub fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let exported = read_tasks(artifact::open(&a.tasks)?, &a.tasks.display().to_string())?;
    let tasks: Vec<_> = exported.iter().map(ExportedTask::task).collect();
    let records = read_answers(artifact::open(&a.answers)?, &a.answers.display().to_string())?;
    let mut log = artifact::open_log(&a.log, a.replicas)?;
    let mut exclusions = ExclusionList::load(&a.exclusions)
        .with_context(|| format!("reading {}", a.exclusions.display()))?;
    let report = ingest_answers(&tasks, &records, &mut log, &mut exclusions, ctx.now())?;
    if let Some(path) = &a.requeue_out {
        let by_id: BTreeMap<&str, &ExportedTask> = exported.iter().map(|t| (t.task_id.as_str(), t)).collect();
        let requeued: Vec<ExportedTask> = report
            .requeued
            .iter()
            .map(|t| by_id[t.task_id.as_str()].with_layout(t))
            .collect();
        let prov = ctx.provenance(&[&a.tasks, &a.answers], json!({}))?;
        artifact::write_jsonl(path, &prov, &requeued)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Strict,
    Lenient,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Strict => Mode::Strict,
            ModeArg::Lenient => Mode::Lenient,
        }
    }
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub pools: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
    #[arg(long, value_enum, default_value_t = ModeArg::Strict)]
    pub mode: ModeArg,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn aggregate(ctx: &Ctx, a: AggregateArgs) -> Result<()> {
    let mut pools = artifact::load_pools(&a.pools)?;
    let mut inputs = vec![a.pools.as_path(), a.log.as_path()];
    if let Some(path) = &a.queries {
        let keep = artifact::load_query_list(path)?;
        pools.retain(|q, _| keep.contains(q));
        inputs.push(path);
    }
    let prefs = artifact::read_log(&a.log, a.replicas)?.preference_set();
    let mode: Mode = a.mode.into();
    let result = build_preference_qrels(&pools, &prefs, mode);

    let cycles: Vec<_> = result.cycles().collect();
    let mut cycle_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for c in &cycles {
        *cycle_sizes.entry(c.qrels.len()).or_default() += 1;
    }
    let unique = result
        .results
        .values()
        .filter(|r| r.resolution == Resolution::Unique)
        .count();
    let qrel_count: usize = result.qrels.labels.values().map(Vec::len).sum();
    let summary = json!({
        "queries": result.results.len(),
        "unique": unique,
        "cycles": cycles.len(),
        "cycle_sizes": cycle_sizes,
        "qrels": qrel_count,
        "failures": result.failures,
        "pairing_winrate": aggregate::qrel_pairing_winrate(&result.qrels, &prefs),
    });

    let prov = ctx.provenance(&inputs, json!({ "mode": mode }))?;
    artifact::write_qrel_file(&a.out_dir.join("preference.qrels"), &prov, &result.qrels)?;
    artifact::write_jsonl(
        &a.out_dir.join("tournament.jsonl"),
        &prov,
        &result.results.values().collect::<Vec<_>>(),
    )?;
    artifact::write_json(&a.out_dir.join("aggregate.json"), &prov, &summary)?;
    println!(
        "{} queries, {} qrels, {} cycles, {} failures",
        result.results.len(),
        qrel_count,
        cycles.len(),
        result.failures.len()
    );
    if !result.failures.is_empty() {
        bail!(
            "{} queries lack judgments (first: {}); judge them or use --mode lenient",
            result.failures.len(),
            result.failures.keys().next().expect("non-empty")
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ChallengeArgs {
    /// Current best-known answers.
    #[arg(long)]
    pub qrels: PathBuf,
    /// Run whose top items challenge the incumbents.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
    /// Updated best-known answers.
    #[arg(long)]
    pub out: PathBuf,
    /// Pairs that still need a judgment.
    #[arg(long)]
    pub pending: PathBuf,
}

pub fn challenge(ctx: &Ctx, a: ChallengeArgs) -> Result<()> {
    let mut qrels = artifact::load_qrel_set(&a.qrels)?;
    let run = artifact::load_runs(std::slice::from_ref(&a.run), a.format.resolve(), None)?.remove(0);
    let mut log = artifact::open_log(&a.log, a.replicas)?;
    let prefs = log.preference_set();
    let now = ctx.now();

    let (mut changed, mut confirmed) = (0, 0);
    let mut pending = Vec::new();
    let mut events = Vec::new();
    for query in run.queries().cloned().collect::<Vec<_>>() {
        let (Some(challenger), Some(incumbent)) = (run.top(&query), qrels.first_qrel(&query)) else {
            continue;
        };
        if challenger == incumbent {
            continue;
        }
        let (challenger, incumbent) = (challenger.clone(), incumbent.clone());
        let Some(outcome) = prefs.lookup(&query, &incumbent, &challenger) else {
            pending.push(JudgmentPair::real(&query, &incumbent, &challenger));
            continue;
        };
        let judgment = PreferenceJudgment {
            query: query.clone(),
            winner: outcome.winner,
            loser: outcome.loser,
            assessor: "majority".into(),
            task_id: "challenge".into(),
            timestamp: now,
            kind: PairKind::Real,
            replica: 0,
        };
        let result = aggregate::challenge(&incumbent, &challenger, &judgment)?;
        aggregate::apply_challenge(&mut qrels, &query, &incumbent, &result);
        if result.changed {
            changed += 1;
        } else {
            confirmed += 1;
        }
        events.push(result.event);
    }
    log.append(events)?;

    let prov = ctx.provenance(&[&a.qrels, &a.run, &a.log], json!({}))?;
    artifact::write_qrel_file(&a.out, &prov, &qrels)?;
    artifact::write_jsonl(&a.pending, &prov, &pending)?;
    println!("{changed} replaced, {confirmed} confirmed, {} pending", pending.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
    /// Secret mixed into assessor pseudonyms.
    #[arg(long, env = "PREFQRELS_SALT")]
    pub salt: String,
    /// De-identified log.
    #[arg(long)]
    pub out: PathBuf,
    /// `qid \t winner \t loser` for every decided pair.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

pub fn export(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    if a.salt.is_empty() {
        bail!("--salt must not be empty");
    }
    let log = artifact::read_log(&a.log, a.replicas)?;
    let prov = ctx.provenance(&[&a.log], json!({}))?;
    let mut buf = Vec::new();
    prov.write_jsonl(&mut buf)?;
    log.write_deidentified(&a.salt, &mut buf)?;
    std::fs::write(&a.out, buf).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.pairs {
        let prefs = log.preference_set();
        artifact::write_text(path, &prov, |w| prefs.write_pairs(w))?;
    }
    let judged: BTreeSet<_> = log
        .entries()
        .iter()
        .filter_map(|e| match &e.event {
            LogEvent::Judgment(j) if j.kind == PairKind::Real => Some(j.query.clone()),
            _ => None,
        })
        .collect();
    println!("{} entries over {} queries", log.entries().len(), judged.len());
    Ok(())
}

