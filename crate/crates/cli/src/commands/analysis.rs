use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use prefqrels_core::aggregate;
use prefqrels_core::corpus::{QrelSet, Run};
use prefqrels_core::ids::QueryId;
use prefqrels_core::metrics::{
    self, category_comparison, consistency_agreement, kendall_tau, leaderboard_report, perfect_run, read_scores,
    scores_for, win_matrix, BootstrapConfig, LeaderboardRow, TauVariant, WinMatrix, WinMatrixConfig,
};
use prefqrels_core::pooling::{split_categories, QrelSelector};
use serde::Serialize;
use serde_json::json;

use super::FormatArg;
use crate::artifact::{self, Ctx};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// One or more qrel files; each is a leaderboard column.
    #[arg(long, num_args = 1.., required = true)]
    pub qrels: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Evaluate on the queries listed here instead of each qrel set's own.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Bootstrap seed.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn paths(list: &[PathBuf]) -> Vec<&Path> {
    list.iter().map(PathBuf::as_path).collect()
}

fn load_qrel_sets(paths: &[PathBuf]) -> Result<Vec<QrelSet>> {
    let sets: Vec<QrelSet> = paths.iter().map(|p| artifact::load_qrel_set(p)).collect::<Result<_>>()?;
    let names: BTreeSet<&str> = sets.iter().map(|s| s.name.as_str()).collect();
    if names.len() != sets.len() {
        bail!("qrel files must have distinct names");
    }
    Ok(sets)
}

fn write_leaderboard(ctx: &Ctx, dir: &Path, inputs: &[&Path], config: serde_json::Value, rows: &[LeaderboardRow], qrel_names: &[&str]) -> Result<()> {
    let prov = ctx.provenance(inputs, config)?;
    artifact::write_text(&dir.join("leaderboard.csv"), &prov, |w| metrics::write_leaderboard_csv(rows, w))?;
    artifact::write_json(&dir.join("leaderboard.json"), &prov, &json!({ "rows": rows }))?;
    for name in qrel_names {
        let scores = scores_for(rows, name);
        artifact::write_text(&dir.join(format!("scores.{name}.csv")), &prov, |w| {
            writeln!(w, "run,mrr")?;
            for (run, s) in &scores {
                writeln!(w, "{run},{s:.6}")?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

pub fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let runs = artifact::load_runs(&a.runs, a.format.resolve(), None)?;
    let sets = load_qrel_sets(&a.qrels)?;
    let queries = a.queries.as_deref().map(artifact::load_query_list).transpose()?;
    let bootstrap = BootstrapConfig {
        level: a.level,
        resamples: a.resamples,
        seed: a.seed,
    };
    let refs: Vec<&QrelSet> = sets.iter().collect();
    let rows = leaderboard_report(&runs, &refs, a.k, queries.as_ref(), &bootstrap)?;

    let mut inputs = paths(&a.runs);
    inputs.extend(paths(&a.qrels));
    if let Some(p) = &a.queries {
        inputs.push(p);
    }
    let names: Vec<&str> = sets.iter().map(|s| s.name.as_str()).collect();
    let config = json!({ "k": a.k, "bootstrap": bootstrap });
    write_leaderboard(ctx, &a.out_dir, &inputs, config, &rows, &names)?;
    for r in &rows {
        println!(
            "{:<20} {:<16} MRR@{} {:.4} [{:.4}, {:.4}]",
            r.run, r.qrels, a.k, r.mrr, r.ci_low, r.ci_high
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct WinMatrixArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
    /// Add a run that puts the first qrel of each query from this file first.
    #[arg(long)]
    pub perfect: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Bonferroni divisor; defaults to the number of run pairs.
    #[arg(long)]
    pub m_comparisons: Option<u64>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn write_win_matrix(dir: &Path, prov: &prefqrels_core::provenance::Provenance, m: &WinMatrix) -> Result<()> {
    artifact::write_markdown(&dir.join("winmatrix.md"), prov, |w| m.write_markdown(w))?;
    artifact::write_text(&dir.join("winmatrix.csv"), prov, |w| m.write_csv(w))?;
    artifact::write_json(&dir.join("winmatrix.json"), prov, m)
}

pub fn winmatrix(ctx: &Ctx, a: WinMatrixArgs) -> Result<()> {
    let mut runs = artifact::load_runs(&a.runs, a.format.resolve(), None)?;
    let mut inputs = paths(&a.runs);
    inputs.push(&a.log);
    if let Some(p) = &a.perfect {
        runs.push(perfect_run(&artifact::load_qrel_set(p)?, QrelSelector::FirstInFile));
        inputs.push(p);
    }
    let prefs = artifact::read_log(&a.log, a.replicas)?.preference_set();
    let config = WinMatrixConfig {
        alpha: a.alpha,
        m_comparisons: a.m_comparisons,
        queries: a.queries.as_deref().map(artifact::load_query_list).transpose()?,
    };
    if let Some(p) = &a.queries {
        inputs.push(p);
    }
    let m = win_matrix(&runs, &prefs, &config)?;
    let prov = ctx.provenance(&inputs, json!({ "alpha": a.alpha, "m_comparisons": m.m_comparisons }))?;
    write_win_matrix(&a.out_dir, &prov, &m)?;
    let mut stdout = std::io::stdout().lock();
    m.write_markdown(&mut stdout)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    A,
    B,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Two `name,score` CSV files over the same names.
    #[arg(long, num_args = 2, required = true)]
    pub scores: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = VariantArg::A)]
    pub variant: VariantArg,
    /// Print the full result as JSON.
    #[arg(long)]
    pub json: bool,
}

pub fn compare(_ctx: &Ctx, a: CompareArgs) -> Result<()> {
    let load = |p: &Path| read_scores(artifact::open(p)?).with_context(|| format!("reading {}", p.display()));
    let left = load(&a.scores[0])?;
    let right = load(&a.scores[1])?;
    let variant = match a.variant {
        VariantArg::A => TauVariant::A,
        VariantArg::B => TauVariant::B,
    };
    let tau = kendall_tau(&left, &right, variant)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&tau)?);
    } else {
        println!(
            "tau = {:.4} ({} concordant, {} discordant, {} pairs)",
            tau.tau, tau.concordant, tau.discordant, tau.n_pairs
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Incumbent qrels.
    #[arg(long)]
    pub qrels: PathBuf,
    /// Preference qrels from `aggregate`.
    #[arg(long)]
    pub preference_qrels: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
    /// Restrict every comparison to these queries.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    run: String,
    agreement: metrics::Agreement,
    categories: metrics::CategoryComparison,
    category_a_rate: Option<f64>,
    category_b_rate: Option<f64>,
}

pub fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let runs: Vec<Run> = artifact::load_runs(&a.runs, a.format.resolve(), None)?;
    let original = artifact::load_qrel_set(&a.qrels)?;
    let preference = artifact::load_qrel_set(&a.preference_qrels)?;
    if original.name == preference.name {
        bail!("qrel files must have distinct names");
    }
    let prefs = artifact::read_log(&a.log, a.replicas)?.preference_set();
    let queries: Option<BTreeSet<QueryId>> = a.queries.as_deref().map(artifact::load_query_list).transpose()?;
    let restrict = |q: &QrelSet| match &queries {
        Some(qs) => q.restrict(qs),
        None => q.clone(),
    };
    let (original, preference) = (restrict(&original), restrict(&preference));

    let bootstrap = BootstrapConfig {
        resamples: a.resamples,
        ..BootstrapConfig::with_seed(a.seed)
    };
    let rows = leaderboard_report(&runs, &[&original, &preference], a.k, queries.as_ref(), &bootstrap)?;
    let tau = if runs.len() >= 2 {
        Some(kendall_tau(
            &scores_for(&rows, &original.name),
            &scores_for(&rows, &preference.name),
            TauVariant::A,
        )?)
    } else {
        None
    };

    let summaries: Vec<RunSummary> = runs
        .iter()
        .map(|run| {
            let split = split_categories(run, &original, QrelSelector::FirstInFile);
            let categories = category_comparison(run, &original, &split, QrelSelector::FirstInFile, &prefs);
            RunSummary {
                run: run.name.clone(),
                agreement: consistency_agreement(run, &prefs, a.k),
                category_a_rate: categories.a_top_rate(),
                category_b_rate: categories.b_top_rate(),
                categories,
            }
        })
        .collect();

    let mut matrix_runs = runs.clone();
    matrix_runs.push(perfect_run(&original, QrelSelector::FirstInFile));
    let matrix = win_matrix(
        &matrix_runs,
        &prefs,
        &WinMatrixConfig {
            queries: queries.clone(),
            ..WinMatrixConfig::new(a.alpha)
        },
    )?;
    let pairing = aggregate::qrel_pairing_winrate(&original, &prefs);

    let mut inputs = paths(&a.runs);
    inputs.extend([a.qrels.as_path(), a.preference_qrels.as_path(), a.log.as_path()]);
    if let Some(p) = &a.queries {
        inputs.push(p);
    }
    let config = json!({ "k": a.k, "bootstrap": bootstrap, "alpha": a.alpha });
    let names = [original.name.as_str(), preference.name.as_str()];
    write_leaderboard(ctx, &a.out_dir, &inputs, config.clone(), &rows, &names)?;
    let prov = ctx.provenance(&inputs, config)?;
    write_win_matrix(&a.out_dir, &prov, &matrix)?;
    artifact::write_text(&a.out_dir.join("runs.csv"), &prov, |w| {
        writeln!(w, "run,agreement,agreeing,pairs,category_a_rate,category_b_rate,unjudged")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for s in &summaries {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.run,
                opt(s.agreement.agreement),
                s.agreement.agreeing,
                s.agreement.n_pairs,
                opt(s.category_a_rate),
                opt(s.category_b_rate),
                s.categories.unjudged
            )?;
        }
        Ok(())
    })?;
    artifact::write_json(
        &a.out_dir.join("report.json"),
        &prov,
        &json!({
            "leaderboard": rows,
            "kendall_tau": tau,
            "runs": summaries,
            "original_qrel_pairing": pairing,
            "win_matrix": matrix,
        }),
    )?;

    if let Some(t) = tau {
        println!("tau between {} and {}: {:.4}", names[0], names[1], t.tau);
    }
    if let Some(r) = pairing.rate {
        println!("original qrels won {} of {} pairings ({:.1}%)", pairing.wins, pairing.pairings, r * 100.0);
    }
    Ok(())
}
