use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use prefqrels_core::corpus::{write_run, RunFormat};
use prefqrels_core::judgment_log::{JudgmentLog, LogEvent};
use prefqrels_core::sim_assessor::{exact_matches, run_simulation, QrelPolicy, ScenarioConfig, SizeRange};
use serde_json::json;

use crate::artifact::{self, Ctx};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Worst,
    NonMax,
    Random,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON; replaces every scenario flag below.
    #[arg(long, conflicts_with_all = ["queries", "seed"])]
    pub scenario: Option<PathBuf>,
    #[arg(long, required_unless_present = "scenario")]
    pub queries: Option<usize>,
    #[arg(long, required_unless_present = "scenario")]
    pub seed: Option<u64>,
    /// Probability a simulated judge prefers the latent-worse item.
    #[arg(long, default_value_t = 0.33)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Probability a run puts the best candidate first.
    #[arg(long, default_value_t = 0.5)]
    pub run_skill: f64,
    #[arg(long, default_value_t = 2)]
    pub min_candidates: usize,
    #[arg(long, default_value_t = 6)]
    pub max_candidates: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::Worst)]
    pub qrel_policy: PolicyArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

impl SimulateArgs {
    fn config(&self) -> Result<ScenarioConfig> {
        if let Some(path) = &self.scenario {
            return serde_json::from_reader(artifact::open(path)?)
                .with_context(|| format!("parsing {}", path.display()));
        }
        Ok(ScenarioConfig {
            runs: self.runs,
            candidates: SizeRange {
                min: self.min_candidates,
                max: self.max_candidates,
            },
            run_skill: self.run_skill,
            qrel_policy: match self.qrel_policy {
                PolicyArg::Worst => QrelPolicy::Worst,
                PolicyArg::NonMax => QrelPolicy::NonMax,
                PolicyArg::Random => QrelPolicy::Random,
            },
            ..ScenarioConfig::new(
                self.queries.expect("clap requires queries"),
                self.epsilon,
                self.seed.expect("clap requires seed"),
            )
        })
    }
}

pub fn simulate(ctx: &Ctx, a: SimulateArgs) -> Result<()> {
    let config = a.config()?;
    let sim = run_simulation(&config)?;
    let inputs: Vec<&std::path::Path> = a.scenario.iter().map(PathBuf::as_path).collect();
    let prov = ctx.provenance(&inputs, serde_json::to_value(&config)?)?;
    let dir = &a.out_dir;

    for run in sim.scenario.runs.iter().chain([&sim.oracle_run()]) {
        let path = dir.join("runs").join(format!("{}.run", run.name));
        artifact::write_text(&path, &prov, |w| write_run(run, RunFormat::Trec, w))?;
    }
    artifact::write_qrel_file(&dir.join("original.qrels"), &prov, &sim.scenario.qrels)?;
    artifact::write_jsonl(&dir.join("pools.jsonl"), &prov, &sim.pools.values().collect::<Vec<_>>())?;
    let latent: Vec<_> = sim
        .latent
        .orders
        .iter()
        .map(|(q, order)| json!({ "qid": q, "order": order }))
        .collect();
    artifact::write_jsonl(&dir.join("latent.jsonl"), &prov, &latent)?;

    let log_path = dir.join("judgments.jsonl");
    let mut header = Vec::new();
    prov.write_jsonl(&mut header)?;
    std::fs::write(&log_path, header).with_context(|| format!("writing {}", log_path.display()))?;
    let mut log = JudgmentLog::open(&log_path, 1)?;
    let events: Vec<LogEvent> = sim
        .preferences
        .queries()
        .flat_map(|q| sim.preferences.judgments(q).iter().cloned().map(LogEvent::Judgment))
        .collect();
    log.append(events)?;

    let exact = exact_matches(&sim).len();
    let summary = json!({
        "queries": sim.pools.len(),
        "judgments": sim.preferences.len(),
        "cycles": sim.preference_qrels.cycles().count(),
        "exact_matches": exact,
        "latent_agreement": sim.latent_agreement(),
    });
    artifact::write_json(&dir.join("simulation.json"), &prov, &summary)?;
    println!(
        "{} queries, {} judgments, {} cycles, {} exact, agreement {:.4}",
        sim.pools.len(),
        sim.preferences.len(),
        sim.preference_qrels.cycles().count(),
        exact,
        sim.latent_agreement()
    );
    Ok(())
}
