use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ananke::config::{self, ConfigFile};
use ananke::eval;
use ananke::ingest::{self, LogFormat};
use ananke::investigator::{self, AlertSpec, InvestigateError, InvestigationConfig, InvestigationResult};
use ananke::kb::{KnowledgeBase, DEFAULT_N_MAX};
use ananke::llm::{Cassette, HttpBackend, HttpEmbedder, LlmBackend, LlmError, RuleOracle};
use ananke::provenance::ProvenanceGraph;
use ananke::report::{self, NarrativeInput};
use ananke::scenario::{self, GroundTruthFile, ScenarioSpec};
use ananke::vindex::{Embedder, HashEmbedder, VectorIndex};

// Exit codes: 2 bad input or config, 3 knowledge base problem, 4 alert did
// not resolve, 5 a named object was not found, 1 everything else.
const EXIT_SPEC: u8 = 2;
const EXIT_KB: u8 = 3;
const EXIT_ALERT: u8 = 4;
const EXIT_LOOKUP: u8 = 5;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn spec_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_SPEC, e.to_string())
}

fn kb_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_KB, e.to_string())
}

fn internal_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(1, e.to_string())
}

/// Investigate logs with kill-chain knowledge retrieval and an LLM analyst.
#[derive(Parser)]
#[command(name = "ananke", version)]
struct Cli {
    /// TOML config file; see `ananke config show`.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled scenario directory.
    GenScenario(GenScenarioArgs),
    /// Build or extend a knowledge base from labeled scenario directories.
    BuildKb(BuildKbArgs),
    /// Run an alert-driven investigation over a log set.
    Investigate(Box<InvestigateArgs>),
    /// Score investigation results against ground truth.
    Eval(EvalArgs),
    /// Knowledge base utilities.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Configuration utilities.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Args)]
struct GenScenarioArgs {
    /// Scenario spec JSON; missing fields take defaults.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct BuildKbArgs {
    /// Labeled scenario directory; repeatable.
    #[arg(long = "scenario", value_name = "DIR", required = true)]
    scenarios: Vec<PathBuf>,
    /// Knowledge base directory, created or extended in place.
    #[arg(long, value_name = "DIR")]
    kb: PathBuf,
    /// oracle | http | record | replay
    #[arg(long, default_value = "oracle")]
    backend: String,
    /// Cassette file for the record/replay backends.
    #[arg(long, value_name = "FILE")]
    cassette: Option<PathBuf>,
    /// Events per knowledge unit; only honored when creating a new base.
    #[arg(long, value_name = "N")]
    n_max: Option<usize>,
}

#[derive(Args)]
struct InvestigateArgs {
    /// Scenario directory or events JSONL file.
    #[arg(long, value_name = "PATH")]
    logs: PathBuf,
    /// Alert JSON; defaults to alert.json inside --logs.
    #[arg(long, value_name = "FILE")]
    alert: Option<PathBuf>,
    /// Knowledge base directory.
    #[arg(long, value_name = "DIR")]
    kb: PathBuf,
    /// Output path for the investigation JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Optional markdown report path.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// json | csv, when --logs is a file.
    #[arg(long, default_value = "json")]
    log_format: String,
    /// Label carried into the result; defaults to the scenario's own id.
    #[arg(long)]
    scenario_id: Option<String>,
    /// oracle | http | record | replay
    #[arg(long, default_value = "oracle")]
    backend: String,
    /// Cassette file for the record/replay backends.
    #[arg(long, value_name = "FILE")]
    cassette: Option<PathBuf>,
    /// Lexicon for the oracle backend; defaults to ground_truth.json inside --logs.
    #[arg(long, value_name = "FILE")]
    oracle_lexicon: Option<PathBuf>,
    /// Max events per context sequence.
    #[arg(long, value_name = "N")]
    n_max: Option<usize>,
    /// cosine | inner_product | euclidean
    #[arg(long)]
    metric: Option<String>,
    #[arg(long, value_name = "N")]
    max_iterations: Option<usize>,
    /// full | star
    #[arg(long)]
    induced_edges: Option<String>,
    /// exact | substring_fallback
    #[arg(long)]
    entity_match: Option<String>,
    /// Knowledge units retrieved per reasoning step.
    #[arg(long, value_name = "K")]
    retrieval_k: Option<usize>,
    /// timeline | full_cache
    #[arg(long)]
    narrative_input: Option<String>,
    /// Skip the narrative consolidation call.
    #[arg(long)]
    no_narrative: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Investigation JSON; repeatable, paired with --ground-truth by position.
    #[arg(long = "investigation", value_name = "FILE", required = true)]
    investigations: Vec<PathBuf>,
    /// Ground truth JSON; repeatable.
    #[arg(long = "ground-truth", value_name = "FILE", required = true)]
    ground_truths: Vec<PathBuf>,
    /// Score graph edges instead of entities.
    #[arg(long)]
    event_level: bool,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Summarize a knowledge base, or show one unit by id.
    Inspect {
        #[arg(long, value_name = "DIR")]
        kb: PathBuf,
        #[arg(long, value_name = "ID")]
        unit: Option<String>,
    },
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Print the effective configuration after file and environment merging.
    Show,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = config::load_config(cli.config.as_deref()).map_err(spec_err)?;
    config::apply_env(&mut cfg);
    match cli.command {
        Command::GenScenario(args) => cmd_gen_scenario(args),
        Command::BuildKb(args) => cmd_build_kb(args, &cfg),
        Command::Investigate(args) => cmd_investigate(*args, &cfg),
        Command::Eval(args) => cmd_eval(args),
        Command::Kb(KbCommand::Inspect { kb, unit }) => cmd_kb_inspect(&kb, unit.as_deref()),
        Command::Config(ConfigCommand::Show) => cmd_config_show(&cfg),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(EXIT_SPEC, format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_SPEC, format!("cannot parse {}: {e}", path.display())))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| internal_err(format!("cannot write {}: {e}", path.display())))
}

fn cmd_gen_scenario(args: GenScenarioArgs) -> CliResult<()> {
    let mut spec: ScenarioSpec = match &args.spec {
        Some(path) => read_json(path)?,
        None => ScenarioSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let scenario = scenario::generate(&spec).map_err(spec_err)?;
    scenario::write_scenario_dir(&args.out, &scenario).map_err(internal_err)?;
    println!(
        "wrote {} to {}: {} events ({} attack), {} malicious entities",
        scenario.manifest.scenario_id,
        args.out.display(),
        scenario.log_set.events.len(),
        scenario.manifest.attack_events,
        scenario.ground_truth.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BackendKind {
    Oracle,
    Http,
    Record,
    Replay,
}

fn parse_backend(s: &str) -> CliResult<BackendKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "oracle" => Ok(BackendKind::Oracle),
        "http" => Ok(BackendKind::Http),
        "record" => Ok(BackendKind::Record),
        "replay" => Ok(BackendKind::Replay),
        other => Err(CliError::new(EXIT_SPEC, format!("unknown backend {other:?} (expected oracle, http, record, or replay)"))),
    }
}

fn require_http(cfg: &ConfigFile, who: &str) -> CliResult<ananke::llm::HttpConfig> {
    cfg.llm.http_config().ok_or_else(|| {
        CliError::new(
            EXIT_SPEC,
            format!(
                "{who} needs llm.url and llm.model (config file [llm] section, or {} / {})",
                config::ENV_LLM_URL,
                config::ENV_LLM_MODEL
            ),
        )
    })
}

/// Builds the http/record/replay backends; the oracle is built at call sites
/// because its lexicon comes from scenario data.
fn make_remote_backend(kind: BackendKind, cfg: &ConfigFile, cassette: Option<&Path>) -> CliResult<Box<dyn LlmBackend>> {
    match kind {
        BackendKind::Oracle => unreachable!("oracle backends are built by the caller"),
        BackendKind::Http => Ok(Box::new(HttpBackend::new(require_http(cfg, "the http backend")?))),
        BackendKind::Record => {
            let path = cassette.ok_or_else(|| CliError::new(EXIT_SPEC, "the record backend needs --cassette"))?;
            let inner = HttpBackend::new(require_http(cfg, "the record backend")?);
            Ok(Box::new(Cassette::record(Box::new(inner), path).map_err(internal_err)?))
        }
        BackendKind::Replay => {
            let path = cassette.ok_or_else(|| CliError::new(EXIT_SPEC, "the replay backend needs --cassette"))?;
            Ok(Box::new(Cassette::replay(path).map_err(spec_err)?))
        }
    }
}

fn cmd_build_kb(args: BuildKbArgs, cfg: &ConfigFile) -> CliResult<()> {
    let embedder = HashEmbedder;
    let mut kb = if args.kb.join("manifest.json").exists() {
        let kb = KnowledgeBase::load(&args.kb).map_err(kb_err)?;
        if let Some(n) = args.n_max {
            if n != kb.manifest.n_max {
                return Err(CliError::new(
                    EXIT_SPEC,
                    format!("--n-max {n} conflicts with the existing base (n_max {})", kb.manifest.n_max),
                ));
            }
        }
        if kb.manifest.embedder_id != embedder.id() {
            return Err(kb_err(format!(
                "knowledge base was built with embedder {:?}; this tool extends only {:?} bases",
                kb.manifest.embedder_id,
                embedder.id()
            )));
        }
        kb
    } else {
        KnowledgeBase::new(&embedder, args.n_max.unwrap_or(DEFAULT_N_MAX))
    };

    let kind = parse_backend(&args.backend)?;
    let shared: Option<Box<dyn LlmBackend>> = if kind == BackendKind::Oracle {
        None
    } else {
        Some(make_remote_backend(kind, cfg, args.cassette.as_deref())?)
    };

    for dir in &args.scenarios {
        let loaded = scenario::load_scenario_dir(dir).map_err(spec_err)?;
        let oracle_holder;
        let backend: &dyn LlmBackend = match &shared {
            Some(b) => b.as_ref(),
            None => {
                oracle_holder = RuleOracle::new(loaded.ground_truth.clone(), loaded.phase_hints.clone());
                &oracle_holder
            }
        };
        let report = kb.add_scenario(&loaded.log_set, &loaded.ground_truth, backend, &embedder).map_err(kb_err)?;
        println!(
            "added {}: {} units (+{} duplicate chunks skipped), {} annotation windows, {} events repaired, {} tokens",
            report.scenario_id,
            report.units_added,
            report.units_deduped,
            report.coverage.windows,
            report.coverage.repaired,
            report.usage.total()
        );
    }
    kb.save(&args.kb).map_err(kb_err)?;
    println!("knowledge base at {} holds {} units across {} scenarios", args.kb.display(), kb.len(), kb.scenarios().len());
    Ok(())
}

fn parse_log_format(s: &str) -> CliResult<LogFormat> {
    match s.trim().to_ascii_lowercase().as_str() {
        "json" | "jsonl" => Ok(LogFormat::JsonEvent),
        "csv" => Ok(LogFormat::CsvTriple),
        other => Err(CliError::new(EXIT_SPEC, format!("unknown log format {other:?} (expected json or csv)"))),
    }
}

fn investigate_err(e: InvestigateError) -> CliError {
    match &e {
        InvestigateError::AlertUnresolved(_) => CliError::new(EXIT_ALERT, e.to_string()),
        InvestigateError::ConfigInvalid(_) => spec_err(e),
        InvestigateError::Llm(LlmError::CassetteMiss(_)) => CliError::new(EXIT_LOOKUP, e.to_string()),
        _ => internal_err(e),
    }
}

fn cmd_investigate(args: InvestigateArgs, cfg: &ConfigFile) -> CliResult<()> {
    // logs: a scenario directory carries its own alert and lexicon
    let logs_is_dir = args.logs.is_dir();
    let (log_set, scen) = if logs_is_dir {
        let loaded = scenario::load_scenario_dir(&args.logs).map_err(spec_err)?;
        (loaded.log_set.clone(), Some(loaded))
    } else {
        let format = parse_log_format(&args.log_format)?;
        let (ls, load_report) = ingest::load_log_set(&[args.logs.clone()], format, false).map_err(spec_err)?;
        if !load_report.skipped.is_empty() {
            log::warn!("skipped {} malformed log lines", load_report.skipped.len());
        }
        (ls, None)
    };

    let alert: AlertSpec = match &args.alert {
        Some(p) => read_json(p)?,
        None => scen
            .as_ref()
            .map(|s| s.alert.clone())
            .ok_or_else(|| CliError::new(EXIT_SPEC, "--alert is required when --logs is not a scenario directory"))?,
    };

    let kb = KnowledgeBase::load(&args.kb).map_err(kb_err)?;

    let mut inv = InvestigationConfig::default();
    cfg.investigation.apply(&mut inv).map_err(spec_err)?;
    if let Some(n) = args.n_max {
        inv.n_max = n;
    }
    if let Some(m) = &args.metric {
        inv.metric = m.parse().map_err(|e: String| CliError::new(EXIT_SPEC, e))?;
    }
    if let Some(n) = args.max_iterations {
        inv.max_iterations = n;
    }
    if let Some(s) = &args.induced_edges {
        inv.induced_edges = config::parse_induced_edges(s).map_err(spec_err)?;
    }
    if let Some(s) = &args.entity_match {
        inv.entity_match = config::parse_entity_match(s).map_err(spec_err)?;
    }
    if let Some(k) = args.retrieval_k {
        inv.retrieval_k = k;
    }
    let narrative_input = match &args.narrative_input {
        Some(s) => config::parse_narrative_input(s).map_err(spec_err)?,
        None => cfg.investigation.narrative_input().map_err(spec_err)?.unwrap_or(NarrativeInput::Timeline),
    };

    // the embedder must be the one the knowledge base was built with
    let embedder: Box<dyn Embedder> = if kb.manifest.embedder_id == HashEmbedder.id() {
        Box::new(HashEmbedder)
    } else if kb.manifest.embedder_id.starts_with("http-") {
        let http = require_http(cfg, "this knowledge base's embedder")?;
        let e = HttpEmbedder::new(http, kb.manifest.dim);
        if e.id() != kb.manifest.embedder_id {
            return Err(kb_err(format!(
                "knowledge base embedder is {:?} but the configured model yields {:?}",
                kb.manifest.embedder_id,
                e.id()
            )));
        }
        Box::new(e)
    } else {
        return Err(kb_err(format!("unknown embedder {:?} in knowledge base manifest", kb.manifest.embedder_id)));
    };
    let index = VectorIndex::from_kb(&kb, inv.metric).map_err(kb_err)?;

    let kind = parse_backend(&args.backend)?;
    let backend: Box<dyn LlmBackend> = if kind == BackendKind::Oracle {
        let lexicon_path = args
            .oracle_lexicon
            .clone()
            .or_else(|| logs_is_dir.then(|| args.logs.join("ground_truth.json")))
            .ok_or_else(|| {
                CliError::new(EXIT_SPEC, "the oracle backend needs --oracle-lexicon when --logs is not a scenario directory")
            })?;
        let gt: GroundTruthFile = read_json(&lexicon_path)?;
        let set = gt.to_set().map_err(spec_err)?;
        Box::new(RuleOracle::new(set, gt.phase_hints))
    } else {
        make_remote_backend(kind, cfg, args.cassette.as_deref())?
    };

    let graph = ProvenanceGraph::build(log_set);
    let mut result = investigator::investigate(&graph, &alert, &kb, &index, embedder.as_ref(), backend.as_ref(), &inv)
        .map_err(investigate_err)?;
    result.scenario_id = args.scenario_id.clone().or_else(|| scen.as_ref().map(|s| s.ground_truth.scenario_id.clone()));

    let mut rpt = report::build_structured_report(&result);
    if !args.no_narrative {
        let usage = report::attach_narrative(&mut rpt, &result, backend.as_ref(), narrative_input);
        result.usage_total += usage;
        result.warnings = rpt.warnings.clone();
    }

    write_json_file(&args.out, &result)?;
    if let Some(path) = &args.report {
        std::fs::write(path, report::render_markdown(&rpt))
            .map_err(|e| internal_err(format!("cannot write {}: {e}", path.display())))?;
    }
    println!(
        "detected {} entities in {} reasoning steps; tokens: {} prompt, {} reasoning, {} answer; wrote {}",
        result.detected.len(),
        result.cache.len(),
        result.usage_total.prompt_tokens,
        result.usage_total.reasoning_tokens,
        result.usage_total.answer_tokens,
        args.out.display()
    );
    for w in &result.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    if args.investigations.len() != args.ground_truths.len() {
        return Err(CliError::new(
            EXIT_SPEC,
            format!(
                "{} --investigation files but {} --ground-truth files; they pair by position",
                args.investigations.len(),
                args.ground_truths.len()
            ),
        ));
    }
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    for (ipath, gpath) in args.investigations.iter().zip(&args.ground_truths) {
        let inv: InvestigationResult = read_json(ipath)?;
        let gt_file: GroundTruthFile = read_json(gpath)?;
        let gt: BTreeSet<String> = gt_file.to_set().map_err(spec_err)?.keys().map(str::to_string).collect();
        let mut m = if args.event_level {
            eval::score_event_level(&inv.detected, &gt, &inv.universe.nodes, &inv.universe.edges).map_err(spec_err)?
        } else {
            let universe: BTreeSet<String> = inv.universe.nodes.iter().cloned().collect();
            eval::score(&inv.detected, &gt, &universe).map_err(spec_err)?
        };
        m.token_usage = inv.usage_total;
        let label = inv
            .scenario_id
            .clone()
            .unwrap_or_else(|| ipath.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        rows.push((label, m.clone()));
        metrics.push(m);
    }
    if metrics.len() > 1 {
        rows.push(("aggregate".to_string(), eval::aggregate(&metrics)));
    }
    print!("{}", eval::render_table(&rows));
    Ok(())
}

fn cmd_kb_inspect(kb_dir: &Path, unit: Option<&str>) -> CliResult<()> {
    let kb = KnowledgeBase::load(kb_dir).map_err(kb_err)?;
    match unit {
        Some(id) => {
            let unit = kb
                .get(id)
                .ok_or_else(|| CliError::new(EXIT_LOOKUP, format!("unit {id:?} is not in this knowledge base")))?;
            let shown = serde_json::json!({
                "unit_id": unit.unit_id,
                "scenario_id": unit.scenario_id,
                "platform": unit.platform,
                "phase": unit.meta.phase,
                "behavior": unit.meta.behavior,
                "entities": unit.meta.entities,
                "neighbors": unit.meta.neighbors,
                "event_count": unit.events.len(),
                "events": ananke::vindex::serialize_sequence_tabbed(&unit.events).lines().collect::<Vec<_>>(),
                "vector_dim": unit.vector.dim(),
            });
            println!("{}", serde_json::to_string_pretty(&shown).expect("serializes"));
        }
        None => {
            let m = &kb.manifest;
            println!("format {}  embedder {}  dim {}  n_max {}", m.format_version, m.embedder_id, m.dim, m.n_max);
            println!("{} units across {} scenarios", kb.len(), m.scenarios.len());
            let mut by_scenario: BTreeMap<&str, usize> = BTreeMap::new();
            let mut by_phase: BTreeMap<&str, usize> = BTreeMap::new();
            for u in kb.units() {
                *by_scenario.entry(u.scenario_id.as_str()).or_default() += 1;
                *by_phase.entry(u.meta.phase.name()).or_default() += 1;
            }
            for (scenario, count) in by_scenario {
                println!("  scenario {scenario}: {count} units");
            }
            for (phase, count) in by_phase {
                println!("  phase {phase}: {count} units");
            }
        }
    }
    Ok(())
}

fn cmd_config_show(cfg: &ConfigFile) -> CliResult<()> {
    let mut shown = cfg.clone();
    if let Some(k) = &mut shown.llm.api_key {
        *k = "***".into();
    }
    print!("{}", toml::to_string_pretty(&shown).expect("config serializes"));
    let mut inv = InvestigationConfig::default();
    shown.investigation.apply(&mut inv).map_err(spec_err)?;
    println!("\n# effective investigation settings\n{}", serde_json::to_string_pretty(&inv).expect("serializes"));
    Ok(())
}
