use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use intentloop_core::bandit::{
    train_slot_predictor, BanditModel, PolicyConfig, PolicyKind, PredictorConfig, TrainingExample,
};
use intentloop_core::embedding::VocabularyIndex;
use intentloop_core::ope::{evaluate_records, ModelSet, DEFAULT_CAP};
use intentloop_core::qpp::{compare_requests, index_corpus, tokenize_corpus, QppConfig, QppRequest};
use intentloop_core::retrieval::{
    build_corpus, load_corpus, CorpusConfig, FixtureSearch, HttpSearch, SearchProvider,
};
use intentloop_core::rng::derived_rng;
use intentloop_core::session::{export_log, load_log, replay_log, training_examples, InteractionRecord};
use intentloop_core::simulator::{generate_ontology, Driver, SimConfig, SimWorld};
use intentloop_core::{Error, IntentOntology, Result};
use intentloop_server::ServerConfig;
use rand::seq::SliceRandom;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{parse_policy, parse_scheme, FileConfig};
use crate::{Cli, Command, CorpusArgs, OpeArgs, QppArgs, ReplayArgs, ServeArgs, SimulateArgs, TrainArgs, WorldArgs};

const STREAM_OPE: u64 = 0x0E;
const STREAM_SPLIT: u64 = 0x5B;

struct Ctx<'a> {
    json: bool,
    seed: u64,
    seed_flag: Option<u64>,
    file: &'a FileConfig,
}

pub fn run(cli: &Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        json: cli.json,
        seed: cli.seed.or(file.seed).unwrap_or(0),
        seed_flag: cli.seed,
        file: &file,
    };
    match &cli.command {
        Command::Serve(a) => serve(&ctx, a),
        Command::Simulate(a) => simulate(&ctx, a),
        Command::TrainPredictor(a) => train_predictor(&ctx, a),
        Command::BuildCorpus(a) => corpus(&ctx, a),
        Command::Qpp(a) => qpp(&ctx, a),
        Command::Ope(a) => ope(&ctx, a),
        Command::ReplayLog(a) => replay(&ctx, a),
    }
}

fn emit<T: Serialize>(ctx: &Ctx, value: &T, text: impl FnOnce() -> String) {
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
    } else {
        print!("{}", text());
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

fn checkpoint_lines(models: &[BanditModel]) -> String {
    models.iter().map(|m| m.to_checkpoint_json() + "\n").collect()
}

fn read_checkpoints(path: &Path) -> Result<Vec<BanditModel>> {
    read_file(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(BanditModel::from_checkpoint_json)
        .collect()
}

/// Simulator settings: defaults, then the settings file, then
/// `--sim-config`, then `--set`, with an explicit `--seed` winning last.
fn sim_config(ctx: &Ctx, world: &WorldArgs) -> Result<SimConfig> {
    let mut sim = SimConfig {
        seed: ctx.seed,
        ..SimConfig::default()
    };
    ctx.file.apply_simulation(&mut sim)?;
    if let Some(p) = &world.sim_config {
        sim.apply_overrides(&read_file(p)?)?;
    }
    for kv in &world.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        sim.set(k, v)?;
    }
    if let Some(seed) = ctx.seed_flag {
        sim.seed = seed;
    }
    Ok(sim)
}

fn ontology_for(ctx: &Ctx, flag: &Option<PathBuf>, world: &WorldArgs) -> Result<IntentOntology> {
    match flag.as_ref().or(ctx.file.ontology.as_ref()) {
        Some(p) => IntentOntology::load(p),
        None => {
            let sim = sim_config(ctx, world)?;
            sim.validate()?;
            generate_ontology(&sim)
        }
    }
}

fn policy_kind(ctx: &Ctx, flag: &Option<String>, default: PolicyKind) -> Result<PolicyKind> {
    match flag.as_ref().or(ctx.file.policy.as_ref()) {
        Some(name) => parse_policy(name),
        None => Ok(default),
    }
}

/// Records from a log file, or from every `.jsonl` file under a directory.
/// Directory contents are ordered by time, then session and step.
fn load_logs(path: &Path) -> Result<Vec<InteractionRecord>> {
    if !path.is_dir() {
        return load_log(path);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for entry in entries {
            let p = entry
                .map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?
                .path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "jsonl") {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut records = Vec::new();
    for f in files {
        records.extend(load_log(&f)?);
    }
    records.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.session_id.cmp(&b.session_id))
            .then_with(|| a.step.cmp(&b.step))
    });
    Ok(records)
}

// ── serve ───────────────────────────────────────────────────────────────

fn server_config(ctx: &Ctx, a: &ServeArgs) -> Result<ServerConfig> {
    let f = ctx.file;
    let d = ServerConfig::default();
    let pick = |flag: &Option<PathBuf>, file: &Option<PathBuf>| flag.clone().or_else(|| file.clone());
    let pick_s = |flag: &Option<String>, file: &Option<String>| flag.clone().or_else(|| file.clone());
    Ok(ServerConfig {
        port: a.port.or(f.port).unwrap_or(d.port),
        data_dir: pick(&a.data_dir, &f.data_dir).unwrap_or(d.data_dir),
        cors_origins: if a.cors_origins.is_empty() {
            f.cors_origins.clone().unwrap_or_default()
        } else {
            a.cors_origins.clone()
        },
        ontology: pick(&a.ontology, &f.ontology),
        examples: pick(&a.examples, &f.examples),
        search_endpoint: pick_s(&a.search_endpoint, &f.search_endpoint),
        search_key: pick_s(&a.search_key, &f.search_key),
        search_fixture: pick(&a.search_fixture, &f.search_fixture),
        lm_endpoint: pick_s(&a.lm_endpoint, &f.lm_endpoint),
        embedding_endpoint: pick_s(&a.embedding_endpoint, &f.embedding_endpoint),
        embedding_dim: a.embedding_dim.or(f.embedding_dim).unwrap_or(d.embedding_dim),
        predictor: pick(&a.predictor, &f.predictor),
        policy: policy_kind(ctx, &a.policy, d.policy)?,
        scheme: match a.scheme.as_ref().or(f.scheme.as_ref()) {
            Some(s) => parse_scheme(s)?,
            None => d.scheme,
        },
        seed: ctx.seed,
        max_steps: a.max_steps.or(f.max_steps).unwrap_or(d.max_steps),
        slate_size: a.slate_size.or(f.slate_size).unwrap_or(d.slate_size),
    })
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    let cfg = server_config(ctx, a)?;
    cfg.validate()?;
    if a.dry_run {
        let mut shown = cfg.clone();
        if shown.search_key.is_some() {
            shown.search_key = Some("<redacted>".into());
        }
        println!("{}", serde_json::to_string_pretty(&shown).expect("config serializes"));
        return Ok(());
    }
    intentloop_server::run(&cfg)
}

// ── simulate ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct SimSummary {
    seed: u64,
    policy: String,
    sessions: usize,
    interactions: usize,
    mean_reward: f64,
    tail_reward: f64,
    tail_expected_reward: f64,
    log_sha256: String,
    checkpoint_sha256: String,
}

fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    let mut sim = sim_config(ctx, &a.world)?;
    if let Some(n) = a.requests {
        sim.n_requests = n;
    }
    if a.interactions.is_some() {
        sim.max_interactions = a.interactions;
    }
    if a.policy.is_some() || ctx.file.policy.is_some() {
        sim.policy = policy_kind(ctx, &a.policy, sim.policy)?;
    }
    if let Some(s) = a.scheme.as_ref().or(ctx.file.scheme.as_ref()) {
        sim.scheme = parse_scheme(s)?;
    }
    if let Some(c) = a.coupling {
        sim.coupling = c;
    }
    let world = SimWorld::new(sim.clone())?;
    let engine = world.default_engine();
    let driver = if a.oracle { Driver::Oracle } else { Driver::Engine };
    let outcome = world.run(&engine, driver)?;

    let mut log = Vec::new();
    export_log(&outcome.records, &mut log)?;
    let checkpoints = checkpoint_lines(&engine.registry(sim.scheme).snapshot());
    if let Some(p) = &a.out {
        write_file(p, &log)?;
    }
    if let Some(p) = &a.checkpoint {
        write_file(p, checkpoints.as_bytes())?;
    }
    if let Some(prefix) = &a.requests_out {
        let (originals, refineds) = world.refine_request_corpus(&outcome.sessions)?;
        let path = |suffix: &str| {
            let mut s = prefix.clone().into_os_string();
            s.push(suffix);
            PathBuf::from(s)
        };
        write_file(&path(".original.jsonl"), jsonl(&originals).as_bytes())?;
        write_file(&path(".refined.jsonl"), jsonl(&refineds).as_bytes())?;
    }
    if let Some(p) = &a.ontology_out {
        world.ontology.save(p)?;
    }
    let summary = SimSummary {
        seed: sim.seed,
        policy: if a.oracle { "oracle".into() } else { sim.policy.name().into() },
        sessions: outcome.sessions.len(),
        interactions: outcome.rewards.len(),
        mean_reward: intentloop_core::stats::mean(&outcome.rewards),
        tail_reward: outcome.tail_mean(0.1),
        tail_expected_reward: outcome.tail_expected(0.1),
        log_sha256: sha256_hex(&log),
        checkpoint_sha256: sha256_hex(checkpoints.as_bytes()),
    };
    emit(ctx, &summary, || {
        format!(
            "policy {} seed {}: {} sessions, {} rounds\nmean reward {:.4}, final 10% {:.4} (expected {:.4})\nlog sha256 {}\n",
            summary.policy,
            summary.seed,
            summary.sessions,
            summary.interactions,
            summary.mean_reward,
            summary.tail_reward,
            summary.tail_expected_reward,
            summary.log_sha256
        )
    });
    Ok(())
}

// ── replay-log ──────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ReplaySummary {
    policy: String,
    records: usize,
    models: usize,
    updates: u64,
    checkpoint_sha256: String,
}

fn replay(ctx: &Ctx, a: &ReplayArgs) -> Result<()> {
    let records = load_logs(&a.logs)?;
    let ontology = ontology_for(ctx, &a.ontology, &a.world)?;
    let default = sim_config(ctx, &a.world)?.policy;
    let kind = policy_kind(ctx, &a.policy, default)?;
    let registry = replay_log(&records, &ontology, PolicyConfig::new(kind).with_seed(ctx.seed))?;
    let models = registry.snapshot();
    let text = checkpoint_lines(&models);
    if let Some(p) = &a.out {
        write_file(p, text.as_bytes())?;
    }
    let summary = ReplaySummary {
        policy: kind.name().into(),
        records: records.len(),
        models: models.len(),
        updates: models.iter().map(BanditModel::updates).sum(),
        checkpoint_sha256: sha256_hex(text.as_bytes()),
    };
    emit(ctx, &summary, || {
        format!(
            "replayed {} records into {} {} models ({} updates)\ncheckpoint sha256 {}\n",
            summary.records, summary.models, summary.policy, summary.updates, summary.checkpoint_sha256
        )
    });
    Ok(())
}

// ── ope ─────────────────────────────────────────────────────────────────

fn split_sessions(records: &[InteractionRecord], fraction: f64) -> (Vec<InteractionRecord>, Vec<InteractionRecord>) {
    let mut order: Vec<&str> = Vec::new();
    let mut seen = BTreeSet::new();
    for r in records {
        if seen.insert(r.session_id.as_str()) {
            order.push(&r.session_id);
        }
    }
    let cut = (order.len() as f64 * fraction).floor() as usize;
    let train: BTreeSet<&str> = order[..cut].iter().copied().collect();
    records.iter().cloned().partition(|r| train.contains(r.session_id.as_str()))
}

fn ope(ctx: &Ctx, a: &OpeArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.train_fraction) {
        return Err(Error::Validation("--train-fraction must be in [0, 1)".into()));
    }
    let cap = a.cap.or(ctx.file.cap).unwrap_or(DEFAULT_CAP);
    let records = load_logs(&a.logs)?;
    let (name, models, eval) = match &a.model {
        Some(path) => {
            let models = read_checkpoints(path)?;
            let name = models
                .first()
                .map(|m| m.kind().name().to_string())
                .ok_or_else(|| Error::Validation(format!("{} holds no models", path.display())))?;
            (name, models, records)
        }
        None => {
            let kind = policy_kind(ctx, &a.policy, PolicyKind::EpsilonGreedy)?;
            let ontology = ontology_for(ctx, &a.ontology, &a.world)?;
            let (train, eval) = split_sessions(&records, a.train_fraction);
            let registry = replay_log(&train, &ontology, PolicyConfig::new(kind).with_seed(ctx.seed))?;
            for r in &eval {
                registry.get_or_create(&ontology, &r.key(), r.context.len())?;
            }
            (kind.name().to_string(), registry.snapshot(), eval)
        }
    };
    if eval.is_empty() {
        return Err(Error::Validation("no logged rounds left to evaluate".into()));
    }
    let policy = ModelSet::new(models);
    let mut rng = derived_rng(ctx.seed, &[STREAM_OPE]);
    let report = evaluate_records(&eval, &name, &policy, cap, &mut rng)?;
    emit(ctx, &report, || {
        let mut s = format!(
            "policy {}: ncis {:.4}, rs {}, accepted {}/{} (cap {})\n",
            report.policy,
            report.ncis,
            report.rs.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
            report.acceptance,
            report.n,
            report.cap
        );
        for n in &report.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    });
    Ok(())
}

// ── train-predictor ─────────────────────────────────────────────────────

#[derive(Serialize)]
struct TrainSummary {
    examples: usize,
    train: usize,
    test: usize,
    recall_at_1: Option<f64>,
    epochs: usize,
    loss_first: Option<f64>,
    loss_last: Option<f64>,
}

fn train_predictor(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(Error::Validation("--holdout must be in [0, 1)".into()));
    }
    let mut rows: Vec<TrainingExample> = match (&a.examples, &a.logs) {
        (Some(p), _) => read_file(p)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    context: p.display().to_string(),
                    line: n + 1,
                    column: e.column(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?,
        (None, Some(p)) => training_examples(&load_logs(p)?),
        (None, None) => unreachable!("clap requires --logs or --examples"),
    };
    rows.shuffle(&mut derived_rng(ctx.seed, &[STREAM_SPLIT]));
    let n_test = (rows.len() as f64 * a.holdout).floor() as usize;
    let (test, train) = rows.split_at(n_test);
    let d = PredictorConfig::default();
    let config = PredictorConfig {
        embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
        hidden: a.hidden.unwrap_or(d.hidden),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        dropout: a.dropout.unwrap_or(d.dropout),
        epochs: a.epochs.unwrap_or(d.epochs),
        seed: ctx.seed,
    };
    // Every slot seen in any row, so held-out rows never name an unknown slot.
    let slots: Vec<String> = rows
        .iter()
        .flat_map(|r| r.input_slots.iter().chain(&r.target_slots))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let model = train_slot_predictor(train, &slots, config)?;
    let mut hits = 0usize;
    for r in test {
        let top = model.rank(&r.request_text, &r.input_slots, 1)?;
        if top.first().is_some_and(|t| r.target_slots.contains(t)) {
            hits += 1;
        }
    }
    if let Some(p) = &a.out {
        write_file(p, model.to_json_string().as_bytes())?;
    }
    let h = model.loss_history();
    let summary = TrainSummary {
        examples: rows.len(),
        train: train.len(),
        test: test.len(),
        recall_at_1: (!test.is_empty()).then(|| hits as f64 / test.len() as f64),
        epochs: config.epochs,
        loss_first: h.first().copied(),
        loss_last: h.last().copied(),
    };
    emit(ctx, &summary, || {
        format!(
            "trained on {} rows, held out {}\nrecall@1 {}\nloss {} -> {}\n",
            summary.train,
            summary.test,
            summary.recall_at_1.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into()),
            summary.loss_first.map(|l| format!("{l:.4}")).unwrap_or_default(),
            summary.loss_last.map(|l| format!("{l:.4}")).unwrap_or_default()
        )
    });
    Ok(())
}

// ── build-corpus ────────────────────────────────────────────────────────

fn corpus(ctx: &Ctx, a: &CorpusArgs) -> Result<()> {
    let sim = sim_config(ctx, &a.world)?;
    let ontology_path = a.ontology.as_ref().or(ctx.file.ontology.as_ref());
    let endpoint = a.search_endpoint.clone().or_else(|| ctx.file.search_endpoint.clone());
    let key = a.search_key.clone().or_else(|| ctx.file.search_key.clone());
    let fixture = a.search_fixture.as_ref().or(ctx.file.search_fixture.as_ref());
    let (ontology, provider): (IntentOntology, Box<dyn SearchProvider>) = match ontology_path {
        Some(p) => {
            let ontology = IntentOntology::load(p)?;
            let provider: Box<dyn SearchProvider> = match (endpoint, fixture) {
                (Some(url), _) => Box::new(HttpSearch::new(url, key)),
                (None, Some(f)) => Box::new(FixtureSearch::load(f)?),
                (None, None) => {
                    return Err(Error::Validation(
                        "an ontology file needs --search-endpoint or --search-fixture".into(),
                    ))
                }
            };
            (ontology, provider)
        }
        None => {
            let world = SimWorld::new(sim.clone())?;
            let provider: Box<dyn SearchProvider> = match (endpoint, fixture) {
                (Some(url), _) => Box::new(HttpSearch::new(url, key)),
                (None, Some(f)) => Box::new(FixtureSearch::load(f)?),
                (None, None) => Box::new(world.search_provider()),
            };
            ((*world.ontology).clone(), provider)
        }
    };
    let locations = if a.locations.is_empty() { sim.locations.clone() } else { a.locations.clone() };
    let file = std::fs::File::create(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut out = BufWriter::new(file);
    let summary = build_corpus(
        &ontology,
        &locations,
        provider.as_ref(),
        &mut out,
        CorpusConfig {
            top_n: a.top_n,
            concurrency: a.concurrency,
        },
    )?;
    out.flush().map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    emit(ctx, &summary, || {
        format!(
            "{} queries, {} documents, {} failed\n",
            summary.queries, summary.documents, summary.failures
        )
    });
    if summary.queries > 0 && summary.failures == summary.queries {
        return Err(Error::Transport {
            attempts: 1,
            message: "every corpus query failed".into(),
        });
    }
    Ok(())
}

// ── qpp ─────────────────────────────────────────────────────────────────

fn read_requests(path: &Path) -> Result<Vec<QppRequest>> {
    let text = read_file(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            if l.trim_start().starts_with('{') {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    context: path.display().to_string(),
                    line: n + 1,
                    column: e.column(),
                    message: e.to_string(),
                })
            } else {
                Ok(QppRequest::new(l.trim()))
            }
        })
        .collect()
}

fn qpp(ctx: &Ctx, a: &QppArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let originals = read_requests(&a.requests)?;
    let refined = a.refined.as_deref().map(read_requests).transpose()?;
    let config = QppConfig {
        neighbors: a.neighbors,
        sim_threshold: a.sim_threshold,
        drop_stopwords: a.drop_stopwords,
    };
    let stats = index_corpus(&corpus, config.drop_stopwords)?;
    let index = match &a.vocab {
        Some(p) => VocabularyIndex::load(p)?,
        None => VocabularyIndex::from_cooccurrence(
            &tokenize_corpus(&corpus, config.drop_stopwords),
            a.vocab_dim,
            a.vocab_nonzeros,
            ctx.seed,
        )?,
    };
    if let Some(p) = &a.save_vocab {
        index.save(p)?;
    }
    let report = compare_requests(&originals, refined.as_deref(), &stats, &index, &config)?;
    emit(ctx, &report, || report.to_table());
    Ok(())
}
