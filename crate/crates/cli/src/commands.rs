use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use milel::autodiff::GradCheckConfig;
use milel::candidates::*;
use milel::eval::*;
use milel::kb::{DanglingPolicy, KnowledgeBase};
use milel::model::{corpus_tokens, kb_types, ElModel, Instance};
use milel::synth;
use milel::training::{fixture_gradient_check, train, TrainMode, TrainOptions};
use milel::vocab::read_word_vectors;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::*;
use crate::config::{Preset, RunConfig};

pub const KB_ENTITIES: &str = "entities.tsv";
pub const KB_RELATIONS: &str = "relations.tsv";
pub const MODEL_DIR: &str = "model";

/// Creates `<root>/<timestamp>-<label>`, adding a numeric suffix rather than
/// reusing an existing directory.
pub fn run_dir(root: &Path, label: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 { format!("{stamp}-{label}") } else { format!("{stamp}-{label}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("cannot create {}", dir.display())),
        }
    }
    unreachable!()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes the effective configuration and the invocation into a run directory.
fn echo(dir: &Path, config: &RunConfig, invocation: &impl Serialize) -> Result<()> {
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    write_json(&dir.join("invocation.json"), invocation)
}

fn load_kb(dir: &Path) -> Result<KnowledgeBase> {
    let (kb, stats) =
        KnowledgeBase::load(open(&dir.join(KB_ENTITIES))?, open(&dir.join(KB_RELATIONS))?, DanglingPolicy::SkipWithWarning)
            .with_context(|| format!("cannot load knowledge base from {}", dir.display()))?;
    if stats.skipped_relations > 0 {
        log::warn!("skipped {} relations with unknown endpoints", stats.skipped_relations);
    }
    Ok(kb)
}

fn load_corpus(path: &Path) -> Result<Vec<Sentence>> {
    read_corpus(open(path)?).with_context(|| format!("cannot read corpus {}", path.display()))
}

fn load_points(path: &Path) -> Result<Vec<DataPoint>> {
    read_datapoints(open(path)?).with_context(|| format!("cannot read data points {}", path.display()))
}

fn load_model(run: &Path) -> Result<ElModel> {
    let dir = if run.join(MODEL_DIR).is_dir() { run.join(MODEL_DIR) } else { run.to_path_buf() };
    ElModel::load(&dir).with_context(|| format!("cannot load model from {}", dir.display()))
}

fn dataset(kb: &KnowledgeBase, corpus: &[Sentence], cap: usize, n_neg: usize, mode: DatasetMode, seed: u64) -> Result<Vec<DataPoint>> {
    let config = DatasetConfig { cap, n_neg, mode };
    Ok(build_dataset(kb, corpus, config, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

fn apply_model_flags(config: &mut RunConfig, flags: &ModelFlags) {
    let m = &mut config.model;
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut m.eta, flags.eta);
    set(&mut m.prior_noise, flags.prior);
    set(&mut m.margin, flags.margin);
    set(&mut m.temperature, flags.temperature);
    set(&mut m.learning_rate, flags.lr);
    set(&mut m.tau, flags.tau);
    if let Some(v) = flags.epochs {
        m.epochs = v;
    }
    if let Some(v) = flags.batch {
        m.batch_size = v;
    }
    if let Some(v) = flags.patience {
        m.patience = v;
    }
}

fn apply_data_flags(config: &mut RunConfig, common: &CommonFlags, cap: Option<usize>, n_neg: Option<usize>) {
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(c) = cap {
        config.data.cap = c;
    }
    if let Some(n) = n_neg {
        config.data.n_neg = n;
    }
}

fn base_config(common: &CommonFlags) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), common.preset)
}

fn finish(dir: &Path) {
    println!("{}", dir.display());
}

pub fn kb_build(a: &KbBuildArgs) -> Result<()> {
    let config = base_config(&a.common)?;
    let (kb, stats) = KnowledgeBase::load(open(&a.entities)?, open(&a.relations)?, DanglingPolicy::SkipWithWarning)
        .context("cannot build knowledge base")?;
    let dir = run_dir(&a.out, "kb")?;
    echo(&dir, &config, a)?;
    let mut w = create(&dir.join(KB_ENTITIES))?;
    kb.write_entities(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join(KB_RELATIONS))?;
    kb.write_relations(&mut w)?;
    w.flush()?;
    #[derive(Serialize)]
    struct Summary {
        entities: usize,
        relations: usize,
        skipped_relations: usize,
        name_tokens: usize,
        related_entities: usize,
        types: usize,
    }
    let summary = Summary {
        entities: kb.len(),
        relations: kb.triples().len(),
        skipped_relations: stats.skipped_relations,
        name_tokens: kb.vocabulary_size(),
        related_entities: kb.adjacency_len(),
        types: kb_types(&kb).len(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    eprintln!(
        "{} entities, {} relations ({} skipped), {} name tokens",
        summary.entities, summary.relations, summary.skipped_relations, summary.name_tokens
    );
    finish(&dir);
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut config = base_config(&a.common)?;
    if let Some(s) = a.common.seed {
        config.seed = s;
    }
    config.synth.seed = config.seed;
    if let Some(r) = a.noise_rate {
        config.synth.noise_rate = r;
    }
    if a.no_cues {
        config.synth.cues = false;
    }
    let data = synth::generate(&config.synth)?;
    let dir = run_dir(&a.out, "synth")?;
    echo(&dir, &config, a)?;
    synth::write_dataset(&dir, &config.synth, &data)?;
    eprintln!(
        "{} entities, {} relations; train noise fraction {:.3}",
        data.kb.kb.len(),
        data.kb.kb.triples().len(),
        data.train.noise_fraction()
    );
    finish(&dir);
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut config = base_config(&a.common)?;
    apply_data_flags(&mut config, &a.common, a.cap, a.n_neg);
    let kb = load_kb(&a.kb)?;
    let corpus = load_corpus(&a.corpus)?;
    let points = dataset(&kb, &corpus, config.data.cap, config.data.n_neg, a.mode.into(), config.seed)?;
    let dir = run_dir(&a.out, "data")?;
    echo(&dir, &config, a)?;
    let mut w = create(&dir.join("points.jsonl"))?;
    write_datapoints(&mut w, &points)?;
    w.flush()?;

    #[derive(Serialize)]
    struct RecallReport {
        points: usize,
        empty_positive: usize,
        mean_positive: f64,
        noisy_fraction: Option<f64>,
        oracle_recall: Vec<(usize, f64)>,
    }
    let with_gold = points.iter().all(|p| p.mention.gold.is_some());
    let mut oracle = Vec::new();
    if with_gold && !points.is_empty() {
        // recall against the full candidate list, truncated at each cap
        let full = dataset(&kb, &corpus, usize::MAX, 0, a.mode.into(), config.seed)?;
        for cap in [1, 10, 50, 100] {
            oracle.push((cap, oracle_recall(&full, cap)?));
        }
    }
    let labels: Vec<bool> = points.iter().filter_map(|p| p.noise_label).collect();
    let report = RecallReport {
        points: points.len(),
        empty_positive: points.iter().filter(|p| p.positive.is_empty()).count(),
        mean_positive: points.iter().map(|p| p.positive.len()).sum::<usize>() as f64 / points.len().max(1) as f64,
        noisy_fraction: (!labels.is_empty()).then(|| labels.iter().filter(|&&n| n).count() as f64 / labels.len() as f64),
        oracle_recall: oracle,
    };
    write_json(&dir.join("recall.json"), &report)?;
    let mut w = create(&dir.join("recall.tsv"))?;
    writeln!(w, "cap\toracle_recall")?;
    for (cap, r) in &report.oracle_recall {
        writeln!(w, "{cap}\t{r:.6}")?;
    }
    w.flush()?;
    eprintln!("{} points, mean |E+| {:.2}", report.points, report.mean_positive);
    finish(&dir);
    Ok(())
}

fn read_vectors(path: &Path, words: &[String]) -> Result<(usize, HashMap<String, Vec<f64>>)> {
    let wanted: HashSet<String> = words.iter().flat_map(|w| [w.clone(), w.to_lowercase()]).collect();
    read_word_vectors(open(path)?, &wanted).with_context(|| format!("cannot read word vectors {}", path.display()))
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut config = base_config(&a.common)?;
    apply_data_flags(&mut config, &a.common, a.cap, a.n_neg);
    apply_model_flags(&mut config, &a.model);
    let kb = load_kb(&a.kb)?;
    let corpus = load_corpus(&a.corpus)?;
    let dev_corpus = load_corpus(&a.dev)?;
    let mode: TrainMode = a.mode.into();

    let tokens = corpus_tokens([&corpus[..], &dev_corpus[..]]);
    let words = ElModel::word_vocab(tokens.clone());
    let vectors = match &a.vectors {
        Some(path) => {
            let (dim, vectors) = read_vectors(path, &tokens)?;
            if dim == 0 {
                bail!("word vectors file {} is empty", path.display());
            }
            config.model.word_dim = dim;
            Some(vectors)
        }
        None => None,
    };
    let types = ElModel::type_vocab(kb_types(&kb));
    let mut model = ElModel::new(config.model.clone(), words, vectors.as_ref(), types, config.seed)?;

    let points = match &a.points {
        Some(p) => load_points(p)?,
        None => dataset(&kb, &corpus, config.data.cap, config.data.n_neg, DatasetMode::Train, config.seed)?,
    };
    let dev_points = dataset(&kb, &dev_corpus, config.data.cap, 0, DatasetMode::Test, config.seed)?;
    let train_set = model.prepare(&kb, &corpus, &points)?;
    let dev_set = model.prepare(&kb, &dev_corpus, &dev_points)?;

    let dir = run_dir(&a.out, mode.as_str())?;
    echo(&dir, &config, a)?;
    let mut log = create(&dir.join("train_log.jsonl"))?;
    let mut io_error = None;
    let options = TrainOptions { mode, seed: config.seed, resample_negatives: None };
    let state = train(&mut model, &kb, &train_set, &dev_set, &options, |entry| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  dev P {:.4} R {:.4} F1 {:.4}{}",
            entry.epoch,
            entry.train_loss,
            entry.dev_precision,
            entry.dev_recall,
            entry.dev_f1,
            entry.mean_noise.map(|m| format!("  mean p_N {m:.4}")).unwrap_or_default()
        );
        let written = serde_json::to_writer(&mut log, entry).map_err(anyhow::Error::from).and_then(|_| Ok(log.write_all(b"\n")?));
        if let Err(e) = written {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.context("cannot write training log"));
    }
    log.flush()?;
    write_json(&dir.join("state.json"), &state)?;
    model.save(&dir.join(MODEL_DIR))?;
    eprintln!("best dev F1 {:.4} at epoch {}", state.best_dev_f1, state.best_epoch);
    finish(&dir);
    Ok(())
}

/// Test-mode instances for a corpus; every mention needs a gold entity when
/// `need_gold` is set.
fn test_instances(model: &ElModel, kb: &KnowledgeBase, corpus: &[Sentence], cap: usize, seed: u64) -> Result<(Vec<DataPoint>, Vec<Instance>)> {
    let points = dataset(kb, corpus, cap, 0, DatasetMode::Test, seed)?;
    let instances = model.prepare(kb, corpus, &points)?;
    Ok((points, instances))
}

fn predictions_for(a_model: Option<&Path>, kb: &KnowledgeBase, corpus: &[Sentence], cap: usize, seed: u64) -> Result<Scored> {
    match a_model {
        Some(path) => {
            let model = load_model(path)?;
            let (_, instances) = test_instances(&model, kb, corpus, cap, seed)?;
            let types = model.entity_types(kb);
            let scores = score_points(&model, kb, &types, &instances)?;
            let golds = if instances.iter().all(|i| i.gold.is_some()) { Some(gold_records(kb, &instances)?) } else { None };
            Ok(Scored::Model { scores, golds })
        }
        None => {
            let points = dataset(kb, corpus, cap, 0, DatasetMode::Test, seed)?;
            let by_id: HashMap<&str, &Sentence> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
            let preds = points.iter().map(|p| name_matching(kb, by_id[p.mention.sentence_id.as_str()], p)).collect();
            let golds = if points.iter().all(|p| p.mention.gold.is_some()) {
                Some(
                    points
                        .iter()
                        .map(|p| GoldRecord {
                            point_id: p.point_id(),
                            gold: p.mention.gold.clone().expect("checked"),
                            gold_in_positive: p.gold_in_positive().unwrap_or(false),
                            ne_type: p.mention.ne_type,
                        })
                        .collect(),
                )
            } else {
                None
            };
            Ok(Scored::Baseline { preds, golds })
        }
    }
}

enum Scored {
    Model { scores: Vec<PointScores>, golds: Option<Vec<GoldRecord>> },
    Baseline { preds: Vec<Prediction>, golds: Option<Vec<GoldRecord>> },
}

impl Scored {
    fn decide(&self, tau: Option<f64>) -> Vec<Prediction> {
        match self {
            Scored::Model { scores, .. } => scores.iter().map(|s| s.decide(tau)).collect(),
            Scored::Baseline { preds, .. } => preds.clone(),
        }
    }

    fn golds(&self) -> Option<&[GoldRecord]> {
        match self {
            Scored::Model { golds, .. } | Scored::Baseline { golds, .. } => golds.as_deref(),
        }
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut config = base_config(&a.common)?;
    apply_data_flags(&mut config, &a.common, a.cap, None);
    if a.model.is_none() && !a.name_matching {
        bail!("either --model or --name-matching is required");
    }
    let kb = load_kb(&a.kb)?;
    let corpus = load_corpus(&a.corpus)?;
    let scored = predictions_for(a.model.as_deref(), &kb, &corpus, config.data.cap, config.seed)?;
    let Some(golds) = scored.golds() else { bail!("{} has mentions without a gold entity", a.corpus.display()) };
    let settings: Vec<Setting> = match a.setting {
        Some(s) => vec![s.into()],
        None => vec![Setting::All, Setting::InEPlus],
    };
    let dir = run_dir(&a.out, "eval")?;
    echo(&dir, &config, a)?;
    let preds = scored.decide(a.tau);
    let system = match (&a.model, a.tau) {
        (None, _) => "name-matching".to_string(),
        (Some(_), Some(t)) => format!("model tau={t}"),
        (Some(_), None) => "model".to_string(),
    };
    let mut rows = Vec::new();
    let mut per_type = create(&dir.join("per_type.tsv"))?;
    writeln!(per_type, "setting\tne_type\terror")?;
    for &setting in &settings {
        let report = evaluate(&preds, golds, setting);
        write_json(&dir.join(format!("report-{}.json", setting.as_str())), &report)?;
        for (t, e) in &report.per_type_error {
            writeln!(per_type, "{}\t{}\t{e:.6}", setting.as_str(), t.as_str())?;
        }
        rows.push((system.clone(), report));
    }
    per_type.flush()?;

    if let Scored::Model { .. } = scored {
        let mut curve = create(&dir.join("tau_curve.tsv"))?;
        writeln!(curve, "setting\ttau\tprecision\trecall\tf1\temitted")?;
        let mut grid = default_tau_grid();
        grid.push(1.0);
        for &setting in &settings {
            for &tau in &grid {
                let r = evaluate(&scored.decide(Some(tau)), golds, setting);
                writeln!(curve, "{}\t{tau:.1}\t{:.6}\t{:.6}\t{:.6}\t{}", setting.as_str(), r.precision, r.recall, r.f1, r.n_emitted)?;
            }
        }
        curve.flush()?;
    }
    let mut pw = create(&dir.join("predictions.jsonl"))?;
    for p in &preds {
        serde_json::to_writer(&mut pw, p)?;
        pw.write_all(b"\n")?;
    }
    pw.flush()?;
    eprint!("{}", format_table(&rows));
    finish(&dir);
    Ok(())
}

pub fn link_cmd(a: &LinkArgs) -> Result<()> {
    let mut config = base_config(&a.common)?;
    apply_data_flags(&mut config, &a.common, a.cap, None);
    let kb = load_kb(&a.kb)?;
    let corpus = load_corpus(&a.corpus)?;
    let model = load_model(&a.model)?;
    let (_, instances) = test_instances(&model, &kb, &corpus, config.data.cap, config.seed)?;
    let types = model.entity_types(&kb);
    let dir = run_dir(&a.out, "link")?;
    echo(&dir, &config, a)?;
    let mut w = create(&dir.join("predictions.jsonl"))?;
    let mut abstained = 0;
    for inst in &instances {
        let pred = match a.tau {
            Some(t) => link_with_abstain(&model, &kb, &types, inst, t)?,
            None => link(&model, &kb, &types, inst)?,
        };
        if pred.predicted.is_none() {
            abstained += 1;
        }
        serde_json::to_writer(&mut w, &pred)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    eprintln!("{} mentions, {} without a prediction", instances.len(), abstained);
    finish(&dir);
    Ok(())
}

pub fn noise_report(a: &NoiseReportArgs) -> Result<()> {
    let mut config = base_config(&a.common)?;
    apply_data_flags(&mut config, &a.common, a.cap, None);
    let kb = load_kb(&a.kb)?;
    let corpus = load_corpus(&a.corpus)?;
    let model = load_model(&a.model)?;
    let tau = a.tau.unwrap_or(model.config.tau);
    let points = match &a.points {
        Some(p) => load_points(p)?,
        None => dataset(&kb, &corpus, config.data.cap, 0, DatasetMode::Train, config.seed)?,
    };
    let instances = model.prepare(&kb, &corpus, &points)?;
    let types = model.entity_types(&kb);
    let scores = score_points(&model, &kb, &types, &instances)?;
    let labels = match &a.noise {
        Some(path) => Some(read_noise_labels(open(path)?).with_context(|| format!("cannot read {}", path.display()))?),
        None => None,
    };
    let label_of = |inst: &Instance| -> Option<bool> {
        match &labels {
            Some(map) => map.get(&inst.point_id).copied(),
            None => inst.noise_label,
        }
    };
    let scored: Vec<(f64, Option<bool>)> =
        scores.iter().zip(&instances).filter_map(|(s, i)| s.p_noise.map(|p| (p, label_of(i)))).collect();
    if scored.is_empty() {
        bail!("no data point has a non-empty E+");
    }
    let dir = run_dir(&a.out, "noise")?;
    echo(&dir, &config, a)?;

    let mut w = create(&dir.join("noise_probs.tsv"))?;
    writeln!(w, "point_id\tp_noise\tnoisy")?;
    for (s, i) in scores.iter().zip(&instances) {
        if let Some(p) = s.p_noise {
            let label = label_of(i).map_or("NA".to_string(), |l| l.to_string());
            writeln!(w, "{}\t{p:.6}\t{label}", i.point_id)?;
        }
    }
    w.flush()?;

    let above: Vec<&(f64, Option<bool>)> = scored.iter().filter(|(p, _)| *p > tau).collect();
    let labelled: Vec<(f64, bool)> = scored.iter().filter_map(|&(p, l)| l.map(|noisy| (p, !noisy))).collect();
    let mut curve = Vec::new();
    if labelled.len() == scored.len() {
        curve = nd_accuracy_curve(&labelled, &default_tau_grid());
        let mut w = create(&dir.join("nd_curve.tsv"))?;
        writeln!(w, "tau\taccuracy")?;
        for (t, acc) in &curve {
            writeln!(w, "{t:.1}\t{}", acc.map_or("NA".to_string(), |v| format!("{v:.6}")))?;
        }
        w.flush()?;
    } else {
        log::warn!("noise labels missing for some points; skipping the accuracy curve");
    }
    #[derive(Serialize)]
    struct NoiseSummary {
        points: usize,
        tau: f64,
        above_tau: usize,
        fraction_above_tau: f64,
        mean_p_noise: f64,
        noisy_among_above_tau: Option<f64>,
        accuracy_curve: Vec<(f64, Option<f64>)>,
    }
    let noisy_above: Vec<bool> = above.iter().filter_map(|(_, l)| *l).collect();
    let summary = NoiseSummary {
        points: scored.len(),
        tau,
        above_tau: above.len(),
        fraction_above_tau: above.len() as f64 / scored.len() as f64,
        mean_p_noise: scored.iter().map(|(p, _)| p).sum::<f64>() / scored.len() as f64,
        noisy_among_above_tau: (!noisy_above.is_empty() && noisy_above.len() == above.len())
            .then(|| noisy_above.iter().filter(|&&n| n).count() as f64 / noisy_above.len() as f64),
        accuracy_curve: curve,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    eprintln!(
        "{} points, {:.1}% above tau = {tau}{}",
        summary.points,
        100.0 * summary.fraction_above_tau,
        summary.noisy_among_above_tau.map(|v| format!(", {:.1}% of them noisy", 100.0 * v)).unwrap_or_default()
    );
    finish(&dir);
    Ok(())
}

/// Returns whether every check stayed below the threshold.
pub fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let preset = a.common.preset.or(Some(Preset::Tiny));
    let mut config = RunConfig::load(a.common.config.as_deref(), preset)?;
    if let Some(s) = a.common.seed {
        config.seed = s;
    }
    let check = GradCheckConfig { eps: a.eps, ..Default::default() };
    let mut ok = true;
    for (mode, report) in fixture_gradient_check(config.model.clone(), config.seed, &check)? {
        let loss = if mode == TrainMode::Mil { "L1" } else { "L2" };
        let pass = report.max_relative_error < a.threshold;
        ok &= pass;
        println!(
            "{loss}: max relative error {:.3e} over {} coordinates ({} skipped at kinks){}",
            report.max_relative_error,
            report.checked,
            report.skipped_nondifferentiable,
            if pass { String::new() } else { format!(" exceeds {:e} at {:?}", a.threshold, report.worst) }
        );
    }
    Ok(ok)
}
