use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use gridvec_core::client::read_endpoints;
use gridvec_core::corpus::{preprocess_reader, VocabularyBuilder};
use gridvec_core::eval::{
    agreement_report, analogy_accuracy, parse_analogies, sample_pairs, spearman, top_k,
    EmbeddingSet, Query, SimilarityJudgments,
};
use gridvec_core::shard::{ServerConfig, ShardServer};
use gridvec_core::store::write_text_vectors;
use gridvec_core::transport::{
    approximate_ratio, exact_ratio, measured_vs_predicted, predicted_conventional_bytes,
    predicted_proposed_bytes, simulated_conventional_bytes, BandwidthMeter, BandwidthModel,
};
use gridvec_core::{
    IndexedCorpus, NoiseTable, Shard, ShardLayout, ShardSet, TrainConfig, Vocabulary,
};
use log::{info, warn};

use crate::manifest::{save_atomic, write_atomic, RunManifest, ShardColumns};
use crate::settings::{pick, pick_opt, ConfigFile};
use crate::{BandwidthArgs, EvalArgs, ExportArgs, PreprocessArgs, TrainArgs, VocabArgs};

const TRAIN_KEYS: &[&str] = &[
    "mode",
    "vocab",
    "corpus",
    "output",
    "manifest",
    "dim",
    "shards",
    "window",
    "negatives",
    "batch-size",
    "epochs",
    "alpha",
    "alpha-min",
    "min-count",
    "max-vocab",
    "subsample",
    "seed",
    "threads",
    "dynamic-window",
    "interleaved",
    "timeout-ms",
    "endpoints-file",
    "listen",
    "shard-id",
    "workers",
];

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let config = match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    for key in config.unknown_keys(TRAIN_KEYS) {
        warn!("ignoring unknown config key {key:?}");
    }
    Ok(config)
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| anyhow!("missing --{flag} (flag or config key)"))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

pub fn vocab(args: &VocabArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let corpus = required(pick_opt(args.corpus.clone(), &config, "corpus")?, "corpus")?;
    let output = required(pick_opt(args.output.clone(), &config, "output")?, "output")?;
    let min_count = pick(
        args.min_count,
        &config,
        "min-count",
        TrainConfig::default().min_count,
    )?;
    let max_vocab = pick_opt(args.max_vocab, &config, "max-vocab")?;

    let mut builder = VocabularyBuilder::new();
    let file = File::open(&corpus).with_context(|| format!("opening {}", corpus.display()))?;
    builder.add_reader(BufReader::new(file))?;
    let vocab = builder.build(min_count, max_vocab)?;
    save_atomic(&output, |p| vocab.save(p).map_err(Into::into))?;
    info!(
        "{} words with count >= {min_count} ({} tokens) -> {}",
        vocab.len(),
        vocab.total_count(),
        output.display()
    );
    Ok(())
}

pub fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let vocab_path = required(pick_opt(args.vocab.clone(), &config, "vocab")?, "vocab")?;
    let corpus = required(pick_opt(args.corpus.clone(), &config, "corpus")?, "corpus")?;
    let output = required(pick_opt(args.output.clone(), &config, "output")?, "output")?;
    let vocab = load_vocab(&vocab_path)?;
    let file = File::open(&corpus).with_context(|| format!("opening {}", corpus.display()))?;
    let (indexed, stats) = preprocess_reader(BufReader::new(file), &vocab)?;
    save_atomic(&output, |p| indexed.save(p).map_err(Into::into))?;
    info!(
        "{} sentences, {} tokens kept, {} out-of-vocabulary tokens dropped, {} sentences dropped -> {}",
        indexed.sentences.len(),
        stats.retained_tokens,
        stats.dropped_tokens,
        stats.dropped_sentences,
        output.display()
    );
    Ok(())
}

/// Everything `train` resolved from flags, replay manifest, config file and
/// defaults.
struct TrainPlan {
    mode: String,
    config: TrainConfig,
    vocab: Option<PathBuf>,
    corpus: Option<PathBuf>,
    output: Option<PathBuf>,
    manifest: Option<PathBuf>,
    endpoints_file: Option<PathBuf>,
    listen: String,
    shard_id: Option<usize>,
    workers: usize,
}

fn plan(args: &TrainArgs) -> Result<TrainPlan> {
    let mut c = load_config(args.config.as_deref())?;
    if let Some(path) = &args.replay {
        // The replayed run sits between the flags and the config file.
        let m = RunManifest::load(path)?;
        let mc = &m.config;
        c.insert("vocab", m.vocab.display());
        c.insert("corpus", m.corpus.display());
        for (k, v) in [
            ("dim", mc.dim.to_string()),
            ("shards", mc.shards.to_string()),
            ("window", mc.window.to_string()),
            ("negatives", mc.negatives.to_string()),
            ("batch-size", mc.batch_size.to_string()),
            ("epochs", mc.epochs.to_string()),
            ("alpha", mc.alpha.to_string()),
            ("alpha-min", mc.alpha_min().to_string()),
            ("subsample", mc.subsample.to_string()),
            ("min-count", mc.min_count.to_string()),
            ("seed", mc.seed.to_string()),
            ("threads", mc.threads.to_string()),
            ("interleaved", mc.interleaved.to_string()),
            ("dynamic-window", mc.dynamic_window.to_string()),
            ("timeout-ms", mc.timeout_ms.to_string()),
        ] {
            c.insert(k, v);
        }
        if m.mode != "local-sim" {
            c.insert("mode", &m.mode);
        }
    }
    let d = TrainConfig::default();
    let config = TrainConfig {
        dim: pick(args.dim, &c, "dim", d.dim)?,
        shards: pick(args.shards, &c, "shards", d.shards)?,
        window: pick(args.window, &c, "window", d.window)?,
        negatives: pick(args.negatives, &c, "negatives", d.negatives)?,
        batch_size: pick(args.batch_size, &c, "batch-size", d.batch_size)?,
        epochs: pick(args.epochs, &c, "epochs", d.epochs)?,
        alpha: pick(args.alpha, &c, "alpha", d.alpha)?,
        alpha_min: pick_opt(args.alpha_min, &c, "alpha-min")?,
        subsample: pick(args.subsample, &c, "subsample", d.subsample)?,
        min_count: pick(args.min_count, &c, "min-count", d.min_count)?,
        seed: pick(args.seed, &c, "seed", d.seed)?,
        interleaved: pick(args.interleaved, &c, "interleaved", d.interleaved)?,
        dynamic_window: pick(args.dynamic_window, &c, "dynamic-window", d.dynamic_window)?,
        threads: pick(args.threads, &c, "threads", d.threads)?,
        timeout_ms: pick(args.timeout_ms, &c, "timeout-ms", d.timeout_ms)?,
    };
    config.validate()?;
    let output: Option<PathBuf> = pick_opt(args.output.clone(), &c, "output")?;
    let manifest = pick_opt(args.manifest.clone(), &c, "manifest")?.or_else(|| {
        output.as_ref().map(|o| {
            let mut name = o.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            o.with_file_name(name)
        })
    });
    Ok(TrainPlan {
        mode: pick(args.mode.clone(), &c, "mode", "local-sim".to_string())?,
        config,
        vocab: pick_opt(args.vocab.clone(), &c, "vocab")?,
        corpus: pick_opt(args.corpus.clone(), &c, "corpus")?,
        output,
        manifest,
        endpoints_file: pick_opt(args.endpoints_file.clone(), &c, "endpoints-file")?,
        listen: pick(args.listen.clone(), &c, "listen", "127.0.0.1:0".to_string())?,
        shard_id: pick_opt(args.shard_id, &c, "shard-id")?,
        workers: pick(args.workers, &c, "workers", 0)?,
    })
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let plan = plan(args)?;
    match plan.mode.as_str() {
        "local-sim" => run_training(&plan, None, args.shutdown_shards),
        "client" => {
            let endpoints_file = required(plan.endpoints_file.clone(), "endpoints-file")?;
            let endpoints = read_endpoints(&endpoints_file)
                .with_context(|| format!("reading endpoints {}", endpoints_file.display()))?;
            run_training(&plan, Some(endpoints), args.shutdown_shards)
        }
        "shard" => serve_shard(&plan),
        other => bail!("unknown --mode {other:?}; expected local-sim, shard or client"),
    }
}

fn serve_shard(plan: &TrainPlan) -> Result<()> {
    let vocab = load_vocab(&required(plan.vocab.clone(), "vocab")?)?;
    let shard_id = plan
        .shard_id
        .ok_or_else(|| anyhow!("shard mode needs --shard-id"))?;
    let layout = ShardLayout::new(plan.config.dim, plan.config.shards)?;
    if shard_id >= layout.num_shards() {
        bail!(
            "--shard-id {shard_id} out of range for {} shards",
            layout.num_shards()
        );
    }
    let noise = Arc::new(NoiseTable::from_vocabulary(&vocab));
    let shard = Arc::new(Shard::init(shard_id, &layout, noise, plan.config.seed)?);
    let handle = ShardServer::bind(
        shard,
        &ServerConfig {
            listen: plan.listen.clone(),
            workers: plan.workers,
        },
    )?;
    let cols = layout.range(shard_id);
    info!(
        "shard {shard_id}/{} columns {}..{} of {}, {} words",
        layout.num_shards(),
        cols.start,
        cols.end,
        layout.dim(),
        vocab.len()
    );
    // Launch scripts read this line to learn the bound port.
    println!("listening {}", handle.local_addr());
    std::io::stdout().flush()?;
    handle.wait();
    info!("shard {shard_id} stopped");
    Ok(())
}

fn local_shards(vocab: &Vocabulary, config: &TrainConfig) -> Result<Vec<Arc<Shard>>> {
    let layout = ShardLayout::new(config.dim, config.shards)?;
    let noise = Arc::new(NoiseTable::from_vocabulary(vocab));
    (0..config.shards)
        .map(|s| {
            Ok(Arc::new(Shard::init(
                s,
                &layout,
                Arc::clone(&noise),
                config.seed,
            )?))
        })
        .collect()
}

fn write_vectors(path: &Path, vocab: &Vocabulary, dim: usize, input: &[f32]) -> Result<()> {
    write_atomic(path, |f| {
        let mut out = BufWriter::new(f);
        write_text_vectors(vocab, dim, input, &mut out)?;
        out.flush()?;
        Ok(())
    })
}

fn run_training(plan: &TrainPlan, endpoints: Option<Vec<String>>, shutdown: bool) -> Result<()> {
    let vocab_path = required(plan.vocab.clone(), "vocab")?;
    let corpus_path = required(plan.corpus.clone(), "corpus")?;
    let vocab = load_vocab(&vocab_path)?;
    let corpus = IndexedCorpus::load(&corpus_path).with_context(|| {
        format!(
            "loading indexed corpus {} (run `gridvec preprocess` first)",
            corpus_path.display()
        )
    })?;
    let config = &plan.config;
    let meter = Arc::new(BandwidthMeter::new());
    let set = match &endpoints {
        None => ShardSet::local(&local_shards(&vocab, config)?, Arc::clone(&meter))?,
        Some(eps) => ShardSet::connect(eps, config.timeout(), Arc::clone(&meter))?,
    };
    if set.num_shards() != config.shards || set.dim() != config.dim {
        bail!(
            "shards serve {} shards of dimension {}, configuration asks for {} of {}",
            set.num_shards(),
            set.dim(),
            config.shards,
            config.dim
        );
    }
    info!(
        "training: {} tokens, {} words, d={}, S={}, {} thread(s), {} epoch(s)",
        corpus.total_tokens,
        vocab.len(),
        config.dim,
        config.shards,
        config.threads,
        config.epochs
    );
    let result = gridvec_core::train(&corpus, &vocab, config, &set);
    let stats = match result {
        Ok(s) => s,
        Err(e) => {
            if shutdown {
                set.shutdown_all();
            }
            return Err(e.into());
        }
    };
    let traffic = meter.snapshot();
    info!(
        "{} steps, {} pairs, {:.1} MB sent, {:.1} MB received, {:.1}s",
        stats.steps,
        stats.pairs,
        stats.bytes_sent as f64 / 1e6,
        stats.bytes_received as f64 / 1e6,
        stats.elapsed_secs
    );

    if let Some(out) = &plan.output {
        let store = set.export()?;
        write_vectors(out, &vocab, store.dim, &store.input)?;
        info!("vectors -> {}", out.display());
    }
    if shutdown {
        set.shutdown_all();
    }
    if let Some(path) = &plan.manifest {
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            mode: if endpoints.is_some() {
                "client"
            } else {
                "local-sim"
            }
            .into(),
            config: config.clone(),
            vocab: vocab_path,
            corpus: corpus_path,
            output: plan.output.clone(),
            endpoints: endpoints.unwrap_or_default(),
            layout: set
                .infos()
                .iter()
                .map(|i| ShardColumns {
                    shard_id: i.shard_id as usize,
                    lo: i.lo as usize,
                    hi: i.hi as usize,
                })
                .collect(),
            vocab_size: vocab.len(),
            corpus_tokens: corpus.total_tokens,
            stats,
            traffic,
        };
        manifest.save(path)?;
        info!("manifest -> {}", path.display());
    }
    Ok(())
}

pub fn export(args: &ExportArgs) -> Result<()> {
    let c = load_config(args.config.as_deref())?;
    let vocab = load_vocab(&required(
        pick_opt(args.vocab.clone(), &c, "vocab")?,
        "vocab",
    )?)?;
    let endpoints_file = required(
        pick_opt(args.endpoints_file.clone(), &c, "endpoints-file")?,
        "endpoints-file",
    )?;
    let output = required(pick_opt(args.output.clone(), &c, "output")?, "output")?;
    let timeout_ms = pick(
        args.timeout_ms,
        &c,
        "timeout-ms",
        TrainConfig::default().timeout_ms,
    )?;
    let endpoints = read_endpoints(&endpoints_file)?;
    let set = ShardSet::connect(
        &endpoints,
        std::time::Duration::from_millis(timeout_ms),
        Arc::new(BandwidthMeter::new()),
    )?;
    if set.vocab_size() != vocab.len() {
        bail!(
            "shards hold {} words, vocabulary has {}",
            set.vocab_size(),
            vocab.len()
        );
    }
    let store = set.export()?;
    write_vectors(&output, &vocab, store.dim, &store.input)?;
    info!(
        "{} vectors of dimension {} -> {}",
        vocab.len(),
        store.dim,
        output.display()
    );
    if args.shutdown_shards {
        set.shutdown_all();
    }
    Ok(())
}

fn read_maybe_lower(path: &Path, lowercase: bool) -> Result<String> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(if lowercase { text.to_lowercase() } else { text })
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let set = EmbeddingSet::load(&args.vectors)
        .with_context(|| format!("loading {}", args.vectors.display()))?;
    let mut report = serde_json::Map::new();
    report.insert("vectors".into(), set.len().into());
    report.insert("dim".into(), set.dim().into());
    if let Some(path) = &args.wordsim {
        let judgments = SimilarityJudgments::parse(&read_maybe_lower(path, args.lowercase)?)?;
        report.insert(
            "wordsim".into(),
            serde_json::to_value(spearman(&set, &judgments)?)?,
        );
    }
    if let Some(path) = &args.analogies {
        let questions = parse_analogies(&read_maybe_lower(path, args.lowercase)?)?;
        report.insert(
            "analogies".into(),
            serde_json::to_value(analogy_accuracy(&set, &questions))?,
        );
    }
    if !args.neighbors.is_empty() {
        let mut map = serde_json::Map::new();
        for word in &args.neighbors {
            let hits = top_k(&set, Query::Token(word), args.k, None)?;
            map.insert(word.clone(), serde_json::to_value(hits)?);
        }
        report.insert("neighbors".into(), map.into());
    }
    if let Some(path) = &args.compare {
        let other =
            EmbeddingSet::load(path).with_context(|| format!("loading {}", path.display()))?;
        let pairs = sample_pairs(&set, &other, args.pairs, args.seed);
        report.insert(
            "agreement".into(),
            serde_json::to_value(agreement_report(&set, &other, &pairs))?,
        );
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn need(value: Option<f64>, flag: &str) -> Result<f64> {
    value.ok_or_else(|| anyhow!("this report needs -{flag}"))
}

pub fn bandwidth(args: &BandwidthArgs) -> Result<()> {
    let mut printed = false;
    if args.conventional {
        let r = predicted_conventional_bytes(
            need(args.contexts, "w")?,
            need(args.negatives, "n")?,
            need(args.dim, "d")?,
        )?;
        println!("{r}");
        printed = true;
    }
    if args.proposed {
        let r = predicted_proposed_bytes(
            need(args.contexts, "w")?,
            need(args.negatives, "n")?,
            need(args.shards, "S")?,
        )?;
        println!("{r}");
        printed = true;
    }
    if args.ratio {
        let (s, d) = (need(args.shards, "S")?, need(args.dim, "d")?);
        let approx = approximate_ratio(s, d)?;
        match (args.contexts, args.negatives) {
            (Some(w), Some(n)) => println!("{} (first-order {approx})", exact_ratio(w, n, s, d)?),
            _ => println!("{approx}"),
        }
        printed = true;
    }
    if let Some(path) = &args.manifest {
        let m = RunManifest::load(path)?;
        let model = BandwidthModel {
            max_contexts: 2.0 * m.config.window as f64,
            negatives: m.config.negatives as f64,
            shards: m.config.shards as f64,
            dim: m.config.dim as f64,
        };
        let report = measured_vs_predicted(&m.traffic, &model)?;
        let t = &m.traffic;
        let conventional = simulated_conventional_bytes(
            t.minibatch_words,
            t.pairs,
            t.negative_samples,
            m.config.dim as u64,
        );
        let mut value = serde_json::to_value(&report)?;
        if let Some(obj) = value.as_object_mut() {
            obj.insert("measured_total_bytes".into(), t.total_bytes().into());
            obj.insert("simulated_conventional_bytes".into(), conventional.into());
            obj.insert(
                "conventional_over_measured".into(),
                (conventional as f64 / t.total_bytes().max(1) as f64).into(),
            );
        }
        println!("{}", serde_json::to_string_pretty(&value)?);
        printed = true;
    }
    if !printed {
        bail!("choose at least one of --conventional, --proposed, --ratio or --manifest");
    }
    Ok(())
}
