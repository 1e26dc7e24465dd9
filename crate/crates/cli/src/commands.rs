use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use scan_core::attention::{score_pair, Direction, Pooling, ScanConfig, Scorer, SumMaxConfig};
use scan_core::checkpoint::{Checkpoint, CheckpointMeta};
use scan_core::dataio::{
    generate_synthetic, load_corpus, load_vocab, read_features, save_corpus, save_vocab, split, write_atomic,
    Dataset, SplitCounts, SyntheticSpec, Vocab,
};
use scan_core::encoders::{project_regions, ImageFeatures, ModelDims, ModelParams, SentenceEncoder, WordSequence};
use scan_core::eval::{ensemble_grids, fold_average, format_table, score_dataset, EvalReport};
use scan_core::learning::{LossMode, LrSchedule};
use scan_core::presets::{preset, Preset};
use scan_core::{Result, ScanError};

use crate::config::{parse_opt, RunConfig};
use crate::{Common, ScorerFlags};

const DEFAULT_SEED: u64 = 7;
const DEFAULT_PRESET: &str = "toy";

/// Settings every command resolves first.
struct Env {
    cfg: RunConfig,
    seed: u64,
    parallel: bool,
}

fn setup(common: &Common) -> Result<Env> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let threads = common.threads.or(cfg.threads).unwrap_or(1);
    if threads == 0 {
        return Err(ScanError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| ScanError::Config(format!("thread pool: {e}")))?;
    Ok(Env {
        cfg,
        seed,
        parallel: threads > 1,
    })
}

/// Prefixes I/O errors with the path that caused them.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        ScanError::Io(io) => ScanError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| ScanError::Config(format!("--{flag} is required (flag or config key)")))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn scorer_direction(s: &Scorer) -> Direction {
    match s {
        Scorer::Scan(c) => c.direction,
        Scorer::SumMax(c) => c.direction,
    }
}

/// Applies flag and config overrides on top of a base scorer.
fn override_scorer(base: Scorer, flags: &ScorerFlags, cfg: &RunConfig) -> Result<Scorer> {
    let direction = parse_opt::<Direction>(flags.direction.as_deref().or(cfg.direction.as_deref()))?
        .unwrap_or(scorer_direction(&base));
    let max_regions = flags.max_regions.or(cfg.max_regions);
    let sum_max = flags.sum_max || cfg.sum_max.unwrap_or(matches!(base, Scorer::SumMax(_)));
    let scorer = if sum_max {
        let similarity = match base {
            Scorer::SumMax(c) => c.similarity,
            Scorer::Scan(_) => Default::default(),
        };
        let base_max = match base {
            Scorer::SumMax(c) => c.max_regions,
            Scorer::Scan(c) => c.max_regions,
        };
        Scorer::SumMax(SumMaxConfig {
            direction,
            similarity,
            max_regions: max_regions.or(base_max),
        })
    } else {
        let mut c = match base {
            Scorer::Scan(c) => c,
            Scorer::SumMax(c) => {
                let mut s = ScanConfig::new(c.direction, Pooling::Avg, 4.0, 1.0);
                s.max_regions = c.max_regions;
                s
            }
        };
        c.direction = direction;
        if let Some(p) = parse_opt::<Pooling>(flags.pooling.as_deref().or(cfg.pooling.as_deref()))? {
            c.pooling = p;
        }
        if let Some(l) = flags.lambda1.or(cfg.lambda1) {
            c.lambda1 = l;
        }
        if let Some(l) = flags.lambda2.or(cfg.lambda2) {
            c.lambda2 = l;
        }
        if max_regions.is_some() {
            c.max_regions = max_regions;
        }
        Scorer::Scan(c)
    };
    scorer.validate()?;
    Ok(scorer)
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    /// Regions per image.
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    captions_per_image: Option<usize>,
    /// Standard deviation of the per-coordinate region noise.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    raw_dim: Option<usize>,
    #[arg(long)]
    filler_fraction: Option<f64>,
    /// TRAIN,VAL,TEST image counts. Defaults to one sixth each for val and test.
    #[arg(long)]
    split_counts: Option<String>,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let env = setup(&a.common)?;
    let c = &env.cfg;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        concepts: a.concepts.or(c.concepts).unwrap_or(d.concepts),
        images: a.images.or(c.images).unwrap_or(d.images),
        regions: a.regions.or(c.regions).unwrap_or(d.regions),
        captions_per_image: a.captions_per_image.or(c.captions_per_image).unwrap_or(d.captions_per_image),
        noise: a.noise.or(c.noise).unwrap_or(d.noise),
        raw_dim: a.raw_dim.or(c.raw_dim).unwrap_or(d.raw_dim),
        filler_fraction: a.filler_fraction.or(c.filler_fraction).unwrap_or(d.filler_fraction),
        seed: env.seed,
    };
    spec.validate()?;
    let counts = match a.split_counts.as_deref().or(c.split_counts.as_deref()) {
        Some(s) => s.parse::<SplitCounts>()?,
        None => {
            let held = (spec.images as f64 / 6.0).round() as usize;
            SplitCounts {
                train: spec.images - 2 * held,
                val: held,
                test: held,
            }
        }
    };
    let out = a.out.or(c.out.clone()).unwrap_or_else(|| PathBuf::from("data"));
    let data = generate_synthetic(&spec)?;
    let parts = split(&data.corpus, counts, spec.seed)?;
    fs::create_dir_all(&out)?;
    save_corpus(&out, "train", &parts.train)?;
    save_corpus(&out, "val", &parts.val)?;
    save_corpus(&out, "test", &parts.test)?;
    save_vocab(&out.join("vocab.txt"), &data.vocab)?;
    let truth = json!({
        "spec": spec,
        "split_counts": counts,
        "split_origin": { "train": parts.origin[0], "val": parts.origin[1], "test": parts.origin[2] },
        "region_concepts": data.region_concepts,
    });
    write_atomic(&out.join("synthetic.json"), to_json(&truth).as_bytes())?;
    println!(
        "wrote {}: {} images (train {}, val {}, test {}), {} captions, {} vocabulary tokens",
        out.display(),
        spec.images,
        counts.train,
        counts.val,
        counts.test,
        data.corpus.captions.len(),
        data.vocab.len()
    );
    println!(
        "concepts {}, regions per image {}, feature width {}, noise {:.6}, seed {}",
        spec.concepts, spec.regions, spec.raw_dim, spec.noise, spec.seed
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scorer: ScorerFlags,
    /// Directory written by gen-data (train/val splits and vocab.txt).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSONL training log; defaults to the checkpoint path with a .jsonl extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Zero-based epoch at which the rate is multiplied by the decay factor.
    #[arg(long)]
    decay_epoch: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// hard or all.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// bidirectional or forward.
    #[arg(long)]
    encoder: Option<String>,
    /// Print the resolved configuration and stop.
    #[arg(long)]
    dry_run: bool,
}

fn resolve_training(a: &TrainArgs, c: &RunConfig) -> Result<Preset> {
    let name = a.common.preset.clone().or(c.preset.clone()).unwrap_or_else(|| DEFAULT_PRESET.into());
    let mut p = preset(&name)?;
    p.scorer = override_scorer(p.scorer, &a.scorer, c)?;
    let t = &mut p.train;
    t.epochs = a.epochs.or(c.epochs).unwrap_or(t.epochs);
    t.batch_size = a.batch_size.or(c.batch_size).unwrap_or(t.batch_size);
    t.schedule = LrSchedule {
        initial: a.lr.or(c.lr).unwrap_or(t.schedule.initial),
        decay_epoch: a.decay_epoch.or(c.decay_epoch).unwrap_or(t.schedule.decay_epoch),
        decay_factor: a.decay_factor.or(c.decay_factor).unwrap_or(t.schedule.decay_factor),
    };
    t.clip_norm = a.clip_norm.or(c.clip_norm).unwrap_or(t.clip_norm);
    t.loss.margin = a.margin.or(c.margin).unwrap_or(t.loss.margin);
    if let Some(m) = parse_opt::<LossMode>(a.loss.as_deref().or(c.loss.as_deref()))? {
        t.loss.mode = m;
    }
    t.validate()?;
    let m = &mut p.model;
    m.embed_dim = a.embed_dim.or(c.embed_dim).unwrap_or(m.embed_dim);
    m.hidden_dim = a.hidden_dim.or(c.hidden_dim).unwrap_or(m.hidden_dim);
    if let Some(e) = parse_opt::<SentenceEncoder>(a.encoder.as_deref().or(c.encoder.as_deref()))? {
        m.encoder = e;
    }
    Ok(p)
}

fn load_split(dir: &Path, name: &str, vocab: &Vocab) -> Result<Dataset> {
    let d = Dataset::from_corpus(&at(dir, load_corpus(dir, name))?, vocab)?;
    if d.unknown_tokens > 0 {
        eprintln!("warning: {} tokens in the {name} split are not in the vocabulary and map to <unk>", d.unknown_tokens);
    }
    Ok(d)
}

fn feature_width(d: &Dataset) -> Result<usize> {
    let w = d
        .raw_dim()
        .ok_or_else(|| ScanError::Config("split has no images".into()))?;
    if let Some(m) = d.images.iter().find(|m| m.cols() != w) {
        return Err(ScanError::Dimension(format!("mixed feature widths {w} and {}", m.cols())));
    }
    Ok(w)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let env = setup(&a.common)?;
    let c = &env.cfg;
    let p = resolve_training(&a, c)?;
    let data_dir = a.data.clone().or(c.data.clone()).unwrap_or_else(|| PathBuf::from("data"));
    let out = a.out.clone().or(c.out.clone()).unwrap_or_else(|| PathBuf::from("model.scnp"));
    let log_path = a.log.clone().or(c.log.clone()).unwrap_or_else(|| out.with_extension("jsonl"));
    if a.dry_run {
        println!("{}", to_json(&json!({ "preset": p, "seed": env.seed, "data": data_dir, "out": out, "log": log_path })));
        return Ok(());
    }
    let vocab_path = data_dir.join("vocab.txt");
    let vocab = at(&vocab_path, load_vocab(&vocab_path))?;
    let train_set = load_split(&data_dir, "train", &vocab)?;
    let val_set = load_split(&data_dir, "val", &vocab)?;
    let dims = ModelDims {
        raw_dim: feature_width(&train_set)?,
        embed_dim: p.model.embed_dim,
        hidden_dim: p.model.hidden_dim,
        vocab_size: vocab.len(),
    };
    let init = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(env.seed))?;
    println!(
        "training {} on {} captions / {} images, {} epochs, batch {}, seed {}",
        p.scorer.describe(),
        train_set.captions.len(),
        train_set.images.len(),
        p.train.epochs,
        p.train.batch_size,
        env.seed
    );
    let mut log = at(&log_path, fs::File::create(&log_path).map_err(ScanError::from))?;
    let outcome = scan_core::train::train(
        &train_set,
        Some(&val_set),
        init,
        p.model.encoder,
        &p.scorer,
        &p.train,
        env.seed,
        env.parallel,
        &mut |m, _| {
            writeln!(log, "{}", m.to_json_line())?;
            log.flush()?;
            let mut line = format!("epoch {:>3}  lr {:.6}  loss {:.6}", m.epoch, m.lr, m.train_loss);
            if let Some(v) = &m.val {
                line.push_str(&format!(
                    "  val sentence R@1 {:.6}  image R@1 {:.6}  rsum {:.6}",
                    v.sentence_retrieval.r1, v.image_retrieval.r1, v.rsum
                ));
            }
            if m.skipped_batches > 0 {
                line.push_str(&format!("  ({} batch(es) of one skipped)", m.skipped_batches));
            }
            println!("{line}");
            Ok(())
        },
    )?;
    let meta = CheckpointMeta {
        scorer: p.scorer,
        encoder: p.model.encoder,
        dims,
        vocab,
        epoch: outcome.best_epoch,
        seed: env.seed,
    };
    Checkpoint::new(meta, outcome.best)?.save(&out)?;
    println!(
        "wrote {} (epoch {}) and {}",
        out.display(),
        outcome.best_epoch,
        log_path.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which split to evaluate: train, val or test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Average the score grids of several checkpoints before ranking.
    #[arg(long, num_args = 1..)]
    ensemble: Vec<PathBuf>,
    /// Average recalls over consecutive folds of this many images.
    #[arg(long)]
    folds: Option<usize>,
    /// Also write the machine-readable report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let env = setup(&a.common)?;
    let c = &env.cfg;
    let data_dir = a.data.clone().or(c.data.clone()).unwrap_or_else(|| PathBuf::from("data"));
    let split_name = a.split.clone().or(c.split.clone()).unwrap_or_else(|| "test".into());
    if !["train", "val", "test"].contains(&split_name.as_str()) {
        return Err(ScanError::Config(format!("unknown split '{split_name}'")));
    }
    let paths: Vec<PathBuf> = if !a.ensemble.is_empty() {
        a.ensemble.clone()
    } else if let Some(e) = c.ensemble.clone().filter(|e| !e.is_empty()) {
        e
    } else {
        vec![required(a.checkpoint.clone().or(c.checkpoint.clone()), "checkpoint")?]
    };
    let models = paths.iter().map(|p| at(p, Checkpoint::load(p))).collect::<Result<Vec<_>>>()?;
    if let Some(bad) = models.iter().position(|m| !m.compatible_with(&models[0])) {
        return Err(ScanError::Config(format!(
            "{} and {} use different vocabularies or feature widths",
            paths[0].display(),
            paths[bad].display()
        )));
    }
    let corpus = at(&data_dir, load_corpus(&data_dir, &split_name))?;
    let data = Dataset::from_corpus(&corpus, &models[0].meta.vocab)?;
    if data.unknown_tokens > 0 {
        eprintln!("warning: {} caption tokens map to <unk>", data.unknown_tokens);
    }
    if feature_width(&data)? != models[0].meta.dims.raw_dim {
        return Err(ScanError::Config(format!(
            "features are {} wide but the checkpoint expects {}",
            feature_width(&data)?,
            models[0].meta.dims.raw_dim
        )));
    }
    let grids = models
        .iter()
        .map(|m| score_dataset(&data, &m.params, m.meta.encoder, &m.meta.scorer, env.parallel))
        .collect::<Result<Vec<_>>>()?;
    let folds = a.folds.or(c.folds);
    let report_of = |g| -> Result<(EvalReport, usize)> {
        match folds {
            Some(size) => fold_average(g, size),
            None => Ok((EvalReport::compute(g)?, 1)),
        }
    };
    let mut rows = Vec::new();
    let mut members = Vec::new();
    for ((m, g), p) in models.iter().zip(&grids).zip(&paths) {
        let (r, _) = report_of(g)?;
        rows.push((m.meta.scorer.describe(), r.clone()));
        members.push(json!({ "checkpoint": p, "scorer": m.meta.scorer, "encoder": m.meta.encoder, "report": r }));
    }
    let (report, fold_count) = if grids.len() > 1 {
        let (r, n) = report_of(&ensemble_grids(&grids)?)?;
        rows.push((format!("Ensemble of {}", grids.len()), r.clone()));
        (r, n)
    } else {
        report_of(&grids[0])?
    };
    print!("{}", format_table(&rows));
    if let Some(size) = folds {
        println!("averaged over {fold_count} fold(s) of {size} images");
    }
    let doc = json!({
        "config": {
            "data": data_dir,
            "split": split_name,
            "checkpoints": paths,
            "fold_size": folds,
            "folds": fold_count,
            "images": data.images.len(),
            "captions": data.captions.len(),
        },
        "models": members,
        "report": report,
    });
    if let Some(path) = a.json.clone().or(c.json.clone()) {
        write_atomic(&path, to_json(&doc).as_bytes())?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct PairArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scorer: ScorerFlags,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// SCNF file holding the image.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Index of the image inside the feature file.
    #[arg(long)]
    image: Option<usize>,
    /// Whitespace-tokenized caption text.
    #[arg(long)]
    caption: Option<String>,
}

/// Everything score and attend need about one pair.
struct Pair {
    scorer: Scorer,
    words: Vec<String>,
    tokens: Vec<usize>,
    v: scan_core::Matrix,
    e: scan_core::Matrix,
}

fn load_pair(a: &PairArgs, c: &RunConfig) -> Result<Pair> {
    let ck_path = required(a.checkpoint.clone().or(c.checkpoint.clone()), "checkpoint")?;
    let ck = at(&ck_path, Checkpoint::load(&ck_path))?;
    let base = match a.common.preset.as_deref().or(c.preset.as_deref()) {
        Some(name) => preset(name)?.scorer,
        None => ck.meta.scorer,
    };
    let scorer = override_scorer(base, &a.scorer, c)?;
    let features_path = required(a.features.clone().or(c.features.clone()), "features")?;
    let features = at(&features_path, read_features(&features_path))?;
    let index = a.image.or(c.image).unwrap_or(0);
    let block = features.images.get(index).ok_or_else(|| {
        ScanError::Config(format!("image {index} out of range; file holds {}", features.images.len()))
    })?;
    if block.dim != ck.meta.dims.raw_dim {
        return Err(ScanError::Config(format!(
            "features are {} wide but the checkpoint expects {}",
            block.dim, ck.meta.dims.raw_dim
        )));
    }
    let caption = required(a.caption.clone().or(c.caption.clone()), "caption")?;
    let (tokens, unknown) = ck.meta.vocab.encode(&caption);
    if !unknown.is_empty() {
        eprintln!("warning: unknown tokens map to <unk>: {}", unknown.join(" "));
    }
    let words = caption.split_whitespace().map(str::to_string).collect();
    let v = project_regions(&ImageFeatures::new(block.to_matrix())?, &ck.params)?;
    let e = ck.meta.encoder.encode(&WordSequence::new(tokens.clone())?, &ck.params)?;
    Ok(Pair {
        scorer,
        words,
        tokens,
        v,
        e,
    })
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Print the full attention trace too.
    #[arg(long)]
    trace: bool,
    /// Machine-readable output with full precision.
    #[arg(long)]
    json: bool,
}

fn round6(m: &scan_core::Matrix) -> String {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn score(a: ScoreArgs) -> Result<()> {
    let env = setup(&a.pair.common)?;
    let pair = load_pair(&a.pair, &env.cfg)?;
    let trace_wanted = a.trace || env.cfg.trace.unwrap_or(false);
    let trace = match (&pair.scorer, trace_wanted) {
        (Scorer::Scan(cfg), true) => Some(score_pair(&pair.v, &pair.e, cfg)?),
        (Scorer::SumMax(_), true) => {
            return Err(ScanError::Config("the Sum-Max baseline has no attention trace".into()))
        }
        _ => None,
    };
    let score = pair.scorer.score(&pair.v, &pair.e)?;
    if a.json {
        let doc = json!({
            "scorer": pair.scorer,
            "words": pair.words,
            "tokens": pair.tokens,
            "score": score,
            "trace": trace,
        });
        println!("{}", to_json(&doc));
        return Ok(());
    }
    println!("score {score:.6}");
    if let Some(t) = trace {
        println!("similarity (regions x words)\n{}", round6(&t.sim));
        println!("normalized similarity\n{}", round6(&t.sim_normalized));
        println!("attention weights\n{}", round6(&t.weights));
        let rel: Vec<String> = t.relevance.iter().map(|r| format!("{r:.6}")).collect();
        println!("relevance {}", rel.join(" "));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AttendArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Where to write the trace document (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn attend(a: AttendArgs) -> Result<()> {
    let env = setup(&a.pair.common)?;
    let out = required(a.out.clone().or(env.cfg.out.clone()), "out")?;
    let pair = load_pair(&a.pair, &env.cfg)?;
    let Scorer::Scan(cfg) = pair.scorer else {
        return Err(ScanError::Config("the Sum-Max baseline has no attention to export".into()));
    };
    let t = score_pair(&pair.v, &pair.e, &cfg)?;
    let w = &t.weights;
    let (anchors, argmax_key, argmax_vals): (&str, &str, Vec<usize>) = match cfg.direction {
        Direction::TextImage => ("words", "argmax_region_per_word", (0..w.cols()).map(|j| argmax(&w.col(j))).collect()),
        Direction::ImageText => ("regions", "argmax_word_per_region", (0..w.rows()).map(|i| argmax(w.row(i))).collect()),
    };
    let doc = json!({
        "scorer": pair.scorer,
        "direction": cfg.direction,
        "words": pair.words,
        "tokens": pair.tokens,
        "region_count": w.rows(),
        "weights": w.to_rows(),
        "softmax_over": if cfg.direction == Direction::TextImage { "regions" } else { "words" },
        "relevance_anchors": anchors,
        "relevance": t.relevance,
        argmax_key: argmax_vals,
        "score": t.score,
    });
    write_atomic(&out, to_json(&doc).as_bytes())?;
    println!(
        "wrote {} ({} regions x {} words, score {:.6})",
        out.display(),
        w.rows(),
        w.cols(),
        t.score
    );
    Ok(())
}
