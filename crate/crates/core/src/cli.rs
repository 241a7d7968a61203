// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `snce` command line.
//!
//! Every subcommand resolves its settings as flag > config file > default,
//! where the config file (`--config`, TOML or JSON by extension) holds
//! snake_case keys either at the top level or under a table named after the
//! subcommand (`[train]`, `[identify]`, ...); the subcommand table wins.
//! The resolved settings are logged before any work starts.
//!
//! Exit codes: 0 success, 1 failed check (or failed training), 2 usage or
//! input error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::concept::{identify, NeuronScoreTable};
use crate::erasure::{
    apply_erasure_with, default_lambda, parse_sweep, ManipulationSpec, MaskSource,
};
use crate::gradcheck::{gradient_check, GradCheckConfig};
use crate::io::{
    load_checkpoint, load_concept_pairs, read_concept_manifest, read_tensor, save_checkpoint,
    write_atomic, write_concept_manifest, write_tensor, IdentificationFile, ManifestRow,
};
use crate::numerics::Matrix;
use crate::synth::{
    gen_concept_pairs_synthetic, gen_corpus, gen_dictionary, DeskPreset, PairShape,
};
use crate::trainer::{train, TrainConfig};
use crate::{Error, Result, SaeConfig};

/// Exit code of a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit code of a failed check.
pub const EXIT_CHECK: i32 = 1;
/// Exit code of a usage or input error.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "snce",
    version,
    about = "Train TopK sparse autoencoders on token embeddings, find concept neurons, and erase them"
)]
struct Cli {
    /// TOML or JSON file with default settings.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an SAE on a corpus tensor and write a checkpoint.
    Train(TrainArgs),
    /// Rank the neurons that separate concept from deconcept prompts.
    Identify(IdentifyArgs),
    /// Subtract concept neuron directions from a prompt tensor.
    Erase(EraseArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the planted-atom benchmark.
    Synth(SynthArgs),
    /// Print neuron score tables.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    /// Corpus tensor file, one token per row.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training report CSV (default: checkpoint path with a .csv extension).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Embedding width (default: the corpus width).
    #[arg(long)]
    d: Option<usize>,
    /// Latent neurons (default: 4 × d).
    #[arg(long)]
    m: Option<usize>,
    /// Active latents per token (default: 32).
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the auxiliary dead-latent loss (default: 1/32).
    #[arg(long)]
    alpha: Option<f64>,
    /// Dead latents used by the auxiliary loss (default: 2 × k).
    #[arg(long)]
    aux_k: Option<usize>,
    /// Tokens without firing before a latent counts as dead (default: 200000).
    #[arg(long)]
    dead_window: Option<u64>,
    /// Adam learning rate (default: 4e-4).
    #[arg(long)]
    lr: Option<f64>,
    /// Tokens per batch (default: 4096).
    #[arg(long)]
    batch: Option<usize>,
    /// Passes over the corpus (default: 1).
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps per report record (default: 10).
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct IdentifyArgs {
    /// SAE checkpoint.
    #[arg(long)]
    sae: Option<PathBuf>,
    /// Concept-pair manifest (JSON lines).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Number of neurons to keep (default: 1).
    #[arg(long)]
    topk: Option<usize>,
    /// Concept name (default: the manifest file stem).
    #[arg(long)]
    concept: Option<String>,
    /// Identification JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EraseArgs {
    /// SAE checkpoint.
    #[arg(long)]
    sae: Option<PathBuf>,
    /// Identification JSON written by `identify`.
    #[arg(long)]
    rc: Option<PathBuf>,
    /// Prompt tensor to manipulate.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Manipulated tensor to write; a sweep adds `.lambda-<λ>` to the stem.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Manipulation coefficient (default: per concept, 1.0 otherwise).
    #[arg(long, conflicts_with = "sweep")]
    lambda: Option<f64>,
    /// Coefficient sweep `start:end:step`, both ends inclusive.
    #[arg(long)]
    sweep: Option<String>,
    /// Concept name used for the default coefficient (default: from --rc).
    #[arg(long)]
    concept: Option<String>,
    /// Experimental: tensor of one activation per latent, used as the mask
    /// source for every token instead of each token's own code.
    #[arg(long, value_name = "FILE")]
    broadcast_activations: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckArgs {
    /// Embedding width (default: 8).
    #[arg(long)]
    d: Option<usize>,
    /// Latent neurons (default: 32).
    #[arg(long)]
    m: Option<usize>,
    /// Active latents (default: 4).
    #[arg(long)]
    k: Option<usize>,
    /// Random SAEs to check (default: 100).
    #[arg(long)]
    seeds: Option<u64>,
    /// Central-difference step (default: 1e-5).
    #[arg(long)]
    eps: Option<f64>,
    /// Boundary distance below which a token is skipped (default: 1e-6).
    #[arg(long)]
    margin: Option<f64>,
    /// Relative-error denominator floor (default: 1e-6).
    #[arg(long)]
    floor: Option<f64>,
    /// Largest acceptable relative error (default: 1e-4).
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthArgs {
    /// Benchmark preset; only `desk` exists.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Planted atom used as the concept (default: seed mod atom count).
    #[arg(long)]
    target: Option<usize>,
    /// Concept/deconcept pairs (default: 100).
    #[arg(long)]
    pairs: Option<usize>,
    /// Held-out concept prompts for erasure (default: 50).
    #[arg(long)]
    heldout: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InspectArgs {
    /// Identification JSON or a bare score table.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Only show neurons whose score exceeds this value (default: 0).
    #[arg(long)]
    min_score: Option<f64>,
    /// Which side of an identification file: concept or deconcept.
    #[arg(long)]
    side: Option<String>,
    /// Show at most this many rows.
    #[arg(long)]
    top: Option<usize>,
}

/// Parses `args` (program name first), runs the subcommand, and returns the
/// process exit code. Errors are printed to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Training { .. } | Error::Generation(_) => EXIT_CHECK,
        _ => EXIT_USAGE,
    }
}

/// `SNCE_THREADS` caps the worker pool; 0 or unset means one per core.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SNCE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("SNCE_THREADS={raw:?} is not a thread count")))?;
    if n > 0 {
        // a pool may already exist when `run` is called twice in one process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    let file = match &cli.config {
        Some(path) => Some(read_config_file(path)?),
        None => None,
    };
    let file = file.as_ref();
    match cli.command {
        Command::Train(a) => cmd_train(resolve("train", a, file)?),
        Command::Identify(a) => cmd_identify(resolve("identify", a, file)?),
        Command::Erase(a) => cmd_erase(resolve("erase", a, file)?),
        Command::Gradcheck(a) => cmd_gradcheck(resolve("gradcheck", a, file)?),
        Command::Synth(a) => cmd_synth(resolve("synth", a, file)?),
        Command::Inspect(a) => cmd_inspect(resolve("inspect", a, file)?),
    }
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::format("config", e.to_string()))?
    } else {
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::format("config", e.to_string()))?;
        serde_json::to_value(table).map_err(|e| Error::format("config", e.to_string()))?
    };
    if !value.is_object() {
        return Err(Error::format("config", "top level must be a table"));
    }
    Ok(value)
}

/// Overlays flags on the config file: flag > `[section]` > top level.
fn resolve<A>(section: &str, flags: A, file: Option<&Value>) -> Result<A>
where
    A: Serialize + DeserializeOwned + std::fmt::Debug,
{
    let mut merged = Map::new();
    let field_names = match serde_json::to_value(&flags) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("argument structs serialize to objects"),
    };
    if let Some(Value::Object(top)) = file {
        // top-level keys may belong to other subcommands; take only ours
        for (k, v) in top {
            if field_names.contains_key(k) && !v.is_object() {
                merged.insert(k.clone(), v.clone());
            }
        }
        if let Some(sec) = top.get(section) {
            let Value::Object(sec) = sec else {
                return Err(Error::format(section, "config section must be a table"));
            };
            merged.extend(sec.clone());
        }
    }
    for (k, v) in field_names {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    let resolved: A = serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::format(format!("config [{section}]"), e.to_string()))?;
    log::debug!(
        "{section} settings: {}",
        serde_json::to_string(&resolved).expect("arguments serialize")
    );
    Ok(resolved)
}

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::Input(format!("missing required --{flag}")))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let corpus_path = required(&a.corpus, "corpus")?;
    let out = required(&a.out, "out")?;
    require_file(corpus_path, "corpus")?;
    let corpus = read_tensor(corpus_path)?.real_tokens();
    let width = corpus.cols();
    let d = a.d.unwrap_or(width);
    if d != width {
        return Err(Error::Input(format!(
            "--d {d} does not match the corpus width {width}"
        )));
    }
    let paper = SaeConfig::paper();
    let k = a.k.unwrap_or(paper.topk);
    let sae_cfg = SaeConfig {
        input_dim: d,
        latent_dim: a.m.unwrap_or(4 * d),
        topk: k,
        aux_coeff: a.alpha.unwrap_or(paper.aux_coeff),
        aux_k: a.aux_k.unwrap_or(2 * k),
        dead_window: a.dead_window.unwrap_or(paper.dead_window),
    };
    let defaults = TrainConfig::paper();
    let train_cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        seed: a.seed.unwrap_or(defaults.seed),
        log_every: a.log_every.unwrap_or(defaults.log_every),
        ..defaults
    };
    log::info!(
        "train: corpus={} ({} tokens) out={} {sae_cfg:?} {train_cfg:?}",
        corpus_path.display(),
        corpus.rows(),
        out.display()
    );
    let (params, report) = train(&sae_cfg, &train_cfg, &corpus)?;
    save_checkpoint(&params, &sae_cfg, out)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| out.with_extension("csv"));
    report.write_csv(&report_path)?;
    if let (Some(first), Some(last)) = (report.first(), report.last()) {
        println!(
            "trained on {} tokens: mse {:.6} -> {:.6}, dead latents {}",
            last.tokens, first.mse, last.mse, last.dead
        );
    }
    println!("checkpoint: {}", out.display());
    println!("report: {}", report_path.display());
    Ok(EXIT_OK)
}

fn cmd_identify(a: IdentifyArgs) -> Result<i32> {
    let sae = required(&a.sae, "sae")?;
    let manifest = required(&a.pairs, "pairs")?;
    let out = required(&a.out, "out")?;
    require_file(sae, "checkpoint")?;
    require_file(manifest, "manifest")?;
    let topk = a.topk.unwrap_or(1);
    let concept = a.concept.clone().unwrap_or_else(|| {
        manifest
            .file_stem()
            .map_or_else(|| "concept".into(), |s| s.to_string_lossy().into_owned())
    });
    log::info!(
        "identify: sae={} pairs={} concept={concept:?} topk={topk} out={}",
        sae.display(),
        manifest.display(),
        out.display()
    );
    let (params, cfg) = load_checkpoint(sae)?;
    let descriptors = read_concept_manifest(manifest)?;
    let pairs = load_concept_pairs(&concept, &descriptors)?;
    let id = identify(&params, cfg.topk, &pairs, topk)?;
    IdentificationFile::new(&concept, topk, &id).write(out)?;

    let diag = id.diagnostics;
    println!(
        "concept {concept:?}: {} pairs, {} concept / {} deconcept tokens, |N_C| = {}, filtered {}",
        pairs.pairs.len(),
        diag.concept_tokens,
        diag.deconcept_tokens,
        diag.differential,
        diag.filtered
    );
    if diag.warning {
        println!("warning: no differential neuron; R_C is empty");
    }
    println!("{:>6} {:>7} {:>12}", "neuron", "f_i", "s_i^c");
    for &i in &id.neurons {
        println!(
            "{i:>6} {:>7} {:>12.6}",
            id.concept_scores.freq[i], id.concept_scores.score[i]
        );
    }
    Ok(EXIT_OK)
}

/// `prompt.snce` → `prompt.lambda-0.2.snce`.
fn sweep_path(out: &Path, lambda: f64) -> PathBuf {
    let mut label = format!("{lambda:.6}");
    while label.ends_with('0') {
        label.pop();
    }
    if label.ends_with('.') {
        label.pop();
    }
    let stem = out
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match out.extension() {
        Some(ext) => format!("{stem}.lambda-{label}.{}", ext.to_string_lossy()),
        None => format!("{stem}.lambda-{label}"),
    };
    out.with_file_name(name)
}

fn cmd_erase(a: EraseArgs) -> Result<i32> {
    let sae = required(&a.sae, "sae")?;
    let rc_path = required(&a.rc, "rc")?;
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    require_file(sae, "checkpoint")?;
    require_file(rc_path, "identification file")?;
    require_file(input, "input tensor")?;
    if a.lambda.is_some() && a.sweep.is_some() {
        return Err(Error::Input(
            "--lambda and --sweep are mutually exclusive".into(),
        ));
    }
    let (params, cfg) = load_checkpoint(sae)?;
    let rc = IdentificationFile::read(rc_path)?;
    let concept = a.concept.clone().unwrap_or_else(|| rc.concept.clone());
    let tokens = read_tensor(input)?;
    let mask = tokens.mask.clone();
    let source = match &a.broadcast_activations {
        Some(path) => {
            require_file(path, "broadcast activations")?;
            log::warn!("experimental: broadcasting one activation vector to every token");
            MaskSource::Broadcast(read_tensor(path)?.matrix.into_vec())
        }
        None => MaskSource::PerToken,
    };
    let lambdas = match (&a.sweep, a.lambda) {
        (Some(s), _) => parse_sweep(s)?,
        (None, Some(l)) => vec![l],
        (None, None) => vec![default_lambda(&concept)],
    };
    log::info!(
        "erase: sae={} rc={} in={} out={} concept={concept:?} neurons={:?} lambdas={lambdas:?} mask_source={}",
        sae.display(),
        rc_path.display(),
        input.display(),
        out.display(),
        rc.neurons,
        if a.broadcast_activations.is_some() { "broadcast" } else { "per-token" }
    );
    if rc.neurons.is_empty() {
        log::warn!("R_C is empty; the output equals the input");
    }
    println!(
        "{:>8} {:>14} {:>14} {:>12}",
        "lambda", "target_before", "target_after", "max_pert"
    );
    for &lambda in &lambdas {
        let spec = ManipulationSpec::new(rc.neurons.clone(), lambda, concept.clone())?;
        let (erased, report) =
            apply_erasure_with(&params, cfg.topk, &tokens.matrix, &spec, &source)?;
        let path = if a.sweep.is_some() {
            sweep_path(out, lambda)
        } else {
            out.clone()
        };
        write_tensor(&path, &erased, mask.as_deref())?;
        let mut json = report.to_json();
        json.push('\n');
        write_atomic(&path.with_extension("report.json"), json.as_bytes())?;
        write_atomic(
            &path.with_extension("report.csv"),
            report.to_csv().as_bytes(),
        )?;
        let max_pert = report.perturbation.iter().copied().fold(0.0, f64::max);
        println!(
            "{lambda:>8.3} {:>14.6} {:>14.6} {max_pert:>12.6}",
            report.total_before(),
            report.total_after()
        );
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let defaults = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        input_dim: a.d.unwrap_or(defaults.input_dim),
        latent_dim: a.m.unwrap_or(defaults.latent_dim),
        topk: a.k.unwrap_or(defaults.topk),
        seeds: a.seeds.unwrap_or(defaults.seeds),
        eps: a.eps.unwrap_or(defaults.eps),
        margin: a.margin.unwrap_or(defaults.margin),
        floor: a.floor.unwrap_or(defaults.floor),
    };
    let tolerance = a.tolerance.unwrap_or(1e-4);
    log::info!("gradcheck: {cfg:?} tolerance={tolerance:e}");
    let report = gradient_check(&cfg)?;
    println!(
        "max relative error: {:.3e} over {} coordinates ({} skipped near a boundary, {} tokens skipped)",
        report.max_rel_error, report.checked, report.skipped, report.skipped_tokens
    );
    if report.passes(tolerance) {
        println!("gradient check passed (tolerance {tolerance:e})");
        Ok(EXIT_OK)
    } else {
        if let Some((seed, flat)) = report.worst {
            println!("worst coordinate: seed {seed}, parameter {flat}");
        }
        println!("gradient check FAILED (tolerance {tolerance:e})");
        Ok(EXIT_CHECK)
    }
}

/// Metadata written next to the synthetic benchmark files.
#[derive(Debug, Serialize, Deserialize)]
struct BenchmarkInfo {
    preset: String,
    seed: u64,
    d: usize,
    m_true: usize,
    n: usize,
    k_true: usize,
    sigma: f64,
    target_atom: usize,
    pairs: usize,
    heldout: usize,
    /// Mention position of every held-out prompt.
    heldout_mention: Vec<usize>,
    tokens_per_prompt: usize,
}

/// Desk-scale SAE and optimizer settings written as `train.toml`.
fn desk_train_config(seed: u64) -> String {
    let sae = SaeConfig::desk();
    let opt = TrainConfig::desk();
    format!(
        "[train]\nd = {}\nm = {}\nk = {}\nalpha = {}\naux_k = {}\ndead_window = {}\nlr = {}\nbatch = {}\nepochs = {}\nlog_every = {}\nseed = {seed}\n",
        sae.input_dim,
        sae.latent_dim,
        sae.topk,
        sae.aux_coeff,
        sae.aux_k,
        sae.dead_window,
        opt.learning_rate,
        opt.batch_size,
        opt.epochs,
        opt.log_every
    )
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let preset_name = a.preset.clone().unwrap_or_else(|| "desk".into());
    if preset_name != "desk" {
        return Err(Error::Input(format!(
            "unknown preset {preset_name:?}; available: desk"
        )));
    }
    let out = required(&a.out, "out")?;
    let preset = DeskPreset::default();
    let seed = a.seed.unwrap_or(0);
    let target = a.target.unwrap_or((seed as usize) % preset.m_true);
    if target >= preset.m_true {
        return Err(Error::Input(format!(
            "--target {target} out of range for {} atoms",
            preset.m_true
        )));
    }
    let n_pairs = a.pairs.unwrap_or(preset.n_pairs);
    let n_heldout = a.heldout.unwrap_or(50);
    let shape = PairShape {
        context_atoms: SaeConfig::desk().topk,
        sigma: preset.sigma,
        ..PairShape::default()
    };

    log::info!(
        "synth: preset={preset_name} out={} seed={seed} target={target} pairs={n_pairs} heldout={n_heldout} {preset:?} {shape:?}",
        out.display()
    );
    let dict = gen_dictionary(seed, preset.d, preset.m_true)?;
    let corpus = gen_corpus(&dict, preset.n, preset.k_true, preset.sigma, seed + 1)?;
    let pairs = gen_concept_pairs_synthetic(&dict, target, n_pairs, shape, seed + 2)?;
    let heldout = gen_concept_pairs_synthetic(&dict, target, n_heldout, shape, seed + 3)?;

    let pair_dir = out.join("pairs");
    std::fs::create_dir_all(&pair_dir).map_err(|e| Error::io(&pair_dir, e))?;
    write_tensor(&out.join("corpus.snce"), &corpus.features, None)?;
    write_tensor(&out.join("dictionary.snce"), &dict.atoms.transpose(), None)?;
    let mut rows = Vec::with_capacity(n_pairs);
    for (i, pair) in pairs.set.pairs.iter().enumerate() {
        let (c, d) = (
            format!("pairs/{i:03}_c.snce"),
            format!("pairs/{i:03}_d.snce"),
        );
        write_tensor(&out.join(&c), &pair.concept, None)?;
        write_tensor(&out.join(&d), &pair.deconcept, None)?;
        rows.push(ManifestRow {
            concept: format!("prompt {i} with atom {target}"),
            deconcept: format!("prompt {i} without atom {target}"),
            concept_emb: c.into(),
            deconcept_emb: d.into(),
        });
    }
    write_concept_manifest(&out.join("planted.jsonl"), &rows)?;
    if n_heldout > 0 {
        let prompts: Vec<&Matrix> = heldout.set.pairs.iter().map(|p| &p.concept).collect();
        write_tensor(&out.join("heldout.snce"), &Matrix::vstack(&prompts)?, None)?;
    }
    write_atomic(&out.join("train.toml"), desk_train_config(seed).as_bytes())?;
    let info = BenchmarkInfo {
        preset: preset_name,
        seed,
        d: preset.d,
        m_true: preset.m_true,
        n: preset.n,
        k_true: preset.k_true,
        sigma: preset.sigma,
        target_atom: target,
        pairs: n_pairs,
        heldout: n_heldout,
        heldout_mention: heldout.mention.clone(),
        tokens_per_prompt: shape.tokens,
    };
    let mut json = serde_json::to_string_pretty(&info).expect("info serializes");
    json.push('\n');
    write_atomic(&out.join("benchmark.json"), json.as_bytes())?;
    println!(
        "wrote desk benchmark to {}: {} corpus tokens, {n_pairs} pairs for atom {target}, {n_heldout} held-out prompts",
        out.display(),
        preset.n
    );
    Ok(EXIT_OK)
}

fn cmd_inspect(a: InspectArgs) -> Result<i32> {
    let path = required(&a.scores, "scores")?;
    require_file(path, "score file")?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let side = a.side.clone().unwrap_or_else(|| "concept".into());
    let table: NeuronScoreTable = match serde_json::from_str::<IdentificationFile>(&text) {
        Ok(file) => match side.as_str() {
            "concept" => file.concept_scores,
            "deconcept" => file.deconcept_scores,
            other => {
                return Err(Error::Input(format!(
                    "--side must be concept or deconcept, got {other:?}"
                )))
            }
        },
        Err(_) => serde_json::from_str(&text)
            .map_err(|e| Error::format("scores", format!("{}: {e}", path.display())))?,
    };
    let min = a.min_score.unwrap_or(0.0);
    log::info!(
        "inspect: scores={} side={side} min_score={min} top={:?}",
        path.display(),
        a.top
    );
    let mut shown = table.ranked_above(min);
    if let Some(top) = a.top {
        shown.truncate(top);
    }
    println!(
        "{} neurons, {} tokens; {} with s_i > {min}",
        table.score.len(),
        table.token_count,
        shown.len()
    );
    println!("{:>6} {:>7} {:>12}", "neuron", "f_i", "s_i");
    for i in shown {
        println!("{i:>6} {:>7} {:>12.6}", table.freq[i], table.score[i]);
    }
    Ok(EXIT_OK)
}
