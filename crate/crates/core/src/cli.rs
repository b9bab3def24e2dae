//! The `wordintel` command line.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::alignpool;
use crate::featio::{
    self, synthesize_bundle, write_bundle, write_index, Dataset, IndexEntry, PlantMode, PlantedSignalSpec, Severity,
    SynthDims, ValidationOptions, INDEX_FILE,
};
use crate::fusionhead::{build_features, read_checkpoint, write_checkpoint, Checkpoint, FusionMode, HeadPolicy};
use crate::metrics::{render_tables, stratified_report, MetricsReport, ScoredUtterance, DEFAULT_THRESHOLD};
use crate::textnorm::{self, normalize_transcript, OpString, WordLabelSet};
use crate::trainer::{self, mix_seed, FoldPlan, PredictionRecord, TrainConfig};

pub const LABELS_FILE: &str = "labels.tsv";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_EXT: &str = "wlc";
const LABELS_HEADER: &str = "utterance_id\tseverity\ttarget_score\tcorrect\tvalid";

#[derive(Debug, Parser)]
#[command(name = "wordintel", version, about = "Word-level intelligibility prediction from frozen ASR features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align reference and response transcripts into word labels.
    Label(LabelArgs),
    /// Write a synthetic dataset with a planted signal.
    Synth(SynthArgs),
    /// Check every bundle of a dataset (or a single bundle).
    Validate(ValidateArgs),
    /// Dump one word's frame-attention profile as CSV.
    InspectAlignment(InspectArgs),
    /// Cross-validated training of the fusion head.
    Train(TrainArgs),
    /// Fold-averaged predictions from trained checkpoints.
    Predict(PredictArgs),
    /// Score predictions against labels.
    Evaluate(EvaluateArgs),
    /// Render comparison tables from several evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// TSV with columns utterance_id, reference, response.
    #[arg(long)]
    input: PathBuf,
    /// Output TSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value = "local")]
    planted: PlantMode,
    #[arg(long)]
    out: PathBuf,
    /// Seeds the planted directions; defaults to --seed.
    #[arg(long)]
    direction_seed: Option<u64>,
    #[arg(long, default_value_t = 1.5)]
    strength: f64,
    #[arg(long, default_value_t = 2)]
    utterances_per_scene: usize,
    /// Fraction of scenes marked as split "test".
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    encoder_dim: usize,
    #[arg(long, default_value_t = 12)]
    tokens: usize,
    #[arg(long, default_value_t = 16)]
    decoder_dim: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    words: usize,
    #[arg(long, default_value_t = 32)]
    chars: usize,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Dataset directory with an index.
    #[arg(long, conflicts_with = "bundle", required_unless_present = "bundle")]
    data: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    require_attention: bool,
    /// Require attention rows to sum to 1.
    #[arg(long)]
    softmax_rows: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Reference word index.
    #[arg(long)]
    word: usize,
    /// Number of sharpest heads, or "all".
    #[arg(long, default_value = "10")]
    heads: HeadPolicy,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Workers {
    /// Worker threads. Results do not depend on this value.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML file with training knobs; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Only use index entries of this split.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value = "joint")]
    mode: FusionMode,
    /// Number of seeds, run as seed, seed+1, ...
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    workers: Workers,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Directory of checkpoints written by `train`.
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    workers: Workers,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// System name shown in tables; defaults to the predictions file stem.
    #[arg(long)]
    system: Option<String>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation reports, one per system, in table order.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Output text file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance written beside every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub fold_plans: Vec<FoldPlan>,
    pub inputs: Vec<InputDigest>,
    /// SHA-256 over all inputs in order.
    pub input_digest: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Per-file digests plus one combined digest, in the given order. Paths are
/// stored canonicalized so the manifest verifies from any directory.
pub fn digest_inputs(paths: &[PathBuf]) -> Result<(Vec<InputDigest>, String)> {
    let mut combined = Sha256::new();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        combined.update((name.len() as u64).to_le_bytes());
        combined.update(name.as_bytes());
        combined.update((bytes.len() as u64).to_le_bytes());
        combined.update(&bytes);
        out.push(InputDigest {
            path: fs::canonicalize(p).unwrap_or_else(|_| p.clone()),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    Ok((out, hex::encode(combined.finalize())))
}

impl RunManifest {
    /// Recomputes the input digest and compares it with the stored one.
    pub fn verify(&self) -> Result<bool> {
        let paths: Vec<PathBuf> = self.inputs.iter().map(|i| i.path.clone()).collect();
        let (inputs, digest) = digest_inputs(&paths)?;
        Ok(inputs == self.inputs && digest == self.input_digest)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct ManifestBuilder {
    command: &'static str,
    argv: Vec<String>,
    started: u64,
}

impl ManifestBuilder {
    fn finish(
        self,
        path: &Path,
        config: Value,
        seeds: Vec<u64>,
        fold_plans: Vec<FoldPlan>,
        inputs: &[PathBuf],
    ) -> Result<()> {
        let (inputs, input_digest) = digest_inputs(inputs)?;
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_owned(),
            command: self.command.to_owned(),
            argv: self.argv,
            config,
            seeds,
            fold_plans,
            inputs,
            input_digest,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        write_json(path, &manifest)
    }
}

/// `<dir>/<stem>.manifest.json` for a file output.
fn manifest_beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| anyhow!("cannot start worker pool: {e}"))
}

/// Runs the CLI and returns the process exit status: 0 on success, 1 on a
/// runtime error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command, argv: Vec<String>) -> Result<()> {
    let builder = |command| ManifestBuilder {
        command,
        argv: argv.clone(),
        started: unix_now(),
    };
    match command {
        Command::Label(a) => cmd_label(a, builder("label")),
        Command::Synth(a) => cmd_synth(a, builder("synth")),
        Command::Validate(a) => cmd_validate(a),
        Command::InspectAlignment(a) => cmd_inspect(a),
        Command::Train(a) => cmd_train(a, builder("train")),
        Command::Predict(a) => cmd_predict(a, builder("predict")),
        Command::Evaluate(a) => cmd_evaluate(a, builder("evaluate")),
        Command::Report(a) => cmd_report(a, builder("report")),
    }
}

fn cmd_label(a: LabelArgs, manifest: ManifestBuilder) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut out = String::from("utterance_id\tcorrect\tops\n");
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (n == 0 && line.starts_with("utterance_id\t")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            bail!("{} line {}: expected 3 columns, got {}", a.input.display(), n + 1, cols.len());
        }
        let reference = normalize_transcript(cols[1]);
        let response = normalize_transcript(cols[2]);
        let (labels, ops) = textnorm::align_and_label(&reference, &response);
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            cols[0],
            WordLabelSet::bits(&labels.correct),
            OpString(&ops)
        ));
    }
    match &a.out {
        Some(path) => {
            ensure_parent(path)?;
            fs::write(path, out)?;
            manifest.finish(&manifest_beside(path), Value::Null, vec![], vec![], std::slice::from_ref(&a.input))?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs, manifest: ManifestBuilder) -> Result<()> {
    if a.count == 0 || a.utterances_per_scene == 0 {
        bail!("--count and --utterances-per-scene must be positive");
    }
    if !(0.0..1.0).contains(&a.holdout) {
        bail!("--holdout must lie in [0, 1)");
    }
    let dims = SynthDims {
        frames: a.frames,
        encoder_dim: a.encoder_dim,
        tokens: a.tokens,
        decoder_dim: a.decoder_dim,
        layers: a.layers,
        heads: a.heads,
        words: a.words,
        chars: a.chars,
    };
    let spec = PlantedSignalSpec {
        mode: a.planted,
        direction_seed: a.direction_seed.unwrap_or(a.seed),
        strength: a.strength,
    };
    fs::create_dir_all(&a.out)?;
    let scenes = a.count.div_ceil(a.utterances_per_scene);
    let test_scenes = (a.holdout * scenes as f64).round() as usize;
    let mut entries = Vec::with_capacity(a.count);
    let mut labels = String::from(LABELS_HEADER);
    labels.push('\n');
    for i in 0..a.count {
        let mut b = synthesize_bundle(mix_seed(&[a.seed, i as u64]), dims, &spec)?;
        let scene = i / a.utterances_per_scene;
        b.utterance_id = format!("u{i:06}");
        b.scene_id = format!("scene{scene:05}");
        b.listener_id = format!("L{:04}", i % a.utterances_per_scene);
        let filename = format!("{}.wlb", b.utterance_id);
        write_bundle(&b, &a.out.join(&filename))?;
        labels.push_str(&label_row(&b.utterance_id, b.severity, b.target_score, &b.labels));
        entries.push(IndexEntry {
            utterance_id: b.utterance_id.clone(),
            filename,
            scene_id: b.scene_id.clone(),
            listener_id: b.listener_id.clone(),
            severity: b.severity,
            split: if scene >= scenes - test_scenes { "test" } else { "train" }.to_owned(),
        });
    }
    write_index(&a.out.join(INDEX_FILE), &entries)?;
    fs::write(a.out.join(LABELS_FILE), labels)?;
    let config = json!({ "dims": dims, "planted": spec, "count": a.count,
        "utterances_per_scene": a.utterances_per_scene, "holdout": a.holdout });
    manifest.finish(&a.out.join(MANIFEST_FILE), config, vec![a.seed], vec![], &[])?;
    Ok(())
}

fn label_row(id: &str, severity: Severity, target: Option<f64>, labels: &WordLabelSet) -> String {
    format!(
        "{id}\t{severity}\t{}\t{}\t{}\n",
        target.map(|t| format!("{t}")).unwrap_or_default(),
        WordLabelSet::bits(&labels.correct),
        WordLabelSet::bits(&labels.valid)
    )
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let opts = ValidationOptions {
        require_attention: a.require_attention,
        require_softmax_rows: a.softmax_rows,
    };
    if let Some(path) = a.bundle {
        let b = featio::read_bundle(&path).with_context(|| format!("{}", path.display()))?;
        b.validate(opts).with_context(|| format!("{}", path.display()))?;
        println!("ok: {}", b.utterance_id);
        return Ok(());
    }
    let root = a.data.expect("clap requires --data or --bundle");
    let ds = Dataset::open(&root)?;
    for e in &ds.entries {
        let b = ds.load(e).with_context(|| e.filename.clone())?;
        b.validate(opts).with_context(|| e.filename.clone())?;
    }
    println!("ok: {} bundles", ds.entries.len());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let b = featio::read_bundle(&a.bundle)?;
    let attn = b
        .cross_attention
        .as_ref()
        .ok_or_else(|| anyhow!("{} has no cross-attention", a.bundle.display()))?;
    let span = *b
        .char_spans
        .get(a.word)
        .ok_or_else(|| anyhow!("word {} out of range ({} words)", a.word, b.num_words()))?;
    let sel = match a.heads {
        HeadPolicy::TopK(k) => alignpool::select_top_heads(attn.view(), k)?,
        HeadPolicy::All => alignpool::all_heads(attn.view())?,
    };
    let profile = alignpool::word_attention_profile(attn.view(), &sel, a.word, span, &b.encoder_mask)?;
    if profile.degenerate {
        eprintln!("warning: word {} has no attention mass; profile is uniform", a.word);
    }
    let mut csv = String::from("frame,weight,valid\n");
    for (t, (w, m)) in profile.weights.iter().zip(&b.encoder_mask).enumerate() {
        csv.push_str(&format!("{t},{w},{m}\n"));
    }
    match a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn load_features(
    ds: &Dataset,
    split: Option<&str>,
    config: &crate::fusionhead::FusionConfig,
) -> Result<Vec<crate::fusionhead::UtteranceFeatures>> {
    let entries = ds.select_split(split);
    if entries.is_empty() {
        bail!("no index entries{}", split.map(|s| format!(" in split {s:?}")).unwrap_or_default());
    }
    entries
        .par_iter()
        .map(|e| {
            let b = ds.load(e).with_context(|| e.filename.clone())?;
            b.validate(ValidationOptions::default()).with_context(|| e.filename.clone())?;
            build_features(&b, config).with_context(|| e.filename.clone())
        })
        .collect()
}

fn cmd_train(a: TrainArgs, manifest: ManifestBuilder) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if a.seeds == 0 {
        bail!("--seeds must be positive");
    }
    let ds = Dataset::open(&a.data)?;
    let first = ds.select_split(a.split.as_deref()).into_iter().next().cloned();
    let first = first.ok_or_else(|| anyhow!("dataset {} has no usable entries", a.data.display()))?;
    let probe = ds.load(&first)?;
    let fusion = cfg.fusion_config(a.mode, probe.decoder_states.ncols(), probe.encoder_states.ncols());
    let pool = thread_pool(a.workers.workers)?;

    fs::create_dir_all(&a.out)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed + i).collect();
    let (plans, history) = pool.install(|| -> Result<_> {
        let features = load_features(&ds, a.split.as_deref(), &fusion)?;
        let mut plans = Vec::new();
        let mut history = Vec::new();
        for &seed in &seeds {
            let (plan, outcomes) = trainer::train_seed(&features, &fusion, &cfg, seed, a.folds)?;
            for o in outcomes {
                let name = format!("seed{:06}_fold{}.{CHECKPOINT_EXT}", seed, o.checkpoint.meta.fold);
                write_checkpoint(&o.checkpoint, &a.out.join(name))?;
                history.extend(o.history);
            }
            plans.push(plan);
        }
        Ok((plans, history))
    })?;

    let mut log = BufWriter::new(fs::File::create(a.out.join("history.jsonl"))?);
    for h in &history {
        writeln!(log, "{}", serde_json::to_string(h)?)?;
    }
    log.flush()?;
    let config = json!({ "train": cfg, "fusion": fusion, "split": a.split, "folds": a.folds });
    manifest.finish(&a.out.join(MANIFEST_FILE), config, seeds, plans, &ds.files())?;
    Ok(())
}

fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == CHECKPOINT_EXT))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .{CHECKPOINT_EXT} files in {}", dir.display());
    }
    Ok(files)
}

fn cmd_predict(a: PredictArgs, manifest: ManifestBuilder) -> Result<()> {
    let files = checkpoint_files(&a.checkpoints)?;
    let checkpoints: Vec<Checkpoint> = files
        .iter()
        .map(|p| read_checkpoint(p).with_context(|| format!("{}", p.display())))
        .collect::<Result<_>>()?;
    let config = checkpoints[0].config.clone();
    let ds = Dataset::open(&a.data)?;
    let pool = thread_pool(a.workers.workers)?;
    let chunk = TrainConfig::default().chunk_size;
    let records = pool.install(|| -> Result<Vec<PredictionRecord>> {
        let features = load_features(&ds, a.split.as_deref(), &config)?;
        Ok(trainer::predict(&features, &checkpoints, chunk)?)
    })?;

    ensure_parent(&a.out)?;
    let mut w = BufWriter::new(fs::File::create(&a.out)?);
    for r in &records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    let mut seeds: Vec<u64> = checkpoints.iter().map(|c| c.meta.seed).collect();
    seeds.dedup();
    let mut inputs = files;
    inputs.extend(ds.files());
    let snapshot = json!({ "fusion": config, "split": a.split });
    manifest.finish(&manifest_beside(&a.out), snapshot, seeds, vec![], &inputs)?;
    Ok(())
}

struct LabelRow {
    severity: Severity,
    target: Option<f64>,
    correct: Vec<u8>,
    valid: Vec<u8>,
}

fn read_labels(path: &Path) -> Result<HashMap<String, LabelRow>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = HashMap::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if n == 0 {
            if line.trim_end() != LABELS_HEADER {
                bail!("{}: expected header {LABELS_HEADER:?}", path.display());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            bail!("{} line {}: expected 5 columns", path.display(), n + 1);
        }
        let bits = |s: &str| WordLabelSet::parse_bits(s).ok_or_else(|| anyhow!("{} line {}: bad bits {s:?}", path.display(), n + 1));
        let target = match cols[2] {
            "" => None,
            t => Some(t.parse::<f64>().with_context(|| format!("{} line {}", path.display(), n + 1))?),
        };
        let row = LabelRow {
            severity: cols[1].parse()?,
            target,
            correct: bits(cols[3])?,
            valid: bits(cols[4])?,
        };
        if row.correct.len() != row.valid.len() {
            bail!("{} line {}: correct and valid lengths differ", path.display(), n + 1);
        }
        rows.insert(cols[0].to_owned(), row);
    }
    Ok(rows)
}

fn cmd_evaluate(a: EvaluateArgs, manifest: ManifestBuilder) -> Result<()> {
    let labels = read_labels(&a.labels)?;
    let text = fs::read_to_string(&a.predictions).with_context(|| format!("reading {}", a.predictions.display()))?;
    let mut scored = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PredictionRecord =
            serde_json::from_str(line).with_context(|| format!("{} line {}", a.predictions.display(), n + 1))?;
        let l = labels
            .get(&p.utterance_id)
            .ok_or_else(|| anyhow!("no labels for utterance {}", p.utterance_id))?;
        if l.correct.len() != p.probabilities.len() {
            bail!(
                "utterance {}: {} predictions but {} labels",
                p.utterance_id,
                p.probabilities.len(),
                l.correct.len()
            );
        }
        let valid: Vec<u8> = l.valid.iter().zip(&p.valid).map(|(a, b)| u8::from(*a != 0 && *b != 0)).collect();
        let score = crate::fusionhead::sentence_score(&p.probabilities, &valid).unwrap_or(0.0);
        // Without a stored target, the utterance's own word accuracy is used.
        let target = l.target.unwrap_or_else(|| {
            let n = valid.iter().filter(|m| **m != 0).count().max(1);
            let c = l.correct.iter().zip(&valid).filter(|(c, m)| **c != 0 && **m != 0).count();
            100.0 * c as f64 / n as f64
        });
        scored.push(ScoredUtterance {
            utterance_id: p.utterance_id,
            seed: p.seed,
            probabilities: p.probabilities,
            score,
            correct: l.correct.clone(),
            valid,
            target,
            severity: l.severity,
        });
    }
    let system = a.system.clone().unwrap_or_else(|| {
        a.predictions
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "system".into())
    });
    let report = stratified_report(&system, &scored, a.threshold)?;
    ensure_parent(&a.out)?;
    write_json(&a.out, &report)?;
    fs::write(a.out.with_extension("txt"), render_tables(std::slice::from_ref(&report)))?;
    let mut seeds: Vec<u64> = report.overall.per_seed.iter().map(|s| s.seed).collect();
    seeds.dedup();
    let snapshot = json!({ "system": system, "threshold": a.threshold });
    manifest.finish(
        &manifest_beside(&a.out),
        snapshot,
        seeds,
        vec![],
        &[a.predictions.clone(), a.labels.clone()],
    )?;
    Ok(())
}

fn cmd_report(a: ReportArgs, manifest: ManifestBuilder) -> Result<()> {
    let reports: Vec<MetricsReport> = a
        .reports
        .iter()
        .map(|p| -> Result<MetricsReport> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<_>>()?;
    let tables = render_tables(&reports);
    match &a.out {
        Some(path) => {
            ensure_parent(path)?;
            fs::write(path, tables)?;
            manifest.finish(&manifest_beside(path), Value::Null, vec![], vec![], &a.reports)?;
        }
        None => print!("{tables}"),
    }
    Ok(())
}
