use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use seqnet::data::{self, load_manifest, Alphabet, DatasetManifest, PreparedDataset, SynthConfig};
use seqnet::eval::{
    character_accuracy, coverage_at_accuracy, coverage_curve, evaluate, sequence_accuracy, uniform_thresholds,
    EvalRecord, TranscriptionLine,
};
use seqnet::experiment::{arch_sweep, sweep_csv, SweepConfig};
use seqnet::network::{read_container, Model, NetworkConfig};
use seqnet::train::{train, CheckpointPaths, TrainConfig, TrainState};
use seqnet::{predict_max_sequence, worked_example, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "seqnet", version, about = "Multi-character image transcription with a factorized sequence head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-digit dataset (manifest.jsonl + images/).
    GenData(GenDataArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Transcribe images or a manifest; one JSON line per input.
    Transcribe(TranscribeArgs),
    /// Accuracy and coverage summary of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Coverage/accuracy curve as CSV.
    Curve(CurveArgs),
    /// Decode the built-in worked example and check the result.
    AppendixDemo,
    /// Train one model per conv depth under an equal step budget.
    ArchSweep(SweepArgs),
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory (containing manifest.jsonl) or a manifest file.
    #[arg(long, env = "SEQNET_DATA_DIR", default_value = "data")]
    data: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long, env = "SEQNET_DATA_DIR", default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0123456789")]
    alphabet: String,
    #[arg(long, default_value_t = 5)]
    max_len: usize,
    /// Relative weights of lengths 1, 2, ...
    #[arg(long, value_delimiter = ',', default_value = "1,1,1")]
    length_weights: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    overflow_rate: f64,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0.06)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    clutter: usize,
    /// Random box-edge displacement as a fraction of glyph height.
    #[arg(long, default_value_t = 0.0)]
    box_noise: f64,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.5)]
    lr_decay: f64,
    /// Steps between learning-rate decays; 0 keeps the rate constant.
    #[arg(long, default_value_t = 0)]
    lr_decay_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 1 gives the strictly single-threaded mode.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    no_dropout: bool,
    #[arg(long)]
    no_augment: bool,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.lr,
            momentum: self.momentum,
            lr_decay: self.lr_decay,
            lr_decay_steps: self.lr_decay_steps,
            val_fraction: self.val_fraction,
            seed: self.seed,
            threads: self.threads,
            dropout: !self.no_dropout,
            augment: !self.no_augment,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    /// Network preset: desk, desk-N, tiny or svhn-paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Directory for checkpoints and the training report.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Stop once validation sequence accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
    /// Continue from a saved training state.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct TranscribeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest (or dataset directory) to transcribe instead of image paths.
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
    /// Records below this confidence are flagged kept=false.
    #[arg(long, default_value_t = 0.0)]
    min_confidence: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArg,
    /// Evaluate every sample instead of only the validation split.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.98)]
    target: f64,
    /// Also write per-sample records as JSON lines.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    /// JSON-lines records written by `eval --records`.
    #[arg(long, conflicts_with = "checkpoint")]
    records: Option<PathBuf>,
    /// Alphabet used by the records file.
    #[arg(long, default_value = "0123456789")]
    alphabet: String,
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Number of threshold intervals in [0, 1].
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    depths: Vec<usize>,
    /// Training steps per model.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Add a single-conv-layer control with at least the deepest model's parameter count.
    #[arg(long)]
    control: bool,
    #[arg(long)]
    control_width: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { code: EXIT_DATA, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.jsonl")
    } else {
        p.to_path_buf()
    }
}

fn load_data(p: &Path) -> Result<DatasetManifest, Failure> {
    let path = manifest_path(p);
    if !path.exists() {
        return Err(Failure { code: EXIT_DATA, msg: format!("manifest not found: {}", path.display()) });
    }
    Ok(load_manifest(&path)?)
}

/// Loads a model checkpoint and the alphabet stored with it (digits when
/// absent).
fn load_checkpoint(p: &Path) -> Result<(Model, Alphabet), Failure> {
    let mut c = read_container(p)?;
    let alphabet = match c.meta.pointer("/extra/alphabet").and_then(Value::as_str) {
        Some(a) => Alphabet::new(a)?,
        None => Alphabet::digits(),
    };
    let model = Model::from_container(&mut c)?;
    if model.config().head.alphabet_size != alphabet.len() {
        return Err(Failure { code: EXIT_DATA, msg: "checkpoint alphabet does not match its head".into() });
    }
    Ok((model, alphabet))
}

fn prepare(model: &Model, manifest: &DatasetManifest) -> Result<PreparedDataset, Failure> {
    let cfg = model.config();
    if manifest.max_len != cfg.head.max_len || manifest.alphabet.len() != cfg.head.alphabet_size {
        return Err(Failure {
            code: EXIT_DATA,
            msg: format!(
                "dataset (N={}, K={}) does not match the model head (N={}, K={})",
                manifest.max_len,
                manifest.alphabet.len(),
                cfg.head.max_len,
                cfg.head.alphabet_size
            ),
        });
    }
    Ok(PreparedDataset::from_manifest(manifest, cfg.preprocess, cfg.input[2])?)
}

fn output(out: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = SynthConfig {
        alphabet: a.alphabet,
        max_len: a.max_len,
        count: a.count,
        length_weights: a.length_weights,
        overflow_rate: a.overflow_rate,
        canvas: [a.height, a.width],
        channels: a.channels,
        noise_std: a.noise,
        clutter: a.clutter,
        box_noise: a.box_noise,
        seed: a.seed,
        ..Default::default()
    };
    let manifest = data::synth_generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    manifest.write(&a.out.join("manifest.jsonl"))?;
    eprintln!("wrote {} samples to {}", manifest.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let manifest = load_data(&a.data.data)?;
    let mut state = match &a.resume {
        Some(p) => TrainState::load(p)?,
        None => {
            let net = NetworkConfig::preset(&a.preset)?.with_head(manifest.max_len, manifest.alphabet.len());
            TrainState::new(Model::build(net, a.opts.seed)?)
        }
    };
    let data = prepare(&state.model, &manifest)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        max_steps: a.max_steps,
        time_limit: a.time_limit,
        target_accuracy: a.target_accuracy,
        ..a.opts.config()
    };
    fs::create_dir_all(&a.out)?;
    let mut paths = CheckpointPaths::in_dir(&a.out);
    paths.meta.insert("alphabet".into(), json!(manifest.alphabet.to_string()));
    let report = train(&mut state, &data, &cfg, &paths)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    fs::write(a.out.join("report.csv"), report.to_csv())?;
    for e in &report.epochs {
        eprintln!(
            "epoch {:>3}  step {:>6}  loss {:.4}  val_acc {:.4}  val_cov {:.4}  {:.0}s",
            e.epoch, e.steps, e.train_loss, e.val_accuracy, e.val_coverage, e.elapsed
        );
    }
    println!(
        "{}",
        json!({
            "best_accuracy": report.best_accuracy,
            "best_accuracy_epoch": report.best_accuracy_epoch,
            "best_coverage": report.best_coverage,
            "best_coverage_epoch": report.best_coverage_epoch,
            "steps": state.step,
            "wall_clock": report.wall_clock,
        })
    );
    Ok(())
}

fn transcribe_cmd(a: TranscribeArgs) -> CmdResult {
    let (model, alphabet) = load_checkpoint(&a.checkpoint)?;
    let mut out = output(&a.out)?;
    let (mut ok, mut total) = (0usize, 0usize);
    let mut emit = |out: &mut dyn Write, line: Result<Value, (String, String)>| -> io::Result<()> {
        total += 1;
        let v = match line {
            Ok(v) => {
                ok += 1;
                v
            }
            Err((id, error)) => json!({ "id": id, "error": error }),
        };
        writeln!(out, "{v}")
    };
    if let Some(m) = &a.manifest {
        let manifest = load_data(m)?;
        let cfg = model.config();
        for s in &manifest.samples {
            let line = (|| -> Result<Value, Error> {
                let img = s.load_image(cfg.input[2])?;
                let x = if s.boxes.is_empty() {
                    data::prepare_unboxed(&img, &cfg.preprocess)?
                } else {
                    data::mean_subtract(&data::center_crop(&data::crop_and_resize(&img, &s.boxes, &cfg.preprocess)?, &cfg.preprocess)?)
                };
                let t = predict_max_sequence(&model.forward(&x)?);
                Ok(serde_json::to_value(TranscriptionLine::new(&s.id, &t, &alphabet, a.min_confidence)?)?)
            })();
            emit(&mut out, line.map_err(|e| (s.id.clone(), e.to_string())))?;
        }
    } else {
        if a.images.is_empty() {
            return Err(Failure { code: EXIT_USAGE, msg: "give image paths or --manifest".into() });
        }
        for p in &a.images {
            let id = p.to_string_lossy().into_owned();
            let line = (|| -> Result<Value, Error> {
                let cfg = model.config();
                let img = data::load_image(p, cfg.input[2])?;
                let x = data::prepare_unboxed(&img, &cfg.preprocess)?;
                let t = predict_max_sequence(&model.forward(&x)?);
                Ok(serde_json::to_value(TranscriptionLine::new(&id, &t, &alphabet, a.min_confidence)?)?)
            })();
            emit(&mut out, line.map_err(|e| (id.clone(), e.to_string())))?;
        }
    }
    out.flush()?;
    if total > 0 && ok == 0 {
        return Err(Failure { code: EXIT_DATA, msg: "no input could be transcribed".into() });
    }
    Ok(())
}

fn eval_records(model: &Model, manifest: &DatasetManifest, all: bool, val_fraction: f64) -> Result<Vec<EvalRecord>, Failure> {
    let data = prepare(model, manifest)?;
    let idx: Vec<usize> = if all { (0..data.len()).collect() } else { data.split(val_fraction).1 };
    if idx.is_empty() {
        return Err(Failure { code: EXIT_DATA, msg: "no samples to evaluate".into() });
    }
    Ok(evaluate(model, &data, &idx)?)
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let (model, alphabet) = load_checkpoint(&a.checkpoint)?;
    let manifest = load_data(&a.data.data)?;
    let records = eval_records(&model, &manifest, a.all, a.val_fraction)?;
    if let Some(p) = &a.records {
        let mut w = BufWriter::new(fs::File::create(p)?);
        for r in &records {
            let line = TranscriptionLine::from_record(r, &alphabet, 0.0)?;
            writeln!(w, "{}", serde_json::to_string(&line).map_err(Error::from)?)?;
        }
        w.flush()?;
    }
    let op = coverage_at_accuracy(&records, a.target);
    println!(
        "{}",
        json!({
            "count": records.len(),
            "sequence_accuracy": sequence_accuracy(&records)?,
            "character_accuracy": character_accuracy(&records)?,
            "target_accuracy": a.target,
            "coverage": op.map(|p| p.coverage),
            "threshold": op.map(|p| p.threshold),
        })
    );
    Ok(())
}

fn read_records(path: &Path, alphabet: &Alphabet) -> Result<Vec<EvalRecord>, Failure> {
    let reader = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Failure { code: EXIT_DATA, msg: format!("{}:{}: {msg}", path.display(), n + 1) };
        let rec: TranscriptionLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.to_record(alphabet).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

fn curve_cmd(a: CurveArgs) -> CmdResult {
    let records = match (&a.records, &a.checkpoint, &a.data) {
        (Some(r), _, _) => read_records(r, &Alphabet::new(&a.alphabet)?)?,
        (None, Some(c), Some(d)) => {
            let (model, _) = load_checkpoint(c)?;
            eval_records(&model, &load_data(d)?, a.all, a.val_fraction)?
        }
        _ => return Err(Failure { code: EXIT_USAGE, msg: "give --records, or --checkpoint with --data".into() }),
    };
    let curve = coverage_curve(&records, &uniform_thresholds(a.steps))?;
    let mut out = output(&a.out)?;
    curve.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn appendix_demo() -> CmdResult {
    use seqnet::sequence::{length_candidates, position_maxima};
    let dist = worked_example::distribution();
    let maxima = position_maxima(&dist);
    let cands = length_candidates(&dist);
    println!("position  best  log P");
    for (i, (c, lp)) in maxima.iter().enumerate() {
        println!("S{:<8} {:<5} {:>9.5}", i + 1, c, lp);
    }
    println!();
    println!("{:<4} {:>10} {:>12} {:>10} {:>10} {:>9}", "L", "log P(L)", "prefix sum", "total", "printed", "diff");
    let mut table_ok = true;
    for (c, (&published, &prefix)) in cands.iter().zip(worked_example::REFERENCE_TOTALS.iter().zip(&worked_example::REFERENCE_PREFIX)) {
        let label = if c.length_class > dist.max_len() { ">N".to_string() } else { c.length_class.to_string() };
        let diff = c.total_log_prob - published;
        let mark = if diff.abs() <= worked_example::TOLERANCE { "" } else { "  <- differs from printed total" };
        if (c.prefix_log_prob - prefix).abs() > worked_example::TOLERANCE {
            table_ok = false;
        }
        table_ok &= diff.abs() <= worked_example::TOLERANCE;
        println!(
            "{:<4} {:>10.5} {:>12.5} {:>10.5} {:>10.5} {:>9.5}{mark}",
            label,
            dist.length_logp()[c.length_class],
            c.prefix_log_prob,
            c.total_log_prob,
            published,
            diff
        );
    }
    let t = predict_max_sequence(&dist);
    let text = Alphabet::digits().decode(&t.chars)?;
    println!();
    println!("winner: \"{text}\"  log P = {:.5}  confidence = {:.5}", t.log_prob, seqnet::confidence(&t));
    if !table_ok {
        println!("note: some printed totals differ from log P(L) + prefix sum (see diff column)");
    }
    let winner_ok = !t.overflow
        && t.chars == worked_example::EXPECTED_TRANSCRIPTION
        && (t.log_prob - worked_example::EXPECTED_LOG_PROB).abs() <= worked_example::TOLERANCE;
    if winner_ok {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK,
            msg: format!("expected \"175\" at {} but decoded \"{text}\" at {}", worked_example::EXPECTED_LOG_PROB, t.log_prob),
        })
    }
}

fn sweep_cmd(a: SweepArgs) -> CmdResult {
    let manifest = load_data(&a.data.data)?;
    let net = NetworkConfig::desk().with_head(manifest.max_len, manifest.alphabet.len());
    let data = PreparedDataset::from_manifest(&manifest, net.preprocess, net.input[2])?;
    let sweep = SweepConfig { depths: a.depths, steps: a.steps, control: a.control, control_width: a.control_width };
    let train_cfg = TrainConfig { epochs: usize::MAX, ..a.opts.config() };
    let rows = arch_sweep(&data, &sweep, &train_cfg)?;
    let mut out = output(&a.out)?;
    out.write_all(sweep_csv(&rows).as_bytes())?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Transcribe(a) => transcribe_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Curve(a) => curve_cmd(a),
        Command::AppendixDemo => appendix_demo(),
        Command::ArchSweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
