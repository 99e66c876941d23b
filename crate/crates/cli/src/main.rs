//! `qctc`: dataset generation, training, distillation, evaluation and the
//! latency, query-sweep and error-propagation experiments.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use qctc_core::decoding::NarReading;
use qctc_core::experiments::{
    bench, error_propagation, evaluate, sweep::sweep_queries, BenchConfig, DecodeMethod,
};
use qctc_core::model::checkpoint::{load, load_with_extra, save_with_extra};
use qctc_core::model::{DecoderKind, ModelConfig, ModelParams, StudentObjective};
use qctc_core::tasks::{generate, Dataset, Split, TaskKind, TaskSpec};
use qctc_core::training::{distill_targets, model_config_for, train_student, train_teacher, TrainConfig};
use qctc_core::{Error, Result};

use settings::{put, ConfigFile};

#[derive(Parser, Debug)]
#[command(name = "qctc", version, about = "Parallel decoding with learnable query tokens on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Gen(GenArgs),
    /// Train an autoregressive teacher or a parallel student.
    Train(TrainArgs),
    /// Replace training targets with a teacher's decodes.
    Distill(DistillArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Time autoregressive against parallel decoding across target lengths.
    Bench(BenchArgs),
    /// First-coordinate error spread on the grounding task.
    ErrorProp(ErrorPropArgs),
    /// Train and time one student per query count.
    SweepQueries(SweepArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DecoderArg {
    /// Autoregressive teacher.
    Ar,
    /// Parallel decoder over learnable query tokens.
    Nar,
    /// Parallel decoder over the encoder output states.
    Eo,
}

impl From<DecoderArg> for DecoderKind {
    fn from(d: DecoderArg) -> Self {
        match d {
            DecoderArg::Ar => DecoderKind::Autoregressive,
            DecoderArg::Nar => DecoderKind::LqtParallel,
            DecoderArg::Eo => DecoderKind::EncoderOutputParallel,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Qctc,
    Ce,
}

impl From<LossArg> for StudentObjective {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Qctc => StudentObjective::Qctc,
            LossArg::Ce => StudentObjective::Ce,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ReadingArg {
    Collapse,
    Positional,
}

impl From<ReadingArg> for NarReading {
    fn from(r: ReadingArg) -> Self {
        match r {
            ReadingArg::Collapse => NarReading::Collapse,
            ReadingArg::Positional => NarReading::Positional,
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// JSON file with optional `task`, `model`, `train` and `bench` sections.
    /// Flags override it; it overrides built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// copy, grounding, jitter or multiref.
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    /// Dataset seed [default: $QCTC_SEED or 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples [default: 2000].
    #[arg(long = "train")]
    n_train: Option<usize>,
    /// Validation samples [default: 200].
    #[arg(long = "val")]
    n_val: Option<usize>,
    /// Test samples [default: 200].
    #[arg(long = "test")]
    n_test: Option<usize>,
    /// Shortest content length.
    #[arg(long)]
    min_len: Option<usize>,
    /// Longest content length.
    #[arg(long)]
    max_len: Option<usize>,
    /// Content symbols (copy, jitter, multiref).
    #[arg(long = "symbols")]
    n_symbols: Option<usize>,
    /// Query count every target must fit.
    #[arg(long = "queries")]
    n_queries: Option<usize>,
    /// Forbid equal adjacent content tokens (copy, jitter).
    #[arg(long)]
    distinct_adjacent: bool,
    /// Coordinate grid size (grounding) [default: 16].
    #[arg(long)]
    grid: Option<usize>,
    /// Record labels (grounding) [default: 8].
    #[arg(long = "labels")]
    n_labels: Option<usize>,
    /// Fewest records per grounding input [default: 2].
    #[arg(long)]
    min_records: Option<usize>,
    /// Most records per grounding input [default: 3].
    #[arg(long)]
    max_records: Option<usize>,
    /// Most filler tokens before a jitter target, at most 2 [default: 2].
    #[arg(long)]
    max_jitter: Option<usize>,
    /// Reference orderings per multiref input.
    #[arg(long)]
    k_refs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Learnable query count [default: the dataset's].
    #[arg(long = "queries")]
    n_queries: Option<usize>,
    /// Model width [default: 64].
    #[arg(long)]
    d_model: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long = "heads")]
    n_heads: Option<usize>,
    /// Encoder layers [default: 2].
    #[arg(long = "enc-layers")]
    n_enc_layers: Option<usize>,
    /// Decoder layers [default: 2].
    #[arg(long = "dec-layers")]
    n_dec_layers: Option<usize>,
    /// Feed-forward width as a multiple of d_model [default: 4].
    #[arg(long)]
    ffn_mult: Option<f64>,
    /// Longest autoregressive output [default: longest dataset target].
    #[arg(long)]
    max_tgt_len: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct OptimArgs {
    /// Passes over the training split [default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Examples per optimizer step [default: 16].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 3e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay [default: 0].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm cap [default: 1].
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Training seed [default: $QCTC_SEED or 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    decoder: DecoderArg,
    /// Student objective (ignored for --decoder ar).
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Confirms the dataset holds teacher targets.
    #[arg(long)]
    distilled: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Checkpoint directory; the report goes to `report.json` inside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct DistillArgs {
    /// Autoregressive checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Teacher beam width; 1 is greedy.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// greedy, prefix-beam:W or ar-beam:W.
    #[arg(long, default_value = "greedy", value_parser = parse_method)]
    method: DecodeMethod,
    /// How a parallel grid is read [default: from the training objective].
    #[arg(long, value_enum)]
    reading: Option<ReadingArg>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Autoregressive checkpoint directory.
    #[arg(long)]
    ar: PathBuf,
    /// Parallel checkpoint directory.
    #[arg(long)]
    nar: PathBuf,
    /// Comma-separated target lengths [default: 2,5,10,20].
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Discarded decodes per length [default: 10].
    #[arg(long)]
    warmup: Option<usize>,
    /// Timed decodes per length, at least 50 [default: 200].
    #[arg(long)]
    timed: Option<usize>,
    /// Source length of the random benchmark inputs [default: 8].
    #[arg(long)]
    src_len: Option<usize>,
    /// Source sampling seed [default: $QCTC_SEED or 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `bench.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ErrorPropArgs {
    /// Autoregressive checkpoint directory.
    #[arg(long)]
    ar: PathBuf,
    /// Parallel checkpoint directory.
    #[arg(long)]
    nar: PathBuf,
    /// Grounding dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Output directory for `error_prop.csv` and `error_prop.json`.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated query counts.
    #[arg(long, value_delimiter = ',', required = true)]
    n_list: Vec<usize>,
    /// Student objective [default: qctc].
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// train, val or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Timed decodes per query count.
    #[arg(long, default_value_t = 200)]
    latency_repeats: usize,
    /// Output directory for `sweep.csv` and `sweep.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<DecodeMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        e if e.is_infeasible() => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::ErrorProp(a) => cmd_error_prop(a),
        Command::SweepQueries(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qctc: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::usage(format!("cannot write {}: {e}", path.display()))
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::usage(format!("{} already exists; pass --force to overwrite", p.display()))),
        None => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let kind = match a.task {
        Some(k) => k,
        None => file.task_kind()?.ok_or_else(|| Error::usage("--task is required"))?,
    };
    let base = TaskSpec::new(kind, settings::default_seed()?);
    let mut flags = Map::new();
    put(&mut flags, "seed", a.seed);
    put(&mut flags, "n_train", a.n_train);
    put(&mut flags, "n_val", a.n_val);
    put(&mut flags, "n_test", a.n_test);
    put(&mut flags, "min_len", a.min_len);
    put(&mut flags, "max_len", a.max_len);
    put(&mut flags, "n_symbols", a.n_symbols);
    put(&mut flags, "n_queries", a.n_queries);
    put(&mut flags, "distinct_adjacent", a.distinct_adjacent.then_some(true));
    put(&mut flags, "grid", a.grid);
    put(&mut flags, "n_labels", a.n_labels);
    put(&mut flags, "min_records", a.min_records);
    put(&mut flags, "max_records", a.max_records);
    put(&mut flags, "max_jitter", a.max_jitter);
    put(&mut flags, "k_refs", a.k_refs);
    let mut spec: TaskSpec = settings::layered(&base, file.section("task"), &flags)?;
    spec.kind = kind;
    let ds = generate(&spec)?;
    ds.save(&a.out, a.common.force)?;
    print_json(&json!({
        "out": a.out,
        "train": ds.train.len(),
        "val": ds.val.len(),
        "test": ds.test.len(),
        "spec": spec,
    }));
    Ok(())
}

fn model_flags(m: &ModelArgs) -> Map<String, Value> {
    let mut f = Map::new();
    put(&mut f, "n_queries", m.n_queries);
    put(&mut f, "d_model", m.d_model);
    put(&mut f, "n_heads", m.n_heads);
    put(&mut f, "n_enc_layers", m.n_enc_layers);
    put(&mut f, "n_dec_layers", m.n_dec_layers);
    put(&mut f, "ffn_mult", m.ffn_mult);
    put(&mut f, "max_tgt_len", m.max_tgt_len);
    f
}

fn optim_flags(o: &OptimArgs, loss: Option<LossArg>) -> Map<String, Value> {
    let mut f = Map::new();
    put(&mut f, "epochs", o.epochs);
    put(&mut f, "batch_size", o.batch_size);
    put(&mut f, "lr", o.lr);
    put(&mut f, "weight_decay", o.weight_decay);
    put(&mut f, "grad_clip", o.grad_clip);
    put(&mut f, "seed", o.seed);
    put(&mut f, "loss_kind", loss.map(StudentObjective::from));
    f
}

fn effective_model(
    file: &ConfigFile,
    data: &Dataset,
    kind: DecoderKind,
    m: &ModelArgs,
) -> Result<ModelConfig> {
    let base = model_config_for(data, kind, data.header.spec.n_queries);
    let mut c: ModelConfig = settings::layered_restricted(&base, file.section("model"), &model_flags(m), settings::MODEL_KEYS)?;
    c.decoder_kind = kind;
    Ok(c)
}

fn effective_train(file: &ConfigFile, o: &OptimArgs, loss: Option<LossArg>) -> Result<TrainConfig> {
    let base = TrainConfig {
        seed: settings::default_seed()?,
        ..TrainConfig::default()
    };
    settings::layered(&base, file.section("train"), &optim_flags(o, loss))
}

fn checkpoint_extra(role: &str, objective: Option<StudentObjective>, data: &Path) -> Value {
    json!({ "role": role, "objective": objective, "data": data })
}

fn checkpoint_reading(extra: &Option<Value>) -> NarReading {
    let objective = extra
        .as_ref()
        .and_then(|e| e.get("objective"))
        .and_then(|o| serde_json::from_value::<StudentObjective>(o.clone()).ok());
    objective.map(NarReading::for_objective).unwrap_or(NarReading::Collapse)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let data = Dataset::load(&a.data)?;
    let kind = DecoderKind::from(a.decoder);
    if a.distilled && !data.header.distilled {
        return Err(Error::usage(format!("{} does not hold distilled targets", a.data.display())));
    }
    let report_path = a.out.join("report.json");
    refuse_existing(&[a.out.join("model.json"), report_path.clone()], a.common.force)?;
    let model = effective_model(&file, &data, kind, &a.model)?;
    let mut train = effective_train(&file, &a.optim, a.loss)?;
    train.distill = a.distilled || data.header.distilled;
    let (params, report) = if kind == DecoderKind::Autoregressive {
        train_teacher(&data, &model, &train)?
    } else {
        train_student(&data, &model, &train)?
    };
    let objective = kind.is_parallel().then_some(train.loss_kind);
    save_with_extra(&params, &a.out, Some(checkpoint_extra(&report.role, objective, &a.data)))?;
    write_json(&report_path, &report)?;
    print_json(&report);
    Ok(())
}

fn cmd_distill(a: DistillArgs) -> Result<()> {
    let teacher = load(&a.teacher)?;
    let data = Dataset::load(&a.data)?;
    let (out, stats) = distill_targets(&teacher, &data, a.beam)?;
    out.save(&a.out, a.force)?;
    print_json(&json!({
        "teacher": a.teacher,
        "data": a.data,
        "out": a.out,
        "beam": a.beam,
        "stats": stats,
    }));
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(ModelParams, NarReading)> {
    let (p, extra) = load_with_extra(dir)?;
    let reading = checkpoint_reading(&extra);
    Ok((p, reading))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if let Some(out) = &a.out {
        refuse_existing(std::slice::from_ref(out), a.force)?;
    }
    let (params, stored) = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let reading = a.reading.map(NarReading::from).unwrap_or(stored);
    let metrics = evaluate(&params, &data, a.split, a.method, reading)?;
    let report = json!({
        "checkpoint": a.checkpoint,
        "data": a.data,
        "decoder_kind": params.config().decoder_kind,
        "reading": reading,
        "metrics": metrics,
    });
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let path = a.out.join("bench.json");
    refuse_existing(std::slice::from_ref(&path), a.common.force)?;
    let mut flags = Map::new();
    put(&mut flags, "lengths", a.lengths);
    put(&mut flags, "warmup", a.warmup);
    put(&mut flags, "timed", a.timed);
    put(&mut flags, "src_len", a.src_len);
    put(&mut flags, "seed", a.seed);
    let base = BenchConfig {
        seed: settings::default_seed()?,
        ..BenchConfig::default()
    };
    let cfg: BenchConfig = settings::layered(&base, file.section("bench"), &flags)?;
    let (ar, _) = load_checkpoint(&a.ar)?;
    let (nar, _) = load_checkpoint(&a.nar)?;
    let report = bench(&ar, &nar, &cfg)?;
    let out = json!({ "ar": a.ar, "nar": a.nar, "report": report });
    write_json(&path, &out)?;
    print_json(&out);
    Ok(())
}

fn cmd_error_prop(a: ErrorPropArgs) -> Result<()> {
    let csv_path = a.out.join("error_prop.csv");
    let json_path = a.out.join("error_prop.json");
    refuse_existing(&[csv_path.clone(), json_path.clone()], a.force)?;
    let (ar, _) = load_checkpoint(&a.ar)?;
    let (nar, reading) = load_checkpoint(&a.nar)?;
    let data = Dataset::load(&a.data)?;
    if data.header.spec.kind != TaskKind::Grounding {
        return Err(Error::usage("error-prop needs a grounding dataset"));
    }
    let report = error_propagation(&ar, &nar, reading, &data, a.split)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    report.write_csv(&csv_path)?;
    let out = json!({
        "ar": a.ar,
        "nar": a.nar,
        "data": a.data,
        "split": a.split.name(),
        "nar_reading": reading,
        "ar_non_decreasing": report.ar_non_decreasing(),
        "report": report,
    });
    write_json(&json_path, &out)?;
    print_json(&out);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let csv_path = a.out.join("sweep.csv");
    let json_path = a.out.join("sweep.json");
    refuse_existing(&[csv_path.clone(), json_path.clone()], a.common.force)?;
    let data = Dataset::load(&a.data)?;
    let model = effective_model(&file, &data, DecoderKind::LqtParallel, &a.model)?;
    let train = effective_train(&file, &a.optim, a.loss)?;
    let report = sweep_queries(&data, &model, &train, &a.n_list, a.split, a.latency_repeats)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    report.write_csv(&csv_path)?;
    let out = json!({ "data": a.data, "report": report });
    write_json(&json_path, &out)?;
    print_json(&out);
    Ok(())
}
