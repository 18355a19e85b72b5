mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dams_core::clip::{clip_binary_probs, pseudo_labels, ClipConfig};
use dams_core::data::{read_feature_file, synthesize, write_feature_file, Dataset, SyntheticSpec, VideoRecord};
use dams_core::gradcheck::GradCheckReport;
use dams_core::gradsuite::{check_component, COMPONENTS, DEFAULT_TOLERANCE};
use dams_core::train::{
    ablate, evaluate, score_video, standard_variants, Checkpoint, TrainConfig, Trainer, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
use dams_core::{Ablation, ModelConfig, Tensor};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage error (bad flags or arguments)
  3  configuration error (bad or mismatched config file)
  4  I/O error (missing path, unreadable or unwritable file)
  5  format error (corrupt feature file, checkpoint, CSV or JSON)
  6  non-finite value during training
  7  data error (inconsistent dataset, missing labels, shape mismatch)
  8  gradient check failed

Errors are printed to stderr as `error[<category>]: <message>`.
Set DAMS_LOG to error, warn, info or debug to control logging.";

#[derive(Parser)]
#[command(name = "dams", version, about = "Weakly supervised video anomaly scoring", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory and write a checkpoint plus JSON log.
    Train(TrainArgs),
    /// Frame-level AUC/AP of a checkpoint on one split, as a JSON report.
    Eval(EvalArgs),
    /// Per-frame scores as CSV (video_id, frame, score, gt).
    Score(ScoreArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Render score curves from a score CSV to SVG.
    Plot(PlotArgs),
    /// Finite-difference gradient checks for every module.
    Gradcheck(GradcheckArgs),
    /// Print format versions and the resolved configuration.
    Info(InfoArgs),
    /// Train every single-switch-off variant over several seeds.
    Ablate(AblateArgs),
    /// Pseudo probabilities from precomputed frame and text embeddings.
    Pseudo(PseudoArgs),
}

#[derive(Args, Clone, Default)]
struct Switches {
    #[arg(long)]
    no_amtpn: bool,
    #[arg(long)]
    no_cbam: bool,
    /// Channel gate forced to 1.
    #[arg(long)]
    no_ca: bool,
    /// Temporal gate forced to 1.
    #[arg(long)]
    no_sa: bool,
    /// Uniform fusion weights.
    #[arg(long)]
    no_aff: bool,
    #[arg(long)]
    no_tce: bool,
    /// Single scale {1}.
    #[arg(long)]
    no_tpp: bool,
    #[arg(long)]
    no_l_pse: bool,
    #[arg(long)]
    no_l_trip: bool,
}

impl Switches {
    fn apply(&self, a: &mut Ablation) {
        let pairs = [
            (self.no_amtpn, &mut a.use_amtpn),
            (self.no_cbam, &mut a.use_cbam),
            (self.no_ca, &mut a.use_ca),
            (self.no_sa, &mut a.use_sa),
            (self.no_aff, &mut a.use_aff),
            (self.no_tce, &mut a.use_tce),
            (self.no_tpp, &mut a.use_tpp),
            (self.no_l_pse, &mut a.use_l_pse),
            (self.no_l_trip, &mut a.use_l_trip),
        ];
        for (off, flag) in pairs {
            if off {
                *flag = false;
            }
        }
    }

    fn any(&self) -> bool {
        let mut a = Ablation::default();
        self.apply(&mut a);
        a != Ablation::default()
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Strict JSON training config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Small model (16 channels, one residual block) when no config is given.
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    validate_every: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    switches: Switches,
    /// Continue from a checkpoint; its config is reused and only --iters may change.
    #[arg(long, conflicts_with_all = ["config", "desk", "seed", "validate_every"])]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct ModelSource {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Use the latest weights instead of the best validation snapshot.
    #[arg(long)]
    latest: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    src: ModelSource,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-frame scores as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    src: ModelSource,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON synthetic spec; unknown keys are rejected.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_videos: Option<usize>,
    #[arg(long)]
    test_videos: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
}

#[derive(Args)]
struct PlotArgs {
    /// CSV written by `score` or `eval --csv`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Videos to draw (repeatable); all when omitted.
    #[arg(long = "video")]
    videos: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seeds 0..N per component.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    /// Restrict to these components (repeatable).
    #[arg(long = "component")]
    components: Vec<String>,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// JSON table of rows, one per variant.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Variant labels such as `full` or `no-amtpn` (repeatable); the standard set when omitted.
    #[arg(long = "variant")]
    variants: Vec<String>,
}

#[derive(Args)]
struct PseudoArgs {
    /// Frame embeddings `[T, De]` in feature-file format.
    #[arg(long)]
    frames: PathBuf,
    /// Anomaly-class text embeddings `[N, De]`.
    #[arg(long)]
    texts: PathBuf,
    /// Newline-separated class names, one per text row.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Output probabilities `[T]`.
    #[arg(long)]
    out: PathBuf,
    /// Also write thresholded 0/1 labels `[T]`.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Core(dams_core::Error),
    Io(PathBuf, std::io::Error),
    Csv(PathBuf, csv::Error),
    Usage(String),
    CheckFailed(String),
}

impl From<dams_core::Error> for CliError {
    fn from(e: dams_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Io(..) => "io",
            CliError::Csv(_, e) if e.is_io_error() => "io",
            CliError::Csv(..) => "format",
            CliError::Usage(_) => "usage",
            CliError::CheckFailed(_) => "gradcheck",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "format" => 5,
            "non-finite" => 6,
            "data" | "dimension" | "metric" => 7,
            "gradcheck" => 8,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Csv(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Usage(m) | CliError::CheckFailed(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

/// Config from file, or defaults sized to the dataset, with flag overrides.
fn resolve_config(args: &ConfigArgs, switches: Option<&Switches>, input_dim: Option<usize>) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => {
            let mut c = TrainConfig::default();
            if let Some(d) = input_dim {
                c.model = if args.desk { ModelConfig::desk(d) } else { ModelConfig { input_dim: d, ..c.model } };
            }
            c
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.iters {
        cfg.max_iterations = n;
    }
    if let Some(n) = args.validate_every {
        cfg.validate_every = n;
    }
    if let Some(sw) = switches {
        sw.apply(&mut cfg.ablation);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_records(ds: &Dataset, split: Split) -> &[VideoRecord] {
    match split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    }
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let data = Dataset::load(&a.dataset)?;
    let (cfg, ck) = match &a.resume {
        Some(p) => {
            if a.switches.any() {
                return Err(CliError::Usage("ablation switches cannot change on --resume".into()));
            }
            let ck = Checkpoint::load(p)?;
            let mut cfg = ck.config.clone();
            if let Some(n) = a.cfg.iters {
                cfg.max_iterations = n;
            }
            (cfg, Some(ck))
        }
        None => (resolve_config(&a.cfg, Some(&a.switches), data.input_dim())?, None),
    };
    let mut trainer = match &ck {
        Some(ck) => Trainer::resume(&cfg, ck, &data.train, &data.test)?,
        None => Trainer::new(&cfg, &data.train, &data.test)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| CliError::Io(a.out.clone(), e))?;
    let log_path = a.out.join("log.jsonl");
    let log_file = if ck.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    };
    let mut log_file = log_file.map_err(|e| CliError::Io(log_path.clone(), e))?;
    let stdout = std::io::stdout();
    let mut io_err = None;
    trainer.run(|line| {
        let json = serde_json::to_string(line)?;
        if let Err(e) = writeln!(log_file, "{json}").and_then(|_| writeln!(stdout.lock(), "{json}")) {
            io_err.get_or_insert(e);
        }
        Ok(())
    })?;
    if let Some(e) = io_err {
        return Err(CliError::Io(log_path, e));
    }
    write_file(&a.out.join("config.json"), &to_json(&cfg))?;
    let ck_path = a.out.join("checkpoint.json");
    trainer.checkpoint().save(&ck_path)?;
    if let Some(b) = trainer.best() {
        info!("best validation auc {:.4} ap {:.4} at iteration {}", b.auc, b.ap, b.iteration);
    }
    info!("wrote {}", ck_path.display());
    Ok(())
}

fn scored(src: &ModelSource) -> CliResult<(Dataset, Vec<Vec<f64>>, dams_core::train::EvalReport)> {
    let ck = Checkpoint::load(&src.checkpoint)?;
    let (model, store) = ck.model(!src.latest)?;
    let data = Dataset::load(&src.dataset)?;
    let (report, scores) = evaluate(&model, &store, split_records(&data, src.split))?;
    Ok((data, scores, report))
}

fn write_scores_csv(path: &Path, records: &[VideoRecord], scores: &[Vec<f64>]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    let csv_err = |e| CliError::Csv(path.to_path_buf(), e);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["video_id", "frame", "score", "gt"]).map_err(csv_err)?;
    for (rec, s) in records.iter().zip(scores) {
        for (t, v) in s.iter().enumerate() {
            let gt = rec.frame_gt.as_ref().map(|g| g[t].to_string()).unwrap_or_default();
            w.write_record([rec.id.as_str(), &t.to_string(), &v.to_string(), &gt]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (data, scores, report) = scored(&a.src)?;
    let json = to_json(&report);
    println!("{json}");
    if let Some(p) = &a.out {
        write_file(p, &json)?;
    }
    if let Some(p) = &a.csv {
        write_scores_csv(p, split_records(&data, a.src.split), &scores)?;
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> CliResult {
    // scoring does not need ground truth, so it bypasses `evaluate`
    let ck = Checkpoint::load(&a.src.checkpoint)?;
    let (model, store) = ck.model(!a.src.latest)?;
    let data = Dataset::load(&a.src.dataset)?;
    let records = split_records(&data, a.src.split);
    let scores = records.iter().map(|r| score_video(&model, &store, r)).collect::<Result<Vec<_>, _>>()?;
    write_scores_csv(&a.out, records, &scores)
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(p.clone(), e))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| CliError::Core(dams_core::Error::Config(format!("{}: {e}", p.display()))))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.train_videos {
        spec.train_videos = n;
    }
    if let Some(n) = a.test_videos {
        spec.test_videos = n;
    }
    if let Some(v) = a.snr {
        spec.snr = v;
    }
    let ds = synthesize(&spec)?;
    ds.save(&a.out)?;
    write_file(&a.out.join("spec.json"), &to_json(&spec))?;
    info!("wrote {} train / {} test videos to {}", ds.train.len(), ds.test.len(), a.out.display());
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> CliResult {
    let csv_err = |e| CliError::Csv(a.scores.clone(), e);
    let mut r = csv::Reader::from_path(&a.scores).map_err(csv_err)?;
    let mut order = Vec::new();
    let mut by_id: BTreeMap<String, plot::Curve> = BTreeMap::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let bad = |what: &str| {
            CliError::Core(dams_core::Error::Data(format!("{}: bad {what} in {row:?}", a.scores.display())))
        };
        let id = row.get(0).ok_or_else(|| bad("row"))?.to_string();
        let score: f64 = row.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("score"))?;
        let gt: f64 = match row.get(3) {
            Some("") | None => 0.0,
            Some(s) => s.parse().map_err(|_| bad("gt"))?,
        };
        let curve = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            plot::Curve { id, scores: Vec::new(), gt: Vec::new() }
        });
        curve.scores.push(score);
        curve.gt.push(gt);
    }
    let wanted: Vec<String> = if a.videos.is_empty() { order } else { a.videos.clone() };
    let curves = wanted
        .iter()
        .map(|id| {
            by_id.remove(id).ok_or_else(|| {
                CliError::Core(dams_core::Error::Data(format!("video {id} not in {}", a.scores.display())))
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_file(&a.out, &plot::render(&curves))
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let names: Vec<&str> =
        if a.components.is_empty() { COMPONENTS.to_vec() } else { a.components.iter().map(String::as_str).collect() };
    let mut failed: Vec<GradCheckReport> = Vec::new();
    for name in names {
        for seed in 0..a.seeds {
            let rep = check_component(name, seed, a.tol)?;
            println!("{}", serde_json::to_string(&rep).expect("report serializes"));
            if !rep.passed {
                failed.push(rep);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<_> = failed.iter().map(|r| r.name.as_str()).collect();
        Err(CliError::CheckFailed(format!("{} checks above tolerance: {}", failed.len(), names.join(", "))))
    }
}

fn cmd_info(a: InfoArgs) -> CliResult {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let info = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "feature_file": {
            "magic": String::from_utf8_lossy(dams_core::data::MAGIC),
            "version": dams_core::data::FORMAT_VERSION,
        },
        "checkpoint": { "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION },
        "config_hash": cfg.hash(),
        "config": cfg,
    });
    println!("{}", to_json(&info));
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let data = Dataset::load(&a.dataset)?;
    let cfg = resolve_config(&a.cfg, None, data.input_dim())?;
    let variants = if a.variants.is_empty() {
        standard_variants()
    } else {
        a.variants.iter().map(|l| Ablation::from_label(l)).collect::<Result<Vec<_>, _>>()?
    };
    let rows = ablate(&cfg, &data, &variants, &a.seeds)?;
    let json = to_json(&rows);
    println!("{json}");
    write_file(&a.out, &json)
}

fn cmd_pseudo(a: PseudoArgs) -> CliResult {
    let mut cfg = ClipConfig::default();
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = a.scale {
        cfg.scale = v;
    }
    if let Some(v) = a.threshold {
        cfg.threshold = v;
    }
    cfg.validate()?;
    let frames = read_feature_file(&a.frames)?;
    let texts = read_feature_file(&a.texts)?;
    if let Some(p) = &a.classes {
        let names = fs::read_to_string(p).map_err(|e| CliError::Io(p.clone(), e))?;
        let n = names.lines().filter(|l| !l.trim().is_empty()).count();
        let rows = texts.shape().first().copied().unwrap_or(0);
        if n != rows {
            return Err(CliError::Core(dams_core::Error::Data(format!(
                "{} lists {n} classes but {} has {rows} text embeddings",
                p.display(),
                a.texts.display()
            ))));
        }
    }
    let probs = clip_binary_probs(&frames, &texts, &cfg)?;
    if let Some(p) = &a.labels_out {
        write_feature_file(p, &Tensor::from_vec(pseudo_labels(&probs, cfg.threshold)))?;
    }
    write_feature_file(&a.out, &Tensor::from_vec(probs))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAMS_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Info(a) => cmd_info(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Pseudo(a) => cmd_pseudo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
