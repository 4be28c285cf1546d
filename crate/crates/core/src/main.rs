use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use serkit::augment::{self, ImageAugConfig, ResizePolicy};
use serkit::dataset::{
    self, class_histogram, histogram_csv, CodeTable, Corpus, Manifest, Split, SplitMode, SplitSpec, N_CLASSES,
};
use serkit::dsp::{FeatureConfig, FeatureKind};
use serkit::eval;
use serkit::export;
use serkit::features::{self, FeatureStore};
use serkit::models::{self, build_model_with, Checkpoint, ModelKind, ModelOptions, ModelState, SvmConfig};
use serkit::rng::{self, domain};
use serkit::train::{self, TrainConfig};
use serkit::{audio, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "serkit", version, about = "Speech emotion recognition toolkit")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "SERKIT_SEED", default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic 8-class corpus and its manifest.
    Synth(SynthArgs),
    /// Build a manifest from RAVDESS and/or SAVEE directories.
    Manifest(ManifestArgs),
    /// Assign train/val/test splits.
    Split(SplitArgs),
    /// Extract log-mel or MFCC features for every manifest entry.
    Features(FeaturesArgs),
    /// Write before/after images of the spectrogram augmentation.
    AugmentPreview(PreviewArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Render a waveform CSV or a spectrogram PGM/CSV.
    Dump(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    per_class: u64,
    #[arg(long, default_value_t = audio::DEFAULT_SAMPLE_RATE)]
    sample_rate: u32,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    ravdess: Option<PathBuf>,
    #[arg(long)]
    savee: Option<PathBuf>,
    /// `code=label` lines replacing the built-in RAVDESS table.
    #[arg(long)]
    ravdess_table: Option<PathBuf>,
    /// `prefix=label` lines replacing the built-in SAVEE table.
    #[arg(long)]
    savee_table: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.90)]
    train: f64,
    #[arg(long, default_value_t = 0.05)]
    val: f64,
    #[arg(long, default_value_t = 0.05)]
    test: f64,
    /// random | by-actor
    #[arg(long, default_value = "random")]
    split_mode: String,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// logmel | mfcc
    #[arg(long, default_value = "logmel")]
    kind: String,
    #[arg(long, default_value_t = 128)]
    mels: usize,
    #[arg(long, default_value_t = 20)]
    mfcc: usize,
    #[arg(long, default_value_t = audio::DEFAULT_SAMPLE_RATE)]
    sample_rate: u32,
    /// Worker threads; 0 uses all available cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// svm | lstm | cnn_lite | cnn34
    #[arg(long)]
    model: String,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Epochs per stage.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    lr_decay: f64,
    #[arg(long)]
    mixup: bool,
    #[arg(long, default_value_t = 0.4)]
    mixup_alpha: f64,
    /// Rotation, zoom and brightness augmentation (CNNs).
    #[arg(long)]
    aug: bool,
    /// Square CNN input sizes, comma separated; without --progressive only the first is used.
    #[arg(long, default_value = "128,256")]
    stage_sizes: String,
    /// Train one stage per size in --stage-sizes.
    #[arg(long)]
    progressive: bool,
    /// Checkpoint with canonical ResNet tensor names to start a CNN from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = models::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = models::DEFAULT_DROPOUT)]
    dropout: f64,
    #[arg(long, default_value_t = 1.0)]
    svm_c: f64,
    /// RBF width; default 1 / (d * variance of standardized features).
    #[arg(long)]
    svm_gamma: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct DumpArgs {
    /// WAV file to render as a waveform.
    #[arg(long, conflicts_with = "spec")]
    wav: Option<PathBuf>,
    /// WAV file (or SERT feature file) to render as a spectrogram.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    mels: usize,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn out_dir(cli_out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli_out.clone().ok_or_else(|| usage("--out is required for this command"))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_config(dir: &Path, command: &str, seed: u64, pairs: &[(&str, String)]) -> Result<()> {
    let mut text = format!("command={command}\nseed={seed}\n");
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    write_file(&dir.join("config.txt"), text)
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    let manifest = dataset::generate_synthetic_corpus(&dir, a.per_class as usize, cli.seed, a.sample_rate)?;
    manifest.write(&dir.join("manifest.csv"))?;
    write_file(&dir.join("histogram.csv"), histogram_csv(&class_histogram(&manifest.entries)))?;
    write_config(
        &dir,
        "synth",
        cli.seed,
        &[("per_class", a.per_class.to_string()), ("sample_rate", a.sample_rate.to_string())],
    )?;
    log::info!("wrote {} clips to {}", manifest.len(), dir.display());
    Ok(())
}

fn cmd_manifest(cli: &Cli, a: &ManifestArgs) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    if a.ravdess.is_none() && a.savee.is_none() {
        return Err(usage("give --ravdess and/or --savee"));
    }
    let mut entries = Vec::new();
    let mut failed = 0;
    for (root, corpus, table) in [
        (&a.ravdess, Corpus::Ravdess, &a.ravdess_table),
        (&a.savee, Corpus::Savee, &a.savee_table),
    ] {
        let Some(root) = root else { continue };
        let table = match (table, corpus) {
            (Some(p), _) => CodeTable::load(p)?,
            (None, Corpus::Ravdess) => CodeTable::ravdess_default(),
            (None, _) => CodeTable::savee_default(),
        };
        let root = fs::canonicalize(root).map_err(|e| Error::io(root, e))?;
        let base = fs::canonicalize(&dir).map_err(|e| Error::io(&dir, e))?;
        let (found, failures) = dataset::scan_corpus(&root, corpus, &table, &base)?;
        for (path, err) in &failures {
            log::warn!("skipping {}: {err}", path.display());
        }
        failed += failures.len();
        entries.extend(found);
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let manifest = Manifest::new(entries);
    manifest.write(&dir.join("manifest.csv"))?;
    write_file(&dir.join("histogram.csv"), histogram_csv(&class_histogram(&manifest.entries)))?;
    let opt = |p: &Option<PathBuf>| p.as_deref().map(show).unwrap_or_default();
    write_config(
        &dir,
        "manifest",
        cli.seed,
        &[
            ("ravdess", opt(&a.ravdess)),
            ("savee", opt(&a.savee)),
            ("ravdess_table", opt(&a.ravdess_table)),
            ("savee_table", opt(&a.savee_table)),
        ],
    )?;
    log::info!("manifest with {} entries ({failed} files skipped)", manifest.len());
    Ok(())
}

fn cmd_split(cli: &Cli, a: &SplitArgs) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    let mode = SplitMode::from_str(&a.split_mode)?;
    let spec = SplitSpec {
        train_frac: a.train,
        val_frac: a.val,
        test_frac: a.test,
        seed: cli.seed,
    };
    let src = Manifest::read(&a.manifest)?;
    let mut split = dataset::split_manifest(&src, &spec, mode)?;
    // Keep audio paths valid from the new manifest location.
    let (from, to) = (manifest_dir(&a.manifest), dir.clone());
    let same = fs::canonicalize(&from).ok() == fs::canonicalize(&to).ok();
    if !same {
        for e in &mut split.entries {
            let p = dataset::resolve_path(&from, &e.path);
            e.path = fs::canonicalize(&p).unwrap_or(p).to_string_lossy().into_owned();
        }
    }
    split.write(&dir.join("manifest.csv"))?;
    let mut hist = String::from("label,train,val,test\n");
    let per = |s: Split| class_histogram(&split.in_split(s).cloned().collect::<Vec<_>>());
    let (tr, va, te) = (per(Split::Train), per(Split::Val), per(Split::Test));
    for (i, l) in dataset::EmotionLabel::ALL.iter().enumerate().take(N_CLASSES) {
        hist.push_str(&format!("{},{},{},{}\n", l.name(), tr[i], va[i], te[i]));
    }
    write_file(&dir.join("histogram.csv"), hist)?;
    write_config(
        &dir,
        "split",
        cli.seed,
        &[
            ("manifest", show(&a.manifest)),
            ("train", a.train.to_string()),
            ("val", a.val.to_string()),
            ("test", a.test.to_string()),
            ("split_mode", mode.to_string()),
        ],
    )?;
    log::info!(
        "split {} entries: train {} val {} test {}",
        split.len(),
        tr.iter().sum::<usize>(),
        va.iter().sum::<usize>(),
        te.iter().sum::<usize>()
    );
    Ok(())
}

fn feature_config(kind: &str, mels: usize, mfcc: usize, sample_rate: u32) -> Result<FeatureConfig> {
    let mut cfg = FeatureConfig {
        kind: FeatureKind::from_str(kind)?,
        sample_rate_hz: sample_rate,
        n_mfcc: mfcc,
        ..FeatureConfig::default()
    };
    cfg.mel.n_mels = mels;
    cfg.stft.validate()?;
    cfg.mel.validate(sample_rate)?;
    if mfcc == 0 || mfcc > mels {
        return Err(usage(format!("--mfcc must lie in 1..={mels}")));
    }
    Ok(cfg)
}

fn cmd_features(cli: &Cli, a: &FeaturesArgs) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    let cfg = feature_config(&a.kind, a.mels, a.mfcc, a.sample_rate)?;
    let manifest = Manifest::read(&a.manifest)?;
    let report = features::extract_all(&manifest, &manifest_dir(&a.manifest), &dir, &cfg, a.jobs)?;
    write_config(
        &dir,
        "features",
        cli.seed,
        &[
            ("manifest", show(&a.manifest)),
            ("kind", a.kind.clone()),
            ("mels", a.mels.to_string()),
            ("mfcc", a.mfcc.to_string()),
            ("sample_rate", a.sample_rate.to_string()),
            ("jobs", a.jobs.to_string()),
        ],
    )?;
    log::info!("extracted {} feature files", report.written);
    match report.failures.into_iter().next() {
        None => Ok(()),
        Some((path, err)) => {
            log::error!("{path} and possibly others failed");
            Err(err)
        }
    }
}

fn cmd_preview(cli: &Cli, a: &PreviewArgs) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    let manifest = Manifest::read(&a.manifest)?;
    let store = FeatureStore::open(&a.features)?;
    let cfg = ImageAugConfig::default();
    let mut entries: Vec<_> = manifest.in_split(Split::Train).collect();
    if entries.is_empty() {
        entries = manifest.entries.iter().collect();
    }
    for (i, e) in entries.iter().take(a.count).enumerate() {
        let square = augment::to_model_square(&store.load(e)?, a.size)?;
        let mut r = rng::item_stream(cli.seed, i as u64, domain::PREVIEW);
        let after = augment::brightness_shift(&augment::random_affine(&square, &cfg, &mut r)?, &cfg, &mut r);
        // Squares are bands x frames; render with low bands at the bottom.
        for (tag, img) in [("before", &square), ("after", &after)] {
            let view = export::spectrogram_image(&img.transpose2()?)?;
            write_file(&dir.join(format!("preview_{i}_{tag}.pgm")), export::pgm16(&view)?)?;
        }
    }
    write_config(
        &dir,
        "augment-preview",
        cli.seed,
        &[
            ("manifest", show(&a.manifest)),
            ("features", show(&a.features)),
            ("count", a.count.to_string()),
            ("size", a.size.to_string()),
        ],
    )
}

fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad stage size {s:?}"))))
        .collect()
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    let kind = ModelKind::from_str(&a.model)?;
    let sizes = parse_sizes(&a.stage_sizes)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        lr_decay: a.lr_decay,
        mixup_enabled: a.mixup,
        mixup_alpha: a.mixup_alpha,
        aug_enabled: a.aug,
        resize_policy: ResizePolicy { stage_sizes: sizes },
        seed: cli.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    if a.progressive && !kind.is_cnn() {
        return Err(usage("--progressive applies to CNN models only"));
    }
    let manifest = Manifest::read(&a.manifest)?;
    let store = FeatureStore::open(&a.features)?;
    let (train_set, val_set) = train::load_splits(&manifest, &store)?;
    let width = train_set
        .first()
        .ok_or_else(|| Error::EmptySplit("train".into()))?
        .0
        .shape2()?
        .1;
    let n_mfcc = store.config.get("n_mfcc").and_then(|v| v.parse().ok()).unwrap_or(20);
    let opts = ModelOptions {
        n_mels: width,
        lstm_hidden: a.hidden,
        lstm_dropout: a.dropout,
        cnn_input_size: cfg.resize_policy.first(),
        n_mfcc: n_mfcc.min(width),
        svm: SvmConfig {
            c: a.svm_c,
            gamma: a.svm_gamma,
            ..SvmConfig::default()
        },
    };
    let mut model = build_model_with(kind, cli.seed, &opts)?;
    if let Some(init) = &a.init {
        let ModelState::Cnn(cnn) = &mut model else {
            return Err(usage("--init applies to CNN models only"));
        };
        let report = models::import_pretrained(&Checkpoint::read(init)?, cnn, false)?;
        log::info!(
            "imported {} tensors ({} left at initialization, {} unused)",
            report.matched.len(),
            report.skipped.len(),
            report.unused.len()
        );
    }
    let extra: Vec<(String, String)> = [
        ("command", "train".to_string()),
        ("manifest", show(&a.manifest)),
        ("features", show(&a.features)),
        ("progressive", a.progressive.to_string()),
        ("init", a.init.as_deref().map(show).unwrap_or_default()),
        ("hidden", a.hidden.to_string()),
        ("dropout", a.dropout.to_string()),
        ("svm_c", a.svm_c.to_string()),
        ("svm_gamma", a.svm_gamma.map(|g| g.to_string()).unwrap_or_default()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let outcome = if a.progressive {
        train::progressive_train(model, train_set, val_set, &cfg, Some(&dir), &extra)?
    } else {
        train::train_model(model, train_set, val_set, &cfg, Some(&dir), &extra)?
    };
    println!("best val accuracy {:.4}", outcome.best_val_accuracy);
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    let split = Split::from_str(&a.split)?;
    let mut model = ModelState::load(&a.ckpt)?;
    let manifest = Manifest::read(&a.manifest)?;
    let store = FeatureStore::open(&a.features)?;
    let examples = store.load_split(&manifest, split)?;
    let report = eval::evaluate(&mut model, &examples, split.as_str())?;
    let title = format!("{} on {} split ({})", model.kind(), split, show(&a.ckpt));
    eval::emit_report(&report, &dir, &title)?;
    write_config(
        &dir,
        "eval",
        cli.seed,
        &[
            ("ckpt", show(&a.ckpt)),
            ("manifest", show(&a.manifest)),
            ("features", show(&a.features)),
            ("split", split.to_string()),
        ],
    )?;
    println!("accuracy {:.4} macro_f1 {:.4}", report.accuracy, report.macro_f1);
    Ok(())
}

fn cmd_dump(a: &DumpArgs) -> Result<()> {
    if a.pgm.is_none() && a.csv.is_none() {
        return Err(usage("give --pgm and/or --csv"));
    }
    if let Some(wav) = &a.wav {
        if a.pgm.is_some() {
            return Err(usage("waveforms render to --csv only"));
        }
        let clip = audio::decode_wav(wav)?;
        if let Some(csv) = &a.csv {
            write_file(csv, export::waveform_csv(&clip))?;
        }
        return Ok(());
    }
    let src = a.spec.as_ref().ok_or_else(|| usage("give --wav or --spec"))?;
    let features: Tensor = if src.extension().is_some_and(|e| e.eq_ignore_ascii_case("sert")) {
        Tensor::read_sert(src)?
    } else {
        let cfg = feature_config("logmel", a.mels, 20.min(a.mels), audio::DEFAULT_SAMPLE_RATE)?;
        cfg.extract(&audio::decode_wav(src)?)?
    };
    if let Some(pgm) = &a.pgm {
        write_file(pgm, export::pgm16(&export::spectrogram_image(&features)?)?)?;
    }
    if let Some(csv) = &a.csv {
        write_file(csv, export::tensor_csv(&features)?)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Manifest(a) => cmd_manifest(cli, a),
        Command::Split(a) => cmd_split(cli, a),
        Command::Features(a) => cmd_features(cli, a),
        Command::AugmentPreview(a) => cmd_preview(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Dump(a) => cmd_dump(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class_name());
            // Bad flag values are usage errors.
            if matches!(e, Error::InvalidConfig(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
