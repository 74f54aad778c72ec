use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mirror_cfe::classifier::{train_classifier, Classifier};
use mirror_cfe::config::RunConfig;
use mirror_cfe::data::{generate_dataset, split};
use mirror_cfe::eval::{evaluate_suite, explain};
use mirror_cfe::mirror::TrajectoryMode;
use mirror_cfe::pgm::{read_dataset_dir, read_pgm, write_dataset_dir, write_pgm};
use mirror_cfe::trainer::{loss_history_csv, train_generator, Generator};
use mirror_cfe::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mirror-cfe", version, about = "Mirror counterfactual explanation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Binary,
    Multiclass,
}

impl From<Mode> for TrajectoryMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Binary => TrajectoryMode::Binary,
            Mode::Multiclass => TrajectoryMode::Multiclass,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset as PGM files plus labels.csv.
    MakeDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier on the train split of a dataset directory.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train generator and discriminator against a frozen classifier.
    TrainGenerator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Enable the skip-connection controller.
        #[arg(long)]
        ssc: bool,
    },
    /// Write the transition frames and confidence table for one image.
    Explain {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 21)]
        steps: usize,
        #[arg(long, value_enum, default_value = "multiclass")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score counterfactuals for one class pair on the test split.
    Evaluate {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source: Option<usize>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        blur_size: Option<usize>,
        #[arg(long)]
        blur_sigma: Option<f64>,
    },
}

fn load_config(path: Option<&Path>) -> mirror_cfe::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

/// `dir/stem.suffix` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create_parent(path: &Path) -> mirror_cfe::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> mirror_cfe::Result<()> {
    match cli.command {
        Command::MakeDataset { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = generate_dataset(&cfg.dataset)?;
            let (train, test) = split(&ds, cfg.dataset.train_fraction, cfg.dataset.seed)?;
            write_dataset_dir(&out, &train, &test)?;
            println!("{}", json!({"train": train.len(), "test": test.len(), "out": out}));
        }
        Command::TrainClassifier { data, config, out, epochs } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.classifier.epochs = e;
            }
            cfg.validate()?;
            let (train, test) = read_dataset_dir(&data)?;
            let mut arch = cfg.classifier_architecture();
            arch.num_classes = train.num_classes.max(test.num_classes);
            arch.image_size = train.image_shape()[1];
            let mut log = String::from("epoch,loss,train_accuracy,test_accuracy\n");
            let test_ref = (!test.is_empty()).then_some(&test);
            let (clf, _) = train_classifier(arch, &train, test_ref, &cfg.classifier.training(), |s| {
                log.push_str(&format!("{},{},{},{}\n", s.epoch, s.loss, s.train_accuracy, s.test_accuracy));
                println!(
                    "{}",
                    json!({"epoch": s.epoch, "loss": s.loss, "train_accuracy": s.train_accuracy, "test_accuracy": s.test_accuracy})
                );
            })?;
            create_parent(&out)?;
            clf.save(&out)?;
            std::fs::write(sibling(&out, "accuracy.csv"), log)?;
        }
        Command::TrainGenerator { data, classifier, config, out, epochs, ssc } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.generator.train.epochs = e;
            }
            cfg.generator.model.ssc |= ssc;
            let clf = Classifier::load(&classifier)?;
            cfg.generator.model.validate(clf.config())?;
            cfg.generator.train.validate()?;
            let (train, _) = read_dataset_dir(&data)?;
            let outcome = train_generator(&clf, &train, &cfg.generator.model, &cfg.generator.train, |_| {})?;
            create_parent(&out)?;
            outcome.generator.save(&out)?;
            outcome.discriminator.save(&sibling(&out, "disc.mcfe"))?;
            std::fs::write(sibling(&out, "losses.csv"), loss_history_csv(&outcome.history))?;
            if let Some(e) = outcome.aborted {
                return Err(e);
            }
            let last = outcome.history.last();
            println!("{}", json!({"steps": outcome.history.len(), "final_total": last.map(|r| r.total)}));
        }
        Command::Explain { classifier, generator, image, target, steps, mode, out } => {
            let clf = Classifier::load(&classifier)?;
            let gen = Generator::load(&generator)?;
            let img = read_pgm(&image)?;
            let tr = explain(&clf, &gen, &img, target, steps, mode.into())?;
            std::fs::create_dir_all(&out)?;
            for (i, f) in tr.frames.iter().enumerate() {
                write_pgm(&out.join(format!("frame_{i:03}.pgm")), &f.image)?;
            }
            std::fs::write(out.join("confidence.csv"), tr.confidence_csv())?;
            println!("{}", json!({"source": tr.source, "target": tr.target, "frames": tr.frames.len()}));
        }
        Command::Evaluate {
            classifier,
            generator,
            data,
            config,
            out,
            source,
            target,
            samples,
            blur_size,
            blur_sigma,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let e = &mut cfg.eval;
            e.source = source.unwrap_or(e.source);
            e.target = target.unwrap_or(e.target);
            e.samples = samples.unwrap_or(e.samples);
            e.blur.size = blur_size.unwrap_or(e.blur.size);
            e.blur.sigma = blur_sigma.unwrap_or(e.blur.sigma);
            cfg.validate()?;
            let clf = Classifier::load(&classifier)?;
            let gen = Generator::load(&generator)?;
            let (_, test) = read_dataset_dir(&data)?;
            let report = evaluate_suite(&clf, &gen, &test, &cfg.eval)?;
            create_parent(&out)?;
            std::fs::write(&out, report.to_csv())?;
            std::fs::write(sibling(&out, "first_cfe.csv"), report.first_cfe_csv())?;
            println!(
                "{}",
                json!({
                    "samples": report.rows.len(),
                    "discovery_rate": report.discovery_rate,
                    "no_flip": report.no_flip,
                    "reflection": report.reflection,
                    "first_cfe": report.first_cfe,
                })
            );
        }
    }
    Ok(())
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message}));
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg: Vec<String> = e.to_string().lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
            return fail("usage", &msg.join(" "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &one_line(&e)),
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}
