use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, FromArgMatches, Parser, Subcommand};

use dhkd::data::{encode_idx, gen_gaussian_mixture, quantize_unit, split_counts, SyntheticSpec};
use dhkd::harness::{self, RunConfig, Setting, VerifyOptions, CONFIG_KEYS};
use dhkd::model::{load_model, save_model};
use dhkd::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_COLLAPSE: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "dhkd", version, about = "Dual-head knowledge distillation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and export it as IDX files.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a teacher with cross-entropy.
    TrainTeacher {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Distil a saved teacher into a fresh student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Exit 0 even when the run collapses.
        #[arg(long)]
        allow_collapse: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a teacher per seed and run every setting on each.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "ce_only,bkl_only,ce_plus_bkl,dhkd,dhkd_vanilla")]
        settings: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// NC metrics, logit correlation differences and gradient-sign report of
    /// a student against its teacher on the test split.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Samples used for the coefficient-sign report.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        signs: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the gradient, projection and ETF property suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate the BinaryKL gradient to confirm the suite fails.
        #[arg(long)]
        mutate_bkl_gradient: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `--config FILE`, `--no-wall-time` and one `--<key> VALUE` flag per
/// `RunConfig` field; flags override the file.
struct ConfigArgs {
    config: Option<PathBuf>,
    wall_time: bool,
    overrides: Vec<(&'static str, String)>,
}

fn flag_name(key: &'static str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

impl Args for ConfigArgs {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        let cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("key = value configuration file")).arg(
            Arg::new("no-wall-time")
                .long("no-wall-time")
                .action(clap::ArgAction::SetTrue)
                .help("write wall_ms as 0 so logs are reproducible byte for byte"),
        );
        CONFIG_KEYS
            .iter()
            .fold(cmd, |cmd, &k| cmd.arg(Arg::new(k).long(flag_name(k)).value_name("VALUE").help_heading("Run configuration")))
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(ConfigArgs {
            config: m.get_one::<String>("config").map(PathBuf::from),
            wall_time: !m.get_flag("no-wall-time"),
            overrides: CONFIG_KEYS.iter().filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone()))).collect(),
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl ConfigArgs {
    fn resolve(&self) -> dhkd::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Usage(String),
    Collapse(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> dhkd::Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn create_dir(path: &Path) -> dhkd::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData { out_dir, cfg } => {
            let cfg = cfg.resolve()?;
            let all = quantize_unit(&gen_gaussian_mixture(&SyntheticSpec {
                classes: cfg.classes,
                dim: cfg.dim,
                n_per_class: cfg.train_per_class + cfg.test_per_class,
                separation: cfg.separation,
                seed: cfg.data_seed,
            })?);
            let (train, test) = split_counts(&all, &vec![cfg.train_per_class; cfg.classes], cfg.data_seed)?;
            create_dir(&out_dir)?;
            let mut data_cfg = RunConfig::default();
            for (name, ds) in [("train", &train), ("test", &test)] {
                let (img, lab) = encode_idx(ds)?;
                let (ip, lp) = (out_dir.join(format!("{name}-images.idx")), out_dir.join(format!("{name}-labels.idx")));
                write(&ip, &img)?;
                write(&lp, &lab)?;
                data_cfg.set(&format!("{name}_images"), &ip.display().to_string())?;
                data_cfg.set(&format!("{name}_labels"), &lp.display().to_string())?;
            }
            let conf = ["train_images", "train_labels", "test_images", "test_labels"]
                .iter()
                .map(|k| format!("{k} = {}\n", data_cfg.get(k).unwrap()))
                .collect::<String>();
            write(&out_dir.join("data.conf"), &conf)?;
            println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out_dir.display());
        }
        Cmd::TrainTeacher { out, log, cfg: args } => {
            let cfg = args.resolve()?;
            let data = harness::load_data(&cfg)?;
            let res = harness::train_teacher(&cfg, &data)?;
            save_model(&res.model, &out)?;
            if let Some(l) = log {
                harness::write_csv(&res.logs, l, args.wall_time)?;
            }
            println!("teacher test accuracy {:.4}", res.final_acc());
        }
        Cmd::Distill { teacher, out, log, allow_collapse, cfg: args } => {
            let cfg = args.resolve()?;
            let data = harness::load_data(&cfg)?;
            let t = load_model(&teacher)?;
            let res = harness::distill(&cfg, &t, &data)?;
            save_model(&res.model, &out)?;
            if let Some(l) = log {
                harness::write_csv(&res.logs, l, args.wall_time)?;
            }
            println!("{} final test accuracy {:.4}", cfg.setting, res.final_acc());
            if let Some(epoch) = res.collapsed_at {
                let msg = format!("run collapsed at epoch {epoch}");
                if !allow_collapse {
                    return Err(Failure::Collapse(msg));
                }
                eprintln!("{msg}");
            }
        }
        Cmd::Compare { seeds, settings, out_dir, cfg: args } => {
            let cfg = args.resolve()?;
            let settings: Vec<Setting> = settings.iter().map(|s| s.parse()).collect::<dhkd::Result<_>>()?;
            let report = harness::compare(&cfg, &seeds, &settings)?;
            create_dir(&out_dir)?;
            for (seed, t) in &report.teachers {
                harness::write_csv(&t.logs, out_dir.join(format!("teacher_seed{seed}.csv")), args.wall_time)?;
            }
            for r in &report.runs {
                harness::write_csv(&r.result.logs, out_dir.join(format!("{}_seed{}.csv", r.setting, r.seed)), args.wall_time)?;
            }
            write(&out_dir.join("summary.csv"), report.summary_csv())?;
            print!("{}", report.medians_text(&settings));
        }
        Cmd::Diagnose { model, teacher, batch, out, signs, cfg: args } => {
            let cfg = args.resolve()?;
            let data = harness::load_data(&cfg)?;
            let d = harness::diagnose(&load_model(&model)?, &load_model(&teacher)?, &data.test, cfg.tau, batch)?;
            match out {
                Some(p) => write(&p, d.to_csv())?,
                None => print!("{}", d.to_csv()),
            }
            if let Some(p) = signs {
                write(&p, d.signs.to_csv())?;
            }
        }
        Cmd::Verify { seed, mutate_bkl_gradient, out } => {
            let opts = VerifyOptions {
                seed,
                mutation: mutate_bkl_gradient.then_some(harness::Mutation::FlipBinaryKlGradient),
                ..VerifyOptions::default()
            };
            let report = harness::verify(&opts)?;
            print!("{}", report.to_text());
            if let Some(p) = out {
                write(&p, report.to_csv())?;
            }
            if !report.passed() {
                return Err(Failure::Verify("verification failed".into()));
            }
        }
    }
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
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Collapse(m)) => {
            eprintln!("collapse: {m}");
            ExitCode::from(EXIT_COLLAPSE)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("{m}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
