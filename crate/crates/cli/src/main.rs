use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use volseg::config::{Preset, RunConfig};
use volseg::dataset::{cohort_specs, write_cohort, CohortSpec};
use volseg::evaluation::{CohortMetrics, SubgroupRow};
use volseg::pipeline::{self, Summary};
use volseg::preprocess::run_pipeline;
use volseg::volcore::nifti_io::{read_volume, write_mask, write_volume};
use volseg::volcore::{binarize, Volume3D};
use volseg::{Error, Result};
use volseg_nn::checkpoint;

/// Volumetric lesion segmentation: data preparation, k-fold training,
/// threshold-sweep evaluation and inference.
#[derive(Parser)]
#[command(name = "volseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with a manifest.
    Phantoms {
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Assign manifest records to stratified folds.
    Folds(RunArgs),
    /// Write preprocessed volumes and masks.
    Preprocess(RunArgs),
    /// Train every fold (or one with --fold).
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        fold: Option<usize>,
        /// Train folds concurrently, one thread each.
        #[arg(long)]
        parallel_folds: bool,
    },
    /// Score each fold's test set and write the report.
    Evaluate(RunArgs),
    /// Segment one image with a checkpoint.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Print the tables of an evaluated run.
    Report {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DeviceArg {
    Cpu,
    Gpu,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named training strategy, e.g. PLS-Cfg4.
    #[arg(long)]
    preset: Option<Preset>,
    /// Seed for fold assignment and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pt: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, value_enum)]
    device: Option<DeviceArg>,
}

fn set(table: &mut toml::Table, section: Option<&str>, key: &str, value: toml::Value) {
    let target = match section {
        Some(s) => table
            .entry(s)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("configuration sections are tables"),
        None => table,
    };
    target.insert(key.into(), value);
}

impl RunArgs {
    /// Config file overlaid with the command-line flags, then resolved.
    fn resolve(&self) -> Result<RunConfig> {
        let mut table: toml::Table = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        if let (Some(p), Some(toml::Value::String(rel))) = (&self.config, table.get("data").and_then(|d| d.get("manifest"))) {
            let base = p.parent().unwrap_or(Path::new("."));
            let resolved = base.join(rel).display().to_string();
            set(&mut table, Some("data"), "manifest", toml::Value::String(resolved));
        }
        if let Some(out) = &self.out {
            set(&mut table, None, "out_dir", toml::Value::String(out.display().to_string()));
        }
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} too large")))?;
            set(&mut table, Some("folds"), "seed", toml::Value::Integer(seed));
            set(&mut table, Some("train"), "seed", toml::Value::Integer(seed));
        }
        if let Some(pt) = self.pt {
            set(&mut table, Some("evaluate"), "pt", toml::Value::Float(pt));
        }
        if let Some(dt) = self.dt {
            set(&mut table, Some("evaluate"), "dt", toml::Value::Float(dt));
        }
        if let Some(d) = self.device {
            let name = match d {
                DeviceArg::Cpu => "cpu",
                DeviceArg::Gpu => "gpu",
            };
            set(&mut table, None, "device", toml::Value::String(name.into()));
        }
        RunConfig::resolve(self.preset, Some(&table.to_string()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantoms { n, out, seed } => {
            let specs = cohort_specs(&CohortSpec {
                n,
                seed,
                ..Default::default()
            });
            let records = write_cohort(&out, &specs)?;
            println!("wrote {} phantoms and {}", records.len(), out.join("manifest.csv").display());
        }
        Command::Folds(args) => {
            let cfg = args.resolve()?;
            let index = pipeline::load_index(&cfg)?;
            let a = pipeline::fold_assignment(&cfg, &index, &cfg.out_dir)?;
            for (f, n) in a.fold_sizes().iter().enumerate() {
                println!("fold {f}: {n} records");
            }
            println!("{}", cfg.out_dir.join(pipeline::FOLDS_FILE).display());
        }
        Command::Preprocess(args) => {
            let cfg = args.resolve()?;
            let index = pipeline::load_index(&cfg)?;
            let dir = cfg.out_dir.join("preprocessed");
            std::fs::create_dir_all(&dir)?;
            let canonical = volseg::volcore::nifti_io::Orientation::CANONICAL;
            for r in &index.records {
                let case = pipeline::Case::load(r, &cfg.preprocess)?;
                let p = &case.prepared;
                write_volume(&dir.join(format!("{}_image.nii.gz", r.id)), &p.volume, &canonical)?;
                if let Some(m) = &p.mask {
                    write_mask(&dir.join(format!("{}_mask.nii.gz", r.id)), m, &canonical)?;
                }
                std::fs::write(dir.join(format!("{}_transform.json", r.id)), serde_json::to_string_pretty(&p.record)?)?;
            }
            cfg.save(&cfg.out_dir)?;
            println!("preprocessed {} cases into {}", index.len(), dir.display());
        }
        Command::Train { run, fold, parallel_folds } => {
            let cfg = run.resolve()?;
            for (f, log) in pipeline::train_run(&cfg, fold, parallel_folds)? {
                let best = log.best().map_or(f64::NAN, |e| e.val_loss);
                println!(
                    "fold {f}: best val loss {best:.4} at epoch {}, stopped at {}",
                    log.best_epoch, log.stopped_epoch
                );
            }
        }
        Command::Evaluate(args) => {
            let cfg = args.resolve()?;
            let report = pipeline::evaluate_run(&cfg)?;
            let op = report.operating_point;
            println!("operating point PT {:.1} DT {:.2}", op.pt, op.dt);
            print_metrics("all", &report.overall);
            println!("{}", cfg.out_dir.join(pipeline::REPORT_DIR).display());
        }
        Command::Infer { run, checkpoint: ck, image } => {
            let cfg = run.resolve()?;
            let (model, _) = checkpoint::load(&ck)?;
            let (vol, orient) = read_volume(&image)?;
            let prepared = run_pipeline(&vol, None, &cfg.preprocess)?;
            let prob = pipeline::predict_prepared(&model, &prepared.volume, &cfg.sampling)?;
            let prob = volseg::preprocess::invert_to_original(&prob, &prepared.record)?;
            let pt = cfg.evaluate.pt.unwrap_or(0.5);
            let stem = image
                .file_name()
                .and_then(|s| s.to_str())
                .map(|s| s.trim_end_matches(".gz").trim_end_matches(".nii").to_owned())
                .unwrap_or_else(|| "case".into());
            std::fs::create_dir_all(&cfg.out_dir)?;
            let prob_path = cfg.out_dir.join(format!("{stem}_prob.nii.gz"));
            let mask_path = cfg.out_dir.join(format!("{stem}_mask.nii.gz"));
            write_volume(&prob_path, &Volume3D::new(*prob.geometry(), prob.data().to_vec())?, &orient)?;
            write_mask(&mask_path, &binarize(&prob, pt), &orient)?;
            println!("{}\n{}", prob_path.display(), mask_path.display());
        }
        Command::Report { run } => {
            let dir = run.out.clone().map_or_else(|| run.resolve().map(|c| c.out_dir), Ok)?;
            let s = Summary::load(&dir.join(pipeline::REPORT_DIR).join(pipeline::SUMMARY_FILE))?;
            print_report(&s);
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

fn print_metrics(label: &str, m: &CohortMetrics) {
    println!(
        "{label:<12} n={:<4} Dice {} ± {}  DiceTP {} ± {}  R {}  P {}  F1 {}",
        m.n,
        fmt(m.dice_mean),
        fmt(m.dice_sd),
        fmt(m.dice_tp_mean),
        fmt(m.dice_tp_sd),
        fmt(m.recall),
        fmt(m.precision),
        fmt(m.f1)
    );
}

fn print_rows(title: &str, rows: &[SubgroupRow]) {
    println!("\n{title}");
    for r in rows {
        let label = match r.volume_range_ml {
            Some([lo, hi]) => format!("{} [{lo:.2}, {hi:.2}] ml", r.group),
            None => r.group.clone(),
        };
        match &r.metrics {
            Some(m) => print_metrics(&label, m),
            None => println!("{label:<12} n=0"),
        }
    }
}

fn print_report(s: &Summary) {
    let r = &s.report;
    if let Some(p) = s.config.preset {
        println!("preset {}", p.name());
    }
    println!("operating point PT {:.1} DT {:.2}", r.operating_point.pt, r.operating_point.dt);
    println!("\nbest operating points");
    for b in &r.best_points {
        println!("{:<10} {:.2} at PT {:.1} DT {:.2}", b.metric.name(), b.value, b.point.pt, b.point.dt);
    }
    println!("\npooled over folds (mean ± sd, 95% CI)");
    for p in &r.pooled {
        match &p.pooled {
            Some(x) => {
                let ci = x.ci.map_or_else(|| "-".into(), |[a, b]| format!("[{a:.2}, {b:.2}]"));
                println!("{:<10} {:.2} ± {} {ci} (k={})", p.metric.name(), x.mean, fmt(x.sd), x.k);
            }
            None => println!("{:<10} -", p.metric.name()),
        }
    }
    println!();
    print_metrics("all", &r.overall);
    for f in &r.folds {
        print_metrics(&format!("fold {}", f.fold), &f.metrics);
    }
    print_rows("by origin", &r.by_origin);
    print_rows("by slice thickness", &r.by_resolution);
    print_rows("by tumor volume", &r.by_volume);
    if let Some(t) = &r.timing {
        println!(
            "\nspeed: inference {:.0} ms, per patient {:.2} s, {} s/epoch",
            t.inference_ms,
            t.per_patient_total_s,
            fmt(t.s_per_epoch)
        );
    }
    if let Some(a) = &r.agreement {
        println!(
            "\ninter-annotator Dice {:.2} [{:.2}, {:.2}] over {} pairs",
            a.mean, a.ci[0], a.ci[1], a.n
        );
    }
}
