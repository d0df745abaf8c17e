use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use sckd::model::{Student, Teacher};
use sckd::scene::{make_dataset, read_frame, DatasetManifest, FramePair, Split};
use sckd::train::{
    distill_student, heatmap_contrast, heatmap_csv, pretrain_teacher, run_ablation,
    student_heatmap, AblationSetup, Checkpoint, Detector, RunConfig, STUDENT_KIND, TEACHER_KIND,
};

#[derive(Parser)]
#[command(
    name = "sckd",
    version,
    about = "Radar-only 3D detection by cross-modality distillation"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest into the output directory.
    Synth,
    /// Train the fusion teacher on the labeled split.
    Pretrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Distill a radar-only student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a teacher or student checkpoint.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate: labeled_train or val.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train and evaluate the configured ablation grid.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Export a student's encoder heatmap for one radar frame as CSV.
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        frame: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| anyhow!("no {what} given (flag or [paths] entry)"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth => {
            let mut spec = cfg.scene.clone();
            spec.seed = cfg.seed;
            let d = cfg.data;
            let m = make_dataset(d.n_labeled, d.n_unlabeled, d.n_val, &spec, out)?;
            println!(
                "wrote {} ({} labeled, {} unlabeled, {} val frame files)",
                out.join(sckd::scene::MANIFEST_NAME).display(),
                m.count(Split::LabeledTrain),
                m.count(Split::UnlabeledTrain),
                m.count(Split::Val)
            );
        }
        Command::Pretrain { manifest } => {
            let manifest =
                DatasetManifest::load(&pick(manifest, &cfg.paths.manifest, "manifest")?)?;
            let labeled = manifest.load_split(Split::LabeledTrain)?;
            let (ck, log) =
                pretrain_teacher(&cfg.model, &cfg.optimizer, &cfg.teacher, &labeled, cfg.seed)?;
            ck.save(&out.join("teacher.ckpt"))?;
            write(&out.join("teacher_log.txt"), &log.to_text())?;
            println!("wrote {}", out.join("teacher.ckpt").display());
        }
        Command::Distill { manifest, teacher } => {
            let teacher_path = pick(teacher, &cfg.paths.teacher, "teacher checkpoint")?;
            let teacher = load_checkpoint(&teacher_path)?;
            let manifest =
                DatasetManifest::load(&pick(manifest, &cfg.paths.manifest, "manifest")?)?;
            let labeled = manifest.load_split(Split::LabeledTrain)?;
            let unlabeled = manifest.load_split(Split::UnlabeledTrain)?;
            let (ck, log) = distill_student(
                &cfg.model,
                &teacher,
                &cfg.distill,
                &cfg.optimizer,
                &cfg.student,
                &labeled,
                &unlabeled,
                cfg.seed,
            )?;
            ck.save(&out.join("student.ckpt"))?;
            write(&out.join("student_log.txt"), &log.to_text())?;
            println!("wrote {}", out.join("student.ckpt").display());
        }
        Command::Eval {
            manifest,
            checkpoint,
            split,
        } => {
            let path = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let ck = load_checkpoint(&path)?;
            ck.check(&ck.kind.clone(), &cfg.model.digest())?;
            let manifest =
                DatasetManifest::load(&pick(manifest, &cfg.paths.manifest, "manifest")?)?;
            let frames: Vec<FramePair> = manifest.load_split(split.parse()?)?;
            let report = match ck.kind.as_str() {
                TEACHER_KIND => {
                    let t = Teacher::new(&cfg.model);
                    Detector::Teacher(&t, &ck.params).evaluate(&frames, &cfg.eval)?
                }
                STUDENT_KIND => {
                    let s = Student::new(&cfg.model, &cfg.distill);
                    Detector::Student(&s, &ck.params).evaluate(&frames, &cfg.eval)?
                }
                other => return Err(anyhow!("unknown checkpoint kind `{other}`")),
            };
            write(&out.join("report.txt"), &report.to_text())?;
            write(&out.join("report.kv"), &report.to_key_values())?;
            print!("{}", report.to_text());
        }
        Command::Ablate { manifest, teacher } => {
            let teacher_path = pick(teacher, &cfg.paths.teacher, "teacher checkpoint")?;
            let teacher = load_checkpoint(&teacher_path)?;
            let manifest =
                DatasetManifest::load(&pick(manifest, &cfg.paths.manifest, "manifest")?)?;
            let labeled = manifest.load_split(Split::LabeledTrain)?;
            let unlabeled = manifest.load_split(Split::UnlabeledTrain)?;
            let val = manifest.load_split(Split::Val)?;
            let setup = AblationSetup {
                model: &cfg.model,
                teacher: &teacher,
                optimizer: &cfg.optimizer,
                stage: &cfg.student,
                eval: &cfg.eval,
                labeled: &labeled,
                unlabeled: &unlabeled,
                val: &val,
            };
            let variants = cfg.ablation.resolve(unlabeled.len());
            let table = run_ablation(&setup, &variants, &cfg.ablation.seeds)?;
            write(&out.join("ablation.txt"), &table.to_text())?;
            let mut kv = String::new();
            for row in &table.rows {
                for (seed, r) in row.seeds.iter().zip(&row.reports) {
                    for line in r.to_key_values().lines() {
                        kv.push_str(&format!("{}.seed{seed}.{line}\n", row.name));
                    }
                }
            }
            write(&out.join("ablation.kv"), &kv)?;
            print!("{}", table.to_text());
        }
        Command::Heatmap { checkpoint, frame } => {
            let path = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let ck = load_checkpoint(&path)?;
            ck.check(STUDENT_KIND, &cfg.model.digest())?;
            let frame = read_frame(&frame)?;
            let student = Student::new(&cfg.model, &cfg.distill);
            let map = student_heatmap(&student, &ck.params, &frame)?;
            let dest = out.join("heatmap.csv");
            write(&dest, &heatmap_csv(&map))?;
            println!(
                "wrote {} ({}x{})",
                dest.display(),
                map.height(),
                map.width()
            );
            if let Some(c) = frame
                .labels
                .as_deref()
                .and_then(|l| heatmap_contrast(&map, l))
            {
                println!("contrast {c:.4}");
            }
        }
    }
    Ok(())
}
