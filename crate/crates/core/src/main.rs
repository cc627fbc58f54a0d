use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use dark_distill::corpus::{self, Corpus};
use dark_distill::dark::{self, CandidateKind};
use dark_distill::distill::{NegativesMode, Toggles};
use dark_distill::error::{Error, Result};
use dark_distill::pipeline::{self as pl, RunConfig};
use dark_distill::{par, seed};

#[derive(Parser, Debug)]
#[command(name = "dark-distill", version, about = "Distil a cross-encoder into a dual encoder with dark examples")]
struct Cli {
    /// JSON run config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Warm-start the student from this dual-encoder checkpoint.
    #[arg(long, global = true)]
    init_checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic benchmark into the data directory.
    GenSynth,
    /// Validate external corpus files and copy them into the data directory.
    Ingest(IngestArgs),
    /// Train the cross-encoder teacher.
    TrainTeacher,
    /// Score every training instance with the frozen teacher.
    ScoreConfidence(TeacherArg),
    /// Train the dual-encoder student against the teacher.
    Distill(DistillArgs),
    /// Retrieve for the held-out queries and write metrics.json.
    Eval {
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Histogram of teacher scores per candidate group.
    ExportHist(HistArgs),
    /// One pipeline run per negative count, adaptive selection off.
    SweepM {
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Teacher, confidence, distillation and evaluation in one go.
    Pipeline(ModeArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    instances: PathBuf,
}

#[derive(Args, Debug)]
struct TeacherArg {
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ModeArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    no_mix: bool,
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    no_adaptive: bool,
    #[arg(long)]
    no_sup: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Rand,
    Hard,
    Dark,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[command(flatten)]
    teacher: TeacherArg,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct HistArgs {
    #[command(flatten)]
    teacher: TeacherArg,
    /// Comma-separated subset of positive,hard_negative,mix,mask.
    #[arg(long, value_delimiter = ',')]
    groups: Vec<String>,
    /// Also write the dark candidate sets as JSON lines.
    #[arg(long)]
    shard: bool,
}

impl ModeArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Rand => NegativesMode::Rand,
                ModeArg::Hard => NegativesMode::Hard,
                ModeArg::Dark => NegativesMode::Dark,
            };
        }
        let t: &mut Toggles = &mut cfg.toggles;
        t.mix &= !self.no_mix;
        t.mask &= !self.no_mask;
        t.adaptive &= !self.no_adaptive;
        t.supervised &= !self.no_sup;
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_group(s: &str) -> Result<CandidateKind> {
    match s.trim() {
        "positive" => Ok(CandidateKind::Positive),
        "hard_negative" => Ok(CandidateKind::HardNegative),
        "mix" => Ok(CandidateKind::Mix),
        "mask" => Ok(CandidateKind::Mask),
        other => Err(Error::Usage(format!("unknown histogram group {other:?}"))),
    }
}

fn teacher_path(arg: &TeacherArg, out: &Path) -> PathBuf {
    arg.teacher.clone().unwrap_or_else(|| out.join(pl::TEACHER_CHECKPOINT))
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = cli.out_dir.as_path();
    pl::create_dir(out)?;
    match &cli.command {
        Command::GenSynth => {
            let dir = cfg.data_dir(out);
            pl::generate(&cfg, &dir)?;
            info!("wrote synthetic corpus to {}", dir.display());
        }
        Command::Ingest(a) => {
            let c = Corpus {
                passages: corpus::load_collection(&a.collection)?,
                queries: corpus::load_queries(&a.queries)?,
                qrels: corpus::load_qrels(&a.qrels)?,
                instances: corpus::load_instances(&a.instances)?,
            };
            c.validate()?;
            let dir = cfg.data_dir(out);
            pl::create_dir(&dir)?;
            for (from, name) in [
                (&a.collection, corpus::COLLECTION_FILE),
                (&a.queries, corpus::QUERIES_FILE),
                (&a.qrels, corpus::QRELS_FILE),
                (&a.instances, corpus::INSTANCES_FILE),
            ] {
                copy_file(from, &dir.join(name))?;
            }
            let data = pl::build_dataset(&cfg, &c, None)?;
            let path = dir.join(pl::VOCAB_FILE);
            fs::write(&path, data.vocab.to_tsv()).map_err(|e| Error::io(&path, e))?;
        }
        Command::TrainTeacher => {
            let (_, data) = pl::prepare_data(&cfg, out)?;
            pl::teacher_stage(&cfg, &data, out)?;
        }
        Command::ScoreConfidence(t) => {
            let (_, data) = pl::prepare_data(&cfg, out)?;
            let teacher = pl::load_teacher(&teacher_path(t, out), &data)?;
            pl::confidence_stage(&teacher, &data, out)?;
        }
        Command::Distill(a) => {
            a.mode.apply(&mut cfg);
            let (_, data) = pl::prepare_data(&cfg, out)?;
            let teacher = pl::load_teacher(&teacher_path(&a.teacher, out), &data)?;
            let conf_path = out.join(pl::CONFIDENCE_FILE);
            let conf = if conf_path.exists() {
                pl::load_confidences(&conf_path, &data)?
            } else {
                pl::confidence_stage(&teacher, &data, out)?
            };
            let init = match &cli.init_checkpoint {
                Some(p) => Some(pl::load_student(p, &data)?),
                None => None,
            };
            pl::distill_stage(&cfg, &data, &teacher, &conf, init, out)?;
        }
        Command::Eval { student } => {
            let (_, data) = pl::prepare_data(&cfg, out)?;
            let path = student.clone().unwrap_or_else(|| out.join(pl::STUDENT_CHECKPOINT));
            let m = pl::eval_stage(&pl::load_student(&path, &data)?, &data, out)?;
            println!("{}", serde_json::to_string(&m).unwrap_or_default());
        }
        Command::ExportHist(a) => {
            if !a.groups.is_empty() {
                cfg.histogram_groups = a.groups.iter().map(|g| parse_group(g)).collect::<Result<_>>()?;
            }
            let (_, data) = pl::prepare_data(&cfg, out)?;
            let teacher = pl::load_teacher(&teacher_path(&a.teacher, out), &data)?;
            pl::histogram_stage(&cfg, &teacher, &data, out)?;
            if a.shard {
                let masks = cfg.seeds().masks;
                let records = data
                    .instances
                    .iter()
                    .enumerate()
                    .map(|(i, inst)| {
                        let mut rng = seed::derived_rng(masks, "histogram", i as u64);
                        let ds = dark::build_dark_set(inst, &data, &cfg.distill.mask_ratios, true, &mut rng)?;
                        Ok((inst.query_id, dark::assemble_candidates(inst, &ds, &data)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                dark::write_shard(&out.join(pl::SHARD_FILE), &records)?;
            }
        }
        Command::SweepM { m } => {
            let mut ms = if m.is_empty() { cfg.sweep_m.clone() } else { m.clone() };
            if ms.is_empty() {
                return Err(Error::Usage("no m values to sweep".into()));
            }
            ms.sort_unstable();
            ms.dedup();
            let mut csv = String::from("m,mrr_at_10\n");
            for m in ms {
                let mut c = cfg.clone();
                c.synth.negatives_per_query = m;
                c.toggles.adaptive = false;
                c.data_dir = None;
                let dir = out.join("sweep_m").join(format!("m_{m:03}"));
                let metrics = pl::run_pipeline(&c, &dir, None)?;
                info!("m={m}: MRR@10 {:.4}", metrics.mrr_at_10);
                csv.push_str(&format!("{m},{}\n", metrics.mrr_at_10));
            }
            let path = out.join("sweep_m.csv");
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        }
        Command::Pipeline(a) => {
            a.apply(&mut cfg);
            let init = match &cli.init_checkpoint {
                Some(p) => {
                    let (_, data) = pl::prepare_data(&cfg, out)?;
                    Some(pl::load_student(p, &data)?)
                }
                None => None,
            };
            let m = pl::run_pipeline(&cfg, out, init)?;
            println!("{}", serde_json::to_string(&m).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match par::with_threads(cli.threads, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
