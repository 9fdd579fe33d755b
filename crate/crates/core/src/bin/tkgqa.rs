use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tkgqa::embeddings::EmbeddingTable;
use tkgqa::encoder::encode;
use tkgqa::eval::{data_efficiency, inversions, run_benchmark, BenchmarkOptions, CurvePoint};
use tkgqa::forecaster::{precompute_all, ForecastParams, TimeAwareReps};
use tkgqa::manifest::Manifest;
use tkgqa::mhs::{psi_product, train_neural_psi, NeuralPsi, PsiKind};
use tkgqa::pipeline::{self, PipelineConfig, QuestionSets};
use tkgqa::qa::{Family, QaModel};
use tkgqa::questions::{read_questions, write_questions, write_rule_pairs, Question};
use tkgqa::synth;
use tkgqa::tkg::{
    ingest_events, read_kg_dir, read_quads, read_vocab, write_kg_dir, write_quads, SplitName,
    TemporalKG, Vocab, DATE_FORMAT, QUADS_FILE,
};
use tkgqa::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tkgqa",
    version,
    about = "Forecasting question answering over temporal knowledge graphs"
)]
struct Cli {
    /// Pipeline config (TOML); relative paths in it resolve against its directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed. Required when no config file is given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-question scoring [default: available cores].
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    paths: PathArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct PathArgs {
    #[arg(long, global = true, env = "TKGQA_EVENTS")]
    events: Option<PathBuf>,
    #[arg(long, global = true, env = "TKGQA_KG_DIR")]
    kg_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "TKGQA_QUESTIONS_DIR")]
    questions_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "TKGQA_CHECKPOINTS")]
    checkpoints: Option<PathBuf>,
    #[arg(long, global = true, env = "TKGQA_REPORTS")]
    reports: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default configuration.
    PrintConfig,
    /// Write the planted-rule synthetic events file.
    Synth,
    /// Build the KG directory from the events file.
    Ingest {
        /// First day of the timestamp range [default: earliest event].
        #[arg(long)]
        start: Option<NaiveDate>,
        /// Last day of the timestamp range [default: latest event].
        #[arg(long)]
        end: Option<NaiveDate>,
    },
    /// Partition the KG into train, valid and test by timestamp.
    Split,
    /// Train the forecasting representation model on the training split.
    TrainTkg,
    /// Precompute representations at every timestamp from earlier facts only.
    InferReps,
    /// Generate questions for every split.
    Genq,
    /// Train one QA model per question family.
    TrainQa {
        /// Families to train [default: every family with training questions].
        #[arg(long = "family")]
        families: Vec<Family>,
    },
    /// Evaluate the QA models and write a report.
    Eval {
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Also write the metric table as CSV.
        #[arg(long)]
        emit_csv: bool,
        /// Exclude other correct answers from EPQ ranks.
        #[arg(long)]
        filtered: bool,
    },
    /// Multi-hop scorer over the snapshot at the question timestamp.
    Mhs {
        /// Acknowledge that this reads facts at the question timestamp.
        #[arg(long)]
        cheating_snapshot: bool,
        #[arg(long)]
        psi: Option<PsiKind>,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Retrain on growing training subsets and evaluate each.
    DataEff {
        #[arg(long)]
        family: Option<Family>,
        #[arg(long)]
        emit_csv: bool,
    },
    /// Run ingest, split, train-tkg, infer-reps, genq, train-qa and eval.
    Run,
}

struct Ctx {
    cfg: PipelineConfig,
    /// Config as given (paths unresolved), echoed into manifests and reports.
    echo: String,
    base: PathBuf,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let (mut cfg, base) = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (PipelineConfig::from_toml(&text)?, base)
            }
            None => {
                let Some(seed) = cli.seed else {
                    return Err(Error::config(
                        "seed",
                        "required; pass --seed or a config file that sets it",
                    ));
                };
                (
                    PipelineConfig {
                        seed,
                        ..Default::default()
                    },
                    PathBuf::new(),
                )
            }
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        let p = &cli.paths;
        for (flag, slot) in [
            (&p.events, &mut cfg.paths.events),
            (&p.kg_dir, &mut cfg.paths.kg_dir),
            (&p.questions_dir, &mut cfg.paths.questions_dir),
            (&p.checkpoints, &mut cfg.paths.checkpoints),
            (&p.reports, &mut cfg.paths.reports),
        ] {
            if let Some(v) = flag {
                *slot = v.clone();
            }
        }
        cfg.validate()?;
        let echo = cfg.to_toml()?;
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        cfg.paths.resolve(&base);
        Ok(Self { cfg, echo, base })
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.echo)
    }

    fn kg_file(&self, name: &str) -> PathBuf {
        self.cfg.paths.kg_dir.join(name)
    }

    fn split_file(&self, s: SplitName) -> PathBuf {
        self.kg_file(&format!("{}.tsv", s.as_str()))
    }

    fn questions_file(&self, s: SplitName) -> PathBuf {
        self.cfg
            .paths
            .questions_dir
            .join(format!("{}.jsonl", s.as_str()))
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.cfg.paths.checkpoints.join(name)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.cfg.paths.reports.join(name)
    }
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn log(step: &str, started: Instant) {
    eprintln!("[tkgqa] {step} ({:.2}s)", started.elapsed().as_secs_f64());
}

const KG_FILES: [&str; 4] = [
    "entities.tsv",
    "relations.tsv",
    "timestamps.tsv",
    QUADS_FILE,
];

fn load_kg(ctx: &Ctx, m: &mut Manifest) -> Result<(Vocab, TemporalKG)> {
    for f in KG_FILES {
        let p = ctx.kg_file(f);
        require(&p, "ingest")?;
        m.input(&p, &ctx.base)?;
    }
    read_kg_dir(&ctx.cfg.paths.kg_dir)
}

fn load_vocab(ctx: &Ctx, m: &mut Manifest) -> Result<Vocab> {
    for f in &KG_FILES[..3] {
        let p = ctx.kg_file(f);
        require(&p, "ingest")?;
        m.input(&p, &ctx.base)?;
    }
    read_vocab(&ctx.cfg.paths.kg_dir)
}

fn load_reps(ctx: &Ctx, m: &mut Manifest) -> Result<TimeAwareReps> {
    let p = ctx.checkpoint("reps.bin");
    require(&p, "infer-reps")?;
    m.input(&p, &ctx.base)?;
    TimeAwareReps::load(&p)
}

fn load_questions(ctx: &Ctx, m: &mut Manifest, s: SplitName) -> Result<Vec<Question>> {
    let p = ctx.questions_file(s);
    require(&p, "genq")?;
    m.input(&p, &ctx.base)?;
    read_questions(&p)
}

fn qa_file(ctx: &Ctx, f: Family) -> PathBuf {
    ctx.checkpoint(&format!("qa-{}.bin", f.as_str()))
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let (vocab, kg) = synth::generate(&ctx.cfg.synth_config())?;
    let path = &ctx.cfg.paths.events;
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for q in kg.quads() {
        let date = vocab.timestamp_labels[q.t as usize].format(DATE_FORMAT);
        writeln!(
            w,
            "{}\t{}\t{}\t{date}",
            vocab.entity(q.s),
            vocab.relation(q.r),
            vocab.entity(q.o)
        )?;
    }
    w.flush()?;
    let mut m = ctx.manifest("synth");
    m.output(path, &ctx.base)?;
    m.write(&path.with_file_name("synth.manifest.json"))?;
    log(&format!("synth: {} events", kg.len()), t);
    Ok(())
}

fn cmd_ingest(ctx: &Ctx, start: Option<NaiveDate>, end: Option<NaiveDate>) -> Result<()> {
    let t = Instant::now();
    let range = match (start, end) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => return Err(Error::config("ingest", "--start and --end go together")),
    };
    let mut m = ctx.manifest("ingest");
    let path = &ctx.cfg.paths.events;
    require(path, "synth")?;
    m.input(path, &ctx.base)?;
    let (vocab, kg) = ingest_events(BufReader::new(fs::File::open(path)?), range)?;
    let dir = &ctx.cfg.paths.kg_dir;
    ensure_dir(dir)?;
    write_kg_dir(dir, &vocab, &kg)?;
    for f in KG_FILES {
        m.output(&ctx.kg_file(f), &ctx.base)?;
    }
    m.write(&dir.join("ingest.manifest.json"))?;
    log(
        &format!(
            "ingest: {} facts, {} entities, {} relations, {} timestamps",
            kg.len(),
            vocab.num_entities(),
            vocab.num_relations(),
            vocab.num_timestamps()
        ),
        t,
    );
    Ok(())
}

fn cmd_split(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let mut m = ctx.manifest("split");
    let (_, kg) = load_kg(ctx, &mut m)?;
    let splits = pipeline::split_kg(&ctx.cfg, &kg)?;
    for s in SplitName::ALL {
        let p = ctx.split_file(s);
        write_quads(&p, splits.get(s))?;
        m.output(&p, &ctx.base)?;
    }
    m.write(&ctx.kg_file("split.manifest.json"))?;
    log(
        &format!(
            "split: train {} / valid {} / test {}",
            splits.train.len(),
            splits.valid.len(),
            splits.test.len()
        ),
        t,
    );
    Ok(())
}

#[derive(Serialize)]
struct Curves<'a> {
    loss_curve: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    valid_curve: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
}

fn cmd_train_tkg(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let mut m = ctx.manifest("train-tkg");
    let vocab = load_vocab(ctx, &mut m)?;
    let p = ctx.split_file(SplitName::Train);
    require(&p, "split")?;
    m.input(&p, &ctx.base)?;
    let train = read_quads(&p, &vocab)?;
    let trained = pipeline::train_forecaster_stage(&ctx.cfg, &train)?;
    ensure_dir(&ctx.cfg.paths.checkpoints)?;
    let out = ctx.checkpoint("forecaster.bin");
    trained.model.save(&out)?;
    let curve = ctx.checkpoint("forecaster.curve.json");
    write_json(
        &curve,
        &Curves {
            loss_curve: &trained.loss_curve,
            valid_curve: None,
            best_epoch: None,
        },
    )?;
    m.output(&out, &ctx.base)?;
    m.output(&curve, &ctx.base)?;
    m.write(&ctx.checkpoint("train-tkg.manifest.json"))?;
    let c = &trained.loss_curve;
    log(
        &format!(
            "train-tkg: loss {:.4} -> {:.4}",
            c.first().copied().unwrap_or(f64::NAN),
            c.last().copied().unwrap_or(f64::NAN)
        ),
        t,
    );
    Ok(())
}

fn cmd_infer_reps(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let mut m = ctx.manifest("infer-reps");
    let (_, kg) = load_kg(ctx, &mut m)?;
    let p = ctx.checkpoint("forecaster.bin");
    require(&p, "train-tkg")?;
    m.input(&p, &ctx.base)?;
    let params = ForecastParams::load(&p)?;
    let reps = precompute_all(&kg, &params)?;
    for ts in 0..reps.num_timestamps() as u32 {
        reps.check_no_leakage(ts)?;
    }
    let out = ctx.checkpoint("reps.bin");
    reps.save(&out)?;
    m.output(&out, &ctx.base)?;
    m.write(&ctx.checkpoint("infer-reps.manifest.json"))?;
    log(
        &format!("infer-reps: {} stored representations", reps.entries.len()),
        t,
    );
    Ok(())
}

fn cmd_genq(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let mut m = ctx.manifest("genq");
    let (vocab, kg) = load_kg(ctx, &mut m)?;
    let (sets, stats) = pipeline::generate_questions(&ctx.cfg, &vocab, &kg)?;
    let dir = &ctx.cfg.paths.questions_dir;
    ensure_dir(dir)?;
    for s in SplitName::ALL {
        let p = ctx.questions_file(s);
        write_questions(&p, sets.get(s))?;
        m.output(&p, &ctx.base)?;
    }
    let mut tpl = pipeline::templates(&ctx.cfg, &vocab)?;
    for (a, b) in &stats.rule_pairs {
        tpl.add_two_hop(*a, *b, &vocab.relation_names)?;
    }
    let extra = [
        dir.join("templates.tsv"),
        dir.join("rules.tsv"),
        dir.join("stats.json"),
    ];
    tpl.write(&extra[0])?;
    write_rule_pairs(&extra[1], &stats.rule_pairs)?;
    write_json(&extra[2], &stats)?;
    for p in &extra {
        m.output(p, &ctx.base)?;
    }
    m.write(&dir.join("genq.manifest.json"))?;
    log(
        &format!(
            "genq: train {} / valid {} / test {} questions",
            sets.train.len(),
            sets.valid.len(),
            sets.test.len()
        ),
        t,
    );
    Ok(())
}

fn cmd_train_qa(ctx: &Ctx, families: &[Family]) -> Result<()> {
    let t = Instant::now();
    let mut m = ctx.manifest("train-qa");
    let vocab = load_vocab(ctx, &mut m)?;
    let reps = load_reps(ctx, &mut m)?;
    let sets = QuestionSets {
        train: load_questions(ctx, &mut m, SplitName::Train)?,
        valid: load_questions(ctx, &mut m, SplitName::Valid)?,
        test: Vec::new(),
    };
    let wanted: Vec<Family> = if families.is_empty() {
        Family::ALL.to_vec()
    } else {
        families.to_vec()
    };
    ensure_dir(&ctx.cfg.paths.checkpoints)?;
    let mut trained_any = false;
    for f in wanted {
        let tf = Instant::now();
        let Some(trained) = pipeline::train_family(&ctx.cfg, f, &sets, &reps, &vocab)? else {
            if !families.is_empty() {
                return Err(Error::Empty("no training questions for a requested family"));
            }
            eprintln!(
                "[tkgqa] train-qa: no {} training questions, skipped",
                f.as_str()
            );
            continue;
        };
        trained_any = true;
        let out = qa_file(ctx, f);
        trained.model.save(&out)?;
        let curve = ctx.checkpoint(&format!("qa-{}.curve.json", f.as_str()));
        write_json(
            &curve,
            &Curves {
                loss_curve: &trained.loss_curve,
                valid_curve: Some(&trained.valid_curve),
                best_epoch: Some(trained.best_epoch),
            },
        )?;
        m.output(&out, &ctx.base)?;
        m.output(&curve, &ctx.base)?;
        log(
            &format!("train-qa {}: kept epoch {}", f.as_str(), trained.best_epoch),
            tf,
        );
    }
    if !trained_any {
        return Err(Error::Empty("no training questions"));
    }
    m.write(&ctx.checkpoint("train-qa.manifest.json"))?;
    log("train-qa", t);
    Ok(())
}

fn split_range(cfg: &PipelineConfig, s: SplitName) -> (u32, u32) {
    let b = cfg.split;
    match s {
        SplitName::Train => (b.t0, b.t1 - 1),
        SplitName::Valid => (b.t1, b.t2 - 1),
        SplitName::Test => (b.t2, b.t3),
    }
}

fn cmd_eval(ctx: &Ctx, split: SplitName, emit_csv: bool, filtered: bool) -> Result<()> {
    let t = Instant::now();
    let mut m = ctx.manifest("eval");
    let questions = load_questions(ctx, &mut m, split)?;
    let mut models = BTreeMap::new();
    for f in Family::ALL {
        if !questions.iter().any(|q| Family::of(q.qtype) == f) {
            continue;
        }
        let p = qa_file(ctx, f);
        require(&p, "train-qa")?;
        m.input(&p, &ctx.base)?;
        models.insert(f, QaModel::load(&p)?);
    }
    let reps = load_reps(ctx, &mut m)?;
    let kg = if filtered || ctx.cfg.eval.filtered {
        Some(load_kg(ctx, &mut m)?.1)
    } else {
        None
    };
    let opts = BenchmarkOptions {
        split: split.as_str(),
        timestamps: split_range(&ctx.cfg, split),
        filter: kg.as_ref(),
    };
    let report = run_benchmark(&models, &questions, &reps, &opts, ctx.echo.clone())?;
    ensure_dir(&ctx.cfg.paths.reports)?;
    let out = ctx.report(&format!("report-{}.json", split.as_str()));
    fs::write(&out, report.to_json()?)?;
    m.output(&out, &ctx.base)?;
    if emit_csv || ctx.cfg.eval.emit_csv {
        let csv = ctx.report(&format!("report-{}.csv", split.as_str()));
        fs::write(&csv, report.to_csv())?;
        m.output(&csv, &ctx.base)?;
    }
    m.write(&ctx.report(&format!("eval-{}.manifest.json", split.as_str())))?;
    print!("{}", report.to_table());
    log("eval", t);
    Ok(())
}

fn cmd_mhs(ctx: &Ctx, cheating: bool, psi: Option<PsiKind>, split: SplitName) -> Result<()> {
    if !(cheating || ctx.cfg.eval.cheating_snapshot) {
        return Err(Error::config(
            "cheating_snapshot",
            "the multi-hop scorer reads facts at the question timestamp; pass --cheating-snapshot to run it",
        ));
    }
    eprintln!(
        "[tkgqa] mhs: WARNING cheating snapshot, facts at each question timestamp are visible"
    );
    let t = Instant::now();
    let mut mcfg = ctx.cfg.mhs.config();
    if let Some(p) = psi {
        mcfg.psi = p;
    }
    let mut m = ctx.manifest("mhs");
    let (_, kg) = load_kg(ctx, &mut m)?;
    let questions = load_questions(ctx, &mut m, split)?;
    let qa_path = qa_file(ctx, Family::Epq);
    require(&qa_path, "train-qa")?;
    m.input(&qa_path, &ctx.base)?;
    let qa = QaModel::load(&qa_path)?;
    let encode_q = |q: &Question| encode(&qa.params, &qa.vocab, &q.text);
    let h_q: BTreeMap<String, _> = questions
        .iter()
        .filter(|q| q.qtype.is_epq())
        .map(|q| Ok((q.id.clone(), encode_q(q)?)))
        .collect::<Result<_>>()?;
    ensure_dir(&ctx.cfg.paths.reports)?;
    let report = match mcfg.psi {
        PsiKind::Product => {
            let reps = load_reps(ctx, &mut m)?;
            pipeline::run_mhs(&questions, &kg, &mcfg, |q, e| {
                psi_product(e, q.t_q, &reps, &h_q[&q.id])
            })?
        }
        PsiKind::Neural => {
            let train = load_questions(ctx, &mut m, SplitName::Train)?;
            let tables = pipeline::train_cheating_tables(&ctx.cfg, &kg)?.model;
            let tables_out = ctx.checkpoint("mhs-tables.bin");
            ensure_dir(&ctx.cfg.paths.checkpoints)?;
            tables.save(&tables_out)?;
            m.output(&tables_out, &ctx.base)?;
            let (trained, skipped) =
                train_neural_psi(&train, &kg, &tables, encode_q, &mcfg, &ctx.cfg.psi_train())?;
            eprintln!("[tkgqa] mhs: {skipped} training questions had unreachable answers");
            let psi_out = ctx.checkpoint("mhs-psi.bin");
            trained.model.save(&psi_out)?;
            m.output(&psi_out, &ctx.base)?;
            let psi: &NeuralPsi = &trained.model;
            let tables: &EmbeddingTable = &tables;
            pipeline::run_mhs(&questions, &kg, &mcfg, |q, e| {
                psi.eval(e, q.t_q, tables, &h_q[&q.id])
            })?
        }
    };
    let out = ctx.report(&format!("mhs-{}.json", split.as_str()));
    write_json(&out, &report)?;
    m.output(&out, &ctx.base)?;
    m.write(&ctx.report(&format!("mhs-{}.manifest.json", split.as_str())))?;
    println!(
        "mhs {}: {} EPQs, {} reached, mrr {:.4}, hits@1 {:.4}, hits@3 {:.4}, hits@10 {:.4}",
        split.as_str(),
        report.count,
        report.reached,
        report.mrr,
        report.hits_at_1,
        report.hits_at_3,
        report.hits_at_10
    );
    log("mhs", t);
    Ok(())
}

#[derive(Serialize)]
struct DataEffReport<'a> {
    schema_version: u32,
    family: Family,
    seed: u64,
    config: &'a str,
    inversions: usize,
    points: &'a [CurvePoint],
}

fn cmd_data_eff(ctx: &Ctx, family: Option<Family>, emit_csv: bool) -> Result<()> {
    let t = Instant::now();
    let family = family.unwrap_or(ctx.cfg.data_efficiency.family);
    let mut m = ctx.manifest("data-eff");
    let vocab = load_vocab(ctx, &mut m)?;
    let reps = load_reps(ctx, &mut m)?;
    let sets = QuestionSets {
        train: load_questions(ctx, &mut m, SplitName::Train)?,
        valid: load_questions(ctx, &mut m, SplitName::Valid)?,
        test: load_questions(ctx, &mut m, SplitName::Test)?,
    };
    let curve = data_efficiency(
        family,
        sets.family(),
        &reps,
        &vocab,
        &ctx.cfg.qa_train(),
        &ctx.cfg.data_efficiency.fractions,
        ctx.cfg.data_eff_seed(),
    )?;
    ensure_dir(&ctx.cfg.paths.reports)?;
    let out = ctx.report("data-efficiency.json");
    write_json(
        &out,
        &DataEffReport {
            schema_version: 1,
            family,
            seed: ctx.cfg.data_eff_seed(),
            config: &ctx.echo,
            inversions: inversions(&curve),
            points: &curve,
        },
    )?;
    m.output(&out, &ctx.base)?;
    let mut table = String::from("fraction,train_questions,metric\n");
    for p in &curve {
        table += &format!("{},{},{:.4}\n", p.fraction, p.train_questions, p.metric);
    }
    if emit_csv || ctx.cfg.eval.emit_csv {
        let csv = ctx.report("data-efficiency.csv");
        fs::write(&csv, &table)?;
        m.output(&csv, &ctx.base)?;
    }
    m.write(&ctx.report("data-eff.manifest.json"))?;
    print!("{table}");
    log("data-eff", t);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Cmd::PrintConfig = cli.cmd {
        print!("{}", PipelineConfig::default().to_toml()?);
        return Ok(());
    }
    let ctx = Ctx::load(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    match &cli.cmd {
        Cmd::PrintConfig => unreachable!(),
        Cmd::Synth => cmd_synth(&ctx),
        Cmd::Ingest { start, end } => cmd_ingest(&ctx, *start, *end),
        Cmd::Split => cmd_split(&ctx),
        Cmd::TrainTkg => cmd_train_tkg(&ctx),
        Cmd::InferReps => cmd_infer_reps(&ctx),
        Cmd::Genq => cmd_genq(&ctx),
        Cmd::TrainQa { families } => cmd_train_qa(&ctx, families),
        Cmd::Eval {
            split,
            emit_csv,
            filtered,
        } => cmd_eval(&ctx, *split, *emit_csv, *filtered),
        Cmd::Mhs {
            cheating_snapshot,
            psi,
            split,
        } => cmd_mhs(&ctx, *cheating_snapshot, *psi, *split),
        Cmd::DataEff { family, emit_csv } => cmd_data_eff(&ctx, *family, *emit_csv),
        Cmd::Run => {
            cmd_ingest(&ctx, None, None)?;
            cmd_split(&ctx)?;
            cmd_train_tkg(&ctx)?;
            cmd_infer_reps(&ctx)?;
            cmd_genq(&ctx)?;
            cmd_train_qa(&ctx, &[])?;
            cmd_eval(&ctx, SplitName::Test, false, false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
