//! `harm`: ingest event data, mine rules, fit and freeze the hierarchical
//! model, predict, evaluate and simulate.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use harm_core::eval::{recommend, run_study, ExperimentConfig};
use harm_core::events::{
    apply_recurrence_policy, build_covariate_matrix, ingest, materialize_preexisting, Encounter, EventDatabase,
    IngestOptions, RecurrencePolicy,
};
use harm_core::model::{fit, group_risk_report, write_diagnostics_csv, write_group_report, write_posterior_jsonl, ChainConfig, Kernel, PosteriorSummary};
use harm_core::online::{freeze, Snapshot};
use harm_core::rules::{count_rules, enumerate_rules, rank_adjusted_confidence, rank_confidence, rank_min_support, PatientTracker, RuleId, RuleSet};
use harm_core::synth::{synthesize, SynthConfig};
use log::info;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "harm", version, about = "Hierarchical association rule model for sequential event prediction")]
struct Cli {
    /// Worker threads for parallel stages; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a database from an encounter stream and a covariate table.
    Ingest {
        /// Encounter records as JSON lines: patient_id, day, conditions.
        #[arg(long)]
        encounters: PathBuf,
        /// CSV with patient_id, gender, age, race, treatment.
        #[arg(long)]
        covariates: PathBuf,
        /// CSV of patient_id, condition pairs present before the first visit.
        #[arg(long)]
        preexisting: Option<PathBuf>,
        /// Reports of an active condition within this many days are dropped.
        #[arg(long, default_value_t = 30)]
        window_days: i64,
        /// Database JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank one patient's rules with a frequentist score.
    Mine {
        /// Database JSON.
        #[arg(long)]
        db: PathBuf,
        #[arg(long, value_enum)]
        ranker: Ranker,
        /// Pseudo-count for adjconf.
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        /// Support threshold for minsup.
        #[arg(long, default_value_t = 2)]
        theta: u32,
        /// Patient id.
        #[arg(long)]
        patient: String,
        /// Print at most this many rules.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Run the sampler and write a posterior summary.
    Fit {
        /// Database JSON.
        #[arg(long)]
        db: PathBuf,
        /// TOML chain settings; defaults apply when omitted.
        #[arg(long)]
        chain_config: Option<PathBuf>,
        /// Chain seed; overrides any seed in the chain config.
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        kernel: Option<KernelArg>,
        /// Posterior summary JSON.
        #[arg(long)]
        out: PathBuf,
        /// Per-cell posterior means and quantiles as JSON lines.
        #[arg(long)]
        posterior_out: Option<PathBuf>,
        /// Trace and acceptance rates as CSV.
        #[arg(long)]
        diagnostics_out: Option<PathBuf>,
    },
    /// Freeze a fitted summary against a database's counts, or absorb new
    /// encounters into an existing frozen posterior.
    Freeze {
        /// Posterior summary to freeze; needs --db.
        #[arg(long, requires = "db", conflicts_with_all = ["frozen", "absorb"])]
        summary: Option<PathBuf>,
        /// Database whose counts the summary is frozen against.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Frozen posterior to update; needs --absorb.
        #[arg(long, requires = "absorb")]
        frozen: Option<PathBuf>,
        /// Encounter stream of new visits for known patients.
        #[arg(long, requires = "frozen")]
        absorb: Option<PathBuf>,
        /// Frozen posterior (JSON lines) to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Top conditions expected at a patient's next report.
    Predict {
        /// Frozen posterior.
        #[arg(long)]
        frozen: PathBuf,
        /// Patient id.
        #[arg(long)]
        patient: String,
        /// Number of conditions to list.
        #[arg(long, default_value_t = 3)]
        top: usize,
    },
    /// Repeated sequential-prediction study against the baselines.
    Evaluate {
        /// Database JSON.
        #[arg(long)]
        db: PathBuf,
        /// TOML study settings; defaults apply when omitted.
        #[arg(long)]
        experiment_config: Option<PathBuf>,
        /// Study seed; overrides any seed in the config.
        #[arg(long)]
        seed: u64,
        /// Overrides the configured number of repetitions.
        #[arg(long)]
        runs: Option<usize>,
        /// Refit after this many absorbed test encounters; 0 freezes once.
        #[arg(long)]
        refit_every: Option<usize>,
        /// Output directory for scores, summary and plot data.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic database from the generative model.
    Simulate {
        /// Generator seed.
        #[arg(long)]
        seed: u64,
        /// Number of patients.
        #[arg(long)]
        patients: usize,
        /// Vocabulary size.
        #[arg(long)]
        conditions: usize,
        /// TOML generator settings; the flags above take precedence.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        /// Database JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Generating parameters as JSON.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Posterior-mean risk bands by demographic group.
    Report {
        /// Posterior summary.
        #[arg(long)]
        summary: PathBuf,
        /// Database the summary was fitted on, for labels and covariates.
        #[arg(long)]
        db: PathBuf,
        /// Comma-separated indicator columns.
        #[arg(long, value_delimiter = ',')]
        group_by: Vec<String>,
        /// Comma-separated rules, `a->b`, or `{}->b` for an empty lhs.
        #[arg(long, value_delimiter = ',')]
        rules: Vec<String>,
        /// CSV table to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ranker {
    Conf,
    Adjconf,
    Minsup,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    StandardBeta,
    ShiftedBeta,
}

/// Exit 1 for bad input or configuration, 2 for failures while computing.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<harm_core::Error> for Failure {
    fn from(e: harm_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(anyhow!(msg.into()))
}

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path).map(BufReader::new).with_context(|| format!("cannot open {}", path.display())).map_err(Failure::Validation)
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path).map(BufWriter::new).with_context(|| format!("cannot create {}", path.display())).map_err(Failure::Runtime)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("cannot parse {}", path.display())).map_err(Failure::Validation)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let mut out = create(path)?;
    serde_json::to_writer(&mut out, value).map_err(|e| Failure::Runtime(e.into()))?;
    out.flush()?;
    Ok(())
}

fn read_toml(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).map_err(Failure::Validation)
}

fn patient(found: Option<usize>, id: &str) -> Outcome<usize> {
    found.ok_or_else(|| invalid(format!("unknown patient {id:?}")))
}

fn all_rules(db: &EventDatabase) -> Outcome<RuleSet> {
    Ok(enumerate_rules(&db.vocabulary, None)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Ingest { encounters, covariates, preexisting, window_days, out } => {
            let mut pre = preexisting.as_deref().map(open).transpose()?;
            let raw = ingest(
                open(&encounters)?,
                open(&covariates)?,
                pre.as_mut().map(|r| r as &mut dyn BufRead),
                &IngestOptions::default(),
            )?;
            let policy = RecurrencePolicy { window_days, ..RecurrencePolicy::default() };
            let db = materialize_preexisting(&apply_recurrence_policy(&raw, policy)?);
            info!("{} patients, {} conditions", db.n_patients(), db.n_conditions());
            write_json(&out, &db)
        }
        Command::Mine { db, ranker, k, theta, patient: id, top } => {
            let db: EventDatabase = read_json(&db)?;
            let rules = all_rules(&db)?;
            let i = patient(db.patient_index(&id), &id)?;
            let counts = count_rules(&db, &rules, None)?;
            let ranked = match ranker {
                Ranker::Conf => rank_confidence(&counts, &rules, i),
                Ranker::Adjconf => rank_adjusted_confidence(&counts, &rules, i, k)?,
                Ranker::Minsup => rank_min_support(&counts, &rules, i, theta),
            };
            let mut out = io::stdout().lock();
            for (rule, score) in ranked.iter().take(top.unwrap_or(usize::MAX)) {
                let r = rule.id.index();
                writeln!(out, "{}\t{score}\t{}\t{}", rule.describe(&db), counts.y(i, r), counts.n(i, r))?;
            }
            Ok(())
        }
        Command::Fit { db, chain_config, seed, kernel, out, posterior_out, diagnostics_out } => {
            let db: EventDatabase = read_json(&db)?;
            let mut cfg = match chain_config {
                Some(p) => ChainConfig::from_toml(&read_toml(&p)?)?,
                None => ChainConfig::default(),
            };
            cfg.seed = seed;
            if let Some(k) = kernel {
                cfg.kernel = match k {
                    KernelArg::StandardBeta => Kernel::StandardBeta,
                    KernelArg::ShiftedBeta => Kernel::ShiftedBeta,
                };
            }
            if posterior_out.is_some() {
                cfg.keep_draws = true;
            }
            if db.n_patients() == 0 {
                return Err(invalid("database has no patients"));
            }
            let rules = all_rules(&db)?;
            let counts = count_rules(&db, &rules, None)?;
            let m = build_covariate_matrix(&db, false)?;
            info!("fitting {} patients × {} rules, {} sweeps", counts.n_patients, counts.n_rules, cfg.iterations);
            let summary = fit(&counts, &m, &cfg)?;
            let a = summary.acceptance;
            info!("acceptance tau {:.3} beta {:.3} gamma {:.3}", a.tau, a.beta, a.gamma);
            write_json(&out, &summary)?;
            if let Some(p) = posterior_out {
                let mut w = create(&p)?;
                write_posterior_jsonl(&summary, &db, &rules, &mut w)?;
                w.flush()?;
            }
            if let Some(p) = diagnostics_out {
                let mut w = create(&p)?;
                write_diagnostics_csv(&summary, &mut w)?;
                w.flush()?;
            }
            Ok(())
        }
        Command::Freeze { summary, db, frozen, absorb, out } => {
            let snap = match (summary, db, frozen, absorb) {
                (Some(s), Some(d), None, None) => freeze_summary(&s, &d)?,
                (None, None, Some(f), Some(a)) => absorb_stream(&f, &a)?,
                _ => return Err(invalid("freeze needs either --summary and --db, or --frozen and --absorb")),
            };
            let mut w = create(&out)?;
            snap.write_jsonl(&mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Predict { frozen, patient: id, top } => {
            let snap = Snapshot::read_jsonl(open(&frozen)?)?;
            let rules = snap.rules()?;
            let i = patient(snap.patient_index(&id), &id)?;
            let fp = &snap.frozen;
            let tracker = PatientTracker::from_counts(&rules, fp.counts().row_y(i), fp.counts().row_n(i));
            let expected = fp.expected_row(i);
            let picks = recommend(&tracker, top, |r, _, _| Some(expected[r.index()]));
            let mut out = io::stdout().lock();
            for c in picks {
                let best = rules
                    .rules()
                    .iter()
                    .filter(|r| r.rhs() == c && tracker.is_applicable(r.id))
                    .map(|r| expected[r.id.index()])
                    .fold(f64::NEG_INFINITY, f64::max);
                writeln!(out, "{}\t{best}", snap.vocabulary[c.index()].label)?;
            }
            Ok(())
        }
        Command::Evaluate { db, experiment_config, seed, runs, refit_every, out } => {
            let db: EventDatabase = read_json(&db)?;
            let mut cfg = match experiment_config {
                Some(p) => ExperimentConfig::from_toml(&read_toml(&p)?)?,
                None => ExperimentConfig::default(),
            };
            cfg.seed = seed;
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(n) = refit_every {
                cfg.refit_every = n;
            }
            let report = run_study(&db, &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display())).map_err(Failure::Runtime)?;
            let mut w = create(&out.join("scores.csv"))?;
            report.write_scores_csv(&mut w)?;
            w.flush()?;
            let mut w = create(&out.join("summary.txt"))?;
            report.write_summary(&mut w)?;
            w.flush()?;
            let mut w = create(&out.join("plot_data.csv"))?;
            report.write_plot_data(&mut w)?;
            w.flush()?;
            write_json(&out.join("report.json"), &report)?;
            report.write_summary(io::stdout().lock())?;
            Ok(())
        }
        Command::Simulate { seed, patients, conditions, synth_config, out, truth_out } => {
            let mut cfg: SynthConfig = match synth_config {
                Some(p) => toml::from_str(&read_toml(&p)?).map_err(|e| invalid(e.to_string()))?,
                None => SynthConfig::default(),
            };
            cfg.seed = seed;
            cfg.n_patients = patients;
            cfg.n_conditions = conditions;
            let syn = synthesize(&cfg)?;
            let reports: usize = syn.db.patients.iter().map(|p| p.n_reports()).sum();
            info!("{} patients, {} reports", syn.db.n_patients(), reports);
            write_json(&out, &syn.db)?;
            if let Some(t) = truth_out {
                write_json(&t, &syn.truth)?;
            }
            Ok(())
        }
        Command::Report { summary, db, group_by, rules: specs, out } => {
            let summary: PosteriorSummary = read_json(&summary)?;
            let db: EventDatabase = read_json(&db)?;
            let rules = all_rules(&db)?;
            if rules.len() != summary.n_rules || db.n_patients() != summary.n_patients {
                return Err(invalid("database does not match the summary"));
            }
            let ids = specs.iter().map(|s| parse_rule(s, &db, &rules)).collect::<Outcome<Vec<RuleId>>>()?;
            let cols: Vec<&str> = group_by.iter().map(String::as_str).collect();
            let bands = group_risk_report(&summary, &cols, &ids)?;
            let mut w = create(&out)?;
            write_group_report(&bands, &db, &rules, &mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn parse_rule(text: &str, db: &EventDatabase, rules: &RuleSet) -> Outcome<RuleId> {
    let (lhs, rhs) = text.split_once("->").unwrap_or(("", text));
    let lookup = |label: &str| db.condition_id(label.trim()).ok_or_else(|| invalid(format!("unknown condition {label:?} in rule {text:?}")));
    let lhs = match lhs.trim() {
        "" | "{}" => None,
        a => Some(lookup(a)?),
    };
    rules.find(lhs, lookup(rhs)?).ok_or_else(|| invalid(format!("no rule {text:?}")))
}

fn freeze_summary(summary: &Path, db: &Path) -> Outcome<Snapshot> {
    let summary: PosteriorSummary = read_json(summary)?;
    let db: EventDatabase = read_json(db)?;
    let rules = all_rules(&db)?;
    if rules.len() != summary.n_rules || db.n_patients() != summary.n_patients {
        return Err(invalid("database does not match the summary"));
    }
    let counts = count_rules(&db, &rules, None)?;
    Ok(Snapshot {
        vocabulary: db.vocabulary.clone(),
        active: rules.conditions().to_vec(),
        patient_ids: db.patients.iter().map(|p| p.patient_id.clone()).collect(),
        covariate_names: summary.covariates.names.clone(),
        frozen: freeze(&summary, &counts)?,
    })
}

#[derive(Deserialize)]
struct StreamRecord {
    patient_id: String,
    day: i64,
    conditions: Vec<String>,
}

/// Adds new encounters to known patients. The encounters are taken as
/// already filtered for recurrences and must follow the patient's history.
fn absorb_stream(frozen: &Path, stream: &Path) -> Outcome<Snapshot> {
    let mut snap = Snapshot::read_jsonl(open(frozen)?)?;
    let rules = snap.rules()?;
    let mut by_patient: BTreeMap<usize, Vec<Encounter>> = BTreeMap::new();
    for (k, line) in open(stream)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StreamRecord =
            serde_json::from_str(&line).map_err(|e| invalid(format!("{}: line {}: {e}", stream.display(), k + 1)))?;
        let i = snap.patient_index(&rec.patient_id).ok_or_else(|| invalid(format!("unknown patient {:?}", rec.patient_id)))?;
        let mut conditions = Vec::new();
        for label in &rec.conditions {
            let c = snap
                .vocabulary
                .iter()
                .find(|c| &c.label == label)
                .ok_or_else(|| invalid(format!("unknown condition {label:?} on line {}", k + 1)))?;
            if !conditions.contains(&c.id) {
                conditions.push(c.id);
            }
        }
        let list = by_patient.entry(i).or_default();
        list.push(Encounter { seq_index: list.len(), day: rec.day, conditions });
    }
    for (i, mut encounters) in by_patient {
        encounters.sort_by_key(|e| (e.day, e.seq_index));
        let (y0, n0) = (snap.frozen.counts().row_y(i).to_vec(), snap.frozen.counts().row_n(i).to_vec());
        let mut tracker = PatientTracker::from_counts(&rules, &y0, &n0);
        for e in &encounters {
            tracker.absorb_encounter(e);
        }
        let dy: Vec<u32> = tracker.y().iter().zip(&y0).map(|(a, b)| a - b).collect();
        let dn: Vec<u32> = tracker.n().iter().zip(&n0).map(|(a, b)| a - b).collect();
        snap.frozen.absorb_patient_in_place(i, &dy, &dn)?;
    }
    Ok(snap)
}
