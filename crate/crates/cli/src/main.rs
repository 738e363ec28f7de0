use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use treeleak::attack::{run_attack, AttackMethod, AttackParams, AttackerView};
use treeleak::dataset::{gen_synthetic, load_matrix_csv};
use treeleak::eval::v_measure;
use treeleak::experiment::{
    audit_dir, merge_reports, run_experiment, write_atomic, write_report, CellManifest, DefenseGrid, ExperimentConfig,
    RunOptions,
};
use treeleak::he::HeBackend;
use treeleak::protocol::PartyTranscript;
use treeleak::rng::{derive_seed, stream};
use treeleak::tree::{ModelKind, TreeModel};
use treeleak::Error;

#[derive(Parser)]
#[command(name = "treeleak", version, about = "Label leakage attacks and defenses in tree-based vertical FL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid described by a JSON config.
    Run(RunArgs),
    /// Write a synthetic Gaussian-blob dataset as CSV.
    GenData(GenDataArgs),
    /// Attack one dumped transcript with the attacker's local features.
    Attack(AttackArgs),
    /// Replay dumped transcripts and check the disclosure bound.
    Audit(AuditArgs),
    /// Merge the reports of several run folders.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DefenseArg {
    None,
    #[value(alias = "lp2st")]
    LpMst,
    IdLmid,
    ReducedLeakage,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Paillier,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Id2graph,
    Cl,
    Uni,
    UniCl,
}

impl From<MethodArg> for AttackMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Id2graph => AttackMethod::Id2graph,
            MethodArg::Cl => AttackMethod::Cl,
            MethodArg::Uni => AttackMethod::Uni,
            MethodArg::UniCl => AttackMethod::UniCl,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Dump per-cell transcripts, models and local features (relative to --out-dir).
    #[arg(long)]
    dump_transcripts: Option<PathBuf>,
    #[arg(long)]
    emit_plotdata: bool,
    #[arg(long, env = "TREELEAK_THREADS")]
    threads: Option<usize>,
    /// Replace the configured defenses with a single one.
    #[arg(long, value_enum)]
    defense: Option<DefenseArg>,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// Repair the LP-MST model by grafting.
    #[arg(long)]
    graft: bool,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    xi: Vec<f64>,
    #[arg(long, value_enum, default_value = "mock")]
    he_backend: BackendArg,
    #[arg(long, default_value_t = 2048)]
    key_bits: usize,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    features: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// A dumped cell folder; supplies transcript, features, class count and model kind.
    #[arg(long, conflicts_with_all = ["transcript", "features"])]
    cell: Option<PathBuf>,
    #[arg(long, requires = "features")]
    transcript: Option<PathBuf>,
    /// Local feature CSV with a header row, one row per training sample.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Model dump; supplies class count and model kind.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_enum, default_values_t = [MethodArg::Id2graph, MethodArg::Cl, MethodArg::Uni, MethodArg::UniCl], value_delimiter = ',')]
    methods: Vec<MethodArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "attack_out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Folder holding cell*/ dumps.
    dir: PathBuf,
    /// Threshold to check instead of each cell's configured one.
    #[arg(long)]
    xi: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long, default_value = "merged")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. })));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, a: &RunArgs) -> anyhow::Result<()> {
    let grid = |v: &[f64]| if v.is_empty() { vec![0.1, 0.5, 1.0, 2.0] } else { v.to_vec() };
    if let Some(d) = a.defense {
        let stages = 2;
        cfg.defenses = vec![match d {
            DefenseArg::None => DefenseGrid::None,
            DefenseArg::ReducedLeakage => DefenseGrid::ReducedLeakage,
            DefenseArg::LpMst if a.graft => DefenseGrid::GraftingLdp {
                epsilon: grid(&a.epsilon),
                stages,
            },
            DefenseArg::LpMst => DefenseGrid::LpMst {
                epsilon: grid(&a.epsilon),
                stages,
            },
            DefenseArg::IdLmid => DefenseGrid::IdLmid {
                xi: grid(&a.xi),
                he_backend: match a.he_backend {
                    BackendArg::Mock => HeBackend::Mock,
                    BackendArg::Paillier => HeBackend::Paillier,
                },
                key_bits: a.key_bits,
            },
        }];
    } else if a.graft || !a.epsilon.is_empty() || !a.xi.is_empty() {
        return Err(Error::Config {
            path: "--defense".into(),
            message: "--epsilon, --xi and --graft need --defense".into(),
        }
        .into());
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
    }
    cfg.validate()?;
    Ok(())
}

fn cmd_run(a: RunArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    apply_overrides(&mut cfg, &a)?;
    let opts = RunOptions {
        out_dir: a.out_dir.clone(),
        dump_transcripts: a.dump_transcripts.clone(),
        emit_plotdata: a.emit_plotdata,
        threads: a.threads,
    };
    let report = run_experiment(&cfg, &opts).with_context(|| format!("running {}", a.config.display()))?;
    for s in &report.summary {
        println!(
            "{:<16} {:<15} {:>6} {:<9} V {:.3} ± {:.3}  AUC {:.3}",
            s.dataset,
            s.defense,
            s.param.map_or_else(|| "-".into(), |p| p.to_string()),
            s.method.name(),
            s.v_measure_mean,
            s.v_measure_std,
            s.test_auc_mean
        );
    }
    println!("wrote {}", a.out_dir.join("report.json").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(a: GenDataArgs) -> anyhow::Result<ExitCode> {
    let d = gen_synthetic(a.n, a.features, a.classes, a.spread, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    d.write_csv(&a.out)?;
    println!("wrote {} rows to {}", d.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_attack(a: AttackArgs) -> anyhow::Result<ExitCode> {
    let manifest: Option<CellManifest> = a.cell.as_ref().map(|c| read_json(&c.join("cell.json"))).transpose()?;
    let model: Option<TreeModel> = match (&a.model, &a.cell) {
        (Some(p), _) => Some(read_json(p)?),
        (None, Some(c)) if c.join("model.json").is_file() => Some(read_json(&c.join("model.json"))?),
        _ => None,
    };
    let (transcript_path, features_path) = match (&a.cell, &manifest) {
        (Some(c), Some(m)) => (c.join(format!("party{}.json", m.attacker_party)), c.join("local_features.csv")),
        _ => match (&a.transcript, &a.features) {
            (Some(t), Some(f)) => (t.clone(), f.clone()),
            _ => bail!("give --cell, or both --transcript and --features"),
        },
    };
    let class_count = a
        .classes
        .or(manifest.as_ref().map(|m| m.class_count))
        .or(model.as_ref().map(|m| m.class_count))
        .context("class count unknown: pass --classes or --model")?;
    let kind = manifest
        .as_ref()
        .map(|m| m.model_kind)
        .or(model.as_ref().map(|m| m.model_kind))
        .unwrap_or(ModelKind::RandomForest);
    let text = std::fs::read_to_string(&transcript_path).with_context(|| format!("reading {}", transcript_path.display()))?;
    let transcript = PartyTranscript::from_json(&text)?;
    let (_, local) = load_matrix_csv(&features_path)?;
    if local.rows() != transcript.sample_count {
        bail!(
            "{} has {} rows but the transcript covers {} samples",
            features_path.display(),
            local.rows(),
            transcript.sample_count
        );
    }
    let seed = a.seed.or(manifest.as_ref().map(|m| m.cell.seed)).unwrap_or(0);
    let view = AttackerView::from_transcript(&transcript);
    let params = AttackParams::default();
    let labels = manifest.as_ref().map(|m| &m.training_labels);

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut summary = Vec::new();
    for m in a.methods {
        let method = AttackMethod::from(m);
        let res = run_attack(method, &view, &local, class_count, kind, &params, derive_seed(seed, stream::KMEANS))?;
        let mut csv = String::from("sample_id,cluster\n");
        for (i, c) in res.clusters.iter().enumerate() {
            csv.push_str(&format!("{i},{c}\n"));
        }
        write_atomic(&a.out_dir.join(format!("{}_clusters.csv", method.name())), csv.as_bytes())?;
        let v = labels.map(|l| v_measure(l, &res.clusters)).transpose()?;
        println!(
            "{:<9} clusters {:>4}{}",
            method.name(),
            res.cluster_count,
            v.map_or_else(String::new, |v| format!("  V {v:.4}"))
        );
        summary.push(serde_json::json!({
            "method": method,
            "cluster_count": res.cluster_count,
            "modularity": res.modularity,
            "community_count": res.community_count,
            "edge_count": res.edge_count,
            "v_measure": v,
        }));
    }
    write_atomic(&a.out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(a: AuditArgs) -> anyhow::Result<ExitCode> {
    let audits = audit_dir(&a.dir, a.xi)?;
    let mut failed = 0;
    for c in &audits {
        let r = &c.report;
        let status = if r.passed() { "ok" } else { "VIOLATION" };
        println!(
            "{:<40} party {} spaces {:>5} max bound {:.4} xi {} {status}",
            c.cell,
            r.party_id,
            r.spaces_checked,
            r.max_bound,
            r.xi.map_or_else(|| "-".into(), |x| x.to_string())
        );
        for f in &r.findings {
            println!("  {}", serde_json::to_string(f)?);
        }
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        eprintln!("{failed} of {} transcripts failed the audit", audits.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<ExitCode> {
    let report = merge_reports(&a.dirs)?;
    write_report(&a.out_dir, &report)?;
    println!("merged {} rows into {}", report.rows.len(), a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}
