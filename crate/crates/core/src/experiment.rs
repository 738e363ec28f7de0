//! Declarative experiment grid: dataset, partition, model, defenses, seeds.
//!
//! Every `(defense setting, seed)` pair is a cell. Cells with the same seed
//! share the train/test split, the feature partition, the feature
//! subsampling and the label-noise draws, so defense settings are compared
//! on identical data.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackMethod, AttackParams, AttackerView};
use crate::dataset::{gen_synthetic, load_csv, make_partition, Dataset, PartitionSpec, VerticalView, ACTIVE_PARTY};
use crate::error::{Error, Result};
use crate::eval::{auc, mean_std, v_measure};
use crate::he::HeBackend;
use crate::protocol::{
    audit_transcript, comm_rate, train_federated, AuditReport, Defense, PartyTranscript, ProtocolConfig, TrainOutput,
};
use crate::rng::{self, derive_seed, stream};
use crate::tree::{BoosterParams, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default)]
        class_count: Option<usize>,
    },
    Synthetic {
        n: usize,
        features: usize,
        classes: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    /// Half the features (rounded down) to the attacker, reshuffled per seed.
    RandomHalf,
    TopKPercentileToAttacker { k_percent: u32 },
    Explicit { parties: Vec<Vec<usize>> },
}

impl Default for PartitionMode {
    fn default() -> Self {
        PartitionMode::RandomHalf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub model_kind: ModelKind,
    #[serde(default = "d_depth")]
    pub max_depth: usize,
    #[serde(default = "d_trees")]
    pub tree_count: usize,
    #[serde(default = "d_ratio")]
    pub feature_subsample_ratio: f64,
    #[serde(default = "d_percentiles")]
    pub max_percentiles: usize,
    #[serde(default)]
    pub booster: BoosterParams,
}

fn d_depth() -> usize {
    6
}
fn d_trees() -> usize {
    5
}
fn d_ratio() -> f64 {
    0.8
}
fn d_percentiles() -> usize {
    32
}

fn default_grid() -> Vec<f64> {
    vec![0.1, 0.5, 1.0, 2.0]
}
fn default_stages() -> usize {
    2
}
fn default_key_bits() -> usize {
    2048
}
fn default_backend() -> HeBackend {
    HeBackend::Mock
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseGrid {
    None,
    LpMst {
        #[serde(default = "default_grid")]
        epsilon: Vec<f64>,
        #[serde(default = "default_stages")]
        stages: usize,
    },
    GraftingLdp {
        #[serde(default = "default_grid")]
        epsilon: Vec<f64>,
        #[serde(default = "default_stages")]
        stages: usize,
    },
    IdLmid {
        #[serde(default = "default_grid")]
        xi: Vec<f64>,
        #[serde(default = "default_backend")]
        he_backend: HeBackend,
        #[serde(default = "default_key_bits")]
        key_bits: usize,
    },
    ReducedLeakage,
}

impl DefenseGrid {
    pub fn settings(&self) -> Vec<Defense> {
        match self {
            DefenseGrid::None => vec![Defense::None],
            DefenseGrid::ReducedLeakage => vec![Defense::ReducedLeakage],
            DefenseGrid::LpMst { epsilon, stages } => epsilon
                .iter()
                .map(|&e| Defense::LpMst {
                    epsilon: e,
                    stages: *stages,
                })
                .collect(),
            DefenseGrid::GraftingLdp { epsilon, stages } => epsilon
                .iter()
                .map(|&e| Defense::GraftingLdp {
                    epsilon: e,
                    stages: *stages,
                })
                .collect(),
            DefenseGrid::IdLmid {
                xi,
                he_backend,
                key_bits,
            } => xi
                .iter()
                .map(|&x| Defense::IdLmid {
                    xi: x,
                    he_backend: *he_backend,
                    key_bits: *key_bits,
                })
                .collect(),
        }
    }

    fn grid_len(&self) -> Option<usize> {
        match self {
            DefenseGrid::LpMst { epsilon, .. } | DefenseGrid::GraftingLdp { epsilon, .. } => Some(epsilon.len()),
            DefenseGrid::IdLmid { xi, .. } => Some(xi.len()),
            _ => None,
        }
    }
}

fn default_attacks() -> Vec<AttackMethod> {
    AttackMethod::ALL.to_vec()
}
fn default_defenses() -> Vec<DefenseGrid> {
    vec![DefenseGrid::None]
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    /// Random subsample of the loaded table, drawn per seed.
    #[serde(default)]
    pub max_rows: Option<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub partition: PartitionMode,
    pub model: ModelSettings,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackMethod>,
    #[serde(default)]
    pub attack_params: AttackParams,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<DefenseGrid>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let DatasetSource::Csv { path: p, .. } = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: path.into(),
                message: message.into(),
            })
        };
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct");
        }
        if self.defenses.is_empty() {
            return bad("defenses", "at least one defense entry is required");
        }
        for (i, d) in self.defenses.iter().enumerate() {
            if d.grid_len() == Some(0) {
                return bad(&format!("defenses[{i}]"), "parameter grid must be nonempty");
            }
        }
        if self.attacks.is_empty() {
            return bad("attacks", "at least one attack is required");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", "must be in (0, 1)");
        }
        for (i, d) in self.defenses.iter().enumerate() {
            for setting in d.settings() {
                let mut pc = self.protocol_config(0);
                pc.defense = setting;
                if let Err(e) = pc.validate() {
                    return bad(&format!("defenses[{i}]"), &e.to_string());
                }
            }
        }
        Ok(())
    }

    pub fn protocol_config(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            model_kind: self.model.model_kind,
            max_depth: self.model.max_depth,
            tree_count: self.model.tree_count,
            feature_subsample_ratio: self.model.feature_subsample_ratio,
            max_percentiles: self.model.max_percentiles,
            min_samples_split: 2,
            booster: self.model.booster,
            defense: Defense::None,
            seed,
        }
    }

    pub fn dataset_name(&self) -> String {
        match &self.dataset {
            DatasetSource::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
            DatasetSource::Synthetic { n, features, classes, .. } => format!("synthetic_{n}x{features}_c{classes}"),
        }
    }

    /// All `(defense, seed)` cells in grid order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for grid in &self.defenses {
            for defense in grid.settings() {
                for &seed in &self.seeds {
                    out.push(Cell {
                        index: out.len(),
                        defense: defense.clone(),
                        seed,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub defense: Defense,
    pub seed: u64,
}

/// Data prepared for one seed: split, partition and the attacker's slice.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub views: Vec<VerticalView>,
    pub warnings: Vec<String>,
}

pub fn load_source(src: &DatasetSource) -> Result<Dataset> {
    match src {
        DatasetSource::Csv {
            path,
            label_column,
            class_count,
        } => load_csv(path, label_column, *class_count),
        DatasetSource::Synthetic {
            n,
            features,
            classes,
            spread,
            seed,
        } => gen_synthetic(*n, *features, *classes, *spread, *seed),
    }
}

pub fn prepare_seed(cfg: &ExperimentConfig, full: &Dataset, seed: u64) -> Result<SeedData> {
    let data = match cfg.max_rows {
        Some(m) if m < full.len() => {
            let mut rows: Vec<usize> = (0..full.len()).collect();
            rows.shuffle(&mut rng::rng(derive_seed(seed, stream::SPLIT), stream::SPLIT));
            rows.truncate(m);
            rows.sort_unstable();
            full.select_rows(&rows)
        }
        _ => full.clone(),
    };
    let split = crate::dataset::train_test_split(&data, cfg.test_fraction, seed)?;
    let spec = match &cfg.partition {
        PartitionMode::RandomHalf => PartitionSpec::RandomHalf { seed },
        PartitionMode::TopKPercentileToAttacker { k_percent } => PartitionSpec::TopKPercentileToAttacker {
            k_percent: *k_percent,
        },
        PartitionMode::Explicit { parties } => PartitionSpec::Explicit {
            parties: parties.clone(),
        },
    };
    let views = make_partition(&split.train, &spec)?;
    Ok(SeedData {
        seed,
        train: split.train,
        test: split.test,
        views,
        warnings: split.warnings,
    })
}

/// The attacker is the lowest-numbered passive party.
pub fn attacker_view(views: &[VerticalView]) -> Option<&VerticalView> {
    views
        .iter()
        .filter(|v| v.party_id != ACTIVE_PARTY)
        .min_by_key(|v| v.party_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: ModelKind,
    pub defense: String,
    pub param: Option<f64>,
    pub seed: u64,
    pub method: AttackMethod,
    pub v_measure: f64,
    pub test_auc: f64,
    pub ciphertexts: u64,
    pub comm_rate: Option<f64>,
    pub broadcasts: u64,
    /// Instance spaces the attacker could see.
    pub visible_spaces: usize,
    /// Largest MI bound over those spaces, measured on training labels.
    pub max_visible_bound: f64,
}

/// Everything a cell produced, for reports and dumps.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub cell: Cell,
    pub rows: Vec<ReportRow>,
    pub train: TrainOutput,
    pub runtime_ms: u128,
}

fn param_label(p: Option<f64>) -> String {
    p.map_or_else(|| "-".into(), |v| format!("{v}"))
}

/// Trains and attacks one cell. `baseline` is the undefended run on the
/// same seed, used for the ciphertext rate.
pub fn run_cell(
    cfg: &ExperimentConfig,
    seed_data: &SeedData,
    cell: &Cell,
    baseline: Option<&TrainOutput>,
) -> Result<CellOutput> {
    let start = Instant::now();
    let mut pc = cfg.protocol_config(cell.seed);
    pc.defense = cell.defense.clone();
    let train = train_federated(&pc, &seed_data.views, &seed_data.train)?;
    let rows = evaluate(cfg, seed_data, cell, &train, baseline)?;
    Ok(CellOutput {
        cell: cell.clone(),
        rows,
        train,
        runtime_ms: start.elapsed().as_millis(),
    })
}

fn evaluate(
    cfg: &ExperimentConfig,
    sd: &SeedData,
    cell: &Cell,
    train: &TrainOutput,
    baseline: Option<&TrainOutput>,
) -> Result<Vec<ReportRow>> {
    let c = sd.train.class_count;
    let scores = train.model.predict_matrix(&sd.test.features)?;
    let test_auc = auc(&sd.test.labels, &scores, c).unwrap_or(f64::NAN);
    let rate = baseline.and_then(|b| comm_rate(&train.comm, &b.comm).ok());
    let attacker = attacker_view(&sd.views).ok_or_else(|| Error::InvalidPartition("no passive party".into()))?;
    let transcript = train
        .transcripts
        .iter()
        .find(|t| t.party_id == attacker.party_id)
        .ok_or_else(|| Error::Protocol("missing attacker transcript".into()))?;
    let view = AttackerView::from_transcript(transcript);
    let audit = audit_transcript(transcript, &sd.train.labels, c, None)?;
    let local = sd.train.features.select_cols(&attacker.feature_indices);
    let attack_seed = derive_seed(cell.seed, stream::KMEANS);
    cfg.attacks
        .iter()
        .map(|&method| {
            let res = run_attack(method, &view, &local, c, cfg.model.model_kind, &cfg.attack_params, attack_seed)?;
            Ok(ReportRow {
                dataset: cfg.dataset_name(),
                model: cfg.model.model_kind,
                defense: cell.defense.name().into(),
                param: cell.defense.parameter(),
                seed: cell.seed,
                method,
                v_measure: v_measure(&sd.train.labels, &res.clusters)?,
                test_auc,
                ciphertexts: train.comm.total(),
                comm_rate: rate,
                broadcasts: train.comm.broadcasts,
                visible_spaces: audit.spaces_checked,
                max_visible_bound: audit.max_bound,
            })
        })
        .collect()
}

/// Worker count: `TREELEAK_THREADS` if set, otherwise rayon's default.
pub fn thread_count(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var("TREELEAK_THREADS").ok().and_then(|v| v.parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs every cell; results come back in grid order regardless of threads.
pub fn run_grid(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<CellOutput>> {
    cfg.validate()?;
    let full = load_source(&cfg.dataset)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(threads))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| {
        let seeds: Vec<SeedData> = cfg
            .seeds
            .par_iter()
            .map(|&s| prepare_seed(cfg, &full, s))
            .collect::<Result<_>>()?;
        let baselines: Vec<TrainOutput> = seeds
            .par_iter()
            .map(|sd| train_federated(&cfg.protocol_config(sd.seed), &sd.views, &sd.train))
            .collect::<Result<_>>()?;
        let cells = cfg.cells();
        cells
            .par_iter()
            .map(|cell| {
                let k = cfg.seeds.iter().position(|&s| s == cell.seed).expect("cell seed is configured");
                run_cell(cfg, &seeds[k], cell, Some(&baselines[k])).map_err(|e| {
                    Error::Protocol(format!(
                        "cell {} ({} {} seed {}) failed: {e}",
                        cell.index,
                        cell.defense.name(),
                        param_label(cell.defense.parameter()),
                        cell.seed
                    ))
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub dataset: String,
    pub model: ModelKind,
    pub defense: String,
    pub param: Option<f64>,
    pub method: AttackMethod,
    pub runs: usize,
    pub v_measure_mean: f64,
    pub v_measure_std: f64,
    pub v_measure: String,
    pub test_auc_mean: f64,
    pub comm_rate_mean: Option<f64>,
}

/// Mean and sample deviation per `(dataset, model, defense, param, method)`,
/// in first-appearance order.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryEntry> {
    let mut keys: Vec<(String, ModelKind, String, Option<f64>, AttackMethod)> = Vec::new();
    for r in rows {
        let k = (r.dataset.clone(), r.model, r.defense.clone(), r.param, r.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(dataset, model, defense, param, method)| {
            let group: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.dataset == dataset && r.model == model && r.defense == defense && r.param == param && r.method == method)
                .collect();
            let v: Vec<f64> = group.iter().map(|r| r.v_measure).collect();
            let a: Vec<f64> = group.iter().map(|r| r.test_auc).collect();
            let rates: Vec<f64> = group.iter().filter_map(|r| r.comm_rate).collect();
            let (vm, vs) = mean_std(&v);
            SummaryEntry {
                dataset,
                model,
                defense,
                param,
                method,
                runs: group.len(),
                v_measure_mean: vm,
                v_measure_std: vs,
                v_measure: crate::eval::format_mean_std(vm, vs),
                test_auc_mean: mean_std(&a).0,
                comm_rate_mean: (!rates.is_empty()).then(|| mean_std(&rates).0),
            }
        })
        .collect()
}

/// Writes `bytes` to `path` through a temporary file in the same folder, so
/// the file is either complete or absent.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn csv_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv buffer: {e}")))
}

#[derive(Debug, Clone, Serialize)]
struct FlatRow<'a> {
    dataset: &'a str,
    model: ModelKind,
    defense: &'a str,
    param: String,
    seed: u64,
    method: &'static str,
    v_measure: f64,
    test_auc: f64,
    ciphertexts: u64,
    comm_rate: String,
    broadcasts: u64,
    visible_spaces: usize,
    max_visible_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
struct FlatSummary<'a> {
    dataset: &'a str,
    model: ModelKind,
    defense: &'a str,
    param: String,
    method: &'static str,
    runs: usize,
    v_measure: &'a str,
    v_measure_mean: f64,
    v_measure_std: f64,
    test_auc_mean: f64,
    comm_rate_mean: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    /// How multiclass AUC is reduced to one number.
    pub auc_reduction: String,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub dump_transcripts: Option<PathBuf>,
    pub emit_plotdata: bool,
    pub threads: Option<usize>,
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    let flat: Vec<FlatRow<'_>> = report
        .rows
        .iter()
        .map(|r| FlatRow {
            dataset: &r.dataset,
            model: r.model,
            defense: &r.defense,
            param: param_label(r.param),
            seed: r.seed,
            method: r.method.name(),
            v_measure: r.v_measure,
            test_auc: r.test_auc,
            ciphertexts: r.ciphertexts,
            comm_rate: r.comm_rate.map_or_else(String::new, |v| format!("{v}")),
            broadcasts: r.broadcasts,
            visible_spaces: r.visible_spaces,
            max_visible_bound: r.max_visible_bound,
        })
        .collect();
    write_atomic(&dir.join("report.csv"), &csv_bytes(&flat)?)?;
    let summary: Vec<FlatSummary<'_>> = report
        .summary
        .iter()
        .map(|s| FlatSummary {
            dataset: &s.dataset,
            model: s.model,
            defense: &s.defense,
            param: param_label(s.param),
            method: s.method.name(),
            runs: s.runs,
            v_measure: &s.v_measure,
            v_measure_mean: s.v_measure_mean,
            v_measure_std: s.v_measure_std,
            test_auc_mean: s.test_auc_mean,
            comm_rate_mean: s.comm_rate_mean.map_or_else(String::new, |v| format!("{v}")),
        })
        .collect();
    write_atomic(&dir.join("summary.csv"), &csv_bytes(&summary)?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct PlotPoint {
    defense: String,
    param: String,
    series: &'static str,
    x: f64,
    y: f64,
}

fn write_plotdata(dir: &Path, summary: &[SummaryEntry]) -> Result<()> {
    let by_param: Vec<PlotPoint> = summary
        .iter()
        .filter_map(|s| {
            s.param.map(|p| PlotPoint {
                defense: s.defense.clone(),
                param: param_label(s.param),
                series: s.method.name(),
                x: p,
                y: s.v_measure_mean,
            })
        })
        .collect();
    let by_auc: Vec<PlotPoint> = summary
        .iter()
        .map(|s| PlotPoint {
            defense: s.defense.clone(),
            param: param_label(s.param),
            series: s.method.name(),
            x: s.test_auc_mean,
            y: s.v_measure_mean,
        })
        .collect();
    let plot = dir.join("plotdata");
    write_atomic(&plot.join("vmeasure_vs_param.csv"), &csv_bytes(&by_param)?)?;
    write_atomic(&plot.join("vmeasure_vs_auc.csv"), &csv_bytes(&by_auc)?)?;
    Ok(())
}

/// Side file next to dumped transcripts with what `audit` needs: the
/// configured threshold and the label holder's training labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub cell: Cell,
    pub xi: Option<f64>,
    pub class_count: usize,
    pub model_kind: ModelKind,
    pub training_labels: Vec<usize>,
    pub attacker_party: usize,
    pub attacker_features: Vec<usize>,
}

pub fn cell_dir_name(cell: &Cell) -> String {
    format!(
        "cell{:03}_{}_{}_seed{}",
        cell.index,
        cell.defense.name(),
        param_label(cell.defense.parameter()),
        cell.seed
    )
}

fn dump_cell(dir: &Path, cfg: &ExperimentConfig, sd: &SeedData, out: &CellOutput) -> Result<()> {
    let cdir = dir.join(cell_dir_name(&out.cell));
    for t in &out.train.transcripts {
        write_atomic(&cdir.join(format!("party{}.json", t.party_id)), t.to_json()?.as_bytes())?;
    }
    let attacker = attacker_view(&sd.views).ok_or_else(|| Error::InvalidPartition("no passive party".into()))?;
    let local = sd.train.features.select_cols(&attacker.feature_indices);
    let names: Vec<String> = attacker.feature_indices.iter().map(|&f| sd.train.feature_names[f].clone()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&names)?;
    for r in 0..local.rows() {
        w.write_record(local.row(r).iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv buffer: {e}")))?;
    write_atomic(&cdir.join("local_features.csv"), &bytes)?;
    write_atomic(&cdir.join("model.json"), out.train.model.to_json()?.as_bytes())?;
    let manifest = CellManifest {
        cell: out.cell.clone(),
        xi: match out.cell.defense {
            Defense::IdLmid { xi, .. } => Some(xi),
            _ => None,
        },
        class_count: sd.train.class_count,
        model_kind: cfg.model.model_kind,
        training_labels: sd.train.labels.clone(),
        attacker_party: attacker.party_id,
        attacker_features: attacker.feature_indices.clone(),
    };
    write_atomic(&cdir.join("cell.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

/// Runs the grid and writes `report.json`, `report.csv`, `summary.csv` and
/// `timings.json` under `opts.out_dir`, plus optional dumps.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    let outputs = run_grid(cfg, opts.threads)?;
    let rows: Vec<ReportRow> = outputs.iter().flat_map(|o| o.rows.clone()).collect();
    let report = Report {
        name: cfg.name.clone(),
        auc_reduction: "binary: positive-class score; multiclass: unweighted one-vs-rest mean".into(),
        summary: summarize(&rows),
        rows,
    };
    write_report(&opts.out_dir, &report)?;
    let timings: Vec<(usize, u128)> = outputs.iter().map(|o| (o.cell.index, o.runtime_ms)).collect();
    write_atomic(&opts.out_dir.join("timings.json"), serde_json::to_string_pretty(&timings)?.as_bytes())?;
    if opts.emit_plotdata {
        write_plotdata(&opts.out_dir, &report.summary)?;
    }
    if let Some(dump) = &opts.dump_transcripts {
        let dump = if dump.is_relative() { opts.out_dir.join(dump) } else { dump.clone() };
        let full = load_source(&cfg.dataset)?;
        for o in &outputs {
            let sd = prepare_seed(cfg, &full, o.cell.seed)?;
            dump_cell(&dump, cfg, &sd, o)?;
        }
    }
    Ok(report)
}

/// Audit outcome for one party transcript in a dump folder.
#[derive(Debug, Clone, Serialize)]
pub struct CellAudit {
    pub cell: String,
    pub report: AuditReport,
}

/// Audits every `cell*/party*.json` under `dir` against the labels and
/// threshold in the sibling `cell.json`; `xi` overrides the stored one.
pub fn audit_dir(dir: &Path, xi: Option<f64>) -> Result<Vec<CellAudit>> {
    let mut cells: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("cell.json").is_file())
        .collect();
    cells.sort();
    if cells.is_empty() {
        return Err(Error::InvalidParameter(format!("no cell folders with cell.json under {}", dir.display())));
    }
    let mut out = Vec::new();
    for cdir in cells {
        let mpath = cdir.join("cell.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CellManifest = serde_json::from_str(&text)?;
        let mut parties: Vec<PathBuf> = std::fs::read_dir(&cdir)
            .map_err(|e| Error::io(&cdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("party") && n.ends_with(".json"))
            })
            .collect();
        parties.sort();
        for p in parties {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let t = PartyTranscript::from_json(&text)?;
            let report = audit_transcript(&t, &manifest.training_labels, manifest.class_count, xi.or(manifest.xi))?;
            out.push(CellAudit {
                cell: cdir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                report,
            });
        }
    }
    Ok(out)
}

/// Merges the `report.json` files of several run folders.
pub fn merge_reports(dirs: &[PathBuf]) -> Result<Report> {
    let mut rows = Vec::new();
    let mut names = Vec::new();
    for d in dirs {
        let p = d.join("report.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r: Report = serde_json::from_str(&text)?;
        names.push(r.name);
        rows.extend(r.rows);
    }
    Ok(Report {
        name: names.join("+"),
        auc_reduction: "binary: positive-class score; multiclass: unweighted one-vs-rest mean".into(),
        summary: summarize(&rows),
        rows,
    })
}
