//! Experiment runner: train, classify, fabricate, score membership
//! inference, simulate federated aggregation, and benchmark fitting.
//!
//! Every run takes one master seed; stage seeds are derived by stable
//! hashing, so reruns with the same flags are bit-identical in serialized
//! models and metrics. Timing appears only in `bench` output.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kahm::{
    fabricate_big_with_report, fit_classifier, fit_dp_classifier, fit_kahm, load_classifier,
    load_csv, membership_inference_score, save_classifier, simulate_scenario_with_global, synth,
    write_distance_table, ClassifierModel, DpMode, LabelColumn, LabeledDataset, PrivacySpec,
    Provenance, Scenario,
};

#[derive(Parser)]
#[command(name = "kahm", version, about = "Kernel affine hull machine toolkit")]
struct Cli {
    /// Worker threads (default: all cores; env fallback KAHM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and serialize it.
    Train(TrainArgs),
    /// Evaluate a serialized classifier on a dataset.
    Classify(ClassifyArgs),
    /// Produce a differentially private fabricated copy of a dataset.
    Fabricate(FabricateArgs),
    /// Membership-inference score of a classifier on a train/test split.
    Mis(MisArgs),
    /// Federated-learning simulation with distance-only aggregation.
    Fedsim(FedsimArgs),
    /// Wall-time of single-machine fits over a size grid.
    Bench(BenchArgs),
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Label column: an index or a header name (default: last column).
    #[arg(long)]
    label_col: Option<String>,
    /// Subspace dimension.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    layers: usize,
    /// Branch override; default is one branch per 1000 class samples.
    #[arg(long)]
    branches: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// none | noisy | fabricated
    #[arg(long, default_value = "none")]
    privacy: String,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 2.0)]
    d: f64,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the confusion matrix as CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FabricateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 2.0)]
    d: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MisArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FedsimArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out data; when absent, --data is split in half by the seed.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    scenario: usize,
    #[arg(long)]
    parties: usize,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 2.0)]
    d: f64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Also dump the global distance table over the test rows.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// Sample counts: "500", "100,200,400", or "100..1000:100".
    #[arg(long = "N")]
    n_samples: String,
    /// Ambient dimensions, same grammar.
    #[arg(long)]
    p: String,
    /// Subspace dimensions, same grammar.
    #[arg(long)]
    n: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Metrics<C: Serialize, R: Serialize> {
    command: &'static str,
    config: C,
    results: R,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("KAHM_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("initializing worker pool")?;
    }
    match cli.command {
        Command::Train(args) => run_train(args),
        Command::Classify(args) => run_classify(args),
        Command::Fabricate(args) => run_fabricate(args),
        Command::Mis(args) => run_mis(args),
        Command::Fedsim(args) => run_fedsim(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn parse_label_col(arg: &Option<String>) -> Option<LabelColumn> {
    arg.as_ref().map(|s| match s.parse::<usize>() {
        Ok(idx) => LabelColumn::Index(idx),
        Err(_) => LabelColumn::Name(s.clone()),
    })
}

/// Load a labeled CSV; the label column defaults to the last one.
fn load_labeled(path: &Path, label_col: &Option<String>) -> Result<LabeledDataset> {
    let selector = match parse_label_col(label_col) {
        Some(s) => s,
        None => LabelColumn::Index(last_column_index(path)?),
    };
    load_csv(path, Some(selector)).with_context(|| format!("loading {}", path.display()))
}

fn last_column_index(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path)?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .context("empty file")?;
    Ok(first.split(',').count() - 1)
}

/// Remap a dataset's labels onto a model's class indices by name.
fn align_labels(ds: &LabeledDataset, class_names: &[String]) -> Result<LabeledDataset> {
    let lookup: std::collections::BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i + 1))
        .collect();
    let labels: Vec<usize> = ds
        .labels
        .iter()
        .map(|&l| {
            let name = &ds.class_names[l - 1];
            lookup
                .get(name.as_str())
                .copied()
                .with_context(|| format!("label {name:?} unknown to the model"))
        })
        .collect::<Result<_>>()?;
    Ok(LabeledDataset::new(ds.data.clone(), labels, class_names.to_vec())?)
}

fn emit_metrics<C: Serialize, R: Serialize>(
    path: &Option<PathBuf>,
    metrics: &Metrics<C, R>,
) -> Result<()> {
    let json = serde_json::to_string_pretty(metrics)?;
    match path {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn provenance_label(p: &Provenance) -> String {
    match p {
        Provenance::Plain => "plain".into(),
        Provenance::DpNoisy(s) => format!("dp_noisy(epsilon={}, delta={}, d={})", s.epsilon, s.delta, s.d),
        Provenance::DpFabricated(s) => {
            format!("dp_fabricated(epsilon={}, delta={}, d={})", s.epsilon, s.delta, s.d)
        }
    }
}

#[derive(Serialize)]
struct TrainResults {
    rows: usize,
    dimensions: usize,
    classes: usize,
    class_names: Vec<String>,
    branch_counts: Vec<usize>,
    provenance: String,
    model_path: String,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let data = load_labeled(&args.data, &args.label_col)?;
    let model = match args.privacy.as_str() {
        "none" => fit_classifier(&data, args.n, args.layers, args.branches, args.seed)?,
        mode @ ("noisy" | "fabricated") => {
            let spec = PrivacySpec::new(args.epsilon, args.delta, args.d, args.seed)?;
            let dp_mode = if mode == "noisy" { DpMode::Noisy } else { DpMode::Fabricated };
            fit_dp_classifier(&data, &spec, args.n, args.layers, dp_mode, args.seed)?
        }
        other => bail!("unknown privacy mode {other:?}; expected none|noisy|fabricated"),
    };
    save_classifier(&model, &args.out)?;
    let results = TrainResults {
        rows: data.data.n_rows(),
        dimensions: data.data.n_cols(),
        classes: model.class_count(),
        class_names: model.class_names.clone(),
        branch_counts: model.branch_counts.clone(),
        provenance: provenance_label(&model.provenance),
        model_path: args.out.display().to_string(),
    };
    let metrics_path = args.metrics.clone();
    emit_metrics(&metrics_path, &Metrics { command: "train", config: args, results })
}

#[derive(Serialize)]
struct ClassifyResults {
    rows: usize,
    accuracy: f64,
    per_class_accuracy: Vec<f64>,
    provenance: String,
}

fn run_classify(args: ClassifyArgs) -> Result<()> {
    let model = load_classifier(&args.model)?;
    let raw = load_labeled(&args.data, &args.label_col)?;
    let data = align_labels(&raw, &model.class_names)?;
    let accuracy = model.accuracy(&data)?;
    let per_class = model.per_class_accuracy(&data)?;
    if let Some(path) = &args.confusion {
        write_confusion(&model, &data, path)?;
    }
    let results = ClassifyResults {
        rows: data.data.n_rows(),
        accuracy,
        per_class_accuracy: per_class,
        provenance: provenance_label(&model.provenance),
    };
    let metrics_path = args.metrics.clone();
    emit_metrics(&metrics_path, &Metrics { command: "classify", config: args, results })
}

fn write_confusion(model: &ClassifierModel, data: &LabeledDataset, path: &Path) -> Result<()> {
    let counts = model.confusion(data)?;
    let mut out = String::new();
    out.push_str("true_class");
    for name in &model.class_names {
        out.push_str(&format!(",pred_{name}"));
    }
    out.push('\n');
    for (i, row) in counts.iter().enumerate() {
        out.push_str(&model.class_names[i]);
        for &v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct FabricateSubset {
    class: String,
    subset: usize,
    rows: usize,
    budget: f64,
    achieved_error: f64,
    smoothing_steps: usize,
}

#[derive(Serialize)]
struct FabricateResults {
    rows: usize,
    dimensions: usize,
    classes: usize,
    subsets: Vec<FabricateSubset>,
    output_path: String,
}

fn run_fabricate(args: FabricateArgs) -> Result<()> {
    let has_labels = args.label_col.is_some();
    let layout = CsvLayout::inspect(&args.data, &parse_label_col(&args.label_col))?;
    let data = if has_labels {
        load_labeled(&args.data, &args.label_col)?
    } else {
        let ds = load_csv(&args.data, None)?;
        LabeledDataset::unlabeled(ds.data)
    };
    let spec = PrivacySpec::new(args.epsilon, args.delta, args.d, args.seed)?;

    // Fabricate per class so the pipeline matches classifier training.
    let mut fabricated_rows = vec![Vec::new(); data.data.n_rows()];
    let mut subsets = Vec::new();
    for c in 1..=data.class_count() {
        let rows = data.class_rows(c);
        let matrix = data.class_matrix(c)?;
        let class_spec = spec.with_seed(kahm::seed::derive_seed(spec.seed, "class-dp", c as u64));
        let (fab, reports) = fabricate_big_with_report(&matrix, args.n, &class_spec)?;
        for (local, &orig) in rows.iter().enumerate() {
            fabricated_rows[orig] = fab.row(local).iter().cloned().collect();
        }
        for rep in reports {
            subsets.push(FabricateSubset {
                class: data.class_names[c - 1].clone(),
                subset: rep.subset,
                rows: rep.rows,
                budget: rep.budget,
                achieved_error: rep.achieved_error,
                smoothing_steps: rep.m_tilde,
            });
        }
    }

    layout.write_csv(&args.out, &fabricated_rows, &data)?;
    let results = FabricateResults {
        rows: data.data.n_rows(),
        dimensions: data.data.n_cols(),
        classes: data.class_count(),
        subsets,
        output_path: args.out.display().to_string(),
    };
    let metrics_path = args.metrics.clone();
    emit_metrics(&metrics_path, &Metrics { command: "fabricate", config: args, results })
}

/// Mirror of the input CSV: header line (if any) and label column position.
struct CsvLayout {
    header: Option<String>,
    label_index: Option<usize>,
}

impl CsvLayout {
    fn inspect(path: &Path, selector: &Option<LabelColumn>) -> Result<CsvLayout> {
        let text = std::fs::read_to_string(path)?;
        let first = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .context("empty file")?;
        let cells: Vec<&str> = first.split(',').map(str::trim).collect();
        let label_index = match selector {
            Some(LabelColumn::Index(i)) => Some(*i),
            Some(LabelColumn::Name(name)) => {
                Some(cells.iter().position(|c| c == name).with_context(|| {
                    format!("no column named {name:?} in header")
                })?)
            }
            None => None,
        };
        let has_header = cells
            .iter()
            .enumerate()
            .any(|(j, c)| Some(j) != label_index && c.parse::<f64>().is_err());
        Ok(CsvLayout {
            header: has_header.then(|| first.to_string()),
            label_index,
        })
    }

    fn write_csv(&self, path: &Path, rows: &[Vec<f64>], data: &LabeledDataset) -> Result<()> {
        let mut out = String::new();
        if let Some(h) = &self.header {
            out.push_str(h);
            out.push('\n');
        }
        for (i, row) in rows.iter().enumerate() {
            let label = &data.class_names[data.labels[i] - 1];
            let mut cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            if let Some(k) = self.label_index {
                cells.insert(k.min(cells.len()), label.clone());
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct MisResults {
    mis: f64,
    train_rows: usize,
    test_rows: usize,
    basis_sigma: f64,
    basis_ridge: f64,
    basis_centers: usize,
    provenance: String,
}

fn run_mis(args: MisArgs) -> Result<()> {
    let model = load_classifier(&args.model)?;
    let train = align_labels(&load_labeled(&args.train, &args.label_col)?, &model.class_names)?;
    let test = align_labels(&load_labeled(&args.test, &args.label_col)?, &model.class_names)?;
    let report = membership_inference_score(&model, &train, &test, args.seed)?;
    let results = MisResults {
        mis: report.mis,
        train_rows: train.data.n_rows(),
        test_rows: test.data.n_rows(),
        basis_sigma: report.estimator_config.sigma,
        basis_ridge: report.estimator_config.ridge,
        basis_centers: report.estimator_config.centers,
        provenance: provenance_label(&model.provenance),
    };
    let metrics_path = args.metrics.clone();
    emit_metrics(&metrics_path, &Metrics { command: "mis", config: args, results })
}

#[derive(Serialize)]
struct FedsimResults {
    scenario: usize,
    parties: usize,
    per_scenario_accuracy: f64,
    centralized_accuracy: f64,
    delta: f64,
    omitted_models: Vec<(usize, usize)>,
    train_rows: usize,
    test_rows: usize,
}

fn run_fedsim(args: FedsimArgs) -> Result<()> {
    let train_full = load_labeled(&args.data, &args.label_col)?;
    let (train, test) = match &args.test {
        Some(path) => {
            let test = align_labels(
                &load_labeled(path, &args.label_col)?,
                &train_full.class_names,
            )?;
            (train_full, test)
        }
        None => half_split(&train_full, args.seed)?,
    };
    let scenario = Scenario::from_number(args.scenario)?;
    let spec = PrivacySpec::new(args.epsilon, args.delta, args.d, args.seed)?;
    let (metrics, global) = simulate_scenario_with_global(
        &train,
        &test,
        scenario,
        args.parties,
        &spec,
        args.n,
        args.layers,
        args.seed,
    )?;

    if let Some(table_path) = &args.table {
        let mut records = Vec::new();
        for i in 0..test.data.n_rows() {
            records.extend(global.distance_table(&test.data.row(i), i as u64));
        }
        let mut file = std::fs::File::create(table_path)?;
        write_distance_table(&records, &mut file)?;
        file.flush()?;
    }

    let results = FedsimResults {
        scenario: args.scenario,
        parties: args.parties,
        per_scenario_accuracy: metrics.global_accuracy,
        centralized_accuracy: metrics.centralized_accuracy,
        delta: metrics.accuracy_delta,
        omitted_models: metrics.omitted_models.clone(),
        train_rows: train.data.n_rows(),
        test_rows: test.data.n_rows(),
    };
    let metrics_path = args.metrics.clone();
    emit_metrics(&metrics_path, &Metrics { command: "fedsim", config: args, results })
}

fn half_split(ds: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..ds.data.n_rows()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(kahm::seed::derive_seed(
        seed,
        "train-test-split",
        0,
    ));
    idx.shuffle(&mut rng);
    let (a, b) = idx.split_at(ds.data.n_rows() / 2);
    Ok((ds.select(a)?, ds.select(b)?))
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let n_grid = parse_grid(&args.n_samples).context("--N grid")?;
    let p_grid = parse_grid(&args.p).context("--p grid")?;
    let sub_grid = parse_grid(&args.n).context("--n grid")?;
    let mut out = String::from("n_samples,p,n,fit_seconds\n");
    for &p in &p_grid {
        for &n_samples in &n_grid {
            for &sub in &sub_grid {
                if sub > p || n_samples < 2 {
                    continue;
                }
                let data = synth::standard_normal_matrix(n_samples, p, args.seed);
                // Median of three runs tames scheduler noise.
                let mut times = Vec::with_capacity(3);
                for _ in 0..3 {
                    let t0 = std::time::Instant::now();
                    let model = fit_kahm(&data, sub)?;
                    times.push(t0.elapsed().as_secs_f64());
                    drop(model);
                }
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.push_str(&format!("{n_samples},{p},{sub},{:.6}\n", times[1]));
            }
        }
    }
    match &args.out {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

/// "500", "100,200,400", or "start..end:step".
fn parse_grid(spec: &str) -> Result<Vec<usize>> {
    let spec = spec.trim();
    if let Some((range, step)) = spec.split_once(':') {
        let (start, end) = range
            .split_once("..")
            .context("range grid must look like start..end:step")?;
        let (start, end, step): (usize, usize, usize) =
            (start.trim().parse()?, end.trim().parse()?, step.trim().parse()?);
        if step == 0 || end < start {
            bail!("bad range {spec:?}");
        }
        return Ok((start..=end).step_by(step).collect());
    }
    if spec.contains("..") {
        bail!("range grid needs an explicit step: start..end:step");
    }
    spec.split(',')
        .map(|tok| tok.trim().parse::<usize>().map_err(Into::into))
        .collect()
}
