use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use drivprof::domain::{resample, CarFollowingSequence, ResampleConfig, Split};
use drivprof::eval::{multi_sequence_curve, sweep as run_sweep, ScoredWindows, SweepGrid, SweepResult};
use drivprof::features::{FEATURE_NAMES, N_FEATURES};
use drivprof::io::{features_to_csv, model_to_json, read_dataset, read_driver_dir, read_model, read_sequence, write_dataset};
use drivprof::model::{infer_multi, register_sequences, GenerativeModel, ProfileFitConfig};
use drivprof::pipeline::{fit, FeatureTable, PipelineConfig};
use drivprof::report::{contributions_csv, contributions_svg, heatmap, line_chart, Series};
use drivprof::synthdata::{generate_corpus, split_dataset, CorpusSpec};
use drivprof::Error;

use crate::run::{create_run_dir, load_config, to_json, write_atomic, write_dir_atomic, config_record};
use crate::Common;

fn required<T: Clone>(v: &Option<T>, what: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::Invalid(format!("missing {what} (flag or config key)")).into())
}

fn runs_root(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

// generate

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Built-in corpus preset: easy4 or hard8.
    #[arg(long)]
    preset: Option<String>,
    /// Corpus spec JSON file (overrides the preset).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Fraction of each driver's sequences placed in train/.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    sequences_per_driver: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub preset: String,
    pub spec: Option<PathBuf>,
    /// Overrides the scenario seed of the spec; also seeds the split.
    pub seed: Option<u64>,
    pub train_fraction: f64,
    pub sequences_per_driver: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            preset: "easy4".into(),
            spec: None,
            seed: None,
            train_fraction: 0.8,
            sequences_per_driver: None,
        }
    }
}

pub fn generate(args: GenerateArgs, common: &Common) -> Result<()> {
    let mut cfg: GenerateConfig = load_config(common.config.as_deref())?;
    if let Some(p) = args.preset {
        cfg.preset = p;
    }
    cfg.spec = args.spec.or(cfg.spec);
    cfg.seed = common.seed.or(cfg.seed);
    cfg.train_fraction = args.train_fraction.unwrap_or(cfg.train_fraction);
    cfg.sequences_per_driver = args.sequences_per_driver.or(cfg.sequences_per_driver);
    let out = required(&common.out, "--out")?;

    let mut spec = match &cfg.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str::<CorpusSpec>(&text).map_err(Error::from)?
        }
        None => CorpusSpec::preset(&cfg.preset, cfg.seed.unwrap_or(0))
            .ok_or_else(|| Error::Invalid(format!("unknown preset `{}` (expected easy4 or hard8)", cfg.preset)))?,
    };
    if let Some(s) = cfg.seed {
        spec.scenario.seed = s;
    }
    if let Some(n) = cfg.sequences_per_driver {
        spec.sequences_per_driver = n;
    }
    let corpus = generate_corpus(&spec)?;
    let (train, test) = split_dataset(&corpus, cfg.train_fraction, spec.scenario.seed)?;
    write_dir_atomic(&out, |dir| {
        write_dataset(&dir.join("train"), &train)?;
        fs::create_dir_all(dir.join("test"))?;
        write_dataset(&dir.join("test"), &test)?;
        fs::write(dir.join("corpus_spec.json"), to_json(&spec)?)?;
        fs::write(dir.join("config.json"), config_record("generate", &cfg)?)?;
        Ok(())
    })?;
    eprintln!(
        "generated {} sequences ({} train, {} test) for {} drivers",
        corpus.len(),
        train.len(),
        test.len(),
        spec.drivers.len()
    );
    println!("{}", out.display());
    Ok(())
}

// train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training data directory: <data>/<driver_id>/<seq>.csv
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    /// Window duration T in seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Training overlap ratio r in [0, 1).
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    n_outer: Option<usize>,
    #[arg(long)]
    n_inner: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_final_em: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

pub fn train(args: TrainArgs, common: &Common) -> Result<()> {
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    cfg.data = args.data.or(cfg.data);
    let p = &mut cfg.pipeline;
    let t = &mut p.training;
    t.m = args.m.unwrap_or(t.m);
    t.q = args.q.unwrap_or(t.q);
    t.n_outer = args.n_outer.unwrap_or(t.n_outer);
    t.n_inner = args.n_inner.unwrap_or(t.n_inner);
    t.lr = args.lr.unwrap_or(t.lr);
    t.n_final_em = args.n_final_em.unwrap_or(t.n_final_em);
    t.seed = common.seed.unwrap_or(t.seed);
    p.window = args.window.unwrap_or(p.window);
    p.overlap = args.overlap.unwrap_or(p.overlap);
    let data = required(&cfg.data, "--data")?;

    let ds = read_dataset(&data, Split::Train)?;
    let fitted = fit(&ds, &cfg.pipeline)?;
    let model = fitted.model();
    let dir = create_run_dir(&runs_root(common), "train", &cfg)?;
    write_atomic(&dir.join("model.json"), model_to_json(model)?.as_bytes())?;
    let trace = &fitted.output.trace;
    write_atomic(&dir.join("trace.csv"), trace.to_csv().as_bytes())?;
    let loss = Series {
        name: "loss",
        points: trace.rows.iter().map(|r| (r.iter as f64, r.loss)).collect(),
    };
    let best = Series {
        name: "best",
        points: trace.rows.iter().map(|r| (r.iter as f64, r.best_loss)).collect(),
    };
    write_atomic(
        &dir.join("trace.svg"),
        line_chart("Training loss", "outer iteration", "loss", &[loss, best]).as_bytes(),
    )?;
    write_atomic(&dir.join("contributions.csv"), contributions_csv(model).as_bytes())?;
    write_atomic(&dir.join("contributions.svg"), contributions_svg(model).as_bytes())?;
    let table = FeatureTable::build(&ds, &cfg.pipeline.train_resample()?, &cfg.pipeline.reaction_time)?;
    write_atomic(&dir.join("features.csv"), features_to_csv(&table.windows, &table.raw).as_bytes())?;

    let last = trace.rows.last().expect("trace has an initial row");
    eprintln!(
        "trained on {} windows from {} drivers: best loss {:.4}, final train accuracy {:.4}",
        fitted.n_train_windows,
        model.n_drivers(),
        last.best_loss,
        last.train_acc
    );
    println!("{}", dir.display());
    Ok(())
}

// evaluate

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Labeled test data directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Windows per trial, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub n_sequences: Vec<usize>,
    pub seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            model: None,
            data: None,
            n_sequences: vec![1, 3, 5, 10],
            seed: 0,
        }
    }
}

pub fn evaluate(args: EvaluateArgs, common: &Common) -> Result<()> {
    let mut cfg: EvaluateConfig = load_config(common.config.as_deref())?;
    cfg.model = args.model.or(cfg.model);
    cfg.data = args.data.or(cfg.data);
    cfg.n_sequences = args.n.unwrap_or(cfg.n_sequences);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    if cfg.n_sequences.is_empty() {
        bail!(Error::Invalid("no trial sizes given".into()));
    }
    let model = read_model(&required(&cfg.model, "--model")?)?;
    let ds = read_dataset(&required(&cfg.data, "--data")?, Split::Test)?;
    let windows = ds.resample(&test_resample(&model)?).sequences;
    if windows.is_empty() {
        bail!(Error::Invalid(format!("no test sequence is at least {} s long", model.hyper().window)));
    }
    let scored = ScoredWindows::score(&model, &windows)?;
    let reports = multi_sequence_curve(&scored, &cfg.n_sequences, cfg.seed)?;

    let dir = create_run_dir(&runs_root(common), "evaluate", &cfg)?;
    write_atomic(&dir.join("report.json"), to_json(&reports)?.as_bytes())?;
    let mut csv = String::from("n_sequences,accuracy,trials,skipped\n");
    for r in &reports {
        let _ = writeln!(csv, "{},{},{},{}", r.n_sequences, r.accuracy, r.n_trials, r.skipped.len());
        write_atomic(
            &dir.join(format!("confusion_n{}.csv", r.n_sequences)),
            r.confusion.to_csv().as_bytes(),
        )?;
        eprintln!("n={:<3} accuracy {:.4} over {} trials", r.n_sequences, r.accuracy, r.n_trials);
    }
    write_atomic(&dir.join("accuracy.csv"), csv.as_bytes())?;
    let curve = Series {
        name: "test",
        points: reports.iter().map(|r| (r.n_sequences as f64, r.accuracy)).collect(),
    };
    write_atomic(
        &dir.join("accuracy.svg"),
        line_chart("Accuracy vs. sequences per trial", "sequences per trial", "accuracy", &[curve]).as_bytes(),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn test_resample(model: &GenerativeModel) -> drivprof::Result<ResampleConfig> {
    ResampleConfig::new(model.hyper().window, 0.0)
}

// sweep

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    q: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    window: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    overlap: Option<Vec<f64>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    n_outer: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub base: PipelineConfig,
    pub grid: SweepGrid,
}

pub fn sweep(args: SweepArgs, common: &Common) -> Result<()> {
    let mut cfg: SweepConfig = load_config(common.config.as_deref())?;
    cfg.train = args.train.or(cfg.train);
    cfg.test = args.test.or(cfg.test);
    let g = &mut cfg.grid;
    g.q = args.q.unwrap_or(std::mem::take(&mut g.q));
    g.m = args.m.unwrap_or(std::mem::take(&mut g.m));
    g.window = args.window.unwrap_or(std::mem::take(&mut g.window));
    g.overlap = args.overlap.unwrap_or(std::mem::take(&mut g.overlap));
    g.repetitions = args.repetitions.unwrap_or(g.repetitions).max(1);
    g.base_seed = common.seed.unwrap_or(g.base_seed);
    cfg.base.training.n_outer = args.n_outer.unwrap_or(cfg.base.training.n_outer);

    let train = read_dataset(&required(&cfg.train, "--train")?, Split::Train)?;
    let test = read_dataset(&required(&cfg.test, "--test")?, Split::Test)?;
    let res = run_sweep(&cfg.grid, &train, &test, &cfg.base)?;

    let dir = create_run_dir(&runs_root(common), "sweep", &cfg)?;
    write_atomic(&dir.join("sweep.json"), to_json(&res)?.as_bytes())?;
    write_atomic(&dir.join("sweep.csv"), res.to_csv().as_bytes())?;
    for (test_split, name) in [(true, "test"), (false, "train")] {
        if let Some(csv) = res.qm_heatmap_csv(test_split) {
            write_atomic(&dir.join(format!("heatmap_{name}.csv")), csv.as_bytes())?;
        }
        if let Some(svg) = qm_heatmap_svg(&res, test_split) {
            write_atomic(&dir.join(format!("heatmap_{name}.svg")), svg.as_bytes())?;
        }
    }
    let failures: usize = res.cells.iter().map(|c| c.failures.len()).sum();
    eprintln!("{} cells x {} repetitions, {failures} failed runs", res.cells.len(), res.repetitions);
    println!("{}", dir.display());
    Ok(())
}

fn qm_heatmap_svg(res: &SweepResult, test: bool) -> Option<String> {
    let (qs, ms, vals) = res.qm_heatmap(test)?;
    let rows: Vec<String> = qs.iter().map(|q| q.to_string()).collect();
    let cols: Vec<String> = ms.iter().map(|m| m.to_string()).collect();
    let title = if test { "Mean test accuracy" } else { "Mean training accuracy" };
    Some(heatmap(title, "Q", "M", &rows, &cols, &vals))
}

// identify

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Sequence CSV files, or directories of them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Identification {
    predicted: String,
    scores: BTreeMap<String, f64>,
    n_sequences: usize,
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut in_dir: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            in_dir.retain(|f| f.extension().is_some_and(|e| e == "csv"));
            in_dir.sort();
            files.extend(in_dir);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

pub fn identify(args: IdentifyArgs, _common: &Common) -> Result<()> {
    let model = read_model(&args.model)?;
    let rs = test_resample(&model)?;
    let mut windows: Vec<CarFollowingSequence> = Vec::new();
    for f in expand_inputs(&args.inputs)? {
        windows.extend(resample(&read_sequence(&f, None)?, &rs));
    }
    if windows.is_empty() {
        bail!(Error::Invalid(format!(
            "no input sequence is at least {} s long",
            model.hyper().window
        )));
    }
    let inf = infer_multi(&windows, &model)?;
    let out = Identification {
        predicted: inf.driver_id,
        scores: model.driver_ids().iter().cloned().zip(inf.log_scores).collect(),
        n_sequences: inf.n_sequences,
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

// register

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory with the new driver's sequence CSV files.
    #[arg(long)]
    data: PathBuf,
    /// Id of the new driver.
    #[arg(long)]
    id: String,
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn register(args: RegisterArgs, common: &Common) -> Result<()> {
    let out = required(&common.out, "--out (path of the new model file)")?;
    if same_file(&args.model, &out) {
        bail!(Error::Invalid("--out must differ from the input model".into()));
    }
    let model = read_model(&args.model)?;
    let seqs = read_driver_dir(&args.data, &args.id)?;
    let h = model.hyper();
    let rs = ResampleConfig::new(h.window, h.overlap)?;
    let windows: Vec<CarFollowingSequence> = seqs.iter().flat_map(|s| resample(s, &rs)).collect();
    if windows.is_empty() {
        bail!(Error::Invalid(format!(
            "no sequence in {} is at least {} s long",
            args.data.display(),
            h.window
        )));
    }
    let updated = register_sequences(&model, &args.id, &windows, ProfileFitConfig::default())?;
    write_atomic(&out, model_to_json(&updated)?.as_bytes())?;
    eprintln!("registered `{}` from {} windows", args.id, windows.len());
    println!("{}", out.display());
    Ok(())
}

// inspect

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Print JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct StateSummary {
    mu: Vec<f64>,
    /// Square roots of the covariance diagonal.
    sd: Vec<f64>,
    log_det: f64,
}

#[derive(Serialize)]
struct Inspection<'a> {
    hyper: &'a drivprof::model::ModelHyper,
    contributions: BTreeMap<String, f64>,
    profiles: BTreeMap<String, Vec<f64>>,
    states: Vec<StateSummary>,
}

pub fn inspect(args: InspectArgs, _common: &Common) -> Result<()> {
    let model = read_model(&args.model)?;
    let contrib = model.projection().feature_contributions();
    let states: Vec<StateSummary> = model
        .states()
        .iter()
        .map(|s| StateSummary {
            mu: s.mu.iter().copied().collect(),
            sd: s.sigma.diagonal().iter().map(|v| v.sqrt()).collect(),
            log_det: s.sigma.determinant().ln(),
        })
        .collect();
    if args.json {
        let doc = Inspection {
            hyper: model.hyper(),
            contributions: (0..N_FEATURES).map(|j| (format!("f{}", j + 1), contrib[j])).collect(),
            profiles: model
                .driver_ids()
                .iter()
                .cloned()
                .zip(model.profiles().iter().map(|p| p.weights().to_vec()))
                .collect(),
            states,
        };
        print!("{}", to_json(&doc)?);
        return Ok(());
    }

    let h = model.hyper();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "model: M={} Q={} T={} s overlap={} drivers={}",
        h.m,
        h.q,
        h.window,
        h.overlap,
        model.n_drivers()
    );
    let _ = writeln!(s, "\nfeature contributions:");
    for j in 0..N_FEATURES {
        let _ = writeln!(s, "  f{}  {:<20} {:.4}", j + 1, FEATURE_NAMES[j], contrib[j]);
    }
    let _ = writeln!(s, "\ndriver profiles:");
    let _ = write!(s, "  {:<12}", "driver");
    for q in 0..h.q {
        let _ = write!(s, " {:>6}", format!("s{}", q + 1));
    }
    s.push('\n');
    for (id, p) in model.driver_ids().iter().zip(model.profiles()) {
        let _ = write!(s, "  {id:<12}");
        for w in p.weights() {
            let _ = write!(s, " {w:>6.3}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\nstates (mean; per-axis std):");
    for (q, st) in states.iter().enumerate() {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "  s{:<3} mu [{}]  sd [{}]", q + 1, fmt(&st.mu), fmt(&st.sd));
    }
    print!("{s}");
    Ok(())
}
