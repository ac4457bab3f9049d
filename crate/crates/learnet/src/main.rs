//! Command-line interface: dataset generation, training, one-shot
//! evaluation, tracking, and predicted-filter inspection.
//!
//! Exit codes: 0 success, 2 config/usage error, 3 I/O or data error,
//! 4 training divergence, 5 incompatible model/data, 6 operation
//! unsupported by the model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use learnet::config::{Config, DataConfig, Precision};
use learnet::data::{
    self, export_dataset, export_sequence, gen_glyph_dataset, gen_tracking_sequence,
    load_pgm_dataset, load_sequence, read_pgm, resize, CharacterDataset, Split, SyntheticSequence,
};
use learnet::evaluation::{
    self, displacement_error, error_rate, filter_images, track_with_maps, TrackConfig,
};
use learnet::model_io::{check_params_cover, load_model, save, LoadedModel};
use learnet::networks::{bind_exemplar, Arch, ComparisonKind, NetworkSpec, ParamSet};
use learnet::scalar::Scalar;
use learnet::train::{train, TaskData};
use learnet::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "learnet", version, about = "Feed-forward one-shot learners")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Background,
    Evaluation,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (glyph alphabets or tracking sequences)
    /// as a PGM tree.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config and write the model file plus a loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the data source with an on-disk dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        /// Defaults to the model path with a `.csv` extension.
        #[arg(long)]
        out_history: Option<PathBuf>,
    },
    /// Evaluate one-shot recognition error on a dataset split.
    Eval {
        /// Model file to evaluate (or use --table to scan a directory).
        #[arg(long, conflicts_with = "table")]
        model: Option<PathBuf>,
        /// Evaluate every .lrnt model in this directory and print a
        /// comparative architecture x comparison table.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Dataset root on disk; otherwise --config must supply a synthetic
        /// data section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "evaluation")]
        split: SplitArg,
        /// Write metrics as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        n_problems: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the sequential tracker over a sequence.
    Track {
        #[arg(long)]
        model: PathBuf,
        /// Directory with frame_%04d.pgm files and boxes.csv.
        #[arg(long, conflicts_with = "synthetic")]
        seq: Option<PathBuf>,
        /// Generate a synthetic sequence from the config instead.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write one score-map PGM per tracked frame.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Write the filters a meta-network predicts for an exemplar as PGMs.
    DumpFilters {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        exemplar: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Data(_) => 3,
        Error::Diverged(_) => 4,
        Error::Shape(_) | Error::Format(_) => 5,
        Error::Unsupported(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => cmd_gen_data(&config, &out),
        Cmd::Train { config, data, out_model, out_history } => {
            cmd_train(&config, data.as_deref(), &out_model, out_history.as_deref())
        }
        Cmd::Eval { model, table, data, config, split, out, threads, n_problems, seed } => {
            let split = match split {
                SplitArg::Background => Split::Background,
                SplitArg::Evaluation => Split::Evaluation,
            };
            match (model, table) {
                (Some(m), None) => cmd_eval(
                    &m,
                    data.as_deref(),
                    config.as_deref(),
                    split,
                    out.as_deref(),
                    threads,
                    n_problems,
                    seed,
                ),
                (None, Some(dir)) => cmd_eval_table(
                    &dir,
                    data.as_deref(),
                    config.as_deref(),
                    split,
                    out.as_deref(),
                    threads,
                    n_problems,
                    seed,
                ),
                _ => Err(Error::Config("pass exactly one of --model or --table".into())),
            }
        }
        Cmd::Track { model, seq, synthetic, config, out, dump_maps } => {
            cmd_track(&model, seq.as_deref(), synthetic, config.as_deref(), &out, dump_maps)
        }
        Cmd::DumpFilters { model, exemplar, out } => cmd_dump_filters(&model, &exemplar, &out),
    }
}

/// `LEARNET_SEED` overrides the training seed for sweep scripting.
fn load_config(path: &Path) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Ok(s) = std::env::var("LEARNET_SEED") {
        cfg.train.seed = s
            .parse()
            .map_err(|_| Error::Config(format!("LEARNET_SEED must be an integer, got {s:?}")))?;
    }
    Ok(cfg)
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    match &cfg.data {
        DataConfig::Synthetic(g) => {
            let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
            let ds: CharacterDataset<f32> = gen_glyph_dataset(
                &mut rng,
                g.n_background,
                g.n_eval,
                g.chars_per_alphabet,
                g.instances_per_char,
            );
            export_dataset(&ds, out)?;
            println!(
                "wrote {} alphabets ({} background / {} evaluation), {} characters each, {} instances each, under {}",
                g.n_background + g.n_eval,
                g.n_background,
                g.n_eval,
                g.chars_per_alphabet,
                g.instances_per_char,
                out.display()
            );
        }
        DataConfig::SyntheticTracking(t) => {
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            for i in 0..t.n_sequences {
                let seq: SyntheticSequence<f32> =
                    gen_tracking_sequence(&mut rng, t.length, t.frame_size, t.object_size);
                export_sequence(&seq, &out.join(format!("seq_{i:03}")))?;
            }
            println!(
                "wrote {} sequences of {} frames ({}x{} px, object {} px) under {}",
                t.n_sequences,
                t.length,
                t.frame_size,
                t.frame_size,
                t.object_size,
                out.display()
            );
        }
        DataConfig::Path(_) => {
            return Err(Error::Config(
                "gen-data needs a synthetic data section, not a path".into(),
            ));
        }
    }
    Ok(())
}

fn load_char_data<F: Scalar>(cfg: &Config, data_override: Option<&Path>) -> Result<CharacterDataset<F>> {
    if let Some(root) = data_override {
        return load_pgm_dataset(root);
    }
    match &cfg.data {
        DataConfig::Path(root) => load_pgm_dataset(root),
        DataConfig::Synthetic(g) => {
            let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
            Ok(gen_glyph_dataset(
                &mut rng,
                g.n_background,
                g.n_eval,
                g.chars_per_alphabet,
                g.instances_per_char,
            ))
        }
        DataConfig::SyntheticTracking(_) => {
            Err(Error::Config("this command needs character data, not sequences".into()))
        }
    }
}

fn load_sequences<F: Scalar>(cfg: &Config, data_override: Option<&Path>) -> Result<Vec<SyntheticSequence<F>>> {
    if let Some(root) = data_override {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::Data(format!("{}: {e}", root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Data(format!("no sequence directories under {}", root.display())));
        }
        return dirs.iter().map(|d| load_sequence(d)).collect();
    }
    match &cfg.data {
        DataConfig::SyntheticTracking(t) => {
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            Ok((0..t.n_sequences)
                .map(|_| gen_tracking_sequence(&mut rng, t.length, t.frame_size, t.object_size))
                .collect())
        }
        _ => Err(Error::Config("this command needs tracking sequences".into())),
    }
}

fn cmd_train(
    config: &Path,
    data_override: Option<&Path>,
    out_model: &Path,
    out_history: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, data_override, out_model, out_history),
        Precision::F64 => run_train::<f64>(&cfg, data_override, out_model, out_history),
    }
}

fn run_train<F: Scalar>(
    cfg: &Config,
    data_override: Option<&Path>,
    out_model: &Path,
    out_history: Option<&Path>,
) -> Result<()> {
    let (params, history) = if cfg.data.is_tracking() {
        let sequences = load_sequences::<F>(cfg, data_override)?;
        train(
            &cfg.network,
            &TaskData::Tracking {
                sequences: &sequences,
                exemplar_size: cfg.track.exemplar_size,
                search_size: cfg.track.search_size,
            },
            &cfg.train,
        )?
    } else {
        let ds = load_char_data::<F>(cfg, data_override)?;
        train(&cfg.network, &TaskData::Recognition(&ds), &cfg.train)?
    };

    save(&cfg.network, &params, out_model)?;
    let history_path = match out_history {
        Some(p) => p.to_path_buf(),
        None => out_model.with_extension("csv"),
    };
    std::fs::write(&history_path, history.to_csv())?;

    if let Some(last) = history.epochs.last() {
        println!(
            "final train loss {:.6}, validation loss {:.6} (lr {:.2e})",
            last.train_loss, last.val_loss, last.lr
        );
    } else {
        println!("0 epochs: model equals its initialization");
    }
    println!("model: {}", out_model.display());
    println!("history: {}", history_path.display());
    Ok(())
}

struct EvalSettings {
    split: Split,
    threads: usize,
    n_problems: usize,
    way: usize,
    seed: u64,
}

fn eval_one<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    ds: &CharacterDataset<F>,
    s: &EvalSettings,
) -> Result<evaluation::EvalReport> {
    check_params_cover(spec, params)?;
    error_rate(spec, params, ds.split(s.split), s.n_problems, s.way, s.seed, s.threads)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    model_path: &Path,
    data_override: Option<&Path>,
    config: Option<&Path>,
    split: Split,
    out: Option<&Path>,
    threads: usize,
    n_problems: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let (cfg, settings) = eval_context(data_override, config, split, threads, n_problems, seed)?;
    let model = load_model(model_path)?;
    let report = match &model {
        LoadedModel::F32 { spec, params } => {
            let ds = load_eval_data::<f32>(cfg.as_ref(), data_override)?;
            eval_one(spec, params, &ds, &settings)?
        }
        LoadedModel::F64 { spec, params } => {
            let ds = load_eval_data::<f64>(cfg.as_ref(), data_override)?;
            eval_one(spec, params, &ds, &settings)?
        }
    };

    let mut csv = String::from("metric,value,n,seed\n");
    csv.push_str(&format!("error_rate,{},{},{}\n", report.error, report.n_problems, report.seed));
    csv.push_str(&format!("way,{},{},{}\n", report.way, report.n_problems, report.seed));
    csv.push_str(&format!(
        "short_problems,{},{},{}\n",
        report.short_problems, report.n_problems, report.seed
    ));
    print!("{csv}");
    if let Some(p) = out {
        std::fs::write(p, csv)?;
    }
    Ok(())
}

fn eval_context(
    data_override: Option<&Path>,
    config: Option<&Path>,
    split: Split,
    threads: usize,
    n_problems: Option<usize>,
    seed: Option<u64>,
) -> Result<(Option<Config>, EvalSettings)> {
    let cfg = match config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    if data_override.is_none() && cfg.is_none() {
        return Err(Error::Config("pass --data or --config to locate the dataset".into()));
    }
    let eval_cfg = cfg.as_ref().map(|c| c.eval.clone()).unwrap_or_default();
    let settings = EvalSettings {
        split,
        threads: threads.max(1),
        n_problems: n_problems.unwrap_or(eval_cfg.n_problems),
        way: eval_cfg.way,
        seed: seed.unwrap_or(eval_cfg.seed),
    };
    Ok((cfg, settings))
}

fn load_eval_data<F: Scalar>(cfg: Option<&Config>, data_override: Option<&Path>) -> Result<CharacterDataset<F>> {
    if let Some(root) = data_override {
        return load_pgm_dataset(root);
    }
    load_char_data(cfg.expect("validated: config or data present"), None)
}

fn arch_label(arch: Arch) -> &'static str {
    match arch {
        Arch::Shared => "siamese (shared)",
        Arch::Unshared => "siamese (unshared)",
        Arch::Factorized => "siamese (unshared, factorized)",
        Arch::SiameseLearnet => "siamese learnet (shared)",
        Arch::SingleStreamLearnet => "learnet (single-stream)",
    }
}

fn comparison_label(c: ComparisonKind) -> &'static str {
    match c {
        ComparisonKind::Dot => "dot",
        ComparisonKind::Euclidean => "euclidean",
        ComparisonKind::WeightedL1 => "weighted-l1",
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval_table(
    dir: &Path,
    data_override: Option<&Path>,
    config: Option<&Path>,
    split: Split,
    out: Option<&Path>,
    threads: usize,
    n_problems: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let (cfg, settings) = eval_context(data_override, config, split, threads, n_problems, seed)?;
    let mut models: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "lrnt"))
        .collect();
    models.sort();
    if models.is_empty() {
        return Err(Error::Data(format!("no .lrnt models under {}", dir.display())));
    }

    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    for path in &models {
        let model = load_model(path)?;
        let (arch, comparison, error) = match &model {
            LoadedModel::F32 { spec, params } => {
                let ds = load_eval_data::<f32>(cfg.as_ref(), data_override)?;
                let report = eval_one(spec, params, &ds, &settings)?;
                (spec.arch, spec.comparison, report.error)
            }
            LoadedModel::F64 { spec, params } => {
                let ds = load_eval_data::<f64>(cfg.as_ref(), data_override)?;
                let report = eval_one(spec, params, &ds, &settings)?;
                (spec.arch, spec.comparison, report.error)
            }
        };
        println!("{}: error {:.4} ({})", path.display(), error, arch_label(arch));
        cells.insert(
            (arch_label(arch).to_string(), comparison_label(comparison).to_string()),
            error,
        );
    }

    let mut csv = String::from("architecture,dot,euclidean,weighted-l1\n");
    for arch in [
        Arch::Shared,
        Arch::Unshared,
        Arch::Factorized,
        Arch::SiameseLearnet,
        Arch::SingleStreamLearnet,
    ] {
        let row = arch_label(arch);
        let mut line = row.to_string();
        let mut any = false;
        for c in [ComparisonKind::Dot, ComparisonKind::Euclidean, ComparisonKind::WeightedL1] {
            line.push(',');
            if let Some(e) = cells.get(&(row.to_string(), comparison_label(c).to_string())) {
                line.push_str(&format!("{e:.4}"));
                any = true;
            }
        }
        if any {
            csv.push_str(&line);
            csv.push('\n');
        }
    }
    print!("{csv}");
    if let Some(p) = out {
        std::fs::write(p, csv)?;
    }
    Ok(())
}

fn cmd_track(
    model_path: &Path,
    seq: Option<&Path>,
    synthetic: bool,
    config: Option<&Path>,
    out: &Path,
    dump_maps: bool,
) -> Result<()> {
    let cfg = match config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let track_cfg = cfg.as_ref().map(|c| c.track.clone()).unwrap_or_default();
    let tc = TrackConfig {
        exemplar_size: track_cfg.exemplar_size,
        search_size: track_cfg.search_size,
        search_radius: track_cfg.search_radius,
    };

    let model = load_model(model_path)?;
    if model.spec().comparison != ComparisonKind::Dot {
        return Err(Error::Unsupported(
            "this model's comparison cannot run convolutionally; tracking needs the dot product"
                .into(),
        ));
    }

    match model {
        LoadedModel::F32 { spec, params } => {
            let sequence = obtain_sequence::<f32>(seq, synthetic, cfg.as_ref())?;
            run_track(&spec, &params, &sequence, &tc, out, dump_maps)
        }
        LoadedModel::F64 { spec, params } => {
            let sequence = obtain_sequence::<f64>(seq, synthetic, cfg.as_ref())?;
            run_track(&spec, &params, &sequence, &tc, out, dump_maps)
        }
    }
}

fn obtain_sequence<F: Scalar>(
    seq: Option<&Path>,
    synthetic: bool,
    cfg: Option<&Config>,
) -> Result<SyntheticSequence<F>> {
    match (seq, synthetic) {
        (Some(dir), false) => load_sequence(dir),
        (None, true) => {
            let cfg = cfg.ok_or_else(|| {
                Error::Config("--synthetic needs --config with a synthetic_tracking section".into())
            })?;
            match &cfg.data {
                DataConfig::SyntheticTracking(t) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
                    Ok(gen_tracking_sequence(&mut rng, t.length, t.frame_size, t.object_size))
                }
                _ => Err(Error::Config("config has no synthetic_tracking data section".into())),
            }
        }
        _ => Err(Error::Config("pass exactly one of --seq or --synthetic".into())),
    }
}

fn run_track<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    sequence: &SyntheticSequence<F>,
    tc: &TrackConfig,
    out: &Path,
    dump_maps: bool,
) -> Result<()> {
    check_params_cover(spec, params)?;
    std::fs::create_dir_all(out)?;
    let (result, maps) = track_with_maps(spec, params, sequence, tc)?;

    let mut csv = String::from("frame,cx,cy,w,h,peak_score,displacement\n");
    for (i, b) in result.boxes.iter().enumerate() {
        if i == 0 {
            csv.push_str(&format!("0,{},{},{},{},,\n", b.cx, b.cy, b.w, b.h));
        } else {
            csv.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                b.cx,
                b.cy,
                b.w,
                b.h,
                result.peak_scores[i - 1],
                result.displacements[i - 1]
            ));
        }
    }
    std::fs::write(out.join("track.csv"), csv)?;

    if dump_maps {
        for (i, map) in maps.iter().enumerate() {
            let (mh, mw) = (map.shape()[0], map.shape()[1]);
            let img = normalize_to_unit(&map.reshape(vec![mh, mw, 1]));
            data::write_pgm(&out.join(format!("map_{:04}.pgm", i + 1)), &img)?;
        }
    }

    let mean = displacement_error(&result, &sequence.object_boxes);
    println!("tracked {} frames, mean displacement {:.3} px", result.boxes.len(), mean);
    println!("results: {}", out.join("track.csv").display());
    Ok(())
}

fn normalize_to_unit<F: Scalar>(img: &learnet::Tensor<F>) -> learnet::Tensor<F> {
    let lo = img.data().iter().cloned().fold(F::infinity(), F::min);
    let hi = img.data().iter().cloned().fold(F::neg_infinity(), F::max);
    let span = if hi > lo { hi - lo } else { F::one() };
    img.map(|v| (v - lo) / span)
}

fn cmd_dump_filters(model_path: &Path, exemplar: &Path, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    if !model.spec().arch.has_learnet() {
        return Err(Error::Unsupported(
            "this model has no meta-network, so there are no predicted filters to dump".into(),
        ));
    }
    match model {
        LoadedModel::F32 { spec, params } => dump_filters(&spec, &params, exemplar, out),
        LoadedModel::F64 { spec, params } => dump_filters(&spec, &params, exemplar, out),
    }
}

fn dump_filters<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    exemplar: &Path,
    out: &Path,
) -> Result<()> {
    check_params_cover(spec, params)?;
    let plan = spec.validate()?;
    let img = read_pgm::<F>(exemplar)?;
    let img = resize(&img, spec.input[0], spec.input[1]);
    let binding = bind_exemplar(spec, &plan, params, &img);
    let w = binding
        .w_pred
        .as_ref()
        .ok_or_else(|| Error::Unsupported("model predicts no filters".into()))?;

    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for v in w.data() {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    println!(
        "predicted {} values: min {lo:.6}, max {hi:.6}, mean {:.6}",
        w.numel(),
        sum / w.numel() as f64
    );

    std::fs::create_dir_all(out)?;
    if w.rank() == 3 {
        for (k, img) in filter_images(w).iter().enumerate() {
            data::write_pgm(&out.join(format!("filter_{k:03}.pgm")), img)?;
        }
        println!("wrote {} filter images to {}", w.shape()[2], out.display());
    } else {
        // A fully-connected dynamic layer predicts a vector; dump it as one row.
        let len = w.numel();
        let img = normalize_to_unit(&w.reshape(vec![1, len, 1]));
        data::write_pgm(&out.join("weights.pgm"), &img)?;
        println!("wrote weight strip to {}", out.display());
    }
    Ok(())
}
