//! Pipeline driver: synthesize data, train, restore masked segments, and
//! evaluate restorations, all from one flat config.

use clap::{Parser, Subcommand};
use load_inpaint::config::{ConfigError, RestoreMethod, RunConfig};
use load_inpaint::data::{
    aggregate_fleet, apply_mask, dequantize, generate_synthetic_fleet, read_dataset, split_dataset,
    write_dataset, DataError, DatasetSidecar, GeneratorParams, MaskSpec, MaskedWindow,
    TokenSequence, WindowSlice,
};
use load_inpaint::metrics::{assemble_report, MetricsError, SegmentEval};
use load_inpaint::model::{decode_top1, forward, ModelError};
use load_inpaint::select::{
    copy_prev_day, direct_top2, iterative_top2, linear_interp, pocp, ModelPredictor, SelectError,
    SelectionMethod,
};
use load_inpaint::train::{fit, load_checkpoint, save_checkpoint, write_history, TrainError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "load-inpaint", about = "Load-profile inpainting pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// `key = value` config file; omit to use defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// trailing `--key value` pairs override file values
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fleet and write the prepared dataset
    Synth(CommonArgs),
    /// Train on a prepared dataset; write checkpoint and history
    Train(CommonArgs),
    /// Restore masked segments; write restoration, plot, and report files
    Restore(CommonArgs),
    /// Recompute the metrics report from a restoration CSV
    Evaluate(CommonArgs),
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SelectError> for CliError {
    fn from(e: SelectError) -> Self {
        match e {
            SelectError::Model(m) => CliError::Numeric(m.to_string()),
            SelectError::BadConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(m) => CliError::Config(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(m) => CliError::Config(m),
            TrainError::Checkpoint(m) => CliError::Data(format!("checkpoint: {m}")),
            TrainError::Data(d) => CliError::Data(d.to_string()),
            TrainError::Io(io) => CliError::Data(io.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => load(&a).and_then(|c| cmd_synth(&c)),
        Command::Train(a) => load(&a).and_then(|c| cmd_train(&c)),
        Command::Restore(a) => load(&a).and_then(|c| cmd_restore(&c)),
        Command::Evaluate(a) => load(&a).and_then(|c| cmd_evaluate(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn load(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    println!("resolved config:\n{}config digest: {}", cfg.resolved(), cfg.digest());
    Ok(cfg)
}

fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let params = GeneratorParams::default();
    let (users, temperature) =
        generate_synthetic_fleet(cfg.n_users, cfg.n_days, &params, cfg.seed)?;
    let mut windows: Vec<MaskedWindow> = Vec::new();
    let mut p_max: f64 = 0.0;
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    for a in 0..cfg.n_aggregates {
        let profile = aggregate_fleet(
            &users,
            &temperature,
            cfg.users_per_aggregate,
            cfg.seed.wrapping_add(a as u64),
        )?;
        p_max = p_max.max(profile.p_max);
        t_min = t_min.min(profile.t_min);
        t_max = t_max.max(profile.t_max);
        for slice in &window_slices(&profile, cfg)? {
            let spec = MaskSpec {
                seed: cfg
                    .seed
                    .wrapping_mul(0x9E3779B97F4A7C15)
                    .wrapping_add(windows.len() as u64),
                ..cfg.mask_spec()
            };
            windows.push(apply_mask(slice, &spec)?);
        }
    }
    let sidecar = DatasetSidecar {
        p_max,
        t_min,
        t_max,
        window_len: cfg.window_len,
        margin: cfg.margin,
        seed: cfg.seed,
        generator: Some(params),
        config_digest: Some(cfg.digest()),
    };
    write_dataset(Path::new(&cfg.dataset), &windows, &sidecar)?;
    println!(
        "wrote {} windows of {} points to {}",
        windows.len(),
        cfg.window_len,
        cfg.dataset
    );
    Ok(())
}

fn window_slices(
    profile: &load_inpaint::data::AlignedProfile,
    cfg: &RunConfig,
) -> Result<Vec<WindowSlice>, DataError> {
    load_inpaint::data::window_profiles(profile, cfg.window_len, cfg.margin)
}

fn slice_of(w: &MaskedWindow) -> WindowSlice {
    WindowSlice {
        load: w.load.clone(),
        temp: w.temp.clone(),
        left_margin_load: w.left_margin_load.clone(),
        right_margin_load: w.right_margin_load.clone(),
        left_margin_temp: w.left_margin_temp.clone(),
        right_margin_temp: w.right_margin_temp.clone(),
        start_index: 0,
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let (windows, sidecar) = read_dataset(Path::new(&cfg.dataset))?;
    if sidecar.window_len != cfg.window_len {
        return Err(CliError::Config(format!(
            "dataset windows have {} points but the model expects {}",
            sidecar.window_len, cfg.window_len
        )));
    }
    let slices: Vec<WindowSlice> = windows.iter().map(slice_of).collect();
    let (train, test) = split_dataset(&slices, cfg.split_ratio, cfg.seed);
    let model_config = cfg.model_config();
    let train_config = cfg.train_config();
    let (params, history) = fit(&train, &test, &model_config, &train_config, &cfg.mask_spec())?;
    save_checkpoint(
        &params,
        &model_config,
        &train_config,
        history.last().map_or(0, |h| h.step),
        Path::new(&cfg.checkpoint),
    )?;
    write_history(Path::new(&cfg.history), &history)?;
    append_digest_comment(Path::new(&cfg.history), &cfg.digest())?;
    match history.last() {
        Some(h) => println!(
            "final test loss {:.6}, test MPE {:.6} after {} steps",
            h.test_loss, h.test_mpe, h.step
        ),
        None => println!("0 epochs: checkpoint holds initialized parameters"),
    }
    Ok(())
}

/// Output CSVs carry the resolved-config digest as a trailing comment line.
fn append_digest_comment(path: &Path, digest: &str) -> Result<(), std::io::Error> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "# config_digest = {digest}")
}

struct Restoration {
    top1: Vec<f64>,
    top2: Vec<f64>,
}

fn restore_window(
    window: &MaskedWindow,
    cfg: &RunConfig,
    model: Option<(&load_inpaint::model::ModelParams, &load_inpaint::model::ModelConfig)>,
) -> Result<Restoration, CliError> {
    // known positions keep their true values; only masked positions are
    // replaced by (dequantized) candidates
    let values = |classes: &[usize]| -> Result<Vec<f64>, DataError> {
        window
            .load
            .iter()
            .zip(&window.mask)
            .zip(classes)
            .map(|((&v, &m), &c)| {
                if m == 1 {
                    Ok(v)
                } else {
                    dequantize(c, cfg.classes)
                }
            })
            .collect()
    };
    match cfg.method {
        RestoreMethod::LinearInterp => {
            let top1 = linear_interp(window);
            Ok(Restoration {
                top2: top1.clone(),
                top1,
            })
        }
        RestoreMethod::CopyPrevDay => {
            let top1 = copy_prev_day(window);
            Ok(Restoration {
                top2: top1.clone(),
                top1,
            })
        }
        RestoreMethod::Model(method) => {
            let (params, model_config) = model.expect("model methods require a checkpoint");
            let tokens = TokenSequence::from_window(window, model_config.classes)?;
            let (top1_classes, top2_classes) = match method {
                SelectionMethod::Top1 => {
                    let d = forward(&tokens, params, model_config)?;
                    let t1 = decode_top1(&d);
                    (t1.clone(), t1)
                }
                SelectionMethod::DirectTop2 => {
                    let d = forward(&tokens, params, model_config)?;
                    let cs = direct_top2(&d, &window.mask)?;
                    (cs.top1_classes, cs.top2_classes)
                }
                SelectionMethod::IterativeTop2 => {
                    let predictor = ModelPredictor {
                        params,
                        config: model_config,
                    };
                    let cs = iterative_top2(window, &predictor, &cfg.selection_config())?;
                    (cs.top1_classes, cs.top2_classes)
                }
            };
            Ok(Restoration {
                top1: values(&top1_classes)?,
                top2: values(&top2_classes)?,
            })
        }
    }
}

fn cmd_restore(cfg: &RunConfig) -> Result<(), CliError> {
    let (windows, sidecar) = read_dataset(Path::new(&cfg.dataset))?;
    let model_state = match cfg.method {
        RestoreMethod::Model(_) => {
            let (params, model_config, _, _) = load_checkpoint(Path::new(&cfg.checkpoint))?;
            if model_config.window_len != sidecar.window_len {
                return Err(CliError::Config(format!(
                    "checkpoint expects {}-point windows, dataset has {}",
                    model_config.window_len, sidecar.window_len
                )));
            }
            Some((params, model_config))
        }
        _ => None,
    };

    let method = cfg.method.as_str();
    let mut restoration_csv =
        String::from("window_id,pos,truth_norm,top1_norm,top2_norm,mask,method,e\n");
    let mut plot_csv = String::from("window_id,pos,truth,top1,top2,mask\n");
    let mut segments: Vec<SegmentEval> = Vec::new();
    let (mut all_top1, mut all_top2, mut all_truth, mut all_mask) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for (wid, window) in windows.iter().enumerate() {
        let r = restore_window(
            window,
            cfg,
            model_state.as_ref().map(|(p, c)| (p, c)),
        )?;
        for t in 0..window.window_len() {
            restoration_csv.push_str(&format!(
                "{wid},{t},{},{},{},{},{method},{}\n",
                window.load[t], r.top1[t], r.top2[t], window.mask[t], cfg.e
            ));
            plot_csv.push_str(&format!(
                "{wid},{t},{},{},{},{}\n",
                window.load[t], r.top1[t], r.top2[t], window.mask[t]
            ));
        }
        for (mds_index, &(s, t_end)) in window.segments().iter().enumerate() {
            segments.push(SegmentEval {
                window_id: wid,
                mds_index,
                truth: window.load[s..=t_end].to_vec(),
                restored: r.top1[s..=t_end].to_vec(),
            });
        }
        all_top1.extend_from_slice(&r.top1);
        all_top2.extend_from_slice(&r.top2);
        all_truth.extend_from_slice(&window.load);
        all_mask.extend_from_slice(&window.mask);
    }

    let digest = cfg.digest();
    std::fs::write(&cfg.restoration, &restoration_csv)?;
    append_digest_comment(Path::new(&cfg.restoration), &digest)?;
    std::fs::write(&cfg.plot, &plot_csv)?;
    append_digest_comment(Path::new(&cfg.plot), &digest)?;

    let pocp_value = pocp(&all_top1, &all_top2, &all_truth, &all_mask)?;
    let report = assemble_report(&segments, Some(pocp_value), &digest)?;
    std::fs::write(&cfg.report, serde_json::to_string_pretty(&report).unwrap())?;
    println!(
        "{} windows restored with {method}; aggregate MPE {:.6}, PoCP {:.2}%",
        windows.len(),
        report.aggregate.mpe,
        pocp_value
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&cfg.restoration)?;
    let mut rows: Vec<(usize, usize, f64, f64, f64, u8)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(CliError::Data(format!(
                "{}:{}: expected 8 fields, got {}",
                cfg.restoration,
                lineno + 1,
                fields.len()
            )));
        }
        let p = |i: usize| -> Result<f64, CliError> {
            fields[i].parse().map_err(|e| {
                CliError::Data(format!("{}:{}: {e}", cfg.restoration, lineno + 1))
            })
        };
        rows.push((
            p(0)? as usize,
            p(1)? as usize,
            p(2)?,
            p(3)?,
            p(4)?,
            p(5)? as u8,
        ));
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{} has no data rows", cfg.restoration)));
    }

    let n_windows = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let mut segments: Vec<SegmentEval> = Vec::new();
    let (mut all_top1, mut all_top2, mut all_truth, mut all_mask) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for wid in 0..n_windows {
        let mut wrows: Vec<_> = rows.iter().filter(|r| r.0 == wid).collect();
        wrows.sort_by_key(|r| r.1);
        let mask: Vec<u8> = wrows.iter().map(|r| r.5).collect();
        let mut mds_index = 0;
        let mut start: Option<usize> = None;
        for (i, &m) in mask.iter().chain(std::iter::once(&1)).enumerate() {
            match (m, start) {
                (0, None) => start = Some(i),
                (1, Some(s)) => {
                    segments.push(SegmentEval {
                        window_id: wid,
                        mds_index,
                        truth: wrows[s..i].iter().map(|r| r.2).collect(),
                        restored: wrows[s..i].iter().map(|r| r.3).collect(),
                    });
                    mds_index += 1;
                    start = None;
                }
                _ => {}
            }
        }
        for r in &wrows {
            all_truth.push(r.2);
            all_top1.push(r.3);
            all_top2.push(r.4);
            all_mask.push(r.5);
        }
    }

    let pocp_value = pocp(&all_top1, &all_top2, &all_truth, &all_mask)?;
    let report = assemble_report(&segments, Some(pocp_value), &cfg.digest())?;
    std::fs::write(&cfg.report, serde_json::to_string_pretty(&report).unwrap())?;
    println!(
        "{} segments scored; aggregate MPE {:.6}, RMSE {:.6}, FCE {:.6}, PoCP {:.2}%",
        report.per_window.len(),
        report.aggregate.mpe,
        report.aggregate.rmse,
        report.aggregate.fce,
        pocp_value
    );
    Ok(())
}
