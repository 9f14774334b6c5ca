//! Command-line front end: data generation, training, evaluation, gradient
//! auditing, cost profiling and mask export.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cosam::audit;
use cosam::config::RunConfig;
use cosam::io;
use cosam::profiler::{self, Geometry, NlmVariant};
use cosam::synthdata::{frames_subset, make_dataset, Dataset};
use cosam::train::{self, eval_frame_indices};
use cosam::{CosamError, Result, Tensor};

#[derive(Parser)]
#[command(name = "cosam", version, about = "Co-segmentation attention workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (falls back to $COSAM_OUT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the triplet margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Override the reference-frame count K.
    #[arg(long)]
    k: Option<usize>,
    /// Override frames per snippet N.
    #[arg(long)]
    n_frames: Option<usize>,
    /// Override frame selection: sequential or random.
    #[arg(long)]
    frame_selection: Option<String>,
    /// Drop all co-segmentation modules.
    #[arg(long)]
    no_cosam: bool,
    /// Keep only the spatial attention branch.
    #[arg(long, conflicts_with = "channel_only")]
    spatial_only: bool,
    /// Keep only the channel attention branch.
    #[arg(long)]
    channel_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to disk.
    GenData(CommonOpts),
    /// Train a model, then evaluate and write checkpoint + reports.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Load an existing dataset directory instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the full finite-difference gradient audit.
    Gradcheck,
    /// Analytic parameter/FLOP comparison against non-local blocks.
    Profile {
        /// Where to write profile.json (printed only when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 2048)]
        d: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        d_r: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
    },
    /// Write spatial attention masks for query snippets as PGM images.
    ExportMasks {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// How many query snippets to export.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn load_config(opts: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    // flags take precedence over file values
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(s) = opts.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = opts.lr {
        cfg.train.lr = lr;
    }
    if let Some(m) = opts.margin {
        cfg.train.margin = m;
    }
    if let Some(k) = opts.k {
        cfg.model.k = k;
    }
    if let Some(n) = opts.n_frames {
        cfg.train.n_frames = n;
    }
    if let Some(fs) = &opts.frame_selection {
        cfg.train.frame_selection = fs.clone();
    }
    if opts.no_cosam {
        cfg.model.cosam_sites.clear();
    }
    if opts.spatial_only {
        cfg.model.spatial = true;
        cfg.model.channel = false;
    }
    if opts.channel_only {
        cfg.model.spatial = false;
        cfg.model.channel = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(opts: &CommonOpts) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| std::env::var_os("COSAM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_or_make_dataset(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Dataset> {
    match data {
        Some(dir) => io::load_dataset(dir),
        None => make_dataset(&cfg.dataset_config()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CosamError::Format(format!("json encode: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

fn cmd_gen_data(opts: &CommonOpts) -> Result<()> {
    let cfg = load_config(opts)?;
    let dir = out_dir(opts).join("dataset");
    let ds = make_dataset(&cfg.dataset_config())?;
    io::save_dataset(&dir, &ds)?;
    #[derive(serde::Serialize)]
    struct GenRecord {
        version: String,
        config_hash: String,
        seed: u64,
        train: usize,
        query: usize,
        gallery: usize,
    }
    write_json(
        &dir.join("gen.json"),
        &GenRecord {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: train::config_hash(&cfg),
            seed: cfg.seed,
            train: ds.train.len(),
            query: ds.query.len(),
            gallery: ds.gallery.len(),
        },
    )?;
    println!(
        "wrote {} train / {} query / {} gallery snippets to {}",
        ds.train.len(),
        ds.query.len(),
        ds.gallery.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(common: &CommonOpts, data: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = load_or_make_dataset(&cfg, data)?;
    let dir = out_dir(common);
    std::fs::create_dir_all(&dir)?;
    let (mut model, train_report) = train::train(&cfg, &dataset, 10)?;
    let eval_report = train::evaluate(&mut model, &dataset, &cfg)?;
    io::save_checkpoint(&dir.join("checkpoint.bin"), &model)?;
    let mut log = String::new();
    for r in &train_report.losses {
        log.push_str(&serde_json::to_string(r).map_err(|e| CosamError::Format(e.to_string()))?);
        log.push('\n');
    }
    std::fs::write(dir.join("losses.jsonl"), log)?;
    let record = train::run_record(train_report, eval_report);
    write_json(&dir.join("run.json"), &record)?;
    print_eval(&record.eval);
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn print_eval(e: &train::EvalReport) {
    let at = |r: usize| {
        e.cmc
            .get(r - 1)
            .map_or("n/a".to_string(), |v| format!("{v:.4}"))
    };
    println!(
        "cmc@1 {}  cmc@5 {}  cmc@20 {}  mAP {:.4}",
        at(1),
        at(5),
        at(20),
        e.mean_ap
    );
    if let (Some(c), Some(f)) = (e.attention_coverage, e.gt_area_fraction) {
        println!("attention coverage {c:.4} (object area fraction {f:.4})");
    }
}

fn cmd_eval(common: &CommonOpts, checkpoint: &Path, data: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = load_or_make_dataset(&cfg, data)?;
    let mut model = train::build_model(&cfg)?;
    io::load_checkpoint(checkpoint, &mut model)?;
    let report = train::evaluate(&mut model, &dataset, &cfg)?;
    let dir = out_dir(common);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("eval.json"), &report)?;
    print_eval(&report);
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let entries = audit::run_audit()?;
    let mut failed = 0;
    for e in &entries {
        println!(
            "{:24} max rel err {:.3e}  {}",
            e.name,
            e.max_rel_err,
            if e.passed() { "pass" } else { "FAIL" }
        );
        if !e.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CosamError::NonFinite(format!(
            "gradient audit: {failed} of {} checks failed",
            entries.len()
        )));
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}

fn cmd_profile(
    out: &Option<PathBuf>,
    geom: Geometry,
    d_r: usize,
    k: usize,
    hidden: usize,
) -> Result<()> {
    let cmp = profiler::compare(geom, d_r, k, hidden, NlmVariant::EmbeddedGaussian)?;
    println!(
        "geometry: {} x {} x {} x {}",
        geom.n, geom.d, geom.h, geom.w
    );
    println!(
        "{:24} {:>12} {:>14}",
        "module", "params", "flops"
    );
    println!(
        "{:24} {:>12} {:>14}",
        "cosam",
        format!("{:.2}M", cmp.cosam.params as f64 / 1e6),
        format!("{:.2}G", cmp.cosam.flops as f64 / 1e9)
    );
    for variant in [
        NlmVariant::Gaussian,
        NlmVariant::EmbeddedGaussian,
        NlmVariant::DotProduct,
        NlmVariant::Concatenation,
    ] {
        let c = profiler::count_nlm(geom, variant)?;
        println!(
            "{:24} {:>12} {:>14}",
            format!("nlm {variant:?}"),
            format!("{:.2}M", c.params as f64 / 1e6),
            format!("{:.2}G", c.flops as f64 / 1e9)
        );
    }
    println!(
        "vs embedded gaussian: {:.1}x fewer params, {:.1}x fewer flops",
        cmp.param_ratio, cmp.flop_ratio
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("profile.json"), &cmp)?;
    }
    Ok(())
}

fn cmd_export_masks(
    common: &CommonOpts,
    checkpoint: &Path,
    data: &Option<PathBuf>,
    count: usize,
) -> Result<()> {
    let cfg = load_config(common)?;
    if cfg.model.cosam_sites.is_empty() || !cfg.model.spatial {
        return Err(CosamError::config(
            "export-masks needs a model with spatial attention",
        ));
    }
    let dataset = load_or_make_dataset(&cfg, data)?;
    let mut model = train::build_model(&cfg)?;
    io::load_checkpoint(checkpoint, &mut model)?;
    let dir = out_dir(common).join("masks");
    std::fs::create_dir_all(&dir)?;
    let n = cfg.train.n_frames;
    let mut written = 0;
    for (qi, snippet) in dataset.query.iter().take(count).enumerate() {
        let indices = eval_frame_indices(snippet.frames.shape()[0], n);
        let (frames, _) = frames_subset(snippet, &indices)?;
        let mut tape = cosam::Tape::new();
        let x = tape.constant(frames);
        let out = model.forward(&mut tape, x, cosam::nn::Mode::Eval)?;
        for (site, mask) in &out.masks {
            let mv = tape.value(*mask);
            let (h, w) = (mv.shape()[2], mv.shape()[3]);
            for fi in 0..n {
                let frame = Tensor::from_vec(
                    vec![h, w],
                    mv.data()[fi * h * w..(fi + 1) * h * w].to_vec(),
                )?;
                let path = dir.join(format!("query{qi:02}_site{site}_f{fi}.pgm"));
                io::write_pgm(&path, &frame)?;
                written += 1;
            }
        }
    }
    println!("wrote {written} masks to {}", dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(opts) => cmd_gen_data(opts),
        Command::Train { common, data } => cmd_train(common, data),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(common, checkpoint, data),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Profile {
            out,
            n,
            d,
            height,
            width,
            d_r,
            k,
            hidden,
        } => cmd_profile(
            out,
            Geometry {
                n: *n,
                d: *d,
                h: *height,
                w: *width,
            },
            *d_r,
            *k,
            *hidden,
        ),
        Command::ExportMasks {
            common,
            checkpoint,
            data,
            count,
        } => cmd_export_masks(common, checkpoint, data, *count),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                CosamError::ShapeMismatch(_)
                | CosamError::InvalidArgument(_)
                | CosamError::InvalidConfig(_) => 2,
                CosamError::NonFinite(_) | CosamError::Io(_) | CosamError::Format(_) => 3,
            };
            ExitCode::from(code)
        }
    }
}
