//! `ddsspp`: tiling, training, evaluation, prediction, operation counts and
//! the built-in oracle suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use denseddsspp::config::RunConfig;
use denseddsspp::cost::{group_digits, layer_cost, profile_model, render_table};
use denseddsspp::data::{self, TileRequest, DEFAULT_RATIO, DEFAULT_TILE};
use denseddsspp::metrics::{Averaging, DEFAULT_THRESHOLD};
use denseddsspp::model::{Model, ModelConfig};
use denseddsspp::param::Module;
use denseddsspp::{checkpoint, selftest, train, Error};

/// Input size used when profiling a whole model.
const PROFILE_SIZE: usize = 512;

const EXIT_USAGE: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_SELFTEST: u8 = 4;

#[derive(Parser)]
#[command(name = "ddsspp", version, about = "Road segmentation with dense separable pyramid pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut image/mask pairs into square tiles and split them by source.
    Tile {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TILE)]
        tile: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RATIO)]
        ratio: f64,
        #[arg(long)]
        seed: u64,
        /// Keep a seeded subset of this many source images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision, F1 and IoU of a checkpoint on a tile directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding `images/` and `masks/`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment one image into an 8-bit mask.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the 16-bit probability map here.
        #[arg(long)]
        prob: Option<PathBuf>,
    },
    /// Multiply-accumulate counts for one layer or a whole model.
    Cost {
        /// Run configuration whose model is profiled.
        #[arg(long, conflicts_with = "layer")]
        config: Option<PathBuf>,
        /// A single layer as H,W,K,C_IN,C_OUT.
        #[arg(long, value_parser = parse_layer)]
        layer: Option<[u64; 5]>,
        #[arg(long)]
        json: bool,
    },
    /// Run the built-in gradient, equivalence and operation-count checks.
    Selftest,
}

fn parse_layer(s: &str) -> Result<[u64; 5], String> {
    let parts: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<u64>| format!("expected H,W,K,C_IN,C_OUT, got {} values", p.len()))
}

enum Failure {
    Lib(Error),
    Selftest(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.root() {
                Error::Checkpoint(_) => EXIT_CHECKPOINT,
                _ => EXIT_USAGE,
            })
        }
        Err(Failure::Selftest(n)) => {
            eprintln!("selftest: {n} check(s) failed");
            ExitCode::from(EXIT_SELFTEST)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Tile {
            images,
            masks,
            tile,
            out,
            ratio,
            seed,
            limit,
        } => cmd_tile(&images, &masks, &out, &TileRequest { tile, ratio, seed, limit }),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Predict {
            checkpoint,
            image,
            out,
            prob,
        } => cmd_predict(&checkpoint, &image, &out, prob.as_deref()),
        Command::Cost { config, layer, json } => cmd_cost(config.as_deref(), layer, json),
        Command::Selftest => cmd_selftest(),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if !path.is_dir() {
        return Err(Error::Data(format!("{what} directory {} does not exist", path.display())).into());
    }
    Ok(())
}

fn cmd_tile(images: &Path, masks: &Path, out: &Path, req: &TileRequest) -> Result<(), Failure> {
    require_dir(images, "image")?;
    require_dir(masks, "mask")?;
    let outcome = data::tile_directories(images, masks, out, req)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let m = &outcome.manifest;
    println!(
        "{} tiles from {} sources (train {}, test {}) in {}",
        m.tiles.len(),
        m.sources.len(),
        m.count(data::Split::Train),
        m.count(data::Split::Test),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let (train_set, val_set) = cfg.data.load(seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n")?;

    let model = Model::new(cfg.model.clone(), seed)?;
    eprintln!(
        "training {} parameters on {} samples ({} validation) for {} epochs",
        model.num_parameters(),
        train_set.len(),
        val_set.len(),
        cfg.train.epochs
    );
    let best = out.join("best.ddsp");
    let history = train::train(&model, &train_set, &val_set, &cfg.train, seed, Some(&best), |r| {
        let val = r.val.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v.iou));
        eprintln!(
            "epoch {:>4}  lr {:.6}  loss {:.5}  iou {:.4}  val_iou {val}",
            r.epoch, r.lr, r.loss, r.train.iou
        );
    })?;
    fs::write(out.join("history.csv"), history.to_csv())?;
    checkpoint::save(&model, &out.join("last.ddsp"))?;
    if let Some(b) = history.best() {
        println!("best epoch {} iou {:.4}; checkpoint {}", b.epoch, b.val.map_or(b.train.iou, |v| v.iou), best.display());
    }
    Ok(())
}

fn cmd_eval(checkpoint_path: &Path, data_dir: &Path) -> Result<(), Failure> {
    let model = checkpoint::load(checkpoint_path)?;
    require_dir(data_dir, "data")?;
    let samples = data::load_directory(data_dir)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no image/mask pairs in {}", data_dir.display())).into());
    }
    let (scores, acc) = train::evaluate(&model, &samples, 1, DEFAULT_THRESHOLD, Averaging::Micro)?;
    println!("images    {}", acc.images());
    println!("precision {:.6}", scores.precision);
    println!("f1        {:.6}", scores.f1);
    println!("iou       {:.6}", scores.iou);
    Ok(())
}

fn cmd_predict(checkpoint_path: &Path, image: &Path, out: &Path, prob: Option<&Path>) -> Result<(), Failure> {
    let model = checkpoint::load(checkpoint_path)?;
    let x = data::load_image(image)?;
    let p = model.predict(&x)?;
    data::save_png(&data::mask_image(&p, DEFAULT_THRESHOLD)?, out)?;
    if let Some(path) = prob {
        data::save_png(&data::probability_image(&p)?, path)?;
    }
    let s = p.shape();
    println!("{}x{} mask written to {}", s.w, s.h, out.display());
    Ok(())
}

fn cmd_cost(config: Option<&Path>, layer: Option<[u64; 5]>, json: bool) -> Result<(), Failure> {
    if let Some([h, w, k, ci, co]) = layer {
        let c = layer_cost(h, w, k, ci, co)?;
        if json {
            println!("{}", serde_json::to_string_pretty(&c).expect("json serializes"));
        } else {
            println!("layer      H={h} W={w} K={k} C_in={ci} C_out={co}");
            println!("standard   {}", group_digits(c.standard));
            println!("depthwise  {}", group_digits(c.depthwise));
            println!("pointwise  {}", group_digits(c.pointwise));
            let (dw, pw) = (group_digits(c.depthwise), group_digits(c.pointwise));
            println!("separable  {} ({dw} + {pw})", group_digits(c.separable));
            println!("ratio      {:.4}", c.ratio);
        }
        return Ok(());
    }
    let model = match config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig::default(),
    };
    let profile = profile_model(&model, PROFILE_SIZE, PROFILE_SIZE)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&profile).expect("json serializes"));
    } else {
        println!("input {PROFILE_SIZE}x{PROFILE_SIZE}");
        print!("{}", render_table(&profile));
    }
    Ok(())
}

fn cmd_selftest() -> Result<(), Failure> {
    let checks = selftest::run_all();
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{status}  {:<52} {:.3e} (limit {:.0e})", c.name, c.measured, c.tolerance);
    }
    if failed > 0 {
        return Err(Failure::Selftest(failed));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
