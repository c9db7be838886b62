//! `structcount` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use structcount::backbone::BackboneSpec;
use structcount::dataset::{load_manifest, load_rgb, Manifest, Split, TileSource, ZOOM19_METERS_PER_PIXEL};
use structcount::grid::{count_tile, CellGrid, DEFAULT_CELL_PX};
use structcount::heads::{train_counter, CountKind, CountModel, CounterTrainConfig, SsNetRef, DEFAULT_DROPOUT};
use structcount::heatmap::{render_heatmap, Bins};
use structcount::metrics::{evaluate, evaluate_rounded, Scored};
use structcount::ssnet::{
    extract_patches, mining_candidates, segmentation_metrics, PatchLabelRule, SsNet, SsNetConfig, SsNetTrainConfig,
    SsNetTrainer,
};
use structcount::synthgen::{generate_corpus, CorpusSpec, SplitPolicy};

#[derive(Parser, Serialize)]
#[command(name = "structcount", version, about = "Count built structures in overhead RGB imagery")]
struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic corpus with images, masks and a manifest.
    Synth(SynthArgs),
    /// Check a manifest and the files it references.
    ValidateManifest(ValidateArgs),
    /// Train the built-up-area segmenter on masked training tiles.
    TrainSsnet(TrainSsnetArgs),
    /// Train a counting model (drc, gwap, ccpp or fusion).
    TrainCounter(TrainCounterArgs),
    /// Evaluate a counting model on a manifest split.
    Eval(EvalArgs),
    /// Write the built probability map of one image.
    Segment(SegmentArgs),
    /// Count a large image cell by cell.
    CountTile(CountTileArgs),
    /// Render a heat map from a cell table.
    Render(RenderArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    min_count: u32,
    #[arg(long, default_value_t = 80)]
    max_count: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// sparse, medium or dense; mixed when omitted.
    #[arg(long)]
    density: Option<String>,
    #[arg(long, default_value_t = 336)]
    size: usize,
    /// Put the first N scenes in train; with --val-count, hash split otherwise.
    #[arg(long, requires = "val_count")]
    train_count: Option<usize>,
    #[arg(long, requires = "train_count")]
    val_count: Option<usize>,
}

#[derive(Args, Serialize)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainSsnetArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 45)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 15)]
    mining_interval: usize,
    #[arg(long, default_value_t = 0.5)]
    mining_threshold: f64,
    /// Stride between extracted 64×64 training patches.
    #[arg(long, default_value_t = 32)]
    patch_stride: usize,
    /// Skip the five-fold patch augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Trunk widths of the three convolution blocks.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    head_channels: usize,
    /// Checkpoint holding `features.<idx>` trunk weights to start from.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TrainCounterArgs {
    #[arg(long)]
    kind: String,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// tiny-cnn[:seed=N] or densenet121[:seed=N|:path=FILE]
    #[arg(long, default_value = "densenet121")]
    backbone: String,
    /// Segmenter checkpoint; required for gwap, ccpp and fusion.
    #[arg(long)]
    ssnet: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = DEFAULT_DROPOUT)]
    dropout: f64,
    #[arg(long)]
    no_augment: bool,
    /// Trained single-stream checkpoints to copy fusion streams from.
    #[arg(long, value_delimiter = ',')]
    warm_start: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for the report files; defaults to the manifest's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Segmenter to use instead of the one recorded in the checkpoint.
    #[arg(long)]
    ssnet: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SegmentArgs {
    /// Segmenter checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output prefix; writes `<prefix>.png` and `<prefix>.npy`.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth mask to score against.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args, Serialize)]
struct CountTileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CELL_PX)]
    cell: usize,
    /// Cell table to write.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (0 = all cores); output order never depends on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Table `row  col  truth` of per-cell ground truth.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = ZOOM19_METERS_PER_PIXEL)]
    meters_per_pixel: f64,
    #[arg(long)]
    ssnet: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    /// Cell table written by count-tile.
    #[arg(long)]
    cells: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Source image drawn under the overlay.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma-separated count ranges, e.g. 0,1-10,11-20,21-30,31-40,41+
    #[arg(long)]
    bins: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    opacity: f32,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::from(1)
        }
    }
}

/// Write `run-config.json` with the parsed command line into `dir`.
fn snapshot(cli: &Cli, dir: &Path, seed: Option<u64>) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let doc = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "argv": std::env::args().collect::<Vec<_>>(),
        "seed": seed,
        "config": cli,
    });
    let path = dir.join("run-config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            snapshot(cli, &a.out, Some(a.seed))?;
            synth(a)
        }
        Command::ValidateManifest(a) => validate(a),
        Command::TrainSsnet(a) => {
            snapshot(cli, &parent_dir(&a.out), Some(a.seed))?;
            train_ssnet(a)
        }
        Command::TrainCounter(a) => {
            snapshot(cli, &parent_dir(&a.out), Some(a.seed))?;
            train_count(a)
        }
        Command::Eval(a) => {
            let dir = a.out_dir.clone().unwrap_or_else(|| parent_dir(&a.manifest));
            snapshot(cli, &dir, None)?;
            eval(a, &dir)
        }
        Command::Segment(a) => {
            snapshot(cli, &parent_dir(&a.out), None)?;
            segment(a)
        }
        Command::CountTile(a) => {
            snapshot(cli, &parent_dir(&a.out), None)?;
            count(a)
        }
        Command::Render(a) => {
            snapshot(cli, &parent_dir(&a.out), None)?;
            render(a)
        }
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = CorpusSpec::new(a.n, (a.min_count, a.max_count), a.seed);
    spec.size_px = a.size;
    spec.density = a.density.as_deref().map(str::parse).transpose()?;
    if let (Some(train), Some(val)) = (a.train_count, a.val_count) {
        spec.split = SplitPolicy::Fixed { train, val };
    }
    let manifest = generate_corpus(&spec, &a.out)?;
    let count = |s| manifest.split(s).len();
    println!(
        "wrote {} scenes to {} (train {}, val {}, test {})",
        manifest.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn validate(a: &ValidateArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    manifest.validate_files()?;
    let masks = manifest.entries.iter().filter(|e| e.mask_path.is_some()).count();
    println!(
        "{}: {} entries, {masks} with masks (train {}, val {}, test {})",
        a.manifest.display(),
        manifest.len(),
        manifest.split(Split::Train).len(),
        manifest.split(Split::Val).len(),
        manifest.split(Split::Test).len()
    );
    Ok(())
}

fn masked_tiles(manifest: &Manifest) -> Result<Vec<structcount::dataset::ImageTile>> {
    (0..manifest.len())
        .filter(|&i| manifest.entries[i].mask_path.is_some())
        .map(|i| Ok(manifest.load_tile(i)?))
        .collect()
}

fn train_ssnet(a: &TrainSsnetArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let train = masked_tiles(&manifest.split(Split::Train))?;
    if train.is_empty() {
        bail!("no training entries with masks in {}", a.manifest.display());
    }
    let widths: [usize; 3] = a
        .widths
        .as_slice()
        .try_into()
        .context("--widths takes exactly three values")?;
    let config = if widths == SsNetConfig::default().widths && a.head_channels == SsNetConfig::default().head_channels {
        SsNetConfig::default()
    } else {
        SsNetConfig::slim(widths, a.head_channels)
    };
    let mut net = SsNet::<f32>::new(config, a.seed)?;
    if let Some(p) = &a.pretrained {
        net.load_pretrained_trunk(&structcount::checkpoint::Checkpoint::load(p)?)?;
    }
    let (mut patches, mut candidates) = (Vec::new(), Vec::new());
    for tile in &train {
        patches.extend(extract_patches(tile, a.patch_stride, PatchLabelRule::default())?);
        candidates.extend(mining_candidates(tile, 128, 64)?);
    }
    log::info!(
        "{} patches ({} built), {} mining candidates from {} tiles",
        patches.len(),
        patches.iter().filter(|p| p.label == structcount::ssnet::BUILT).count(),
        candidates.len(),
        train.len()
    );
    let cfg = SsNetTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        momentum: a.momentum,
        mining_interval: a.mining_interval,
        mining_threshold: a.mining_threshold,
        augment: !a.no_augment,
        seed: a.seed,
        ..Default::default()
    };
    let mut trainer = SsNetTrainer::new(net, &patches, &candidates, cfg)?;
    for _ in 0..a.epochs {
        let s = trainer.run_epoch()?;
        match s.mined {
            Some(m) => log::info!("epoch {}: loss {:.5}, mined {m} (pool {})", s.epoch, s.loss, s.pool_size),
            None => log::info!("epoch {}: loss {:.5}", s.epoch, s.loss),
        }
    }
    let (net, history, state) = trainer.into_parts();
    net.save(&a.out)?;
    let val = masked_tiles(&manifest.split(Split::Val))?;
    for tile in val.iter().take(50) {
        let m = segmentation_metrics(&net.segment(tile)?, tile.mask.as_ref().expect("masked"), 0.5)?;
        log::debug!("{}: accuracy {:.4}, F1 {:.4}", tile.id, m.pixel_accuracy, m.f1);
    }
    println!(
        "saved {} after {} epochs ({} mining rounds, final loss {:.5})",
        a.out.display(),
        history.len(),
        state.rounds,
        history.last().map_or(f64::NAN, |s| s.loss)
    );
    Ok(())
}

fn train_count(a: &TrainCounterArgs) -> Result<()> {
    let kind: CountKind = a.kind.parse()?;
    let spec: BackboneSpec = a.backbone.parse()?;
    let ssnet = match (&a.ssnet, kind.needs_ssnet()) {
        (None, true) => bail!("{kind} needs a segmentation network; pass --ssnet"),
        (Some(_), false) => bail!("drc does not use a segmentation network; drop --ssnet"),
        (Some(p), true) => Some(p),
        (None, false) => None,
    };
    let net = ssnet.map(|p| SsNet::<f32>::load(p).map(Arc::new)).transpose()?;
    let mut model = CountModel::with_options(kind, spec.build()?, net, a.seed, a.dropout, DEFAULT_CELL_PX)?;
    model.ssnet_ref = ssnet.map(SsNetRef::of_file).transpose()?;
    for p in &a.warm_start {
        let other = CountModel::load(p).with_context(|| format!("warm start from {}", p.display()))?;
        let n = model.heads.warm_start_from(&other.heads)?;
        log::info!("copied {n} stream(s) from {}", p.display());
    }
    let manifest = load_manifest(&a.manifest)?;
    let (train, val) = (manifest.split(Split::Train), manifest.split(Split::Val));
    if train.is_empty() {
        bail!("no training entries in {}", a.manifest.display());
    }
    let cfg = CounterTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        patience: a.patience,
        augment: !a.no_augment,
        warm_start: !a.warm_start.is_empty(),
        seed: a.seed,
        ..Default::default()
    };
    let history = train_counter(&mut model, &train, &val, &cfg)?;
    model.save(&a.out)?;
    println!(
        "saved {} ({kind}); best epoch {} of {}, val MAE {}",
        a.out.display(),
        history.best_epoch,
        history.train_loss.len(),
        history
            .val_mae
            .get(history.best_epoch.saturating_sub(1))
            .map_or("n/a".to_string(), |m| format!("{m:.3}"))
    );
    Ok(())
}

fn eval(a: &EvalArgs, dir: &Path) -> Result<()> {
    let model = CountModel::load_with(&a.model, a.ssnet.as_deref())?;
    let manifest = load_manifest(&a.manifest)?;
    let subset = match a.split.as_str() {
        "all" => manifest,
        s => manifest.split(s.parse::<Split>().map_err(anyhow::Error::msg)?),
    };
    if subset.is_empty() {
        bail!("no '{}' entries in {}", a.split, a.manifest.display());
    }
    let mut items = Vec::with_capacity(subset.len());
    for i in 0..subset.len() {
        let tile = subset.tile(i)?;
        let raw = model.predict(&tile)?.raw;
        items.push(Scored::new(tile.id, tile.count, raw));
    }
    let report = evaluate(&items)?;
    report.write(dir, "eval")?;
    evaluate_rounded(&items)?.write(dir, "eval-rounded")?;
    print!("{}", report.summary());
    Ok(())
}

fn segment(a: &SegmentArgs) -> Result<()> {
    let net = SsNet::<f32>::load(&a.model)?;
    let img = load_rgb(&a.image)?;
    let map = net.segment_rgb(&img)?;
    let png = a.out.with_extension("png");
    let npy = a.out.with_extension("npy");
    map.save_png(&png)?;
    map.save_npy(&npy)?;
    if let Some(m) = &a.mask {
        let truth = structcount::dataset::load_mask(m)?;
        let s = segmentation_metrics(&map, &truth, a.threshold)?;
        println!("pixel accuracy {:.4}, F1 {:.4}", s.pixel_accuracy, s.f1);
    }
    println!("wrote {} and {}", png.display(), npy.display());
    Ok(())
}

fn read_truths(path: &Path) -> Result<std::collections::BTreeMap<(usize, usize), u32>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if line.trim().is_empty() || line.starts_with('#') || f[0] == "row" {
            continue;
        }
        let parse = |s: &str| s.trim().parse::<usize>().with_context(|| format!("{}:{}: bad number '{s}'", path.display(), i + 1));
        if f.len() != 3 {
            bail!("{}:{}: expected 'row<TAB>col<TAB>truth'", path.display(), i + 1);
        }
        out.insert((parse(f[0])?, parse(f[1])?), parse(f[2])? as u32);
    }
    Ok(out)
}

fn count(a: &CountTileArgs) -> Result<()> {
    let model = CountModel::load_with(&a.model, a.ssnet.as_deref())?;
    let img = load_rgb(&a.image)?;
    let mut grid = count_tile(&model, &img, a.cell, a.workers, Some(a.meters_per_pixel))?;
    if let Some(p) = &a.truth {
        let truths = read_truths(p)?;
        grid.set_truths(|c| truths.get(&(c.row, c.col)).copied());
    }
    grid.write_tsv(&a.out)?;
    let padded = grid.cells.iter().filter(|c| c.padded).count();
    println!(
        "{} cells ({}×{}, {padded} padded), predicted total {}{}",
        grid.cells.len(),
        grid.rows,
        grid.cols,
        grid.predicted_total(),
        grid.truth_total().map_or(String::new(), |t| format!(", truth total {t}"))
    );
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let grid = CellGrid::read_tsv(&a.cells)?;
    let bins: Bins = match &a.bins {
        Some(s) => s.parse()?,
        None => Bins::default(),
    };
    let background = a.image.as_ref().map(load_rgb).transpose()?;
    let files = render_heatmap(&grid, &bins, background.as_ref(), a.opacity, &a.out)?;
    println!("wrote {} and {}", files.overlay.display(), files.table.display());
    if let (Some(t), Some(p)) = (&files.series_table, &files.series_plot) {
        println!("wrote {} and {}", t.display(), p.display());
    }
    Ok(())
}
