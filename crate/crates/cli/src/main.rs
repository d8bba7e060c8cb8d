use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cellsynth::dataset::{self, DatasetManifest, Split, BASELINE_NAME};
use cellsynth::pipeline::{self, PipelineConfig, Run};
use cellsynth::survey::ResponseLog;
use cellsynth::{eval, fid, patchify, Image};
use cellsynth_cli::server::{router, SurveyState};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cellsynth", version, about = "Synthetic brightfield cell images and detector experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run directory holding every artifact of one experiment.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// TOML config; defaults to the run's config.toml, or built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set diffusion.epochs=5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn open(&self) -> Result<Run> {
        let existing = self.run_dir.join("config.toml");
        let run = match &self.config {
            Some(path) => Run::create(&self.run_dir, PipelineConfig::load(path, &self.overrides)?)?,
            None if existing.exists() => Run::open(&self.run_dir, &self.overrides)?,
            None => Run::create(&self.run_dir, PipelineConfig::parse("", &self.overrides)?)?,
        };
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom brightfield/fluorescence pairs.
    PhantomGen(RunArgs),
    /// Tile images into patches and screen out well-edge artifacts.
    Patchify {
        /// Source images (PGM).
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        patch_size: usize,
        #[arg(long, default_value_t = patchify::DEFAULT_DARK_THRESH)]
        dark_thresh: f64,
        #[arg(long, default_value_t = patchify::DEFAULT_AREA_FRAC)]
        area_frac: f64,
        /// Keep this many unflagged patches (all of them when omitted).
        #[arg(long)]
        keep: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label phantoms from their fluorescence channel, or synthetic images
    /// with the baseline detector.
    Autolabel {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        synthetic: bool,
    },
    /// Assign labeled phantoms to train/val/test.
    Split(RunArgs),
    /// Train the diffusion model and select a checkpoint by FID.
    TrainDiffusion(RunArgs),
    /// Generate synthetic images from the selected checkpoint.
    Sample(RunArgs),
    /// FID between two directories of PGM images.
    Fid { dir_a: PathBuf, dir_b: PathBuf },
    /// Build the replacement and addition datasets.
    Mix(RunArgs),
    /// Train the detector on one dataset, or all seven.
    TrainDetector {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, conflicts_with = "all")]
        dataset: Option<String>,
        #[arg(long)]
        all: bool,
    },
    /// Evaluate detectors on the test split, or compare two manifests.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, conflicts_with = "all")]
        dataset: Option<String>,
        #[arg(long)]
        all: bool,
        /// Prediction manifest (with scores); requires --gt.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
    },
    /// Serve the realism survey over HTTP.
    SurveyServe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Seed of the session handed out when none is requested.
        #[arg(long, default_value_t = 0)]
        session_seed: u64,
    },
    /// Collect evaluated metrics into one table.
    Report(RunArgs),
    /// Every stage in order.
    Run(RunArgs),
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    out.sort();
    Ok(out)
}

fn load_dir(dir: &Path) -> Result<Vec<Image>> {
    pgm_files(dir)?.iter().map(|p| Ok(Image::load_pgm(p)?)).collect()
}

fn datasets(dataset: &Option<String>, all: bool) -> Result<Vec<String>> {
    match (dataset, all) {
        (Some(d), _) => Ok(vec![d.clone()]),
        (None, true) => Ok(dataset::experiment_names()),
        (None, false) => bail!("pass --dataset NAME or --all"),
    }
}

fn print_rows(rows: &[(String, eval::EvalResult)]) {
    print!("{}", pipeline::report_table(rows));
}

fn patchify_cmd(
    images: &[PathBuf],
    out: &Path,
    patch_size: usize,
    dark_thresh: f64,
    area_frac: f64,
    keep: Option<usize>,
    seed: u64,
) -> Result<()> {
    let mut screened = Vec::new();
    for path in images {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let img = Image::load_pgm(path)?;
        screened.extend(patchify::screen(patchify::extract_patches(&id, &img, patch_size)?, dark_thresh, area_frac));
    }
    fs::create_dir_all(out)?;
    let mut listing = String::from("# source_id\toffset_x\toffset_y\tflagged\tscore\n");
    for p in &screened {
        listing.push_str(&patchify::manifest_line(p));
        listing.push('\n');
    }
    fs::write(out.join("patches.txt"), listing)?;
    let keep = keep.unwrap_or_else(|| screened.iter().filter(|p| !p.flagged).count());
    let kept = patchify::sample_filtered(&screened, keep, seed)?;
    for p in &kept {
        let name = format!("{}_{}_{}.pgm", p.source_id, p.offset.0, p.offset.1);
        p.patch.save_pgm(&out.join(name))?;
    }
    let flagged = screened.iter().filter(|p| p.flagged).count();
    println!("{} patches, {flagged} flagged, {} written", screened.len(), kept.len());
    Ok(())
}

fn evaluate_manifests(pred: &Path, gt: &Path) -> Result<()> {
    let p = DatasetManifest::load(pred)?;
    let g = DatasetManifest::load(gt)?;
    let collect = |m: &DatasetManifest| -> BTreeMap<String, Vec<cellsynth::BBox>> {
        m.records.iter().map(|r| (r.image_ref.clone(), r.boxes.clone())).collect()
    };
    let result = eval::map_suite(&collect(&p), &collect(&g))?;
    print_rows(&[(p.name.clone(), result)]);
    Ok(())
}

async fn serve(run: Run, addr: SocketAddr, session_seed: u64) -> Result<()> {
    let synthetic = pgm_files(&run.path("synthetic"))?;
    let base = run.load_manifest(BASELINE_NAME)?;
    let base_path = run.manifest_path(BASELINE_NAME);
    let real: Vec<PathBuf> = base
        .split_records(Split::Test)
        .map(|r| DatasetManifest::resolve(&base_path, &r.image_ref))
        .collect();
    let log = ResponseLog::new(run.path("survey/responses.csv"));
    let state = Arc::new(SurveyState::new(synthetic, real, log, session_seed));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("survey listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::PhantomGen(a) => {
            let m = a.open()?.phantom_gen()?;
            println!("{} phantoms", m.records.len());
        }
        Command::Patchify { images, out, patch_size, dark_thresh, area_frac, keep, seed } => {
            patchify_cmd(&images, &out, patch_size, dark_thresh, area_frac, keep, seed)?
        }
        Command::Autolabel { run, synthetic } => {
            let run = run.open()?;
            let m = if synthetic { run.label_synthetic()? } else { run.autolabel()? };
            let boxes: usize = m.records.iter().map(|r| r.boxes.len()).sum();
            println!("{}: {} images, {boxes} boxes", m.name, m.records.len());
        }
        Command::Split(a) => println!("{}", a.open()?.split()?.counts()),
        Command::TrainDiffusion(a) => {
            let run = a.open()?;
            let out = run.train_diffusion()?;
            println!("initial FID {:.6}", out.initial_fid);
            for p in &out.fid_curve {
                println!("epoch {:>4} FID {:.6}", p.epoch, p.fid);
            }
            println!("selected epoch {}", run.selected_epoch()?);
        }
        Command::Sample(a) => {
            for b in a.open()?.sample()? {
                println!("batch {:>3}: {} images, {} steps", b.batch, b.size, b.steps);
            }
        }
        Command::Fid { dir_a, dir_b } => {
            println!("{:.6}", fid::fid(&load_dir(&dir_a)?, &load_dir(&dir_b)?)?);
        }
        Command::Mix(a) => {
            for m in a.open()?.mix()? {
                println!("{}: {}", m.name, m.counts());
            }
        }
        Command::TrainDetector { run, dataset, all } => {
            let run = run.open()?;
            for name in datasets(&dataset, all)? {
                let out = run.train_detector(&name)?;
                println!("{name}: best epoch {} of {}", out.best_epoch, out.epochs_run);
            }
        }
        Command::Evaluate { run, dataset, all, pred, gt } => {
            if let (Some(pred), Some(gt)) = (pred, gt) {
                evaluate_manifests(&pred, &gt)?;
            } else {
                let run = run.open()?;
                let rows = datasets(&dataset, all)?
                    .into_iter()
                    .map(|n| Ok((n.clone(), run.evaluate(&n)?)))
                    .collect::<Result<Vec<_>>>()?;
                print_rows(&rows);
            }
        }
        Command::SurveyServe { run, addr, session_seed } => {
            let run = run.open()?;
            tokio::runtime::Runtime::new()?.block_on(serve(run, addr, session_seed))?;
        }
        Command::Report(a) => print_rows(&a.open()?.report()?),
        Command::Run(a) => print_rows(&a.open()?.run_all()?),
    }
    Ok(())
}
