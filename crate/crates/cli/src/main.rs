use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use resad_core::backbone::{check_fixture, ExpectedOutputs, ExportManifest, ModelSource};
use resad_core::evaluation::{render_csv, render_table, AblationRow};
use resad_core::pipeline::{default_grid, run_ablation, AblationVariant};
use resad_core::synth::{generate, SynthConfig};
use resad_core::{
    index_dataset, load_bank, save_bank, Error, EvalReport, Layout, Pipeline, PipelineConfig, PixelPooling, ResCMode,
};

#[derive(Parser, Debug)]
#[command(name = "resad", version, about = "Memory-bank anomaly detection for fundus images")]
struct Cli {
    /// TOML or JSON file with pipeline settings (flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract training features and write a compressed memory bank.
    Build {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Output bank file (`.rsft`; metadata goes to `.meta.json`).
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Score images against a bank and export heatmaps.
    Score {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Image files or directories of images.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate on the test split (building a bank first unless --bank is given).
    Eval {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// JSON list of ablation variants; evaluates each instead of a single run.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Run an ablation grid (default: training subsets and ReSC modules).
    Ablate {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// JSON list of ablation variants.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Validate an exported model against its manifest and parity fixtures.
    ExportModelCheck {
        #[arg(long)]
        model: PathBuf,
        /// Directory holding `fixture_*.rsft` (and usually `manifest.json`).
        #[arg(long)]
        fixture_dir: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the sorted dataset manifest as JSON lines.
    Index {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long, default_value = "generic")]
        layout: Layout,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset in the generic layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 14)]
        train_normal: usize,
        #[arg(long, default_value_t = 6)]
        test_normal: usize,
        #[arg(long, default_value_t = 10)]
        test_abnormal: usize,
        #[arg(long, default_value_t = 256)]
        size: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    /// ONNX backbone, or `builtin:color-pyramid`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    layout: Option<Layout>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    region_radius: Option<usize>,
    #[arg(long)]
    attention_block_rows: Option<usize>,
    #[arg(long)]
    disable_region: bool,
    #[arg(long)]
    disable_spatial: bool,
    #[arg(long)]
    disable_resc: bool,
    #[arg(long)]
    jl_eps: Option<f64>,
    #[arg(long)]
    projection_seed: Option<u64>,
    #[arg(long)]
    coreset_fraction: Option<f64>,
    /// Start the coreset at a seeded random row instead of row 0.
    #[arg(long)]
    coreset_seed: Option<u64>,
    #[arg(long)]
    train_subset: Option<f64>,
    #[arg(long)]
    smooth_sigma: Option<f32>,
    /// Fixed decision threshold (default: best balanced accuracy).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = parse_pooling)]
    pixel_pooling: Option<PixelPooling>,
    /// Leave normal test images out of pixel metrics.
    #[arg(long)]
    exclude_normal_pixels: bool,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ReportArgs {
    #[arg(long)]
    report_json: Option<PathBuf>,
    #[arg(long)]
    report_csv: Option<PathBuf>,
}

fn parse_pooling(s: &str) -> Result<PixelPooling, String> {
    match s {
        "global" => Ok(PixelPooling::Global),
        "per-image" => Ok(PixelPooling::PerImage),
        other => Err(format!("expected `global` or `per-image`, got `{other}`")),
    }
}

fn load_config_file(path: &Path) -> Result<PipelineConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Defaults, then the config file, then flags.
fn resolve(file: Option<&Path>, a: &PipelineArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match file {
        Some(p) => load_config_file(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field.clone() {
                cfg.$field = v.into();
            }
        )*};
    }
    set!(
        model,
        data_root,
        layout,
        side,
        region_radius,
        attention_block_rows,
        jl_eps,
        projection_seed,
        coreset_fraction,
        train_subset,
        smooth_sigma,
        pixel_pooling,
        workers
    );
    if a.coreset_seed.is_some() {
        cfg.coreset_seed = a.coreset_seed;
    }
    if a.threshold.is_some() {
        cfg.threshold = a.threshold;
    }
    if a.disable_resc || a.disable_region || a.disable_spatial {
        cfg.resc = ResCMode::from_flags(a.disable_resc, a.disable_region, a.disable_spatial)?;
    }
    if a.exclude_normal_pixels {
        cfg.pixel_include_normals = false;
    }
    if a.cache_dir.is_some() {
        cfg.cache_dir = a.cache_dir.clone();
    }
    if a.no_cache {
        cfg.cache_dir = None;
    } else if cfg.cache_dir.is_none() {
        cfg.cache_dir = default_cache_dir();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_cache_dir() -> Option<PathBuf> {
    if let Some(d) = std::env::var_os("RESAD_CACHE_DIR") {
        return Some(PathBuf::from(d));
    }
    std::env::var_os("XDG_CACHE_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache")))
        .map(|d| d.join("resad"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn dump_config(cfg: &PipelineConfig, dir: &Path) -> anyhow::Result<()> {
    write_json(&dir.join("resolved-config.json"), cfg)
}

fn dataset(cfg: &PipelineConfig) -> Result<resad_core::DatasetIndex, Error> {
    index_dataset(cfg.data_root()?, cfg.layout)
}

fn bank_path(flag: Option<PathBuf>, cfg: &PipelineConfig) -> anyhow::Result<PathBuf> {
    flag.or_else(|| cfg.bank.clone())
        .ok_or_else(|| Error::InvalidConfig("no bank path given (--bank)".into()).into())
}

fn expand_images(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn read_grid(path: &Path) -> anyhow::Result<Vec<AblationVariant>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let grid: Vec<AblationVariant> =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    if grid.is_empty() {
        return Err(Error::InvalidConfig(format!("{}: empty ablation grid", path.display())).into());
    }
    Ok(grid)
}

fn emit_rows(rows: &[AblationRow], report: &ReportArgs) -> anyhow::Result<()> {
    print!("{}", render_table(rows));
    if let Some(p) = &report.report_json {
        write_json(p, &serde_json::json!({ "rows": rows }))?;
    }
    if let Some(p) = &report.report_csv {
        std::fs::write(p, render_csv(rows)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn emit_report(name: &str, r: &EvalReport, report: &ReportArgs) -> anyhow::Result<()> {
    let rows = [AblationRow {
        name: name.to_string(),
        report: r.clone(),
    }];
    print!("{}", render_table(&rows));
    if let Some(p) = &report.report_json {
        write_json(p, r)?;
    }
    if let Some(p) = &report.report_csv {
        std::fs::write(p, render_csv(&rows)).with_context(|| format!("writing {}", p.display()))?;
    }
    if !r.skipped.is_empty() {
        eprintln!("skipped {} unreadable test image(s)", r.skipped.len());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Build { pipeline, bank } => {
            let cfg = resolve(file, &pipeline)?;
            let out = bank_path(bank, &cfg)?;
            let index = dataset(&cfg)?;
            let p = Pipeline::new(cfg)?;
            let (compressed, stats) = p.build_bank(&index)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            save_bank(&compressed, &out)?;
            dump_config(p.config(), out.parent().unwrap_or(Path::new(".")))?;
            println!(
                "bank {}: n={} m={} d={} channels={} covering_radius={:.6} (from {} images, grid {}×{})",
                out.display(),
                stats.source_rows,
                stats.rows,
                stats.projected_dim,
                stats.channels,
                stats.covering_radius,
                stats.train_images,
                stats.grid.0,
                stats.grid.1
            );
        }
        Command::Score {
            pipeline,
            bank,
            images,
            out_dir,
        } => {
            let cfg = resolve(file, &pipeline)?;
            let bank = bank_path(bank, &cfg)?;
            let out_dir = out_dir
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::InvalidConfig("no output directory given (--out-dir)".into()))?;
            let p = Pipeline::new(cfg)?;
            let compressed = load_bank(&bank, Some(&p.fingerprint()))?;
            let images = expand_images(&images)?;
            let records = p.score_images(&compressed, &images, &out_dir)?;
            let scores = out_dir.join("scores.jsonl");
            let mut w =
                BufWriter::new(File::create(&scores).with_context(|| format!("creating {}", scores.display()))?);
            for r in &records {
                serde_json::to_writer(&mut w, r)?;
                writeln!(w)?;
            }
            w.flush()?;
            dump_config(p.config(), &out_dir)?;
            let skipped = records.iter().filter(|r| r.error.is_some()).count();
            println!(
                "scored {} image(s), skipped {skipped}; scores in {}",
                records.len() - skipped,
                scores.display()
            );
        }
        Command::Eval {
            pipeline,
            bank,
            ablation,
            report,
        } => {
            let cfg = resolve(file, &pipeline)?;
            let index = dataset(&cfg)?;
            let p = Pipeline::new(cfg)?;
            if let Some(grid) = ablation {
                let rows = run_ablation(&p, &index, &read_grid(&grid)?)?;
                emit_rows(&rows, &report)?;
            } else {
                let bank = match bank.or_else(|| p.config().bank.clone()) {
                    Some(path) => load_bank(path, Some(&p.fingerprint()))?,
                    None => p.build_bank(&index)?.0,
                };
                let r = p.evaluate(&bank, &index)?;
                emit_report(p.config().resc.label(), &r, &report)?;
            }
        }
        Command::Ablate { pipeline, grid, report } => {
            let cfg = resolve(file, &pipeline)?;
            let index = dataset(&cfg)?;
            let p = Pipeline::new(cfg)?;
            let grid = match grid {
                Some(g) => read_grid(&g)?,
                None => default_grid(),
            };
            let rows = run_ablation(&p, &index, &grid)?;
            emit_rows(&rows, &report)?;
        }
        Command::ExportModelCheck {
            model,
            fixture_dir,
            manifest,
        } => {
            let manifest_path = manifest.or_else(|| {
                let guess = fixture_dir
                    .clone()
                    .unwrap_or_else(|| model.parent().unwrap_or(Path::new(".")).to_path_buf())
                    .join("manifest.json");
                guess.is_file().then_some(guess)
            });
            let mut expect = ExpectedOutputs::default();
            if let Some(mp) = &manifest_path {
                let m = ExportManifest::load(mp)?;
                m.validate()?;
                expect.side = m.input_shape.get(2).copied();
                expect.channels = Some((m.outputs["stage2"][1], m.outputs["stage3"][1]));
                println!("manifest {}: ok ({}, opset {})", mp.display(), m.architecture, m.opset);
            }
            let source = ModelSource::Onnx(model.clone());
            let backbone = source.open(expect.side.unwrap_or(224), expect.channels)?;
            let (c2, c3) = backbone.channels();
            println!("model {}: stage2 {c2} channels, stage3 {c3} channels", model.display());
            if let Some(dir) = fixture_dir {
                let report = check_fixture(backbone.as_ref(), &dir)?;
                println!(
                    "parity: max |Δ| stage2 {:.3e}, stage3 {:.3e} (tolerance {:.0e}) {}",
                    report.max_abs_err_stage2,
                    report.max_abs_err_stage3,
                    report.tolerance,
                    if report.passed() { "PASS" } else { "FAIL" }
                );
                if !report.passed() {
                    return Err(anyhow!("parity check failed"));
                }
            }
        }
        Command::Index { data_root, layout, out } => {
            let index = index_dataset(&data_root, layout)?;
            let c = index.counts();
            match out {
                Some(path) => {
                    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    index.write_jsonl(BufWriter::new(f))?;
                }
                None => index.write_jsonl(std::io::stdout().lock())?,
            }
            eprintln!(
                "train normal {}, test normal {}, test abnormal {}",
                c.train_normal, c.test_normal, c.test_abnormal
            );
        }
        Command::Synth {
            out,
            train_normal,
            test_normal,
            test_abnormal,
            size,
            seed,
        } => {
            let s = generate(
                &out,
                &SynthConfig {
                    train_normal,
                    test_normal,
                    test_abnormal,
                    size,
                    seed,
                },
            )?;
            println!(
                "wrote {} images and {} masks under {}",
                s.images.len(),
                s.masks.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
