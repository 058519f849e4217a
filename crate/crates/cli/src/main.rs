//! `vitfeat`: co-segmentation, part co-segmentation, correspondence,
//! evaluation and PCA over directories of VITD descriptor files.
//!
//! Settings resolve as built-in defaults < `--config` TOML (or
//! `--from-report`) < command-line flags. Exit codes: 0 success, 2 bad
//! input, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use vitfeat::binning::BinningConfig;
use vitfeat::cosegmentation::VoteMode;
use vitfeat::pipeline::{
    self, CosegConfig, EvalConfig, MatchConfig, PartsConfig, PcaConfig, Selection,
};
use vitfeat::Facet;

#[derive(Parser)]
#[command(name = "vitfeat", version, about = "Zero-shot segmentation and matching from ViT descriptors")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Common-foreground masks for a set of images.
    Coseg(CosegArgs),
    /// Part masks shared across a set of images.
    Parts(PartsArgs),
    /// Best-buddy correspondences or keypoint transfer between two images.
    Match(MatchArgs),
    /// Score predictions listed in a manifest.
    Eval(EvalArgs),
    /// Joint PCA of descriptors with per-image component maps.
    Pca(PcaArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML file with [coseg], [parts], [match], [eval] or [pca] tables.
    #[arg(long, conflicts_with = "from_report")]
    config: Option<PathBuf>,
    /// Reuse the configuration recorded in an earlier report.json.
    #[arg(long)]
    from_report: Option<PathBuf>,
}

#[derive(Args)]
struct SelectionArgs {
    #[arg(long)]
    layer: Option<u32>,
    #[arg(long)]
    facet: Option<Facet>,
    /// Require this stride.
    #[arg(long)]
    stride: Option<u32>,
}

impl SelectionArgs {
    fn apply(&self, sel: &mut Selection) {
        if let Some(l) = self.layer {
            sel.layer = l;
        }
        if let Some(f) = self.facet {
            sel.facet = f;
        }
        if self.stride.is_some() {
            sel.stride = self.stride;
        }
    }
}

#[derive(Args)]
struct CosegArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    clustering: ClusteringArgs,
}

#[derive(Args)]
struct ClusteringArgs {
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Directory with `{image_id}.png|jpg` (default: the input directory).
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Fixed cluster count instead of the elbow rule.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    vote_fraction: Option<f64>,
    #[arg(long, value_parser = parse_vote_mode)]
    vote_mode: Option<VoteMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Keep the upsampled patch masks as they are.
    #[arg(long)]
    no_refine: bool,
}

fn parse_vote_mode(s: &str) -> Result<VoteMode, String> {
    match s {
        "per_image" | "per-image" => Ok(VoteMode::PerImage),
        "summed" => Ok(VoteMode::Summed),
        _ => Err(format!("expected per_image or summed, got {s:?}")),
    }
}

impl ClusteringArgs {
    fn apply(&self, cfg: &mut CosegConfig) {
        if let Some(d) = &self.input_dir {
            cfg.input_dir = d.clone();
        }
        if self.image_dir.is_some() {
            cfg.image_dir = self.image_dir.clone();
        }
        self.selection.apply(&mut cfg.selection);
        if self.k.is_some() {
            cfg.k = self.k;
        }
        if let Some(t) = self.tau {
            cfg.voting.tau = t;
        }
        if let Some(f) = self.vote_fraction {
            cfg.voting.vote_fraction = f;
        }
        if let Some(m) = self.vote_mode {
            cfg.voting.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.kmeans.seed = s;
        }
        if let Some(r) = self.restarts {
            cfg.kmeans.restarts = r;
        }
        if self.no_refine {
            cfg.refine = false;
        }
    }
}

#[derive(Args)]
struct PartsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    clustering: ClusteringArgs,
    #[arg(long)]
    num_parts: Option<usize>,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    common: Common,
    /// Source image id (with --input-dir) or VITD path.
    #[arg(long)]
    source: Option<String>,
    /// Target image id (with --input-dir) or VITD path.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[command(flatten)]
    selection: SelectionArgs,
    /// JSON array of `[y, x]` source keypoints to transfer.
    #[arg(long)]
    keypoints: Option<PathBuf>,
    /// Log-binning levels; 0 disables binning.
    #[arg(long)]
    bins: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    /// PCK threshold as a fraction of the larger image side.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct PcaArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long)]
    n_components: Option<usize>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    coseg: Option<CosegConfig>,
    parts: Option<PartsTable>,
    #[serde(rename = "match")]
    matching: Option<MatchConfig>,
    eval: Option<EvalConfig>,
    pca: Option<PcaConfig>,
}

/// `[parts]` only adds the part count; clustering comes from `[coseg]`.
#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct PartsTable {
    num_parts: Option<usize>,
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())).into())
}

/// Bad input detected by the front end itself.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Starting configuration before flags: a report, a config table or defaults.
fn base_config<C: Default + serde::de::DeserializeOwned>(
    common: &Common,
    command: &str,
    table: impl FnOnce(FileConfig) -> Option<C>,
) -> Result<C> {
    if let Some(r) = &common.from_report {
        return Ok(pipeline::config_from_report(r, command)?);
    }
    match &common.config {
        Some(p) => Ok(table(read_file_config(p)?).unwrap_or_default()),
        None => Ok(C::default()),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(InputError(format!("{what} is required")).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Coseg(a) => {
            let mut cfg: CosegConfig = base_config(&a.common, "coseg", |f| f.coseg)?;
            a.clustering.apply(&mut cfg);
            require(&cfg.input_dir, "--input-dir")?;
            let r = pipeline::run_coseg(&cfg, &a.common.out_dir)?;
            println!(
                "coseg: {} images, k = {}, foreground clusters {:?} -> {}",
                r.num_images,
                r.clustering.k,
                r.clustering.fg_clusters,
                a.common.out_dir.display()
            );
        }
        Command::Parts(a) => {
            let mut cfg: PartsConfig = if a.common.from_report.is_some() {
                base_config(&a.common, "parts", |_| None)?
            } else {
                let file = a.common.config.as_deref().map(read_file_config).transpose()?.unwrap_or_default();
                let mut cfg = PartsConfig {
                    coseg: file.coseg.unwrap_or_default(),
                    ..PartsConfig::default()
                };
                if let Some(n) = file.parts.and_then(|p| p.num_parts) {
                    cfg.num_parts = n;
                }
                cfg
            };
            a.clustering.apply(&mut cfg.coseg);
            if let Some(n) = a.num_parts {
                cfg.num_parts = n;
            }
            require(&cfg.coseg.input_dir, "--input-dir")?;
            let r = pipeline::run_parts(&cfg, &a.common.out_dir)?;
            println!(
                "parts: {} images, {} parts -> {}",
                r.num_images,
                cfg.num_parts,
                a.common.out_dir.display()
            );
        }
        Command::Match(a) => {
            let mut cfg: MatchConfig = base_config(&a.common, "match", |f| f.matching)?;
            if let Some(s) = a.source {
                cfg.source = s;
            }
            if let Some(t) = a.target {
                cfg.target = t;
            }
            if a.input_dir.is_some() {
                cfg.input_dir = a.input_dir;
            }
            if a.image_dir.is_some() {
                cfg.image_dir = a.image_dir;
            }
            a.selection.apply(&mut cfg.selection);
            if a.keypoints.is_some() {
                cfg.keypoints = a.keypoints;
            }
            if let Some(levels) = a.bins {
                cfg.binning = BinningConfig {
                    levels,
                    ..cfg.binning
                };
            }
            if cfg.source.is_empty() || cfg.target.is_empty() {
                bail!(InputError("--source and --target are required".into()));
            }
            let r = pipeline::run_match(&cfg, &a.common.out_dir)?;
            println!(
                "match: {} -> {}: {} matches -> {}",
                r.source_id,
                r.target_id,
                r.num_matches,
                a.common.out_dir.join("matches.jsonl").display()
            );
        }
        Command::Eval(a) => {
            let mut cfg: EvalConfig = base_config(&a.common, "eval", |f| f.eval)?;
            if let Some(m) = a.manifest {
                cfg.manifest = m;
            }
            if let Some(p) = a.pred_dir {
                cfg.pred_dir = p;
            }
            if let Some(g) = a.gt_dir {
                cfg.gt_dir = g;
            }
            if let Some(al) = a.alpha {
                cfg.alpha = al;
            }
            require(&cfg.manifest, "--manifest")?;
            let r = pipeline::run_eval(&cfg, &a.common.out_dir)?;
            if let Some(c) = &r.coseg {
                println!("coseg: jaccard {:.4} precision {:.4}", c.jaccard, c.precision);
            }
            if let Some(p) = &r.parts {
                println!(
                    "parts: nmi {:.4} ari {:.4} (fg nmi {:.4} ari {:.4})",
                    p.all.nmi, p.all.ari, p.foreground.nmi, p.foreground.ari
                );
            }
            if let Some(k) = &r.keypoints {
                println!("pck@{}: {:.2}", k.alpha, k.pck);
            }
            if let Some(l) = &r.landmarks {
                println!("landmark error: {:.4}", l.error);
            }
        }
        Command::Pca(a) => {
            let mut cfg: PcaConfig = base_config(&a.common, "pca", |f| f.pca)?;
            if let Some(d) = a.input_dir {
                cfg.input_dir = d;
            }
            a.selection.apply(&mut cfg.selection);
            if let Some(n) = a.n_components {
                cfg.n_components = n;
            }
            require(&cfg.input_dir, "--input-dir")?;
            let r = pipeline::run_pca(&cfg, &a.common.out_dir)?;
            println!(
                "pca: {} images, explained variance {:?}{}",
                r.num_images,
                r.explained_variance,
                if r.degenerate { " (degenerate)" } else { "" }
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<vitfeat::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
