use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use rapnet::anchors::AnchorSet;
use rapnet::data::{
    read_proposals, synth_dataset, write_proposals, Annotations, Dataset, Split, SynthConfig, ANNOTATION_FILE,
};
use rapnet::eval::{build_curve, DatasetStyle};
use rapnet::exec::Execution;
use rapnet::network::NetworkConfig;
use rapnet::pipeline::{propose, Model, ModelSpec, PostprocessConfig};
use rapnet::postprocess::RankerConfig;
use rapnet::train::{base_auc, train, write_train_log, TrainConfig};

#[derive(Parser)]
#[command(
    name = "rapnet",
    version,
    about = "Relation-aware pyramid network for temporal action proposals"
)]
struct Cli {
    /// JSON file with optional "network", "train", "ranker" and "postprocess" sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature dataset with planted segments.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        num_videos: usize,
        #[arg(long, default_value_t = 64)]
        t: usize,
        #[arg(long, default_value_t = 16)]
        c: usize,
        #[arg(long, default_value_t = 0.3)]
        difficulty: f64,
    },
    /// Cluster training-split segment widths into N x M anchor widths.
    ClusterAnchors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        arch: ArchFlags,
    },
    /// Train the network and the ranker; writes a checkpoint, its spec and a loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (defaults to the checkpoint path with a `.log.csv` suffix).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        arch: ArchFlags,
    },
    /// Generate proposals for one split.
    Propose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_adjust: bool,
        #[arg(long)]
        no_rank: bool,
    },
    /// AR@AN curve and AUC of a proposal CSV.
    Eval {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, value_enum, default_value_t = Style::Anet)]
        style: Style,
        /// Curve JSON output; the summary table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Copy)]
struct ArchFlags {
    #[arg(long)]
    no_ram: bool,
    #[arg(long)]
    raw_affinity: bool,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    anchors_per_cell: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    /// tIoU 0.50:0.05:0.95
    Anet,
    /// tIoU 0.50:0.05:0.90
    AnetNarrow,
    /// tIoU 0.50:0.05:1.00
    Thumos,
}

impl From<Style> for DatasetStyle {
    fn from(s: Style) -> Self {
        match s {
            Style::Anet => DatasetStyle::Anet,
            Style::AnetNarrow => DatasetStyle::AnetNarrow,
            Style::Thumos => DatasetStyle::Thumos,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    network: Option<NetworkConfig>,
    /// Defaults to the desk preset.
    train: Option<TrainConfig>,
    ranker: Option<RankerConfig>,
    postprocess: Option<PostprocessConfig>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let f = File::open(p).with_context(|| format!("opening config {}", p.display()))?;
                serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    fn network(&self, flags: ArchFlags) -> NetworkConfig {
        let mut n = self.network.unwrap_or_else(NetworkConfig::desk);
        if flags.no_ram {
            n.use_ram = false;
        }
        if flags.raw_affinity {
            n.raw_affinity = true;
        }
        if let Some(d) = flags.depth {
            n.depth = d;
        }
        if let Some(m) = flags.anchors_per_cell {
            n.anchors_per_cell = m;
        }
        n
    }

    fn ranker(&self, flags: ArchFlags) -> RankerConfig {
        let mut r = self.ranker.unwrap_or_default();
        if flags.no_ram {
            r.use_ram = false;
        }
        r
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };

    match cli.command {
        Command::SynthData {
            out,
            num_videos,
            t,
            c,
            difficulty,
        } => {
            let synth = SynthConfig {
                num_videos,
                t,
                c,
                seed: cli.seed.unwrap_or(0),
                difficulty,
            };
            let data = synth_dataset(&synth)?;
            data.save(&out)?;
            info!("wrote {} videos to {}", data.videos.len(), out.display());
        }
        Command::ClusterAnchors { data, out, arch } => {
            let net = cfg.network(arch);
            let ann = Annotations::load(&data.join(ANNOTATION_FILE))?;
            let widths = ann.widths(Some(Split::Train))?;
            let anchors = AnchorSet::fit(&widths, net.depth, net.anchors_per_cell, cli.seed.unwrap_or(0))?;
            anchors.save(&out)?;
            info!(
                "{} widths -> {}x{} anchors",
                widths.len(),
                net.depth,
                net.anchors_per_cell
            );
        }
        Command::Train {
            data,
            anchors,
            out,
            log,
            epochs,
            arch,
        } => {
            let network = cfg.network(arch);
            let anchors = AnchorSet::load(&anchors)?;
            let mut tcfg = cfg.train.clone().unwrap_or_else(TrainConfig::desk);
            if let Some(s) = cli.seed {
                tcfg.seed = s;
            }
            if let Some(e) = epochs {
                tcfg.epochs = e;
                tcfg.warmup_epochs = tcfg.warmup_epochs.min(e.saturating_sub(1));
            }
            let dataset = Dataset::load(&data, network.t)?;
            let spec = ModelSpec {
                network,
                anchors,
                ranker: cfg.ranker(arch),
            };
            let model = Model::init(spec, tcfg.seed)?;
            let train_set = dataset.split(Split::Train);
            let val_set = dataset.split(Split::Val);
            if !val_set.is_empty() {
                info!("untrained val AUC {:.2}", base_auc(&model, &val_set, exec)?);
            }
            let outcome = train(model, &train_set, &val_set, &tcfg, exec)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            outcome.model.save(&out)?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log.csv"));
            write_train_log(&outcome.log, BufWriter::new(File::create(&log_path)?))?;
            if let Some(auc) = outcome.val_auc.get(outcome.best_epoch) {
                info!("kept epoch {} (val AUC {auc:.2})", outcome.best_epoch + 1);
            }
            info!("wrote {} and {}", out.display(), log_path.display());
        }
        Command::Propose {
            model,
            data,
            split,
            out,
            no_adjust,
            no_rank,
        } => {
            let model = Model::load(&model)?;
            let mut pp = cfg.postprocess.clone().unwrap_or_default();
            pp.adjust &= !no_adjust;
            pp.rank &= !no_rank;
            if pp.rank && !model.has_ranker() {
                bail!("checkpoint has no ranker; pass --no-rank");
            }
            let dataset = Dataset::load(&data, model.spec.network.t)?;
            let props = propose(&model, &dataset.split(split), &pp, exec)?;
            let mut w = BufWriter::new(File::create(&out)?);
            write_proposals(&props, &mut w)?;
            w.flush()?;
            info!("wrote proposals for {} videos to {}", props.len(), out.display());
        }
        Command::Eval {
            proposals,
            annotations,
            split,
            style,
            out,
        } => {
            let props = read_proposals(BufReader::new(File::open(&proposals)?))?;
            let gts = Annotations::load(&annotations)?.ground_truth(Some(split))?;
            let curve = build_curve(&props, &gts, style.into(), exec)?;
            if let Some(path) = out {
                let mut w = BufWriter::new(File::create(&path)?);
                serde_json::to_writer_pretty(&mut w, &curve.to_json())?;
                w.write_all(b"\n")?;
            }
            print!("{}", curve.table());
        }
    }
    Ok(())
}
