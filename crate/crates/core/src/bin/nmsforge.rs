use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use nmsforge::bench::{self, Ablation, InputSource, RunManifest, TimingOptions};
use nmsforge::config::NmsConfig;
use nmsforge::ingest::{write_dump, SyntheticSpec};
use nmsforge::{Engine, NmsError, Result};

#[derive(Parser)]
#[command(name = "nmsforge", version, about = "Compare greedy NMS with score-map max-pooling NMS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run manifest; built-in defaults when omitted.
    #[arg(long, short)]
    manifest: Option<PathBuf>,
    /// Detection dump (JSON lines); replaces the manifest input.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Seed for synthetic data and random assignment.
    #[arg(long, env = "NMSFORGE_SEED")]
    seed: Option<u64>,
}

impl Common {
    fn manifest(&self) -> Result<RunManifest> {
        let mut m = match &self.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        if let Some(d) = &self.dump {
            m.input = InputSource::Dump(d.clone());
        }
        if self.seed.is_some() {
            m.seed = self.seed;
        }
        Ok(m)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run engines over a dump and write overlap, AP and trace CSVs.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated engines (greedy, psrr, legacy-single, legacy-ratio, legacy-scale).
        #[arg(long, value_delimiter = ',')]
        engines: Option<Vec<Engine>>,
        /// Also write the per-stage sparsity trace.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Write dense score maps (before and after pooling) into this directory.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Time engines on synthetic scenes of increasing size.
    Timing {
        #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "greedy,psrr")]
        engines: Vec<Engine>,
        #[arg(long, default_value_t = 15)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        boxes_per_cluster: usize,
        /// Classes per scene; boxes are split across them.
        #[arg(long, default_value_t = 1)]
        classes: u32,
        /// Fan classes out over the thread pool (no build/pool split).
        #[arg(long)]
        parallel: bool,
        /// TOML file with engine settings (`NmsConfig` fields).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "NMSFORGE_SEED")]
        seed: Option<u64>,
        /// Summary CSV; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Per-repeat samples CSV.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Run one ablation grid (assignment, schedule, shift, recovery).
    Ablate {
        which: Ablation,
        #[command(flatten)]
        common: Common,
        /// CSV output; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic detection dump.
    Gen {
        #[arg(long, short)]
        out: PathBuf,
        /// TOML synthetic spec (`SyntheticSpec` fields).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        boxes: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        classes: Option<u32>,
        #[arg(long, env = "NMSFORGE_SEED")]
        seed: Option<u64>,
    },
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    toml::from_str(&fs::read_to_string(path)?)
        .map_err(|e| NmsError::InvalidConfig(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { common, engines, trace, out_dir, maps } => {
            let mut m = common.manifest()?;
            if let Some(e) = engines {
                m.engines = e;
            }
            m.trace |= trace;
            if let Some(d) = out_dir {
                m.outputs.dir = d;
            }
            if maps.is_some() {
                m.outputs.maps = maps;
            }
            let dump = m.load_input()?;
            info!("{} images, {} detections", dump.images.len(), dump.num_detections());
            let out = bench::run(&m, &dump)?;
            for p in bench::write_run_output(&m.outputs, &out)? {
                info!("wrote {}", p.display());
            }
        }
        Command::Timing { n, engines, repeats, warmup, boxes_per_cluster, classes, parallel, config, seed, out, samples } => {
            let mut opts = TimingOptions { n_list: n, engines, repeats, warmup, boxes_per_cluster, ..Default::default() };
            if let Some(p) = &config {
                opts.config = load_toml::<NmsConfig>(p)?;
            }
            opts.spec.n_classes = classes;
            opts.config.parallel |= parallel;
            if let Some(s) = seed {
                opts.spec.seed = s;
                opts.config.seed = s;
            }
            let report = bench::timing(&opts)?;
            let summary = report.summary_csv()?;
            if let Some(p) = &samples {
                fs::write(p, report.samples_csv()?)?;
            }
            emit(out.as_ref(), &summary)?;
        }
        Command::Ablate { which, common, out } => {
            let m = common.manifest()?;
            let dump = m.load_input()?;
            let rows = bench::ablate(which, &m, &dump)?;
            emit(out.as_ref(), &bench::ablation_csv(which, &rows)?)?;
        }
        Command::Gen { out, spec, scenes, boxes, clusters, classes, seed } => {
            let mut s = match &spec {
                Some(p) => load_toml::<SyntheticSpec>(p)?,
                None => SyntheticSpec::default(),
            };
            s.n_scenes = scenes.unwrap_or(s.n_scenes);
            s.boxes_per_scene = boxes.unwrap_or(s.boxes_per_scene);
            s.n_clusters = clusters.unwrap_or(s.n_clusters);
            s.n_classes = classes.unwrap_or(s.n_classes);
            s.seed = seed.unwrap_or(s.seed);
            let dump = nmsforge::ingest::generate_synthetic(&s, &NmsConfig::default())?;
            write_dump(&dump, &out)?;
            info!("wrote {} images to {}", dump.images.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
