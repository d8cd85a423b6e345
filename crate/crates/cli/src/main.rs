use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vidfuse::bench;
use vidfuse::config::{FusionConfig, Variant};
use vidfuse::flow::FlowConfig;
use vidfuse::io;
use vidfuse::mdim::KvMode;
use vidfuse::metrics;
use vidfuse::pipeline::{self, FlowPair, FusionModel, TrainingSet};
use vidfuse::synth::{self, SceneSpec};
use vidfuse::{Error, Result};

/// Motion-aware infrared/visible video fusion.
#[derive(Parser, Debug)]
#[command(name = "vidfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired sequence with ground-truth flow and masks.
    Synth {
        /// Scene description file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train fusion weights on `<data>/ir` and `<data>/vis`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to the weights path with a `.loss.csv` extension.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Write all-zero weights without training.
        #[arg(long)]
        zero_init: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fuse aligned infrared and visible frame directories.
    Fuse {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of `fwd_XXXX.flo` / `bwd_XXXX.flo`; estimated from visible frames when omitted.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Frames fused concurrently; output does not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a fused sequence against its sources.
    Metrics {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention cost table and per-stage resolution scaling.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 256)]
        k_max: usize,
        #[arg(long, default_value = "all_patches")]
        kv_mode: String,
        /// Model configuration for the scaling table.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant identically and tabulate their metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variants; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Config keys settable from the command line; these win over the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    k_max: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    kv_mode: Option<String>,
    #[arg(long)]
    gate_theta: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    crop: Option<String>,
    #[arg(long)]
    batch: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("tau", &self.tau),
            ("patch", &self.patch),
            ("k_max", &self.k_max),
            ("channels", &self.channels),
            ("gamma", &self.gamma),
            ("variant", &self.variant),
            ("kv_mode", &self.kv_mode),
            ("gate_theta", &self.gate_theta),
            ("seed", &self.seed),
            ("lr", &self.lr),
            ("iters", &self.iters),
            ("crop", &self.crop),
            ("batch", &self.batch),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

/// Defaults, then the config file, then flags.
fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<FusionConfig> {
    let mut cfg = match path {
        Some(p) => io::read_config(p)?,
        None => FusionConfig::default(),
    };
    for (k, v) in overrides.pairs() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(cfg: &FusionConfig) {
    println!("resolved config:");
    print!("{}", cfg.to_text());
}

fn read_pair(ir: &Path, vis: &Path) -> Result<(Vec<vidfuse::Tensor32>, Vec<vidfuse::Tensor32>)> {
    let ir = io::read_frame_dir(ir)?;
    let vis = io::read_frame_dir(vis)?;
    if ir.len() != vis.len() {
        return Err(Error::InvalidArgument(format!(
            "{} infrared frames but {} visible frames",
            ir.len(),
            vis.len()
        )));
    }
    if let (Some(a), Some(b)) = (ir.first(), vis.first()) {
        if a.shape() != b.shape() {
            return Err(Error::InvalidArgument(format!(
                "infrared frames are {:?}, visible frames are {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok((ir, vis))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let mut s = match &spec {
                Some(p) => SceneSpec::parse(&io::read_text(p)?, p)?,
                None => SceneSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            s.validate()?;
            println!("resolved scene:");
            print!("{}", s.to_text());
            let video = synth::generate(&s)?;
            video.write(&out)?;
            println!("wrote {} frames to {}", video.frame_count(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            loss_csv,
            zero_init,
            overrides,
        } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            print_config(&cfg);
            let loss_path = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            let (model, losses) = if zero_init {
                (FusionModel::<f32>::zeros(cfg.channels, cfg.patch), Vec::new())
            } else {
                let (ir, vis) = read_pair(&data.join("ir"), &data.join("vis"))?;
                let set = TrainingSet::new(ir, vis)?;
                pipeline::train(&cfg, &set, |i, l| {
                    if (i + 1) % 100 == 0 || i + 1 == cfg.iters {
                        println!("iter {:>6}  loss {l:.6}", i + 1);
                    }
                })?
            };
            io::save_weights(&out, &model.to_store())?;
            io::write_text(&loss_path, &pipeline::loss_curve_csv(&cfg, &losses))?;
            println!("wrote {} and {}", out.display(), loss_path.display());
        }
        Command::Fuse {
            ir,
            vis,
            weights,
            out,
            flow,
            config,
            jobs,
            overrides,
        } => {
            let model = FusionModel::<f32>::from_store(&io::load_weights(&weights)?)?;
            let mut cfg = resolve_config(config.as_deref(), &overrides)?;
            if config.is_none() && overrides.channels.is_none() && overrides.patch.is_none() {
                cfg.channels = model.channels;
                cfg.patch = model.patch;
            }
            print_config(&cfg);
            let (ir, vis) = read_pair(&ir, &vis)?;
            let (h, w) = ir.first().ok_or_else(|| Error::InvalidArgument("no input frames".into()))?.hw()?;
            let flows = match &flow {
                Some(dir) => {
                    let (fwd, bwd) = io::read_flow_dir(dir, ir.len(), w, h)?;
                    Some(fwd.into_iter().zip(bwd).map(|(next, prev)| FlowPair { prev, next }).collect::<Vec<_>>())
                }
                None => None,
            };
            let fused = pipeline::fuse_sequence(&model, &cfg, &ir, &vis, flows.as_deref(), jobs)?;
            io::write_frame_dir(&out, &fused)?;
            println!("wrote {} fused frames to {}", fused.len(), out.display());
        }
        Command::Metrics { fused, ir, vis, out } => {
            let f = io::read_frame_dir(&fused)?;
            let (ir, vis) = read_pair(&ir, &vis)?;
            if f.len() != ir.len() {
                return Err(Error::InvalidArgument(format!(
                    "{}: {} fused frames for {} source frames",
                    fused.display(),
                    f.len(),
                    ir.len()
                )));
            }
            let report = metrics::report(&f, &ir, &vis, &FlowConfig::default())?;
            io::write_text(&out, &report.to_csv())?;
            for s in &report.series {
                println!("{:<12} {:.6}", s.name, s.mean());
            }
        }
        Command::Bench {
            n_list,
            tau,
            d,
            k_max,
            kv_mode,
            config,
            out,
        } => {
            let mode = KvMode::parse(&kv_mode).ok_or_else(|| Error::InvalidArgument(format!("unknown kv_mode `{kv_mode}`")))?;
            let cfg = resolve_config(config.as_deref(), &Overrides::default())?;
            print_config(&cfg);
            println!("bench: n_list={n_list:?} tau={tau} d={d} k_max={k_max} kv_mode={}", mode.name());
            if !(tau > 0.0 && tau <= 1.0) || d == 0 || k_max == 0 || n_list.is_empty() || n_list.contains(&0) {
                return Err(Error::InvalidArgument("need tau in (0, 1], d ≥ 1, k_max ≥ 1 and positive N values".into()));
            }
            let rows = bench::attention_table(&n_list, tau, k_max, d, mode)?;
            for r in &rows {
                let (s, dn) = bench::time_sparse_dense(r.n, r.k, r.d, 1)?;
                println!(
                    "N={:<6} k={:<5} sparse {:>9.3} ms  dense {:>9.3} ms  speedup {:.2}x",
                    r.n,
                    r.k,
                    s.as_secs_f64() * 1e3,
                    dn.as_secs_f64() * 1e3,
                    dn.as_secs_f64() / s.as_secs_f64()
                );
            }
            io::write_text(&out, &bench::bench_csv(&rows, &cfg))?;
        }
        Command::Ablate {
            config,
            data,
            out,
            variants,
            overrides,
        } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            print_config(&cfg);
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
            };
            let (ir, vis) = read_pair(&data.join("ir"), &data.join("vis"))?;
            let set = TrainingSet::new(ir, vis)?;
            let rows = pipeline::ablate(&cfg, &variants, &set, |v, i, l| {
                if (i + 1) % 500 == 0 {
                    println!("{v:<16} iter {:>6}  loss {l:.6}", i + 1);
                }
            })?;
            let table = pipeline::ablation_csv(&rows);
            io::write_text(&out, &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
