use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fogflow::config::TrainConfig;
use fogflow::datapipe::{load_depth, load_image, read_flo, save_image, write_flo};
use fogflow::eval::{self, DEFAULT_DELTAS_REAL};
use fogflow::fogphys::FogParameters;
use fogflow::nets::Domain;
use fogflow::trainloop::{load_checkpoint, train};

#[derive(Parser)]
#[command(name = "fogflow", version, about = "Optical flow for foggy image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the networks from a TOML/JSON configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `steps` from the configuration.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Score predicted .flo files against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Optional `<id>.png` validity masks (nonzero = annotated).
        #[arg(long)]
        mask_dir: Option<PathBuf>,
        /// Bad-pixel threshold in pixels; repeatable. Defaults to 3 and 5.
        #[arg(long = "delta")]
        deltas: Vec<f64>,
        /// Also write the CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render fog over a clean image with a depth map.
    RenderFog {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        beta: f32,
        /// Atmospheric light, `v` or `r,g,b` in [0, 1].
        #[arg(long, value_parser = parse_rgb)]
        atmo: [f32; 3],
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Estimate flow between two frames with a trained checkpoint.
    EstimateFlow {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame1: PathBuf,
        #[arg(long)]
        frame2: PathBuf,
        #[arg(long, value_enum, default_value_t = DomainArg::Fog)]
        domain: DomainArg,
        /// Output .flo; a color rendering is written next to it as .png.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Render a fog image as a clean one.
    Defog {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Color-code a .flo file.
    Visualize {
        #[arg(long)]
        flo: PathBuf,
        /// Magnitude mapped to full saturation (default: 99th percentile).
        #[arg(long)]
        max_mag: Option<f64>,
        /// Defaults to the input path with a .png extension.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Fog,
    Clean,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Fog => Domain::Fog,
            DomainArg::Clean => Domain::Clean,
        }
    }
}

fn parse_rgb(s: &str) -> Result<[f32; 3], String> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [v] => Ok([v; 3]),
        [r, g, b] => Ok([r, g, b]),
        _ => Err("expected one value or three comma-separated values".into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> fogflow::Result<()> {
    match command {
        Command::Train { config, resume, seed, steps } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if steps.is_some() {
                cfg.steps = steps;
            }
            let state = train(cfg, resume.as_deref())?;
            println!("trained {} steps", state.step);
        }
        Command::Eval { pred_dir, gt_dir, mask_dir, deltas, csv } => {
            let deltas = if deltas.is_empty() { DEFAULT_DELTAS_REAL.to_vec() } else { deltas };
            let (rows, aggregate) = eval::evaluate_dirs(&pred_dir, &gt_dir, mask_dir.as_deref(), &deltas)?;
            let mut out = Vec::new();
            eval::write_eval_csv(&mut out, &rows, &aggregate)?;
            if let Some(path) = csv {
                fs::write(path, &out)?;
            }
            io::stdout().write_all(&out)?;
        }
        Command::RenderFog { clean, depth, beta, atmo, output } => {
            let clean = load_image(&clean)?;
            let depth = load_depth(&depth)?;
            let fog = FogParameters::new(atmo, beta)?.render(&clean, &depth)?;
            save_image(&output, &fog)?;
        }
        Command::EstimateFlow { ckpt, frame1, frame2, domain, output } => {
            let state = load_checkpoint(&ckpt)?;
            let flow = eval::estimate_flow(&state.store, domain.into(), &load_image(&frame1)?, &load_image(&frame2)?)?;
            write_flo(&output, &flow)?;
            save_image(output.with_extension("png"), &eval::flow_to_color(&flow, None))?;
        }
        Command::Defog { ckpt, image, output } => {
            let state = load_checkpoint(&ckpt)?;
            save_image(&output, &eval::defog(&state.store, &load_image(&image)?)?)?;
        }
        Command::Visualize { flo, max_mag, output } => {
            let flow = read_flo(&flo)?;
            let output = output.unwrap_or_else(|| flo.with_extension("png"));
            save_image(&output, &eval::flow_to_color(&flow, max_mag))?;
            log::info!("wrote {}", output.display());
        }
    }
    Ok(())
}
