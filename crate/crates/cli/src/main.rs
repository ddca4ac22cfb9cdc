mod commands;
mod exit;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "starflow", version, about = "Multi-frame optical flow with joint occlusion estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ArmSet {
    /// Two-frame with and without occlusion, TRFlow and TRFeat.
    Directional,
    /// Every combination of temporal mode, occlusion and scale sharing.
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Generate {
        /// TOML scene or suite spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint and loss curves.
    Train {
        /// TOML experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Dataset evaluated every `validate_every` iterations.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Two-frame iterations run before the configured stage.
        #[arg(long, default_value_t = 0)]
        pretrain_iterations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the last pair of every sequence.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frames fed to the model (N'); repeat for a sweep.
        #[arg(long = "frames", default_values_t = [2usize])]
        frames: Vec<usize>,
        /// Expected model config; a mismatch with the checkpoint is an error.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write a flow-color PNG per evaluated pair.
        #[arg(long)]
        viz: bool,
        /// Write per-sequence metrics as CSV.
        #[arg(long)]
        per_sample: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the flow of the last pair of a frame sequence.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output .flo file.
        #[arg(long)]
        out: PathBuf,
        /// Also write the occlusion map as an 8-bit PNG.
        #[arg(long)]
        occ: Option<PathBuf>,
        /// Two or more PNG frames in time order.
        #[arg(required = true, num_args = 2..)]
        frames: Vec<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameters sampled for the end-to-end check (0 = all).
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter counts of the ablation arms.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ArmSet::Directional)]
        arms: ArmSet,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation arm for every seed.
    Ablate {
        /// TOML ablation config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert between .flo and KITTI PNG flow files, or render flow colors.
    Convert {
        input: PathBuf,
        /// `.flo` or `.png` (KITTI 16-bit) by extension.
        output: PathBuf,
        /// Write a flow-color visualization instead of a flow file.
        #[arg(long)]
        color: bool,
        /// Magnitude mapped to full saturation in color mode.
        #[arg(long)]
        max_mag: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec, count, out } => commands::generate(&spec, count, out.as_deref()),
        Command::Train {
            config,
            data,
            validation,
            init,
            pretrain_iterations,
            out,
        } => commands::train(commands::TrainArgs {
            config: config.as_deref(),
            data: &data,
            validation: validation.as_deref(),
            init: init.as_deref(),
            pretrain_iterations,
            out: out.as_deref(),
        }),
        Command::Eval {
            checkpoint,
            data,
            frames,
            config,
            viz,
            per_sample,
            out,
        } => commands::eval(commands::EvalArgs {
            checkpoint: &checkpoint,
            data: &data,
            frames: &frames,
            config: config.as_deref(),
            viz,
            per_sample,
            out: out.as_deref(),
        }),
        Command::Infer {
            checkpoint,
            out,
            occ,
            frames,
        } => commands::infer(&checkpoint, &frames, &out, occ.as_deref()),
        Command::Gradcheck {
            config,
            samples,
            seed,
            inject_fault,
            out,
        } => commands::gradcheck(config.as_deref(), samples, seed, inject_fault, out.as_deref()),
        Command::Params { config, arms, out } => commands::params(config.as_deref(), arms, out.as_deref()),
        Command::Ablate {
            config,
            train,
            test,
            out,
        } => commands::ablate(config.as_deref(), &train, &test, out.as_deref()),
        Command::Convert {
            input,
            output,
            color,
            max_mag,
        } => commands::convert(&input, &output, color, max_mag),
    };
    match result {
        Ok(()) => ExitCode::from(exit::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
