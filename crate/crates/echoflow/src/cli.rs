//! Command-line surface. Exit codes: 0 success, 1 validation or I/O
//! failure, 2 numerical abort (non-finite loss or a failed gradient
//! verification).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::autodiff::set_thread_count;
use crate::fit::{fit_sequence, FitConfig, FitError};
use crate::io::{self, IoError};
use crate::metrics::{sequence_report, MetricsError, DEFAULT_TAU};
use crate::model::full_network_gradcheck;
use crate::phantom::{generate_phantom, PhantomConfig, PhantomError};

#[derive(Parser)]
#[command(name = "echoflow", version, about = "Per-sequence cardiac motion fitting")]
pub struct Cli {
    /// Worker threads for convolutions; any count gives identical results.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic beating-chamber sequence with ground truth.
    Phantom {
        /// Output sequence directory.
        #[arg(long)]
        out: PathBuf,
        /// Image height and width in pixels; chamber geometry scales along.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Contraction scale at end systole, in (0,1).
        #[arg(long, default_value_t = 0.8)]
        scale_es: f64,
        /// Multiplicative speckle strength.
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Fit the motion model to one sequence and write its outputs.
    Fit {
        /// Input sequence directory.
        #[arg(long)]
        seq: PathBuf,
        /// First-frame label mask PNG.
        #[arg(long)]
        m0: PathBuf,
        /// Last-frame label mask PNG.
        #[arg(long)]
        m1: PathBuf,
        /// JSON fit configuration; every key optional, defaults documented.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for masks, fields, loss log, and checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed when given.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predicted masks against reference masks.
    Eval {
        /// Directory of predicted mask_NNNN.png files.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference mask_NNNN.png files.
        #[arg(long)]
        gt: PathBuf,
        /// Pixel spacing in mm; enables mm-valued distances.
        #[arg(long)]
        spacing: Option<f64>,
        /// Temporal-consistency threshold as a fraction of attribute range.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render masks color-coded over their frames.
    Overlay {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every autodiff op and the full network against finite
    /// differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("{0}")]
    Invalid(String),
    #[error("gradient check failed: max relative error {max:e} >= {tolerance:e}")]
    GradCheck { max: f64, tolerance: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Fit(FitError::NonFinite { .. }) | CliError::GradCheck { .. } => 2,
            _ => 1,
        }
    }
}

/// Full program entry: parse, dispatch, map errors to exit codes.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    set_thread_count(cli.threads.max(1));
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Phantom { out, size, frames, scale_es, noise, seed } => {
            let base = PhantomConfig::default();
            // Largest outer semi-axis that keeps the mandatory 4 px border.
            let scale = (size as f64 / 2.0 - 4.0) / (base.a_y + base.ring);
            let config = PhantomConfig {
                h: size,
                w: size,
                num_frames: frames,
                s_es: scale_es,
                sigma_n: noise,
                seed,
                a_x: base.a_x * scale,
                a_y: base.a_y * scale,
                ring: base.ring * scale,
                ..base
            };
            let truth = generate_phantom(&config)?;
            io::save_sequence_dir(&out, &truth.seq, Some(&truth.masks))?;
            io::write_field_dump(&out.join("fields.eodf"), &truth.fields)?;
            println!(
                "wrote {frames} frames ({size}x{size}), masks, and fields to {}",
                out.display()
            );
            Ok(())
        }
        Command::Fit { seq, m0, m1, config, out, seed } => {
            let (sequence, _) = io::load_sequence(&seq)?;
            let m0 = io::load_mask_file(&m0)?;
            let m1 = io::load_mask_file(&m1)?;
            let mut config = match config {
                None => FitConfig::default(),
                Some(path) => read_config(&path)?,
            };
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let start = Instant::now();
            let result = fit_sequence(&sequence, &m0, &m1, &config)?;
            io::save_outputs(&out, &result, &config)?;
            let last = result.history.last().unwrap();
            println!(
                "fit {} steps in {:.1}s, final loss {:.6}; outputs in {}",
                result.history.len(),
                start.elapsed().as_secs_f64(),
                last.total,
                out.display()
            );
            Ok(())
        }
        Command::Eval { pred, gt, spacing, tau, out } => {
            let pred_masks = io::load_mask_dir(&pred)?;
            let gt_masks = io::load_mask_dir(&gt)?;
            let report = sequence_report(&pred_masks, &gt_masks, spacing, tau)?;
            let json = serde_json::to_string_pretty(&report).expect("serializable");
            std::fs::write(&out, json + "\n")
                .map_err(|e| IoError::Io { path: out.clone(), source: e })?;
            let lv_dice = report
                .mean_dice
                .get(&crate::metrics::LV_ENDO)
                .or_else(|| report.mean_dice.values().next())
                .copied()
                .unwrap_or(f64::NAN);
            println!(
                "LV dice {:.4}, EF error {:.4}, temporal HD {:.3} px, flagged: {}; report in {}",
                lv_dice,
                report.ef_abs_error,
                report.temporal_hd_px,
                report.temporal_error,
                out.display()
            );
            Ok(())
        }
        Command::Overlay { seq, masks, out } => {
            let (sequence, _) = io::load_sequence(&seq)?;
            let mask_list = io::load_mask_dir(&masks)?;
            if mask_list.len() != sequence.num_frames() {
                return Err(CliError::Invalid(format!(
                    "{} masks in {} for {} frames",
                    mask_list.len(),
                    masks.display(),
                    sequence.num_frames()
                )));
            }
            io::write_overlays(&out, &sequence, &mask_list)?;
            println!("wrote {} overlays to {}", mask_list.len(), out.display());
            Ok(())
        }
        Command::Gradcheck { tolerance } => gradcheck(tolerance),
    }
}

fn read_config(path: &Path) -> Result<FitConfig, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| IoError::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn gradcheck(tolerance: f64) -> Result<(), CliError> {
    let start = Instant::now();
    let checks = crate::autodiff::check_all_ops(0)
        .map_err(|e| CliError::Invalid(format!("gradcheck setup: {e}")))?;
    let mut max = 0.0f64;
    for c in &checks {
        println!(
            "{:<22} rel err {:>9.3e}  ({} coords, {} skipped)",
            c.name, c.report.max_rel_err, c.report.checked, c.report.skipped
        );
        max = max.max(c.report.max_rel_err);
    }
    let net = full_network_gradcheck(0)
        .map_err(|e| CliError::Invalid(format!("gradcheck setup: {e}")))?;
    println!(
        "{:<22} rel err {:>9.3e}  ({} coords, {} skipped)",
        "full_network", net.max_rel_err, net.checked, net.skipped
    );
    max = max.max(net.max_rel_err);
    println!(
        "max relative error {max:.3e} over {} ops in {:.1}s",
        checks.len() + 1,
        start.elapsed().as_secs_f64()
    );
    if max >= tolerance {
        return Err(CliError::GradCheck { max, tolerance });
    }
    Ok(())
}
