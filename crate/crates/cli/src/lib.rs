//! Commands behind the `derain` binary.
//!
//! Every command prints machine-readable `key=value` records on stdout and
//! human-readable tables and progress on stderr.

pub mod args;
mod bench;
mod dataset;
mod derain;
mod eval;
mod files;
mod preview;
mod train;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;
use derain_core::Error as CoreError;

pub use args::{Cli, Command};
pub use bench::cmd_bench;
pub use dataset::cmd_make_dataset;
pub use derain::{cmd_derain, DerainRecord};
pub use eval::{cmd_eval, EvalRecord};
pub use preview::{cmd_augment_preview, PREVIEW_FILES};
pub use train::{ablation_record, cmd_train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::ConfigLine { .. } | CoreError::ConfigMismatch(_) | CoreError::Param(_) => {
                    EXIT_USAGE
                }
                CoreError::NonFinite(_) => EXIT_NUMERIC,
                CoreError::Shape(_)
                | CoreError::Integrity(_)
                | CoreError::Data(_)
                | CoreError::Io { .. }
                | CoreError::Image { .. } => EXIT_DATA,
            },
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Derain(a) => cmd_derain(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
        Command::AugmentPreview(a) => cmd_augment_preview(&a),
        Command::MakeDataset(a) => cmd_make_dataset(&a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
