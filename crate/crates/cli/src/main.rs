mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reconv::compare::ComparisonBackend;
use reconv::phe::BackendKind;
use reconv::ring::ProtocolParams;
use reconv::Error;

#[derive(Parser)]
#[command(name = "reconv", version, about = "Two-party private CNN inference over shared fixed-point values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hold the weights and serve one inference.
    Server {
        #[command(flatten)]
        party: PartyArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Hold the input and receive the predicted class.
    Client {
        #[command(flatten)]
        party: PartyArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
    },
    /// Measure benchmark layers and check them against the closed forms.
    Bench {
        /// t3r1..t3r5 or all.
        #[arg(long, default_value = "all")]
        preset: String,
        /// Emit CSV rows instead of the text report.
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Print predicted per-block costs without running anything.
    Cost {
        #[command(flatten)]
        model: ModelArgs,
        /// Cost a benchmark layer instead of a network.
        #[arg(long, conflicts_with = "model")]
        preset: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run inferences in-process and check every block against the plaintext oracle.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Perturb the server's first linear block so the check must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Write the built-in demo network as a description and weight blob.
    DemoModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 8)]
        f: u32,
        /// Seed for the generated weights.
        #[arg(long, default_value_t = run::DEMO_SEED)]
        net_seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Phe {
    Lattice,
    Counting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Compare {
    Ideal,
    Ot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Transport {
    Tcp,
    Loopback,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Homomorphic backend.
    #[arg(long, value_enum)]
    pub phe: Option<Phe>,
    /// Comparison backend.
    #[arg(long, value_enum)]
    pub compare: Option<Compare>,
    /// Ring degree.
    #[arg(long, default_value_t = 4096)]
    pub n: usize,
    /// Plaintext prime; defaults to the first batching prime above 2^37.
    #[arg(long)]
    pub p: Option<u64>,
    /// Fraction bits; defaults to the model's.
    #[arg(long)]
    pub f: Option<u32>,
    /// Seed for protocol randomness and the generated input.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    pub fn params(&self, model_f: u32) -> Result<ProtocolParams, Failure> {
        let f = self.f.unwrap_or(model_f);
        let params = match self.p {
            Some(p) => ProtocolParams::new(self.n, p, f)?,
            None => ProtocolParams::with_prime_bits(self.n, 37, f)?,
        };
        Ok(match self.seed {
            Some(s) => params.with_seed(s),
            None => params,
        })
    }

    pub fn phe_or(&self, default: Phe) -> BackendKind {
        match self.phe.unwrap_or(default) {
            Phe::Lattice => BackendKind::Lattice,
            Phe::Counting => BackendKind::Counting,
        }
    }

    pub fn compare_or(&self, default: Compare) -> ComparisonBackend {
        match self.compare.unwrap_or(default) {
            Compare::Ideal => ComparisonBackend::ideal(),
            Compare::Ot => ComparisonBackend::ot(),
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// Network description; the built-in demo network when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Weight blob for the description.
    #[arg(long, requires = "model")]
    pub weights: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct PartyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: Common,
    /// loopback runs both parties in this process.
    #[arg(long, value_enum, default_value_t = Transport::Tcp)]
    pub transport: Transport,
    /// Input values separated by whitespace or commas; generated from the seed when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verify(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<reconv::model::ModelError> for Failure {
    fn from(e: reconv::model::ModelError) -> Self {
        Failure::Core(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Verify(_) => 5,
            Failure::Core(e) => match e {
                Error::Handshake(_) => 3,
                Error::Param(_) | Error::Shape(_) | Error::Overflow(_) | Error::Model(_) => 4,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Verify(m) => write!(f, "verification failed: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Server { party, listen } => run::party(reconv::phe::Party::Server, &party, &listen),
        Command::Client { party, connect } => run::party(reconv::phe::Party::Client, &party, &connect),
        Command::Bench { preset, csv, common } => run::bench(&preset, csv, &common),
        Command::Cost { model, preset, common } => run::cost(&model, preset.as_deref(), &common),
        Command::Verify { model, common, trials, inject_fault } => verify::run(&model, &common, trials, inject_fault),
        Command::DemoModel { model, weights, f, net_seed } => run::demo_model(&model, &weights, f, net_seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("reconv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
