//! The `gap-lab` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime errors. Every
//! command prints its effective configuration to stderr before running.

mod commands;
mod load;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use load::{load_teks, LoadedKeys};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    crate::crypto::CryptoError,
    crate::keyserver::KeyServerError,
    crate::sim::SimError,
    crate::sim::CaptureParseError,
    crate::wormhole::WormholeError,
    crate::profiler::ProfileError,
    crate::feasibility::FeasibilityError,
);

#[derive(Debug, Parser)]
#[command(
    name = "gap-lab",
    version,
    about = "Exposure-notification protocol and attack laboratory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate temporary exposure keys, or a key-server signing key.
    Keygen(KeygenArgs),
    /// Run a scenario and write one capture log per sniffer station.
    Simulate(SimulateArgs),
    /// Run the diagnosis key server.
    ServeKeys(ServeKeysArgs),
    /// Upload diagnosis keys to a key server.
    Upload(UploadArgs),
    /// Download the signed diagnosis-key aggregate from a key server.
    Download(DownloadArgs),
    /// Match a device's sightings against diagnosis keys and score them.
    Match(MatchArgs),
    /// Relay attack: broker, nodes and an end-to-end demo.
    #[command(subcommand)]
    Wormhole(WormholeCommand),
    /// Reconstruct timelines, routes and social links of diagnosed users.
    Profile(ProfileArgs),
    /// Attack-cost calculators.
    Feasibility(FeasibilityArgs),
    /// Run every experiment and write all report and plot-data files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Seed for every random choice.
    #[arg(long, env = "GAP_LAB_SEED", default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[command(flatten)]
    pub seed: SeedArg,
    /// First UTC day (YYYY-MM-DD); defaults to today.
    #[arg(long)]
    pub day: Option<String>,
    /// Number of consecutive daily keys.
    #[arg(long, default_value_t = 1)]
    pub days: u32,
    /// Transmission risk level stored with every key (0-8).
    #[arg(long, default_value_t = 0)]
    pub risk: u8,
    /// Also print every RPI of every key.
    #[arg(long)]
    pub list_rpis: bool,
    /// Write the keys here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Instead of TEKs, create (or show) an Ed25519 signing key at this path.
    #[arg(long, conflicts_with_all = ["day", "days", "risk", "list_rpis", "out"])]
    pub signing_key: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Builtin {
    Fig5,
    Commuter,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["scenario", "builtin"])))]
pub struct SimulateArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// A canned scenario.
    #[arg(long, value_enum)]
    pub builtin: Option<Builtin>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Output directory for capture logs and keys.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the scenario as TOML to this path.
    #[arg(long)]
    pub dump_scenario: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeKeysArgs {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
    /// Append-only store file.
    #[arg(long)]
    pub store: PathBuf,
    /// Signing key file, created on first boot.
    #[arg(long)]
    pub signing_key: PathBuf,
    /// Credential for issuing TANs and purging.
    #[arg(long)]
    pub admin_token: String,
    /// Start the server clock at this unix time instead of now.
    #[arg(long)]
    pub clock: Option<i64>,
    /// Stop after this many seconds instead of running until interrupted.
    #[arg(long)]
    pub run_for: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("auth").required(true).args(["tan", "admin_token"])))]
pub struct UploadArgs {
    /// Key server address, host:port.
    #[arg(long)]
    pub server: String,
    /// Key file: a TEK array, `{"teks": [...]}`, or an aggregate.
    #[arg(long)]
    pub keys: PathBuf,
    /// TAN from the health authority.
    #[arg(long)]
    pub tan: Option<String>,
    /// Issue a fresh TAN with this admin credential first.
    #[arg(long)]
    pub admin_token: Option<String>,
}

#[derive(Debug, Args)]
pub struct DownloadArgs {
    /// Key server address, host:port.
    #[arg(long)]
    pub server: String,
    /// Only bundles submitted after this unix time.
    #[arg(long, default_value_t = 0)]
    pub since: i64,
    /// Verify against this public key (hex) instead of the one the server reports.
    #[arg(long)]
    pub server_key: Option<String>,
    /// Where to write the signed aggregate.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Diagnosis keys: signed aggregate, aggregate body, or TEK array.
    #[arg(long)]
    pub bundles: PathBuf,
    /// Capture log file or directory used as the device's sighting store.
    #[arg(long)]
    pub captures: PathBuf,
    /// Only use records from this station.
    #[arg(long)]
    pub station: Option<String>,
    /// Require a valid signature from this public key (hex).
    #[arg(long)]
    pub server_key: Option<String>,
    /// Sightings of one key further apart than this start a new window.
    #[arg(long, default_value_t = 600)]
    pub merge_gap: i64,
    /// Score at or above which the result is high risk.
    #[arg(long, default_value = "15")]
    pub threshold: String,
    /// Write windows as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum WormholeCommand {
    /// Run the fan-out broker.
    Broker(BrokerArgs),
    /// Run a sniffer and/or rebroadcaster node against a broker.
    Node(NodeArgs),
    /// Run the two-site attack end to end and report the victim's result.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct BrokerArgs {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:7879")]
    pub listen: String,
    /// Stop after this many seconds instead of running until interrupted.
    #[arg(long)]
    pub run_for: Option<u64>,
}

#[derive(Debug, Args)]
pub struct NodeArgs {
    /// Broker address, host:port.
    #[arg(long)]
    pub broker: String,
    /// sniffer, rebroadcaster or both.
    #[arg(long, default_value = "both")]
    pub role: String,
    #[arg(long, default_value = "node")]
    pub id: String,
    /// Seconds between replays of one advertisement.
    #[arg(long, default_value_t = crate::wormhole::DEFAULT_CADENCE_S)]
    pub cadence: i64,
    /// Seconds a captured advertisement stays replayable.
    #[arg(long, default_value_t = crate::wormhole::DEFAULT_REPLAY_WINDOW_S)]
    pub window: i64,
    /// Captured frames, one per line as hex or as a capture-log record;
    /// `-` for stdin. Each is stamped with the node clock when read.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Stop after this many seconds.
    #[arg(long, default_value_t = 60)]
    pub run_for: u64,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[command(flatten)]
    pub seed: SeedArg,
    /// Run the control experiment with the relay switched off.
    #[arg(long)]
    pub no_wormhole: bool,
    /// Delay between capture and replay, seconds.
    #[arg(long, default_value_t = 0)]
    pub replay_delay: i64,
    /// Transport delay added to every relayed message, milliseconds.
    #[arg(long, default_value_t = 50)]
    pub network_delay_ms: u64,
    /// Seconds between replays of one advertisement.
    #[arg(long, default_value_t = crate::wormhole::DEFAULT_CADENCE_S)]
    pub cadence: i64,
    /// Seconds a captured advertisement stays replayable.
    #[arg(long, default_value_t = crate::wormhole::DEFAULT_REPLAY_WINDOW_S)]
    pub window: i64,
    /// Chance that the victim's phone records one replayed frame.
    #[arg(long, default_value_t = 1.0)]
    pub victim_rx: f64,
    /// Write node logs and the victim's windows here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Diagnosis keys: signed aggregate, aggregate body, or TEK array.
    #[arg(long)]
    pub bundles: PathBuf,
    /// Capture log file or directory.
    #[arg(long)]
    pub captures: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Require a valid signature from this public key (hex).
    #[arg(long)]
    pub server_key: Option<String>,
    /// Sightings of one subject at one station further apart than this split a visit.
    #[arg(long, default_value_t = crate::profiler::DEFAULT_MERGE_GAP_S)]
    pub merge_gap: i64,
    /// Minimum total overlap for a social edge, seconds.
    #[arg(long, default_value_t = crate::profiler::DEFAULT_MIN_OVERLAP_S)]
    pub min_overlap: i64,
    /// Minimum similarity for a cross-day link.
    #[arg(long, default_value_t = crate::profiler::DEFAULT_LINK_THRESHOLD)]
    pub link_threshold: f64,
}

#[derive(Debug, Args)]
pub struct FeasibilityArgs {
    /// Emit JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub calc: Calc,
}

#[derive(Debug, Subcommand)]
pub enum Calc {
    /// Unique RPIs per minute from a count and a duration.
    CollectionRate {
        #[arg(long)]
        rpis: u64,
        /// mm:ss, hh:mm:ss or seconds.
        #[arg(long)]
        duration: String,
    },
    /// RPIs received per RPI of a later-published key.
    RpisPerPositive {
        /// Weekly cases per 100,000.
        #[arg(long)]
        incidence: String,
    },
    /// Relay devices needed to always hold a positive RPI.
    WormholeDevices {
        /// Weekly cases per 100,000.
        #[arg(long)]
        incidence: String,
        /// Unique RPIs collected per minute per device.
        #[arg(long)]
        rate: String,
        /// Average minutes one RPI stays valid.
        #[arg(long, default_value = "5")]
        validity: String,
    },
    /// Infected people and uploads per hour at one test centre.
    TestCenter {
        /// Tests processed per hour.
        #[arg(long)]
        tests: String,
        /// Share of tests that come back positive.
        #[arg(long, default_value = "3.62%")]
        positive_rate: String,
        /// Share of positives who upload their keys.
        #[arg(long, default_value = "9.84%")]
        upload_share: String,
        /// Replay window in minutes.
        #[arg(long, default_value = "120")]
        window: String,
    },
    /// Positive identities replayable at once.
    ReplayExposures {
        /// Key uploads per hour.
        #[arg(long)]
        uploads: String,
        /// Replay window in minutes.
        #[arg(long, default_value = "120")]
        window: String,
    },
    /// Devices one sniffer reaches over a campaign.
    Targeted {
        /// Unique RPIs collected per minute.
        #[arg(long)]
        rate: String,
        /// Sniffing hours per day.
        #[arg(long, default_value_t = 12)]
        hours: u32,
        /// Campaign length in days.
        #[arg(long, default_value_t = 14)]
        days: u32,
    },
    /// Total sensing stations for a city.
    Coverage {
        /// Category estimates as `name=lo-hi` or `name=n`; defaults to the city estimate.
        #[arg(long = "category")]
        categories: Vec<String>,
    },
    /// Theoretical and effective advertisement rates.
    Airtime {
        /// PHY bit rate, bits per second.
        #[arg(long, default_value_t = 1_000_000)]
        phy_rate: u64,
        /// Inter-frame space, microseconds.
        #[arg(long, default_value_t = 150)]
        ifs: u32,
        /// Share of the theoretical rate actually received.
        #[arg(long, default_value = "4.3%")]
        rx_fraction: String,
    },
    /// Every published figure.
    All,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub seed: SeedArg,
    /// Directory for every report file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let _ = writeln!(err, "gap-lab config: {:?}", cli.command);
    match commands::dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
