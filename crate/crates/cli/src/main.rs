use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Packet-payload intrusion detection with integrated stacking.
#[derive(Parser, Debug)]
#[command(name = "pktstack", version, about)]
struct Cli {
    /// Seed for every random choice made by the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// `key = value` file overriding training defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse captures, label packets by flow, dedup and undersample benign.
    Ingest(IngestArgs),
    /// Turn the labeled-packet manifest into image datasets and split them.
    Transform(TransformArgs),
    /// Train one-vs-all base learners on D1.
    TrainBase(TrainBaseArgs),
    /// Freeze the base learners, graft a meta head and train it on D2.
    TrainMeta(TrainMetaArgs),
    /// Score a model on a split and write a metrics file.
    Evaluate(EvaluateArgs),
    /// Classify payloads with a trained model.
    Predict(PredictArgs),
    /// Write a synthetic labeled capture with byte-range classes.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Capture file(s); records are taken in the order given.
    #[arg(long, required = true, num_args = 1..)]
    pcap: Vec<PathBuf>,
    /// Flow-label table with a header row.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Label of the class that gets undersampled.
    #[arg(long, default_value = "BENIGN")]
    benign: String,
    /// Keep at most this many benign packets per non-benign packet.
    #[arg(long, default_value_t = pktstack::ingest::DEFAULT_BENIGN_CAP_RATIO)]
    benign_ratio: f64,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long, default_value = "Source IP")]
    src_ip_col: String,
    #[arg(long, default_value = "Destination IP")]
    dst_ip_col: String,
    #[arg(long, default_value = "Source Port")]
    src_port_col: String,
    #[arg(long, default_value = "Destination Port")]
    dst_port_col: String,
    #[arg(long, default_value = "Protocol")]
    protocol_col: String,
    #[arg(long, default_value = "Label")]
    label_col: String,
}

#[derive(Args, Debug)]
struct TransformArgs {
    /// Directory holding the ingest output.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the image datasets (defaults to `--data`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainBaseArgs {
    /// Directory holding `d1.bsid` and the class list.
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving `base_<id>.bsnn` and the learner manifest.
    #[arg(long)]
    out: PathBuf,
    /// Train only this class; all classes otherwise.
    #[arg(long)]
    class: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainMetaArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `train-base`.
    #[arg(long)]
    learners: PathBuf,
    /// Bundle directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("subject").required(true).args(["model", "learners"]))]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Integrated model bundle.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Base learners scored as argmax of their sigmoids instead.
    #[arg(long)]
    learners: Option<PathBuf>,
    /// Split to score.
    #[arg(long, default_value = "d3", value_parser = ["d1", "d2", "d3", "images"])]
    split: String,
    /// Metrics file (defaults to `metrics.txt` next to the model).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["hex", "manifest", "images"]))]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// One payload as hex.
    #[arg(long)]
    hex: Option<String>,
    /// Labeled-packet manifest; labels are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Image dataset file.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    packets_per_class: usize,
    #[arg(long, default_value_t = 64)]
    min_payload: usize,
    #[arg(long, default_value_t = 1024)]
    max_payload: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
