use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use pktstack::config::TrainConfig;
use pktstack::eval::{evaluate, evaluate_predictions, format_metrics, format_table, Evaluation};
use pktstack::ingest::manifest::{read_class_names, read_manifest, write_class_names, write_manifest, CLASSES_FILE, MANIFEST_FILE};
use pktstack::ingest::{label_packet, load_flow_labels, parse_capture, prepare_dataset, split_dataset, ColumnMap};
use pktstack::learner::{build_base_model_with, freeze_and_truncate, one_vs_rest_predict, to_one_vs_all, train_base_learner, BaseLearner};
use pktstack::nn::{load_checkpoint, save_checkpoint};
use pktstack::stack::{build_integrated, load_integrated, save_integrated, trunk_file_name, IntegratedModel};
use pktstack::synth::{generate_corpus, CorpusSpec};
use pktstack::train::derive_seed;
use pktstack::transform::{read_image_dataset, transform_payload, write_image_dataset, GrayscaleImage, LabeledImage};

use crate::{Cli, Command, EvaluateArgs, IngestArgs, PredictArgs, SynthArgs, TrainBaseArgs, TrainMetaArgs, TransformArgs};

pub const IMAGES_FILE: &str = "images.bsid";
pub const LEARNERS_FILE: &str = "learners.tsv";
pub const CAPTURE_FILE: &str = "capture.pcap";
pub const FLOWS_FILE: &str = "flows.csv";

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    match cli.command {
        Command::Ingest(a) => ingest(a, cli.seed),
        Command::Transform(a) => transform(a, cli.seed),
        Command::TrainBase(a) => train_base(a, &config, cli.seed),
        Command::TrainMeta(a) => train_meta(a, &config, cli.seed),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Synth(a) => synth(a, cli.seed),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_images(path: &Path) -> Result<(Vec<LabeledImage>, u16)> {
    read_image_dataset(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn classes_in(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(CLASSES_FILE);
    let names = read_class_names(open(&path)?)?;
    ensure!(!names.is_empty(), "{} lists no classes", path.display());
    Ok(names)
}

fn ingest(a: IngestArgs, seed: u64) -> Result<()> {
    ensure!(a.delimiter.is_ascii(), "delimiter must be a single ASCII character");
    let columns = ColumnMap {
        src_addr: a.src_ip_col,
        dst_addr: a.dst_ip_col,
        src_port: a.src_port_col,
        dst_port: a.dst_port_col,
        protocol: a.protocol_col,
        label: a.label_col,
    };
    let flows = load_flow_labels(open(&a.labels)?, &columns, a.delimiter as u8).with_context(|| format!("flow table {}", a.labels.display()))?;
    let table = flows.table;
    println!("flows: {} labeled, {} conflicting rows, {} unreadable rows", table.len(), flows.conflicts, flows.row_errors);

    let mut labeled = Vec::new();
    let mut unlabeled = 0usize;
    for path in &a.pcap {
        let parsed = parse_capture(open(path)?).with_context(|| format!("capture {}", path.display()))?;
        let s = &parsed.stats;
        println!("{}: {} frames, {} truncated, {} unsupported", path.display(), s.frames, s.truncated, s.unsupported);
        for record in parsed.records {
            match label_packet(record, &table) {
                Some(p) => labeled.push(p),
                None => unlabeled += 1,
            }
        }
    }
    println!("packets: {} labeled, {unlabeled} unmatched and dropped", labeled.len());
    let before = labeled.len();
    let prepared = prepare_dataset(labeled, table.class_names(), &a.benign, a.benign_ratio, seed)?;
    println!("prepared: {} kept, {} removed (empty, duplicate or over the benign cap)", prepared.len(), before - prepared.len());

    fs::create_dir_all(&a.out)?;
    write_manifest(create(&a.out.join(MANIFEST_FILE))?, prepared.iter().map(|p| (p.class_id, &p.record.payload)))?;
    write_class_names(create(&a.out.join(CLASSES_FILE))?, table.class_names())?;
    print_counts(table.class_names(), prepared.iter().map(|p| p.class_id));
    Ok(())
}

fn print_counts(names: &[String], ids: impl Iterator<Item = usize>) {
    let mut counts = vec![0usize; names.len()];
    ids.for_each(|c| counts[c] += 1);
    for (id, (name, n)) in names.iter().zip(counts).enumerate() {
        println!("  {id:>3} {name:<28} {n}");
    }
}

fn transform(a: TransformArgs, seed: u64) -> Result<()> {
    let names = classes_in(&a.data)?;
    let entries = read_manifest(open(&a.data.join(MANIFEST_FILE))?)?;
    ensure!(names.len() <= u16::MAX as usize, "too many classes");
    let classes = names.len() as u16;
    let mut images = Vec::with_capacity(entries.len());
    for e in &entries {
        ensure!(e.class_id < names.len(), "manifest class {} but only {} classes listed", e.class_id, names.len());
        images.push(LabeledImage { class_id: e.class_id as u16, image: transform_payload(&e.payload) });
    }
    let out = a.out.unwrap_or(a.data);
    fs::create_dir_all(&out)?;
    write_image_dataset(create(&out.join(IMAGES_FILE))?, &images, classes)?;
    let split = split_dataset(images, seed)?;
    for (name, part) in [("d1", &split.d1), ("d2", &split.d2), ("d3", &split.d3)] {
        write_image_dataset(create(&out.join(format!("{name}.bsid")))?, part, classes)?;
    }
    println!("images: {} → d1 {} / d2 {} / d3 {}", entries.len(), split.d1.len(), split.d2.len(), split.d3.len());
    Ok(())
}

/// `class_id<TAB>class_name<TAB>file` per trained learner.
fn read_learner_manifest(dir: &Path) -> Result<BTreeMap<usize, (String, String)>> {
    let path = dir.join(LEARNERS_FILE);
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for line in fs::read_to_string(&path)?.lines().filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        ensure!(f.len() == 3, "{}: bad line {line:?}", path.display());
        out.insert(f[0].parse().with_context(|| format!("{}: bad class id", path.display()))?, (f[1].to_string(), f[2].to_string()));
    }
    Ok(out)
}

fn write_learner_manifest(dir: &Path, entries: &BTreeMap<usize, (String, String)>) -> Result<()> {
    let mut w = create(&dir.join(LEARNERS_FILE))?;
    for (id, (name, file)) in entries {
        writeln!(w, "{id}\t{name}\t{file}")?;
    }
    w.flush()?;
    Ok(())
}

fn train_base(a: TrainBaseArgs, config: &TrainConfig, seed: u64) -> Result<()> {
    let names = classes_in(&a.data)?;
    let (d1, _) = read_images(&a.data.join("d1.bsid"))?;
    let targets: Vec<usize> = match a.class {
        Some(c) => vec![c],
        None => (0..names.len()).collect(),
    };
    fs::create_dir_all(&a.out)?;
    let mut manifest = read_learner_manifest(&a.out)?;
    for class_id in targets {
        let view = to_one_vs_all(&d1, class_id, names.len())?;
        let learner = build_base_model_with::<f32>(class_id, derive_seed(seed, 2 * class_id as u64), config);
        let (learner, log) = train_base_learner(learner, &view, config, derive_seed(seed, 2 * class_id as u64 + 1))
            .with_context(|| format!("class {class_id} ({})", names[class_id]))?;
        let file = trunk_file_name(class_id);
        fs::write(a.out.join(&file), save_checkpoint(&learner.graph))?;
        manifest.insert(class_id, (names[class_id].clone(), file.clone()));
        write_learner_manifest(&a.out, &manifest)?;
        let last = log.epoch_losses.last().copied().unwrap_or(f64::NAN);
        println!("class {class_id} {:<20} {} positives, final loss {last:.5} → {file}", names[class_id], view.positives());
    }
    Ok(())
}

fn load_learners(dir: &Path, classes: usize) -> Result<Vec<BaseLearner<f32>>> {
    let manifest = read_learner_manifest(dir)?;
    ensure!(
        manifest.len() == classes && manifest.keys().copied().eq(0..classes),
        "{} lists learners {:?} but there are {classes} classes",
        dir.join(LEARNERS_FILE).display(),
        manifest.keys().collect::<Vec<_>>()
    );
    manifest
        .iter()
        .map(|(&class_id, (_, file))| {
            let path = dir.join(file);
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let graph = load_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))?;
            Ok(BaseLearner { class_id, graph })
        })
        .collect()
}

fn train_meta(a: TrainMetaArgs, config: &TrainConfig, seed: u64) -> Result<()> {
    let names = classes_in(&a.data)?;
    let (d2, _) = read_images(&a.data.join("d2.bsid"))?;
    let trunks = load_learners(&a.learners, names.len())?
        .into_iter()
        .map(freeze_and_truncate)
        .collect::<Result<Vec<_>, _>>()?;
    let mut model = build_integrated(trunks, names, config, derive_seed(seed, 0))?;
    let log = model.train_meta(&d2, config, derive_seed(seed, 1))?;
    save_integrated(&model, &a.out)?;
    let last = log.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!("meta head trained on {} images, final loss {last:.5} → {}", d2.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let (data, _) = read_images(&a.data.join(format!("{}.bsid", a.split)))?;
    ensure!(!data.is_empty(), "split {} is empty", a.split);
    let (eval, names, default_dir): (Evaluation, Vec<String>, PathBuf) = match (&a.model, &a.learners) {
        (Some(dir), _) => {
            let model: IntegratedModel<f32> = load_integrated(dir).with_context(|| format!("loading {}", dir.display()))?;
            (evaluate(&model, &data)?, model.class_names().to_vec(), dir.clone())
        }
        (None, Some(dir)) => {
            let names = classes_in(&a.data)?;
            let learners = load_learners(dir, names.len())?;
            let images: Vec<&GrayscaleImage> = data.iter().map(|r| &r.image).collect();
            let truth: Vec<usize> = data.iter().map(|r| r.class_id as usize).collect();
            let predicted = one_vs_rest_predict(&learners, &images)?;
            (evaluate_predictions(&truth, &predicted, names.len())?, names, dir.clone())
        }
        (None, None) => bail!("nothing to evaluate"),
    };
    print!("{}", format_table(&eval, &names));
    let path = a.metrics.unwrap_or_else(|| default_dir.join("metrics.txt"));
    fs::write(&path, format_metrics(&eval)).with_context(|| format!("writing {}", path.display()))?;
    println!("macro_f1={:.6}", eval.metrics.macro_f1);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model: IntegratedModel<f32> = load_integrated(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let images: Vec<GrayscaleImage> = if let Some(h) = &a.hex {
        vec![transform_payload(&hex::decode(h.trim()).context("bad hex payload")?)]
    } else if let Some(path) = &a.manifest {
        read_manifest(open(path)?)?.iter().map(|e| transform_payload(&e.payload)).collect()
    } else if let Some(path) = &a.images {
        read_images(path)?.0.into_iter().map(|r| r.image).collect()
    } else {
        bail!("no input given");
    };
    let refs: Vec<&GrayscaleImage> = images.iter().collect();
    let mut out = std::io::stdout().lock();
    for (i, p) in model.predict_batch(&refs)?.iter().enumerate() {
        let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{i}\t{}\t{}\t{}", p.class_id, p.class_name, probs.join(","))?;
    }
    Ok(())
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    ensure!(a.classes >= 2, "need at least two classes");
    ensure!(a.min_payload >= 1 && a.min_payload <= a.max_payload, "bad payload length range");
    let spec = CorpusSpec { classes: a.classes, packets_per_class: a.packets_per_class, min_payload: a.min_payload, max_payload: a.max_payload, seed };
    let corpus = generate_corpus(&spec)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CAPTURE_FILE), &corpus.pcap)?;
    fs::write(a.out.join(FLOWS_FILE), &corpus.flows_csv)?;
    println!(
        "{} labeled packets in {} classes plus {} decoy frames → {}",
        corpus.packets.len(),
        corpus.class_names.len(),
        corpus.decoys,
        a.out.display()
    );
    Ok(())
}
