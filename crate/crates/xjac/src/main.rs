//! xjac: train small Siamese encoders, decompose their pair predictions into
//! token-token attribution matrices, sweep approximation errors, and analyze
//! attribution statistics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use xjac::analysis::{
    attribution_histogram, cumulative_prediction_curve, load_tags_file, pos_relation_shares,
    TaggedSentence, WordAttribution,
};
use xjac::attribution::{
    attribute, convergence_sweep, AttributionOptions, AttributionOutput, Scheme,
};
use xjac::checkpoint::{load_checkpoint, save_checkpoint};
use xjac::error::{Error, Result};
use xjac::manifest::{write_atomic, RunManifest};
use xjac::model::ScoreMode;
use xjac::svg::render_heatmap;
use xjac::train::{evaluate, load_dataset, train, Objective, Pair, TrainConfig};
use xjac::{tokenize, EncoderConfig, SiameseModel, Vocabulary};

#[derive(Parser)]
#[command(
    name = "xjac",
    version,
    about = "Feature-pair attribution for Siamese text encoders via integrated Jacobians"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a toy Siamese encoder on a scored pair TSV.
    Train(TrainArgs),
    /// Attribute one pair prediction to token pairs at a hook layer.
    Attribute(AttributeArgs),
    /// Attribution error as a function of layer and step count.
    Sweep(SweepArgs),
    /// Statistics over a directory of attribution JSON files.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training TSV: text_a<TAB>text_b<TAB>score, scores in [0,1].
    #[arg(long)]
    data: String,
    /// Held-out TSV for the printed Spearman numbers (defaults to --data).
    #[arg(long)]
    eval_data: Option<String>,
    /// JSON file with {"encoder": {...}, "train": {...}} overrides.
    #[arg(long)]
    config: Option<String>,
    /// Training objective: dot (shifted embeddings) or cosine (raw).
    #[arg(long)]
    objective: Option<String>,
    /// Force shifted/unshifted scoring (cosine with shift is refused).
    #[arg(long)]
    shifted: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Checkpoint output path (JSON).
    #[arg(long)]
    out: String,
    /// Loss trace CSV path (defaults to <out>.loss.csv).
    #[arg(long)]
    loss_csv: Option<String>,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    text_a: String,
    #[arg(long)]
    text_b: String,
    /// Hook layer; defaults to the deepest layer L.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value = "midpoint")]
    scheme: String,
    /// Interpolation steps evaluated per batch.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Attribution JSON output path.
    #[arg(long)]
    out: String,
    /// Optional SVG heatmap path.
    #[arg(long)]
    svg: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: String,
    /// Pair TSV whose text pairs are attributed.
    #[arg(long)]
    data: String,
    /// Comma-separated hook layers, e.g. 1,2,3.
    #[arg(long)]
    layers: String,
    /// Comma-separated step counts, e.g. 10,100,1000.
    #[arg(long)]
    steps: String,
    #[arg(long, default_value = "midpoint")]
    scheme: String,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Use only the first N pairs of the dataset.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    what: AnalyzeCommand,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Histogram of token-token attribution values.
    Hist(HistArgs),
    /// Mean cumulative prediction curve over |value|-sorted cells.
    Curve(CurveArgs),
    /// POS-relation shares among the top attributions.
    Pos(PosArgs),
}

#[derive(Args)]
struct HistArgs {
    /// Directory of attribution JSON files.
    #[arg(long)]
    inputs: String,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Layer filter; defaults to the layer of the first input.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    inputs: String,
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct PosArgs {
    #[arg(long)]
    inputs: String,
    /// CoNLL-like tags file: word<TAB>tag lines, blank line between
    /// sentences; two sentences (a then b) per attribution, in input order.
    #[arg(long)]
    tags: String,
    #[arg(long, default_value = "0.1,0.25,0.5")]
    fractions: String,
    #[arg(long)]
    out: String,
}

fn main() -> ExitCode {
    xjac::configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Attribute(args) => cmd_attribute(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Analyze(args) => match args.what {
            AnalyzeCommand::Hist(a) => cmd_analyze_hist(a),
            AnalyzeCommand::Curve(a) => cmd_analyze_curve(a),
            AnalyzeCommand::Pos(a) => cmd_analyze_pos(a),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(Module(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

enum CliError {
    Usage(String),
    Module(Error),
}
use CliError::{Module, Usage};

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        Module(e)
    }
}

type CliResult = std::result::Result<(), CliError>;

#[derive(Deserialize, Default)]
struct FileConfig {
    encoder: Option<EncoderConfig>,
    train: Option<TrainConfig>,
}

fn load_file_config(path: &Option<String>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let file_config = load_file_config(&args.config)?;
    let mut train_cfg = file_config.train.unwrap_or_default();
    let mut encoder_cfg = file_config.encoder.unwrap_or_default();
    if let Some(obj) = &args.objective {
        train_cfg.objective = Objective::from_str(obj)?;
    }
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    if let Some(batch) = args.batch {
        train_cfg.batch_size = batch;
    }
    let shifted = args
        .shifted
        .unwrap_or(train_cfg.objective == Objective::Dot);
    if train_cfg.objective == Objective::Cosine && shifted {
        return Err(Usage(
            "cosine scoring over shifted embeddings is refused: the reference input maps to \
             the zero vector and normalizing it is undefined; use --objective dot or \
             --shifted false"
                .into(),
        ));
    }
    encoder_cfg.adjusted = shifted;

    let data = load_dataset(&args.data)?;
    let texts: Vec<&str> = data
        .iter()
        .flat_map(|p| [p.text_a.as_str(), p.text_b.as_str()])
        .collect();
    let vocab = Vocabulary::build(&texts, 1)?;
    let mut model = SiameseModel::new(encoder_cfg, vocab, train_cfg.seed)?;

    let mut manifest = RunManifest::start(
        "train",
        json!({
            "data": args.data,
            "eval_data": args.eval_data,
            "objective": train_cfg.objective,
            "train": serde_json::to_value(&train_cfg).map_err(Error::from)?,
            "encoder": serde_json::to_value(&model.config).map_err(Error::from)?,
        }),
        Some(train_cfg.seed),
    );
    manifest.input(&args.data);

    let report = train(&mut model, &data, &train_cfg)?;
    save_checkpoint(&model, &args.out)?;
    manifest.output(&args.out);

    let loss_path = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| format!("{}.loss.csv", args.out));
    let mut csv = String::from("epoch,mean_loss\n");
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    write_atomic(&loss_path, csv.as_bytes())?;
    manifest.output(&loss_path);

    let eval_pairs: Vec<Pair> = match &args.eval_data {
        Some(path) => {
            manifest.input(path);
            load_dataset(path)?
        }
        None => data,
    };
    let shifted_scoring = model.config.adjusted;
    let rho_cos = evaluate(&model, &eval_pairs, ScoreMode::Cosine, shifted_scoring)?;
    let rho_dot = evaluate(&model, &eval_pairs, ScoreMode::Dot, shifted_scoring)?;

    println!(
        "final train loss: {}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("eval spearman (cosine): {rho_cos}");
    println!("eval spearman (dot): {rho_dot}");

    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_attribute(args: AttributeArgs) -> CliResult {
    let model = load_checkpoint(&args.model)?;
    let layer = args.layer.unwrap_or(model.config.layers);
    let scheme = Scheme::from_str(&args.scheme)?;
    let opts = AttributionOptions {
        steps: args.steps,
        scheme,
        batch: args.batch,
        full_matrix: false,
    };

    let mut manifest = RunManifest::start(
        "attribute",
        json!({
            "model": args.model,
            "text_a": args.text_a,
            "text_b": args.text_b,
            "layer": layer,
            "steps": args.steps,
            "scheme": scheme,
            "batch": args.batch,
        }),
        None,
    );
    manifest.input(&args.model);

    let a = tokenize(&args.text_a, &model.vocab)?;
    let b = tokenize(&args.text_b, &model.vocab)?;
    let output = attribute(&model, &a, &b, layer, &opts)?;
    write_atomic(&args.out, output.to_json_string()?.as_bytes())?;
    manifest.output(&args.out);

    if let Some(svg_path) = &args.svg {
        write_atomic(svg_path, render_heatmap(&output).as_bytes())?;
        manifest.output(svg_path);
    }
    println!(
        "score {}  attribution sum {}  error {}",
        output.score, output.attribution_sum, output.error
    );
    manifest.finish(&args.out)?;
    Ok(())
}

fn parse_usize_list(text: &str, what: &str) -> std::result::Result<Vec<usize>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<usize>()
                .map_err(|_| Usage(format!("invalid {what} entry {part:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(Usage(format!("empty {what} list")));
    }
    Ok(out)
}

fn cmd_sweep(args: SweepArgs) -> CliResult {
    let model = load_checkpoint(&args.model)?;
    let scheme = Scheme::from_str(&args.scheme)?;
    let layers = parse_usize_list(&args.layers, "layer")?;
    let steps = parse_usize_list(&args.steps, "steps")?;
    let data = load_dataset(&args.data)?;
    let limit = args.pairs.unwrap_or(data.len()).min(data.len());

    let mut manifest = RunManifest::start(
        "sweep",
        json!({
            "model": args.model,
            "data": args.data,
            "layers": layers,
            "steps": steps,
            "scheme": scheme,
            "batch": args.batch,
            "pairs": limit,
        }),
        None,
    );
    manifest.input(&args.model);
    manifest.input(&args.data);

    let mut pairs = Vec::with_capacity(limit);
    for p in data.iter().take(limit) {
        pairs.push((
            tokenize(&p.text_a, &model.vocab)?,
            tokenize(&p.text_b, &model.vocab)?,
        ));
    }
    let rows = convergence_sweep(&model, &pairs, &layers, &steps, scheme, args.batch)?;
    let mut csv = String::from("layer,steps,mean_abs_error,std_abs_error,mean_rel_error\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.layer, row.steps, row.mean_abs_error, row.std_abs_error, row.mean_rel_error
        ));
    }
    write_atomic(&args.out, csv.as_bytes())?;
    manifest.output(&args.out);
    manifest.finish(&args.out)?;
    Ok(())
}

/// Attribution JSONs from a directory, sorted by file name.
fn load_outputs(dir: &str) -> Result<Vec<AttributionOutput>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "json")
                && !p
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().ends_with(".manifest.json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(dir.to_string()));
    }
    let mut outputs = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(&path)?;
        outputs.push(AttributionOutput::from_json_str(&text)?);
    }
    Ok(outputs)
}

fn cmd_analyze_hist(args: HistArgs) -> CliResult {
    let outputs = load_outputs(&args.inputs)?;
    let layer = args.layer.unwrap_or(outputs[0].layer);
    let mut manifest = RunManifest::start(
        "analyze hist",
        json!({"inputs": args.inputs, "bins": args.bins, "layer": layer}),
        None,
    );
    manifest.input(&args.inputs);
    let hist = attribution_histogram(&outputs, layer, args.bins)?;
    let mut csv = String::from("bin_lo,bin_hi,count,negative_fraction\n");
    for bin in &hist.bins {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            bin.lo, bin.hi, bin.count, hist.negative_fraction
        ));
    }
    write_atomic(&args.out, csv.as_bytes())?;
    manifest.output(&args.out);
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_analyze_curve(args: CurveArgs) -> CliResult {
    let outputs = load_outputs(&args.inputs)?;
    let mut manifest = RunManifest::start("analyze curve", json!({"inputs": args.inputs}), None);
    manifest.input(&args.inputs);
    let curve = cumulative_prediction_curve(&outputs)?;
    let endpoint_mean = curve.endpoints.iter().sum::<f64>() / curve.endpoints.len() as f64;
    let mut csv = String::from("fraction,mean_cumulative,std_cumulative,endpoint\n");
    for ((f, m), s) in curve.fractions.iter().zip(&curve.mean).zip(&curve.std) {
        csv.push_str(&format!("{},{},{},{}\n", f, m, s, endpoint_mean));
    }
    write_atomic(&args.out, csv.as_bytes())?;
    manifest.output(&args.out);
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_analyze_pos(args: PosArgs) -> CliResult {
    let outputs = load_outputs(&args.inputs)?;
    let sentences = load_tags_file(&args.tags)?;
    if sentences.len() != 2 * outputs.len() {
        return Err(Module(Error::MissingTag(format!(
            "tags file has {} sentences, expected {} (two per attribution)",
            sentences.len(),
            2 * outputs.len()
        ))));
    }
    let fractions: Vec<f64> = {
        let mut fs = Vec::new();
        for part in args.fractions.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            fs.push(
                part.parse::<f64>()
                    .map_err(|_| Usage(format!("invalid fraction {part:?}")))?,
            );
        }
        fs
    };

    let mut manifest = RunManifest::start(
        "analyze pos",
        json!({"inputs": args.inputs, "tags": args.tags, "fractions": fractions}),
        None,
    );
    manifest.input(&args.inputs);
    manifest.input(&args.tags);

    let mut items = Vec::with_capacity(outputs.len());
    for (i, output) in outputs.iter().enumerate() {
        let (words_a, tags_a) = &sentences[2 * i];
        let (words_b, tags_b) = &sentences[2 * i + 1];
        check_tokens_match(&output.tokens_a, words_a, i)?;
        check_tokens_match(&output.tokens_b, words_b, i)?;
        let ta = TaggedSentence::one_to_one(words_a.clone(), tags_a.clone())?;
        let tb = TaggedSentence::one_to_one(words_b.clone(), tags_b.clone())?;
        items.push(WordAttribution::from_output(output, &ta, &tb)?);
    }
    let rows = pos_relation_shares(&items, &fractions)?;
    let mut csv = String::from("fraction,tag_a,tag_b,share\n");
    for row in &rows {
        for ((ta, tb), share) in &row.shares {
            csv.push_str(&format!("{},{},{},{}\n", row.fraction, ta, tb, share));
        }
    }
    write_atomic(&args.out, csv.as_bytes())?;
    manifest.output(&args.out);
    manifest.finish(&args.out)?;
    Ok(())
}

fn check_tokens_match(tokens: &[String], words: &[String], example: usize) -> Result<()> {
    if tokens.len() != words.len() {
        return Err(Error::BadAlignment(format!(
            "attribution {example}: {} tokens but {} tagged words",
            tokens.len(),
            words.len()
        )));
    }
    for (tok, word) in tokens.iter().zip(words) {
        if tok != &word.to_lowercase() {
            return Err(Error::BadAlignment(format!(
                "attribution {example}: token {tok:?} does not match tagged word {word:?}"
            )));
        }
    }
    Ok(())
}
