//! `adaptok` command-line pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or contract error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use adaptok::calibration::{
    avg_tokens, average_compression, calibrate_thresholds, exact_agreement, max_acceptable_ratio, pearson_r,
    read_score_table, token_accounting, token_reduction_percent, write_score_table, RatioDistribution, RatioSet,
    ScoreHistogram, ScoreRow, Thresholds, DEFAULT_CALIBRATION_TOLERANCE,
};
use adaptok::complexity::{
    dct_complexity, lpips_proxy, mse, psnr_from_mse, read_descriptions, score_description_audited,
    write_descriptions, ComplexityScore, DescriptionRecord, HttpScorer, ScorerBackend,
};
use adaptok::imageio::{quantize_8bit, read_png, write_png};
use adaptok::latentio::{read_latents, write_latents, LatentRecord};
use adaptok::losses::FeatureExtractor;
use adaptok::nestedvae::{reparameterize, Checkpoint, NestedVae, NestedVaeConfig};
use adaptok::trainer::{
    assign_ratios, derive_seed, generate, train_loop, write_assignments, FailurePolicy, LabeledDataset,
    LabeledRecord, ScorerChoice, StratumMix, TrainConfig, TrainOptions,
};
use adaptok::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

pub const THRESHOLDS_HEADER: [&str; 8] = ["rank", "a", "b", "p_f1", "p_f2", "p_f3", "avg_ratio", "entropy"];
pub const ORACLE_HEADER: [&str; 6] = ["id", "mse_f1", "mse_f2", "mse_f3", "tau", "oracle_ratio"];
pub const EVAL_HEADER: [&str; 5] = ["id", "ratio", "mse", "psnr", "lpips_proxy"];
pub const REPORT_HEADER: [&str; 2] = ["metric", "value"];

#[derive(Parser, Debug)]
#[command(name = "adaptok", version, about = "Content-adaptive image tokenizer pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic three-stratum dataset (images/ + descriptions.jsonl).
    Synth(SynthArgs),
    /// Score descriptions and assign ratios (scores.csv).
    Score(ScoreArgs),
    /// Rank threshold pairs for a target average ratio (thresholds.csv).
    Calibrate(CalibrateArgs),
    /// Maximum acceptable ratio per image under a tolerance (oracle.csv).
    Oracle(OracleArgs),
    /// Train a nested VAE (final.catm, metrics.csv, recon.csv).
    Train(TrainArgs),
    /// Encode images into a CATL latent file (latents.catl).
    Encode(EncodeArgs),
    /// Decode a CATL latent file into PNG images (images/).
    Decode(DecodeArgs),
    /// Reconstruction metrics per image and ratio (eval.csv).
    Eval(EvalArgs),
    /// Correlations, agreement, compression and token accounting (report.csv).
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RatiosArg {
    /// Compression ratios f1,f2,f3.
    #[arg(long, default_value = "4,8,16")]
    ratios: RatioSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScorerKind {
    Mock,
    Http,
}

#[derive(Args, Debug)]
struct ScorerArgs {
    #[arg(long, value_enum, default_value = "mock")]
    scorer: ScorerKind,
    /// HTTP scorer endpoint; the bearer token is read from ADAPTOK_SCORER_TOKEN.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 2)]
    retries: usize,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Fail instead of falling back to the mock heuristic when the endpoint stays down.
    #[arg(long)]
    no_fallback: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// JSONL description sidecar.
    #[arg(long)]
    descriptions: PathBuf,
    /// Directory of `<id>.png` images; fills the dct_complexity column.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 75)]
    quality: u8,
    /// Score thresholds a,b; without them the ratio column stays empty.
    #[arg(long)]
    thresholds: Option<Thresholds>,
    #[command(flatten)]
    ratios: RatiosArg,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Score table with a score column.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    target_ratio: f64,
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_TOLERANCE)]
    tolerance: f64,
    #[command(flatten)]
    ratios: RatiosArg,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Score table with mse_f1, mse_f2 and mse_f3 columns.
    #[arg(long)]
    mse: PathBuf,
    #[arg(long)]
    tau: f64,
    #[command(flatten)]
    ratios: RatiosArg,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory with descriptions.jsonl and images/<id>.png.
    #[arg(long)]
    data: PathBuf,
    /// Score table whose ratio column supplies the labels (skips scoring).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Label every image with this ratio instead.
    #[arg(long, conflicts_with = "labels")]
    fixed_ratio: Option<u32>,
    #[arg(long, default_value = "2,4")]
    thresholds: Thresholds,
    /// JSON training config; missing fields take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON model config; missing fields take the desk defaults.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    ratios: Option<RatioSet>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gan_start: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of PNG images; ids are file stems.
    #[arg(long)]
    images: PathBuf,
    /// Encode every image at this ratio.
    #[arg(long)]
    ratio: Option<u32>,
    /// Score table whose ratio column gives each image's ratio.
    #[arg(long, conflicts_with = "ratio")]
    labels: Option<PathBuf>,
    /// Store reparameterized samples instead of mean and log-variance.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    latents: PathBuf,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Reference PNG directory.
    #[arg(long)]
    reference: PathBuf,
    /// Reconstructed PNG directory (compared by file stem).
    #[arg(long, required_unless_present = "checkpoint")]
    recon: Option<PathBuf>,
    /// Latent file whose ratios label the reconstructions.
    #[arg(long, requires = "recon")]
    latents: Option<PathBuf>,
    /// Reconstruct every reference image at every ratio with this checkpoint.
    #[arg(long, conflicts_with = "recon")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Score table (score, ratio, optional mse and dct columns).
    #[arg(long)]
    scores: PathBuf,
    /// Oracle table from `oracle`.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Eval table from `eval`.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    resolution: u32,
    #[arg(long, default_value_t = 1)]
    patch: u32,
    #[command(flatten)]
    ratios: RatiosArg,
    #[command(flatten)]
    out: OutArg,
}

/// Parses `argv` (including the program name) and runs one subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Score(a) => score(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Oracle(a) => oracle(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn out_dir(o: &OutArg) -> Result<&Path> {
    std::fs::create_dir_all(&o.out).map_err(|e| io(&o.out, e))?;
    Ok(&o.out)
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Minimal RFC 4180 writer.
struct Csv {
    path: PathBuf,
    text: String,
}

impl Csv {
    fn new(path: PathBuf, header: &[&str]) -> Self {
        let mut c = Csv { path, text: String::new() };
        c.row(header.iter().map(|s| s.to_string()));
        c
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, cells: I) {
        let cells: Vec<String> = cells
            .into_iter()
            .map(|c| {
                if c.contains([',', '"', '\n', '\r']) {
                    format!("\"{}\"", c.replace('"', "\"\""))
                } else {
                    c
                }
            })
            .collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    fn finish(self) -> Result<()> {
        std::fs::write(&self.path, self.text).map_err(|e| io(&self.path, e))
    }
}

/// Reads a headed CSV into rows keyed by column name (quoted cells allowed).
fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = split_csv_line(lines.next().ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?);
    lines
        .enumerate()
        .map(|(i, l)| {
            let cells = split_csv_line(l);
            if cells.len() != header.len() {
                return Err(Error::Parse(format!(
                    "{} line {}: {} cells, header has {}",
                    path.display(),
                    i + 2,
                    cells.len(),
                    header.len()
                )));
            }
            Ok(header.iter().cloned().zip(cells).collect())
        })
        .collect()
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut cells = vec![String::new()];
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match (ch, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                chars.next();
                cells.last_mut().expect("nonempty").push('"');
            }
            ('"', _) => quoted = !quoted,
            (',', false) => cells.push(String::new()),
            (c, _) => cells.last_mut().expect("nonempty").push(c),
        }
    }
    cells
}

fn parse_cell<T: std::str::FromStr>(row: &BTreeMap<String, String>, col: &str, path: &Path) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match row.get(col).map(|s| s.trim()) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|e| Error::Parse(format!("{}: column {col}: {s:?}: {e}", path.display()))),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// PNG files in `dir` sorted by file stem.
fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let p = entry.map_err(|e| io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let id = p.file_stem().expect("has a name").to_string_lossy().into_owned();
            out.push((id, p));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Contract(format!("{}: no PNG images", dir.display())));
    }
    Ok(out)
}

fn synth(a: SynthArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| io(&images, e))?;
    let items = generate(a.count, a.resolution, a.seed, StratumMix::default())?;
    for it in &items {
        write_png(&images.join(format!("{}.png", it.id)), &it.image)?;
    }
    write_descriptions(&dir.join("descriptions.jsonl"), &items.iter().map(|i| i.record()).collect::<Vec<_>>())?;
    let mut strata = Csv::new(dir.join("strata.csv"), &["id", "stratum"]);
    for it in &items {
        strata.row([it.id.clone(), it.stratum.name().to_string()]);
    }
    strata.finish()
}

struct Scoring {
    http: Option<HttpScorer>,
    retries: usize,
    on_failure: FailurePolicy,
}

impl Scoring {
    fn from_args(a: &ScorerArgs) -> Result<Self> {
        let http = match a.scorer {
            ScorerKind::Mock => None,
            ScorerKind::Http => {
                let ep = a
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("--scorer http needs --endpoint".into()))?;
                Some(HttpScorer::new(ep, Duration::from_secs(a.timeout_secs)))
            }
        };
        Ok(Scoring {
            http,
            retries: a.retries,
            on_failure: if a.no_fallback {
                FailurePolicy::Fail
            } else {
                FailurePolicy::FallBackToMock
            },
        })
    }

    fn choice(&self) -> ScorerChoice<'_> {
        match &self.http {
            None => ScorerChoice::Mock,
            Some(h) => ScorerChoice::Backend {
                backend: h as &dyn ScorerBackend,
                retries: self.retries,
                on_failure: self.on_failure,
            },
        }
    }
}

fn score(a: ScoreArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let records = read_descriptions(&a.descriptions)?;
    let scoring = Scoring::from_args(&a.scorer)?;
    let scores: Vec<(ComplexityScore, bool)> = match &scoring.http {
        None => records
            .iter()
            .map(|r| Ok((adaptok::complexity::heuristic_mock_score(&r.description()?), false)))
            .collect::<Result<_>>()?,
        Some(h) => {
            let mut audit = String::new();
            let mut out = Vec::with_capacity(records.len());
            for r in &records {
                let d = r.description()?;
                let (s, fell_back, responses) = match score_description_audited(&d, h, scoring.retries) {
                    Ok(au) => (au.score, false, au.responses),
                    Err(e @ Error::ScoringUnavailable { .. }) if scoring.on_failure == FailurePolicy::FallBackToMock => {
                        log::warn!("{}: {e}; using the mock heuristic", r.id);
                        (adaptok::complexity::heuristic_mock_score(&d), true, Vec::new())
                    }
                    Err(e) => return Err(e),
                };
                let responses: Vec<serde_json::Value> = responses
                    .into_iter()
                    .map(|x| match x {
                        Ok(t) => serde_json::json!({ "response": t }),
                        Err(e) => serde_json::json!({ "error": e }),
                    })
                    .collect();
                audit.push_str(
                    &serde_json::json!({ "id": r.id, "score": s.value(), "fell_back": fell_back, "attempts": responses })
                        .to_string(),
                );
                audit.push('\n');
                out.push((s, fell_back));
            }
            let p = dir.join("score_audit.jsonl");
            std::fs::write(&p, audit).map_err(|e| io(&p, e))?;
            out
        }
    };
    let rows = records
        .iter()
        .zip(scores)
        .map(|(r, (s, _))| {
            let mut row = ScoreRow::new(r.id.clone());
            row.score = Some(s.value());
            row.ratio = a
                .thresholds
                .map(|t| adaptok::calibration::classify_ratio(s, t, a.ratios.ratios));
            if let Some(images) = &a.images {
                let img = read_png(&images.join(format!("{}.png", r.id)))?;
                row.dct_complexity = Some(dct_complexity(&img, a.quality)?);
            }
            row.flag_missing();
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    write_score_table(&dir.join("scores.csv"), &rows)
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let rows = read_score_table(&a.scores)?;
    let scores = rows
        .iter()
        .map(|r| {
            let s = r
                .score
                .ok_or_else(|| Error::Contract(format!("{}: row {} has no score", a.scores.display(), r.id)))?;
            ComplexityScore::new(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let hist = ScoreHistogram::from_scores(scores);
    if hist.total() == 0 {
        return Err(Error::Contract(format!("{}: no scores", a.scores.display())));
    }
    let cal = calibrate_thresholds(&hist, a.ratios.ratios, a.target_ratio, a.tolerance)?;
    let mut csv = Csv::new(dir.join("thresholds.csv"), &THRESHOLDS_HEADER);
    for (i, c) in cal.ranked.iter().enumerate() {
        let [p1, p2, p3] = c.distribution.as_array();
        csv.row([
            (i + 1).to_string(),
            c.thresholds.a.to_string(),
            c.thresholds.b.to_string(),
            fmt_f64(p1),
            fmt_f64(p2),
            fmt_f64(p3),
            fmt_f64(c.achieved),
            fmt_f64(c.entropy),
        ]);
    }
    csv.finish()?;
    match cal.diagnostic {
        Some(d) => Err(Error::Contract(d)),
        None => Ok(()),
    }
}

fn oracle(a: OracleArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    if !(a.tau.is_finite() && a.tau > 0.0) {
        return Err(Error::Config(format!("--tau must be positive, got {}", a.tau)));
    }
    let rows = read_score_table(&a.mse)?;
    let mut csv = Csv::new(dir.join("oracle.csv"), &ORACLE_HEADER);
    for r in &rows {
        let mut m = BTreeMap::new();
        for (f, v) in a.ratios.ratios.as_array().into_iter().zip(r.mse) {
            let v = v.ok_or_else(|| Error::Contract(format!("row {}: missing MSE for ratio {f}", r.id)))?;
            m.insert(f, v);
        }
        let best = max_acceptable_ratio(&m, a.tau)?;
        let mut cells = vec![r.id.clone()];
        cells.extend(m.values().map(|v| fmt_f64(*v)));
        cells.push(fmt_f64(a.tau));
        cells.push(best.to_string());
        csv.row(cells);
    }
    csv.finish()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn ratio_labels(path: &Path) -> Result<BTreeMap<String, u32>> {
    read_score_table(path)?
        .into_iter()
        .map(|r| {
            let f = r
                .ratio
                .ok_or_else(|| Error::Contract(format!("{}: row {} has no ratio", path.display(), r.id)))?;
            Ok((r.id, f))
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let mut mc: NestedVaeConfig = match &a.model_config {
        Some(p) => read_json(p)?,
        None => NestedVaeConfig::desk(),
    };
    if let Some(r) = a.ratios {
        mc.ratios = r;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
        cfg.gan_start_step = cfg.gan_start_step.min(s);
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(g) = a.gan_start {
        cfg.gan_start_step = g;
    }
    if let Some(k) = a.checkpoint_every {
        cfg.checkpoint_every = k;
    }
    mc.validate()?;
    cfg.validate()?;

    let descriptions: Vec<DescriptionRecord> = read_descriptions(&a.data.join("descriptions.jsonl"))?;
    let ratios: Vec<u32> = if let Some(f) = a.fixed_ratio {
        if !mc.ratios.contains(f) {
            return Err(Error::Config(format!("--fixed-ratio {f} not in {}", mc.ratios)));
        }
        vec![f; descriptions.len()]
    } else if let Some(p) = &a.labels {
        let labels = ratio_labels(p)?;
        descriptions
            .iter()
            .map(|d| {
                labels
                    .get(&d.id)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("{}: no label for {}", p.display(), d.id)))
            })
            .collect::<Result<_>>()?
    } else {
        let scoring = Scoring::from_args(&a.scorer)?;
        let assigned = assign_ratios(&descriptions, &scoring.choice(), a.thresholds, mc.ratios)?;
        write_assignments(&dir.join("labels.csv"), &assigned)?;
        assigned.into_iter().map(|x| x.ratio).collect()
    };
    let records = descriptions
        .iter()
        .zip(ratios)
        .map(|(d, ratio)| {
            Ok(LabeledRecord {
                id: d.id.clone(),
                image: read_png(&a.data.join("images").join(format!("{}.png", d.id)))?,
                description: d.description()?,
                ratio,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = LabeledDataset { records };
    let outcome = train_loop(
        &dataset,
        &mc,
        &cfg,
        &TrainOptions {
            checkpoint_dir: dir.to_path_buf(),
            resume_from: a.resume.clone(),
        },
    )?;
    log::info!(
        "trained to step {}; adapter updates {:?}",
        outcome.trainer.step,
        outcome.trainer.adapter_updates
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<NestedVae<f32>> {
    Checkpoint::load(path)?.into_model()
}

fn encode(a: EncodeArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let model = load_model(&a.checkpoint)?;
    let labels = a.labels.as_deref().map(ratio_labels).transpose()?;
    let mut records = Vec::new();
    for (i, (id, path)) in list_pngs(&a.images)?.into_iter().enumerate() {
        let ratio = match (&labels, a.ratio) {
            (Some(l), _) => *l
                .get(&id)
                .ok_or_else(|| Error::Contract(format!("no ratio label for image {id}")))?,
            (None, Some(f)) => f,
            (None, None) => model.config.ratios.f2,
        };
        let d = model.encode(&read_png(&path)?, ratio)?;
        records.push(if a.sample {
            LatentRecord::from_sample(id, reparameterize(&d, derive_seed(a.seed, 0, i as u64, 0)))
        } else {
            LatentRecord::from_distribution(id, d)
        });
    }
    write_latents(&records, &dir.join("latents.catl"))?;
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let dir = out_dir(&a.out)?.join("images");
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let model = load_model(&a.checkpoint)?;
    for rec in read_latents(&a.latents)? {
        let img = model.decode(&rec.sample())?;
        write_png(&dir.join(format!("{}.png", rec.id)), &img)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let ext = FeatureExtractor::<f32>::new(adaptok::losses::DEFAULT_EXTRACTOR_SEED);
    let mut csv = Csv::new(dir.join("eval.csv"), &EVAL_HEADER);
    let mut push = |id: &str, ratio: Option<u32>, x: &adaptok::backend::Tensor<f32>, y: &adaptok::backend::Tensor<f32>| -> Result<()> {
        let m = mse(x, y)?;
        csv.row([
            id.to_string(),
            opt(ratio),
            fmt_f64(m),
            fmt_f64(psnr_from_mse(m)),
            fmt_f64(lpips_proxy(&ext, x, y)?),
        ]);
        Ok(())
    };
    let refs = list_pngs(&a.reference)?;
    if let Some(ck) = &a.checkpoint {
        let model = load_model(ck)?;
        for (id, path) in &refs {
            let x = read_png(path)?;
            for f in model.config.ratios.as_array() {
                let d = model.encode(&x, f)?;
                let y = quantize_8bit(&model.decode(&adaptok::nestedvae::LatentSample { z: d.mu, ratio: f })?);
                push(id, Some(f), &x, &y)?;
            }
        }
    } else {
        let recon = a.recon.as_ref().expect("clap requires --recon without --checkpoint");
        let ratios: BTreeMap<String, u32> = match &a.latents {
            Some(p) => read_latents(p)?.into_iter().map(|r| (r.id, r.ratio)).collect(),
            None => BTreeMap::new(),
        };
        for (id, path) in &refs {
            let rp = recon.join(format!("{id}.png"));
            if !rp.exists() {
                return Err(Error::Contract(format!("no reconstruction {} for {id}", rp.display())));
            }
            push(id, ratios.get(id).copied(), &read_png(path)?, &read_png(&rp)?)?;
        }
    }
    csv.finish()
}

fn report(a: ReportArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let ratios = a.ratios.ratios;
    let rows = read_score_table(&a.scores)?;
    let mut out = Csv::new(dir.join("report.csv"), &REPORT_HEADER);
    let mut put = |k: &str, v: String| out.row([k.to_string(), v]);
    put("n_images", rows.len().to_string());

    let oracle: Option<BTreeMap<String, u32>> = match &a.oracle {
        Some(p) => Some(
            read_csv(p)?
                .iter()
                .map(|r| {
                    let id = r.get("id").cloned().unwrap_or_default();
                    let f = parse_cell::<u32>(r, "oracle_ratio", p)?
                        .ok_or_else(|| Error::Contract(format!("{}: {id} lacks oracle_ratio", p.display())))?;
                    Ok((id, f))
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    // Pearson correlation for every pair of fully populated numeric columns.
    let mut columns: Vec<(&str, Vec<Option<f64>>)> = vec![
        ("score", rows.iter().map(|r| r.score.map(|v| v as f64)).collect()),
        ("dct_complexity", rows.iter().map(|r| r.dct_complexity.map(|v| v as f64)).collect()),
        ("mse_f1", rows.iter().map(|r| r.mse[0]).collect()),
        ("mse_f2", rows.iter().map(|r| r.mse[1]).collect()),
        ("mse_f3", rows.iter().map(|r| r.mse[2]).collect()),
    ];
    if let Some(o) = &oracle {
        columns.push(("oracle_ratio", rows.iter().map(|r| o.get(&r.id).map(|&f| f as f64)).collect()));
    }
    let full: Vec<(&str, Vec<f64>)> = columns
        .into_iter()
        .filter_map(|(name, v)| v.into_iter().collect::<Option<Vec<f64>>>().map(|v| (name, v)))
        .collect();
    for i in 0..full.len() {
        for j in i + 1..full.len() {
            let key = format!("pearson_{}_{}", full[i].0, full[j].0);
            match pearson_r(&full[i].1, &full[j].1) {
                Ok(r) => put(&key, fmt_f64(r)),
                Err(Error::UndefinedCorrelation(_)) => put(&key, String::new()),
                Err(e) => return Err(e),
            }
        }
    }

    let assigned: Option<Vec<u32>> = rows.iter().map(|r| r.ratio).collect();
    if let (Some(o), Some(assigned)) = (&oracle, &assigned) {
        let oracle_seq = rows
            .iter()
            .map(|r| {
                o.get(&r.id)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("oracle table lacks {}", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        put("exact_agreement_percent", fmt_f64(exact_agreement(assigned, &oracle_seq)?));
    }
    if let Some(assigned) = &assigned {
        if !assigned.is_empty() {
            let dist = RatioDistribution::from_labels(assigned, ratios)?;
            let [p1, p2, p3] = dist.as_array();
            put("p_f1", fmt_f64(p1));
            put("p_f2", fmt_f64(p2));
            put("p_f3", fmt_f64(p3));
            put("average_compression", fmt_f64(average_compression(dist, ratios)));
            let tokens = avg_tokens(dist, a.resolution, ratios, a.patch)?;
            let baseline = token_accounting(a.resolution, ratios.f2, a.patch)? as f64;
            put("avg_tokens", fmt_f64(tokens));
            put("baseline_tokens_f2", fmt_f64(baseline));
            put("token_reduction_percent", fmt_f64(token_reduction_percent(tokens, baseline)));
        }
    }
    if let Some(p) = &a.eval {
        let ev = read_csv(p)?;
        for col in ["mse", "psnr", "lpips_proxy"] {
            let vals = ev
                .iter()
                .map(|r| parse_cell::<f64>(r, col, p)?.ok_or_else(|| Error::Parse(format!("{}: empty {col}", p.display()))))
                .collect::<Result<Vec<_>>>()?;
            if !vals.is_empty() {
                put(&format!("mean_{col}"), fmt_f64(vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
    }
    out.finish()
}
