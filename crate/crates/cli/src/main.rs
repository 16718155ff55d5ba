use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sail_core::analysis::{
    caption_loss_retrieval, image_attention_allocation, linear_probe, permute_weights, DistractorPolicy, ProbeConfig,
};
use sail_core::config::{run_training, RunConfig};
use sail_core::image::Image;
use sail_core::manifest::load_manifest;
use sail_core::model::checkpoint::Checkpoint;
use sail_core::model::{generate, Decoding, Model, ModelConfig, Preset};
use sail_core::patch::{patchify, PatchGrid, ResizePolicy};
use sail_core::sequence::{assemble_prompt, assemble_sequence, pack_sequences, LayoutConfig, MultimodalSequence, PackedBatch, Token};
use sail_core::synth::{write_dataset, ShapeKind, SyntheticSample, SyntheticSpec};
use sail_core::tokenizer::tokenize;
use sail_core::train::{Ablation, StageData};

#[derive(Parser)]
#[command(name = "sail", version, about = "Single-transformer vision-language experiments")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML file: run config for `train`, corpus spec for `gen-data`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic image-caption corpus.
    GenData(GenData),
    /// Run the stages of a training config.
    Train,
    /// Caption an image or continue a prompt.
    Generate(GenerateArgs),
    /// Per-layer share of attention that generated tokens put on image positions.
    AnalyzeAttn(AnalyzeArgs),
    /// Attention-pooled linear probe on frozen patch features.
    Probe(ProbeArgs),
    /// Caption-loss image-text retrieval.
    Retrieve(RetrieveArgs),
    /// Dump masks, spans and position ids of packed sequences.
    PackInspect(PackArgs),
    /// Finite-difference check of the model's gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    count: Option<usize>,
    /// Square image side.
    #[arg(long)]
    size: Option<usize>,
    /// Number of shape classes (2 to 10).
    #[arg(long)]
    classes: Option<usize>,
    /// Two-object scenes with left/right captions.
    #[arg(long)]
    relation: bool,
    /// Random image sides in MIN:MAX.
    #[arg(long, value_name = "MIN:MAX")]
    anyres: Option<String>,
    #[arg(long)]
    text_lines: Option<usize>,
}

#[derive(Args)]
struct ModelSource {
    #[arg(long, conflicts_with = "preset")]
    checkpoint: Option<PathBuf>,
    /// Freshly initialized model (with --seed) instead of a checkpoint.
    #[arg(long)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Text appended after the image.
    #[arg(long, default_value = "")]
    prompt: String,
    /// `native` or a square side.
    #[arg(long, default_value = "32")]
    resize: String,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    #[arg(long, default_value = "32")]
    resize: String,
    /// Layer range `A..B`.
    #[arg(long)]
    layers: Option<String>,
    /// Average per-head fractions instead of head-averaged attention rows.
    #[arg(long)]
    per_head: bool,
    #[arg(long, default_value = "model")]
    tag: String,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value = "32")]
    resize: String,
    /// Probe a copy with randomly permuted weights.
    #[arg(long)]
    permuted: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = ["shuffled", "cross"], default_value = "shuffled")]
    policy: String,
    #[arg(long, default_value_t = 1)]
    distractors: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "32")]
    resize: String,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pack_len: usize,
    #[arg(long, default_value = "32")]
    resize: String,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    #[arg(long, default_value_t = 4)]
    max_packs: usize,
    #[arg(long)]
    causal_only: bool,
    #[arg(long)]
    vision_sep_1d: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "tiny")]
    preset: Preset,
    /// Sampled entries per parameter tensor.
    #[arg(long, default_value_t = 4)]
    entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    let out = cli.out.clone();
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.config.as_deref(), seed.unwrap_or(0), out),
        Command::Train => train(cli.config.as_deref(), seed, out),
        Command::Generate(a) => generate_cmd(a, seed.unwrap_or(0)),
        Command::AnalyzeAttn(a) => analyze(a, seed.unwrap_or(0), out.as_deref()),
        Command::Probe(a) => probe(a, seed.unwrap_or(0)),
        Command::Retrieve(a) => retrieve(a, seed.unwrap_or(0)),
        Command::PackInspect(a) => pack_inspect(a, seed.unwrap_or(0), out),
        Command::GradCheck(a) => grad_check(a, seed.unwrap_or(0)),
    }
}

fn parse_resize(s: &str) -> Result<ResizePolicy> {
    if s == "native" {
        return Ok(ResizePolicy::NativeMultiple);
    }
    let side = s.parse().map_err(|_| anyhow!("--resize takes `native` or a pixel size, got `{s}`"))?;
    Ok(ResizePolicy::Fixed(side))
}

fn parse_range(s: &str) -> Result<Range<usize>> {
    let (a, b) = s
        .split_once("..")
        .or_else(|| s.split_once(':'))
        .ok_or_else(|| anyhow!("layer range must look like A..B, got `{s}`"))?;
    Ok(a.trim().parse()?..b.trim().parse()?)
}

fn load_model(src: &ModelSource, seed: u64) -> Result<Model<f32>> {
    match (&src.checkpoint, src.preset) {
        (Some(path), _) => {
            let ck = Checkpoint::<f32>::load(path, None).with_context(|| format!("loading {}", path.display()))?;
            Ok(Model::from_params(ck.config, ck.params)?)
        }
        (None, Some(p)) => Ok(Model::init(ModelConfig::preset(p), seed)?),
        (None, None) => bail!("give --checkpoint or --preset"),
    }
}

fn grids(manifest: &Path, model: &ModelConfig, resize: ResizePolicy) -> Result<Vec<(PatchGrid, String, Option<usize>)>> {
    resize.validate(model.patch_size)?;
    load_manifest(manifest)?
        .into_iter()
        .map(|s| {
            let g = patchify(&s.load_image()?, model.patch_size, resize)?;
            Ok((g, s.caption, s.label))
        })
        .collect()
}

fn gen_data(a: GenData, config: Option<&Path>, seed: u64, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut spec = match config {
        Some(p) => toml::from_str::<SyntheticSpec>(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(c) = a.count {
        spec.count = c;
    }
    if let Some(s) = a.size {
        spec.image_size = s;
    }
    if let Some(k) = a.classes {
        if !(2..=ShapeKind::ALL.len()).contains(&k) {
            bail!("--classes must be between 2 and {}", ShapeKind::ALL.len());
        }
        spec.shapes = ShapeKind::ALL[..k].to_vec();
    }
    if a.relation {
        spec.relation = true;
    }
    if let Some(r) = &a.anyres {
        let (lo, hi) = r.split_once(':').ok_or_else(|| anyhow!("--anyres takes MIN:MAX"))?;
        spec.size_range = Some((lo.parse()?, hi.parse()?));
    }
    if let Some(t) = a.text_lines {
        spec.text_lines = t;
    }
    let dir = out.unwrap_or_else(|| PathBuf::from("data"));
    let written = write_dataset(&spec, seed, &dir)?;
    println!(
        "wrote {} samples to {}",
        written.records.len(),
        written.manifest.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode> {
    let path = config.ok_or_else(|| anyhow!("train needs --config"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("run"));
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))?;
    let summary = run_training(&cfg, Some(&out), Some(stop.clone()))?;
    match summary.log.final_loss() {
        Some(l) => println!("final_loss {l}"),
        None => println!("final_loss none"),
    }
    if let Some(v) = summary.validation_loss {
        println!("validation_loss {v}");
    }
    println!("checkpoint {}", out.join("model.ckpt").display());
    if stop.load(Ordering::SeqCst) {
        return Ok(ExitCode::from(130));
    }
    Ok(ExitCode::SUCCESS)
}

fn generate_cmd(a: GenerateArgs, seed: u64) -> Result<ExitCode> {
    let model = load_model(&a.model, seed)?;
    let cfg = &model.config;
    let grids: Vec<PatchGrid> = match &a.image {
        Some(p) => vec![patchify(&Image::load(p)?, cfg.patch_size, parse_resize(&a.resize)?)?],
        None => Vec::new(),
    };
    let mut prompt = assemble_prompt(&grids, cfg.layout.vision_sep);
    for id in tokenize(a.prompt.as_bytes()) {
        prompt.push_text(id, false);
    }
    let decoding = match a.temperature {
        Some(tau) => Decoding::Temperature { tau, seed },
        None => Decoding::Greedy,
    };
    let out = generate(&model, &prompt, a.max_new, decoding, false)?;
    println!("{}", out.text());
    Ok(ExitCode::SUCCESS)
}

fn analyze(a: AnalyzeArgs, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    let model = load_model(&a.model, seed)?;
    let resize = parse_resize(&a.resize)?;
    let vision_sep = model.config.layout.vision_sep;
    let prompts: Vec<MultimodalSequence> = grids(&a.manifest, &model.config, resize)?
        .into_iter()
        .take(a.samples)
        .map(|(g, _, _)| assemble_prompt(&[g], vision_sep))
        .collect();
    let layers = a.layers.as_deref().map(parse_range).transpose()?;
    let report = image_attention_allocation(&model, &prompts, layers, a.max_new, !a.per_head, &a.tag)?;
    let csv = report.to_csv();
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("attention_flow.csv");
            fs::write(&path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn labelled(items: Vec<(PatchGrid, String, Option<usize>)>, path: &Path) -> Result<Vec<(PatchGrid, usize)>> {
    items
        .into_iter()
        .enumerate()
        .map(|(i, (g, _, l))| {
            l.map(|l| (g, l))
                .ok_or_else(|| anyhow!("{}: record {i} has no label", path.display()))
        })
        .collect()
}

fn probe(a: ProbeArgs, seed: u64) -> Result<ExitCode> {
    let mut model = load_model(&a.model, seed)?;
    if a.permuted {
        model = permute_weights(&model, seed);
    }
    let resize = parse_resize(&a.resize)?;
    let train = labelled(grids(&a.train, &model.config, resize)?, &a.train)?;
    let test = labelled(grids(&a.test, &model.config, resize)?, &a.test)?;
    let classes = a
        .classes
        .unwrap_or_else(|| train.iter().chain(&test).map(|(_, l)| l + 1).max().unwrap_or(0));
    let cfg = ProbeConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed,
        ..Default::default()
    };
    let result = linear_probe(&model, &train, &test, classes, &cfg)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(ExitCode::SUCCESS)
}

fn retrieve(a: RetrieveArgs, seed: u64) -> Result<ExitCode> {
    let model = load_model(&a.model, seed)?;
    let policy = match a.policy.as_str() {
        "cross" => DistractorPolicy::CrossImage { count: a.distractors },
        _ => DistractorPolicy::ShuffledWords,
    };
    let pairs: Vec<(PatchGrid, String)> = grids(&a.manifest, &model.config, parse_resize(&a.resize)?)?
        .into_iter()
        .take(a.limit.unwrap_or(usize::MAX))
        .map(|(g, c, _)| (g, c))
        .collect();
    let result = caption_loss_retrieval(&model, &pairs, policy, seed)?;
    println!(
        "{}",
        serde_json::json!({ "policy": policy, "result": result })
    );
    Ok(ExitCode::SUCCESS)
}

fn token_name(t: &Token) -> String {
    match *t {
        Token::Text(id) if (0x21..0x7f).contains(&id) => char::from(id as u8).to_string(),
        Token::Text(id) => format!("0x{id:02x}"),
        Token::Special(s) => s.name().to_string(),
        Token::Patch { row, col, .. } => format!("patch[{row};{col}]"),
    }
}

fn pack_csvs(b: &PackedBatch) -> (String, String, String) {
    let n = b.len();
    let mut allow = String::new();
    for q in 0..n {
        let row: Vec<&str> = (0..n)
            .map(|k| if b.layout.bias.is_allowed(q, k) { "1" } else { "0" })
            .collect();
        allow.push_str(&row.join(","));
        allow.push('\n');
    }
    let mut spans = String::from("kind,start,len,rows,cols\n");
    for s in &b.seq.spans {
        let (r, c) = s.grid.unwrap_or((0, 0));
        let _ = writeln!(spans, "{:?},{},{},{r},{c}", s.kind, s.start, s.len);
    }
    let mut pos = String::from("index,token,sample,supervised,h,w\n");
    for (i, t) in b.seq.tokens.iter().enumerate() {
        let (h, w) = b.layout.positions.ids[i];
        let _ = writeln!(
            pos,
            "{i},{},{},{},{h},{w}",
            token_name(t),
            b.seq.sample_id[i],
            u8::from(b.seq.supervised[i])
        );
    }
    (allow, spans, pos)
}

fn pack_inspect(a: PackArgs, seed: u64, out: Option<PathBuf>) -> Result<ExitCode> {
    let ablation = Ablation {
        causal_only: a.causal_only,
        vision_sep_1d: a.vision_sep_1d,
        no_text_mix: false,
    };
    let mut layout = LayoutConfig::default();
    ablation.apply(&mut layout);
    let resize = parse_resize(&a.resize)?;
    resize.validate(a.patch_size)?;
    let data = StageData::load(Some(&a.manifest), a.text.as_deref())?;
    let mut seqs = data.multimodal_sequences(resize, a.patch_size, &layout)?;
    seqs.extend(data.text_sequences(a.pack_len)?);
    let packs = if seed == 0 {
        pack_sequences(&seqs, a.pack_len, &layout)?
    } else {
        sail_core::train::shuffled_packs(&seqs, seed, a.pack_len, &layout)?
    };
    let dir = out.unwrap_or_else(|| PathBuf::from("packs"));
    fs::create_dir_all(&dir)?;
    for (k, b) in packs.iter().take(a.max_packs).enumerate() {
        let (allow, spans, pos) = pack_csvs(b);
        fs::write(dir.join(format!("pack_{k:03}_allow.csv")), allow)?;
        fs::write(dir.join(format!("pack_{k:03}_spans.csv")), spans)?;
        fs::write(dir.join(format!("pack_{k:03}_positions.csv")), pos)?;
        println!(
            "pack {k}: {} samples, {} tokens, {} allowed pairs",
            b.samples.len(),
            b.len(),
            b.layout.bias.nnz()
        );
    }
    println!("{} packs, wrote {} to {}", packs.len(), packs.len().min(a.max_packs), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: GradCheckArgs, seed: u64) -> Result<ExitCode> {
    let cfg = ModelConfig::preset(a.preset);
    let model = Model::<f64>::init(cfg.clone(), seed)?;
    let spec = SyntheticSpec {
        count: 1,
        image_size: 12,
        ..Default::default()
    };
    let SyntheticSample { image, caption, .. } = sail_core::synth::generate_samples(&spec, seed)?.remove(0);
    let grid = patchify(&image, cfg.patch_size, ResizePolicy::Fixed(8))?;
    let seq = assemble_sequence(&[grid], &tokenize(caption.as_bytes()), cfg.layout.vision_sep)?;
    let batch = PackedBatch::single(&seq, &cfg.layout);
    let report = model.grad_check(&batch, a.entries, seed, a.eps)?;
    println!(
        "max_rel_error {:e} over {} entries (tolerance {:e})",
        report.max_rel_error, report.checked, a.tolerance
    );
    if report.max_rel_error < a.tolerance {
        Ok(ExitCode::SUCCESS)
    } else {
        if let Some((t, e)) = report.worst {
            eprintln!("worst entry: tensor {t}, index {e}");
        }
        Ok(ExitCode::FAILURE)
    }
}
