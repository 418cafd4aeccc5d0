use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gemma_mini::audit::{self, make_samples, run_audit};
use gemma_mini::kvcache::{curve_csv, kv_curve};
use gemma_mini::memplan::{self, PrecisionScheme};
use gemma_mini::model::train::{distill_lm, train_lm, TrainOptions};
use gemma_mini::model::{
    detokenize, format_chat, layer_kinds, render_pattern, tokenize, ChatTurn, GenerateOptions, Sampler,
    END_OF_TURN_ID, EOS_ID, PRESET_NAMES,
};
use gemma_mini::panscan::{extract_and_resize, plan_crops, PanScanConfig, RgbImage};
use gemma_mini::{CacheMode, Model, ModelConfig};

#[derive(Parser)]
#[command(name = "gemma-mini", version, about = "Interleaved local/global attention toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the local (L) / global (G) layer pattern.
    Pattern {
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value_t = 5)]
        ratio: usize,
    },
    /// Weight and KV memory per precision scheme.
    Plan(PlanArgs),
    /// Decode from a model.
    Generate(GenerateArgs),
    /// Train a small byte-level model on a corpus.
    Train(TrainArgs),
    /// Distill a teacher into a small student with sampled logits.
    Distill(DistillArgs),
    /// Plan Pan & Scan crops, optionally cutting them from an image.
    Panscan(PanscanArgs),
    /// Discoverable-extraction memorization audit.
    Audit(AuditArgs),
    /// KV-cache bytes as a function of context length, as CSV.
    KvCurve(KvCurveArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Preset name or config file; repeatable. Defaults to all presets.
    #[arg(long)]
    preset: Vec<String>,
    /// Only this scheme.
    #[arg(long, value_parser = ["bf16", "int4", "int4_block32", "sfp8"])]
    scheme: Option<String>,
    #[arg(long, default_value_t = memplan::DEFAULT_CONTEXT)]
    context: usize,
    #[arg(long, default_value_t = memplan::DEFAULT_KV_BITS)]
    kv_bits: u32,
    /// Embedding bits for the quantized schemes.
    #[arg(long)]
    embedding_bits: Option<u32>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ModelSource {
    /// Weights file written by `train` or `distill`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Model config; defaults to the `.cfg` file next to the weights.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSource {
    /// Saved model, or a randomly initialized tiny one when no weights are given.
    fn load(&self, seed: u64) -> Result<Model> {
        match &self.weights {
            Some(w) => Model::load(w, self.config.as_deref()).with_context(|| format!("loading {}", w.display())),
            None => {
                let cfg = match &self.config {
                    Some(c) => ModelConfig::load(c)?,
                    None => ModelConfig::tiny(6, 5, 64),
                };
                Ok(Model::init(cfg, seed)?)
            }
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    prompt: String,
    /// Wrap the prompt as a user turn of the chat template.
    #[arg(long)]
    chat: bool,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    /// Sampling temperature; 0 is greedy.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep every layer's full history instead of a window.
    #[arg(long)]
    full_cache: bool,
}

#[derive(Args)]
struct TrainShared {
    /// Text file (documents separated by blank lines) or a directory of files.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    linear_decay: bool,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 5)]
    ratio: usize,
    #[arg(long, default_value_t = 64)]
    window: usize,
    /// Write the trained weights here, plus `.manifest` and `.cfg` files.
    #[arg(long)]
    save: Option<PathBuf>,
}

impl TrainShared {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            lr: self.lr,
            seq_len: self.seq_len,
            seed: self.seed,
            linear_decay: self.linear_decay,
        }
    }

    fn init(&self) -> Result<Model> {
        Ok(Model::init(ModelConfig::tiny(self.layers, self.ratio, self.window), self.seed)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainShared,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: TrainShared,
    /// Teacher weights.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    teacher_config: Option<PathBuf>,
    /// Sampled logits per token.
    #[arg(long, default_value_t = gemma_mini::distill::DEFAULT_K)]
    k: usize,
}

#[derive(Args)]
struct PanscanArgs {
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, default_value_t = gemma_mini::panscan::DEFAULT_MAX_CROPS)]
    max_crops: usize,
    #[arg(long, default_value_t = gemma_mini::panscan::ASPECT_THRESHOLD)]
    aspect_threshold: f64,
    #[arg(long, default_value_t = gemma_mini::panscan::TARGET_SIDE)]
    target: usize,
    /// Always keep the whole image as one crop.
    #[arg(long)]
    disable: bool,
    /// Image to cut; its size overrides --width/--height.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Directory for `crop_N.rgb` files and `manifest.json`.
    #[arg(long, requires = "image")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value_t = audit::DEFAULT_STRIDE)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KvCurveArgs {
    /// Take pattern, window and head layout from a preset or config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 5)]
    ratio: usize,
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    kv_heads: usize,
    #[arg(long, default_value_t = 256)]
    head_dim: usize,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    #[arg(long, value_delimiter = ',', required = true)]
    contexts: Vec<usize>,
}

fn load_config(name: &str) -> Result<ModelConfig> {
    let p = Path::new(name);
    if p.is_file() {
        Ok(ModelConfig::load(p)?)
    } else {
        Ok(ModelConfig::preset(name)?)
    }
}

/// `(source, text)` documents: one per file of a directory, or one per
/// blank-line-separated paragraph of a file.
fn read_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let mut docs = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            docs.push((name, fs::read_to_string(&p)?));
        }
    } else {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for (i, para) in text.split("\n\n").map(str::trim).filter(|p| !p.is_empty()).enumerate() {
            docs.push((format!("{name}:{i}"), para.to_string()));
        }
    }
    if docs.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(docs)
}

fn token_docs(path: &Path) -> Result<Vec<Vec<u32>>> {
    Ok(read_corpus(path)?.iter().map(|(_, t)| tokenize(t, false)).collect())
}

fn plan(a: &PlanArgs) -> Result<()> {
    let names: Vec<String> = if a.preset.is_empty() {
        PRESET_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        a.preset.clone()
    };
    let mut schemes: Vec<PrecisionScheme> = match &a.scheme {
        Some(s) => vec![PrecisionScheme::by_name(s)?],
        None => PrecisionScheme::ALL.to_vec(),
    };
    if let Some(bits) = a.embedding_bits {
        for s in schemes.iter_mut().filter(|s| s.bits_per_weight < 16) {
            *s = s.with_embedding_bits(bits);
        }
    }
    let reports = names
        .iter()
        .map(|n| Ok(memplan::report_for(&load_config(n)?, a.context, a.kv_bits, &schemes)?))
        .collect::<Result<Vec<_>>>()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        print!("{}", memplan::render_table(&reports));
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let model = a.model.load(a.seed)?;
    let text = if a.chat {
        format_chat(&[ChatTurn::user(a.prompt.clone())])?
    } else {
        a.prompt.clone()
    };
    let prompt = tokenize(&text, true);
    let opts = GenerateOptions {
        max_new: a.max_new,
        sampler: if a.temperature > 0.0 {
            Sampler::Temperature { t: a.temperature, seed: a.seed }
        } else {
            Sampler::Greedy
        },
        stop_ids: vec![EOS_ID, END_OF_TURN_ID],
        cache_mode: if a.full_cache { CacheMode::Full } else { CacheMode::Windowed },
    };
    let out = model.generate(&prompt, &opts)?;
    println!("{}", detokenize(&out[prompt.len()..]));
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let c = &a.common;
    let docs = token_docs(&c.corpus)?;
    let mut model = c.init()?;
    println!("step,loss");
    train_lm(&mut model, &docs, &c.options(), |s, l, _| println!("{s},{l}"))?;
    if let Some(p) = &c.save {
        model.save(p)?;
    }
    Ok(())
}

fn distill(a: &DistillArgs) -> Result<()> {
    let c = &a.common;
    let docs = token_docs(&c.corpus)?;
    let teacher = Model::load(&a.teacher, a.teacher_config.as_deref())
        .with_context(|| format!("loading teacher {}", a.teacher.display()))?;
    let mut student = c.init()?;
    println!("step,loss");
    distill_lm(&mut student, &teacher, &docs, a.k, &c.options(), |s, l| println!("{s},{l}"))?;
    if let Some(p) = &c.save {
        student.save(p)?;
    }
    Ok(())
}

fn panscan(a: &PanscanArgs) -> Result<()> {
    let cfg = PanScanConfig {
        target: a.target,
        max_crops: a.max_crops,
        aspect_threshold: a.aspect_threshold,
        enabled: !a.disable,
    };
    let img = match &a.image {
        Some(p) => {
            let rgb = image::open(p).with_context(|| format!("reading {}", p.display()))?.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Some(RgbImage::new(w, h, rgb.into_raw())?)
        }
        None => None,
    };
    let (w, h) = match (&img, a.width, a.height) {
        (Some(i), _, _) => (i.width, i.height),
        (None, Some(w), Some(h)) => (w, h),
        _ => bail!("give --width and --height, or --image"),
    };
    let plan = plan_crops(w, h, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    if let (Some(img), Some(dir)) = (&img, &a.out) {
        fs::create_dir_all(dir)?;
        let crops = extract_and_resize(img, &plan, a.target)?;
        let mut files = Vec::new();
        for (i, c) in crops.iter().enumerate() {
            let name = format!("crop_{i}.rgb");
            fs::write(dir.join(&name), &c.data)?;
            files.push(serde_json::json!({ "file": name, "width": c.width, "height": c.height, "source": plan.crops[i] }));
        }
        let manifest = serde_json::json!({ "plan": plan, "format": "rgb8", "crops": files });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(())
}

fn run_audit_cmd(a: &AuditArgs) -> Result<()> {
    let corpus: Vec<(String, Vec<u32>)> = read_corpus(&a.corpus)?
        .into_iter()
        .map(|(s, t)| (s, tokenize(&t, false)))
        .collect();
    let model = a.model.load(a.seed)?;
    let samples = make_samples(&corpus, a.stride, a.seed)?;
    let report = run_audit(&model, &samples)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => {
            fs::write(p, json)?;
            eprintln!(
                "{} samples: exact {:.4}, approximate or exact {:.4}",
                report.n_samples, report.exact_rate, report.approx_rate
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn kv_curve_cmd(a: &KvCurveArgs) -> Result<()> {
    let (pattern, window, kvh, hd) = match &a.preset {
        Some(name) => {
            let cfg = load_config(name)?;
            let g = cfg.attn_global;
            if cfg.attn_local.num_kv_heads != g.num_kv_heads || cfg.attn_local.head_dim != g.head_dim {
                bail!("{name}: local and global layers differ in kv layout");
            }
            (cfg.layer_kinds(), cfg.window, g.num_kv_heads, g.head_dim)
        }
        None => (layer_kinds(a.layers, a.ratio), a.window, a.kv_heads, a.head_dim),
    };
    let points = kv_curve(&pattern, window, kvh, hd, a.bits, &a.contexts)?;
    print!("{}", curve_csv(&points));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Pattern { layers, ratio } => {
            println!("{}", render_pattern(&layer_kinds(layers, ratio)));
            Ok(())
        }
        Cmd::Plan(a) => plan(&a),
        Cmd::Generate(a) => generate(&a),
        Cmd::Train(a) => train(&a),
        Cmd::Distill(a) => distill(&a),
        Cmd::Panscan(a) => panscan(&a),
        Cmd::Audit(a) => run_audit_cmd(&a),
        Cmd::KvCurve(a) => kv_curve_cmd(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
