use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lightvit::analyzer::{
    bench_stage_throughput, cost_of_config, deviation, global_token_overhead, published_budget,
    BenchOptions,
};
use lightvit::model::{gradient_check, Model, ModelConfig};
use lightvit::serialization::{self, IMAGENET_MEAN, IMAGENET_STD};
use lightvit::tensor::gradcheck::{GradCheckOptions, DEFAULT_STEP, DEFAULT_TOLERANCE};
use lightvit::tensor::parallel;
use lightvit::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "lightvit", version, about = "LightViT model, cost analyzer and checks")]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the per-stage architecture table.
    Describe(ModelArgs),
    /// Count parameters and multiply-accumulates.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Input side, or HxW.
        #[arg(long, default_value = "224")]
        resolution: Resolution,
        /// Comma-separated global-token counts to sweep, e.g. 0,2,4,8,16,32.
        #[arg(long, value_delimiter = ',')]
        sweep_global_tokens: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Table depth; 0 prints every module.
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
    /// Build a model from a seed and write its weights.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify an image (binary PPM or tensor dump) with saved weights.
    Forward {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Logits dump, or a directory for stage dumps with --features.
        #[arg(long)]
        out: PathBuf,
        /// Write stage1..stage3 features and global tokens instead of logits.
        #[arg(long)]
        features: bool,
        /// Require the weights to match this architecture.
        #[arg(long)]
        expect_variant: Option<String>,
        /// PPM normalization mean (R,G,B); defaults to ImageNet statistics.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = IMAGENET_MEAN)]
        mean: Vec<f64>,
        /// PPM normalization std (R,G,B); defaults to ImageNet statistics.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = IMAGENET_STD)]
        std: Vec<f64>,
    },
    /// Finite-difference check of every parameter gradient (64-bit).
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = DEFAULT_STEP)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        threshold: f64,
        /// Input side, or HxW.
        #[arg(long, default_value = "32")]
        resolution: Resolution,
        /// Coordinates sampled per tensor; 0 checks all.
        #[arg(long, default_value_t = 8)]
        max_coords: usize,
    },
    /// Time stem, stages and head.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "224")]
        resolution: Resolution,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// T, S, B or reduced [default: T; reduced for gradcheck].
    #[arg(long, short = 'v', conflicts_with = "config")]
    variant: Option<String>,
    /// TOML model config instead of a named variant.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_local: bool,
    #[arg(long)]
    no_global: bool,
    #[arg(long)]
    no_spatial_attn: bool,
    #[arg(long)]
    no_channel_attn: bool,
    #[arg(long)]
    global_tokens: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Structured,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
struct Resolution(usize, usize);

impl std::str::FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad resolution {s:?}"));
        match s.split_once(['x', 'X']) {
            Some((h, w)) => Ok(Resolution(parse(h)?, parse(w)?)),
            None => {
                let v = parse(s)?;
                Ok(Resolution(v, v))
            }
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

/// Failure to be reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Failed numeric check, exit code 5.
#[derive(Debug)]
struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        self.resolve_or("T")
    }

    fn resolve_or(&self, default_variant: &str) -> Result<ModelConfig> {
        let variant = self.variant.as_deref().unwrap_or(default_variant);
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                ModelConfig::from_toml(&text)?
            }
            None if variant.eq_ignore_ascii_case("reduced") => ModelConfig::reduced(),
            None => ModelConfig::variant(variant)
                .map_err(|_| Usage(format!("unknown variant {variant:?}; valid names are T, S, B (or reduced)")))?,
        };
        cfg.toggles.local &= !self.no_local;
        cfg.toggles.global &= !self.no_global;
        cfg.toggles.spatial &= !self.no_spatial_attn;
        cfg.toggles.channel &= !self.no_channel_attn;
        if let Some(t) = self.global_tokens {
            cfg.global_tokens = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<CheckFailed>() {
            return 5;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } | Error::Format(_) => 4,
                Error::Numeric(_) => 5,
                Error::Config(_) | Error::DigestMismatch { .. } | Error::Dimension(_) | Error::Contract(_) => 3,
            };
        }
    }
    1
}

/// Error chain joined with ": ", skipping causes already quoted by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LIGHTVIT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Usage(format!("LIGHTVIT_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    if cli.deterministic {
        parallel::set_enabled(false);
    }
    match cli.command {
        Command::Describe(model) => {
            print!("{}", model.resolve()?.stage_table());
            Ok(())
        }
        Command::Analyze {
            model,
            resolution,
            sweep_global_tokens,
            format,
            depth,
        } => analyze(&model.resolve()?, resolution, sweep_global_tokens, format, depth),
        Command::Init { model, seed, out } => {
            let cfg = model.resolve()?;
            let m = Model::<f32>::build(&cfg, seed)?;
            serialization::save(&m, &out)?;
            println!("wrote {} ({} parameters)", out.display(), m.named_parameters().iter().map(|(_, t)| t.numel()).sum::<usize>());
            Ok(())
        }
        Command::Forward {
            weights,
            image,
            out,
            features,
            expect_variant,
            mean,
            std,
        } => forward(&weights, &image, &out, features, expect_variant, &mean, &std),
        Command::Gradcheck {
            model,
            seed,
            eps,
            threshold,
            resolution,
            max_coords,
        } => gradcheck(&model.resolve_or("reduced")?, seed, eps, threshold, resolution, max_coords),
        Command::Bench {
            model,
            resolution,
            repeats,
            warmup,
            seed,
        } => bench(&model.resolve()?, resolution, repeats, warmup, seed),
    }
}

fn analyze(cfg: &ModelConfig, res: Resolution, sweep: Option<Vec<usize>>, format: Format, depth: usize) -> Result<()> {
    let report = cost_of_config(cfg, res.0, res.1)?;
    match format {
        Format::Table => {
            print!("{}", report.to_table(depth));
            println!("attention core MACs {}", report.attention_core_flops());
            if let Some(b) = published_budget(&cfg.name).filter(|_| res == Resolution(224, 224)) {
                let (dp, df) = deviation(&report, b);
                println!(
                    "* published budget {}M params / {}G MACs: deviation {:+.1}% params, {:+.1}% MACs (stem, head and FFN expansion {} are assumptions)",
                    b.params_m,
                    b.flops_g,
                    100.0 * dp,
                    100.0 * df,
                    cfg.expansion
                );
            }
        }
        Format::Structured => print!("{}", report.to_structured()),
    }
    if let Some(tokens) = sweep {
        let rows = global_token_overhead(cfg, &tokens, res.0, res.1)?;
        let base = rows.iter().find(|r| r.tokens == 0).map(|r| r.flops);
        match format {
            Format::Table => {
                println!("{:>6} {:>12} {:>16} {:>10}", "T", "params", "MACs", "vs T=0");
                for r in &rows {
                    let rel = base.map_or(String::from("-"), |b| format!("{:+.2}%", 100.0 * (r.flops as f64 / b as f64 - 1.0)));
                    println!("{:>6} {:>12} {:>16} {:>10}", r.tokens, r.params, r.flops, rel);
                }
            }
            Format::Structured => {
                for r in &rows {
                    println!("sweep.{}.params = {}", r.tokens, r.params);
                    println!("sweep.{}.flops = {}", r.tokens, r.flops);
                }
            }
        }
    }
    Ok(())
}

fn read_image(path: &Path, mean: &[f64], std: &[f64]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let t = if bytes.starts_with(b"P6") {
        let m = [mean[0], mean[1], mean[2]];
        let s = [std[0], std[1], std[2]];
        serialization::parse_ppm(&bytes, m, s)
    } else {
        serialization::read_tensor(path)
    };
    t.with_context(|| format!("reading image {}", path.display()))
}

fn forward(
    weights: &Path,
    image: &Path,
    out: &Path,
    features: bool,
    expect_variant: Option<String>,
    mean: &[f64],
    std: &[f64],
) -> Result<()> {
    let model: Model<f32> = match expect_variant {
        Some(v) => {
            let cfg = ModelArgs {
                variant: Some(v),
                config: None,
                no_local: false,
                no_global: false,
                no_spatial_attn: false,
                no_channel_attn: false,
                global_tokens: None,
            }
            .resolve()?;
            serialization::load(weights, &cfg)?
        }
        None => serialization::load_embedded(weights)?,
    };
    let img = read_image(image, mean, std)?;
    if features {
        let output = model.forward_features(&img)?;
        fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
        for (i, f) in output.features.iter().enumerate() {
            let path = out.join(format!("stage{}.lvwt", i + 1));
            serialization::dump_tensor(f, &path)?;
            println!("{}  {:?}", path.display(), f.shape());
        }
        if let Some(g) = output.global.tensor() {
            let path = out.join("global.lvwt");
            serialization::dump_tensor(g, &path)?;
            println!("{}  {:?}", path.display(), g.shape());
        }
        return Ok(());
    }
    let logits = model.classify(&img)?;
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()).into());
    }
    serialization::dump_tensor(&logits, out)?;
    let mut ranked: Vec<(usize, f32)> = logits.to_vec().into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (class, v) in ranked.iter().take(5) {
        println!("class {class:>4}  logit {v:.6}");
    }
    Ok(())
}

fn gradcheck(cfg: &ModelConfig, seed: u64, eps: f64, threshold: f64, res: Resolution, max_coords: usize) -> Result<()> {
    if !(eps > 0.0) {
        bail!(Usage(format!("--eps must be positive, got {eps}")));
    }
    let opts = GradCheckOptions {
        step: eps,
        max_coords: (max_coords > 0).then_some(max_coords),
        seed,
    };
    let checks = gradient_check(cfg, res.0, res.1, seed, 0.3, opts)?;
    let mut groups: Vec<(String, f64)> = Vec::new();
    for c in &checks {
        let group = group_of(&c.name);
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, worst)) => *worst = worst.max(c.report.max_rel_err),
            None => groups.push((group, c.report.max_rel_err)),
        }
    }
    println!("{:<28} {:>12}", "group", "max rel err");
    for (g, e) in &groups {
        println!("{g:<28} {e:>12.3e}");
    }
    let worst = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    println!("worst {worst:.3e} (threshold {threshold:.0e})");
    if !(worst < threshold) {
        let culprit = checks
            .iter()
            .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
            .map(|c| c.name.clone())
            .unwrap_or_default();
        return Err(anyhow!(CheckFailed(format!(
            "gradient check failed: {worst:.3e} >= {threshold:.0e} at {culprit}"
        ))));
    }
    Ok(())
}

/// `stages.1.blocks.0.attn.qkv.weight` → `stages.1.blocks.0.attn`.
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = match parts.first() {
        Some(&"stages") if parts.get(2) == Some(&"blocks") => 5,
        Some(&"stages") => 3,
        _ => 1,
    };
    parts[..keep.min(parts.len().saturating_sub(1)).max(1)].join(".")
}

fn bench(cfg: &ModelConfig, res: Resolution, repeats: usize, warmup: usize, seed: u64) -> Result<()> {
    if repeats < 3 {
        bail!(Usage(format!("--repeats must be at least 3, got {repeats}")));
    }
    let model = Model::<f32>::build(cfg, seed)?;
    let rows = bench_stage_throughput(
        &model,
        BenchOptions {
            height: res.0,
            width: res.1,
            repeats,
            warmup,
            seed,
        },
    )?;
    println!("LightViT-{} at {res}, median of {repeats}", cfg.name);
    println!("{:<8} {:>8} {:>16} {:>12} {:>12}", "segment", "tokens", "MACs", "median ms", "GMAC/s");
    for r in &rows {
        println!(
            "{:<8} {:>8} {:>16} {:>12.3} {:>12.3}",
            r.name,
            r.tokens,
            r.flops,
            r.median.as_secs_f64() * 1e3,
            r.flops_per_sec() / 1e9
        );
    }
    let total: u64 = rows.iter().map(|r| r.flops).sum();
    let time: f64 = rows.iter().map(|r| r.median.as_secs_f64()).sum();
    println!("{:<8} {:>8} {:>16} {:>12.3} {:>12.3}", "total", "", total, time * 1e3, total as f64 / time / 1e9);
    Ok(())
}
