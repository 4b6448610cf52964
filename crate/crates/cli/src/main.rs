//! `tdm`: dataset generation, training, adapter fitting, inversion, morphing
//! and evaluation from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tdm_core::checkpoint;
use tdm_core::config::{hex_digest, RunConfig};
use tdm_core::data::{gen_dataset, parse_classes, Primitive};
use tdm_core::diffusion::{ddim_denoise, ddim_invert, train_base, DiffusionSchedule};
use tdm_core::image_io::{encode_png, load_png, psnr, save_png};
use tdm_core::lora::{apply_lora, fit_lora, LoraConfig, LoraDelta};
use tdm_core::metrics::{MetricsReport, MultiScaleRms};
use tdm_core::morph::{decode, morph, AdainStage, EndpointInput, MorphConfig};
use tdm_core::unet::UNetParams;
use tdm_core::Tensor32;

const MODEL_FILE: &str = "model.tdm";
const CONFIG_FILE: &str = "config.json";
const LABELS_FILE: &str = "labels.json";
const SEQUENCE_FILE: &str = "sequence.json";

#[derive(Parser)]
#[command(name = "tdm", version, about = "Toy diffusion image morphing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural shapes dataset as PNGs plus labels.json.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated primitives, e.g. ellipse,polygon-3,cross.
        #[arg(long, default_value = "ellipse,polygon-3,cross")]
        classes: String,
        /// Images per class.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
    /// Pretrain the noise predictor.
    Train {
        /// Run configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Model directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a LoRA adapter to one image.
    FitLora {
        #[arg(long, env = "TDM_MODEL_DIR")]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class index or name.
        #[arg(long)]
        class: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// DDIM-invert an image to its terminal noise.
    Invert {
        #[arg(long, env = "TDM_MODEL_DIR")]
        model: PathBuf,
        #[arg(long)]
        lora: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Morph between two images.
    Morph {
        #[arg(long, env = "TDM_MODEL_DIR")]
        model: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        class_a: String,
        #[arg(long)]
        class_b: String,
        /// Pre-fitted adapter for image A; fitted on the fly when omitted.
        #[arg(long)]
        lora_a: Option<PathBuf>,
        #[arg(long)]
        lora_b: Option<PathBuf>,
        /// Frame intervals n; writes n + 1 frames.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// initial-noise, final-latent or off.
        #[arg(long)]
        adain_stage: Option<String>,
        #[arg(long)]
        reschedule: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute path length and distance variance of a frame directory.
    Eval {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": ").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, classes, count, size, seed, channels } => gen_data(&out, &classes, count, size, seed, channels),
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out),
        Command::FitLora { model, image, class, out, rank, steps, lr, seed } => {
            fit(&model, &image, &class, &out, rank, steps, lr, seed)
        }
        Command::Invert { model, lora, image, class, out } => invert(&model, lora.as_deref(), &image, &class, &out),
        Command::Morph {
            model,
            image_a,
            image_b,
            class_a,
            class_b,
            lora_a,
            lora_b,
            frames,
            lambda,
            adain_stage,
            reschedule,
            seed,
            out,
        } => {
            let model = Model::load(&model)?;
            let mut cfg = model.config.morph.clone();
            if let Some(n) = frames {
                cfg.n = n;
            }
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            match adain_stage.as_deref() {
                None => {}
                Some("off") => cfg.adain = false,
                Some(s) => {
                    cfg.adain = true;
                    cfg.adain_stage = s.parse::<AdainStage>()?;
                }
            }
            cfg.reschedule = reschedule;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let inputs = [
                MorphSide { image: image_a, class: class_a, lora: lora_a },
                MorphSide { image: image_b, class: class_b, lora: lora_b },
            ];
            run_morph(&model, inputs, cfg, &out)
        }
        Command::Eval { frames, report } => eval(&frames, &report),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(out: &Path, classes: &str, count: usize, size: usize, seed: u64, channels: usize) -> Result<()> {
    let prims = parse_classes(classes).context("gen-data")?;
    let (data, specs) = gen_dataset::<f32>(&prims, count, size, channels, seed).context("gen-data")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut items = Vec::with_capacity(data.len());
    for (i, (img, spec)) in data.images.iter().zip(&specs).enumerate() {
        let file = format!("{i:05}_{}.png", prims[spec.class_id]);
        save_png(img, out.join(&file)).context("gen-data")?;
        items.push(json!({"file": file, "label": spec.class_id, "shape": spec}));
    }
    let labels = json!({
        "classes": prims.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
        "size": size,
        "channels": channels,
        "seed": seed,
        "items": items,
    });
    write(&out.join(LABELS_FILE), serde_json::to_string_pretty(&labels)?)?;
    println!("wrote {} images to {}", data.len(), out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<(tdm_core::diffusion::Dataset<f32>, Vec<String>)> {
    let labels = read_json(&dir.join(LABELS_FILE))?;
    let classes: Vec<String> = serde_json::from_value(labels["classes"].clone()).context("labels.json: classes")?;
    let items = labels["items"].as_array().ok_or_else(|| anyhow!("labels.json: missing items"))?;
    let mut images = Vec::with_capacity(items.len());
    let mut ys = Vec::with_capacity(items.len());
    for it in items {
        let file = it["file"].as_str().ok_or_else(|| anyhow!("labels.json: item without file"))?;
        let label = it["label"].as_u64().ok_or_else(|| anyhow!("labels.json: {file} without label"))? as usize;
        images.push(load_png::<f32>(dir.join(file)).context("loading training data")?);
        ys.push(label);
    }
    Ok((tdm_core::diffusion::Dataset { images, labels: ys }, classes))
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (dataset, classes) = load_dataset(data)?;
    let arch = &cfg.model;
    if classes.len() != arch.num_classes {
        bail!("train: data has {} classes, model.num_classes is {}", classes.len(), arch.num_classes);
    }
    let want = [arch.in_channels, arch.resolution, arch.resolution];
    if let Some(bad) = dataset.images.iter().find(|im| im.shape() != want) {
        bail!("train: image shape {:?} does not match model {:?}", bad.shape(), want);
    }
    let sched = cfg.schedule.build()?;
    let params = UNetParams::<f32>::init(arch.clone(), cfg.train.seed)?;
    let every = (cfg.train.steps / 20).max(1);
    let outcome = train_base(&dataset, params, &sched, &cfg.train, |s, l| {
        if s % every == 0 {
            eprintln!("step {s}/{} loss {l:.5}", cfg.train.steps);
        }
    })
    .context("train")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let meta = json!({"kind": "unet", "arch": arch, "classes": classes, "config_hash": cfg.hash()});
    checkpoint::save(out.join(MODEL_FILE), outcome.params.weights(), &meta)?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    write(&out.join("losses.json"), serde_json::to_string(&outcome.losses)?)?;
    println!("trained {} steps, model in {}", outcome.losses.len(), out.display());
    Ok(())
}

struct Model {
    params: UNetParams<f32>,
    config: RunConfig,
    sched: DiffusionSchedule,
    classes: Vec<String>,
    hash: String,
}

impl Model {
    fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(dir.join(CONFIG_FILE))?;
        let path = dir.join(MODEL_FILE);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let ck = checkpoint::decode::<f32>(&bytes).with_context(|| format!("loading {}", path.display()))?;
        let classes = serde_json::from_value(ck.meta["classes"].clone()).unwrap_or_default();
        let params = UNetParams::from_weights(config.model.clone(), ck.tensors)?;
        let sched = config.schedule.build()?;
        Ok(Model { params, config, sched, classes, hash: hex_digest(&bytes) })
    }

    fn class_id(&self, class: &str) -> Result<usize> {
        if let Ok(i) = class.parse::<usize>() {
            return Ok(i);
        }
        let wanted: Primitive = class.parse()?;
        self.classes
            .iter()
            .position(|c| c == &wanted.to_string())
            .ok_or_else(|| anyhow!("class {class:?} is not one of {:?}", self.classes))
    }

    fn image(&self, path: &Path) -> Result<Tensor32> {
        let img = load_png::<f32>(path)?;
        let a = &self.params.arch;
        let want = [a.in_channels, a.resolution, a.resolution];
        if img.shape() != want {
            bail!("{}: image is {:?}, model expects {:?}", path.display(), img.shape(), want);
        }
        Ok(img)
    }
}

fn save_lora(path: &Path, delta: &LoraDelta<f32>, meta: serde_json::Value) -> Result<()> {
    let mut m = meta;
    m["kind"] = json!("lora");
    m["rank"] = json!(delta.rank);
    m["scale"] = json!(delta.scale);
    checkpoint::save(path, &delta.to_named(), &m).with_context(|| format!("writing {}", path.display()))
}

fn load_lora(path: &Path) -> Result<LoraDelta<f32>> {
    let ck = checkpoint::load::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.meta["kind"] != "lora" {
        bail!("{} is not a LoRA checkpoint", path.display());
    }
    let rank = ck.meta["rank"].as_u64().ok_or_else(|| anyhow!("{}: missing rank", path.display()))? as usize;
    let scale = ck.meta["scale"].as_f64().unwrap_or(1.0);
    Ok(LoraDelta::from_named(rank, scale, ck.tensors)?)
}

#[allow(clippy::too_many_arguments)]
fn fit(
    model: &Path,
    image: &Path,
    class: &str,
    out: &Path,
    rank: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let model = Model::load(model)?;
    let img = model.image(image)?;
    let class_id = model.class_id(class)?;
    let mut lc: LoraConfig = model.config.lora.clone();
    lc.rank = rank.unwrap_or(lc.rank);
    lc.steps = steps.unwrap_or(lc.steps);
    lc.lr = lr.unwrap_or(lc.lr);
    lc.seed = seed.unwrap_or(lc.seed);
    let cond = model.params.condition_embed(class_id)?;
    let fitted = fit_lora(&img, &cond, &model.params, &model.sched, &lc).context("fit-lora")?;
    let last = fitted.losses.last().copied();
    save_lora(out, &fitted.delta, json!({"class": class_id, "config": lc, "final_loss": last}))?;
    println!("fitted rank-{} adapter in {} steps -> {}", lc.rank, lc.steps, out.display());
    Ok(())
}

fn invert(model: &Path, lora: Option<&Path>, image: &Path, class: &str, out: &Path) -> Result<()> {
    let model = Model::load(model)?;
    let img = model.image(image)?;
    let cond = model.params.condition_embed(model.class_id(class)?)?;
    let delta = lora.map(load_lora).transpose()?;
    let residuals = delta.as_ref().map(|d| d.residuals());
    let net = match &residuals {
        Some(r) => apply_lora(&model.params, r)?,
        None => tdm_core::diffusion::Denoiser::new(&model.params),
    };
    let z_t = ddim_invert(&img, &cond, &net, &model.sched).context("invert")?;
    let rec = decode(&ddim_denoise(&z_t, &cond, &net, &model.sched).context("invert")?);
    let mut tensors = BTreeMap::new();
    tensors.insert("z_T".to_string(), z_t);
    checkpoint::save(out, &tensors, &json!({"kind": "noise", "class": class}))
        .with_context(|| format!("writing {}", out.display()))?;
    println!("inverted {}; round-trip PSNR {:.2} dB", image.display(), psnr(&img, &rec)?);
    Ok(())
}

struct MorphSide {
    image: PathBuf,
    class: String,
    lora: Option<PathBuf>,
}

fn run_morph(model: &Model, sides: [MorphSide; 2], cfg: MorphConfig, out: &Path) -> Result<()> {
    let mut images = Vec::with_capacity(2);
    let mut classes = Vec::with_capacity(2);
    let mut loras = Vec::with_capacity(2);
    for s in &sides {
        images.push(model.image(&s.image)?);
        classes.push(model.class_id(&s.class)?);
        loras.push(s.lora.as_deref().map(load_lora).transpose()?);
    }
    let inputs = [0, 1].map(|i| EndpointInput {
        image: &images[i],
        class: classes[i],
        lora: loras[i].as_ref(),
    });
    let seq = morph(inputs, &model.params, &model.sched, &cfg, &model.config.lora).context("morph")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (i, (frame, alpha)) in seq.frames.iter().zip(&seq.alphas).enumerate() {
        let file = format!("frame_{i:03}.png");
        let bytes = encode_png(frame)?;
        write(&out.join(&file), &bytes)?;
        frames.push(json!({"file": file, "alpha": alpha, "sha256": hex_digest(&bytes)}));
    }
    let mut run = model.config.clone();
    run.morph = cfg;
    let doc = json!({
        "frames": frames,
        "alphas": seq.alphas,
        "config": run,
        "config_hash": run.hash(),
        "model_sha256": model.hash,
        "inputs": sides.iter().zip(&classes).map(|(s, c)| json!({
            "image": s.image.file_name().map(|f| f.to_string_lossy().into_owned()),
            "class": c,
            "lora": s.lora.as_ref().and_then(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()),
        })).collect::<Vec<_>>(),
        "distances": seq.distances,
        "uniform_distances": seq.uniform_distances,
    });
    write(&out.join(SEQUENCE_FILE), serde_json::to_string_pretty(&doc)?)?;
    println!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(())
}

fn eval(dir: &Path, report: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            name.starts_with("frame_") && name.ends_with(".png")
        })
        .collect();
    files.sort();
    if files.len() < 3 {
        bail!("eval: {} holds {} frames, need at least 3", dir.display(), files.len());
    }
    let mut config_hash = None;
    let seq_path = dir.join(SEQUENCE_FILE);
    if seq_path.exists() {
        let seq = read_json(&seq_path)?;
        for f in seq["frames"].as_array().into_iter().flatten() {
            let name = f["file"].as_str().unwrap_or_default();
            let bytes = fs::read(dir.join(name)).with_context(|| format!("reading {name}"))?;
            if f["sha256"].as_str() != Some(hex_digest(&bytes).as_str()) {
                bail!("eval: {name} does not match the hash recorded in sequence.json");
            }
        }
        config_hash = seq["config_hash"].as_str().map(String::from);
    }
    let frames: Vec<Tensor32> = files.iter().map(load_png::<f32>).collect::<tdm_core::Result<_>>()?;
    let rep = MetricsReport::from_frames(&frames, &MultiScaleRms, config_hash)?;
    write(report, serde_json::to_string_pretty(&rep)?)?;
    println!("ppl {:.6} pdv {:.6} over {} frames", rep.ppl, rep.pdv, rep.frames);
    Ok(())
}
