mod config;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crosspatch::crafting::{craft_ensemble, Components, PatchBundle};
use crosspatch::data::{build_dataset, write_dataset, write_image, Dataset, ImageFormat};
use crosspatch::evaluation::{
    attack_sample, compute_asr, transfer_matrix, write_report, AsrReport, EvalMode, TestCapture,
};
use crosspatch::model_io::write_meta;
use crosspatch::numerics::derive_seed;
use crosspatch::recognizers::{adversarial_train, train_encoder, train_victim, EncoderModel, TrainConfig, VictimModel};
use crosspatch::topology::{budget_match, make_mask, PatchMask, Topology};

use config::RunConfig;
use pipeline::Layout;

#[derive(Parser)]
#[command(name = "crosspatch", version, about = "Capture-aware universal adversarial patches for palmprint recognizers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every stochastic stage of this command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single config override, `key=value`; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 gives the reference single-threaded mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// List every config key with its default.
    Keys,
    /// Build the synthetic palm dataset into <out>/data.
    SynthData,
    /// Train a closed-set victim into <out>/victims/<label>.
    TrainVictim {
        #[arg(long, default_value = "victim")]
        label: String,
    },
    /// Pretrain and freeze the identity encoder into <out>/encoder.
    TrainEncoder,
    /// Craft a universal patch bundle into <out>/bundles/<name>.
    Craft {
        /// Comma-separated victim labels; several craft against their ensemble.
        #[arg(long, default_value = "victim")]
        sources: String,
        #[arg(long, default_value = "patch")]
        name: String,
    },
    /// Dump adversarial test images to <out>/adv/<victim>/<index>.pgm.
    Attack {
        #[arg(long, default_value = "patch")]
        bundle: String,
        #[arg(long, default_value = "victim")]
        victim: String,
    },
    /// Attack success rate of a bundle and its random-texture control.
    Eval {
        #[arg(long, default_value = "patch")]
        bundle: String,
        #[arg(long, default_value = "victim")]
        victim: String,
        /// Apply capture draws at test time as well.
        #[arg(long)]
        simulate_capture: bool,
        #[arg(long, default_value = "eval")]
        report: String,
    },
    /// Every (bundle, victim) pair, learned and control.
    Transfer {
        #[arg(long)]
        bundles: String,
        #[arg(long)]
        victims: String,
        #[arg(long, default_value = "transfer")]
        report: String,
    },
    /// Adversarially retrain a victim, then re-craft and re-evaluate.
    Advtrain {
        #[arg(long, default_value = "victim")]
        victim: String,
        #[arg(long, default_value = "patch")]
        bundle: String,
    },
    /// Sweep one design axis, crafting and evaluating each setting.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, default_value = "victim")]
        victim: String,
        /// Comma-separated subset of setting labels to run.
        #[arg(long)]
        rows: Option<String>,
        /// Comma-separated values replacing a lambda sweep's defaults.
        #[arg(long)]
        values: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    Size,
    Shape,
    Position,
    Components,
    LambdaId,
    LambdaVis,
    LambdaTv,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Size => "size",
            Axis::Shape => "shape",
            Axis::Position => "position",
            Axis::Components => "components",
            Axis::LambdaId => "lambda-id",
            Axis::LambdaVis => "lambda-vis",
            Axis::LambdaTv => "lambda-tv",
        }
    }
}

/// Cross long-arm lengths of the size sweep at a 128-pixel ROI.
const SIZE_SWEEP_128: [usize; 5] = [25, 30, 35, 40, 45];
const LAMBDA_ID_SWEEP: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8];
const LAMBDA_VIS_SWEEP: [f64; 5] = [0.0, 1e-3, 4e-3, 1.6e-2, 6.4e-2];
const LAMBDA_TV_SWEEP: [f64; 5] = [0.0, 5e-6, 2e-5, 8e-5, 3.2e-4];

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    layout: Layout,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        cfg.apply_file(path)?;
    }
    for kv in &g.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;

    let ctx = Ctx {
        cfg,
        seed: g.seed,
        layout: Layout { root: g.out.clone() },
    };
    if matches!(cli.command, Command::Keys) {
        print!("{}", RunConfig::help_text());
        return Ok(());
    }
    pipeline::ensure_dir(&ctx.layout.root)?;
    write_run_meta(&ctx, g.threads)?;

    match cli.command {
        Command::Keys => unreachable!("handled above"),
        Command::SynthData => synth_data(&ctx),
        Command::TrainVictim { label } => train_victim_cmd(&ctx, &label),
        Command::TrainEncoder => train_encoder_cmd(&ctx),
        Command::Craft { sources, name } => craft_cmd(&ctx, &list(&sources), &name),
        Command::Attack { bundle, victim } => attack_cmd(&ctx, &bundle, &victim),
        Command::Eval {
            bundle,
            victim,
            simulate_capture,
            report,
        } => eval_cmd(&ctx, &bundle, &victim, simulate_capture, &report),
        Command::Transfer {
            bundles,
            victims,
            report,
        } => transfer_cmd(&ctx, &list(&bundles), &list(&victims), &report),
        Command::Advtrain { victim, bundle } => advtrain_cmd(&ctx, &victim, &bundle),
        Command::Ablate {
            axis,
            victim,
            rows,
            values,
        } => ablate_cmd(&ctx, axis, &victim, rows.as_deref(), values.as_deref()),
    }
}

fn list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

fn write_run_meta(ctx: &Ctx, threads: Option<usize>) -> Result<()> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let mut meta = vec![
        ("argv".to_string(), argv.join(" ")),
        ("seed".to_string(), ctx.seed.to_string()),
        ("threads".to_string(), threads.map_or("auto".into(), |n| n.to_string())),
    ];
    meta.extend(ctx.cfg.entries());
    Ok(write_meta(&ctx.layout.root.join("run.meta.tsv"), &meta)?)
}

fn mode(ctx: &Ctx) -> EvalMode {
    match pipeline::attack_target(&ctx.cfg) {
        Some(t) => EvalMode::Targeted(t),
        None => EvalMode::Untargeted,
    }
}

fn control_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0xc0])
}

fn print_report(r: &AsrReport) {
    println!(
        "{:<10} {:<28} -> {:<16} eligible {:>4} success {:>4} asr {:>6.2}%",
        r.mode, r.source, r.target, r.eligible, r.success, r.asr_percent
    );
}

fn synth_data(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    let ds = build_dataset(
        c.uint("data.n_identities"),
        c.uint("data.n_per_identity"),
        c.real("data.train_fraction"),
        ctx.seed,
        c.uint("data.image_size"),
    )?;
    write_dataset(&ds, &ctx.layout.data())?;
    println!(
        "dataset: {} identities, {} train / {} test images -> {}",
        ds.n_identities,
        ds.train.len(),
        ds.test.len(),
        ctx.layout.data().display()
    );
    Ok(())
}

fn train_victim_cmd(ctx: &Ctx, label: &str) -> Result<()> {
    let ds = ctx.layout.load_data()?;
    let arch = pipeline::victim_arch(&ctx.cfg)?;
    let model = train_victim(&ds, &arch, &pipeline::victim_train(&ctx.cfg, ctx.seed), label)?;
    model.save(&ctx.layout.victim(label))?;
    println!("victim {label}: clean test accuracy {:.2}%", 100.0 * model.clean_accuracy);
    Ok(())
}

fn train_encoder_cmd(ctx: &Ctx) -> Result<()> {
    let ds = ctx.layout.load_data()?;
    let model = train_encoder(&ds, &pipeline::encoder_arch(&ctx.cfg), &pipeline::encoder_train(&ctx.cfg, ctx.seed))?;
    model.save(&ctx.layout.encoder())?;
    println!("encoder: embedding length {}", model.arch.embedding_len());
    Ok(())
}

struct Inputs {
    ds: Dataset,
    encoder: EncoderModel,
}

fn load_inputs(ctx: &Ctx) -> Result<Inputs> {
    Ok(Inputs {
        ds: ctx.layout.load_data()?,
        encoder: ctx.layout.load_encoder()?,
    })
}

fn craft_with(
    ctx: &Ctx,
    cfg: &RunConfig,
    mask: PatchMask,
    inputs: &Inputs,
    victims: &[VictimModel],
    components: Components,
) -> Result<PatchBundle> {
    let mut cc = pipeline::craft_config(cfg, mask, ctx.seed, &inputs.ds, &inputs.encoder)?;
    components.apply(&mut cc);
    Ok(craft_ensemble(&cc, &inputs.ds, victims, &inputs.encoder)?)
}

fn craft_cmd(ctx: &Ctx, sources: &[String], name: &str) -> Result<()> {
    if sources.is_empty() {
        bail!("--sources needs at least one victim label");
    }
    let inputs = load_inputs(ctx)?;
    let victims = sources
        .iter()
        .map(|s| ctx.layout.load_victim(s))
        .collect::<Result<Vec<_>>>()?;
    let mask = pipeline::patch_mask(&ctx.cfg)?;
    let bundle = craft_with(ctx, &ctx.cfg, mask, &inputs, &victims, Components::FULL)?;
    let dir = ctx.layout.bundle(name);
    bundle.save(&dir)?;
    if let Some(last) = bundle.trace.last() {
        println!(
            "bundle {name} ({}): final loss {:.4} (adv {:.4}, id {:.4}, tv {:.4}, vis {:.5}) -> {}",
            bundle.source_label(),
            last.total,
            last.adv,
            last.id,
            last.tv,
            last.vis,
            dir.display()
        );
    }
    Ok(())
}

fn attack_cmd(ctx: &Ctx, bundle: &str, victim: &str) -> Result<()> {
    let b = ctx.layout.load_bundle(bundle)?;
    let v = ctx.layout.load_victim(victim)?;
    let ds = ctx.layout.load_data()?;
    let dir = ctx.layout.adv(victim);
    pipeline::ensure_dir(&dir)?;
    let mut flipped = 0;
    for (i, r) in ds.test.iter().enumerate() {
        let adv = attack_sample(&r.pixels, &b)?;
        flipped += (v.predict(&adv)? != r.identity) as usize;
        write_image(&dir.join(format!("{i}.pgm")), &adv, ImageFormat::Graymap8)?;
    }
    println!(
        "wrote {} adversarial images to {} ({flipped} misclassified)",
        ds.test.len(),
        dir.display()
    );
    Ok(())
}

fn eval_pair(
    ctx: &Ctx,
    bundle: &PatchBundle,
    victim: &VictimModel,
    ds: &Dataset,
    capture: Option<&TestCapture>,
) -> Result<[AsrReport; 2]> {
    let m = mode(ctx);
    let learned = compute_asr(victim, bundle, &ds.test, ds.master_seed, m, capture)?;
    let control = bundle.random_control(control_seed(ctx.seed));
    let control = compute_asr(victim, &control, &ds.test, ds.master_seed, m, capture)?;
    Ok([learned, control])
}

fn eval_cmd(ctx: &Ctx, bundle: &str, victim: &str, simulate_capture: bool, report: &str) -> Result<()> {
    let b = ctx.layout.load_bundle(bundle)?;
    let v = ctx.layout.load_victim(victim)?;
    let ds = ctx.layout.load_data()?;
    let capture = simulate_capture.then(|| TestCapture {
        distribution: pipeline::capture(&ctx.cfg),
        seed: derive_seed(ctx.seed, &[0x7e57]),
    });
    let reports = eval_pair(ctx, &b, &v, &ds, capture.as_ref())?;
    reports.iter().for_each(print_report);
    write_report(&reports, &ctx.layout.report(report))?;
    Ok(())
}

fn transfer_cmd(ctx: &Ctx, bundles: &[String], victims: &[String], report: &str) -> Result<()> {
    if bundles.is_empty() || victims.is_empty() {
        bail!("transfer needs at least one bundle and one victim");
    }
    let ds = ctx.layout.load_data()?;
    let learned = bundles
        .iter()
        .map(|b| ctx.layout.load_bundle(b))
        .collect::<Result<Vec<_>>>()?;
    let controls: Vec<PatchBundle> = learned
        .iter()
        .map(|b| b.random_control(control_seed(ctx.seed)))
        .collect();
    let vs = victims
        .iter()
        .map(|v| ctx.layout.load_victim(v))
        .collect::<Result<Vec<_>>>()?;
    let m = mode(ctx);
    let lm = transfer_matrix(&learned, &vs, &ds.test, ds.master_seed, m)?;
    let cm = transfer_matrix(&controls, &vs, &ds.test, ds.master_seed, m)?;

    println!("{:<28} {}", "source \\ target", lm.targets.join("  "));
    for (i, src) in lm.sources.iter().enumerate() {
        let row: Vec<String> = (0..lm.targets.len()).map(|j| format!("{:6.2}", lm.asr(i, j))).collect();
        println!("{src:<28} {}", row.join("  "));
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
    println!(
        "mean off-diagonal ASR: learned {}, control {}",
        fmt(lm.mean_off_diagonal()),
        fmt(cm.mean_off_diagonal())
    );
    let all: Vec<AsrReport> = lm.reports.into_iter().chain(cm.reports).flatten().collect();
    write_report(&all, &ctx.layout.report(report))?;
    Ok(())
}

fn advtrain_cmd(ctx: &Ctx, victim: &str, bundle: &str) -> Result<()> {
    let inputs = load_inputs(ctx)?;
    let v = ctx.layout.load_victim(victim)?;
    let b = ctx.layout.load_bundle(bundle)?;
    let m = mode(ctx);
    let pre = compute_asr(&v, &b, &inputs.ds.test, inputs.ds.master_seed, m, None)?;

    let train = TrainConfig {
        epochs: ctx.cfg.uint("advtrain.epochs"),
        ..pipeline::victim_train(&ctx.cfg, ctx.seed)
    };
    let defended = adversarial_train(&v, &b, &inputs.ds, ctx.cfg.real("advtrain.mix_fraction"), &train)?;
    defended.save(&ctx.layout.victim(&defended.label))?;
    // Reload so the saved, rounded accuracy is what gets reported.
    let defended = ctx.layout.load_victim(&defended.label)?;

    let mask = b.mask.clone();
    let recrafted = craft_with(ctx, &ctx.cfg, mask, &inputs, std::slice::from_ref(&defended), Components::FULL)?;
    let name = format!("{bundle}-recraft");
    recrafted.save(&ctx.layout.bundle(&name))?;
    let post = compute_asr(&defended, &recrafted, &inputs.ds.test, inputs.ds.master_seed, m, None)?;

    print_report(&pre);
    print_report(&post);
    println!(
        "clean accuracy {:.2}% -> {:.2}%",
        100.0 * v.clean_accuracy,
        100.0 * defended.clean_accuracy
    );
    let summary = [
        ("victim", victim.to_string()),
        ("defended", defended.label.clone()),
        ("clean_accuracy_before", format!("{:.6}", v.clean_accuracy)),
        ("clean_accuracy_after", format!("{:.6}", defended.clean_accuracy)),
        ("asr_before", format!("{:.6}", pre.asr_percent)),
        ("asr_after", format!("{:.6}", post.asr_percent)),
    ]
    .map(|(k, v)| (k.to_string(), v));
    let dir = ctx.layout.root.join("reports");
    pipeline::ensure_dir(&dir)?;
    write_meta(&dir.join("advtrain.summary.tsv"), &summary)?;
    write_report(&[pre, post], &ctx.layout.report("advtrain"))?;
    Ok(())
}

/// One setting of an ablation sweep.
struct Setting {
    label: String,
    mask: PatchMask,
    cfg: RunConfig,
    components: Components,
}

fn parse_values(values: Option<&str>, defaults: &[f64]) -> Result<Vec<f64>> {
    match values {
        None => Ok(defaults.to_vec()),
        Some(s) => list(s)
            .iter()
            .map(|v| v.parse::<f64>().with_context(|| format!("bad sweep value {v:?}")))
            .collect(),
    }
}

fn settings(ctx: &Ctx, axis: Axis, roi: usize, values: Option<&str>) -> Result<Vec<Setting>> {
    let base_mask = pipeline::patch_mask(&ctx.cfg)?;
    let plain = |label: String, mask: PatchMask, cfg: RunConfig| Setting {
        label,
        mask,
        cfg,
        components: Components::FULL,
    };
    let ratio = ctx.cfg.real("patch.cross_ratio");
    let out = match axis {
        Axis::Size => SIZE_SWEEP_128
            .iter()
            .map(|&l| {
                let scaled = ((l * roi) as f64 / 128.0).round() as usize;
                let mask = make_mask(Topology::Cross, scaled, ratio)?;
                Ok(plain(format!("L{l}@{scaled}"), mask, ctx.cfg.clone()))
            })
            .collect::<Result<Vec<_>>>()?,
        Axis::Shape => {
            let tol = ctx.cfg.real("patch.budget_tolerance");
            Topology::ALL
                .iter()
                .map(|&t| {
                    let mask = if t == base_mask.topology {
                        base_mask.clone()
                    } else {
                        budget_match(&base_mask, t, tol)?
                    };
                    Ok(plain(t.to_string(), mask, ctx.cfg.clone()))
                })
                .collect::<Result<Vec<_>>>()?
        }
        Axis::Position => ["center", "random", "top-left"]
            .iter()
            .map(|p| {
                let mut cfg = ctx.cfg.clone();
                cfg.set("render.placement", p)?;
                Ok(plain(p.to_string(), base_mask.clone(), cfg))
            })
            .collect::<Result<Vec<_>>>()?,
        Axis::Components => Components::grid()
            .into_iter()
            .map(|components| Setting {
                label: components.label(),
                mask: base_mask.clone(),
                cfg: ctx.cfg.clone(),
                components,
            })
            .collect(),
        Axis::LambdaId | Axis::LambdaVis | Axis::LambdaTv => {
            let (key, defaults): (&str, &[f64]) = match axis {
                Axis::LambdaId => ("loss.lambda_id", &LAMBDA_ID_SWEEP),
                Axis::LambdaVis => ("loss.lambda_vis", &LAMBDA_VIS_SWEEP),
                _ => ("loss.lambda_tv", &LAMBDA_TV_SWEEP),
            };
            parse_values(values, defaults)?
                .into_iter()
                .map(|v| {
                    let mut cfg = ctx.cfg.clone();
                    cfg.set(key, &v.to_string())?;
                    Ok(plain(format!("{}={v}", key.trim_start_matches("loss.")), base_mask.clone(), cfg))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(out)
}

fn ablate_cmd(ctx: &Ctx, axis: Axis, victim: &str, rows: Option<&str>, values: Option<&str>) -> Result<()> {
    let inputs = load_inputs(ctx)?;
    let v = ctx.layout.load_victim(victim)?;
    let roi = inputs.ds.image_size().0;
    let mut all = settings(ctx, axis, roi, values)?;
    if let Some(rows) = rows {
        let wanted = list(rows);
        if let Some(bad) = wanted.iter().find(|w| !all.iter().any(|s| &s.label == *w)) {
            let known: Vec<&str> = all.iter().map(|s| s.label.as_str()).collect();
            bail!("unknown {} row {bad:?}; known rows: {}", axis.name(), known.join(", "));
        }
        all.retain(|s| wanted.contains(&s.label));
    }
    let mut reports = Vec::new();
    for s in all {
        let bundle = craft_with(ctx, &s.cfg, s.mask, &inputs, std::slice::from_ref(&v), s.components)?;
        bundle.save(&bundle_dir(&ctx.layout.bundle(&format!("ablate-{}", axis.name())), &s.label))?;
        let mut r = compute_asr(&v, &bundle, &inputs.ds.test, inputs.ds.master_seed, mode(ctx), None)?;
        r.source = s.label;
        print_report(&r);
        reports.push(r);
    }
    write_report(&reports, &ctx.layout.report(&format!("ablate-{}", axis.name())))?;
    Ok(())
}

fn bundle_dir(parent: &Path, label: &str) -> PathBuf {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=@".contains(c) { c } else { '_' })
        .collect();
    parent.join(safe)
}
