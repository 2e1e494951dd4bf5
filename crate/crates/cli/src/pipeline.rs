//! Translation from a resolved [`RunConfig`] into library configurations,
//! plus the on-disk layout shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crosspatch::capture::CaptureDistribution;
use crosspatch::crafting::{CraftConfig, PatchBundle};
use crosspatch::data::{read_dataset, Dataset};
use crosspatch::numerics::derive_seed;
use crosspatch::objectives::{AttackMode, LossWeights, Margins};
use crosspatch::recognizers::{target_prototype, EncoderArch, EncoderModel, TrainConfig, VictimArch, VictimModel};
use crosspatch::renderer::{Placement, RenderBounds};
use crosspatch::topology::{make_mask, InitMode, PatchMask, Topology};

use crate::config::RunConfig;

/// Artifact paths, all relative to `--out`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn victim(&self, label: &str) -> PathBuf {
        self.root.join("victims").join(label)
    }
    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder")
    }
    pub fn bundle(&self, name: &str) -> PathBuf {
        self.root.join("bundles").join(name)
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.csv"))
    }
    pub fn adv(&self, victim: &str) -> PathBuf {
        self.root.join("adv").join(victim)
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let dir = self.data();
        if !dir.join(crosspatch::data::MANIFEST).exists() {
            bail!("dataset not found at {} (run synth-data first)", dir.display());
        }
        Ok(read_dataset(&dir)?)
    }

    pub fn load_victim(&self, label: &str) -> Result<VictimModel> {
        let dir = self.victim(label);
        if !dir.exists() {
            bail!("victim {label:?} not found at {} (run train-victim first)", dir.display());
        }
        VictimModel::load(&dir).with_context(|| format!("loading victim {label:?}"))
    }

    pub fn load_encoder(&self) -> Result<EncoderModel> {
        let dir = self.encoder();
        if !dir.exists() {
            bail!("encoder not found at {} (run train-encoder first)", dir.display());
        }
        EncoderModel::load(&dir).context("loading encoder")
    }

    pub fn load_bundle(&self, name: &str) -> Result<PatchBundle> {
        PatchBundle::load(&self.bundle(name)).with_context(|| format!("loading bundle {name:?}"))
    }
}

pub fn victim_arch(c: &RunConfig) -> Result<VictimArch> {
    let ch = c.uint_list("victim.channels");
    Ok(VictimArch {
        channels: [ch[0], ch[1], ch[2]],
        head: c.get("victim.head").parse()?,
    })
}

pub fn victim_train(c: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: c.uint("victim.epochs"),
        lr: c.real("victim.lr"),
        batch_size: c.uint("victim.batch_size"),
        seed,
    }
}

pub fn encoder_arch(c: &RunConfig) -> EncoderArch {
    let ch = c.uint_list("encoder.channels");
    EncoderArch {
        channels: [ch[0], ch[1]],
        scales: c.uint_list("encoder.scales"),
    }
}

pub fn encoder_train(c: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: c.uint("encoder.epochs"),
        lr: c.real("encoder.lr"),
        batch_size: c.uint("victim.batch_size"),
        seed,
    }
}

pub fn patch_mask(c: &RunConfig) -> Result<PatchMask> {
    let topo: Topology = c.get("patch.topology").parse()?;
    Ok(make_mask(topo, c.uint("patch.size"), c.real("patch.cross_ratio"))?)
}

/// `random` resolves to a fixed offset drawn from the run seed.
pub fn placement(c: &RunConfig, seed: u64, roi: (usize, usize), patch: (usize, usize)) -> Result<Placement> {
    match c.get("render.placement") {
        "random" => Ok(Placement::random_fixed(derive_seed(seed, &[0x91ace]), roi, patch)),
        other => Ok(other.parse()?),
    }
}

pub fn capture(c: &RunConfig) -> CaptureDistribution {
    CaptureDistribution {
        gamma: (c.real("capture.gamma_min"), c.real("capture.gamma_max")),
        delta: (c.real("capture.delta_min"), c.real("capture.delta_max")),
        sigma: (c.real("capture.sigma_min"), c.real("capture.sigma_max")),
        k: c.uint("craft.eot_k"),
    }
}

pub fn attack_target(c: &RunConfig) -> Option<usize> {
    (c.get("attack.mode") == "targeted").then(|| c.uint("attack.target"))
}

/// Full crafting configuration; the prototype is computed when targeted
/// identity guidance is active.
pub fn craft_config(
    c: &RunConfig,
    mask: PatchMask,
    seed: u64,
    dataset: &Dataset,
    encoder: &EncoderModel,
) -> Result<CraftConfig> {
    let roi = dataset.image_size();
    let mut cfg = CraftConfig::new(mask);
    cfg.iterations = c.uint("craft.iterations");
    cfg.batch_size = c.uint("craft.batch_size");
    cfg.lr = c.real("craft.lr");
    cfg.weights = LossWeights {
        lambda_id: c.real("loss.lambda_id"),
        lambda_vis: c.real("loss.lambda_vis"),
        lambda_tv: c.real("loss.lambda_tv"),
    };
    cfg.margins = Margins {
        kappa: c.real("loss.kappa"),
        m: c.real("loss.m"),
    };
    cfg.bounds = RenderBounds {
        r_max: c.real("render.r_max_deg").to_radians(),
        t_max: c.real("render.t_max"),
        s_min: c.real("render.s_min"),
        s_max: c.real("render.s_max"),
        c_min: c.real("render.c_min"),
        c_max: c.real("render.c_max"),
        b_min: c.real("render.b_min"),
        b_max: c.real("render.b_max"),
        placement: placement(c, seed, roi, cfg.mask.mask.shape())?,
    };
    cfg.capture = capture(c);
    cfg.init_mode = match c.get("craft.init") {
        "uniform" => InitMode::SeededUniform,
        _ => InitMode::Constant,
    };
    cfg.tv_masked = c.flag("craft.tv_masked");
    cfg.seed = seed;
    cfg.mode = match attack_target(c) {
        None => AttackMode::Untargeted,
        Some(target) => {
            if target >= dataset.n_identities {
                bail!("attack.target {target} outside the dataset's {} identities", dataset.n_identities);
            }
            let prototype = if cfg.weights.lambda_id > 0.0 {
                Some(target_prototype(encoder, dataset, target)?)
            } else {
                None
            };
            AttackMode::Targeted { target, prototype }
        }
    };
    Ok(cfg)
}

pub fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}
