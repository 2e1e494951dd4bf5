//! Joint optimization of the patch texture and the renderer parameters under
//! an expectation over capture conditions, plus ensemble crafting and the
//! on-disk patch bundle.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::capture::{apply_capture_with_grad, sample_capture, CaptureDistribution, CaptureParams};
use crate::data::{self, Dataset, ImageFormat};
use crate::error::{Error, Result};
use crate::model_io::{self, meta_get, meta_parse};
use crate::objectives::{identity_loss, margin_loss, total_loss, tv_loss, vis_loss, AttackMode, LossWeights, Margins};
use crate::recognizers::{msdife_embed, msdife_embed_backward, victim_forward_backward, EncoderModel, VictimModel};
use crate::renderer::{
    asit_backward, asit_forward, asit_forward_traced, composite, composite_backward, AsitWeights, Placement,
    RenderBounds, RenderParams,
};
use crate::topology::{init_texture, InitMode, PatchMask, Topology};
use crate::numerics::{derive_seed, Grid};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", params.len()),
            got: format!("{} gradients, {} moments", grads.len(), state.m.len()),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient coordinate {i}"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

pub fn project_unit(p: &mut Grid) {
    p.clamp_unit();
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraftConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub margins: Margins,
    pub mode: AttackMode,
    pub bounds: RenderBounds,
    pub capture: CaptureDistribution,
    pub mask: PatchMask,
    pub init_mode: InitMode,
    /// When false the renderer is frozen at identity parameters.
    pub use_asit: bool,
    /// Restrict total variation to texel pairs inside the mask.
    pub tv_masked: bool,
    pub seed: u64,
}

impl CraftConfig {
    pub fn new(mask: PatchMask) -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            lr: 5e-4,
            weights: LossWeights::default(),
            margins: Margins::default(),
            mode: AttackMode::Untargeted,
            bounds: RenderBounds::default(),
            capture: CaptureDistribution::default(),
            mask,
            init_mode: InitMode::Constant,
            use_asit: true,
            tv_masked: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::invalid("iterations and batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.weights.validate()?;
        self.margins.validate()?;
        self.bounds.validate()?;
        self.capture.validate()
    }

    /// Ordered description used for provenance and the config hash.
    pub fn describe(&self) -> Vec<(String, String)> {
        let b = &self.bounds;
        let c = &self.capture;
        let target = self.mode.target().map_or("none".to_string(), |t| t.to_string());
        [
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lambda_id", self.weights.lambda_id.to_string()),
            ("lambda_vis", self.weights.lambda_vis.to_string()),
            ("lambda_tv", self.weights.lambda_tv.to_string()),
            ("kappa", self.margins.kappa.to_string()),
            ("m", self.margins.m.to_string()),
            ("mode", self.mode.name().to_string()),
            ("target", target),
            ("r_max", b.r_max.to_string()),
            ("t_max", b.t_max.to_string()),
            ("s_min", b.s_min.to_string()),
            ("s_max", b.s_max.to_string()),
            ("c_min", b.c_min.to_string()),
            ("c_max", b.c_max.to_string()),
            ("b_min", b.b_min.to_string()),
            ("b_max", b.b_max.to_string()),
            ("placement", b.placement.to_string()),
            ("gamma_range", format!("{},{}", c.gamma.0, c.gamma.1)),
            ("delta_range", format!("{},{}", c.delta.0, c.delta.1)),
            ("sigma_range", format!("{},{}", c.sigma.0, c.sigma.1)),
            ("eot_k", c.k.to_string()),
            ("topology", self.mask.topology.to_string()),
            ("size_param", self.mask.size_param.to_string()),
            ("budget", self.mask.budget.to_string()),
            ("init_mode", format!("{:?}", self.init_mode).to_lowercase()),
            ("use_asit", self.use_asit.to_string()),
            ("tv_masked", self.tv_masked.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Toggles of the three method components for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub asit: bool,
    pub msdife: bool,
    pub ras: bool,
}

impl Components {
    pub const FULL: Components = Components {
        asit: true,
        msdife: true,
        ras: true,
    };

    /// All eight on/off combinations, base first and full last.
    pub fn grid() -> Vec<Components> {
        (0..8)
            .map(|i| Components {
                asit: i & 1 != 0,
                msdife: i & 2 != 0,
                ras: i & 4 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.asit, "asit"), (self.msdife, "msdife"), (self.ras, "ras")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "base".into()
        } else {
            format!("base+{}", on.join("+"))
        }
    }

    /// Disabling ASIT freezes identity render parameters, disabling MS-DIFE
    /// zeroes its weight, disabling RaS uses one identity capture.
    pub fn apply(&self, config: &mut CraftConfig) {
        config.use_asit = self.asit;
        if !self.msdife {
            config.weights.lambda_id = 0.0;
        }
        if !self.ras {
            config.capture = CaptureDistribution::identity(1);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub adv: f64,
    pub id: f64,
    pub tv: f64,
    pub vis: f64,
    pub total: f64,
}

pub const TRACE_CHECKPOINT: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub sources: Vec<String>,
    pub mode: String,
    pub target: Option<usize>,
    pub dataset_seed: u64,
    /// Full resolved crafting configuration.
    pub config: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBundle {
    pub texture: Grid,
    pub mask: PatchMask,
    pub asit: AsitWeights,
    pub asit_enabled: bool,
    pub bounds: RenderBounds,
    pub roi: (usize, usize),
    pub provenance: Provenance,
    pub trace: Vec<TraceRow>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl PatchBundle {
    /// Values are stored at single precision so a bundle reloaded from disk
    /// is identical to the in-memory one.
    fn finalize(mut self) -> Self {
        for v in self.texture.values_mut() {
            *v = f32_round(*v);
        }
        for v in &mut self.asit.params {
            *v = f32_round(*v);
        }
        self
    }

    /// Render parameters for one ROI.
    pub fn render_params(&self, x: &Grid) -> Result<RenderParams> {
        if self.asit_enabled {
            asit_forward(x, &self.asit, &self.bounds)
        } else {
            Ok(RenderParams::IDENTITY)
        }
    }

    pub fn source_label(&self) -> String {
        self.provenance.sources.join("+")
    }

    /// Content hash over texture, mask, renderer weights and metadata.
    pub fn hash(&self) -> String {
        let mut bytes = data::encode_image(&self.texture, ImageFormat::FloatMap).unwrap_or_default();
        bytes.extend(data::encode_image(&self.mask.mask, ImageFormat::Graymap8).unwrap_or_default());
        bytes.extend(model_io::encode_tensors(&model_io::network_tensors(&self.asit.net, &self.asit.params)));
        let mut text = String::new();
        for (k, v) in self.meta_entries() {
            let _ = writeln!(text, "{k}\t{v}");
        }
        bytes.extend(text.into_bytes());
        sha_hex(&bytes)
    }

    /// Same mask, bounds and renderer weights with an i.i.d. uniform texture.
    pub fn random_control(&self, seed: u64) -> PatchBundle {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = self.texture.shape();
        let mut out = self.clone();
        out.texture = Grid::from_fn(h, w, |_, _| rng.random_range(0.0..1.0));
        out.provenance.sources = self.provenance.sources.iter().map(|s| format!("control({s})")).collect();
        out.trace.clear();
        out.finalize()
    }

    fn meta_entries(&self) -> Vec<(String, String)> {
        let p = &self.provenance;
        let mut meta: Vec<(String, String)> = vec![
            ("roi".into(), format!("{}x{}", self.roi.0, self.roi.1)),
            ("asit_enabled".into(), self.asit_enabled.to_string()),
            ("sources".into(), p.sources.join(",")),
            ("dataset_seed".into(), p.dataset_seed.to_string()),
            ("config_hash".into(), p.config_hash.clone()),
        ];
        for (k, v) in &p.config {
            meta.push((format!("config.{k}"), v.clone()));
        }
        meta
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        data::write_image(&dir.join("texture.pfm"), &self.texture, ImageFormat::FloatMap)?;
        data::write_image(&dir.join("mask.pgm"), &self.mask.mask, ImageFormat::Graymap8)?;
        model_io::write_network(&dir.join("asit.wts"), &self.asit.net, &self.asit.params)?;
        let mut meta = self.meta_entries();
        meta.push(("bundle_hash".into(), self.hash()));
        model_io::write_meta(&dir.join("meta.tsv"), &meta)?;
        let path = dir.join("trace.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["iteration", "adv", "id", "tv", "vis", "total"])
            .map_err(|e| csv_error(&path, e))?;
        for r in checkpoint_rows(&self.trace) {
            w.write_record([
                r.iteration.to_string(),
                r.adv.to_string(),
                r.id.to_string(),
                r.tv.to_string(),
                r.vis.to_string(),
                r.total.to_string(),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.tsv");
        if !meta_path.exists() {
            return Err(Error::invalid(format!("bundle not found at {}", dir.display())));
        }
        let meta = model_io::read_meta(&meta_path)?;
        let cfg = |k: &str| meta_get(&meta, &format!("config.{k}"), &meta_path);
        let cfg_f = |k: &str| -> Result<f64> { meta_parse(&meta, &format!("config.{k}"), &meta_path) };
        let roi_s = meta_get(&meta, "roi", &meta_path)?;
        let roi = roi_s
            .split_once('x')
            .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
            .ok_or_else(|| Error::format(&meta_path, format!("bad roi {roi_s:?}")))?;
        let topology: Topology = cfg("topology")?
            .parse()
            .map_err(|_| Error::format(&meta_path, "bad topology"))?;
        let mask = PatchMask::from_grid(
            data::read_image(&dir.join("mask.pgm"))?,
            topology,
            meta_parse(&meta, "config.size_param", &meta_path)?,
        )?;
        let texture = data::read_image(&dir.join("texture.pfm"))?;
        texture.ensure_same_shape(&mask.mask)?;
        let placement: Placement = cfg("placement")?
            .parse()
            .map_err(|_| Error::format(&meta_path, "bad placement"))?;
        let bounds = RenderBounds {
            r_max: cfg_f("r_max")?,
            t_max: cfg_f("t_max")?,
            s_min: cfg_f("s_min")?,
            s_max: cfg_f("s_max")?,
            c_min: cfg_f("c_min")?,
            c_max: cfg_f("c_max")?,
            b_min: cfg_f("b_min")?,
            b_max: cfg_f("b_max")?,
            placement,
        };
        let net = crate::renderer::asit_network(roi.0, roi.1)?;
        let params = model_io::read_network(&dir.join("asit.wts"), &net)?;
        let target = match cfg("target")? {
            "none" => None,
            t => Some(t.parse().map_err(|_| Error::format(&meta_path, "bad target"))?),
        };
        let config: Vec<(String, String)> = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let sources = meta_get(&meta, "sources", &meta_path)?
            .split(',')
            .map(str::to_string)
            .collect();
        let bundle = PatchBundle {
            texture,
            mask,
            asit: AsitWeights { net, params },
            asit_enabled: meta_parse(&meta, "asit_enabled", &meta_path)?,
            bounds,
            roi,
            provenance: Provenance {
                config_hash: meta_get(&meta, "config_hash", &meta_path)?.to_string(),
                sources,
                mode: cfg("mode")?.to_string(),
                target,
                dataset_seed: meta_parse(&meta, "dataset_seed", &meta_path)?,
                config: reorder_like_describe(config),
            },
            trace: read_trace(&dir.join("trace.csv"))?,
        };
        Ok(bundle)
    }
}

/// `Meta` is sorted by key; restore the canonical order so hashes match.
fn reorder_like_describe(config: Vec<(String, String)>) -> Vec<(String, String)> {
    let order: Vec<String> = CraftConfig::new(PatchMask {
        mask: Grid::zeros(1, 1),
        topology: Topology::Square,
        size_param: 1,
        budget: 0,
    })
    .describe()
    .into_iter()
    .map(|(k, _)| k)
    .collect();
    let mut config = config;
    config.sort_by_key(|(k, _)| order.iter().position(|o| o == k).unwrap_or(usize::MAX));
    config
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, "bad trace field"))
        };
        rows.push(TraceRow {
            iteration: f(0)? as usize,
            adv: f(1)?,
            id: f(2)?,
            tv: f(3)?,
            vis: f(4)?,
            total: f(5)?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// The crafting objective

/// One training sample: ROI, true label, cached clean embedding and the
/// capture draws used for it.
pub struct SampleInput<'a> {
    pub x: &'a Grid,
    pub label: usize,
    pub g_clean: Option<&'a [f64]>,
    pub captures: Vec<CaptureParams>,
}

/// Per-sample loss components and their gradients.
struct SampleOutput {
    adv: f64,
    id: f64,
    vis: f64,
    /// Gradient of `adv + lambda_id id + lambda_vis vis` w.r.t. the texture.
    texture: Grid,
    /// Same, w.r.t. the renderer weights.
    phi: Vec<f64>,
}

pub struct CraftObjective<'a> {
    pub victims: &'a [VictimModel],
    pub encoder: &'a EncoderModel,
    pub config: &'a CraftConfig,
}

impl CraftObjective<'_> {
    fn uses_identity(&self) -> bool {
        self.config.weights.lambda_id > 0.0
    }

    fn sample(&self, texture: &Grid, asit: &AsitWeights, s: &SampleInput<'_>) -> Result<SampleOutput> {
        let cfg = self.config;
        let mask = &cfg.mask.mask;
        let placement = cfg.bounds.placement;
        let (params, trace) = if cfg.use_asit {
            let (p, t) = asit_forward_traced(s.x, asit, &cfg.bounds)?;
            (p, Some(t))
        } else {
            (RenderParams::IDENTITY, None)
        };
        let x_hat = composite(s.x, texture, mask, &params, placement)?;
        let vis = vis_loss(&x_hat, s.x)?;
        let mut dx_hat: Vec<f64> = vis.grad.iter().map(|g| g * cfg.weights.lambda_vis).collect();
        let k = s.captures.len() as f64;
        let nv = self.victims.len() as f64;
        // Sums over capture draws, divided by K once at the end.
        let (mut adv, mut id) = (0.0, 0.0);
        let mut eot = vec![0.0; x_hat.len()];
        for xi in &s.captures {
            let (x_til, deriv) = apply_capture_with_grad(&x_hat, xi);
            let mut dx_til = vec![0.0; x_til.len()];
            for victim in self.victims {
                let mut m = 0.0;
                let (_, g) = victim_forward_backward(victim, &x_til, |z| {
                    let l = margin_loss(z, &cfg.mode, s.label, cfg.margins.kappa)?;
                    m = l.value;
                    Ok(l.grad)
                })?;
                adv += m / nv;
                for (d, gi) in dx_til.iter_mut().zip(g.values()) {
                    *d += gi / nv;
                }
            }
            if self.uses_identity() {
                let g_clean = s.g_clean.unwrap_or(&[]);
                let mut l_id = 0.0;
                let (_, g) = msdife_embed_backward(self.encoder, &x_til, |g_adv| {
                    let l = identity_loss(&cfg.mode, g_clean, g_adv, cfg.margins.m)?;
                    l_id = l.value;
                    Ok(l.grad)
                })?;
                id += l_id;
                for (d, gi) in dx_til.iter_mut().zip(g.values()) {
                    *d += cfg.weights.lambda_id * gi;
                }
            }
            for ((e, dt), c) in eot.iter_mut().zip(&dx_til).zip(&deriv) {
                *e += dt * c;
            }
        }
        let (adv, id) = (adv / k, id / k);
        for (dh, e) in dx_hat.iter_mut().zip(&eot) {
            *dh += e / k;
        }
        let grad_out = Grid::new(x_hat.height(), x_hat.width(), dx_hat)?;
        let cg = composite_backward(s.x, texture, mask, &params, placement, &grad_out)?;
        let mut phi = vec![0.0; asit.params.len()];
        if let Some(t) = trace {
            asit_backward(asit, &t, cg.params, &mut phi);
        }
        Ok(SampleOutput {
            adv,
            id,
            vis: vis.value,
            texture: cg.texture,
            phi,
        })
    }

    /// Batch objective and its gradient w.r.t. `[P; phi]`.
    pub fn batch(
        &self,
        texture: &Grid,
        asit: &AsitWeights,
        samples: &[SampleInput<'_>],
    ) -> Result<(TraceRow, Vec<f64>)> {
        let outputs: Vec<SampleOutput> = samples
            .par_iter()
            .map(|s| self.sample(texture, asit, s))
            .collect::<Result<_>>()?;
        let n = samples.len() as f64;
        let np = texture.len();
        let mut grad = vec![0.0; np + asit.params.len()];
        let (mut adv, mut id, mut vis) = (0.0, 0.0, 0.0);
        for o in &outputs {
            adv += o.adv / n;
            id += o.id / n;
            vis += o.vis / n;
            for (g, v) in grad[..np].iter_mut().zip(o.texture.values()) {
                *g += v / n;
            }
            for (g, v) in grad[np..].iter_mut().zip(&o.phi) {
                *g += v / n;
            }
        }
        let cfg = self.config;
        let tv = tv_loss(texture, cfg.tv_masked.then_some(&cfg.mask.mask))?;
        for (g, t) in grad[..np].iter_mut().zip(&tv.grad) {
            *g += cfg.weights.lambda_tv * t;
        }
        let total = total_loss(adv, id, tv.value, vis, &cfg.weights)?;
        Ok((
            TraceRow {
                iteration: 0,
                adv,
                id,
                tv: tv.value,
                vis,
                total: total.value,
            },
            grad,
        ))
    }
}

fn check_victims(victims: &[VictimModel], dataset: &Dataset) -> Result<()> {
    let first = victims.first().ok_or_else(|| Error::invalid("at least one victim is required"))?;
    let (h, w) = dataset.image_size();
    for v in victims {
        if v.n_identities != first.n_identities || v.n_identities != dataset.n_identities {
            return Err(Error::invalid(format!(
                "victim {} has {} classes; expected {}",
                v.label, v.n_identities, dataset.n_identities
            )));
        }
        if v.input_size() != (h, w) {
            return Err(Error::invalid(format!("victim {} input size does not match the dataset", v.label)));
        }
    }
    Ok(())
}

/// Batch indices for an iteration: without replacement when possible.
fn batch_indices(seed: u64, iteration: usize, n: usize, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, iteration as u64]));
    if b <= n {
        rand::seq::index::sample(&mut rng, n, b).into_vec()
    } else {
        use rand::Rng;
        (0..b).map(|_| rng.random_range(0..n)).collect()
    }
}

fn capture_draws(cfg: &CraftConfig, iteration: usize, slot: usize) -> Vec<CaptureParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xca9, iteration as u64, slot as u64]));
    (0..cfg.capture.k).map(|_| sample_capture(&cfg.capture, &mut rng)).collect()
}

pub fn craft_patch(
    config: &CraftConfig,
    dataset: &Dataset,
    victim: &VictimModel,
    encoder: &EncoderModel,
) -> Result<PatchBundle> {
    craft_ensemble(config, dataset, std::slice::from_ref(victim), encoder)
}

/// Algorithm-1 crafting where the margin term is averaged over `victims`.
pub fn craft_ensemble(
    config: &CraftConfig,
    dataset: &Dataset,
    victims: &[VictimModel],
    encoder: &EncoderModel,
) -> Result<PatchBundle> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::invalid("cannot craft on an empty training split"));
    }
    check_victims(victims, dataset)?;
    let roi = dataset.image_size();
    if let AttackMode::Targeted { target, prototype } = &config.mode {
        if *target >= dataset.n_identities {
            return Err(Error::invalid(format!("target {target} out of range")));
        }
        if config.weights.lambda_id > 0.0 && prototype.is_none() {
            return Err(Error::invalid("targeted crafting with identity guidance needs a target prototype"));
        }
    }
    if let Some(w) = crate::renderer::truncation_warning(roi, config.mask.mask.shape(), &config.bounds) {
        log::warn!("{w}");
    }

    let objective = CraftObjective {
        victims,
        encoder,
        config,
    };
    let clean: Vec<Option<Vec<f64>>> =
        if objective.uses_identity() && matches!(config.mode, AttackMode::Untargeted) {
            dataset
                .train
                .par_iter()
                .map(|r| msdife_embed(encoder, &r.pixels).map(|e| Some(e.g)))
                .collect::<Result<_>>()?
        } else {
            vec![None; dataset.train.len()]
        };

    let mut texture = init_texture(&config.mask, config.init_mode, derive_seed(config.seed, &[0x7e]))
        .texture;
    let mut asit = AsitWeights::init(roi.0, roi.1, derive_seed(config.seed, &[0xa517]))?;
    let np = texture.len();
    let mut state = AdamState::new(np + asit.params.len());
    let mut params: Vec<f64> = texture.values().iter().chain(&asit.params).copied().collect();
    let mut trace = Vec::new();

    for it in 0..config.iterations {
        let idx = batch_indices(config.seed, it, dataset.train.len(), config.batch_size);
        let samples: Vec<SampleInput<'_>> = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| SampleInput {
                x: &dataset.train[i].pixels,
                label: dataset.train[i].identity,
                g_clean: clean[i].as_deref(),
                captures: capture_draws(config, it, slot),
            })
            .collect();
        let (mut row, grad) = match objective.batch(&texture, &asit, &samples) {
            Ok(v) => v,
            Err(Error::NonFinite { what }) => {
                return Err(Error::NonFinite {
                    what: format!("{what} at iteration {it}"),
                })
            }
            Err(e) => return Err(e),
        };
        row.iteration = it;
        adam_step(&mut params, &grad, &mut state, config.lr).map_err(|e| match e {
            Error::NonFinite { what } => Error::NonFinite {
                what: format!("{what} at iteration {it}"),
            },
            e => e,
        })?;
        for v in &mut params[..np] {
            *v = v.clamp(0.0, 1.0);
        }
        texture.values_mut().copy_from_slice(&params[..np]);
        asit.params.copy_from_slice(&params[np..]);
        trace.push(row);
    }

    let described = config.describe();
    let mut text = String::new();
    for (k, v) in &described {
        let _ = writeln!(text, "{k}\t{v}");
    }
    let bundle = PatchBundle {
        texture,
        mask: config.mask.clone(),
        asit,
        asit_enabled: config.use_asit,
        bounds: config.bounds,
        roi,
        provenance: Provenance {
            config_hash: sha_hex(text.as_bytes()),
            sources: victims.iter().map(|v| v.label.clone()).collect(),
            mode: config.mode.name().to_string(),
            target: config.mode.target(),
            dataset_seed: dataset.master_seed,
            config: described,
        },
        trace,
    };
    Ok(bundle.finalize())
}

/// Trace rows persisted to disk: every checkpoint plus the final iteration.
pub fn checkpoint_rows(trace: &[TraceRow]) -> Vec<TraceRow> {
    trace
        .iter()
        .filter(|r| r.iteration % TRACE_CHECKPOINT == 0 || r.iteration + 1 == trace.len())
        .copied()
        .collect()
}
