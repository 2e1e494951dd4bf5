#![allow(dead_code)]

use crosspatch::crafting::{PatchBundle, Provenance};
use crosspatch::numerics::Grid;
use crosspatch::recognizers::{VictimHead, EncoderArch, EncoderModel, VictimArch, VictimModel};
use crosspatch::renderer::{AsitWeights, RenderBounds};
use crosspatch::topology::PatchMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(h: usize, w: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Grid {
    Grid::from_fn(h, w, |_, _| rng.random_range(lo..hi))
}

/// Untrained victim with a small label space, for gradient and plumbing tests.
pub fn toy_victim(size: usize, n_classes: usize, seed: u64, label: &str) -> VictimModel {
    let arch = VictimArch { channels: [2, 3, 4], head: VictimHead::Flatten };
    let net = arch.network(size, size, n_classes).unwrap();
    VictimModel {
        weights: net.init_params(seed),
        arch,
        net,
        n_identities: n_classes,
        label: label.into(),
        dataset_seed: 0,
        clean_accuracy: 0.0,
    }
}

/// Untrained encoder whose conv biases are positive so feature maps stay alive.
pub fn toy_encoder(size: usize, seed: u64) -> EncoderModel {
    let arch = EncoderArch { channels: [3, 4], scales: vec![1, 2] };
    let net = arch.network(size, size).unwrap();
    let mut weights = net.init_params(seed);
    for t in net.param_tensors() {
        if t.name.ends_with("bias") && t.dims.len() == 1 && !t.name.starts_with("layer6") {
            weights[t.offset..t.offset + t.dims[0]].fill(0.1);
        }
    }
    EncoderModel { arch, net, weights, frozen: true }
}

/// ASIT weights with a random (non-zero) output layer.
pub fn random_asit(size: usize, seed: u64, scale: f64) -> AsitWeights {
    let base = AsitWeights::init(size, size, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let mut params = base.params.clone();
    if let Some(range) = base.net.last_dense_range() {
        for p in &mut params[range] {
            *p = r.random_range(-scale..scale);
        }
    }
    base.with_params(params).unwrap()
}

pub fn bundle(texture: Grid, mask: PatchMask, roi: (usize, usize), asit_enabled: bool) -> PatchBundle {
    PatchBundle {
        asit: AsitWeights::init(roi.0, roi.1, 1).unwrap(),
        texture,
        mask,
        asit_enabled,
        bounds: RenderBounds::default(),
        roi,
        provenance: Provenance {
            config_hash: "test".into(),
            sources: vec!["src".into()],
            mode: "untargeted".into(),
            target: None,
            dataset_seed: 0,
            config: Vec::new(),
        },
        trace: Vec::new(),
    }
}
