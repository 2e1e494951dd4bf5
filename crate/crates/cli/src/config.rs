//! Flat `key = value` run configuration with a typed registry of every
//! pipeline default. Unknown keys and out-of-range values are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// Unsigned integer with inclusive minimum.
    Uint(u64),
    /// Real number with an inclusive range.
    Real(f64, f64),
    Bool,
    /// One of a fixed set of words.
    Choice(&'static [&'static str]),
    /// Comma-separated positive integers of the given length (0 = any).
    UintList(usize),
    /// Free-form, validated by the consumer.
    Text,
}

struct Key {
    name: &'static str,
    default: &'static str,
    kind: Kind,
    help: &'static str,
}

const INF: f64 = f64::INFINITY;

#[rustfmt::skip]
const REGISTRY: &[Key] = &[
    Key { name: "data.n_identities", default: "20", kind: Kind::Uint(2), help: "identities in the synthetic dataset" },
    Key { name: "data.n_per_identity", default: "20", kind: Kind::Uint(4), help: "images per identity" },
    Key { name: "data.train_fraction", default: "0.5", kind: Kind::Real(1e-9, 1.0 - 1e-9), help: "per-identity train share" },
    Key { name: "data.image_size", default: "64", kind: Kind::Uint(32), help: "ROI side in pixels" },
    Key { name: "victim.channels", default: "16,32,64", kind: Kind::UintList(3), help: "victim conv widths" },
    Key { name: "victim.head", default: "global-pool", kind: Kind::Choice(&["global-pool", "flatten"]), help: "victim classifier input" },
    Key { name: "victim.epochs", default: "30", kind: Kind::Uint(1), help: "victim training epochs" },
    Key { name: "victim.lr", default: "0.001", kind: Kind::Real(1e-12, 1.0), help: "victim Adam learning rate" },
    Key { name: "victim.batch_size", default: "16", kind: Kind::Uint(1), help: "victim mini-batch" },
    Key { name: "encoder.channels", default: "16,32", kind: Kind::UintList(2), help: "encoder conv widths" },
    Key { name: "encoder.scales", default: "1,2,4", kind: Kind::UintList(0), help: "pooling grid sizes" },
    Key { name: "encoder.epochs", default: "15", kind: Kind::Uint(1), help: "encoder pretraining epochs" },
    Key { name: "encoder.lr", default: "0.001", kind: Kind::Real(1e-12, 1.0), help: "encoder Adam learning rate" },
    Key { name: "craft.iterations", default: "2000", kind: Kind::Uint(1), help: "crafting iterations T" },
    Key { name: "craft.batch_size", default: "16", kind: Kind::Uint(1), help: "crafting mini-batch B" },
    Key { name: "craft.eot_k", default: "4", kind: Kind::Uint(1), help: "capture samples per image K" },
    Key { name: "craft.lr", default: "0.0005", kind: Kind::Real(1e-12, INF), help: "crafting Adam learning rate" },
    Key { name: "craft.init", default: "constant", kind: Kind::Choice(&["constant", "uniform"]), help: "texture initialization" },
    Key { name: "craft.tv_masked", default: "false", kind: Kind::Bool, help: "restrict TV to in-mask texel pairs" },
    Key { name: "loss.lambda_id", default: "0.2", kind: Kind::Real(0.0, INF), help: "identity-feature weight" },
    Key { name: "loss.lambda_vis", default: "0.004", kind: Kind::Real(0.0, INF), help: "visual-consistency weight" },
    Key { name: "loss.lambda_tv", default: "0.00002", kind: Kind::Real(0.0, INF), help: "total-variation weight" },
    Key { name: "loss.kappa", default: "0", kind: Kind::Real(0.0, INF), help: "logit margin" },
    Key { name: "loss.m", default: "0.5", kind: Kind::Real(1e-12, INF), help: "identity margin" },
    Key { name: "attack.mode", default: "untargeted", kind: Kind::Choice(&["untargeted", "targeted"]), help: "attack goal" },
    Key { name: "attack.target", default: "0", kind: Kind::Uint(0), help: "target identity for targeted mode" },
    Key { name: "patch.topology", default: "cross", kind: Kind::Choice(&["cross", "square", "circle", "triangle"]), help: "mask shape" },
    Key { name: "patch.size", default: "20", kind: Kind::Uint(5), help: "long arm / side / diameter in texels" },
    Key { name: "patch.cross_ratio", default: "0.25", kind: Kind::Real(1e-9, 1.0), help: "cross short-arm ratio" },
    Key { name: "patch.budget_tolerance", default: "0.05", kind: Kind::Real(0.0, 1.0), help: "shape-sweep budget tolerance" },
    Key { name: "render.r_max_deg", default: "10", kind: Kind::Real(1e-9, 180.0), help: "rotation bound (degrees)" },
    Key { name: "render.t_max", default: "0.1", kind: Kind::Real(1e-9, 1.0), help: "translation bound (ROI fraction)" },
    Key { name: "render.s_min", default: "0.9", kind: Kind::Real(1e-9, 1.0 - 1e-9), help: "scale lower bound" },
    Key { name: "render.s_max", default: "1.1", kind: Kind::Real(1.0 + 1e-9, INF), help: "scale upper bound" },
    Key { name: "render.c_min", default: "0.8", kind: Kind::Real(0.0, 1.0 - 1e-9), help: "contrast lower bound" },
    Key { name: "render.c_max", default: "1.2", kind: Kind::Real(1.0 + 1e-9, INF), help: "contrast upper bound" },
    Key { name: "render.b_min", default: "-0.1", kind: Kind::Real(-1.0, -1e-9), help: "brightness lower bound" },
    Key { name: "render.b_max", default: "0.1", kind: Kind::Real(1e-9, 1.0), help: "brightness upper bound" },
    Key { name: "render.placement", default: "center", kind: Kind::Text, help: "center | top-left | random | offset:ROW:COL" },
    Key { name: "capture.gamma_min", default: "0.85", kind: Kind::Real(0.0, 1.0), help: "contrast draw lower bound" },
    Key { name: "capture.gamma_max", default: "1.15", kind: Kind::Real(1.0, INF), help: "contrast draw upper bound" },
    Key { name: "capture.delta_min", default: "-0.08", kind: Kind::Real(-1.0, 0.0), help: "brightness draw lower bound" },
    Key { name: "capture.delta_max", default: "0.08", kind: Kind::Real(0.0, 1.0), help: "brightness draw upper bound" },
    Key { name: "capture.sigma_min", default: "0", kind: Kind::Real(0.0, 1.0), help: "noise draw lower bound" },
    Key { name: "capture.sigma_max", default: "0.05", kind: Kind::Real(0.0, 1.0), help: "noise draw upper bound" },
    Key { name: "advtrain.mix_fraction", default: "0.5", kind: Kind::Real(0.0, 1.0), help: "patched share of training images" },
    Key { name: "advtrain.epochs", default: "30", kind: Kind::Uint(1), help: "adversarial training epochs" },
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn find(name: &str) -> Option<&'static Key> {
    REGISTRY.iter().find(|k| k.name == name)
}

fn check(key: &Key, value: &str) -> Result<()> {
    let bad = |why: String| anyhow!("config key {} = {value:?}: {why}", key.name);
    match key.kind {
        Kind::Uint(min) => {
            let v: u64 = value.parse().map_err(|_| bad("expected an unsigned integer".into()))?;
            if v < min {
                return Err(bad(format!("must be at least {min}")));
            }
        }
        Kind::Real(lo, hi) => {
            let v: f64 = value.parse().map_err(|_| bad("expected a number".into()))?;
            if !(v.is_finite() && lo <= v && v <= hi) {
                return Err(bad(format!("must lie in [{lo}, {hi}]")));
            }
        }
        Kind::Bool => {
            value.parse::<bool>().map_err(|_| bad("expected true or false".into()))?;
        }
        Kind::Choice(options) => {
            if !options.contains(&value) {
                return Err(bad(format!("expected one of {}", options.join(", "))));
            }
        }
        Kind::UintList(len) => {
            let items: Vec<usize> = value
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("expected comma-separated integers".into()))?;
            if items.is_empty() || items.contains(&0) || (len > 0 && items.len() != len) {
                return Err(bad(match len {
                    0 => "expected positive integers".into(),
                    n => format!("expected {n} positive integers"),
                }));
            }
        }
        Kind::Text => {}
    }
    Ok(())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: REGISTRY.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let key = find(name).ok_or_else(|| anyhow!("unknown config key {name:?}"))?;
        let value = value.trim();
        check(key, value)?;
        self.values.insert(key.name, value.to_string());
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn get(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("config key {name} is not registered"))
    }

    pub fn uint(&self, name: &str) -> usize {
        self.get(name).parse().expect("validated on set")
    }

    pub fn real(&self, name: &str) -> f64 {
        self.get(name).parse().expect("validated on set")
    }

    pub fn flag(&self, name: &str) -> bool {
        self.get(name).parse().expect("validated on set")
    }

    pub fn uint_list(&self, name: &str) -> Vec<usize> {
        self.get(name).split(',').map(|s| s.trim().parse().expect("validated on set")).collect()
    }

    /// Every key with its resolved value, in registry order.
    pub fn entries(&self) -> Vec<(String, String)> {
        REGISTRY
            .iter()
            .map(|k| (k.name.to_string(), self.values[k.name].clone()))
            .collect()
    }

    /// Cross-key checks that single-key ranges cannot express.
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [
            ("capture.gamma_min", "capture.gamma_max"),
            ("capture.delta_min", "capture.delta_max"),
            ("capture.sigma_min", "capture.sigma_max"),
        ] {
            if self.real(lo) > self.real(hi) {
                bail!("{lo} must not exceed {hi}");
            }
        }
        let placement = self.get("render.placement");
        if placement != "random" {
            placement
                .parse::<crosspatch::renderer::Placement>()
                .map_err(|e| anyhow!("render.placement: {e}"))?;
        }
        let size = self.uint("data.image_size");
        if size % 8 != 0 {
            bail!("data.image_size must be a multiple of 8 for the victim's three pooling stages");
        }
        Ok(())
    }

    pub fn help_text() -> String {
        REGISTRY
            .iter()
            .map(|k| format!("{:<26} {:<12} {}\n", k.name, k.default, k.help))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_their_own_checks() {
        for k in REGISTRY {
            check(k, k.default).unwrap();
        }
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\ncraft.iterations = 10 # trailing\n\nloss.kappa=1.5\n").unwrap();
        assert_eq!(c.uint("craft.iterations"), 10);
        assert_eq!(c.real("loss.kappa"), 1.5);
        assert!(c.apply_text("nope = 1").unwrap_err().to_string().contains("line 1"));
        assert!(c.set("craft.iterations", "0").is_err());
        assert!(c.set("loss.kappa", "-1").is_err());
        assert!(c.set("victim.channels", "1,2").is_err());
        assert!(c.set("attack.mode", "sideways").is_err());
        assert!(c.apply_text("craft.iterations 10").is_err());
    }

    #[test]
    fn cross_key_validation() {
        let mut c = RunConfig::default();
        c.set("capture.sigma_min", "0.06").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("data.image_size", "60").unwrap();
        assert!(c.validate().is_err());
    }
}
