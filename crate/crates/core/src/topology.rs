//! Fixed binary patch supports and learnable texture initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    Cross,
    Square,
    Circle,
    Triangle,
}

impl Topology {
    pub const ALL: [Topology; 4] = [Self::Square, Self::Circle, Self::Triangle, Self::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cross => "cross",
            Self::Square => "square",
            Self::Circle => "circle",
            Self::Triangle => "triangle",
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Self::Cross),
            "square" => Ok(Self::Square),
            "circle" => Ok(Self::Circle),
            "triangle" => Ok(Self::Triangle),
            other => Err(Error::invalid(format!("unknown topology {other:?}"))),
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub mask: Grid,
    pub topology: Topology,
    pub size_param: usize,
    pub budget: usize,
}

impl PatchMask {
    /// Builds a mask from an existing binary grid (e.g. one read from disk).
    pub fn from_grid(mask: Grid, topology: Topology, size_param: usize) -> Result<Self> {
        if !mask.is_binary() {
            return Err(Error::invalid("mask values must be exactly 0 or 1"));
        }
        let budget = count_ones(&mask);
        Ok(Self {
            mask,
            topology,
            size_param,
            budget,
        })
    }

    pub fn side(&self) -> usize {
        self.mask.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Constant,
    SeededUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTexture {
    pub texture: Grid,
    pub init_mode: InitMode,
}

fn count_ones(g: &Grid) -> usize {
    g.values().iter().filter(|&&v| v == 1.0).count()
}

/// Cross arm width: `round(ratio * L)`, halves rounded up.
pub fn cross_arm_width(long_arm: usize, ratio: f64) -> usize {
    (ratio * long_arm as f64 + 0.5).floor() as usize
}

pub fn cross_budget(long_arm: usize, arm_width: usize) -> usize {
    2 * long_arm * arm_width - arm_width * arm_width
}

pub fn make_mask(topology: Topology, size_param: usize, cross_ratio: f64) -> Result<PatchMask> {
    if size_param < 5 {
        return Err(Error::invalid(format!(
            "patch size parameter must be at least 5, got {size_param}"
        )));
    }
    if !(cross_ratio > 0.0 && cross_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "cross ratio must lie in (0, 1], got {cross_ratio}"
        )));
    }
    let l = size_param;
    let lf = l as f64;
    let mask = match topology {
        Topology::Square => Grid::filled(l, l, 1.0),
        Topology::Cross => {
            let w = cross_arm_width(l, cross_ratio);
            if w < 1 {
                return Err(Error::invalid(format!(
                    "cross arm width rounds to zero for L={l}, ratio={cross_ratio}"
                )));
            }
            // Even L - w centres the bars exactly; otherwise they sit half a
            // texel above/left of centre.
            let start = (l - w) / 2;
            let bar = start..start + w;
            Grid::from_fn(l, l, |r, c| {
                if bar.contains(&r) || bar.contains(&c) {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Topology::Circle => {
            let radius = lf / 2.0;
            Grid::from_fn(l, l, |r, c| {
                let dy = r as f64 + 0.5 - radius;
                let dx = c as f64 + 0.5 - radius;
                if dx * dx + dy * dy <= radius * radius {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Topology::Triangle => Grid::from_fn(l, l, |r, c| {
            // Apex at the top centre, base along the bottom edge.
            let half_width = 0.5 * (r as f64 + 0.5);
            if (c as f64 + 0.5 - lf / 2.0).abs() <= half_width {
                1.0
            } else {
                0.0
            }
        }),
    };
    let budget = count_ones(&mask);
    Ok(PatchMask {
        mask,
        topology,
        size_param,
        budget,
    })
}

/// Finds the size parameter of `topology` whose budget is closest to the
/// reference budget (cross arms fixed at ratio 0.25).
pub fn budget_match(reference: &PatchMask, topology: Topology, tolerance: f64) -> Result<PatchMask> {
    if topology == reference.topology {
        return Ok(reference.clone());
    }
    let target = reference.budget;
    let upper = 64.max(3 * (target as f64).sqrt().ceil() as usize);
    let mut best: Option<PatchMask> = None;
    for size in 5..=upper {
        let candidate = make_mask(topology, size, 0.25)?;
        let gap = candidate.budget.abs_diff(target);
        if best.as_ref().is_none_or(|b| gap < b.budget.abs_diff(target)) {
            best = Some(candidate);
        }
    }
    let best = best.expect("scan range is non-empty");
    let rel = best.budget.abs_diff(target) as f64 / target as f64;
    if rel > tolerance {
        return Err(Error::BudgetUnreachable {
            nearest: best.budget,
            target,
        });
    }
    Ok(best)
}

/// Texels outside the mask are set to 0.5; they never reach the composited
/// image because compositing uses `P * M`.
pub fn init_texture(mask: &PatchMask, mode: InitMode, seed: u64) -> PatchTexture {
    let (h, w) = mask.mask.shape();
    let texture = match mode {
        InitMode::Constant => Grid::filled(h, w, 0.5),
        InitMode::SeededUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Grid::from_fn(h, w, |r, c| {
                let v = rng.random_range(0.25..=0.75);
                if mask.mask.get(r, c) == 1.0 {
                    v
                } else {
                    0.5
                }
            })
        }
    };
    PatchTexture {
        texture,
        init_mode: mode,
    }
}
