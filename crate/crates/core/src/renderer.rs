//! Input-conditioned patch rendering: a small network predicts bounded
//! geometric and photometric parameters per ROI, the masked patch and its
//! mask are warped by bilinear grid sampling, and the result is alpha-blended
//! onto the ROI with the warped mask as the blend weight.

use crate::error::{Error, Result};
use crate::nn::{Layer, Network, Shape, Tensor, Trace};
use crate::numerics::{clamp_with_grad, sigmoid, Grid};

/// Rotation (radians), translation as a fraction of the ROI side, isotropic
/// scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoParams {
    pub r: f64,
    pub tx: f64,
    pub ty: f64,
    pub s: f64,
}

impl GeoParams {
    pub const IDENTITY: GeoParams = GeoParams {
        r: 0.0,
        tx: 0.0,
        ty: 0.0,
        s: 1.0,
    };
}

/// Contrast-like scale `c` and brightness-like shift `b` applied to the
/// warped patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhoParams {
    pub c: f64,
    pub b: f64,
}

impl PhoParams {
    pub const IDENTITY: PhoParams = PhoParams { c: 1.0, b: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub geo: GeoParams,
    pub pho: PhoParams,
}

impl RenderParams {
    pub const IDENTITY: RenderParams = RenderParams {
        geo: GeoParams::IDENTITY,
        pho: PhoParams::IDENTITY,
    };

    /// `[r, tx, ty, s, c, b]`
    pub fn to_array(self) -> [f64; 6] {
        [
            self.geo.r,
            self.geo.tx,
            self.geo.ty,
            self.geo.s,
            self.pho.c,
            self.pho.b,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            geo: GeoParams {
                r: a[0],
                tx: a[1],
                ty: a[2],
                s: a[3],
            },
            pho: PhoParams { c: a[4], b: a[5] },
        }
    }
}

/// Where the patch canvas sits on the ROI before the predicted transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Center,
    /// Top-left corner inset by a tenth of the ROI side.
    TopLeft,
    /// Explicit integer offset of the patch canvas' top-left texel.
    Offset { row: isize, col: isize },
}

impl Placement {
    pub fn resolve(self, roi: (usize, usize), patch: (usize, usize)) -> (isize, isize) {
        match self {
            Placement::Center => (
                (roi.0 as isize - patch.0 as isize).div_euclid(2),
                (roi.1 as isize - patch.1 as isize).div_euclid(2),
            ),
            Placement::TopLeft => ((roi.0 / 10) as isize, (roi.1 / 10) as isize),
            Placement::Offset { row, col } => (row, col),
        }
    }

    /// Draws an offset that keeps the whole canvas inside the ROI.
    pub fn random_fixed(seed: u64, roi: (usize, usize), patch: (usize, usize)) -> Placement {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let row = rng.random_range(0..=roi.0.saturating_sub(patch.0)) as isize;
        let col = rng.random_range(0..=roi.1.saturating_sub(patch.1)) as isize;
        Placement::Offset { row, col }
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Placement::Center => f.write_str("center"),
            Placement::TopLeft => f.write_str("top-left"),
            Placement::Offset { row, col } => write!(f, "offset:{row}:{col}"),
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Placement::Center),
            "top-left" => Ok(Placement::TopLeft),
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                if let ["offset", r, c] = parts.as_slice() {
                    if let (Ok(row), Ok(col)) = (r.parse(), c.parse()) {
                        return Ok(Placement::Offset { row, col });
                    }
                }
                Err(Error::invalid(format!("unknown placement {other:?}")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderBounds {
    pub r_max: f64,
    pub t_max: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub placement: Placement,
}

impl Default for RenderBounds {
    fn default() -> Self {
        Self {
            r_max: 10f64.to_radians(),
            t_max: 0.10,
            s_min: 0.9,
            s_max: 1.1,
            c_min: 0.8,
            c_max: 1.2,
            b_min: -0.1,
            b_max: 0.1,
            placement: Placement::Center,
        }
    }
}

impl RenderBounds {
    /// `(lo, hi, identity)` per parameter in `[r, tx, ty, s, c, b]` order.
    pub fn ranges(&self) -> [(f64, f64, f64); 6] {
        [
            (-self.r_max, self.r_max, 0.0),
            (-self.t_max, self.t_max, 0.0),
            (-self.t_max, self.t_max, 0.0),
            (self.s_min, self.s_max, 1.0),
            (self.c_min, self.c_max, 1.0),
            (self.b_min, self.b_max, 0.0),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (lo, hi, id)) in self.ranges().into_iter().enumerate() {
            if !(lo < id && id < hi) {
                return Err(Error::invalid(format!(
                    "render bound {i} [{lo}, {hi}] must strictly bracket the identity value {id}"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &RenderParams) -> bool {
        self.ranges()
            .iter()
            .zip(p.to_array())
            .all(|(&(lo, hi, _), v)| lo < v && v < hi)
    }

    /// Maps unconstrained outputs into the ranges; zero maps to identity.
    /// Returns the parameters and their derivatives w.r.t. the raw outputs.
    pub fn squash(&self, raw: &[f64]) -> (RenderParams, [f64; 6]) {
        let mut values = [0.0; 6];
        let mut derivs = [0.0; 6];
        for (i, (lo, hi, id)) in self.ranges().into_iter().enumerate() {
            let frac = (id - lo) / (hi - lo);
            let offset = (frac / (1.0 - frac)).ln();
            let sg = sigmoid(raw[i] + offset);
            values[i] = lo + (hi - lo) * sg;
            derivs[i] = (hi - lo) * sg * (1.0 - sg);
        }
        // Exact identity at zero output despite rounding in the logit offset.
        for (i, (_, _, id)) in self.ranges().into_iter().enumerate() {
            if raw[i] == 0.0 {
                values[i] = id;
            }
        }
        (RenderParams::from_array(values), derivs)
    }
}

// ---------------------------------------------------------------------------
// ASIT parameter predictor

/// Parameter predictor: two stride-2 3x3 convolutions (8, 16 channels),
/// global average pooling, a 32-wide hidden layer and six raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AsitWeights {
    pub net: Network,
    pub params: Vec<f64>,
}

pub const ASIT_OUTPUTS: usize = 6;

pub fn asit_network(height: usize, width: usize) -> Result<Network> {
    Network::new(
        Shape(1, height, width),
        vec![
            Layer::Conv3x3 { cin: 1, cout: 8, stride: 2 },
            Layer::Relu,
            Layer::Conv3x3 { cin: 8, cout: 16, stride: 2 },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense { inputs: 16, outputs: 32 },
            Layer::Relu,
            Layer::Dense { inputs: 32, outputs: ASIT_OUTPUTS },
        ],
    )
}

impl AsitWeights {
    /// Random hidden layers, zero output layer (identity rendering).
    pub fn init(height: usize, width: usize, seed: u64) -> Result<Self> {
        let net = asit_network(height, width)?;
        let mut params = net.init_params(seed);
        if let Some(range) = net.last_dense_range() {
            params[range].fill(0.0);
        }
        Ok(Self { net, params })
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.net.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} ASIT parameters", self.net.param_count()),
                got: format!("{}", params.len()),
            });
        }
        Ok(Self {
            net: self.net.clone(),
            params,
        })
    }
}

pub struct AsitTrace {
    trace: Trace,
    squash_derivs: [f64; 6],
}

fn grid_tensor(x: &Grid) -> Tensor {
    Tensor::from_plane(x.height(), x.width(), x.values().to_vec())
}

pub fn asit_forward_traced(
    x: &Grid,
    weights: &AsitWeights,
    bounds: &RenderBounds,
) -> Result<(RenderParams, AsitTrace)> {
    let (raw, trace) = weights.net.forward(&weights.params, &grid_tensor(x))?;
    let (params, squash_derivs) = bounds.squash(&raw.data);
    Ok((
        params,
        AsitTrace {
            trace,
            squash_derivs,
        },
    ))
}

pub fn asit_forward(x: &Grid, weights: &AsitWeights, bounds: &RenderBounds) -> Result<RenderParams> {
    asit_forward_traced(x, weights, bounds).map(|(p, _)| p)
}

/// Accumulates `d loss / d phi` into `grad` given `d loss / d params`.
pub fn asit_backward(weights: &AsitWeights, trace: &AsitTrace, dparams: [f64; 6], grad: &mut [f64]) {
    let draw: Vec<f64> = dparams
        .iter()
        .zip(&trace.squash_derivs)
        .map(|(d, s)| d * s)
        .collect();
    let gout = Tensor {
        channels: ASIT_OUTPUTS,
        height: 1,
        width: 1,
        data: draw,
    };
    weights
        .net
        .backward(&weights.params, &trace.trace, gout, Some(grad), false);
}

// ---------------------------------------------------------------------------
// Warping and compositing

/// Affine matrix in normalized coordinates (unit = half the ROI side), so
/// the translation column is twice the fractional translation.
pub fn affine_matrix(g: &GeoParams) -> [[f64; 3]; 2] {
    let (sin, cos) = g.r.sin_cos();
    [
        [g.s * cos, -g.s * sin, 2.0 * g.tx],
        [g.s * sin, g.s * cos, 2.0 * g.ty],
    ]
}

/// Inverse mapping from ROI pixels to patch-canvas sample positions.
struct Sampler {
    roi: (usize, usize),
    patch: (usize, usize),
    center: (f64, f64),
    geo: GeoParams,
    cos: f64,
    sin: f64,
}

/// Bilinear footprint of one ROI pixel on the patch canvas.
struct Tap {
    sx: f64,
    sy: f64,
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

impl Sampler {
    fn new(roi: (usize, usize), patch: (usize, usize), geo: GeoParams, placement: Placement) -> Self {
        let (oy, ox) = placement.resolve(roi, patch);
        let center = (
            oy as f64 + (patch.0 as f64 - 1.0) / 2.0,
            ox as f64 + (patch.1 as f64 - 1.0) / 2.0,
        );
        let (sin, cos) = geo.r.sin_cos();
        Self {
            roi,
            patch,
            center,
            geo,
            cos,
            sin,
        }
    }

    /// Patch-local offsets `(qx, qy)` and canvas sample position of ROI pixel.
    #[inline]
    fn tap(&self, row: usize, col: usize) -> (f64, f64, Tap) {
        let dx = col as f64 - self.center.1 - self.geo.tx * self.roi.1 as f64;
        let dy = row as f64 - self.center.0 - self.geo.ty * self.roi.0 as f64;
        let qx = (self.cos * dx + self.sin * dy) / self.geo.s;
        let qy = (-self.sin * dx + self.cos * dy) / self.geo.s;
        let sx = qx + (self.patch.1 as f64 - 1.0) / 2.0;
        let sy = qy + (self.patch.0 as f64 - 1.0) / 2.0;
        let x0 = sx.floor();
        let y0 = sy.floor();
        (
            qx,
            qy,
            Tap {
                sx,
                sy,
                x0: x0 as isize,
                y0: y0 as isize,
                fx: sx - x0,
                fy: sy - y0,
            },
        )
    }

    #[inline]
    fn in_reach(&self, t: &Tap) -> bool {
        t.sx > -1.0 && t.sy > -1.0 && t.sx < self.patch.1 as f64 && t.sy < self.patch.0 as f64
    }

    #[inline]
    fn fetch(&self, src: &[f64], y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.patch.0 as isize || x >= self.patch.1 as isize {
            0.0
        } else {
            src[y as usize * self.patch.1 + x as usize]
        }
    }

    /// Value and `(d/dsx, d/dsy)` of the bilinear sample.
    #[inline]
    fn sample(&self, src: &[f64], t: &Tap) -> (f64, f64, f64) {
        let v00 = self.fetch(src, t.y0, t.x0);
        let v01 = self.fetch(src, t.y0, t.x0 + 1);
        let v10 = self.fetch(src, t.y0 + 1, t.x0);
        let v11 = self.fetch(src, t.y0 + 1, t.x0 + 1);
        let value = (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01) + t.fy * ((1.0 - t.fx) * v10 + t.fx * v11);
        let dsx = (1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
        let dsy = (1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
        (value, dsx, dsy)
    }

    #[inline]
    fn scatter(&self, dst: &mut [f64], t: &Tap, g: f64) {
        let weights = [
            (0, 0, (1.0 - t.fy) * (1.0 - t.fx)),
            (0, 1, (1.0 - t.fy) * t.fx),
            (1, 0, t.fy * (1.0 - t.fx)),
            (1, 1, t.fy * t.fx),
        ];
        for (dy, dx, w) in weights {
            let (y, x) = (t.y0 + dy, t.x0 + dx);
            if y >= 0 && x >= 0 && y < self.patch.0 as isize && x < self.patch.1 as isize {
                dst[y as usize * self.patch.1 + x as usize] += g * w;
            }
        }
    }

    /// Chain rule from sample-position gradients to `[r, tx, ty, s]`.
    #[inline]
    fn geo_grad(&self, qx: f64, qy: f64, gsx: f64, gsy: f64, out: &mut [f64; 4]) {
        let s = self.geo.s;
        let (w, h) = (self.roi.1 as f64, self.roi.0 as f64);
        out[0] += gsx * qy - gsy * qx;
        out[1] += (gsx * (-self.cos) + gsy * self.sin) * w / s;
        out[2] += (gsx * (-self.sin) + gsy * (-self.cos)) * h / s;
        out[3] += -(gsx * qx + gsy * qy) / s;
    }
}

/// Reports when the patch footprint at maximal scale can leave the ROI.
pub fn truncation_warning(
    roi: (usize, usize),
    patch: (usize, usize),
    bounds: &RenderBounds,
) -> Option<String> {
    let (oy, ox) = bounds.placement.resolve(roi, patch);
    let half_diag = 0.5 * ((patch.0 * patch.0 + patch.1 * patch.1) as f64).sqrt() * bounds.s_max;
    let cy = oy as f64 + (patch.0 as f64 - 1.0) / 2.0;
    let cx = ox as f64 + (patch.1 as f64 - 1.0) / 2.0;
    let ty = bounds.t_max * roi.0 as f64;
    let tx = bounds.t_max * roi.1 as f64;
    let inside = cy - ty - half_diag >= -0.5
        && cx - tx - half_diag >= -0.5
        && cy + ty + half_diag <= roi.0 as f64 - 0.5
        && cx + tx + half_diag <= roi.1 as f64 - 0.5;
    (!inside).then(|| {
        format!(
            "patch {}x{} may be truncated on a {}x{} ROI at scale {} with placement {}",
            patch.0, patch.1, roi.0, roi.1, bounds.s_max, bounds.placement
        )
    })
}

/// Resamples a patch-canvas grid onto an `out_h x out_w` ROI canvas.
pub fn warp(src: &Grid, g: &GeoParams, out_h: usize, out_w: usize, placement: Placement) -> Grid {
    let sampler = Sampler::new((out_h, out_w), src.shape(), *g, placement);
    Grid::from_fn(out_h, out_w, |row, col| {
        let (_, _, t) = sampler.tap(row, col);
        if sampler.in_reach(&t) {
            sampler.sample(src.values(), &t).0
        } else {
            0.0
        }
    })
}

/// Gradient of `sum(grad_out * warp(src, g))` w.r.t. `src` and `[r, tx, ty, s]`.
pub fn warp_backward(
    src: &Grid,
    g: &GeoParams,
    grad_out: &Grid,
    placement: Placement,
) -> (Grid, [f64; 4]) {
    let sampler = Sampler::new(grad_out.shape(), src.shape(), *g, placement);
    let mut dsrc = Grid::zeros(src.height(), src.width());
    let mut dgeo = [0.0; 4];
    for row in 0..grad_out.height() {
        for col in 0..grad_out.width() {
            let go = grad_out.get(row, col);
            let (qx, qy, t) = sampler.tap(row, col);
            if go == 0.0 || !sampler.in_reach(&t) {
                continue;
            }
            let (_, dsx, dsy) = sampler.sample(src.values(), &t);
            sampler.scatter(dsrc.values_mut(), &t, go);
            sampler.geo_grad(qx, qy, go * dsx, go * dsy, &mut dgeo);
        }
    }
    (dsrc, dgeo)
}

fn check_composite_shapes(texture: &Grid, mask: &Grid) -> Result<()> {
    texture.ensure_same_shape(mask)
}

fn masked(texture: &Grid, mask: &Grid) -> Vec<f64> {
    texture
        .values()
        .iter()
        .zip(mask.values())
        .map(|(p, m)| p * m)
        .collect()
}

/// `clamp((1 - M~) x + M~ (c P~ + b))` with `P~ = W(P * M)`, `M~ = W(M)`.
pub fn composite(
    x: &Grid,
    texture: &Grid,
    mask: &Grid,
    params: &RenderParams,
    placement: Placement,
) -> Result<Grid> {
    check_composite_shapes(texture, mask)?;
    let pm = masked(texture, mask);
    let sampler = Sampler::new(x.shape(), mask.shape(), params.geo, placement);
    let RenderParams { pho, .. } = *params;
    let mut out = x.clone();
    for row in 0..x.height() {
        for col in 0..x.width() {
            let (_, _, t) = sampler.tap(row, col);
            if !sampler.in_reach(&t) {
                continue;
            }
            let (pt, _, _) = sampler.sample(&pm, &t);
            let (mt, _, _) = sampler.sample(mask.values(), &t);
            let xv = x.get(row, col);
            let blended = (1.0 - mt) * xv + mt * (pho.c * pt + pho.b);
            out.set(row, col, blended.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Smallest distance, in texels, from any in-reach bilinear tap to a cell
/// boundary. Finite-difference probes must stay clear of these kinks.
pub fn bilinear_kink_distance(
    roi: (usize, usize),
    patch: (usize, usize),
    g: &GeoParams,
    placement: Placement,
) -> f64 {
    let sampler = Sampler::new(roi, patch, *g, placement);
    let mut best = f64::INFINITY;
    for row in 0..roi.0 {
        for col in 0..roi.1 {
            let (_, _, t) = sampler.tap(row, col);
            if t.sx > -1.5 && t.sy > -1.5 && t.sx < patch.1 as f64 + 0.5 && t.sy < patch.0 as f64 + 0.5 {
                best = best.min(t.fx).min(1.0 - t.fx).min(t.fy).min(1.0 - t.fy);
            }
        }
    }
    best
}

/// Like `bilinear_kink_distance`, also counting the output clamp.
pub fn composite_kink_distance(
    x: &Grid,
    texture: &Grid,
    mask: &Grid,
    params: &RenderParams,
    placement: Placement,
) -> f64 {
    let pm = masked(texture, mask);
    let sampler = Sampler::new(x.shape(), mask.shape(), params.geo, placement);
    let mut best = bilinear_kink_distance(x.shape(), mask.shape(), &params.geo, placement);
    for row in 0..x.height() {
        for col in 0..x.width() {
            let (_, _, t) = sampler.tap(row, col);
            if !sampler.in_reach(&t) {
                continue;
            }
            let (pt, _, _) = sampler.sample(&pm, &t);
            let (mt, _, _) = sampler.sample(mask.values(), &t);
            let v = (1.0 - mt) * x.get(row, col) + mt * (params.pho.c * pt + params.pho.b);
            best = best.min(v.abs()).min((1.0 - v).abs());
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGrad {
    pub texture: Grid,
    pub params: [f64; 6],
}

/// Gradient of `sum(grad_out * composite(...))` w.r.t. the texture and the
/// six render parameters. Mask is fixed; `x` is treated as a constant.
pub fn composite_backward(
    x: &Grid,
    texture: &Grid,
    mask: &Grid,
    params: &RenderParams,
    placement: Placement,
    grad_out: &Grid,
) -> Result<CompositeGrad> {
    check_composite_shapes(texture, mask)?;
    x.ensure_same_shape(grad_out)?;
    let pm = masked(texture, mask);
    let sampler = Sampler::new(x.shape(), mask.shape(), params.geo, placement);
    let RenderParams { pho, .. } = *params;
    let mut dpm = vec![0.0; pm.len()];
    let mut dgeo = [0.0; 4];
    let (mut dc, mut db) = (0.0, 0.0);
    for row in 0..x.height() {
        for col in 0..x.width() {
            let go = grad_out.get(row, col);
            if go == 0.0 {
                continue;
            }
            let (qx, qy, t) = sampler.tap(row, col);
            if !sampler.in_reach(&t) {
                continue;
            }
            let (pt, pdx, pdy) = sampler.sample(&pm, &t);
            let (mt, mdx, mdy) = sampler.sample(mask.values(), &t);
            let xv = x.get(row, col);
            let pbar = pho.c * pt + pho.b;
            let (_, cg) = clamp_with_grad((1.0 - mt) * xv + mt * pbar, 0.0, 1.0);
            let g = go * cg;
            if g == 0.0 {
                continue;
            }
            let d_mt = g * (pbar - xv);
            let d_pbar = g * mt;
            dc += d_pbar * pt;
            db += d_pbar;
            let d_pt = d_pbar * pho.c;
            sampler.scatter(&mut dpm, &t, d_pt);
            sampler.geo_grad(qx, qy, d_pt * pdx + d_mt * mdx, d_pt * pdy + d_mt * mdy, &mut dgeo);
        }
    }
    let dtex: Vec<f64> = dpm.iter().zip(mask.values()).map(|(d, m)| d * m).collect();
    Ok(CompositeGrad {
        texture: Grid::new(texture.height(), texture.width(), dtex)?,
        params: [dgeo[0], dgeo[1], dgeo[2], dgeo[3], dc, db],
    })
}
