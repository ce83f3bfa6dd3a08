//! Spatially enhanced cross-attention: per-token Gaussian priors over the
//! feature grid, added in log space to the cross-attention logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear};
use crate::tensor::{grid_coord, Tensor, Var, LOG_FLOOR};

/// Lower bound added to every predicted scale.
pub const SCALE_EPS: f32 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecaMode {
    Off,
    Basic,
    #[default]
    MultiHead,
}

impl std::str::FromStr for SecaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(SecaMode::Off),
            "basic" => Ok(SecaMode::Basic),
            "multi" | "multi_head" => Ok(SecaMode::MultiHead),
            _ => Err(Error::Config(format!("unknown SECA mode {s:?} (off, basic, multi)"))),
        }
    }
}

impl std::fmt::Display for SecaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SecaMode::Off => "off",
            SecaMode::Basic => "basic",
            SecaMode::MultiHead => "multi_head",
        })
    }
}

/// Parameters of the center/scale predictor for one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct GeometryParams {
    pub center_hidden: Linear,
    pub center_out: Linear,
    /// Outputs 2 scales (basic) or 2 per head (multi-head).
    pub scale: Linear,
    /// Multi-head only: 2 offsets per head.
    pub offset: Option<Linear>,
}

impl GeometryParams {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize, heads: usize, mode: SecaMode) -> Result<Self> {
        let per_head = match mode {
            SecaMode::Off => return Err(Error::Config("SECA geometry requested with mode off".into())),
            SecaMode::Basic => 1,
            SecaMode::MultiHead => heads,
        };
        Ok(init.scope(name, |init| GeometryParams {
            center_hidden: Linear::new(init, "center_hidden", width, width),
            center_out: Linear::new(init, "center_out", width, 2),
            scale: Linear::new(init, "scale", width, 2 * per_head),
            offset: (mode == SecaMode::MultiHead).then(|| Linear::new(init, "offset", width, 2 * heads)),
        }))
    }
}

/// Per-token centers and scales; each entry of `centers`/`scales` is T×2
/// (row, column). Basic mode has one entry shared by all heads.
#[derive(Clone, Debug)]
pub struct Geometry<'t> {
    pub base_center: Var<'t>,
    pub centers: Vec<Var<'t>>,
    pub scales: Vec<Var<'t>>,
}

/// Centers via sigmoid(MLP(states)); scales via softplus(FC)+ε; multi-head
/// offsets via 0.5·tanh(FC). `states` is T×C.
pub fn predict_center_scale<'t>(
    p: &Bound<'t>,
    params: &GeometryParams,
    states: Var<'t>,
    heads: usize,
    mode: SecaMode,
) -> Result<Geometry<'t>> {
    let hidden = params.center_hidden.forward(p, states)?.relu();
    let base_center = params.center_out.forward(p, hidden)?.sigmoid();
    let raw_scale = params.scale.forward(p, states)?;
    let t = states.shape()[0];
    let eps = p.tape.constant(Tensor::full(&[1], SCALE_EPS));
    let to_scale = |v: Var<'t>| v.softplus().add(eps);
    match mode {
        SecaMode::Off => Err(Error::Config("SECA geometry requested with mode off".into())),
        SecaMode::Basic => Ok(Geometry {
            base_center,
            centers: vec![base_center],
            scales: vec![to_scale(raw_scale)?],
        }),
        SecaMode::MultiHead => {
            let offset_fc = params
                .offset
                .ok_or_else(|| Error::Config("multi-head SECA without offset head".into()))?;
            let offsets = offset_fc.forward(p, states)?.tanh().scale(0.5);
            let mut centers = Vec::with_capacity(heads);
            let mut scales = Vec::with_capacity(heads);
            for h in 0..heads {
                centers.push(base_center.add(offsets.narrow(1, 2 * h, 2)?)?);
                scales.push(to_scale(raw_scale.narrow(1, 2 * h, 2)?)?);
            }
            debug_assert!(centers.iter().all(|c| c.shape() == [t, 2]));
            Ok(Geometry {
                base_center,
                centers,
                scales,
            })
        }
    }
}

/// Log weight maps added to cross-attention logits.
#[derive(Clone, Debug)]
pub enum MapBias<'t> {
    None,
    /// One T×(H·W) log map for every head.
    Shared(Var<'t>),
    /// One T×(H·W) log map per head.
    PerHead(Vec<Var<'t>>),
}

/// Turns predicted geometry into log weight maps on an H×W grid.
pub fn log_maps<'t>(geometry: &Geometry<'t>, grid: (usize, usize), lambda: f32, mode: SecaMode) -> Result<MapBias<'t>> {
    let maps = geometry
        .centers
        .iter()
        .zip(&geometry.scales)
        .map(|(&c, &s)| Var::gauss_log_map(c, s, grid.0, grid.1, lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(match mode {
        SecaMode::Off => MapBias::None,
        SecaMode::Basic => MapBias::Shared(maps[0]),
        SecaMode::MultiHead => MapBias::PerHead(maps),
    })
}

/// Cross-attention from decoder queries (T×C) onto encoder memory
/// (H·W×C), with the log maps added to each head's logits.
pub fn seca_cross_attention<'t>(
    p: &Bound<'t>,
    params: &AttentionParams,
    queries: Var<'t>,
    memory: Var<'t>,
    heads: usize,
    maps: &MapBias<'t>,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let keys = memory.shape()[0];
    let t = queries.shape()[0];
    let check = |m: &Var<'t>| {
        if m.shape() != [t, keys] {
            return Err(Error::Contract(format!(
                "weight map {:?} does not match {t} queries × {keys} keys",
                m.shape()
            )));
        }
        Ok(*m)
    };
    if let MapBias::PerHead(v) = maps {
        if v.len() != heads {
            return Err(Error::Contract(format!("{} weight maps for {heads} heads", v.len())));
        }
    }
    let q = params.q.forward(p, queries)?;
    let k = params.k.forward(p, memory)?;
    let v = params.v.forward(p, memory)?;
    let (merged, weights) = multi_head_attention(q, k, v, heads, |h| match maps {
        MapBias::None => Ok(None),
        MapBias::Shared(m) => check(m).map(Some),
        MapBias::PerHead(ms) => check(&ms[h]).map(Some),
    })?;
    Ok((params.out.forward(p, merged)?, weights))
}

/// T×T additive mask with the −∞ sentinel above the diagonal.
pub fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| {
        if i % t > i / t {
            crate::tensor::NEG_SENTINEL
        } else {
            0.0
        }
    })
}

/// A realized weight map, evaluated outside the tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialWeightMap {
    pub center: [f32; 2],
    pub scale: [f32; 2],
    pub lambda: f32,
    pub height: usize,
    pub width: usize,
    /// Row-major H·W values, clamped to at least 1e-6.
    pub values: Vec<f32>,
}

pub fn build_weight_map(center: [f32; 2], scale: [f32; 2], lambda: f32, height: usize, width: usize) -> Result<SpatialWeightMap> {
    if lambda <= 0.0 || scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::Contract("weight map needs positive scales and bandwidth".into()));
    }
    let values = (0..height * width)
        .map(|i| {
            let dh = grid_coord(i / width, height) - center[0];
            let dw = grid_coord(i % width, width) - center[1];
            (-dh * dh / (lambda * scale[0] * scale[0]) - dw * dw / (lambda * scale[1] * scale[1]))
                .exp()
                .max(LOG_FLOOR)
        })
        .collect();
    Ok(SpatialWeightMap {
        center,
        scale,
        lambda,
        height,
        width,
        values,
    })
}

impl SpatialWeightMap {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Cell with the largest value; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}
