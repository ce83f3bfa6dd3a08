//! wasm-bindgen exports for `www/index.html`.

use wasm_bindgen::prelude::*;

use seqtrace::decoder::build_weight_map;
use seqtrace::synth::{generate_sample, identity_distance, recover, GenerateConfig, Image, RecoveryOrder, Sample};

fn rgba(img: &Image) -> Vec<u8> {
    img.pixels.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn js_err(e: seqtrace::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One generated face with its manipulation chain.
#[wasm_bindgen]
pub struct Demo {
    sample: Sample,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, index: usize) -> Result<Demo, JsError> {
        let config = GenerateConfig {
            seed,
            n_samples: index + 1,
            ..Default::default()
        };
        Ok(Demo {
            sample: generate_sample(&config, index).map_err(js_err)?,
        })
    }

    pub fn size(&self) -> usize {
        self.sample.image.width
    }

    /// Labels in application order, comma separated.
    pub fn labels(&self) -> String {
        self.sample.record.labels.0.join(",")
    }

    pub fn original(&self) -> Vec<u8> {
        rgba(&self.sample.base)
    }

    pub fn manipulated(&self) -> Vec<u8> {
        rgba(&self.sample.image)
    }

    /// Undoes the chain; `shuffled` applies inverses in application order
    /// instead of reverse order.
    pub fn recovered(&self, shuffled: bool) -> Result<Vec<u8>, JsError> {
        self.recover(shuffled).map(|img| rgba(&img))
    }

    /// Identity distance between the recovered and original face.
    pub fn distance(&self, shuffled: bool) -> Result<f64, JsError> {
        identity_distance(&self.recover(shuffled)?, &self.sample.base).map_err(js_err)
    }
}

impl Demo {
    fn recover(&self, shuffled: bool) -> Result<Image, JsError> {
        let order = if shuffled { RecoveryOrder::Shuffled } else { RecoveryOrder::Correct };
        recover(&self.sample.image, &self.sample.record.ops, order).map_err(js_err)
    }
}

/// Gaussian spatial weight map over an `height` x `width` grid, row-major.
#[wasm_bindgen]
pub fn weight_map(cy: f32, cx: f32, sy: f32, sx: f32, lambda: f32, height: usize, width: usize) -> Result<Vec<f32>, JsError> {
    Ok(build_weight_map([cy, cx], [sy, sx], lambda, height, width).map_err(js_err)?.values)
}
