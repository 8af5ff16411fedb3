//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Results cross the boundary as JSON strings; the logic lives in [`demo`].

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn json<T: serde::Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

/// `{stage, probabilities, counts}` for a scheduler variant at `progress`.
#[wasm_bindgen]
pub fn scheduler(variant: &str, progress: f64, draws: usize, seed: u64) -> Result<String, JsError> {
    json(&demo::scheduler(variant, progress, draws, seed).map_err(js)?)
}

/// Corpus BLEU of newline-separated hypotheses against references.
#[wasm_bindgen]
pub fn bleu(hypotheses: &str, references: &str) -> Result<String, JsError> {
    json(&demo::bleu(hypotheses, references).map_err(js)?)
}

#[wasm_bindgen]
pub struct Trainer(demo::Trainer);

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(rule: &str, seed: u64) -> Result<Trainer, JsError> {
        demo::Trainer::new(rule, seed).map(Trainer).map_err(js)
    }

    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        self.0.train(steps).map_err(js)
    }

    pub fn steps(&self) -> usize {
        self.0.steps
    }

    pub fn losses(&self) -> Vec<f64> {
        self.0.losses.clone()
    }

    pub fn translate(&self, text: &str) -> Result<String, JsError> {
        self.0.translate(text).map_err(js)
    }

    pub fn reference(&self, text: &str) -> String {
        self.0.reference(text)
    }

    pub fn test_bleu(&self) -> Result<f64, JsError> {
        self.0.test_bleu().map_err(js)
    }
}
