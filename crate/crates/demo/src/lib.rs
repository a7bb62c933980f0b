//! Browser demo: train a tiny denoiser on synthetic scenes, watch the noise
//! schedule, and segment a held-out scene.

mod state;

use wasm_bindgen::prelude::*;

pub use state::{render_labels, render_soft, DemoState, SCENE_SIZE, TIME_STEPS};

fn js(e: rdseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: DemoState,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        DemoState::new(u64::from(seed)).map(|inner| Demo { inner }).map_err(js)
    }

    pub fn size(&self) -> u32 {
        SCENE_SIZE as u32
    }

    pub fn time_steps(&self) -> u32 {
        TIME_STEPS as u32
    }

    pub fn epochs(&self) -> u32 {
        self.inner.epochs() as u32
    }

    /// Replaces the held-out scene.
    pub fn new_scene(&mut self, seed: u32) -> Result<(), JsError> {
        self.inner.new_scene(u64::from(seed)).map_err(js)
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.inner.image_rgba()
    }

    pub fn labels_rgba(&self) -> Vec<u8> {
        self.inner.labels_rgba()
    }

    /// The scene's one-hot map after adding noise for step `t`.
    pub fn noised_rgba(&self, t: u32, seed: u32) -> Result<Vec<u8>, JsError> {
        self.inner.noised_rgba(t as usize, u64::from(seed)).map_err(js)
    }

    /// One training epoch; returns the mean loss.
    pub fn train_epoch(&mut self) -> Result<f64, JsError> {
        self.inner.train_epoch().map_err(js)
    }

    /// Segments the scene with every `stride`-th step; returns its mIoU.
    pub fn segment(&mut self, stride: u32, ensemble: u32) -> Result<f64, JsError> {
        self.inner.segment(stride as usize, ensemble as usize).map_err(js)
    }

    pub fn prediction_rgba(&self) -> Vec<u8> {
        self.inner.prediction_rgba()
    }
}
