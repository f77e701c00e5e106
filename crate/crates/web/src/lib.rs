//! wasm-bindgen bindings for the browser demo in `www/`.
//!
//! Three interactive pieces: a tabletop playground (reset, jog the gripper,
//! run scripted behaviors, parse the frame), goal proposals rendered from
//! scripted behaviors, and a 2-D codebook trained by EMA updates.

use afford_core::affordance::{GoalSampler, OracleSampler};
use afford_core::image::{contact_sheet, Image};
use afford_core::seed;
use afford_core::simenv::scripted::{perform, Behavior};
use afford_core::simenv::{parse, render, reset, step, Action, EnvConfig, ParseConfig, SceneState};
use afford_core::vqvae::Codebook;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: afford_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes of `img` upscaled by `scale`, ready for `ImageData`.
fn rgba(img: &Image, scale: usize) -> Vec<u8> {
    let img = img.upscaled(scale.max(1));
    let mut out = Vec::with_capacity(img.height() * img.width() * 4);
    for px in img.data().chunks(3) {
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    out
}

fn behavior(name: &str) -> Result<Behavior, JsError> {
    Ok(match name {
        "push" => Behavior::Push,
        "pick-place" => Behavior::PickPlace,
        "stack" => Behavior::Stack,
        "reorient" => Behavior::Reorient,
        other => return Err(JsError::new(&format!("unknown behavior {other:?}"))),
    })
}

#[wasm_bindgen]
pub struct Playground {
    env: EnvConfig,
    state: SceneState,
    rng: ChaCha8Rng,
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Playground, JsError> {
        let env = EnvConfig::default();
        let state = reset(&env, seed).map_err(js_err)?;
        Ok(Playground { env, state, rng: seed::rng(seed::derive_named(seed, "web")) })
    }

    pub fn reset(&mut self, seed: u64) -> Result<(), JsError> {
        self.state = reset(&self.env, seed).map_err(js_err)?;
        Ok(())
    }

    /// Image side in pixels before upscaling.
    pub fn size(&self) -> usize {
        self.env.image_size
    }

    /// Moves the gripper by (dx, dy, dz) in meters; `grip > 0` closes.
    pub fn step(&mut self, dx: f64, dy: f64, dz: f64, grip: f64) {
        self.state = step(&self.state, &Action::new(dx, dy, dz, grip), &self.env);
    }

    /// Runs one scripted behavior to completion. Returns false when the
    /// scene offers no valid instance of it.
    pub fn behave(&mut self, name: &str) -> Result<bool, JsError> {
        match perform(&self.state, &self.env, behavior(name)?, &mut self.rng) {
            Some((s, _)) => {
                self.state = s;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn frame(&self, scale: usize) -> Vec<u8> {
        rgba(&render(&self.state, &self.env), scale)
    }

    pub fn state_json(&self) -> Result<String, JsError> {
        serde_json::to_string_pretty(&self.state).map_err(|e| JsError::new(&e.to_string()))
    }

    /// Parser verdict for the current frame, optionally after adding uniform
    /// noise of amplitude `noise` to every channel.
    pub fn parse_json(&mut self, noise: f32) -> Result<String, JsError> {
        let mut img = render(&self.state, &self.env);
        if noise > 0.0 {
            let data = img.data().iter().map(|v| (v + self.rng.random_range(-noise..=noise)).clamp(0.0, 1.0)).collect();
            img = Image::from_vec(img.height(), img.width(), data).map_err(js_err)?;
        }
        let reference = self.state.multiset();
        let out = parse(&img, &self.env, &ParseConfig::default(), Some(&reference)).map_err(js_err)?;
        serde_json::to_string_pretty(&out).map_err(|e| JsError::new(&e.to_string()))
    }

    /// `n` goal proposals from scripted behaviors, laid out side by side
    /// after the current frame. The sheet is `sheet_width(n)` pixels wide
    /// before upscaling.
    pub fn propose_goals(&self, n: usize, seed: u64, scale: usize) -> Result<Vec<u8>, JsError> {
        let sheet = self.goal_sheet(n, seed)?;
        Ok(rgba(&sheet, scale))
    }

    pub fn sheet_width(&self, n: usize) -> usize {
        let s = self.env.image_size;
        (n + 1) * s + n
    }

    fn goal_sheet(&self, n: usize, seed: u64) -> Result<Image, JsError> {
        let sampler = OracleSampler { env: self.env.clone(), behaviors: Behavior::ALL.to_vec() };
        let o_c = render(&self.state, &self.env);
        let goals = sampler.sample_goals(&o_c, Some(&self.state), n, seed).map_err(js_err)?;
        let mut all = vec![&o_c];
        all.extend(goals.iter());
        contact_sheet(&all, [1.0, 1.0, 1.0]).ok_or_else(|| JsError::new("no images"))
    }
}

/// A K-entry codebook over 2-D points drawn from a few compact blobs.
#[wasm_bindgen]
pub struct CodebookDemo {
    cb: Codebook,
    points: Vec<f64>,
    assign: Vec<u32>,
    gamma: f64,
}

#[wasm_bindgen]
impl CodebookDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(k: usize, clusters: usize, per_cluster: usize, seed: u64) -> Result<CodebookDemo, JsError> {
        let mut rng = seed::rng(seed);
        let mut points = Vec::with_capacity(clusters * per_cluster * 2);
        for _ in 0..clusters.max(1) {
            let c = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
            for _ in 0..per_cluster.max(1) {
                // sum of uniforms, a cheap bell shape
                let j = |r: &mut ChaCha8Rng| (0..3).map(|_| r.random_range(-0.05..0.05)).sum::<f64>();
                points.push(c[0] + j(&mut rng));
                points.push(c[1] + j(&mut rng));
            }
        }
        let cb = Codebook::random(k.max(1), 2, 1e-5, &mut rng).map_err(js_err)?;
        let assign = cb.quantize(&points).map_err(js_err)?;
        Ok(CodebookDemo { cb, points, assign, gamma: 0.9 })
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma.clamp(0.0, 0.9999);
    }

    /// Assign every point to its nearest entry, then one EMA update.
    /// Returns the fraction of entries in use.
    pub fn step(&mut self) -> Result<f64, JsError> {
        self.assign = self.cb.quantize(&self.points).map_err(js_err)?;
        self.cb.ema_update(&self.points, &self.assign, self.gamma).map_err(js_err)?;
        Ok(self.cb.usage(&self.assign))
    }

    /// Mean squared distance from each point to its assigned entry.
    pub fn distortion(&self) -> f64 {
        let n = self.assign.len().max(1) as f64;
        self.points
            .chunks(2)
            .zip(&self.assign)
            .map(|(p, &a)| {
                let e = self.cb.entry(a as usize);
                (p[0] - e[0]).powi(2) + (p[1] - e[1]).powi(2)
            })
            .sum::<f64>()
            / n
    }

    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn entries(&self) -> Vec<f64> {
        self.cb.vectors().to_vec()
    }

    pub fn assignments(&self) -> Vec<u32> {
        self.assign.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn playground_round_trip() {
        let mut p = Playground::new(3).unwrap();
        let s = p.size();
        assert_eq!(p.frame(2).len(), s * s * 4 * 4);
        p.step(0.05, 0.0, 0.0, -1.0);
        assert!(p.state_json().unwrap().contains("gripper_pos"));
        let sheet = p.goal_sheet(3, 1).unwrap();
        assert_eq!(sheet.width(), p.sheet_width(3));
        assert!(p.parse_json(0.0).unwrap().contains("Plausible"));
    }

    #[test]
    fn codebook_demo_reduces_distortion() {
        let mut d = CodebookDemo::new(8, 4, 50, 2).unwrap();
        let before = d.distortion();
        for _ in 0..50 {
            d.step().unwrap();
        }
        assert!(d.distortion() < before);
        assert_eq!(d.entries().len(), 16);
    }
}
