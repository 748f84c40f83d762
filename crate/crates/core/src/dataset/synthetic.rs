//! Desk-scale paired-view data with class evidence split across views.
//!
//! Every image carries a view-specific "bone" structure and a corner-shaped
//! distractor. Class 1 adds a thin bar, class 2 an ellipse; class 0 adds
//! nothing. The bar is drawn at full contrast in the lateral view and the
//! ellipse at full contrast in the frontal view; the other view shows each
//! mark at `1 - view_asymmetry` of that contrast.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Sample};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::view::View;
use crate::N_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub view_asymmetry: f64,
    pub noise_sd: f64,
    /// Peak intensity added by a class mark at full contrast.
    pub mark_intensity: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            image_size: 64,
            seed: 0,
            view_asymmetry: 0.8,
            noise_sd: 0.02,
            mark_intensity: 1.0,
        }
    }
}

pub fn generate_synthetic(n_per_class: usize, image_size: usize, seed: u64, view_asymmetry: f64) -> Result<Dataset> {
    SyntheticParams {
        n_per_class,
        image_size,
        seed,
        view_asymmetry,
        ..SyntheticParams::default()
    }
    .generate()
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, fill: f64) -> Self {
        Self {
            size,
            px: vec![fill; size * size],
        }
    }

    fn add(&mut self, x: isize, y: isize, v: f64) {
        let s = self.size as isize;
        if (0..s).contains(&x) && (0..s).contains(&y) {
            self.px[y as usize * self.size + x as usize] += v;
        }
    }

    /// Thick line segment from `(x0, y0)` to `(x1, y1)`.
    fn segment(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), half_width: f64, v: f64) {
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len2 = (dx * dx + dy * dy).max(1e-9);
        for y in 0..self.size {
            for x in 0..self.size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0);
                let (cx, cy) = (x0 + t * dx, y0 + t * dy);
                if (px - cx).hypot(py - cy) <= half_width {
                    self.px[y * self.size + x] += v;
                }
            }
        }
    }

    fn ellipse(&mut self, (cx, cy): (f64, f64), (rx, ry): (f64, f64), v: f64) {
        for y in 0..self.size {
            for x in 0..self.size {
                let u = (x as f64 + 0.5 - cx) / rx;
                let w = (y as f64 + 0.5 - cy) / ry;
                if u * u + w * w <= 1.0 {
                    self.px[y * self.size + x] += v;
                }
            }
        }
    }

    fn corner(&mut self, x: isize, y: isize, arm: isize, v: f64) {
        for d in 0..arm {
            self.add(x + d, y, v);
            self.add(x, y + d, v);
        }
    }

    fn finish<R: Rng>(mut self, noise: &Normal<f64>, rng: &mut R) -> Result<Image> {
        for p in &mut self.px {
            let v = (*p + noise.sample(rng)).clamp(0.0, 1.0);
            // 16-bit grid so that PNG export reloads bit-identically.
            *p = (v * 65535.0).round() / 65535.0;
        }
        Image::new(self.size, self.size, self.px)
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 1 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} is below the minimum of 16", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.view_asymmetry) {
            return Err(Error::Config(format!("view_asymmetry {} outside [0, 1]", self.view_asymmetry)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config(format!("noise_sd {} must be a finite non-negative number", self.noise_sd)));
        }
        Ok(())
    }

    /// Contrast of a class mark in a view, in `[0, 1]`.
    pub fn contrast(&self, label: usize, view: View) -> f64 {
        let weak = 1.0 - self.view_asymmetry;
        match (label, view) {
            (1, View::Lateral) | (2, View::Frontal) => 1.0,
            (1, View::Frontal) | (2, View::Lateral) => weak,
            _ => 0.0,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let noise = Normal::new(0.0, self.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
        let mut samples = Vec::with_capacity(self.n_per_class * N_CLASSES);
        for j in 0..self.n_per_class {
            for label in 0..N_CLASSES {
                let index = (j * N_CLASSES + label) as u64;
                let mut rng = seed::rng(self.seed, Stream::Synthetic, index);
                let frontal = self.render(View::Frontal, label, &noise, &mut rng)?;
                let lateral = self.render(View::Lateral, label, &noise, &mut rng)?;
                samples.push(Sample {
                    id: format!("syn-{label}-{j:04}"),
                    frontal,
                    lateral,
                    label,
                    score: None,
                });
            }
        }
        Dataset::new(samples)
    }

    fn render<R: Rng>(&self, view: View, label: usize, noise: &Normal<f64>, rng: &mut R) -> Result<Image> {
        let n = self.image_size as f64;
        let mut canvas = Canvas::new(self.image_size, 0.1);
        let jitter = |rng: &mut R, span: f64| rng.random_range(-span..span) * n;

        match view {
            View::Frontal => {
                let x = 0.5 * n + jitter(rng, 0.06);
                canvas.segment((x, 0.0), (x + jitter(rng, 0.05), n), n / 12.0, 0.25);
            }
            View::Lateral => {
                let c = (0.5 * n + jitter(rng, 0.06), 0.5 * n + jitter(rng, 0.06));
                canvas.segment((0.0, 0.2 * n), c, n / 14.0, 0.25);
                canvas.segment(c, (n, 0.75 * n), n / 14.0, 0.25);
            }
        }

        let arm = self.image_size / 8;
        let cx = rng.random_range(0..self.image_size - arm) as isize;
        let cy = rng.random_range(0..self.image_size - arm) as isize;
        canvas.corner(cx, cy, arm as isize, 0.3);

        let strength = self.mark_intensity * self.contrast(label, view);
        let centre = (0.5 * n + jitter(rng, 0.18), 0.5 * n + jitter(rng, 0.18));
        match label {
            1 => {
                let angle = rng.random_range(-0.5f64..0.5);
                let half = 0.17 * n;
                let (dx, dy) = (half * angle.cos(), half * angle.sin());
                canvas.segment(
                    (centre.0 - dx, centre.1 - dy),
                    (centre.0 + dx, centre.1 + dy),
                    (n / 24.0).max(0.8),
                    strength,
                );
            }
            2 => {
                let r = 0.09 * n;
                canvas.ellipse(centre, (r * rng.random_range(0.8..1.25), r), strength);
            }
            _ => {}
        }
        canvas.finish(noise, rng)
    }
}
