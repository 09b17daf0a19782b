//! Two-class moving-blob clips.
//!
//! Every clip shows two soft blobs over a static grey background with faint
//! noise, its values within [`BACKGROUND_RANGE`]. Blob A peaks at
//! 1.0 and blob B at 0.7; everything is composited by maximum, so A's centre
//! is always the brightest pixel.
//! In class 1 the blobs rush toward each other, overlap at mid-clip and
//! pass through; in class 0 both drift at no more than [`SLOW_MAX_SPEED`]
//! pixels per frame.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ppm::write_frame;
use crate::error::{Error, Result};
use crate::layers::splitmix;
use crate::tensor::Tensor;

pub const SLOW_MAX_SPEED: f64 = 0.5;
pub const BLOB_A_PEAK: f32 = 1.0;
pub const BLOB_B_PEAK: f32 = 0.7;
pub const BACKGROUND_RANGE: (f32, f32) = (0.25, 0.35);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips: 20,
            frames: 10,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 {
            return Err(Error::Config("synthetic dataset needs at least one clip".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("synthetic clips need at least 2 frames".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "synthetic frames must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Blob radius (Gaussian sigma) in pixels.
    pub fn blob_sigma(&self) -> f64 {
        self.height.min(self.width) as f64 / 20.0
    }

    /// Per-frame speed of each blob in class 1 clips is at least this.
    pub fn fast_min_speed(&self) -> f64 {
        2.0 * self.min_half_gap() / (self.frames - 1) as f64
    }

    fn min_half_gap(&self) -> f64 {
        0.2 * self.height.min(self.width) as f64
    }
}

/// Label of clip `index`; labels alternate so any even count is balanced.
pub fn synth_label(index: usize) -> usize {
    index % 2
}

/// Blob centres `(y, x)` for each frame: `[A, B]`.
///
/// Both classes start from the same kind of scene: two blobs on a horizontal
/// line, mirrored about a centre point. Class 1 plays the approach: the
/// blobs meet at mid-clip and pass through. Class 0 freezes that approach
/// at a random moment and then lets each blob drift slowly, so any single
/// frame of either class is drawn from the same distribution.
pub fn blob_trajectories(cfg: &SynthConfig, index: usize) -> Vec<[(f64, f64); 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(index as u64 + 1)));
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let t_last = (cfg.frames - 1) as f64;
    let half_gap = rng.random_range(cfg.min_half_gap()..0.3 * w.min(h));
    let centre = (
        rng.random_range(0.35 * h..0.65 * h),
        rng.random_range(0.45 * w..0.55 * w),
    );
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let at = |s: f64| {
        let offset = side * half_gap * (1.0 - 2.0 * s);
        [(centre.0, centre.1 - offset), (centre.0, centre.1 + offset)]
    };
    if synth_label(index) == 1 {
        (0..cfg.frames).map(|t| at(t as f64 / t_last)).collect()
    } else {
        let start = at(rng.random_range(0.0..=1.0));
        let mut velocity = || {
            let speed = rng.random_range(0.0..=SLOW_MAX_SPEED);
            let psi = rng.random_range(0.0..std::f64::consts::TAU);
            (speed * psi.sin(), speed * psi.cos())
        };
        let v = [velocity(), velocity()];
        (0..cfg.frames)
            .map(|t| {
                let t = t as f64;
                let mv = |b: usize| (start[b].0 + v[b].0 * t, start[b].1 + v[b].1 * t);
                [mv(0), mv(1)]
            })
            .collect()
    }
}

/// A flat grey backdrop with faint static per-pixel noise, within
/// [`BACKGROUND_RANGE`].
fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (lo, hi) = BACKGROUND_RANGE;
    (0..cfg.height * cfg.width * 3)
        .map(|_| rng.random_range(lo..=hi))
        .collect()
}

fn render(cfg: &SynthConfig, backdrop: &[f32], centres: &[(f64, f64); 2]) -> Tensor {
    let inv = 1.0 / (2.0 * cfg.blob_sigma().powi(2));
    let blob = |y: usize, x: usize, (cy, cx): (f64, f64)| {
        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        (-d2 * inv).exp() as f32
    };
    let mut img = Tensor::zeros([cfg.height, cfg.width, 3]);
    for (i, (px, bg)) in img
        .data_mut()
        .chunks_exact_mut(3)
        .zip(backdrop.chunks_exact(3))
        .enumerate()
    {
        let (y, x) = (i / cfg.width, i % cfg.width);
        let v = (BLOB_A_PEAK * blob(y, x, centres[0])).max(BLOB_B_PEAK * blob(y, x, centres[1]));
        for (p, &b) in px.iter_mut().zip(bg) {
            *p = v.max(b);
        }
    }
    img
}

/// Frames of clip `index`, each `[H, W, 3]`.
pub fn synth_clip(cfg: &SynthConfig, index: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(!cfg.seed ^ splitmix(index as u64 + 1)));
    let backdrop = background(cfg, &mut rng);
    blob_trajectories(cfg, index)
        .iter()
        .map(|c| render(cfg, &backdrop, c))
        .collect()
}

/// Writes `clips/clip_NNNN/frame_NNN.ppm` and `manifest.csv` under `out_dir`,
/// returning the manifest path.
pub fn write_synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let mut manifest = String::from("# clip_id,label,frame_dir\n");
    for index in 0..cfg.clips {
        let id = format!("clip_{index:04}");
        let rel = Path::new("clips").join(&id);
        let dir = out_dir.join(&rel);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in synth_clip(cfg, index).iter().enumerate() {
            write_frame(frame, &dir.join(format!("frame_{t:03}.ppm")))?;
        }
        manifest.push_str(&format!("{id},{},{}\n", synth_label(index), rel.display()));
    }
    let path = out_dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    #[test]
    fn speeds_follow_class() {
        let cfg = SynthConfig::default();
        for index in 0..40 {
            let tr = blob_trajectories(&cfg, index);
            for pair in tr.windows(2) {
                for (&from, &to) in pair[0].iter().zip(&pair[1]) {
                    let v = dist(from, to);
                    if synth_label(index) == 1 {
                        assert!(v >= cfg.fast_min_speed() - 1e-9, "clip {index}: {v}");
                    } else {
                        assert!(v <= SLOW_MAX_SPEED + 1e-9, "clip {index}: {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn fast_blobs_overlap_mid_clip() {
        let cfg = SynthConfig::default();
        let tr = blob_trajectories(&cfg, 1);
        let closest = tr.iter().map(|c| dist(c[0], c[1])).fold(f64::MAX, f64::min);
        assert!(closest < 2.0 * cfg.blob_sigma());
    }

    #[test]
    fn blobs_stay_inside_frame() {
        let cfg = SynthConfig::default();
        for index in 0..40 {
            for c in blob_trajectories(&cfg, index).iter().flatten() {
                assert!(c.0 >= 0.0 && c.0 < cfg.height as f64 && c.1 >= 0.0 && c.1 < cfg.width as f64);
            }
        }
    }

    #[test]
    fn pixels_in_unit_range() {
        let cfg = SynthConfig::default();
        for f in synth_clip(&cfg, 3) {
            assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
