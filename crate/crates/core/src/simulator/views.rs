//! View perturbation standing in for audio augmentation.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::rng;

use super::world::SpeakerWorld;

/// Additive noise plus a freshly drawn channel offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    /// Orthonormal rows spanning the channel subspace.
    pub channel_basis: Matrix,
    pub channel_std: f64,
}

impl Augmentation {
    pub fn from_world(world: &SpeakerWorld) -> Self {
        Self {
            channel_basis: world.channel_basis.clone(),
            channel_std: world.config.channel_std,
        }
    }

    /// Returns `seq` plus one channel offset (scaled by `channel_scale`)
    /// shared by every frame, plus i.i.d. noise of `noise_std`.
    pub fn perturb(&self, seq: &Matrix, noise_std: f64, channel_scale: f64, rng: &mut rng::Rng) -> Matrix {
        let mut offset = vec![0.0; seq.cols()];
        if channel_scale != 0.0 {
            for b in self.channel_basis.iter_rows() {
                let z: f64 = rng.sample(StandardNormal);
                let w = channel_scale * self.channel_std * z;
                offset.iter_mut().zip(b).for_each(|(o, x)| *o += w * x);
            }
        }
        let mut out = seq.clone();
        for t in 0..out.rows() {
            for (v, o) in out.row_mut(t).iter_mut().zip(&offset) {
                *v += o;
                if noise_std != 0.0 {
                    *v += noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewConfig {
    pub num_global: usize,
    pub num_local: usize,
    pub global_len: usize,
    pub local_len: usize,
    pub global_noise: f64,
    pub local_noise: f64,
    /// Fraction of the world's channel spread used for the fresh offset.
    pub global_channel_scale: f64,
    pub local_channel_scale: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            num_global: 2,
            num_local: 4,
            global_len: 20,
            local_len: 8,
            global_noise: 0.1,
            local_noise: 0.2,
            global_channel_scale: 0.5,
            local_channel_scale: 0.75,
        }
    }
}

/// Global views first, then local views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub views: Vec<Matrix>,
    pub num_global: usize,
}

impl ViewSet {
    pub fn global(&self) -> &[Matrix] {
        &self.views[..self.num_global]
    }

    pub fn local(&self) -> &[Matrix] {
        &self.views[self.num_global..]
    }
}

fn crop(seq: &Matrix, len: usize, rng: &mut rng::Rng) -> Matrix {
    let start = rng.random_range(0..=seq.rows() - len);
    let mut out = Matrix::zeros(len, seq.cols());
    for r in 0..len {
        out.row_mut(r).copy_from_slice(seq.row(start + r));
    }
    out
}

/// Random contiguous crops of one utterance, each with its own perturbation.
pub fn make_views(seq: &Matrix, cfg: &ViewConfig, aug: &Augmentation, seed: u64) -> Result<ViewSet> {
    if cfg.global_len == 0 || cfg.local_len == 0 {
        return Err(Error::BadConfig("view lengths must be positive".into()));
    }
    let needed = cfg.global_len.max(cfg.local_len);
    if seq.rows() < needed {
        return Err(Error::TooShort {
            frames: seq.rows(),
            needed,
        });
    }
    let mut rng = rng::seeded(seed);
    let mut views = Vec::with_capacity(cfg.num_global + cfg.num_local);
    for _ in 0..cfg.num_global {
        let c = crop(seq, cfg.global_len, &mut rng);
        views.push(aug.perturb(&c, cfg.global_noise, cfg.global_channel_scale, &mut rng));
    }
    for _ in 0..cfg.num_local {
        let c = crop(seq, cfg.local_len, &mut rng);
        views.push(aug.perturb(&c, cfg.local_noise, cfg.local_channel_scale, &mut rng));
    }
    Ok(ViewSet {
        views,
        num_global: cfg.num_global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aug() -> Augmentation {
        Augmentation {
            channel_basis: Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
            channel_std: 0.5,
        }
    }

    fn seq(t: usize) -> Matrix {
        Matrix::from_vec(t, 3, (0..t * 3).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn unperturbed_whole_utterance_views_match() {
        let cfg = ViewConfig {
            global_len: 10,
            local_len: 4,
            global_noise: 0.0,
            local_noise: 0.0,
            global_channel_scale: 0.0,
            local_channel_scale: 0.0,
            ..ViewConfig::default()
        };
        let v = make_views(&seq(10), &cfg, &aug(), 3).unwrap();
        assert_eq!(v.views.len(), 6);
        assert_eq!(v.global()[0], v.global()[1]);
        assert_eq!(v.global()[0], seq(10));
        assert_eq!(v.local().len(), 4);
    }

    #[test]
    fn deterministic_and_length_checked() {
        let cfg = ViewConfig::default();
        let a = make_views(&seq(30), &cfg, &aug(), 9).unwrap();
        assert_eq!(a, make_views(&seq(30), &cfg, &aug(), 9).unwrap());
        assert_ne!(a, make_views(&seq(30), &cfg, &aug(), 10).unwrap());
        assert!(matches!(
            make_views(&seq(5), &cfg, &aug(), 9),
            Err(Error::TooShort { frames: 5, needed: 20 })
        ));
    }

    #[test]
    fn channel_offset_is_shared_across_frames() {
        let base = Matrix::zeros(4, 3);
        let out = aug().perturb(&base, 0.0, 1.0, &mut rng::seeded(1));
        let first = out.row(0).to_vec();
        assert!(first[0] != 0.0 && first[1] == 0.0 && first[2] == 0.0);
        for r in out.iter_rows() {
            assert_eq!(r, &first[..]);
        }
    }
}
