//! Shared image/motion encoder.
//!
//! A UNet maps the RGB-D image to a same-size feature map `F`. Each pose is
//! embedded by an MLP (`g_t`) and, for the trajectory-aligned variant,
//! concatenated with `F` bilinearly sampled at the pose's projection
//! (`f_t`). A Transformer then mixes the tokens over time (`v_t`).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ebmdmo_autograd::nn::{Conv2d, Linear, Mlp, TransformerEncoder};
use ebmdmo_autograd::{Bound, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Camera, POSE_DIM};
use crate::scene::Image;
use crate::{cast, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// One token per timestep: `concat(f_t, g_t)`.
    TrajectoryAligned,
    /// `f_t` and `g_t` as separate tokens, all `f` tokens first.
    NoConcat,
    /// One globally pooled image token plus the `g_t` tokens.
    Gap,
    /// Positionally encoded patch tokens plus the `g_t` tokens.
    VitPatch,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 4] =
        [EncoderVariant::TrajectoryAligned, EncoderVariant::NoConcat, EncoderVariant::Gap, EncoderVariant::VitPatch];

    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::TrajectoryAligned => "trajectory-aligned",
            EncoderVariant::NoConcat => "no-concat",
            EncoderVariant::Gap => "gap",
            EncoderVariant::VitPatch => "vit-patch",
        }
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderVariant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown encoder variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub width: usize,
    pub height: usize,
    pub base_channels: usize,
    /// Number of 2x poolings; the decoder mirrors them.
    pub levels: usize,
    /// Channels `C` of `F`.
    pub feature_channels: usize,
    pub pose_hidden: usize,
    /// Width `D_g` of `g_t`.
    pub pose_features: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Side of the square image-patch pooled into one ViT token.
    pub patch: usize,
    /// Depth is divided by this before the CNN.
    pub max_depth: f32,
    /// Pose positions enter the MLP as `(x - pose_center) * pose_scale`.
    pub pose_center: [f32; 3],
    pub pose_scale: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::TrajectoryAligned,
            width: 64,
            height: 64,
            base_channels: 16,
            levels: 3,
            feature_channels: 32,
            pose_hidden: 64,
            pose_features: 32,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            patch: 8,
            max_depth: 1.2,
            pose_center: [0.0, 0.0, 0.8],
            pose_scale: 5.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let scale = 1usize << self.levels;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width % scale != 0 || self.height % scale != 0 {
            return bad(format!("image {}x{} not divisible by 2^{}", self.width, self.height, self.levels));
        }
        if self.variant == EncoderVariant::VitPatch && (self.width % self.patch != 0 || self.height % self.patch != 0) {
            return bad(format!("image not divisible into {}-pixel patches", self.patch));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.base_channels == 0 || self.feature_channels == 0 || self.max_depth <= 0.0 {
            return bad("channel counts and max_depth must be positive".into());
        }
        Ok(())
    }

    /// Number of image patch tokens `l` for the ViT variant.
    pub fn patches(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    /// Token count for a trajectory of `n` poses.
    pub fn tokens(&self, n: usize) -> usize {
        match self.variant {
            EncoderVariant::TrajectoryAligned => n,
            EncoderVariant::NoConcat => 2 * n,
            EncoderVariant::Gap => n + 1,
            EncoderVariant::VitPatch => self.patches() + n,
        }
    }

    /// First token row holding per-timestep features.
    pub fn pose_token_offset(&self, n: usize) -> usize {
        self.tokens(n) - n
    }
}

#[derive(Clone, Debug)]
struct UnetLevel {
    a: Conv2d,
    b: Conv2d,
}

/// Multiply-accumulate counts of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    /// Computed once per image (the CNN).
    pub shared: u64,
    /// Computed for every scored motion.
    pub per_candidate: u64,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    down: Vec<UnetLevel>,
    bottleneck: UnetLevel,
    up: Vec<UnetLevel>,
    out: Conv2d,
    pose_mlp: Mlp,
    in_proj: Linear,
    /// Second projection for variants whose image tokens differ from pose tokens.
    image_proj: Option<Linear>,
    transformer: TransformerEncoder,
    feature_maps: Arc<AtomicUsize>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let mut down = Vec::new();
        let mut c_in = 4;
        for l in 0..config.levels {
            let c = b << l;
            down.push(UnetLevel {
                a: Conv2d::new(store, &format!("{name}.down{l}.a"), c_in, c, 3, rng),
                b: Conv2d::new(store, &format!("{name}.down{l}.b"), c, c, 3, rng),
            });
            c_in = c;
        }
        let cb = b << config.levels;
        let bottleneck = UnetLevel {
            a: Conv2d::new(store, &format!("{name}.mid.a"), c_in, cb, 3, rng),
            b: Conv2d::new(store, &format!("{name}.mid.b"), cb, cb, 3, rng),
        };
        let mut up = Vec::new();
        let mut c_prev = cb;
        for l in (0..config.levels).rev() {
            let c = b << l;
            up.push(UnetLevel {
                a: Conv2d::new(store, &format!("{name}.up{l}.a"), c_prev + c, c, 3, rng),
                b: Conv2d::new(store, &format!("{name}.up{l}.b"), c, c, 3, rng),
            });
            c_prev = c;
        }
        let out = Conv2d::new(store, &format!("{name}.out"), b, config.feature_channels, 1, rng);
        let pose_mlp = Mlp::new(store, &format!("{name}.pose"), &[POSE_DIM, config.pose_hidden, config.pose_features], false, rng);
        let (c, dg, d) = (config.feature_channels, config.pose_features, config.d_model);
        let (in_proj, image_proj) = match config.variant {
            EncoderVariant::TrajectoryAligned => (Linear::new(store, &format!("{name}.in_proj"), c + dg, d, rng), None),
            // Image tokens carry the timestamp of the pose they were sampled for.
            EncoderVariant::NoConcat => (
                Linear::new(store, &format!("{name}.in_proj"), dg, d, rng),
                Some(Linear::new(store, &format!("{name}.image_proj"), c + 1, d, rng)),
            ),
            EncoderVariant::Gap | EncoderVariant::VitPatch => (
                Linear::new(store, &format!("{name}.in_proj"), dg, d, rng),
                Some(Linear::new(store, &format!("{name}.image_proj"), c, d, rng)),
            ),
        };
        let transformer = TransformerEncoder::new(store, &format!("{name}.transformer"), d, config.heads, config.layers, config.d_ff, rng);
        Ok(Self {
            config,
            down,
            bottleneck,
            up,
            out,
            pose_mlp,
            in_proj,
            image_proj,
            transformer,
            feature_maps: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// `[4, H, W]` network input with depth scaled by `max_depth`.
    pub fn image_tensor<T: Scalar>(&self, img: &Image) -> Result<Tensor<T>> {
        let (w, h) = (self.config.width, self.config.height);
        if img.width != w || img.height != h || img.data.len() != w * h * Image::CHANNELS {
            return Err(Error::ShapeMismatch(format!("image {}x{}, model expects {w}x{h}", img.width, img.height)));
        }
        let mut data = vec![T::zero(); 4 * w * h];
        let inv_depth = 1.0 / self.config.max_depth as f64;
        for (i, px) in img.data.chunks(Image::CHANNELS).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = cast(px[c] as f64);
            }
            data[3 * w * h + i] = cast(px[3] as f64 * inv_depth);
        }
        Ok(Tensor::from_vec(&[4, h, w], data))
    }

    /// UNet forward: `[4, H, W]` to `F` of shape `[C, H, W]`.
    pub fn image_features<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Var {
        self.feature_maps.fetch_add(1, Ordering::Relaxed);
        let block = |tape: &mut Tape<T>, lvl: &UnetLevel, x: Var| {
            let y = lvl.a.forward(tape, p, x);
            let y = tape.silu(y);
            let y = lvl.b.forward(tape, p, y);
            tape.silu(y)
        };
        let mut skips = Vec::with_capacity(self.down.len());
        let mut x = img;
        for lvl in &self.down {
            x = block(tape, lvl, x);
            skips.push(x);
            x = tape.avg_pool(x, 2);
        }
        x = block(tape, &self.bottleneck, x);
        for lvl in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = tape.upsample2(x);
            let cat = tape.concat(&[u, skip]);
            x = block(tape, lvl, cat);
        }
        self.out.forward(tape, p, x)
    }

    /// Number of feature maps computed so far; clones share the counter.
    pub fn feature_map_count(&self) -> usize {
        self.feature_maps.load(Ordering::Relaxed)
    }

    /// Per-timestep pose features `g_t`, `[N, 11]` to `[N, D_g]`.
    pub fn pose_features<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, poses: Var) -> Var {
        let cfg = &self.config;
        let mut scale = Tensor::zeros(&[POSE_DIM, POSE_DIM]);
        let mut shift = Tensor::zeros(&[POSE_DIM]);
        for i in 0..POSE_DIM {
            scale.data_mut()[i * POSE_DIM + i] = if i < 3 { cast(cfg.pose_scale as f64) } else { T::one() };
        }
        for i in 0..3 {
            shift.data_mut()[i] = cast(-(cfg.pose_center[i] * cfg.pose_scale) as f64);
        }
        let scale = tape.constant(scale);
        let shift = tape.constant(shift);
        let x = tape.matmul(poses, scale);
        let x = tape.add_bias(x, shift);
        self.pose_mlp.forward(tape, p, x)
    }

    /// `f_t`: `F` sampled at the projection of each pose position.
    pub fn sample_features<T: Scalar>(&self, tape: &mut Tape<T>, fmap: Var, poses: Var, cam: &Camera) -> Var {
        let xyz = tape.slice_cols(poses, 0, 3);
        let uv = tape.project(xyz, cam.pinhole());
        tape.bilinear_sample(fmap, uv)
    }

    /// Pre-Transformer tokens `[tokens(N), D]`.
    pub fn fuse<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, fmap: Var, poses: Var, cam: &Camera) -> Var {
        let g = self.pose_features(tape, p, poses);
        match self.config.variant {
            EncoderVariant::TrajectoryAligned => {
                let f = self.sample_features(tape, fmap, poses, cam);
                let c = tape.concat_cols(&[f, g]);
                self.in_proj.forward(tape, p, c)
            }
            EncoderVariant::NoConcat => {
                let f = self.sample_features(tape, fmap, poses, cam);
                let ts = tape.slice_cols(poses, POSE_DIM - 1, 1);
                let f = tape.concat_cols(&[f, ts]);
                let ft = self.image_proj.as_ref().expect("image projection").forward(tape, p, f);
                let gt = self.in_proj.forward(tape, p, g);
                tape.concat(&[ft, gt])
            }
            EncoderVariant::Gap => {
                let fbar = tape.global_avg_pool(fmap);
                let ft = self.image_proj.as_ref().expect("image projection").forward(tape, p, fbar);
                let gt = self.in_proj.forward(tape, p, g);
                tape.concat(&[ft, gt])
            }
            EncoderVariant::VitPatch => {
                let c = self.config.feature_channels;
                let pooled = tape.avg_pool(fmap, self.config.patch);
                let l = self.config.patches();
                let flat = tape.reshape(pooled, &[c, l]);
                let patches = tape.transpose(flat);
                let pt = self.image_proj.as_ref().expect("image projection").forward(tape, p, patches);
                let pe = tape.constant(sinusoidal(l, self.config.d_model));
                let pt = tape.add(pt, pe);
                let gt = self.in_proj.forward(tape, p, g);
                tape.concat(&[pt, gt])
            }
        }
    }

    pub fn temporal_encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var) -> Var {
        self.transformer.forward(tape, p, tokens)
    }

    /// Output tokens `v` for one trajectory against a precomputed `F`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, fmap: Var, poses: Var, cam: &Camera) -> Var {
        let tokens = self.fuse(tape, p, fmap, poses, cam);
        self.temporal_encode(tape, p, tokens)
    }

    pub fn macs(&self, n_poses: usize) -> MacCount {
        let cfg = &self.config;
        let (mut w, mut h) = (cfg.width, cfg.height);
        let mut shared = 0;
        for lvl in &self.down {
            shared += lvl.a.macs(h, w) + lvl.b.macs(h, w);
            w /= 2;
            h /= 2;
        }
        shared += self.bottleneck.a.macs(h, w) + self.bottleneck.b.macs(h, w);
        for lvl in &self.up {
            w *= 2;
            h *= 2;
            shared += lvl.a.macs(h, w) + lvl.b.macs(h, w);
        }
        shared += self.out.macs(h, w);
        let tokens = cfg.tokens(n_poses);
        let c = cfg.feature_channels as u64;
        let n = n_poses as u64;
        let mut per = POSE_DIM as u64 * POSE_DIM as u64 * n + self.pose_mlp.macs(n_poses) + self.in_proj.macs(n_poses);
        per += match cfg.variant {
            // Four taps per sampled channel.
            EncoderVariant::TrajectoryAligned => 4 * c * n,
            EncoderVariant::NoConcat => 4 * c * n + self.image_proj.as_ref().map_or(0, |l| l.macs(n_poses)),
            EncoderVariant::Gap => self.image_proj.as_ref().map_or(0, |l| l.macs(1)),
            EncoderVariant::VitPatch => self.image_proj.as_ref().map_or(0, |l| l.macs(cfg.patches())),
        };
        per += self.transformer.macs(tokens);
        // Image-only work that does not depend on the motion.
        if cfg.variant == EncoderVariant::Gap || cfg.variant == EncoderVariant::VitPatch {
            shared += (cfg.width * cfg.height) as u64 * c;
        }
        MacCount { shared, per_candidate: per }
    }
}

/// Standard sine/cosine table `[n, d]`.
pub fn sinusoidal<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            out.push(cast(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// Flattened `[N, 11]` tensor of a trajectory.
pub fn poses_tensor<T: Scalar>(traj: &crate::motion::Trajectory<T>) -> Tensor<T> {
    Tensor::from_vec(&[traj.len(), POSE_DIM], traj.flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{Pose, Trajectory};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(variant: EncoderVariant) -> EncoderConfig {
        EncoderConfig {
            variant,
            width: 8,
            height: 8,
            base_channels: 2,
            levels: 2,
            feature_channels: 3,
            pose_hidden: 6,
            pose_features: 4,
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 8,
            patch: 4,
            ..EncoderConfig::default()
        }
    }

    fn cam8() -> Camera {
        Camera::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap()
    }

    fn traj(n: usize, rng: &mut ChaCha8Rng) -> Trajectory<f64> {
        Trajectory::new(
            (0..n)
                .map(|k| Pose {
                    x: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.8..1.0)],
                    r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                    s: 1.0,
                    t: k as f64 / (n - 1) as f64,
                })
                .collect(),
        )
    }

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn unet_preserves_spatial_size_and_is_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = EncoderConfig { base_channels: 4, feature_channels: 8, ..EncoderConfig::default() };
        let enc = Encoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
        let img = Tensor::from_vec(&[4, 64, 64], (0..4 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect());
        let run = |img: &Tensor<f32>| {
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let x = t.constant(img.clone());
            let f = enc.image_features(&mut t, &p, x);
            t.value(f).clone()
        };
        let a = run(&img);
        assert_eq!(a.shape(), &[8, 64, 64]);
        assert_eq!(run(&img), a);
        let mut poked = img.clone();
        poked.data_mut()[64 * 20 + 30] += 0.5;
        assert_ne!(run(&poked), a);
        assert_eq!(enc.feature_map_count(), 3);
    }

    #[test]
    fn token_counts_per_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in EncoderVariant::ALL {
            let cfg = tiny(v);
            let mut store = ParamStore::<f64>::new();
            let enc = Encoder::new(&mut store, "e", cfg.clone(), &mut rng).unwrap();
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let f = t.constant(random_map(3, 8, 8, &mut rng));
            let x = t.constant(poses_tensor(&traj(4, &mut rng)));
            let v_out = enc.encode(&mut t, &p, f, x, &cam8());
            assert_eq!(t.shape(v_out), &[cfg.tokens(4), 8]);
        }
        let full = EncoderConfig::default();
        assert_eq!(full.tokens(16), 16);
        assert_eq!(EncoderConfig { variant: EncoderVariant::NoConcat, ..full.clone() }.tokens(16), 32);
        assert_eq!(EncoderConfig { variant: EncoderVariant::Gap, ..full.clone() }.tokens(16), 17);
        assert_eq!(EncoderConfig { variant: EncoderVariant::VitPatch, ..full }.tokens(16), 80);
    }

    #[test]
    fn pose_features_are_per_timestep() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "e", tiny(EncoderVariant::TrajectoryAligned), &mut rng).unwrap();
        let tr = traj(5, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let shuffled = Trajectory::new(perm.iter().map(|&i| tr.poses()[i]).collect());
        let run = |tr: &Trajectory<f64>| {
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let x = t.constant(poses_tensor(tr));
            let g = enc.pose_features(&mut t, &p, x);
            t.value(g).clone()
        };
        let (a, b) = (run(&tr), run(&shuffled));
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(a.row(i), b.row(j));
        }
    }

    #[test]
    fn gap_of_constant_map_is_that_constant() {
        let mut t = Tape::<f64>::new();
        let f = t.constant(Tensor::from_vec(&[2, 4, 4], [vec![0.7; 16], vec![-1.5; 16]].concat()));
        let g = t.global_avg_pool(f);
        let got = t.value(g).data();
        assert!((got[0] - 0.7).abs() < 1e-12 && (got[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn constant_map_tokens_differ_only_through_pose_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "e", tiny(EncoderVariant::TrajectoryAligned), &mut rng).unwrap();
        let fconst = Tensor::from_vec(&[3, 8, 8], (0..192).map(|i| (i / 64) as f64 * 0.3).collect());
        let a = traj(4, &mut rng);
        let mut shifted = a.clone();
        shifted.poses_mut()[1].x[0] += 0.05;
        let tokens = |tr: &Trajectory<f64>| {
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let f = t.constant(fconst.clone());
            let x = t.constant(poses_tensor(tr));
            let g = enc.pose_features(&mut t, &p, x);
            let s = enc.sample_features(&mut t, f, x, &cam8());
            (t.value(s).clone(), t.value(g).clone())
        };
        let (fa, ga) = tokens(&a);
        let (fs, gs) = tokens(&shifted);
        assert!(fa.data().iter().zip(fs.data()).all(|(x, y)| (x - y).abs() < 1e-12), "f_t is constant on a constant map");
        assert_ne!(ga.row(1), gs.row(1));
        assert_eq!(ga.row(0), gs.row(0));
    }

    #[test]
    fn aligned_encoder_reads_only_near_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "e", tiny(EncoderVariant::TrajectoryAligned), &mut rng).unwrap();
        let tr = traj(4, &mut rng);
        let cam = cam8();
        let f = random_map(3, 8, 8, &mut rng);
        let uv: Vec<[f64; 2]> = tr
            .poses()
            .iter()
            .map(|p| {
                let u = crate::motion::project(p.x, &cam).unwrap();
                [u[0].clamp(0.0, 7.0), u[1].clamp(0.0, 7.0)]
            })
            .collect();
        let mut noisy = f.clone();
        for row in 0..8 {
            for col in 0..8 {
                let far = uv.iter().all(|u| (u[0] - col as f64).abs() > 2.0 || (u[1] - row as f64).abs() > 2.0);
                if far {
                    for c in 0..3 {
                        noisy.data_mut()[c * 64 + row * 8 + col] = rng.random_range(-5.0..5.0);
                    }
                }
            }
        }
        let run = |fm: &Tensor<f64>| {
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let fv = t.constant(fm.clone());
            let x = t.constant(poses_tensor(&tr));
            let v = enc.encode(&mut t, &p, fv, x, &cam);
            t.value(v).clone()
        };
        let (a, b) = (run(&f), run(&noisy));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn transformer_mixes_tokens_and_handles_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "e", tiny(EncoderVariant::TrajectoryAligned), &mut rng).unwrap();
        let tokens = Tensor::from_vec(&[4, 8], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
        let run = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let v = enc.temporal_encode(&mut t, &p, xv);
            t.value(v).clone()
        };
        let a = run(&tokens);
        assert_eq!(a.shape(), &[4, 8]);
        let mut z = tokens.clone();
        z.data_mut()[..8].iter_mut().for_each(|v| *v = 0.0);
        let b = run(&z);
        assert_ne!(a.row(2), b.row(2));
        let one = run(&Tensor::from_vec(&[1, 8], tokens.row(0).to_vec()));
        assert!(one.is_finite() && one.shape() == [1, 8]);
    }

    #[test]
    fn mac_counts_split_cnn_from_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, "e", EncoderConfig::default(), &mut rng).unwrap();
        let m = enc.macs(16);
        assert!(m.per_candidate * 4 < m.shared, "{m:?}");
    }

    #[test]
    fn variant_and_config_validation() {
        assert_eq!("gap".parse::<EncoderVariant>().unwrap(), EncoderVariant::Gap);
        assert!("resnet".parse::<EncoderVariant>().is_err());
        let bad = EncoderConfig { width: 60, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
    }
}
