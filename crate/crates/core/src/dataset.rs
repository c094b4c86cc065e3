//! Episode generation and the on-disk dataset layout.
//!
//! ```text
//! manifest.json
//! images/{split}/{id}.png     8-bit RGB
//! depth/{split}/{id}.f32      little-endian f32, row-major H x W, meters
//! motions/{split}.jsonl       one trajectory per line, id order
//! scenes/{split}.jsonl        one scene per line, id order
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Camera, Trajectory};
use crate::scene::{self, Geometry, Image, SceneSpec, TaskId};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub scene: SceneSpec,
    pub image: Image,
    pub expert: Trajectory<f32>,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub task: TaskId,
    pub n_train: usize,
    pub n_test: usize,
    pub horizon: usize,
    pub seed: u64,
    pub camera: Camera,
    pub image_width: usize,
    pub image_height: usize,
    /// Layout, rendering and oracle constants (tolerances, max depth).
    pub geometry: Geometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Episode] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn train_motions(&self) -> Vec<Trajectory<f32>> {
        self.train.iter().map(|e| e.expert.clone()).collect()
    }

    pub fn geometry(&self) -> &Geometry {
        &self.manifest.geometry
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene seed for one generation attempt of one episode; splits draw from
/// disjoint tag spaces.
pub fn episode_seed(seed: u64, split: Split, index: usize, attempt: usize) -> u64 {
    let lane = (split.tag() << 60) ^ ((attempt as u64) << 40) ^ index as u64;
    splitmix64(splitmix64(seed) ^ lane)
}

const MAX_ATTEMPTS: usize = 32;

fn make_episode(task: TaskId, seed: u64, split: Split, id: usize, horizon: usize, cam: &Camera, geom: &Geometry) -> Result<Episode> {
    for attempt in 0..MAX_ATTEMPTS {
        let s = scene::sample_scene(task, episode_seed(seed, split, id, attempt), geom)?;
        let expert = scene::expert_motion(&s, horizon, geom)?;
        if !scene::check_success(&s, &expert, geom).success {
            continue;
        }
        let image = scene::render(&s, cam, geom);
        return Ok(Episode { id, scene: s, image, expert, camera: *cam });
    }
    Err(Error::Dataset(format!("no valid {task} episode for id {id} after {MAX_ATTEMPTS} attempts")))
}

/// In-memory generation; episodes are independent and built in parallel.
pub fn generate(task: TaskId, n_train: usize, n_test: usize, seed: u64, horizon: usize, cam: Camera, geom: Geometry) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidConfig("train and test counts must be positive".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be positive".into()));
    }
    cam.validate()?;
    let build = |split: Split, n: usize| -> Result<Vec<Episode>> {
        (0..n)
            .into_par_iter()
            .map(|id| make_episode(task, seed, split, id, horizon, &cam, &geom))
            .collect()
    };
    let train = build(Split::Train, n_train)?;
    let test = build(Split::Test, n_test)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        task,
        n_train,
        n_test,
        horizon,
        seed,
        camera: cam,
        image_width: cam.width,
        image_height: cam.height,
        geometry: geom,
    };
    Ok(Dataset { manifest, train, test })
}

/// Generates with default camera and geometry, then writes to `dir`.
pub fn gen_dataset(task: TaskId, n_train: usize, n_test: usize, seed: u64, dir: &Path) -> Result<Dataset> {
    let ds = generate(task, n_train, n_test, seed, 15, Geometry::default_camera(), Geometry::default())?;
    save(&ds, dir)?;
    Ok(ds)
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Returns `(width, height, rgb bytes)`.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("{}: expected 8-bit RGB", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

fn write_episode_image(dir: &Path, split: Split, ep: &Episode) -> Result<()> {
    let img = &ep.image;
    let rgb: Vec<u8> = img
        .data
        .chunks(Image::CHANNELS)
        .flat_map(|p| [0, 1, 2].map(|c| (p[c] * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    write_png_rgb(&dir.join("images").join(split.name()).join(format!("{}.png", ep.id)), img.width, img.height, &rgb)?;
    let depth: Vec<u8> = img.depth().iter().flat_map(|d| d.to_le_bytes()).collect();
    fs::write(dir.join("depth").join(split.name()).join(format!("{}.f32", ep.id)), depth)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, &it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "depth"] {
        for split in [Split::Train, Split::Test] {
            fs::create_dir_all(dir.join(sub).join(split.name()))?;
        }
    }
    fs::create_dir_all(dir.join("motions"))?;
    fs::create_dir_all(dir.join("scenes"))?;
    for split in [Split::Train, Split::Test] {
        let eps = ds.split(split);
        eps.par_iter().try_for_each(|ep| write_episode_image(dir, split, ep))?;
        write_jsonl(&dir.join("motions").join(format!("{}.jsonl", split.name())), eps.iter().map(|e| &e.expert))?;
        write_jsonl(&dir.join("scenes").join(format!("{}.jsonl", split.name())), eps.iter().map(|e| &e.scene))?;
    }
    let manifest = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Dataset(format!("{} not found", path.display())));
    }
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

fn load_split(dir: &Path, m: &Manifest, split: Split, n: usize) -> Result<Vec<Episode>> {
    let motions: Vec<Trajectory<f32>> = read_jsonl(&dir.join("motions").join(format!("{}.jsonl", split.name())))?;
    let scenes: Vec<SceneSpec> = read_jsonl(&dir.join("scenes").join(format!("{}.jsonl", split.name())))?;
    if motions.len() != n || scenes.len() != n {
        return Err(Error::Dataset(format!(
            "{} split: manifest says {n} episodes, found {} motions and {} scenes",
            split.name(),
            motions.len(),
            scenes.len()
        )));
    }
    let (w, h) = (m.image_width, m.image_height);
    motions
        .into_par_iter()
        .zip(scenes)
        .enumerate()
        .map(|(id, (expert, scene))| {
            if !expert.is_valid(m.horizon + 1) {
                return Err(Error::Dataset(format!("{} motion {id} violates trajectory invariants", split.name())));
            }
            let (pw, ph, rgb) = read_png_rgb(&dir.join("images").join(split.name()).join(format!("{id}.png")))?;
            if pw != w || ph != h {
                return Err(Error::Dataset(format!("image {id} is {pw}x{ph}, expected {w}x{h}")));
            }
            let raw = fs::read(dir.join("depth").join(split.name()).join(format!("{id}.f32")))?;
            if raw.len() != w * h * 4 {
                return Err(Error::Dataset(format!("depth {id} has {} bytes, expected {}", raw.len(), w * h * 4)));
            }
            let mut data = Vec::with_capacity(w * h * Image::CHANNELS);
            for (px, d) in rgb.chunks(3).zip(raw.chunks(4)) {
                data.extend(px.iter().map(|&b| b as f32 / 255.0));
                data.push(f32::from_le_bytes([d[0], d[1], d[2], d[3]]));
            }
            Ok(Episode { id, scene, image: Image { width: w, height: h, data }, expert, camera: m.camera })
        })
        .collect()
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let train = load_split(dir, &manifest, Split::Train, manifest.n_train)?;
    let test = load_split(dir, &manifest, Split::Test, manifest.n_test)?;
    Ok(Dataset { manifest, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(TaskId::PickPlace, 6, 3, 7, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.manifest.n_train, 6);
        assert_eq!(back.test.len(), 3);
    }

    #[test]
    fn splits_never_share_scenes() {
        let ds = generate(TaskId::Reach, 200, 50, 3, 15, Geometry::default_camera(), Geometry::default()).unwrap();
        for a in &ds.train {
            for b in &ds.test {
                assert_ne!(a.scene.objects, b.scene.objects);
            }
        }
        let other = generate(TaskId::Reach, 20, 5, 4, 15, Geometry::default_camera(), Geometry::default()).unwrap();
        assert!(other.train.iter().all(|a| ds.train.iter().all(|b| a.scene.objects != b.scene.objects)));
    }

    #[test]
    fn every_episode_passes_its_oracle() {
        let ds = generate(TaskId::PushButton, 40, 10, 1, 15, Geometry::default_camera(), Geometry::default()).unwrap();
        for ep in ds.train.iter().chain(&ds.test) {
            assert!(scene::check_success(&ep.scene, &ep.expert, ds.geometry()).success);
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        let r = generate(TaskId::Reach, 0, 5, 1, 15, Geometry::default_camera(), Geometry::default());
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn missing_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn seeds_differ_per_split_index_and_attempt() {
        let a = episode_seed(5, Split::Train, 0, 0);
        assert_ne!(a, episode_seed(5, Split::Test, 0, 0));
        assert_ne!(a, episode_seed(5, Split::Train, 1, 0));
        assert_ne!(a, episode_seed(5, Split::Train, 0, 1));
        assert_ne!(a, episode_seed(6, Split::Train, 0, 0));
    }
}
