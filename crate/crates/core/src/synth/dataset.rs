//! Clip collections: synthetic generation, on-disk export with a checksummed
//! manifest, external ingestion and the deterministic training sampler.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::{corrupt, NoiseModel};
use crate::rng::{derive_seed, label_key, rng_for};
use crate::synth::bayer::CfaPhase;
use crate::synth::io::{quantize16, read_clip_dir, read_flows, write_clip_dir, write_flows};
use crate::synth::scene::{generate_synthetic, GroundTruthFlow, SceneSpec};
use crate::synth::window::{crop_patch, extract_window, TemporalWindow};
use crate::video::{Layout, VideoSequence};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub train_clips: usize,
    pub val_clips: usize,
    pub layout: Layout,
    pub cfa_phase: CfaPhase,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { scene: SceneSpec::default(), train_clips: 4, val_clips: 1, layout: Layout::Srgb, cfa_phase: CfaPhase::Rggb }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub clean: Option<VideoSequence>,
    pub noisy: VideoSequence,
    pub gt: Option<GroundTruthFlow>,
}

impl Clip {
    pub fn id(&self) -> &str {
        &self.noisy.id
    }

    /// Noisy window with its clean counterpart when available.
    pub fn window(&self, t: usize, t_window: usize) -> Result<(TemporalWindow, Option<TemporalWindow>)> {
        let noisy = extract_window(&self.noisy, self.gt.as_ref(), t, t_window)?;
        let clean = self.clean.as_ref().map(|c| extract_window(c, None, t, t_window)).transpose()?;
        Ok((noisy, clean))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClipEntry {
    id: String,
    split: Split,
    frames: usize,
    noise_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    spec: DatasetSpec,
    noise: NoiseModel,
    clips: Vec<ClipEntry>,
    files: BTreeMap<String, String>,
}

/// A paired noisy/clean collection with train and validation splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub noise: NoiseModel,
    /// Content digest of the manifest; empty for in-memory ingestion.
    pub digest: String,
    seed: u64,
    spec: DatasetSpec,
    noise_seeds: Vec<u64>,
}

fn clip_noise_seed(seed: u64, split: Split, k: usize) -> u64 {
    derive_seed(&[seed, label_key("noise"), split as u64, k as u64])
}

impl Dataset {
    /// Renders and corrupts every clip in memory.
    pub fn synthetic(spec: &DatasetSpec, noise: &NoiseModel, seed: u64) -> Result<Self> {
        spec.scene.validate()?;
        noise.validate()?;
        if spec.train_clips == 0 {
            return Err(Error::Config("dataset needs at least one training clip".into()));
        }
        let mut ds = Dataset {
            train: Vec::new(),
            val: Vec::new(),
            noise: *noise,
            digest: String::new(),
            seed,
            spec: spec.clone(),
            noise_seeds: Vec::new(),
        };
        for (split, count) in [(Split::Train, spec.train_clips), (Split::Val, spec.val_clips)] {
            for k in 0..count {
                let id = format!("{}_{k:03}", if split == Split::Train { "train" } else { "val" });
                let scene_seed = derive_seed(&[seed, label_key("scene"), split as u64, k as u64]);
                let (clean, gt) = generate_synthetic(&id, &spec.scene, spec.layout, spec.cfa_phase, scene_seed)?;
                let frames = clean.frames().iter().map(|f| f.map(quantize16)).collect();
                let clean = clean.with_frames(frames)?;
                let noise_seed = clip_noise_seed(seed, split, k);
                let noisy = corrupt(&clean, noise, noise_seed)?;
                ds.noise_seeds.push(noise_seed);
                let clip = Clip { clean: Some(clean), noisy, gt: Some(gt) };
                match split {
                    Split::Train => ds.train.push(clip),
                    Split::Val => ds.val.push(clip),
                }
            }
        }
        ds.digest = ds.manifest(BTreeMap::new()).digest();
        Ok(ds)
    }

    /// Noisy clips read from disk with optional clean references and no flows.
    pub fn from_sequences(noisy: Vec<VideoSequence>, clean: Option<Vec<VideoSequence>>, noise: NoiseModel) -> Result<Self> {
        noise.validate()?;
        if noisy.is_empty() {
            return Err(Error::Input("no clips to ingest".into()));
        }
        let mut clean_by_id: BTreeMap<String, VideoSequence> =
            clean.unwrap_or_default().into_iter().map(|c| (c.id.clone(), c)).collect();
        let mut train = Vec::new();
        for mut n in noisy {
            let c = clean_by_id.remove(&n.id);
            if let Some(c) = &c {
                if c.len() != n.len() || c.dims() != n.dims() {
                    return Err(Error::Input(format!("clean clip `{}` does not match its noisy clip", n.id)));
                }
            }
            n.noise_meta = Some(noise);
            train.push(Clip { clean: c, noisy: n, gt: None });
        }
        Ok(Dataset {
            train,
            val: Vec::new(),
            noise,
            digest: String::new(),
            seed: 0,
            spec: DatasetSpec::default(),
            noise_seeds: Vec::new(),
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn clips(&self) -> impl Iterator<Item = &Clip> {
        self.train.iter().chain(self.val.iter())
    }

    fn manifest(&self, files: BTreeMap<String, String>) -> Manifest {
        let clips = self
            .train
            .iter()
            .map(|c| (Split::Train, c))
            .chain(self.val.iter().map(|c| (Split::Val, c)))
            .zip(&self.noise_seeds)
            .map(|((split, c), &noise_seed)| ClipEntry { id: c.id().to_string(), split, frames: c.noisy.len(), noise_seed })
            .collect();
        Manifest { version: 1, seed: self.seed, spec: self.spec.clone(), noise: self.noise, clips, files }
    }

    /// Writes clean frames, clipped noisy previews, flows and the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.noise_seeds.is_empty() {
            return Err(Error::Input("only synthetic datasets can be exported".into()));
        }
        let mut files = BTreeMap::new();
        for clip in self.clips() {
            let id = clip.id();
            let clean = clip.clean.as_ref().expect("synthetic clips carry clean frames");
            let mut written = write_clip_dir(clean, &dir.join("clips").join(id))?;
            written.extend(write_clip_dir(&clip.noisy, &dir.join("noisy").join(id))?);
            if let Some(gt) = &clip.gt {
                written.extend(write_flows(gt, &dir.join("flow").join(id))?);
            }
            for p in written {
                let rel = p.strip_prefix(dir).expect("written under dir").to_string_lossy().replace('\\', "/");
                files.insert(rel, file_sha256(&p)?);
            }
        }
        let manifest = self.manifest(files);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads an exported dataset, verifying every file checksum. Noisy frames
    /// are regenerated from the clean frames and recorded seeds, so they are
    /// identical to the unclipped in-memory originals.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        for (rel, sum) in &manifest.files {
            let p = dir.join(rel);
            if &file_sha256(&p)? != sum {
                return Err(Error::Provenance(format!("checksum mismatch for {}", p.display())));
            }
        }
        let mut ds = Dataset {
            train: Vec::new(),
            val: Vec::new(),
            noise: manifest.noise,
            digest: String::new(),
            seed: manifest.seed,
            spec: manifest.spec.clone(),
            noise_seeds: Vec::new(),
        };
        for entry in &manifest.clips {
            let clean = read_clip_dir(&dir.join("clips").join(&entry.id), manifest.spec.layout)?;
            if clean.len() != entry.frames {
                return Err(Error::format(&path, format!("clip `{}` frame count changed", entry.id)));
            }
            let noisy = corrupt(&clean, &manifest.noise, entry.noise_seed)?;
            let flow_dir = dir.join("flow").join(&entry.id);
            let gt = if flow_dir.is_dir() { Some(read_flows(&flow_dir, manifest.spec.scene.flow_radius)?) } else { None };
            ds.noise_seeds.push(entry.noise_seed);
            let clip = Clip { clean: Some(clean), noisy, gt };
            match entry.split {
                Split::Train => ds.train.push(clip),
                Split::Val => ds.val.push(clip),
            }
        }
        ds.digest = ds.manifest(BTreeMap::new()).digest();
        Ok(ds)
    }

    /// Every `(clip, centre)` pair in the training split.
    fn train_positions(&self) -> Vec<(usize, usize)> {
        self.train.iter().enumerate().flat_map(|(c, clip)| (0..clip.noisy.len()).map(move |t| (c, t))).collect()
    }

    /// Visiting order for one epoch; a pure function of `(base_seed, epoch)`.
    pub fn epoch_order(&self, base_seed: u64, epoch: u64) -> Vec<(usize, usize)> {
        let mut order = self.train_positions();
        order.shuffle(&mut rng_for(&[base_seed, label_key("epoch"), epoch]));
        order
    }

    /// The training sample for a global iteration: a cropped window plus the
    /// per-sample seed derived from `(base_seed, epoch, k)`.
    pub fn sample(&self, base_seed: u64, iteration: u64, t_window: usize, patch: usize) -> Result<(TemporalWindow, u64)> {
        let n = self.train_positions().len() as u64;
        let (epoch, k) = (iteration / n, iteration % n);
        let (clip, t) = self.epoch_order(base_seed, epoch)[k as usize];
        let sample_seed = derive_seed(&[base_seed, epoch, k]);
        let (window, _) = self.train[clip].window(t, t_window)?;
        let (_, h, w) = window.frames[0].dims();
        let window = if patch >= h.min(w) { window } else { crop_patch(&window, patch, sample_seed)? };
        Ok((window, sample_seed))
    }
}

impl Manifest {
    fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("manifest serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
