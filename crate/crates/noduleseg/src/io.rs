//! On-disk formats: NDT1 tensor files, checkpoint directories, key=value
//! config files, and the dataset manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::fleischner::Texture;
use crate::loss::{LossCombination, LossConfig};
use crate::nn::{JointModelConfig, Parameters};
use crate::tensor::{Scalar, Tensor};

const NDT1_MAGIC: &[u8; 4] = b"NDT1";

/// NDT1: 4-byte magic, 1 byte dtype code (0 = f32, 1 = f64), 1 byte rank,
/// rank x 8-byte little-endian extents, row-major little-endian values.
pub fn tensor_to_bytes<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + t.shape().len() * 8 + t.numel() * 8);
    out.extend_from_slice(NDT1_MAGIC);
    out.push(S::DTYPE_CODE);
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le_bytes(&mut out);
    }
    out
}

pub fn tensor_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    if bytes.len() < 6 || &bytes[..4] != NDT1_MAGIC {
        return Err(Error::Load("not an NDT1 file".into()));
    }
    if bytes[4] != S::DTYPE_CODE {
        return Err(Error::Load(format!(
            "dtype code {} does not match the requested element type ({})",
            bytes[4],
            S::DTYPE_CODE
        )));
    }
    let rank = bytes[5] as usize;
    let header = 6 + rank * 8;
    if bytes.len() < header {
        return Err(Error::Load("truncated NDT1 header".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[6 + i * 8..6 + (i + 1) * 8]);
        shape.push(u64::from_le_bytes(buf) as usize);
    }
    let elem = if S::DTYPE_CODE == 0 { 4 } else { 8 };
    let numel: usize = shape.iter().product();
    if bytes.len() != header + numel * elem {
        return Err(Error::Load(format!(
            "NDT1 payload is {} bytes, expected {}",
            bytes.len() - header,
            numel * elem
        )));
    }
    let mut t = Tensor::zeros(&shape);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = S::from_le_bytes(&bytes[header + i * elem..header + (i + 1) * elem]);
    }
    Ok(t)
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", path.display(), e))))
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", path.display(), e))))?;
    tensor_from_bytes(&bytes).map_err(|e| Error::Load(format!("{}: {}", path.display(), e)))
}

/// UTF-8 key=value lines; `#` starts a comment, blank lines ignored.
/// Duplicate keys keep the last value.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got {:?}", ln + 1, raw)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn kv_to_string(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(&format!("{}={}\n", k, v));
    }
    out
}

/// Everything a run needs: model, loss, augmentation, data geometry and
/// optimizer settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: JointModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub augment_enabled: bool,
    pub patch_extent: usize,
    pub spacing_mm: [f64; 3],
    pub intensity_clip: [f64; 2],
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub min_volume_voxels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: JointModelConfig::desk(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            augment_enabled: true,
            patch_extent: 32,
            spacing_mm: [1.0, 1.0, 1.0],
            intensity_clip: [-1000.0, 400.0],
            lr: 1e-3,
            batch_size: 2,
            max_steps: 500,
            eval_every: 50,
            seed: 0,
            val_fraction: 0.3,
            min_volume_voxels: 8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        let div = 1usize << self.model.stages;
        if self.patch_extent == 0 || self.patch_extent % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_extent {} must be divisible by 2^stages = {}",
                self.patch_extent, div
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig(format!("spacing must be positive, got {:?}", self.spacing_mm)));
        }
        if self.intensity_clip[0] >= self.intensity_clip[1] {
            return Err(Error::InvalidConfig(format!(
                "intensity clip window is empty: {:?}",
                self.intensity_clip
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("max_steps and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Apply dotted-key overrides on top of `self`. Unknown keys error so
    /// typos fail validation instead of silently using defaults.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::InvalidConfig(format!("{}={}: {}", k, v, e)))
        }
        for (k, v) in kv {
            match k.as_str() {
                "model.stages" => self.model.stages = parse(k, v)?,
                "model.base_features" => self.model.base_features = parse(k, v)?,
                "model.groups" => self.model.groups = parse(k, v)?,
                "model.texture_classes" => self.model.texture_classes = parse(k, v)?,
                "model.dropout_rate" => self.model.dropout_rate = parse(k, v)?,
                "model.use_cbam" => self.model.use_cbam = parse(k, v)?,
                "model.input_channels" => self.model.input_channels = parse(k, v)?,
                "loss.ce_weight" => self.loss.ce_weight = parse(k, v)?,
                "loss.gate_iou_threshold" => self.loss.gate_iou_threshold = parse(k, v)?,
                "loss.gate_ema_decay" => self.loss.gate_ema_decay = parse(k, v)?,
                "loss.dice_eps" => self.loss.dice_eps = parse(k, v)?,
                "loss.combination" => {
                    self.loss.combination = match v.as_str() {
                        "average" => LossCombination::Average,
                        "additive" => LossCombination::Additive,
                        other => {
                            return Err(Error::InvalidConfig(format!(
                                "loss.combination must be average or additive, got {:?}",
                                other
                            )))
                        }
                    }
                }
                "augment.enabled" => self.augment_enabled = parse(k, v)?,
                "augment.flip_prob" => self.augment.flip_prob = parse(k, v)?,
                "augment.rot90_prob" => self.augment.rot90_prob = parse(k, v)?,
                "augment.elastic.grid_spacing" => self.augment.elastic.grid_spacing = parse(k, v)?,
                "augment.elastic.max_displacement" => {
                    self.augment.elastic.max_displacement = parse(k, v)?
                }
                "augment.elastic.prob" => self.augment.elastic.prob = parse(k, v)?,
                "augment.noise_sigma" => self.augment.noise_sigma = parse(k, v)?,
                "augment.noise_prob" => self.augment.noise_prob = parse(k, v)?,
                "patch_extent" => self.patch_extent = parse(k, v)?,
                "spacing_mm" => {
                    let parts: Vec<&str> = v.split(',').collect();
                    if parts.len() != 3 {
                        return Err(Error::InvalidConfig(format!(
                            "spacing_mm needs 3 comma-separated values, got {:?}",
                            v
                        )));
                    }
                    for (slot, p) in self.spacing_mm.iter_mut().zip(parts) {
                        *slot = parse(k, p.trim())?;
                    }
                }
                "intensity_clip_min" => self.intensity_clip[0] = parse(k, v)?,
                "intensity_clip_max" => self.intensity_clip[1] = parse(k, v)?,
                "lr" => self.lr = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "max_steps" => self.max_steps = parse(k, v)?,
                "eval_every" => self.eval_every = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "val_fraction" => self.val_fraction = parse(k, v)?,
                "min_volume_voxels" => self.min_volume_voxels = parse(k, v)?,
                other => return Err(Error::InvalidConfig(format!("unknown config key {:?}", other))),
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("model.stages", self.model.stages.to_string());
        put("model.base_features", self.model.base_features.to_string());
        put("model.groups", self.model.groups.to_string());
        put("model.texture_classes", self.model.texture_classes.to_string());
        put("model.dropout_rate", self.model.dropout_rate.to_string());
        put("model.use_cbam", self.model.use_cbam.to_string());
        put("model.input_channels", self.model.input_channels.to_string());
        put("loss.ce_weight", self.loss.ce_weight.to_string());
        put("loss.gate_iou_threshold", self.loss.gate_iou_threshold.to_string());
        put("loss.gate_ema_decay", self.loss.gate_ema_decay.to_string());
        put("loss.dice_eps", self.loss.dice_eps.to_string());
        put(
            "loss.combination",
            match self.loss.combination {
                LossCombination::Average => "average".to_string(),
                LossCombination::Additive => "additive".to_string(),
            },
        );
        put("augment.enabled", self.augment_enabled.to_string());
        put("augment.flip_prob", self.augment.flip_prob.to_string());
        put("augment.rot90_prob", self.augment.rot90_prob.to_string());
        put("augment.elastic.grid_spacing", self.augment.elastic.grid_spacing.to_string());
        put(
            "augment.elastic.max_displacement",
            self.augment.elastic.max_displacement.to_string(),
        );
        put("augment.elastic.prob", self.augment.elastic.prob.to_string());
        put("augment.noise_sigma", self.augment.noise_sigma.to_string());
        put("augment.noise_prob", self.augment.noise_prob.to_string());
        put("patch_extent", self.patch_extent.to_string());
        put(
            "spacing_mm",
            format!("{},{},{}", self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2]),
        );
        put("intensity_clip_min", self.intensity_clip[0].to_string());
        put("intensity_clip_max", self.intensity_clip[1].to_string());
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("max_steps", self.max_steps.to_string());
        put("eval_every", self.eval_every.to_string());
        put("seed", self.seed.to_string());
        put("val_fraction", self.val_fraction.to_string());
        put("min_volume_voxels", self.min_volume_voxels.to_string());
        kv
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", path.display(), e))))?;
        let mut cfg = RunConfig::default();
        cfg.apply_kv(&parse_kv(&text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub volume_file: String,
    pub mask_file: String,
    pub texture: Option<Texture>,
    pub is_nodule: bool,
    pub patient_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "volume_file,mask_file,texture,is_nodule,patient_id,split";

impl DatasetManifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let texture = match e.texture {
                Some(t) => t.to_string(),
                None => "NONE".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.volume_file,
                e.mask_file,
                texture,
                if e.is_nodule { 1 } else { 0 },
                e.patient_id,
                match e.split {
                    Split::Train => "train",
                    Split::Val => "val",
                }
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<DatasetManifest> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == MANIFEST_HEADER => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected manifest header {:?}, got {:?}",
                    MANIFEST_HEADER, other
                )))
            }
        }
        let mut entries = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Parse(format!(
                    "manifest line {}: expected 6 columns, got {}",
                    ln + 2,
                    cols.len()
                )));
            }
            let texture = match cols[2] {
                "NONE" => None,
                other => Some(other.parse::<Texture>()?),
            };
            let is_nodule = match cols[3] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse(format!(
                        "manifest line {}: bad is_nodule {:?}",
                        ln + 2,
                        other
                    )))
                }
            };
            let split = match cols[5] {
                "train" => Split::Train,
                "val" => Split::Val,
                other => {
                    return Err(Error::Parse(format!(
                        "manifest line {}: bad split {:?}",
                        ln + 2,
                        other
                    )))
                }
            };
            entries.push(ManifestEntry {
                volume_file: cols[0].to_string(),
                mask_file: cols[1].to_string(),
                texture,
                is_nodule,
                patient_id: cols[4].to_string(),
                split,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("manifest.csv");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", path.display(), e))))?;
        Self::from_csv(&text)
    }
}

const WEIGHTS_DIR: &str = "weights";
const MANIFEST_FILE: &str = "manifest.txt";

/// Checkpoint = directory with a key=value manifest plus one NDT1 file per
/// named parameter. The write goes to a temp sibling and is renamed into
/// place, so a crash never leaves a half-written checkpoint behind.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    manifest: &BTreeMap<String, String>,
    params: &Parameters<S>,
) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", parent.display(), e))))?;
    let tmp: PathBuf = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", tmp.display(), e))))?;
    }
    let weights = tmp.join(WEIGHTS_DIR);
    fs::create_dir_all(&weights).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", weights.display(), e))))?;
    fs::write(tmp.join(MANIFEST_FILE), kv_to_string(manifest))
        .map_err(|e| Error::Io(std::io::Error::other(format!("checkpoint manifest: {}", e))))?;
    for (name, tensor) in params {
        write_tensor(&weights.join(format!("{}.ndt1", name)), tensor)?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", dir.display(), e))))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", dir.display(), e))))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<(BTreeMap<String, String>, Parameters<S>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Load(format!("{}: {}", manifest_path.display(), e)))?;
    let manifest = parse_kv(&text)?;
    let weights = dir.join(WEIGHTS_DIR);
    let mut names: Vec<String> = Vec::new();
    let rd = fs::read_dir(&weights).map_err(|e| Error::Load(format!("{}: {}", weights.display(), e)))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::Load(e.to_string()))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(name) = file.strip_suffix(".ndt1") {
            names.push(name.to_string());
        }
    }
    names.sort();
    let mut params = Parameters::new();
    for name in names {
        let t = read_tensor::<S>(&weights.join(format!("{}.ndt1", name)))?;
        params.insert(name, t);
    }
    if params.is_empty() {
        return Err(Error::Load(format!("no parameters under {}", weights.display())));
    }
    Ok((manifest, params))
}

/// Checkpoint manifests store the run config plus bookkeeping keys
/// (prefixed `run.`) side by side; this splits them apart.
pub fn config_from_manifest(manifest: &BTreeMap<String, String>) -> Result<RunConfig> {
    let mut cfg_kv = BTreeMap::new();
    for (k, v) in manifest {
        if !k.starts_with("run.") {
            cfg_kv.insert(k.clone(), v.clone());
        }
    }
    let mut cfg = RunConfig::default();
    cfg.apply_kv(&cfg_kv)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ndt1_roundtrip_f32_and_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Tensor::<f32>::zeros(&[2, 3, 4]);
        crate::tensor::fill_uniform(&mut a, &mut rng, -5.0, 5.0);
        let back = tensor_from_bytes::<f32>(&tensor_to_bytes(&a)).unwrap();
        assert_eq!(a, back);

        let mut b = Tensor::<f64>::zeros(&[7]);
        crate::tensor::fill_uniform(&mut b, &mut rng, -5.0, 5.0);
        let back = tensor_from_bytes::<f64>(&tensor_to_bytes(&b)).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn ndt1_header_layout_is_pinned() {
        let mut t = Tensor::<f32>::zeros(&[1, 2]);
        t.data_mut()[0] = 1.0;
        let bytes = tensor_to_bytes(&t);
        assert_eq!(&bytes[..4], b"NDT1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[22..26].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 22 + 8);
    }

    #[test]
    fn ndt1_rejects_garbage_and_wrong_dtype() {
        assert!(matches!(tensor_from_bytes::<f32>(b"oops"), Err(Error::Load(_))));
        let t = Tensor::<f32>::zeros(&[2]);
        let bytes = tensor_to_bytes(&t);
        assert!(matches!(tensor_from_bytes::<f64>(&bytes), Err(Error::Load(_))));
        assert!(matches!(
            tensor_from_bytes::<f32>(&bytes[..bytes.len() - 1]),
            Err(Error::Load(_))
        ));
    }

    #[test]
    fn kv_parsing_handles_comments_and_whitespace() {
        let kv = parse_kv("# top\n a = 1 \n\nb=two # tail\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two");
        assert_eq!(kv.len(), 2);
        assert!(parse_kv("loose line\n").is_err());
    }

    #[test]
    fn run_config_kv_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.model.base_features = 16;
        cfg.loss.ce_weight = 0.3;
        cfg.augment.noise_sigma = 0.07;
        cfg.spacing_mm = [0.5, 1.0, 1.25];
        cfg.max_steps = 77;
        let kv = cfg.to_kv();
        let mut back = RunConfig::default();
        back.apply_kv(&kv).unwrap();
        assert_eq!(back.to_kv(), kv);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        let mut kv = BTreeMap::new();
        kv.insert("no_such_key".to_string(), "1".to_string());
        assert!(matches!(cfg.apply_kv(&kv), Err(Error::InvalidConfig(_))));

        let mut cfg = RunConfig::default();
        cfg.patch_extent = 33;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn manifest_csv_roundtrip() {
        let manifest = DatasetManifest {
            entries: vec![
                ManifestEntry {
                    volume_file: "p0_c0_vol.ndt1".into(),
                    mask_file: "p0_c0_mask.ndt1".into(),
                    texture: Some(Texture::Solid),
                    is_nodule: true,
                    patient_id: "p0".into(),
                    split: Split::Train,
                },
                ManifestEntry {
                    volume_file: "p1_c0_vol.ndt1".into(),
                    mask_file: "p1_c0_mask.ndt1".into(),
                    texture: None,
                    is_nodule: false,
                    patient_id: "p1".into(),
                    split: Split::Val,
                },
            ],
        };
        let text = manifest.to_csv();
        assert_eq!(DatasetManifest::from_csv(&text).unwrap(), manifest);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let cfg = JointModelConfig { base_features: 4, groups: 2, stages: 2, ..Default::default() };
        let params = crate::nn::init_parameters::<f32>(&cfg, 5, false).unwrap();
        let mut manifest = BTreeMap::new();
        manifest.insert("run.step".to_string(), "12".to_string());
        save_checkpoint(&ckpt, &manifest, &params).unwrap();
        let (m2, p2) = load_checkpoint::<f32>(&ckpt).unwrap();
        assert_eq!(m2["run.step"], "12");
        assert_eq!(params, p2);
        // Overwrite must replace atomically, not merge.
        let mut smaller = params.clone();
        let first = smaller.keys().next().unwrap().clone();
        smaller.remove(&first);
        save_checkpoint(&ckpt, &manifest, &smaller).unwrap();
        let (_, p3) = load_checkpoint::<f32>(&ckpt).unwrap();
        assert_eq!(smaller, p3);
    }
}
