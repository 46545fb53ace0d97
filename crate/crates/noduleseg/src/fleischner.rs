//! Follow-up recommendation pipeline: nodule volumes from masks,
//! non-nodule filtration, per-patient count features, a from-scratch
//! Random Forest, and the synthetic rule used to label desk-scale data.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_COUNT: usize = 6;
pub const FOLLOWUP_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Texture {
    Ggo,
    PartSolid,
    Solid,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Ggo, Texture::PartSolid, Texture::Solid];

    pub fn index(self) -> usize {
        match self {
            Texture::Ggo => 0,
            Texture::PartSolid => 1,
            Texture::Solid => 2,
        }
    }
}

impl fmt::Display for Texture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Texture::Ggo => "GGO",
            Texture::PartSolid => "PARTSOLID",
            Texture::Solid => "SOLID",
        })
    }
}

impl FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GGO" => Ok(Texture::Ggo),
            "PARTSOLID" => Ok(Texture::PartSolid),
            "SOLID" => Ok(Texture::Solid),
            other => Err(Error::Parse(format!("unknown texture {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordSource {
    GroundTruth,
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoduleRecord {
    pub patient_id: String,
    pub nodule_id: String,
    pub volume_mm3: f64,
    /// Defined only for actual nodules.
    pub texture: Option<Texture>,
    pub is_nodule: bool,
    pub source: RecordSource,
}

impl NoduleRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.volume_mm3.is_finite() || self.volume_mm3 < 0.0 {
            return Err(Error::InvalidInput(format!(
                "volume must be finite and nonnegative, got {}",
                self.volume_mm3
            )));
        }
        if self.is_nodule && self.texture.is_none() {
            return Err(Error::InvalidInput(format!(
                "nodule {}/{} has no texture",
                self.patient_id, self.nodule_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VolumeBin {
    Small,
    Medium,
    Large,
}

/// Voxel count times voxel volume.
pub fn mask_volume_mm3(mask: &Tensor<f32>, spacing_mm: [f64; 3]) -> Result<f64> {
    if spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidConfig(format!("spacing must be positive, got {:?}", spacing_mm)));
    }
    let voxels = mask.data().iter().filter(|&&v| v > 0.5).count();
    Ok(voxels as f64 * spacing_mm[0] * spacing_mm[1] * spacing_mm[2])
}

/// Both boundaries belong to Medium.
pub fn volume_bin(v_mm3: f64) -> VolumeBin {
    if v_mm3 < 100.0 {
        VolumeBin::Small
    } else if v_mm3 <= 250.0 {
        VolumeBin::Medium
    } else {
        VolumeBin::Large
    }
}

pub enum FilterMode<'a> {
    /// Drop records whose predicted mask holds fewer voxels than the
    /// threshold ("nearly zero" volume).
    VolumeThreshold { min_volume_voxels: usize, spacing_mm: [f64; 3] },
    /// Drop records a trained 2-class recognizer calls non-nodules
    /// (class 1 = nodule). `None` means no model was supplied.
    Classifier(Option<&'a dyn Fn(&NoduleRecord) -> usize>),
}

pub fn filter_non_nodules(records: &[NoduleRecord], mode: &FilterMode) -> Result<Vec<NoduleRecord>> {
    match mode {
        FilterMode::VolumeThreshold { min_volume_voxels, spacing_mm } => {
            if spacing_mm.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidConfig(format!(
                    "spacing must be positive, got {:?}",
                    spacing_mm
                )));
            }
            let voxel_vol = spacing_mm[0] * spacing_mm[1] * spacing_mm[2];
            Ok(records
                .iter()
                .filter(|r| r.volume_mm3 / voxel_vol >= *min_volume_voxels as f64)
                .cloned()
                .collect())
        }
        FilterMode::Classifier(model) => {
            let judge = model.ok_or_else(|| {
                Error::MissingModel("classifier filtration needs a trained recognizer".into())
            })?;
            Ok(records.iter().filter(|r| judge(r) == 1).cloned().collect())
        }
    }
}

/// [n_small, n_medium, n_large, n_ggo, n_partsolid, n_solid].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PatientFeatures {
    pub counts: [u32; FEATURE_COUNT],
}

impl PatientFeatures {
    pub fn as_f64(&self) -> [f64; FEATURE_COUNT] {
        self.counts.map(|c| c as f64)
    }

    pub fn total_nodules(&self) -> u32 {
        self.counts[0] + self.counts[1] + self.counts[2]
    }
}

/// Per-bin and per-texture counts over the retained nodules.
pub fn encode_patient_features(records: &[NoduleRecord]) -> Result<PatientFeatures> {
    let mut f = PatientFeatures::default();
    for r in records {
        r.validate()?;
        if !r.is_nodule {
            continue;
        }
        match volume_bin(r.volume_mm3) {
            VolumeBin::Small => f.counts[0] += 1,
            VolumeBin::Medium => f.counts[1] += 1,
            VolumeBin::Large => f.counts[2] += 1,
        }
        f.counts[3 + r.texture.expect("validated above").index()] += 1;
    }
    Ok(f)
}

/// Fixed rule table over the feature counts. 0: nothing found,
/// 1: Small nodules only, 2: a Medium nodule or multiple nodules,
/// 3: a Large nodule, or a Medium-or-larger finding with any non-solid
/// texture present. A simplified stand-in, not clinical guidance.
pub fn synthetic_label_from_features(f: &PatientFeatures) -> usize {
    let [_, n_medium, n_large, n_ggo, n_partsolid, _] = f.counts;
    let total = f.total_nodules();
    if total == 0 {
        0
    } else if n_large > 0 || (n_medium > 0 && n_ggo + n_partsolid > 0) {
        3
    } else if n_medium > 0 || total > 1 {
        2
    } else {
        1
    }
}

pub fn synthetic_fleischner_label(records: &[NoduleRecord]) -> Result<usize> {
    Ok(synthetic_label_from_features(&encode_patient_features(records)?))
}

#[derive(Debug, Clone, Copy)]
pub enum FeatureMode {
    /// All six counts.
    Full,
    /// Size bins only (first three counts).
    SizeOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Random candidate features tried at each split.
    pub n_candidates: usize,
    pub feature_mode: FeatureMode,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 2,
            n_candidates: 2,
            feature_mode: FeatureMode::Full,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { histogram: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    fn leaf_histogram(&self, x: &[f64; FEATURE_COUNT]) -> &[u64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
                TreeNode::Leaf { histogram } => return histogram,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub n_classes: usize,
    pub seed: u64,
}

fn gini(hist: &[u64]) -> f64 {
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    1.0 - hist.iter().map(|&c| (c as f64 / nf).powi(2)).sum::<f64>()
}

fn histogram(labels: &[usize], idx: &[usize], k: usize) -> Vec<u64> {
    let mut h = vec![0u64; k];
    for &i in idx {
        h[labels[i]] += 1;
    }
    h
}

struct TreeBuilder<'a> {
    xs: &'a [[f64; FEATURE_COUNT]],
    labels: &'a [usize],
    k: usize,
    cfg: &'a ForestConfig,
    pool: &'a [usize],
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    /// Best Gini split over `n_candidates` feature draws; `None` when no
    /// split separates the node with `min_leaf` samples on both sides.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let mut best: Option<(f64, usize, f64)> = None;
        for _ in 0..self.cfg.n_candidates {
            let feature = self.pool[rng.gen_range(0..self.pool.len())];
            let mut values: Vec<f64> = idx.iter().map(|&i| self.xs[i][feature]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
            values.dedup();
            for pair in values.windows(2) {
                let threshold = (pair[0] + pair[1]) / 2.0;
                let (mut lh, mut rh) = (vec![0u64; self.k], vec![0u64; self.k]);
                for &i in idx {
                    if self.xs[i][feature] <= threshold {
                        lh[self.labels[i]] += 1;
                    } else {
                        rh[self.labels[i]] += 1;
                    }
                }
                let (ln, rn): (u64, u64) = (lh.iter().sum(), rh.iter().sum());
                if (ln as usize) < self.cfg.min_leaf || (rn as usize) < self.cfg.min_leaf {
                    continue;
                }
                let n = (ln + rn) as f64;
                let impurity = ln as f64 / n * gini(&lh) + rn as f64 / n * gini(&rh);
                let better = match best {
                    None => true,
                    Some((bi, _, _)) => impurity < bi - 1e-15,
                };
                if better {
                    best = Some((impurity, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let hist = histogram(self.labels, idx, self.k);
        let pure = hist.iter().filter(|&&c| c > 0).count() <= 1;
        let mut split = None;
        if depth < self.cfg.max_depth && idx.len() >= 2 * self.cfg.min_leaf && !pure {
            split = self.best_split(idx, rng);
        }
        let me = self.nodes.len();
        match split {
            None => {
                self.nodes.push(TreeNode::Leaf { histogram: hist });
                me
            }
            Some((feature, threshold)) => {
                let (li, ri): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| self.xs[i][feature] <= threshold);
                self.nodes.push(TreeNode::Split { feature, threshold, left: 0, right: 0 });
                let left = self.grow(&li, depth + 1, rng);
                let right = self.grow(&ri, depth + 1, rng);
                self.nodes[me] = TreeNode::Split { feature, threshold, left, right };
                me
            }
        }
    }
}

fn tree_rng(seed: u64, tree_index: usize) -> ChaCha8Rng {
    // Distinct deterministic stream per (seed, tree_index).
    ChaCha8Rng::seed_from_u64(seed ^ (tree_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn rf_train(
    features: &[PatientFeatures],
    labels: &[usize],
    cfg: &ForestConfig,
) -> Result<ForestModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut present = vec![false; k];
    for &l in labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateData("training labels contain a single class".into()));
    }
    if cfg.n_trees == 0 || cfg.min_leaf == 0 || cfg.n_candidates == 0 {
        return Err(Error::InvalidConfig("forest sizes must be positive".into()));
    }
    let xs: Vec<[f64; FEATURE_COUNT]> = features.iter().map(|f| f.as_f64()).collect();
    let pool: Vec<usize> = match cfg.feature_mode {
        FeatureMode::Full => (0..FEATURE_COUNT).collect(),
        FeatureMode::SizeOnly => (0..3).collect(),
    };
    let n = xs.len();
    let trees = (0..cfg.n_trees)
        .map(|t| {
            let mut rng = tree_rng(cfg.seed, t);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let mut b = TreeBuilder { xs: &xs, labels, k, cfg, pool: &pool, nodes: Vec::new() };
            b.grow(&idx, 0, &mut rng);
            DecisionTree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel { trees, n_classes: k, seed: cfg.seed })
}

/// Soft vote: mean over trees of the per-tree normalized leaf histogram;
/// ties break to the first index.
pub fn rf_predict(model: &ForestModel, features: &PatientFeatures) -> (usize, Vec<f64>) {
    let x = features.as_f64();
    let mut probs = vec![0.0f64; model.n_classes];
    for tree in &model.trees {
        let hist = tree.leaf_histogram(&x);
        let n: u64 = hist.iter().sum();
        if n == 0 {
            continue;
        }
        for (p, &c) in probs.iter_mut().zip(hist) {
            *p += c as f64 / n as f64;
        }
    }
    for p in probs.iter_mut() {
        *p /= model.trees.len() as f64;
    }
    let label = probs
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
        .map(|(i, _)| i)
        .unwrap();
    (label, probs)
}

/// Text serialization: header lines, then per tree a pre-order node list
/// (`split <feature> <threshold> <left> <right>` / `leaf <counts...>`).
pub fn forest_to_text(model: &ForestModel) -> String {
    let mut out = String::new();
    out.push_str("forest v1\n");
    out.push_str(&format!("classes {}\n", model.n_classes));
    out.push_str(&format!("features {}\n", FEATURE_COUNT));
    out.push_str(&format!("seed {}\n", model.seed));
    out.push_str(&format!("trees {}\n", model.trees.len()));
    for tree in &model.trees {
        out.push_str(&format!("tree {}\n", tree.nodes.len()));
        for node in &tree.nodes {
            match node {
                TreeNode::Split { feature, threshold, left, right } => {
                    out.push_str(&format!("split {} {:?} {} {}\n", feature, threshold, left, right));
                }
                TreeNode::Leaf { histogram } => {
                    out.push_str("leaf");
                    for c in histogram {
                        out.push_str(&format!(" {}", c));
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}

pub fn forest_from_text(text: &str) -> Result<ForestModel> {
    fn expect<'a>(lines: &mut impl Iterator<Item = &'a str>, prefix: &str) -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("truncated forest file".into()))?;
        line.strip_prefix(prefix)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| Error::Parse(format!("expected {:?}, got {:?}", prefix, line)))
    }
    let mut lines = text.lines();
    expect(&mut lines, "forest v1")?;
    let n_classes: usize = expect(&mut lines, "classes ")?.parse().map_err(|e| Error::Parse(format!("classes: {}", e)))?;
    let features: usize = expect(&mut lines, "features ")?.parse().map_err(|e| Error::Parse(format!("features: {}", e)))?;
    if features != FEATURE_COUNT {
        return Err(Error::Parse(format!("expected {} features, got {}", FEATURE_COUNT, features)));
    }
    let seed: u64 = expect(&mut lines, "seed ")?.parse().map_err(|e| Error::Parse(format!("seed: {}", e)))?;
    let n_trees: usize = expect(&mut lines, "trees ")?.parse().map_err(|e| Error::Parse(format!("trees: {}", e)))?;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n_nodes: usize = expect(&mut lines, "tree ")?.parse().map_err(|e| Error::Parse(format!("tree: {}", e)))?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated forest file".into()))?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("split") => {
                    let vals: Vec<&str> = parts.collect();
                    if vals.len() != 4 {
                        return Err(Error::Parse(format!("bad split line {:?}", line)));
                    }
                    nodes.push(TreeNode::Split {
                        feature: vals[0].parse().map_err(|e| Error::Parse(format!("feature: {}", e)))?,
                        threshold: vals[1].parse().map_err(|e| Error::Parse(format!("threshold: {}", e)))?,
                        left: vals[2].parse().map_err(|e| Error::Parse(format!("left: {}", e)))?,
                        right: vals[3].parse().map_err(|e| Error::Parse(format!("right: {}", e)))?,
                    });
                }
                Some("leaf") => {
                    let histogram: Vec<u64> = parts
                        .map(|v| v.parse().map_err(|e| Error::Parse(format!("leaf count: {}", e))))
                        .collect::<Result<_>>()?;
                    if histogram.len() != n_classes {
                        return Err(Error::Parse(format!("leaf with {} classes, expected {}", histogram.len(), n_classes)));
                    }
                    nodes.push(TreeNode::Leaf { histogram });
                }
                _ => return Err(Error::Parse(format!("bad node line {:?}", line))),
            }
        }
        trees.push(DecisionTree { nodes });
    }
    Ok(ForestModel { trees, n_classes, seed })
}

pub const NODULE_CSV_HEADER: &str = "patient_id,nodule_id,volume_mm3,texture,is_nodule";

pub fn records_to_csv(records: &[NoduleRecord]) -> String {
    let mut out = String::from(NODULE_CSV_HEADER);
    out.push('\n');
    for r in records {
        let texture = match r.texture {
            Some(t) => t.to_string(),
            None => "NONE".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.patient_id,
            r.nodule_id,
            r.volume_mm3,
            texture,
            if r.is_nodule { 1 } else { 0 }
        ));
    }
    out
}

pub fn records_from_csv(text: &str, source: RecordSource) -> Result<Vec<NoduleRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == NODULE_CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "expected header {:?}, got {:?}",
                NODULE_CSV_HEADER, other
            )))
        }
    }
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Parse(format!("line {}: expected 5 columns, got {}", ln + 2, cols.len())));
        }
        let texture = match cols[3] {
            "NONE" => None,
            other => Some(other.parse::<Texture>()?),
        };
        let is_nodule = match cols[4].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::Parse(format!("line {}: bad is_nodule {:?}", ln + 2, other))),
        };
        let record = NoduleRecord {
            patient_id: cols[0].to_string(),
            nodule_id: cols[1].to_string(),
            volume_mm3: cols[2]
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: volume: {}", ln + 2, e)))?,
            texture,
            is_nodule,
            source,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}
