//! Training loop (Adam + loss gate + augmentation), prediction, cohort
//! evaluation, and the patient-level follow-up pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::augment_sample;
use crate::error::{Error, Result};
use crate::fleischner::{
    encode_patient_features, filter_non_nodules, mask_volume_mm3, rf_predict, FilterMode,
    ForestModel, NoduleRecord, RecordSource, Texture,
};
use crate::io::{
    read_tensor, save_checkpoint, write_tensor, DatasetManifest, ManifestEntry, RunConfig, Split,
};
use crate::loss::{gate_update, hard_iou, joint_loss_node, GateState};
use crate::metrics::{
    balanced_accuracy, fleiss_cohen_weighted_kappa, hausdorff_distance, jaccard,
    volume_agreement, ConfusionMatrix,
};
use crate::nn::{bind_parameters, init_parameters, joint_forward, Parameters};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};

pub const LOG_HEADER: &str = "step,dice,ce,ema_iou,gate,val_iou,val_acc";

const STEP_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// One loaded case: intensities already clipped and mapped to [0, 1].
#[derive(Debug, Clone)]
pub struct Sample {
    pub case_id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub label: Option<usize>,
    pub patient_id: String,
}

/// Clip to the configured window and map affinely to [0, 1].
pub fn normalize_intensity(image: &Tensor<f32>, clip: [f64; 2]) -> Tensor<f32> {
    let (lo, hi) = (clip[0] as f32, clip[1] as f32);
    let scale = 1.0 / (hi - lo);
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (v.clamp(lo, hi) - lo) * scale;
    }
    out
}

pub fn case_id_of(entry: &ManifestEntry) -> String {
    entry
        .volume_file
        .strip_suffix("_vol.ndt1")
        .unwrap_or(&entry.volume_file)
        .to_string()
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry, cfg: &RunConfig) -> Result<Sample> {
    let image = read_tensor::<f32>(&dir.join(&entry.volume_file))?;
    let mask = read_tensor::<f32>(&dir.join(&entry.mask_file))?;
    let want = [cfg.patch_extent; 3];
    if image.shape() != want || mask.shape() != want {
        return Err(Error::InvalidShape(format!(
            "case {}: volume {:?} / mask {:?}, expected {:?}",
            case_id_of(entry),
            image.shape(),
            mask.shape(),
            want
        )));
    }
    Ok(Sample {
        case_id: case_id_of(entry),
        image: normalize_intensity(&image, cfg.intensity_clip),
        mask,
        label: entry.texture.map(Texture::index),
        patient_id: entry.patient_id.clone(),
    })
}

fn load_split(dir: &Path, manifest: &DatasetManifest, cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_sample(dir, e, cfg))
        .collect()
}

/// Stack rank-3 samples into a [B, 1, E, E, E] batch pair.
fn stack_batch(samples: &[&Sample], extent: usize) -> (Tensor<f32>, Tensor<f32>, Vec<Option<usize>>) {
    let b = samples.len();
    let per = extent * extent * extent;
    let mut images = Tensor::<f32>::zeros(&[b, 1, extent, extent, extent]);
    let mut masks = Tensor::<f32>::zeros(&[b, 1, extent, extent, extent]);
    let mut labels = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        images.data_mut()[i * per..][..per].copy_from_slice(s.image.data());
        masks.data_mut()[i * per..][..per].copy_from_slice(s.mask.data());
        labels.push(s.label);
    }
    (images, masks, labels)
}

/// Per-class sample counts over the labeled training entries.
pub fn texture_counts(samples: &[Sample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for s in samples {
        if let Some(y) = s.label {
            counts[y] += 1;
        }
    }
    counts
}

/// Class weights for the texture loss: inverse frequency when every class
/// is present, unit weights otherwise (degenerate desk-scale sets).
fn texture_weights(samples: &[Sample], classes: usize) -> Vec<f64> {
    let counts = texture_counts(samples, classes);
    crate::loss::inverse_frequency_weights(&counts).unwrap_or_else(|_| vec![1.0; classes])
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValScores {
    pub iou: f64,
    pub acc: f64,
}

/// Mean hard IoU plus texture accuracy over labeled cases.
pub fn validate_model(params: &Parameters<f32>, cfg: &RunConfig, samples: &[Sample]) -> Result<ValScores> {
    if samples.is_empty() {
        return Err(Error::DegenerateData("no validation samples".into()));
    }
    let mut iou_sum = 0.0;
    let mut correct = 0usize;
    let mut labeled = 0usize;
    for s in samples {
        let (mask_probs, class_probs) = forward_case(params, cfg, &s.image)?;
        let mut target = s.mask.clone();
        let shape: Vec<usize> = mask_probs.shape().to_vec();
        target = Tensor::new(&shape, target.into_data())?;
        iou_sum += hard_iou(&mask_probs, &target, 0.5)?;
        if let Some(y) = s.label {
            labeled += 1;
            correct += (argmax(class_probs.data()) == y) as usize;
        }
    }
    Ok(ValScores {
        iou: iou_sum / samples.len() as f64,
        acc: if labeled == 0 { 1.0 } else { correct as f64 / labeled as f64 },
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference pass on one normalized case; returns ([1,1,E..] mask
/// probabilities, [1,K] class probabilities).
pub fn forward_case(params: &Parameters<f32>, cfg: &RunConfig, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let e = cfg.patch_extent;
    let mut g = Graph::new();
    let bindings = bind_parameters(&mut g, params, false);
    let input = Tensor::new(&[1, 1, e, e, e], image.data().to_vec())?;
    let x = g.leaf(input, false);
    let (mask, class) = joint_forward(&mut g, &bindings, &cfg.model, x, false, 0)?;
    Ok((g.value(mask).clone(), g.value(class).clone()))
}

pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub gate: GateState,
    pub log: String,
    pub best_val: ValScores,
    pub steps_run: usize,
}

pub fn train(data_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with_observer(data_dir, out_dir, cfg, |_, _, _| {})
}

/// Full training loop. `observe(step, gate, params)` runs after every
/// optimizer step, in step order; used by tests to audit the gate
/// contract without re-running.
pub fn train_with_observer(
    data_dir: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
    mut observe: impl FnMut(usize, &GateState, &Parameters<f32>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data_dir)?;
    let train_set = load_split(data_dir, &manifest, cfg, Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::DegenerateData("manifest has no training entries".into()));
    }
    let val_set = load_split(data_dir, &manifest, cfg, Split::Val)?;
    // With no held-out entries (overfit runs) validation reuses the
    // training set.
    let eval_set: &[Sample] = if val_set.is_empty() { &train_set } else { &val_set };
    let classes = cfg.model.texture_classes;
    let weights: Vec<f32> = texture_weights(&train_set, classes).iter().map(|&w| w as f32).collect();

    let mut params = init_parameters::<f32>(&cfg.model, cfg.seed, false)?;
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut gate = GateState::default();
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    let mut best = ValScores { iou: f64::NEG_INFINITY, acc: 0.0 };

    for step in 1..=cfg.max_steps {
        let batch_seed = cfg.seed ^ (step as u64).wrapping_mul(STEP_SEED_STRIDE);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let mut picked: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);
        let mut batch_storage: Vec<Sample> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &train_set[rng.gen_range(0..train_set.len())];
            if cfg.augment_enabled {
                let aug_seed: u64 = rng.gen();
                let (image, mask) = augment_sample(&s.image, &s.mask, &cfg.augment, aug_seed)?;
                batch_storage.push(Sample { image, mask, ..s.clone() });
            } else {
                batch_storage.push(s.clone());
            }
        }
        picked.extend(batch_storage.iter());
        let (images, masks, labels) = stack_batch(&picked, cfg.patch_extent);

        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, true);
        let x = g.leaf(images, false);
        let (mask_probs, class_probs) = joint_forward(&mut g, &bindings, &cfg.model, x, true, batch_seed)?;
        let dice = g.soft_dice_loss(mask_probs, &masks, cfg.loss.dice_eps as f32)?;
        // Batches of pure non-nodules carry no texture signal; the CE
        // term degenerates to a constant zero.
        let ce = if labels.iter().any(|l| l.is_some()) {
            g.weighted_cross_entropy(class_probs, &labels, &weights)?
        } else {
            g.affine_combine(&[])?
        };
        let batch_iou = hard_iou(g.value(mask_probs), &masks, 0.5)?;
        gate = gate_update(gate, batch_iou, &cfg.loss);
        let loss = joint_loss_node(&mut g, dice, ce, &gate, &cfg.loss)?;
        let (dice_val, ce_val) = (g.value(dice).item() as f64, g.value(ce).item() as f64);
        if !g.value(loss).item().is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {} (batch seed {}): dice {} ce {}",
                step, batch_seed, dice_val, ce_val
            )));
        }
        g.backward(loss)?;
        let grads: BTreeMap<String, Tensor<f32>> =
            bindings.iter().map(|(name, &v)| (name.clone(), g.grad(v))).collect();
        adam.step(&mut params, &grads)?;
        observe(step, &gate, &params);

        let eval_now = step % cfg.eval_every == 0 || step == cfg.max_steps;
        let mut val_cols = String::from(",");
        if eval_now {
            let scores = validate_model(&params, cfg, eval_set)?;
            val_cols = format!("{},{}", scores.iou, scores.acc);
            if scores.iou > best.iou {
                best = scores;
                save_checkpoint(&out_dir.join("best"), &run_manifest(cfg, step, &gate, &best), &params)?;
            }
        }
        log.push_str(&format!(
            "{},{},{},{},{},{}\n",
            step,
            dice_val,
            ce_val,
            gate.ema_iou,
            gate.latched as u8,
            val_cols
        ));
    }

    save_checkpoint(&out_dir.join("final"), &run_manifest(cfg, cfg.max_steps, &gate, &best), &params)?;
    fs::write(out_dir.join("train_log.csv"), &log)
        .map_err(|e| Error::Io(std::io::Error::other(format!("train log: {}", e))))?;
    Ok(TrainOutcome { params, gate, log, best_val: best, steps_run: cfg.max_steps })
}

fn run_manifest(cfg: &RunConfig, step: usize, gate: &GateState, best: &ValScores) -> BTreeMap<String, String> {
    let mut kv = cfg.to_kv();
    kv.insert("run.step".into(), step.to_string());
    kv.insert("run.ema_iou".into(), gate.ema_iou.to_string());
    kv.insert("run.gate_latched".into(), (gate.latched as u8).to_string());
    kv.insert("run.best_val_iou".into(), best.iou.to_string());
    kv.insert("run.best_val_acc".into(), best.acc.to_string());
    kv
}

pub struct Prediction {
    pub case_id: String,
    pub patient_id: String,
    pub mask: Tensor<f32>,
    pub texture: Texture,
    pub class_probs: Vec<f64>,
    pub volume_mm3: f64,
    pub volume_voxels: usize,
}

/// Segment one normalized case: threshold at 0.5 and take the texture
/// argmax.
pub fn predict_case(params: &Parameters<f32>, cfg: &RunConfig, sample: &Sample) -> Result<Prediction> {
    let (mask_probs, class_probs) = forward_case(params, cfg, &sample.image)?;
    let e = cfg.patch_extent;
    let mut mask = Tensor::<f32>::zeros(&[e, e, e]);
    let mut voxels = 0usize;
    for (dst, &p) in mask.data_mut().iter_mut().zip(mask_probs.data()) {
        if p > 0.5 {
            *dst = 1.0;
            voxels += 1;
        }
    }
    let volume_mm3 = mask_volume_mm3(&mask, cfg.spacing_mm)?;
    Ok(Prediction {
        case_id: sample.case_id.clone(),
        patient_id: sample.patient_id.clone(),
        mask,
        texture: Texture::ALL[argmax(class_probs.data())],
        class_probs: class_probs.data().iter().map(|&v| v as f64).collect(),
        volume_mm3,
        volume_voxels: voxels,
    })
}

fn prediction_record(p: &Prediction, cfg: &RunConfig) -> NoduleRecord {
    let is_nodule = p.volume_voxels >= cfg.min_volume_voxels;
    NoduleRecord {
        patient_id: p.patient_id.clone(),
        nodule_id: p.case_id.clone(),
        volume_mm3: p.volume_mm3,
        texture: if is_nodule { Some(p.texture) } else { None },
        is_nodule,
        source: RecordSource::Predicted,
    }
}

/// Predict every case of `split`, writing `<case>_pred.ndt1` masks and a
/// predicted-record CSV under `out_dir`.
pub fn predict_dataset(
    params: &Parameters<f32>,
    cfg: &RunConfig,
    data_dir: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<Vec<NoduleRecord>> {
    let manifest = DatasetManifest::load(data_dir)?;
    let samples = load_split(data_dir, &manifest, cfg, split)?;
    if samples.is_empty() {
        return Err(Error::DegenerateData("no cases in the requested split".into()));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", out_dir.display(), e))))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let p = predict_case(params, cfg, s)?;
        write_tensor(&out_dir.join(format!("{}_pred.ndt1", p.case_id)), &p.mask)?;
        records.push(prediction_record(&p, cfg));
    }
    fs::write(out_dir.join("predicted_records.csv"), crate::fleischner::records_to_csv(&records))
        .map_err(|e| Error::Io(std::io::Error::other(format!("records: {}", e))))?;
    Ok(records)
}

pub struct EvalReport {
    pub csv: String,
    pub mean_iou: f64,
    pub kappa: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

pub const EVAL_HEADER: &str =
    "case_id,jaccard,j_star,mad_mm,hd_mm,pearson,c_star,bias_mm3,std_mm3,kappa,balanced_accuracy";

/// Per-case segmentation agreement plus one cohort summary row. Per-case
/// rows fill the first columns; the cohort row fills the rest.
pub fn evaluate_dataset(
    params: &Parameters<f32>,
    cfg: &RunConfig,
    data_dir: &Path,
    split: Split,
) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(data_dir)?;
    let samples = load_split(data_dir, &manifest, cfg, split)?;
    if samples.is_empty() {
        return Err(Error::DegenerateData("no cases in the requested split".into()));
    }
    let mut csv = String::from(EVAL_HEADER);
    csv.push('\n');
    let mut iou_sum = 0.0;
    let mut v_pred = Vec::new();
    let mut v_gt = Vec::new();
    let mut cm = ConfusionMatrix::new(cfg.model.texture_classes);
    let mut any_labeled = false;
    for s in &samples {
        let p = predict_case(params, cfg, s)?;
        let j = jaccard(&p.mask, &s.mask)?;
        iou_sum += j;
        v_pred.push(p.volume_mm3);
        v_gt.push(mask_volume_mm3(&s.mask, cfg.spacing_mm)?);
        // Surface distances are undefined against an empty mask; those
        // cells stay blank.
        let (mad, hd) = match (
            crate::metrics::mean_avg_surface_distance(&p.mask, &s.mask, cfg.spacing_mm),
            hausdorff_distance(&p.mask, &s.mask, cfg.spacing_mm),
        ) {
            (Ok(m), Ok(h)) => (m.to_string(), h.to_string()),
            _ => (String::new(), String::new()),
        };
        if let Some(y) = s.label {
            any_labeled = true;
            cm.record(y, p.texture.index());
        }
        csv.push_str(&format!("{},{},{},{},{},,,,,,\n", s.case_id, j, 1.0 - j, mad, hd));
    }
    let va = if samples.len() >= 2 { Some(volume_agreement(&v_pred, &v_gt)?) } else { None };
    let kappa = if any_labeled { fleiss_cohen_weighted_kappa(&cm).ok() } else { None };
    let balacc = if any_labeled { balanced_accuracy(&cm).ok() } else { None };
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    csv.push_str(&format!(
        "cohort,,,,,{},{},{},{},{},{}\n",
        opt(va.as_ref().and_then(|v| v.pearson)),
        opt(va.as_ref().and_then(|v| v.pearson.map(|p| 1.0 - p))),
        opt(va.as_ref().map(|v| v.bias_mm3)),
        opt(va.as_ref().map(|v| v.std_mm3)),
        opt(kappa),
        opt(balacc),
    ));
    Ok(EvalReport { csv, mean_iou: iou_sum / samples.len() as f64, kappa, balanced_accuracy: balacc })
}

/// Per-patient follow-up classes from predicted nodule records: filter
/// non-nodules, encode features, run the forest.
pub fn fleischner_pipeline(
    records: &[NoduleRecord],
    filter: &FilterMode,
    forest: &ForestModel,
) -> Result<Vec<(String, usize, Vec<f64>)>> {
    let kept = filter_non_nodules(records, filter)?;
    let mut by_patient: BTreeMap<&str, Vec<NoduleRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(r.patient_id.as_str()).or_default();
    }
    for r in &kept {
        by_patient.get_mut(r.patient_id.as_str()).expect("kept is a subset").push(r.clone());
    }
    let mut out = Vec::with_capacity(by_patient.len());
    for (patient, group) in by_patient {
        let features = encode_patient_features(&group)?;
        let (label, probs) = rf_predict(forest, &features);
        out.push((patient.to_string(), label, probs));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom_dataset, PhantomConfig};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.stages = 2;
        cfg.model.base_features = 4;
        cfg.model.groups = 2;
        cfg.patch_extent = 8;
        cfg.max_steps = 4;
        cfg.eval_every = 2;
        cfg.batch_size = 2;
        cfg
    }

    fn tiny_phantoms(dir: &Path, seed: u64) {
        let pcfg = PhantomConfig {
            patch_extent: 8,
            radius_range: (1.2, 1.8),
            non_nodule_fraction: 0.2,
            ..Default::default()
        };
        generate_phantom_dataset(dir, 6, &pcfg, seed).unwrap();
    }

    #[test]
    fn normalize_is_affine_and_clipped() {
        let t = Tensor::new(&[4], vec![-2000.0, -1000.0, -300.0, 400.0]).unwrap();
        let n = normalize_intensity(&t, [-1000.0, 400.0]);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 0.0);
        assert!((n.data()[2] - 0.5).abs() < 1e-6);
        assert_eq!(n.data()[3], 1.0);
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_phantoms(&data, 3);
        let cfg = tiny_cfg();
        let a = train(&data, &dir.path().join("run_a"), &cfg).unwrap();
        let b = train(&data, &dir.path().join("run_b"), &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert!(a.log.starts_with(LOG_HEADER));
        // non-eval steps leave the val columns empty
        let line2 = a.log.lines().nth(1).unwrap();
        assert!(line2.ends_with(",,"), "{}", line2);
        let best = crate::io::load_checkpoint::<f32>(&dir.path().join("run_a/best")).unwrap();
        assert!(best.0.contains_key("run.step"));
    }

    #[test]
    fn classifier_params_frozen_while_gate_closed() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_phantoms(&data, 4);
        let mut cfg = tiny_cfg();
        // an untrainable IoU threshold keeps the gate closed for the
        // whole run
        cfg.loss.gate_iou_threshold = 0.999;
        let mut snapshots: Vec<Vec<u8>> = Vec::new();
        let out = train_with_observer(&data, &dir.path().join("run"), &cfg, |_, gate, params| {
            assert!(!gate.latched);
            let mut bytes = Vec::new();
            for (name, t) in params {
                if name.starts_with("cls.") {
                    bytes.extend(crate::io::tensor_to_bytes(t));
                }
            }
            snapshots.push(bytes);
        })
        .unwrap();
        assert!(!out.gate.latched);
        let init = init_parameters::<f32>(&cfg.model, cfg.seed, false).unwrap();
        let mut init_bytes = Vec::new();
        for (name, t) in &init {
            if name.starts_with("cls.") {
                init_bytes.extend(crate::io::tensor_to_bytes(t));
            }
        }
        for snap in &snapshots {
            assert_eq!(snap, &init_bytes);
        }
        // encoder weights did move
        assert_ne!(out.params["stem.weight"], init["stem.weight"]);
    }

    #[test]
    fn predict_writes_binary_masks_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_phantoms(&data, 5);
        let cfg = tiny_cfg();
        let out = train(&data, &dir.path().join("run"), &cfg).unwrap();
        let pred_dir = dir.path().join("pred");
        let records = predict_dataset(&out.params, &cfg, &data, Split::Val, &pred_dir).unwrap();
        assert!(!records.is_empty());
        for r in &records {
            assert_eq!(r.is_nodule, r.texture.is_some());
        }
        let mask = read_tensor::<f32>(&pred_dir.join(format!("{}_pred.ndt1", records[0].nodule_id))).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let text = fs::read_to_string(pred_dir.join("predicted_records.csv")).unwrap();
        let parsed = crate::fleischner::records_from_csv(&text, RecordSource::Predicted).unwrap();
        assert_eq!(parsed.len(), records.len());
    }

    #[test]
    fn eval_report_has_per_case_and_cohort_rows() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_phantoms(&data, 6);
        let cfg = tiny_cfg();
        let out = train(&data, &dir.path().join("run"), &cfg).unwrap();
        let report = evaluate_dataset(&out.params, &cfg, &data, Split::Val).unwrap();
        let lines: Vec<&str> = report.csv.lines().collect();
        assert_eq!(lines[0], EVAL_HEADER);
        assert!(lines.last().unwrap().starts_with("cohort,"));
        assert!(lines.len() >= 3);
        assert!((0.0..=1.0).contains(&report.mean_iou));
    }

    #[test]
    fn pipeline_maps_empty_patients_to_class_zero() {
        use crate::fleischner::{rf_train, synthetic_label_from_features, FeatureMode, ForestConfig, PatientFeatures};
        // forest trained on the synthetic rule over random feature vectors
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..300 {
            let mut counts = [0u32; 6];
            for c in counts.iter_mut() {
                *c = rng.gen_range(0..3);
            }
            let f = PatientFeatures { counts };
            ys.push(synthetic_label_from_features(&f));
            xs.push(f);
        }
        let forest = rf_train(&xs, &ys, &ForestConfig { feature_mode: FeatureMode::Full, seed: 1, ..Default::default() }).unwrap();
        let records = vec![NoduleRecord {
            patient_id: "p0".into(),
            nodule_id: "c0".into(),
            volume_mm3: 2.0,
            texture: None,
            is_nodule: false,
            source: RecordSource::Predicted,
        }];
        let filter = FilterMode::VolumeThreshold { min_volume_voxels: 8, spacing_mm: [1.0; 3] };
        let out = fleischner_pipeline(&records, &filter, &forest).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, 0);
    }
}
