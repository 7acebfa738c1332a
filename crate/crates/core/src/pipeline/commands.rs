use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RunConfig, RunLayout, Stage};
use crate::error::{Error, Result};
use crate::imaging::{nifti, LabelVolume, ORGAN};
use crate::inference::cascade::{combine_stages, mask_to_channel, predict_organ, stack_channels, two_stage_segment};
use crate::inference::{argmax_labels, containment_violations, sliding_window_predict, Stage2Input};
use crate::metrics::evaluate_case;
use crate::pocketnet::{load_checkpoint_as, ArchSpec, Network};
use crate::preprocess::{
    cache::cache_path, derive_patch_size, load_cached, median_dims, preprocess_case, preprocess_to_cache,
    read_manifest, restore_labels, CachedCase, DatasetManifest, SourceGrid,
};
use crate::report::{boxplot_svg, read_metrics_table, summarize_rows, summary_table, write_metrics_table, DatasetSummary, MetricsRow};
use crate::training::{arch_for_training, make_folds, train, FoldSplit, TrainHistory, TrainSetup, TrainingCase};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// SplitMix64 over the parts, so nearby seeds give unrelated streams.
fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Median grid of the preprocessed cases and the patch size derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub cases: usize,
    pub target_spacing: [f64; 3],
    pub median_dims: [usize; 3],
    pub max_patch: [usize; 3],
    pub derived_patch: [usize; 3],
    /// Patch the run config trains and infers with.
    pub configured_patch: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct PreprocessOutcome {
    pub report: Option<PatchReport>,
    pub processed: Vec<String>,
    pub cache_hits: usize,
    /// `(case_id, error)` for each case that failed.
    pub failures: Vec<(String, String)>,
}

/// Preprocesses every manifest case into the cache and writes the patch
/// report. Per-case failures are collected rather than aborting the rest.
pub fn cmd_preprocess(cfg: &RunConfig, layout: &RunLayout) -> Result<PreprocessOutcome> {
    cfg.validate()?;
    let manifest = read_manifest(&cfg.paths.manifest)?;
    let cache = layout.cache_dir();
    let mut dims = Vec::new();
    let mut out = PreprocessOutcome {
        report: None,
        processed: Vec::new(),
        cache_hits: 0,
        failures: Vec::new(),
    };
    for case in &manifest.cases {
        match preprocess_to_cache(case, &cfg.preprocess, &cache) {
            Ok((c, hit)) => {
                log::info!("{}: {:?}{}", c.case_id, c.image.dims(), if hit { " (cached)" } else { "" });
                dims.push(c.image.dims());
                out.processed.push(c.case_id);
                out.cache_hits += usize::from(hit);
            }
            Err(e) => {
                log::error!("{}: {e}", case.case_id);
                out.failures.push((case.case_id.clone(), e.to_string()));
            }
        }
    }
    if !dims.is_empty() {
        let median = median_dims(&dims)?;
        let report = PatchReport {
            cases: dims.len(),
            target_spacing: cfg.preprocess.target_spacing,
            median_dims: median,
            max_patch: cfg.preprocess.max_patch,
            derived_patch: derive_patch_size(median, cfg.preprocess.max_patch),
            configured_patch: cfg.window.patch_size,
        };
        write_json(&layout.patch_report(), &report)?;
        out.report = Some(report);
    }
    Ok(out)
}

/// Loads preprocessed cases from the cache, in the given order.
pub fn load_cases(layout: &RunLayout, ids: &[String]) -> Result<Vec<CachedCase>> {
    let missing: Vec<&String> = ids
        .iter()
        .filter(|id| !cache_path(&layout.cache_dir(), id).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "cases not preprocessed (run preprocess first): {missing:?}"
        )));
    }
    ids.iter().map(|id| load_cached(cache_path(&layout.cache_dir(), id))).collect()
}

fn labelled(case: &CachedCase) -> Result<&LabelVolume> {
    case.label
        .as_ref()
        .ok_or_else(|| Error::Config(format!("case {} has no label", case.case_id)))
}

/// Network inputs and targets for one stage. Stage 1 learns organ (label ≥ 1)
/// against background from the image; stage 2 learns all three labels, with
/// the case's organ mask as a second channel when `input` asks for it.
pub fn stage_training_cases(
    stage: Stage,
    cases: &[CachedCase],
    organ_masks: &BTreeMap<String, Array3<bool>>,
    input: Stage2Input,
) -> Result<Vec<TrainingCase>> {
    cases
        .iter()
        .map(|c| {
            let label = labelled(c)?;
            let (image, label) = match stage {
                Stage::Organ => (
                    c.image.data.clone().insert_axis(Axis(0)),
                    label.data.mapv(|l| u8::from(l >= ORGAN)),
                ),
                Stage::Tumor => {
                    let image = match input {
                        Stage2Input::Image => c.image.data.clone().insert_axis(Axis(0)),
                        Stage2Input::ImageAndOrgan => {
                            let mask = organ_masks.get(&c.case_id).ok_or_else(|| {
                                Error::Config(format!("no stage-1 organ mask for case {}", c.case_id))
                            })?;
                            stack_channels(&[&c.image.data, &mask_to_channel(mask)])
                        }
                    };
                    (image, label.data.clone())
                }
            };
            Ok(TrainingCase {
                case_id: c.case_id.clone(),
                image,
                label,
            })
        })
        .collect()
}

fn ground_truth(manifest: &DatasetManifest, case_id: &str) -> Result<LabelVolume> {
    let path = manifest
        .get(case_id)
        .and_then(|c| c.label_path.as_ref())
        .ok_or_else(|| Error::Config(format!("case {case_id} has no label in the manifest")))?;
    nifti::read_labels(path)
}

fn on_grid(data: Array3<u8>, like: &CachedCase) -> LabelVolume {
    LabelVolume {
        data,
        geometry: like.image.geometry,
    }
}

/// Stage-1 held-out masks (component-filtered and raw) on the preprocessed grid.
fn read_stage_one(layout: &RunLayout, id: &str) -> Result<(Array3<bool>, Array3<bool>)> {
    let mask = nifti::read_labels(layout.organ_heldout(id))?.data.mapv(|l| l == ORGAN);
    let raw = nifti::read_labels(layout.raw_organ_heldout(id))?.data.mapv(|l| l == ORGAN);
    Ok((mask, raw))
}

/// Per case: (post-processed organ mask, raw stage-1 organ call).
type StageOneMasks = BTreeMap<String, (Array3<bool>, Array3<bool>)>;

fn stage_one_masks(layout: &RunLayout, folds: &[FoldSplit]) -> Result<StageOneMasks> {
    let recorded: Option<Vec<FoldSplit>> = std::fs::read_to_string(layout.folds_file(Stage::Organ))
        .ok()
        .map(|t| serde_json::from_str(&t))
        .transpose()?;
    let mut missing = BTreeSet::new();
    for f in folds {
        let same_split = recorded
            .as_ref()
            .and_then(|r| r.get(f.fold_index))
            .is_some_and(|r| r.val_ids == f.val_ids);
        let files = f
            .val_ids
            .iter()
            .all(|id| layout.organ_heldout(id).is_file() && layout.raw_organ_heldout(id).is_file());
        if !(same_split && files) {
            missing.insert(f.fold_index);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingStageOne {
            folds: missing.into_iter().collect(),
        });
    }
    folds
        .iter()
        .flat_map(|f| &f.val_ids)
        .map(|id| Ok((id.clone(), read_stage_one(layout, id)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub val_ids: Vec<String>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_epoch: Option<usize>,
    pub mean_dsc_organ: f64,
    pub mean_dsc_tumor: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CrossvalOutcome {
    pub stage: Stage,
    pub folds: Vec<FoldOutcome>,
    /// Held-out rows in fold order.
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
}

impl CrossvalOutcome {
    pub fn mean_dsc_organ(&self) -> f64 {
        mean(self.rows.iter().filter_map(|r| r.dsc_organ))
    }

    pub fn mean_dsc_tumor(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.dsc_tumor).collect();
        (!v.is_empty()).then(|| mean(v))
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn dataset_name(cfg: &RunConfig, layout: &RunLayout) -> String {
    match &layout.tag {
        Some(t) => format!("{}/{t}", cfg.dataset),
        None => cfg.dataset.clone(),
    }
}

fn snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)
}

fn train_stage(
    cfg: &RunConfig,
    stage: Stage,
    fold: u64,
    cases: &[TrainingCase],
    validation: &[TrainingCase],
    run_dir: &Path,
) -> Result<(Network<f32>, TrainHistory)> {
    let mut spec: ArchSpec = arch_for_training(cfg.arch(stage), &cfg.train);
    spec.seed = mix_seed(&[cfg.arch(stage).seed, cfg.train.seed, u64::from(stage.number()), fold]);
    let mut setup = TrainSetup::new(cfg.window.patch_size);
    setup.validation = validation;
    setup.window = cfg.window.clone();
    setup.run_dir = Some(run_dir);
    setup.checkpoint_info = serde_json::json!({
        "dataset": cfg.dataset,
        "stage": stage.number(),
        "fold": fold,
        "preset": cfg.train.preset,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(mix_seed(&[u64::from(stage.number()), fold]));
    train(Network::build(&spec)?, cases, &cfg.train, &setup, &mut rng)
}

/// K-fold training of one stage with held-out prediction and evaluation.
///
/// Stage 1 writes each held-out organ mask for stage 2 and an organ-only
/// metrics table. Stage 2 needs those masks for every fold of the same split
/// (else [`Error::MissingStageOne`]); it writes final labels and organ masks
/// on the input grid, re-reads them and fails on any containment violation.
pub fn cmd_crossval(cfg: &RunConfig, layout: &RunLayout, stage: Stage) -> Result<CrossvalOutcome> {
    cfg.validate()?;
    let manifest = read_manifest(&cfg.paths.manifest)?;
    let ids = manifest.ids();
    let folds = make_folds(&ids, cfg.train.folds, cfg.train.seed)?;
    let stage_one = match stage {
        Stage::Organ => BTreeMap::new(),
        Stage::Tumor => stage_one_masks(layout, &folds)?,
    };
    let cached = load_cases(layout, &ids)?;
    let by_id: BTreeMap<&str, &CachedCase> = cached.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let masks: BTreeMap<String, Array3<bool>> = stage_one.iter().map(|(k, v)| (k.clone(), v.0.clone())).collect();
    let all = stage_training_cases(stage, &cached, &masks, cfg.stage2_input)?;
    let by_index: BTreeMap<&str, &TrainingCase> = all.iter().map(|c| (c.case_id.as_str(), c)).collect();

    let stage_dir = layout.stage_dir(stage);
    snapshot(cfg, &stage_dir)?;
    write_json(&layout.folds_file(stage), &folds)?;
    let dataset = dataset_name(cfg, layout);
    let cascade = cfg.cascade();
    let mut rows = Vec::with_capacity(ids.len());
    let mut outcomes = Vec::with_capacity(folds.len());
    for f in &folds {
        let pick = |ids: &[String]| -> Vec<TrainingCase> { ids.iter().map(|id| by_index[id.as_str()].clone()).collect() };
        let (train_cases, val_cases) = (pick(&f.train_ids), pick(&f.val_ids));
        log::info!(
            "stage {} fold {}: {} train / {} held out",
            stage.number(),
            f.fold_index,
            train_cases.len(),
            val_cases.len()
        );
        let run_dir = layout.fold_dir(stage, f.fold_index);
        let (net, history) = train_stage(cfg, stage, f.fold_index as u64, &train_cases, &val_cases, &run_dir)?;

        let first_row = rows.len();
        for (id, input) in f.val_ids.iter().zip(&val_cases) {
            let case = by_id[id.as_str()];
            let gt = ground_truth(&manifest, id)?;
            match stage {
                Stage::Organ => {
                    let (raw, mask, _) = predict_organ(&case.image, &net, &cascade)?;
                    nifti::write_labels(layout.organ_heldout(id), &on_grid(mask.mapv(u8::from), case))?;
                    nifti::write_labels(layout.raw_organ_heldout(id), &on_grid(raw.mapv(u8::from), case))?;
                    let restored = restore_labels(&on_grid(mask.mapv(u8::from), case), &case.source)?;
                    nifti::write_labels(layout.prediction(stage, id), &restored)?;
                    let m = evaluate_case(id, &restored, &gt)?;
                    rows.push(MetricsRow::organ_only(&dataset, id, m.dsc_organ, m.haus95_organ));
                }
                Stage::Tumor => {
                    let (mask, raw) = &stage_one[id];
                    let probs = sliding_window_predict(&net, &input.image, &cascade.window)?;
                    let labels = combine_stages(raw, mask, &argmax_labels(&probs), cascade.connectivity);
                    let restored = restore_labels(&on_grid(labels, case), &case.source)?;
                    let restored_mask = restore_labels(&on_grid(mask.mapv(u8::from), case), &case.source)?;
                    nifti::write_labels(layout.prediction(stage, id), &restored)?;
                    nifti::write_labels(layout.prediction_mask(id), &restored_mask)?;
                    rows.push(MetricsRow::from_case(&dataset, &evaluate_case(id, &restored, &gt)?));
                }
            }
        }
        let fold_rows = &rows[first_row..];
        let outcome = FoldOutcome {
            fold: f.fold_index,
            val_ids: f.val_ids.clone(),
            final_checkpoint: history.final_checkpoint.clone(),
            best_epoch: history.best_epoch,
            mean_dsc_organ: mean(fold_rows.iter().filter_map(|r| r.dsc_organ)),
            mean_dsc_tumor: (stage == Stage::Tumor).then(|| mean(fold_rows.iter().filter_map(|r| r.dsc_tumor))),
        };
        log::info!(
            "stage {} fold {}: held-out organ DSC {:.4}{}",
            stage.number(),
            f.fold_index,
            outcome.mean_dsc_organ,
            outcome.mean_dsc_tumor.map(|t| format!(", tumor DSC {t:.4}")).unwrap_or_default()
        );
        outcomes.push(outcome);
    }
    write_json(&stage_dir.join("fold_summary.json"), &outcomes)?;
    let metrics_path = layout.metrics(stage);
    write_metrics_table(&metrics_path, &rows)?;
    if stage == Stage::Tumor {
        let dir = layout.stage_dir(stage).join("predictions");
        audit_containment(&dir, &ids)?;
    }
    Ok(CrossvalOutcome {
        stage,
        folds: outcomes,
        rows,
        metrics_path,
    })
}

/// Re-reads `<id>.nii.gz` and `<id>.organ.nii.gz` from `dir` for each case
/// and fails with [`Error::Containment`] if any tumor voxel lies outside the mask.
pub fn audit_containment(dir: &Path, ids: &[String]) -> Result<()> {
    let mut total = 0;
    let mut bad = Vec::new();
    for id in ids {
        let labels = nifti::read_labels(dir.join(format!("{id}.nii.gz")))?;
        let mask = nifti::read_labels(dir.join(format!("{id}.organ.nii.gz")))?;
        if labels.dims() != mask.dims() {
            return Err(Error::shape(format!("{id} mask {:?}", mask.dims()), format!("{:?}", labels.dims())));
        }
        let n = containment_violations(&labels.data, &mask.data);
        if n > 0 {
            total += n;
            bad.push(id.clone());
        }
    }
    if total > 0 {
        return Err(Error::Containment {
            violations: total,
            cases: bad,
        });
    }
    Ok(())
}

/// Trains one stage on every case (no held-out fold) into `full/`.
/// Stage 2 takes its organ-mask channel from the stage-1 cross-validation.
pub fn cmd_train(cfg: &RunConfig, layout: &RunLayout, stage: Stage) -> Result<TrainHistory> {
    cfg.validate()?;
    let manifest = read_manifest(&cfg.paths.manifest)?;
    let ids = manifest.ids();
    let cached = load_cases(layout, &ids)?;
    let masks = if stage == Stage::Tumor && cfg.stage2_input == Stage2Input::ImageAndOrgan {
        let folds = make_folds(&ids, cfg.train.folds, cfg.train.seed)?;
        stage_one_masks(layout, &folds)?
            .into_iter()
            .map(|(k, v)| (k, v.0))
            .collect()
    } else {
        BTreeMap::new()
    };
    let cases = stage_training_cases(stage, &cached, &masks, cfg.stage2_input)?;
    let dir = layout.full_dir(stage);
    snapshot(cfg, &dir)?;
    let full_fold = cfg.train.folds as u64;
    Ok(train_stage(cfg, stage, full_fold, &cases, &[], &dir)?.1)
}

/// `image.nii.gz` → `image`.
fn case_id_of(path: &Path) -> Result<String> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad input path {}", path.display())))?;
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .ok_or_else(|| Error::Config(format!("{}: expected .nii or .nii.gz", path.display())))?;
    Ok(stem.to_string())
}

/// Two-stage segmentation of raw NIfTI images. Writes `<id>.nii.gz` labels
/// and `<id>.organ.nii.gz` organ masks on each input's own grid.
pub fn cmd_infer(
    cfg: &RunConfig,
    organ_checkpoint: &Path,
    tumor_checkpoint: &Path,
    inputs: &[PathBuf],
    out_dir: &Path,
) -> Result<Vec<(String, PathBuf)>> {
    cfg.validate_values()?;
    if inputs.is_empty() {
        return Err(Error::Empty("no input images".into()));
    }
    let ids = inputs.iter().map(|p| case_id_of(p)).collect::<Result<Vec<_>>>()?;
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Config(format!("duplicate case ids among inputs: {ids:?}")));
    }
    let organ_net = load_checkpoint_as(&arch_for_training(&cfg.stage1, &cfg.train), organ_checkpoint)?;
    let tumor_net = load_checkpoint_as(&arch_for_training(&cfg.stage2, &cfg.train), tumor_checkpoint)?;
    let cascade = cfg.cascade();
    let mut out = Vec::with_capacity(inputs.len());
    for (path, id) in inputs.iter().zip(ids) {
        let image = nifti::read_volume(path)?;
        let source = SourceGrid {
            dims: image.dims(),
            geometry: image.geometry,
        };
        let (pre, _) = preprocess_case(&image, None, &cfg.preprocess)?;
        let result = two_stage_segment(&pre, &organ_net, &tumor_net, &cascade)?;
        let labels = restore_labels(&result.final_labels, &source)?;
        let mask = restore_labels(&result.organ_mask, &source)?;
        let dest = out_dir.join(format!("{id}.nii.gz"));
        nifti::write_labels(&dest, &labels)?;
        nifti::write_labels(out_dir.join(format!("{id}.organ.nii.gz")), &mask)?;
        log::info!("{id}: wrote {}", dest.display());
        out.push((id, dest));
    }
    Ok(out)
}

/// Scores `<pred_dir>/<id>.nii.gz` (or `.nii`) against every labelled
/// manifest case and writes the per-case table to `table`.
pub fn cmd_evaluate(cfg: &RunConfig, pred_dir: &Path, table: &Path) -> Result<Vec<MetricsRow>> {
    let manifest = read_manifest(&cfg.paths.manifest)?;
    let cases: Vec<_> = manifest.cases.iter().filter(|c| c.label_path.is_some()).collect();
    if cases.is_empty() {
        return Err(Error::Empty("no labelled cases in manifest".into()));
    }
    let find = |id: &str| {
        [format!("{id}.nii.gz"), format!("{id}.nii")]
            .into_iter()
            .map(|n| pred_dir.join(n))
            .find(|p| p.is_file())
    };
    let missing: Vec<&str> = cases
        .iter()
        .filter(|c| find(&c.case_id).is_none())
        .map(|c| c.case_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "no prediction in {} for cases {missing:?}",
            pred_dir.display()
        )));
    }
    let rows = cases
        .iter()
        .map(|c| {
            let pred = nifti::read_labels(find(&c.case_id).expect("checked above"))?;
            let gt = ground_truth(&manifest, &c.case_id)?;
            Ok(MetricsRow::from_case(&cfg.dataset, &evaluate_case(&c.case_id, &pred, &gt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    write_metrics_table(table, &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct ReportOutcome {
    pub summaries: Vec<DatasetSummary>,
    pub summary_text: String,
    pub summary_path: PathBuf,
    pub figure_path: PathBuf,
}

/// Summary table and boxplot figure over one or more metrics tables.
pub fn cmd_report(tables: &[PathBuf], out_dir: &Path) -> Result<ReportOutcome> {
    if tables.is_empty() {
        return Err(Error::Empty("no metrics tables given".into()));
    }
    let mut rows = Vec::new();
    for t in tables {
        rows.extend(read_metrics_table(t)?);
    }
    let summaries = summarize_rows(&rows)?;
    let summary_text = summary_table(&summaries);
    let summary_path = out_dir.join("summary.tsv");
    let figure_path = out_dir.join("boxplots.svg");
    write_text(&summary_path, &summary_text)?;
    write_text(&figure_path, &boxplot_svg(&summaries))?;
    write_json(&out_dir.join("summary.json"), &summaries)?;
    Ok(ReportOutcome {
        summaries,
        summary_text,
        summary_path,
        figure_path,
    })
}
