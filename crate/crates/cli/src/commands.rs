use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ddad_core::dataset::{list_images, load_image, rgb_from_tensor, Item, Split};
use ddad_core::denoiser::DenoiserModel;
use ddad_core::features::{BackboneKind, FeatureExtractor};
use ddad_core::metrics::EvaluationReport;
use ddad_core::pipeline::{self, AblationInputs, DataSource, PipelineConfig};
use ddad_core::scoring::{heatmaps, AnomalyHeatmap, Provenance};
use ddad_core::synth::synth_dataset;
use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::output::{read_heatmap, stem_for, write_heatmap, write_reconstruction, HeatmapSidecar};
use crate::run::*;
use crate::{Common, Preset, ReconFlags, ScoreFlags};

/// Config from `--config`, else the run's saved config, else the synthetic
/// preset; then the seed override.
fn resolve(common: &Common) -> Result<(PipelineConfig, Option<RunDir>)> {
    let existing = match &common.run {
        Some(p) if p.join(MANIFEST).exists() => Some(RunDir::open(p)?),
        _ => None,
    };
    let mut cfg = match (&common.config, &existing) {
        (Some(path), _) => load_config(path)?,
        (None, Some(run)) => run.manifest.config.clone(),
        (None, None) => PipelineConfig::synthetic_default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    Ok((cfg, existing))
}

fn open_or_create(common: &Common, cfg: &PipelineConfig, existing: Option<RunDir>) -> Result<RunDir> {
    if let Some(run) = existing {
        return Ok(run);
    }
    let root = common.run.clone().unwrap_or_else(|| RunDir::fresh_path(&cfg.paths.runs_dir));
    let run = RunDir::create(&root, cfg)?;
    info!("run directory {}", run.root.display());
    Ok(run)
}

fn apply_recon(cfg: &mut PipelineConfig, f: &ReconFlags) {
    if let Some(w) = f.w {
        cfg.reconstruction.w = w;
    }
    if let Some(n) = f.steps {
        cfg.reconstruction.n_steps = n;
    }
    if let Some(t) = f.tprime {
        cfg.reconstruction.t_prime = t;
    }
}

fn apply_score(cfg: &mut PipelineConfig, f: &ScoreFlags) {
    if let Some(v) = f.v {
        cfg.score.v = v;
    }
    if let Some(s) = f.sigma_g {
        cfg.score.sigma_g = s;
    }
    if let Some(s) = f.norm_scope {
        cfg.score.normalization_scope = s.into();
    }
}

/// Explicit path, else the run's checkpoint; errors name the producing stage.
fn denoiser_path(explicit: Option<&Path>, run: Option<&RunDir>) -> Result<PathBuf> {
    let path = match (explicit, run) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(r)) => r.checkpoint(DENOISER_CKPT),
        (None, None) => bail!("no denoiser checkpoint: pass --ckpt or --run (produced by `ddad train`)"),
    };
    require(&[(&path, "train")])?;
    Ok(path)
}

/// The adapted extractor to score with. Without a checkpoint the pretrained
/// backbone is used only when the config disables adaptation.
fn extractor_source(explicit: Option<&Path>, run: Option<&RunDir>, cfg: &PipelineConfig) -> Result<Option<PathBuf>> {
    let path = explicit.map(Path::to_path_buf).or_else(|| run.map(|r| r.checkpoint(EXTRACTOR_CKPT)));
    match path {
        Some(p) if p.exists() => Ok(Some(p)),
        _ if cfg.adapt.epochs == 0 => Ok(None),
        Some(p) => {
            require(&[(&p, "finetune")])?;
            unreachable!()
        }
        None => bail!("no extractor checkpoint: pass --fe-ckpt or --run (produced by `ddad finetune`)"),
    }
}

fn load_extractor(src: Option<&Path>, cfg: &PipelineConfig) -> Result<FeatureExtractor> {
    match src {
        Some(p) => {
            let (fe, _, _) = FeatureExtractor::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(fe)
        }
        None => Ok(pipeline::pretrained_extractor(cfg)),
    }
}

fn load_denoiser(path: &Path, cfg: &PipelineConfig) -> Result<DenoiserModel> {
    DenoiserModel::load(path, &cfg.schedule).with_context(|| format!("loading {}", path.display()))
}

fn progress(stage: &'static str, every: usize) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if step % every == 0 {
            info!("{stage} step {step} loss {loss:.5}");
        }
    }
}

pub fn config(preset: Preset, category: &str, resolution: usize, crop: Option<usize>) -> Result<ExitCode> {
    let cfg = match preset {
        Preset::Synthetic => PipelineConfig::synthetic_default(),
        Preset::Mvtec => PipelineConfig::mvtec(category, resolution, crop),
    };
    cfg.validate()?;
    print!("{}", toml::to_string_pretty(&cfg)?);
    Ok(ExitCode::SUCCESS)
}

pub fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::synthetic_default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let DataSource::Synthetic(spec) = &cfg.data else { bail!("synth needs a synthetic data source") };
    let ds = synth_dataset(spec, cfg.seed)?;
    let base = out.join(&ds.category);
    for it in &ds.items {
        let name = it.id.rsplit('/').next().unwrap_or(&it.id);
        let kind = match it.split {
            Split::TrainGood => "train/good".to_string(),
            Split::TestGood => "test/good".to_string(),
            Split::TestDefect => format!("test/{}", it.defect_type),
        };
        let path = base.join(&kind).join(format!("{name}.png"));
        fs::create_dir_all(path.parent().unwrap())?;
        rgb_from_tensor(&it.image).save(&path)?;
        if it.is_defect() {
            let mdir = base.join("ground_truth").join(&it.defect_type);
            fs::create_dir_all(&mdir)?;
            let (h, w) = it.mask.dim();
            let mask = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([if it.mask[[y as usize, x as usize]] { 255 } else { 0 }])
            });
            mask.save(mdir.join(format!("{name}_mask.png")))?;
        }
    }
    println!("wrote {} images to {}", ds.items.len(), base.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(common: &Common, epochs: Option<usize>, out: Option<&Path>) -> Result<ExitCode> {
    let (mut cfg, existing) = resolve(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let ds = cfg.load_data()?;
    let mut run = open_or_create(common, &cfg, existing)?;
    let started = now();
    let train = ds.train_images();
    info!("training on {} images for {} epochs", train.len(), cfg.train.epochs);
    let (model, losses) = pipeline::train_denoiser(&cfg, &train, progress("train", 50))?;
    let ckpt = run.checkpoint(DENOISER_CKPT);
    model.save(&ckpt)?;
    let loss_path = run.checkpoint("denoiser_losses.json");
    fs::write(&loss_path, serde_json::to_string(&losses)?)?;
    let mut outputs = vec![ckpt.display().to_string(), loss_path.display().to_string()];
    if let Some(o) = out {
        fs::copy(&ckpt, o).with_context(|| format!("copying checkpoint to {}", o.display()))?;
        outputs.push(o.display().to_string());
    }
    run.record("train", &cfg, started, outputs)?;
    println!("denoiser checkpoint: {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

pub fn finetune(
    common: &Common,
    ckpt: Option<&Path>,
    fe: Option<&str>,
    epochs: Option<usize>,
    lambda_dl: Option<f64>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let (mut cfg, existing) = resolve(common)?;
    if let Some(kind) = fe {
        cfg.backbone = BackboneKind::parse(kind)?;
    }
    if let Some(e) = epochs {
        cfg.adapt.epochs = e;
    }
    if let Some(l) = lambda_dl {
        cfg.adapt.lambda_dl = l;
    }
    cfg.validate()?;
    let den_path = denoiser_path(ckpt, existing.as_ref())?;
    let model = load_denoiser(&den_path, &cfg)?;
    let ds = cfg.load_data()?;
    let mut run = open_or_create(common, &cfg, existing)?;
    let started = now();
    let (fe, _) = pipeline::finetune(&cfg, &model, &ds.train_images(), progress("finetune", 10))?;
    let path = run.checkpoint(EXTRACTOR_CKPT);
    fe.save(&path, &cfg.adapt.layer_set_da, &cfg.score.layer_set_score)?;
    let mut outputs = vec![path.display().to_string()];
    if let Some(o) = out {
        fs::copy(&path, o)?;
        outputs.push(o.display().to_string());
    }
    run.record("finetune", &cfg, started, outputs)?;
    println!("extractor checkpoint: {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub id: String,
    pub stem: String,
    pub defect: bool,
    pub defect_type: String,
    pub height: usize,
    pub width: usize,
    pub image_score: f64,
}

/// `detections.json`: what `eval` needs to find and label the heatmaps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionIndex {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub provenance: Provenance,
    /// False when scoring unlabeled `--input` images.
    pub labeled: bool,
    pub calibration_gap: f64,
    pub items: Vec<DetectionEntry>,
}

fn input_items(input: &Path, cfg: &PipelineConfig) -> Result<Vec<Item>> {
    let files = if input.is_dir() { list_images(input)? } else { vec![input.to_path_buf()] };
    if files.is_empty() {
        bail!("no images in {}", input.display());
    }
    let (res, crop) = cfg.data.geometry();
    files
        .iter()
        .map(|p| {
            let image = load_image(p, res, crop)?;
            let (h, w) = (image.height(), image.width());
            Ok(Item {
                id: p.display().to_string(),
                image,
                split: Split::TestGood,
                defect_type: "unknown".into(),
                mask: Array2::from_elem((h, w), false),
            })
        })
        .collect()
}

pub fn detect(
    common: &Common,
    ckpt: Option<&Path>,
    fe_ckpt: Option<&Path>,
    input: Option<&Path>,
    recon: &ReconFlags,
    score: &ScoreFlags,
    provenance: Provenance,
) -> Result<ExitCode> {
    let (mut cfg, existing) = resolve(common)?;
    apply_recon(&mut cfg, recon);
    apply_score(&mut cfg, score);
    cfg.validate()?;
    let den_path = denoiser_path(ckpt, existing.as_ref())?;
    let fe_src = extractor_source(fe_ckpt, existing.as_ref(), &cfg)?;
    if let Some(i) = input {
        require(&[(i, "detect --input <existing path>")])?;
    }
    let model = load_denoiser(&den_path, &cfg)?;
    let fe = load_extractor(fe_src.as_deref(), &cfg)?;
    let owned: Vec<Item> = match input {
        Some(i) => input_items(i, &cfg)?,
        None => {
            let ds = cfg.load_data()?;
            ds.items.into_iter().filter(|i| i.split != Split::TrainGood).collect()
        }
    };
    let items: Vec<&Item> = owned.iter().collect();
    let mut run = open_or_create(common, &cfg, existing)?;
    let started = now();
    info!("scoring {} images (w={}, {} steps from T'={})", items.len(), cfg.reconstruction.w, cfg.reconstruction.n_steps, cfg.reconstruction.t_prime);
    let det = pipeline::detect(&cfg, &model, &fe, &items, |done, total| info!("reconstructed {done}/{total}"))?;
    let hm: Vec<AnomalyHeatmap> = if provenance == Provenance::Combined {
        det.heatmaps.clone()
    } else {
        heatmaps(&det.maps, &cfg.score, provenance)?
    };
    let png_max = hm.iter().map(|h| h.image_score).fold(0.0, f64::max);
    let hash = cfg.hash();
    let mut entries = Vec::with_capacity(items.len());
    for (k, (it, h)) in items.iter().zip(&hm).enumerate() {
        let stem = stem_for(k, &it.id);
        let (height, width) = h.map.dim();
        let sidecar = HeatmapSidecar {
            id: it.id.clone(),
            image_score: h.image_score,
            config_hash: hash.clone(),
            provenance: provenance.name().into(),
            height,
            width,
            png_max,
        };
        write_heatmap(&run.heatmaps(), &stem, &h.map, &sidecar)?;
        write_reconstruction(&run.reconstructions(), &stem, &det.reconstructions[k])?;
        entries.push(DetectionEntry {
            id: it.id.clone(),
            stem,
            defect: it.is_defect(),
            defect_type: it.defect_type.clone(),
            height,
            width,
            image_score: h.image_score,
        });
    }
    let index = DetectionIndex {
        config: cfg.clone(),
        config_hash: hash,
        provenance,
        labeled: input.is_none(),
        calibration_gap: det.calibration_gap,
        items: entries,
    };
    let index_path = run.root.join(DETECTIONS);
    fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
    run.record("detect", &cfg, started, vec![index_path.display().to_string(), run.heatmaps().display().to_string()])?;
    println!(
        "scored {} images into {} (calibration gap {:.1e})",
        items.len(),
        run.root.display(),
        det.calibration_gap
    );
    Ok(ExitCode::SUCCESS)
}

fn print_report(r: &EvaluationReport) {
    println!("{:<12} {:>8}", "metric", "value");
    println!("{:<12} {:>8.4}", "image AUROC", r.image_auroc);
    println!("{:<12} {:>8.4}", "pixel AUROC", r.pixel_auroc);
    println!("{:<12} {:>8.4}", "PRO", r.pro);
    println!("config {}", r.config_hash);
}

pub fn eval(root: &Path) -> Result<ExitCode> {
    let mut run = RunDir::open(root)?;
    let index_path = run.root.join(DETECTIONS);
    require(&[(&index_path, "detect")])?;
    let index: DetectionIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
    if !index.labeled {
        bail!("{} scored unlabeled --input images; eval needs the dataset's test split", run.root.display());
    }
    let cfg = index.config.clone();
    let started = now();
    let ds = cfg.load_data()?;
    let by_id: HashMap<&str, &Item> = ds.items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut items = Vec::with_capacity(index.items.len());
    let mut hm = Vec::with_capacity(index.items.len());
    for e in &index.items {
        let it = by_id.get(e.id.as_str()).with_context(|| format!("{} is not in the configured dataset", e.id))?;
        items.push(*it);
        let map = read_heatmap(&run.heatmaps().join(format!("{}.f32", e.stem)), e.height, e.width)?;
        hm.push(AnomalyHeatmap::new(map, index.provenance));
    }
    let report = pipeline::evaluate_heatmaps(&cfg, &items, &hm)?;
    let path = run.root.join(REPORT);
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    run.record("eval", &cfg, started, vec![path.display().to_string()])?;
    print_report(&report);
    if !report.all_finite() {
        eprintln!("error: a metric is NaN");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(
    common: &Common,
    ckpt: Option<&Path>,
    fe_ckpt: Option<&Path>,
    recon: &ReconFlags,
    score: &ScoreFlags,
) -> Result<ExitCode> {
    let (mut cfg, existing) = resolve(common)?;
    apply_recon(&mut cfg, recon);
    apply_score(&mut cfg, score);
    cfg.validate()?;
    let den_path = denoiser_path(ckpt, existing.as_ref())?;
    let fe_src = extractor_source(fe_ckpt, existing.as_ref(), &cfg)?;
    let model = load_denoiser(&den_path, &cfg)?;
    let adapted = load_extractor(fe_src.as_deref(), &cfg)?;
    let pretrained = FeatureExtractor::new(adapted.kind(), adapted.seed());
    let ds = cfg.load_data()?;
    let items = ds.test_items();
    let mut run = open_or_create(common, &cfg, existing)?;
    let started = now();
    let imgs: Vec<_> = items.iter().map(|i| i.image.clone()).collect();
    let recon_w = pipeline::reconstruct_items(&cfg, &model, &imgs, |d, t| info!("w={} reconstructed {d}/{t}", cfg.reconstruction.w))?;
    let mut c0 = cfg.clone();
    c0.reconstruction.w = 0.0;
    let recon_w0 = pipeline::reconstruct_items(&c0, &model, &imgs, |d, t| info!("w=0 reconstructed {d}/{t}"))?;
    let report = pipeline::ablate(
        &cfg,
        &AblationInputs { items: &items, recon_w: &recon_w, recon_w0: &recon_w0, pretrained: &pretrained, adapted: &adapted },
    )?;
    let path = run.root.join(ABLATION);
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    run.record("ablate", &cfg, started, vec![path.display().to_string()])?;
    print!("{}", report.table());
    Ok(ExitCode::SUCCESS)
}

pub fn run_all(common: &Common) -> Result<ExitCode> {
    let (cfg, existing) = resolve(common)?;
    cfg.validate()?;
    let run = open_or_create(common, &cfg, existing)?;
    let root = run.root.clone();
    drop(run);
    // later stages read the run's saved config
    let first = Common { config: common.config.clone(), run: Some(root.clone()), seed: common.seed };
    let rest = Common { config: None, run: Some(root.clone()), seed: None };
    train(&first, None, None)?;
    finetune(&rest, None, None, None, None, None)?;
    detect(&rest, None, None, None, &ReconFlags::default(), &ScoreFlags::default(), Provenance::Combined)?;
    eval(&root)
}
