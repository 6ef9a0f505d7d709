use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rayon::prelude::*;
use serde::Serialize;
use waterbird_core::augment::{augment_tile, build_augmented_set};
use waterbird_core::dataset::{load_annotations, split_by_group, split_dataset, AnnotationReject, LabeledBox, SurveyImage};
use waterbird_core::detections::{
    read_framed, read_wire_detections, write_framed, write_wire_detections, Detection, DetectionReject, Frame,
};
use waterbird_core::eval::{evaluate, EvalImage};
use waterbird_core::manifest::{ImageEntry, TilesManifest};
use waterbird_core::merge::{back_project, merge_image, merge_mission, parse_world_file, CountReport};
use waterbird_core::oracle::oracle_detect;
use waterbird_core::render::render_overlay;
use waterbird_core::taxonomy::ClassTaxonomy;
use waterbird_core::tiler::{build_manifest, decode_image, extract_tiles, probe_dimensions};
use waterbird_core::Affine;

use crate::{CliError, PipelineConfig};

pub const TILES_DIR: &str = "tiles";
pub const TILES_MANIFEST: &str = "tiles_manifest.json";
pub const ANNOTATION_REJECTS: &str = "annotation_rejects.csv";
pub const SPLIT: &str = "split.json";
pub const AUGMENTED_DIR: &str = "augmented";
pub const AUGMENTED_MANIFEST: &str = "manifest_train_augmented.json";
pub const DETECTIONS: &str = "detections.jsonl";
pub const COUNTS_CSV: &str = "counts.csv";
pub const COUNTS_JSON: &str = "counts.json";
pub const MERGED_DETECTIONS: &str = "merged_detections.jsonl";
pub const DETECTION_REJECTS: &str = "detection_rejects.csv";
pub const EVAL_DIR: &str = "eval";
pub const RENDER_DIR: &str = "render";

pub fn split_manifest_name(subset: &str) -> String {
    format!("manifest_{subset}.json")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", parent.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::input(format!("cannot write {}: {e}", path.display()))
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn save_png(img: &DynamicImage, path: &Path) -> Result<(), CliError> {
    let img = match img {
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => DynamicImage::ImageRgba16(img.to_rgba16()),
        other => other.clone(),
    };
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

pub fn load_taxonomy(cfg: &PipelineConfig) -> Result<ClassTaxonomy, CliError> {
    match &cfg.taxonomy {
        Some(p) => ClassTaxonomy::load(p).map_err(CliError::input),
        None => Ok(ClassTaxonomy::builtin()),
    }
}

fn load_manifest(path: &Path) -> Result<TilesManifest, CliError> {
    TilesManifest::load(path).map_err(CliError::input)
}

pub fn image_id(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::input(format!("cannot derive an image id from {}", path.display())))
}

/// `.wld`, then the `<first><last>w` convention (`.pgw`, `.jgw`, `.tfw`).
pub fn world_file_for(image: &Path) -> Option<PathBuf> {
    let mut candidates = vec![image.with_extension("wld")];
    if let Some(ext) = image.extension().and_then(|e| e.to_str()) {
        let mut chars = ext.chars();
        if let (Some(first), Some(last)) = (chars.next(), ext.chars().last()) {
            candidates.push(image.with_extension(format!("{first}{last}w")));
        }
    }
    candidates.into_iter().find(|p| p.is_file())
}

/// Georeferences of the configured images that have a world file.
pub fn georeferences(cfg: &PipelineConfig) -> Result<BTreeMap<String, Affine>, CliError> {
    let mut out = BTreeMap::new();
    for path in &cfg.images {
        if let Some(wf) = world_file_for(path) {
            let text = std::fs::read_to_string(&wf)
                .map_err(|e| CliError::input(format!("cannot read {}: {e}", wf.display())))?;
            let t = parse_world_file(&text).map_err(|e| CliError::input(format!("{}: {e}", wf.display())))?;
            out.insert(image_id(path)?, t);
        }
    }
    Ok(out)
}

fn survey_images(cfg: &PipelineConfig) -> Result<Vec<SurveyImage>, CliError> {
    if cfg.images.is_empty() {
        return Err(CliError::input("no input images configured"));
    }
    let geo = georeferences(cfg)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for path in &cfg.images {
        if !path.is_file() {
            return Err(CliError::input(format!("image not found: {}", path.display())));
        }
        let id = image_id(path)?;
        if !seen.insert(id.clone()) {
            return Err(CliError::input(format!("duplicate image id {id:?} ({})", path.display())));
        }
        let (width, height) = probe_dimensions(path).map_err(CliError::input)?;
        out.push(SurveyImage {
            georeference: geo.get(&id).copied(),
            image_id: id,
            path: path.clone(),
            width,
            height,
        });
    }
    Ok(out)
}

fn write_annotation_rejects(path: &Path, rejects: &[AnnotationReject]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| CliError::input(format!("cannot write {}: {e}", path.display()));
    w.write_record(["line", "image_id", "class_name", "x_min", "y_min", "x_max", "y_max", "reason"])
        .map_err(err)?;
    for r in rejects {
        let reason = serde_json::to_value(&r.reason).expect("serializable");
        let [x0, y0, x1, y1] = r.bbox.coords();
        w.write_record([
            r.line.to_string(),
            r.image_id.clone(),
            r.class_name.clone(),
            x0.to_string(),
            y0.to_string(),
            x1.to_string(),
            y1.to_string(),
            reason["reason"].as_str().unwrap_or_default().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(write_err(path))
}

/// Cuts every configured image into tiles and writes the tiles manifest.
pub fn cmd_tile(cfg: &PipelineConfig) -> Result<String, CliError> {
    let taxonomy = load_taxonomy(cfg)?;
    let images = survey_images(cfg)?;
    let sizes: BTreeMap<String, (u32, u32)> = images
        .iter()
        .map(|i| (i.image_id.clone(), (i.width, i.height)))
        .collect();
    let loaded = match &cfg.annotations {
        Some(p) => load_annotations(open(p)?, &taxonomy, Some(&sizes))
            .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
        None => Default::default(),
    };
    write_annotation_rejects(&cfg.out_path(ANNOTATION_REJECTS), &loaded.rejects)?;

    let tiles_dir = cfg.out_path(TILES_DIR);
    std::fs::create_dir_all(&tiles_dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", tiles_dir.display())))?;
    let mut per_image = Vec::new();
    for img in &images {
        let pixels = decode_image(&img.path).map_err(CliError::input)?;
        let anns = loaded.by_image.get(&img.image_id).map(Vec::as_slice).unwrap_or(&[]);
        let tiles = extract_tiles(&pixels, img, anns, &cfg.tile).map_err(CliError::input)?;
        tiles
            .par_iter()
            .try_for_each(|t| save_png(&t.pixels, &tiles_dir.join(format!("{}.png", t.record.tile_id))))?;
        let entry = ImageEntry {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
        };
        per_image.push((entry, tiles.into_iter().map(|t| t.record).collect::<Vec<_>>()));
    }
    let manifest = build_manifest(cfg.tile, per_image);
    manifest.validate().map_err(CliError::invariant)?;
    write_bytes(&cfg.out_path(TILES_MANIFEST), manifest.to_json_string().as_bytes())?;
    let unknown: Vec<&String> = loaded.by_image.keys().filter(|k| !sizes.contains_key(*k)).collect();
    let mut summary = format!(
        "{} tiles from {} images, {} annotations, {} rejected",
        manifest.tiles.len(),
        images.len(),
        loaded.total(),
        loaded.rejects.len()
    );
    if !unknown.is_empty() {
        summary.push_str(&format!("; annotations for unconfigured images ignored: {unknown:?}"));
    }
    Ok(summary)
}

/// Random train/validation/test partition of the tiles.
pub fn cmd_split(cfg: &PipelineConfig, manifest: Option<&Path>) -> Result<String, CliError> {
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path(TILES_MANIFEST));
    let m = load_manifest(&path)?;
    let split = if cfg.split.by_image {
        let items: Vec<(String, String)> = m.tiles.iter().map(|t| (t.tile_id.clone(), t.image_id.clone())).collect();
        split_by_group(&items, cfg.split.ratios, cfg.seed)
    } else {
        let ids: Vec<&str> = m.tiles.iter().map(|t| t.tile_id.as_str()).collect();
        split_dataset(&ids, cfg.split.ratios, cfg.seed)
    }
    .map_err(CliError::input)?;
    let covered = split.train.len() + split.validation.len() + split.test.len();
    if covered != m.tiles.len() {
        return Err(CliError::invariant(format!("split covers {covered} of {} tiles", m.tiles.len())));
    }
    write_bytes(&cfg.out_path(SPLIT), &pretty_json(&split))?;
    for name in ["train", "validation", "test"] {
        let subset = m.subset(split.subset(name).expect("known subset"));
        write_bytes(&cfg.out_path(&split_manifest_name(name)), subset.to_json_string().as_bytes())?;
    }
    Ok(format!(
        "train {} / validation {} / test {}",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    ))
}

/// Oversamples minority-dominated training tiles.
pub fn cmd_augment(cfg: &PipelineConfig, manifest: Option<&Path>, tiles_dir: Option<&Path>) -> Result<String, CliError> {
    let taxonomy = load_taxonomy(cfg)?;
    let path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_path(&split_manifest_name("train")));
    let tiles_dir = tiles_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path(TILES_DIR));
    let train = load_manifest(&path)?;
    let (augmented, jobs) = build_augmented_set(&train, &taxonomy, &cfg.augment_policy()).map_err(CliError::input)?;
    let out_dir = cfg.out_path(AUGMENTED_DIR);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", out_dir.display())))?;
    jobs.par_iter().try_for_each(|job| {
        let src = tiles_dir.join(format!("{}.png", job.source_tile));
        let pixels = decode_image(&src).map_err(CliError::input)?;
        let source = &train.tiles[train.tiles.iter().position(|t| t.tile_id == job.source_tile).expect("job source")];
        let (out, boxes) = augment_tile(&pixels, &source.annotations, &job.op).map_err(CliError::input)?;
        if boxes != job.record.annotations || (out.width(), out.height()) != (job.record.width, job.record.height) {
            return Err(CliError::invariant(format!(
                "augmented tile {} disagrees with its manifest record",
                job.record.tile_id
            )));
        }
        save_png(&out, &out_dir.join(format!("{}.png", job.record.tile_id)))
    })?;
    write_bytes(&cfg.out_path(AUGMENTED_MANIFEST), augmented.to_json_string().as_bytes())?;
    let qualifying: HashSet<&str> = jobs.iter().map(|j| j.source_tile.as_str()).collect();
    Ok(format!(
        "{} qualifying tiles, {} augmented tiles added",
        qualifying.len(),
        jobs.len()
    ))
}

/// Runs the perturbation oracle over every tile in the manifest.
pub fn cmd_detect_oracle(cfg: &PipelineConfig, manifest: Option<&Path>) -> Result<String, CliError> {
    let taxonomy = load_taxonomy(cfg)?;
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path(TILES_MANIFEST));
    let m = load_manifest(&path)?;
    let dets = oracle_detect(&m.tiles, &cfg.oracle_config(), &taxonomy).map_err(CliError::input)?;
    let out = cfg.out_path(DETECTIONS);
    let mut w = create(&out)?;
    write_wire_detections(&mut w, &dets).map_err(write_err(&out))?;
    w.flush().map_err(write_err(&out))?;
    Ok(format!("{} detections on {} tiles", dets.len(), m.tiles.len()))
}

fn read_detections(path: &Path, taxonomy: &ClassTaxonomy) -> Result<(Vec<Detection>, Vec<DetectionReject>), CliError> {
    let parsed =
        read_wire_detections(open(path)?, taxonomy).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok((parsed.detections, parsed.rejects))
}

fn write_detection_rejects(path: &Path, rejects: &[DetectionReject]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| CliError::input(format!("cannot write {}: {e}", path.display()));
    w.write_record(["line", "tile_id", "class", "reason"]).map_err(err)?;
    for r in rejects {
        w.write_record([r.line.to_string(), r.tile_id.clone(), r.class.clone(), r.reason.clone()])
            .map_err(err)?;
    }
    w.flush().map_err(write_err(path))
}

#[derive(Debug, Serialize)]
struct CountsFile<'a> {
    images: &'a [CountReport],
    mission: Option<&'a CountReport>,
}

fn check_report(r: &CountReport) -> Result<(), CliError> {
    if r.total != r.counts.values().sum::<usize>() {
        return Err(CliError::invariant(format!("count report {} does not add up", r.scope)));
    }
    Ok(())
}

/// Back-projects tile detections, de-duplicates them with NMS and counts
/// birds per image and, when every image is georeferenced, per mission.
pub fn cmd_merge_count(cfg: &PipelineConfig, detections: Option<&Path>, manifest: Option<&Path>) -> Result<String, CliError> {
    let taxonomy = load_taxonomy(cfg)?;
    let det_path = detections.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path(DETECTIONS));
    let man_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path(TILES_MANIFEST));
    let m = load_manifest(&man_path)?;
    let (dets, rejects) = read_detections(&det_path, &taxonomy)?;
    write_detection_rejects(&cfg.out_path(DETECTION_REJECTS), &rejects)?;
    let mut per_image = back_project(&dets, &m).map_err(|e| CliError::input(format!("{}: {e}", det_path.display())))?;
    for img in &m.images {
        per_image.entry(img.image_id.clone()).or_default();
    }

    let merged: Vec<(String, Vec<Detection>, CountReport)> = per_image
        .par_iter()
        .map(|(id, d)| {
            merge_image(id, d, &taxonomy, &cfg.merge)
                .map(|(kept, report)| (id.clone(), kept, report))
                .map_err(CliError::input)
        })
        .collect::<Result<_, _>>()?;
    let reports: Vec<CountReport> = merged.iter().map(|(_, _, r)| r.clone()).collect();
    reports.iter().try_for_each(check_report)?;

    let geo = georeferences(cfg)?;
    let mission = if !per_image.is_empty() && per_image.keys().all(|id| geo.contains_key(id)) {
        let kept: BTreeMap<String, Vec<Detection>> =
            merged.iter().map(|(id, k, _)| (id.clone(), k.clone())).collect();
        let (world, report) =
            merge_mission(&cfg.mission_id, &kept, &geo, &taxonomy, &cfg.merge).map_err(CliError::input)?;
        check_report(&report)?;
        Some((world, report))
    } else {
        None
    };

    let csv_path = cfg.out_path(COUNTS_CSV);
    let mut w = csv::Writer::from_writer(create(&csv_path)?);
    let err = |e: csv::Error| CliError::input(format!("cannot write {}: {e}", csv_path.display()));
    w.write_record(["scope", "class", "count"]).map_err(err)?;
    for r in reports.iter().chain(mission.as_ref().map(|(_, r)| r)) {
        for row in r.csv_rows() {
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(write_err(&csv_path))?;

    let counts = CountsFile {
        images: &reports,
        mission: mission.as_ref().map(|(_, r)| r),
    };
    write_bytes(&cfg.out_path(COUNTS_JSON), &pretty_json(&counts))?;

    let merged_path = cfg.out_path(MERGED_DETECTIONS);
    let mut w = create(&merged_path)?;
    for (id, kept, _) in &merged {
        write_framed(&mut w, id, kept).map_err(write_err(&merged_path))?;
    }
    if let Some((world, _)) = &mission {
        write_framed(&mut w, &cfg.mission_id, world).map_err(write_err(&merged_path))?;
    }
    w.flush().map_err(write_err(&merged_path))?;

    let total: usize = reports.iter().map(|r| r.total).sum();
    let mut summary = format!(
        "{} detections read, {} rejected; {} birds counted over {} images",
        dets.len(),
        rejects.len(),
        total,
        reports.len()
    );
    if let Some((_, r)) = &mission {
        summary.push_str(&format!("; mission {}: {}", r.scope, r.total));
    }
    Ok(summary)
}

/// Scores tile-frame detections against the manifest's tile annotations.
pub fn cmd_evaluate(cfg: &PipelineConfig, detections: Option<&Path>, manifest: Option<&Path>) -> Result<String, CliError> {
    let taxonomy = load_taxonomy(cfg)?;
    let det_path = detections.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path(DETECTIONS));
    let man_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path(TILES_MANIFEST));
    let m = load_manifest(&man_path)?;
    let (dets, mut rejects) = read_detections(&det_path, &taxonomy)?;

    let mut by_tile: HashMap<&str, Vec<Detection>> = HashMap::new();
    let known: HashSet<&str> = m.tiles.iter().map(|t| t.tile_id.as_str()).collect();
    let mut outside = 0;
    for d in dets {
        match known.get(d.provenance.as_str()) {
            Some(id) => by_tile.entry(id).or_default().push(d),
            None => outside += 1,
        }
    }
    let images: Vec<EvalImage> = m
        .tiles
        .iter()
        .map(|t| EvalImage {
            image_id: t.tile_id.clone(),
            ground_truth: t.annotations.clone(),
            detections: by_tile.remove(t.tile_id.as_str()).unwrap_or_default(),
        })
        .collect();
    let report = evaluate(&images, &taxonomy, &cfg.eval).map_err(CliError::input)?;

    let gt: Vec<&LabeledBox> = images.iter().flat_map(|i| &i.ground_truth).collect();
    for (i, class) in report.confusion.classes.iter().enumerate() {
        let total = gt.iter().filter(|g| &g.class == class).count();
        if report.confusion.row_sum(i) != total {
            return Err(CliError::invariant(format!("confusion row {class} does not sum to its ground truth")));
        }
    }

    let dir = cfg.out_path(EVAL_DIR);
    write_bytes(&dir.join("report.json"), report.to_json_string().as_bytes())?;
    let csv_err = |p: PathBuf| move |e| CliError::input(format!("cannot write {}: {e}", p.display()));
    let p = dir.join("ap.csv");
    report.write_ap_csv(create(&p)?).map_err(csv_err(p))?;
    let p = dir.join("confusion.csv");
    report.write_confusion_csv(create(&p)?).map_err(csv_err(p))?;
    let p = dir.join("pr_curves.csv");
    report.write_pr_curves_csv(create(&p)?).map_err(csv_err(p))?;
    if outside > 0 {
        rejects.push(DetectionReject {
            line: 0,
            tile_id: String::new(),
            class: String::new(),
            reason: format!("{outside} detections on tiles outside the manifest"),
        });
    }
    write_detection_rejects(&dir.join("rejects.csv"), &rejects)?;

    let maps: Vec<String> = report
        .thresholds
        .iter()
        .map(|t| match t.map {
            Some(v) => format!("mAP@{} = {:.4}", t.iou_threshold, v),
            None => format!("mAP@{} undefined (no ground truth)", t.iou_threshold),
        })
        .collect();
    Ok(maps.join(", "))
}

/// Draws merged image-frame detections over a source image.
pub fn cmd_render(
    cfg: &PipelineConfig,
    image: &Path,
    detections: Option<&Path>,
    output: Option<&Path>,
) -> Result<String, CliError> {
    let taxonomy = load_taxonomy(cfg)?;
    if !image.is_file() {
        return Err(CliError::input(format!("image not found: {}", image.display())));
    }
    let id = image_id(image)?;
    let det_path = detections.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path(MERGED_DETECTIONS));
    let records = read_framed(open(&det_path)?).map_err(|e| CliError::input(format!("{}: {e}", det_path.display())))?;
    let dets: Vec<Detection> = records
        .into_iter()
        .filter(|(src, d)| *src == id && d.frame == Frame::Image)
        .map(|(_, d)| d)
        .collect();
    let pixels = decode_image(image).map_err(CliError::input)?;
    let out = render_overlay(&pixels, &dets, &taxonomy);
    let out_path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_path(RENDER_DIR).join(format!("{id}.png")));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", parent.display())))?;
    }
    save_png(&DynamicImage::ImageRgb8(out), &out_path)?;
    Ok(format!("{} detections drawn to {}", dets.len(), out_path.display()))
}
