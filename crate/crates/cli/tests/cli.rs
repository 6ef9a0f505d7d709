use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_waterbird"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_image(path: &Path, w: u32, h: u32, birds: &[[u32; 4]]) {
    let mut img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 97) as u8, (y % 89) as u8, 70]));
    for b in birds {
        for y in b[1]..b[3] {
            for x in b[0]..b[2] {
                img.put_pixel(x, y, Rgb([250, 250, 250]));
            }
        }
    }
    img.save(path).unwrap();
}

/// One 1000x700 image with a handful of birds and a config pointing at it.
fn small_survey(dir: &Path, extra: &str) {
    let birds = [
        ("Brown Pelican Adult", [20, 30, 80, 70]),
        ("Laughing Gull Adult", [390, 200, 420, 230]),
        ("Laughing Gull Adult", [620, 610, 660, 650]),
        ("White Ibis Adult", [900, 100, 950, 160]),
        ("Great Egret Adult", [500, 400, 560, 470]),
    ];
    let coords: Vec<[u32; 4]> = birds.iter().map(|(_, b)| *b).collect();
    write_image(&dir.join("site.png"), 1000, 700, &coords);
    let mut csv = String::from("image_id,class_name,x_min,y_min,x_max,y_max\n");
    for (c, b) in birds {
        csv.push_str(&format!("site,{c},{},{},{},{}\n", b[0], b[1], b[2], b[3]));
    }
    csv.push_str("site,Dodo,1,1,5,5\n");
    std::fs::write(dir.join("ann.csv"), csv).unwrap();
    std::fs::write(
        dir.join("run.toml"),
        format!("seed = 3\nout = \"out\"\nimages = [\"site.png\"]\nannotations = \"ann.csv\"\n{extra}"),
    )
    .unwrap();
}

#[test]
fn missing_image_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--out", "o", "tile", "--image", "nowhere/frame.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere/frame.png"), "{}", stderr(&out));

    let out = run(dir.path(), &["--config", "missing.toml", "tile"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.toml"));
}

#[test]
fn tile_is_idempotent_and_reports_rejects() {
    let dir = tempfile::tempdir().unwrap();
    small_survey(dir.path(), "");
    let summary = ok(dir.path(), &["--config", "run.toml", "tile"]);
    assert!(summary.starts_with("4 tiles from 1 images, 5 annotations, 1 rejected"), "{summary}");
    let manifest = std::fs::read(dir.path().join("out/tiles_manifest.json")).unwrap();
    let rejects = std::fs::read_to_string(dir.path().join("out/annotation_rejects.csv")).unwrap();
    assert_eq!(rejects.lines().count(), 2);
    assert!(rejects.contains("Dodo") && rejects.contains("unknown_class"));
    for id in ["site_0_0", "site_360_0", "site_0_60", "site_360_60"] {
        let tile = image::open(dir.path().join(format!("out/tiles/{id}.png"))).unwrap();
        assert_eq!((tile.width(), tile.height()), (640, 640));
    }
    // raw class folded into Other
    assert!(String::from_utf8_lossy(&manifest).contains("\"Other\""));

    ok(dir.path(), &["--config", "run.toml", "tile"]);
    assert_eq!(std::fs::read(dir.path().join("out/tiles_manifest.json")).unwrap(), manifest);
}

#[test]
fn malformed_detection_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    small_survey(dir.path(), "");
    ok(dir.path(), &["--config", "run.toml", "tile"]);
    std::fs::write(
        dir.path().join("bad.jsonl"),
        "{\"tile_id\":\"site_0_0\",\"class\":\"Other\",\"x_min\":1,\"y_min\":1,\"x_max\":9,\"y_max\":9,\"score\":0.9}\n{\"tile_id\": oops\n",
    )
    .unwrap();
    let out = run(dir.path(), &["--config", "run.toml", "merge-count", "--detections", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn empty_detections_give_a_zero_report() {
    let dir = tempfile::tempdir().unwrap();
    small_survey(dir.path(), "");
    ok(dir.path(), &["--config", "run.toml", "tile"]);
    std::fs::write(dir.path().join("none.jsonl"), "").unwrap();
    ok(dir.path(), &["--config", "run.toml", "merge-count", "--detections", "none.jsonl"]);
    let counts = std::fs::read_to_string(dir.path().join("out/counts.csv")).unwrap();
    let rows: Vec<&str> = counts.lines().skip(1).collect();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.starts_with("site,") && r.ends_with(",0")));
}

#[test]
fn zero_noise_pipeline_counts_and_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    small_survey(dir.path(), "");
    for cmd in ["tile", "detect-oracle", "merge-count"] {
        ok(dir.path(), &["--config", "run.toml", cmd]);
    }
    let counts = std::fs::read_to_string(dir.path().join("out/counts.csv")).unwrap();
    assert!(counts.contains("site,Brown Pelican Adult,1\n"));
    assert!(counts.contains("site,Laughing Gull Adult,2\n"));
    assert!(counts.contains("site,White Ibis Adult,1\n"));
    assert!(counts.contains("site,Other,1\n"));
    // no world file, no mission row
    assert!(!counts.contains("mission"));

    let summary = ok(dir.path(), &["--config", "run.toml", "evaluate"]);
    assert_eq!(summary.trim(), "mAP@0.5 = 1.0000, mAP@0.75 = 1.0000");
    let confusion = std::fs::read_to_string(dir.path().join("out/eval/confusion.csv")).unwrap();
    assert!(confusion.starts_with("ground_truth,Mixed Tern Adult,"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["thresholds"][0]["map"], 1.0);
    for f in ["ap.csv", "pr_curves.csv", "rejects.csv"] {
        assert!(dir.path().join("out/eval").join(f).is_file());
    }
}

#[test]
fn unknown_detection_class_is_listed_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    small_survey(dir.path(), "");
    ok(dir.path(), &["--config", "run.toml", "tile"]);
    std::fs::write(
        dir.path().join("d.jsonl"),
        "{\"tile_id\":\"site_0_0\",\"class\":\"Penguin\",\"x_min\":1,\"y_min\":1,\"x_max\":9,\"y_max\":9,\"score\":0.9}\n",
    )
    .unwrap();
    ok(dir.path(), &["--config", "run.toml", "evaluate", "--detections", "d.jsonl"]);
    let rejects = std::fs::read_to_string(dir.path().join("out/eval/rejects.csv")).unwrap();
    assert!(rejects.contains("1,site_0_0,Penguin,unknown class"), "{rejects}");
}

#[test]
fn seeded_noisy_evaluation_matches_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    small_survey(
        dir.path(),
        "[oracle]\njitter = 5.0\ndrop_rate = 0.2\nspurious_rate = 0.8\nmisclass_rate = 0.3\n",
    );
    for cmd in ["tile", "detect-oracle", "evaluate"] {
        ok(dir.path(), &["--config", "run.toml", cmd]);
    }
    let got = std::fs::read_to_string(dir.path().join("out/eval/report.json")).unwrap();
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/noisy_report.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn split_and_augment() {
    let dir = tempfile::tempdir().unwrap();
    small_survey(dir.path(), "");
    ok(dir.path(), &["--config", "run.toml", "tile"]);
    let summary = ok(dir.path(), &["--config", "run.toml", "split"]);
    // 4 tiles: floors 2/0/0, leftovers go to remainders .8 then the first .6
    assert_eq!(summary.trim(), "train 3 / validation 1 / test 0");
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/split.json")).unwrap()).unwrap();
    assert_eq!(split["seed"], 3);

    let by_image = ok(dir.path(), &["--config", "run.toml", "split", "--split-by-image"]);
    assert_eq!(by_image.trim(), "train 4 / validation 0 / test 0");

    // every tile of the single image is now training data
    let summary = ok(dir.path(), &["--config", "run.toml", "augment"]);
    let train = std::fs::read_to_string(dir.path().join("out/manifest_train.json")).unwrap();
    let augmented = std::fs::read_to_string(dir.path().join("out/manifest_train_augmented.json")).unwrap();
    let n: usize = summary.split_whitespace().nth(3).unwrap().parse().unwrap();
    if n == 0 {
        assert_eq!(train, augmented);
    } else {
        assert!(augmented.len() > train.len());
    }

    // without minority tiles the manifest passes through unchanged
    std::fs::write(
        dir.path().join("run.toml"),
        "seed = 3\nout = \"out\"\n[augment]\nops = []\n",
    )
    .unwrap();
    let summary = ok(dir.path(), &["--config", "run.toml", "augment"]);
    assert!(summary.ends_with("0 augmented tiles added\n"), "{summary}");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("out/manifest_train_augmented.json")).unwrap(),
        train
    );
}

#[test]
fn augment_copies_minority_tiles_per_op() {
    let dir = tempfile::tempdir().unwrap();
    let birds = [[30, 30, 90, 80], [200, 200, 260, 250]];
    write_image(&dir.path().join("colony.png"), 640, 640, &birds);
    std::fs::write(
        dir.path().join("ann.csv"),
        "image_id,class_name,x_min,y_min,x_max,y_max\ncolony,Roseate Spoonbill Adult,30,30,90,80\ncolony,REEGA,200,200,260,250\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "seed = 1\nout = \"out\"\nimages = [\"colony.png\"]\nannotations = \"ann.csv\"\n[split.ratios]\ntrain = 0.98\nvalidation = 0.01\ntest = 0.01\n",
    )
    .unwrap();
    for cmd in ["tile", "split", "augment"] {
        ok(dir.path(), &["--config", "run.toml", cmd]);
    }
    let m = waterbird_core::manifest::TilesManifest::load(&dir.path().join("out/manifest_train_augmented.json")).unwrap();
    let ids: Vec<&str> = m.tiles.iter().map(|t| t.tile_id.as_str()).collect();
    assert_eq!(
        ids,
        vec![
            "colony_0_0",
            "colony_0_0~horizontal_mirror",
            "colony_0_0~vertical_mirror",
            "colony_0_0~rotate_90",
            "colony_0_0~brightness_contrast"
        ]
    );
    let mirrored = image::open(dir.path().join("out/augmented/colony_0_0~horizontal_mirror.png")).unwrap().to_rgb8();
    // bird pixel at x=30 lands at 640-1-30
    assert_eq!(*mirrored.get_pixel(609, 40), Rgb([250, 250, 250]));
    let hm = &m.tiles[1].annotations[0].bbox;
    assert_eq!(hm.coords(), [550.0, 30.0, 610.0, 80.0]);
}

#[test]
fn mission_merge_counts_overlap_once() {
    let dir = tempfile::tempdir().unwrap();
    // b.png sits 500 px east of a.png; the bird at a(600,100) is b(100,100)
    write_image(&dir.path().join("a.png"), 1000, 700, &[[600, 100, 640, 140], [50, 50, 90, 90]]);
    write_image(&dir.path().join("b.png"), 1000, 700, &[[100, 100, 140, 140], [700, 300, 740, 340]]);
    std::fs::write(dir.path().join("a.pgw"), "1\n0\n0\n-1\n0.5\n-0.5\n").unwrap();
    std::fs::write(dir.path().join("b.pgw"), "1\n0\n0\n-1\n500.5\n-0.5\n").unwrap();
    std::fs::write(
        dir.path().join("ann.csv"),
        "image_id,class_name,x_min,y_min,x_max,y_max\n\
         a,Laughing Gull Adult,600,100,640,140\n\
         a,Laughing Gull Adult,50,50,90,90\n\
         b,Laughing Gull Adult,100,100,140,140\n\
         b,Laughing Gull Adult,700,300,740,340\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "out = \"out\"\nmission_id = \"flight1\"\nimages = [\"a.png\", \"b.png\"]\nannotations = \"ann.csv\"\n",
    )
    .unwrap();
    for cmd in ["tile", "detect-oracle"] {
        ok(dir.path(), &["--config", "run.toml", cmd]);
    }
    let summary = ok(dir.path(), &["--config", "run.toml", "merge-count"]);
    assert!(summary.contains("4 birds counted over 2 images; mission flight1: 3"), "{summary}");
    let counts = std::fs::read_to_string(dir.path().join("out/counts.csv")).unwrap();
    assert!(counts.contains("a,Laughing Gull Adult,2\n"));
    assert!(counts.contains("b,Laughing Gull Adult,2\n"));
    assert!(counts.contains("flight1,Laughing Gull Adult,3\n"));
    let merged = std::fs::read_to_string(dir.path().join("out/merged_detections.jsonl")).unwrap();
    assert_eq!(merged.lines().filter(|l| l.contains("\"frame\":\"world\"")).count(), 3);

    // render the merged detections back onto a.png
    ok(dir.path(), &["--config", "run.toml", "render", "--image", "a.png"]);
    let drawn = image::open(dir.path().join("out/render/a.png")).unwrap().to_rgb8();
    let src = image::open(dir.path().join("a.png")).unwrap().to_rgb8();
    assert_ne!(drawn, src);
    assert_eq!(drawn.get_pixel(500, 500), src.get_pixel(500, 500));
}

#[test]
fn render_without_detections_is_pixel_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_image(&dir.path().join("plain.png"), 64, 48, &[]);
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    ok(
        dir.path(),
        &["--out", "o", "render", "--image", "plain.png", "--detections", "empty.jsonl", "--output", "o/r.png"],
    );
    let a = image::open(dir.path().join("plain.png")).unwrap().to_rgb8();
    let b = image::open(dir.path().join("o/r.png")).unwrap().to_rgb8();
    assert_eq!(a, b);
}
