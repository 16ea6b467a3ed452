use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use angioforge::pgm::{self, BitDepth};
use angioforge::raster::{BinaryMask, GrayImage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_angioforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.cfg");
    fs::write(&path, format!("# quick runs\nimage.size = 256\nseed = 77\n{extra}")).unwrap();
    path
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Parse `metric,class,mean,se,n` output into (metric, class) -> (mean, se, n).
fn report(text: &str) -> Vec<(String, String, f64, f64, usize)> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,class,mean,se,n"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].to_string(),
                f[1].to_string(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
                f[4].parse().unwrap(),
            )
        })
        .collect()
}

fn lookup(rows: &[(String, String, f64, f64, usize)], metric: &str, class: &str) -> f64 {
    rows.iter()
        .find(|r| r.0 == metric && r.1 == class)
        .unwrap_or_else(|| panic!("no {metric}/{class} row"))
        .2
}

#[test]
fn generate_is_repeatable_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "samples = 3\n");
    let full = tmp.path().join("full");
    ok(&["generate", "--config", s(&cfg), "--out", s(&full)]);
    let reference = snapshot(&full);
    let names: Vec<&str> = reference.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "config.sha256",
            "config.txt",
            "img_00000.pgm",
            "img_00001.pgm",
            "img_00002.pgm",
            "lbl_00000.pgm",
            "lbl_00001.pgm",
            "lbl_00002.pgm",
            "manifest.csv"
        ]
    );

    // interrupted before the last manifest row was appended
    let cut = tmp.path().join("cut");
    ok(&["generate", "--config", s(&cfg), "--out", s(&cut), "--samples", "2"]);
    let partial = fs::read_to_string(cut.join("manifest.csv")).unwrap();
    assert_eq!(partial.lines().count(), 3);
    ok(&["generate", "--config", s(&cfg), "--out", s(&cut), "--jobs", "3"]);
    assert_eq!(snapshot(&cut), reference);

    // a torn image file forces regeneration from that sample on
    let torn = tmp.path().join("torn");
    ok(&["generate", "--config", s(&cfg), "--out", s(&torn)]);
    let img = torn.join("img_00001.pgm");
    let bytes = fs::read(&img).unwrap();
    fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
    ok(&["generate", "--config", s(&cfg), "--out", s(&torn)]);
    assert_eq!(snapshot(&torn), reference);

    let manifest = fs::read_to_string(full.join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("sample_id,seed,vessel_fraction,transform_log"));
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], i.to_string());
        let vf: f64 = fields[2].parse().unwrap();
        assert!(vf > 0.0 && vf < 1.0);
    }
}

#[test]
fn generate_refuses_a_directory_from_another_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "samples = 1\n");
    let out = tmp.path().join("ds");
    ok(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    let err = fail(&["generate", "--config", s(&cfg), "--out", s(&out), "--seed", "78"]);
    assert!(err.contains("error:"), "{err}");
}

#[test]
fn config_errors_name_the_line_or_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("seed = 1\nbogus_key = 3\n", "line 2"),
        ("seed = 1\n\nimage.size = big\n", "line 3"),
        ("seed = 1\nseed = 2\n", "line 2"),
        ("bias.strength = 0.9..0.1\n", "bias.strength"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("bad{i}.cfg"));
        fs::write(&path, text).unwrap();
        let err = fail(&["dump-forest", "--config", s(&path)]);
        assert!(err.contains(needle), "{text:?}: {err}");
    }
}

#[test]
fn degrade_writes_both_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "samples = 1\nbackground.enabled = false\n");
    let ds = tmp.path().join("ds");
    ok(&["generate", "--config", s(&cfg), "--out", s(&ds)]);
    let (img, lbl) = (ds.join("img_00000.pgm"), ds.join("lbl_00000.pgm"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let log = ok(&["degrade", "--image", s(&img), "--mask", s(&lbl), "--seed", "5", "--out", s(&a)]);
    ok(&["degrade", "--image", s(&img), "--mask", s(&lbl), "--seed", "5", "--out", s(&b)]);
    assert_eq!(snapshot(&a), snapshot(&b));
    assert!(!log.trim().is_empty());
    let mask = pgm::read_mask(&a.join("lbl_00000.pgm")).unwrap();
    assert_eq!((mask.width, mask.height), (256, 256));
}

fn write_labels(path: &Path, labels: &[usize]) {
    let mut text = String::from("sample_id,label,other\n");
    for (i, l) in labels.iter().enumerate() {
        text.push_str(&format!("s{i:03},{l},{}\n", i % 2));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn split_balances_a_rare_positive_class() {
    let tmp = tempfile::tempdir().unwrap();
    let labels: Vec<usize> = (0..109).map(|i| usize::from(i % 3 == 0 && i < 105)).collect();
    assert_eq!(labels.iter().sum::<usize>(), 35);
    let csv = tmp.path().join("labels.csv");
    write_labels(&csv, &labels);
    let out = tmp.path().join("folds.csv");
    let stdout = ok(&["split", s(&csv), "--k", "5", "--seed", "3", "--out", s(&out)]);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("fold,class_0,class_1"));
    for line in lines {
        assert_eq!(line.split(',').nth(2), Some("7"), "{stdout}");
    }
    let folds = fs::read_to_string(&out).unwrap();
    assert!(folds.starts_with("sample_id,fold\n"));
    assert_eq!(folds.lines().count(), 110);

    let again = tmp.path().join("again.csv");
    ok(&["split", s(&csv), "--k", "5", "--seed", "3", "--out", s(&again)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());

    ok(&["split", s(&csv), "--column", "other", "--k", "2", "--out", s(&again)]);
}

#[test]
fn split_rejects_more_folds_than_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("labels.csv");
    write_labels(&csv, &[0, 1, 0]);
    let out = tmp.path().join("folds.csv");
    fail(&["split", s(&csv), "--k", "4", "--out", s(&out)]);
    fail(&["split", s(&csv), "--k", "1", "--out", s(&out)]);
    fail(&["split", s(&csv), "--column", "missing", "--out", s(&out)]);
}

fn lesion(w: usize, cells: &[usize]) -> BinaryMask {
    let mut data = vec![0u8; w * w];
    for &c in cells {
        data[c] = 1;
    }
    BinaryMask::from_data(w, w, data).unwrap()
}

fn write_triple(dir: &Path, id: &str, masks: [&BinaryMask; 3]) {
    fs::create_dir_all(dir).unwrap();
    for (class, mask) in ["irma", "na", "nv"].iter().zip(masks) {
        fs::write(dir.join(format!("{id}_{class}.pgm")), pgm::encode_mask(mask, BitDepth::Eight)).unwrap();
    }
}

#[test]
fn evaluate_seg_scores_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    let empty = lesion(8, &[]);
    let a = lesion(8, &[1, 2, 3, 9]);
    let b = lesion(8, &[20, 21, 22, 40, 41]);
    write_triple(&gt, "p1", [&a, &b, &empty]);
    write_triple(&gt, "p2", [&b, &a, &a]);

    let out = ok(&["evaluate-seg", "--pred", s(&gt), "--gt", s(&gt)]);
    let rows = report(&out);
    for r in &rows {
        assert_eq!(r.2, 1.0, "{out}");
    }
    assert_eq!(lookup(&rows, "mdsc", "all"), 1.0);

    let zeros = tmp.path().join("zeros");
    write_triple(&zeros, "p1", [&empty, &empty, &empty]);
    write_triple(&zeros, "p2", [&empty, &empty, &empty]);
    let rows = report(&ok(&["evaluate-seg", "--pred", s(&zeros), "--gt", s(&gt)]));
    assert_eq!(lookup(&rows, "dice", "irma"), 0.0);
    assert_eq!(lookup(&rows, "iou", "nv"), 0.0);

    // half right: dice 0.6 fixture on one class
    let half = tmp.path().join("half");
    let p = lesion(8, &[0, 1, 2, 3]);
    let g = lesion(8, &[1, 2, 3, 4, 5, 6]);
    write_triple(&half, "q", [&p, &p, &p]);
    let half_gt = tmp.path().join("half_gt");
    write_triple(&half_gt, "q", [&g, &g, &g]);
    let out_csv = tmp.path().join("seg.csv");
    ok(&["evaluate-seg", "--pred", s(&half), "--gt", s(&half_gt), "--out", s(&out_csv)]);
    let rows = report(&fs::read_to_string(&out_csv).unwrap());
    assert!((lookup(&rows, "dice", "na") - 0.6).abs() < 1e-6);
    assert!((lookup(&rows, "iou", "na") - 0.6 / 1.4).abs() < 1e-6);

    let partial = tmp.path().join("partial");
    write_triple(&partial, "p1", [&a, &b, &empty]);
    let err = fail(&["evaluate-seg", "--pred", s(&partial), "--gt", s(&gt)]);
    assert!(err.contains("p2"), "{err}");
    fs::remove_file(partial.join("p1_na.pgm")).unwrap();
    write_triple(&partial, "p2", [&a, &b, &empty]);
    let err = fail(&["evaluate-seg", "--pred", s(&partial), "--gt", s(&gt)]);
    assert!(err.contains("p1"), "{err}");
}

#[test]
fn evaluate_seg_reports_fold_spread() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    let pred = tmp.path().join("pred");
    let full = lesion(4, &[0, 1, 2, 3]);
    let part = lesion(4, &[0, 1]);
    write_triple(&gt, "a", [&full, &full, &full]);
    write_triple(&gt, "b", [&full, &full, &full]);
    write_triple(&pred, "a", [&full, &full, &full]);
    write_triple(&pred, "b", [&part, &part, &part]);
    let folds = tmp.path().join("folds.csv");
    fs::write(&folds, "sample_id,fold\na,0\nb,1\n").unwrap();
    let rows = report(&ok(&["evaluate-seg", "--pred", s(&pred), "--gt", s(&gt), "--folds", s(&folds)]));
    let row = rows.iter().find(|r| r.0 == "dice" && r.1 == "irma").unwrap();
    // folds score 1 and 2/3: mean 5/6, standard error (1/3)/sqrt(2)/sqrt(2)
    assert!((row.2 - 5.0 / 6.0).abs() < 1e-6);
    assert!((row.3 - 1.0 / 6.0).abs() < 1e-6, "{row:?}");
    assert_eq!(row.4, 2);
}

fn write_scores(path: &Path, rows: &[[f64; 3]]) {
    let mut text = String::from("sample_id,score_0,score_1,score_2\n");
    for (i, r) in rows.iter().enumerate() {
        text.push_str(&format!("s{i},{},{},{}\n", r[0], r[1], r[2]));
    }
    fs::write(path, text).unwrap();
}

fn write_grades(path: &Path, labels: &[usize]) {
    let mut text = String::from("sample_id,label\n");
    for (i, l) in labels.iter().enumerate() {
        text.push_str(&format!("s{i},{l}\n"));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn evaluate_grade_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.csv");
    let labels = [0, 1, 2, 2, 1, 0, 0];
    write_grades(&gt, &labels);

    let onehot = tmp.path().join("onehot.csv");
    let rows: Vec<[f64; 3]> = labels
        .iter()
        .map(|&l| {
            let mut r = [0.0; 3];
            r[l] = 1.0;
            r
        })
        .collect();
    write_scores(&onehot, &rows);
    let rep = report(&ok(&["evaluate-grade", "--pred", s(&onehot), "--gt", s(&gt)]));
    assert_eq!(lookup(&rep, "qwk", "all"), 1.0);
    assert_eq!(lookup(&rep, "auc", "all"), 1.0);

    let uniform = tmp.path().join("uniform.csv");
    write_scores(&uniform, &vec![[1.0 / 3.0; 3]; labels.len()]);
    let rep = report(&ok(&["evaluate-grade", "--pred", s(&uniform), "--gt", s(&gt)]));
    assert_eq!(lookup(&rep, "auc", "all"), 0.5);

    let gt2 = tmp.path().join("gt2.csv");
    write_grades(&gt2, &[0, 2]);
    let swapped = tmp.path().join("swapped.csv");
    write_scores(&swapped, &[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
    let rep = report(&ok(&["evaluate-grade", "--pred", s(&swapped), "--gt", s(&gt2)]));
    assert_eq!(lookup(&rep, "qwk", "all"), -1.0);

    let short = tmp.path().join("short.csv");
    write_scores(&short, &rows[..3]);
    let err = fail(&["evaluate-grade", "--pred", s(&short), "--gt", s(&gt)]);
    assert!(err.contains("s3"), "{err}");
}

#[test]
fn ensemble_seg_averages_probability_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let (m1, m2) = (tmp.path().join("m1"), tmp.path().join("m2"));
    let map = |v: [f32; 4]| GrayImage::from_data(2, 2, v.to_vec()).unwrap();
    for (dir, maps) in [
        (&m1, [map([0.6, 1.0, 0.0, 0.2]), map([0.4; 4]), map([1.0; 4])]),
        (&m2, [map([0.3, 1.0, 1.0, 0.2]), map([0.6; 4]), map([0.0; 4])]),
    ] {
        fs::create_dir_all(dir).unwrap();
        for (class, m) in ["irma", "na", "nv"].iter().zip(&maps) {
            fs::write(dir.join(format!("x_{class}.pgm")), pgm::encode_image(m, BitDepth::Sixteen)).unwrap();
        }
    }
    let out = tmp.path().join("out");
    ok(&["ensemble", "--mode", "seg", "--out", s(&out), s(&m1), s(&m2)]);
    let irma = pgm::read_mask(&out.join("x_irma.pgm")).unwrap();
    assert_eq!(irma.data, [0, 1, 1, 0]);
    let na = pgm::read_mask(&out.join("x_na.pgm")).unwrap();
    assert_eq!(na.data, [1, 1, 1, 1]);
    let nv = pgm::read_mask(&out.join("x_nv.pgm")).unwrap();
    assert_eq!(nv.data, [1, 1, 1, 1]);

    let strict = tmp.path().join("strict");
    ok(&["ensemble", "--mode", "seg", "--threshold", "0.6", "--out", s(&strict), s(&m1), s(&m2)]);
    assert_eq!(pgm::read_mask(&strict.join("x_nv.pgm")).unwrap().data, [0, 0, 0, 0]);

    fail(&["ensemble", "--mode", "seg", "--threshold", "1.5", "--out", s(&strict), s(&m1)]);
}

#[test]
fn ensemble_reg_averages_score_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    write_scores(&a, &[[1.0, 2.0, 3.0], [0.0, 0.5, 1.0]]);
    write_scores(&b, &[[3.0, 2.0, 1.0], [1.0, 0.5, 0.0]]);
    let out = tmp.path().join("mean.csv");
    ok(&["ensemble", "--mode", "reg", "--out", s(&out), s(&a), s(&b)]);
    let mean = fs::read_to_string(&out).unwrap();
    assert_eq!(mean, "sample_id,score_0,score_1,score_2\ns0,2,2,2\ns1,0.5,0.5,0.5\n");

    let out2 = tmp.path().join("mean2.csv");
    ok(&["ensemble", "--mode", "reg", "--out", s(&out2), s(&b), s(&a)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());

    let c = tmp.path().join("c.csv");
    write_scores(&c, &[[1.0, 2.0, 3.0]]);
    fail(&["ensemble", "--mode", "reg", "--out", s(&out), s(&a), s(&c)]);
}

#[test]
fn dump_forest_lists_nodes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("svc.txt");
    ok(&["dump-forest", "--seed", "9", "--layer", "svc", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# layer=svc"));
    let mut roots = 0;
    let mut nodes = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 6);
        assert_eq!(f[0], nodes.to_string());
        if f[1] == "-1" {
            roots += 1;
        }
        let r: f64 = f[5].parse().unwrap();
        assert!(r > 0.0);
        nodes += 1;
    }
    assert!(roots >= 1 && nodes > 1000);
    let all = ok(&["dump-forest", "--seed", "9"]);
    assert!(all.contains("# layer=svc") && all.contains("# layer=dvc"));
    assert!(all.starts_with(&text));
}
