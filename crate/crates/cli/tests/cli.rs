use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrlr::align::fiducial_error;
use mrlr::harness::dataset::load_dictionary;
use mrlr::harness::pgm::{load_pgm, save_pgm};
use mrlr::harness::synth::{SynthModel, SynthSpec};
use mrlr::harness::trace::Trace;
use mrlr::{Image, SimilarityParams};

fn mrlr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrlr"))
        .args(args)
        .env_remove("MRLR_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mrlr(args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mrlr(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic dataset with held-out images and its dictionary file.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    dict: PathBuf,
    root: PathBuf,
}

fn fixture(outside: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let dict = root.join("dict.bin");
    let outside = outside.to_string();
    ok(&["synth", "--heldout", "2", "--outside", &outside, "-o", s(&data)]);
    let mut args = vec!["build-dict", s(&data), "--frame", "40x35", "-o", s(&dict)];
    if outside != "0" {
        args.push("--outside");
    }
    ok(&args);
    Fixture { _dir: dir, data, dict, root }
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_the_documented_layout_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--seed", "42", "-o", s(&a)]);
    ok(&["synth", "--seed", "42", "-o", s(&b)]);
    let fa = files_under(&a);
    assert_eq!(fa.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "pgm")).count(), 40);
    assert!(fa.iter().any(|(p, _)| p == Path::new("manifest.txt")));
    assert_eq!(fa, files_under(&b));

    let c = dir.path().join("c");
    ok(&["synth", "--seed", "43", "-o", s(&c)]);
    assert_ne!(fa, files_under(&c));
}

#[test]
fn build_dict_counts_atoms_and_outside_data() {
    let f = fixture(3);
    let d = load_dictionary(&f.dict).unwrap();
    assert_eq!(d.len(), 43);
    assert_eq!(d.outside_count(), 3);
    assert_eq!((d.frame().width, d.frame().height), (40, 35));

    let plain = f.root.join("plain.bin");
    ok(&["build-dict", s(&f.data), "--frame", "40x35", "-o", s(&plain)]);
    assert_eq!(load_dictionary(&plain).unwrap().len(), 40);
}

#[test]
fn align_recovers_a_displaced_face_and_bounds_the_trace() {
    let f = fixture(0);
    let model = SynthModel::new(&SynthSpec::default()).unwrap();
    let (query, truth) = model.query(2, 0, &SimilarityParams::translation(-2.0, 1.5)).unwrap();
    let image = f.root.join("query.pgm");
    save_pgm(&query, &image).unwrap();
    let margin = model.margin().to_string();
    let init = format!("{margin},{margin},40,35");
    let out = f.root.join("aligned.pgm");
    ok(&["align", s(&f.dict), s(&image), "--init", &init, "--max-outer", "3", "--max-inner", "30", "-o", s(&out)]);
    let aligned = load_pgm(&out).unwrap();
    assert_eq!((aligned.width(), aligned.height()), (40, 35));
    let trace = Trace::parse(&fs::read_to_string(f.root.join("aligned.pgm.trace.txt")).unwrap()).unwrap();
    assert!(trace.converged);
    assert!(!trace.records.is_empty() && trace.records.len() <= 3 * 30);
    let err = fiducial_error(&trace.tau_final, &truth, model.frame());
    assert!(err < 1.0, "fiducial error {err}");

    // A frame-sized image with the default initialization.
    let heldout = f.data.join("heldout/2/000.pgm");
    let custom = f.root.join("custom.txt");
    ok(&["align", s(&f.dict), s(&heldout), "--variant", "mrlr1", "--max-outer", "2", "--max-inner", "5", "--trace", s(&custom), "-o", s(&out)]);
    let trace = Trace::parse(&fs::read_to_string(&custom).unwrap()).unwrap();
    assert!(trace.records.len() <= 2 * 5);
    assert!(trace.selected.iter().all(|atoms| atoms.len() == 40));
}

#[test]
fn recognize_reports_the_subject_of_held_out_images() {
    let f = fixture(0);
    let mut correct = 0;
    for subject in 0..5 {
        let image = f.data.join(format!("heldout/{subject}/000.pgm"));
        let text = ok(&["recognize", s(&f.dict), s(&image)]);
        let mut lines = text.lines();
        let predicted: u32 = lines.next().unwrap().strip_prefix("predicted=").unwrap().parse().unwrap();
        assert_eq!(lines.next(), Some("label,residual"));
        let residuals: Vec<(u32, f64)> = lines
            .map(|l| {
                let (a, b) = l.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect();
        assert_eq!(residuals.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let best = residuals.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(predicted, best);
        correct += usize::from(predicted == subject);
    }
    assert!(correct >= 4, "{correct}/5 held-out images recognized");

    let image = f.data.join("heldout/1/001.pgm");
    let text = ok(&["recognize", s(&f.dict), s(&image), "--coder", "src", "--lambda", "0.001"]);
    assert!(text.starts_with("predicted="));
}

#[test]
fn bench_roa_is_deterministic_across_thread_counts() {
    let f = fixture(0);
    let args = [
        "bench-roa",
        s(&f.dict),
        "--axis",
        "tx",
        "--magnitudes",
        "0,0.05,0.1",
        "--trials",
        "6",
        "--seed",
        "3",
    ];
    let first = ok(&args);
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "axis,magnitude,trials,successes,rate");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("tx,0,6,"));
    let threaded = Command::new(env!("CARGO_BIN_EXE_mrlr"))
        .args(args)
        .env("MRLR_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(threaded.stdout).unwrap(), first);

    let out = f.root.join("roa.csv");
    let mut with_output = args.to_vec();
    with_output.extend(["-o", s(&out)]);
    assert_eq!(ok(&with_output), "");
    assert_eq!(fs::read_to_string(&out).unwrap(), first);
}

#[test]
fn bench_scale_rows_cover_both_variants() {
    let text = ok(&[
        "bench-scale",
        "--mode",
        "subjects",
        "--frame",
        "20x18",
        "--samples",
        "3",
        "--subject-counts",
        "2,4",
        "--s",
        "4",
        "--reps",
        "5",
    ]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,m,n,s,mean_ms,std_ms");
    let keys: Vec<String> = lines[1..]
        .iter()
        .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(keys, ["mrlr1,360,6,6", "mrlr2,360,6,4", "mrlr1,360,12,12", "mrlr2,360,12,4"]);
    for l in &lines[1..] {
        let ms: f64 = l.split(',').nth(4).unwrap().parse().unwrap();
        assert!(ms > 0.0);
    }
    assert_eq!(code(&["bench-scale", "--mode", "subjects", "--reps", "2"]), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let f = fixture(0);
    let image = f.data.join("heldout/0/000.pgm");
    let out = f.root.join("o.pgm");
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["align", s(&f.dict), s(&image), "--variant", "mrlr1", "--s", "5", "-o", s(&out)]), 1);
    assert_eq!(code(&["align", s(&f.dict), s(&image), "--variant", "mrlr3", "-o", s(&out)]), 1);
    assert_eq!(code(&["align", s(&f.dict), s(&image), "--init", "1,2,3", "-o", s(&out)]), 1);
    assert_eq!(code(&["bench-roa", s(&f.dict), "--axis", "shear", "--magnitudes", "0.1"]), 1);
    assert_eq!(code(&["recognize", s(&f.dict), s(&image), "--coder", "lasso"]), 1);
    assert_eq!(code(&["build-dict", s(&f.data), "--frame", "40by35", "-o", s(&out)]), 1);
    assert!(!out.exists());
    let stderr = String::from_utf8(mrlr(&["no-such-command"]).stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let f = fixture(0);
    let image = f.data.join("heldout/0/000.pgm");
    let out = f.root.join("o.pgm");
    let missing = f.root.join("missing.bin");
    assert_eq!(code(&["align", s(&missing), s(&image), "-o", s(&out)]), 2);

    let corrupt = f.root.join("corrupt.bin");
    let mut bytes = fs::read(&f.dict).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&corrupt, bytes).unwrap();
    assert_eq!(code(&["align", s(&corrupt), s(&image), "-o", s(&out)]), 2);

    let ascii = f.root.join("ascii.pgm");
    fs::write(&ascii, "P2 1 1 255\n0\n").unwrap();
    assert_eq!(code(&["recognize", s(&f.dict), s(&ascii)]), 2);
    assert_eq!(code(&["build-dict", s(&f.data), "--frame", "40x35", "--outside", "-o", s(&out)]), 2);
    assert!(!out.exists());
}

#[test]
fn numerical_failure_exits_with_three_and_leaves_no_output() {
    let f = fixture(0);
    let black = f.root.join("black.pgm");
    save_pgm(&Image::constant(40, 35, 0.0).unwrap(), &black).unwrap();
    let out = f.root.join("aligned.pgm");
    let output = mrlr(&["align", s(&f.dict), s(&black), "-o", s(&out)]);
    assert_eq!(output.status.code(), Some(3));
    assert!(!out.exists());
    assert!(!f.root.join("aligned.pgm.trace.txt").exists());
    let leftovers: Vec<_> = fs::read_dir(&f.root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn failed_synth_removes_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    assert_ne!(code(&["synth", "--subjects", "0", "-o", s(&out)]), 0);
    assert!(!out.exists());
}
