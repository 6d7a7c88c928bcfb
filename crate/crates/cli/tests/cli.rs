use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn lightvit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightvit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_ppm(path: &Path, h: usize, w: usize, fill: impl Fn(usize) -> u8) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..h * w * 3).map(fill));
    fs::write(path, bytes).unwrap();
}

#[test]
fn describe_tiny_prints_stage_rows() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["describe", "--variant", "T"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("S2")).unwrap();
    let fields: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(fields, ["S2", "stride=1/16", "B=6", "C=128", "H=4", "T=8"]);
}

#[test]
fn describe_small_reports_sixteen_tokens() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["describe", "-v", "S"], dir.path());
    assert!(stdout(&o).lines().filter(|l| l.starts_with('S')).all(|l| l.ends_with("T=16")));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["describe", "-v", "huge"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("T, S, B"));
}

#[test]
fn bad_flag_is_a_usage_error() {
    let dir = tempdir().unwrap();
    assert_eq!(lightvit(&["describe", "--frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(lightvit(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn analyze_prints_budget_footnote() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["analyze", "-v", "T"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("9.4M params / 0.73G MACs"), "{out}");
}

#[test]
fn structured_sweep_is_monotone_from_zero() {
    let dir = tempdir().unwrap();
    let o = lightvit(
        &["analyze", "-v", "T", "--format", "structured", "--sweep-global-tokens", "0,2,4,8,16,32"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let flops: Vec<u64> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("sweep.") && l.contains(".flops"))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(flops.len(), 6);
    assert!(flops.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn attention_core_quadruples_at_double_resolution() {
    let dir = tempdir().unwrap();
    let core = |res: &str| -> u64 {
        let o = lightvit(&["analyze", "-v", "T", "--resolution", res], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        let line = out.lines().find(|l| l.starts_with("attention core MACs")).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    assert_eq!(core("448"), 4 * core("224"));
}

#[test]
fn non_divisible_resolution_is_a_config_error() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["analyze", "-v", "T", "--resolution", "200"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("multiple of 32"));
}

#[test]
fn init_is_deterministic_per_seed() {
    let dir = tempdir().unwrap();
    for (seed, name) in [("4", "a.lvwt"), ("4", "b.lvwt"), ("5", "c.lvwt")] {
        let o = lightvit(&["init", "-v", "reduced", "--seed", seed, "--out", name], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.lvwt"), read("b.lvwt"));
    assert_ne!(read("a.lvwt"), read("c.lvwt"));
}

#[test]
fn forward_on_zero_image_is_repeatable() {
    let dir = tempdir().unwrap();
    let p = dir.path();
    assert!(lightvit(&["init", "-v", "reduced", "--out", "w.lvwt"], p).status.success());
    write_ppm(&p.join("zero.ppm"), 32, 32, |_| 0);
    for out in ["l1.lvwt", "l2.lvwt"] {
        let o = lightvit(&["forward", "--weights", "w.lvwt", "--image", "zero.ppm", "--out", out], p);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let l1 = fs::read(p.join("l1.lvwt")).unwrap();
    assert_eq!(l1, fs::read(p.join("l2.lvwt")).unwrap());
    let logits: lightvit::Tensor<f32> = lightvit::serialization::read_tensor(p.join("l1.lvwt")).unwrap();
    assert_eq!(logits.shape(), &[10]);
}

#[test]
fn forward_writes_stage_dumps() {
    let dir = tempdir().unwrap();
    let p = dir.path();
    assert!(lightvit(&["init", "-v", "reduced", "--out", "w.lvwt"], p).status.success());
    write_ppm(&p.join("img.ppm"), 32, 64, |i| (i * 13 % 256) as u8);
    let o = lightvit(&["forward", "--weights", "w.lvwt", "--image", "img.ppm", "--out", "feats", "--features"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let shape = |n: &str| -> Vec<usize> {
        lightvit::serialization::read_tensor::<f32>(p.join("feats").join(n)).unwrap().shape().to_vec()
    };
    assert_eq!(shape("stage1.lvwt"), [4, 8, 8]);
    assert_eq!(shape("stage2.lvwt"), [2, 4, 16]);
    assert_eq!(shape("stage3.lvwt"), [1, 2, 32]);
    assert_eq!(shape("global.lvwt"), [2, 32]);
}

#[test]
fn forward_accepts_tensor_dump_images() {
    let dir = tempdir().unwrap();
    let p = dir.path();
    assert!(lightvit(&["init", "-v", "reduced", "--out", "w.lvwt"], p).status.success());
    let img = lightvit::Tensor::<f32>::zeros(&[3, 32, 32]).unwrap();
    lightvit::serialization::dump_tensor(&img, p.join("img.lvwt")).unwrap();
    let o = lightvit(&["forward", "--weights", "w.lvwt", "--image", "img.lvwt", "--out", "l.lvwt"], p);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn forward_error_exit_codes() {
    let dir = tempdir().unwrap();
    let p = dir.path();
    assert!(lightvit(&["init", "-v", "reduced", "--out", "w.lvwt"], p).status.success());
    write_ppm(&p.join("img.ppm"), 32, 32, |_| 7);
    write_ppm(&p.join("odd.ppm"), 40, 32, |_| 7);
    fs::write(p.join("junk.ppm"), b"P6\n32 32\n255\nshort").unwrap();

    let mismatch = lightvit(
        &["forward", "--weights", "w.lvwt", "--image", "img.ppm", "--out", "l", "--expect-variant", "T"],
        p,
    );
    assert_eq!(mismatch.status.code(), Some(3));
    assert!(stderr(&mismatch).contains("digest"));

    let missing = lightvit(&["forward", "--weights", "w.lvwt", "--image", "none.ppm", "--out", "l"], p);
    assert_eq!(missing.status.code(), Some(4));
    let unreadable = lightvit(&["forward", "--weights", "w.lvwt", "--image", "junk.ppm", "--out", "l"], p);
    assert_eq!(unreadable.status.code(), Some(4));
    let odd = lightvit(&["forward", "--weights", "w.lvwt", "--image", "odd.ppm", "--out", "l"], p);
    assert_eq!(odd.status.code(), Some(3));
}

#[test]
fn gradcheck_passes_on_reduced_config() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["gradcheck", "--seed", "3", "--eps", "1e-5"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("stages.0.blocks.0.attn"));
}

#[test]
fn gradcheck_fails_with_code_five_above_threshold() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["gradcheck", "--eps", "1e-1", "--threshold", "1e-9"], dir.path());
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn bench_totals_match_analyze() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["--deterministic", "bench", "-v", "reduced", "--resolution", "32", "--repeats", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let segments: Vec<&str> = out.lines().skip(2).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(segments, ["stem", "stage1", "stage2", "stage3", "head", "total"]);
    let total = out.lines().last().unwrap().split_whitespace().nth(1).unwrap().to_string();
    let a = lightvit(&["analyze", "-v", "reduced", "--resolution", "32", "--format", "structured"], dir.path());
    assert!(stdout(&a).contains(&format!("total.flops = {total}\n")));
    let short = lightvit(&["bench", "-v", "reduced", "--resolution", "32", "--repeats", "2"], dir.path());
    assert_eq!(short.status.code(), Some(2));
}

#[test]
fn toggles_reach_the_model() {
    let dir = tempdir().unwrap();
    let o = lightvit(&["analyze", "-v", "T", "--no-global", "--no-spatial-attn", "--no-channel-attn", "--format", "structured"], dir.path());
    let out = stdout(&o);
    assert!(out.contains("global_tokens.params = 0\n"));
    assert!(!out.contains("aggregate_core"));
    assert!(!out.contains("bidim"));
    let none = lightvit(&["describe", "--no-local", "--no-global"], dir.path());
    assert_eq!(none.status.code(), Some(3));
    let zero = lightvit(&["describe", "--global-tokens", "0"], dir.path());
    assert!(stdout(&zero).contains("T=0"));
}

#[test]
fn thread_env_var_is_validated() {
    let dir = tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lightvit"))
        .args(["describe"])
        .env("LIGHTVIT_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let ok = Command::new(env!("CARGO_BIN_EXE_lightvit"))
        .args(["describe"])
        .env("LIGHTVIT_THREADS", "2")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(ok.status.success());
}
