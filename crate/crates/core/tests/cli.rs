mod common;

use std::process::{Command, Output};

use vmenclave::harness::image::{EnclaveImage, IMAGE_HEADER_LEN};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmenclave")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let script = common::scenario_dir().join("wallet.scn");
    let mut traces = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("t{i}.jsonl"));
        let out = cli(&["run", script.to_str().unwrap(), "--trace", path.to_str().unwrap(), "--seed", "9"]);
        assert!(out.status.success(), "{}", stdout(&out));
        assert!(stdout(&out).contains("verdict: pass"));
        traces.push(std::fs::read(&path).unwrap());
    }
    assert!(!traces[0].is_empty());
    assert_eq!(traces[0], traces[1]);
    for line in String::from_utf8(traces.remove(0)).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for field in ["step", "pcpu", "vcpu", "event", "detail", "ledger"] {
            assert!(v.get(field).is_some(), "{field} missing in {line}");
        }
    }
}

#[test]
fn run_several_in_parallel_with_per_scenario_traces() {
    let dir = tempfile::tempdir().unwrap();
    let scripts: Vec<String> = ["wallet.scn", "adversary.scn", "preemption.scn"]
        .iter()
        .map(|s| common::scenario_dir().join(s).to_string_lossy().into_owned())
        .collect();
    let mut args = vec!["run", "--jobs", "3", "--trace", dir.path().to_str().unwrap()];
    args.extend(scripts.iter().map(String::as_str));
    let out = cli(&args);
    assert!(out.status.success(), "{}", stdout(&out));
    // reports come back in argument order
    let text = stdout(&out);
    let at = |n: &str| text.find(&format!("scenario {n} ")).unwrap();
    assert!(at("wallet") < at("adversary") && at("adversary") < at("preemption"));
    for name in ["wallet", "adversary", "preemption"] {
        assert!(dir.path().join(format!("{name}.jsonl")).metadata().unwrap().len() > 0);
    }
}

#[test]
fn failing_scenario_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.scn");
    std::fs::write(&path, "create e echo mem=3\ninvoke e 0 str:a\nexpect done str:b\n").unwrap();
    let out = cli(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&path, "nonsense\n").unwrap();
    assert_eq!(cli(&["run", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn pack_image_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let blob = dir.path().join("blob.bin");
    let image = dir.path().join("ta.beim");
    std::fs::write(&blob, b"TA:echo\0").unwrap();
    let out = cli(&[
        "pack-image", "--mem-pages", "5", "--channel-pages", "2", "--code", blob.to_str().unwrap(), "-o",
        image.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&image).unwrap();
    let mut want = b"BEIM".to_vec();
    want.extend(1u16.to_le_bytes());
    want.extend(5u32.to_le_bytes());
    want.extend(2u32.to_le_bytes());
    want.extend(0u32.to_le_bytes());
    want.extend(8u32.to_le_bytes());
    assert_eq!(want.len(), IMAGE_HEADER_LEN);
    want.extend(b"TA:echo\0");
    assert_eq!(bytes, want);
    assert_eq!(EnclaveImage::load(&image).unwrap().mem_size_pages, 5);

    // a packed image runs from a scenario
    let script = dir.path().join("load.scn");
    std::fs::write(&script, "load e ta.beim\ninvoke e 0 str:hi\nexpect done str:hi\ndestroy e\n").unwrap();
    let out = cli(&["run", script.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stdout(&out));
}

#[test]
fn pack_image_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.beim");
    let o = cli(&["pack-image", "--mem-pages", "0", "--channel-pages", "1", "--program", "echo", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let o = cli(&["pack-image", "--mem-pages", "1", "--channel-pages", "1", "-o", out.to_str().unwrap()]);
    assert!(!o.status.success(), "code or program is required");
}

#[test]
fn attack_bench_fuzz_pass() {
    let out = cli(&["attack"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert_eq!(stdout(&out).matches("contained:").count(), 5);

    let out = cli(&["bench", "--pages", "16,64", "--reps", "3"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("invoke < create < destroy: true"));

    let out = cli(&["fuzz", "--ops", "300", "--seed", "5", "--json"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ops_run"], 300);
    assert!(v["failure"].is_null());
}

#[test]
fn bench_rejects_zero_pages() {
    assert_eq!(cli(&["bench", "--pages", "0,16"]).status.code(), Some(2));
}
