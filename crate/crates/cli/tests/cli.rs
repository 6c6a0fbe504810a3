use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowtts(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtts"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn field<'a>(out: &'a str, key: &str) -> &'a str {
    out.split_whitespace()
        .find_map(|w| w.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
}

const SMALL: &str = "log_every = 1\n[model]\ndit_layers = 1\ndit_dim = 16\nheads = 2\nconvnext_layers = 1\nconvnext_dim = 8\n[training]\nbatch_size = 3\nwarmup_updates = 2\ntotal_updates = 20\n";

/// Writes the small config and a 30-utterance corpus.
fn setup(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok(flowtts(&["gen-corpus", "--out", "corpus", "--count", "30"], dir));
}

#[test]
fn gen_corpus_is_deterministic_and_counts_rows() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(flowtts(&["gen-corpus", "--out", "a", "--count", "12", "--seed", "5"], d.path()));
    assert_eq!(field(&out, "count"), "12");
    assert_eq!(field(&out, "noise_sigma"), "0.05");
    ok(flowtts(&["gen-corpus", "--out", "b", "--count", "12", "--seed", "5"], d.path()));
    let manifest = fs::read_to_string(d.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 13);
    for entry in walk(&d.path().join("a")) {
        let rel = entry.strip_prefix(d.path().join("a")).unwrap();
        assert_eq!(fs::read(&entry).unwrap(), fs::read(d.path().join("b").join(rel)).unwrap(), "{rel:?}");
    }

    let again = flowtts(&["gen-corpus", "--out", "a", "--count", "3"], d.path());
    assert_eq!(again.status.code(), Some(2));
    ok(flowtts(&["gen-corpus", "--out", "a", "--count", "3", "--force"], d.path()));
    assert_eq!(fs::read_to_string(d.path().join("a/manifest.tsv")).unwrap().lines().count(), 4);

    ok(flowtts(&["gen-corpus", "--out", "empty", "--count", "0"], d.path()));
    assert_eq!(fs::read_to_string(d.path().join("empty/manifest.tsv")).unwrap().lines().count(), 1);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn loss_lines(out: &str) -> Vec<String> {
    out.lines().filter(|l| l.starts_with("update=")).map(str::to_owned).collect()
}

#[test]
fn training_writes_checkpoints_and_resume_matches() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    setup(p);
    ok(flowtts(&["train", "--config", "small.toml", "--corpus", "corpus", "--out", "init", "--updates", "0"], p));
    assert!(p.join("init/final.ckpt").exists());
    assert!(p.join("init/run.toml").exists());

    let full = ok(flowtts(&["train", "--config", "small.toml", "--corpus", "corpus", "--out", "full", "--updates", "6"], p));
    let full = loss_lines(&full);
    assert_eq!(full.len(), 6);
    assert!(p.join("full/best.ckpt").exists());
    ok(flowtts(&["train", "--config", "small.toml", "--corpus", "corpus", "--out", "half", "--updates", "3"], p));
    let rest = ok(flowtts(
        &["train", "--config", "small.toml", "--corpus", "corpus", "--out", "rest", "--updates", "6", "--resume", "half/final.ckpt"],
        p,
    ));
    assert_eq!(loss_lines(&rest), full[3..].to_vec());
    assert_eq!(
        fs::read(p.join("full/final.ckpt")).unwrap(),
        fs::read(p.join("rest/final.ckpt")).unwrap()
    );
}

#[test]
fn inference_counts_and_reproduces() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    setup(p);
    ok(flowtts(&["train", "--config", "small.toml", "--corpus", "corpus", "--out", "ck", "--updates", "2"], p));
    let run = |cfg: &str, out: &str| {
        ok(flowtts(
            &[
                "infer", "--checkpoint", "ck/final.ckpt", "--corpus", "corpus", "--prompt-id", "utt000003",
                "--gen-text", "abca", "--nfe", "16", "--solver", "euler", "--sway", "-1.0", "--cfg", cfg, "--seed",
                "4", "--out", out,
            ],
            p,
        ))
    };
    let guided = run("2.0", "g1.f32");
    let plain = run("0", "g2.f32");
    let e_guided: usize = field(&guided, "evaluations").parse().unwrap();
    let e_plain: usize = field(&plain, "evaluations").parse().unwrap();
    assert_eq!(e_guided, 32);
    assert_eq!(e_guided, 2 * e_plain);
    run("2.0", "g3.f32");
    assert_eq!(fs::read(p.join("g1.f32")).unwrap(), fs::read(p.join("g3.f32")).unwrap());
    assert!(guided.contains("sway=-1 solver=euler cfg=2"));

    let too_long = flowtts(
        &["infer", "--checkpoint", "ck/final.ckpt", "--corpus", "corpus", "--gen-text", "abcdef", "--duration", "3", "--out", "x.f32"],
        p,
    );
    assert_eq!(too_long.status.code(), Some(1));
}

#[test]
fn leak_override_reports_and_validates() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    setup(p);
    ok(flowtts(&["train", "--config", "small.toml", "--corpus", "corpus", "--out", "ck", "--updates", "1"], p));
    let args = ["leak-override", "--checkpoint", "ck/final.ckpt", "--corpus", "corpus", "--target-text", "abcd", "--leak-text", "dcba", "--out", "l.f32"];
    let out = ok(flowtts(&args, p));
    assert!(out.contains("t_prime=0.1"), "{out}");
    assert_eq!(field(&out, "evaluations"), field(&out, "expected"));
    assert!(out.contains("target_slots=") && out.contains("leak_slots="));
    let mut bad = args.to_vec();
    bad.extend(["--t-prime", "1.5"]);
    assert_eq!(flowtts(&bad, p).status.code(), Some(2));
}

#[test]
fn verify_and_schedule_surface() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let out = ok(flowtts(&["verify", "solvers"], p));
    for name in ["order_euler", "order_midpoint", "order_heun3"] {
        assert!(out.contains(&format!("check=solvers.{name} ")), "{out}");
    }
    assert!(out.lines().filter(|l| l.starts_with("check=")).all(|l| l.ends_with("verdict=pass")));
    let unknown = flowtts(&["verify", "bogus"], p);
    assert_eq!(unknown.status.code(), Some(2));
    let err = String::from_utf8_lossy(&unknown.stderr);
    assert!(err.contains("sway, solvers, gradcheck, identities, e2e"), "{err}");

    let sched = ok(flowtts(&["schedule", "--nfe", "32", "--sway", "-1", "--t-prime", "0.1"], p));
    assert_eq!(field(&sched, "nfe_count"), "64");
    assert_eq!(field(&sched, "start_index"), "10");
    assert_eq!(sched.lines().filter(|l| l.starts_with("step ")).count(), 33);
    assert_eq!(flowtts(&["schedule", "--nfe", "7", "--solver", "midpoint"], p).status.code(), Some(2));

    fs::write(p.join("bad.toml"), "[sampler]\nsteps = 3\n").unwrap();
    assert_eq!(flowtts(&["schedule", "--config", "bad.toml"], p).status.code(), Some(2));
    assert_eq!(flowtts(&["train", "--corpus", "missing", "--out", "x"], p).status.code(), Some(2));
}
