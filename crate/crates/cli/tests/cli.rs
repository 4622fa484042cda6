use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "preset = desk
variant = SA
target = VOCODER
lstm_dim = 8
attention_rnn_dim = 8
attention_dim = 8
decoder_lstm_dim = 8
encoder_sa_dim = 8
decoder_sa_dim = 8
batch_size = 4
val_interval = 2
checkpoint_interval = 2
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ja-tacotron")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn p(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn corpus(&self, n: usize) -> String {
        ok(&["gen-corpus", "--seed", "2", "--n", &n.to_string(), "--out", &self.p("corpus")]);
        std::fs::write(self.path("tiny.cfg"), TINY).unwrap();
        self.p("corpus")
    }

    fn train(&self, out: &str, steps: u64, resume: Option<&str>) -> Output {
        let steps = steps.to_string();
        let (cfg, corpus, out) = (self.p("tiny.cfg"), self.p("corpus"), self.p(out));
        let mut args = vec!["train", "--config", &cfg, "--corpus", &corpus, "--out", &out, "--steps", &steps];
        if let Some(r) = resume {
            args.extend(["--resume", r]);
        }
        run(&args)
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_corpus_splits_by_order_and_is_reproducible() {
    let w = Work::new();
    let say = ok(&["gen-corpus", "--seed", "5", "--n", "200", "--out", &w.p("a")]);
    assert!(say.contains("200 utterances, split 180/10/10"), "{say}");
    ok(&["gen-corpus", "--seed", "5", "--n", "200", "--out", &w.p("b")]);
    assert_eq!(read(w.path("a/corpus.atnc")), read(w.path("b/corpus.atnc")));
    let manifest: serde_json::Value = serde_json::from_slice(&read(w.path("a/manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "gen-corpus");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["corpus"]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn an_existing_run_directory_is_refused() {
    let w = Work::new();
    w.corpus(4);
    let before = read(w.path("corpus/corpus.atnc"));
    let out = run(&["gen-corpus", "--seed", "9", "--n", "4", "--out", &w.p("corpus")]);
    assert_eq!(code(&out), 1);
    assert_eq!(read(w.path("corpus/corpus.atnc")), before);
}

#[test]
fn usage_errors_exit_1_and_write_nothing() {
    let w = Work::new();
    w.corpus(6);
    assert_eq!(code(&run(&["train", "--config", &w.p("tiny.cfg")])), 1);
    assert_eq!(code(&run(&["bogus"])), 1);

    std::fs::write(w.path("bad.cfg"), format!("{TINY}colour = red\nlstm_dim = x\n")).unwrap();
    let out =
        run(&["train", "--config", &w.p("bad.cfg"), "--corpus", &w.p("corpus"), "--out", &w.p("run"), "--steps", "1"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("colour") && err.contains("lstm_dim"), "{err}");
    assert!(!w.path("run").exists());

    let out =
        run(&["train", "--config", &w.p("tiny.cfg"), "--corpus", &w.p("nope"), "--out", &w.p("run"), "--steps", "1"]);
    assert_eq!(code(&out), 1);
    assert!(!w.path("run").exists());

    std::fs::create_dir(w.path("empty")).unwrap();
    let out = run(&["eval", "--pred-dir", &w.p("empty"), "--ref-corpus", &w.p("corpus"), "--report", &w.p("rep")]);
    assert_eq!(code(&out), 1);
    assert!(!w.path("rep").exists());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let w = Work::new();
    w.corpus(30);
    assert!(w.train("whole", 6, None).status.success());
    assert!(w.train("first", 4, None).status.success());
    let ckpt = w.p("first/step000004.ckpt");
    let out = w.train("rest", 6, Some(&ckpt));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(w.path("whole/final.ckpt")), read(w.path("rest/final.ckpt")));

    let rows = |p: &str| String::from_utf8(read(w.path(p))).unwrap().lines().map(str::to_string).collect::<Vec<_>>();
    let whole = rows("whole/metrics.csv");
    let rest = rows("rest/metrics.csv");
    assert_eq!(whole.len(), 7);
    assert_eq!(rest[0], whole[0]);
    assert_eq!(&rest[1..], &whole[5..]);

    // Resuming past the requested total is a usage error.
    assert_eq!(code(&w.train("late", 3, Some(&ckpt))), 1);
    let cfg = String::from_utf8(read(w.path("whole/config.txt"))).unwrap();
    assert!(cfg.contains("lstm_dim = 8"));
}

#[test]
fn synth_and_eval_produce_a_deterministic_report() {
    let w = Work::new();
    w.corpus(40);
    assert!(w.train("run", 2, None).status.success());
    let ckpt = w.p("run/final.ckpt");
    for mode in ["free", "forced", "teacher"] {
        let dir = w.p(&format!("syn_{mode}"));
        ok(&["synth", "--ckpt", &ckpt, "--input", &w.p("corpus"), "--mode", mode, "--out", &dir, "--split", "test"]);
        let index = String::from_utf8(read(Path::new(&dir).join("synth.csv"))).unwrap();
        let rows: Vec<&str> = index.lines().skip(1).collect();
        assert_eq!(rows.len(), 2, "{index}");
        for row in rows {
            let id = row.split(',').next().unwrap();
            assert!(Path::new(&dir).join(format!("{id}.feat")).exists());
            assert!(Path::new(&dir).join(format!("{id}_lstm_memory.csv")).exists());
            assert!(row.to_lowercase().contains(mode));
        }
    }
    for rep in ["rep_a", "rep_b"] {
        ok(&["eval", "--pred-dir", &w.p("syn_forced"), "--ref-corpus", &w.p("corpus"), "--report", &w.p(rep)]);
    }
    for f in ["alignment_errors.csv", "f0_metrics.csv", "boundaries.txt", "sa_pairs_head0.csv", "summary.txt"] {
        assert_eq!(read(w.path("rep_a").join(f)), read(w.path("rep_b").join(f)), "{f}");
    }
    let summary = String::from_utf8(read(w.path("rep_a/summary.txt"))).unwrap();
    for section in ["[alignment]", "[f0]", "[boundaries]", "[self_attention]"] {
        assert!(summary.contains(section), "{summary}");
    }
}
