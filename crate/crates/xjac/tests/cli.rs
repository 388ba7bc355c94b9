//! End-to-end tests of the xjac command-line interface: file outputs,
//! manifests, exit codes, and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xjac::attribution::AttributionOutput;
use xjac::train::synthetic_corpus;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_xjac")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("failed to spawn xjac")
}

fn write_corpus_tsv(dir: &Path, name: &str, n: usize, grades: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    let mut text = String::new();
    for pair in synthetic_corpus(n, grades, seed) {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            pair.text_a, pair.text_b, pair.label
        ));
    }
    std::fs::write(&path, text).unwrap();
    path
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "encoder": {"arch": "transformer", "dim": 8, "layers": 2, "heads": 2,
              "out_dim": 8, "max_seq": 16, "activation": "gelu",
              "pooling": "mean", "adjusted": true},
  "train": {"epochs": 2, "batch_size": 8, "learning_rate": 0.001,
            "weight_decay": 0.1, "warmup_fraction": 0.1,
            "objective": "dot", "seed": 7}
}"#,
    )
    .unwrap();
    path
}

fn train_tiny_model(dir: &Path) -> PathBuf {
    let data = write_corpus_tsv(dir, "train.tsv", 64, 5, 42);
    let config = tiny_config(dir);
    let model = dir.join("model.json");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    model
}

#[test]
fn train_writes_checkpoint_loss_trace_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny_model(dir.path());
    assert!(model.exists());
    assert!(dir.path().join("model.json.loss.csv").exists());
    assert!(dir.path().join("model.json.manifest.json").exists());

    let loss = std::fs::read_to_string(dir.path().join("model.json.loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,mean_loss\n"));
    assert_eq!(loss.lines().count(), 3); // header + 2 epochs

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("model.json.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn train_prints_loss_and_both_spearman_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_corpus_tsv(dir.path(), "train.tsv", 64, 5, 43);
    let config = tiny_config(dir.path());
    let model = dir.path().join("model.json");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final train loss:"));
    assert!(stdout.contains("eval spearman (cosine):"));
    assert!(stdout.contains("eval spearman (dot):"));
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_corpus_tsv(dir.path(), "train.tsv", 64, 5, 44);
    let config = tiny_config(dir.path());
    let read = |name: &str| -> (Vec<u8>, Vec<u8>) {
        let model = dir.path().join(name);
        let out = run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            model.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        (
            std::fs::read(&model).unwrap(),
            std::fs::read(dir.path().join(format!("{name}.loss.csv"))).unwrap(),
        )
    };
    let (model_a, loss_a) = read("a.json");
    let (model_b, loss_b) = read("b.json");
    assert_eq!(model_a, model_b, "checkpoints differ between reruns");
    assert_eq!(loss_a, loss_b, "loss traces differ between reruns");
}

#[test]
fn cosine_with_shifted_scoring_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_corpus_tsv(dir.path(), "train.tsv", 16, 2, 45);
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--objective",
        "cosine",
        "--shifted",
        "true",
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("zero"), "stderr: {stderr}");
}

#[test]
fn attribute_writes_json_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny_model(dir.path());
    let attr = dir.path().join("attr.json");
    let svg = dir.path().join("attr.svg");
    let out = run(&[
        "attribute",
        "--model",
        model.to_str().unwrap(),
        "--text-a",
        "anchor basil cedar",
        "--text-b",
        "anchor delta",
        "--layer",
        "2",
        "--steps",
        "1",
        "--out",
        attr.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "attribute failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let parsed =
        AttributionOutput::from_json_str(&std::fs::read_to_string(&attr).unwrap()).unwrap();
    assert_eq!(parsed.tokens_a, vec!["anchor", "basil", "cedar"]);
    assert_eq!(parsed.tokens_b, vec!["anchor", "delta"]);
    assert_eq!(parsed.matrix.rows(), 3);
    assert_eq!(parsed.matrix.cols(), 2);
    // Output-representation attribution is exact at one step.
    assert!(parsed.error <= 1e-10);

    let svg_text = std::fs::read_to_string(&svg).unwrap();
    assert!(svg_text.starts_with("<svg"));
    assert!(svg_text.contains("anchor"));
    assert!(dir.path().join("attr.json.manifest.json").exists());
}

#[test]
fn attribute_error_decreases_with_steps_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny_model(dir.path());
    let run_attr = |steps: &str, name: &str| -> AttributionOutput {
        let path = dir.path().join(name);
        let out = run(&[
            "attribute",
            "--model",
            model.to_str().unwrap(),
            "--text-a",
            "anchor basil cedar delta",
            "--text-b",
            "ember falcon anchor",
            "--layer",
            "1",
            "--steps",
            steps,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        AttributionOutput::from_json_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
    };
    let coarse = run_attr("50", "n50.json");
    let fine = run_attr("500", "n500.json");
    assert!(
        fine.error <= coarse.error + 1e-15,
        "{} vs {}",
        fine.error,
        coarse.error
    );

    let again = run_attr("50", "n50b.json");
    assert_eq!(
        std::fs::read(dir.path().join("n50.json")).unwrap(),
        std::fs::read(dir.path().join("n50b.json")).unwrap(),
        "attribute output not byte-reproducible"
    );
    assert_eq!(again.error, coarse.error);
}

#[test]
fn sweep_emits_ordered_csv_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny_model(dir.path());
    let data = write_corpus_tsv(dir.path(), "pairs.tsv", 6, 5, 46);
    let out_path = dir.path().join("sweep.csv");
    let args = [
        "sweep",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--layers",
        "1,2",
        "--steps",
        "5,25",
        "--pairs",
        "4",
        "--out",
        out_path.to_str().unwrap(),
    ];
    let out = run(&args);
    assert!(
        out.status.success(),
        "sweep failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "layer,steps,mean_abs_error,std_abs_error,mean_rel_error"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,5,"));
    assert!(lines[4].starts_with("2,25,"));
    // Layer 2 of 2 has an affine tail: errors at rounding level.
    let layer2_err: f64 = lines[3].split(',').nth(2).unwrap().parse().unwrap();
    assert!(layer2_err <= 1e-10);

    let first = std::fs::read(&out_path).unwrap();
    let rerun = run(&args);
    assert!(rerun.status.success());
    assert_eq!(
        first,
        std::fs::read(&out_path).unwrap(),
        "sweep CSV differs"
    );
}

fn make_attribution_dir(dir: &Path, model: &Path) -> PathBuf {
    let inputs = dir.join("attvals");
    std::fs::create_dir_all(&inputs).unwrap();
    let pairs = [
        ("anchor basil", "anchor cedar"),
        ("delta ember", "delta falcon"),
        ("garnet harbor", "anchor garnet"),
    ];
    for (i, (a, b)) in pairs.iter().enumerate() {
        let out = run(&[
            "attribute",
            "--model",
            model.to_str().unwrap(),
            "--text-a",
            a,
            "--text-b",
            b,
            "--layer",
            "2",
            "--steps",
            "8",
            "--out",
            inputs.join(format!("pair{i}.json")).to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    inputs
}

#[test]
fn analyze_hist_curve_and_pos_produce_csv() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny_model(dir.path());
    let inputs = make_attribution_dir(dir.path(), &model);

    // Histogram.
    let hist_path = dir.path().join("hist.csv");
    let out = run(&[
        "analyze",
        "hist",
        "--inputs",
        inputs.to_str().unwrap(),
        "--bins",
        "6",
        "--out",
        hist_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "hist failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let hist = std::fs::read_to_string(&hist_path).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,count,negative_fraction\n"));
    assert_eq!(hist.lines().count(), 7);

    // Curve: endpoint column sits at 1 up to the attribution error.
    let curve_path = dir.path().join("curve.csv");
    let out = run(&[
        "analyze",
        "curve",
        "--inputs",
        inputs.to_str().unwrap(),
        "--out",
        curve_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let curve = std::fs::read_to_string(&curve_path).unwrap();
    assert!(curve.starts_with("fraction,mean_cumulative,std_cumulative,endpoint\n"));
    for line in curve.lines().skip(1) {
        let endpoint: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!((endpoint - 1.0).abs() <= 1e-6, "endpoint {endpoint}");
    }

    // POS shares with a hand-made tags file: two sentences per attribution.
    let tags_path = dir.path().join("tags.txt");
    let mut tags_text = String::new();
    let inputs_sorted = {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&inputs)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| !p.to_string_lossy().ends_with(".manifest.json"))
            .collect();
        v.sort();
        v
    };
    for path in &inputs_sorted {
        let parsed =
            AttributionOutput::from_json_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        for tokens in [&parsed.tokens_a, &parsed.tokens_b] {
            for token in tokens {
                tags_text.push_str(&format!("{token}\tNN\n"));
            }
            tags_text.push('\n');
        }
    }
    std::fs::write(&tags_path, tags_text).unwrap();
    let pos_path = dir.path().join("pos.csv");
    let out = run(&[
        "analyze",
        "pos",
        "--inputs",
        inputs.to_str().unwrap(),
        "--tags",
        tags_path.to_str().unwrap(),
        "--fractions",
        "0.25,1.0",
        "--out",
        pos_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "pos failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let pos = std::fs::read_to_string(&pos_path).unwrap();
    let lines: Vec<&str> = pos.lines().collect();
    assert_eq!(lines[0], "fraction,tag_a,tag_b,share");
    // All-NN corpus: one relation per fraction with share 1.
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with("NN,NN,1"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();

    // Usage error: unknown flag.
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));

    // Data error: missing dataset file.
    let out = run(&[
        "train",
        "--data",
        dir.path().join("missing.tsv").to_str().unwrap(),
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Data error with line number: bad label.
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "a\tb\t0.5\nc\td\t1.5\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));

    // Numerical failure: checkpoint with parameters that overflow the
    // forward pass.
    let model = train_tiny_model(dir.path());
    let text = std::fs::read_to_string(&model).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    // Huge positive FFN activations summed through an all-ones projection
    // overflow deterministically inside layer 1.
    for v in doc["params"]["layer_01.ffn.b1"]["data"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
    {
        *v = serde_json::json!(1e308);
    }
    for v in doc["params"]["layer_01.ffn.w2"]["data"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
    {
        *v = serde_json::json!(1.0);
    }
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = run(&[
        "attribute",
        "--model",
        broken.to_str().unwrap(),
        "--text-a",
        "anchor",
        "--text-b",
        "basil",
        "--layer",
        "1",
        "--steps",
        "1",
        "--out",
        dir.path().join("x.json").to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Invalid layer: part of the input validation surface.
    let out = run(&[
        "attribute",
        "--model",
        model.to_str().unwrap(),
        "--text-a",
        "anchor",
        "--text-b",
        "basil",
        "--layer",
        "9",
        "--steps",
        "1",
        "--out",
        dir.path().join("y.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_and_version_exit_zero() {
    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn full_training_run_prints_high_spearman() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_corpus_tsv(dir.path(), "train.tsv", 4096, 5, 1001);
    let eval = write_corpus_tsv(dir.path(), "eval.tsv", 200, 5, 2002);
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "encoder": {"arch": "transformer", "dim": 16, "layers": 3, "heads": 2,
              "out_dim": 16, "max_seq": 16, "activation": "gelu",
              "pooling": "mean", "adjusted": true},
  "train": {"epochs": 5, "batch_size": 8, "learning_rate": 0.001,
            "weight_decay": 0.1, "warmup_fraction": 0.1,
            "objective": "dot", "seed": 7}
}"#,
    )
    .unwrap();
    let model = dir.path().join("model.json");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--eval-data",
        eval.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rho: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("eval spearman (dot): "))
        .expect("dot spearman line")
        .parse()
        .unwrap();
    assert!(rho >= 0.9, "eval spearman {rho} below 0.9\n{stdout}");
}
