//! End-to-end determinism gate: every command, re-run with the same
//! config and seed, must reproduce its manifest's artifact checksums
//! bit for bit. Prints a `[PASS]`/`[FAIL]` line per command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_polyomic")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn run(subcommand: &str, config: &Path, overrides: &[&str]) {
    let output = Command::new(bin())
        .arg(subcommand)
        .arg(config)
        .args(overrides)
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "{subcommand} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

fn artifact_hashes(out_dir: &Path) -> BTreeMap<String, String> {
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    manifest["artifacts"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().unwrap().to_string()))
        .collect()
}

/// The manifest must describe the files actually on disk, and a re-run
/// must reproduce the same checksums.
fn check_reproducible(subcommand: &str, config: &Path, dir_a: &Path, dir_b: &Path) {
    run(subcommand, config, &[]);
    run(subcommand, config, &["--out-dir", dir_b.to_str().unwrap()]);
    let hashes_a = artifact_hashes(dir_a);
    let hashes_b = artifact_hashes(dir_b);
    assert!(!hashes_a.is_empty(), "{subcommand} produced no artifacts");
    assert_eq!(hashes_a, hashes_b, "{subcommand} is not reproducible");
    for (name, hash) in &hashes_a {
        let bytes = std::fs::read(dir_a.join(name)).unwrap();
        assert_eq!(
            &sha256_hex(&bytes),
            hash,
            "{subcommand}: manifest hash mismatch for {name}"
        );
    }
    println!("[PASS] 14 {subcommand} reproduces its manifest checksums");
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn config(&self, name: &str, body: serde_json::Value) -> PathBuf {
        let p = self.path(name);
        write(&p, &serde_json::to_string_pretty(&body).unwrap());
        p
    }
}

fn fixture(root: &Path) -> Fixture {
    let f = Fixture {
        root: root.to_path_buf(),
    };
    write(
        &f.path("corpus.fasta"),
        ">prot1 type=protein\nMKVLAATGLVDERKAWQSCFHINPYW\n\
         >prot2 type=protein\nGGSHHLKRRAEDDAMKVLCFINPQTY\n\
         >dna1 type=dna\nACGTACGGTTACCAGTAC\n\
         >dna2 type=dna\nTTGACCAGTACGGTACGT\n",
    );
    // six distinct proteins so 3-fold splitting has room
    let proteins = [
        "MKVLAATGLVDE",
        "GGSHHLKRRAED",
        "CFHINPYWMKVL",
        "DAMKVLCFINPQ",
        "KRRAEDDAMKVL",
        "ATGLVDERKAWQ",
    ];
    let mut pairs = String::from("protein_seq\tna1_seq\tna2_seq\tdg\n");
    let mut contacts = String::new();
    for (i, p) in proteins.iter().enumerate() {
        pairs.push_str(&format!("{p}\tACGTACGTAC\t\t{}\n", -8.0 + i as f64 * 0.7));
        let bits: String = p.chars().map(|c| if "KR".contains(c) { '1' } else { '0' }).collect();
        contacts.push_str(&format!("{i}\t{bits}\n"));
    }
    write(&f.path("pairs.tsv"), &pairs);
    write(&f.path("contacts.tsv"), &contacts);
    write(&f.path("labels.tsv"), "prot1\t0\nprot2\t1\n");
    let mut maps = String::new();
    for (rid, seq) in [("prot1", 26usize), ("prot2", 26)] {
        let bits: String = (0..seq * seq)
            .map(|k| {
                let (i, j) = (k / seq, k % seq);
                if i.abs_diff(j) == 13 {
                    '1'
                } else {
                    '0'
                }
            })
            .collect();
        maps.push_str(&format!("{rid}\t{bits}\n"));
    }
    write(&f.path("maps.tsv"), &maps);
    write(
        &f.path("preds.tsv"),
        "pred\tlabel\n1.0\t2.0\n2.0\t4.0\n3.0\t6.0\n4.0\t8.0\n",
    );
    write(
        &f.path("motifs.jaspar"),
        ">prot1\nA [ 10 0 0 5 2 0 8 1 ]\nC [ 0 12 1 2 3 0 1 2 ]\n\
         G [ 1 0 11 3 2 12 2 1 ]\nT [ 1 0 0 2 5 0 1 8 ]\n",
    );
    write(&f.path("dbp.fasta"), ">prot1 type=protein\nMKVLAATGLVDERKAWQSCFHINPYW\n");
    f
}

#[test]
fn criterion_14_end_to_end_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path());
    let out = |name: &str| f.path(name);
    let s = |p: &Path| p.to_str().unwrap().to_string();

    // tokenizer-train; target equals the corpus protein alphabet size, so
    // protein encoding stays per-character and the L×L map fixture holds
    let cfg = f.config(
        "tok.json",
        serde_json::json!({
            "corpus_fasta": s(&f.path("corpus.fasta")),
            "target_vocab": 20,
            "seed": 7,
            "out_dir": s(&out("tok")),
        }),
    );
    check_reproducible("tokenizer-train", &cfg, &out("tok"), &out("tok2"));
    let vocab = s(&out("tok").join("vocab.txt"));

    // pretrain
    let cfg = f.config(
        "pretrain.json",
        serde_json::json!({
            "corpus_fasta": s(&f.path("corpus.fasta")),
            "vocab": vocab,
            "width": 128,
            "max_len": 64,
            "steps": 4,
            "batch_size": 2,
            "schedule": {"start_end_scale": 1e-5, "warmup_tokens": 50, "total_tokens": 1000},
            "seed": 7,
            "out_dir": s(&out("pre")),
        }),
    );
    check_reproducible("pretrain", &cfg, &out("pre"), &out("pre2"));
    let checkpoint = s(&out("pre").join("checkpoint.bin"));

    // finetune-dg
    let cfg = f.config(
        "dg.json",
        serde_json::json!({
            "checkpoint": checkpoint,
            "vocab": vocab,
            "pairs_tsv": s(&f.path("pairs.tsv")),
            "steps": 2,
            "seed": 7,
            "out_dir": s(&out("dg")),
        }),
    );
    check_reproducible("finetune-dg", &cfg, &out("dg"), &out("dg2"));

    // finetune-contact
    let cfg = f.config(
        "contact.json",
        serde_json::json!({
            "checkpoint": checkpoint,
            "vocab": vocab,
            "pairs_tsv": s(&f.path("pairs.tsv")),
            "contacts_tsv": s(&f.path("contacts.tsv")),
            "steps": 2,
            "seed": 7,
            "out_dir": s(&out("contact")),
        }),
    );
    check_reproducible("finetune-contact", &cfg, &out("contact"), &out("contact2"));

    // finetune-classify
    let cfg = f.config(
        "classify.json",
        serde_json::json!({
            "checkpoint": checkpoint,
            "vocab": vocab,
            "corpus_fasta": s(&f.path("corpus.fasta")),
            "labels_tsv": s(&f.path("labels.tsv")),
            "n_classes": 2,
            "steps": 2,
            "seed": 7,
            "out_dir": s(&out("classify")),
        }),
    );
    check_reproducible("finetune-classify", &cfg, &out("classify"), &out("classify2"));

    // finetune-pairwise-contact
    let cfg = f.config(
        "pairwise.json",
        serde_json::json!({
            "checkpoint": checkpoint,
            "vocab": vocab,
            "corpus_fasta": s(&f.path("corpus.fasta")),
            "maps_tsv": s(&f.path("maps.tsv")),
            "steps": 1,
            "min_separation": 6,
            "seed": 7,
            "out_dir": s(&out("pairwise")),
        }),
    );
    check_reproducible(
        "finetune-pairwise-contact",
        &cfg,
        &out("pairwise"),
        &out("pairwise2"),
    );

    // probe-joint
    let cfg = f.config(
        "pj.json",
        serde_json::json!({
            "checkpoint": checkpoint,
            "vocab": vocab,
            "pairs_tsv": s(&f.path("pairs.tsv")),
            "train_fraction": 0.5,
            "steps": 10,
            "seed": 7,
            "out_dir": s(&out("pj")),
        }),
    );
    check_reproducible("probe-joint", &cfg, &out("pj"), &out("pj2"));

    // probe-attn, with a baseline so compare.json is exercised
    let cfg = f.config(
        "pa.json",
        serde_json::json!({
            "checkpoint": checkpoint,
            "baseline_checkpoint": checkpoint,
            "vocab": vocab,
            "pairs_tsv": s(&f.path("pairs.tsv")),
            "contacts_tsv": s(&f.path("contacts.tsv")),
            "steps": 5,
            "batch": 4,
            "n_folds": 2,
            "seed": 7,
            "out_dir": s(&out("pa")),
        }),
    );
    check_reproducible("probe-attn", &cfg, &out("pa"), &out("pa2"));
    // identical backbones must show zero per-fold F1 delta
    let compare: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out("pa").join("compare.json")).unwrap()).unwrap();
    for row in compare.as_array().unwrap() {
        assert_eq!(row["delta_f1"].as_f64().unwrap(), 0.0);
    }

    // split
    let cfg = f.config(
        "split.json",
        serde_json::json!({
            "pairs_tsv": s(&f.path("pairs.tsv")),
            "n_folds": 3,
            "seed": 7,
            "out_dir": s(&out("split")),
        }),
    );
    check_reproducible("split", &cfg, &out("split"), &out("split2"));
    // fold disjointness straight from the artifact
    let folds: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out("split").join("folds.json")).unwrap()).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for fold in folds["folds"].as_array().unwrap() {
        for g in fold.as_array().unwrap() {
            assert!(seen.insert(g.as_u64().unwrap()), "folds overlap");
        }
    }

    // eval, against hand-computed values for a perfectly linear table
    let cfg = f.config(
        "eval.json",
        serde_json::json!({
            "predictions_tsv": s(&f.path("preds.tsv")),
            "metrics": ["pcc", "spearman", "mae"],
            "seed": 7,
            "out_dir": s(&out("eval")),
        }),
    );
    check_reproducible("eval", &cfg, &out("eval"), &out("eval2"));
    let metrics = std::fs::read_to_string(out("eval").join("metrics.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> =
        metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let value_of = |kind: &str| {
        rows.iter()
            .find(|r| r["kind"] == kind)
            .unwrap()["value"]
            .as_f64()
            .unwrap()
    };
    // labels = 2 * preds: perfect correlation, mae = mean |pred|
    assert!((value_of("pcc") - 1.0).abs() < 1e-12);
    assert!((value_of("spearman") - 1.0).abs() < 1e-12);
    assert!((value_of("mae") - 2.5).abs() < 1e-12);

    // mutscan
    let cfg = f.config(
        "mutscan.json",
        serde_json::json!({
            "checkpoint": s(&out("dg").join("checkpoint.bin")),
            "head": s(&out("dg").join("head.bin")),
            "vocab": vocab,
            "jaspar": s(&f.path("motifs.jaspar")),
            "protein_fasta": s(&f.path("dbp.fasta")),
            "n_mutants": 6,
            "seed": 7,
            "out_dir": s(&out("mut")),
        }),
    );
    check_reproducible("mutscan", &cfg, &out("mut"), &out("mut2"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path());

    // schema violation: exit 2, message names the offending field
    let bad = f.config(
        "bad.json",
        serde_json::json!({
            "pairs_tsv": "pairs.tsv",
            "n_folds": 3,
            "seed": 7,
            "out_dir": "x",
            "bogus": 1,
        }),
    );
    let output = Command::new(bin()).arg("split").arg(&bad).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("bogus"));

    // runtime failure (missing input): exit 1
    let missing = f.config(
        "missing.json",
        serde_json::json!({
            "pairs_tsv": f.path("nope.tsv").to_str().unwrap(),
            "n_folds": 3,
            "seed": 7,
            "out_dir": f.path("x").to_str().unwrap(),
        }),
    );
    let output = Command::new(bin()).arg("split").arg(&missing).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}
