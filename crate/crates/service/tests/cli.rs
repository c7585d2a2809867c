mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::*;
use refinpaint_core::engine::Trace;
use refinpaint_core::midi::{parse_smf, write_smf, NoteEvent, Score};
use refinpaint_core::remi::{decode_lossy, encode, TokenSeq};
use refinpaint_core::train::write_checkpoint;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refinpaint"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_models(dir: &Path) {
    let models = tiny_models(3);
    write_checkpoint(&models.inpainter, &dir.join("inp.ckpt")).unwrap();
    write_checkpoint(&models.feedback, &dir.join("fb.ckpt")).unwrap();
    fs::write(
        dir.join("service.toml"),
        "[checkpoints]\ninpainter = \"inp.ckpt\"\nfeedback = \"fb.ckpt\"\n\n[engine]\nT = 10\nseed = 5\n",
    )
    .unwrap();
}

#[test]
fn tokenize_prints_one_token_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let midi = dir.path().join("one.mid");
    fs::write(&midi, write_smf(&Score::new(480, vec![NoteEvent::new(60, 480, 480)]))).unwrap();
    let o = cli(&["tokenize", midi.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "Bar\nPosition(8)\nPitch(60)\nDuration(8)\n");
    let out = dir.path().join("tokens.txt");
    let o = cli(&["tokenize", midi.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(TokenSeq::parse_dump(&fs::read_to_string(out).unwrap()).unwrap().len(), 4);
}

#[test]
fn exit_codes() {
    let o = cli(&["tokenize", "--frobnicate", "x.mid"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = cli(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
    assert_eq!(cli(&["run", "--help"]).status.code(), Some(0));
    let o = cli(&["run", "--midi", "x.mid", "--bars", "3-4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    let o = cli(&["tokenize", "/nonexistent/file.mid"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cli(&["run", "--midi", "x.mid", "--bars", "1..2"]);
    assert_eq!(o.status.code(), Some(2), "no checkpoints configured");
}

#[test]
fn corpus_commands_write_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    let o = cli(&["--seed", "4", "corpus", "toy", toy.to_str().unwrap(), "--count", "12"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = cli(&["corpus", "build", toy.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = fs::read_to_string(toy.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(["train", "val", "test"].contains(&v["split"].as_str().unwrap().to_lowercase().as_str()));
    }
}

#[test]
fn single_iteration_run_is_iteration_zero_of_a_longer_run() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path());
    let midi = dir.path().join("piece.mid");
    fs::write(&midi, toy_midi(8)).unwrap();
    let config = dir.path().join("service.toml");
    let run = |t: &str, name: &str| {
        let out = dir.path().join(format!("{name}.mid"));
        let trace = dir.path().join(format!("{name}.json"));
        let o = cli(&[
            "run",
            "--midi",
            midi.to_str().unwrap(),
            "--bars",
            "1..2",
            "--iterations",
            t,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let trace: Trace = serde_json::from_slice(&fs::read(trace).unwrap()).unwrap();
        (parse_smf(&fs::read(out).unwrap()).unwrap(), trace)
    };
    let (one, one_trace) = run("1", "one");
    let (_, ten_trace) = run("10", "ten");
    assert_eq!(one_trace.iterations.len(), 1);
    assert_eq!(ten_trace.iterations.len(), 10);
    // regen_count describes the step out of an iteration, so only the
    // generated content is shared.
    let (a, b) = (&one_trace.iterations[0], &ten_trace.iterations[0]);
    assert_eq!((&a.tokens, &a.heatmap, a.gfs), (&b.tokens, &b.heatmap, b.gfs));
    assert_eq!(ten_trace.config.seed, 5);
    // Outside bars 1..=2 the output is the quantized input.
    let input = decode_lossy(&encode(&toy_score(8)).tokens).0;
    let outside = |s: &Score| -> Vec<NoteEvent> {
        s.notes.iter().copied().filter(|n| !(1..=2).contains(&(n.onset / 1920))).collect()
    };
    assert_eq!(outside(&one), outside(&input));
    // The same seed reproduces the run byte for byte.
    let (_, again) = run("10", "again");
    assert_eq!(again.to_json(), ten_trace.to_json());
}
