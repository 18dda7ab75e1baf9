use std::path::Path;

use loopnest::autotune::read_csv;
use loopnest::cli::{run, BenchRow, CliError};
use loopnest::mtx::{read_mtx, mtx_import};
use loopnest::perfmodel::{read_rank_csv, MachineModel};

fn cli(args: &[&str]) -> Result<String, CliError> {
    let mut out = Vec::new();
    run(std::iter::once("loopnest").chain(args.iter().copied()), &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const SMALL: [&str; 12] = ["--m", "64", "--n", "64", "--k", "64", "--bm", "16", "--bn", "16", "--bk", "16"];

#[test]
fn bench_every_kernel_validates() {
    let gemm: Vec<&str> = ["--check", "bench", "gemm"].into_iter().chain(SMALL).collect();
    assert!(cli(&gemm).unwrap().contains("validation: PASS"));
    let bf16: Vec<&str> = ["--check", "bench", "--precision", "bf16", "gemm"].into_iter().chain(SMALL).collect();
    assert!(cli(&bf16).unwrap().contains("validation: PASS"));
    let mlp = ["--check", "--threads", "2", "bench", "--spec", "bCa", "mlp", "--dims", "32,64,32", "--batch", "32", "--bm", "16", "--bn", "16", "--bias"];
    assert!(cli(&mlp).unwrap().contains("validation: PASS"));
    let conv = ["--check", "bench", "conv", "--c", "16", "--k", "16", "--h", "6", "--w", "6", "--bc", "8", "--bk", "8", "--stride", "2"];
    assert!(cli(&conv).unwrap().contains("validation: PASS"));
    let spmm = ["--check", "bench", "--real", "spmm", "--m", "64", "--n", "64", "--k", "64", "--block", "8x16", "--bn", "16", "--v", "2"];
    assert!(cli(&spmm).unwrap().contains("validation: PASS"));
}

#[test]
fn bench_csv_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let f = s(&dir.path().join("bench.csv"));
    let args: Vec<&str> = ["--csv", &f, "--check", "bench", "--spec", "bca", "--blocks", "2;1;1", "gemm"].into_iter().chain(SMALL).collect();
    cli(&args).unwrap();
    let rows: Vec<BenchRow> = csv::Reader::from_path(&f).unwrap().deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].kernel.as_str(), rows[0].spec.as_str(), rows[0].blocks.as_str()), ("gemm", "bca", "2;1;1"));
    assert_eq!(rows[0].valid, Some(true));
    assert!(rows[0].gflops > 0.0);
}

#[test]
fn tune_writes_every_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let f = s(&dir.path().join("tune.csv"));
    let args: Vec<&str> =
        ["--csv", &f, "tune", "--max-candidates", "6", "--reps", "1", "--warmups", "0", "gemm"].into_iter().chain(SMALL).collect();
    cli(&args).unwrap();
    let rows = read_csv(std::fs::File::open(&f).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.windows(2).all(|w| w[0].gflops >= w[1].gflops));
}

#[test]
fn model_ranks_a_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let specs = dir.path().join("specs.txt");
    std::fs::write(&specs, "abc\nbca\t4;1;1\ncBa\n").unwrap();
    let machine = dir.path().join("machine.json");
    std::fs::write(&machine, MachineModel::host(2).to_json()).unwrap();
    let (f, machine, specs) = (s(&dir.path().join("rank.csv")), s(&machine), s(&specs));
    let args: Vec<&str> = ["--threads", "2", "--csv", &f, "model", "--machine", &machine, "--specs", &specs, "gemm"]
        .into_iter()
        .chain(SMALL)
        .collect();
    cli(&args).unwrap();
    let rows = read_rank_csv(std::fs::File::open(&f).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0].score >= w[1].score));
    // the serial schedule leaves one of the two workers idle
    assert_eq!(rows.last().unwrap().spec, "abc");
}

#[test]
fn gen_sparse_feeds_spmm() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a.mtx");
    cli(&["gen-sparse", "--m", "64", "--k", "32", "--block", "8x8", "--density", "0.25", "--out", &s(&f)]).unwrap();
    let coo = read_mtx(&f).unwrap();
    assert_eq!((coo.rows, coo.cols), (64, 32));
    let a = mtx_import(&f, 8, 8).unwrap();
    assert!(a.block_count() > 0 && a.block_count() < 32);
    let out = cli(&["--check", "bench", "spmm", "--m", "64", "--k", "32", "--n", "32", "--block", "8x8", "--bn", "8", "--mtx", &s(&f)]).unwrap();
    assert!(out.contains("validation: PASS"), "{out}");
}

#[test]
fn bad_input_is_reported() {
    let bad_spec: Vec<&str> = ["bench", "--spec", "abcd", "gemm"].into_iter().chain(SMALL).collect();
    assert!(cli(&bad_spec).is_err());
    let parallel_reduction: Vec<&str> = ["--threads", "2", "bench", "--spec", "Abc", "gemm"].into_iter().chain(SMALL).collect();
    assert!(cli(&parallel_reduction).is_err());
    assert!(matches!(cli(&["bench", "gemm", "--m", "63"]), Err(_)));
    assert!(matches!(cli(&["frobnicate"]), Err(CliError::Args(_))));
    assert!(matches!(cli(&["--threads", "0", "bench", "gemm"]), Err(_)));
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("broken.mtx");
    std::fs::write(&f, "%%MatrixMarket matrix coordinate real general\n8 8 1\n9 1 1.0\n").unwrap();
    let err = cli(&["bench", "spmm", "--m", "8", "--k", "8", "--n", "8", "--block", "4x4", "--bn", "4", "--mtx", &s(&f)]).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}
