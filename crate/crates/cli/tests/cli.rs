use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
backbone.widths = 4,4,8,8
backbone.branch_width = 8
embedding.k_a = 4
embedding.k_g = 4
schedule.stage1_epochs = 1
schedule.stage2_epochs = 2
schedule.milestones = 1
schedule.batches_per_epoch = 2
data.num_ids = 8
data.instances_per_id = 4
data.train_ids = 4
data.queries_per_id = 1
";

fn abd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abd")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_checkpoint_logs_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = abd(&["train", "--config", &cfg, "--seed", "4", "--variant", "pam,of", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    for f in ["run.manifest", "checkpoint.bin", "checkpoint.manifest", "config.txt", "lr_log.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(header(&run.join("epoch_log.csv")), "stage,epoch,lr,xent,triplet,of,ow,total,train_top1");
    assert_eq!(header(&run.join("lr_log.csv")), "step,stage,epoch,lr");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "variant,seed,top1,top5,map,excluded_queries");
    assert!(lines[1].starts_with("\"pam,of\",4,"), "{}", lines[1]);
    // 1 stage-1 epoch + 2 stage-2 epochs
    assert_eq!(fs::read_to_string(run.join("epoch_log.csv")).unwrap().lines().count(), 4);

    // rerunning the same run into the same directory is allowed
    let again = abd(&["train", "--config", &cfg, "--seed", "4", "--variant", "pam,of", "--out", "run"], tmp.path());
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);

    let other = abd(&["train", "--config", &cfg, "--seed", "5", "--variant", "pam,of", "--out", "run"], tmp.path());
    assert_eq!(other.status.code(), Some(2));
    assert!(stderr(&other).contains("different run"));

    let d = abd(&["diagnose", "--checkpoint", "run", "--out", "diag"], tmp.path());
    assert!(d.status.success(), "{}", stderr(&d));
    let corr = fs::read_to_string(tmp.path().join("diag/correlation.csv")).unwrap();
    // the recorded variant is used when none is given
    assert!(corr.lines().skip(1).all(|l| l.starts_with("\"pam,of\",")), "{corr}");
}

#[test]
fn diagnose_fresh_initialization_writes_all_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = abd(&["diagnose", "--config", &cfg, "--variant", "none", "--out", "diag"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let diag = tmp.path().join("diag");
    let corr = fs::read_to_string(diag.join("correlation.csv")).unwrap();
    assert_eq!(corr.lines().next().unwrap(), "variant,layer,mean_offdiag,mean_full,constant_channels");
    let layers: Vec<&str> = corr.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(layers, ["cam_early", "t_g", "t_a", "cam", "pam", "attentive_prepool"]);
    assert_eq!(header(&diag.join("corr_hist.csv")), "layer,bin_lo,bin_hi,count");
    let cond = fs::read_to_string(diag.join("conditioning.csv")).unwrap();
    assert_eq!(cond.lines().next().unwrap(), "kind,name,rows,cols,condition_mean,condition_max,degenerate");
    assert_eq!(cond.lines().filter(|l| l.starts_with("weight,")).count(), 6);
    assert_eq!(cond.lines().filter(|l| l.starts_with("activation,")).count(), 2);
}

#[test]
fn ablate_mean_rows_average_seed_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = abd(&["ablate", "--config", &cfg, "--seeds", "1,2", "--variants", "none;cam,ow", "--out", "abl"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(tmp.path().join("abl/ablate.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["variant", "seed", "top1", "top5", "map", "corr_offdiag"]);
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for v in ["none", "cam,ow"] {
        let seeds: Vec<&csv::StringRecord> = rows.iter().filter(|x| &x[0] == v && &x[1] != "mean").collect();
        let mean = rows.iter().find(|x| &x[0] == v && &x[1] == "mean").unwrap();
        assert_eq!(seeds.len(), 2);
        for col in 2..6 {
            let want = seeds.iter().map(|x| x[col].parse::<f64>().unwrap()).sum::<f64>() / 2.0;
            let got: f64 = mean[col].parse().unwrap();
            assert!((got - want).abs() <= 1e-15, "{v} column {col}: {got} vs {want}");
        }
    }
}

#[test]
fn check_passes_and_fails_with_zero_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = abd(&["check", "--out", "ok"], tmp.path());
    assert!(ok.status.success(), "{}", stderr(&ok));
    let table = fs::read_to_string(tmp.path().join("ok/check.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "check,max_rel_error,tolerance,status");
    assert!(table.lines().skip(1).all(|l| l.ends_with(",pass")), "{table}");

    let bad = abd(&["check", "--out", "bad", "--tolerance-scale", "0"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("grad."), "{}", stderr(&bad));
    assert!(fs::read_to_string(tmp.path().join("bad/check.csv")).unwrap().contains(",fail"));
}

#[test]
fn bench_writes_one_row_per_size_and_iteration_count() {
    let tmp = tempfile::tempdir().unwrap();
    let o = abd(&["bench-power-iteration", "--out", "b"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("b/bench_power_iteration.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "n,iterations,power_seconds,jacobi_seconds,lambda_max_rel_error,lambda_min_rel_error");
    assert_eq!(text.lines().count(), 1 + 16);
}

#[test]
fn bad_input_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bogus.cfg"), "bogus.key = 1\n").unwrap();
    fs::write(tmp.path().join("noise.cfg"), "data.noise = -1\n").unwrap();
    let cases: [(&[&str], Option<&str>); 5] = [
        (&["train", "--config", "bogus.cfg", "--out", "x"], Some("bogus.key")),
        (&["train", "--config", "noise.cfg", "--out", "x"], Some("data.noise")),
        (&["train", "--config", "missing.cfg", "--out", "x"], Some("missing.cfg")),
        (&["train", "--variant", "pam,xyz", "--out", "x"], Some("xyz")),
        (&["frobnicate"], None),
    ];
    for (args, needle) in cases {
        let o = abd(args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        if let Some(n) = needle {
            assert!(stderr(&o).contains(n), "{args:?}: {}", stderr(&o));
        }
    }
    assert!(!tmp.path().join("x").exists());
}
