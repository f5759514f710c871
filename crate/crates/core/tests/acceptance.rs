//! Runs every acceptance experiment at desk scale and prints one line per
//! criterion. Set `XLEMO_ACCEPTANCE_WORKDIR` to keep the corpus and
//! checkpoints between runs; otherwise a temporary directory is used.

use std::process::ExitCode;

use xlemo::repro::{expected_metrics, experiments, run_experiment, Workspace};

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir = std::env::var_os("XLEMO_ACCEPTANCE_WORKDIR").map_or_else(|| tmp.path().to_path_buf(), Into::into);
    let mut ws = Workspace::new(&dir, true).expect("work directory");
    ws.progress = std::env::var_os("XLEMO_ACCEPTANCE_PROGRESS").is_some();
    let expected = expected_metrics().expect("expected-metrics file");
    let mut failed = 0;
    let all = experiments();
    for e in &all {
        match run_experiment(e.name, &mut ws) {
            Ok(r) => {
                println!("{}", r.summary());
                failed += usize::from(!r.pass);
            }
            Err(err) => {
                println!(
                    "criterion {:>2} {:<20} FAIL  error kind={} message={err}",
                    expected[e.name].criterion,
                    e.name,
                    err.kind()
                );
                failed += 1;
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", all.len() - failed, all.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
