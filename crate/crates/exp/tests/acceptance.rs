use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use npbml::ablation::ablate;
use npbml::runner::{run, RunSummary};
use npbml::ExperimentConfig;
use npbml_core::verify::{self, Check};

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn out(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn line(id: u8, name: &str, passed: bool, detail: String) -> bool {
    println!("[{}] {id:>2} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn from_check(id: u8, c: npbml_core::Result<Check>) -> bool {
    match c {
        Ok(c) => line(id, c.name, c.passed, c.detail),
        Err(e) => line(id, "check", false, format!("error: {e}")),
    }
}

fn clip_rate(runs: &[&RunSummary]) -> String {
    let (mut clipped, mut steps) = (0, 0);
    for s in runs {
        for r in &s.runs {
            clipped += r.log.iter().filter(|m| m.clipped).count();
            steps += r.log.len();
        }
    }
    format!("clipped {clipped}/{steps} meta-steps")
}

fn sinusoid() -> bool {
    let start = Instant::now();
    let cfg = config("sinusoid.toml");
    let summary = match run(&cfg, Some(&out("sinusoid"))) {
        Ok(s) => s,
        Err(e) => return line(8, "sinusoid_directional", false, format!("error: {e}")),
    };
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let ratios: Vec<f64> = summary
        .runs
        .iter()
        .map(|r| r.report.pooled.mean_loss / r.baseline.as_ref().unwrap().pooled.mean_loss)
        .collect();
    let halved = ratios.iter().filter(|&&q| q <= 0.5).count();
    let shown: Vec<String> = ratios.iter().map(|q| format!("{q:.3}")).collect();
    line(
        8,
        "sinusoid_directional",
        halved >= 4 && minutes <= 30.0,
        format!(
            "trained/initial MSE per seed [{}], {halved}/5 at most 0.5, {:.1} min, {}",
            shown.join(", "),
            minutes,
            clip_rate(&[&summary])
        ),
    )
}

fn ablation_ordering() -> bool {
    let cfg = config("clusters.toml");
    let table = match ablate(&cfg, Some(&out("clusters")), Some(&[1, 5])) {
        Ok(t) => t,
        Err(e) => return line(9, "ablation_ordering", false, format!("error: {e}")),
    };
    let get = |id: u8| table.rows.iter().find(|r| r.id == id);
    let (Some(maml), Some(full)) = (get(1), get(5)) else {
        return line(9, "ablation_ordering", false, "rows missing".into());
    };
    let (Some(m1), Some(c1), Some(m5), Some(c5)) = (maml.mean, maml.ci, full.mean, full.ci) else {
        return line(9, "ablation_ordering", false, format!("row failed: {:?} {:?}", maml.error, full.error));
    };
    let runs: Vec<&RunSummary> = [maml, full].iter().filter_map(|r| r.summary.as_ref()).collect();
    line(
        9,
        "ablation_ordering",
        m5 >= m1 - c1,
        format!(
            "(5) {:.2}±{:.2}% vs (1) {:.2}±{:.2}%, margin {:+.2} points over {} seeds, {}",
            100.0 * m5,
            100.0 * c5,
            100.0 * m1,
            100.0 * c1,
            100.0 * (m5 - m1),
            table.seeds.len(),
            clip_rate(&runs)
        ),
    )
}

fn main() -> ExitCode {
    let seed = verify::FROZEN_SEED;
    let start = Instant::now();
    let oracle = verify::meta_gradient_oracle(seed, 16);
    let seconds = start.elapsed().as_secs_f64();
    let results = [
        match oracle {
            Ok(c) => line(1, c.name, c.passed && seconds <= 120.0, format!("{} ({seconds:.1} s)", c.detail)),
            Err(e) => line(1, "meta_gradient", false, format!("error: {e}")),
        },
        from_check(2, verify::maml_equivalence(seed)),
        from_check(3, verify::preconditioner_identity(seed)),
        from_check(4, verify::loss_recovery(seed)),
        from_check(5, verify::metasgd_special_case(seed)),
        from_check(6, verify::permutation_check(seed)),
        from_check(7, verify::batch_invariance(seed)),
        sinusoid(),
        ablation_ordering(),
        from_check(10, verify::ci_scaling(seed)),
    ];
    let failing: Vec<String> = (1..).zip(results).filter(|(_, ok)| !ok).map(|(i, _)| i.to_string()).collect();
    println!(
        "acceptance: {} of {} criteria pass{}",
        results.len() - failing.len(),
        results.len(),
        if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
    );
    // NPBML_ACCEPTANCE_STRICT=1 turns any failing criterion into a failed test.
    if !failing.is_empty() && std::env::var_os("NPBML_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
