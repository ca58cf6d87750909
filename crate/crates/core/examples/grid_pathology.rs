//! Vanilla rPIE versus plug-and-play with a spectral notch editor on the
//! raster-grid problem. Prints PSNR, grid score and data error for both.

use ptypnp::config::{JobConfig, GRID_PATHOLOGY_CONFIG};
use ptypnp::pipeline::{metrics_for, reconstruct_inputs, simulate, write_reconstruction, Inputs};

fn main() -> ptypnp::Result<()> {
    let mut job = JobConfig::from_json(GRID_PATHOLOGY_CONFIG)?;
    let args: Vec<String> = std::env::args().collect();
    if let Some(v) = args.get(1) {
        let patch: serde_json::Value = serde_json::from_str(v)?;
        let mut base = serde_json::to_value(&job)?;
        merge(&mut base, patch);
        job = serde_json::from_value(base)?;
    }
    let problem = simulate(&job)?;
    let inputs = Inputs {
        dataset: problem.dataset,
        grid: problem.grid,
        initial_probe: problem.initial_probe,
        truth: Some(problem.truth),
    };
    for pnp in [false, true] {
        let t = std::time::Instant::now();
        let rec = reconstruct_inputs(&job, &inputs, pnp)?;
        let report = metrics_for(&job, &inputs, &rec)?.expect("truth known");
        println!(
            "{:7} psnr {:7.3} dB  grid {:8.2}  mse {:.4e}  ({:.1} s)",
            if pnp { "pnp" } else { "vanilla" },
            report.psnr_db[0],
            report.grid_score.unwrap_or(f64::NAN),
            rec.magnitude_mse,
            t.elapsed().as_secs_f64()
        );
        if let Some(dir) = args.get(2) {
            let dir = std::path::Path::new(dir).join(if pnp { "pnp" } else { "vanilla" });
            write_reconstruction(&rec, Some(&report), &dir)?;
        }
    }
    Ok(())
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}
