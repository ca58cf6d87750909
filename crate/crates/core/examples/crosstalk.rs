//! Vanilla multislice rPIE versus plug-and-play with a rod-mask oracle on
//! the first slice. Prints per-slice PSNR and the slice-1 crosstalk score.

use ptypnp::config::{JobConfig, CROSSTALK_CONFIG};
use ptypnp::editors::{EditorSpec, MaskFill};
use ptypnp::pipeline::{metrics_for, reconstruct_inputs, simulate, write_reconstruction, Inputs};
use ptypnp::simulation::rod_mask;

fn main() -> ptypnp::Result<()> {
    let mut job = JobConfig::from_json(CROSSTALK_CONFIG)?;
    let args: Vec<String> = std::env::args().collect();
    if let Some(v) = args.get(1) {
        let patch: serde_json::Value = serde_json::from_str(v)?;
        let mut base = serde_json::to_value(&job)?;
        merge(&mut base, patch);
        job = serde_json::from_value(base)?;
    }
    let mask = rod_mask(job.phantom.size, job.phantom.rod_period);
    if let Some(pnp) = job.pnp.as_mut() {
        pnp.slice_editors = Some(vec![
            EditorSpec::mask_oracle(mask, MaskFill::LocalMedian),
            EditorSpec::identity(),
        ]);
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
        let xt = report.crosstalk_score.iter().find(|e| e.slice == 0).map(|e| e.score);
        println!(
            "{:7} psnr {:7.3} / {:7.3} dB  crosstalk {:6.3}  mse {:.4e}  ({:.1} s)",
            if pnp { "pnp" } else { "vanilla" },
            report.psnr_db[0],
            report.psnr_db[1],
            xt.unwrap_or(f64::NAN),
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
