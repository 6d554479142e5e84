//! Fusion-depth sweep on the toy data, then loss curves for one of its runs.

use avseg::pipeline::{load_data, plot_losses, sweep, SweepAxis};
use avseg::RunConfig;

fn main() -> avseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::load(None, Some("toy"), &overrides)?;
    let data = load_data(&cfg)?;
    let out = std::env::temp_dir().join("avseg-example-sweep");
    let r = sweep(&cfg, &data, SweepAxis::FusionStages, &[1, 2, 4], None, &out)?;
    for row in &r.rows {
        println!("stages {}: mIoU {:.4}, F {:.4}", row.value, row.miou, row.fscore);
    }
    println!("csv {}, plot {}", r.csv.display(), r.plot.display());
    for f in plot_losses(&out.join("fusion_stages_4"))? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
