//! Runs the whole generation flow at a small scale and prints the per-round
//! bookkeeping from the run manifest.
//!
//! cargo run --release --example run_pipeline -- [out-dir] [config.json]

use docforge::pipeline::{run_pipeline, PipelineConfig};

fn main() -> docforge::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().cloned().unwrap_or_else(|| "pipeline_run".into());
    let config = match args.get(1) {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let mut c = PipelineConfig::default();
            c.corpus.size = 600;
            c.dlg.epochs = 40;
            c.quality.pages_per_class = 100;
            c.cross_domain.pages_per_class = 100;
            c.batch = 100;
            c.quota = 40;
            c
        }
    };
    let m = match run_pipeline(&config, &out) {
        Ok(m) => m,
        Err(docforge::Error::QuotaShortfall { manifest, .. }) => {
            println!("quota not reached");
            *manifest
        }
        Err(e) => return Err(e),
    };
    for r in &m.rounds {
        println!(
            "round {:2}: generated {}, quality {}, selected {}, exported so far {}",
            r.round, r.counts.generated, r.counts.accepted_quality, r.counts.accepted_cross_domain, r.exported
        );
    }
    println!("quality acceptance rate {:.3}; {} pages exported to {out}/dataset", m.quality_rate, m.exported);
    Ok(())
}
