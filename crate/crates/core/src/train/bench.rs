use super::{train_cmelgan, train_melnet, Clock, ModelKind, Result, RunLog, TrainConfig, TrainOptions};
use crate::data::ManifestEntry;

/// Published training speeds, for an informational comparison only; they
/// were measured on a datacenter GPU.
pub const REFERENCE_SPEEDS_KHZ: [(&str, f64); 4] = [
    ("MelNet (small)", 307.0),
    ("MelNet (large)", 75.0),
    ("cMelGAN (small)", 980.0),
    ("cMelGAN (large)", 705.0),
];

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub kind: ModelKind,
    pub steps: usize,
    pub samples: u64,
    pub seconds: f64,
    pub rate_khz: f64,
    pub log: RunLog,
}

impl BenchReport {
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![format!(
            "{}: {} steps, {} audio samples in {:.3} s = {:.3} kHz",
            self.kind, self.steps, self.samples, self.seconds, self.rate_khz
        )];
        let refs: Vec<String> = REFERENCE_SPEEDS_KHZ
            .iter()
            .map(|(name, khz)| format!("{name} {khz} kHz"))
            .collect();
        out.push(format!("reference (GPU): {}", refs.join(", ")));
        out
    }
}

/// Runs `steps` training steps without writing anything and reports audio
/// throughput. Loading follows the config's `prefetch` setting.
pub fn bench(
    cfg: &TrainConfig,
    entries: &[ManifestEntry],
    kind: ModelKind,
    steps: usize,
    clock: Box<dyn Clock>,
) -> Result<BenchReport> {
    let cfg = TrainConfig {
        epochs: usize::MAX,
        ..cfg.clone()
    };
    let opts = TrainOptions {
        out_dir: None,
        max_steps: Some(steps),
        clock,
        synchronous: false,
    };
    let (log, meter) = match kind {
        ModelKind::MelNet => {
            let r = train_melnet(&cfg, entries, opts)?;
            (r.log, r.meter)
        }
        ModelKind::CMelGan => {
            let r = train_cmelgan(&cfg, entries, opts)?;
            (r.log, r.meter)
        }
    };
    Ok(BenchReport {
        kind,
        steps: log.len(),
        samples: meter.samples,
        seconds: meter.seconds,
        rate_khz: meter.rate_khz(),
        log,
    })
}
