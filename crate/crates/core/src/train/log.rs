use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::{Result, TrainError};

pub const RUNLOG_HEADER: &str = "step,epoch,loss_a,loss_b,rate_khz,wall_s";

/// Wall-time source for throughput and logging.
pub trait Clock {
    /// Seconds since the clock started.
    fn elapsed_s(&mut self) -> f64;
}

pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn elapsed_s(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Advances a fixed amount on every reading; makes logs reproducible.
pub struct SteppedClock {
    now: f64,
    pub dt: f64,
}

impl SteppedClock {
    pub fn new(dt: f64) -> Self {
        Self { now: 0.0, dt }
    }
}

impl Clock for SteppedClock {
    fn elapsed_s(&mut self) -> f64 {
        self.now += self.dt;
        self.now
    }
}

/// Audio samples consumed against wall time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ThroughputMeter {
    pub samples: u64,
    pub seconds: f64,
}

impl ThroughputMeter {
    pub fn record(&mut self, samples: u64, now_s: f64) {
        self.samples += samples;
        self.seconds = self.seconds.max(now_s);
    }

    /// Thousands of audio samples per wall second; 0 before any time passes.
    pub fn rate_khz(&self) -> f64 {
        rate_khz(self.samples, self.seconds)
    }
}

pub fn rate_khz(samples: u64, seconds: f64) -> f64 {
    if seconds > 0.0 {
        samples as f64 / seconds / 1000.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_a: f64,
    /// Second loss (the generator's for cMelGAN); absent for MelNet.
    pub loss_b: Option<f64>,
    pub rate_khz: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    records: Vec<StepRecord>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(TrainError::Log(format!("step {} after step {}", r.step, last.step)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RUNLOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let b = r.loss_b.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.epoch, r.loss_a, b, r.rate_khz, r.wall_s);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RUNLOG_HEADER) {
            return Err(TrainError::Log(format!("expected header `{RUNLOG_HEADER}`")));
        }
        let mut log = Self::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || TrainError::Log(format!("line {}: malformed record `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            log.push(StepRecord {
                step: f[0].trim().parse().map_err(|_| bad())?,
                epoch: f[1].trim().parse().map_err(|_| bad())?,
                loss_a: num(f[2])?,
                loss_b: if f[3].trim().is_empty() { None } else { Some(num(f[3])?) },
                rate_khz: num(f[4])?,
                wall_s: num(f[5])?,
            })?;
        }
        Ok(log)
    }
}
