//! Sampled metrics stream and the spectrum helper used to check waveform
//! frequencies.

use std::f64::consts::TAU;
use std::io::{self, Write};

use crate::sim::Nanos;

pub const CSV_HEADER: &str = "t_ns,ps_id,I_set,I_read,V_out,R_load,status_bits,alarm";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t_ns: Nanos,
    pub ps: u32,
    /// Effective regulation target, including waveform mapping.
    pub i_set: f64,
    pub i_read: f64,
    pub v_out: f64,
    pub r_load: f64,
    pub status: u32,
    pub alarm: u8,
}

impl MetricsRow {
    pub fn write_csv(&self, w: &mut impl Write, ps_id: &str) -> io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.t_ns, ps_id, self.i_set, self.i_read, self.v_out, self.r_load, self.status, self.alarm
        )
    }
}

/// Collected rows, optionally streamed to a sink instead of kept.
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    sink: Option<Box<dyn Write + Send>>,
    retain: bool,
}

impl std::fmt::Debug for MetricsLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricsLog")
            .field("rows", &self.rows.len())
            .field("streaming", &self.sink.is_some())
            .finish()
    }
}

impl Default for MetricsLog {
    fn default() -> Self {
        Self {
            rows: vec![],
            sink: None,
            retain: true,
        }
    }
}

impl MetricsLog {
    /// Streams rows as CSV to `sink`; rows are not kept in memory.
    pub fn stream_to(&mut self, mut sink: Box<dyn Write + Send>) -> io::Result<()> {
        writeln!(sink, "{CSV_HEADER}")?;
        self.sink = Some(sink);
        self.retain = false;
        Ok(())
    }

    pub fn push(&mut self, row: MetricsRow, ids: &[String]) -> io::Result<()> {
        if let Some(s) = self.sink.as_mut() {
            row.write_csv(s, &ids[row.ps as usize])?;
        }
        if self.retain {
            self.rows.push(row);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        match self.sink.as_mut() {
            Some(s) => s.flush(),
            None => Ok(()),
        }
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn write_csv(&self, w: &mut impl Write, ids: &[String]) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            r.write_csv(w, &ids[r.ps as usize])?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, ids: &[String]) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, ids).expect("in-memory write");
        String::from_utf8(buf).expect("ascii")
    }

    /// One column of one supply, in time order.
    pub fn series(&self, ps: u32, pick: impl Fn(&MetricsRow) -> f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.ps == ps).map(pick).collect()
    }
}

/// Magnitude of the Hann-windowed DTFT of `x` at frequency `f`.
fn dtft_mag(x: &[f64], dt: f64, f: f64) -> f64 {
    let n = x.len();
    let (mut re, mut im) = (0.0, 0.0);
    for (k, v) in x.iter().enumerate() {
        let w = 0.5 - 0.5 * (TAU * k as f64 / (n - 1) as f64).cos();
        let ph = TAU * f * k as f64 * dt;
        re += w * v * ph.cos();
        im -= w * v * ph.sin();
    }
    re.hypot(im)
}

/// Dominant frequency of a uniformly sampled signal within `[f_lo, f_hi]`:
/// a coarse scan of the windowed DTFT refined by golden-section search.
pub fn fundamental_frequency(samples: &[f64], dt: f64, f_lo: f64, f_hi: f64) -> f64 {
    assert!(samples.len() > 2 && dt > 0.0 && f_hi > f_lo);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let x: Vec<f64> = samples.iter().map(|v| v - mean).collect();
    let span = samples.len() as f64 * dt;
    // Four grid points per spectral bin.
    let step = 0.25 / span;
    let n = ((f_hi - f_lo) / step).ceil() as usize + 1;
    let (mut best_f, mut best) = (f_lo, -1.0);
    for i in 0..n {
        let f = (f_lo + i as f64 * step).min(f_hi);
        let m = dtft_mag(&x, dt, f);
        if m > best {
            best = m;
            best_f = f;
        }
    }
    let (mut a, mut b) = ((best_f - step).max(f_lo), (best_f + step).min(f_hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-9 * best_f.max(1.0) {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if dtft_mag(&x, dt, c) > dtft_mag(&x, dt, d) {
            b = d;
        } else {
            a = c;
        }
    }
    (a + b) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_pure_tone() {
        let dt = 0.01;
        let x: Vec<f64> = (0..1000).map(|k| (TAU * 3.0 * k as f64 * dt).sin() + 2.0).collect();
        let f = fundamental_frequency(&x, dt, 0.5, 20.0);
        assert!((f - 3.0).abs() < 1e-4, "{f}");
    }

    #[test]
    fn off_grid_tone() {
        let dt = 0.01;
        let f0 = 1.0 / 0.33336;
        let x: Vec<f64> = (0..2000).map(|k| (TAU * f0 * k as f64 * dt).sin()).collect();
        let f = fundamental_frequency(&x, dt, 0.5, 20.0);
        assert!((f - f0).abs() / f0 < 1e-4, "{f}");
    }

    #[test]
    fn csv_layout() {
        let mut log = MetricsLog::default();
        let ids = vec!["PS1".to_string()];
        log.push(
            MetricsRow {
                t_ns: 10_000_000,
                ps: 0,
                i_set: 2.0,
                i_read: 1.5,
                v_out: 1.0,
                r_load: 0.5,
                status: 3,
                alarm: 0,
            },
            &ids,
        )
        .unwrap();
        let s = log.to_csv_string(&ids);
        assert_eq!(s, format!("{CSV_HEADER}\n10000000,PS1,2,1.5,1,0.5,3,0\n"));
    }
}
