//! Per-episode metrics as CSV.

use std::io::{self, Write};

use shieldrl_core::train::EpisodeMetrics;

pub const HEADER: &str = "episode,steps,return,violations,cum_violations,shield_interventions,mean_mu_hat";

pub fn row(m: &EpisodeMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        m.episode, m.steps, m.ret, m.violations, m.cum_violations, m.shield_interventions, m.mean_mu_hat
    )
}

/// Header plus one LF-terminated row per episode.
pub fn write_csv<W: Write>(out: &mut W, metrics: &[EpisodeMetrics]) -> io::Result<()> {
    out.write_all(HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    for m in metrics {
        out.write_all(row(m).as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_csv(metrics: &[EpisodeMetrics]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, metrics).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}
