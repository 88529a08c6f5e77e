//! Timing of the recurrent and convolutional evaluations of a time-invariant scan.

use std::time::Instant;

use anyhow::Result;
use vssmseg_core::gradcheck::uniform;
use vssmseg_core::ssm::{discretize_zoh, scan_convolutional, scan_recurrent, Delta, DiscreteSsm, SsmParams};
use vssmseg_core::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Recurrent,
    Conv,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Recurrent => "recurrent",
            Mode::Conv => "conv",
        }
    }
}

pub const CSV_HEADER: &str = "mode,L,N,D,wall_ns,max_abs_err";

struct Channel {
    ssm: DiscreteSsm<f64>,
    c: Vec<f64>,
    x: Tensor<f64>,
}

fn channels(l: usize, n: usize, d: usize, seed: u64) -> Result<Vec<Channel>> {
    (0..d)
        .map(|k| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(k as u64 * 4);
            let a = uniform(&[n], -2.0, -0.05, s).into_vec();
            let b = uniform(&[n], -1.0, 1.0, s + 1).into_vec();
            let c = uniform(&[n], -1.0, 1.0, s + 2).into_vec();
            let dt = uniform(&[1], 0.01, 0.2, s + 3).data()[0];
            let p = SsmParams::new(a, b, c.clone(), Delta::Constant(dt))?;
            Ok(Channel { ssm: discretize_zoh(&p)?, c, x: uniform(&[l], -1.0, 1.0, s + 5) })
        })
        .collect()
}

fn run(mode: Mode, chans: &[Channel]) -> Result<Vec<Tensor<f64>>> {
    chans
        .iter()
        .map(|ch| {
            Ok(match mode {
                Mode::Recurrent => scan_recurrent(&ch.ssm, &ch.c, &ch.x)?,
                Mode::Conv => scan_convolutional(&ch.ssm, &ch.c, &ch.x)?,
            })
        })
        .collect()
}

/// One CSV row: best-of-`reps` wall time for `d` channels, error against the other mode.
pub fn row(mode: Mode, l: usize, n: usize, d: usize, reps: usize, seed: u64) -> Result<String> {
    let chans = channels(l, n, d, seed)?;
    let other = match mode {
        Mode::Recurrent => Mode::Conv,
        Mode::Conv => Mode::Recurrent,
    };
    let reference = run(other, &chans)?;
    let mut best = u128::MAX;
    let mut out = Vec::new();
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        out = run(mode, &chans)?;
        best = best.min(t0.elapsed().as_nanos());
    }
    let mut err = 0f64;
    for (a, b) in out.iter().zip(&reference) {
        err = err.max(a.max_abs_diff(b)?);
    }
    Ok(format!("{},{l},{n},{d},{best},{err:.3e}", mode.name()))
}
