//! Four-direction 2D selective scan: unfold a map into ordered token
//! sequences, scan each with its own parameters, restore spatial order, sum.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Bound, ParamStore};
use crate::ssm::SelectiveScan;
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    RowForward,
    RowReverse,
    ColForward,
    ColReverse,
}

impl ScanDirection {
    /// Fixed merge order.
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowReverse,
        ScanDirection::ColForward,
        ScanDirection::ColReverse,
    ];

    /// `order[l]` is the flat spatial index `h * W + w` visited at step `l`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let n = h * w;
        let col = |l: usize| (l % h) * w + l / h;
        match self {
            ScanDirection::RowForward => (0..n).collect(),
            ScanDirection::RowReverse => (0..n).rev().collect(),
            ScanDirection::ColForward => (0..n).map(col).collect(),
            ScanDirection::ColReverse => (0..n).rev().map(col).collect(),
        }
    }

    /// The direction that visits the transposed map in the same order.
    pub fn transposed(self) -> Self {
        match self {
            ScanDirection::RowForward => ScanDirection::ColForward,
            ScanDirection::RowReverse => ScanDirection::ColReverse,
            ScanDirection::ColForward => ScanDirection::RowForward,
            ScanDirection::ColReverse => ScanDirection::RowReverse,
        }
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanDirection::RowForward => "row-major forward",
            ScanDirection::RowReverse => "row-major reverse",
            ScanDirection::ColForward => "column-major forward",
            ScanDirection::ColReverse => "column-major reverse",
        })
    }
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] if h > 0 && w > 0 => Ok((b, c, h, w)),
        _ => Err(Error::dim(op, format!("expected [B, C, H, W] with H, W >= 1, got {shape:?}"))),
    }
}

/// `[B, C, H, W] -> [B, H*W, C]` in the order of `d`.
pub fn unfold<'t, S: Scalar>(x: &Var<'t, S>, d: ScanDirection) -> Result<Var<'t, S>> {
    let (b, c, h, w) = nchw("unfold", x.shape())?;
    let order = d.order(h, w);
    let n = h * w;
    let src = x.value().data();
    let mut out = vec![S::zero(); b * n * c];
    for bi in 0..b {
        for (l, &s) in order.iter().enumerate() {
            for ch in 0..c {
                out[(bi * n + l) * c + ch] = src[(bi * c + ch) * n + s];
            }
        }
    }
    let value = Tensor::new(vec![b, n, c], out)?;
    Ok(x.tape().record(value, &[x], move |g, _| {
        let gd = g.data();
        let mut dx = vec![S::zero(); b * c * n];
        for bi in 0..b {
            for (l, &s) in order.iter().enumerate() {
                for ch in 0..c {
                    dx[(bi * c + ch) * n + s] = gd[(bi * n + l) * c + ch];
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![b, c, h, w], dx))]
    }))
}

/// Inverse of [`unfold`]: `[B, H*W, C] -> [B, C, H, W]`.
pub fn refold<'t, S: Scalar>(y: &Var<'t, S>, d: ScanDirection, h: usize, w: usize) -> Result<Var<'t, S>> {
    let n = h * w;
    let (b, c) = match *y.shape() {
        [b, l, c] if l == n && n > 0 => (b, c),
        _ => {
            return Err(Error::dim(
                "refold",
                format!("expected [B, {n}, C] for a {h}x{w} map, got {:?}", y.shape()),
            ))
        }
    };
    let order = d.order(h, w);
    let src = y.value().data();
    let mut out = vec![S::zero(); b * c * n];
    for bi in 0..b {
        for (l, &s) in order.iter().enumerate() {
            for ch in 0..c {
                out[(bi * c + ch) * n + s] = src[(bi * n + l) * c + ch];
            }
        }
    }
    let value = Tensor::new(vec![b, c, h, w], out)?;
    Ok(y.tape().record(value, &[y], move |g, _| {
        let gd = g.data();
        let mut dy = vec![S::zero(); b * n * c];
        for bi in 0..b {
            for (l, &s) in order.iter().enumerate() {
                for ch in 0..c {
                    dy[(bi * n + l) * c + ch] = gd[(bi * c + ch) * n + s];
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![b, n, c], dy))]
    }))
}

/// Four independent selective scans, one per [`ScanDirection::ALL`] entry.
#[derive(Debug, Clone)]
pub struct Ss2d {
    pub scans: [SelectiveScan; 4],
    pub channels: usize,
}

impl Ss2d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        state_dim: usize,
        dt_rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut mk = |k: usize| SelectiveScan::new(store, &format!("{name}.dir{k}"), channels, state_dim, dt_rank, rng);
        Ok(Self {
            scans: [mk(0)?, mk(1)?, mk(2)?, mk(3)?],
            channels,
        })
    }

    /// One direction only: `refold(scan(unfold(x, d)), d)`.
    pub fn branch<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>, k: usize) -> Result<Var<'t, S>> {
        let d = ScanDirection::ALL[k];
        let (_, c, h, w) = nchw("ss2d", x.shape())?;
        if c != self.channels {
            return Err(Error::dim("ss2d", format!("{c} channels for a {}-channel scan", self.channels)));
        }
        let run = || -> Result<Var<'t, S>> {
            let seq = unfold(x, d)?;
            let y = self.scans[k].forward(p, &seq)?;
            refold(&y, d, h, w)
        };
        run().map_err(|e| e.tagged(format!("ss2d {d}")))
    }

    /// `[B, C, H, W] -> [B, C, H, W]`, summed in fixed direction order.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let mut acc = self.branch(p, x, 0)?;
        for k in 1..4 {
            acc = acc.add(&self.branch(p, x, k)?)?;
        }
        Ok(acc)
    }
}
