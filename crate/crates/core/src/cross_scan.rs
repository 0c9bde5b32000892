//! Four-direction serialization of a token grid ("cross-scan"), per-direction
//! selective scans, and the merge back onto the grid.
//!
//! Orders over row-major token indices of an `H x W` grid:
//! - `LR`: row-major
//! - `TB`: column-major
//! - `RL`: reversed row-major
//! - `BT`: reversed column-major

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::ssm::{selective_scan_seq, selective_scan_vjp, SsmParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    LR,
    TB,
    RL,
    BT,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::LR, Direction::TB, Direction::RL, Direction::BT];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    pub direction: Direction,
    pub height: usize,
    pub width: usize,
    /// `perm[k]` is the grid index visited at sequence step `k`.
    pub perm: Vec<usize>,
    /// `inverse[perm[k]] == k`.
    pub inverse: Vec<usize>,
}

pub fn scan_order(direction: Direction, height: usize, width: usize) -> Result<ScanOrder> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "scan order over a {height}x{width} grid"
        )));
    }
    let n = height * width;
    let column_major = || {
        (0..width)
            .flat_map(move |x| (0..height).map(move |y| y * width + x))
            .collect::<Vec<_>>()
    };
    let perm: Vec<usize> = match direction {
        Direction::LR => (0..n).collect(),
        Direction::TB => column_major(),
        Direction::RL => (0..n).rev().collect(),
        Direction::BT => {
            let mut v = column_major();
            v.reverse();
            v
        }
    };
    let mut inverse = vec![0; n];
    for (k, &g) in perm.iter().enumerate() {
        inverse[g] = k;
    }
    Ok(ScanOrder {
        direction,
        height,
        width,
        perm,
        inverse,
    })
}

impl ScanOrder {
    /// `[H, W, C]` grid -> `[L, C]` sequence.
    pub fn gather(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w, c) = x.dims3()?;
        self.expect_grid(h, w)?;
        let mut out = Vec::with_capacity(x.len());
        for &g in &self.perm {
            out.extend_from_slice(&x.data()[g * c..(g + 1) * c]);
        }
        Tensor::new(vec![h * w, c], out)
    }

    /// Adds an `[L, C]` sequence back onto its grid positions in `grid`.
    pub fn scatter_add(&self, seq: &Tensor, grid: &mut Tensor) -> Result<()> {
        let (l, c) = seq.dims2()?;
        let (h, w, gc) = grid.dims3()?;
        self.expect_grid(h, w)?;
        if l != h * w || gc != c {
            return Err(Error::shape(
                "cross_merge",
                format!("sequence {:?} onto grid {:?}", seq.shape(), grid.shape()),
            ));
        }
        let gd = grid.data_mut();
        for (k, &g) in self.perm.iter().enumerate() {
            for (dst, src) in gd[g * c..(g + 1) * c].iter_mut().zip(&seq.data()[k * c..(k + 1) * c]) {
                *dst += src;
            }
        }
        Ok(())
    }

    fn expect_grid(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                "scan_order",
                format!("order for {}x{}, grid {h}x{w}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

fn orders(h: usize, w: usize) -> Result<[ScanOrder; 4]> {
    Ok([
        scan_order(Direction::LR, h, w)?,
        scan_order(Direction::TB, h, w)?,
        scan_order(Direction::RL, h, w)?,
        scan_order(Direction::BT, h, w)?,
    ])
}

/// `x: [H, W, C]` -> sequences in `LR, TB, RL, BT` order, each `[H*W, C]`.
pub fn cross_scan(x: &Tensor) -> Result<[Tensor; 4]> {
    let (h, w, _) = x.dims3()?;
    let [a, b, c, d] = orders(h, w)?;
    Ok([a.gather(x)?, b.gather(x)?, c.gather(x)?, d.gather(x)?])
}

/// Un-permutes each directional sequence to the grid and sums them.
pub fn cross_merge(seqs: &[Tensor; 4], height: usize, width: usize) -> Result<Tensor> {
    let (l, c) = seqs[0].dims2()?;
    for s in &seqs[1..] {
        if s.shape() != seqs[0].shape() {
            return Err(Error::shape(
                "cross_merge",
                format!("{:?} vs {:?}", seqs[0].shape(), s.shape()),
            ));
        }
    }
    if l != height * width {
        return Err(Error::shape(
            "cross_merge",
            format!("sequence length {l} for a {height}x{width} grid"),
        ));
    }
    let mut grid = Tensor::zeros(&[height, width, c]);
    for (order, seq) in orders(height, width)?.iter().zip(seqs) {
        order.scatter_add(seq, &mut grid)?;
    }
    Ok(grid)
}

/// Per-direction S6 parameters. One entry ties all four directions to the
/// same weights; four entries give each direction its own.
#[derive(Clone, Debug, PartialEq)]
pub struct Ss2dParams {
    pub directions: Vec<SsmParams>,
}

impl Ss2dParams {
    pub fn independent(params: [SsmParams; 4]) -> Self {
        Self {
            directions: params.into(),
        }
    }

    pub fn tied(params: SsmParams) -> Self {
        Self {
            directions: vec![params],
        }
    }

    pub fn for_direction(&self, i: usize) -> &SsmParams {
        if self.directions.len() == 1 {
            &self.directions[0]
        } else {
            &self.directions[i]
        }
    }

    fn check(&self) -> Result<()> {
        match self.directions.len() {
            1 | 4 => Ok(()),
            n => Err(Error::InvalidArgument(format!(
                "ss2d needs 1 (tied) or 4 parameter sets, got {n}"
            ))),
        }
    }
}

impl Parameters for Ss2dParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.directions.visit(&join(prefix, "directions"), f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.directions.visit_mut(&join(prefix, "directions"), f)
    }
}

/// Cross-scan -> per-direction selective scan -> cross-merge.
pub fn ss2d(x: &Tensor, params: &Ss2dParams) -> Result<Tensor> {
    params.check()?;
    let (h, w, _) = x.dims3()?;
    let seqs = cross_scan(x)?;
    let outs: Vec<Tensor> = (0..4)
        .into_par_iter()
        .map(|i| selective_scan_seq(&seqs[i], params.for_direction(i)))
        .collect::<Result<_>>()?;
    let outs: [Tensor; 4] = outs.try_into().expect("four directions");
    cross_merge(&outs, h, w)
}

/// Returns `(dx, parameter gradients)` for `<dy, ss2d(x)>`.
pub fn ss2d_vjp(x: &Tensor, params: &Ss2dParams, dy: &Tensor) -> Result<(Tensor, Ss2dParams)> {
    params.check()?;
    x.expect_same_shape("ss2d_vjp", dy)?;
    let (h, w, c) = x.dims3()?;
    let ords = orders(h, w)?;
    let per_dir: Vec<(Tensor, SsmParams)> = (0..4)
        .into_par_iter()
        .map(|i| {
            let xs = ords[i].gather(x)?;
            let gs = ords[i].gather(dy)?;
            selective_scan_vjp(&xs, params.for_direction(i), &gs)
        })
        .collect::<Result<_>>()?;
    let mut dx = Tensor::zeros(&[h, w, c]);
    let mut grads = params.clone();
    grads.visit_mut("", &mut |_, t| t.fill(0.0));
    for (i, (dseq, g)) in per_dir.into_iter().enumerate() {
        ords[i].scatter_add(&dseq, &mut dx)?;
        let slot = if grads.directions.len() == 1 { 0 } else { i };
        crate::params::accumulate(&mut grads.directions[slot], &g);
    }
    Ok((dx, grads))
}
