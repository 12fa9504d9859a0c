//! Resampling between original and working resolution.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::upsample_bilinear_forward;
use crate::maps::{BinaryMask, ProbabilityMap};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    /// Align-corners bilinear interpolation.
    Bilinear,
    /// Output pixel o samples input pixel floor(o · in / out).
    Nearest,
}

impl fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResizeMode::Bilinear => "bilinear",
            ResizeMode::Nearest => "nearest",
        })
    }
}

impl FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(ResizeMode::Bilinear),
            "nearest" => Ok(ResizeMode::Nearest),
            _ => Err(Error::invalid(format!("unknown resize mode `{s}`"))),
        }
    }
}

fn check_target(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::EmptyOutput {
            op: "resize",
            height: out_h as i64,
            width: out_w as i64,
        });
    }
    Ok(())
}

pub fn nearest_source(out_index: usize, in_size: usize, out_size: usize) -> usize {
    out_index * in_size / out_size
}

fn nearest_plane<T: Copy>(src: &[T], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let row = nearest_source(oy, in_h, out_h) * in_w;
        for ox in 0..out_w {
            out.push(src[row + nearest_source(ox, in_w, out_w)]);
        }
    }
    out
}

/// Resizes every channel of a (n, c, h, w) tensor.
pub fn resize_tensor(t: &Tensor, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor> {
    check_target(out_h, out_w)?;
    let s = t.shape();
    match mode {
        ResizeMode::Bilinear => upsample_bilinear_forward(t, out_h, out_w),
        ResizeMode::Nearest => {
            let mut data = Vec::with_capacity(s.batch * s.channels * out_h * out_w);
            for plane in t.data().chunks(s.plane()) {
                data.extend(nearest_plane(plane, s.height, s.width, out_h, out_w));
            }
            let shape = Shape::new(s.batch, s.channels, out_h, out_w);
            Tensor::new(shape, data)
        }
    }
}

/// Resizes a probability map, keeping its recorded source size.
pub fn resize_probability(map: &ProbabilityMap, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<ProbabilityMap> {
    check_target(out_h, out_w)?;
    let resized = resize_tensor(&map.to_tensor(), out_h, out_w, mode)?;
    let values = resized.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let (sh, sw) = map.source_size();
    Ok(ProbabilityMap::new(out_h, out_w, values)?.with_source_size(sh, sw))
}

/// Nearest-neighbor resize of a binary mask.
pub fn resize_mask(mask: &BinaryMask, out_h: usize, out_w: usize) -> Result<BinaryMask> {
    check_target(out_h, out_w)?;
    let bits = nearest_plane(mask.bits(), mask.height(), mask.width(), out_h, out_w);
    BinaryMask::new(out_h, out_w, bits)
}
