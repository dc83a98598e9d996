//! Slice-level kernels shared by the naive and fused executors.
//!
//! Accumulation order is fixed everywhere: input channel, then kernel row,
//! then kernel column for convolutions; input features ascending for
//! linear layers. Out-of-bounds (padding) taps are skipped.

use std::fmt::Debug;

use crate::quant::requantize;

pub(crate) trait Element: Copy + PartialOrd + Default + Debug {
    fn relu(self) -> Self;
}

impl Element for f32 {
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
}

impl Element for i8 {
    #[inline]
    fn relu(self) -> Self {
        if self > 0 {
            self
        } else {
            0
        }
    }
}

/// Multiply-accumulate and output conversion for one element type.
pub(crate) trait Arith {
    type Elem: Element;
    type Acc: Copy;

    fn zero(&self) -> Self::Acc;
    fn mac(&self, acc: Self::Acc, x: Self::Elem, w: Self::Elem) -> Self::Acc;
    /// Add the bias for `channel` and convert to an output element.
    fn finish(&self, acc: Self::Acc, channel: usize) -> Self::Elem;
}

pub(crate) struct F32Arith<'a> {
    pub bias: Option<&'a [f32]>,
}

impl Arith for F32Arith<'_> {
    type Elem = f32;
    type Acc = f32;

    #[inline]
    fn zero(&self) -> f32 {
        0.0
    }

    #[inline]
    fn mac(&self, acc: f32, x: f32, w: f32) -> f32 {
        acc + x * w
    }

    #[inline]
    fn finish(&self, acc: f32, channel: usize) -> f32 {
        match self.bias {
            Some(b) => acc + b[channel],
            None => acc,
        }
    }
}

pub(crate) struct I8Arith<'a> {
    pub bias: Option<&'a [i32]>,
    pub multiplier: f32,
}

impl Arith for I8Arith<'_> {
    type Elem = i8;
    type Acc = i32;

    #[inline]
    fn zero(&self) -> i32 {
        0
    }

    #[inline]
    fn mac(&self, acc: i32, x: i8, w: i8) -> i32 {
        acc + i32::from(x) * i32::from(w)
    }

    #[inline]
    fn finish(&self, acc: i32, channel: usize) -> i8 {
        let acc = match self.bias {
            Some(b) => acc + b[channel],
            None => acc,
        };
        requantize(acc, self.multiplier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Observes writes into planned buffers. The default executor uses
/// [`NoProbe`]; diagnostics plug in a recording probe.
pub(crate) trait Probe {
    fn write(&mut self, index: usize);
}

pub(crate) struct NoProbe;

impl Probe for NoProbe {
    #[inline(always)]
    fn write(&mut self, _index: usize) {}
}

/// Full convolution map, one fresh output per call.
pub(crate) fn conv2d<A: Arith>(
    arith: &A,
    input: &[A::Elem],
    weight: &[A::Elem],
    g: &ConvGeom,
) -> Vec<A::Elem> {
    let mut out = vec![A::Elem::default(); g.out_channels * g.out_height * g.out_width];
    let pad = g.padding as isize;
    for oc in 0..g.out_channels {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let mut acc = arith.zero();
                for ic in 0..g.in_channels {
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.in_height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix < 0 || ix >= g.in_width as isize {
                                continue;
                            }
                            let x = input[(ic * g.in_height + iy as usize) * g.in_width + ix as usize];
                            let w = weight[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx];
                            acc = arith.mac(acc, x, w);
                        }
                    }
                }
                out[(oc * g.out_height + oy) * g.out_width + ox] = arith.finish(acc, oc);
            }
        }
    }
    out
}

/// Windowed maximum; padded positions never take part in the max.
pub(crate) fn maxpool_into<E: Element, P: Probe>(
    input: &[E],
    g: &PoolGeom,
    out: &mut [E],
    probe: &mut P,
) {
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.in_height * g.in_width..(c + 1) * g.in_height * g.in_width];
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let mut best: Option<E> = None;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix < 0 || ix >= g.in_width as isize {
                            continue;
                        }
                        let v = plane[iy as usize * g.in_width + ix as usize];
                        match best {
                            Some(b) if !(v > b) => {}
                            _ => best = Some(v),
                        }
                    }
                }
                let index = (c * g.out_height + oy) * g.out_width + ox;
                probe.write(index);
                out[index] = best.expect("every window overlaps the input");
            }
        }
    }
}

/// `out[j] = sum_i in[i] * W[j, i] + b[j]`, optionally followed by ReLU.
pub(crate) fn linear_into<A: Arith, P: Probe>(
    arith: &A,
    input: &[A::Elem],
    weight: &[A::Elem],
    out_features: usize,
    relu: bool,
    out: &mut [A::Elem],
    probe: &mut P,
) {
    let in_features = input.len();
    for (j, row) in weight.chunks_exact(in_features).take(out_features).enumerate() {
        let mut acc = arith.zero();
        for (&x, &w) in input.iter().zip(row) {
            acc = arith.mac(acc, x, w);
        }
        let v = arith.finish(acc, j);
        probe.write(j);
        out[j] = if relu { v.relu() } else { v };
    }
}

/// Convolution with activation and non-overlapping max-pooling computed in
/// one pass.
///
/// For each output channel and pooled coordinate the kernel walks the
/// `pool x pool` window of convolution positions, computes each full
/// convolution sum, applies the activation and keeps a running maximum.
/// Only that maximum is stored, so the pre-pool feature map never exists.
/// Without a pool this degenerates to a convolution with the activation
/// applied on store.
pub(crate) fn fused_conv_into<A: Arith, P: Probe>(
    arith: &A,
    input: &[A::Elem],
    weight: &[A::Elem],
    g: &ConvGeom,
    relu: bool,
    pool: Option<(usize, usize)>,
    out: &mut [A::Elem],
    probe: &mut P,
) {
    let (pool_kernel, pool_stride) = pool.unwrap_or((1, 1));
    let pooled_h = (g.out_height - pool_kernel) / pool_stride + 1;
    let pooled_w = (g.out_width - pool_kernel) / pool_stride + 1;
    let pad = g.padding as isize;
    let taps = g.in_channels * g.kernel * g.kernel;

    for oc in 0..g.out_channels {
        let kernel = &weight[oc * taps..(oc + 1) * taps];
        for py in 0..pooled_h {
            for px in 0..pooled_w {
                // With ReLU every score is >= 0, so a zero start is exact.
                let mut best: Option<A::Elem> = relu.then(A::Elem::default);
                for i in 0..pool_kernel {
                    for j in 0..pool_kernel {
                        let cy = py * pool_stride + i;
                        let cx = px * pool_stride + j;
                        let mut sum = arith.zero();
                        for ic in 0..g.in_channels {
                            for z in 0..g.kernel {
                                let iy = (cy * g.stride + z) as isize - pad;
                                if iy < 0 || iy >= g.in_height as isize {
                                    continue;
                                }
                                let row = (ic * g.in_height + iy as usize) * g.in_width;
                                let krow = (ic * g.kernel + z) * g.kernel;
                                for t in 0..g.kernel {
                                    let ix = (cx * g.stride + t) as isize - pad;
                                    if ix < 0 || ix >= g.in_width as isize {
                                        continue;
                                    }
                                    sum = arith.mac(sum, input[row + ix as usize], kernel[krow + t]);
                                }
                            }
                        }
                        let v = arith.finish(sum, oc);
                        let score = if relu { v.relu() } else { v };
                        match best {
                            Some(b) if !(score > b) => {}
                            _ => best = Some(score),
                        }
                    }
                }
                let index = (oc * pooled_h + py) * pooled_w + px;
                probe.write(index);
                out[index] = best.expect("pool window is non-empty");
            }
        }
    }
}
