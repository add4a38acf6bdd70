//! im2col lowering for 2-D cross-correlation and non-overlapping average pooling.

use serde::{Deserialize, Serialize};

/// `floor((extent + 2*padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit the padded extent.
pub fn conv2d_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Conv2dGeometry {
    pub(crate) fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub(crate) fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    pub(crate) fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// The output columns `first..last` of output row `oy` whose tap
    /// `(ky, kx)` lands inside the input, and the input offset of the first.
    fn span(&self, oy: usize, ky: usize, kx: usize) -> Option<Span> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        if y < 0 || y >= self.height as isize {
            return None;
        }
        let (s, pad) = (self.stride as isize, self.padding as isize);
        // Smallest ox with ox*s + kx - pad >= 0, largest with < width.
        let first = ((pad - kx as isize).max(0) + s - 1) / s;
        let last = ((self.width as isize - 1 + pad - kx as isize).div_euclid(s) + 1).clamp(0, self.out_width as isize);
        if first >= last {
            return None;
        }
        let x = first * s + kx as isize - pad;
        Some(Span {
            first: first as usize,
            last: last as usize,
            src: y as usize * self.width + x as usize,
        })
    }
}

#[derive(Clone, Copy)]
struct Span {
    first: usize,
    last: usize,
    src: usize,
}

/// Patch-matrix lowering for one geometry, with the in-bounds span of
/// every `(ky, kx, oy)` precomputed.
pub(crate) struct Lowering {
    g: Conv2dGeometry,
    spans: Vec<Option<Span>>,
}

impl Lowering {
    pub(crate) fn new(g: &Conv2dGeometry) -> Self {
        let mut spans = Vec::with_capacity(g.kernel * g.kernel * g.out_height);
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                spans.extend((0..g.out_height).map(|oy| g.span(oy, ky, kx)));
            }
        }
        Self { g: *g, spans }
    }

    /// Spans of patch row `tap`, one per output row.
    fn tap_spans(&self, tap: usize) -> &[Option<Span>] {
        let i = tap % (self.g.kernel * self.g.kernel) * self.g.out_height;
        &self.spans[i..i + self.g.out_height]
    }

    fn channel(&self, tap: usize) -> std::ops::Range<usize> {
        let plane = self.g.height * self.g.width;
        let c = tap / (self.g.kernel * self.g.kernel);
        c * plane..(c + 1) * plane
    }

    /// Lowers one image [C,H,W] to its `[C*k*k, Ho*Wo]` patch matrix in `cols`.
    pub(crate) fn im2col(&self, img: &[f64], cols: &mut Vec<f64>) {
        let g = &self.g;
        cols.clear();
        cols.resize(g.patch_len() * g.out_plane(), 0.0);
        for (tap, row) in cols.chunks_exact_mut(g.out_plane()).enumerate() {
            let chan = &img[self.channel(tap)];
            for (dst, span) in row.chunks_exact_mut(g.out_width).zip(self.tap_spans(tap)) {
                let Some(span) = span else { continue };
                let dst = &mut dst[span.first..span.last];
                if g.stride == 1 {
                    dst.copy_from_slice(&chan[span.src..span.src + dst.len()]);
                } else {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = chan[span.src + i * g.stride];
                    }
                }
            }
        }
    }

    /// Adds one image's patch-matrix gradient onto its [C,H,W] gradient.
    pub(crate) fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let g = &self.g;
        for (tap, row) in cols.chunks_exact(g.out_plane()).enumerate() {
            let chan = &mut img[self.channel(tap)];
            for (src, span) in row.chunks_exact(g.out_width).zip(self.tap_spans(tap)) {
                let Some(span) = span else { continue };
                let src = &src[span.first..span.last];
                if g.stride == 1 {
                    let dst = &mut chan[span.src..span.src + src.len()];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                } else {
                    for (i, v) in src.iter().enumerate() {
                        chan[span.src + i * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Non-overlapping `k x k` mean pooling over [N, H, W] planes (N = B*C).
pub(crate) fn avgpool(planes: usize, h: usize, w: usize, k: usize, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for (src, dst) in input.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for (oy, acc) in dst.chunks_exact_mut(ow).enumerate() {
            for row in src[oy * k * w..(oy + 1) * k * w].chunks_exact(w) {
                for (a, win) in acc.iter_mut().zip(row.chunks_exact(k)) {
                    *a += win.iter().sum::<f64>();
                }
            }
            acc.iter_mut().for_each(|a| *a *= scale);
        }
    }
    debug_assert_eq!(input.len(), planes * h * w);
    out
}

pub(crate) fn avgpool_backward(planes: usize, h: usize, w: usize, k: usize, grad_out: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    debug_assert_eq!(grad_out.len(), planes * oh * ow);
    let mut out = Vec::with_capacity(planes * h * w);
    for src in grad_out.chunks_exact(oh * ow) {
        for y in 0..h {
            if y / k < oh {
                for &g in &src[(y / k) * ow..(y / k + 1) * ow] {
                    out.extend(std::iter::repeat(g * scale).take(k));
                }
                out.extend(std::iter::repeat(0.0).take(w - ow * k));
            } else {
                out.extend(std::iter::repeat(0.0).take(w));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv2d_output_extent(28, 5, 1, 0), Some(24));
        assert_eq!(conv2d_output_extent(3, 3, 1, 0), Some(1));
        assert_eq!(conv2d_output_extent(4, 3, 2, 1), Some(2));
        assert_eq!(conv2d_output_extent(2, 5, 1, 1), None);
    }

    #[test]
    fn im2col_matches_per_tap_definition() {
        for (stride, padding) in [(1, 0), (1, 2), (2, 1), (3, 2), (2, 0), (1, 4)] {
            let (h, w, k) = (6, 5, 3);
            let g = Conv2dGeometry {
                batch: 2,
                in_channels: 2,
                height: h,
                width: w,
                out_channels: 1,
                kernel: k,
                stride,
                padding,
                out_height: conv2d_output_extent(h, k, stride, padding).unwrap(),
                out_width: conv2d_output_extent(w, k, stride, padding).unwrap(),
            };
            let x: Vec<f64> = (0..2 * 2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = Vec::new();
            let mut all = Vec::new();
            let low = Lowering::new(&g);
            for img in x.chunks(g.in_image()) {
                low.im2col(img, &mut cols);
                all.extend_from_slice(&cols);
            }
            let mut expect = Vec::new();
            for b in 0..2 {
                for c in 0..2 {
                    for ky in 0..k {
                        for kx in 0..k {
                            for oy in 0..g.out_height {
                                for ox in 0..g.out_width {
                                    let y = (oy * stride + ky) as isize - padding as isize;
                                    let xx = (ox * stride + kx) as isize - padding as isize;
                                    let inside = (0..h as isize).contains(&y) && (0..w as isize).contains(&xx);
                                    expect.push(if inside {
                                        x[((b * 2 + c) * h + y as usize) * w + xx as usize]
                                    } else {
                                        0.0
                                    });
                                }
                            }
                        }
                    }
                }
            }
            assert_eq!(all, expect, "stride {stride}, padding {padding}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for any x, c.
        let g = Conv2dGeometry {
            batch: 1,
            in_channels: 2,
            height: 5,
            width: 4,
            out_channels: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
            out_height: conv2d_output_extent(5, 3, 2, 1).unwrap(),
            out_width: conv2d_output_extent(4, 3, 2, 1).unwrap(),
        };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let c: Vec<f64> = (0..g.out_plane() * g.patch_len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let low = Lowering::new(&g);
        let mut cols = Vec::new();
        low.im2col(&x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        low.col2im(&c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pooling_averages_blocks() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = avgpool(1, 4, 4, 2, &x);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
        let g = avgpool_backward(1, 4, 4, 2, &[4.0, 0.0, 0.0, 0.0]);
        assert_eq!(&g[..2], &[1.0, 1.0]);
        assert_eq!(g.iter().sum::<f64>(), 4.0);
        // Rows and columns past the last full window get no gradient.
        let g = avgpool_backward(2, 5, 5, 2, &[4.0; 8]);
        assert_eq!(g.len(), 50);
        assert_eq!(&g[..5], &[1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(&g[20..25], &[0.0; 5]);
        assert_eq!(g.iter().sum::<f64>(), 32.0);
    }
}
