//! Same-padded, stride-1 2D convolution over channel-major planes.

/// Shape of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    /// Odd kernel side length.
    pub k: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.cin + i) * self.k + ky) * self.k + kx
    }
}

/// Valid `(out_start, in_start, len)` span of a row when the input is read at
/// offset `d` relative to the output.
#[inline]
fn span(n: usize, d: isize) -> Option<(usize, usize, usize)> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize);
    if hi <= lo as isize {
        return None;
    }
    Some((lo, (lo as isize + d) as usize, hi as usize - lo))
}

pub fn forward(
    shape: ConvShape,
    input: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let hw = h * w;
    let r = (shape.k / 2) as isize;
    let mut out = vec![0.0; shape.cout * hw];
    for o in 0..shape.cout {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.fill(bias[o]);
        for i in 0..shape.cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..shape.k {
                let dy = ky as isize - r;
                let Some((y0, sy0, ny)) = span(h, dy) else { continue };
                for kx in 0..shape.k {
                    let dx = kx as isize - r;
                    let Some((x0, sx0, nx)) = span(w, dx) else { continue };
                    let wv = weight[shape.widx(o, i, ky, kx)];
                    for row in 0..ny {
                        let dst = &mut plane[(y0 + row) * w + x0..][..nx];
                        let s = &src[(sy0 + row) * w + sx0..][..nx];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and, when requested, returns the
/// gradient with respect to the input.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    shape: ConvShape,
    input: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let hw = h * w;
    let r = (shape.k / 2) as isize;
    let mut grad_in = want_input_grad.then(|| vec![0.0; shape.cin * hw]);
    for o in 0..shape.cout {
        let go = &grad_out[o * hw..(o + 1) * hw];
        grad_bias[o] += go.iter().sum::<f64>();
        for i in 0..shape.cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..shape.k {
                let dy = ky as isize - r;
                let Some((y0, sy0, ny)) = span(h, dy) else { continue };
                for kx in 0..shape.k {
                    let dx = kx as isize - r;
                    let Some((x0, sx0, nx)) = span(w, dx) else { continue };
                    let wi = shape.widx(o, i, ky, kx);
                    let mut acc = 0.0;
                    for row in 0..ny {
                        let g = &go[(y0 + row) * w + x0..][..nx];
                        let s = &src[(sy0 + row) * w + sx0..][..nx];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_weight[wi] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let wv = weight[wi];
                        let gplane = &mut gi[i * hw..(i + 1) * hw];
                        for row in 0..ny {
                            let g = &go[(y0 + row) * w + x0..][..nx];
                            let d = &mut gplane[(sy0 + row) * w + sx0..][..nx];
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}
