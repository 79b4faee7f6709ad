//! 3D convolution as a sum of shifted gemms over frame-padded buffers.
//!
//! Each frame is zero-padded in `H` and `W` to `Hp × Wp`. For a kernel offset,
//! input and output positions then differ by one constant flat shift, so the
//! offset's contribution is a single gemm per sample over a contiguous span.
//! Outputs are computed at stride 1 and subsampled.

use super::ConvGeom;
use crate::tensor::{Real, Strided, StridedMut};

struct Span {
    dst: usize,
    src: usize,
    len: usize,
}

impl ConvGeom {
    fn hp(&self) -> usize {
        self.h + 2 * (self.kh / 2)
    }

    fn wp(&self) -> usize {
        self.w + 2 * (self.kw / 2)
    }

    fn frame(&self) -> usize {
        self.hp() * self.wp()
    }

    /// Per-channel length of a padded buffer.
    fn padded(&self) -> usize {
        self.n * self.f * self.frame()
    }

    /// Kernel offsets in weight order with their spans.
    fn offsets(&self) -> Vec<(usize, Vec<Span>)> {
        let (pt, ph, pw) = (self.kt / 2, self.kh / 2, self.kw / 2);
        let (wp, frame) = (self.wp(), self.frame());
        let mut out = Vec::with_capacity(self.kt * self.kh * self.kw);
        for dt in 0..self.kt {
            // output frames fo with fo + dt - pt inside [0, F)
            let lo = pt.saturating_sub(dt);
            let hi = (self.f + pt).saturating_sub(dt).min(self.f);
            for dh in 0..self.kh {
                for dw in 0..self.kw {
                    let k = (dt * self.kh + dh) * self.kw + dw;
                    let mut spans = Vec::new();
                    if lo < hi {
                        for n in 0..self.n {
                            let dst = (n * self.f + lo) * frame + ph * wp + pw;
                            let end = (n * self.f + hi - 1) * frame + (self.hp() - ph - 1) * wp + (wp - pw);
                            let src = (dst + dt * frame + dh * wp + dw) - (pt * frame + ph * wp + pw);
                            spans.push(Span { dst, src, len: end - dst });
                        }
                    }
                    out.push((k, spans));
                }
            }
        }
        out
    }
}

/// Channels-last `[N, F, h, w, C]` into padded channel-major `[C][N·F][Hp][Wp]`,
/// placing element `(i, j)` at padded position `(i·step + ph, j·step + pw)`.
fn pad_cm<T: Real>(g: &ConvGeom, x: &[T], c: usize, h: usize, w: usize, step: usize) -> Vec<T> {
    let (ph, pw, wp, frame, plane) = (g.kh / 2, g.kw / 2, g.wp(), g.frame(), g.padded());
    let mut out = vec![T::zero(); c * plane];
    for (p, px) in x.chunks_exact(c).enumerate() {
        let (nf, rest) = (p / (h * w), p % (h * w));
        let at = nf * frame + ((rest / w) * step + ph) * wp + (rest % w) * step + pw;
        for (ch, &v) in px.iter().enumerate() {
            out[ch * plane + at] = v;
        }
    }
    out
}

/// Channels-last into padded channels-last `[N·F][Hp][Wp][C]`.
fn pad_cl<T: Real>(g: &ConvGeom, x: &[T], c: usize, h: usize, w: usize, step: usize) -> Vec<T> {
    let (ph, pw, wp, frame) = (g.kh / 2, g.kw / 2, g.wp(), g.frame());
    let mut out = vec![T::zero(); c * g.padded()];
    for (p, px) in x.chunks_exact(c).enumerate() {
        let (nf, rest) = (p / (h * w), p % (h * w));
        let at = nf * frame + ((rest / w) * step + ph) * wp + (rest % w) * step + pw;
        out[at * c..(at + 1) * c].copy_from_slice(px);
    }
    out
}

/// Inverse of [`pad_cm`]: gathers the `h × w` grid back to channels-last.
fn unpad_cm<T: Real>(g: &ConvGeom, src: &[T], c: usize, h: usize, w: usize, step: usize) -> Vec<T> {
    let (ph, pw, wp, frame, plane) = (g.kh / 2, g.kw / 2, g.wp(), g.frame(), g.padded());
    let mut out = vec![T::zero(); g.n * g.f * h * w * c];
    for (p, px) in out.chunks_exact_mut(c).enumerate() {
        let (nf, rest) = (p / (h * w), p % (h * w));
        let at = nf * frame + ((rest / w) * step + ph) * wp + (rest % w) * step + pw;
        for (ch, v) in px.iter_mut().enumerate() {
            *v = src[ch * plane + at];
        }
    }
    out
}

pub(super) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (ci, co, plane) = (g.ci, g.co, g.padded());
    let xp = pad_cm(g, x, ci, g.h, g.w, 1);
    let mut yp = vec![T::zero(); co * plane];
    for (k, spans) in g.offsets() {
        let wk = &w[k * ci * co..(k + 1) * ci * co];
        for s in spans {
            T::gemm_strided(
                co,
                ci,
                s.len,
                Strided { data: wk, rs: 1, cs: co },
                Strided { data: &xp[s.src..], rs: plane, cs: 1 },
                StridedMut { data: &mut yp[s.dst..], rs: plane, cs: 1 },
                T::one(),
            );
        }
    }
    let mut out = unpad_cm(g, &yp, co, g.ho, g.wo, g.stride);
    for row in out.chunks_exact_mut(co) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
    out
}

/// Weight gradient `[kt, kh, kw, Ci, Co]` for upstream `dy` (channels-last output shape).
pub(super) fn weight_grad<T: Real>(g: &ConvGeom, x: &[T], dy: &[T]) -> Vec<T> {
    let (ci, co) = (g.ci, g.co);
    let xp = pad_cl(g, x, ci, g.h, g.w, 1);
    let gp = pad_cl(g, dy, co, g.ho, g.wo, g.stride);
    let mut dw = vec![T::zero(); g.patch() * co];
    for (k, spans) in g.offsets() {
        let dk = &mut dw[k * ci * co..(k + 1) * ci * co];
        for s in spans {
            T::gemm_strided(
                ci,
                s.len,
                co,
                Strided { data: &xp[s.src * ci..], rs: 1, cs: ci },
                Strided { data: &gp[s.dst * co..], rs: co, cs: 1 },
                StridedMut { data: dk, rs: co, cs: 1 },
                T::one(),
            );
        }
    }
    dw
}

/// Input gradient (channels-last input shape).
pub(super) fn input_grad<T: Real>(g: &ConvGeom, w: &[T], dy: &[T]) -> Vec<T> {
    let (ci, co, plane) = (g.ci, g.co, g.padded());
    let gp = pad_cm(g, dy, co, g.ho, g.wo, g.stride);
    let mut dxp = vec![T::zero(); ci * plane];
    for (k, spans) in g.offsets() {
        let wk = &w[k * ci * co..(k + 1) * ci * co];
        for s in spans {
            T::gemm_strided(
                ci,
                co,
                s.len,
                Strided { data: wk, rs: co, cs: 1 },
                Strided { data: &gp[s.dst..], rs: plane, cs: 1 },
                StridedMut { data: &mut dxp[s.src..], rs: plane, cs: 1 },
                T::one(),
            );
        }
    }
    unpad_cm(g, &dxp, ci, g.h, g.w, 1)
}
